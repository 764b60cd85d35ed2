//! Skip-connected segmentation decoder over the four tapped encoder
//! states: tokens reshaped to their 3D grid, upsampled stage by stage with
//! trilinear interpolation and sparse 3×3×3 convolutions, fusing one tap
//! per stage from the deepest to the shallowest.

use super::EvalError;
use crate::autodiff::{NodeId, Tape, GATHER_ZERO_ROW};
use crate::nn::params::{init_linear, linear, Bound, ParamSet};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const SKIP_TAPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegDecoderConfig {
    /// Output channels after each fusion stage, coarsest first.
    pub channels: [usize; SKIP_TAPS],
    pub classes: usize,
}

impl SegDecoderConfig {
    pub fn desk(classes: usize) -> SegDecoderConfig {
        SegDecoderConfig { channels: [16, 16, 8, 8], classes }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.classes < 2 {
            return Err(EvalError::BadConfig("need at least 2 segmentation classes".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(EvalError::BadConfig("decoder channels must be positive".into()));
        }
        Ok(())
    }
}

const OFFSETS: [[isize; 3]; 27] = {
    let mut out = [[0isize; 3]; 27];
    let mut i = 0;
    let mut z = -1isize;
    while z <= 1 {
        let mut y = -1isize;
        while y <= 1 {
            let mut x = -1isize;
            while x <= 1 {
                out[i] = [x, y, z];
                i += 1;
                x += 1;
            }
            y += 1;
        }
        z += 1;
    }
    out
};

/// Zero-padded 3×3×3 convolution over channel rows laid out x-fastest on
/// `grid`: gather the 27 neighbourhoods, concatenate along channels, and
/// apply one dense kernel.
fn conv3(
    tape: &mut Tape,
    x: NodeId,
    grid: [usize; 3],
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, EvalError> {
    let [gx, gy, gz] = grid;
    let cells = gx * gy * gz;
    let mut parts = Vec::with_capacity(OFFSETS.len());
    for off in OFFSETS {
        let mut ids = Vec::with_capacity(cells);
        for z in 0..gz as isize {
            for y in 0..gy as isize {
                for xc in 0..gx as isize {
                    let (nx, ny, nz) = (xc + off[0], y + off[1], z + off[2]);
                    let inside = nx >= 0
                        && ny >= 0
                        && nz >= 0
                        && nx < gx as isize
                        && ny < gy as isize
                        && nz < gz as isize;
                    ids.push(if inside {
                        (nx + gx as isize * (ny + gy as isize * nz)) as usize
                    } else {
                        GATHER_ZERO_ROW
                    });
                }
            }
        }
        parts.push(tape.gather_rows(x, &ids)?);
    }
    let stacked = tape.concat(&parts, 1)?;
    Ok(linear(tape, stacked, w, Some(b))?)
}

fn stage_grids(grid: [usize; 3], extents: [usize; 3]) -> [[usize; 3]; SKIP_TAPS] {
    let mut gs = [[0usize; 3]; SKIP_TAPS];
    for (s, g) in gs.iter_mut().enumerate() {
        for a in 0..3 {
            g[a] = (grid[a] << s).min(extents[a]);
        }
    }
    gs[SKIP_TAPS - 1] = extents;
    gs
}

pub fn init_seg_decoder(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    embed: usize,
    cfg: &SegDecoderConfig,
) {
    let kernel = OFFSETS.len();
    for s in 0..SKIP_TAPS {
        let fan_in = if s == 0 { kernel * embed } else { kernel * (cfg.channels[s - 1] + embed) };
        params.insert(format!("{prefix}.stage{s}.w"), init_linear(rng, fan_in, cfg.channels[s]));
        params.insert(format!("{prefix}.stage{s}.b"), Tensor::zeros(&[cfg.channels[s]]));
    }
    params.insert(
        format!("{prefix}.head.w"),
        init_linear(rng, cfg.channels[SKIP_TAPS - 1], cfg.classes),
    );
    params.insert(format!("{prefix}.head.b"), Tensor::zeros(&[cfg.classes]));
}

/// Decode per-voxel class logits from the four tapped token states
/// (encoder order, shallowest first). The deepest tap seeds the coarsest
/// stage; each following stage doubles the grid (capped at the volume
/// extents), pulls in the next-shallower tap, and convolves.
pub fn seg_decode(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &SegDecoderConfig,
    taps: &[NodeId],
    grid: [usize; 3],
    extents: [usize; 3],
) -> Result<NodeId, EvalError> {
    cfg.validate()?;
    if taps.len() != SKIP_TAPS {
        return Err(EvalError::BadConfig(format!(
            "decoder consumes {SKIP_TAPS} taps, got {}",
            taps.len()
        )));
    }
    let cells = grid[0] * grid[1] * grid[2];
    let mut embed = None;
    for (i, &t) in taps.iter().enumerate() {
        let (rows, cols) = tape.value(t).dims2("seg_decode").map_err(EvalError::Tensor)?;
        if rows != cells {
            return Err(EvalError::BadConfig(format!(
                "tap {i} has {rows} tokens for grid {grid:?} ({cells} cells)"
            )));
        }
        if *embed.get_or_insert(cols) != cols {
            return Err(EvalError::BadConfig("taps disagree in width".into()));
        }
    }
    let grids = stage_grids(grid, extents);

    let mut x = {
        let w = bound.id(&format!("{prefix}.stage0.w"));
        let b = bound.id(&format!("{prefix}.stage0.b"));
        let h = conv3(tape, taps[SKIP_TAPS - 1], grids[0], w, b)?;
        tape.relu(h)
    };
    for s in 1..SKIP_TAPS {
        let up = tape.resample3d(x, grids[s - 1], grids[s])?;
        let skip = tape.resample3d(taps[SKIP_TAPS - 1 - s], grid, grids[s])?;
        let fused = tape.concat(&[up, skip], 1)?;
        let w = bound.id(&format!("{prefix}.stage{s}.w"));
        let b = bound.id(&format!("{prefix}.stage{s}.b"));
        let h = conv3(tape, fused, grids[s], w, b)?;
        x = tape.relu(h);
    }
    let w = bound.id(&format!("{prefix}.head.w"));
    let b = bound.id(&format!("{prefix}.head.b"));
    Ok(linear(tape, x, w, Some(b))?)
}

/// Argmax class per voxel from a `[voxels, classes]` logit tensor.
pub fn seg_label_map(logits: &Tensor) -> Vec<u16> {
    let (rows, cols) = logits.dims2("seg_label_map").expect("2-d logits");
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

/// One-hot voxel targets from a label map.
pub fn seg_targets(labels: &[u16], classes: usize) -> Result<Tensor, EvalError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(EvalError::BadConfig(format!("label {l} outside {classes} classes")));
        }
        data[i * classes + l as usize] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}
