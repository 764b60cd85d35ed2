//! 3D vision transformer: patchification, position-embedding interpolation,
//! and the tapped encoder forward pass.

use super::block::{block_forward, init_block};
use super::params::{init_linear, init_normal, linear, Bound, ParamSet};
use super::NnError;
use crate::autodiff::{NodeId, Tape, GATHER_ZERO_ROW};
use crate::tensor::Tensor;
use crate::volume::Volume;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub patch: [usize; 3],
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub base_grid: [usize; 3],
    /// 1-based block indices whose patch states are recorded.
    pub taps: Vec<usize>,
}

impl ViTConfig {
    /// Desk-scale encoder; paper-scale dimensions stay expressible here.
    pub fn desk() -> ViTConfig {
        ViTConfig {
            patch: [8, 8, 8],
            embed: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            base_grid: [8, 8, 2],
            taps: default_taps(4),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.patch.iter().any(|&p| p == 0) || self.base_grid.iter().any(|&g| g == 0) {
            return Err(NnError::BadConfig("zero patch or base-grid extent".into()));
        }
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(NnError::BadConfig(format!(
                "embed {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if !self.taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(NnError::BadConfig("tap indices must strictly increase".into()));
        }
        if self.taps.first().is_some_and(|&t| t == 0) {
            return Err(NnError::BadConfig("tap indices are 1-based".into()));
        }
        if let Some(&last) = self.taps.last() {
            if last != self.depth {
                return Err(NnError::BadConfig(format!(
                    "last tap {last} must be the final layer {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed * self.mlp_ratio
    }
}

/// Final layer plus three evenly spaced intermediates: depth·{¼,½,¾,1}.
pub fn default_taps(depth: usize) -> Vec<usize> {
    (1..=4).map(|k| (depth * k).div_ceil(4)).collect()
}

/// Raw patch features before projection.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    /// [tokens, patch_volume], token order x-fastest over the patch grid,
    /// voxels x-fastest within each patch.
    pub features: Tensor,
    pub grid: [usize; 3],
}

pub fn patchify(v: &Volume, patch: [usize; 3]) -> Result<PatchTokens, NnError> {
    let ext = v.extents();
    for axis in 0..3 {
        if patch[axis] == 0 || ext[axis] % patch[axis] != 0 {
            return Err(NnError::PatchDivisibility {
                axis,
                extent: ext[axis],
                patch: patch[axis],
            });
        }
    }
    let grid = [ext[0] / patch[0], ext[1] / patch[1], ext[2] / patch[2]];
    let tokens = grid[0] * grid[1] * grid[2];
    let pv = patch[0] * patch[1] * patch[2];
    let mut features = Vec::with_capacity(tokens * pv);
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                for dz in 0..patch[2] {
                    for dy in 0..patch[1] {
                        for dx in 0..patch[0] {
                            features.push(v.at(
                                gx * patch[0] + dx,
                                gy * patch[1] + dy,
                                gz * patch[2] + dz,
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(PatchTokens {
        features: Tensor::new(vec![tokens, pv], features).expect("valid shape"),
        grid,
    })
}

/// Register the encoder's parameters under `prefix`.
pub fn init_vit(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ViTConfig) {
    params.insert(
        format!("{prefix}.patch_embed.w"),
        init_linear(rng, cfg.patch_volume(), cfg.embed),
    );
    params.insert(format!("{prefix}.patch_embed.b"), Tensor::zeros(&[cfg.embed]));
    params.insert(format!("{prefix}.cls"), init_normal(rng, &[1, cfg.embed], 0.02));
    params.insert(format!("{prefix}.cls_pos"), init_normal(rng, &[1, cfg.embed], 0.02));
    let base: usize = cfg.base_grid.iter().product();
    params.insert(format!("{prefix}.pos"), init_normal(rng, &[base, cfg.embed], 0.02));
    params.insert(format!("{prefix}.mask_token"), init_normal(rng, &[1, cfg.embed], 0.02));
    for i in 1..=cfg.depth {
        init_block(params, rng, &format!("{prefix}.block{i}"), cfg.embed, cfg.mlp_hidden());
    }
}

/// Trilinear interpolation of the stored position grid onto the token grid;
/// identical grids pass the embeddings through bitwise.
pub fn interpolate_positions(
    tape: &mut Tape,
    pos: NodeId,
    base_grid: [usize; 3],
    target_grid: [usize; 3],
) -> Result<NodeId, NnError> {
    if base_grid == target_grid {
        return Ok(pos);
    }
    Ok(tape.resample3d(pos, base_grid, target_grid)?)
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// [1, embed] sequence-summary state.
    pub cls: NodeId,
    /// [tokens, embed] patch states after the final block.
    pub patches: NodeId,
    /// Patch states after each configured tap layer.
    pub tapped: Vec<NodeId>,
    pub grid: [usize; 3],
}

/// Full encoder forward. `mask` lists patch-token indices whose embeddings
/// are replaced by the learned mask token before positions are added.
pub fn encode_volume(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &ViTConfig,
    v: &Volume,
    mask: Option<&[usize]>,
) -> Result<EncoderOutput, NnError> {
    cfg.validate()?;
    let raw = patchify(v, cfg.patch)?;
    let tokens = raw.features.shape()[0];
    let grid = raw.grid;

    let feats = tape.constant(raw.features);
    let mut tok = linear(
        tape,
        feats,
        bound.id(&format!("{prefix}.patch_embed.w")),
        Some(bound.id(&format!("{prefix}.patch_embed.b"))),
    )?;

    if let Some(masked) = mask {
        if let Some(&bad) = masked.iter().find(|&&m| m >= tokens) {
            return Err(NnError::MaskOutOfRange { token: bad, count: tokens });
        }
        let mut keep = vec![1.0; tokens];
        let mut gather = vec![GATHER_ZERO_ROW; tokens];
        for &m in masked {
            keep[m] = 0.0;
            gather[m] = 0;
        }
        let keep_mat = {
            let data: Vec<f64> =
                keep.iter().flat_map(|&k| std::iter::repeat(k).take(cfg.embed)).collect();
            tape.constant(Tensor::new(vec![tokens, cfg.embed], data).expect("valid shape"))
        };
        let kept = tape.mul(tok, keep_mat)?;
        let fill = tape.gather_rows(bound.id(&format!("{prefix}.mask_token")), &gather)?;
        tok = tape.add(kept, fill)?;
    }

    let pos = interpolate_positions(tape, bound.id(&format!("{prefix}.pos")), cfg.base_grid, grid)?;
    tok = tape.add(tok, pos)?;

    let cls = tape.add(bound.id(&format!("{prefix}.cls")), bound.id(&format!("{prefix}.cls_pos")))?;
    let mut seq = tape.concat(&[cls, tok], 0)?;

    let mut tapped = Vec::with_capacity(cfg.taps.len());
    for i in 1..=cfg.depth {
        seq = block_forward(tape, bound, &format!("{prefix}.block{i}"), seq, cfg.heads, None)?;
        if cfg.taps.contains(&i) {
            tapped.push(tape.slice(seq, 0, 1, tokens)?);
        }
    }

    let cls_state = tape.slice(seq, 0, 0, 1)?;
    let patches = tape.slice(seq, 0, 1, tokens)?;
    Ok(EncoderOutput { cls: cls_state, patches, tapped, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::FloatMode;

    fn small_cfg(depth: usize, taps: Vec<usize>) -> ViTConfig {
        ViTConfig {
            patch: [4, 4, 4],
            embed: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            base_grid: [2, 2, 1],
            taps,
        }
    }

    fn ramp_volume(extents: [usize; 3]) -> Volume {
        let n = extents[0] * extents[1] * extents[2];
        let data: Vec<f64> = (0..n).map(|i| (i as f64) / (n as f64) - 0.5).collect();
        Volume::new("t", extents, [1.0, 1.0, 1.0], data).unwrap()
    }

    #[test]
    fn patchify_counts_and_order() {
        let v = ramp_volume([16, 16, 8]);
        let got = patchify(&v, [8, 8, 8]).unwrap();
        assert_eq!(got.grid, [2, 2, 1]);
        assert_eq!(got.features.shape(), &[4, 512]);
        // token 0 is the (0,0,0) block, voxels x-fastest
        assert_eq!(got.features.data()[0], v.at(0, 0, 0));
        assert_eq!(got.features.data()[1], v.at(1, 0, 0));
        assert_eq!(got.features.data()[8], v.at(0, 1, 0));
        // token 1 starts at x=8
        assert_eq!(got.features.data()[512], v.at(8, 0, 0));
    }

    #[test]
    fn patchify_rejects_nondivisible_axis() {
        let v = ramp_volume([12, 16, 8]);
        match patchify(&v, [8, 8, 8]) {
            Err(NnError::PatchDivisibility { axis: 0, extent: 12, patch: 8 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn constant_volume_gives_identical_tokens() {
        let v = Volume::filled("c", [8, 8, 8], [1.0; 3], 0.25);
        let got = patchify(&v, [4, 4, 4]).unwrap();
        let first = &got.features.data()[..64];
        for t in 1..8 {
            assert_eq!(&got.features.data()[t * 64..(t + 1) * 64], first);
        }
    }

    #[test]
    fn depth_zero_cls_is_embedding_plus_position() {
        let cfg = small_cfg(0, vec![]);
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(11, "vit-test", &[]);
        init_vit(&mut params, &mut rng, "vis", &cfg);
        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        let v = ramp_volume([8, 8, 4]);
        let out = encode_volume(&mut tape, &bound, "vis", &cfg, &v, None).unwrap();
        let want: Vec<f64> = params
            .get("vis.cls")
            .unwrap()
            .data()
            .iter()
            .zip(params.get("vis.cls_pos").unwrap().data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(out.cls).data(), &want[..]);
    }

    #[test]
    fn variable_input_sizes_share_weights() {
        let cfg = small_cfg(1, vec![1]);
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(12, "vit-test", &[]);
        init_vit(&mut params, &mut rng, "vis", &cfg);
        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        let a = encode_volume(&mut tape, &bound, "vis", &cfg, &ramp_volume([8, 8, 4]), None).unwrap();
        let b = encode_volume(&mut tape, &bound, "vis", &cfg, &ramp_volume([12, 8, 4]), None).unwrap();
        assert_eq!(tape.value(a.patches).shape(), &[4, 8]);
        assert_eq!(tape.value(b.patches).shape(), &[6, 8]);
        assert_eq!(a.tapped.len(), 1);
    }

    #[test]
    fn base_grid_positions_pass_through_bitwise() {
        let cfg = small_cfg(1, vec![1]);
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(13, "vit-test", &[]);
        init_vit(&mut params, &mut rng, "vis", &cfg);
        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        let pos = bound.id("vis.pos");
        let same = interpolate_positions(&mut tape, pos, cfg.base_grid, cfg.base_grid).unwrap();
        assert_eq!(same, pos);
        let grown =
            interpolate_positions(&mut tape, pos, cfg.base_grid, [3, 2, 1]).unwrap();
        assert_eq!(tape.value(grown).shape(), &[6, 8]);
    }

    #[test]
    fn interpolation_of_linear_ramp_is_exact() {
        // base grid 2x2x1 holding f(x,y) = 2x + 3y per channel; doubling the
        // grid must reproduce the ramp at the new corner-aligned coordinates.
        let mut tape = Tape::new(FloatMode::F64);
        let mut data = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                data.push(2.0 * x as f64 + 3.0 * y as f64);
            }
        }
        let pos = tape.constant(Tensor::new(vec![4, 1], data).unwrap());
        let out = interpolate_positions(&mut tape, pos, [2, 2, 1], [4, 4, 1]).unwrap();
        let got = tape.value(out).data();
        for oy in 0..4 {
            for ox in 0..4 {
                let x = ox as f64 / 3.0;
                let y = oy as f64 / 3.0;
                let want = 2.0 * x + 3.0 * y;
                assert!((got[ox + 4 * oy] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_replaces_only_listed_tokens() {
        let cfg = small_cfg(0, vec![]);
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(14, "vit-test", &[]);
        init_vit(&mut params, &mut rng, "vis", &cfg);
        let v = ramp_volume([8, 8, 4]);

        let run = |mask: Option<&[usize]>| {
            let mut tape = Tape::new(FloatMode::F64);
            let bound = params.bind(&mut tape, false);
            let out = encode_volume(&mut tape, &bound, "vis", &cfg, &v, mask).unwrap();
            tape.value(out.patches).clone()
        };
        let clean = run(None);
        let masked = run(Some(&[1]));
        let e = cfg.embed;
        assert_eq!(&clean.data()[..e], &masked.data()[..e]);
        assert_ne!(&clean.data()[e..2 * e], &masked.data()[e..2 * e]);
        // masked token = mask_token + its position embedding
        let want: Vec<f64> = params
            .get("vis.mask_token")
            .unwrap()
            .data()
            .iter()
            .zip(&params.get("vis.pos").unwrap().data()[e..2 * e])
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(&masked.data()[e..2 * e], &want[..]);

        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        match encode_volume(&mut tape, &bound, "vis", &cfg, &v, Some(&[99])) {
            Err(NnError::MaskOutOfRange { token: 99, count: 4 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn tap_validation() {
        let mut cfg = small_cfg(4, vec![1, 2, 3, 4]);
        assert!(cfg.validate().is_ok());
        cfg.taps = vec![1, 1, 3, 4];
        assert!(cfg.validate().is_err());
        cfg.taps = vec![1, 2, 3];
        assert!(cfg.validate().is_err());
        assert_eq!(default_taps(4), vec![1, 2, 3, 4]);
        assert_eq!(default_taps(12), vec![3, 6, 9, 12]);
    }
}
