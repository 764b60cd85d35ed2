//! Sliding-window tiling and frozen-encoder embedding extraction.

use super::EvalError;
use crate::autodiff::Tape;
use crate::box3d::VoxelBox;
use crate::nn::params::ParamSet;
use crate::nn::vit::{encode_volume, ViTConfig};
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Window origins tiling a volume: stride-spaced positions plus a final
/// clamped window per axis so the union covers every voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o.min(extent - window));
        if o + window >= extent {
            break;
        }
        o += stride;
    }
    out.dedup();
    out
}

impl WindowPlan {
    pub fn tile(
        extents: [usize; 3],
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<WindowPlan, EvalError> {
        for a in 0..3 {
            if window[a] > extents[a] {
                return Err(EvalError::WindowTooLarge { window, volume: extents, axis: a });
            }
            if window[a] == 0 || stride[a] == 0 {
                return Err(EvalError::BadConfig(format!(
                    "window {window:?} / stride {stride:?} must be positive"
                )));
            }
        }
        let per_axis: [Vec<usize>; 3] = [
            axis_origins(extents[0], window[0], stride[0]),
            axis_origins(extents[1], window[1], stride[1]),
            axis_origins(extents[2], window[2], stride[2]),
        ];
        let mut origins = Vec::new();
        for &z in &per_axis[2] {
            for &y in &per_axis[1] {
                for &x in &per_axis[0] {
                    origins.push([x, y, z]);
                }
            }
        }
        Ok(WindowPlan { window, stride, origins })
    }

    pub fn windows(&self) -> impl Iterator<Item = VoxelBox> + '_ {
        self.origins.iter().map(|o| {
            VoxelBox::new(
                *o,
                [o[0] + self.window[0], o[1] + self.window[1], o[2] + self.window[2]],
            )
            .expect("in-bounds window")
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Per-window CLS embeddings for one volume, rows in plan order.
#[derive(Debug, Clone)]
pub struct VolumeEmbeddings {
    pub volume: String,
    pub rows: Tensor,
}

/// Encode every window of every volume with the frozen encoder and return
/// one CLS row per (volume, window). The parameter hash is checked before
/// and after so an accidental mutation fails loudly.
pub fn extract_embeddings(
    params: &ParamSet,
    prefix: &str,
    vit: &ViTConfig,
    volumes: &[&Volume],
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<VolumeEmbeddings>, EvalError> {
    let hash_before = params.content_hash();
    let mut out = Vec::with_capacity(volumes.len());
    for v in volumes {
        let plan = WindowPlan::tile(v.extents(), window, stride)?;
        let mut rows = Vec::with_capacity(plan.len() * vit.embed);
        for win in plan.windows() {
            let sub = v.subvolume(win.lo, win.extents())?;
            let mut tape = Tape::new(params.mode());
            let bound = params.bind(&mut tape, false);
            let enc = encode_volume(&mut tape, &bound, prefix, vit, &sub, None)?;
            rows.extend_from_slice(tape.value(enc.cls).data());
        }
        out.push(VolumeEmbeddings {
            volume: v.id().to_string(),
            rows: Tensor::new(vec![plan.len(), vit.embed], rows)?,
        });
    }
    if params.content_hash() != hash_before {
        return Err(EvalError::EncoderMutated);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::vit::init_vit;
    use crate::rng::stream_rng;
    use crate::tensor::FloatMode;

    #[test]
    fn quadrant_tiling() {
        let plan = WindowPlan::tile([64, 64, 16], [32, 32, 16], [32, 32, 16]).unwrap();
        assert_eq!(
            plan.origins,
            vec![[0, 0, 0], [32, 0, 0], [0, 32, 0], [32, 32, 0]]
        );
    }

    #[test]
    fn tiling_covers_every_voxel() {
        let extents = [13, 9, 7];
        let plan = WindowPlan::tile(extents, [5, 4, 7], [4, 3, 5]).unwrap();
        let mut covered = vec![false; 13 * 9 * 7];
        for w in plan.windows() {
            for z in w.lo[2]..w.hi[2] {
                for y in w.lo[1]..w.hi[1] {
                    for x in w.lo[0]..w.hi[0] {
                        assert!(x < 13 && y < 9 && z < 7, "window out of bounds");
                        covered[x + 13 * (y + 9 * z)] = true;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn oversized_window_is_rejected() {
        match WindowPlan::tile([8, 8, 8], [16, 8, 8], [8, 8, 8]) {
            Err(EvalError::WindowTooLarge { axis: 0, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    fn tiny_encoder() -> (ParamSet, ViTConfig) {
        let vit = ViTConfig {
            patch: [8, 8, 8],
            embed: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            base_grid: [2, 2, 1],
            taps: vec![1],
        };
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(7, "window-test", &[]);
        init_vit(&mut params, &mut rng, "vis", &vit);
        (params, vit)
    }

    #[test]
    fn window_equal_to_volume_matches_direct_encode() {
        let (params, vit) = tiny_encoder();
        let n = 16 * 16 * 8;
        let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin()).collect();
        let v = Volume::new("v", [16, 16, 8], [1.0; 3], data).unwrap();
        let embs =
            extract_embeddings(&params, "vis", &vit, &[&v], [16, 16, 8], [16, 16, 8]).unwrap();
        assert_eq!(embs.len(), 1);
        assert_eq!(embs[0].rows.shape(), &[1, 16]);

        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        let direct = encode_volume(&mut tape, &bound, "vis", &vit, &v, None).unwrap();
        assert_eq!(embs[0].rows.data(), tape.value(direct.cls).data());
    }

    #[test]
    fn extraction_leaves_encoder_untouched() {
        let (params, vit) = tiny_encoder();
        let hash = params.content_hash();
        let n = 32 * 16 * 8;
        let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.02).cos()).collect();
        let v = Volume::new("v", [32, 16, 8], [1.0; 3], data).unwrap();
        extract_embeddings(&params, "vis", &vit, &[&v], [16, 16, 8], [16, 16, 8]).unwrap();
        assert_eq!(params.content_hash(), hash);
    }
}
