//! Multi-crop augmentation policy: two global views, several local views,
//! and the larger stage-2 contrastive crop.

use super::preprocess::resample_trilinear;
use super::{Volume, VolumeError};
use crate::tensor::grid_index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Value used for out-of-content padding; volumes are normalized to
/// [-1, 1] beforehand, so -1 is black.
pub const PAD_VALUE: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropPolicy {
    pub global: [usize; 3],
    pub local: [usize; 3],
    pub stage2: [usize; 3],
    /// Per-axis crop-fraction range for stage-2 crops.
    pub stage2_fraction: (f64, f64),
    /// Local views produced per view set.
    pub local_count: usize,
    /// Per-axis scale range for the random-resolution global crop.
    pub global_scale: (f64, f64),
}

impl Default for CropPolicy {
    fn default() -> CropPolicy {
        CropPolicy {
            global: [64, 64, 16],
            local: [32, 32, 8],
            stage2: [96, 96, 24],
            stage2_fraction: (0.75, 1.0),
            local_count: 8,
            global_scale: (0.5, 1.0),
        }
    }
}

impl CropPolicy {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let bad = |reason: String| VolumeError::Invalid { id: "crop-policy".into(), reason };
        for a in 0..3 {
            if self.local[a] > self.global[a] {
                return Err(bad(format!(
                    "local size {:?} exceeds global size {:?} on axis {a}",
                    self.local, self.global
                )));
            }
            if self.global[a] == 0 || self.stage2[a] == 0 {
                return Err(bad("zero crop extent".into()));
            }
        }
        for (name, (lo, hi)) in [("stage2_fraction", self.stage2_fraction), ("global_scale", self.global_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(bad(format!("{name} range ({lo}, {hi}) not within (0, 1]")));
            }
        }
        if self.local_count == 0 {
            return Err(bad("local_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whole volume resized to the global size with the x-y aspect ratio
/// preserved; leftover in-plane area is PAD_VALUE. Z resizes directly.
pub fn global_crop_full(v: &Volume, policy: &CropPolicy) -> Volume {
    let [gx, gy, gz] = policy.global;
    let [sx, sy, _] = v.extents();
    let scale = (gx as f64 / sx as f64).min(gy as f64 / sy as f64);
    let cx = ((sx as f64 * scale).round() as usize).clamp(1, gx);
    let cy = ((sy as f64 * scale).round() as usize).clamp(1, gy);
    let content = resample_trilinear(v, [cx, cy, gz]).expect("positive extents");
    if cx == gx && cy == gy {
        return content;
    }
    let mut out = Volume::filled(v.id().to_string(), policy.global, content.spacing(), PAD_VALUE);
    let (ox, oy) = ((gx - cx) / 2, (gy - cy) / 2);
    for z in 0..gz {
        for y in 0..cy {
            let src = content.index(0, y, z);
            let dst = grid_index(ox, oy + y, z, gx, gy);
            out.data_mut()[dst..dst + cx].copy_from_slice(&content.data()[src..src + cx]);
        }
    }
    out
}

fn random_region(
    extents: [usize; 3],
    sizes: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> ([usize; 3], [usize; 3]) {
    // Fixed draw order (extent then offset, per axis) keeps streams replayable.
    let mut lo = [0usize; 3];
    for a in 0..3 {
        let slack = extents[a] - sizes[a];
        lo[a] = if slack == 0 { 0 } else { rng.gen_range(0..=slack) };
    }
    (lo, sizes)
}

fn scaled_sizes(extents: [usize; 3], range: (f64, f64), rng: &mut ChaCha8Rng) -> [usize; 3] {
    let mut sizes = [0usize; 3];
    for a in 0..3 {
        let s: f64 = rng.gen_range(range.0..=range.1);
        sizes[a] = ((extents[a] as f64 * s).round() as usize).clamp(1, extents[a]);
    }
    sizes
}

/// Contiguous subregion at a random per-axis scale, resized to the global
/// size. Volumes not strictly larger than the global size fall back to
/// [`global_crop_full`].
pub fn global_crop_random(v: &Volume, policy: &CropPolicy, rng: &mut ChaCha8Rng) -> Volume {
    let e = v.extents();
    if (0..3).any(|a| e[a] <= policy.global[a]) {
        return global_crop_full(v, policy);
    }
    let sizes = scaled_sizes(e, policy.global_scale, rng);
    let (lo, sz) = random_region(e, sizes, rng);
    let sub = v.subvolume(lo, sz).expect("region in bounds");
    resample_trilinear(&sub, policy.global).expect("positive extents")
}

/// `policy.local_count` local views, alternating source between the two
/// globals; each is a random region no smaller than the local size, resized
/// to the local size (so local == global size degenerates to the source).
pub fn local_crops(globals: [&Volume; 2], policy: &CropPolicy, rng: &mut ChaCha8Rng) -> Vec<Volume> {
    (0..policy.local_count)
        .map(|i| {
            let src = globals[i % 2];
            let e = src.extents();
            let mut sizes = [0usize; 3];
            for a in 0..3 {
                sizes[a] = rng.gen_range(policy.local[a]..=e[a]);
            }
            let (lo, sz) = random_region(e, sizes, rng);
            let sub = src.subvolume(lo, sz).expect("region in bounds");
            resample_trilinear(&sub, policy.local).expect("positive extents")
        })
        .collect()
}

/// Stage-2 crop: per-axis fraction drawn from the policy range, then
/// resized to the stage-2 size.
pub fn stage2_crop(v: &Volume, policy: &CropPolicy, rng: &mut ChaCha8Rng) -> Volume {
    let sizes = scaled_sizes(v.extents(), policy.stage2_fraction, rng);
    let (lo, sz) = random_region(v.extents(), sizes, rng);
    let sub = v.subvolume(lo, sz).expect("region in bounds");
    resample_trilinear(&sub, policy.stage2).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn ramp_volume(id: &str, e: [usize; 3]) -> Volume {
        let data: Vec<f64> = (0..e.iter().product())
            .map(|i| ((i * 31 + 7) % 97) as f64 / 48.5 - 1.0)
            .collect();
        Volume::new(id, e, [1.0; 3], data).unwrap()
    }

    fn small_policy() -> CropPolicy {
        CropPolicy {
            global: [8, 8, 4],
            local: [4, 4, 2],
            stage2: [12, 12, 6],
            ..CropPolicy::default()
        }
    }

    #[test]
    fn full_crop_same_aspect_no_padding() {
        let p = small_policy();
        let v = ramp_volume("v", [16, 16, 8]);
        let out = global_crop_full(&v, &p);
        assert_eq!(out.extents(), p.global);
        assert!(!out.data().contains(&PAD_VALUE) || v.data().contains(&PAD_VALUE));
    }

    #[test]
    fn full_crop_wide_aspect_pads_half_y() {
        let p = small_policy();
        // 2:1 in-plane aspect into a square target: content fills x, half of y.
        let v = Volume::filled("w", [32, 16, 4], [1.0; 3], 0.5);
        let out = global_crop_full(&v, &p);
        let content_rows: usize = (0..8)
            .filter(|&y| (0..8).any(|x| out.at(x, y, 0) != PAD_VALUE))
            .count();
        assert_eq!(content_rows, 4);
        let pad_count = out.data().iter().filter(|&&v| v == PAD_VALUE).count();
        assert_eq!(pad_count, out.voxel_count() / 2);
    }

    #[test]
    fn full_crop_identity_at_target_size() {
        let p = small_policy();
        let v = ramp_volume("i", p.global);
        let out = global_crop_full(&v, &p);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn random_crop_is_deterministic_and_falls_back() {
        let p = small_policy();
        let v = ramp_volume("r", [20, 20, 10]);
        let a = global_crop_random(&v, &p, &mut stream_rng(3, "crop", &[1]));
        let b = global_crop_random(&v, &p, &mut stream_rng(3, "crop", &[1]));
        assert_eq!(a.data(), b.data());
        let c = global_crop_random(&v, &p, &mut stream_rng(4, "crop", &[2]));
        assert_eq!(c.extents(), p.global);
        // Too small on z: falls back to the full crop.
        let small = ramp_volume("s", [20, 20, 4]);
        let d = global_crop_random(&small, &p, &mut stream_rng(3, "crop", &[1]));
        assert_eq!(d.data(), global_crop_full(&small, &p).data());
    }

    #[test]
    fn collapsed_scale_range_equals_whole_volume_resize() {
        let mut p = small_policy();
        p.global_scale = (1.0, 1.0);
        let v = ramp_volume("c", [20, 20, 10]);
        let out = global_crop_random(&v, &p, &mut stream_rng(5, "crop", &[0]));
        let whole = resample_trilinear(&v, p.global).unwrap();
        assert_eq!(out.data(), whole.data());
    }

    #[test]
    fn local_crops_count_alternation_and_degenerate_size() {
        let p = small_policy();
        let g1 = ramp_volume("g1", p.global);
        let g2 = ramp_volume("g2", p.global);
        let crops = local_crops([&g1, &g2], &p, &mut stream_rng(1, "loc", &[0]));
        assert_eq!(crops.len(), p.local_count);
        let from_g1 = crops.iter().filter(|c| c.id() == "g1").count();
        assert_eq!(from_g1, p.local_count / 2);

        let mut pl = p;
        pl.local = pl.global;
        let crops = local_crops([&g1, &g2], &pl, &mut stream_rng(1, "loc", &[0]));
        for (i, c) in crops.iter().enumerate() {
            let src = if i % 2 == 0 { &g1 } else { &g2 };
            assert_eq!(c.data(), src.data(), "local == global must copy the source");
        }
    }

    #[test]
    fn stage2_fractions_stay_in_range() {
        let p = small_policy();
        let v = ramp_volume("f", [40, 40, 20]);
        for k in 0..200 {
            let mut rng = stream_rng(9, "s2", &[k]);
            let sizes = scaled_sizes(v.extents(), p.stage2_fraction, &mut rng);
            for a in 0..3 {
                let f = sizes[a] as f64 / v.extents()[a] as f64;
                // round() admits half-a-voxel slack around the range.
                let slack = 0.5 / v.extents()[a] as f64;
                assert!(f >= 0.75 - slack && f <= 1.0, "axis {a}: fraction {f}");
            }
        }
        let full = {
            let mut pf = p;
            pf.stage2_fraction = (1.0, 1.0);
            stage2_crop(&v, &pf, &mut stream_rng(2, "s2", &[0]))
        };
        assert_eq!(full.data(), resample_trilinear(&v, p.stage2).unwrap().data());
    }

    #[test]
    fn policy_validation() {
        assert!(small_policy().validate().is_ok());
        let mut bad = small_policy();
        bad.local = [16, 4, 2];
        assert!(bad.validate().is_err());
        let mut bad2 = small_policy();
        bad2.stage2_fraction = (0.0, 1.0);
        assert!(bad2.validate().is_err());
    }
}
