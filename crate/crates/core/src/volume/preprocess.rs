//! Foreground cropping, percentile intensity normalization, resampling.

use super::{Volume, VolumeError};
use crate::box3d::VoxelBox;
use crate::tensor::resample3d;

pub const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram: the cut maximizing
/// between-class variance, evaluated at every bin boundary, first maximizer
/// wins. Returns `None` when the data has fewer than two distinct values.
pub fn otsu_threshold(data: &[f64]) -> Option<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return None;
    }
    let mut counts = [0u64; OTSU_BINS];
    let scale = OTSU_BINS as f64 / (hi - lo);
    for &v in data {
        let b = (((v - lo) * scale) as usize).min(OTSU_BINS - 1);
        counts[b] += 1;
    }
    // Bin value = lower edge; prefix sums give class weights/means per cut.
    let total = data.len() as f64;
    let mut cum_count = 0.0;
    let mut cum_sum = 0.0;
    let full_sum: f64 = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| c as f64 * b as f64)
        .sum();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 1..OTSU_BINS {
        cum_count += counts[t - 1] as f64;
        cum_sum += counts[t - 1] as f64 * (t - 1) as f64;
        let w0 = cum_count / total;
        let w1 = 1.0 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = cum_sum / cum_count;
        let mu1 = (full_sum - cum_sum) / (total - cum_count);
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best.0 {
            best = (var, t);
        }
    }
    Some(lo + best.1 as f64 * (hi - lo) / OTSU_BINS as f64)
}

/// Restrict a volume to the tight bounding box of voxels above the Otsu
/// threshold. Constant volumes pass through unchanged with the full box.
pub fn otsu_foreground_crop(v: &Volume) -> (Volume, VoxelBox) {
    let Some(thr) = otsu_threshold(v.data()) else {
        return (v.clone(), v.full_box());
    };
    let e = v.extents();
    let mut lo = e;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..e[2] {
        for y in 0..e[1] {
            for x in 0..e[0] {
                if v.at(x, y, z) > thr {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a] + 1);
                    }
                }
            }
        }
    }
    if !any {
        return (v.clone(), v.full_box());
    }
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let cropped = v.subvolume(lo, extent).expect("tight box is in bounds");
    (cropped, VoxelBox { lo, hi })
}

/// Percentile by linear interpolation between order statistics of a sorted
/// slice: rank = p/100 * (n-1).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Map the p_lo percentile to -1 and the p_hi percentile to +1, clamping to
/// [-1, 1]. Volumes whose two percentiles coincide become all zeros.
pub fn percentile_rescale(v: &Volume, p_lo: f64, p_hi: f64) -> Volume {
    let mut sorted = v.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let vlo = percentile_sorted(&sorted, p_lo);
    let vhi = percentile_sorted(&sorted, p_hi);
    let mut out = v.clone();
    if vhi == vlo {
        out.data_mut().fill(0.0);
        return out;
    }
    let scale = 2.0 / (vhi - vlo);
    for val in out.data_mut() {
        *val = ((*val - vlo) * scale - 1.0).clamp(-1.0, 1.0);
    }
    out
}

/// Corner-aligned trilinear resampling to the target extents. Spacing is
/// scaled so the physical span (extent-1)*spacing is preserved; a collapsed
/// axis (target 1) keeps span as its spacing.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume, VolumeError> {
    if target.iter().any(|&e| e == 0) {
        return Err(VolumeError::BadResampleTarget(target));
    }
    let src = v.extents();
    let data = resample3d(v.data(), src, target, 1);
    let mut spacing = v.spacing();
    for a in 0..3 {
        if target[a] > 1 {
            spacing[a] *= (src[a] - 1) as f64 / (target[a] - 1) as f64;
        } else {
            spacing[a] *= src[a] as f64;
        }
        if spacing[a] == 0.0 {
            spacing[a] = v.spacing()[a];
        }
    }
    Volume::new(v.id().to_string(), target, spacing, data)
}
