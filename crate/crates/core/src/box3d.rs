//! Axis-aligned 3D boxes: voxel-space boxes for cropping/ground truth and
//! normalized-coordinate boxes for localization metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("box min {min:?} exceeds max {max:?}")]
    Inverted { min: [f64; 3], max: [f64; 3] },
    #[error("voxel box lo {lo:?} not strictly below hi {hi:?}")]
    EmptyVoxelBox { lo: [usize; 3], hi: [usize; 3] },
}

/// Half-open voxel region `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl VoxelBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<VoxelBox, BoxError> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(BoxError::EmptyVoxelBox { lo, hi });
        }
        Ok(VoxelBox { lo, hi })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    /// Normalized [0,1] coordinates relative to a grid.
    pub fn normalized(&self, extents: [usize; 3]) -> Box3D {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.lo[a] as f64 / extents[a] as f64;
            max[a] = self.hi[a] as f64 / extents[a] as f64;
        }
        Box3D { min, max }
    }
}

/// Box in normalized volume coordinates, corners in [0,1]^3, min <= max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3D {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Box3D, BoxError> {
        if (0..3).any(|a| min[a] > max[a]) {
            return Err(BoxError::Inverted { min, max });
        }
        Ok(Box3D { min, max })
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    pub fn intersection_volume(&self, other: &Box3D) -> f64 {
        (0..3)
            .map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0))
            .product()
    }

    /// Smallest enclosing axis-aligned box.
    pub fn hull(&self, other: &Box3D) -> Box3D {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.min[a].min(other.min[a]);
            max[a] = self.max[a].max(other.max[a]);
        }
        Box3D { min, max }
    }

    pub fn as_flat(&self) -> [f64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }
}

/// |a ∩ b| / |a ∪ b|; 0 when the union has zero volume (degenerate rule).
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus the hull-excess penalty (|hull| - |union|)/|hull|, in (-1, 1].
pub fn giou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    let hull = a.hull(b).volume();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let penalty = if hull <= 0.0 { 0.0 } else { (hull - union) / hull };
    iou - penalty
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube_at(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [x + 1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn giou_identical_is_one() {
        let a = Box3D::new([0.1, 0.2, 0.3], [0.5, 0.6, 0.7]).unwrap();
        assert_eq!(giou_3d(&a, &a), 1.0);
    }

    #[test]
    fn giou_separated_unit_cubes() {
        // [0,1]^3 vs [3,4]x[0,1]^2: IoU 0, union 2, hull 4 -> -0.5.
        let a = unit_cube_at(0.0);
        let b = unit_cube_at(3.0);
        assert!((giou_3d(&a, &b) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn giou_nested_half_volume() {
        // b inside a with half the volume: IoU 0.5, hull == a -> 0.5.
        let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        let b = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.5]).unwrap();
        assert!((giou_3d(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let boxes = [
            unit_cube_at(0.0),
            unit_cube_at(0.5),
            Box3D::new([0.2, 0.1, 0.0], [0.9, 0.4, 0.8]).unwrap(),
            Box3D::new([0.0, 0.0, 0.0], [0.1, 0.1, 0.1]).unwrap(),
        ];
        for a in &boxes {
            for b in &boxes {
                let (g, i) = (giou_3d(a, b), iou_3d(a, b));
                assert!(g <= i + 1e-12, "giou {g} > iou {i}");
                let union_is_hull = (a.volume() + b.volume() - a.intersection_volume(b)
                    - a.hull(b).volume())
                .abs()
                    < 1e-12;
                if union_is_hull {
                    assert!((g - i).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_volume_boxes_degenerate_to_zero() {
        let p = Box3D::new([0.5, 0.5, 0.5], [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(iou_3d(&p, &p), 0.0);
        assert_eq!(giou_3d(&p, &p), 0.0);
    }

    #[test]
    fn voxel_box_normalizes() {
        let vb = VoxelBox::new([2, 3, 1], [6, 7, 5]).unwrap();
        assert_eq!(vb.extents(), [4, 4, 4]);
        let nb = vb.normalized([8, 8, 8]);
        assert_eq!(nb.min, [0.25, 0.375, 0.125]);
        assert_eq!(nb.max, [0.75, 0.875, 0.625]);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(Box3D::new([0.5, 0.0, 0.0], [0.4, 1.0, 1.0]).is_err());
        assert!(VoxelBox::new([3, 0, 0], [3, 4, 4]).is_err());
    }
}
