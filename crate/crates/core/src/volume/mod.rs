//! 3D scalar volumes and everything done to them before the encoder sees
//! them: foreground cropping, intensity normalization, resampling, the
//! multi-crop augmentation policy, and the synthetic phantom generator.

pub mod crop;
pub mod phantom;
pub mod preprocess;

use crate::box3d::VoxelBox;
use crate::tensor::grid_index;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume '{id}': {reason}")]
    Invalid { id: String, reason: String },
    #[error("resample target {0:?} has a zero extent")]
    BadResampleTarget([usize; 3]),
    #[error("subregion {lo:?}+{extent:?} exceeds volume extents {volume:?}")]
    RegionOutOfBounds { lo: [usize; 3], extent: [usize; 3], volume: [usize; 3] },
    #[error("phantom '{id}': organs {a} and {b} overlap at voxel {voxel:?}")]
    OverlappingOrgans { id: String, a: usize, b: usize, voxel: [usize; 3] },
    #[error("phantom '{id}': organ {organ} extends outside the grid")]
    OrganOutsideGrid { id: String, organ: usize },
    #[error("phantom '{id}': pathology {pathology} references organ {organ} of {count}")]
    PathologyOrgan { id: String, pathology: usize, organ: usize, count: usize },
    #[error("phantom '{id}': pathology {pathology} box invalid or outside the grid")]
    PathologyBox { id: String, pathology: usize },
}

/// Dense 3D scalar field, x-fastest layout: `i = x + X*(y + Y*z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        extents: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Volume, VolumeError> {
        let id = id.into();
        if extents.iter().any(|&e| e == 0) {
            return Err(VolumeError::Invalid { id, reason: format!("zero extent in {extents:?}") });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::Invalid { id, reason: format!("non-positive spacing {spacing:?}") });
        }
        let n: usize = extents.iter().product();
        if n != data.len() {
            return Err(VolumeError::Invalid {
                id,
                reason: format!("extents {extents:?} need {n} voxels, got {}", data.len()),
            });
        }
        Ok(Volume { id, extents, spacing, data })
    }

    pub fn filled(id: impl Into<String>, extents: [usize; 3], spacing: [f64; 3], value: f64) -> Volume {
        let n: usize = extents.iter().product();
        Volume::new(id, extents, spacing, vec![value; n]).expect("filled volume is valid")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        grid_index(x, y, z, self.extents[0], self.extents[1])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn full_box(&self) -> VoxelBox {
        VoxelBox { lo: [0, 0, 0], hi: self.extents }
    }

    /// Copy of the half-open region `[lo, lo+extent)`.
    pub fn subvolume(&self, lo: [usize; 3], extent: [usize; 3]) -> Result<Volume, VolumeError> {
        for a in 0..3 {
            if extent[a] == 0 || lo[a] + extent[a] > self.extents[a] {
                return Err(VolumeError::RegionOutOfBounds { lo, extent, volume: self.extents });
            }
        }
        let mut data = Vec::with_capacity(extent.iter().product());
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let row = self.index(lo[0], lo[1] + y, lo[2] + z);
                data.extend_from_slice(&self.data[row..row + extent[0]]);
            }
        }
        Volume::new(self.id.clone(), extent, self.spacing, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates() {
        assert!(Volume::new("v", [0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new("v", [2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new("v", [2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new("v", [2, 2, 2], [1.0; 3], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn subvolume_extracts_expected_region() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let v = Volume::new("v", [4, 3, 2], [1.0; 3], data).unwrap();
        let s = v.subvolume([1, 1, 0], [2, 2, 2]).unwrap();
        assert_eq!(s.extents(), [2, 2, 2]);
        assert_eq!(s.at(0, 0, 0), v.at(1, 1, 0));
        assert_eq!(s.at(1, 1, 1), v.at(2, 2, 1));
        assert!(v.subvolume([3, 0, 0], [2, 1, 1]).is_err());
    }
}
