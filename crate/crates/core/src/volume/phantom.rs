//! Synthetic phantoms: ellipsoidal organs with per-organ sinusoidal texture,
//! optional pathology regions, seeded noise, and exact ground truth.

use super::{Volume, VolumeError};
use crate::box3d::{Box3D, VoxelBox};
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const BACKGROUND_INTENSITY: f64 = 0.05;
pub const TEXTURE_AMPLITUDE: f64 = 0.15;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrganSpec {
    /// Canonical entity label, e.g. "KIDNEY".
    pub entity: String,
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
    /// Per-entity texture frequency; distinct entities get distinct values.
    pub texture_freq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathologySpec {
    pub label: String,
    /// Index into the organ list this finding belongs to.
    pub organ: usize,
    pub region: VoxelBox,
    pub intensity_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: Vec<OrganSpec>,
    pub pathologies: Vec<PathologySpec>,
    /// Acquisition-style tag (stand-in for a sequence type, e.g. "T1").
    pub style: String,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathologyTruth {
    pub label: String,
    pub organ_entity: String,
}

/// Exact ground truth for one phantom. Organ masks are stored as a single
/// label map (0 = background, i+1 = organ i), which makes disjointness
/// structural.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub extents: [usize; 3],
    pub labels: Vec<u16>,
    pub organ_entities: Vec<String>,
    pub boxes: Vec<VoxelBox>,
    pub pathologies: Vec<PathologyTruth>,
    /// Synthetic demographic scalar used as a regression target.
    pub age: f64,
}

impl PhantomTruth {
    pub fn organ_mask(&self, organ: usize) -> Vec<bool> {
        let want = organ as u16 + 1;
        self.labels.iter().map(|&l| l == want).collect()
    }

    pub fn entity_set(&self) -> BTreeSet<String> {
        self.organ_entities.iter().cloned().collect()
    }

    pub fn normalized_box(&self, organ: usize) -> Box3D {
        self.boxes[organ].normalized(self.extents)
    }

    pub fn pathology_labels(&self) -> BTreeSet<String> {
        self.pathologies.iter().map(|p| p.label.clone()).collect()
    }
}

fn ellipsoid_contains(o: &OrganSpec, p: [usize; 3]) -> bool {
    let mut acc = 0.0;
    for a in 0..3 {
        let d = (p[a] as f64 - o.center[a]) / o.radii[a];
        acc += d * d;
    }
    acc <= 1.0
}

fn validate(spec: &PhantomSpec) -> Result<(), VolumeError> {
    for (i, o) in spec.organs.iter().enumerate() {
        let inside = (0..3).all(|a| {
            o.radii[a] > 0.0
                && o.center[a] - o.radii[a] >= 0.0
                && o.center[a] + o.radii[a] <= (spec.extents[a] - 1) as f64
        });
        if !inside {
            return Err(VolumeError::OrganOutsideGrid { id: spec.id.clone(), organ: i });
        }
    }
    for (i, p) in spec.pathologies.iter().enumerate() {
        if p.organ >= spec.organs.len() {
            return Err(VolumeError::PathologyOrgan {
                id: spec.id.clone(),
                pathology: i,
                organ: p.organ,
                count: spec.organs.len(),
            });
        }
        if (0..3).any(|a| p.region.lo[a] >= p.region.hi[a] || p.region.hi[a] > spec.extents[a]) {
            return Err(VolumeError::PathologyBox { id: spec.id.clone(), pathology: i });
        }
    }
    Ok(())
}

/// Render a phantom and its ground truth. Deterministic in the spec
/// (including its seed); overlapping organs are rejected.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, PhantomTruth), VolumeError> {
    validate(spec)?;
    let e = spec.extents;
    let n: usize = e.iter().product();
    let mut data = vec![BACKGROUND_INTENSITY; n];
    let mut labels = vec![0u16; n];
    let mut boxes: Vec<Option<VoxelBox>> = vec![None; spec.organs.len()];

    for (oi, organ) in spec.organs.iter().enumerate() {
        // Scan only the organ's bounding region.
        let lo = |a: usize| (organ.center[a] - organ.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize| ((organ.center[a] + organ.radii[a]).ceil() as usize + 1).min(e[a]);
        for z in lo(2)..hi(2) {
            for y in lo(1)..hi(1) {
                for x in lo(0)..hi(0) {
                    if !ellipsoid_contains(organ, [x, y, z]) {
                        continue;
                    }
                    let i = x + e[0] * (y + e[1] * z);
                    if labels[i] != 0 {
                        return Err(VolumeError::OverlappingOrgans {
                            id: spec.id.clone(),
                            a: labels[i] as usize - 1,
                            b: oi,
                            voxel: [x, y, z],
                        });
                    }
                    labels[i] = oi as u16 + 1;
                    let f = organ.texture_freq;
                    let texture = (f * x as f64).sin() * (f * (y as f64 + 1.0)).cos() * (f * (z as f64 + 2.0)).sin();
                    data[i] = organ.intensity + TEXTURE_AMPLITUDE * texture;
                    boxes[oi] = Some(match boxes[oi] {
                        None => VoxelBox { lo: [x, y, z], hi: [x + 1, y + 1, z + 1] },
                        Some(mut b) => {
                            let p = [x, y, z];
                            for a in 0..3 {
                                b.lo[a] = b.lo[a].min(p[a]);
                                b.hi[a] = b.hi[a].max(p[a] + 1);
                            }
                            b
                        }
                    });
                }
            }
        }
    }

    for p in &spec.pathologies {
        let want = p.organ as u16 + 1;
        for z in p.region.lo[2]..p.region.hi[2] {
            for y in p.region.lo[1]..p.region.hi[1] {
                for x in p.region.lo[0]..p.region.hi[0] {
                    let i = x + e[0] * (y + e[1] * z);
                    if labels[i] == want {
                        data[i] += p.intensity_delta;
                    }
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let mut rng = stream_rng(spec.seed, "phantom-noise", &[]);
        for v in &mut data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise * z;
        }
    }

    let boxes: Vec<VoxelBox> = boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            b.ok_or_else(|| VolumeError::OrganOutsideGrid { id: spec.id.clone(), organ: i })
        })
        .collect::<Result<_, _>>()?;

    let age = 20.0 + stream_rng(spec.seed, "phantom-age", &[]).gen::<f64>() * 60.0;
    let truth = PhantomTruth {
        extents: e,
        labels,
        organ_entities: spec.organs.iter().map(|o| o.entity.clone()).collect(),
        boxes,
        pathologies: spec
            .pathologies
            .iter()
            .map(|p| PathologyTruth {
                label: p.label.clone(),
                organ_entity: spec.organs[p.organ].entity.clone(),
            })
            .collect(),
        age,
    };
    let volume = Volume::new(spec.id.clone(), e, spec.spacing, data)?;
    Ok((volume, truth))
}
