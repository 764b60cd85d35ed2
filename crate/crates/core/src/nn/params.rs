//! Named parameter trees and their binding onto a tape.

use super::NnError;
use crate::autodiff::{Gradients, NodeId, Tape};
use crate::optim::ema_update_tensor;
use crate::tensor::{FloatMode, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Ordered name -> tensor map; the unit of optimization, checkpointing and
/// EMA. BTreeMap keeps every traversal deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    mode: FloatMode,
}

impl ParamSet {
    pub fn new(mode: FloatMode) -> ParamSet {
        ParamSet { tensors: BTreeMap::new(), mode }
    }

    pub fn mode(&self) -> FloatMode {
        self.mode
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.round_to_mode(self.mode);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Bind every tensor onto the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }

    /// teacher <- m*teacher + (1-m)*student over the whole tree.
    pub fn ema_from(&mut self, student: &ParamSet, momentum: f64) -> Result<(), NnError> {
        if self.tensors.len() != student.tensors.len() {
            return Err(NnError::StructureMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                student.tensors.len()
            )));
        }
        let mode = self.mode;
        for ((tn, tv), (sn, sv)) in self.tensors.iter_mut().zip(student.tensors.iter()) {
            if tn != sn || tv.shape() != sv.shape() {
                return Err(NnError::StructureMismatch(format!("'{tn}' vs '{sn}'")));
            }
            ema_update_tensor(tv, sv, momentum, mode);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and raw little-endian payloads. Used to
    /// verify the frozen-encoder contract.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// NodeIds of one ParamSet bound onto a tape.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Id of a bound parameter; absence is a wiring bug.
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, id)| (n, *id))
    }

    /// Gradient of each parameter (zeros when unreachable), keyed by name.
    pub fn grads_by_name(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(n, &id)| (n.clone(), grads.get_or_zeros(id, tape.shape(id))))
            .collect()
    }
}

/// Xavier-uniform matrix [fan_in, fan_out].
pub fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("valid shape")
}

/// Gaussian tensor with the given std.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// y = x @ w + b (b optional).
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NnError> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add_row(y, b)?,
        None => y,
    })
}
