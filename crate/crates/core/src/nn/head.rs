//! Projection heads: prototype heads for distillation, the vocabulary head
//! for masked-token prediction, and the shared multimodal projection.

use super::params::{init_linear, linear, Bound, ParamSet};
use super::NnError;
use crate::autodiff::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// 3-layer MLP into an L2-normalized bottleneck, then a prototype layer
/// producing K logits per row.
pub fn init_proto_head(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    embed: usize,
    prototypes: usize,
) {
    let hidden = embed * 2;
    let bottleneck = (embed / 2).max(1);
    params.insert(format!("{prefix}.w1"), init_linear(rng, embed, hidden));
    params.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    params.insert(format!("{prefix}.w2"), init_linear(rng, hidden, hidden));
    params.insert(format!("{prefix}.b2"), Tensor::zeros(&[hidden]));
    params.insert(format!("{prefix}.w3"), init_linear(rng, hidden, bottleneck));
    params.insert(format!("{prefix}.b3"), Tensor::zeros(&[bottleneck]));
    params.insert(format!("{prefix}.proto"), init_linear(rng, bottleneck, prototypes));
}

pub fn proto_head_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let h = linear(tape, x, bound.id(&format!("{prefix}.w1")), Some(bound.id(&format!("{prefix}.b1"))))?;
    let h = tape.gelu(h);
    let h = linear(tape, h, bound.id(&format!("{prefix}.w2")), Some(bound.id(&format!("{prefix}.b2"))))?;
    let h = tape.gelu(h);
    let h = linear(tape, h, bound.id(&format!("{prefix}.w3")), Some(bound.id(&format!("{prefix}.b3"))))?;
    let h = tape.l2_normalize_rows(h)?;
    Ok(tape.matmul(h, bound.id(&format!("{prefix}.proto")))?)
}

/// Dense + GELU + vocabulary logits for masked-token prediction.
pub fn init_vocab_head(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    embed: usize,
    vocab: usize,
) {
    params.insert(format!("{prefix}.dense.w"), init_linear(rng, embed, embed));
    params.insert(format!("{prefix}.dense.b"), Tensor::zeros(&[embed]));
    params.insert(format!("{prefix}.out.w"), init_linear(rng, embed, vocab));
    params.insert(format!("{prefix}.out.b"), Tensor::zeros(&[vocab]));
}

pub fn vocab_head_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    states: NodeId,
) -> Result<NodeId, NnError> {
    let h = linear(
        tape,
        states,
        bound.id(&format!("{prefix}.dense.w")),
        Some(bound.id(&format!("{prefix}.dense.b"))),
    )?;
    let h = tape.gelu(h);
    linear(tape, h, bound.id(&format!("{prefix}.out.w")), Some(bound.id(&format!("{prefix}.out.b"))))
}

/// Bias-free linear map into the shared space; outputs are L2-normalized so
/// cosine similarity is an inner product.
pub fn init_shared_projection(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    embed: usize,
    shared: usize,
) {
    params.insert(format!("{prefix}.w"), init_linear(rng, embed, shared));
}

pub fn project_shared(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let y = tape.matmul(x, bound.id(&format!("{prefix}.w")))?;
    Ok(tape.l2_normalize_rows(y)?)
}
