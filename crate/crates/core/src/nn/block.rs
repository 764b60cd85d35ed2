//! Pre-norm transformer block shared by the volume and report encoders.

use super::params::{init_linear, linear, Bound, ParamSet};
use super::NnError;
use crate::autodiff::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;
/// Additive score for masked-out attention keys; exp underflows to exact 0.
pub const ATTN_MASK_NEG: f64 = -1e30;

/// Register one block's parameters under `prefix`.
pub fn init_block(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    embed: usize,
    mlp_hidden: usize,
) {
    params.insert(format!("{prefix}.ln1.g"), Tensor::full(&[embed], 1.0));
    params.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[embed]));
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.attn.{name}"), init_linear(rng, embed, embed));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("{prefix}.attn.{name}"), Tensor::zeros(&[embed]));
    }
    params.insert(format!("{prefix}.ln2.g"), Tensor::full(&[embed], 1.0));
    params.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[embed]));
    params.insert(format!("{prefix}.mlp.w1"), init_linear(rng, embed, mlp_hidden));
    params.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[mlp_hidden]));
    params.insert(format!("{prefix}.mlp.w2"), init_linear(rng, mlp_hidden, embed));
    params.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[embed]));
}

/// LayerNorm over the last axis followed by learned gain and bias.
pub fn layer_norm_affine(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let y = tape.layer_norm(x, LN_EPS);
    let y = tape.mul_row(y, bound.id(&format!("{prefix}.g")))?;
    Ok(tape.add_row(y, bound.id(&format!("{prefix}.b")))?)
}

/// Multi-head self-attention over `x: [tokens, embed]`; `attn_mask` is an
/// optional additive `[tokens, tokens]` score offset (0 keeps, ATTN_MASK_NEG
/// removes a key column).
fn self_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    heads: usize,
    attn_mask: Option<NodeId>,
) -> Result<NodeId, NnError> {
    let (_, embed) = tape
        .value(x)
        .dims2("self_attention")
        .map_err(crate::autodiff::AutodiffError::from)?;
    if heads == 0 || embed % heads != 0 {
        return Err(NnError::BadConfig(format!("embed {embed} not divisible by {heads} heads")));
    }
    let head_dim = embed / heads;
    let tau = (head_dim as f64).sqrt();

    let q = linear(tape, x, bound.id(&format!("{prefix}.wq")), Some(bound.id(&format!("{prefix}.bq"))))?;
    let k = linear(tape, x, bound.id(&format!("{prefix}.wk")), Some(bound.id(&format!("{prefix}.bk"))))?;
    let v = linear(tape, x, bound.id(&format!("{prefix}.wv")), Some(bound.id(&format!("{prefix}.bv"))))?;

    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = tape.slice(q, 1, h * head_dim, head_dim)?;
        let k_h = tape.slice(k, 1, h * head_dim, head_dim)?;
        let v_h = tape.slice(v, 1, h * head_dim, head_dim)?;
        let k_t = tape.transpose(k_h)?;
        let mut scores = tape.matmul(q_h, k_t)?;
        if let Some(m) = attn_mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax_t(scores, tau);
        ctx.push(tape.matmul(attn, v_h)?);
    }
    let merged = tape.concat(&ctx, 1)?;
    linear(tape, merged, bound.id(&format!("{prefix}.wo")), Some(bound.id(&format!("{prefix}.bo"))))
}

/// x + Attn(LN(x)), then + MLP(LN(.)).
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    heads: usize,
    attn_mask: Option<NodeId>,
) -> Result<NodeId, NnError> {
    let normed = layer_norm_affine(tape, bound, &format!("{prefix}.ln1"), x)?;
    let attn = self_attention(tape, bound, &format!("{prefix}.attn"), normed, heads, attn_mask)?;
    let h = tape.add(x, attn)?;

    let normed = layer_norm_affine(tape, bound, &format!("{prefix}.ln2"), h)?;
    let m = linear(tape, normed, bound.id(&format!("{prefix}.mlp.w1")), Some(bound.id(&format!("{prefix}.mlp.b1"))))?;
    let m = tape.gelu(m);
    let m = linear(tape, m, bound.id(&format!("{prefix}.mlp.w2")), Some(bound.id(&format!("{prefix}.mlp.b2"))))?;
    Ok(tape.add(h, m)?)
}

/// Additive `[tokens, tokens]` mask that removes the key columns where
/// `keep[j]` is false.
pub fn key_padding_mask(tokens: usize, keep: &[bool]) -> Tensor {
    assert_eq!(tokens, keep.len());
    let mut data = vec![0.0; tokens * tokens];
    for (j, &k) in keep.iter().enumerate() {
        if !k {
            for i in 0..tokens {
                data[i * tokens + j] = ATTN_MASK_NEG;
            }
        }
    }
    Tensor::new(vec![tokens, tokens], data).expect("valid shape")
}
