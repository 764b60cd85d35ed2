//! Text-grounded box regression: a small fusion transformer over a
//! regression token, frozen visual patch states, and frozen text token
//! states; the box is decoded from the regression token with a sigmoid
//! (center, size) parameterization that keeps corners in [0,1]³.

use super::EvalError;
use crate::autodiff::{NodeId, Tape};
use crate::box3d::Box3D;
use crate::nn::block::{block_forward, init_block, key_padding_mask};
use crate::nn::params::{init_linear, init_normal, linear, Bound, ParamSet};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingConfig {
    pub vis_dim: usize,
    pub text_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Coordinate L1 weight.
    pub w1: f64,
    /// GIoU term weight.
    pub w2: f64,
}

impl GroundingConfig {
    pub fn desk(vis_dim: usize, text_dim: usize) -> GroundingConfig {
        GroundingConfig {
            vis_dim,
            text_dim,
            width: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            w1: 2.0,
            w2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.width == 0 || self.depth == 0 {
            return Err(EvalError::BadConfig("fusion width/depth must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(EvalError::BadConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(EvalError::BadConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn init_grounding(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &GroundingConfig,
) {
    params.insert(format!("{prefix}.proj_v.w"), init_linear(rng, cfg.vis_dim, cfg.width));
    params.insert(format!("{prefix}.proj_v.b"), Tensor::zeros(&[cfg.width]));
    params.insert(format!("{prefix}.proj_t.w"), init_linear(rng, cfg.text_dim, cfg.width));
    params.insert(format!("{prefix}.proj_t.b"), Tensor::zeros(&[cfg.width]));
    params.insert(format!("{prefix}.reg"), init_normal(rng, &[1, cfg.width], 0.02));
    for i in 1..=cfg.depth {
        init_block(params, rng, &format!("{prefix}.block{i}"), cfg.width, cfg.width * cfg.mlp_ratio);
    }
    for (i, (fan_in, fan_out)) in
        [(cfg.width, cfg.width), (cfg.width, cfg.width), (cfg.width, 6)].iter().enumerate()
    {
        params.insert(format!("{prefix}.box.l{}.w", i + 1), init_linear(rng, *fan_in, *fan_out));
        params.insert(format!("{prefix}.box.l{}.b", i + 1), Tensor::zeros(&[*fan_out]));
    }
}

/// Fuse [REG] + visual tokens + text tokens (PAD text positions masked out
/// of attention), then decode the REG state to box corners via sigmoid
/// center `c` and size `s`: min = c·(1−s), max = min + s, which keeps
/// 0 ≤ min ≤ max ≤ 1 for every head output. Returns a `[1, 6]` corner node
/// (min then max).
pub fn grounding_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &GroundingConfig,
    visual: NodeId,
    text: NodeId,
    text_keep: &[bool],
) -> Result<NodeId, EvalError> {
    cfg.validate()?;
    let (vt, vd) = tape.value(visual).dims2("grounding_forward").map_err(EvalError::Tensor)?;
    let (tt, td) = tape.value(text).dims2("grounding_forward").map_err(EvalError::Tensor)?;
    if vd != cfg.vis_dim || td != cfg.text_dim {
        return Err(EvalError::BadConfig(format!(
            "token widths {vd}/{td} do not match config {}/{}",
            cfg.vis_dim, cfg.text_dim
        )));
    }
    if text_keep.len() != tt {
        return Err(EvalError::LengthMismatch { left: text_keep.len(), right: tt });
    }

    let v = {
        let w = bound.id(&format!("{prefix}.proj_v.w"));
        let b = bound.id(&format!("{prefix}.proj_v.b"));
        linear(tape, visual, w, Some(b))?
    };
    let t = {
        let w = bound.id(&format!("{prefix}.proj_t.w"));
        let b = bound.id(&format!("{prefix}.proj_t.b"));
        linear(tape, text, w, Some(b))?
    };
    let reg = bound.id(&format!("{prefix}.reg"));
    let seq = tape.concat(&[reg, v, t], 0)?;

    let total = 1 + vt + tt;
    let mut keep = vec![true; total];
    keep[1 + vt..].copy_from_slice(text_keep);
    let mask = tape.constant(key_padding_mask(total, &keep));
    let mut x = seq;
    for i in 1..=cfg.depth {
        x = block_forward(tape, bound, &format!("{prefix}.block{i}"), x, cfg.heads, Some(mask))?;
    }
    let reg_state = tape.slice(x, 0, 0, 1)?;

    let mut h = reg_state;
    for i in 1..=3 {
        let w = bound.id(&format!("{prefix}.box.l{i}.w"));
        let b = bound.id(&format!("{prefix}.box.l{i}.b"));
        h = linear(tape, h, w, Some(b))?;
        if i < 3 {
            h = tape.relu(h);
        }
    }
    let center = {
        let raw = tape.slice(h, 1, 0, 3)?;
        tape.sigmoid(raw)
    };
    let size = {
        let raw = tape.slice(h, 1, 3, 3)?;
        tape.sigmoid(raw)
    };
    let ones = tape.constant(Tensor::full(&[1, 3], 1.0));
    let remain = tape.sub(ones, size)?;
    let min = tape.mul(center, remain)?;
    let max = tape.add(min, size)?;
    Ok(tape.concat(&[min, max], 1)?)
}

/// Read a corner node's value into a box.
pub fn corners_to_box(corners: &Tensor) -> Result<Box3D, EvalError> {
    let d = corners.data();
    if d.len() != 6 {
        return Err(EvalError::BadConfig(format!("{} corner values, expected 6", d.len())));
    }
    Ok(Box3D::new([d[0], d[1], d[2]], [d[3], d[4], d[5]])?)
}

/// Product of the three per-axis values of a `[1, 3]` node.
fn volume_of(tape: &mut Tape, ext: NodeId) -> Result<NodeId, EvalError> {
    let x = tape.slice(ext, 1, 0, 1)?;
    let y = tape.slice(ext, 1, 1, 1)?;
    let z = tape.slice(ext, 1, 2, 1)?;
    let xy = tape.mul(x, y)?;
    Ok(tape.mul(xy, z)?)
}

/// Differentiable w₁·mean|pred − truth| over the six coordinates plus
/// w₂·(1 − GIoU). `pred` is a `[1, 6]` corner node (min then max).
pub fn grounding_loss(
    tape: &mut Tape,
    pred: NodeId,
    truth: &Box3D,
    w1: f64,
    w2: f64,
) -> Result<NodeId, EvalError> {
    let shape = tape.shape(pred).to_vec();
    if shape != [1, 6] {
        return Err(EvalError::BadConfig(format!("pred corners shaped {shape:?}, expected [1,6]")));
    }
    let truth_node = tape.constant(Tensor::new(vec![1, 6], truth.as_flat().to_vec())?);
    let l1 = tape.l1_mean(pred, truth_node)?;

    let amin = tape.slice(pred, 1, 0, 3)?;
    let amax = tape.slice(pred, 1, 3, 3)?;
    let bmin = tape.constant(Tensor::new(vec![1, 3], truth.min.to_vec())?);
    let bmax = tape.constant(Tensor::new(vec![1, 3], truth.max.to_vec())?);
    let zeros = tape.constant(Tensor::zeros(&[1, 3]));

    let inter_lo = tape.maximum(amin, bmin)?;
    let inter_hi = tape.minimum(amax, bmax)?;
    let inter_span = tape.sub(inter_hi, inter_lo)?;
    let inter_ext = tape.maximum(inter_span, zeros)?;
    let inter = volume_of(tape, inter_ext)?;

    let a_ext = tape.sub(amax, amin)?;
    let vol_a = volume_of(tape, a_ext)?;
    let vol_b = tape.constant(Tensor::new(vec![1, 1], vec![truth.volume()])?);
    let ab = tape.add(vol_a, vol_b)?;
    let union = tape.sub(ab, inter)?;

    let hull_lo = tape.minimum(amin, bmin)?;
    let hull_hi = tape.maximum(amax, bmax)?;
    let hull_ext = tape.sub(hull_hi, hull_lo)?;
    let hull = volume_of(tape, hull_ext)?;

    let iou = tape.div(inter, union)?;
    let excess = tape.sub(hull, union)?;
    let penalty = tape.div(excess, hull)?;
    let giou = tape.sub(iou, penalty)?;

    let one = tape.constant(Tensor::new(vec![1, 1], vec![1.0])?);
    let gap = tape.sub(one, giou)?;
    let gap_flat = tape.reshape(gap, vec![1])?;
    let weighted_gap = tape.mul_const(gap_flat, w2);
    let weighted_l1 = tape.mul_const(l1, w1);
    Ok(tape.add(weighted_l1, weighted_gap)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::box3d::giou_3d;
    use crate::rng::stream_rng;
    use crate::tensor::FloatMode;
    use rand::Rng;

    fn demo_cfg() -> GroundingConfig {
        GroundingConfig::desk(8, 8)
    }

    fn demo_params(seed: u64, cfg: &GroundingConfig) -> ParamSet {
        let mut params = ParamSet::new(FloatMode::F64);
        let mut rng = stream_rng(seed, "ground-init", &[]);
        init_grounding(&mut params, &mut rng, "gr", cfg);
        params
    }

    fn demo_inputs(
        tape: &mut Tape,
        seed: u64,
        vt: usize,
        tt: usize,
        dim: usize,
    ) -> (NodeId, NodeId) {
        let mut rng = stream_rng(seed, "ground-io", &[]);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let v = tape.constant(Tensor::new(vec![vt, dim], draw(vt * dim)).unwrap());
        let t = tape.constant(Tensor::new(vec![tt, dim], draw(tt * dim)).unwrap());
        (v, t)
    }

    #[test]
    fn corners_stay_in_unit_cube() {
        let cfg = demo_cfg();
        for seed in 0..8u64 {
            let params = demo_params(seed, &cfg);
            let mut tape = Tape::new(FloatMode::F64);
            let bound = params.bind(&mut tape, false);
            let (v, t) = demo_inputs(&mut tape, seed + 100, 6, 5, 8);
            let keep = vec![true, true, true, false, false];
            let corners =
                grounding_forward(&mut tape, &bound, "gr", &cfg, v, t, &keep).unwrap();
            let b = corners_to_box(tape.value(corners)).unwrap();
            for a in 0..3 {
                assert!(b.min[a] >= 0.0 && b.max[a] <= 1.0 && b.min[a] <= b.max[a]);
            }
        }
    }

    #[test]
    fn pad_rows_are_inert() {
        let cfg = demo_cfg();
        let params = demo_params(3, &cfg);
        let mut tape = Tape::new(FloatMode::F64);
        let bound = params.bind(&mut tape, false);
        let (v, t) = demo_inputs(&mut tape, 40, 4, 6, 8);
        let keep = [true, true, true, true, false, false];
        let base = grounding_forward(&mut tape, &bound, "gr", &cfg, v, t, &keep).unwrap();
        let base_v = tape.value(base).clone();

        // swap the two PAD rows' contents
        let tv = tape.value(t).clone();
        let mut data = tv.data().to_vec();
        let d = 8;
        for c in 0..d {
            data.swap(4 * d + c, 5 * d + c);
        }
        let swapped = tape.constant(Tensor::new(vec![6, d], data).unwrap());
        let poked = grounding_forward(&mut tape, &bound, "gr", &cfg, v, swapped, &keep).unwrap();
        assert_eq!(tape.value(poked).data(), base_v.data());
    }

    #[test]
    fn loss_zero_on_exact_match() {
        let truth = Box3D::new([0.2, 0.3, 0.1], [0.6, 0.8, 0.5]).unwrap();
        let mut tape = Tape::new(FloatMode::F64);
        let pred = tape.constant(Tensor::new(vec![1, 6], truth.as_flat().to_vec()).unwrap());
        let loss = grounding_loss(&mut tape, pred, &truth, 2.0, 1.0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_hand_case() {
        // unit cubes [0,1]³ and [3,4]×[0,1]²: GIoU = −0.5, so with w1 = 0
        // the loss is w2·1.5
        let truth = Box3D::new([3.0, 0.0, 0.0], [4.0, 1.0, 1.0]).unwrap();
        let pred_box = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new(FloatMode::F64);
        let pred = tape.constant(Tensor::new(vec![1, 6], pred_box.as_flat().to_vec()).unwrap());
        let loss = grounding_loss(&mut tape, pred, &truth, 0.0, 1.0).unwrap();
        assert!((tape.value(loss).item() - 1.5).abs() < 1e-12);
        assert!((giou_3d(&pred_box, &truth) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_giou_matches_plain_evaluation() {
        let mut rng = stream_rng(17, "ground-loss", &[]);
        for _ in 0..25 {
            let mut corner = |lo: f64| -> [f64; 3] {
                [
                    rng.gen_range(lo..lo + 0.4),
                    rng.gen_range(lo..lo + 0.4),
                    rng.gen_range(lo..lo + 0.4),
                ]
            };
            let pmin = corner(0.0);
            let pmax = [pmin[0] + 0.3, pmin[1] + 0.25, pmin[2] + 0.2];
            let tmin = corner(0.2);
            let tmax = [tmin[0] + 0.35, tmin[1] + 0.3, tmin[2] + 0.15];
            let pred_box = Box3D::new(pmin, pmax).unwrap();
            let truth = Box3D::new(tmin, tmax).unwrap();
            let mut tape = Tape::new(FloatMode::F64);
            let pred =
                tape.constant(Tensor::new(vec![1, 6], pred_box.as_flat().to_vec()).unwrap());
            let loss = grounding_loss(&mut tape, pred, &truth, 2.0, 1.5).unwrap();
            let l1: f64 = pred_box
                .as_flat()
                .iter()
                .zip(truth.as_flat())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 6.0;
            let want = 2.0 * l1 + 1.5 * (1.0 - giou_3d(&pred_box, &truth));
            assert!((tape.value(loss).item() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn head_trains_toward_a_target_box() {
        let cfg = demo_cfg();
        let mut params = demo_params(9, &cfg);
        let truth = Box3D::new([0.25, 0.25, 0.25], [0.75, 0.75, 0.75]).unwrap();
        let mut opt = crate::optim::AdamW::default();
        let keep = vec![true; 5];
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..40 {
            let mut tape = Tape::new(FloatMode::F64);
            let bound = params.bind(&mut tape, true);
            let (v, t) = demo_inputs(&mut tape, 77, 4, 5, 8);
            let corners = grounding_forward(&mut tape, &bound, "gr", &cfg, v, t, &keep).unwrap();
            let loss = grounding_loss(&mut tape, corners, &truth, cfg.w1, cfg.w2).unwrap();
            last = tape.value(loss).item();
            first.get_or_insert(last);
            let grads = tape.backward(loss).unwrap();
            let by_name = bound.grads_by_name(&tape, &grads);
            for (name, param) in params.iter_mut() {
                opt.step_param(name, param, &by_name[name.as_str()], 1e-2, 0.0, FloatMode::F64)
                    .unwrap();
            }
        }
        assert!(last < 0.5 * first.unwrap(), "loss {last} vs start {first:?}");
    }
}
