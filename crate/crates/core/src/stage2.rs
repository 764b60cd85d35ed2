//! Stage-2 image-report alignment: organ-aware study batch sampling, a
//! symmetric contrastive objective with same-study negative masking, and
//! the training step with separate encoder / projection-head learning
//! rates.

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::nn::head::{init_shared_projection, project_shared};
use crate::nn::params::ParamSet;
use crate::nn::text::{encode_text, init_text, tokenize, TextConfig, Vocab};
use crate::nn::vit::{encode_volume, init_vit, ViTConfig};
use crate::nn::NnError;
use crate::optim::{AdamW, OptimError};
use crate::report::StructuredReport;
use crate::rng::stream_rng;
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::tensor::{FloatMode, Tensor, TensorError};
use crate::volume::crop::{stage2_crop, CropPolicy};
use crate::volume::{Volume, VolumeError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("batch of {requested} from {available} studies")]
    DatasetTooSmall { requested: usize, available: usize },
    #[error("bad sample {study}: {reason}")]
    BadSample { study: String, reason: String },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("embedding row {row} has norm {norm}, expected 1 within 1e-3")]
    NotNormalized { row: usize, norm: f64 },
    #[error("image/text/study counts disagree: {image}/{text}/{studies}")]
    CountMismatch { image: usize, text: usize, studies: usize },
    #[error("non-finite loss {value} at step {step}; state unchanged")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("missing parameter {0} in source set")]
    MissingSource(String),
}

/// One study: its report, the ids of its volumes, and the organ entities
/// the report maps to.
#[derive(Debug, Clone)]
pub struct StudySample {
    pub study: String,
    pub series: Vec<String>,
    pub report: StructuredReport,
    pub organs: BTreeSet<String>,
}

impl StudySample {
    pub fn from_report(study: &str, series: Vec<String>, report: StructuredReport) -> StudySample {
        let organs = report.entity_set();
        StudySample { study: study.to_string(), series, report, organs }
    }

    pub fn validate(&self) -> Result<(), Stage2Error> {
        if self.series.is_empty() {
            return Err(Stage2Error::BadSample {
                study: self.study.clone(),
                reason: "no series".into(),
            });
        }
        if self.organs != self.report.entity_set() {
            return Err(Stage2Error::BadSample {
                study: self.study.clone(),
                reason: "organ set out of sync with report".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem {
    pub study: String,
    pub series: String,
    pub entity: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub items: Vec<PlanItem>,
    /// Shared organ entity when the same-organ branch was taken.
    pub anchor: Option<String>,
    /// True when too few studies shared the anchor and the batch fell back
    /// to a uniform sample.
    pub fallback: bool,
}

impl BatchPlan {
    pub fn same_organ(&self) -> bool {
        self.anchor.is_some() && !self.fallback
    }
}

/// First `count` elements of a partial Fisher-Yates shuffle over `n`
/// indices.
fn sample_distinct(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// With probability `p_same`, fill the batch with distinct studies sharing
/// a sampled anchor organ (uniform fallback when fewer than `b` qualify);
/// otherwise sample `b` distinct studies uniformly. One series per study.
pub fn organ_batch_sample(
    dataset: &[StudySample],
    b: usize,
    p_same: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan, Stage2Error> {
    if b == 0 {
        return Err(Stage2Error::BadConfig("batch size 0".into()));
    }
    if dataset.len() < b {
        return Err(Stage2Error::DatasetTooSmall { requested: b, available: dataset.len() });
    }
    if !(0.0..=1.0).contains(&p_same) {
        return Err(Stage2Error::BadConfig(format!("p_same {p_same} outside [0,1]")));
    }
    for s in dataset {
        s.validate()?;
    }

    let same_branch = rng.gen::<f64>() < p_same;
    let mut anchor = None;
    let mut fallback = false;
    let chosen: Vec<&StudySample> = if same_branch {
        let organs: Vec<&String> =
            dataset.iter().flat_map(|s| s.organs.iter()).collect::<BTreeSet<_>>().into_iter().collect();
        if organs.is_empty() {
            fallback = true;
            sample_distinct(dataset.len(), b, rng).into_iter().map(|i| &dataset[i]).collect()
        } else {
            let organ = (*pick(&organs, rng)).clone();
            let candidates: Vec<&StudySample> =
                dataset.iter().filter(|s| s.organs.contains(&organ)).collect();
            anchor = Some(organ);
            if candidates.len() >= b {
                sample_distinct(candidates.len(), b, rng).into_iter().map(|i| candidates[i]).collect()
            } else {
                fallback = true;
                sample_distinct(dataset.len(), b, rng).into_iter().map(|i| &dataset[i]).collect()
            }
        }
    } else {
        sample_distinct(dataset.len(), b, rng).into_iter().map(|i| &dataset[i]).collect()
    };

    let mut items = Vec::with_capacity(b);
    for s in chosen {
        let series = pick(&s.series, rng).clone();
        let entity = match (&anchor, fallback) {
            (Some(a), false) => a.clone(),
            _ => {
                let organs: Vec<&String> = s.organs.iter().collect();
                if organs.is_empty() { String::new() } else { (*pick(&organs, rng)).clone() }
            }
        };
        let text = s.report.select_text_input(&entity);
        items.push(PlanItem { study: s.study.clone(), series, entity, text });
    }
    Ok(BatchPlan { items, anchor, fallback })
}

/// Symmetric InfoNCE over unit-normalized rows. Off-diagonal pairs whose
/// study ids match are removed from every softmax denominator; diagonal
/// pairs are the positives. `tau` is a 1-element node so the temperature
/// can be learned.
pub fn contrastive_loss(
    tape: &mut Tape,
    image: NodeId,
    text: NodeId,
    tau: NodeId,
    studies: &[String],
) -> Result<NodeId, Stage2Error> {
    let (bi, di) = tape.value(image).dims2("contrastive_loss").map_err(AutodiffError::from)?;
    let (bt, dt) = tape.value(text).dims2("contrastive_loss").map_err(AutodiffError::from)?;
    if bi != bt || di != dt || bi != studies.len() {
        return Err(Stage2Error::CountMismatch { image: bi, text: bt, studies: studies.len() });
    }
    for (side, node) in [("image", image), ("text", text)] {
        let v = tape.value(node);
        for r in 0..bi {
            let norm: f64 =
                v.data()[r * di..(r + 1) * di].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                let _ = side;
                return Err(Stage2Error::NotNormalized { row: r, norm });
            }
        }
    }

    let b = bi;
    let mut mask = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j && studies[i] == studies[j] {
                mask[i * b + j] = crate::nn::block::ATTN_MASK_NEG;
            }
        }
    }
    let mask_t = Tensor::new(vec![b, b], mask)?;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let targets = tape.constant(Tensor::new(vec![b, b], eye)?);

    let text_t = tape.transpose(text)?;
    let sims = tape.matmul(image, text_t)?;
    let logits = tape.div_by_scalar(sims, tau)?;
    let mask_node = tape.constant(mask_t);
    let masked = tape.add(logits, mask_node)?;
    let i2t = tape.cross_entropy(masked, targets, 1.0)?;
    let masked_t = tape.transpose(masked)?;
    let t2i = tape.cross_entropy(masked_t, targets, 1.0)?;
    let sum = tape.add(i2t, t2i)?;
    Ok(tape.mul_const(sum, 0.5))
}

pub const VISION_PROJ_PREFIX: &str = "proj_v";
pub const TEXT_PROJ_PREFIX: &str = "proj_t";
pub const TAU_NAME: &str = "tau";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

pub struct Stage2State {
    pub vit: ViTConfig,
    pub text_cfg: TextConfig,
    pub policy: CropPolicy,
    pub shared_dim: usize,
    pub params: ParamSet,
    pub opt: AdamW,
    /// Encoder learning rate; projection heads and τ run at `head_ratio`
    /// times this value.
    pub lr: ScheduleSpec,
    pub head_ratio: f64,
    pub wd: f64,
    pub step: u64,
    pub seed: u64,
}

fn is_head_param(name: &str) -> bool {
    name.starts_with(VISION_PROJ_PREFIX)
        || name.starts_with(TEXT_PROJ_PREFIX)
        || name == TAU_NAME
}

/// Fresh stage-2 state with randomly initialized encoders; production runs
/// overwrite the encoder weights via [`adopt_prefixed`].
#[allow(clippy::too_many_arguments)]
pub fn init_stage2(
    vit: ViTConfig,
    text_cfg: TextConfig,
    policy: CropPolicy,
    shared_dim: usize,
    lr: ScheduleSpec,
    head_ratio: f64,
    seed: u64,
    mode: FloatMode,
) -> Result<Stage2State, Stage2Error> {
    vit.validate()?;
    text_cfg.validate()?;
    policy.validate()?;
    if shared_dim == 0 {
        return Err(Stage2Error::BadConfig("shared dimension must be positive".into()));
    }
    if head_ratio <= 0.0 {
        return Err(Stage2Error::BadConfig("head learning-rate ratio must be positive".into()));
    }
    let mut rng = stream_rng(seed, "stage2-init", &[]);
    let mut params = ParamSet::new(mode);
    init_vit(&mut params, &mut rng, crate::stage1::VISION_PREFIX, &vit);
    init_text(&mut params, &mut rng, crate::stage1::TEXT_PREFIX, &text_cfg);
    init_shared_projection(&mut params, &mut rng, VISION_PROJ_PREFIX, vit.embed, shared_dim);
    init_shared_projection(&mut params, &mut rng, TEXT_PROJ_PREFIX, text_cfg.embed, shared_dim);
    params.insert(TAU_NAME, Tensor::new(vec![1], vec![TAU_INIT])?);
    Ok(Stage2State {
        vit,
        text_cfg,
        policy,
        shared_dim,
        params,
        opt: AdamW::default(),
        lr,
        head_ratio,
        wd: 0.0,
        step: 0,
        seed,
    })
}

/// Copy every `prefix.*` tensor from `src` into `dst`; shapes must agree
/// and the destination must already declare each name. Returns the number
/// of tensors copied.
pub fn adopt_prefixed(
    dst: &mut ParamSet,
    src: &ParamSet,
    prefix: &str,
) -> Result<usize, Stage2Error> {
    let wanted: Vec<String> = src
        .names()
        .filter(|n| n.starts_with(prefix) && n[prefix.len()..].starts_with('.'))
        .cloned()
        .collect();
    if wanted.is_empty() {
        return Err(Stage2Error::MissingSource(format!("{prefix}.*")));
    }
    for name in &wanted {
        let tensor = src.get(name).expect("listed name").clone();
        match dst.get(name) {
            Ok(existing) if existing.shape() == tensor.shape() => {}
            Ok(existing) => {
                return Err(Stage2Error::BadConfig(format!(
                    "{name}: shape {:?} in source, {:?} in destination",
                    tensor.shape(),
                    existing.shape()
                )))
            }
            Err(_) => return Err(Stage2Error::MissingSource(name.clone())),
        }
        dst.insert(name.clone(), tensor);
    }
    Ok(wanted.len())
}

/// A resolved batch entry: the chosen series volume plus the selected
/// report text.
#[derive(Debug, Clone)]
pub struct Stage2Item {
    pub study: String,
    pub volume: Volume,
    pub text: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Stage2Log {
    pub step: u64,
    pub tau: f64,
    pub loss: f64,
    pub same_organ: bool,
    pub lr_encoder: f64,
    pub lr_head: f64,
}

fn decay_for(shape: &[usize], wd: f64) -> f64 {
    if shape.len() >= 2 && shape[0] > 1 {
        wd
    } else {
        0.0
    }
}

/// One contrastive step over resolved batch items: random crop, encode
/// both modalities, shared projection, symmetric loss, AdamW with the
/// projection group at `head_ratio` times the encoder rate, then τ is
/// clamped back to its range.
pub fn stage2_step(
    state: &mut Stage2State,
    vocab: &Vocab,
    items: &[Stage2Item],
    same_organ: bool,
) -> Result<Stage2Log, Stage2Error> {
    if items.is_empty() {
        return Err(Stage2Error::BadConfig("empty batch".into()));
    }
    let mode = state.params.mode();
    let mut tape = Tape::new(mode);
    let bound = state.params.bind(&mut tape, true);
    let mut image_rows = Vec::with_capacity(items.len());
    let mut text_rows = Vec::with_capacity(items.len());
    let mut studies = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let mut rng = stream_rng(state.seed, "stage2-crop", &[state.step, i as u64]);
        let cropped = stage2_crop(&item.volume, &state.policy, &mut rng);
        let enc = encode_volume(&mut tape, &bound, crate::stage1::VISION_PREFIX, &state.vit, &cropped, None)?;
        image_rows.push(project_shared(&mut tape, &bound, VISION_PROJ_PREFIX, enc.cls)?);
        let ids = tokenize(&item.text, vocab, &state.text_cfg);
        let txt = encode_text(&mut tape, &bound, crate::stage1::TEXT_PREFIX, &state.text_cfg, &ids)?;
        text_rows.push(project_shared(&mut tape, &bound, TEXT_PROJ_PREFIX, txt.cls)?);
        studies.push(item.study.clone());
    }
    let image = if image_rows.len() == 1 { image_rows[0] } else { tape.concat(&image_rows, 0)? };
    let text = if text_rows.len() == 1 { text_rows[0] } else { tape.concat(&text_rows, 0)? };
    let tau_node = bound.id(TAU_NAME);
    let loss_node = contrastive_loss(&mut tape, image, text, tau_node, &studies)?;
    let loss = tape.value(loss_node).item();
    if !loss.is_finite() {
        return Err(Stage2Error::NonFiniteLoss { step: state.step, value: loss });
    }
    let grads = tape.backward(loss_node)?;
    let by_name = bound.grads_by_name(&tape, &grads);
    if let Some((name, _)) =
        by_name.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
    {
        return Err(OptimError::NonFiniteGrad { name: name.clone(), index: 0 }.into());
    }

    let lr_encoder = state.lr.value(state.step)?;
    let lr_head = lr_encoder * state.head_ratio;
    let wd = state.wd;
    for (name, param) in state.params.iter_mut() {
        let lr = if is_head_param(name) { lr_head } else { lr_encoder };
        let lambda = decay_for(param.shape(), wd);
        state.opt.step_param(name, param, &by_name[name.as_str()], lr, lambda, mode)?;
    }
    let tau_param = state.params.get_mut(TAU_NAME).expect("τ parameter");
    tau_param.data_mut()[0] = tau_param.data()[0].clamp(TAU_MIN, TAU_MAX);
    let tau = state.params.get(TAU_NAME).expect("τ parameter").data()[0];

    let log = Stage2Log { step: state.step, tau, loss, same_organ, lr_encoder, lr_head };
    state.step += 1;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::OrganSection;

    fn report_for(study: &str, organs: &[&str]) -> StructuredReport {
        StructuredReport {
            study_id: study.to_string(),
            sections: organs
                .iter()
                .map(|o| OrganSection {
                    name: o.to_lowercase(),
                    entity: Some(o.to_string()),
                    details: format!("the {} appears normal", o.to_lowercase()),
                })
                .collect(),
            conclusion: "unremarkable study".into(),
        }
    }

    fn demo_dataset() -> Vec<StudySample> {
        // every organ appears in at least 3 studies so a batch of 3 can
        // always be filled on the same-organ branch
        let specs: [(&str, &[&str]); 8] = [
            ("s0", &["LIVER", "KIDNEY"]),
            ("s1", &["LIVER", "PANCREAS"]),
            ("s2", &["LIVER", "SPLEEN"]),
            ("s3", &["KIDNEY", "SPLEEN"]),
            ("s4", &["LIVER", "PANCREAS"]),
            ("s5", &["SPLEEN", "KIDNEY"]),
            ("s6", &["LIVER", "PANCREAS"]),
            ("s7", &["KIDNEY", "LIVER"]),
        ];
        specs
            .iter()
            .map(|(study, organs)| {
                StudySample::from_report(
                    study,
                    vec![format!("{study}-a"), format!("{study}-b")],
                    report_for(study, organs),
                )
            })
            .collect()
    }

    #[test]
    fn plans_never_repeat_studies() {
        let data = demo_dataset();
        for draw in 0..10_000u64 {
            let mut rng = stream_rng(1, "plan-test", &[draw]);
            let plan = organ_batch_sample(&data, 3, 0.8, &mut rng).unwrap();
            let mut seen = BTreeSet::new();
            for item in &plan.items {
                assert!(seen.insert(item.study.clone()), "duplicate study in plan");
            }
            assert_eq!(plan.items.len(), 3);
        }
    }

    #[test]
    fn p_same_zero_is_uniform_branch() {
        let data = demo_dataset();
        let mut rng = stream_rng(2, "plan-test", &[]);
        let plan = organ_batch_sample(&data, 4, 0.0, &mut rng).unwrap();
        assert!(plan.anchor.is_none());
        assert!(!plan.fallback);
    }

    #[test]
    fn p_same_one_shares_the_anchor() {
        let data = demo_dataset();
        for draw in 0..50u64 {
            let mut rng = stream_rng(3, "plan-test", &[draw]);
            let plan = organ_batch_sample(&data, 3, 1.0, &mut rng).unwrap();
            let anchor = plan.anchor.clone().unwrap();
            if plan.fallback {
                continue;
            }
            for item in &plan.items {
                let sample = data.iter().find(|s| s.study == item.study).unwrap();
                assert!(sample.organs.contains(&anchor));
                assert_eq!(item.entity, anchor);
            }
        }
    }

    #[test]
    fn same_organ_fraction_tracks_p_same() {
        let data = demo_dataset();
        let mut same = 0usize;
        let draws = 2000u64;
        for draw in 0..draws {
            let mut rng = stream_rng(4, "plan-frac", &[draw]);
            let plan = organ_batch_sample(&data, 3, 0.8, &mut rng).unwrap();
            if plan.same_organ() {
                same += 1;
            }
        }
        let frac = same as f64 / draws as f64;
        assert!((frac - 0.8).abs() <= 0.03, "same-organ fraction {frac}");
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = demo_dataset();
        let mut rng = stream_rng(5, "plan-test", &[]);
        match organ_batch_sample(&data[..2], 3, 0.5, &mut rng) {
            Err(Stage2Error::DatasetTooSmall { requested: 3, available: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    fn loss_value(img: Tensor, txt: Tensor, tau: f64, studies: &[&str]) -> f64 {
        let mut tape = Tape::new(FloatMode::F64);
        let i = tape.constant(img);
        let t = tape.constant(txt);
        let tau = tape.constant(Tensor::new(vec![1], vec![tau]).unwrap());
        let ids: Vec<String> = studies.iter().map(|s| s.to_string()).collect();
        let node = contrastive_loss(&mut tape, i, t, tau, &ids).unwrap();
        tape.value(node).item()
    }

    #[test]
    fn single_pair_gives_zero() {
        let e = unit_rows(vec![vec![1.0, 0.0]]);
        assert_eq!(loss_value(e.clone(), e, 1.0, &["a"]), 0.0);
    }

    #[test]
    fn orthogonal_two_pair_hand_case() {
        let e = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let got = loss_value(e.clone(), e, 1.0, &["a", "b"]);
        let e1 = 1.0f64.exp();
        let want = -(e1 / (e1 + 1.0)).ln();
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
        assert!((got - 0.3133).abs() < 1e-4);
    }

    /// f64 reimplementation with explicit denominator masking.
    fn oracle(img: &Tensor, txt: &Tensor, tau: f64, studies: &[&str]) -> f64 {
        let (b, d) = img.dims2("oracle").unwrap();
        let logit = |i: usize, j: usize| -> f64 {
            (0..d).map(|k| img.data()[i * d + k] * txt.data()[j * d + k]).sum::<f64>() / tau
        };
        let allowed = |i: usize, j: usize| i == j || studies[i] != studies[j];
        let mut total = 0.0;
        for i in 0..b {
            let denom: f64 =
                (0..b).filter(|&j| allowed(i, j)).map(|j| logit(i, j).exp()).sum();
            total += -(logit(i, i).exp() / denom).ln();
        }
        for j in 0..b {
            let denom: f64 =
                (0..b).filter(|&i| allowed(j, i)).map(|i| logit(i, j).exp()).sum();
            total += -(logit(j, j).exp() / denom).ln();
        }
        0.5 * total / b as f64
    }

    #[test]
    fn duplicate_study_matches_masked_oracle() {
        let img = unit_rows(vec![
            vec![0.9, 0.1, 0.2],
            vec![-0.3, 0.8, 0.1],
            vec![0.2, -0.5, 0.7],
        ]);
        let txt = unit_rows(vec![
            vec![0.8, 0.2, 0.1],
            vec![-0.2, 0.9, 0.0],
            vec![0.1, -0.4, 0.8],
        ]);
        let studies = ["a", "dup", "dup"];
        let got = loss_value(img.clone(), txt.clone(), 0.3, &studies);
        let want = oracle(&img, &txt, 0.3, &studies);
        assert!((got - want).abs() < 1e-10, "got {got} want {want}");

        // and masking matters: distinct ids give a different value
        let unmasked = loss_value(img.clone(), txt.clone(), 0.3, &["a", "b", "c"]);
        assert!((got - unmasked).abs() > 1e-6);
        let unmasked_oracle = oracle(&img, &txt, 0.3, &["a", "b", "c"]);
        assert!((unmasked - unmasked_oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let img = unit_rows(vec![
            vec![0.9, 0.1, 0.2],
            vec![-0.3, 0.8, 0.1],
            vec![0.2, -0.5, 0.7],
            vec![0.4, 0.4, -0.6],
        ]);
        let txt = unit_rows(vec![
            vec![0.8, 0.2, 0.1],
            vec![-0.2, 0.9, 0.0],
            vec![0.1, -0.4, 0.8],
            vec![0.5, 0.3, -0.5],
        ]);
        let studies = ["a", "b", "b", "c"];
        let base = loss_value(img.clone(), txt.clone(), 0.2, &studies);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let (_, d) = t.dims2("permute").unwrap();
            let data: Vec<f64> =
                perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
            Tensor::new(vec![perm.len(), d], data).unwrap()
        };
        let p_studies: Vec<&str> = perm.iter().map(|&r| studies[r]).collect();
        let permuted = loss_value(permute(&img), permute(&txt), 0.2, &p_studies);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_positive_cosine_rises() {
        let txt = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut last = f64::INFINITY;
        for theta in [1.2f64, 0.8, 0.4, 0.1] {
            let img = unit_rows(vec![vec![theta.cos(), theta.sin()], vec![0.0, 1.0]]);
            let loss = loss_value(img, txt.clone(), 0.5, &["a", "b"]);
            assert!(loss < last, "loss must fall as cos rises");
            last = loss;
        }
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let img = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let txt = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new(FloatMode::F64);
        let i = tape.constant(img);
        let t = tape.constant(txt);
        let tau = tape.constant(Tensor::new(vec![1], vec![0.07]).unwrap());
        match contrastive_loss(&mut tape, i, t, tau, &["a".to_string()]) {
            Err(Stage2Error::NotNormalized { row: 0, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    fn tiny_state(seed: u64) -> Stage2State {
        let vit = ViTConfig {
            patch: [8, 8, 8],
            embed: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            base_grid: [2, 2, 1],
            taps: vec![1],
        };
        let mut text_cfg = TextConfig::desk(64);
        text_cfg.embed = 16;
        text_cfg.depth = 1;
        text_cfg.heads = 2;
        text_cfg.mlp_ratio = 2;
        text_cfg.max_len = 24;
        let policy = CropPolicy {
            global: [16, 16, 8],
            local: [8, 8, 8],
            stage2: [16, 16, 8],
            stage2_fraction: (0.75, 1.0),
            local_count: 2,
            global_scale: (0.5, 1.0),
        };
        init_stage2(
            vit,
            text_cfg,
            policy,
            8,
            ScheduleSpec::cosine(3e-5, 0.0, 0, 100).unwrap(),
            10.0,
            seed,
            FloatMode::F64,
        )
        .unwrap()
    }

    fn tiny_items() -> (Vocab, Vec<Stage2Item>) {
        let texts = [
            "the liver appears normal without lesion",
            "the kidney shows a small cyst",
        ];
        let vocab = Vocab::build(texts.iter().copied());
        let items = texts
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let n = 20 * 18 * 10;
                let data: Vec<f64> =
                    (0..n).map(|k| ((k + i * 37) as f64 * 0.017).cos()).collect();
                Stage2Item {
                    study: format!("s{i}"),
                    volume: Volume::new(format!("v{i}"), [20, 18, 10], [1.0; 3], data).unwrap(),
                    text: text.to_string(),
                }
            })
            .collect();
        (vocab, items)
    }

    #[test]
    fn step_moves_params_and_holds_lr_ratio() {
        let mut state = tiny_state(11);
        let (vocab, items) = tiny_items();
        let before = state.params.content_hash();
        let log = stage2_step(&mut state, &vocab, &items, true).unwrap();
        assert!(log.loss.is_finite() && log.loss > 0.0);
        assert_eq!(log.lr_head, log.lr_encoder * 10.0);
        assert!((TAU_MIN..=TAU_MAX).contains(&log.tau));
        assert_ne!(state.params.content_hash(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn three_steps_are_bitwise_deterministic() {
        let (vocab, items) = tiny_items();
        let run = || {
            let mut state = tiny_state(12);
            for _ in 0..3 {
                stage2_step(&mut state, &vocab, &items, false).unwrap();
            }
            state.params.content_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroed_encoder_grads_still_move_heads() {
        let mut state = tiny_state(13);
        let (vocab, items) = tiny_items();
        let mode = state.params.mode();
        let mut tape = Tape::new(mode);
        let bound = state.params.bind(&mut tape, true);
        let mut image_rows = Vec::new();
        let mut text_rows = Vec::new();
        let mut studies = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let mut rng = stream_rng(13, "stage2-crop", &[0, i as u64]);
            let cropped = stage2_crop(&item.volume, &state.policy, &mut rng);
            let enc = encode_volume(
                &mut tape,
                &bound,
                crate::stage1::VISION_PREFIX,
                &state.vit,
                &cropped,
                None,
            )
            .unwrap();
            image_rows
                .push(project_shared(&mut tape, &bound, VISION_PROJ_PREFIX, enc.cls).unwrap());
            let ids = tokenize(&item.text, &vocab, &state.text_cfg);
            let txt = encode_text(
                &mut tape,
                &bound,
                crate::stage1::TEXT_PREFIX,
                &state.text_cfg,
                &ids,
            )
            .unwrap();
            text_rows.push(project_shared(&mut tape, &bound, TEXT_PROJ_PREFIX, txt.cls).unwrap());
            studies.push(item.study.clone());
        }
        let image = tape.concat(&image_rows, 0).unwrap();
        let text = tape.concat(&text_rows, 0).unwrap();
        let tau = bound.id(TAU_NAME);
        let loss = contrastive_loss(&mut tape, image, text, tau, &studies).unwrap();
        assert!(tape.value(loss).item() > 0.0);
        let grads = tape.backward(loss).unwrap();
        let mut by_name = bound.grads_by_name(&tape, &grads);
        for (name, g) in by_name.iter_mut() {
            if !is_head_param(name) {
                *g = Tensor::zeros(g.shape());
            }
        }
        let encoder_before: Vec<(String, Tensor)> = state
            .params
            .iter()
            .filter(|(n, _)| !is_head_param(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let head_before: Vec<(String, Tensor)> = state
            .params
            .iter()
            .filter(|(n, _)| is_head_param(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        for (name, param) in state.params.iter_mut() {
            state
                .opt
                .step_param(name, param, &by_name[name.as_str()], 1e-3, 0.0, mode)
                .unwrap();
        }
        for (name, before) in &encoder_before {
            assert_eq!(state.params.get(name).unwrap().data(), before.data(), "{name} moved");
        }
        let any_head_moved = head_before
            .iter()
            .any(|(name, before)| state.params.get(name).unwrap().data() != before.data());
        assert!(any_head_moved);
    }

    #[test]
    fn adopt_prefixed_copies_matching_names() {
        let mut a = tiny_state(14);
        let b = tiny_state(15);
        let before = a.params.get("txt.tok_emb").unwrap().clone();
        let n = adopt_prefixed(&mut a.params, &b.params, "txt").unwrap();
        assert!(n > 0);
        assert_ne!(a.params.get("txt.tok_emb").unwrap().data(), before.data());
        assert_eq!(
            a.params.get("txt.tok_emb").unwrap().data(),
            b.params.get("txt.tok_emb").unwrap().data()
        );
        match adopt_prefixed(&mut a.params, &b.params, "nonexistent") {
            Err(Stage2Error::MissingSource(_)) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }
}
