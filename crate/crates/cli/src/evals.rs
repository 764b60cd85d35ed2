//! Frozen-encoder evaluation commands: sliding-window probing, cross-modal
//! retrieval, decoder-only segmentation, and text-grounded box regression.
//! Each writes per-item JSONL plus a summary CSV under the output directory
//! and returns its report so tests can assert on the numbers in-process.

use crate::data::{
    first_series, frozen_vision, full_report_text, preprocess_to, vocab_from_checkpoint,
};
use crate::settings::{self, ProbeTargetKind};
use crate::train::load_dataset;
use anyhow::{bail, Context, Result};
use rand::Rng;
use serde::Serialize;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use voxrep_core::autodiff::Tape;
use voxrep_core::box3d::{iou_3d, Box3D};
use voxrep_core::eval::ground::{
    corners_to_box, grounding_forward, grounding_loss, init_grounding, GroundingConfig,
};
use voxrep_core::eval::metrics::{auroc, dice_per_class, mae};
use voxrep_core::eval::probe::{
    probe_predict, probe_train, ProbeConfig, ProbeItem, ProbeOutput, ProbeTarget, ProbeTask, Split,
};
use voxrep_core::eval::retrieval::{
    average_precision, precision_at_n, recall_at_k, retrieval_rank,
};
use voxrep_core::eval::seg::{
    init_seg_decoder, seg_decode, seg_label_map, seg_targets, SegDecoderConfig,
};
use voxrep_core::eval::window::extract_embeddings;
use voxrep_core::io::checkpoint::Checkpoint;
use voxrep_core::io::config::Config;
use voxrep_core::io::emit::{append_jsonl, fmt_float, write_csv, write_jsonl};
use voxrep_core::io::manifest::load_truth;
use voxrep_core::nn::head::project_shared;
use voxrep_core::nn::params::ParamSet;
use voxrep_core::nn::text::{encode_text, tokenize};
use voxrep_core::nn::vit::encode_volume;
use voxrep_core::optim::AdamW;
use voxrep_core::report::entity::OrganEntityTable;
use voxrep_core::rng::stream_rng;
use voxrep_core::stage2::{TEXT_PROJ_PREFIX, VISION_PROJ_PREFIX};
use voxrep_core::tensor::{FloatMode, Tensor};
use voxrep_core::volume::preprocess::{percentile_rescale, resample_trilinear};

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
}

fn prepare_out(out: &Path) -> Result<PathBuf> {
    let out = settings::resolve_out(out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_checkpoint(path: &Path, mode: FloatMode) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.mode != mode {
        bail!(
            "checkpoint {} is {}, run configured for {}",
            path.display(),
            ck.meta.mode.name(),
            mode.name()
        );
    }
    Ok(ck)
}

// ---------------------------------------------------------------- probing

#[derive(Debug, Clone, Serialize)]
pub struct ProbeMetric {
    pub train_scope: String,
    pub test_scope: String,
    pub n_test: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug)]
pub struct ProbeReport {
    pub rows: Vec<ProbeMetric>,
}

impl ProbeReport {
    /// Value of a metric for one (train, test) scope pair.
    pub fn value(&self, train: &str, test: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.train_scope == train && r.test_scope == test && r.metric == metric)
            .map(|r| r.value)
    }
}

struct ScopePlan {
    train_scope: String,
    test_scope: String,
    split: Split,
}

/// Shuffle each class bucket and cut it into train/val/test fractions, so
/// every class reaches every subset. Regression targets form one bucket.
fn stratified_split(
    items: &[ProbeItem],
    idx: &[usize],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
    scope: u64,
) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        bail!("split fractions {train_frac}/{val_frac} must be positive and sum below 1");
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        let key = match items[i].target {
            ProbeTarget::Class(c) => c,
            ProbeTarget::Value(_) => 0,
        };
        buckets.entry(key).or_default().push(i);
    }
    let mut rng = stream_rng(seed, "probe-split", &[scope]);
    let mut split = Split { train: vec![], val: vec![], test: vec![] };
    for bucket in buckets.values_mut() {
        for i in (1..bucket.len()).rev() {
            bucket.swap(i, rng.gen_range(0..=i));
        }
        let n = bucket.len();
        let mut n_train = ((n as f64 * train_frac).round() as usize).max(1);
        let mut n_val = ((n as f64 * val_frac).round() as usize).max(1);
        if n_train + n_val >= n {
            n_train = n.saturating_sub(2).max(1);
            n_val = (n - n_train).saturating_sub(1).max(1);
        }
        split.train.extend(&bucket[..n_train.min(n)]);
        split.val.extend(&bucket[n_train.min(n)..(n_train + n_val).min(n)]);
        split.test.extend(&bucket[(n_train + n_val).min(n)..]);
    }
    if split.test.is_empty() {
        bail!("test split is empty; corpus too small for fractions {train_frac}/{val_frac}");
    }
    Ok(split)
}

/// Macro AUROC over the classes that appear with both polarities in the
/// test set (cross-group tests may not cover every class).
fn macro_auroc_covered(
    scores: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let mut per = Vec::new();
    for c in 0..classes {
        let class_labels: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = class_labels.iter().filter(|&&b| b).count();
        if pos == 0 || pos == class_labels.len() {
            continue;
        }
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        per.push((c, auroc(&class_scores, &class_labels)?));
    }
    if per.is_empty() {
        bail!("no class has both positives and negatives in the test set");
    }
    let mean = per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Train the fixed MLP probe on frozen sliding-window embeddings and score
/// held-out studies: macro AUROC + accuracy for layout classification, MAE
/// for age regression. Grouped mode trains per acquisition group and tests
/// on every group, including unseen ones.
pub fn cmd_probe(args: &EvalArgs) -> Result<ProbeReport> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let ps = settings::probe_settings(&mut cfg, &policy)?;
    settings::finish(cfg, &["run", "vit", "crop", "pre", "probe"])?;

    let manifest = load_dataset(&args.data)?;
    let ck = load_checkpoint(&args.checkpoint, common.mode)?;
    let encoder = frozen_vision(&ck, common.mode)?;
    let out = prepare_out(&args.out)?;

    let classes = match ps.target {
        ProbeTargetKind::Layout => {
            let max = manifest
                .entries
                .iter()
                .map(|e| e.class.with_context(|| format!("study '{}' has no class label", e.study)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .context("empty manifest")?;
            max + 1
        }
        ProbeTargetKind::Age => 0,
    };

    let mut items: Vec<ProbeItem> = Vec::with_capacity(manifest.entries.len());
    let mut groups: Vec<String> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let v = first_series(&args.data, e)?;
        let v = preprocess_to(&v, &pre, ps.extents)?;
        let emb = extract_embeddings(&encoder, "vis", &vit, &[&v], ps.window, ps.stride)?;
        let target = match ps.target {
            ProbeTargetKind::Layout => ProbeTarget::Class(e.class.expect("checked above")),
            ProbeTargetKind::Age => {
                let rel = e
                    .truth
                    .as_ref()
                    .with_context(|| format!("study '{}' has no truth record", e.study))?;
                ProbeTarget::Value(load_truth(&args.data, rel)?.age)
            }
        };
        items.push(ProbeItem {
            id: e.study.clone(),
            windows: emb.into_iter().next().expect("one volume in").rows,
            target,
        });
        groups.push(e.group.clone().unwrap_or_default());
    }

    let plans: Vec<ScopePlan> = if ps.grouped {
        if groups.iter().any(String::is_empty) {
            bail!("grouped probing needs a group on every study");
        }
        let names: Vec<String> =
            groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let mut plans = Vec::new();
        for (gi, a) in names.iter().enumerate() {
            let own: Vec<usize> =
                (0..items.len()).filter(|&i| &groups[i] == a).collect();
            let base =
                stratified_split(&items, &own, ps.train_frac, ps.val_frac, common.seed, gi as u64)?;
            for b in &names {
                let test = if b == a {
                    base.test.clone()
                } else {
                    (0..items.len()).filter(|&i| &groups[i] == b).collect()
                };
                plans.push(ScopePlan {
                    train_scope: a.clone(),
                    test_scope: b.clone(),
                    split: Split { train: base.train.clone(), val: base.val.clone(), test },
                });
            }
        }
        plans
    } else {
        let all: Vec<usize> = (0..items.len()).collect();
        vec![ScopePlan {
            train_scope: "all".into(),
            test_scope: "all".into(),
            split: stratified_split(&items, &all, ps.train_frac, ps.val_frac, common.seed, 0)?,
        }]
    };

    let probe_cfg = ProbeConfig::desk(
        vit.embed,
        match ps.target {
            ProbeTargetKind::Layout => ProbeTask::Classify { classes },
            ProbeTargetKind::Age => ProbeTask::Regress,
        },
    );

    let mut rows: Vec<ProbeMetric> = Vec::new();
    let mut outputs: Vec<serde_json::Value> = Vec::new();
    for plan in &plans {
        let params = probe_train(&items, &probe_cfg, &plan.split, common.seed, common.mode)?;
        let mut push = |metric: &str, value: f64| {
            rows.push(ProbeMetric {
                train_scope: plan.train_scope.clone(),
                test_scope: plan.test_scope.clone(),
                n_test: plan.split.test.len(),
                metric: metric.into(),
                value,
            });
        };
        match probe_cfg.task {
            ProbeTask::Classify { classes } => {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for &i in &plan.split.test {
                    let ProbeOutput::Probs(p) = probe_predict(&params, &probe_cfg, &items[i].windows)?
                    else {
                        unreachable!("classification probe returns probabilities")
                    };
                    let ProbeTarget::Class(c) = items[i].target else {
                        bail!("study '{}' has a regression target in a classification probe", items[i].id)
                    };
                    outputs.push(json!({
                        "train_scope": plan.train_scope,
                        "test_scope": plan.test_scope,
                        "id": items[i].id,
                        "target": c,
                        "probs": p,
                    }));
                    scores.push(p);
                    labels.push(c);
                }
                let (macro_auroc, per_class) = macro_auroc_covered(&scores, &labels, classes)?;
                let hits = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(s, &l)| {
                        let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
                        best == l
                    })
                    .count();
                push("macro_auroc", macro_auroc);
                push("accuracy", hits as f64 / labels.len() as f64);
                for (c, v) in per_class {
                    push(&format!("auroc_class_{c}"), v);
                }
            }
            ProbeTask::Regress => {
                let mut preds = Vec::new();
                let mut targets = Vec::new();
                for &i in &plan.split.test {
                    let ProbeOutput::Value(p) = probe_predict(&params, &probe_cfg, &items[i].windows)?
                    else {
                        unreachable!("regression probe returns a value")
                    };
                    let ProbeTarget::Value(t) = items[i].target else {
                        bail!("study '{}' has a class target in a regression probe", items[i].id)
                    };
                    outputs.push(json!({
                        "train_scope": plan.train_scope,
                        "test_scope": plan.test_scope,
                        "id": items[i].id,
                        "target": t,
                        "prediction": p,
                    }));
                    preds.push(p);
                    targets.push(t);
                }
                push("mae", mae(&preds, &targets)?);
            }
        }
    }

    write_jsonl(out.join("probe_outputs.jsonl"), &outputs)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.train_scope.clone(),
                r.test_scope.clone(),
                r.n_test.to_string(),
                r.metric.clone(),
                fmt_float(r.value),
            ]
        })
        .collect();
    write_csv(
        out.join("probe_metrics.csv"),
        &["train_scope", "test_scope", "n_test", "metric", "value"],
        &csv,
    )?;
    Ok(ProbeReport { rows })
}

// -------------------------------------------------------------- retrieval

#[derive(Debug, Clone, Serialize)]
pub struct RetrieveMetric {
    pub direction: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug)]
pub struct RetrieveReport {
    pub metrics: Vec<RetrieveMetric>,
    /// Unit-norm shared-space embeddings keyed by study.
    pub image_emb: BTreeMap<String, Vec<f64>>,
    pub text_emb: BTreeMap<String, Vec<f64>>,
}

impl RetrieveReport {
    pub fn value(&self, direction: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.direction == direction && m.metric == metric)
            .map(|m| m.value)
    }
}

fn rank_metrics(
    direction: &str,
    queries: &BTreeMap<String, Vec<f64>>,
    index: &[(String, Vec<f64>)],
    classes: &BTreeMap<String, String>,
    rs: &settings::RetrieveSettings,
    outputs: &mut Vec<serde_json::Value>,
    metrics: &mut Vec<RetrieveMetric>,
) -> Result<()> {
    let mut recalls: BTreeMap<usize, f64> = rs.recall_ks.iter().map(|&k| (k, 0.0)).collect();
    let mut precisions: BTreeMap<usize, f64> = rs.precision_ns.iter().map(|&n| (n, 0.0)).collect();
    let mut ap_sum = 0.0;
    let mut rank_sum = 0.0;
    let n = queries.len() as f64;
    for (study, q) in queries {
        let ranked = retrieval_rank(q, index);
        let rank = ranked.iter().position(|r| r == study).map(|p| p + 1).unwrap_or(0);
        rank_sum += rank as f64;
        for (&k, acc) in recalls.iter_mut() {
            *acc += recall_at_k(&ranked, study, k)? / n;
        }
        let category = &classes[study];
        let relevant: BTreeSet<String> = classes
            .iter()
            .filter(|(_, c)| *c == category)
            .map(|(s, _)| s.clone())
            .collect();
        for (&nn, acc) in precisions.iter_mut() {
            *acc += precision_at_n(&ranked, classes, category, nn)? / n;
        }
        ap_sum += average_precision(&ranked, &relevant).context("query with no relevant item")?;
        outputs.push(json!({
            "direction": direction,
            "study": study,
            "rank_of_true": rank,
            "top": ranked.iter().take(5).collect::<Vec<_>>(),
        }));
    }
    metrics.push(RetrieveMetric {
        direction: direction.into(),
        metric: "mean_rank".into(),
        value: rank_sum / n,
    });
    for (k, v) in recalls {
        metrics.push(RetrieveMetric {
            direction: direction.into(),
            metric: format!("recall@{k}"),
            value: v,
        });
    }
    for (nn, v) in precisions {
        metrics.push(RetrieveMetric {
            direction: direction.into(),
            metric: format!("precision@{nn}"),
            value: v,
        });
    }
    metrics.push(RetrieveMetric {
        direction: direction.into(),
        metric: "map".into(),
        value: ap_sum / n,
    });
    Ok(())
}

/// Volume-report retrieval in the shared space of a contrastive checkpoint,
/// both directions, ranking the full corpus for every query.
pub fn cmd_retrieve(args: &EvalArgs) -> Result<RetrieveReport> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let rs = settings::retrieve_settings(&mut cfg)?;

    let ck = load_checkpoint(&args.checkpoint, common.mode)?;
    if ck.meta.kind != "stage2" {
        bail!("retrieval needs a contrastive (stage2) checkpoint, got '{}'", ck.meta.kind);
    }
    let params = ck.param_set("model", common.mode)?;
    let vocab = vocab_from_checkpoint(&ck)?;
    let text_cfg = settings::text_config(&mut cfg, vocab.len())?;
    settings::finish(cfg, &["run", "vit", "text", "crop", "pre", "retrieve"])?;

    let manifest = load_dataset(&args.data)?;
    let out = prepare_out(&args.out)?;
    let table = OrganEntityTable::builtin();

    let mut image_emb = BTreeMap::new();
    let mut text_emb = BTreeMap::new();
    let mut classes: BTreeMap<String, String> = BTreeMap::new();
    for e in &manifest.entries {
        let class = e
            .class
            .with_context(|| format!("study '{}' has no class label for category metrics", e.study))?;
        classes.insert(e.study.clone(), class.to_string());

        let v = first_series(&args.data, e)?;
        let v = preprocess_to(&v, &pre, policy.stage2)?;
        let mut tape = Tape::new(common.mode);
        let bound = params.bind(&mut tape, false);
        let enc = encode_volume(&mut tape, &bound, "vis", &vit, &v, None)?;
        let proj = project_shared(&mut tape, &bound, VISION_PROJ_PREFIX, enc.cls)?;
        image_emb.insert(e.study.clone(), tape.value(proj).data().to_vec());

        let report = voxrep_core::io::manifest::load_report(&args.data, &e.report, &table)?;
        let ids = tokenize(&full_report_text(&report), &vocab, &text_cfg);
        let mut tape = Tape::new(common.mode);
        let bound = params.bind(&mut tape, false);
        let txt = encode_text(&mut tape, &bound, "txt", &text_cfg, &ids)?;
        let proj = project_shared(&mut tape, &bound, TEXT_PROJ_PREFIX, txt.cls)?;
        text_emb.insert(e.study.clone(), tape.value(proj).data().to_vec());
    }

    let image_index: Vec<(String, Vec<f64>)> =
        image_emb.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
    let text_index: Vec<(String, Vec<f64>)> =
        text_emb.iter().map(|(s, v)| (s.clone(), v.clone())).collect();

    let mut outputs = Vec::new();
    let mut metrics = Vec::new();
    rank_metrics("text_to_image", &text_emb, &image_index, &classes, &rs, &mut outputs, &mut metrics)?;
    rank_metrics("image_to_text", &image_emb, &text_index, &classes, &rs, &mut outputs, &mut metrics)?;

    write_jsonl(out.join("retrieve_outputs.jsonl"), &outputs)?;
    let csv: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| vec![m.direction.clone(), m.metric.clone(), fmt_float(m.value)])
        .collect();
    write_csv(out.join("retrieve_metrics.csv"), &["direction", "metric", "value"], &csv)?;
    Ok(RetrieveReport { metrics, image_emb, text_emb })
}

// ----------------------------------------------------------- segmentation

#[derive(Debug, Clone, Serialize)]
pub struct SegStudyRow {
    pub study: String,
    pub dice: Vec<f64>,
    pub mean: f64,
    pub foreground_mean: f64,
}

#[derive(Debug)]
pub struct SegReport {
    /// Class names, background first.
    pub classes: Vec<String>,
    pub per_study: Vec<SegStudyRow>,
    pub mean_foreground_dice: f64,
}

/// Nearest-neighbor label resample (labels must not be interpolated).
fn resample_labels(labels: &[u16], from: [usize; 3], to: [usize; 3]) -> Vec<u16> {
    let mut out = Vec::with_capacity(to[0] * to[1] * to[2]);
    for z in 0..to[2] {
        for y in 0..to[1] {
            for x in 0..to[0] {
                let src = [x, y, z]
                    .iter()
                    .zip(from.iter().zip(to.iter()))
                    .map(|(&i, (&f, &t))| (((i as f64 + 0.5) * f as f64 / t as f64) as usize).min(f - 1))
                    .collect::<Vec<_>>();
                out.push(labels[src[0] + from[0] * (src[1] + from[1] * src[2])]);
            }
        }
    }
    out
}

struct SegStudy {
    study: String,
    taps: Vec<Tensor>,
    labels: Vec<u16>,
    targets: Tensor,
}

/// Train the skip-connected decoder on frozen encoder taps against the
/// voxel truth, then report per-class Dice per study. Volumes are intensity
/// rescaled but never foreground-cropped so the truth stays aligned.
pub fn cmd_segment(args: &EvalArgs) -> Result<SegReport> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let ss = settings::seg_settings(&mut cfg, &policy)?;
    settings::finish(cfg, &["run", "vit", "crop", "pre", "seg"])?;

    let manifest = load_dataset(&args.data)?;
    let ck = load_checkpoint(&args.checkpoint, common.mode)?;
    let encoder = frozen_vision(&ck, common.mode)?;
    let out = prepare_out(&args.out)?;
    let log_path = out.join("segment_log.jsonl");

    let organ_union: Vec<String> = manifest
        .entries
        .iter()
        .flat_map(|e| e.organs.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if organ_union.is_empty() {
        bail!("no organs in the manifest; nothing to segment");
    }
    let classes = organ_union.len() + 1;
    let class_names: Vec<String> =
        std::iter::once("background".to_string()).chain(organ_union.iter().cloned()).collect();
    let global_id: BTreeMap<&str, u16> = organ_union
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i as u16 + 1))
        .collect();

    let mut studies: Vec<SegStudy> = Vec::with_capacity(manifest.entries.len());
    let mut grid = None;
    for e in &manifest.entries {
        let rel = e
            .truth
            .as_ref()
            .with_context(|| format!("study '{}' has no voxel truth; cannot segment", e.study))?;
        let truth = load_truth(&args.data, rel)?;
        let v = first_series(&args.data, e)?;
        if v.extents() != truth.extents {
            bail!(
                "study '{}': volume extents {:?} disagree with truth {:?}",
                e.study,
                v.extents(),
                truth.extents
            );
        }
        let v = percentile_rescale(&v, pre.rescale.0, pre.rescale.1);
        let v = if v.extents() == ss.extents { v } else { resample_trilinear(&v, ss.extents)? };
        let mut labels: Vec<u16> = truth
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let entity = &truth.organ_entities[l as usize - 1];
                    global_id[entity.as_str()]
                }
            })
            .collect();
        if truth.extents != ss.extents {
            labels = resample_labels(&labels, truth.extents, ss.extents);
        }

        let mut tape = Tape::new(common.mode);
        let bound = encoder.bind(&mut tape, false);
        let enc = encode_volume(&mut tape, &bound, "vis", &vit, &v, None)?;
        let taps: Vec<Tensor> = enc.tapped.iter().map(|&t| tape.value(t).clone()).collect();
        grid.get_or_insert(enc.grid);
        let targets = seg_targets(&labels, classes)?;
        studies.push(SegStudy { study: e.study.clone(), taps, labels, targets });
    }
    let grid = grid.context("empty manifest")?;

    let dec_cfg = SegDecoderConfig { channels: ss.channels, classes };
    let mut params = ParamSet::new(common.mode);
    let mut rng = stream_rng(common.seed, "seg-init", &[]);
    init_seg_decoder(&mut params, &mut rng, "dec", vit.embed, &dec_cfg);
    let mut opt = AdamW::default();

    let evaluate = |params: &ParamSet| -> Result<Vec<SegStudyRow>> {
        let mut rows = Vec::with_capacity(studies.len());
        for s in &studies {
            let mut tape = Tape::new(common.mode);
            let bound = params.bind(&mut tape, false);
            let taps: Vec<_> = s.taps.iter().map(|t| tape.constant(t.clone())).collect();
            let logits = seg_decode(&mut tape, &bound, "dec", &dec_cfg, &taps, grid, ss.extents)?;
            let pred = seg_label_map(tape.value(logits));
            let (dice, mean) = dice_per_class(&pred, &s.labels, classes)?;
            // Foreground mean covers only classes with truth voxels in this
            // study; absent organs score a trivial 1.0 and would inflate it.
            let present: Vec<usize> = (1..classes)
                .filter(|&c| s.labels.iter().any(|&l| l as usize == c))
                .collect();
            if present.is_empty() {
                bail!("study '{}' has no foreground voxels", s.study);
            }
            let foreground_mean =
                present.iter().map(|&c| dice[c]).sum::<f64>() / present.len() as f64;
            rows.push(SegStudyRow { study: s.study.clone(), dice, mean, foreground_mean });
        }
        Ok(rows)
    };

    for step in 0..ss.steps {
        let s = &studies[(step % studies.len() as u64) as usize];
        let mut tape = Tape::new(common.mode);
        let bound = params.bind(&mut tape, true);
        let taps: Vec<_> = s.taps.iter().map(|t| tape.constant(t.clone())).collect();
        let logits = seg_decode(&mut tape, &bound, "dec", &dec_cfg, &taps, grid, ss.extents)?;
        let targets = tape.constant(s.targets.clone());
        let loss = tape.cross_entropy(logits, targets, 1.0)?;
        let loss_v = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let by_name = bound.grads_by_name(&tape, &grads);
        for (name, param) in params.iter_mut() {
            opt.step_param(name, param, &by_name[name.as_str()], ss.lr, 0.0, common.mode)?;
        }
        append_jsonl(&log_path, &json!({"step": step, "study": s.study, "loss": loss_v}))?;
        if (step + 1) % ss.eval_every == 0 || step + 1 == ss.steps {
            let rows = evaluate(&params)?;
            let fg = rows.iter().map(|r| r.foreground_mean).sum::<f64>() / rows.len() as f64;
            append_jsonl(
                &log_path,
                &json!({"step": step, "mean_foreground_dice": fg}),
            )?;
        }
    }

    let per_study = evaluate(&params)?;
    let mean_foreground_dice =
        per_study.iter().map(|r| r.foreground_mean).sum::<f64>() / per_study.len() as f64;

    let mut header: Vec<&str> = vec!["study"];
    let dice_cols: Vec<String> = class_names.iter().map(|c| format!("dice_{c}")).collect();
    header.extend(dice_cols.iter().map(String::as_str));
    header.push("foreground_mean");
    let csv: Vec<Vec<String>> = per_study
        .iter()
        .map(|r| {
            let mut row = vec![r.study.clone()];
            row.extend(r.dice.iter().map(|&d| fmt_float(d)));
            row.push(fmt_float(r.foreground_mean));
            row
        })
        .collect();
    write_csv(out.join("segment_metrics.csv"), &header, &csv)?;
    Ok(SegReport { classes: class_names, per_study, mean_foreground_dice })
}

// -------------------------------------------------------------- grounding

#[derive(Debug, Clone, Serialize)]
pub struct GroundRow {
    pub study: String,
    pub entity: String,
    pub prompt: String,
    pub iou: f64,
    pub pred: [f64; 6],
    pub truth: [f64; 6],
}

#[derive(Debug)]
pub struct GroundReport {
    pub per_item: Vec<GroundRow>,
    pub miou: f64,
}

struct GroundItem {
    study: String,
    entity: String,
    prompt: String,
    visual: Tensor,
    text: Tensor,
    keep: Vec<bool>,
    truth: Box3D,
}

/// Train the fusion head to localize organ prompts against the truth boxes
/// using frozen contrastive encoders; reports per-item IoU and the mean.
pub fn cmd_ground(args: &EvalArgs) -> Result<GroundReport> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let gs = settings::ground_settings(&mut cfg, &policy)?;

    let ck = load_checkpoint(&args.checkpoint, common.mode)?;
    if ck.meta.kind != "stage2" {
        bail!("grounding needs a contrastive (stage2) checkpoint, got '{}'", ck.meta.kind);
    }
    let params = ck.param_set("model", common.mode)?;
    let vocab = vocab_from_checkpoint(&ck)?;
    let text_cfg = settings::text_config(&mut cfg, vocab.len())?;
    settings::finish(cfg, &["run", "vit", "text", "crop", "pre", "ground"])?;

    let manifest = load_dataset(&args.data)?;
    let out = prepare_out(&args.out)?;
    let log_path = out.join("ground_log.jsonl");
    let table = OrganEntityTable::builtin();

    let mut items: Vec<GroundItem> = Vec::new();
    for e in &manifest.entries {
        let rel = e
            .truth
            .as_ref()
            .with_context(|| format!("study '{}' has no truth boxes; cannot ground", e.study))?;
        let truth = load_truth(&args.data, rel)?;
        let v = first_series(&args.data, e)?;
        let v = percentile_rescale(&v, pre.rescale.0, pre.rescale.1);
        let v = if v.extents() == gs.extents { v } else { resample_trilinear(&v, gs.extents)? };

        let mut tape = Tape::new(common.mode);
        let bound = params.bind(&mut tape, false);
        let enc = encode_volume(&mut tape, &bound, "vis", &vit, &v, None)?;
        let visual = tape.value(enc.patches).clone();

        for (oi, entity) in truth.organ_entities.iter().enumerate() {
            let synonyms = table.synonyms_of(entity);
            let prompt = synonyms.first().copied().unwrap_or(entity.as_str()).to_string();
            let ids = tokenize(&prompt, &vocab, &text_cfg);
            let keep: Vec<bool> = ids.iter().map(|&i| i != text_cfg.specials.pad).collect();
            let mut tape = Tape::new(common.mode);
            let bound = params.bind(&mut tape, false);
            let txt = encode_text(&mut tape, &bound, "txt", &text_cfg, &ids)?;
            items.push(GroundItem {
                study: e.study.clone(),
                entity: entity.clone(),
                prompt,
                visual: visual.clone(),
                text: tape.value(txt.tokens).clone(),
                keep,
                truth: truth.normalized_box(oi),
            });
        }
    }
    if items.is_empty() {
        bail!("no (study, organ) grounding items in the manifest");
    }

    let g_cfg = GroundingConfig {
        vis_dim: vit.embed,
        text_dim: text_cfg.embed,
        width: gs.width,
        depth: gs.depth,
        heads: gs.heads,
        mlp_ratio: gs.mlp_ratio,
        w1: gs.w1,
        w2: gs.w2,
    };
    g_cfg.validate()?;
    let mut head = ParamSet::new(common.mode);
    let mut rng = stream_rng(common.seed, "ground-init", &[]);
    init_grounding(&mut head, &mut rng, "gr", &g_cfg);
    let mut opt = AdamW::default();

    let evaluate = |head: &ParamSet| -> Result<Vec<GroundRow>> {
        let mut rows = Vec::with_capacity(items.len());
        for it in &items {
            let mut tape = Tape::new(common.mode);
            let bound = head.bind(&mut tape, false);
            let visual = tape.constant(it.visual.clone());
            let text = tape.constant(it.text.clone());
            let corners =
                grounding_forward(&mut tape, &bound, "gr", &g_cfg, visual, text, &it.keep)?;
            let pred = corners_to_box(tape.value(corners))?;
            rows.push(GroundRow {
                study: it.study.clone(),
                entity: it.entity.clone(),
                prompt: it.prompt.clone(),
                iou: iou_3d(&pred, &it.truth),
                pred: pred.as_flat(),
                truth: it.truth.as_flat(),
            });
        }
        Ok(rows)
    };

    for step in 0..gs.steps {
        let it = &items[(step % items.len() as u64) as usize];
        let mut tape = Tape::new(common.mode);
        let bound = head.bind(&mut tape, true);
        let visual = tape.constant(it.visual.clone());
        let text = tape.constant(it.text.clone());
        let corners = grounding_forward(&mut tape, &bound, "gr", &g_cfg, visual, text, &it.keep)?;
        let loss = grounding_loss(&mut tape, corners, &it.truth, g_cfg.w1, g_cfg.w2)?;
        let loss_v = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let by_name = bound.grads_by_name(&tape, &grads);
        for (name, param) in head.iter_mut() {
            opt.step_param(name, param, &by_name[name.as_str()], gs.lr, 0.0, common.mode)?;
        }
        append_jsonl(
            &log_path,
            &json!({"step": step, "study": it.study, "entity": it.entity, "loss": loss_v}),
        )?;
        if (step + 1) % gs.eval_every == 0 || step + 1 == gs.steps {
            let rows = evaluate(&head)?;
            let miou = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64;
            append_jsonl(&log_path, &json!({"step": step, "miou": miou}))?;
        }
    }

    let per_item = evaluate(&head)?;
    let miou = per_item.iter().map(|r| r.iou).sum::<f64>() / per_item.len() as f64;
    let csv: Vec<Vec<String>> = per_item
        .iter()
        .map(|r| {
            vec![r.study.clone(), r.entity.clone(), r.prompt.clone(), fmt_float(r.iou)]
        })
        .collect();
    write_csv(out.join("ground_metrics.csv"), &["study", "entity", "prompt", "iou"], &csv)?;
    Ok(GroundReport { per_item, miou })
}
