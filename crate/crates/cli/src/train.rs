//! The three pretraining commands: stage-1 self-distillation, text MLM,
//! and stage-2 contrastive alignment. Each runs a step loop with periodic
//! rolling checkpoints and an appended JSONL log, and resumes bitwise from
//! its own checkpoints.

use crate::data::{preprocess, report_texts, study_samples, vocab_from_checkpoint};
use crate::settings::{self, Preproc};
use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use voxrep_core::io::checkpoint::{pack_opt, pack_params, unpack_opt, Checkpoint, CheckpointMeta};
use voxrep_core::io::config::Config;
use voxrep_core::io::emit::append_jsonl;
use voxrep_core::io::manifest::DatasetManifest;
use voxrep_core::io::volume_file::load_volume;
use voxrep_core::nn::text::Vocab;
use voxrep_core::report::entity::OrganEntityTable;
use voxrep_core::rng::stream_rng;
use voxrep_core::stage1::{
    init_mlm, init_stage1, mlm_step, stage1_vision_step, MlmState, Stage1State,
};
use voxrep_core::stage2::{adopt_prefixed, init_stage2, organ_batch_sample, stage2_step, Stage2Item, Stage2State};
use voxrep_core::volume::Volume;

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub force: bool,
    /// Stop after this step without touching the configured total, so the
    /// run can be resumed on the same schedules (simulates interruption).
    pub halt_at: Option<u64>,
    /// Stage-2 only: stage-1 checkpoint providing the vision encoder.
    pub vision_init: Option<PathBuf>,
    /// Stage-2 only: MLM checkpoint providing the text encoder.
    pub text_init: Option<PathBuf>,
}

fn step_budget(args: &TrainArgs, steps: u64) -> u64 {
    args.halt_at.map_or(steps, |h| h.min(steps))
}

pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(root.join("manifest.json"))?;
    manifest.validate(root, &OrganEntityTable::builtin())?;
    Ok(manifest)
}

fn prepare_out(out: &Path) -> Result<PathBuf> {
    let out = settings::resolve_out(out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

/// `k` distinct indices from `0..n` (all of them when k >= n), in draw order.
fn pick_distinct(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn load_batch(
    root: &Path,
    manifest: &DatasetManifest,
    batch: usize,
    pre: &Preproc,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Volume>> {
    let idx = pick_distinct(manifest.entries.len(), batch, rng);
    let mut out = Vec::with_capacity(idx.len());
    for i in idx {
        let e = &manifest.entries[i];
        let s = rng.gen_range(0..e.volumes.len());
        let v = load_volume(root.join(&e.volumes[s]))?;
        out.push(preprocess(&v, pre));
    }
    Ok(out)
}

fn pack_stage1(state: &Stage1State, config: String) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    pack_params(&mut tensors, "student", &state.student);
    pack_params(&mut tensors, "teacher", &state.teacher);
    tensors.insert("center".to_string(), state.center.clone());
    let opt_t = pack_opt(&mut tensors, &state.opt);
    Checkpoint {
        meta: CheckpointMeta {
            kind: "stage1".into(),
            mode: state.student.mode(),
            step: state.step,
            seed: state.seed,
            config,
            opt_t,
            extra: BTreeMap::new(),
        },
        tensors,
    }
}

fn resume_stage1(ck: &Checkpoint, mut state: Stage1State) -> Result<Stage1State> {
    state.student = ck.param_set("student", state.student.mode())?;
    state.teacher = ck.param_set("teacher", state.teacher.mode())?;
    state.center = ck.tensor("center")?.clone();
    state.opt = unpack_opt(ck)?;
    state.step = ck.meta.step;
    state.seed = ck.meta.seed;
    Ok(state)
}

/// Stage-1 self-distillation over the manifest, `steps` optimizer steps.
pub fn cmd_pretrain_stage1(args: &TrainArgs) -> Result<PathBuf> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let snapshot = cfg.canonical();
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let s1 = settings::stage1_settings(&mut cfg)?;
    settings::finish(cfg, &["run", "vit", "crop", "pre", "stage1"])?;

    let manifest = load_dataset(&args.data)?;
    let out = prepare_out(&args.out)?;
    let ckpt_path = out.join("stage1.ckpt");
    let log_path = out.join("stage1_log.jsonl");

    let mut state = init_stage1(
        vit,
        s1.distill.clone(),
        policy,
        s1.lr,
        s1.wd,
        common.seed,
        common.mode,
    )?;
    if let Some(resume) = &args.resume {
        let ck = Checkpoint::load(resume)?;
        ck.verify("stage1", &snapshot, common.mode, args.force)?;
        state = resume_stage1(&ck, state)?;
    }

    let until = step_budget(args, s1.steps);
    while state.step < until {
        let step = state.step;
        let mut rng = stream_rng(state.seed, "stage1-batch", &[step]);
        let batch = load_batch(&args.data, &manifest, s1.batch, &pre, &mut rng)?;
        let log = stage1_vision_step(&mut state, &batch)?;
        append_jsonl(&log_path, &log)?;
        if state.step % s1.ckpt_every == 0 || state.step == until {
            pack_stage1(&state, snapshot.clone()).save(&ckpt_path)?;
        }
    }
    pack_stage1(&state, snapshot).save(&ckpt_path)?;
    Ok(ckpt_path)
}

fn pack_mlm(state: &MlmState, config: String, vocab: &Vocab) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    pack_params(&mut tensors, "model", &state.params);
    let opt_t = pack_opt(&mut tensors, &state.opt);
    Checkpoint {
        meta: CheckpointMeta {
            kind: "mlm".into(),
            mode: state.params.mode(),
            step: state.step,
            seed: state.seed,
            config,
            opt_t,
            extra: BTreeMap::from([("vocab".to_string(), vocab.to_lines())]),
        },
        tensors,
    }
}

fn resume_mlm(ck: &Checkpoint, mut state: MlmState) -> Result<MlmState> {
    state.params = ck.param_set("model", state.params.mode())?;
    state.opt = unpack_opt(ck)?;
    state.step = ck.meta.step;
    state.seed = ck.meta.seed;
    Ok(state)
}

/// Masked-language-model pretraining of the text encoder on the corpus
/// reports. Builds (or restores) the vocabulary and embeds it in the
/// checkpoint so downstream stages tokenize identically.
pub fn cmd_pretrain_mlm(args: &TrainArgs) -> Result<PathBuf> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let snapshot = cfg.canonical();
    let common = settings::common(&mut cfg)?;
    let m = settings::mlm_settings(&mut cfg)?;

    let manifest = load_dataset(&args.data)?;
    let texts = report_texts(&args.data, &manifest)?;
    let vocab = match &args.resume {
        Some(resume) => vocab_from_checkpoint(&Checkpoint::load(resume)?)?,
        None => Vocab::build(texts.iter().map(String::as_str)),
    };
    let text_cfg = settings::text_config(&mut cfg, vocab.len())?;
    settings::finish(cfg, &["run", "text", "mlm"])?;

    let out = prepare_out(&args.out)?;
    let ckpt_path = out.join("mlm.ckpt");
    let log_path = out.join("mlm_log.jsonl");
    std::fs::write(out.join("vocab.txt"), vocab.to_lines())
        .with_context(|| format!("writing {}", out.join("vocab.txt").display()))?;

    let mut state = init_mlm(text_cfg, m.mask_prob, m.lr, common.seed, common.mode)?;
    if let Some(resume) = &args.resume {
        let ck = Checkpoint::load(resume)?;
        ck.verify("mlm", &snapshot, common.mode, args.force)?;
        state = resume_mlm(&ck, state)?;
    }

    let until = step_budget(args, m.steps);
    while state.step < until {
        let step = state.step;
        let mut rng = stream_rng(state.seed, "mlm-batch", &[step]);
        let idx = pick_distinct(texts.len(), m.batch, &mut rng);
        let batch: Vec<&str> = idx.iter().map(|&i| texts[i].as_str()).collect();
        if let Some(log) = mlm_step(&mut state, &vocab, &batch)? {
            append_jsonl(&log_path, &log)?;
        }
        if state.step % m.ckpt_every == 0 || state.step == until {
            pack_mlm(&state, snapshot.clone(), &vocab).save(&ckpt_path)?;
        }
    }
    pack_mlm(&state, snapshot, &vocab).save(&ckpt_path)?;
    Ok(ckpt_path)
}

fn pack_stage2(state: &Stage2State, config: String, vocab: &Vocab) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    pack_params(&mut tensors, "model", &state.params);
    let opt_t = pack_opt(&mut tensors, &state.opt);
    Checkpoint {
        meta: CheckpointMeta {
            kind: "stage2".into(),
            mode: state.params.mode(),
            step: state.step,
            seed: state.seed,
            config,
            opt_t,
            extra: BTreeMap::from([("vocab".to_string(), vocab.to_lines())]),
        },
        tensors,
    }
}

fn resume_stage2(ck: &Checkpoint, mut state: Stage2State) -> Result<Stage2State> {
    state.params = ck.param_set("model", state.params.mode())?;
    state.opt = unpack_opt(ck)?;
    state.step = ck.meta.step;
    state.seed = ck.meta.seed;
    Ok(state)
}

/// Contrastive vision-text alignment. A fresh run requires stage-1 and MLM
/// checkpoints to warm-start both encoders.
pub fn cmd_pretrain_stage2(args: &TrainArgs) -> Result<PathBuf> {
    settings::thread_limit()?;
    let mut cfg = Config::load(&args.config)?;
    let snapshot = cfg.canonical();
    let common = settings::common(&mut cfg)?;
    let vit = settings::vit_config(&mut cfg)?;
    let policy = settings::crop_policy(&mut cfg)?;
    let pre = settings::preproc(&mut cfg)?;
    let s2 = settings::stage2_settings(&mut cfg)?;

    let manifest = load_dataset(&args.data)?;
    let dataset = study_samples(&args.data, &manifest)?;

    // Vocabulary comes from the checkpoint chain, never rebuilt here.
    let vocab = match (&args.resume, &args.text_init) {
        (Some(resume), _) => vocab_from_checkpoint(&Checkpoint::load(resume)?)?,
        (None, Some(text_init)) => vocab_from_checkpoint(&Checkpoint::load(text_init)?)?,
        (None, None) => bail!(
            "stage-2 needs --vision-init (stage-1 checkpoint) and --text-init (mlm checkpoint), or --resume"
        ),
    };
    let text_cfg = settings::text_config(&mut cfg, vocab.len())?;
    settings::finish(cfg, &["run", "vit", "text", "crop", "pre", "stage2"])?;

    let mut state = init_stage2(
        vit,
        text_cfg,
        policy,
        s2.shared_dim,
        s2.lr,
        s2.head_ratio,
        common.seed,
        common.mode,
    )?;
    match (&args.resume, &args.vision_init, &args.text_init) {
        (Some(resume), _, _) => {
            let ck = Checkpoint::load(resume)?;
            ck.verify("stage2", &snapshot, common.mode, args.force)?;
            state = resume_stage2(&ck, state)?;
        }
        (None, Some(vision_init), Some(text_init)) => {
            let vck = Checkpoint::load(vision_init)?;
            if vck.meta.kind != "stage1" {
                bail!("--vision-init must be a stage-1 checkpoint, got '{}'", vck.meta.kind);
            }
            if vck.meta.mode != common.mode {
                bail!("--vision-init float mode {} != configured {}", vck.meta.mode.name(), common.mode.name());
            }
            let tck = Checkpoint::load(text_init)?;
            if tck.meta.kind != "mlm" {
                bail!("--text-init must be an mlm checkpoint, got '{}'", tck.meta.kind);
            }
            if tck.meta.mode != common.mode {
                bail!("--text-init float mode {} != configured {}", tck.meta.mode.name(), common.mode.name());
            }
            // The teacher is the distilled product of stage-1.
            let teacher = vck.param_set("teacher", common.mode)?;
            adopt_prefixed(&mut state.params, &teacher, "vis")?;
            let text_model = tck.param_set("model", common.mode)?;
            adopt_prefixed(&mut state.params, &text_model, "txt")?;
        }
        _ => bail!(
            "stage-2 needs --vision-init (stage-1 checkpoint) and --text-init (mlm checkpoint), or --resume"
        ),
    }

    let out = prepare_out(&args.out)?;
    let ckpt_path = out.join("stage2.ckpt");
    let log_path = out.join("stage2_log.jsonl");

    let until = step_budget(args, s2.steps);
    while state.step < until {
        let step = state.step;
        let mut rng = stream_rng(state.seed, "stage2-batch", &[step]);
        let plan = organ_batch_sample(&dataset, s2.batch, s2.p_same, &mut rng)?;
        let mut items = Vec::with_capacity(plan.items.len());
        for it in &plan.items {
            let v = load_volume(args.data.join(&it.series))?;
            items.push(Stage2Item {
                study: it.study.clone(),
                volume: preprocess(&v, &pre),
                text: it.text.clone(),
            });
        }
        let log = stage2_step(&mut state, &vocab, &items, plan.same_organ())?;
        append_jsonl(&log_path, &log)?;
        if state.step % s2.ckpt_every == 0 || state.step == until {
            pack_stage2(&state, snapshot.clone(), &vocab).save(&ckpt_path)?;
        }
    }
    pack_stage2(&state, snapshot, &vocab).save(&ckpt_path)?;
    Ok(ckpt_path)
}
