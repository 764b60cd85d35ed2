//! Typed views over the flat config document, one bundle per command.
//! Every getter consumes its key; commands finish with strict unknown-key
//! rejection via `Config::finish`.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};
use voxrep_core::io::config::Config;
use voxrep_core::nn::text::TextConfig;
use voxrep_core::nn::vit::{default_taps, ViTConfig};
use voxrep_core::schedule::ScheduleSpec;
use voxrep_core::stage1::{DistillConfig, TeacherTemp};
use voxrep_core::tensor::FloatMode;
use voxrep_core::volume::crop::CropPolicy;

pub const OUT_ROOT_ENV: &str = "VOXREP_OUT_ROOT";
pub const THREADS_ENV: &str = "VOXREP_THREADS";

/// Config sections recognized across the toolchain. One file can hold the
/// whole pipeline; a command validates the sections it parses and excuses
/// the rest, so typos never silently pass where they matter.
pub const SECTIONS: &[&str] = &[
    "run", "vit", "text", "crop", "pre", "stage1", "mlm", "stage2", "probe", "retrieve", "seg",
    "ground", "synth",
];

/// Strict unknown-key rejection scoped to the sections this command read.
pub fn finish(cfg: Config, parsed: &[&str]) -> Result<()> {
    cfg.finish_where(|key| {
        let section = key.split('.').next().unwrap_or("");
        SECTIONS.contains(&section) && !parsed.contains(&section)
    })?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Common {
    pub seed: u64,
    pub mode: FloatMode,
}

pub fn common(cfg: &mut Config) -> Result<Common> {
    let seed = cfg.u64_or("run.seed", 0)?;
    let mode_s = cfg.str_or("run.mode", "f32");
    let mode = FloatMode::parse(&mode_s)
        .with_context(|| format!("run.mode = '{mode_s}', expected f32 or f64"))?;
    Ok(Common { seed, mode })
}

/// Prefix relative output paths with VOXREP_OUT_ROOT when set.
pub fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Validate VOXREP_THREADS. Compute kernels are single-threaded; the value
/// is accepted as an upper bound and currently caps nothing beyond 1.
pub fn thread_limit() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("{THREADS_ENV} = '{v}': expected a positive integer"),
        },
    }
}

pub fn vit_config(cfg: &mut Config) -> Result<ViTConfig> {
    let desk = ViTConfig::desk();
    let depth = cfg.usize_or("vit.depth", desk.depth)?;
    let vit = ViTConfig {
        patch: cfg.usize3_or("vit.patch", desk.patch)?,
        embed: cfg.usize_or("vit.embed", desk.embed)?,
        depth,
        heads: cfg.usize_or("vit.heads", desk.heads)?,
        mlp_ratio: cfg.usize_or("vit.mlp_ratio", desk.mlp_ratio)?,
        base_grid: cfg.usize3_or("vit.base_grid", desk.base_grid)?,
        taps: cfg.usize_list_or("vit.taps", &default_taps(depth))?,
    };
    vit.validate()?;
    Ok(vit)
}

pub fn text_config(cfg: &mut Config, vocab_size: usize) -> Result<TextConfig> {
    let desk = TextConfig::desk(vocab_size);
    let tc = TextConfig {
        vocab_size,
        max_len: cfg.usize_or("text.max_len", desk.max_len)?,
        embed: cfg.usize_or("text.embed", desk.embed)?,
        depth: cfg.usize_or("text.depth", desk.depth)?,
        heads: cfg.usize_or("text.heads", desk.heads)?,
        mlp_ratio: cfg.usize_or("text.mlp_ratio", desk.mlp_ratio)?,
        specials: desk.specials,
    };
    tc.validate()?;
    Ok(tc)
}

pub fn crop_policy(cfg: &mut Config) -> Result<CropPolicy> {
    let d = CropPolicy::default();
    let policy = CropPolicy {
        global: cfg.usize3_or("crop.global", d.global)?,
        local: cfg.usize3_or("crop.local", d.local)?,
        stage2: cfg.usize3_or("crop.stage2", d.stage2)?,
        stage2_fraction: cfg.f64_pair_or("crop.stage2_fraction", d.stage2_fraction)?,
        local_count: cfg.usize_or("crop.local_count", d.local_count)?,
        global_scale: cfg.f64_pair_or("crop.global_scale", d.global_scale)?,
    };
    policy.validate()?;
    Ok(policy)
}

/// Intensity preprocessing applied before cropping/encoding.
#[derive(Debug, Clone, Copy)]
pub struct Preproc {
    pub otsu: bool,
    pub rescale: (f64, f64),
}

pub fn preproc(cfg: &mut Config) -> Result<Preproc> {
    Ok(Preproc {
        otsu: cfg.bool_or("pre.otsu", true)?,
        rescale: cfg.f64_pair_or("pre.rescale", (1.0, 99.0))?,
    })
}

#[derive(Debug, Clone)]
pub struct Stage1Settings {
    pub steps: u64,
    pub batch: usize,
    pub ckpt_every: u64,
    pub distill: DistillConfig,
    pub lr: ScheduleSpec,
    pub wd: ScheduleSpec,
}

pub fn stage1_settings(cfg: &mut Config) -> Result<Stage1Settings> {
    let steps = cfg.u64_or("stage1.steps", 100)?;
    let desk = DistillConfig::desk(steps);
    let warmup_default = desk.tau_t.warmup;
    let distill = DistillConfig {
        prototypes: cfg.usize_or("stage1.prototypes", desk.prototypes)?,
        tau_s: cfg.f64_or("stage1.tau_s", desk.tau_s)?,
        tau_t: TeacherTemp {
            start: cfg.f64_or("stage1.tau_t_start", desk.tau_t.start)?,
            end: cfg.f64_or("stage1.tau_t_end", desk.tau_t.end)?,
            warmup: cfg.u64_or("stage1.tau_t_warmup", warmup_default)?,
        },
        center_momentum: cfg.f64_or("stage1.center_momentum", desk.center_momentum)?,
        mask_ratio: cfg.f64_pair_or("stage1.mask_ratio", desk.mask_ratio)?,
        ema: ScheduleSpec::cosine(
            cfg.f64_or("stage1.momentum_start", 0.992)?,
            cfg.f64_or("stage1.momentum_end", 1.0)?,
            0,
            steps,
        )?,
        w_image: cfg.f64_or("stage1.w_image", desk.w_image)?,
        w_patch: cfg.f64_or("stage1.w_patch", desk.w_patch)?,
    };
    distill.validate()?;
    let lr = ScheduleSpec::cosine(
        cfg.f64_or("stage1.lr_base", 0.002)?,
        cfg.f64_or("stage1.lr_final", 1e-6)?,
        cfg.u64_or("stage1.lr_warmup", steps / 10)?,
        steps,
    )?;
    let wd = ScheduleSpec::cosine(
        cfg.f64_or("stage1.wd_start", 0.04)?,
        cfg.f64_or("stage1.wd_end", 0.4)?,
        0,
        steps,
    )?;
    Ok(Stage1Settings {
        steps,
        batch: cfg.usize_or("stage1.batch", 4)?,
        ckpt_every: cfg.u64_or("stage1.ckpt_every", 50)?,
        distill,
        lr,
        wd,
    })
}

#[derive(Debug, Clone)]
pub struct MlmSettings {
    pub steps: u64,
    pub batch: usize,
    pub ckpt_every: u64,
    pub mask_prob: f64,
    pub lr: ScheduleSpec,
}

pub fn mlm_settings(cfg: &mut Config) -> Result<MlmSettings> {
    let steps = cfg.u64_or("mlm.steps", 100)?;
    Ok(MlmSettings {
        steps,
        batch: cfg.usize_or("mlm.batch", 8)?,
        ckpt_every: cfg.u64_or("mlm.ckpt_every", 50)?,
        mask_prob: cfg.f64_or("mlm.mask_prob", 0.15)?,
        lr: ScheduleSpec::constant(cfg.f64_or("mlm.lr", 5e-5)?, 0, steps)?,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Settings {
    pub steps: u64,
    pub batch: usize,
    pub ckpt_every: u64,
    pub p_same: f64,
    pub shared_dim: usize,
    pub head_ratio: f64,
    pub lr: ScheduleSpec,
}

pub fn stage2_settings(cfg: &mut Config) -> Result<Stage2Settings> {
    let steps = cfg.u64_or("stage2.steps", 100)?;
    Ok(Stage2Settings {
        steps,
        batch: cfg.usize_or("stage2.batch", 8)?,
        ckpt_every: cfg.u64_or("stage2.ckpt_every", 50)?,
        p_same: cfg.f64_or("stage2.p_same", 0.8)?,
        shared_dim: cfg.usize_or("stage2.shared_dim", 32)?,
        head_ratio: cfg.f64_or("stage2.head_ratio", 10.0)?,
        lr: ScheduleSpec::cosine(
            cfg.f64_or("stage2.lr_base", 1e-4)?,
            cfg.f64_or("stage2.lr_final", 1e-6)?,
            cfg.u64_or("stage2.lr_warmup", steps / 10)?,
            steps,
        )?,
    })
}

#[derive(Debug, Clone)]
pub enum ProbeTargetKind {
    Layout,
    Age,
}

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub extents: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub target: ProbeTargetKind,
    pub train_frac: f64,
    pub val_frac: f64,
    pub grouped: bool,
}

pub fn probe_settings(cfg: &mut Config, policy: &CropPolicy) -> Result<ProbeSettings> {
    let window = cfg.usize3_or("probe.window", policy.global)?;
    let default_stride = [window[0].div_ceil(2), window[1].div_ceil(2), window[2].div_ceil(2)];
    let target = match cfg.str_or("probe.target", "layout").as_str() {
        "layout" => ProbeTargetKind::Layout,
        "age" => ProbeTargetKind::Age,
        other => bail!("probe.target = '{other}', expected layout or age"),
    };
    Ok(ProbeSettings {
        extents: cfg.usize3_or("probe.extents", policy.stage2)?,
        window,
        stride: cfg.usize3_or("probe.stride", default_stride)?,
        target,
        train_frac: cfg.f64_or("probe.train_frac", 0.6)?,
        val_frac: cfg.f64_or("probe.val_frac", 0.2)?,
        grouped: cfg.bool_or("probe.grouped", false)?,
    })
}

#[derive(Debug, Clone)]
pub struct RetrieveSettings {
    pub recall_ks: Vec<usize>,
    pub precision_ns: Vec<usize>,
}

pub fn retrieve_settings(cfg: &mut Config) -> Result<RetrieveSettings> {
    Ok(RetrieveSettings {
        recall_ks: cfg.usize_list_or("retrieve.recall_ks", &[5, 10, 20])?,
        precision_ns: cfg.usize_list_or("retrieve.precision_ns", &[1, 3, 5])?,
    })
}

#[derive(Debug, Clone)]
pub struct SegSettings {
    pub steps: u64,
    pub lr: f64,
    pub channels: [usize; 4],
    pub extents: [usize; 3],
    pub eval_every: u64,
}

pub fn seg_settings(cfg: &mut Config, policy: &CropPolicy) -> Result<SegSettings> {
    let ch = cfg.usize_list_or("seg.channels", &[16, 16, 8, 8])?;
    let channels: [usize; 4] = ch
        .clone()
        .try_into()
        .map_err(|_| anyhow::anyhow!("seg.channels needs exactly 4 entries, got {}", ch.len()))?;
    Ok(SegSettings {
        steps: cfg.u64_or("seg.steps", 200)?,
        lr: cfg.f64_or("seg.lr", 3e-3)?,
        channels,
        extents: cfg.usize3_or("seg.extents", policy.stage2)?,
        eval_every: cfg.u64_or("seg.eval_every", 20)?,
    })
}

#[derive(Debug, Clone)]
pub struct GroundSettings {
    pub steps: u64,
    pub lr: f64,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub w1: f64,
    pub w2: f64,
    pub extents: [usize; 3],
    pub eval_every: u64,
}

pub fn ground_settings(cfg: &mut Config, policy: &CropPolicy) -> Result<GroundSettings> {
    Ok(GroundSettings {
        steps: cfg.u64_or("ground.steps", 500)?,
        lr: cfg.f64_or("ground.lr", 1e-3)?,
        width: cfg.usize_or("ground.width", 32)?,
        depth: cfg.usize_or("ground.depth", 2)?,
        heads: cfg.usize_or("ground.heads", 4)?,
        mlp_ratio: cfg.usize_or("ground.mlp_ratio", 2)?,
        w1: cfg.f64_or("ground.w1", 2.0)?,
        w2: cfg.f64_or("ground.w2", 1.0)?,
        extents: cfg.usize3_or("ground.extents", policy.stage2)?,
        eval_every: cfg.u64_or("ground.eval_every", 50)?,
    })
}

#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub spec: voxrep_core::corpus::CorpusSpec,
}

pub fn synth_settings(cfg: &mut Config, seed: u64) -> Result<SynthSettings> {
    let d = voxrep_core::corpus::CorpusSpec::default();
    let groups = match cfg.str_opt("synth.groups") {
        None => Vec::new(),
        Some(s) => s.split_whitespace().map(str::to_string).collect(),
    };
    let series = {
        let (lo, hi) = cfg.f64_pair_or("synth.series", (d.series.0 as f64, d.series.1 as f64))?;
        (lo as usize, hi as usize)
    };
    let spec = voxrep_core::corpus::CorpusSpec {
        studies: cfg.usize_or("synth.studies", d.studies)?,
        extents: cfg.usize3_or("synth.extents", d.extents)?,
        spacing: cfg.f64x3_or("synth.spacing", d.spacing)?,
        layouts: cfg.usize_or("synth.layouts", d.layouts)?,
        noise: cfg.f64_or("synth.noise", d.noise)?,
        series,
        pathology_prob: cfg.f64_or("synth.pathology_prob", d.pathology_prob)?,
        groups,
        seed,
    };
    spec.validate()?;
    Ok(SynthSettings { spec })
}
