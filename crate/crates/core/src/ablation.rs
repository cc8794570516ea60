//! Toy ablation grids over loss terms and fusion mixers.
//!
//! Every row of a suite shares one content image and one pretrained
//! autoencoder, so rows differ only in the setting under study.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse_with_prompt, FusionConfig, FusionKind, FusionParams};
use crate::losses::StyleTerms;
use crate::metrics::EvalReport;
use crate::models::EMBED_DIM;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{RunConfig, RunParts, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Losses,
    Fusion,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Suite::Losses),
            "fusion" => Ok(Suite::Fusion),
            other => Err(Error::Input(format!("unknown ablation suite {other:?} (losses, fusion)"))),
        }
    }
}

/// Size of the standalone fusion timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingOptions {
    pub seq_len: usize,
    pub channels: usize,
    /// The fastest of this many epochs is reported.
    pub reps: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions { seq_len: 4096, channels: 16, reps: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub label: &'static str,
    pub masked: bool,
    pub lpips: bool,
    pub second_order: bool,
    pub report: EvalReport,
    pub final_l_dir: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub label: &'static str,
    pub kind: FusionKind,
    pub report: EvalReport,
    pub final_l_dir: f64,
    pub train_ms_per_epoch: f64,
    pub timing: TimingOptions,
    /// Fastest fusion-stage epoch at `timing.seq_len` tokens.
    pub timing_epoch_ms: f64,
}

pub const LOSSES_HEADER: &str = "row,label,l_md,l_lpips,l_so,clip_score_analog,ssim,feature_loss,final_l_dir,train_ms";
pub const FUSION_HEADER: &str = "row,label,clip_score_analog,ssim,feature_loss,final_l_dir,train_ms_per_epoch,\
timing_seq_len,timing_channels,timing_epoch_ms";

/// Baseline (`L_dir` + `L_vgg`), then `L_md`, `L_lpips` and `L_so` added in turn.
pub fn loss_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let lpips = if base.weights.lpips > 0.0 { base.weights.lpips } else { 1.0 };
    let make = |masked, with_lpips: bool, second_order| {
        let mut c = base.clone();
        c.terms = StyleTerms { masked, second_order };
        c.weights.lpips = if with_lpips { lpips } else { 0.0 };
        c
    };
    vec![
        ("baseline", make(false, false, false)),
        ("baseline+l_md", make(true, false, false)),
        ("baseline+l_md+l_lpips", make(true, true, false)),
        ("baseline+l_md+l_lpips+l_so", make(true, true, true)),
    ]
}

fn train(config: RunConfig, parts: &RunParts) -> Result<Session> {
    let mut s = Session::with_parts(config, parts.content.clone(), parts.autoencoder.clone())?;
    s.pretrain_ms = parts.pretrain_ms;
    s.run()?;
    Ok(s)
}

fn final_l_dir(s: &Session) -> f64 {
    s.state().trace.last().map_or(f64::NAN, |r| r.l_dir)
}

pub fn run_losses(base: &RunConfig, parts: &RunParts) -> Result<Vec<LossRow>> {
    loss_variants(base)
        .into_iter()
        .map(|(label, cfg)| {
            let (terms, lpips) = (cfg.terms, cfg.weights.lpips > 0.0);
            let s = train(cfg, parts)?;
            Ok(LossRow {
                label,
                masked: terms.masked,
                lpips,
                second_order: terms.second_order,
                report: s.evaluate()?,
                final_l_dir: final_l_dir(&s),
            })
        })
        .collect()
}

pub fn run_fusion(base: &RunConfig, parts: &RunParts, timing: TimingOptions) -> Result<Vec<FusionRow>> {
    [("ssm", FusionKind::Ssm), ("cross_attention", FusionKind::CrossAttention)]
        .into_iter()
        .map(|(label, kind)| {
            let mut cfg = base.clone();
            cfg.fusion.kind = kind;
            let fusion_cfg = cfg.fusion.clone();
            let seed = cfg.seeds.fusion;
            let s = train(cfg, parts)?;
            let epochs = s.state().trace.len().max(1) as f64;
            Ok(FusionRow {
                label,
                kind,
                report: s.evaluate()?,
                final_l_dir: final_l_dir(&s),
                train_ms_per_epoch: s.train_ms / epochs,
                timing,
                timing_epoch_ms: time_fusion_epoch(&fusion_cfg, timing, seed)?,
            })
        })
        .collect()
}

/// Wall time of one fusion-stage training epoch (forward, backward and an
/// Adam update of the fusion parameters) on random tokens, fastest of
/// `timing.reps`.
pub fn time_fusion_epoch(cfg: &FusionConfig, timing: TimingOptions, seed: u64) -> Result<f64> {
    if timing.seq_len == 0 || timing.channels == 0 || timing.reps == 0 {
        return Err(Error::Input("timing sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FusionConfig { attention_tokens: None, ..cfg.clone() };
    let mut params = FusionParams::init(timing.channels, EMBED_DIM, timing.seq_len, &cfg, &mut rng);
    let tokens = Tensor::randn(&[timing.seq_len, timing.channels], 1.0, &mut rng);
    let style = Tensor::randn(&[EMBED_DIM], 1.0, &mut rng).l2_normalized()?;
    let mut adam = Adam::new(params.tensors());
    let mut best = f64::INFINITY;
    for _ in 0..timing.reps {
        let started = Instant::now();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let x = tape.constant(&tokens);
        let s = tape.constant(&style);
        let out = fuse_with_prompt(&mut tape, &vars, x, s, &cfg)?;
        let sq = tape.square(out)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss)?;
        let list: Vec<Var> = vars.list();
        let grads: Vec<Vec<f64>> = list
            .iter()
            .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]))
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut params.tensors_mut(), &refs, 1e-4)?;
        best = best.min(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut out = format!("{LOSSES_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{:e},{:e},{:e},{:e},{:.3}",
            r.label,
            flag(r.masked),
            flag(r.lpips),
            flag(r.second_order),
            r.report.clip_score_analog,
            r.report.ssim,
            r.report.feature_loss,
            r.final_l_dir,
            r.report.wall_time_ms.train_ms
        );
    }
    out
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut out = format!("{FUSION_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{:e},{:e},{:e},{:e},{:.3},{},{},{:.3}",
            r.label,
            r.report.clip_score_analog,
            r.report.ssim,
            r.report.feature_loss,
            r.final_l_dir,
            r.train_ms_per_epoch,
            r.timing.seq_len,
            r.timing.channels,
            r.timing_epoch_ms
        );
    }
    out
}
