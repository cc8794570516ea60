//! Per-image online stylization: schedules, run configuration and the
//! training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::fusion::{fuse_with_prompt, FusionConfig, FusionParams, FusionVars, LatentSequence};
use crate::imageio::{read_image, write_atomic};
use crate::losses::{
    apply_mask_var, content_feature_loss_var, multi_prompt_style_loss_var, perceptual_loss_var, sample_mask,
    total_loss_var, ContentFeatures, LossWeights, PromptContext, SecondOrderConfig, SecondOrderState, StyleTerms,
};
use crate::metrics::{feature_loss_metric, similarity_score, ssim, EvalReport, PhaseTimes};
use crate::models::{check_image, pretrain_autoencoder, DecoderVars, Embedders, PretrainConfig, PretrainReport, ToyAutoencoder};
use crate::optim::{clip_global_norm, global_norm, Adam};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Piecewise-constant learning rate and content weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub lr_halve_epoch: usize,
    pub max_epochs: usize,
    pub content_weight_hi: f64,
    pub content_weight_lo: f64,
    pub content_switch_epoch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 5e-4,
            lr_halve_epoch: 10,
            max_epochs: 20,
            content_weight_hi: 9000.0,
            content_weight_lo: 150.0,
            content_switch_epoch: 5,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_halve_epoch {
            self.base_lr
        } else {
            self.base_lr / 2.0
        }
    }

    pub fn content_weight_at(&self, epoch: usize) -> f64 {
        if epoch < self.content_switch_epoch {
            self.content_weight_hi
        } else {
            self.content_weight_lo
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("schedule.base_lr", "must be positive and finite"));
        }
        for (name, v) in [("content_weight_hi", self.content_weight_hi), ("content_weight_lo", self.content_weight_lo)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("schedule.{name}"), "must be >= 0 and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub patch: usize,
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { patch: 16, ratio: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Frozen text and image embedders.
    pub model: u64,
    pub autoencoder: u64,
    pub fusion: u64,
    pub mask: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { model: crate::models::DEFAULT_MODEL_SEED, autoencoder: 1, fusion: 2, mask: 3 }
    }
}

/// Style and perceptual weights; the content (`vgg`) weight comes from the
/// schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunWeights {
    pub style: f64,
    pub lpips: f64,
}

impl Default for RunWeights {
    fn default() -> Self {
        RunWeights { style: 1.0, lpips: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub image: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompts: Vec<String>,
    /// Content image; the bundled fixture when absent.
    pub content: Option<PathBuf>,
    /// Pretrained autoencoder weights; pretrained on the content image when absent.
    pub autoencoder_weights: Option<PathBuf>,
    pub autoencoder: PretrainConfig,
    pub seeds: Seeds,
    pub weights: RunWeights,
    pub terms: StyleTerms,
    pub fusion: FusionConfig,
    pub second_order: SecondOrderConfig,
    pub mask: MaskConfig,
    pub schedule: Schedule,
    /// Global-norm gradient clip applied before each Adam step; `None` feeds
    /// raw gradients.
    pub grad_clip: Option<f64>,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prompts: vec![fixtures::STYLE_PROMPT.to_string()],
            content: None,
            autoencoder_weights: None,
            autoencoder: PretrainConfig::default(),
            seeds: Seeds::default(),
            weights: RunWeights::default(),
            terms: StyleTerms::default(),
            fusion: FusionConfig::default(),
            second_order: SecondOrderConfig::default(),
            mask: MaskConfig::default(),
            schedule: Schedule::default(),
            grad_clip: Some(1.0),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::config("prompts", "at least one prompt is required"));
        }
        if let Some(i) = self.prompts.iter().position(|p| p.trim().is_empty()) {
            return Err(Error::config(format!("prompts[{i}]"), "prompt is empty"));
        }
        for (name, v) in [("style", self.weights.style), ("lpips", self.weights.lpips)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), "must be >= 0 and finite"));
            }
        }
        if self.mask.patch == 0 {
            return Err(Error::config("mask.patch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) {
            return Err(Error::config("mask.ratio", "must lie in [0, 1]"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip", "must be positive and finite, or null"));
            }
        }
        self.autoencoder.validate()?;
        self.fusion.validate()?;
        self.second_order.validate()?;
        self.schedule.validate()
    }
}

/// One epoch of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_dir: f64,
    pub l_md: f64,
    pub l_so: f64,
    /// Weighted content part: `lpips_weight * lpips + content_weight * vgg`.
    pub content: f64,
    pub total: f64,
    pub lr: f64,
    pub content_weight: f64,
    pub patches_dropped: usize,
    pub patches_total: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub const TRACE_HEADER: &str = "epoch,l_dir,l_md,l_so,content,total";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: Adam,
    pub second_order: SecondOrderState,
    pub seed: u64,
    pub trace: Vec<TraceRow>,
}

/// Writes the trace CSV (header plus one row per epoch) atomically.
pub fn emit_trace(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, trace_csv(&state.trace).as_bytes())
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.l_dir, r.l_md, r.l_so, r.content, r.total
        ));
    }
    s
}

/// Parses a trace CSV back into `(epoch, [l_dir, l_md, l_so, content, total])`.
pub fn parse_trace_csv(text: &str) -> Result<Vec<(usize, [f64; 5])>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Format("trace CSV header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("trace row {line:?} has {} fields", f.len())));
            }
            let bad = |s: &str| Error::Format(format!("bad trace value {s:?}"));
            let epoch = f[0].parse().map_err(|_| bad(f[0]))?;
            let mut v = [0.0; 5];
            for (slot, s) in v.iter_mut().zip(&f[1..]) {
                *slot = s.parse().map_err(|_| bad(s))?;
            }
            Ok((epoch, v))
        })
        .collect()
}

fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64)
}

/// Unit style vector conditioning the fusion: the normalized sum of the
/// prompt embeddings.
pub fn combined_style_embedding(ctxs: &[PromptContext]) -> Result<Tensor> {
    let first = ctxs.first().ok_or_else(|| Error::Input("at least one prompt is required".into()))?;
    let mut acc = first.t_emb.clone();
    for c in &ctxs[1..] {
        acc = acc.add(&c.t_emb)?;
    }
    acc.l2_normalized()
        .map_err(|_| Error::DegeneratePrompt("prompt embeddings cancel out".into()))
}

/// Content image and autoencoder, shared between runs that differ only in
/// their stylization settings.
#[derive(Debug, Clone)]
pub struct RunParts {
    pub content: Tensor,
    pub autoencoder: ToyAutoencoder,
    /// `None` when the weights were loaded from disk.
    pub pretrain: Option<PretrainReport>,
    pub pretrain_ms: f64,
}

/// Reads (or falls back to the bundled fixture for) the content image, then
/// loads or pretrains the autoencoder.
pub fn load_parts(config: &RunConfig) -> Result<RunParts> {
    config.validate()?;
    let content = match &config.content {
        Some(p) => read_image(p)?,
        None => fixtures::content_image(),
    };
    check_image(&content)?;
    let started = Instant::now();
    let (autoencoder, pretrain) = match &config.autoencoder_weights {
        Some(p) => (ToyAutoencoder::load(p)?, None),
        None => {
            let pcfg = PretrainConfig { seed: config.seeds.autoencoder, ..config.autoencoder.clone() };
            let (ae, r) = pretrain_autoencoder(&content, &pcfg)?;
            (ae, Some(r))
        }
    };
    Ok(RunParts { content, autoencoder, pretrain, pretrain_ms: started.elapsed().as_secs_f64() * 1e3 })
}

/// Everything one stylization run owns.
#[derive(Debug)]
pub struct Session {
    pub config: RunConfig,
    pub embedders: Embedders,
    pub autoencoder: ToyAutoencoder,
    pub fusion: FusionParams,
    pub content: Tensor,
    pub latent: LatentSequence,
    pub contexts: Vec<PromptContext>,
    pub style_emb: Tensor,
    pub pretrain: Option<PretrainReport>,
    pub pretrain_ms: f64,
    pub train_ms: f64,
    content_features: ContentFeatures,
    state: TrainState,
}

struct Forward {
    image: Var,
    fusion: FusionVars,
    decoder: DecoderVars,
}

impl Session {
    /// Loads the content image and autoencoder named by `config`.
    pub fn new(config: RunConfig) -> Result<Self> {
        let parts = load_parts(&config)?;
        let mut s = Self::with_parts(config, parts.content, parts.autoencoder)?;
        s.pretrain = parts.pretrain;
        s.pretrain_ms = parts.pretrain_ms;
        Ok(s)
    }

    /// Builds a session around an already-pretrained autoencoder.
    pub fn with_parts(config: RunConfig, content: Tensor, autoencoder: ToyAutoencoder) -> Result<Self> {
        config.validate()?;
        check_image(&content)?;
        let embedders = Embedders::new(config.seeds.model);
        let latent = autoencoder.encode(&content)?;
        let x_emb = embedders.image.embed(&content)?;
        let contexts = config
            .prompts
            .iter()
            .map(|p| PromptContext::from_prompt(&embedders.text, p, x_emb.clone()))
            .collect::<Result<Vec<_>>>()?;
        let style_emb = combined_style_embedding(&contexts)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seeds.fusion);
        let fusion = FusionParams::init(latent.channels(), embedders.text.embed_dim(), latent.len(), &config.fusion, &mut rng);
        let content_features = ContentFeatures::of(&embedders.image, &content)?;
        let adam = Adam::new(fusion.tensors().into_iter().chain(autoencoder.decoder.tensors()));
        let state = TrainState {
            epoch: 0,
            adam,
            second_order: SecondOrderState::new(config.second_order.clone()),
            seed: config.seeds.mask,
            trace: Vec::new(),
        };
        Ok(Session {
            config,
            embedders,
            autoencoder,
            fusion,
            content,
            latent,
            contexts,
            style_emb,
            pretrain: None,
            pretrain_ms: 0.0,
            train_ms: 0.0,
            content_features,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn forward(&self, tape: &mut Tape, trainable: bool) -> Result<Forward> {
        let fusion = self.fusion.bind(tape, trainable);
        let decoder = self.autoencoder.decoder.bind(tape, trainable);
        let x = tape.constant(&self.latent.tokens);
        let style = tape.constant(&self.style_emb);
        let fused = fuse_with_prompt(tape, &fusion, x, style, &self.config.fusion)?;
        let (h, w) = self.latent.grid_shape;
        let grid = tape.reshape(fused, &[h, w, self.latent.channels()])?;
        let image = self.autoencoder.decoder.forward(tape, &decoder, grid)?;
        Ok(Forward { image, fusion, decoder })
    }

    /// Current stylized image.
    pub fn stylized(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, false)?;
        Ok(tape.value(f.image).clone())
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.schedule.max_epochs
    }

    /// One optimization step; appends a trace row.
    pub fn step(&mut self) -> Result<&TraceRow> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let sched = &self.config.schedule;
        let (lr, gamma) = (sched.lr_at(epoch), sched.content_weight_at(epoch));

        let mut tape = Tape::new();
        let f = self.forward(&mut tape, true)?;
        let image_shape = tape.shape(f.image).to_vec();
        let emb_vars = self.embedders.image.bind(&mut tape);
        let yf = self.embedders.image.forward(&mut tape, &emb_vars, f.image)?;
        let mask = sample_mask(
            &image_shape,
            self.config.mask.patch,
            self.config.mask.ratio,
            epoch_seed(self.state.seed, epoch),
        )?;
        let masked = apply_mask_var(&mut tape, f.image, &mask)?;
        let mf = self.embedders.image.forward(&mut tape, &emb_vars, masked)?;
        let style = multi_prompt_style_loss_var(
            &mut tape,
            &self.contexts,
            yf.embedding,
            mf.embedding,
            &self.state.second_order,
            epoch,
            self.config.terms,
        )?;
        let lpips = perceptual_loss_var(&mut tape, &self.content_features, yf.f1, yf.f2)?;
        let vgg = content_feature_loss_var(&mut tape, &self.content_features, yf.f1, yf.f2)?;
        let weights = LossWeights { style: self.config.weights.style, lpips: self.config.weights.lpips, vgg: gamma };
        let total = total_loss_var(&mut tape, &weights, style.total, lpips, vgg)?;
        let total_value = tape.item(total);
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: total loss is not finite")));
        }
        tape.backward(total)?;

        let vars: Vec<Var> = f.fusion.list().into_iter().chain(f.decoder.list()).collect();
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]))
            .collect();
        let grad_norm = match self.config.grad_clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = self.fusion.tensors_mut();
        params.extend(self.autoencoder.decoder.tensors_mut());
        self.state
            .adam
            .step(&mut params, &grad_refs, lr)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;

        // With one step per epoch the next epoch evaluates exactly the image
        // this update produces, so the epoch's own evaluated embedding is the
        // "previous epoch" reference for the next second-order term.
        self.state.second_order.prev_img_emb = Some(tape.value(yf.embedding).clone());
        let content = self.config.weights.lpips * tape.item(lpips) + gamma * tape.item(vgg);
        self.state.trace.push(TraceRow {
            epoch,
            l_dir: style.l_dir,
            l_md: style.l_md,
            l_so: style.l_so,
            content,
            total: total_value,
            lr,
            content_weight: gamma,
            patches_dropped: mask.num_dropped(),
            patches_total: mask.num_patches(),
            grad_norm,
        });
        self.state.epoch += 1;
        self.train_ms += started.elapsed().as_secs_f64() * 1e3;
        Ok(self.state.trace.last().expect("row just pushed"))
    }

    /// Scores the current stylized image against the content image and the
    /// combined style embedding.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let started = Instant::now();
        let y = self.stylized()?;
        let y_emb = self.embedders.image.embed(&y)?;
        let clip_score_analog = similarity_score(&self.style_emb, &y_emb)?;
        let ssim = ssim(&self.content, &y)?;
        let feature_loss = feature_loss_metric(&self.embedders.image, &self.content, &y)?;
        let report = EvalReport {
            clip_score_analog,
            ssim,
            feature_loss,
            wall_time_ms: PhaseTimes {
                pretrain_ms: self.pretrain_ms,
                train_ms: self.train_ms,
                eval_ms: started.elapsed().as_secs_f64() * 1e3,
            },
        };
        report.validate()?;
        Ok(report)
    }

    /// Steps until the schedule's epoch budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }
}

/// Runs a full stylization and returns the final image with the training state.
pub fn run_stylization(cfg: &RunConfig) -> Result<(Tensor, TrainState)> {
    let mut s = Session::new(cfg.clone())?;
    s.run()?;
    let img = s.stylized()?;
    Ok((img, s.into_state()))
}
