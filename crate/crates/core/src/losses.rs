//! Style and content objectives measured in the frozen embedding space.
//!
//! Every loss has a tape form (`*_var`) used for training and a value form
//! that runs the same tape code, so both agree bitwise.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{ImageEmbedder, ImageEmbedderVars, TextEmbedder, SOURCE_PROMPT};
use crate::tensor::Tensor;

/// Below this the text direction counts as zero.
pub const MIN_TEXT_DIRECTION: f64 = 1e-8;
/// Below this the image direction counts as zero and `L_dir` is pinned to 1.
pub const MIN_IMAGE_DIRECTION: f64 = 1e-12;
/// Denominator clamp of the elementwise second-order mode.
pub const ELEMENTWISE_CLAMP: f64 = 1e-6;
const PERCEPTUAL_EPS: f64 = 1e-10;

/// Embeddings anchoring one target prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub t_emb: Tensor,
    pub t_src_emb: Tensor,
    pub x_emb: Tensor,
    pub t_dir: Tensor,
}

impl PromptContext {
    pub fn new(t_emb: Tensor, t_src_emb: Tensor, x_emb: Tensor) -> Result<Self> {
        let t_dir = t_emb.sub(&t_src_emb)?;
        if t_dir.norm() <= MIN_TEXT_DIRECTION {
            return Err(Error::DegeneratePrompt(
                "target prompt embeds to the source prompt; the text direction is zero".into(),
            ));
        }
        if x_emb.shape() != t_dir.shape() {
            return Err(Error::dim(format!("image embedding {:?} vs text {:?}", x_emb.shape(), t_dir.shape())));
        }
        Ok(PromptContext { t_emb, t_src_emb, x_emb, t_dir })
    }

    /// Embeds `prompt` and the source prompt; `x_emb` is the content image's embedding.
    pub fn from_prompt(text: &TextEmbedder, prompt: &str, x_emb: Tensor) -> Result<Self> {
        Self::new(text.embed(prompt)?, text.embed(SOURCE_PROMPT)?, x_emb)
    }

    fn check_dir(&self) -> Result<f64> {
        let n = self.t_dir.norm();
        if n <= MIN_TEXT_DIRECTION {
            return Err(Error::DegeneratePrompt("text direction has zero norm".into()));
        }
        Ok(n)
    }
}

/// `1 - cos(T_dir, y_emb - x_emb)`; exactly 1 with no gradient when the image
/// direction vanishes.
pub fn directional_loss_var(tape: &mut Tape, ctx: &PromptContext, y_emb: Var) -> Result<Var> {
    let t_norm = ctx.check_dir()?;
    let x = tape.constant(&ctx.x_emb);
    let i_dir = tape.sub(y_emb, x)?;
    if tape.value(i_dir).norm() < MIN_IMAGE_DIRECTION {
        return Ok(tape.scalar(1.0));
    }
    let t_hat = tape.constant(&ctx.t_dir.scale(1.0 / t_norm));
    let i_hat = tape.l2_normalize(i_dir)?;
    let cos = tape.dot(i_hat, t_hat)?;
    tape.affine(cos, -1.0, 1.0)
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.item(v))
}

pub fn directional_loss(ctx: &PromptContext, y_emb: &Tensor) -> Result<f64> {
    eval_scalar(|t| {
        let y = t.constant(y_emb);
        directional_loss_var(t, ctx, y)
    })
}

/// `||y_masked_emb - x_emb|| / ||T_dir||`.
pub fn masked_directional_loss_var(tape: &mut Tape, ctx: &PromptContext, y_masked_emb: Var) -> Result<Var> {
    let t_norm = ctx.check_dir()?;
    let x = tape.constant(&ctx.x_emb);
    let d = tape.sub(y_masked_emb, x)?;
    let n = tape.norm(d)?;
    tape.scale(n, 1.0 / t_norm)
}

pub fn masked_directional_loss(ctx: &PromptContext, y_masked_emb: &Tensor) -> Result<f64> {
    eval_scalar(|t| {
        let y = t.constant(y_masked_emb);
        masked_directional_loss_var(t, ctx, y)
    })
}

fn check_shift_params(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha_shift needs alpha >= 0, got {alpha}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Contract(format!("alpha_shift needs beta > 0, got {beta}")));
    }
    Ok(())
}

/// `alpha * (1 - exp(-beta * ||emb - x_emb||))`.
pub fn alpha_shift_var(tape: &mut Tape, emb: Var, x_emb: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
    check_shift_params(alpha, beta)?;
    let x = tape.constant(x_emb);
    let d = tape.sub(emb, x)?;
    let dist = tape.norm(d)?;
    let e = tape.scale(dist, -beta)?;
    let e = tape.exp(e)?;
    tape.affine(e, -alpha, alpha)
}

pub fn alpha_shift(emb: &Tensor, x_emb: &Tensor, alpha: f64, beta: f64) -> Result<f64> {
    eval_scalar(|t| {
        let e = t.constant(emb);
        alpha_shift_var(t, e, x_emb, alpha, beta)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderMode {
    /// `||cur - prev||^2 / ||T_dir||^2`.
    #[default]
    NormRatio,
    /// `||(cur - prev) / T_dir||^2` elementwise, with `|T_dir[i]|` clamped to 1e-6.
    Elementwise,
}

/// Which stylized embedding the `alpha_shift` distance is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftAnchor {
    /// The current epoch's embedding; the weight is then differentiable too.
    #[default]
    Current,
    /// The previous epoch's embedding, held constant.
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondOrderConfig {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub interval: usize,
    pub mode: SecondOrderMode,
    pub anchor: ShiftAnchor,
}

impl Default for SecondOrderConfig {
    fn default() -> Self {
        SecondOrderConfig {
            alpha: 1.0,
            beta: 1.0,
            theta: 0.6,
            interval: 5,
            mode: SecondOrderMode::NormRatio,
            anchor: ShiftAnchor::Current,
        }
    }
}

impl SecondOrderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("second_order.alpha", "must be >= 0 and finite"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("second_order.beta", "must be > 0 and finite"));
        }
        if !self.theta.is_finite() {
            return Err(Error::config("second_order.theta", "must be finite"));
        }
        if self.interval == 0 {
            return Err(Error::config("second_order.interval", "must be >= 1"));
        }
        Ok(())
    }
}

/// Second-order configuration plus the previous epoch's stylized embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SecondOrderState {
    pub config: SecondOrderConfig,
    pub prev_img_emb: Option<Tensor>,
}

impl SecondOrderState {
    pub fn new(config: SecondOrderConfig) -> Self {
        SecondOrderState { config, prev_img_emb: None }
    }

    /// Whether `L_so` counts this epoch, given this epoch's `L_dir`.
    pub fn gate_open(&self, l_dir: f64, epoch: usize) -> bool {
        self.prev_img_emb.is_some() && l_dir < self.config.theta && epoch.is_multiple_of(self.config.interval)
    }
}

pub fn second_order_loss_var(
    tape: &mut Tape,
    ctx: &PromptContext,
    prev_emb: Option<&Tensor>,
    cur_emb: Var,
    cfg: &SecondOrderConfig,
) -> Result<Var> {
    let prev = prev_emb.ok_or_else(|| Error::State("second-order loss needs the previous epoch's embedding".into()))?;
    let t_norm = ctx.check_dir()?;
    let p = tape.constant(prev);
    let diff = tape.sub(cur_emb, p)?;
    let ratio = match cfg.mode {
        SecondOrderMode::NormRatio => {
            let sq = tape.sq_norm(diff)?;
            tape.scale(sq, 1.0 / (t_norm * t_norm))?
        }
        SecondOrderMode::Elementwise => {
            let inv = ctx.t_dir.map(|v| {
                let m = v.abs().max(ELEMENTWISE_CLAMP);
                if v < 0.0 {
                    -1.0 / m
                } else {
                    1.0 / m
                }
            });
            let inv = tape.constant(&inv);
            let q = tape.mul(diff, inv)?;
            tape.sq_norm(q)?
        }
    };
    let weight = match cfg.anchor {
        ShiftAnchor::Current => alpha_shift_var(tape, cur_emb, &ctx.x_emb, cfg.alpha, cfg.beta)?,
        ShiftAnchor::Previous => tape.scalar(alpha_shift(prev, &ctx.x_emb, cfg.alpha, cfg.beta)?),
    };
    tape.mul(ratio, weight)
}

pub fn second_order_loss(
    ctx: &PromptContext,
    prev_emb: Option<&Tensor>,
    cur_emb: &Tensor,
    cfg: &SecondOrderConfig,
) -> Result<f64> {
    eval_scalar(|t| {
        let c = t.constant(cur_emb);
        second_order_loss_var(t, ctx, prev_emb, c, cfg)
    })
}

/// Which optional style terms take part; the ablation switches these off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleTerms {
    pub masked: bool,
    pub second_order: bool,
}

impl Default for StyleTerms {
    fn default() -> Self {
        StyleTerms { masked: true, second_order: true }
    }
}

/// Style loss and its parts for one prompt.
#[derive(Debug, Clone, Copy)]
pub struct StyleLoss {
    pub total: Var,
    pub l_dir: f64,
    pub l_md: f64,
    /// Zero whenever the gate is closed.
    pub l_so: f64,
    pub gate_open: bool,
}

/// `L_dir + L_md + [gate] L_so`.
pub fn style_loss_var(
    tape: &mut Tape,
    ctx: &PromptContext,
    y_emb: Var,
    y_masked_emb: Var,
    state: &SecondOrderState,
    epoch: usize,
    terms: StyleTerms,
) -> Result<StyleLoss> {
    let dir = directional_loss_var(tape, ctx, y_emb)?;
    let l_dir = tape.item(dir);
    let mut total = dir;
    let mut l_md = 0.0;
    if terms.masked {
        let md = masked_directional_loss_var(tape, ctx, y_masked_emb)?;
        l_md = tape.item(md);
        total = tape.add(total, md)?;
    }
    let gate_open = terms.second_order && state.gate_open(l_dir, epoch);
    let mut l_so = 0.0;
    if gate_open {
        let so = second_order_loss_var(tape, ctx, state.prev_img_emb.as_ref(), y_emb, &state.config)?;
        l_so = tape.item(so);
        total = tape.add(total, so)?;
    }
    Ok(StyleLoss { total, l_dir, l_md, l_so, gate_open })
}

pub fn style_loss(
    ctx: &PromptContext,
    y_emb: &Tensor,
    y_masked_emb: &Tensor,
    state: &SecondOrderState,
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y_emb);
    let m = tape.constant(y_masked_emb);
    let s = style_loss_var(&mut tape, ctx, y, m, state, epoch, StyleTerms::default())?;
    Ok(tape.item(s.total))
}

/// Mean of the per-prompt style losses; the reported parts are means too.
pub fn multi_prompt_style_loss_var(
    tape: &mut Tape,
    ctxs: &[PromptContext],
    y_emb: Var,
    y_masked_emb: Var,
    state: &SecondOrderState,
    epoch: usize,
    terms: StyleTerms,
) -> Result<StyleLoss> {
    if ctxs.is_empty() {
        return Err(Error::Input("at least one prompt is required".into()));
    }
    if ctxs.len() == 1 {
        return style_loss_var(tape, &ctxs[0], y_emb, y_masked_emb, state, epoch, terms);
    }
    let n = ctxs.len() as f64;
    let mut parts = Vec::with_capacity(ctxs.len());
    for ctx in ctxs {
        parts.push(style_loss_var(tape, ctx, y_emb, y_masked_emb, state, epoch, terms)?);
    }
    let mut sum = parts[0].total;
    for p in &parts[1..] {
        sum = tape.add(sum, p.total)?;
    }
    let total = tape.scale(sum, 1.0 / n)?;
    let mean = |f: fn(&StyleLoss) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Ok(StyleLoss {
        total,
        l_dir: mean(|p| p.l_dir),
        l_md: mean(|p| p.l_md),
        l_so: mean(|p| p.l_so),
        gate_open: parts.iter().any(|p| p.gate_open),
    })
}

pub fn multi_prompt_style_loss(
    ctxs: &[PromptContext],
    y_emb: &Tensor,
    y_masked_emb: &Tensor,
    state: &SecondOrderState,
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y_emb);
    let m = tape.constant(y_masked_emb);
    let s = multi_prompt_style_loss_var(&mut tape, ctxs, y, m, state, epoch, StyleTerms::default())?;
    Ok(tape.item(s.total))
}

/// Random 50%-style occlusion over a grid of square patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major over patches; `true` means zero-filled.
    pub dropped: Vec<bool>,
}

impl PatchMask {
    pub fn num_patches(&self) -> usize {
        self.dropped.len()
    }

    pub fn num_dropped(&self) -> usize {
        self.dropped.iter().filter(|d| **d).count()
    }

    /// 0/1 multiplier of shape `[H, W, 3]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.rows * self.patch, self.cols * self.patch);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let keep = if self.dropped[(y / self.patch) * self.cols + x / self.patch] { 0.0 } else { 1.0 };
                data.extend([keep; 3]);
            }
        }
        Tensor::new(&[h, w, 3], data).expect("mask shape")
    }
}

/// Drops exactly `floor(P * ratio)` of the `P` patches, chosen by `seed`.
pub fn sample_mask(img_shape: &[usize], patch: usize, ratio: f64, seed: u64) -> Result<PatchMask> {
    if img_shape.len() != 3 {
        return Err(Error::dim(format!("image shape {img_shape:?} is not [H, W, C]")));
    }
    if patch == 0 || !img_shape[0].is_multiple_of(patch) || !img_shape[1].is_multiple_of(patch) {
        return Err(Error::Input(format!(
            "image {}x{} is not divisible into {patch}px patches",
            img_shape[0], img_shape[1]
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Input(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (rows, cols) = (img_shape[0] / patch, img_shape[1] / patch);
    let p = rows * cols;
    let k = (p as f64 * ratio).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; p];
    for i in index::sample(&mut rng, p, k) {
        dropped[i] = true;
    }
    Ok(PatchMask { patch, rows, cols, dropped })
}

pub fn apply_mask(img: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    let m = mask.to_tensor();
    if img.shape() != m.shape() {
        return Err(Error::dim(format!("mask covers {:?}, image is {:?}", m.shape(), img.shape())));
    }
    img.zip_with(&m, |a, b| a * b)
}

pub fn apply_mask_var(tape: &mut Tape, img: Var, mask: &PatchMask) -> Result<Var> {
    let m = tape.constant(&mask.to_tensor());
    tape.mul(img, m)
}

/// Constant feature maps of the content image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
}

impl ContentFeatures {
    pub fn of(embedder: &ImageEmbedder, img: &Tensor) -> Result<Self> {
        let (f1, f2) = embedder.features(img)?;
        Ok(ContentFeatures { f1, f2 })
    }
}

fn mse_var(tape: &mut Tape, a: Var, b: &Tensor) -> Result<Var> {
    let c = tape.constant(b);
    let d = tape.sub(a, c)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Sum over the embedder's two feature maps of the mean squared difference.
pub fn content_feature_loss_var(tape: &mut Tape, x: &ContentFeatures, y_f1: Var, y_f2: Var) -> Result<Var> {
    let a = mse_var(tape, y_f1, &x.f1)?;
    let b = mse_var(tape, y_f2, &x.f2)?;
    tape.add(a, b)
}

fn site_normalized(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let c = *s.last().ok_or_else(|| Error::dim("feature map has no channel axis"))?;
    let rows = tape.reshape(f, &[s.iter().product::<usize>() / c, c])?;
    tape.normalize_rows(rows, PERCEPTUAL_EPS)
}

/// Per layer: unit-normalize every site's channel vector, then average the
/// squared distance over sites; layers are summed.
pub fn perceptual_loss_var(tape: &mut Tape, x: &ContentFeatures, y_f1: Var, y_f2: Var) -> Result<Var> {
    let mut total = None;
    for (y, xf) in [(y_f1, &x.f1), (y_f2, &x.f2)] {
        let ny = site_normalized(tape, y)?;
        let xc = tape.constant(xf);
        let nx = site_normalized(tape, xc)?;
        let d = tape.sub(ny, nx)?;
        let sq = tape.square(d)?;
        let sites = tape.shape(d)[0] as f64;
        let s = tape.sum(sq)?;
        let layer = tape.scale(s, 1.0 / sites)?;
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    Ok(total.expect("two layers"))
}

fn check_same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dim(format!("images differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

fn feature_pair_loss(
    embedder: &ImageEmbedder,
    x_img: &Tensor,
    y_img: &Tensor,
    f: fn(&mut Tape, &ContentFeatures, Var, Var) -> Result<Var>,
) -> Result<f64> {
    check_same_shape(x_img, y_img)?;
    let xf = ContentFeatures::of(embedder, x_img)?;
    eval_scalar(|t| {
        let vars: ImageEmbedderVars = embedder.bind(t);
        let y = t.constant(y_img);
        let yf = embedder.forward(t, &vars, y)?;
        f(t, &xf, yf.f1, yf.f2)
    })
}

pub fn content_feature_loss(embedder: &ImageEmbedder, x_img: &Tensor, y_img: &Tensor) -> Result<f64> {
    feature_pair_loss(embedder, x_img, y_img, content_feature_loss_var)
}

pub fn perceptual_loss(embedder: &ImageEmbedder, x_img: &Tensor, y_img: &Tensor) -> Result<f64> {
    feature_pair_loss(embedder, x_img, y_img, perceptual_loss_var)
}

/// Weights of the total objective. `vgg` is the epoch-0 content weight; the
/// trainer overrides it from the schedule each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub style: f64,
    pub lpips: f64,
    pub vgg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { style: 1.0, lpips: 1.0, vgg: 9000.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("style", self.style), ("lpips", self.lpips), ("vgg", self.vgg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), format!("must be >= 0 and finite, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn total_loss_var(tape: &mut Tape, w: &LossWeights, style: Var, lpips: Var, vgg: Var) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(style, w.style)?;
    let b = tape.scale(lpips, w.lpips)?;
    let c = tape.scale(vgg, w.vgg)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

pub fn total_loss(w: &LossWeights, style: f64, lpips: f64, vgg: f64) -> Result<f64> {
    eval_scalar(|t| {
        let (s, l, v) = (t.scalar(style), t.scalar(lpips), t.scalar(vgg));
        total_loss_var(t, w, s, l, v)
    })
}
