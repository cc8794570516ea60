//! Prompt-conditioned fusion of latent tokens:
//!
//! `M = LN(x + a1 * MIX(LN(x)) * m1 + s1) + a2 + s2`
//!
//! where `MIX` is the selective SSM (or the cross-attention baseline) and the
//! five modulation vectors are a linear function of the style embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind, ParamSet};
use crate::ssm::{cross_attention, ssm_block, CrossAttentionParams, CrossAttentionVars, SsmConfig, SsmParams, SsmVars};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Latent feature grid flattened to tokens in row-major raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub tokens: Tensor,
    pub grid_shape: (usize, usize),
}

impl LatentSequence {
    pub fn new(tokens: Tensor, grid_shape: (usize, usize)) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != grid_shape.0 * grid_shape.1 {
            return Err(Error::dim(format!(
                "{:?} tokens for a {}x{} grid",
                tokens.shape(),
                grid_shape.0,
                grid_shape.1
            )));
        }
        Ok(LatentSequence { tokens, grid_shape })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

pub fn flatten_grid(feature_map: &Tensor) -> Result<LatentSequence> {
    if feature_map.rank() != 3 {
        return Err(Error::dim(format!("feature map {:?} is not [H, W, C]", feature_map.shape())));
    }
    let s = feature_map.shape();
    let tokens = feature_map.reshape(&[s[0] * s[1], s[2]])?;
    LatentSequence::new(tokens, (s[0], s[1]))
}

pub fn unflatten_grid(latent: &LatentSequence) -> Result<Tensor> {
    let (h, w) = latent.grid_shape;
    if latent.tokens.rank() != 2 || latent.tokens.shape()[0] != h * w {
        return Err(Error::dim(format!(
            "grid {h}x{w} does not match {:?} tokens",
            latent.tokens.shape()
        )));
    }
    latent.tokens.reshape(&[h, w, latent.channels()])
}

/// The five per-channel conditioning vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub alpha1: Tensor,
    pub mu1: Tensor,
    pub sigma1: Tensor,
    pub alpha2: Tensor,
    pub sigma2: Tensor,
}

impl ModulationParams {
    pub fn zeros(channels: usize) -> Self {
        ModulationParams {
            alpha1: Tensor::zeros(&[channels]),
            mu1: Tensor::zeros(&[channels]),
            sigma1: Tensor::zeros(&[channels]),
            alpha2: Tensor::zeros(&[channels]),
            sigma2: Tensor::zeros(&[channels]),
        }
    }

    pub fn is_zero(&self) -> bool {
        [&self.alpha1, &self.mu1, &self.sigma1, &self.alpha2, &self.sigma2]
            .iter()
            .all(|t| t.data().iter().all(|v| *v == 0.0))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModulationVars {
        ModulationVars {
            alpha1: bind(tape, &self.alpha1, trainable),
            mu1: bind(tape, &self.mu1, trainable),
            sigma1: bind(tape, &self.sigma1, trainable),
            alpha2: bind(tape, &self.alpha2, trainable),
            sigma2: bind(tape, &self.sigma2, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModulationVars {
    pub alpha1: Var,
    pub mu1: Var,
    pub sigma1: Var,
    pub alpha2: Var,
    pub sigma2: Var,
}

impl ModulationVars {
    pub fn read(&self, tape: &Tape) -> ModulationParams {
        ModulationParams {
            alpha1: tape.value(self.alpha1).clone(),
            mu1: tape.value(self.mu1).clone(),
            sigma1: tape.value(self.sigma1).clone(),
            alpha2: tape.value(self.alpha2).clone(),
            sigma2: tape.value(self.sigma2).clone(),
        }
    }
}

/// Linear map from a style embedding `[D]` to the stacked `[5C]` modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConditioningVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conditioning {
    /// All-zero projection: every modulation vector is zero for every prompt.
    pub fn zeros(embed_dim: usize, channels: usize) -> Self {
        Conditioning {
            weight: Tensor::zeros(&[embed_dim, 5 * channels]),
            bias: Tensor::zeros(&[5 * channels]),
        }
    }

    /// Zero weight matrix with a unit `mu1` bias. The `alpha1` gate still
    /// starts closed, but `alpha1` and `mu1` are not both stuck at the zero
    /// saddle of their product.
    pub fn new(embed_dim: usize, channels: usize) -> Self {
        let mut c = Self::zeros(embed_dim, channels);
        c.bias.data_mut()[channels..2 * channels].fill(1.0);
        c
    }

    pub fn channels(&self) -> usize {
        self.bias.numel() / 5
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConditioningVars {
        ConditioningVars {
            weight: bind(tape, &self.weight, trainable),
            bias: bind(tape, &self.bias, trainable),
        }
    }
}

fn check_unit(style_emb: &Tensor) -> Result<()> {
    let n = style_emb.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("style embedding must be unit-norm, got norm {n}")));
    }
    Ok(())
}

/// Splits the conditioning projection of `style` into the five vectors.
pub fn condition(tape: &mut Tape, vars: &ConditioningVars, style: Var) -> Result<ModulationVars> {
    let c = tape.shape(vars.bias)[0] / 5;
    let stacked = tape.linear(style, vars.weight, Some(vars.bias))?;
    if tape.value(stacked).numel() != 5 * c {
        return Err(Error::dim("conditioning expects a single style embedding vector"));
    }
    Ok(ModulationVars {
        alpha1: tape.slice(stacked, 0, c)?,
        mu1: tape.slice(stacked, c, c)?,
        sigma1: tape.slice(stacked, 2 * c, c)?,
        alpha2: tape.slice(stacked, 3 * c, c)?,
        sigma2: tape.slice(stacked, 4 * c, c)?,
    })
}

/// Value-only [`condition`]; the embedding must be unit-norm.
pub fn condition_value(cond: &Conditioning, style_emb: &Tensor) -> Result<ModulationParams> {
    check_unit(style_emb)?;
    let mut tape = Tape::new();
    let vars = cond.bind(&mut tape, false);
    let s = tape.constant(style_emb);
    let m = condition(&mut tape, &vars, s)?;
    Ok(m.read(&tape))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Ssm,
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub ssm: SsmConfig,
    /// Style tokens for the cross-attention baseline; `None` matches the
    /// latent sequence length.
    pub attention_tokens: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kind: FusionKind::Ssm,
            ssm: SsmConfig::default(),
            attention_tokens: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssm.validate()?;
        if self.attention_tokens == Some(0) {
            return Err(Error::config("fusion.attention_tokens", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Ssm(SsmParams),
    CrossAttention(CrossAttentionParams),
}

#[derive(Debug, Clone, Copy)]
pub enum MixerVars {
    Ssm(SsmVars),
    CrossAttention(CrossAttentionVars),
}

/// Trainable state of the fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub conditioning: Conditioning,
    pub ln_in_gain: Tensor,
    pub ln_in_bias: Tensor,
    pub ln_out_gain: Tensor,
    pub ln_out_bias: Tensor,
    pub mixer: Mixer,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub conditioning: ConditioningVars,
    pub ln_in_gain: Var,
    pub ln_in_bias: Var,
    pub ln_out_gain: Var,
    pub ln_out_bias: Var,
    pub mixer: MixerVars,
}

impl FusionParams {
    /// `seq_len` is only consulted for the cross-attention token count.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        embed_dim: usize,
        seq_len: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Self {
        let mixer = match cfg.kind {
            FusionKind::Ssm => Mixer::Ssm(SsmParams::init(channels, cfg.ssm.state_dim, rng)),
            FusionKind::CrossAttention => Mixer::CrossAttention(CrossAttentionParams::init(
                channels,
                embed_dim,
                cfg.attention_tokens.unwrap_or(seq_len),
                rng,
            )),
        };
        FusionParams {
            conditioning: Conditioning::new(embed_dim, channels),
            ln_in_gain: Tensor::ones(&[channels]),
            ln_in_bias: Tensor::zeros(&[channels]),
            ln_out_gain: Tensor::ones(&[channels]),
            ln_out_bias: Tensor::zeros(&[channels]),
            mixer,
        }
    }

    pub fn channels(&self) -> usize {
        self.ln_in_gain.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FusionVars {
        FusionVars {
            conditioning: self.conditioning.bind(tape, trainable),
            ln_in_gain: bind(tape, &self.ln_in_gain, trainable),
            ln_in_bias: bind(tape, &self.ln_in_bias, trainable),
            ln_out_gain: bind(tape, &self.ln_out_gain, trainable),
            ln_out_bias: bind(tape, &self.ln_out_bias, trainable),
            mixer: match &self.mixer {
                Mixer::Ssm(p) => MixerVars::Ssm(p.bind(tape, trainable)),
                Mixer::CrossAttention(p) => MixerVars::CrossAttention(p.bind(tape, trainable)),
            },
        }
    }
}

impl FusionVars {
    /// Rebuilds the variable set from leaves already on a tape, given in
    /// `ParamSet` order of `template`.
    pub fn from_leaves(template: &FusionParams, v: &[Var]) -> Result<Self> {
        let need = template.tensors().len();
        if v.len() != need {
            return Err(Error::dim(format!("fusion expects {need} leaves, got {}", v.len())));
        }
        let mixer = match &template.mixer {
            Mixer::Ssm(_) => MixerVars::Ssm(SsmVars {
                a_log: v[6],
                w_delta: v[7],
                b_delta: v[8],
                w_b: v[9],
                w_c: v[10],
                d: v[11],
            }),
            Mixer::CrossAttention(_) => MixerVars::CrossAttention(CrossAttentionVars {
                w_style: v[6],
                b_style: v[7],
                w_q: v[8],
                w_k: v[9],
                w_v: v[10],
                w_o: v[11],
                b_o: v[12],
            }),
        };
        Ok(FusionVars {
            conditioning: ConditioningVars { weight: v[0], bias: v[1] },
            ln_in_gain: v[2],
            ln_in_bias: v[3],
            ln_out_gain: v[4],
            ln_out_bias: v[5],
            mixer,
        })
    }

    pub fn list(&self) -> Vec<Var> {
        let mut v = vec![
            self.conditioning.weight,
            self.conditioning.bias,
            self.ln_in_gain,
            self.ln_in_bias,
            self.ln_out_gain,
            self.ln_out_bias,
        ];
        match &self.mixer {
            MixerVars::Ssm(s) => v.extend(s.list()),
            MixerVars::CrossAttention(a) => v.extend([a.w_style, a.b_style, a.w_q, a.w_k, a.w_v, a.w_o, a.b_o]),
        }
        v
    }
}

impl ParamSet for FusionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.conditioning.weight,
            &self.conditioning.bias,
            &self.ln_in_gain,
            &self.ln_in_bias,
            &self.ln_out_gain,
            &self.ln_out_bias,
        ];
        match &self.mixer {
            Mixer::Ssm(p) => v.extend(p.tensors()),
            Mixer::CrossAttention(p) => v.extend(p.tensors()),
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.conditioning.weight,
            &mut self.conditioning.bias,
            &mut self.ln_in_gain,
            &mut self.ln_in_bias,
            &mut self.ln_out_gain,
            &mut self.ln_out_bias,
        ];
        match &mut self.mixer {
            Mixer::Ssm(p) => v.extend(p.tensors_mut()),
            Mixer::CrossAttention(p) => v.extend(p.tensors_mut()),
        }
        v
    }
}

/// Fuses latent tokens `x [L, C]` with already-computed modulation vectors.
pub fn fuse(
    tape: &mut Tape,
    vars: &FusionVars,
    x: Var,
    mods: &ModulationVars,
    style: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let normed = tape.layer_norm(x, vars.ln_in_gain, vars.ln_in_bias, LAYER_NORM_EPS)?;
    let mixed = match &vars.mixer {
        MixerVars::Ssm(s) => ssm_block(tape, s, normed, &cfg.ssm)?,
        MixerVars::CrossAttention(a) => cross_attention(tape, a, normed, style)?,
    };
    let gated = tape.mul_row(mixed, mods.alpha1)?;
    let gated = tape.mul_row(gated, mods.mu1)?;
    let branch = tape.add(x, gated)?;
    let branch = tape.add_row(branch, mods.sigma1)?;
    let out = tape.layer_norm(branch, vars.ln_out_gain, vars.ln_out_bias, LAYER_NORM_EPS)?;
    let out = tape.add_row(out, mods.alpha2)?;
    let out = tape.add_row(out, mods.sigma2)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Numeric("fusion output is not finite".into()));
    }
    Ok(out)
}

/// Conditions on `style` and fuses in one go.
pub fn fuse_with_prompt(tape: &mut Tape, vars: &FusionVars, x: Var, style: Var, cfg: &FusionConfig) -> Result<Var> {
    let mods = condition(tape, &vars.conditioning, style)?;
    fuse(tape, vars, x, &mods, style, cfg)
}

/// Value-only fusion of a latent sequence for a unit-norm style embedding.
pub fn fuse_value(
    params: &FusionParams,
    latent: &LatentSequence,
    style_emb: &Tensor,
    cfg: &FusionConfig,
) -> Result<LatentSequence> {
    check_unit(style_emb)?;
    latent.tokens.ensure_finite("fusion input")?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(&latent.tokens);
    let s = tape.constant(style_emb);
    let m = fuse_with_prompt(&mut tape, &vars, x, s, cfg)?;
    LatentSequence::new(tape.value(m).clone(), latent.grid_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_norm_rows(x: &Tensor) -> Tensor {
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
            row.iter_mut().for_each(|a| *a = (*a - m) / (v + LAYER_NORM_EPS).sqrt());
        }
        Tensor::new(x.shape(), out).unwrap()
    }

    fn fuse_with(params: &FusionParams, x: &Tensor, mods: &ModulationParams) -> Tensor {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let mv = mods.bind(&mut tape, false);
        let s = tape.constant(&Tensor::zeros(&[params.conditioning.embed_dim()]));
        let y = fuse(&mut tape, &vars, xv, &mv, s, &FusionConfig::default()).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn flatten_is_row_major_and_invertible() {
        let one = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flatten_grid(&one).unwrap().len(), 1);

        let markers: Vec<f64> = vec![0.0, 0.1, 1.0, 1.1];
        let grid = Tensor::new(&[2, 2, 1], markers.clone()).unwrap();
        let seq = flatten_grid(&grid).unwrap();
        assert_eq!(seq.tokens.data(), &markers[..]);

        let big = Tensor::randn(&[16, 16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let back = unflatten_grid(&flatten_grid(&big).unwrap()).unwrap();
        assert!(back.bitwise_eq(&big));

        let bad = LatentSequence { tokens: Tensor::zeros(&[5, 2]), grid_shape: (2, 2) };
        assert!(unflatten_grid(&bad).is_err());
    }

    #[test]
    fn zero_conditioning_gives_zero_modulation() {
        let cond = Conditioning::zeros(8, 4);
        let e = Tensor::randn(&[8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)).l2_normalized().unwrap();
        assert!(condition_value(&cond, &e).unwrap().is_zero());
    }

    #[test]
    fn condition_requires_unit_norm() {
        let cond = Conditioning::zeros(8, 4);
        assert!(matches!(condition_value(&cond, &Tensor::ones(&[8])), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_modulation_is_plain_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = FusionParams::init(8, 6, 16, &FusionConfig::default(), &mut rng);
        let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let y = fuse_with(&params, &x, &ModulationParams::zeros(8));
        assert!(y.max_abs_diff(&layer_norm_rows(&x)) < 1e-12);
    }

    #[test]
    fn closed_gate_reduces_to_shifted_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FusionParams::init(8, 6, 16, &FusionConfig::default(), &mut rng);
        let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let mut mods = ModulationParams::zeros(8);
        mods.mu1 = Tensor::randn(&[8], 1.0, &mut rng);
        mods.sigma1 = Tensor::randn(&[8], 1.0, &mut rng);
        mods.alpha2 = Tensor::full(&[8], 0.75);
        let y = fuse_with(&params, &x, &mods);

        let mut shifted = x.clone();
        for row in shifted.data_mut().chunks_mut(8) {
            row.iter_mut().zip(mods.sigma1.data()).for_each(|(a, b)| *a += b);
        }
        let expect = layer_norm_rows(&shifted).map(|v| v + 0.75);
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn default_conditioning_is_prompt_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = FusionConfig::default();
        let params = FusionParams::init(8, 6, 16, &cfg, &mut rng);
        let latent = flatten_grid(&Tensor::randn(&[4, 4, 8], 1.0, &mut rng)).unwrap();
        let p1 = Tensor::randn(&[6], 1.0, &mut rng).l2_normalized().unwrap();
        let p2 = Tensor::randn(&[6], 1.0, &mut rng).l2_normalized().unwrap();
        let a = fuse_value(&params, &latent, &p1, &cfg).unwrap();
        let b = fuse_value(&params, &latent, &p2, &cfg).unwrap();
        assert!(a.tokens.bitwise_eq(&b.tokens));
        let c = fuse_value(&params, &latent, &p1, &cfg).unwrap();
        assert!(a.tokens.bitwise_eq(&c.tokens));
    }

    #[test]
    fn fuse_gradcheck_through_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FusionConfig::default();
        let mut params = FusionParams::init(8, 6, 16, &cfg, &mut rng);
        params.conditioning.weight = Tensor::randn(&[6, 40], 0.5, &mut rng);
        params.conditioning.bias = Tensor::randn(&[40], 0.5, &mut rng);
        let mut inputs = vec![
            Tensor::randn(&[16, 8], 1.0, &mut rng),
            Tensor::randn(&[6], 1.0, &mut rng).l2_normalized().unwrap(),
        ];
        inputs.extend(params.tensors().into_iter().cloned());
        let template = params.clone();
        let r = check_gradients(
            &inputs,
            |tape, v| {
                let vars = FusionVars::from_leaves(&template, &v[2..])?;
                fuse_with_prompt(tape, &vars, v[0], v[1], &cfg)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
