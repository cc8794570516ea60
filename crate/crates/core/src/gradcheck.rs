//! Registry of finite-difference checks, one entry per differentiable op,
//! each run over many seeded random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, CustomOp, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{condition, fuse_with_prompt, FusionConfig, FusionKind, FusionParams, FusionVars};
use crate::losses::{
    alpha_shift_var, apply_mask_var, content_feature_loss_var, directional_loss_var, masked_directional_loss_var,
    multi_prompt_style_loss_var, perceptual_loss_var, sample_mask, second_order_loss_var, style_loss_var,
    total_loss_var, ContentFeatures, LossWeights, PromptContext, SecondOrderConfig, SecondOrderMode,
    SecondOrderState, ShiftAnchor, StyleTerms,
};
use crate::models::{Decoder, DecoderVars, Encoder, EncoderVars, ImageEmbedder};
use crate::params::ParamSet;
use crate::ssm::{cross_attention, ssm_block, CrossAttentionParams, CrossAttentionVars, ScanMode, SsmConfig, SsmParams, SsmVars};
use crate::tensor::Tensor;

/// Random instances per op.
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Module {
    Tensor,
    Ssm,
    Fusion,
    Losses,
    Models,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Tensor, Module::Ssm, Module::Fusion, Module::Losses, Module::Models];

    pub fn name(self) -> &'static str {
        match self {
            Module::Tensor => "tensor",
            Module::Ssm => "ssm",
            Module::Fusion => "fusion",
            Module::Losses => "losses",
            Module::Models => "models",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `all` or a single module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    Only(Module),
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Selection::All);
        }
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .map(Selection::Only)
            .ok_or_else(|| Error::Input(format!("unknown gradcheck module {s:?} (all, tensor, ssm, fusion, losses, models)")))
    }
}

type CaseFn = fn(&mut ChaCha8Rng, &GradCheckOptions) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub module: Module,
    run: CaseFn,
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GradCase({}/{})", self.module, self.name)
    }
}

impl GradCase {
    pub fn run(&self, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (self.run)(&mut rng, &GradCheckOptions { seed, ..opts.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub module: Module,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// First error raised while building or checking an instance.
    pub error: Option<String>,
    pub passed: bool,
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "ok" } else { "FAIL" };
        write!(
            f,
            "{:<7} {:<30} max_rel_err {:.3e}  instances {:>3}  worst_seed {:<6} {verdict}",
            self.module.name(),
            self.name,
            self.max_rel_error,
            self.instances,
            self.worst_seed
        )?;
        if let Some(e) = &self.error {
            write!(f, "  ({e})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

/// Runs every case on seeds `base_seed, base_seed + 1, ...`.
pub fn run_suite(cases: &[GradCase], base_seed: u64, instances: usize, opts: &GradCheckOptions) -> SuiteReport {
    let cases = cases
        .iter()
        .map(|case| {
            let mut res = CaseResult {
                name: case.name,
                module: case.module,
                instances: 0,
                max_rel_error: 0.0,
                worst_seed: base_seed,
                error: None,
                passed: true,
            };
            for k in 0..instances as u64 {
                let seed = base_seed.wrapping_add(k);
                match case.run(seed, opts) {
                    Ok(r) => {
                        res.instances += 1;
                        if r.max_rel_error > res.max_rel_error {
                            res.max_rel_error = r.max_rel_error;
                            res.worst_seed = seed;
                        }
                    }
                    Err(e) => {
                        res.error = Some(format!("seed {seed}: {e}"));
                        res.worst_seed = seed;
                        break;
                    }
                }
            }
            res.passed = res.error.is_none() && res.instances == instances && res.max_rel_error < opts.tolerance;
            res
        })
        .collect();
    SuiteReport { tolerance: opts.tolerance, cases }
}

pub fn select(sel: Selection) -> Vec<GradCase> {
    registry()
        .into_iter()
        .filter(|c| matches!(sel, Selection::All) || sel == Selection::Only(c.module))
        .collect()
}

macro_rules! case {
    ($module:ident, $name:literal, $f:expr) => {
        GradCase { name: $name, module: Module::$module, run: $f }
    };
}

pub fn registry() -> Vec<GradCase> {
    vec![
        case!(Tensor, "add", |r, o| binary(r, o, |t, a, b| t.add(a, b))),
        case!(Tensor, "sub", |r, o| binary(r, o, |t, a, b| t.sub(a, b))),
        case!(Tensor, "mul", |r, o| binary(r, o, |t, a, b| t.mul(a, b))),
        case!(Tensor, "div", |r, o| {
            let a = Tensor::scalar(r.random_range(-2.0..2.0));
            let b = Tensor::scalar(r.random_range(0.5..1.5));
            check(vec![a, b], o, |t, v| t.div(v[0], v[1]))
        }),
        case!(Tensor, "affine", |r, o| unary(r, o, |t, x| t.affine(x, 1.7, -0.3))),
        case!(Tensor, "scale", |r, o| unary(r, o, |t, x| t.scale(x, -2.5))),
        case!(Tensor, "add_row", |r, o| {
            check(vec![randn(r, &[4, 3]), randn(r, &[3])], o, |t, v| t.add_row(v[0], v[1]))
        }),
        case!(Tensor, "mul_row", |r, o| {
            check(vec![randn(r, &[4, 3]), randn(r, &[3])], o, |t, v| t.mul_row(v[0], v[1]))
        }),
        case!(Tensor, "mul_scalar", |r, o| {
            let s = Tensor::scalar(r.random_range(-2.0..2.0));
            check(vec![randn(r, &[4, 3]), s], o, |t, v| t.mul_scalar(v[0], v[1]))
        }),
        case!(Tensor, "silu", |r, o| unary(r, o, |t, x| t.silu(x))),
        case!(Tensor, "softplus", |r, o| unary(r, o, |t, x| t.softplus(x))),
        case!(Tensor, "sigmoid", |r, o| unary(r, o, |t, x| t.sigmoid(x))),
        case!(Tensor, "tanh", |r, o| unary(r, o, |t, x| t.tanh(x))),
        case!(Tensor, "exp", |r, o| unary(r, o, |t, x| t.exp(x))),
        case!(Tensor, "square", |r, o| unary(r, o, |t, x| t.square(x))),
        case!(Tensor, "sum", |r, o| unary(r, o, |t, x| t.sum(x))),
        case!(Tensor, "mean", |r, o| unary(r, o, |t, x| t.mean(x))),
        case!(Tensor, "dot", |r, o| check(vec![randn(r, &[7]), randn(r, &[7])], o, |t, v| t.dot(v[0], v[1]))),
        case!(Tensor, "norm", |r, o| check(vec![randn(r, &[7])], o, |t, v| t.norm(v[0]))),
        case!(Tensor, "sq_norm", |r, o| check(vec![randn(r, &[7])], o, |t, v| t.sq_norm(v[0]))),
        case!(Tensor, "l2_normalize", |r, o| check(vec![randn(r, &[7])], o, |t, v| t.l2_normalize(v[0]))),
        case!(Tensor, "normalize_rows", |r, o| {
            check(vec![randn(r, &[4, 5])], o, |t, v| t.normalize_rows(v[0], 1e-10))
        }),
        case!(Tensor, "linear", |r, o| {
            let inputs = vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])];
            check(inputs, o, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }),
        case!(Tensor, "matmul", |r, o| {
            check(vec![randn(r, &[3, 4]), randn(r, &[4, 5])], o, |t, v| t.matmul(v[0], v[1]))
        }),
        case!(Tensor, "layer_norm", |r, o| {
            let inputs = vec![randn(r, &[4, 5]), Tensor::uniform(&[5], 0.5, 1.5, r), randn(r, &[5])];
            check(inputs, o, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        case!(Tensor, "softmax", |r, o| check(vec![randn(r, &[3, 5])], o, |t, v| t.softmax(v[0]))),
        case!(Tensor, "transpose", |r, o| check(vec![randn(r, &[3, 4])], o, |t, v| t.transpose(v[0]))),
        case!(Tensor, "reshape", |r, o| check(vec![randn(r, &[3, 4])], o, |t, v| t.reshape(v[0], &[2, 6]))),
        case!(Tensor, "slice", |r, o| check(vec![randn(r, &[3, 4])], o, |t, v| t.slice(v[0], 2, 7))),
        case!(Tensor, "concat", |r, o| check(vec![randn(r, &[3]), randn(r, &[2, 2])], o, |t, v| t.concat(v))),
        case!(Tensor, "reverse_rows", |r, o| check(vec![randn(r, &[5, 3])], o, |t, v| t.reverse_rows(v[0]))),
        case!(Tensor, "conv2d", |r, o| {
            let inputs = vec![randn(r, &[6, 6, 2]), randn(r, &[3, 3, 2, 3]), randn(r, &[3])];
            check(inputs, o, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1))
        }),
        case!(Tensor, "conv2d_k4_stride2", |r, o| {
            let inputs = vec![randn(r, &[8, 8, 2]), randn(r, &[4, 4, 2, 3]), randn(r, &[3])];
            check(inputs, o, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1))
        }),
        case!(Tensor, "conv_transpose2d", |r, o| {
            let inputs = vec![randn(r, &[3, 3, 2]), randn(r, &[4, 4, 2, 3]), randn(r, &[3])];
            check(inputs, o, |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1))
        }),
        case!(Tensor, "global_avg_pool", |r, o| check(vec![randn(r, &[4, 4, 3])], o, |t, v| t.global_avg_pool(v[0]))),
        case!(Ssm, "ssm_block_sequential", |r, o| ssm_case(r, o, ScanMode::Sequential, false)),
        case!(Ssm, "ssm_block_parallel", |r, o| ssm_case(r, o, ScanMode::Parallel, false)),
        case!(Ssm, "ssm_block_bidirectional", |r, o| ssm_case(r, o, ScanMode::Parallel, true)),
        case!(Fusion, "condition", |r, o| {
            let (d, c) = (6, 4);
            let inputs = vec![unit(r, d), randn(r, &[d, 5 * c]).scale(0.5), randn(r, &[5 * c])];
            check(inputs, o, |t, v| {
                let vars = crate::fusion::ConditioningVars { weight: v[1], bias: v[2] };
                let m = condition(t, &vars, v[0])?;
                t.concat(&[m.alpha1, m.mu1, m.sigma1, m.alpha2, m.sigma2])
            })
        }),
        case!(Fusion, "fuse_ssm", |r, o| fusion_case(r, o, FusionKind::Ssm)),
        case!(Fusion, "fuse_cross_attention", |r, o| fusion_case(r, o, FusionKind::CrossAttention)),
        case!(Fusion, "cross_attention", |r, o| {
            let p = CrossAttentionParams::init(4, 6, 3, r);
            let mut inputs = vec![randn(r, &[5, 4]), randn(r, &[6]).scale(0.5)];
            inputs.extend(p.tensors().into_iter().cloned());
            check(inputs, o, |t, v| {
                let vars = CrossAttentionVars {
                    w_style: v[2],
                    b_style: v[3],
                    w_q: v[4],
                    w_k: v[5],
                    w_v: v[6],
                    w_o: v[7],
                    b_o: v[8],
                };
                cross_attention(t, &vars, v[0], v[1])
            })
        }),
        case!(Losses, "directional_loss", |r, o| {
            let ctx = context(r);
            check(vec![unit(r, EMB)], o, |t, v| directional_loss_var(t, &ctx, v[0]))
        }),
        case!(Losses, "masked_directional_loss", |r, o| {
            let ctx = context(r);
            check(vec![unit(r, EMB)], o, |t, v| masked_directional_loss_var(t, &ctx, v[0]))
        }),
        case!(Losses, "alpha_shift", |r, o| {
            let (x, beta) = (unit(r, EMB), r.random_range(0.5..3.0));
            check(vec![unit(r, EMB)], o, |t, v| alpha_shift_var(t, v[0], &x, 1.0, beta))
        }),
        case!(Losses, "second_order_norm_ratio", |r, o| {
            second_order_case(r, o, SecondOrderMode::NormRatio, ShiftAnchor::Current)
        }),
        case!(Losses, "second_order_elementwise", |r, o| {
            second_order_case(r, o, SecondOrderMode::Elementwise, ShiftAnchor::Current)
        }),
        case!(Losses, "second_order_previous_anchor", |r, o| {
            second_order_case(r, o, SecondOrderMode::NormRatio, ShiftAnchor::Previous)
        }),
        case!(Losses, "style_loss_through_embedder", |r, o| {
            let e = ImageEmbedder::new(r.random(), EMB);
            let (x, y) = (image(r, 8), image(r, 8));
            let ctx = PromptContext::new(unit(r, EMB), unit(r, EMB), e.embed(&x)?)?;
            let mask = sample_mask(&[8, 8, 3], 4, 0.5, r.random())?;
            let mut st = SecondOrderState::new(SecondOrderConfig { theta: 10.0, ..Default::default() });
            st.prev_img_emb = Some(e.embed(&image(r, 8))?);
            check(vec![y], o, |t, v| {
                let vars = e.bind(t);
                let yf = e.forward(t, &vars, v[0])?;
                let masked = apply_mask_var(t, v[0], &mask)?;
                let mf = e.forward(t, &vars, masked)?;
                Ok(style_loss_var(t, &ctx, yf.embedding, mf.embedding, &st, 0, StyleTerms::default())?.total)
            })
        }),
        case!(Losses, "multi_prompt_style_loss", |r, o| {
            let x = unit(r, EMB);
            let src = unit(r, EMB);
            let ctxs = vec![
                PromptContext::new(unit(r, EMB), src.clone(), x.clone())?,
                PromptContext::new(unit(r, EMB), src, x)?,
            ];
            let mut st = SecondOrderState::new(SecondOrderConfig { theta: 10.0, ..Default::default() });
            st.prev_img_emb = Some(unit(r, EMB));
            check(vec![unit(r, EMB), unit(r, EMB)], o, |t, v| {
                Ok(multi_prompt_style_loss_var(t, &ctxs, v[0], v[1], &st, 5, StyleTerms::default())?.total)
            })
        }),
        case!(Losses, "content_feature_loss", |r, o| feature_case(r, o, content_feature_loss_var)),
        case!(Losses, "perceptual_loss", |r, o| feature_case(r, o, perceptual_loss_var)),
        case!(Losses, "total_loss", |r, o| {
            let w = LossWeights { style: 1.0, lpips: r.random_range(0.0..2.0), vgg: r.random_range(1.0..9000.0) };
            let inputs = vec![Tensor::scalar(r.random()), Tensor::scalar(r.random()), Tensor::scalar(r.random())];
            check(inputs, o, |t, v| total_loss_var(t, &w, v[0], v[1], v[2]))
        }),
        case!(Losses, "apply_mask", |r, o| {
            let mask = sample_mask(&[8, 8, 3], 4, 0.5, r.random())?;
            check(vec![image(r, 8)], o, |t, v| apply_mask_var(t, v[0], &mask))
        }),
        case!(Models, "image_embedder", |r, o| {
            let e = ImageEmbedder::new(r.random(), EMB);
            check(vec![image(r, 8)], o, |t, v| {
                let vars = e.bind(t);
                Ok(e.forward(t, &vars, v[0])?.embedding)
            })
        }),
        case!(Models, "encoder", |r, o| {
            let enc = Encoder::init(4, r);
            let mut inputs = vec![image(r, 8)];
            inputs.extend(enc.tensors().into_iter().map(|w| perturb(r, w)));
            check(inputs, o, |t, v| {
                let vars = EncoderVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                enc.forward(t, &vars, v[0])
            })
        }),
        case!(Models, "decoder", |r, o| {
            let dec = Decoder::init(4, r);
            let mut inputs = vec![randn(r, &[2, 2, crate::models::LATENT_CHANNELS])];
            inputs.extend(dec.tensors().into_iter().map(|w| perturb(r, w)));
            check(inputs, o, |t, v| {
                let vars = DecoderVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                dec.forward(t, &vars, v[0])
            })
        }),
    ]
}

/// Negative control: squares its input but reports half the true gradient.
pub fn faulty_case() -> GradCase {
    case!(Tensor, "faulty_square", |r, o| {
        check(vec![randn(r, &[3, 4])], o, |t, v| {
            let out = t.value(v[0]).map(|x| x * x);
            t.custom(&[v[0]], out, Box::new(FaultySquare))
        })
    })
}

struct FaultySquare;

impl CustomOp for FaultySquare {
    fn name(&self) -> &'static str {
        "faulty_square"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(inputs[0].data().iter().zip(grad_out).map(|(x, g)| x * g).collect())]
    }
}

const EMB: usize = 16;

fn check<F>(inputs: Vec<Tensor>, opts: &GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients(&inputs, build, opts)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::randn(&[d], 1.0, r).l2_normalized().expect("gaussian draw is nonzero")
}

/// Pixels kept away from the `[0, 1]` range check so perturbations stay valid.
fn image(r: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::uniform(&[side, side, 3], 0.05, 0.95, r)
}

fn perturb(r: &mut ChaCha8Rng, w: &Tensor) -> Tensor {
    let scale = (w.norm() / (w.numel() as f64).sqrt()).max(0.1);
    w.add(&Tensor::randn(w.shape(), 0.3 * scale, r)).expect("same shape")
}

fn unary(r: &mut ChaCha8Rng, o: &GradCheckOptions, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheckReport> {
    check(vec![randn(r, &[3, 4])], o, |t, v| f(t, v[0]))
}

fn binary(
    r: &mut ChaCha8Rng,
    o: &GradCheckOptions,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    check(vec![randn(r, &[3, 4]), randn(r, &[3, 4])], o, |t, v| f(t, v[0], v[1]))
}

fn context(r: &mut ChaCha8Rng) -> PromptContext {
    PromptContext::new(unit(r, EMB), unit(r, EMB), unit(r, EMB)).expect("random prompts differ")
}

fn ssm_case(r: &mut ChaCha8Rng, o: &GradCheckOptions, scan: ScanMode, bidirectional: bool) -> Result<GradCheckReport> {
    let p = SsmParams::init(3, 4, r);
    let mut inputs = vec![randn(r, &[10, 3])];
    inputs.extend(p.tensors().into_iter().map(|w| perturb(r, w)));
    let cfg = SsmConfig { scan, bidirectional, ..SsmConfig::default() };
    check(inputs, o, |t, v| {
        let vars = SsmVars { a_log: v[1], w_delta: v[2], b_delta: v[3], w_b: v[4], w_c: v[5], d: v[6] };
        ssm_block(t, &vars, v[0], &cfg)
    })
}

fn fusion_case(r: &mut ChaCha8Rng, o: &GradCheckOptions, kind: FusionKind) -> Result<GradCheckReport> {
    let (c, d, l) = (4, 6, 8);
    let cfg = FusionConfig { kind, attention_tokens: Some(4), ..FusionConfig::default() };
    let mut params = FusionParams::init(c, d, l, &cfg, r);
    params.conditioning.weight = Tensor::randn(&[d, 5 * c], 0.5, r);
    params.conditioning.bias = Tensor::randn(&[5 * c], 0.5, r);
    let mut inputs = vec![randn(r, &[l, c]), unit(r, d)];
    inputs.extend(params.tensors().into_iter().map(|w| perturb(r, w)));
    check(inputs, o, |t, v| {
        let vars = FusionVars::from_leaves(&params, &v[2..])?;
        fuse_with_prompt(t, &vars, v[0], v[1], &cfg)
    })
}

fn second_order_case(
    r: &mut ChaCha8Rng,
    o: &GradCheckOptions,
    mode: SecondOrderMode,
    anchor: ShiftAnchor,
) -> Result<GradCheckReport> {
    let ctx = context(r);
    let prev = unit(r, EMB);
    let cfg = SecondOrderConfig { mode, anchor, beta: r.random_range(0.5..3.0), ..Default::default() };
    check(vec![unit(r, EMB)], o, |t, v| second_order_loss_var(t, &ctx, Some(&prev), v[0], &cfg))
}

fn feature_case(
    r: &mut ChaCha8Rng,
    o: &GradCheckOptions,
    f: fn(&mut Tape, &ContentFeatures, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let e = ImageEmbedder::new(r.random(), EMB);
    let xf = ContentFeatures::of(&e, &image(r, 8))?;
    check(vec![image(r, 8)], o, |t, v| {
        let vars = e.bind(t);
        let yf = e.forward(t, &vars, v[0])?;
        f(t, &xf, yf.f1, yf.f2)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parses() {
        assert_eq!("all".parse::<Selection>().unwrap(), Selection::All);
        assert_eq!("ssm".parse::<Selection>().unwrap(), Selection::Only(Module::Ssm));
        assert!("bogus".parse::<Selection>().is_err());
        assert!(select(Selection::Only(Module::Losses)).iter().all(|c| c.module == Module::Losses));
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn faulty_vjp_is_caught() {
        let r = run_suite(&[faulty_case()], 0, 3, &GradCheckOptions::default());
        assert!(!r.passed());
        assert_eq!(r.failing(), vec!["faulty_square"]);
        assert!(r.cases[0].max_rel_error > 0.1);
    }
}
