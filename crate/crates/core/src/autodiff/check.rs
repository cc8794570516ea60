//! Finite-difference checks of tape gradients (five-point central stencil).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Stencil spacing of the five-point central difference.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates with
    /// near-zero gradient are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without replacement).
    pub max_coords: Option<usize>,
    /// Seeds the output projection and coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: Some(48),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` maps the input leaves to an output of any shape; the checked loss is
/// a fixed random projection `sum(w * output)` so that no coordinate of the
/// output's gradient cancels by symmetry.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars)?;
    let projection = Tensor::uniform(tape.shape(out), 0.5, 1.5, &mut rng);
    let loss = project(&mut tape, out, &projection)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()])
        })
        .collect();

    // Outputs are differenced element-wise before projecting, which keeps the
    // roundoff of the summed loss out of the difference quotient.
    let eval = |perturbed: &[Tensor]| -> Result<Tensor> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x)).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).clone())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = input.data()[k];
            let mut at = |offset: f64| -> Result<Tensor> {
                work[i].data_mut()[k] = orig + offset;
                let out = eval(&work);
                work[i].data_mut()[k] = orig;
                out
            };
            let h = opts.step;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            // fourth-order stencil: (-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h
            let numeric = (0..projection.numel())
                .map(|j| {
                    let d = 8.0 * (p1.data()[j] - m1.data()[j]) - (p2.data()[j] - m2.data()[j]);
                    projection.data()[j] * d
                })
                .sum::<f64>()
                / (12.0 * h);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("gradcheck: non-finite error at input {i}[{k}]")));
            }
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst = Some((i, k));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}
