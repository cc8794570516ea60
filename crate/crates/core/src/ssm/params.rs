use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    pub state_dim: usize,
    /// Added after the softplus so the step size never reaches zero.
    pub delta_floor: f64,
    pub scan: ScanMode,
    /// Sum of a forward and a time-reversed scan.
    pub bidirectional: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            state_dim: 8,
            delta_floor: 1e-4,
            scan: ScanMode::Parallel,
            bidirectional: false,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("ssm.state_dim", "must be positive"));
        }
        if !(self.delta_floor > 0.0) {
            return Err(Error::config("ssm.delta_floor", "must be > 0"));
        }
        Ok(())
    }
}

/// Parameters of one selective SSM over `C` channels with `N` states each.
///
/// The state matrix is diagonal, negative and real: `A = -exp(a_log)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a_log: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub d: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub a_log: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d: Var,
}

impl SsmVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.a_log, self.w_delta, self.b_delta, self.w_b, self.w_c, self.d]
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// `A` initialized to `-(1..=N)` per channel, step sizes log-uniform in `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let a_log = Tensor::new(
            &[channels, state_dim],
            (0..channels * state_dim)
                .map(|i| ((i % state_dim) + 1) as f64)
                .map(f64::ln)
                .collect(),
        )
        .expect("shape");
        let scale = 1.0 / (channels as f64).sqrt();
        let b_delta = Tensor::from_vec(
            (0..channels)
                .map(|_| {
                    let dt = (rng.random_range(0.0..1.0) * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
                    inverse_softplus(dt)
                })
                .collect(),
        );
        SsmParams {
            a_log,
            w_delta: Tensor::randn(&[channels, channels], 0.1 * scale, rng),
            b_delta,
            w_b: Tensor::randn(&[channels, state_dim], scale, rng),
            w_c: Tensor::randn(&[channels, state_dim], scale, rng),
            d: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The diagonal of `A` (all negative).
    pub fn a_matrix(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SsmVars {
        SsmVars {
            a_log: bind(tape, &self.a_log, trainable),
            w_delta: bind(tape, &self.w_delta, trainable),
            b_delta: bind(tape, &self.b_delta, trainable),
            w_b: bind(tape, &self.w_b, trainable),
            w_c: bind(tape, &self.w_c, trainable),
            d: bind(tape, &self.d, trainable),
        }
    }
}

impl ParamSet for SsmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.a_log, &self.w_delta, &self.b_delta, &self.w_b, &self.w_c, &self.d]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.a_log,
            &mut self.w_delta,
            &mut self.b_delta,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.d,
        ]
    }
}
