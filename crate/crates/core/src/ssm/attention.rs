use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind, ParamSet};
use crate::tensor::Tensor;

/// Single-head cross-attention from latent tokens (queries) to style tokens
/// (keys/values) obtained by projecting a style embedding to `tokens` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub w_style: Tensor,
    pub b_style: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionVars {
    pub w_style: Var,
    pub b_style: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl CrossAttentionParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, embed_dim: usize, tokens: usize, rng: &mut R) -> Self {
        let c = channels as f64;
        CrossAttentionParams {
            w_style: Tensor::randn(&[embed_dim, tokens * channels], 1.0, rng),
            b_style: Tensor::zeros(&[tokens * channels]),
            w_q: Tensor::randn(&[channels, channels], 1.0 / c.sqrt(), rng),
            w_k: Tensor::randn(&[channels, channels], 1.0 / c.sqrt(), rng),
            w_v: Tensor::randn(&[channels, channels], 1.0 / c.sqrt(), rng),
            w_o: Tensor::randn(&[channels, channels], 1.0 / c.sqrt(), rng),
            b_o: Tensor::zeros(&[channels]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.w_style.shape()[1] / self.channels()
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CrossAttentionVars {
        CrossAttentionVars {
            w_style: bind(tape, &self.w_style, trainable),
            b_style: bind(tape, &self.b_style, trainable),
            w_q: bind(tape, &self.w_q, trainable),
            w_k: bind(tape, &self.w_k, trainable),
            w_v: bind(tape, &self.w_v, trainable),
            w_o: bind(tape, &self.w_o, trainable),
            b_o: bind(tape, &self.b_o, trainable),
        }
    }
}

impl ParamSet for CrossAttentionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_style, &self.b_style, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.b_o]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_style,
            &mut self.b_style,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

/// `softmax(q k^T / sqrt(d)) v`, keeping only the attention weights for backward.
pub struct AttentionOp {
    probs: Vec<f64>,
    dims: (usize, usize, usize, usize),
}

impl AttentionOp {
    pub fn forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionOp)> {
        if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
            return Err(Error::dim("attention operands must be matrices"));
        }
        let (l, dk) = (q.shape()[0], q.shape()[1]);
        let (kn, dv) = (v.shape()[0], v.shape()[1]);
        if k.shape() != [kn, dk] {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut probs = vec![0.0; l * kn];
        let mut out = vec![0.0; l * dv];
        for i in 0..l {
            let qi = &qd[i * dk..(i + 1) * dk];
            let row = &mut probs[i * kn..(i + 1) * kn];
            let mut m = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &kd[j * dk..(j + 1) * dk];
                *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                m = m.max(*s);
            }
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (j, s) in row.iter_mut().enumerate() {
                *s /= z;
                let vj = &vd[j * dv..(j + 1) * dv];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += *s * vv;
                }
            }
        }
        Ok((Tensor::new(&[l, dv], out)?, AttentionOp { probs, dims: (l, kn, dk, dv) }))
    }
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (l, kn, dk, dv) = self.dims;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gq = vec![0.0; l * dk];
        let mut gk = vec![0.0; kn * dk];
        let mut gv = vec![0.0; kn * dv];
        let mut gs = vec![0.0; kn];
        for i in 0..l {
            let p = &self.probs[i * kn..(i + 1) * kn];
            let gi = &g[i * dv..(i + 1) * dv];
            let mut rowdot = 0.0;
            for j in 0..kn {
                let vj = &vd[j * dv..(j + 1) * dv];
                let gp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                gs[j] = gp;
                rowdot += gp * p[j];
                let gvj = &mut gv[j * dv..(j + 1) * dv];
                for (acc, gg) in gvj.iter_mut().zip(gi) {
                    *acc += p[j] * gg;
                }
            }
            let qi = &qd[i * dk..(i + 1) * dk];
            let gqi = &mut gq[i * dk..(i + 1) * dk];
            for j in 0..kn {
                let w = p[j] * (gs[j] - rowdot) * scale;
                let kj = &kd[j * dk..(j + 1) * dk];
                let gkj = &mut gk[j * dk..(j + 1) * dk];
                for t in 0..dk {
                    gqi[t] += w * kj[t];
                    gkj[t] += w * qi[t];
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Cross-attention of `x [L, C]` over the style tokens derived from `style [D]`.
pub fn cross_attention(tape: &mut Tape, vars: &CrossAttentionVars, x: Var, style: Var) -> Result<Var> {
    let c = tape.shape(vars.w_q)[0];
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != c {
        return Err(Error::dim(format!("cross_attention input {:?} for {c} channels", tape.shape(x))));
    }
    let tokens = tape.linear(style, vars.w_style, Some(vars.b_style))?;
    let kv_rows = tape.value(tokens).numel() / c;
    let tokens = tape.reshape(tokens, &[kv_rows, c])?;
    let q = tape.matmul(x, vars.w_q)?;
    let k = tape.matmul(tokens, vars.w_k)?;
    let v = tape.matmul(tokens, vars.w_v)?;
    let (out, op) = AttentionOp::forward(tape.value(q), tape.value(k), tape.value(v))?;
    let att = tape.custom(&[q, k, v], out, Box::new(op))?;
    tape.linear(att, vars.w_o, Some(vars.b_o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_gives_constant_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CrossAttentionParams::init(4, 6, 1, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(&Tensor::randn(&[5, 4], 1.0, &mut rng));
        let s = tape.constant(&Tensor::randn(&[6], 1.0, &mut rng));
        let y = cross_attention(&mut tape, &vars, x, s).unwrap();
        let y = tape.value(y);
        for row in y.data().chunks(4).skip(1) {
            assert_eq!(row, &y.data()[..4]);
        }
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CrossAttentionParams::init(4, 6, 3, &mut rng);
        let mut inputs = vec![Tensor::randn(&[5, 4], 1.0, &mut rng), Tensor::randn(&[6], 0.5, &mut rng)];
        inputs.extend(p.tensors().into_iter().cloned());
        let r = check_gradients(
            &inputs,
            |tape, v| {
                let vars = CrossAttentionVars {
                    w_style: v[2],
                    b_style: v[3],
                    w_q: v[4],
                    w_k: v[5],
                    w_v: v[6],
                    w_o: v[7],
                    b_o: v[8],
                };
                cross_attention(tape, &vars, v[0], v[1])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
