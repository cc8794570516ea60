//! Toy convolutional autoencoder standing in for a pretrained image VAE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{flatten_grid, unflatten_grid, LatentSequence, LAYER_NORM_EPS};
use crate::optim::Adam;
use crate::params::{bind, ParamSet};
use crate::tensor::Tensor;

use super::image::check_image;

pub const LATENT_CHANNELS: usize = 16;
const KERNEL: usize = 4;

fn conv_weight<R: Rng + ?Sized>(c_in: usize, c_out: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[KERNEL, KERNEL, c_in, c_out], gain / ((KERNEL * KERNEL * c_in) as f64).sqrt(), rng)
}

/// Two stride-2 convolutions, then a parameter-free channel layer norm, so
/// latent tokens arrive already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Mirrored transposed convolutions with a sigmoid output in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderVars {
    pub fn list(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Encoder {
            w1: conv_weight(3, hidden, 2.0, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: conv_weight(hidden, LATENT_CHANNELS, 1.0, rng),
            b2: Tensor::zeros(&[LATENT_CHANNELS]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            w1: bind(tape, &self.w1, trainable),
            b1: bind(tape, &self.b1, trainable),
            w2: bind(tape, &self.w2, trainable),
            b2: bind(tape, &self.b2, trainable),
        }
    }

    /// `[H, W, 3] -> [H/4, W/4, 16]`.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, img: Var) -> Result<Var> {
        check_divisible(tape.shape(img))?;
        let h = tape.conv2d(img, vars.w1, vars.b1, 2, 1)?;
        let h = tape.silu(h)?;
        let z = tape.conv2d(h, vars.w2, vars.b2, 2, 1)?;
        let one = tape.constant(&Tensor::ones(&[LATENT_CHANNELS]));
        let zero = tape.constant(&Tensor::zeros(&[LATENT_CHANNELS]));
        tape.layer_norm(z, one, zero, LAYER_NORM_EPS)
    }
}

impl ParamSet for Encoder {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Decoder {
            w1: conv_weight(LATENT_CHANNELS, hidden, 2.0, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: conv_weight(hidden, 3, 1.0, rng),
            b2: Tensor::zeros(&[3]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DecoderVars {
        DecoderVars {
            w1: bind(tape, &self.w1, trainable),
            b1: bind(tape, &self.b1, trainable),
            w2: bind(tape, &self.w2, trainable),
            b2: bind(tape, &self.b2, trainable),
        }
    }

    /// `[h, w, 16] -> [4h, 4w, 3]`.
    pub fn forward(&self, tape: &mut Tape, vars: &DecoderVars, latent: Var) -> Result<Var> {
        let s = tape.shape(latent).to_vec();
        if s.len() != 3 || s[2] != LATENT_CHANNELS {
            return Err(Error::dim(format!("decoder expects [h, w, {LATENT_CHANNELS}], got {s:?}")));
        }
        let h = tape.conv_transpose2d(latent, vars.w1, vars.b1, 2, 1)?;
        let h = tape.silu(h)?;
        let y = tape.conv_transpose2d(h, vars.w2, vars.b2, 2, 1)?;
        tape.sigmoid(y)
    }
}

impl ParamSet for Decoder {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn check_divisible(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::dim(format!("image must be [H, W, 3], got {shape:?}")));
    }
    if !shape[0].is_multiple_of(4) || !shape[1].is_multiple_of(4) || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Input(format!(
            "image {}x{} is not divisible by 4",
            shape[0], shape[1]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoencoder {
    pub seed: u64,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ToyAutoencoder {
    pub fn init(seed: u64, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae00_0000_0000_0003);
        let encoder = Encoder::init(hidden, &mut rng);
        let decoder = Decoder::init(hidden, &mut rng);
        ToyAutoencoder { seed, encoder, decoder }
    }

    pub fn hidden(&self) -> usize {
        self.decoder.hidden()
    }

    pub fn encode(&self, img: &Tensor) -> Result<LatentSequence> {
        check_image(img)?;
        let mut tape = Tape::new();
        let vars = self.encoder.bind(&mut tape, false);
        let x = tape.constant(img);
        let z = self.encoder.forward(&mut tape, &vars, x)?;
        flatten_grid(tape.value(z))
    }

    pub fn decode(&self, latent: &LatentSequence) -> Result<Tensor> {
        let grid = unflatten_grid(latent)?;
        let mut tape = Tape::new();
        let vars = self.decoder.bind(&mut tape, false);
        let z = tape.constant(&grid);
        let y = self.decoder.forward(&mut tape, &vars, z)?;
        Ok(tape.value(y).clone())
    }

    pub fn reconstruct(&self, img: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(img)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 500, lr: 1e-2, hidden: 32, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("autoencoder.lr", "must be positive and finite"));
        }
        if self.hidden == 0 {
            return Err(Error::config("autoencoder.hidden", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
}

impl PretrainReport {
    pub fn final_psnr(&self) -> f64 {
        psnr_from_mse(self.final_mse)
    }
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(psnr_from_mse(d.dot(&d)? / d.numel() as f64))
}

fn reconstruction_loss(tape: &mut Tape, ae: &ToyAutoencoder, img: &Tensor, trainable: bool) -> Result<(Var, Vec<Var>)> {
    let ev = ae.encoder.bind(tape, trainable);
    let dv = ae.decoder.bind(tape, trainable);
    let x = tape.constant(img);
    let z = ae.encoder.forward(tape, &ev, x)?;
    let y = ae.decoder.forward(tape, &dv, z)?;
    let d = tape.sub(y, x)?;
    let sq = tape.square(d)?;
    let loss = tape.mean(sq)?;
    Ok((loss, vec![ev.w1, ev.b1, ev.w2, ev.b2, dv.w1, dv.b1, dv.w2, dv.b2]))
}

/// Fits encoder and decoder to reconstruct `img` with Adam on pixel MSE.
pub fn pretrain_autoencoder(img: &Tensor, cfg: &PretrainConfig) -> Result<(ToyAutoencoder, PretrainReport)> {
    cfg.validate()?;
    check_image(img)?;
    check_divisible(img.shape())?;
    let mut ae = ToyAutoencoder::init(cfg.seed, cfg.hidden);
    let mut opt = Adam::new(ae.encoder.tensors().into_iter().chain(ae.decoder.tensors()));
    let mut initial = None;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let (loss, vars) = reconstruction_loss(&mut tape, &ae, img, true)?;
        let l = tape.item(loss);
        initial.get_or_insert(l);
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut Tensor> = ae.encoder.tensors_mut();
        params.extend(ae.decoder.tensors_mut());
        opt.step(&mut params, &grad_refs, cfg.lr)?;
    }
    let mut tape = Tape::new();
    let (loss, _) = reconstruction_loss(&mut tape, &ae, img, false)?;
    let final_mse = tape.item(loss);
    Ok((
        ae,
        PretrainReport {
            initial_mse: initial.unwrap_or(final_mse),
            final_mse,
        },
    ))
}
