//! Frozen two-layer convolutional image embedder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HIDDEN1: usize = 16;
pub const HIDDEN2: usize = 64;

/// `conv3x3/2 -> tanh -> conv3x3/2 -> tanh -> mean pool -> linear -> l2 norm`.
///
/// The convolutions carry no bias, so a zero-filled region yields zero
/// features and only dilutes the pooled vector, which normalization undoes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedder {
    pub conv1: Tensor,
    pub conv2: Tensor,
    pub proj: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageEmbedderVars {
    conv1: Var,
    conv2: Var,
    proj: Var,
    zero1: Var,
    zero2: Var,
}

/// Intermediate maps and the embedding of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures {
    pub f1: Var,
    pub f2: Var,
    pub embedding: Var,
}

pub fn check_image(img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::dim(format!("image must be [H, W, 3], got {:?}", img.shape())));
    }
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

impl ImageEmbedder {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a6e_0000_0000_0002);
        ImageEmbedder {
            conv1: Tensor::randn(&[3, 3, 3, HIDDEN1], 1.5 / 27f64.sqrt(), &mut rng),
            conv2: Tensor::randn(&[3, 3, HIDDEN1, HIDDEN2], 1.5 / ((9 * HIDDEN1) as f64).sqrt(), &mut rng),
            proj: Tensor::randn(&[HIDDEN2, embed_dim], 1.0 / (HIDDEN2 as f64).sqrt(), &mut rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.conv1, &self.conv2, &self.proj]
    }

    /// Registers the weights as constants: the embedder never trains.
    pub fn bind(&self, tape: &mut Tape) -> ImageEmbedderVars {
        ImageEmbedderVars {
            conv1: tape.constant(&self.conv1),
            conv2: tape.constant(&self.conv2),
            proj: tape.constant(&self.proj),
            zero1: tape.constant(&Tensor::zeros(&[HIDDEN1])),
            zero2: tape.constant(&Tensor::zeros(&[HIDDEN2])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ImageEmbedderVars, img: Var) -> Result<ImageFeatures> {
        check_image(tape.value(img))?;
        let f1 = tape.conv2d(img, vars.conv1, vars.zero1, 2, 1)?;
        let f1 = tape.tanh(f1)?;
        let f2 = tape.conv2d(f1, vars.conv2, vars.zero2, 2, 1)?;
        let f2 = tape.tanh(f2)?;
        let pooled = tape.global_avg_pool(f2)?;
        let z = tape.linear(pooled, vars.proj, None)?;
        let embedding = tape
            .l2_normalize(z)
            .map_err(|_| Error::DegenerateInput("image embedding is the zero vector (all-black input?)".into()))?;
        Ok(ImageFeatures { f1, f2, embedding })
    }

    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(img);
        let f = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(f.embedding).clone())
    }

    /// The two post-activation feature maps.
    pub fn features(&self, img: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(img);
        let f = self.forward(&mut tape, &vars, x)?;
        Ok((tape.value(f.f1).clone(), tape.value(f.f2).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckOptions};

    fn img(seed: u64, h: usize) -> Tensor {
        Tensor::uniform(&[h, h, 3], 0.1, 0.9, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let e = ImageEmbedder::new(3, 64);
        let x = img(0, 16);
        let a = e.embed(&x).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!(ImageEmbedder::new(3, 64).embed(&x).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let e = ImageEmbedder::new(3, 64);
        let mut x = img(0, 8);
        x.data_mut()[5] = 1.5;
        assert!(matches!(e.embed(&x), Err(Error::Input(_))));
        assert!(e.embed(&Tensor::zeros(&[8, 8, 2])).is_err());
    }

    #[test]
    fn single_pixel_perturbation_is_small() {
        let e = ImageEmbedder::new(3, 64);
        let x = img(1, 32);
        let mut y = x.clone();
        y.data_mut()[100] += 1e-3;
        let d = e.embed(&x).unwrap().sub(&e.embed(&y).unwrap()).unwrap().norm();
        assert!(d < 1e-1);
    }

    #[test]
    fn squared_norm_gradcheck() {
        let e = ImageEmbedder::new(3, 64);
        let r = check_gradients(
            &[img(2, 8)],
            |tape, v| {
                let vars = e.bind(tape);
                let f = e.forward(tape, &vars, v[0])?;
                tape.sq_norm(f.embedding)
            },
            &GradCheckOptions { max_coords: None, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn embedding_gradcheck() {
        let e = ImageEmbedder::new(4, 64);
        let r = check_gradients(
            &[img(3, 8)],
            |tape, v| {
                let vars = e.bind(tape);
                Ok(e.forward(tape, &vars, v[0])?.embedding)
            },
            &GradCheckOptions { max_coords: None, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
