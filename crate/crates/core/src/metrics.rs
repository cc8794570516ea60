//! Evaluation metrics: embedding similarity, SSIM and feature loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::content_feature_loss;
use crate::models::ImageEmbedder;
use crate::tensor::Tensor;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Cosine similarity of two unit embeddings.
pub fn similarity_score(t_emb: &Tensor, y_emb: &Tensor) -> Result<f64> {
    for (name, v) in [("t_emb", t_emb), ("y_emb", y_emb)] {
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{name} must be unit-norm, got norm {n}")));
        }
    }
    Ok(t_emb.dot(y_emb)?.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// Average per-channel SSIM instead of comparing luma.
    pub per_channel: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0, per_channel: false }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn plane(img: &Tensor, channel: Option<usize>) -> Vec<f64> {
    img.data()
        .chunks(3)
        .map(|p| match channel {
            Some(c) => p[c],
            None => 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2],
        })
        .collect()
}

/// Separable "valid" filtering of one plane.
fn filter(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, o: &SsimOptions) -> f64 {
    let k = gaussian_kernel(o.window, o.sigma);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter(a, h, w, &k);
    let (mu_b, ..) = filter(b, h, w, &k);
    let (aa, ..) = filter(&prod(|x, _| x * x), h, w, &k);
    let (bb, ..) = filter(&prod(|_, y| y * y), h, w, &k);
    let (ab, ..) = filter(&prod(|x, y| x * y), h, w, &k);
    let c1 = (o.k1 * o.dynamic_range).powi(2);
    let c2 = (o.k2 * o.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (oh * ow) as f64
}

/// Mean local SSIM over valid Gaussian windows.
pub fn ssim_with(x_img: &Tensor, y_img: &Tensor, o: &SsimOptions) -> Result<f64> {
    if x_img.shape() != y_img.shape() {
        return Err(Error::dim(format!("images differ in shape: {:?} vs {:?}", x_img.shape(), y_img.shape())));
    }
    if x_img.rank() != 3 || x_img.shape()[2] != 3 {
        return Err(Error::dim(format!("image must be [H, W, 3], got {:?}", x_img.shape())));
    }
    let (h, w) = (x_img.shape()[0], x_img.shape()[1]);
    if h < o.window || w < o.window || o.window == 0 {
        return Err(Error::Input(format!("image {h}x{w} is smaller than the {} px SSIM window", o.window)));
    }
    if o.per_channel {
        let s: f64 = (0..3)
            .map(|c| ssim_plane(&plane(x_img, Some(c)), &plane(y_img, Some(c)), h, w, o))
            .sum();
        Ok(s / 3.0)
    } else {
        Ok(ssim_plane(&plane(x_img, None), &plane(y_img, None), h, w, o))
    }
}

pub fn ssim(x_img: &Tensor, y_img: &Tensor) -> Result<f64> {
    ssim_with(x_img, y_img, &SsimOptions::default())
}

/// Same computation as the content loss, for reporting.
pub fn feature_loss_metric(embedder: &ImageEmbedder, x_img: &Tensor, y_img: &Tensor) -> Result<f64> {
    content_feature_loss(embedder, x_img, y_img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub pretrain_ms: f64,
    pub train_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clip_score_analog: f64,
    pub ssim: f64,
    pub feature_loss: f64,
    pub wall_time_ms: PhaseTimes,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let t = &self.wall_time_ms;
        let all = [self.clip_score_analog, self.ssim, self.feature_loss, t.pretrain_ms, t.train_ms, t.eval_ms];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("evaluation report has non-finite fields".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor {
        Tensor::uniform(&[24, 20, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn similarity_anchors() {
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(similarity_score(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity_score(&a, &b).unwrap(), 0.0);
        assert_eq!(similarity_score(&a, &a.scale(-1.0)).unwrap(), -1.0);
        assert!(matches!(similarity_score(&a, &a.scale(2.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (x, y) = (img(0), img(1));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        let s = ssim(&x, &y).unwrap();
        assert!((-1.0..1.0).contains(&s));
        let per = SsimOptions { per_channel: true, ..Default::default() };
        assert!((ssim_with(&x, &x, &per).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let x = Tensor::full(&[16, 16, 3], 0.5);
        let y = Tensor::full(&[16, 16, 3], 0.6);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_shape_errors() {
        assert!(ssim(&img(0), &Tensor::zeros(&[24, 21, 3])).is_err());
        assert!(ssim(&Tensor::zeros(&[8, 8, 3]), &Tensor::zeros(&[8, 8, 3])).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            clip_score_analog: 0.25,
            ssim: 0.9,
            feature_loss: 0.01,
            wall_time_ms: PhaseTimes { pretrain_ms: 1.0, train_ms: 2.0, eval_ms: 3.0 },
        };
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
