//! First-order linear recurrences `h_t = a_t * h_{t-1} + b_t` (with `h_0 = 0`)
//! evaluated independently on every lane of a `[L, ...]` tensor.

use rayon::prelude::*;

use super::params::ScanMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One step of the recurrence as an affine map `h -> a * h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: ScanElement = ScanElement { a: 1.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Self {
        ScanElement { a, b }
    }

    /// Composition applying `self` first, then `later`.
    #[inline]
    pub fn combine(self, later: ScanElement) -> ScanElement {
        ScanElement {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

fn lanes_of(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "scan: decay {:?} and drive {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.rank() == 0 {
        return Err(Error::dim("scan needs a leading time axis"));
    }
    let len = a.shape()[0];
    Ok((len, a.numel() / len))
}

/// Reference left-to-right evaluation.
pub fn scan_sequential(a_seq: &Tensor, b_seq: &Tensor) -> Result<Tensor> {
    let (len, lanes) = lanes_of(a_seq, b_seq)?;
    let h = scan_lanes(a_seq.data(), b_seq.data(), len, lanes, ScanMode::Sequential);
    Tensor::new(a_seq.shape(), h)
}

/// Blelloch up-sweep/down-sweep evaluation over [`ScanElement`]s.
pub fn scan_parallel(a_seq: &Tensor, b_seq: &Tensor) -> Result<Tensor> {
    let (len, lanes) = lanes_of(a_seq, b_seq)?;
    let h = scan_lanes(a_seq.data(), b_seq.data(), len, lanes, ScanMode::Parallel);
    Tensor::new(a_seq.shape(), h)
}

/// Scans `lanes` interleaved sequences stored time-major (`[len, lanes]`).
pub(crate) fn scan_lanes(a: &[f64], b: &[f64], len: usize, lanes: usize, mode: ScanMode) -> Vec<f64> {
    debug_assert_eq!(a.len(), len * lanes);
    match mode {
        ScanMode::Sequential => {
            let mut h = vec![0.0; len * lanes];
            h[..lanes].copy_from_slice(&b[..lanes]);
            for t in 1..len {
                let (prev, cur) = h.split_at_mut(t * lanes);
                let prev = &prev[(t - 1) * lanes..];
                let cur = &mut cur[..lanes];
                let at = &a[t * lanes..(t + 1) * lanes];
                let bt = &b[t * lanes..(t + 1) * lanes];
                for k in 0..lanes {
                    cur[k] = at[k] * prev[k] + bt[k];
                }
            }
            h
        }
        ScanMode::Parallel => {
            let padded = len.next_power_of_two();
            // lane-major working buffers, one padded sequence per lane
            let mut lane_h = vec![0.0; padded * lanes];
            let run = |(lane, out): (usize, &mut [f64])| {
                let mut elems: Vec<ScanElement> = (0..padded)
                    .map(|t| {
                        if t < len {
                            ScanElement::new(a[t * lanes + lane], b[t * lanes + lane])
                        } else {
                            ScanElement::IDENTITY
                        }
                    })
                    .collect();
                let original = elems.clone();
                blelloch_exclusive(&mut elems);
                for t in 0..len {
                    out[t] = elems[t].combine(original[t]).b;
                }
            };
            if padded * lanes >= 1 << 15 {
                lane_h.par_chunks_mut(padded).enumerate().for_each(run);
            } else {
                lane_h.chunks_mut(padded).enumerate().for_each(run);
            }
            let mut h = vec![0.0; len * lanes];
            for (lane, seq) in lane_h.chunks(padded).enumerate() {
                for t in 0..len {
                    h[t * lanes + lane] = seq[t];
                }
            }
            h
        }
    }
}

/// In-place exclusive scan; `elems.len()` must be a power of two.
fn blelloch_exclusive(elems: &mut [ScanElement]) {
    let n = elems.len();
    debug_assert!(n.is_power_of_two());
    let mut stride = 1;
    while stride < n {
        let step = stride * 2;
        let mut i = step - 1;
        while i < n {
            elems[i] = elems[i - stride].combine(elems[i]);
            i += step;
        }
        stride = step;
    }
    elems[n - 1] = ScanElement::IDENTITY;
    while stride > 1 {
        let half = stride / 2;
        let mut i = stride - 1;
        while i < n {
            let left = elems[i - half];
            elems[i - half] = elems[i];
            elems[i] = elems[i].combine(left);
            i += stride;
        }
        stride = half;
    }
}

/// Reverse-time adjoint of the recurrence: `g_t = gh_t + a_{t+1} * g_{t+1}`.
pub(crate) fn scan_lanes_reverse(a: &[f64], gh: &[f64], len: usize, lanes: usize, mode: ScanMode) -> Vec<f64> {
    let mut ra = vec![1.0; len * lanes];
    let mut rb = vec![0.0; len * lanes];
    for s in 0..len {
        let t = len - 1 - s;
        rb[s * lanes..(s + 1) * lanes].copy_from_slice(&gh[t * lanes..(t + 1) * lanes]);
        if s > 0 {
            ra[s * lanes..(s + 1) * lanes].copy_from_slice(&a[(t + 1) * lanes..(t + 2) * lanes]);
        }
    }
    let rh = scan_lanes(&ra, &rb, len, lanes, mode);
    let mut out = vec![0.0; len * lanes];
    for s in 0..len {
        let t = len - 1 - s;
        out[t * lanes..(t + 1) * lanes].copy_from_slice(&rh[s * lanes..(s + 1) * lanes]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(vals: &[f64]) -> Tensor {
        Tensor::new(&[vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn unit_decay_is_cumsum() {
        let a = seq(&[1.0; 5]);
        let b = seq(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        for h in [scan_sequential(&a, &b).unwrap(), scan_parallel(&a, &b).unwrap()] {
            assert_eq!(h.data(), &[1.0, 3.0, 6.0, 10.0, 15.0]);
        }
    }

    #[test]
    fn zero_decay_is_drive() {
        let a = seq(&[0.0; 4]);
        let b = seq(&[0.5, -1.0, 2.0, 3.0]);
        assert_eq!(scan_sequential(&a, &b).unwrap().data(), b.data());
        assert_eq!(scan_parallel(&a, &b).unwrap().data(), b.data());
    }

    #[test]
    fn hand_recurrence() {
        let a = seq(&[0.5, 0.5]);
        let b = seq(&[1.0, 1.0]);
        assert_eq!(scan_sequential(&a, &b).unwrap().data(), &[1.0, 1.5]);
        assert_eq!(scan_parallel(&a, &b).unwrap().data(), &[1.0, 1.5]);
    }

    #[test]
    fn single_step_and_counting() {
        let h = scan_parallel(&seq(&[0.3]), &seq(&[0.7])).unwrap();
        assert_eq!(h.data(), &[0.7]);
        let h = scan_parallel(&seq(&[1.0; 64]), &seq(&[1.0; 64])).unwrap();
        for (t, v) in h.data().iter().enumerate() {
            assert_eq!(*v, (t + 1) as f64);
        }
    }

    #[test]
    fn reverse_adjoint_matches_direct_sum() {
        // g_t = sum_{s >= t} (prod_{t < r <= s} a_r) gh_s
        let a = [0.9, 0.5, 0.25, 0.8];
        let gh = [1.0, -2.0, 0.5, 3.0];
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let g = scan_lanes_reverse(&a, &gh, 4, 1, mode);
            for t in 0..4 {
                let mut expect = 0.0;
                for s in t..4 {
                    let p: f64 = a[t + 1..=s].iter().product();
                    expect += p * gh[s];
                }
                assert!((g[t] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(scan_sequential(&seq(&[1.0, 2.0]), &seq(&[1.0])).is_err());
    }
}
