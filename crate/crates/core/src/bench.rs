//! Wall-time comparison of the two scans and the cross-attention baseline.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::EMBED_DIM;
use crate::ssm::{cross_attention, scan_parallel, scan_sequential, CrossAttentionParams, SsmConfig};
use crate::tensor::Tensor;

pub const LENGTHS: [usize; 4] = [64, 256, 1024, 4096];
pub const CSV_HEADER: &str = "impl,seq_len,channels,wall_time_ns";
/// Largest tolerated disagreement between the two scans before timing.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    ScanSequential,
    ScanParallel,
    CrossAttention,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::ScanSequential => "scan_sequential",
            Impl::ScanParallel => "scan_parallel",
            Impl::CrossAttention => "cross_attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub implementation: Impl,
    pub seq_len: usize,
    pub channels: usize,
    /// Fastest of the repetitions.
    pub wall_time_ns: u128,
}

fn fastest<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<u128> {
    let mut best = u128::MAX;
    for _ in 0..reps {
        let started = Instant::now();
        black_box(f()?);
        best = best.min(started.elapsed().as_nanos());
    }
    Ok(best)
}

/// Times every implementation at each length of [`LENGTHS`] not above
/// `max_len`. Scans run over `[L, channels, state_dim]` lanes; cross-attention
/// uses as many style tokens as queries.
pub fn bench_scan(max_len: usize, channels: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if max_len == 0 || channels == 0 || reps == 0 {
        return Err(Error::Input("max-len, channels and reps must be positive".into()));
    }
    let state_dim = SsmConfig::default().state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &len in LENGTHS.iter().filter(|&&l| l <= max_len) {
        let shape = [len, channels, state_dim];
        let a = Tensor::uniform(&shape, 0.0, 1.0, &mut rng).map(|u| (-u).exp());
        let b = Tensor::randn(&shape, 1.0, &mut rng);
        let seq = scan_sequential(&a, &b)?;
        let par = scan_parallel(&a, &b)?;
        let diff = seq.max_abs_diff(&par);
        if !(diff <= EQUIVALENCE_TOL) {
            return Err(Error::Numeric(format!(
                "scan_parallel differs from scan_sequential by {diff:e} at length {len}"
            )));
        }
        let push = |rows: &mut Vec<BenchRow>, implementation, ns| {
            rows.push(BenchRow { implementation, seq_len: len, channels, wall_time_ns: ns })
        };
        push(&mut rows, Impl::ScanSequential, fastest(reps, || scan_sequential(&a, &b))?);
        push(&mut rows, Impl::ScanParallel, fastest(reps, || scan_parallel(&a, &b))?);

        let attn = CrossAttentionParams::init(channels, EMBED_DIM, len, &mut rng);
        let x = Tensor::randn(&[len, channels], 1.0, &mut rng);
        let style = Tensor::randn(&[EMBED_DIM], 1.0, &mut rng).l2_normalized()?;
        let ns = fastest(reps, || {
            let mut tape = Tape::new();
            let vars = attn.bind(&mut tape, false);
            let xv = tape.constant(&x);
            let sv = tape.constant(&style);
            let y = cross_attention(&mut tape, &vars, xv, sv)?;
            Ok(tape.value(y).clone())
        })?;
        push(&mut rows, Impl::CrossAttention, ns);
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.implementation.name(), r.seq_len, r.channels, r.wall_time_ns);
    }
    out
}
