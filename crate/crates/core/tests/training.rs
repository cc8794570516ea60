use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmstyle::fixtures;
use ssmstyle::imageio::encode_ppm;
use ssmstyle::models::{pretrain_autoencoder, psnr, Embedders, PretrainConfig};
use ssmstyle::params::ParamSet;
use ssmstyle::train::{load_parts, parse_trace_csv, trace_csv, RunConfig, RunParts, Session};
use ssmstyle::Tensor;

fn parts() -> &'static RunParts {
    static PARTS: OnceLock<RunParts> = OnceLock::new();
    PARTS.get_or_init(|| load_parts(&RunConfig::default()).unwrap())
}

fn session(cfg: RunConfig) -> Session {
    let p = parts();
    Session::with_parts(cfg, p.content.clone(), p.autoencoder.clone()).unwrap()
}

fn short(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.max_epochs = epochs;
    cfg
}

#[test]
fn pretraining_reconstructs_a_random_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::uniform(&[64, 64, 3], 0.0, 1.0, &mut rng);
    let (ae, report) = pretrain_autoencoder(&img, &PretrainConfig::default()).unwrap();
    let p = psnr(&img, &ae.reconstruct(&img).unwrap()).unwrap();
    assert!(p > 25.0, "psnr {p}");
    assert!((p - report.final_psnr()).abs() < 1e-6);
}

#[test]
fn fixture_reconstruction_clears_25_db() {
    let p = parts();
    let got = psnr(&p.content, &p.autoencoder.reconstruct(&p.content).unwrap()).unwrap();
    assert!(got > 25.0, "psnr {got}");
}

#[test]
fn frozen_components_stay_bitwise_unchanged() {
    let mut s = session(short(6));
    let encoder = s.autoencoder.encoder.snapshot();
    let decoder = s.autoencoder.decoder.snapshot();
    let image: Vec<Tensor> = s.embedders.image.tensors().into_iter().cloned().collect();
    let text = s.embedders.text.table().clone();
    s.run().unwrap();
    assert!(s.autoencoder.encoder.bitwise_eq_snapshot(&encoder));
    let now: Vec<&Tensor> = s.embedders.image.tensors().into();
    assert!(now.iter().zip(&image).all(|(a, b)| a.bitwise_eq(b)));
    assert!(s.embedders.text.table().bitwise_eq(&text));
    assert_eq!(s.embedders, Embedders::new(s.config.seeds.model));
    // the decoder does train
    assert!(!s.autoencoder.decoder.bitwise_eq_snapshot(&decoder));
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let mut s = session(short(8));
        s.run().unwrap();
        (trace_csv(&s.state().trace), encode_ppm(&s.stylized().unwrap()).unwrap(), s.stylized().unwrap())
    };
    let (t1, b1, y1) = run();
    let (t2, b2, y2) = run();
    assert_eq!(t1, t2);
    assert_eq!(b1, b2);
    assert!(y1.bitwise_eq(&y2));
}

#[test]
fn conditioning_weights_move_after_one_step() {
    let mut s = session(short(1));
    let before = s.fusion.conditioning.clone();
    s.step().unwrap();
    let c = &s.fusion.conditioning;
    assert!(!c.weight.bitwise_eq(&before.weight) || !c.bias.bitwise_eq(&before.bias));
}

#[test]
fn multi_prompt_run_traces_every_epoch() {
    let mut cfg = short(4);
    cfg.prompts = vec![fixtures::STYLE_PROMPT.into(), fixtures::ALT_PROMPTS[0].into()];
    let mut s = session(cfg);
    assert_eq!(s.contexts.len(), 2);
    s.run().unwrap();
    let rows = parse_trace_csv(&trace_csv(&s.state().trace)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().enumerate().all(|(i, (e, v))| *e == i && v.iter().all(|x| x.is_finite())));
    // the blend differs from either prompt alone
    let single = session(short(1)).style_emb;
    assert!(s.style_emb.max_abs_diff(&single) > 1e-3);
}

#[test]
fn trace_matches_schedule_every_epoch() {
    let mut s = session(short(12));
    s.run().unwrap();
    let sched = s.config.schedule.clone();
    for r in &s.state().trace {
        assert_eq!(r.lr.to_bits(), sched.lr_at(r.epoch).to_bits());
        assert_eq!(r.content_weight.to_bits(), sched.content_weight_at(r.epoch).to_bits());
        assert_eq!((r.patches_total, r.patches_dropped), (16, 8));
    }
}
