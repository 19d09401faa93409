//! End-to-end acceptance suite. Each criterion prints a single PASS/FAIL
//! line with the measured numbers; failures also fail the test.
//!
//! The learning criteria share one synthesized corpus and one trained
//! easy-protocol model through lazily initialized fixtures, so the suite
//! runs the expensive pipeline exactly once regardless of test order.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tqsel::config::{ExperimentConfig, ModelKind};
use tqsel::corpus::make_toy_corpus;
use tqsel::evaluate::evaluate;
use tqsel::export::export_trajectory;
use tqsel::gradcheck;
use tqsel::manifest::Manifest;
use tqsel::synth::{synthesize_dataset, SynthRequest};
use tqsel::train::train;

use tqsel_core::features::{expected_tdoa, gcc_phat_stack, lag_axis};
use tqsel_core::objectives::{
    circular_mae, emd_loss, encode_doa_target, DoaTarget, NUM_BINS,
};
use tqsel_core::room::{
    render_static_source, sabine_absorption, sample_scene, schroeder_rt60, simulate_rir,
    Protocol,
};
use tqsel_core::signal::{StftConfig, Waveform};

const SR: u32 = 16_000;

fn report(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn work_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = std::env::temp_dir().join(format!("tqsel-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    })
}

/// 8-class toy corpus with 2 s clips, shared by the static-protocol criteria.
fn corpus_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = work_dir().join("corpus");
        make_toy_corpus(&d, 16, 2.0, SR, 100).unwrap();
        d
    })
}

fn easy_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelKind::ClipConcat,
        spatial_channels: vec![32, 64, 128, 256],
        max_epochs: 50,
        patience: 50,
        seed: 700,
        lr: 1e-3,
        sigma_sq: 200.0,
        batch_size: 4,
        ..ExperimentConfig::default()
    }
}

fn synth(corpus: &Path, protocol: Protocol, count: usize, seed: u64, split: &str, duration_s: f64, out: &Path) -> PathBuf {
    let c = tqsel::corpus::Corpus::load(corpus).unwrap();
    let req = SynthRequest { duration_s, ..SynthRequest::new(protocol, count, seed, split) };
    synthesize_dataset(&c, &req, SR, out).unwrap();
    out.join("manifest.jsonl")
}

struct LearnedRun {
    test_mae: f64,
    train_secs: f64,
    epochs_run: usize,
}

fn run_protocol(tag: &str, protocol: Protocol) -> LearnedRun {
    let base = work_dir().join(tag);
    let (s_train, s_eval, s_test) = match protocol {
        Protocol::TwoDirectional => (600, 601, 602),
        _ => (500, 501, 502),
    };
    let train_m = synth(corpus_dir(), protocol, 512, s_train, "train", 2.0, &base.join("train"));
    let eval_m = synth(corpus_dir(), protocol, 64, s_eval, "eval", 2.0, &base.join("eval"));
    let test_m = synth(corpus_dir(), protocol, 64, s_test, "test", 2.0, &base.join("test"));
    let cfg = easy_config();
    let t0 = Instant::now();
    let outcome = train(&cfg, &train_m, &eval_m, &base.join("run")).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let rep = evaluate(&outcome.ckpt_path, &test_m, None).unwrap();
    LearnedRun { test_mae: rep.mae_deg, train_secs, epochs_run: outcome.epochs_run }
}

fn easy_run() -> &'static LearnedRun {
    static RUN: OnceLock<LearnedRun> = OnceLock::new();
    RUN.get_or_init(|| run_protocol("easy", Protocol::OneDirectionalOneAdditive))
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let results = gradcheck::run_suite().unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0f64, f64::max);
    let ok = results.len() >= 20 && worst <= 1e-4 && secs < 120.0;
    report(
        1,
        ok,
        &format!("{} checks, worst rel err {worst:.2e}, {secs:.1} s", results.len()),
    );
}

#[test]
fn criterion_2_tdoa_oracle() {
    let t0 = Instant::now();
    let mut hits = 0usize;
    let mut total = 0usize;
    for seed in 0..100u64 {
        let mut scene = sample_scene(seed, Protocol::OneDirectionalOneAdditive, 1.0).unwrap();
        scene.room = scene.room.clone().with_max_image_order(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let dry: Vec<f64> = (0..SR as usize).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let dry = Waveform::mono(dry, SR).unwrap();
        let pos = scene.directional_position_at(0.0).unwrap();
        let rir = simulate_rir(&scene.room, pos, &scene.array, SR).unwrap();
        let wet = render_static_source(&dry, &rir).unwrap();
        let g = gcc_phat_stack(&wet, StftConfig::new(1024, 640).unwrap(), 96).unwrap();
        let axis = lag_axis(96);
        for pair in 0..g.num_pairs {
            let exp = expected_tdoa(&scene, g.pair_index[pair], 0.0, SR).unwrap();
            for f in 0..g.num_frames {
                let sl = g.frame_slice(pair, f);
                let best = sl
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                total += 1;
                if (axis[best] as f64 - exp).abs() <= 1.0 {
                    hits += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let rate = hits as f64 / total as f64;
    let ok = rate >= 0.95 && secs < 60.0;
    report(
        2,
        ok,
        &format!("{hits}/{total} frames within +-1 sample ({:.1}%), {secs:.1} s", rate * 100.0),
    );
}

#[test]
fn criterion_3_rir_fidelity() {
    let mut worst = 0.0f64;
    let mut ok_rooms = 0usize;
    let mut n = 0usize;
    let mut seed = 0u64;
    while n < 20 {
        seed += 1;
        let mut scene = sample_scene(seed ^ 0x5555, Protocol::OneDirectionalOneAdditive, 1.0).unwrap();
        let (alpha, clamped) = sabine_absorption(&scene.room);
        if alpha >= 0.6 || clamped {
            continue;
        }
        n += 1;
        // enough image order for the decay to reach the -35 dB fit point
        scene.room = scene.room.clone().with_max_image_order(30);
        let pos = scene.directional_position_at(0.0).unwrap();
        let rir = simulate_rir(&scene.room, pos, &scene.array, SR).unwrap();
        let rel = match schroeder_rt60(&rir.taps[0], SR) {
            Some(est) => (est - scene.room.rt60).abs() / scene.room.rt60,
            None => 1.0,
        };
        worst = worst.max(rel);
        if rel <= 0.2 {
            ok_rooms += 1;
        }
    }
    report(
        3,
        ok_rooms == 20,
        &format!("{ok_rooms}/20 rooms within 20%, worst deviation {:.1}%", worst * 100.0),
    );
}

#[test]
fn criterion_4_objective_suite() {
    // normalization
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let y = encode_doa_target(
            &DoaTarget::with_sigma_sq(rng.gen_range(0.0..360.0), rng.gen_range(1.0..400.0))
                .unwrap(),
        );
        let sum: f64 = y.probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "target sums to {sum}");
    }
    // rotation equivariance
    let base = encode_doa_target(&DoaTarget::new(37.0).unwrap());
    for k in [1usize, 90, 183, 359] {
        let shifted = encode_doa_target(&DoaTarget::new((37.0 + k as f64) % 360.0).unwrap());
        for i in 0..NUM_BINS {
            let d = (base.probs[i] - shifted.probs[(i + k) % NUM_BINS]).abs();
            assert!(d <= 1e-12, "rotation by {k} deviates by {d}");
        }
    }
    // loss bounds
    for trial in 0..20 {
        let y = encode_doa_target(&DoaTarget::new(rng.gen_range(0.0..360.0)).unwrap());
        let logits: Vec<f64> = (0..NUM_BINS).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut tape = tqsel_core::autograd::Tape::<f64>::new();
        let l = tape.leaf(&[NUM_BINS], logits, false).unwrap();
        let loss_var = emd_loss(&mut tape, l, &y).unwrap();
        let loss = tape.value_scalar(loss_var);
        assert!((0.0..=2.0 + 1e-12).contains(&loss), "trial {trial}: loss {loss}");
    }
    // circular MAE unit cases
    assert_eq!(circular_mae(&[359.0], &[1.0]).unwrap(), 2.0);
    assert_eq!(circular_mae(&[0.0], &[180.0]).unwrap(), 180.0);
    // random baseline
    let n = 100_000;
    let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..360.0)).collect();
    let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..360.0)).collect();
    let baseline = circular_mae(&pred, &gt).unwrap();
    let ok = (baseline - 90.0).abs() <= 2.0;
    report(
        4,
        ok,
        &format!("normalization, equivariance, bounds, unit cases ok; random baseline {baseline:.2} deg"),
    );
}

#[test]
fn criterion_5_easy_protocol_learning() {
    let run = easy_run();
    let ok = run.test_mae <= 15.0 && run.train_secs < 1_800.0 && run.epochs_run <= 50;
    report(
        5,
        ok,
        &format!(
            "test MAE {:.2} deg (<= 15) after {} epochs in {:.0} s (vs 90 deg random baseline)",
            run.test_mae, run.epochs_run, run.train_secs
        ),
    );
}

#[test]
fn criterion_6_hard_protocol_ordering() {
    let easy = easy_run();
    let hard = run_protocol("hard", Protocol::TwoDirectional);
    let ok = hard.test_mae <= 45.0 && hard.test_mae > easy.test_mae;
    report(
        6,
        ok,
        &format!(
            "two-directional test MAE {:.2} deg (<= 45) > easy MAE {:.2} deg",
            hard.test_mae, easy.test_mae
        ),
    );
}

#[test]
fn criterion_7_moving_pipeline() {
    let base = work_dir().join("moving");
    let corpus10 = base.join("corpus10");
    make_toy_corpus(&corpus10, 4, 10.0, SR, 300).unwrap();
    let train_m = synth(&corpus10, Protocol::Moving, 128, 700, "train", 10.0, &base.join("train"));
    let eval_m = synth(&corpus10, Protocol::Moving, 8, 701, "eval", 10.0, &base.join("eval"));
    let cfg = ExperimentConfig {
        model: ModelKind::FrameCrossAttn,
        spatial_channels: vec![16, 32, 64, 128],
        d_model: 64,
        heads: 4,
        d_ff: 128,
        n_enc: 1,
        n_dec: 1,
        batch_size: 8,
        lr: 1e-3,
        sigma_sq: 200.0,
        max_epochs: 2,
        seed: 700,
        ..ExperimentConfig::default()
    };
    // train() aborts with an error on any non-finite loss, so success here
    // is the no-NaN check
    let outcome = train(&cfg, &train_m, &eval_m, &base.join("run")).unwrap();
    assert!(outcome.first_epoch_loss.is_finite());

    let manifest = Manifest::load(&train_m).unwrap();
    let record = &manifest.records[0];
    let csv_path = base.join("traj.csv");
    let rows = export_trajectory(&outcome.ckpt_path, &train_m, &record.example_id, &csv_path).unwrap();

    let gt = record.azimuth_series_deg.as_ref().unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut exact = true;
    let mut csv_rows = 0usize;
    for (k, line) in csv.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let g: f64 = cols[1].parse().unwrap();
        if g.to_bits() != gt[k].to_bits() {
            exact = false;
        }
        csv_rows += 1;
    }
    let ok = rows == 100 && csv_rows == 100 && exact;
    report(
        7,
        ok,
        &format!(
            "frame model trained {} epochs without NaN, exported {rows} rows, gt bit-exact: {exact}",
            outcome.epochs_run
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let base = work_dir().join("determinism");
    let protocol = Protocol::OneDirectionalOneAdditive;
    let m1 = synth(corpus_dir(), protocol, 512, 500, "train", 2.0, &base.join("a"));
    let m2 = synth(corpus_dir(), protocol, 512, 500, "train", 2.0, &base.join("b"));
    let bytes_equal = std::fs::read(&m1).unwrap() == std::fs::read(&m2).unwrap();

    let eval_m = synth(corpus_dir(), protocol, 16, 501, "eval", 2.0, &base.join("eval"));
    let cfg = ExperimentConfig { max_epochs: 1, ..easy_config() };
    let o1 = train(&cfg, &m1, &eval_m, &base.join("run_a")).unwrap();
    let o2 = train(&cfg, &m2, &eval_m, &base.join("run_b")).unwrap();
    let loss_diff = (o1.first_epoch_loss - o2.first_epoch_loss).abs();
    let ok = bytes_equal && loss_diff < 1e-12;
    report(
        8,
        ok,
        &format!("manifest bytes identical: {bytes_equal}, epoch-1 loss diff {loss_diff:.1e}"),
    );
}
