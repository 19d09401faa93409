//! Diagnostic: matched-filter selection oracle on a two-directional manifest.
//! Usage: oracle <manifest.jsonl> [deterministic|random]

use std::f64::consts::TAU;

use tqsel::corpus::TOY_CLASSES;
use tqsel::manifest::Manifest;
use tqsel_core::features::gcc_phat_stack;
use tqsel_core::room::{sample_scene, Protocol};
use tqsel_core::signal::StftConfig;
use tqsel_core::wav::read_wav;

const COMB_PERIOD: f64 = 800.0;
const COMB_TOOTH: f64 = 100.0;
const SR: f64 = 16_000.0;
const C: f64 = 343.0;

fn comb_teeth(class: usize) -> Vec<f64> {
    let offset = class as f64 * COMB_TOOTH;
    let f_max = SR / 2.0 - 200.0;
    let mut teeth = Vec::new();
    let mut k = 0.0;
    loop {
        let base = k * COMB_PERIOD + offset;
        if base + COMB_TOOTH > f_max {
            break;
        }
        if base >= 400.0 {
            teeth.push(base);
        }
        k += 1.0;
    }
    teeth
}

/// Lag-domain ripple template of a class support, evaluated at dt seconds.
/// "random" mode integrates over each 100 Hz tooth; "deterministic" sums the
/// fixed 4-per-tooth partial grid.
fn template(class: usize, dt: f64, deterministic: bool) -> f64 {
    let teeth = comb_teeth(class);
    let mut acc = 0.0;
    if deterministic {
        for &base in &teeth {
            for off in [12.5, 37.5, 62.5, 87.5] {
                acc += (TAU * (base + off) * dt).cos();
            }
        }
        let anchor = teeth[teeth.len() / 3] + 50.0;
        acc += (TAU * anchor * dt).cos();
    } else {
        for &base in &teeth {
            if dt.abs() < 1e-12 {
                acc += COMB_TOOTH;
            } else {
                acc += ((TAU * (base + COMB_TOOTH) * dt).sin() - (TAU * base * dt).sin())
                    / (TAU * dt);
            }
        }
    }
    acc
}

fn circ(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn main() {
    let mut args = std::env::args().skip(1);
    let manifest_path = args.next().expect("manifest path");
    let deterministic = args.next().as_deref() != Some("random");
    let m = Manifest::load(&manifest_path).unwrap();
    let cfg = StftConfig::new(1024, 640).unwrap();

    let mut errs_q = Vec::new();
    let mut errs_any = Vec::new();
    for r in &m.records {
        let scene = sample_scene(r.scene_seed, Protocol::TwoDirectional, 2.0).unwrap();
        let qclass = TOY_CLASSES
            .iter()
            .position(|&(_, c, _)| c == r.query_text)
            .unwrap();
        let w = read_wav(m.audio_path(r)).unwrap();
        let g = gcc_phat_stack(&w, cfg, 96).unwrap();
        let cen = scene.array.centroid();
        let mics = &scene.array.mic_positions;
        // frame-averaged map per pair
        let mut avg = vec![vec![0.0f64; g.num_lags]; g.num_pairs];
        for p in 0..g.num_pairs {
            for t in 0..g.num_frames {
                for l in 0..g.num_lags {
                    avg[p][l] += g.value(p, t, l);
                }
            }
            for v in &mut avg[p] {
                *v /= g.num_frames as f64;
            }
        }
        let score_at = |class: usize, az: f64| -> f64 {
            let dir = [az.to_radians().cos(), az.to_radians().sin()];
            let pos = [cen[0] + 2.0 * dir[0], cen[1] + 2.0 * dir[1], cen[2]];
            let mut s = 0.0;
            for (p, &(pm, pn)) in g.pair_index.iter().enumerate() {
                let d = |a: [f64; 3], b: [f64; 3]| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                };
                let tau = (d(pos, mics[pn]) - d(pos, mics[pm])) * SR / C;
                for (l, &lag) in g.lag_axis.iter().enumerate() {
                    let dt = (lag as f64 - tau) / SR;
                    s += avg[p][l] * template(class, dt, deterministic);
                }
            }
            s
        };
        let best_az = |class: usize| -> f64 {
            let mut best = (f64::MIN, 0.0);
            let mut az = 0.0;
            while az < 360.0 {
                let s = score_at(class, az);
                if s > best.0 {
                    best = (s, az);
                }
                az += 1.0;
            }
            best.1
        };
        let gt = r.azimuth_deg.unwrap();
        let pred_q = best_az(qclass);
        errs_q.push(circ(pred_q, gt));
        // class-agnostic ridge finder: best over all class templates
        let mut best = (f64::MIN, 0.0);
        for c in 0..TOY_CLASSES.len() {
            let az = best_az(c);
            let s = score_at(c, az);
            if s > best.0 {
                best = (s, az);
            }
        }
        errs_any.push(circ(best.1, gt));
    }
    let mae = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let frac20 = |v: &[f64]| v.iter().filter(|&&e| e < 20.0).count() as f64 / v.len() as f64;
    println!(
        "query-template oracle: MAE {:.2} deg, {:.0}% within 20 deg ({} examples)",
        mae(&errs_q),
        100.0 * frac20(&errs_q),
        errs_q.len()
    );
    println!(
        "best-any-class control: MAE {:.2} deg, {:.0}% within 20 deg",
        mae(&errs_any),
        100.0 * frac20(&errs_any)
    );
}
