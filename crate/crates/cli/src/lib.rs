//! Dataset synthesis, training, and evaluation pipeline on top of
//! `tqsel-core`.

pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod export;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod synth;
pub mod train;

/// Cap the rayon pool at `TQSEL_THREADS` if set. Safe to call repeatedly;
/// only the first initialization wins.
pub fn init_threads() {
    if let Ok(v) = std::env::var("TQSEL_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
