//! Joint synthesis of parameter-dependent controllers and Lyapunov
//! certificates for nonlinear parameter-varying systems.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod diff;
pub mod error;
pub mod networks;
pub mod systems;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};

/// Cap the rayon worker count from NEURAL_NPV_THREADS, when set. Must be
/// called before any parallel work; later calls are ignored by rayon.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("NEURAL_NPV_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
