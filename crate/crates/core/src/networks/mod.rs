//! Parameter-dependent Lyapunov function and bounded controller built on
//! the differentiation engine, and their closed-loop evaluation.

mod closed_loop;
mod controller;
mod lyapunov;

pub use closed_loop::{
    AttackMode, ClScratch, ClosedLoop, GraphScratch, SampleGraph, TapedNets,
};
pub use controller::{CtrlScratch, PdController};
pub use lyapunov::{LyapScratch, LyapunovFunction};
