//! Posterior simulation: NUTS for the factorization, Gibbs sweeps for the rest.

pub mod chain;
pub mod gibbs;
pub mod nuts;

pub use chain::{
    initial_state, run_chain, Chain, ChainConfig, ChainState, ChainStats, Draw, DrawStore,
    Shrinkage,
};
pub use gibbs::{SseState, ZWeights};
pub use nuts::{DualAverage, LogDensity, Nuts, NutsConfig, TransitionStats};
