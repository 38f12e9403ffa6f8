//! Task-oriented joint source-channel coding over a simulated wireless link.
//!
//! The crate covers the constellation geometry and its quantizer, the AWGN
//! and block-Rayleigh channel, small dense networks with analytic gradients,
//! the variational objective, a synthetic task environment with a frozen
//! agent, and the experiment runner that ties them together.

pub mod channel;
pub mod constellation;
pub mod error;
pub mod experiment;
pub mod neural;
pub mod objectives;
pub mod rng;
pub mod task_env;

pub use channel::{ChannelConfig, ChannelKind};
pub use constellation::{ComplexSymbol, Constellation, SymbolBlock};
pub use error::{Error, Result};
pub use neural::{GaussianEncoder, GaussianLatent, Mlp, NetworkSpec};
pub use objectives::{MCConfig, VibWeights};
pub use task_env::{Dataset, DatasetSpec, FrozenAgent};
