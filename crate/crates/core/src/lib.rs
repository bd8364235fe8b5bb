//! Zero-sum discounted stochastic games: exact and adversarial Nash solvers,
//! and reward recovery from sub-optimal demonstrations.

pub mod baselines;
pub mod chase;
pub mod config;
pub mod error;
pub mod experiment;
pub mod game;
pub mod irl;
pub mod lp;
pub mod metrics;
pub mod mlp;
pub mod nash;
pub mod oracle;
pub mod report;
pub mod rng;

pub use baselines::{BirlConfig, DirlConfig, QpNashConfig};
pub use chase::{ChaseConfig, ChaseGame, ChaseState, Move};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::Experiment;
pub use game::{Game, Policy, Side, TableGame, Trajectory};
pub use irl::{DemoConfig, DemoSet, IrlConfig};
pub use lp::{MatrixGame, MatrixSolution};
pub use mlp::{Adam, AdamConfig, Head, Mlp};
pub use nash::{GameReward, NashConfig, NashTrainer, RewardSource};
pub use oracle::{TabularModel, TabularPolicy, ValueTable};
pub use report::MetricsLog;
pub use rng::RngStream;
