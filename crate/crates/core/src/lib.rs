//! Online identification of cost parameters in jointly convex generalized
//! Nash games from noisy observations of their variational equilibria.

pub mod batch;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod game;
pub mod kkt;
pub mod linalg;
pub mod online;
pub mod qp;

pub use error::{Error, Result};
pub use forward::{cournot_closed_form, observe, solve_ve, EquilibriumResult, Observation};
pub use game::{cournot_game, CournotModel, GameModel, ParametricGame, PolyhedralGame, Signal, ThetaBox};
pub use kkt::{assemble_kkt, loss, reduced_loss, subgradient, KktData, LossValue};
pub use online::{learning_rate, project_theta, run_online, update_step, IdentifierState, TrajectoryRecord, UpdateResult};
pub use batch::{batch_solve, bound_check, deviation_curve, prefix_batch, regret, BatchOptions, RegretReport};
pub use experiment::{compare_learning_rates, ingest_stream, run_experiment, sample_signal, ExperimentConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/game-model.md")]
    mod game_model {}
    #[doc = include_str!("../../../book/src/forward-solver.md")]
    mod forward_solver {}
    #[doc = include_str!("../../../book/src/kkt-loss.md")]
    mod kkt_loss {}
    #[doc = include_str!("../../../book/src/online-identifier.md")]
    mod online_identifier {}
    #[doc = include_str!("../../../book/src/batch-reference.md")]
    mod batch_reference {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
