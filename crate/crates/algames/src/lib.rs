//! Game-theoretic trajectory optimization for multi-player dynamic games with
//! shared constraints.
//!
//! The solver finds open-loop generalized Nash equilibrium trajectories: each
//! player minimizes its own cost subject to joint dynamics and a shared set of
//! inequality/equality constraints (collision avoidance, road boundaries,
//! control bounds). Constraints are handled with an augmented Lagrangian whose
//! multipliers and penalties are shared across players; the coupled first-order
//! conditions are solved as a root-finding problem with a regularized
//! quasi-Newton iteration and a backtracking line search.
//!
//! Modules:
//! - [`dynamics`]: vehicle/robot models, RK4 stepping, analytic linearization.
//! - [`game`]: costs, constraints, and their derivatives for a game instance.
//! - [`alcore`]: augmented Lagrangian state, residual and KKT assembly.
//! - [`newton`]: the root-finding solver (dense and stage-structured linear
//!   algebra, line search, inner/outer loops).
//! - [`baselines`]: iterated best response, pure quadratic penalty, and
//!   predict-then-plan single-agent planning.
//! - [`analysis`]: equilibrium structure tools (static quadratic games,
//!   augmented KKT nullspace, PCA, normalized-equilibrium check, multistart).
//! - [`mpc`]: receding-horizon execution with warm starts and plant noise.
//! - [`scenarios`]: driving/drone scenario templates and initial-state sampling.
//! - [`cli`]: experiment configs, batch runners, and plot-data emission.

pub mod alcore;
pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod mpc;
pub mod newton;
pub mod numdiff;
pub mod scenarios;

pub use error::GameError;
