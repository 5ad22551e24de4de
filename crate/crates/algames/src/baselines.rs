//! Comparison solvers built on the same Newton core: iterative best
//! response, a pure quadratic-penalty method (fixed ρ, no multipliers), and
//! the non-game-theoretic predict-then-plan planner.

use nalgebra::DVector;

use crate::alcore::{AlState, GameView, PrimalDualPoint, RowFilter};
use crate::dynamics::ModelKind;
use crate::error::GameError;
use crate::game::GameProblem;
use crate::newton::{
    default_init, solve_view, SolveReport, SolverOptions, Status, WarmStart,
};

/// Best response of player ν with everyone else's controls frozen.
///
/// `fixed_others` is the full player-major control vector; the ν block
/// doubles as the initial guess for U^ν. All constraint rows are kept.
pub fn single_player_solve(
    p: &GameProblem,
    nu: usize,
    fixed_others: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveReport, GameView), GameError> {
    let view = GameView::single(p, nu, fixed_others.clone(), RowFilter::All)?;
    let (pt, report, _) = solve_view(p, &view, None, None, opts)?;
    Ok((pt, report, view))
}

#[derive(Debug, Clone)]
pub struct IbrOptions {
    pub max_rounds: usize,
    /// Round-to-round ∞-norm change in U below which IBR declares a fixed
    /// point.
    pub tol_u: f64,
    /// Player visitation order; defaults to 0..M.
    pub order: Option<Vec<usize>>,
}

impl Default for IbrOptions {
    fn default() -> Self {
        IbrOptions {
            max_rounds: 20,
            tol_u: 1e-4,
            order: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IbrReport {
    pub rounds: usize,
    /// Max ∞-norm control change per round.
    pub deltas: Vec<f64>,
    /// Full-game stationarity residual after each round (λ = 0 metric).
    pub residual_l1: Vec<f64>,
    pub inner_iters_total: usize,
    pub lin_solves_total: usize,
    pub converged: bool,
}

/// Full-game ‖G‖₁ at (X, U, μ) with λ = 0 and unit penalties: a solver-
/// agnostic stationarity metric usable on both IBR and full-game solutions.
pub fn gne_residual(
    p: &GameProblem,
    x_traj: &DVector<f64>,
    u_full: &DVector<f64>,
    mu: &[DVector<f64>],
) -> Result<f64, GameError> {
    let view = GameView::full(p);
    let t = &view.traj;
    let us: Vec<DVector<f64>> = (0..p.players)
        .map(|nu| u_full.rows(nu * t.m_bar_per(), t.m_bar_per()).into_owned())
        .collect();
    let pt = PrimalDualPoint::pack(&view, x_traj, &us, mu)?;
    let al = AlState::new(&view, 1.0);
    Ok(crate::alcore::residual(p, &view, &pt.y, &al)?.norm1())
}

/// Round-robin best response until the strategies stop changing.
///
/// Returns a full-view primal-dual point assembled from the last subsolves
/// (X from the final best response, μ^ν from each player's own solve).
pub fn ibr_solve(
    p: &GameProblem,
    opts: &SolverOptions,
    ibr: &IbrOptions,
) -> Result<(PrimalDualPoint, IbrReport), GameError> {
    if p.players < 2 {
        return Err(GameError::InvalidArgument {
            arg: "players",
            reason: "iterative best response needs at least two players".into(),
        });
    }
    let order = match &ibr.order {
        Some(o) => {
            let mut seen = vec![false; p.players];
            for &nu in o {
                if nu >= p.players || seen[nu] {
                    return Err(GameError::InvalidArgument {
                        arg: "order",
                        reason: "must be a permutation of the players".into(),
                    });
                }
                seen[nu] = true;
            }
            o.clone()
        }
        None => (0..p.players).collect(),
    };
    let t = p.layout();
    let mut u_full = DVector::zeros(t.m_bar());
    let mut x_last = {
        let view = GameView::full(p);
        default_init(p, &view)?.rows(0, t.n_bar()).into_owned()
    };
    let mut mus = vec![DVector::zeros(t.n_bar()); p.players];
    let mut report = IbrReport {
        rounds: 0,
        deltas: Vec::new(),
        residual_l1: Vec::new(),
        inner_iters_total: 0,
        lin_solves_total: 0,
        converged: false,
    };

    for _ in 0..ibr.max_rounds {
        report.rounds += 1;
        let mut delta: f64 = 0.0;
        for &nu in &order {
            let (pt, rep, view) = single_player_solve(p, nu, &u_full, opts)?;
            report.inner_iters_total += rep.inner_iters_total;
            report.lin_solves_total += rep.lin_solves_total;
            let u_new = pt.y.rows(view.y_u_off(0), t.m_bar_per()).into_owned();
            let u_old = u_full.rows(nu * t.m_bar_per(), t.m_bar_per()).into_owned();
            delta = delta.max((&u_new - &u_old).amax());
            u_full
                .rows_mut(nu * t.m_bar_per(), t.m_bar_per())
                .copy_from(&u_new);
            x_last = pt.y.rows(0, t.n_bar()).into_owned();
            mus[nu] = pt.y.rows(view.y_mu_off(0), t.n_bar()).into_owned();
        }
        report.deltas.push(delta);
        report
            .residual_l1
            .push(gne_residual(p, &x_last, &u_full, &mus)?);
        if delta < ibr.tol_u {
            report.converged = true;
            break;
        }
    }

    let view = GameView::full(p);
    let us: Vec<DVector<f64>> = (0..p.players)
        .map(|nu| u_full.rows(nu * t.m_bar_per(), t.m_bar_per()).into_owned())
        .collect();
    let pt = PrimalDualPoint::pack(&view, &x_last, &us, &mus)?;
    Ok((pt, report))
}

#[derive(Debug, Clone)]
pub struct PenaltyOptions {
    /// Fixed penalty weight; never grown, no multiplier updates.
    pub rho_fixed: f64,
    pub solver: SolverOptions,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        PenaltyOptions {
            rho_fixed: 1.0,
            solver: SolverOptions::default(),
        }
    }
}

/// Pure quadratic-penalty solve: the same Newton machinery with λ ≡ 0 (which
/// reduces the activation rule to "0 if C_k < 0"), no dual ascent, and no
/// penalty schedule. Exposes the violation floor attainable at a given ρ.
pub fn penalty_solve(
    p: &GameProblem,
    popts: &PenaltyOptions,
) -> Result<(PrimalDualPoint, SolveReport), GameError> {
    if popts.rho_fixed <= 0.0 {
        return Err(GameError::InvalidArgument {
            arg: "rho_fixed",
            reason: "must be positive".into(),
        });
    }
    p.validate()?;
    let view = GameView::full(p);
    let al = AlState::new(&view, popts.rho_fixed);
    let opts = SolverOptions {
        outer_max_iters: 1,
        ..popts.solver.clone()
    };
    let (pt, mut report, _) = solve_view(p, &view, None, Some(al), &opts)?;
    // A single outer round with untouched duals: status reflects whether the
    // fixed-ρ stationary point happens to satisfy both tolerances.
    if report.status == Status::MaxIters
        && report.final_residual_l1 <= opts.tol_residual
        && report.max_constraint_violation <= opts.tol_constraint
    {
        report.status = Status::Converged;
    }
    Ok((pt, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionModel {
    /// Non-ego agents keep their current velocity and heading (zero-control
    /// rollout of the model).
    ConstantVelocityStraight,
}

#[derive(Debug, Clone)]
pub struct PredictThenPlanOptions {
    pub ego: usize,
    pub prediction: PredictionModel,
    /// Deceleration used by the braking fallback when the model has no
    /// control bounds to saturate.
    pub brake_decel: f64,
    /// Violations beyond this multiple of tol_constraint trigger braking.
    pub infeasible_factor: f64,
}

impl PredictThenPlanOptions {
    pub fn new(ego: usize) -> Self {
        PredictThenPlanOptions {
            ego,
            prediction: PredictionModel::ConstantVelocityStraight,
            brake_decel: 3.0,
            infeasible_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PtpStep {
    /// Ego's first control of the plan (or the braking control).
    pub u0: DVector<f64>,
    pub point: PrimalDualPoint,
    pub report: SolveReport,
    pub warm: WarmStart,
    pub braked: bool,
}

/// Maximal braking control for one player given its current state.
pub fn braking_control(p: &GameProblem, nu: usize, opts: &PredictThenPlanOptions) -> DVector<f64> {
    let m = p.model.control_dim();
    let mut u = DVector::zeros(m);
    let decel = p
        .constraints
        .control_bounds
        .as_ref()
        .map(|b| b[nu].lower.clone());
    match p.model.kind {
        ModelKind::Unicycle | ModelKind::Bicycle => {
            u[1] = decel.map_or(-opts.brake_decel.abs(), |l| l[1]);
        }
        ModelKind::DoubleIntegrator2D | ModelKind::DoubleIntegrator3D => {
            let n = p.model.state_dim();
            let vel = p.x0.player(nu).rows(n / 2, n / 2).into_owned();
            let speed = vel.norm();
            if speed > 1e-9 {
                let a = -opts.brake_decel.abs() / speed;
                for i in 0..m.min(vel.len()) {
                    u[i] = a * vel[i];
                }
            }
            if let Some(l) = decel {
                for i in 0..m {
                    u[i] = u[i].max(l[i]);
                }
            }
        }
        ModelKind::Quadrotor => {}
    }
    u
}

/// One predict-then-plan step: freeze every other agent on a constant-
/// velocity straight-line prediction (a zero-control rollout), keep only the
/// constraint rows involving ego, and best-respond. Falls back to maximal
/// braking when the plan is badly infeasible, which is the mechanism behind
/// the frozen-robot behavior in dense traffic.
pub fn predict_then_plan_step(
    p: &GameProblem,
    opts: &PredictThenPlanOptions,
    solver: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<PtpStep, GameError> {
    if opts.ego >= p.players {
        return Err(GameError::InvalidArgument {
            arg: "ego",
            reason: format!("player {} out of range", opts.ego),
        });
    }
    let t = p.layout();
    let frozen = match opts.prediction {
        PredictionModel::ConstantVelocityStraight => DVector::zeros(t.m_bar()),
    };
    let view = GameView::single(p, opts.ego, frozen, RowFilter::InvolvingPlayer(opts.ego))?;
    let (pt, report, al) = match warm {
        Some(w) => crate::newton::solve_warm(p, &view, w, solver)?,
        None => solve_view(p, &view, None, None, solver)?,
    };
    let braked = report.max_constraint_violation > opts.infeasible_factor * solver.tol_constraint;
    let u0 = if braked {
        braking_control(p, opts.ego, opts)
    } else {
        pt.y.rows(view.y_u_off(0), t.m_per).into_owned()
    };
    let warm_out = WarmStart {
        y: pt.y.clone(),
        lambda: al.lambda.clone(),
        rho: al.rho.clone(),
    };
    Ok(PtpStep {
        u0,
        point: pt,
        report,
        warm: warm_out,
        braked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{self, JointControl, JointState, ModelSpec};
    use crate::game::{
        eval_constraints, player_cost, ConstraintSet, PlayerObjective, RowKind,
    };
    use crate::newton::solve;
    use nalgebra::DMatrix;

    fn di_pair(coupled: bool, constrained: bool) -> GameProblem {
        let model = ModelSpec::new(ModelKind::DoubleIntegrator2D);
        let n = 8;
        let x0 = DVector::from_row_slice(&[
            -2.0, -0.5, 1.0, 0.0, //
            -2.0, 0.5, 1.0, 0.0,
        ]);
        let xf = DVector::from_row_slice(&[
            2.0, 0.5, 0.0, 0.0, //
            2.0, -0.5, 0.0, 0.0,
        ]);
        let mut q = DMatrix::identity(n, n) * 0.5;
        if coupled {
            // Cross-player state coupling keeps the game from decomposing.
            for i in 0..4 {
                q[(i, 4 + i)] = 0.2;
                q[(4 + i, i)] = 0.2;
            }
        }
        let obj = PlayerObjective {
            q,
            r: DMatrix::identity(2, 2),
            qf: DMatrix::identity(n, n) * 2.0,
            xf: JointState::new(xf, 4),
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: Default::default(),
        };
        GameProblem {
            model,
            players: 2,
            horizon: 5,
            dt: 0.2,
            x0: JointState::new(x0, 4),
            objectives: vec![obj; 2],
            constraints: if constrained {
                ConstraintSet::with_collisions(0.4)
            } else {
                ConstraintSet::none()
            },
        }
    }

    fn crossing_unicycles(knots: usize) -> GameProblem {
        let model = ModelSpec::new(ModelKind::Unicycle);
        let x0 = DVector::from_row_slice(&[
            -2.0, -0.6, 0.0, 1.0, //
            -2.0, 0.6, 0.0, 1.0,
        ]);
        let xf = DVector::from_row_slice(&[
            2.5, 0.6, 0.0, 1.0, //
            2.5, -0.6, 0.0, 1.0,
        ]);
        let obj = PlayerObjective {
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                0.1, 0.5, 0.01, 0.1, 0.1, 0.5, 0.01, 0.1,
            ])),
            r: DMatrix::identity(2, 2) * 0.2,
            qf: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                2.0, 2.0, 0.1, 0.5, 2.0, 2.0, 0.1, 0.5,
            ])),
            xf: JointState::new(xf, 4),
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: Default::default(),
        };
        GameProblem {
            model,
            players: 2,
            horizon: knots,
            dt: 0.15,
            x0: JointState::new(x0, 4),
            objectives: vec![obj; 2],
            constraints: ConstraintSet::with_collisions(0.4),
        }
    }

    #[test]
    fn single_player_restriction_equals_full_solve_for_one_player() {
        let mut p = di_pair(false, false);
        p.players = 1;
        p.horizon = 4;
        let t4 = ModelSpec::new(ModelKind::DoubleIntegrator2D).state_dim();
        p.x0 = JointState::new(p.x0.x.rows(0, 4).into_owned(), t4);
        let xf = p.objectives[0].xf.x.rows(0, 4).into_owned();
        p.objectives.truncate(1);
        p.objectives[0].q = DMatrix::identity(4, 4) * 0.5;
        p.objectives[0].qf = DMatrix::identity(4, 4) * 2.0;
        p.objectives[0].xf = JointState::new(xf, 4);
        let opts = SolverOptions::default();
        let (full_pt, full_rep) = solve(&p, None, &opts).unwrap();
        let t = p.layout();
        let (pt, rep, _) =
            single_player_solve(&p, 0, &DVector::zeros(t.m_bar()), &opts).unwrap();
        assert_eq!(full_rep.status, Status::Converged);
        assert_eq!(rep.status, Status::Converged);
        assert!((full_pt.y - pt.y).amax() <= 1e-10);
    }

    #[test]
    fn gne_passes_best_response_check() {
        let p = crossing_unicycles(8);
        let opts = SolverOptions::default();
        let (pt, rep) = solve(&p, None, &opts).unwrap();
        assert_eq!(rep.status, Status::Converged);
        let view = GameView::full(&p);
        let t = p.layout();
        let x = pt.y.rows(0, t.n_bar()).into_owned();
        let mut u_full = DVector::zeros(t.m_bar());
        for i in 0..2 {
            u_full
                .rows_mut(i * t.m_bar_per(), t.m_bar_per())
                .copy_from(&pt.y.rows(view.y_u_off(i), t.m_bar_per()));
        }
        for nu in 0..2 {
            let j_before = player_cost(&p, nu, &x, &u_full).unwrap();
            let (bpt, brep, bview) = single_player_solve(&p, nu, &u_full, &opts).unwrap();
            assert_eq!(brep.status, Status::Converged);
            let bx = bpt.y.rows(0, t.n_bar()).into_owned();
            let mut bu = u_full.clone();
            bu.rows_mut(nu * t.m_bar_per(), t.m_bar_per())
                .copy_from(&bpt.y.rows(bview.y_u_off(0), t.m_bar_per()));
            let j_after = player_cost(&p, nu, &bx, &bu).unwrap();
            assert!(
                j_before - j_after <= 1e-3 * (1.0 + j_before.abs()),
                "player {nu} could improve from {j_before} to {j_after}"
            );
        }
    }

    #[test]
    fn ego_avoids_frozen_collision_course() {
        // The frozen player drives down the adjacent lane toward the ego,
        // close enough that going straight violates the collision rows. The
        // lateral offset keeps the avoidance gradient nonzero.
        let model = ModelSpec::new(ModelKind::Unicycle);
        let x0 = DVector::from_row_slice(&[
            -2.0, 0.0, 0.0, 1.0, //
            2.0, 0.4, std::f64::consts::PI, 1.0,
        ]);
        let xf = DVector::from_row_slice(&[
            2.5, 0.0, 0.0, 1.0, //
            -2.0, 0.4, std::f64::consts::PI, 1.0,
        ]);
        let obj = PlayerObjective {
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                0.2, 0.3, 0.01, 0.1, 0.0, 0.0, 0.0, 0.0,
            ])),
            r: DMatrix::identity(2, 2) * 0.1,
            qf: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                3.0, 1.0, 0.1, 0.5, 0.0, 0.0, 0.0, 0.0,
            ])),
            xf: JointState::new(xf, 4),
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: Default::default(),
        };
        let p = GameProblem {
            model,
            players: 2,
            horizon: 14,
            dt: 0.2,
            x0: JointState::new(x0, 4),
            objectives: vec![obj; 2],
            constraints: ConstraintSet::with_collisions(0.3),
        };
        let t = p.layout();
        let opts = SolverOptions::default();
        let (pt, rep, view) = single_player_solve(&p, 0, &DVector::zeros(t.m_bar()), &opts).unwrap();
        assert_eq!(rep.status, Status::Converged, "{rep:?}");
        let x = pt.y.rows(0, t.n_bar()).into_owned();
        let u = view.u_full(&pt.y);
        let cv = eval_constraints(&p, &x, &u).unwrap();
        for (c, row) in cv.c.iter().zip(cv.rows.iter()) {
            if matches!(row, RowKind::Collision { .. }) {
                assert!(*c <= 1e-3, "collision row violated: {c}");
            }
        }
    }

    #[test]
    fn decoupled_players_converge_in_one_round() {
        let p = di_pair(false, false);
        // Tight tolerance so each best response is exact; otherwise round-two
        // deltas sit at the inner tolerance instead of machine precision.
        let opts = SolverOptions {
            reg: 0.0,
            tol_residual: 1e-9,
            ..Default::default()
        };
        let (_, rep) = ibr_solve(&p, &opts, &IbrOptions::default()).unwrap();
        assert!(rep.converged);
        // The first round reaches the fixed point; the second only confirms.
        assert_eq!(rep.rounds, 2);
        assert!(rep.deltas[1] <= 1e-10, "second-round delta {}", rep.deltas[1]);
    }

    #[test]
    fn ibr_lags_full_newton_at_equal_compute() {
        let p = di_pair(true, false);
        let opts = SolverOptions::default();
        let (pt, rep) = solve(&p, None, &opts).unwrap();
        assert_eq!(rep.status, Status::Converged);
        let view = GameView::full(&p);
        let t = p.layout();
        let x = pt.y.rows(0, t.n_bar()).into_owned();
        let mut u_full = DVector::zeros(t.m_bar());
        let mut mus = Vec::new();
        for i in 0..2 {
            u_full
                .rows_mut(i * t.m_bar_per(), t.m_bar_per())
                .copy_from(&pt.y.rows(view.y_u_off(i), t.m_bar_per()));
            mus.push(pt.y.rows(view.y_mu_off(i), t.n_bar()).into_owned());
        }
        let algames_res = gne_residual(&p, &x, &u_full, &mus).unwrap();

        // Give IBR at least as many inner Newton iterations as the full solve.
        let ibr_opts = IbrOptions {
            max_rounds: rep.inner_iters_total.max(1),
            tol_u: 0.0,
            order: None,
        };
        let (_, ibr_rep) = ibr_solve(&p, &opts, &ibr_opts).unwrap();
        assert!(ibr_rep.inner_iters_total >= rep.inner_iters_total);
        let ibr_res = *ibr_rep.residual_l1.last().unwrap();
        assert!(
            ibr_res > algames_res,
            "ibr {ibr_res} vs algames {algames_res}"
        );
    }

    #[test]
    fn ibr_fixed_point_is_order_independent_in_quality() {
        let p = di_pair(true, false);
        let opts = SolverOptions::default();
        let tight = IbrOptions {
            max_rounds: 60,
            tol_u: 1e-9,
            order: None,
        };
        let reversed = IbrOptions {
            order: Some(vec![1, 0]),
            ..tight.clone()
        };
        let t = p.layout();
        for ibr in [tight, reversed] {
            let (pt, rep) = ibr_solve(&p, &opts, &ibr).unwrap();
            assert!(rep.converged);
            let view = GameView::full(&p);
            let x = pt.y.rows(0, t.n_bar()).into_owned();
            let mut u_full = DVector::zeros(t.m_bar());
            for i in 0..2 {
                u_full
                    .rows_mut(i * t.m_bar_per(), t.m_bar_per())
                    .copy_from(&pt.y.rows(view.y_u_off(i), t.m_bar_per()));
            }
            for nu in 0..2 {
                let j_before = player_cost(&p, nu, &x, &u_full).unwrap();
                let (bpt, _, bview) = single_player_solve(&p, nu, &u_full, &opts).unwrap();
                let bx = bpt.y.rows(0, t.n_bar()).into_owned();
                let mut bu = u_full.clone();
                bu.rows_mut(nu * t.m_bar_per(), t.m_bar_per())
                    .copy_from(&bpt.y.rows(bview.y_u_off(0), t.m_bar_per()));
                let j_after = player_cost(&p, nu, &bx, &bu).unwrap();
                assert!(j_before - j_after <= 1e-3 * (1.0 + j_before.abs()));
            }
        }
    }

    #[test]
    fn huge_fixed_penalty_reaches_tolerance_on_feasible_problem() {
        let p = crossing_unicycles(6);
        let popts = PenaltyOptions {
            rho_fixed: 1e8,
            solver: SolverOptions {
                inner_max_iters: 200,
                ..Default::default()
            },
        };
        let (_, rep) = penalty_solve(&p, &popts).unwrap();
        assert!(
            rep.max_constraint_violation <= 1e-3,
            "violation {}",
            rep.max_constraint_violation
        );
    }

    #[test]
    fn unit_fixed_penalty_plateaus_above_tolerance() {
        let p = crossing_unicycles(8);
        let popts = PenaltyOptions {
            rho_fixed: 1.0,
            solver: SolverOptions {
                inner_max_iters: 200,
                ..Default::default()
            },
        };
        let (_, prep) = penalty_solve(&p, &popts).unwrap();
        let (_, arep) = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(arep.status, Status::Converged);
        assert!(arep.max_constraint_violation <= 1e-3);
        assert!(
            prep.max_constraint_violation > 1e-3,
            "fixed ρ=1 violation {} unexpectedly small",
            prep.max_constraint_violation
        );
    }

    #[test]
    fn penalty_equals_full_solver_without_active_constraints() {
        // Push the players far apart: collision rows stay strictly feasible.
        let mut p = di_pair(false, true);
        p.x0.x[5] = 40.0;
        p.objectives[0].xf.x[5] = 40.0;
        p.objectives[1].xf.x[5] = 40.0;
        let popts = PenaltyOptions::default();
        let (ppt, _) = penalty_solve(&p, &popts).unwrap();
        let (apt, _) = solve(&p, None, &SolverOptions::default()).unwrap();
        assert!((ppt.y - apt.y).amax() <= 1e-6);
    }

    #[test]
    fn ptp_matches_game_plan_without_interaction() {
        // Decoupled costs and far-apart players: the game solution and the
        // predict-then-plan solution agree on ego's trajectory.
        let mut p = di_pair(false, true);
        p.x0.x[5] = 40.0;
        p.objectives[0].xf.x[5] = 40.0;
        p.objectives[1].xf.x[5] = 40.0;
        for o in &mut p.objectives {
            for i in 0..4 {
                o.q[(i, 4 + i)] = 0.0;
                o.q[(4 + i, i)] = 0.0;
            }
        }
        // Player 1 wants to keep its current velocity: its plan is the
        // constant-velocity rollout, so the prediction is exact.
        let opts = SolverOptions::default();
        let ptp = predict_then_plan_step(&p, &PredictThenPlanOptions::new(0), &opts, None).unwrap();
        assert!(!ptp.braked);
        let (apt, _) = solve(&p, None, &opts).unwrap();
        let t = p.layout();
        let view = GameView::full(&p);
        let ego_game = apt.y.rows(view.y_u_off(0), t.m_bar_per()).into_owned();
        let sview = GameView::single(&p, 0, DVector::zeros(t.m_bar()), RowFilter::All).unwrap();
        let ego_ptp = ptp.point.y.rows(sview.y_u_off(0), t.m_bar_per()).into_owned();
        assert!(
            (ego_game - ego_ptp).amax() <= 1e-4,
            "ego plans disagree"
        );
    }

    #[test]
    fn exact_predictions_give_collision_free_simulation() {
        let model = ModelSpec::new(ModelKind::Unicycle);
        // Other agent cruises straight; ego must merge behind it.
        let x0 = DVector::from_row_slice(&[
            0.0, -1.2, 0.0, 1.2, //
            -0.5, 0.0, 0.0, 1.0,
        ]);
        let xf = DVector::from_row_slice(&[
            6.0, 0.0, 0.0, 1.0, //
            5.5, 0.0, 0.0, 1.0,
        ]);
        let obj = PlayerObjective {
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                0.05, 0.4, 0.01, 0.05, 0.0, 0.0, 0.0, 0.0,
            ])),
            r: DMatrix::identity(2, 2) * 0.2,
            qf: DMatrix::from_diagonal(&DVector::from_row_slice(&[
                1.0, 1.5, 0.05, 0.2, 0.0, 0.0, 0.0, 0.0,
            ])),
            xf: JointState::new(xf, 4),
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: Default::default(),
        };
        let p = GameProblem {
            model,
            players: 2,
            horizon: 10,
            dt: 0.2,
            x0: JointState::new(x0, 4),
            objectives: vec![obj; 2],
            constraints: ConstraintSet::with_collisions(0.5),
        };
        let opts = SolverOptions::default();
        let ptp = predict_then_plan_step(&p, &PredictThenPlanOptions::new(0), &opts, None).unwrap();
        assert!(!ptp.braked, "{:?}", ptp.report);
        // Simulate: ego applies its planned controls, the other plays the
        // predicted zero controls. True distances must respect the radius.
        let t = p.layout();
        let sview = GameView::single(&p, 0, DVector::zeros(t.m_bar()), RowFilter::All).unwrap();
        let ego_u = ptp.point.y.rows(sview.y_u_off(0), t.m_bar_per()).into_owned();
        let mut cur = p.x0.clone();
        for k in 1..t.knots {
            let mut uv = DVector::zeros(t.m());
            uv.rows_mut(0, t.m_per)
                .copy_from(&ego_u.rows((k - 1) * t.m_per, t.m_per));
            cur = dynamics::step(&p.model, &cur, &JointControl::new(uv, t.m_per), p.dt).unwrap();
            let dx = cur.x[0] - cur.x[4];
            let dy = cur.x[1] - cur.x[5];
            let dist = (dx * dx + dy * dy).sqrt();
            assert!(
                dist >= 2.0 * p.constraints.collision_radius - 1e-2,
                "knot {k}: distance {dist}"
            );
        }
    }
}
