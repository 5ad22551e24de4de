//! Equilibrium-structure toolkit: static quadratic games and their affine
//! Nash systems, reduction of unconstrained linear-dynamics games to that
//! form, the duplicated-multiplier KKT system whose nullspace spans the
//! continuum of generalized Nash equilibria, perturb-and-project tracing,
//! PCA over equilibrium sets, normalized-equilibrium verification, and
//! multistart clustering.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alcore::{ascent_update, evaluate, kkt_jacobian, residual, AlState, GameView};
use crate::alcore::PrimalDualPoint;
use crate::dynamics::{self, JointControl};
use crate::dynamics::ModelKind;
use crate::error::GameError;
use crate::game::{eval_constraints, GameProblem, RowKind};
use crate::newton::{
    solve_view, solve_warm, OuterRound, RootSystem, SolveReport, SolverOptions, Status, WarmStart,
};

pub const ACTIVE_TOL: f64 = 1e-4;
pub const SVD_TOL: f64 = 1e-10;
pub const DELTA_CLUSTER: f64 = 1e-1;

/// Static game with quadratic costs J^ν(s) = ½ sᵀQ^ν s + q^νᵀ s + c^ν over
/// the stacked strategy vector s = [s¹; …; s^M].
#[derive(Debug, Clone)]
pub struct StaticQuadraticGame {
    pub dims: Vec<usize>,
    pub q_mats: Vec<DMatrix<f64>>,
    pub q_vecs: Vec<DVector<f64>>,
    pub consts: Vec<f64>,
}

impl StaticQuadraticGame {
    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn offset(&self, player: usize) -> usize {
        self.dims[..player].iter().sum()
    }

    pub fn players(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let n = self.total_dim();
        if self.q_mats.len() != self.players()
            || self.q_vecs.len() != self.players()
            || self.consts.len() != self.players()
        {
            return Err(GameError::DimensionMismatch {
                what: "per-player terms",
                expected: self.players(),
                got: self.q_mats.len(),
            });
        }
        for (nu, q) in self.q_mats.iter().enumerate() {
            if q.nrows() != n || q.ncols() != n {
                return Err(GameError::DimensionMismatch {
                    what: "Q",
                    expected: n,
                    got: q.nrows(),
                });
            }
            if self.q_vecs[nu].len() != n {
                return Err(GameError::DimensionMismatch {
                    what: "q",
                    expected: n,
                    got: self.q_vecs[nu].len(),
                });
            }
            let own = self.own_block(nu);
            let scale = own.amax().max(1.0);
            if (&own - own.transpose()).amax() > 1e-9 * scale {
                return Err(GameError::InvalidArgument {
                    arg: "Q",
                    reason: format!("player {nu} own-strategy block must be symmetric"),
                });
            }
        }
        Ok(())
    }

    /// Q^ν_{ν,ν}, the quadratic form over player ν's own strategy.
    pub fn own_block(&self, nu: usize) -> DMatrix<f64> {
        let o = self.offset(nu);
        self.q_mats[nu]
            .view((o, o), (self.dims[nu], self.dims[nu]))
            .into_owned()
    }

    pub fn cost(&self, nu: usize, s: &DVector<f64>) -> f64 {
        0.5 * s.dot(&(&self.q_mats[nu] * s)) + self.q_vecs[nu].dot(s) + self.consts[nu]
    }

    /// Stacked first-order system A s = b: block row ν is ∇_{s^ν} J^ν.
    pub fn stationarity(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.total_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for nu in 0..self.players() {
            let o = self.offset(nu);
            let d = self.dims[nu];
            let sym = 0.5 * (&self.q_mats[nu] + self.q_mats[nu].transpose());
            a.view_mut((o, 0), (d, n)).copy_from(&sym.view((o, 0), (d, n)));
            b.rows_mut(o, d).copy_from(&(-self.q_vecs[nu].rows(o, d)));
        }
        (a, b)
    }
}

#[derive(Debug, Clone)]
pub enum LqKind {
    Unique(DVector<f64>),
    /// Minimum-norm particular solution plus an orthonormal basis (columns)
    /// of the solution subspace's direction space.
    AffineSubspace {
        point: DVector<f64>,
        basis: DMatrix<f64>,
    },
    NoSolution,
}

#[derive(Debug, Clone)]
pub struct LqNashSolution {
    pub kind: LqKind,
    /// Second-order condition: every Q^ν_{ν,ν} positive semi-definite.
    pub second_order_ok: bool,
}

/// Solve the stacked stationarity system of a static quadratic game and
/// classify its solution set by rank and consistency.
pub fn lq_nash_solve(g: &StaticQuadraticGame) -> Result<LqNashSolution, GameError> {
    g.validate()?;
    let (a, b) = g.stationarity();
    let n = g.total_dim();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = SVD_TOL * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let point = svd
        .solve(&b, tol)
        .map_err(|e| GameError::InvalidArgument {
            arg: "svd",
            reason: e.to_string(),
        })?
        .column(0)
        .into_owned();
    let consistent = (&a * &point - &b).norm() <= 1e-8 * b.norm().max(1.0);

    let second_order_ok = (0..g.players()).all(|nu| {
        let own = g.own_block(nu);
        let scale = own.amax().max(1.0);
        let sym = 0.5 * (&own + own.transpose());
        nalgebra::SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .all(|&e| e >= -1e-9 * scale)
    });

    let kind = if !consistent {
        LqKind::NoSolution
    } else if rank == n {
        LqKind::Unique(point)
    } else {
        let vt = svd.v_t.as_ref().unwrap();
        let mut basis = DMatrix::zeros(n, n - rank);
        let mut col = 0;
        for i in 0..svd.singular_values.len() {
            if svd.singular_values[i] <= tol {
                basis.set_column(col, &vt.row(i).transpose());
                col += 1;
            }
        }
        LqKind::AffineSubspace { point, basis }
    };
    Ok(LqNashSolution {
        kind,
        second_order_ok,
    })
}

/// The stationarity system of a static quadratic game as a root-finding
/// problem, so the same Newton machinery that solves trajectory games can be
/// run on it directly.
pub struct StaticGameSystem {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl StaticGameSystem {
    pub fn new(g: &StaticQuadraticGame) -> Result<Self, GameError> {
        g.validate()?;
        let (a, b) = g.stationarity();
        Ok(StaticGameSystem { a, b })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }
}

impl RootSystem for StaticGameSystem {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn residual(&self, y: &DVector<f64>) -> Result<DVector<f64>, GameError> {
        Ok(&self.a * y - &self.b)
    }

    fn jacobian_into(&self, _y: &DVector<f64>, h: &mut DMatrix<f64>) -> Result<(), GameError> {
        h.copy_from(&self.a);
        Ok(())
    }

    fn dual_start(&self) -> usize {
        self.a.nrows()
    }
}

/// Reduce an unconstrained game with linear dynamics to a static quadratic
/// game over the stacked controls, eliminating the states through
/// X = Φx₀ + Σ_ν T_ν U^ν.
pub fn reduce_lq(p: &GameProblem) -> Result<StaticQuadraticGame, GameError> {
    p.validate()?;
    match p.model.kind {
        ModelKind::DoubleIntegrator2D | ModelKind::DoubleIntegrator3D => {}
        _ => {
            return Err(GameError::InvalidArgument {
                arg: "model",
                reason: "control-space reduction requires linear dynamics".into(),
            })
        }
    }
    let cs = &p.constraints;
    if cs.enable_collisions
        || !cs.boundaries.is_empty()
        || cs.control_bounds.is_some()
        || !cs.terminal_equalities.is_empty()
    {
        return Err(GameError::InvalidArgument {
            arg: "constraints",
            reason: "control-space reduction handles unconstrained games only".into(),
        });
    }
    if p.objectives.iter().any(|o| o.prox_weight != 0.0) {
        return Err(GameError::InvalidArgument {
            arg: "objectives",
            reason: "proximity cost is not quadratic in the controls".into(),
        });
    }
    let t = p.layout();
    let (ad, bd) = dynamics::linearize(
        &p.model,
        &p.x0,
        &JointControl::new(DVector::zeros(t.m()), t.m_per),
        p.dt,
    )?;
    let n = t.n();
    let steps = t.steps();
    let mut pows = Vec::with_capacity(steps + 1);
    pows.push(DMatrix::identity(n, n));
    for j in 1..=steps {
        let next = &ad * &pows[j - 1];
        pows.push(next);
    }
    let mut phi = DMatrix::zeros(t.n_bar(), n);
    for r in 0..steps {
        phi.view_mut((r * n, 0), (n, n)).copy_from(&pows[r + 1]);
    }
    let mut tmats = Vec::with_capacity(t.players);
    for nu in 0..t.players {
        let bnu = bd.columns(nu * t.m_per, t.m_per).into_owned();
        let mut tm = DMatrix::zeros(t.n_bar(), t.m_bar_per());
        for r in 0..steps {
            for j in 1..=(r + 1) {
                let blk = &pows[r + 1 - j] * &bnu;
                tm.view_mut((r * n, (j - 1) * t.m_per), (n, t.m_per))
                    .copy_from(&blk);
            }
        }
        tmats.push(tm);
    }

    let total = t.players * t.m_bar_per();
    let mut q_mats = Vec::with_capacity(t.players);
    let mut q_vecs = Vec::with_capacity(t.players);
    let mut consts = Vec::with_capacity(t.players);
    for nu in 0..t.players {
        let obj = &p.objectives[nu];
        let mut qbar = DMatrix::zeros(t.n_bar(), t.n_bar());
        let mut xf_bar = DVector::zeros(t.n_bar());
        for r in 0..steps {
            let w = if r + 2 < t.knots { &obj.q } else { &obj.qf };
            qbar.view_mut((r * n, r * n), (n, n)).copy_from(w);
            xf_bar.rows_mut(r * n, n).copy_from(&obj.xf.x);
        }
        let e = &phi * &p.x0.x - xf_bar;
        let qe = &qbar * &e;
        let tq: Vec<DMatrix<f64>> = tmats.iter().map(|tm| &qbar * tm).collect();
        let mut qm = DMatrix::zeros(total, total);
        for i in 0..t.players {
            for j in 0..t.players {
                let blk = tmats[i].transpose() * &tq[j];
                qm.view_mut(
                    (i * t.m_bar_per(), j * t.m_bar_per()),
                    (t.m_bar_per(), t.m_bar_per()),
                )
                .copy_from(&blk);
            }
        }
        for k in 0..steps {
            let o = nu * t.m_bar_per() + k * t.m_per;
            for r in 0..t.m_per {
                for c in 0..t.m_per {
                    qm[(o + r, o + c)] += obj.r[(r, c)];
                }
            }
        }
        let mut qv = DVector::zeros(total);
        for i in 0..t.players {
            qv.rows_mut(i * t.m_bar_per(), t.m_bar_per())
                .copy_from(&(tmats[i].transpose() * &qe));
        }
        let dx0 = &p.x0.x - &obj.xf.x;
        consts.push(0.5 * e.dot(&qe) + 0.5 * dx0.dot(&(&obj.q * &dx0)));
        q_mats.push(qm);
        q_vecs.push(qv);
    }
    Ok(StaticQuadraticGame {
        dims: vec![t.m_bar_per(); t.players],
        q_mats,
        q_vecs,
        consts,
    })
}

fn status_str(status: Status) -> &'static str {
    match status {
        Status::Converged => "Converged",
        Status::MaxIters => "MaxIters",
        Status::LineSearchStall => "LineSearchStall",
    }
}

/// KKT system of a converged solution with the shared multipliers of active
/// collision rows split into one copy per involved player. The Jacobian has
/// `n_a` more columns than rows, so its nullspace spans at least an
/// `n_a`-dimensional continuum of equilibria.
#[derive(Debug, Clone)]
pub struct AugmentedKkt {
    pub g_hat: DVector<f64>,
    pub h_hat: DMatrix<f64>,
    /// Indices into the full constraint row list, in row order.
    pub active: Vec<usize>,
    /// One entry per multiplier column: (position in `active`, player).
    pub lambda_cols: Vec<(usize, usize)>,
    pub n_c: usize,
    pub n_a: usize,
}

/// Assemble the duplicated-multiplier KKT residual and Jacobian at a
/// converged point. Rows are the per-player stationarity blocks, the
/// dynamics defects, and one equation per active constraint; columns are
/// (X, U, μ) plus the multiplier copies. Penalty terms are excluded: this is
/// the plain first-order system, with constraint curvature dropped the same
/// way the solver drops it.
pub fn build_augmented_kkt(
    p: &GameProblem,
    pt: &PrimalDualPoint,
    al: &AlState,
    report: &SolveReport,
    active_tol: f64,
) -> Result<AugmentedKkt, GameError> {
    if !report.converged() {
        return Err(GameError::NotConverged {
            status: status_str(report.status),
        });
    }
    let view = GameView::full(p);
    let t = &view.traj;
    let n_y = view.y_len();
    let x = pt.y.rows(0, t.n_bar()).into_owned();
    let u = view.u_full(&pt.y);
    let cv = eval_constraints(p, &x, &u)?;

    // Strongly-active classification: a row binds if its value is within
    // tolerance of zero or the solution leans on it through a positive
    // multiplier (the value alone under-reports once the penalty freezes).
    let active: Vec<usize> = (0..cv.c.len())
        .filter(|&r| cv.c[r] >= -active_tol || al.lambda[r] > 0.0)
        .collect();
    let n_a = active
        .iter()
        .filter(|&&r| matches!(cv.rows[r], RowKind::Collision { .. }))
        .count();

    // Copies start at the shared value; inactive rows carry no multiplier.
    let mut lambda_masked = DVector::zeros(cv.c.len());
    for &r in &active {
        lambda_masked[r] = al.lambda[r];
    }
    let al_kkt = AlState {
        lambda: lambda_masked,
        rho: DVector::zeros(cv.c.len()),
        mu: al.mu.clone(),
        n_ci: view.n_ci,
        gamma_pen: al.gamma_pen,
        rho_max: al.rho_max,
        lambda_max: al.lambda_max,
    };
    let g_top = residual(p, &view, &pt.y, &al_kkt)?;
    let h_top = kkt_jacobian(p, &view, &pt.y, &al_kkt)?;
    let ev = evaluate(p, &view, &pt.y, &al_kkt)?;

    let mut lambda_cols = Vec::new();
    for (pos, &r) in active.iter().enumerate() {
        match cv.rows[r] {
            RowKind::Collision { a, b, .. } => {
                lambda_cols.push((pos, a));
                lambda_cols.push((pos, b));
            }
            RowKind::Boundary { player, .. }
            | RowKind::ControlUpper { player, .. }
            | RowKind::ControlLower { player, .. }
            | RowKind::TerminalEquality { player, .. } => lambda_cols.push((pos, player)),
        }
    }

    let rows_tot = n_y + active.len();
    let cols_tot = n_y + lambda_cols.len();
    let mut h_hat = DMatrix::zeros(rows_tot, cols_tot);
    h_hat.view_mut((0, 0), (n_y, n_y)).copy_from(&h_top);
    let mut g_hat = DVector::zeros(rows_tot);
    g_hat.rows_mut(0, n_y).copy_from(&g_top.g);
    for (pos, &r) in active.iter().enumerate() {
        g_hat[n_y + pos] = cv.c[r];
    }

    // ∂(stationarity of ν)/∂λ-copy: the constraint gradient restricted to
    // (X, U^ν), in that player's rows.
    for (ci, &(pos, player)) in lambda_cols.iter().enumerate() {
        let r = active[pos];
        let col = n_y + ci;
        for &(jcol, val) in &ev.cjac.rows[r] {
            if jcol < t.n_bar() {
                h_hat[(view.g_x_off(player) + jcol, col)] += val;
            } else {
                let g = jcol - t.n_bar();
                let nu = g / t.m_bar_per();
                if nu == player {
                    h_hat[(view.g_u_off(player) + (g - nu * t.m_bar_per()), col)] += val;
                }
            }
        }
    }
    // Active constraint equations.
    for (pos, &r) in active.iter().enumerate() {
        let row = n_y + pos;
        for &(jcol, val) in &ev.cjac.rows[r] {
            if jcol < t.n_bar() {
                h_hat[(row, jcol)] += val;
            } else {
                let g = jcol - t.n_bar();
                let nu = g / t.m_bar_per();
                h_hat[(row, view.y_u_off(nu) + (g - nu * t.m_bar_per()))] += val;
            }
        }
    }

    Ok(AugmentedKkt {
        g_hat,
        h_hat,
        active,
        lambda_cols,
        n_c: cv.c.len(),
        n_a,
    })
}

/// Orthonormal nullspace basis of an arbitrary (possibly fat) matrix via
/// singular value thresholding: columns i of V with σ_i ≤ svd_tol·σ_max.
/// Fat matrices are zero-padded to square first so every right singular
/// vector is available.
pub fn nullspace_of(m: &DMatrix<f64>, svd_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut sq = DMatrix::zeros(rows.max(cols), cols);
    sq.view_mut((0, 0), (rows, cols)).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = svd_tol * smax;
    let idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut basis = DMatrix::zeros(cols, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        basis.set_column(c, &vt.row(i).transpose());
    }
    basis
}

/// Nullspace of the duplicated-multiplier Jacobian. Its dimension is at
/// least `n_a`, the column surplus.
pub fn kkt_nullspace(kkt: &AugmentedKkt, svd_tol: f64) -> DMatrix<f64> {
    let basis = nullspace_of(&kkt.h_hat, svd_tol);
    assert!(
        basis.ncols() >= kkt.n_a,
        "nullspace dimension {} below the structural bound {}",
        basis.ncols(),
        kkt.n_a
    );
    basis
}

/// Trajectory part of a point: states and decision controls, excluding all
/// multipliers. The subspace used by PCA, clustering, and drift metrics.
pub fn primal_of(view: &GameView, y: &DVector<f64>) -> DVector<f64> {
    y.rows(0, view.traj.n_bar() + view.d() * view.traj.m_bar_per())
        .into_owned()
}

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub solver: SolverOptions,
    /// Absolute step along the direction; 1e-2·‖(X,U)‖₂ of the base point
    /// when None.
    pub step: Option<f64>,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        PerturbOptions {
            solver: SolverOptions::default(),
            step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub point: PrimalDualPoint,
    pub report: SolveReport,
    /// ‖(X,U) − (X,U)*‖₂ between the projected and base trajectories.
    pub drift: f64,
}

/// Step along a direction of the duplicated-multiplier system and project
/// back onto the equilibrium set by re-solving from the perturbed warm
/// start. The direction's (X, U, μ) part moves the point; its multiplier
/// copies are folded back onto the shared λ by averaging per row.
pub fn perturb_and_project(
    p: &GameProblem,
    pt: &PrimalDualPoint,
    al: &AlState,
    kkt: &AugmentedKkt,
    direction: &DVector<f64>,
    opts: &PerturbOptions,
) -> Result<PerturbOutcome, GameError> {
    let view = GameView::full(p);
    let n_y = view.y_len();
    if direction.len() != kkt.h_hat.ncols() {
        return Err(GameError::DimensionMismatch {
            what: "direction",
            expected: kkt.h_hat.ncols(),
            got: direction.len(),
        });
    }
    let base_primal = primal_of(&view, &pt.y);
    let step = opts.step.unwrap_or_else(|| 1e-2 * base_primal.norm());

    let mut y = pt.y.clone();
    y += step * direction.rows(0, n_y);
    let mut lambda = al.lambda.clone();
    let mut sums = vec![(0.0, 0usize); kkt.active.len()];
    for (ci, &(pos, _)) in kkt.lambda_cols.iter().enumerate() {
        sums[pos].0 += direction[n_y + ci];
        sums[pos].1 += 1;
    }
    for (pos, &r) in kkt.active.iter().enumerate() {
        let (sum, count) = sums[pos];
        if count > 0 {
            lambda[r] += step * sum / count as f64;
        }
    }
    for k in 0..al.n_ci {
        lambda[k] = lambda[k].max(0.0);
    }
    let warm = WarmStart {
        y,
        lambda,
        rho: al.rho.clone(),
    };
    let (new_pt, report, _) = solve_warm(p, &view, &warm, &opts.solver)?;
    if !report.converged() {
        return Err(GameError::ProjectionFailed {
            reason: format!(
                "re-solve ended {} with residual {:.3e}",
                status_str(report.status),
                report.final_residual_l1
            ),
        });
    }
    let drift = (primal_of(&view, &new_pt.y) - base_primal).norm();
    Ok(PerturbOutcome {
        point: new_pt,
        report,
        drift,
    })
}

/// Project a batch of (direction, step) perturbations in parallel. Failed
/// projections are reported in place so callers can discard them while
/// keeping the pairing with the inputs.
pub fn perturb_batch(
    p: &GameProblem,
    pt: &PrimalDualPoint,
    al: &AlState,
    kkt: &AugmentedKkt,
    directions: &DMatrix<f64>,
    steps: &[f64],
    opts: &PerturbOptions,
) -> Vec<Result<PerturbOutcome, GameError>> {
    let jobs: Vec<(usize, f64)> = (0..directions.ncols())
        .flat_map(|c| steps.iter().map(move |&s| (c, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(c, s)| {
            let dir = directions.column(c).into_owned();
            let o = PerturbOptions {
                solver: opts.solver.clone(),
                step: Some(s),
            };
            perturb_and_project(p, pt, al, kkt, &dir, &o)
        })
        .collect()
}

/// PCA over a set of equilibrium trajectory vectors: eigenvalues of the
/// sample covariance in descending order with matching principal directions
/// as columns.
pub fn pca_of_equilibria(
    points: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>), GameError> {
    if points.len() < 2 {
        return Err(GameError::InvalidArgument {
            arg: "points",
            reason: "PCA needs at least two points".into(),
        });
    }
    let d = points[0].len();
    for pt in points {
        if pt.len() != d {
            return Err(GameError::DimensionMismatch {
                what: "points",
                expected: d,
                got: pt.len(),
            });
        }
    }
    let pn = points.len();
    let mut mean = DVector::zeros(d);
    for pt in points {
        mean += pt;
    }
    mean /= pn as f64;
    let mut centered = DMatrix::zeros(pn, d);
    for (i, pt) in points.iter().enumerate() {
        centered.row_mut(i).copy_from(&(pt - &mean).transpose());
    }
    let svd = centered.svd(false, true);
    let vt = svd.v_t.unwrap();
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let denom = (pn - 1) as f64;
    let evals = DVector::from_fn(k, |i, _| {
        let s = svd.singular_values[order[i]];
        s * s / denom
    });
    let mut evecs = DMatrix::zeros(d, k);
    for (i, &oi) in order.iter().enumerate() {
        evecs.set_column(i, &vt.row(oi).transpose());
    }
    Ok((evals, evecs))
}

#[derive(Debug, Clone)]
pub struct NneReport {
    pub is_nne: bool,
    pub max_multiplier_gap: f64,
    pub rounds: usize,
}

/// Replay the dual-ascent recursion with two independently initialized
/// multiplier copies along a recorded constraint/penalty history. Returns
/// (largest gap seen at any iteration, gap after the final round).
pub fn replay_duplicated_ascent(
    trace: &[OuterRound],
    n_ci: usize,
    lambda_max: f64,
    init_a: f64,
    init_b: f64,
) -> (f64, f64) {
    let Some(first) = trace.first() else {
        let g = (init_a - init_b).abs();
        return (g, g);
    };
    let rows = first.c.len();
    let mut la = DVector::from_element(rows, init_a);
    let mut lb = DVector::from_element(rows, init_b);
    let mut max_gap = (init_a - init_b).abs();
    let mut last_gap = max_gap;
    for round in trace {
        last_gap = 0.0;
        for k in 0..rows {
            la[k] = ascent_update(la[k], round.rho[k], round.c[k], k < n_ci, lambda_max);
            lb[k] = ascent_update(lb[k], round.rho[k], round.c[k], k < n_ci, lambda_max);
            last_gap = last_gap.max((la[k] - lb[k]).abs());
        }
        max_gap = max_gap.max(last_gap);
    }
    (max_gap, last_gap)
}

/// Verify that the solve's dual recursion, had each shared multiplier been
/// split into one copy per player, would have kept the copies identical at
/// every round: the normalized-equilibrium property. Both copies start at
/// zero, exactly like the solver's shared multiplier.
pub fn nne_check(report: &SolveReport, al: &AlState) -> NneReport {
    let (max_gap, _) =
        replay_duplicated_ascent(&report.dual_trace, al.n_ci, al.lambda_max, 0.0, 0.0);
    NneReport {
        is_nne: max_gap <= 1e-12,
        max_multiplier_gap: max_gap,
        rounds: report.dual_trace.len(),
    }
}

#[derive(Debug, Clone)]
pub struct MultistartOptions {
    pub solver: SolverOptions,
    /// Single-linkage threshold on the scale-normalized trajectory distance.
    pub delta_cluster: f64,
    /// Sampling half-range for controls when the problem has no bounds.
    pub control_range: f64,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        MultistartOptions {
            solver: SolverOptions::default(),
            delta_cluster: DELTA_CLUSTER,
            control_range: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EqCluster {
    /// Sample indices, ascending; the first is the representative's.
    pub members: Vec<usize>,
    pub representative: PrimalDualPoint,
}

#[derive(Debug, Clone)]
pub struct MultistartReport {
    pub clusters: Vec<EqCluster>,
    pub attempted: usize,
    pub failed: usize,
}

/// Dynamically feasible random initialization: controls drawn uniformly
/// within bounds (±`range` when absent), states from the matching rollout,
/// multipliers zero.
pub fn random_feasible_init<R: Rng>(
    p: &GameProblem,
    view: &GameView,
    range: f64,
    rng: &mut R,
) -> Result<DVector<f64>, GameError> {
    let t = &view.traj;
    let mut u_full = view.frozen_u.clone();
    for &nu in &view.decision {
        let bounds = p.constraints.control_bounds.as_ref().map(|b| &b[nu]);
        for k in 1..t.knots {
            for j in 0..t.m_per {
                let (lo, hi) = match bounds {
                    Some(b) => (b.lower[j], b.upper[j]),
                    None => (-range.abs(), range.abs()),
                };
                u_full[t.u_off(nu, k) + j] = rng.gen_range(lo..hi);
            }
        }
    }
    let controls: Vec<JointControl> = (1..t.knots)
        .map(|k| {
            let mut v = DVector::zeros(t.m());
            for nu in 0..t.players {
                v.rows_mut(nu * t.m_per, t.m_per)
                    .copy_from(&u_full.rows(t.u_off(nu, k), t.m_per));
            }
            JointControl::new(v, t.m_per)
        })
        .collect();
    let states = dynamics::rollout(&p.model, &p.x0, &controls, p.dt)?;
    let mut y = DVector::zeros(view.y_len());
    for (j, s) in states.iter().enumerate() {
        y.rows_mut(j * t.n(), t.n()).copy_from(&s.x);
    }
    for (i, &nu) in view.decision.iter().enumerate() {
        y.rows_mut(view.y_u_off(i), t.m_bar_per())
            .copy_from(&u_full.rows(nu * t.m_bar_per(), t.m_bar_per()));
    }
    Ok(y)
}

/// Single-linkage clustering under the scale-normalized ℓ2 distance
/// d(a, b) = ‖a − b‖ / max(½(‖a‖ + ‖b‖), ε). Clusters are ordered by their
/// smallest member index.
pub fn cluster_points(points: &[DVector<f64>], delta: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = (0.5 * (points[i].norm() + points[j].norm())).max(1e-12);
            if (&points[i] - &points[j]).norm() / scale < delta {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_of[r] {
            Some(g) => groups[g].push(i),
            None => {
                root_of[r] = Some(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Solve from `k` random dynamically feasible starts (per-sample seeds
/// `seed + index`) and cluster the converged trajectories. Failed or
/// non-converged solves are excluded and counted.
pub fn multistart_cluster(
    p: &GameProblem,
    k: usize,
    seed: u64,
    opts: &MultistartOptions,
) -> Result<MultistartReport, GameError> {
    if k < 2 {
        return Err(GameError::InvalidArgument {
            arg: "k",
            reason: "multistart needs at least two samples".into(),
        });
    }
    p.validate()?;
    let view = GameView::full(p);
    let results: Vec<Option<PrimalDualPoint>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let y0 = random_feasible_init(p, &view, opts.control_range, &mut rng).ok()?;
            let (pt, report, _) = solve_view(p, &view, Some(&y0), None, &opts.solver).ok()?;
            report.converged().then_some(pt)
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    let kept: Vec<usize> = (0..k).filter(|&i| results[i].is_some()).collect();
    let primals: Vec<DVector<f64>> = kept
        .iter()
        .map(|&i| primal_of(&view, &results[i].as_ref().unwrap().y))
        .collect();
    let clusters = cluster_points(&primals, opts.delta_cluster)
        .into_iter()
        .map(|members| EqCluster {
            representative: results[kept[members[0]]].clone().unwrap(),
            members: members.into_iter().map(|li| kept[li]).collect(),
        })
        .collect();
    Ok(MultistartReport {
        clusters,
        attempted: k,
        failed,
    })
}
