//! Quasi-Newton root-finder: regularized Newton steps with backtracking line
//! search on ‖G‖₁, a block-tridiagonal structured linear solve, and the outer
//! loop that alternates inner solves with dual ascent and penalty growth.

use nalgebra::{DMatrix, DVector};

use crate::alcore::{
    self, constraint_violation, dual_ascent, penalty_schedule, reg_pattern, stage_perm, AlState,
    GameView, PrimalDualPoint, RegPattern, StagePerm,
};
use crate::dynamics::{self, JointControl};
use crate::error::GameError;
use crate::game::{eval_constraints_into, GameProblem};

pub const MAX_REG: f64 = 1e-2;

/// Penalty escalation stops once the violation is within this factor of the
/// constraint tolerance; dual ascent closes the rest.
pub const ESCALATE_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    Dense,
    Structured,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Sufficient-decrease coefficient β ∈ (0, ½).
    pub beta: f64,
    /// Backtracking factor τ ∈ (0, 1).
    pub tau: f64,
    pub alpha_min: f64,
    pub inner_max_iters: usize,
    pub outer_max_iters: usize,
    /// Base Jacobian regularization (escalated ×10 up to 1e-2 on singular H).
    pub reg: f64,
    /// ℓ1 residual tolerance ‖G‖₁.
    pub tol_residual: f64,
    /// Max constraint violation tolerance.
    pub tol_constraint: f64,
    pub linear_solver: LinearSolver,
    /// Initial penalty ρ⁽⁰⁾.
    pub rho0: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            beta: 0.01,
            tau: 0.5,
            alpha_min: 1e-8,
            inner_max_iters: 50,
            outer_max_iters: 20,
            reg: 1e-6,
            tol_residual: 1e-2,
            tol_constraint: 1e-3,
            linear_solver: LinearSolver::Dense,
            rho0: alcore::DEFAULT_RHO0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), GameError> {
        if !(self.beta > 0.0 && self.beta < 0.5) {
            return Err(GameError::InvalidArgument {
                arg: "beta",
                reason: "must lie in (0, 0.5)".into(),
            });
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(GameError::InvalidArgument {
                arg: "tau",
                reason: "must lie in (0, 1)".into(),
            });
        }
        if self.tol_residual <= 0.0 || self.tol_constraint <= 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "tolerances",
                reason: "must be positive".into(),
            });
        }
        if self.reg < 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "reg",
                reason: "must be nonnegative".into(),
            });
        }
        if self.rho0 <= 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "rho0",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchStall,
}

#[derive(Debug, Clone)]
pub struct IterTrace {
    pub outer: usize,
    pub residual_l1: f64,
    pub violation: f64,
    pub alpha: f64,
}

/// Per outer round: constraint values and penalties right before the dual
/// ascent, enough to replay the multiplier recursion offline.
#[derive(Debug, Clone)]
pub struct OuterRound {
    pub c: DVector<f64>,
    pub rho: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: Status,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    /// KKT factorizations across all rounds, the cross-method cost unit.
    pub lin_solves_total: usize,
    pub final_residual_l1: f64,
    pub max_constraint_violation: f64,
    pub trace: Vec<IterTrace>,
    pub dual_trace: Vec<OuterRound>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

/// Anything the inner Newton iteration can run on: constrained trajectory
/// games and static quadratic games both implement this.
pub trait RootSystem {
    fn dim(&self) -> usize;
    fn residual(&self, y: &DVector<f64>) -> Result<DVector<f64>, GameError>;
    fn jacobian_into(&self, y: &DVector<f64>, h: &mut DMatrix<f64>) -> Result<(), GameError>;
    /// Alternative Jacobian to retry a failed line search with; writes into
    /// `h` and returns true when the system has one.
    fn rescue_jacobian_into(
        &self,
        _y: &DVector<f64>,
        _h: &mut DMatrix<f64>,
    ) -> Result<bool, GameError> {
        Ok(false)
    }
    /// First row/column index of the dual (multiplier) block, for the flat
    /// +primal/−dual regularization split.
    fn dual_start(&self) -> usize;
    /// Structure-preserving regularization pattern; flat split when None.
    fn reg_pattern(&self) -> Option<RegPattern> {
        None
    }
    fn stage_perm(&self) -> Option<StagePerm> {
        None
    }
    fn violation(&self, _y: &DVector<f64>) -> f64 {
        0.0
    }
}

/// The augmented Lagrangian root system for one game view and dual state.
pub struct AlSystem<'a> {
    pub p: &'a GameProblem,
    pub view: &'a GameView,
    pub al: &'a AlState,
}

impl RootSystem for AlSystem<'_> {
    fn dim(&self) -> usize {
        self.view.y_len()
    }

    fn residual(&self, y: &DVector<f64>) -> Result<DVector<f64>, GameError> {
        Ok(alcore::residual(self.p, self.view, y, self.al)?.g)
    }

    fn jacobian_into(&self, y: &DVector<f64>, h: &mut DMatrix<f64>) -> Result<(), GameError> {
        alcore::kkt_jacobian_into(self.p, self.view, y, self.al, h)
    }

    fn rescue_jacobian_into(
        &self,
        y: &DVector<f64>,
        h: &mut DMatrix<f64>,
    ) -> Result<bool, GameError> {
        alcore::kkt_jacobian_banded_into(self.p, self.view, y, self.al, h)?;
        Ok(true)
    }

    fn dual_start(&self) -> usize {
        self.view.traj.n_bar() + self.view.d() * self.view.traj.m_bar_per()
    }

    fn reg_pattern(&self) -> Option<RegPattern> {
        Some(reg_pattern(self.view))
    }

    fn stage_perm(&self) -> Option<StagePerm> {
        Some(stage_perm(self.view))
    }

    fn violation(&self, y: &DVector<f64>) -> f64 {
        let t = &self.view.traj;
        let x = y.rows(0, t.n_bar()).into_owned();
        let u = self.view.u_full(y);
        let mut c = DVector::zeros(self.view.rows.len());
        eval_constraints_into(self.p, &self.view.rows, &x, &u, &mut c);
        constraint_violation(&c, self.al.n_ci)
    }
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Flat ±reg split: +1 on primal diagonal entries, −1 on dual ones.
pub fn flat_reg_pattern(dim: usize, dual_start: usize) -> RegPattern {
    RegPattern {
        entries: (0..dim)
            .map(|i| (i, i, if i < dual_start { 1.0 } else { -1.0 }))
            .collect(),
    }
}

/// One regularized Newton step: solves (H + reg·S)δy = −G with the flat
/// +primal/−dual split S.
pub fn newton_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    reg: f64,
    dual_start: usize,
) -> Result<DVector<f64>, GameError> {
    let mut hr = h.clone();
    if reg != 0.0 {
        flat_reg_pattern(h.nrows(), dual_start).apply(&mut hr, reg);
    }
    dense_solve(&hr, g).ok_or(GameError::SingularKkt { max_reg: reg })
}

/// Acceptable backward error ‖Hδy + G‖∞ relative to ‖G‖∞. A numerically
/// singular LU produces O(‖G‖) residuals and gets rejected so the caller can
/// escalate regularization.
const SOLVE_RESID_TOL: f64 = 1e-6;

fn dense_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = h.clone().lu();
    let dy = lu.solve(&(-g))?;
    if !dy.iter().all(|v| v.is_finite()) {
        return None;
    }
    let resid = (h * &dy + g).amax();
    (resid <= SOLVE_RESID_TOL * g.amax().max(1e-300)).then_some(dy)
}

/// Check that the permuted matrix really is block tridiagonal.
pub fn band_ok(h: &DMatrix<f64>, perm: &StagePerm) -> bool {
    let s = perm.block;
    for bi in 0..perm.stages {
        for bj in 0..perm.stages {
            if (bi as isize - bj as isize).abs() <= 1 {
                continue;
            }
            for r in 0..s {
                for c in 0..s {
                    if h[(perm.row_perm[bi * s + r], perm.col_perm[bj * s + c])] != 0.0 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn structured_solve_unchecked(
    h: &DMatrix<f64>,
    perm: &StagePerm,
    g: &DVector<f64>,
) -> Result<DVector<f64>, GameError> {
    let s = perm.block;
    let kk = perm.stages;
    let block = |bi: usize, bj: usize| -> DMatrix<f64> {
        DMatrix::from_fn(s, s, |r, c| {
            h[(perm.row_perm[bi * s + r], perm.col_perm[bj * s + c])]
        })
    };
    let mut rhs: Vec<DVector<f64>> = (0..kk)
        .map(|bi| DVector::from_fn(s, |r, _| -g[perm.row_perm[bi * s + r]]))
        .collect();

    // Forward elimination of the lower band, then back substitution.
    let mut lus = Vec::with_capacity(kk);
    let mut uppers = Vec::with_capacity(kk);
    let mut schur = block(0, 0);
    for bi in 0..kk {
        let lu = schur.clone().lu();
        if !lu.is_invertible() {
            return Err(GameError::SingularKkt { max_reg: 0.0 });
        }
        let upper = if bi + 1 < kk {
            block(bi, bi + 1)
        } else {
            DMatrix::zeros(0, 0)
        };
        if bi + 1 < kk {
            let lower = block(bi + 1, bi);
            let w = lu.solve(&upper).ok_or(GameError::SingularKkt { max_reg: 0.0 })?;
            schur = block(bi + 1, bi + 1) - &lower * w;
            let fwd = lu
                .solve(&rhs[bi])
                .ok_or(GameError::SingularKkt { max_reg: 0.0 })?;
            let correction = &lower * fwd;
            rhs[bi + 1] -= correction;
        }
        lus.push(lu);
        uppers.push(upper);
    }
    let mut sol = vec![DVector::zeros(s); kk];
    for bi in (0..kk).rev() {
        let mut r = rhs[bi].clone();
        if bi + 1 < kk {
            r -= &uppers[bi] * &sol[bi + 1];
        }
        sol[bi] = lus[bi]
            .solve(&r)
            .ok_or(GameError::SingularKkt { max_reg: 0.0 })?;
    }
    let mut dy = DVector::zeros(h.nrows());
    for bi in 0..kk {
        for c in 0..s {
            dy[perm.col_perm[bi * s + c]] = sol[bi][c];
        }
    }
    let resid = (h * &dy + g).amax();
    if dy.iter().all(|v| v.is_finite()) && resid <= SOLVE_RESID_TOL * g.amax().max(1e-300) {
        Ok(dy)
    } else {
        Err(GameError::SingularKkt { max_reg: 0.0 })
    }
}

/// Solve H δy = −G by block-tridiagonal elimination over the stage
/// permutation. Falls back to a dense solve if the band structure does not
/// hold for this matrix.
pub fn structured_solve(
    h: &DMatrix<f64>,
    perm: &StagePerm,
    g: &DVector<f64>,
) -> Result<DVector<f64>, GameError> {
    if !band_ok(h, perm) {
        return dense_solve(h, g).ok_or(GameError::SingularKkt { max_reg: 0.0 });
    }
    structured_solve_unchecked(h, perm, g)
}

/// Backtracking line search on the ℓ1 merit: largest α ∈ {1, τ, τ², …} with
/// ‖G(y+αδy)‖₁ < (1−αβ)‖G(y)‖₁. Returns the accepted step and its residual,
/// or None on stall.
pub fn line_search<S: RootSystem>(
    sys: &S,
    y: &DVector<f64>,
    dy: &DVector<f64>,
    g_norm: f64,
    opts: &SolverOptions,
) -> Result<Option<(f64, DVector<f64>, f64)>, GameError> {
    let mut alpha = 1.0;
    while alpha >= opts.alpha_min {
        let cand = y + alpha * dy;
        let g_new = sys.residual(&cand)?;
        let n_new = l1(&g_new);
        if n_new < (1.0 - alpha * opts.beta) * g_norm {
            return Ok(Some((alpha, cand, n_new)));
        }
        alpha *= opts.tau;
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct InnerReport {
    pub iters: usize,
    pub final_norm1: f64,
    pub stalled: bool,
    pub singular: bool,
    /// KKT factorizations performed, including damped retries.
    pub lin_solves: usize,
    /// (residual after step, accepted α) per iteration.
    pub history: Vec<(f64, f64)>,
}

/// Accepted steps below this α are treated as crawls worth a rescue retry.
const CREEP_ALPHA: f64 = 1.0 / 64.0;

/// Consecutive crawl steps tolerated before the round is cut short.
const CREEP_RUN: usize = 8;

/// Newton iteration on ‖G‖₁ with regularization escalation: runs until the
/// residual tolerance, iteration cap, a line-search stall, a plateau (‖G‖₁
/// improves by less than 1e-10 over 5 iterations), or a sustained crawl
/// (several consecutive steps where both Jacobians only admit a tiny α, so
/// the round yields to the dual update instead of creeping to the iteration
/// cap). Updates y in place to the best point seen.
pub fn inner_solve<S: RootSystem>(
    sys: &S,
    y: &mut DVector<f64>,
    opts: &SolverOptions,
) -> Result<InnerReport, GameError> {
    let dim = sys.dim();
    let pattern = sys
        .reg_pattern()
        .unwrap_or_else(|| flat_reg_pattern(dim, sys.dual_start()));
    let perm = match opts.linear_solver {
        LinearSolver::Structured => sys.stage_perm(),
        LinearSolver::Dense => None,
    };
    let mut h = DMatrix::zeros(dim, dim);
    let mut g_norm = l1(&sys.residual(y)?);
    let mut report = InnerReport {
        iters: 0,
        final_norm1: g_norm,
        stalled: false,
        singular: false,
        lin_solves: 0,
        history: Vec::new(),
    };
    let mut band_checked = false;
    let mut use_structured = perm.is_some();
    let mut norms = vec![g_norm];
    let mut crawls = 0usize;

    'iterate: while g_norm > opts.tol_residual && report.iters < opts.inner_max_iters {
        let g = sys.residual(y)?;
        let mut rescue = false;
        let mut fell_singular = false;
        // Step kept from the primary pass while a rescue retry runs.
        let mut fallback: Option<(f64, DVector<f64>, f64)> = None;
        let chosen = loop {
            if rescue {
                if !sys.rescue_jacobian_into(y, &mut h)? {
                    break fallback;
                }
            } else {
                sys.jacobian_into(y, &mut h)?;
            }
            let mut eps = opts.reg;
            if eps > 0.0 {
                pattern.apply(&mut h, eps);
            }
            if use_structured && !band_checked {
                band_checked = true;
                use_structured = band_ok(&h, perm.as_ref().unwrap());
            }
            let dy = loop {
                report.lin_solves += 1;
                let attempt = if use_structured {
                    structured_solve_unchecked(&h, perm.as_ref().unwrap(), &g)
                } else {
                    dense_solve(&h, &g).ok_or(GameError::SingularKkt { max_reg: eps })
                };
                match attempt {
                    Ok(dy) => break Some(dy),
                    Err(_) => {
                        let next = if eps == 0.0 { 1e-6 } else { eps * 10.0 };
                        if next > MAX_REG {
                            // Last resort: dense on the current (regularized) H.
                            if use_structured {
                                if let Some(dy) = dense_solve(&h, &g) {
                                    break Some(dy);
                                }
                            }
                            break None;
                        }
                        pattern.apply(&mut h, next - eps);
                        eps = next;
                    }
                }
            };
            let Some(dy) = dy else {
                if !rescue {
                    rescue = true;
                    fell_singular = true;
                    continue;
                }
                fell_singular = fallback.is_none();
                break fallback;
            };
            match line_search(sys, y, &dy, g_norm, opts)? {
                Some((alpha, y_new, n_new)) if !rescue && alpha < CREEP_ALPHA => {
                    // The primary model only admits a crawl; retry with the
                    // rescue Jacobian and keep whichever lands lower.
                    fallback = Some((alpha, y_new, n_new));
                    rescue = true;
                }
                Some(step) => {
                    break Some(match fallback.take() {
                        Some(f) if f.2 <= step.2 => f,
                        _ => step,
                    });
                }
                None => {
                    if !rescue {
                        rescue = true;
                        continue;
                    }
                    break fallback;
                }
            }
        };
        let Some((alpha, y_new, n_new)) = chosen else {
            if fell_singular {
                report.singular = true;
            } else {
                report.stalled = true;
            }
            break;
        };
        *y = y_new;
        g_norm = n_new;
        report.iters += 1;
        report.history.push((n_new, alpha));
        norms.push(n_new);
        let len = norms.len();
        if len >= 6 && norms[len - 6] - norms[len - 1] < 1e-10 {
            break;
        }
        crawls = if alpha < CREEP_ALPHA { crawls + 1 } else { 0 };
        if crawls >= CREEP_RUN {
            break;
        }
    }
    report.final_norm1 = g_norm;
    Ok(report)
}

/// Warm-start payload carrying the previous solution and its dual state.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub rho: DVector<f64>,
}

/// Consistent initialization: every player plays its `frozen_u` block (zero
/// for decision players of a full view), X is the matching rollout, μ = 0.
pub fn default_init(p: &GameProblem, view: &GameView) -> Result<DVector<f64>, GameError> {
    let t = &view.traj;
    let u_full = view.frozen_u.clone();
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

fn constraints_at(p: &GameProblem, view: &GameView, y: &DVector<f64>) -> DVector<f64> {
    let t = &view.traj;
    let x = y.rows(0, t.n_bar()).into_owned();
    let u = view.u_full(y);
    let mut c = DVector::zeros(view.rows.len());
    eval_constraints_into(p, &view.rows, &x, &u, &mut c);
    c
}

/// Full outer loop on an arbitrary view with explicit initial point and dual
/// state. Returns the final point, the report, and the dual state for warm
/// starting.
pub fn solve_view(
    p: &GameProblem,
    view: &GameView,
    init: Option<&DVector<f64>>,
    al0: Option<AlState>,
    opts: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveReport, AlState), GameError> {
    opts.validate()?;
    let mut al = match al0 {
        Some(a) => {
            a.validate()?;
            a
        }
        None => AlState::new(view, opts.rho0),
    };
    let mut y = match init {
        Some(v) => {
            if v.len() != view.y_len() {
                return Err(GameError::DimensionMismatch {
                    what: "initial point",
                    expected: view.y_len(),
                    got: v.len(),
                });
            }
            v.clone()
        }
        None => default_init(p, view)?,
    };

    let mut report = SolveReport {
        status: Status::MaxIters,
        outer_iters: 0,
        inner_iters_total: 0,
        lin_solves_total: 0,
        final_residual_l1: f64::INFINITY,
        max_constraint_violation: f64::INFINITY,
        trace: Vec::new(),
        dual_trace: Vec::new(),
    };

    for outer in 1..=opts.outer_max_iters {
        report.outer_iters = outer;
        let inner = {
            let sys = AlSystem { p, view, al: &al };
            let inner = inner_solve(&sys, &mut y, opts)?;
            for (norm, alpha) in &inner.history {
                report.trace.push(IterTrace {
                    outer,
                    residual_l1: *norm,
                    violation: sys.violation(&y),
                    alpha: *alpha,
                });
            }
            inner
        };
        report.inner_iters_total += inner.iters;
        report.lin_solves_total += inner.lin_solves;
        let c = constraints_at(p, view, &y);
        let viol = constraint_violation(&c, al.n_ci);
        report.final_residual_l1 = inner.final_norm1;
        report.max_constraint_violation = viol;
        report.dual_trace.push(OuterRound {
            c: c.clone(),
            rho: al.rho.clone(),
        });
        if inner.final_norm1 <= opts.tol_residual && viol <= opts.tol_constraint {
            report.status = Status::Converged;
            break;
        }
        if inner.singular || (inner.stalled && inner.iters == 0 && outer > 1) {
            // No direction exists or the merit cannot move at all: report a
            // stall rather than burning the remaining rounds.
            report.status = Status::LineSearchStall;
            break;
        }
        dual_ascent(&mut al, &c);
        // Escalate the penalty only while the violation is well above the
        // target; the final gap is closed by the multipliers. Escalating all
        // the way to feasibility overshoots ρ, and the first slightly
        // feasible iterate then wipes every multiplier through the
        // max(0, λ + ρc) projection, deadlocking rows that need λ > 0.
        if viol > ESCALATE_MARGIN * opts.tol_constraint {
            penalty_schedule(&mut al);
        }
    }
    Ok((PrimalDualPoint { y }, report, al))
}

/// Solve the full game from scratch (λ = 0, μ = 0, ρ = ρ⁽⁰⁾, zero-control
/// rollout) or from a caller-supplied primal-dual initialization.
pub fn solve(
    p: &GameProblem,
    init: Option<&PrimalDualPoint>,
    opts: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveReport), GameError> {
    p.validate()?;
    let view = GameView::full(p);
    let (pt, report, _) = solve_view(p, &view, init.map(|i| &i.y), None, opts)?;
    Ok((pt, report))
}

/// Re-solve carrying the previous primal-dual point and dual state; a
/// converged instance re-solves in at most one inner iteration.
pub fn solve_warm(
    p: &GameProblem,
    view: &GameView,
    warm: &WarmStart,
    opts: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveReport, AlState), GameError> {
    let mut al = AlState::new(view, opts.rho0);
    if warm.lambda.len() != al.lambda.len() || warm.rho.len() != al.rho.len() {
        return Err(GameError::DimensionMismatch {
            what: "warm-start duals",
            expected: al.lambda.len(),
            got: warm.lambda.len(),
        });
    }
    al.lambda = warm.lambda.clone();
    al.rho = warm.rho.clone();
    solve_view(p, view, Some(&warm.y), Some(al), opts)
}
