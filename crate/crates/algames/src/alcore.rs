//! Augmented Lagrangian machinery: per-player gradients G^ν, the stacked
//! residual G, the quasi-Newton KKT matrix H, penalty activation, dual
//! ascent, and penalty scheduling.
//!
//! Every player ν minimizes L^ν = J^ν + μ^νᵀD + λᵀC + ½CᵀI_ρC over its own
//! variables (X, U^ν); λ and ρ are shared across players, μ^ν is private.
//! The solver operates on a `GameView`, which selects the decision players
//! (all of them for the full game, one for best-response and
//! predict-then-plan subproblems) and the constraint rows in play.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{self, JointControl, JointState};
use crate::error::GameError;
use crate::game::{
    self, constraint_jacobian, constraint_rows, eval_constraints_into, player_cost,
    player_cost_gradient, prox_term, GameProblem, RowKind, SparseJacobian, TrajLayout,
};

pub const DEFAULT_RHO0: f64 = 1.0;
pub const DEFAULT_GAMMA_PEN: f64 = 10.0;
pub const DEFAULT_RHO_MAX: f64 = 1e8;
pub const DEFAULT_LAMBDA_MAX: f64 = 1e7;

/// Which constraint rows a subproblem keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFilter {
    All,
    /// Keep only rows that involve the given player (used by
    /// predict-then-plan, which ignores constraints among the other agents).
    InvolvingPlayer(usize),
}

/// A solvable slice of a game: which players' controls are decision
/// variables, what the frozen players do, and which constraint rows apply.
#[derive(Debug, Clone)]
pub struct GameView {
    pub traj: TrajLayout,
    /// Sorted player indices whose (U^ν, μ^ν) are decision variables.
    pub decision: Vec<usize>,
    /// Full player-major control vector; blocks of decision players are
    /// overwritten from y, the rest are constants of the subproblem.
    pub frozen_u: DVector<f64>,
    pub rows: Vec<RowKind>,
    /// Number of leading inequality rows in `rows`.
    pub n_ci: usize,
}

impl GameView {
    /// The full game: all players decide, all constraint rows apply.
    pub fn full(p: &GameProblem) -> Self {
        let traj = p.layout();
        let rows = constraint_rows(p);
        let n_ci = game::inequality_count(&rows);
        GameView {
            traj,
            decision: (0..p.players).collect(),
            frozen_u: DVector::zeros(traj.m_bar()),
            rows,
            n_ci,
        }
    }

    /// A single-player subproblem: `ego` decides, everyone else plays
    /// `frozen_u`. The row filter selects which constraints survive.
    pub fn single(
        p: &GameProblem,
        ego: usize,
        frozen_u: DVector<f64>,
        filter: RowFilter,
    ) -> Result<Self, GameError> {
        let traj = p.layout();
        if ego >= p.players {
            return Err(GameError::InvalidArgument {
                arg: "ego",
                reason: format!("player {ego} out of range"),
            });
        }
        if frozen_u.len() != traj.m_bar() {
            return Err(GameError::DimensionMismatch {
                what: "frozen controls",
                expected: traj.m_bar(),
                got: frozen_u.len(),
            });
        }
        let rows: Vec<RowKind> = constraint_rows(p)
            .into_iter()
            .filter(|r| match filter {
                RowFilter::All => true,
                RowFilter::InvolvingPlayer(nu) => r.involves(nu),
            })
            .collect();
        let n_ci = game::inequality_count(&rows);
        Ok(GameView {
            traj,
            decision: vec![ego],
            frozen_u,
            rows,
            n_ci,
        })
    }

    pub fn d(&self) -> usize {
        self.decision.len()
    }

    pub fn y_len(&self) -> usize {
        self.traj.n_bar() + self.d() * (self.traj.m_bar_per() + self.traj.n_bar())
    }

    pub fn g_len(&self) -> usize {
        self.y_len()
    }

    /// Column offset of decision block i's controls within y.
    pub fn y_u_off(&self, i: usize) -> usize {
        self.traj.n_bar() + i * self.traj.m_bar_per()
    }

    /// Column offset of decision block i's dynamics multipliers within y.
    pub fn y_mu_off(&self, i: usize) -> usize {
        self.traj.n_bar() + self.d() * self.traj.m_bar_per() + i * self.traj.n_bar()
    }

    /// Row offset of G^i's state-gradient part.
    pub fn g_x_off(&self, i: usize) -> usize {
        i * (self.traj.n_bar() + self.traj.m_bar_per())
    }

    /// Row offset of G^i's control-gradient part.
    pub fn g_u_off(&self, i: usize) -> usize {
        self.g_x_off(i) + self.traj.n_bar()
    }

    /// Row offset of the dynamics block D.
    pub fn g_d_off(&self) -> usize {
        self.d() * (self.traj.n_bar() + self.traj.m_bar_per())
    }

    pub fn decision_index(&self, player: usize) -> Option<usize> {
        self.decision.iter().position(|&nu| nu == player)
    }

    /// Full player-major control vector implied by y.
    pub fn u_full(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut u = self.frozen_u.clone();
        for (i, &nu) in self.decision.iter().enumerate() {
            u.rows_mut(nu * self.traj.m_bar_per(), self.traj.m_bar_per())
                .copy_from(&y.rows(self.y_u_off(i), self.traj.m_bar_per()));
        }
        u
    }
}

/// Shared multipliers and penalties plus per-decision-player dynamics
/// multipliers.
#[derive(Debug, Clone)]
pub struct AlState {
    pub lambda: DVector<f64>,
    pub rho: DVector<f64>,
    /// One vector of length n̄ per decision player.
    pub mu: Vec<DVector<f64>>,
    pub n_ci: usize,
    pub gamma_pen: f64,
    pub rho_max: f64,
    pub lambda_max: f64,
}

impl AlState {
    pub fn new(view: &GameView, rho0: f64) -> Self {
        AlState {
            lambda: DVector::zeros(view.rows.len()),
            rho: DVector::from_element(view.rows.len(), rho0),
            mu: vec![DVector::zeros(view.traj.n_bar()); view.d()],
            n_ci: view.n_ci,
            gamma_pen: DEFAULT_GAMMA_PEN,
            rho_max: DEFAULT_RHO_MAX,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn validate(&self) -> Result<(), GameError> {
        if self.lambda.len() != self.rho.len() {
            return Err(GameError::DimensionMismatch {
                what: "multipliers vs penalties",
                expected: self.lambda.len(),
                got: self.rho.len(),
            });
        }
        if self
            .lambda
            .iter()
            .take(self.n_ci)
            .any(|&l| l < 0.0)
        {
            return Err(GameError::InvalidArgument {
                arg: "lambda",
                reason: "inequality multipliers must be nonnegative".into(),
            });
        }
        if self.rho.iter().any(|&r| r <= 0.0 || r > self.rho_max) {
            return Err(GameError::InvalidArgument {
                arg: "rho",
                reason: "penalties must satisfy 0 < ρ ≤ ρ_max".into(),
            });
        }
        if self.gamma_pen <= 1.0 {
            return Err(GameError::InvalidArgument {
                arg: "gamma_pen",
                reason: "penalty growth rate must exceed 1".into(),
            });
        }
        Ok(())
    }
}

/// Flat stacked decision vector y = [X | U^(decision) | μ^(decision)].
#[derive(Debug, Clone)]
pub struct PrimalDualPoint {
    pub y: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(view: &GameView) -> Self {
        PrimalDualPoint {
            y: DVector::zeros(view.y_len()),
        }
    }

    pub fn pack(
        view: &GameView,
        x_traj: &DVector<f64>,
        u_blocks: &[DVector<f64>],
        mu_blocks: &[DVector<f64>],
    ) -> Result<Self, GameError> {
        let t = &view.traj;
        if x_traj.len() != t.n_bar() {
            return Err(GameError::DimensionMismatch {
                what: "X",
                expected: t.n_bar(),
                got: x_traj.len(),
            });
        }
        if u_blocks.len() != view.d() || mu_blocks.len() != view.d() {
            return Err(GameError::DimensionMismatch {
                what: "per-player blocks",
                expected: view.d(),
                got: u_blocks.len(),
            });
        }
        let mut y = DVector::zeros(view.y_len());
        y.rows_mut(0, t.n_bar()).copy_from(x_traj);
        for i in 0..view.d() {
            if u_blocks[i].len() != t.m_bar_per() || mu_blocks[i].len() != t.n_bar() {
                return Err(GameError::DimensionMismatch {
                    what: "U/μ block",
                    expected: t.m_bar_per(),
                    got: u_blocks[i].len(),
                });
            }
            y.rows_mut(view.y_u_off(i), t.m_bar_per())
                .copy_from(&u_blocks[i]);
            y.rows_mut(view.y_mu_off(i), t.n_bar())
                .copy_from(&mu_blocks[i]);
        }
        Ok(PrimalDualPoint { y })
    }

    pub fn unpack(
        &self,
        view: &GameView,
    ) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let t = &view.traj;
        let x = self.y.rows(0, t.n_bar()).into_owned();
        let u = (0..view.d())
            .map(|i| self.y.rows(view.y_u_off(i), t.m_bar_per()).into_owned())
            .collect();
        let mu = (0..view.d())
            .map(|i| self.y.rows(view.y_mu_off(i), t.n_bar()).into_owned())
            .collect();
        (x, u, mu)
    }
}

/// Stacked residual blocks [G^1 | … | G^d | D].
#[derive(Debug, Clone)]
pub struct ResidualVector {
    pub g: DVector<f64>,
}

impl ResidualVector {
    pub fn player_block(&self, view: &GameView, i: usize) -> DVector<f64> {
        self.g
            .rows(view.g_x_off(i), view.traj.n_bar() + view.traj.m_bar_per())
            .into_owned()
    }

    pub fn dynamics_block(&self, view: &GameView) -> DVector<f64> {
        self.g.rows(view.g_d_off(), view.traj.n_bar()).into_owned()
    }

    pub fn norm1(&self) -> f64 {
        self.g.iter().map(|v| v.abs()).sum()
    }
}

/// Penalty activation weights: entry k is 0 iff row k is an inactive
/// inequality (C_k < 0 with λ_k = 0), else ρ_k.
pub fn penalty_activation(
    c: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: &DVector<f64>,
    n_ci: usize,
) -> DVector<f64> {
    DVector::from_fn(c.len(), |k, _| {
        if k < n_ci && c[k] < 0.0 && lambda[k] == 0.0 {
            0.0
        } else {
            rho[k]
        }
    })
}

/// Rows this close to the boundary count as active in the KKT matrix even
/// though the residual treats them as inactive.
pub const JACOBIAN_ACTIVE_BAND: f64 = 1e-3;

/// Activation for the rescue KKT matrix: like [`penalty_activation`] but
/// with a small band below zero treated as active. When an iterate is
/// pressed against a constraint it is blind to (inactive in the residual,
/// about to turn on), the exact-activation Newton direction aims at the
/// unconstrained optimum and every step fails; widening the Jacobian's
/// active set makes the direction aim at the force-balance point instead.
/// Off the pressed-wall case the widened set manufactures phantom stiffness,
/// so this is only used to retry a failed line search.
pub fn jacobian_activation(
    c: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: &DVector<f64>,
    n_ci: usize,
) -> DVector<f64> {
    DVector::from_fn(c.len(), |k, _| {
        if k < n_ci && c[k] < -JACOBIAN_ACTIVE_BAND && lambda[k] == 0.0 {
            0.0
        } else {
            rho[k]
        }
    })
}

/// Worst constraint violation: positive part for inequalities, absolute
/// value for equalities.
pub fn constraint_violation(c: &DVector<f64>, n_ci: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &v) in c.iter().enumerate() {
        let viol = if k < n_ci { v.max(0.0) } else { v.abs() };
        worst = worst.max(viol);
    }
    worst
}

/// Everything evaluated once per point and shared across blocks.
pub struct Eval {
    pub x: DVector<f64>,
    pub u_full: DVector<f64>,
    pub c: DVector<f64>,
    pub irho: DVector<f64>,
    pub cjac: SparseJacobian,
    /// Dynamics defects D_k = x_{k+1} − f(x_k, u_k), stacked.
    pub d: DVector<f64>,
}

fn joint_control_at(t: &TrajLayout, u_full: &DVector<f64>, k: usize) -> JointControl {
    let mut v = DVector::zeros(t.m());
    for nu in 0..t.players {
        v.rows_mut(nu * t.m_per, t.m_per)
            .copy_from(&u_full.rows(t.u_off(nu, k), t.m_per));
    }
    JointControl::new(v, t.m_per)
}

pub fn evaluate(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
) -> Result<Eval, GameError> {
    let t = &view.traj;
    if y.len() != view.y_len() {
        return Err(GameError::DimensionMismatch {
            what: "y",
            expected: view.y_len(),
            got: y.len(),
        });
    }
    let x = y.rows(0, t.n_bar()).into_owned();
    let u_full = view.u_full(y);
    let mut c = DVector::zeros(view.rows.len());
    eval_constraints_into(p, &view.rows, &x, &u_full, &mut c);
    let irho = penalty_activation(&c, &al.lambda, &al.rho, al.n_ci);
    let cjac = constraint_jacobian(p, &view.rows, &x, &u_full);
    let mut d = DVector::zeros(t.n_bar());
    for k in 1..t.knots {
        let xk = JointState::new(
            game::state_at(&p.x0.x, &x, t, k).into_owned(),
            t.n_per,
        );
        let uk = joint_control_at(t, &u_full, k);
        let next = dynamics::step(&p.model, &xk, &uk, p.dt)?;
        let defect = x.rows(t.x_off(k + 1), t.n()) - next.x;
        d.rows_mut((k - 1) * t.n(), t.n()).copy_from(&defect);
    }
    Ok(Eval {
        x,
        u_full,
        c,
        irho,
        cjac,
    d,
    })
}

/// Scalar L^ν = J^ν + μ^νᵀD + λᵀC + ½CᵀI_ρC with the activation weights
/// `irho` held fixed (the semi-smooth treatment differentiated by G^ν).
pub fn player_al_value(
    p: &GameProblem,
    view: &GameView,
    i: usize,
    y: &DVector<f64>,
    al: &AlState,
    irho: &DVector<f64>,
) -> Result<f64, GameError> {
    let t = &view.traj;
    let x = y.rows(0, t.n_bar()).into_owned();
    let u_full = view.u_full(y);
    let mut c = DVector::zeros(view.rows.len());
    eval_constraints_into(p, &view.rows, &x, &u_full, &mut c);
    let mut val = player_cost(p, view.decision[i], &x, &u_full)?;
    for k in 0..c.len() {
        val += al.lambda[k] * c[k] + 0.5 * irho[k] * c[k] * c[k];
    }
    let mu = y.rows(view.y_mu_off(i), t.n_bar());
    for k in 1..t.knots {
        let xk = JointState::new(game::state_at(&p.x0.x, &x, t, k).into_owned(), t.n_per);
        let uk = joint_control_at(t, &u_full, k);
        let next = dynamics::step(&p.model, &xk, &uk, p.dt)?;
        let defect = x.rows(t.x_off(k + 1), t.n()) - next.x;
        val += mu.rows((k - 1) * t.n(), t.n()).dot(&defect);
    }
    Ok(val)
}

/// G^i for decision block i, given a shared evaluation. Output stacks the
/// X-gradient (n̄) then the U^ν-gradient (m̄_per).
fn player_gradient_from_eval(
    p: &GameProblem,
    view: &GameView,
    i: usize,
    y: &DVector<f64>,
    ev: &Eval,
    lin: &[(DMatrix<f64>, DMatrix<f64>)],
    lambda: &DVector<f64>,
) -> Result<DVector<f64>, GameError> {
    let t = &view.traj;
    let nu = view.decision[i];
    let mut g = player_cost_gradient(p, nu, &ev.x, &ev.u_full)?;

    // Dynamics-multiplier term ∇_{X,U^ν}(μ^νᵀD).
    let mu = y.rows(view.y_mu_off(i), t.n_bar());
    for k in 1..t.knots {
        let mu_k = mu.rows((k - 1) * t.n(), t.n());
        {
            let mut gx = g.rows_mut(t.x_off(k + 1), t.n());
            gx += mu_k;
        }
        if k >= 2 {
            let (a, _) = &lin[k - 1];
            let mut gx = g.rows_mut(t.x_off(k), t.n());
            gx -= a.transpose() * mu_k;
        }
        let (_, b) = &lin[k - 1];
        let bnu = b.columns(nu * t.m_per, t.m_per);
        let mut gu = g.rows_mut(t.n_bar() + (k - 1) * t.m_per, t.m_per);
        gu -= bnu.transpose() * mu_k;
    }

    // Constraint term ∇(λᵀC + ½CᵀI_ρC) = ∇Cᵀ(λ + I_ρ∘C).
    let u_lo = t.u_off(nu, 1);
    let u_hi = u_lo + t.m_bar_per();
    for (r, entries) in ev.cjac.rows.iter().enumerate() {
        let w = lambda[r] + ev.irho[r] * ev.c[r];
        if w == 0.0 {
            continue;
        }
        for &(col, val) in entries {
            if col < t.n_bar() {
                g[col] += val * w;
            } else {
                let gcol = col - t.n_bar();
                if gcol >= u_lo && gcol < u_hi {
                    g[t.n_bar() + (gcol - u_lo)] += val * w;
                }
            }
        }
    }
    Ok(g)
}

fn linearizations(
    p: &GameProblem,
    view: &GameView,
    ev: &Eval,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>, GameError> {
    let t = &view.traj;
    let mut out = Vec::with_capacity(t.steps());
    for k in 1..t.knots {
        let xk = JointState::new(game::state_at(&p.x0.x, &ev.x, t, k).into_owned(), t.n_per);
        let uk = joint_control_at(t, &ev.u_full, k);
        out.push(dynamics::linearize(&p.model, &xk, &uk, p.dt)?);
    }
    Ok(out)
}

/// Augmented Lagrangian gradient of one decision player.
pub fn player_al_gradient(
    p: &GameProblem,
    view: &GameView,
    i: usize,
    y: &DVector<f64>,
    al: &AlState,
) -> Result<DVector<f64>, GameError> {
    let ev = evaluate(p, view, y, al)?;
    let lin = linearizations(p, view, &ev)?;
    player_gradient_from_eval(p, view, i, y, &ev, &lin, &al.lambda)
}

/// Stacked root-finding residual G(y) = [G^1; …; G^d; D].
pub fn residual(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
) -> Result<ResidualVector, GameError> {
    let ev = evaluate(p, view, y, al)?;
    let lin = linearizations(p, view, &ev)?;
    let mut g = DVector::zeros(view.g_len());
    for i in 0..view.d() {
        let gi = player_gradient_from_eval(p, view, i, y, &ev, &lin, &al.lambda)?;
        g.rows_mut(view.g_x_off(i), gi.len()).copy_from(&gi);
    }
    g.rows_mut(view.g_d_off(), view.traj.n_bar()).copy_from(&ev.d);
    Ok(ResidualVector { g })
}

/// Quasi-Newton KKT matrix: exact cost Hessians (including the analytic
/// proximity Hessian), the Gauss-Newton penalty term ∇Cᵀ I_ρ ∇C, and the
/// bilinear μᵀD blocks. Constraint curvature contracted with (λ + I_ρC) and
/// dynamics curvature contracted with μ are dropped.
pub fn kkt_jacobian_into(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
    h: &mut DMatrix<f64>,
) -> Result<(), GameError> {
    kkt_jacobian_weighted_into(p, view, y, al, false, h)
}

/// Rescue variant of [`kkt_jacobian_into`] with the near-boundary band
/// treated as active (see [`jacobian_activation`]).
pub fn kkt_jacobian_banded_into(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
    h: &mut DMatrix<f64>,
) -> Result<(), GameError> {
    kkt_jacobian_weighted_into(p, view, y, al, true, h)
}

fn kkt_jacobian_weighted_into(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
    banded: bool,
    h: &mut DMatrix<f64>,
) -> Result<(), GameError> {
    let t = &view.traj;
    let side = view.y_len();
    if h.nrows() != side || h.ncols() != side {
        return Err(GameError::DimensionMismatch {
            what: "H",
            expected: side,
            got: h.nrows(),
        });
    }
    h.fill(0.0);
    let ev = evaluate(p, view, y, al)?;
    let lin = linearizations(p, view, &ev)?;
    let pos_dim = p.model.kind.pos_dim();

    for i in 0..view.d() {
        let nu = view.decision[i];
        let obj = &p.objectives[nu];
        // Exact cost Hessian: stage Q blocks, terminal Qf, proximity terms.
        for k in 2..=t.knots {
            let w = if k < t.knots { &obj.q } else { &obj.qf };
            let r0 = view.g_x_off(i) + t.x_off(k);
            let c0 = t.x_off(k);
            for r in 0..t.n() {
                for c in 0..t.n() {
                    h[(r0 + r, c0 + c)] += w[(r, c)];
                }
            }
            for om in 0..t.players {
                if om == nu {
                    continue;
                }
                let xk = game::state_at(&p.x0.x, &ev.x, t, k);
                let delta = xk.rows(t.player_x(nu), pos_dim).into_owned()
                    - xk.rows(t.player_x(om), pos_dim).into_owned();
                if let Some(term) =
                    prox_term(obj.prox_weight, obj.prox_radius, obj.prox_sign, &delta, true)
                {
                    let pn = t.player_x(nu);
                    let po = t.player_x(om);
                    for r in 0..pos_dim {
                        for c in 0..pos_dim {
                            let v = term.hess[(r, c)];
                            h[(r0 + pn + r, c0 + pn + c)] += v;
                            h[(r0 + po + r, c0 + po + c)] += v;
                            h[(r0 + pn + r, c0 + po + c)] -= v;
                            h[(r0 + po + r, c0 + pn + c)] -= v;
                        }
                    }
                }
            }
        }
        for k in 1..t.knots {
            let r0 = view.g_u_off(i) + (k - 1) * t.m_per;
            let c0 = view.y_u_off(i) + (k - 1) * t.m_per;
            for r in 0..t.m_per {
                for c in 0..t.m_per {
                    h[(r0 + r, c0 + c)] += obj.r[(r, c)];
                }
            }
        }
        // Bilinear blocks: ∂G^i/∂μ^i = (∂D/∂(X,U^ν))ᵀ.
        for k in 1..t.knots {
            let mu_c = view.y_mu_off(i) + (k - 1) * t.n();
            let rx_next = view.g_x_off(i) + t.x_off(k + 1);
            for j in 0..t.n() {
                h[(rx_next + j, mu_c + j)] += 1.0;
            }
            let (a, b) = &lin[k - 1];
            if k >= 2 {
                let rx = view.g_x_off(i) + t.x_off(k);
                for r in 0..t.n() {
                    for c in 0..t.n() {
                        h[(rx + r, mu_c + c)] -= a[(c, r)];
                    }
                }
            }
            let ru = view.g_u_off(i) + (k - 1) * t.m_per;
            for r in 0..t.m_per {
                for c in 0..t.n() {
                    h[(ru + r, mu_c + c)] -= b[(c, nu * t.m_per + r)];
                }
            }
        }
    }

    // Gauss-Newton penalty term, assembled row by row.
    // Map a global primal column to (a) the G-row it lands on for decision
    // block i and (b) the y-column it lands on, if any.
    let map_row = |i: usize, col: usize| -> Option<usize> {
        if col < t.n_bar() {
            return Some(view.g_x_off(i) + col);
        }
        let g = col - t.n_bar();
        let nu = view.decision[i];
        let lo = t.u_off(nu, 1);
        if g >= lo && g < lo + t.m_bar_per() {
            Some(view.g_u_off(i) + (g - lo))
        } else {
            None
        }
    };
    let map_col = |col: usize| -> Option<usize> {
        if col < t.n_bar() {
            return Some(col);
        }
        let g = col - t.n_bar();
        let player = g / t.m_bar_per();
        let off = g % t.m_bar_per();
        view.decision_index(player).map(|j| view.y_u_off(j) + off)
    };
    let irho_jac = if banded {
        jacobian_activation(&ev.c, &al.lambda, &al.rho, al.n_ci)
    } else {
        ev.irho.clone()
    };
    for (r, entries) in ev.cjac.rows.iter().enumerate() {
        let w = irho_jac[r];
        if w == 0.0 {
            continue;
        }
        for i in 0..view.d() {
            for &(c1, v1) in entries {
                let Some(row) = map_row(i, c1) else { continue };
                for &(c2, v2) in entries {
                    let Some(col) = map_col(c2) else { continue };
                    h[(row, col)] += w * v1 * v2;
                }
            }
        }
    }

    // Dynamics rows D.
    let d0 = view.g_d_off();
    for k in 1..t.knots {
        let r0 = d0 + (k - 1) * t.n();
        let (a, b) = &lin[k - 1];
        for j in 0..t.n() {
            h[(r0 + j, t.x_off(k + 1) + j)] += 1.0;
        }
        if k >= 2 {
            let c0 = t.x_off(k);
            for r in 0..t.n() {
                for c in 0..t.n() {
                    h[(r0 + r, c0 + c)] -= a[(r, c)];
                }
            }
        }
        for (i, &nu) in view.decision.iter().enumerate() {
            let c0 = view.y_u_off(i) + (k - 1) * t.m_per;
            for r in 0..t.n() {
                for c in 0..t.m_per {
                    h[(r0 + r, c0 + c)] -= b[(r, nu * t.m_per + c)];
                }
            }
        }
    }
    Ok(())
}

pub fn kkt_jacobian(
    p: &GameProblem,
    view: &GameView,
    y: &DVector<f64>,
    al: &AlState,
) -> Result<DMatrix<f64>, GameError> {
    let side = view.y_len();
    let mut h = DMatrix::zeros(side, side);
    kkt_jacobian_into(p, view, y, al, &mut h)?;
    Ok(h)
}

/// Dual ascent on the shared multipliers: inequalities are projected to
/// [0, λ_max], equalities clamped to ±λ_max.
pub fn dual_ascent(al: &mut AlState, c: &DVector<f64>) {
    for k in 0..al.lambda.len() {
        al.lambda[k] = ascent_update(al.lambda[k], al.rho[k], c[k], k < al.n_ci, al.lambda_max);
    }
}

/// Single multiplier update, shared with the duplicated-multiplier replay so
/// both run the identical floating-point recursion.
pub fn ascent_update(lambda: f64, rho: f64, c: f64, inequality: bool, lambda_max: f64) -> f64 {
    let v = lambda + rho * c;
    if inequality {
        v.max(0.0).min(lambda_max)
    } else {
        v.clamp(-lambda_max, lambda_max)
    }
}

/// Multiplicative penalty growth, capped at ρ_max.
pub fn penalty_schedule(al: &mut AlState) {
    for k in 0..al.rho.len() {
        al.rho[k] = (al.gamma_pen * al.rho[k]).min(al.rho_max);
    }
}

/// Stage-local regularization pattern. Primal diagonal blocks (state and
/// control gradient rows against their own columns) get +ε, dynamics rows
/// get −ε against the matching μ columns; every entry stays inside one
/// stage block so the permuted matrix remains block tridiagonal.
#[derive(Debug, Clone)]
pub struct RegPattern {
    pub entries: Vec<(usize, usize, f64)>,
}

impl RegPattern {
    pub fn apply(&self, h: &mut DMatrix<f64>, delta_eps: f64) {
        for &(r, c, sign) in &self.entries {
            h[(r, c)] += sign * delta_eps;
        }
    }
}

pub fn reg_pattern(view: &GameView) -> RegPattern {
    let t = &view.traj;
    let mut entries = Vec::new();
    for i in 0..view.d() {
        for k in 2..=t.knots {
            for j in 0..t.n() {
                entries.push((view.g_x_off(i) + t.x_off(k) + j, t.x_off(k) + j, 1.0));
            }
        }
        for k in 1..t.knots {
            for j in 0..t.m_per {
                let off = (k - 1) * t.m_per + j;
                entries.push((view.g_u_off(i) + off, view.y_u_off(i) + off, 1.0));
            }
        }
        for k in 1..t.knots {
            for j in 0..t.n() {
                let off = (k - 1) * t.n() + j;
                entries.push((view.g_d_off() + off, view.y_mu_off(i) + off, -1.0));
            }
        }
    }
    RegPattern { entries }
}

/// Permutation that reorders H into a block-tridiagonal matrix with one
/// block per trajectory stage.
///
/// Stage i (0-based) columns: [u_{i+1} per decision player | x_{i+2} |
/// μ_{i+1} per decision player]; rows: [G_u rows for u_{i+1} | G_x rows for
/// x_{i+2} | D_{i+1}]. All couplings in H reach at most one stage away.
#[derive(Debug, Clone)]
pub struct StagePerm {
    pub stages: usize,
    pub block: usize,
    /// row_perm[new] = old row index.
    pub row_perm: Vec<usize>,
    /// col_perm[new] = old column index.
    pub col_perm: Vec<usize>,
}

pub fn stage_perm(view: &GameView) -> StagePerm {
    let t = &view.traj;
    let d = view.d();
    let stages = t.steps();
    let block = d * t.m_per + t.n() + d * t.n();
    let mut row_perm = Vec::with_capacity(view.y_len());
    let mut col_perm = Vec::with_capacity(view.y_len());
    for i in 0..stages {
        for j in 0..d {
            for q in 0..t.m_per {
                row_perm.push(view.g_u_off(j) + i * t.m_per + q);
                col_perm.push(view.y_u_off(j) + i * t.m_per + q);
            }
        }
        for q in 0..t.n() {
            col_perm.push(i * t.n() + q);
        }
        for j in 0..d {
            for q in 0..t.n() {
                row_perm.push(view.g_x_off(j) + i * t.n() + q);
            }
        }
        for q in 0..t.n() {
            row_perm.push(view.g_d_off() + i * t.n() + q);
        }
        for j in 0..d {
            for q in 0..t.n() {
                col_perm.push(view.y_mu_off(j) + i * t.n() + q);
            }
        }
    }
    debug_assert_eq!(row_perm.len(), view.y_len());
    debug_assert_eq!(col_perm.len(), view.y_len());
    StagePerm {
        stages,
        block,
        row_perm,
        col_perm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ModelKind, ModelSpec};
    use crate::game::{ConstraintSet, ControlBounds, PlayerObjective, Segment};
    use crate::numdiff;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_problem(kind: ModelKind, players: usize, knots: usize) -> GameProblem {
        let model = ModelSpec::new(kind);
        let n_per = model.state_dim();
        let m_per = model.control_dim();
        let n = players * n_per;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = JointState::new(
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            n_per,
        );
        let xf = JointState::new(DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)), n_per);
        let obj = PlayerObjective {
            q: DMatrix::identity(n, n) * 0.8,
            r: DMatrix::identity(m_per, m_per) * 0.4,
            qf: DMatrix::identity(n, n) * 1.7,
            xf,
            prox_weight: 0.6,
            prox_radius: 1.5,
            prox_sign: Default::default(),
        };
        let constraints = ConstraintSet {
            collision_radius: 0.5,
            boundaries: vec![Segment::new([-20.0, -4.0], [20.0, -4.0])],
            control_bounds: Some(vec![
                ControlBounds {
                    lower: DVector::from_element(m_per, -3.0),
                    upper: DVector::from_element(m_per, 3.0),
                };
                players
            ]),
            terminal_equalities: Vec::new(),
            enable_collisions: players > 1,
        };
        GameProblem {
            model,
            players,
            horizon: knots,
            dt: 0.1,
            x0,
            objectives: vec![obj; players],
            constraints,
        }
    }

    fn random_y(view: &GameView, seed: u64, scale: f64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(view.y_len(), |_, _| rng.gen_range(-scale..scale))
    }

    fn random_al(view: &GameView, seed: u64) -> AlState {
        let mut al = AlState::new(view, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..al.lambda.len() {
            al.lambda[k] = if rng.gen_bool(0.5) {
                rng.gen_range(0.0..2.0)
            } else {
                0.0
            };
            al.rho[k] = rng.gen_range(0.5..4.0);
        }
        al
    }

    #[test]
    fn activation_cases() {
        let c = DVector::from_row_slice(&[-0.5, -0.5, 0.1, -0.2]);
        let lambda = DVector::from_row_slice(&[0.0, 0.3, 0.0, 0.0]);
        let rho = DVector::from_row_slice(&[2.0, 3.0, 4.0, 5.0]);
        let irho = penalty_activation(&c, &lambda, &rho, 3);
        assert_eq!(irho[0], 0.0); // inactive inequality
        assert_eq!(irho[1], 3.0); // λ > 0 keeps the penalty on
        assert_eq!(irho[2], 4.0); // violated inequality
        assert_eq!(irho[3], 5.0); // equality row: always penalized
        let again = penalty_activation(&c, &lambda, &rho, 3);
        assert_eq!(irho, again);
    }

    #[test]
    fn dual_ascent_cases() {
        let p = test_problem(ModelKind::Unicycle, 1, 3);
        let view = GameView::full(&p);
        let mut al = AlState::new(&view, 1.0);
        al.n_ci = 2;
        al.lambda = DVector::from_row_slice(&[0.0, 0.0, 1.0]);
        al.rho = DVector::from_row_slice(&[1.0, 1.0, 10.0]);
        let c = DVector::from_row_slice(&[-0.5, 0.2, -0.05]);
        dual_ascent(&mut al, &c);
        assert_eq!(al.lambda[0], 0.0);
        assert_abs_diff_eq!(al.lambda[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(al.lambda[2], 0.5, epsilon = 1e-15);
        assert!(al.lambda.iter().take(al.n_ci).all(|&l| l >= 0.0));
    }

    #[test]
    fn penalty_schedule_cases() {
        let p = test_problem(ModelKind::Unicycle, 1, 3);
        let view = GameView::full(&p);
        let mut al = AlState::new(&view, 1.0);
        let rows = al.rho.len();
        penalty_schedule(&mut al);
        assert!(al.rho.iter().all(|&r| r == 10.0));
        penalty_schedule(&mut al);
        assert!(al.rho.iter().all(|&r| r == 100.0));
        al.rho = DVector::from_element(rows, al.rho_max);
        penalty_schedule(&mut al);
        assert!(al.rho.iter().all(|&r| r == al.rho_max));
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let p = test_problem(ModelKind::Unicycle, 3, 5);
        let view = GameView::full(&p);
        let t = &view.traj;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DVector::from_fn(t.n_bar(), |_, _| rng.gen_range(-2.0..2.0));
        let us: Vec<_> = (0..3)
            .map(|_| DVector::from_fn(t.m_bar_per(), |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let mus: Vec<_> = (0..3)
            .map(|_| DVector::from_fn(t.n_bar(), |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let pt = PrimalDualPoint::pack(&view, &x, &us, &mus).unwrap();
        assert_eq!(pt.y.len(), view.y_len());
        let (x2, us2, mus2) = pt.unpack(&view);
        assert_eq!(x, x2);
        assert_eq!(us, us2);
        assert_eq!(mus, mus2);
    }

    #[test]
    fn gradient_zero_at_unconstrained_optimum() {
        let mut p = test_problem(ModelKind::Unicycle, 1, 4);
        p.constraints = ConstraintSet::none();
        p.objectives[0].prox_weight = 0.0;
        let view = GameView::full(&p);
        let t = &view.traj;
        let xf = p.objectives[0].xf.x.clone();
        let mut x = DVector::zeros(t.n_bar());
        for k in 2..=t.knots {
            x.rows_mut(t.x_off(k), t.n()).copy_from(&xf);
        }
        let y = PrimalDualPoint::pack(
            &view,
            &x,
            &[DVector::zeros(t.m_bar_per())],
            &[DVector::zeros(t.n_bar())],
        )
        .unwrap();
        let al = AlState::new(&view, 1.0);
        let g = player_al_gradient(&p, &view, 0, &y.y, &al).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn gradient_reduces_to_cost_gradient_when_inactive() {
        // Far-apart players, λ = 0, μ = 0: constraint and multiplier terms vanish.
        let mut p = test_problem(ModelKind::Unicycle, 2, 4);
        p.constraints.control_bounds = None;
        let t = p.layout();
        let mut x0 = DVector::zeros(t.n());
        x0[4] = 30.0;
        p.x0 = JointState::new(x0.clone(), t.n_per);
        let view = GameView::full(&p);
        let mut x = DVector::zeros(t.n_bar());
        for k in 2..=t.knots {
            x.rows_mut(t.x_off(k), t.n()).copy_from(&x0);
        }
        let y = PrimalDualPoint::pack(
            &view,
            &x,
            &vec![DVector::from_element(t.m_bar_per(), 0.3); 2],
            &vec![DVector::zeros(t.n_bar()); 2],
        )
        .unwrap();
        let al = AlState::new(&view, 1.0);
        for i in 0..2 {
            let g = player_al_gradient(&p, &view, i, &y.y, &al).unwrap();
            let (x_un, us, _) = y.unpack(&view);
            let mut u_full = DVector::zeros(t.m_bar());
            for (j, u) in us.iter().enumerate() {
                u_full.rows_mut(j * t.m_bar_per(), t.m_bar_per()).copy_from(u);
            }
            let cg = player_cost_gradient(&p, i, &x_un, &u_full).unwrap();
            assert_abs_diff_eq!((g - cg).amax(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn gradient_matches_frozen_activation_finite_differences() {
        for (kind, players, knots) in [
            (ModelKind::Unicycle, 2, 4),
            (ModelKind::DoubleIntegrator2D, 3, 3),
        ] {
            let p = test_problem(kind, players, knots);
            let view = GameView::full(&p);
            for seed in 0..3 {
                let y = random_y(&view, 100 + seed, 1.0);
                let al = random_al(&view, 200 + seed);
                let ev = evaluate(&p, &view, &y, &al).unwrap();
                for i in 0..view.d() {
                    let g = player_al_gradient(&p, &view, i, &y, &al).unwrap();
                    let fd = numdiff::gradient(
                        |z| player_al_value(&p, &view, i, z, &al, &ev.irho).unwrap(),
                        &y,
                        1e-6,
                    );
                    let t = &view.traj;
                    let mut fd_sel = DVector::zeros(g.len());
                    fd_sel
                        .rows_mut(0, t.n_bar())
                        .copy_from(&fd.rows(0, t.n_bar()));
                    fd_sel
                        .rows_mut(t.n_bar(), t.m_bar_per())
                        .copy_from(&fd.rows(view.y_u_off(i), t.m_bar_per()));
                    assert!(
                        numdiff::rel_err(&fd_sel, &g) <= 1e-6,
                        "{kind:?} i={i} seed={seed}: {}",
                        numdiff::rel_err(&fd_sel, &g)
                    );
                }
            }
        }
    }

    #[test]
    fn residual_dynamics_block_zero_on_exact_rollout() {
        let p = test_problem(ModelKind::Unicycle, 2, 5);
        let view = GameView::full(&p);
        let t = &view.traj;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let us: Vec<DVector<f64>> = (0..2)
            .map(|_| DVector::from_fn(t.m_bar_per(), |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let controls: Vec<JointControl> = (1..t.knots)
            .map(|k| {
                let mut v = DVector::zeros(t.m());
                for nu in 0..2 {
                    v.rows_mut(nu * t.m_per, t.m_per)
                        .copy_from(&us[nu].rows((k - 1) * t.m_per, t.m_per));
                }
                JointControl::new(v, t.m_per)
            })
            .collect();
        let states = dynamics::rollout(&p.model, &p.x0, &controls, p.dt).unwrap();
        let mut x = DVector::zeros(t.n_bar());
        for (j, s) in states.iter().enumerate() {
            x.rows_mut(j * t.n(), t.n()).copy_from(&s.x);
        }
        let y = PrimalDualPoint::pack(&view, &x, &us, &vec![DVector::zeros(t.n_bar()); 2])
            .unwrap();
        let al = AlState::new(&view, 1.0);
        let res = residual(&p, &view, &y.y, &al).unwrap();
        assert!(res.dynamics_block(&view).amax() <= 1e-12);
    }

    #[test]
    fn control_perturbation_touches_own_block_and_dynamics_only() {
        let p = test_problem(ModelKind::Unicycle, 3, 4);
        let view = GameView::full(&p);
        let al = random_al(&view, 5);
        let mut y0 = random_y(&view, 6, 0.8);
        // With μ = 0 the dynamics-multiplier coupling vanishes and the
        // per-player blocks depend only on (X, U^ν, shared C rows).
        for i in 0..view.d() {
            y0.rows_mut(view.y_mu_off(i), view.traj.n_bar()).fill(0.0);
        }
        let r0 = residual(&p, &view, &y0, &al).unwrap();
        let mut y1 = y0.clone();
        y1[view.y_u_off(1) + 2] += 0.05; // player 1, some control entry
        let r1 = residual(&p, &view, &y1, &al).unwrap();
        let t = &view.traj;
        let blk = t.n_bar() + t.m_bar_per();
        for i in [0usize, 2usize] {
            let a = r0.g.rows(view.g_x_off(i), blk);
            let b = r1.g.rows(view.g_x_off(i), blk);
            assert_eq!(a, b, "block {i} should be untouched");
        }
        assert_ne!(
            r0.g.rows(view.g_x_off(1), blk),
            r1.g.rows(view.g_x_off(1), blk)
        );
        assert_ne!(r0.dynamics_block(&view), r1.dynamics_block(&view));
    }

    #[test]
    fn kkt_constant_for_unconstrained_lq() {
        let mut p = test_problem(ModelKind::DoubleIntegrator2D, 2, 4);
        p.constraints = ConstraintSet::none();
        for o in &mut p.objectives {
            o.prox_weight = 0.0;
        }
        let view = GameView::full(&p);
        let al = AlState::new(&view, 1.0);
        let h1 = kkt_jacobian(&p, &view, &random_y(&view, 1, 2.0), &al).unwrap();
        let h2 = kkt_jacobian(&p, &view, &random_y(&view, 2, 2.0), &al).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn kkt_exact_for_linear_dynamics_and_linear_constraints() {
        // Double integrator (linear step, no dynamics curvature) with control
        // bounds (linear rows, no constraint curvature) and proximity cost
        // (exact analytic Hessian): H equals ∂G/∂y up to FD error.
        let mut p = test_problem(ModelKind::DoubleIntegrator2D, 2, 4);
        p.constraints.enable_collisions = false;
        p.constraints.boundaries.clear();
        let view = GameView::full(&p);
        let al = random_al(&view, 21);
        let y = random_y(&view, 22, 0.7);
        let ev = evaluate(&p, &view, &y, &al).unwrap();
        let h = kkt_jacobian(&p, &view, &y, &al).unwrap();
        let irho = ev.irho.clone();
        let fd = numdiff::jacobian(
            |z| {
                // Freeze the activation pattern like the Jacobian does.
                let evz = Eval {
                    x: z.rows(0, view.traj.n_bar()).into_owned(),
                    u_full: view.u_full(z),
                    c: {
                        let x = z.rows(0, view.traj.n_bar()).into_owned();
                        let u = view.u_full(z);
                        let mut c = DVector::zeros(view.rows.len());
                        eval_constraints_into(&p, &view.rows, &x, &u, &mut c);
                        c
                    },
                    irho: irho.clone(),
                    cjac: constraint_jacobian(
                        &p,
                        &view.rows,
                        &z.rows(0, view.traj.n_bar()).into_owned(),
                        &view.u_full(z),
                    ),
                    d: DVector::zeros(0),
                };
                let lin = linearizations(&p, &view, &evz).unwrap();
                let mut g = DVector::zeros(view.g_len());
                for i in 0..view.d() {
                    let gi =
                        player_gradient_from_eval(&p, &view, i, z, &evz, &lin, &al.lambda)
                            .unwrap();
                    g.rows_mut(view.g_x_off(i), gi.len()).copy_from(&gi);
                }
                let x = z.rows(0, view.traj.n_bar()).into_owned();
                let u = view.u_full(z);
                let t = &view.traj;
                for k in 1..t.knots {
                    let xk = JointState::new(
                        game::state_at(&p.x0.x, &x, t, k).into_owned(),
                        t.n_per,
                    );
                    let uk = joint_control_at(t, &u, k);
                    let next = dynamics::step(&p.model, &xk, &uk, p.dt).unwrap();
                    let defect = x.rows(t.x_off(k + 1), t.n()) - next.x;
                    g.rows_mut(view.g_d_off() + (k - 1) * t.n(), t.n())
                        .copy_from(&defect);
                }
                g
            },
            &y,
            1e-6,
        );
        assert!(
            numdiff::rel_err_mat(&fd, &h) <= 1e-5,
            "rel err {}",
            numdiff::rel_err_mat(&fd, &h)
        );
    }

    #[test]
    fn kkt_mu_block_is_transposed_dynamics_jacobian() {
        let p = test_problem(ModelKind::Unicycle, 2, 4);
        let view = GameView::full(&p);
        let al = random_al(&view, 31);
        let y = random_y(&view, 32, 0.9);
        let h = kkt_jacobian(&p, &view, &y, &al).unwrap();
        let t = &view.traj;
        for i in 0..view.d() {
            let nu = view.decision[i];
            // ∂G^i/∂μ^i rows (X then U^ν) against D rows over (X, U^ν).
            let gmu_x = h.view((view.g_x_off(i), view.y_mu_off(i)), (t.n_bar(), t.n_bar()));
            let d_x = h.view((view.g_d_off(), 0), (t.n_bar(), t.n_bar()));
            assert_eq!(gmu_x.transpose(), d_x.into_owned());
            let gmu_u = h.view(
                (view.g_u_off(i), view.y_mu_off(i)),
                (t.m_bar_per(), t.n_bar()),
            );
            let d_u = h.view(
                (view.g_d_off(), view.y_u_off(view.decision_index(nu).unwrap())),
                (t.n_bar(), t.m_bar_per()),
            );
            assert_eq!(gmu_u.transpose(), d_u.into_owned());
        }
    }

    #[test]
    fn kkt_dynamics_rows_match_finite_differences() {
        let p = test_problem(ModelKind::Unicycle, 2, 4);
        let view = GameView::full(&p);
        let al = random_al(&view, 41);
        let y = random_y(&view, 42, 0.6);
        let h = kkt_jacobian(&p, &view, &y, &al).unwrap();
        let t = &view.traj;
        let fd = numdiff::jacobian(
            |z| {
                let x = z.rows(0, t.n_bar()).into_owned();
                let u = view.u_full(z);
                let mut d = DVector::zeros(t.n_bar());
                for k in 1..t.knots {
                    let xk = JointState::new(
                        game::state_at(&p.x0.x, &x, t, k).into_owned(),
                        t.n_per,
                    );
                    let uk = joint_control_at(t, &u, k);
                    let next = dynamics::step(&p.model, &xk, &uk, p.dt).unwrap();
                    d.rows_mut((k - 1) * t.n(), t.n())
                        .copy_from(&(x.rows(t.x_off(k + 1), t.n()) - next.x));
                }
                d
            },
            &y,
            1e-6,
        );
        let d_rows = h.view((view.g_d_off(), 0), (t.n_bar(), view.y_len()));
        assert!(
            numdiff::rel_err_mat(&fd, &d_rows.into_owned()) <= 1e-5,
            "dynamics rows mismatch"
        );
    }

    #[test]
    fn staged_permutation_is_block_tridiagonal() {
        for (players, ego) in [(2usize, None), (3, Some(1usize))] {
            let p = test_problem(ModelKind::Unicycle, players, 5);
            let view = match ego {
                None => GameView::full(&p),
                Some(e) => GameView::single(
                    &p,
                    e,
                    DVector::from_element(p.layout().m_bar(), 0.1),
                    RowFilter::All,
                )
                .unwrap(),
            };
            let perm = stage_perm(&view);
            let side = view.y_len();
            assert_eq!(perm.stages * perm.block, side);
            let mut seen_r = vec![false; side];
            let mut seen_c = vec![false; side];
            for i in 0..side {
                seen_r[perm.row_perm[i]] = true;
                seen_c[perm.col_perm[i]] = true;
            }
            assert!(seen_r.iter().all(|&b| b));
            assert!(seen_c.iter().all(|&b| b));
            let al = random_al(&view, 51);
            let y = random_y(&view, 52, 0.8);
            let mut h = kkt_jacobian(&p, &view, &y, &al).unwrap();
            reg_pattern(&view).apply(&mut h, 1e-3);
            for bi in 0..perm.stages {
                for bj in 0..perm.stages {
                    if (bi as isize - bj as isize).abs() <= 1 {
                        continue;
                    }
                    for r in 0..perm.block {
                        for c in 0..perm.block {
                            let v = h[(
                                perm.row_perm[bi * perm.block + r],
                                perm.col_perm[bj * perm.block + c],
                            )];
                            assert_eq!(
                                v, 0.0,
                                "nonzero outside band at stage ({bi},{bj}) players={players}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn regularization_makes_degenerate_kkt_invertible() {
        // Zero all cost weights: H becomes singular (rank-deficient primal
        // blocks), the stage-local pattern must restore invertibility.
        let mut p = test_problem(ModelKind::Unicycle, 2, 3);
        p.constraints = ConstraintSet::none();
        for o in &mut p.objectives {
            o.q *= 0.0;
            o.r *= 0.0;
            o.qf *= 0.0;
            o.prox_weight = 0.0;
        }
        let view = GameView::full(&p);
        let al = AlState::new(&view, 1.0);
        let y = random_y(&view, 61, 0.3);
        let mut h = kkt_jacobian(&p, &view, &y, &al).unwrap();
        assert!(h.clone().lu().try_inverse().is_none() || h.determinant().abs() < 1e-12);
        reg_pattern(&view).apply(&mut h, 1e-3);
        let det = h.clone().lu().determinant();
        assert!(det.abs() > 0.0 && det.is_finite());
        assert!(h.lu().try_inverse().is_some());
    }

    #[test]
    fn single_player_view_filters_rows() {
        let p = test_problem(ModelKind::Unicycle, 3, 4);
        let t = p.layout();
        let all = GameView::full(&p);
        let ego = GameView::single(
            &p,
            0,
            DVector::zeros(t.m_bar()),
            RowFilter::InvolvingPlayer(0),
        )
        .unwrap();
        assert!(ego.rows.len() < all.rows.len());
        assert!(ego.rows.iter().all(|r| r.involves(0)));
        // Collisions among players 1 and 2 must be gone.
        assert!(!ego
            .rows
            .iter()
            .any(|r| matches!(r, RowKind::Collision { a: 1, b: 2, .. })));
        let full_rows = GameView::single(&p, 0, DVector::zeros(t.m_bar()), RowFilter::All)
            .unwrap();
        assert_eq!(full_rows.rows.len(), all.rows.len());
    }
}
