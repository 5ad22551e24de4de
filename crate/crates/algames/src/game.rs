//! Game instance definition: per-player objectives, shared constraints, and
//! their evaluation and differentiation over decision trajectories.
//!
//! Decision variables are the stacked states X = (x_2..x_N) and per-player
//! control sequences U^ν = (u^ν_1..u^ν_{N-1}); x_1 = x0 is a constant.
//! Constraint rows use the feasible-when-nonpositive convention C_i ≤ 0.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dynamics::{JointState, ModelSpec};
use crate::error::GameError;

/// Eigenvalue floor accepted for PSD checks.
const PSD_FLOOR: f64 = -1e-10;
/// Minimum eigenvalue required of control weights.
const PD_FLOOR: f64 = 1e-10;
/// Below this separation the proximity term is treated as flat.
const PROX_MIN_DIST: f64 = 1e-9;

/// Which side of the proximity kink incurs cost.
///
/// `AsPrinted` penalizes separation beyond η (the literal formula
/// γ(max(0, ‖x̃^ν−x̃^ω‖−η))²); `Repulsive` penalizes proximity below η,
/// which is what collision-averse agents want, and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProximitySign {
    AsPrinted,
    #[default]
    Repulsive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlayerObjective {
    /// Stage state weight over the joint state (applied for k = 1..N-1).
    pub q: DMatrix<f64>,
    /// Control weight for this player's inputs.
    pub r: DMatrix<f64>,
    /// Terminal state weight over the joint state (applied at k = N).
    pub qf: DMatrix<f64>,
    /// Goal joint state.
    pub xf: JointState,
    /// Proximity penalty magnitude γ_cost ≥ 0.
    pub prox_weight: f64,
    /// Proximity radius η ≥ 0 (meters).
    pub prox_radius: f64,
    pub prox_sign: ProximitySign,
}

impl PlayerObjective {
    /// Quadratic objective with no proximity term.
    pub fn quadratic(q: DMatrix<f64>, r: DMatrix<f64>, qf: DMatrix<f64>, xf: JointState) -> Self {
        PlayerObjective {
            q,
            r,
            qf,
            xf,
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: ProximitySign::default(),
        }
    }

    fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<(), GameError> {
        let asym = (m - m.transpose()).amax();
        if asym > 1e-9 * m.amax().max(1.0) {
            return Err(GameError::InvalidArgument {
                arg: what,
                reason: format!("must be symmetric, max asymmetry {asym}"),
            });
        }
        Ok(())
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        let sym = 0.5 * (m + m.transpose());
        sym.symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self, n: usize, m_per: usize) -> Result<(), GameError> {
        for (mat, dim, what) in [
            (&self.q, n, "Q"),
            (&self.qf, n, "Qf"),
            (&self.r, m_per, "R"),
        ] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(GameError::DimensionMismatch {
                    what: "objective weight matrix",
                    expected: dim,
                    got: mat.nrows(),
                });
            }
            Self::check_symmetric(mat, what)?;
        }
        if Self::min_eig(&self.q) < PSD_FLOOR || Self::min_eig(&self.qf) < PSD_FLOOR {
            return Err(GameError::InvalidArgument {
                arg: "Q/Qf",
                reason: "state weights must be positive semidefinite".into(),
            });
        }
        if Self::min_eig(&self.r) < PD_FLOOR {
            return Err(GameError::InvalidArgument {
                arg: "R",
                reason: format!("control weight must be positive definite (min eig ≥ {PD_FLOOR})"),
            });
        }
        if self.xf.x.len() != n {
            return Err(GameError::DimensionMismatch {
                what: "goal state",
                expected: n,
                got: self.xf.x.len(),
            });
        }
        if self.prox_weight < 0.0 || self.prox_radius < 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "proximity",
                reason: "γ_cost and η must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// A 2D wall segment that all vehicles must keep a radius-r clearance from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Segment {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
}

impl Segment {
    pub fn new(p0: [f64; 2], p1: [f64; 2]) -> Self {
        Segment { p0, p1 }
    }

    pub fn length(&self) -> f64 {
        let dx = self.p1[0] - self.p0[0];
        let dy = self.p1[1] - self.p0[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Closest point on the segment to q, with the clamped parameter t ∈ [0,1].
    pub fn closest_point(&self, q: [f64; 2]) -> ([f64; 2], f64) {
        let d = [self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = (((q[0] - self.p0[0]) * d[0] + (q[1] - self.p0[1]) * d[1]) / len2).clamp(0.0, 1.0);
        ([self.p0[0] + t * d[0], self.p0[1] + t * d[1]], t)
    }
}

/// Per-player box bounds on controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Terminal equality rows pinning components of x_N for one player.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalEquality {
    pub player: usize,
    /// (state component within the player's block, target value)
    pub components: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// Collision-circle radius r; pair rows read (2r)² − ‖x̃^ν_k − x̃^ω_k‖² ≤ 0.
    pub collision_radius: f64,
    pub boundaries: Vec<Segment>,
    /// One entry per player; None everywhere means no control bounds.
    pub control_bounds: Option<Vec<ControlBounds>>,
    pub terminal_equalities: Vec<TerminalEquality>,
    /// When false, pairwise collision rows are omitted (cost-only coupling).
    pub enable_collisions: bool,
}

impl ConstraintSet {
    pub fn none() -> Self {
        ConstraintSet {
            collision_radius: 1.0,
            boundaries: Vec::new(),
            control_bounds: None,
            terminal_equalities: Vec::new(),
            enable_collisions: false,
        }
    }

    pub fn with_collisions(radius: f64) -> Self {
        ConstraintSet {
            collision_radius: radius,
            enable_collisions: true,
            ..ConstraintSet::none()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameProblem {
    pub model: ModelSpec,
    pub players: usize,
    /// Number of knots N (trajectory has N-1 decision states x_2..x_N).
    pub horizon: usize,
    pub dt: f64,
    pub x0: JointState,
    pub objectives: Vec<PlayerObjective>,
    pub constraints: ConstraintSet,
}

impl GameProblem {
    pub fn layout(&self) -> TrajLayout {
        TrajLayout {
            players: self.players,
            n_per: self.model.state_dim(),
            m_per: self.model.control_dim(),
            knots: self.horizon,
        }
    }

    pub fn validate(&self) -> Result<(), GameError> {
        self.model.validate()?;
        if self.players < 1 {
            return Err(GameError::InvalidArgument {
                arg: "players",
                reason: "need at least one player".into(),
            });
        }
        if self.horizon < 2 {
            return Err(GameError::InvalidArgument {
                arg: "horizon",
                reason: "need at least two knots".into(),
            });
        }
        if self.dt <= 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "dt",
                reason: "must be positive".into(),
            });
        }
        let lay = self.layout();
        if self.x0.x.len() != lay.n() {
            return Err(GameError::DimensionMismatch {
                what: "x0",
                expected: lay.n(),
                got: self.x0.x.len(),
            });
        }
        if self.objectives.len() != self.players {
            return Err(GameError::DimensionMismatch {
                what: "objectives",
                expected: self.players,
                got: self.objectives.len(),
            });
        }
        for o in &self.objectives {
            o.validate(lay.n(), lay.m_per)?;
        }
        let c = &self.constraints;
        if c.enable_collisions && c.collision_radius <= 0.0 {
            return Err(GameError::InvalidArgument {
                arg: "collision_radius",
                reason: "must be positive".into(),
            });
        }
        for s in &c.boundaries {
            if s.length() <= 0.0 {
                return Err(GameError::InvalidArgument {
                    arg: "boundaries",
                    reason: "segments must have positive length".into(),
                });
            }
        }
        if let Some(bounds) = &c.control_bounds {
            if bounds.len() != self.players {
                return Err(GameError::DimensionMismatch {
                    what: "control_bounds",
                    expected: self.players,
                    got: bounds.len(),
                });
            }
            for b in bounds {
                if b.lower.len() != lay.m_per || b.upper.len() != lay.m_per {
                    return Err(GameError::DimensionMismatch {
                        what: "control bound vector",
                        expected: lay.m_per,
                        got: b.lower.len(),
                    });
                }
                if b.lower.iter().zip(b.upper.iter()).any(|(l, u)| l >= u) {
                    return Err(GameError::InvalidArgument {
                        arg: "control_bounds",
                        reason: "lower bounds must be strictly below upper bounds".into(),
                    });
                }
            }
        }
        for eq in &c.terminal_equalities {
            if eq.player >= self.players {
                return Err(GameError::InvalidArgument {
                    arg: "terminal_equalities",
                    reason: format!("player {} out of range", eq.player),
                });
            }
            if eq.components.iter().any(|(i, _)| *i >= lay.n_per) {
                return Err(GameError::InvalidArgument {
                    arg: "terminal_equalities",
                    reason: "component index out of range".into(),
                });
            }
        }
        Ok(())
    }
}

/// Index arithmetic for flat trajectory vectors.
///
/// X stacks x_2..x_N; U stacks player-major control sequences
/// [U^1 | … | U^M] with u^ν_k at offset ν·m̄_per + (k-1)·m_per.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajLayout {
    pub players: usize,
    pub n_per: usize,
    pub m_per: usize,
    pub knots: usize,
}

impl TrajLayout {
    pub fn n(&self) -> usize {
        self.players * self.n_per
    }

    pub fn m(&self) -> usize {
        self.players * self.m_per
    }

    pub fn steps(&self) -> usize {
        self.knots - 1
    }

    pub fn n_bar(&self) -> usize {
        self.n() * self.steps()
    }

    pub fn m_bar_per(&self) -> usize {
        self.m_per * self.steps()
    }

    pub fn m_bar(&self) -> usize {
        self.m() * self.steps()
    }

    /// Offset of x_k (k = 2..N) within X.
    pub fn x_off(&self, k: usize) -> usize {
        debug_assert!(k >= 2 && k <= self.knots);
        (k - 2) * self.n()
    }

    /// Offset of u^ν_k (k = 1..N-1) within U.
    pub fn u_off(&self, nu: usize, k: usize) -> usize {
        debug_assert!(k >= 1 && k < self.knots);
        nu * self.m_bar_per() + (k - 1) * self.m_per
    }

    /// Offset of player ν's block within a joint state.
    pub fn player_x(&self, nu: usize) -> usize {
        nu * self.n_per
    }
}

/// Joint state at knot k: x0 for k = 1, otherwise a view into X.
pub fn state_at<'a>(
    x0: &'a DVector<f64>,
    x_traj: &'a DVector<f64>,
    lay: &TrajLayout,
    k: usize,
) -> DVectorView<'a, f64> {
    if k == 1 {
        x0.rows(0, lay.n())
    } else {
        x_traj.rows(lay.x_off(k), lay.n())
    }
}

fn check_traj_dims(p: &GameProblem, x_traj: &DVector<f64>, u: &DVector<f64>) -> Result<TrajLayout, GameError> {
    let lay = p.layout();
    if x_traj.len() != lay.n_bar() {
        return Err(GameError::DimensionMismatch {
            what: "state trajectory",
            expected: lay.n_bar(),
            got: x_traj.len(),
        });
    }
    if u.len() != lay.m_bar() {
        return Err(GameError::DimensionMismatch {
            what: "control trajectory",
            expected: lay.m_bar(),
            got: u.len(),
        });
    }
    Ok(lay)
}

/// Value, gradient coefficient, and Hessian of one active proximity pair.
///
/// On the active branch both sign conventions evaluate to γ(d−η)² with
/// gradient 2γ(d−η)Δ/d; only the activation condition differs.
pub(crate) struct ProxTerm {
    pub value: f64,
    /// ∂/∂Δ = grad_coeff · Δ
    pub grad_coeff: f64,
    pub hess: DMatrix<f64>,
}

pub(crate) fn prox_term(
    gamma: f64,
    eta: f64,
    sign: ProximitySign,
    delta: &DVector<f64>,
    want_hess: bool,
) -> Option<ProxTerm> {
    if gamma == 0.0 {
        return None;
    }
    let d = delta.norm();
    if d < PROX_MIN_DIST {
        return None;
    }
    let active = match sign {
        ProximitySign::AsPrinted => d > eta,
        ProximitySign::Repulsive => d < eta,
    };
    if !active {
        return None;
    }
    let s = d - eta;
    let value = gamma * s * s;
    let grad_coeff = 2.0 * gamma * s / d;
    let hess = if want_hess {
        let dim = delta.len();
        let uu = delta * delta.transpose() / (d * d);
        2.0 * gamma * (DMatrix::identity(dim, dim) - (eta / d) * (DMatrix::identity(dim, dim) - uu))
    } else {
        DMatrix::zeros(0, 0)
    };
    Some(ProxTerm {
        value,
        grad_coeff,
        hess,
    })
}

/// Player ν's total cost over the trajectory: stage quadratics for k=1..N-1
/// (x_1 = x0 contributes a constant), terminal quadratic at x_N, own control
/// effort, and the pairwise proximity penalty for k=1..N.
pub fn player_cost(
    p: &GameProblem,
    nu: usize,
    x_traj: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64, GameError> {
    let lay = check_traj_dims(p, x_traj, u)?;
    let obj = &p.objectives[nu];
    let pos_dim = p.model.kind.pos_dim();
    let mut total = 0.0;
    for k in 1..=lay.knots {
        let xk = state_at(&p.x0.x, x_traj, &lay, k);
        let dx = &xk - &obj.xf.x;
        if k < lay.knots {
            total += 0.5 * (&obj.q * &dx).dot(&dx);
            let uk = u.rows(lay.u_off(nu, k), lay.m_per);
            total += 0.5 * (&obj.r * &uk).dot(&uk);
        } else {
            total += 0.5 * (&obj.qf * &dx).dot(&dx);
        }
        for om in 0..lay.players {
            if om == nu {
                continue;
            }
            let delta = xk.rows(lay.player_x(nu), pos_dim) - xk.rows(lay.player_x(om), pos_dim);
            if let Some(t) = prox_term(obj.prox_weight, obj.prox_radius, obj.prox_sign, &delta, false)
            {
                total += t.value;
            }
        }
    }
    Ok(total)
}

/// Analytic gradient of `player_cost` with respect to (X, U^ν), stacked as
/// [∂/∂X (n̄) | ∂/∂U^ν (m̄_per)].
pub fn player_cost_gradient(
    p: &GameProblem,
    nu: usize,
    x_traj: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, GameError> {
    let lay = check_traj_dims(p, x_traj, u)?;
    let obj = &p.objectives[nu];
    let pos_dim = p.model.kind.pos_dim();
    let mut g = DVector::zeros(lay.n_bar() + lay.m_bar_per());
    for k in 2..=lay.knots {
        let xk = state_at(&p.x0.x, x_traj, &lay, k);
        let dx = &xk - &obj.xf.x;
        let w = if k < lay.knots { &obj.q } else { &obj.qf };
        let mut gx = w * dx;
        for om in 0..lay.players {
            if om == nu {
                continue;
            }
            let delta = xk.rows(lay.player_x(nu), pos_dim) - xk.rows(lay.player_x(om), pos_dim);
            if let Some(t) = prox_term(obj.prox_weight, obj.prox_radius, obj.prox_sign, &delta, false)
            {
                for i in 0..pos_dim {
                    gx[lay.player_x(nu) + i] += t.grad_coeff * delta[i];
                    gx[lay.player_x(om) + i] -= t.grad_coeff * delta[i];
                }
            }
        }
        g.rows_mut(lay.x_off(k), lay.n()).copy_from(&gx);
    }
    for k in 1..lay.knots {
        let uk = u.rows(lay.u_off(nu, k), lay.m_per);
        g.rows_mut(lay.n_bar() + (k - 1) * lay.m_per, lay.m_per)
            .copy_from(&(&obj.r * uk));
    }
    Ok(g)
}

/// What a constraint row measures and who it involves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    /// (2r)² − ‖x̃^a_k − x̃^b_k‖² ≤ 0 for the unordered pair a < b.
    Collision { a: usize, b: usize, k: usize },
    /// r² − ‖x̃^player_k − q_b‖² ≤ 0 against boundary segment `segment`.
    Boundary { player: usize, segment: usize, k: usize },
    /// u^player_k[index] − upper ≤ 0.
    ControlUpper { player: usize, index: usize, k: usize },
    /// lower − u^player_k[index] ≤ 0.
    ControlLower { player: usize, index: usize, k: usize },
    /// x_N[player block, component] − target = 0.
    TerminalEquality { player: usize, component: usize },
}

impl RowKind {
    pub fn is_equality(&self) -> bool {
        matches!(self, RowKind::TerminalEquality { .. })
    }

    pub fn involves(&self, player: usize) -> bool {
        match *self {
            RowKind::Collision { a, b, .. } => a == player || b == player,
            RowKind::Boundary { player: p, .. }
            | RowKind::ControlUpper { player: p, .. }
            | RowKind::ControlLower { player: p, .. }
            | RowKind::TerminalEquality { player: p, .. } => p == player,
        }
    }
}

/// Deterministic row order: collisions (k-major, pair-minor), boundary rows
/// (k-major, player, segment), control bounds (k-major, player, entry with the
/// upper row first), then terminal equalities.
pub fn constraint_rows(p: &GameProblem) -> Vec<RowKind> {
    let lay = p.layout();
    let c = &p.constraints;
    let mut rows = Vec::new();
    if c.enable_collisions {
        for k in 1..=lay.knots {
            for a in 0..lay.players {
                for b in (a + 1)..lay.players {
                    rows.push(RowKind::Collision { a, b, k });
                }
            }
        }
    }
    for k in 1..=lay.knots {
        for player in 0..lay.players {
            for segment in 0..c.boundaries.len() {
                rows.push(RowKind::Boundary { player, segment, k });
            }
        }
    }
    if let Some(bounds) = &c.control_bounds {
        for k in 1..lay.knots {
            for (player, _) in bounds.iter().enumerate() {
                for index in 0..lay.m_per {
                    rows.push(RowKind::ControlUpper { player, index, k });
                    rows.push(RowKind::ControlLower { player, index, k });
                }
            }
        }
    }
    for eq in &c.terminal_equalities {
        for (component, _) in &eq.components {
            rows.push(RowKind::TerminalEquality {
                player: eq.player,
                component: *component,
            });
        }
    }
    rows
}

/// Number of inequality rows (equalities are ordered last).
pub fn inequality_count(rows: &[RowKind]) -> usize {
    rows.iter().filter(|r| !r.is_equality()).count()
}

/// Constraint values with their row metadata.
#[derive(Debug, Clone)]
pub struct ConstraintValues {
    pub c: DVector<f64>,
    pub rows: Vec<RowKind>,
}

fn eq_target(p: &GameProblem, player: usize, component: usize) -> f64 {
    p.constraints
        .terminal_equalities
        .iter()
        .find(|e| e.player == player)
        .and_then(|e| {
            e.components
                .iter()
                .find(|(i, _)| *i == component)
                .map(|(_, t)| *t)
        })
        .expect("terminal equality row refers to a declared component")
}

/// Evaluate all constraint rows at (X, U) into `out` (len = rows.len()).
pub fn eval_constraints_into(
    p: &GameProblem,
    rows: &[RowKind],
    x_traj: &DVector<f64>,
    u: &DVector<f64>,
    out: &mut DVector<f64>,
) {
    let lay = p.layout();
    let pos_dim = p.model.kind.pos_dim();
    let r = p.constraints.collision_radius;
    for (i, row) in rows.iter().enumerate() {
        out[i] = match *row {
            RowKind::Collision { a, b, k } => {
                let xk = state_at(&p.x0.x, x_traj, &lay, k);
                let mut d2 = 0.0;
                for j in 0..pos_dim {
                    let d = xk[lay.player_x(a) + j] - xk[lay.player_x(b) + j];
                    d2 += d * d;
                }
                (2.0 * r) * (2.0 * r) - d2
            }
            RowKind::Boundary { player, segment, k } => {
                let xk = state_at(&p.x0.x, x_traj, &lay, k);
                let q = [xk[lay.player_x(player)], xk[lay.player_x(player) + 1]];
                let (cp, _) = p.constraints.boundaries[segment].closest_point(q);
                let dx = q[0] - cp[0];
                let dy = q[1] - cp[1];
                r * r - (dx * dx + dy * dy)
            }
            RowKind::ControlUpper { player, index, k } => {
                let bounds = p.constraints.control_bounds.as_ref().unwrap();
                u[lay.u_off(player, k) + index] - bounds[player].upper[index]
            }
            RowKind::ControlLower { player, index, k } => {
                let bounds = p.constraints.control_bounds.as_ref().unwrap();
                bounds[player].lower[index] - u[lay.u_off(player, k) + index]
            }
            RowKind::TerminalEquality { player, component } => {
                let xn = state_at(&p.x0.x, x_traj, &lay, lay.knots);
                xn[lay.player_x(player) + component] - eq_target(p, player, component)
            }
        };
    }
}

pub fn eval_constraints(
    p: &GameProblem,
    x_traj: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<ConstraintValues, GameError> {
    check_traj_dims(p, x_traj, u)?;
    let rows = constraint_rows(p);
    let mut c = DVector::zeros(rows.len());
    eval_constraints_into(p, &rows, x_traj, u, &mut c);
    Ok(ConstraintValues { c, rows })
}

/// Row-wise sparse Jacobian over the primal variables [X | U].
#[derive(Debug, Clone)]
pub struct SparseJacobian {
    /// Per row: (flat primal column, value) pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub ncols: usize,
}

impl SparseJacobian {
    pub fn to_dense(&self, nrows: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(nrows, self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Analytic constraint Jacobian. Rows touching only x_1 = x0 are constant and
/// come out empty. The boundary closest point is treated as fixed, which is
/// the exact derivative for interior projections (the residual is
/// perpendicular to the segment) and the chosen subgradient at endpoint
/// clamps.
pub fn constraint_jacobian(
    p: &GameProblem,
    rows: &[RowKind],
    x_traj: &DVector<f64>,
    _u: &DVector<f64>,
) -> SparseJacobian {
    let lay = p.layout();
    let pos_dim = p.model.kind.pos_dim();
    let ncols = lay.n_bar() + lay.m_bar();
    let u_col = |nu: usize, k: usize, j: usize| lay.n_bar() + lay.u_off(nu, k) + j;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut entries: Vec<(usize, f64)> = Vec::new();
        match *row {
            RowKind::Collision { a, b, k } => {
                if k >= 2 {
                    let xk = state_at(&p.x0.x, x_traj, &lay, k);
                    let base = lay.x_off(k);
                    for j in 0..pos_dim {
                        let d = xk[lay.player_x(a) + j] - xk[lay.player_x(b) + j];
                        entries.push((base + lay.player_x(a) + j, -2.0 * d));
                        entries.push((base + lay.player_x(b) + j, 2.0 * d));
                    }
                }
            }
            RowKind::Boundary { player, segment, k } => {
                if k >= 2 {
                    let xk = state_at(&p.x0.x, x_traj, &lay, k);
                    let q = [xk[lay.player_x(player)], xk[lay.player_x(player) + 1]];
                    let (cp, _) = p.constraints.boundaries[segment].closest_point(q);
                    let base = lay.x_off(k) + lay.player_x(player);
                    entries.push((base, -2.0 * (q[0] - cp[0])));
                    entries.push((base + 1, -2.0 * (q[1] - cp[1])));
                }
            }
            RowKind::ControlUpper { player, index, k } => {
                entries.push((u_col(player, k, index), 1.0));
            }
            RowKind::ControlLower { player, index, k } => {
                entries.push((u_col(player, k, index), -1.0));
            }
            RowKind::TerminalEquality { player, component } => {
                entries.push((lay.x_off(lay.knots) + lay.player_x(player) + component, 1.0));
            }
        }
        out.push(entries);
    }
    SparseJacobian { rows: out, ncols }
}
