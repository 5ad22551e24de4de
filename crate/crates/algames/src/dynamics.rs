//! Vehicle and robot models, RK4 integration, and linearization of the
//! discrete step map.
//!
//! All players in a game share one model kind; the joint state stacks the
//! per-player states and players evolve independently, so the joint state
//! Jacobian is block diagonal and the control Jacobian has one nonzero block
//! per player. Unicycle, bicycle, and double-integrator Jacobians are exact
//! (the continuous Jacobians are chained through the RK4 stages); the
//! quadrotor uses central finite differences.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use crate::error::GameError;
use crate::numdiff;

/// Fixed-step central-difference scale used for finite-difference Jacobians.
const FD_H: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// State (px, py, θ, v), control (ω, a).
    Unicycle,
    /// Kinematic bicycle: state (px, py, θ, v), control (δ steering, a).
    Bicycle,
    /// State (px, py, vx, vy), control (ax, ay).
    DoubleIntegrator2D,
    /// State (px, py, pz, vx, vy, vz), control (ax, ay, az).
    DoubleIntegrator3D,
    /// 12-state Euler-angle quadrotor: (p, v, euler φθψ, ω body), control = 4 rotor thrusts.
    Quadrotor,
}

impl ModelKind {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelKind::Unicycle | ModelKind::Bicycle | ModelKind::DoubleIntegrator2D => 4,
            ModelKind::DoubleIntegrator3D => 6,
            ModelKind::Quadrotor => 12,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ModelKind::Unicycle | ModelKind::Bicycle | ModelKind::DoubleIntegrator2D => 2,
            ModelKind::DoubleIntegrator3D => 3,
            ModelKind::Quadrotor => 4,
        }
    }

    /// Number of leading position components (2 planar, 3 spatial).
    pub fn pos_dim(&self) -> usize {
        match self {
            ModelKind::DoubleIntegrator3D | ModelKind::Quadrotor => 3,
            _ => 2,
        }
    }

    /// Index of the heading channel for planar heading models.
    pub fn heading_index(&self) -> Option<usize> {
        match self {
            ModelKind::Unicycle | ModelKind::Bicycle => Some(2),
            _ => None,
        }
    }

    fn analytic_jacobians(&self) -> bool {
        !matches!(self, ModelKind::Quadrotor)
    }
}

/// Model-specific scalar parameters. Unused entries are ignored by models
/// that do not need them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelParams {
    /// Bicycle wheelbase (m).
    pub wheelbase: f64,
    /// Quadrotor mass (kg).
    pub mass: f64,
    /// Quadrotor diagonal inertia (kg m²).
    pub inertia: [f64; 3],
    /// Quadrotor arm length (m).
    pub arm_len: f64,
    /// Rotor drag-torque per unit thrust (m).
    pub torque_coeff: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            wheelbase: 2.7,
            mass: 1.0,
            inertia: [0.01, 0.01, 0.02],
            arm_len: 0.2,
            torque_coeff: 0.01,
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub params: ModelParams,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            params: ModelParams::default(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.kind.control_dim()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let p = &self.params;
        let all = [
            p.wheelbase,
            p.mass,
            p.inertia[0],
            p.inertia[1],
            p.inertia[2],
            p.arm_len,
            p.torque_coeff,
            p.gravity,
        ];
        if all.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(GameError::InvalidArgument {
                arg: "params",
                reason: "all model parameters must be strictly positive".into(),
            });
        }
        Ok(())
    }
}

/// Stacked state of all players. `n_per` is the per-player state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub x: DVector<f64>,
    pub n_per: usize,
}

impl JointState {
    pub fn new(x: DVector<f64>, n_per: usize) -> Self {
        assert!(
            n_per > 0 && x.len() % n_per == 0,
            "joint state length {} not a multiple of per-player dim {}",
            x.len(),
            n_per
        );
        JointState { x, n_per }
    }

    pub fn players(&self) -> usize {
        self.x.len() / self.n_per
    }

    /// Index range of player `nu`'s block.
    pub fn player_offset(&self, nu: usize) -> usize {
        nu * self.n_per
    }

    pub fn player(&self, nu: usize) -> DVectorView<'_, f64> {
        self.x.rows(nu * self.n_per, self.n_per)
    }

    pub fn player_mut(&mut self, nu: usize) -> DVectorViewMut<'_, f64> {
        self.x.rows_mut(nu * self.n_per, self.n_per)
    }

    /// Wrap heading channels into (-π, π]. States are kept unwrapped during
    /// optimization; this is for reporting only.
    pub fn normalized_headings(&self, kind: ModelKind) -> JointState {
        let mut out = self.clone();
        if let Some(h) = kind.heading_index() {
            for nu in 0..self.players() {
                let i = nu * self.n_per + h;
                out.x[i] = wrap_angle(self.x[i]);
            }
        }
        out
    }
}

/// Wrap an angle to (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Stacked controls of all players. `m_per` is the per-player control dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointControl {
    pub u: DVector<f64>,
    pub m_per: usize,
}

impl JointControl {
    pub fn new(u: DVector<f64>, m_per: usize) -> Self {
        assert!(
            m_per > 0 && u.len() % m_per == 0,
            "joint control length {} not a multiple of per-player dim {}",
            u.len(),
            m_per
        );
        JointControl { u, m_per }
    }

    pub fn zeros(players: usize, m_per: usize) -> Self {
        JointControl {
            u: DVector::zeros(players * m_per),
            m_per,
        }
    }

    pub fn players(&self) -> usize {
        self.u.len() / self.m_per
    }

    pub fn player_offset(&self, nu: usize) -> usize {
        nu * self.m_per
    }

    pub fn player(&self, nu: usize) -> DVectorView<'_, f64> {
        self.u.rows(nu * self.m_per, self.m_per)
    }
}

fn check_dims(model: &ModelSpec, x: &JointState, u: &JointControl) -> Result<usize, GameError> {
    let n = model.state_dim();
    let m = model.control_dim();
    if x.n_per != n {
        return Err(GameError::DimensionMismatch {
            what: "per-player state dim",
            expected: n,
            got: x.n_per,
        });
    }
    if u.m_per != m {
        return Err(GameError::DimensionMismatch {
            what: "per-player control dim",
            expected: m,
            got: u.m_per,
        });
    }
    if x.players() != u.players() {
        return Err(GameError::DimensionMismatch {
            what: "player count (controls vs states)",
            expected: x.players(),
            got: u.players(),
        });
    }
    Ok(x.players())
}

/// Continuous dynamics ẋ = f(x, u) for one player, written into `out`.
fn deriv(model: &ModelSpec, x: DVectorView<f64>, u: DVectorView<f64>, mut out: DVectorViewMut<f64>) {
    match model.kind {
        ModelKind::Unicycle => {
            let (theta, v) = (x[2], x[3]);
            out[0] = v * theta.cos();
            out[1] = v * theta.sin();
            out[2] = u[0];
            out[3] = u[1];
        }
        ModelKind::Bicycle => {
            let (theta, v) = (x[2], x[3]);
            let l = model.params.wheelbase;
            out[0] = v * theta.cos();
            out[1] = v * theta.sin();
            out[2] = v * u[0].tan() / l;
            out[3] = u[1];
        }
        ModelKind::DoubleIntegrator2D => {
            out[0] = x[2];
            out[1] = x[3];
            out[2] = u[0];
            out[3] = u[1];
        }
        ModelKind::DoubleIntegrator3D => {
            for i in 0..3 {
                out[i] = x[3 + i];
                out[3 + i] = u[i];
            }
        }
        ModelKind::Quadrotor => quadrotor_deriv(&model.params, x, u, out),
    }
}

/// Euler-angle quadrotor: x = (p, v, φθψ, ω_body), u = rotor thrusts f1..f4.
/// Plus configuration: τx = L(f2-f4), τy = L(f3-f1), τz = c(f1-f2+f3-f4).
fn quadrotor_deriv(
    p: &ModelParams,
    x: DVectorView<f64>,
    u: DVectorView<f64>,
    mut out: DVectorViewMut<f64>,
) {
    let (phi, theta, psi) = (x[6], x[7], x[8]);
    let (wx, wy, wz) = (x[9], x[10], x[11]);
    let thrust: f64 = u.iter().sum();
    let (sph, cph) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let (sps, cps) = psi.sin_cos();

    // ṗ = v
    out[0] = x[3];
    out[1] = x[4];
    out[2] = x[5];
    // v̇ = -g e_z + R_wb (0,0,T)/m; last column of ZYX rotation.
    let a = thrust / p.mass;
    out[3] = a * (cps * sth * cph + sps * sph);
    out[4] = a * (sps * sth * cph - cps * sph);
    out[5] = a * (cth * cph) - p.gravity;
    // Euler-angle rates from body rates.
    let tth = sth / cth;
    out[6] = wx + sph * tth * wy + cph * tth * wz;
    out[7] = cph * wy - sph * wz;
    out[8] = sph / cth * wy + cph / cth * wz;
    // ω̇ = J^{-1}(τ - ω × Jω)
    let (jx, jy, jz) = (p.inertia[0], p.inertia[1], p.inertia[2]);
    let tau_x = p.arm_len * (u[1] - u[3]);
    let tau_y = p.arm_len * (u[2] - u[0]);
    let tau_z = p.torque_coeff * (u[0] - u[1] + u[2] - u[3]);
    out[9] = (tau_x - (jz - jy) * wy * wz) / jx;
    out[10] = (tau_y - (jx - jz) * wz * wx) / jy;
    out[11] = (tau_z - (jy - jx) * wx * wy) / jz;
}

/// Continuous Jacobians (∂f/∂x, ∂f/∂u) for one player of an analytic model.
fn deriv_jacobians(
    model: &ModelSpec,
    x: DVectorView<f64>,
    u: DVectorView<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let m = model.control_dim();
    let mut jx = DMatrix::zeros(n, n);
    let mut ju = DMatrix::zeros(n, m);
    match model.kind {
        ModelKind::Unicycle => {
            let (theta, v) = (x[2], x[3]);
            jx[(0, 2)] = -v * theta.sin();
            jx[(0, 3)] = theta.cos();
            jx[(1, 2)] = v * theta.cos();
            jx[(1, 3)] = theta.sin();
            ju[(2, 0)] = 1.0;
            ju[(3, 1)] = 1.0;
        }
        ModelKind::Bicycle => {
            let (theta, v) = (x[2], x[3]);
            let l = model.params.wheelbase;
            let td = u[0].tan();
            jx[(0, 2)] = -v * theta.sin();
            jx[(0, 3)] = theta.cos();
            jx[(1, 2)] = v * theta.cos();
            jx[(1, 3)] = theta.sin();
            jx[(2, 3)] = td / l;
            ju[(2, 0)] = v / (l * u[0].cos().powi(2));
            ju[(3, 1)] = 1.0;
        }
        ModelKind::DoubleIntegrator2D => {
            jx[(0, 2)] = 1.0;
            jx[(1, 3)] = 1.0;
            ju[(2, 0)] = 1.0;
            ju[(3, 1)] = 1.0;
        }
        ModelKind::DoubleIntegrator3D => {
            for i in 0..3 {
                jx[(i, 3 + i)] = 1.0;
                ju[(3 + i, i)] = 1.0;
            }
        }
        ModelKind::Quadrotor => unreachable!("quadrotor uses finite differences"),
    }
    (jx, ju)
}

fn joint_deriv(model: &ModelSpec, players: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let n = model.state_dim();
    let m = model.control_dim();
    let mut out = DVector::zeros(players * n);
    for nu in 0..players {
        deriv(
            model,
            x.rows(nu * n, n),
            u.rows(nu * m, m),
            out.rows_mut(nu * n, n),
        );
    }
    out
}

/// One RK4 step of the joint dynamics: x_{k+1} = f(x_k, u_k).
pub fn step(
    model: &ModelSpec,
    x: &JointState,
    u: &JointControl,
    dt: f64,
) -> Result<JointState, GameError> {
    let players = check_dims(model, x, u)?;
    if dt <= 0.0 {
        return Err(GameError::InvalidArgument {
            arg: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    let k1 = joint_deriv(model, players, &x.x, &u.u);
    let k2 = joint_deriv(model, players, &(&x.x + 0.5 * dt * &k1), &u.u);
    let k3 = joint_deriv(model, players, &(&x.x + 0.5 * dt * &k2), &u.u);
    let k4 = joint_deriv(model, players, &(&x.x + dt * &k3), &u.u);
    let xn = &x.x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    Ok(JointState::new(xn, x.n_per))
}

/// Jacobians of the RK4 step map: A = ∂step/∂x, B = ∂step/∂u at (x, u).
///
/// For analytic models the continuous Jacobians are chained through the four
/// RK4 stages, so A and B are exact derivatives of `step`. The quadrotor uses
/// central finite differences of `step` instead.
pub fn linearize(
    model: &ModelSpec,
    x: &JointState,
    u: &JointControl,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GameError> {
    let players = check_dims(model, x, u)?;
    let n = model.state_dim();
    let m = model.control_dim();
    let mut a = DMatrix::zeros(players * n, players * n);
    let mut b = DMatrix::zeros(players * n, players * m);
    for nu in 0..players {
        let xs = x.x.rows(nu * n, n).into_owned();
        let us = u.u.rows(nu * m, m).into_owned();
        let (ab, bb) = if model.kind.analytic_jacobians() {
            single_step_jacobians(model, &xs, &us, dt)
        } else {
            fd_step_jacobians(model, &xs, &us, dt)
        };
        a.view_mut((nu * n, nu * n), (n, n)).copy_from(&ab);
        b.view_mut((nu * n, nu * m), (n, m)).copy_from(&bb);
    }
    Ok((a, b))
}

/// Chain the continuous Jacobians through the RK4 stages for one player.
fn single_step_jacobians(
    model: &ModelSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let eye = DMatrix::identity(n, n);
    let f = |z: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        deriv(model, z.as_view(), u.as_view(), out.rows_mut(0, n));
        out
    };

    let k1 = f(x);
    let x2 = x + 0.5 * dt * &k1;
    let k2 = f(&x2);
    let x3 = x + 0.5 * dt * &k2;
    let k3 = f(&x3);
    let x4 = x + dt * &k3;

    let (j1x, j1u) = deriv_jacobians(model, x.as_view(), u.as_view());
    let (j2x, j2u) = deriv_jacobians(model, x2.as_view(), u.as_view());
    let (j3x, j3u) = deriv_jacobians(model, x3.as_view(), u.as_view());
    let (j4x, j4u) = deriv_jacobians(model, x4.as_view(), u.as_view());

    let dk1x = j1x;
    let dk2x = &j2x * (&eye + 0.5 * dt * &dk1x);
    let dk3x = &j3x * (&eye + 0.5 * dt * &dk2x);
    let dk4x = &j4x * (&eye + dt * &dk3x);

    let dk1u = j1u;
    let dk2u = &j2x * (0.5 * dt * &dk1u) + j2u;
    let dk3u = &j3x * (0.5 * dt * &dk2u) + j3u;
    let dk4u = &j4x * (dt * &dk3u) + j4u;

    let a = &eye + (dt / 6.0) * (&dk1x + 2.0 * &dk2x + 2.0 * &dk3x + &dk4x);
    let b = (dt / 6.0) * (&dk1u + 2.0 * &dk2u + 2.0 * &dk3u + &dk4u);
    (a, b)
}

fn fd_step_jacobians(
    model: &ModelSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let step1 = |xs: &DVector<f64>, us: &DVector<f64>| {
        let js = JointState::new(xs.clone(), n);
        let jc = JointControl::new(us.clone(), model.control_dim());
        step(model, &js, &jc, dt).expect("dims fixed").x
    };
    let a = numdiff::jacobian(|z| step1(z, u), x, FD_H);
    let b = numdiff::jacobian(|z| step1(x, z), u, FD_H);
    (a, b)
}

/// Sequential application of `step`, returning x_2..x_N (length = U.len()).
pub fn rollout(
    model: &ModelSpec,
    x0: &JointState,
    controls: &[JointControl],
    dt: f64,
) -> Result<Vec<JointState>, GameError> {
    let mut out = Vec::with_capacity(controls.len());
    let mut cur = x0.clone();
    for u in controls {
        cur = step(model, &cur, u, dt)?;
        out.push(cur.clone());
    }
    Ok(out)
}
