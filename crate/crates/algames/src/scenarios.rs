//! Canonical experiment setups: ramp merging, intersection crossing, crowded
//! highway merge, and a drone doorway, plus randomized initial-state sampling
//! for Monte Carlo batches.
//!
//! All geometry is declared here in meters: lane width 3.7, vehicle radius
//! 1.0, highway speeds 10–15 m/s, ramp speed 5 m/s, pedestrian 1.2 m/s.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{JointState, ModelKind, ModelSpec};
use crate::error::GameError;
use crate::game::{ConstraintSet, GameProblem, PlayerObjective, ProximitySign, Segment};

pub const LANE_WIDTH: f64 = 3.7;
pub const VEHICLE_RADIUS: f64 = 1.0;
pub const DRONE_RADIUS: f64 = 0.3;

/// Per-player uniform perturbation half-ranges, applied in each player's
/// heading frame: longitudinal/lateral in meters, heading in radians, speed
/// as a fraction of the nominal speed.
#[derive(Debug, Clone, Copy)]
pub struct SamplingSpec {
    pub longitudinal: f64,
    pub lateral: f64,
    pub heading: f64,
    pub speed_frac: f64,
}

impl SamplingSpec {
    /// Solver Monte Carlo ranges: ±1 m longitudinal, ±2.5° heading, ±3% speed.
    pub fn solver_mc() -> Self {
        SamplingSpec {
            longitudinal: 1.0,
            lateral: 0.0,
            heading: 2.5_f64.to_radians(),
            speed_frac: 0.03,
        }
    }

    /// MPC Monte Carlo ranges: ±2.5 m longitudinal, ±0.25 m lateral, ±3° heading.
    pub fn mpc_mc() -> Self {
        SamplingSpec {
            longitudinal: 2.5,
            lateral: 0.25,
            heading: 3.0_f64.to_radians(),
            speed_frac: 0.0,
        }
    }

    pub fn zero() -> Self {
        SamplingSpec {
            longitudinal: 0.0,
            lateral: 0.0,
            heading: 0.0,
            speed_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub problem: GameProblem,
    /// Unit vector of the main travel direction, used for merge ranking.
    pub lane_axis: [f64; 2],
    pub sampling: SamplingSpec,
    pub ego: Option<usize>,
}

impl Scenario {
    pub fn nominal(&self) -> &JointState {
        &self.problem.x0
    }
}

fn tracking_objective(
    n: usize,
    own: usize,
    n_per: usize,
    q_diag: &[f64],
    qf_diag: &[f64],
    r: DMatrix<f64>,
    xf: DVector<f64>,
) -> PlayerObjective {
    let mut qd = DVector::zeros(n);
    let mut qfd = DVector::zeros(n);
    for j in 0..n_per {
        qd[own * n_per + j] = q_diag[j];
        qfd[own * n_per + j] = qf_diag[j];
    }
    PlayerObjective {
        q: DMatrix::from_diagonal(&qd),
        r,
        qf: DMatrix::from_diagonal(&qfd),
        xf: JointState::new(xf, n_per),
        prox_weight: 0.0,
        prox_radius: 0.0,
        prox_sign: ProximitySign::default(),
    }
}

/// Straight two-lane highway along +x with an on-ramp merging from below.
/// Players 0..M−2 drive the right lane; the last player is the merging ego.
/// The road edges and the ramp's outer edge are wall segments offset by the
/// clearance radius so the drivable region is exactly |y| ≤ 3.7 (plus ramp).
pub fn ramp_merging(players: usize) -> Result<Scenario, GameError> {
    if !(2..=4).contains(&players) {
        return Err(GameError::InvalidArgument {
            arg: "players",
            reason: "ramp merging supports 2 to 4 players".into(),
        });
    }
    let model = ModelSpec::new(ModelKind::Unicycle);
    let n_per = 4;
    let n = players * n_per;
    let lane = -0.5 * LANE_WIDTH;
    let r = VEHICLE_RADIUS;
    let horizon = 16;
    let dt = 0.2;
    let t_end = (horizon - 1) as f64 * dt;

    // Ramp runs parallel to the highway 2.6 m below the right lane and its
    // outer wall converges onto the highway edge ahead of the merge area.
    let ramp_y = lane - 2.6;
    let highway: [(f64, f64, f64); 3] = [
        (-20.0, 12.5, 12.5), // front car: x0, speed, desired speed
        (-32.0, 10.0, 9.8),
        (-47.0, 10.0, 9.8),
    ];
    let ego_x0 = -26.0;
    let ego_v0 = 5.0;
    let ego_v_goal = 10.0;
    let ego_x_goal = ego_x0 + 0.5 * (ego_v0 + ego_v_goal) * t_end + 2.0;

    let mut x0 = DVector::zeros(n);
    let mut objectives = Vec::with_capacity(players);
    let q = [0.0, 0.4, 0.6, 0.3];
    let qf = [0.4, 1.2, 1.0, 0.8];
    let r_ctrl = DMatrix::from_diagonal(&DVector::from_row_slice(&[8.0, 0.4]));
    for (i, &(x, v, v_goal)) in highway.iter().take(players - 1).enumerate() {
        x0.rows_mut(i * n_per, n_per)
            .copy_from(&DVector::from_row_slice(&[x, lane, 0.0, v]));
        let goal = DVector::from_row_slice(&[x + v_goal * t_end, lane, 0.0, v_goal]);
        let mut full_goal = DVector::zeros(n);
        full_goal.rows_mut(i * n_per, n_per).copy_from(&goal);
        objectives.push(tracking_objective(
            n,
            i,
            n_per,
            &q,
            &qf,
            r_ctrl.clone(),
            full_goal,
        ));
    }
    let ego = players - 1;
    x0.rows_mut(ego * n_per, n_per)
        .copy_from(&DVector::from_row_slice(&[ego_x0, ramp_y, 0.0, ego_v0]));
    let mut ego_goal = DVector::zeros(n);
    ego_goal.rows_mut(ego * n_per, n_per).copy_from(&DVector::from_row_slice(&[
        ego_x_goal,
        lane,
        0.0,
        ego_v_goal,
    ]));
    objectives.push(tracking_objective(
        n,
        ego,
        n_per,
        &[0.0, 0.25, 0.6, 0.3],
        &[0.4, 1.2, 1.0, 0.8],
        r_ctrl,
        ego_goal,
    ));

    let top_wall = LANE_WIDTH + r;
    let ramp_wall = ramp_y - 1.3 - r;
    let merge_x = 5.0;
    let constraints = ConstraintSet {
        collision_radius: r,
        boundaries: vec![
            Segment::new([-80.0, top_wall], [80.0, top_wall]),
            Segment::new([-80.0, ramp_wall], [merge_x, ramp_wall]),
            Segment::new([merge_x, ramp_wall], [merge_x + 14.0, -LANE_WIDTH - r]),
            Segment::new([merge_x + 14.0, -LANE_WIDTH - r], [80.0, -LANE_WIDTH - r]),
        ],
        control_bounds: None,
        terminal_equalities: Vec::new(),
        enable_collisions: true,
    };

    Ok(Scenario {
        name: format!("ramp_merging_{players}"),
        problem: GameProblem {
            model,
            players,
            horizon,
            dt,
            x0: JointState::new(x0, n_per),
            objectives,
            constraints,
        },
        lane_axis: [1.0, 0.0],
        sampling: SamplingSpec::solver_mc(),
        ego: Some(ego),
    })
}

/// Perpendicular urban crossing: car 0 drives +x, car 1 drives +y, both on
/// the right-hand lane of their road, so their paths intersect ahead of both.
/// Player 2 (if present) is a slow pedestrian-like agent crossing the exit
/// lane; player 3 a fourth car driving −x on the opposite lane.
pub fn intersection(players: usize) -> Result<Scenario, GameError> {
    if !(2..=4).contains(&players) {
        return Err(GameError::InvalidArgument {
            arg: "players",
            reason: "intersection supports 2 to 4 players".into(),
        });
    }
    let model = ModelSpec::new(ModelKind::Unicycle);
    let n_per = 4;
    let n = players * n_per;
    let lane = 0.5 * LANE_WIDTH;
    let horizon = 16;
    let dt = 0.2;
    let t_end = (horizon - 1) as f64 * dt;

    let frac = std::f64::consts::FRAC_PI_2;
    let starts = [
        DVector::from_row_slice(&[-14.0, -lane, 0.0, 8.0]),
        DVector::from_row_slice(&[lane, -17.2, frac, 8.0]),
        DVector::from_row_slice(&[8.0, 5.0, -frac, 1.2]),
        DVector::from_row_slice(&[14.0, lane, std::f64::consts::PI, 8.0]),
    ];
    let speeds = [8.0, 8.0, 1.2, 8.0];
    let q = [0.0, 0.4, 0.6, 0.3];
    let qf = [0.4, 1.2, 1.0, 0.8];
    let r_ctrl = DMatrix::from_diagonal(&DVector::from_row_slice(&[8.0, 0.4]));

    let mut x0 = DVector::zeros(n);
    let mut objectives = Vec::with_capacity(players);
    for i in 0..players {
        x0.rows_mut(i * n_per, n_per).copy_from(&starts[i]);
        let mut goal = starts[i].clone();
        let th = starts[i][2];
        goal[0] += th.cos() * speeds[i] * t_end;
        goal[1] += th.sin() * speeds[i] * t_end;
        goal[3] = speeds[i];
        let mut full_goal = DVector::zeros(n);
        full_goal.rows_mut(i * n_per, n_per).copy_from(&goal);
        objectives.push(tracking_objective(
            n,
            i,
            n_per,
            &q,
            &qf,
            r_ctrl.clone(),
            full_goal,
        ));
    }

    Ok(Scenario {
        name: format!("intersection_{players}"),
        problem: GameProblem {
            model,
            players,
            horizon,
            dt,
            x0: JointState::new(x0, n_per),
            objectives,
            constraints: ConstraintSet::with_collisions(VEHICLE_RADIUS),
        },
        lane_axis: [1.0, 0.0],
        sampling: SamplingSpec::solver_mc(),
        ego: None,
    })
}

/// Crowded merge: three highway cars spaced so the ego can slot into either
/// gap (rank 2 or 3), ego on the ramp below. Gap centers are 8 m apart, so
/// each inter-car gap is 2·(2r) beyond the two occupying circles.
pub fn highway_merge_crowded() -> Scenario {
    let model = ModelSpec::new(ModelKind::Unicycle);
    let players = 4;
    let n_per = 4;
    let n = players * n_per;
    let lane = -0.5 * LANE_WIDTH;
    let r = VEHICLE_RADIUS;
    let horizon = 14;
    let dt = 0.22;
    let t_end = (horizon - 1) as f64 * dt;

    let ramp_y = lane - 2.6;
    let car_xs = [-10.0, -18.0, -26.0];
    let v_hwy = 10.0;
    let ego_x0 = -19.0;
    let ego_v0 = 6.0;
    let ego_v_goal = 10.0;

    let mut x0 = DVector::zeros(n);
    let mut objectives = Vec::with_capacity(players);
    let q = [0.0, 0.4, 0.6, 0.3];
    let qf = [0.3, 1.2, 1.0, 0.8];
    let r_ctrl = DMatrix::from_diagonal(&DVector::from_row_slice(&[8.0, 0.4]));
    for (i, &x) in car_xs.iter().enumerate() {
        x0.rows_mut(i * n_per, n_per)
            .copy_from(&DVector::from_row_slice(&[x, lane, 0.0, v_hwy]));
        let mut goal = DVector::zeros(n);
        goal.rows_mut(i * n_per, n_per).copy_from(&DVector::from_row_slice(&[
            x + v_hwy * t_end,
            lane,
            0.0,
            v_hwy,
        ]));
        objectives.push(tracking_objective(n, i, n_per, &q, &qf, r_ctrl.clone(), goal));
    }
    let ego = 3;
    x0.rows_mut(ego * n_per, n_per)
        .copy_from(&DVector::from_row_slice(&[ego_x0, ramp_y, 0.0, ego_v0]));
    let ego_x_goal = ego_x0 + 0.5 * (ego_v0 + ego_v_goal) * t_end + 2.0;
    let mut goal = DVector::zeros(n);
    goal.rows_mut(ego * n_per, n_per).copy_from(&DVector::from_row_slice(&[
        ego_x_goal,
        lane,
        0.0,
        ego_v_goal,
    ]));
    objectives.push(tracking_objective(
        n,
        ego,
        n_per,
        &[0.0, 0.25, 0.6, 0.3],
        &[0.3, 1.2, 1.0, 0.8],
        r_ctrl,
        goal,
    ));

    let top_wall = LANE_WIDTH + r;
    let ramp_wall = ramp_y - 1.3 - r;
    let merge_x = 8.0;
    let constraints = ConstraintSet {
        collision_radius: r,
        boundaries: vec![
            Segment::new([-80.0, top_wall], [80.0, top_wall]),
            Segment::new([-80.0, ramp_wall], [merge_x, ramp_wall]),
            Segment::new([merge_x, ramp_wall], [merge_x + 14.0, -LANE_WIDTH - r]),
            Segment::new([merge_x + 14.0, -LANE_WIDTH - r], [80.0, -LANE_WIDTH - r]),
        ],
        control_bounds: None,
        terminal_equalities: Vec::new(),
        enable_collisions: true,
    };

    Scenario {
        name: "highway_merge_crowded".into(),
        problem: GameProblem {
            model,
            players,
            horizon,
            dt,
            x0: JointState::new(x0, n_per),
            objectives,
            constraints,
        },
        lane_axis: [1.0, 0.0],
        sampling: SamplingSpec::mpc_mc(),
        ego: Some(ego),
    }
}

/// A wall at x = 0 with a centered gap; drones start in a grid on the left
/// and each targets the mirrored slot on the right, forcing sequenced passage
/// through the opening. Works with any translational model; boundary rows act
/// on the XY projection.
pub fn drone_doorway(players: usize, model: ModelSpec) -> Result<Scenario, GameError> {
    if !(2..=8).contains(&players) {
        return Err(GameError::InvalidArgument {
            arg: "players",
            reason: "doorway supports 2 to 8 players".into(),
        });
    }
    let r = DRONE_RADIUS;
    let gap = 6.0 * r;
    let n_per = model.state_dim();
    let m_per = model.control_dim();
    let n = players * n_per;
    let horizon = 14;
    let dt = 0.25;

    let mut x0 = DVector::zeros(n);
    let mut objectives = Vec::with_capacity(players);
    // Running position weight stays small so trajectories are free to arc
    // through the opening; only the endpoint is pinned hard.
    let q_pos = 0.02;
    let r_ctrl = DMatrix::identity(m_per, m_per) * 0.2;
    for i in 0..players {
        let row = (i / 2) as f64;
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        // Start outside the passable corridor and behind by a stagger, so the
        // straight path to the goal clips the wall and arrivals are spread out.
        let y = side * (1.3 + row * 1.1);
        let o = i * n_per;
        x0[o] = -2.8 - 1.0 * i as f64;
        x0[o + 1] = y;
        let mut goal = DVector::zeros(n);
        goal[o] = 3.0;
        goal[o + 1] = y;
        let mut qd = DVector::zeros(n);
        let mut qfd = DVector::zeros(n);
        for j in 0..n_per {
            let position = j < 2 || (j == 2 && n_per > 4);
            let (wq, wqf) = if position { (q_pos, 3.0) } else { (0.15, 0.6) };
            qd[o + j] = wq;
            qfd[o + j] = wqf;
        }
        objectives.push(PlayerObjective {
            q: DMatrix::from_diagonal(&qd),
            r: r_ctrl.clone(),
            qf: DMatrix::from_diagonal(&qfd),
            xf: JointState::new(goal, n_per),
            prox_weight: 0.0,
            prox_radius: 0.0,
            prox_sign: ProximitySign::default(),
        });
    }

    let wall_top = 8.0;
    let constraints = ConstraintSet {
        collision_radius: r,
        boundaries: vec![
            Segment::new([0.0, 0.5 * gap + r], [0.0, wall_top]),
            Segment::new([0.0, -wall_top], [0.0, -0.5 * gap - r]),
        ],
        control_bounds: None,
        terminal_equalities: Vec::new(),
        enable_collisions: true,
    };

    Ok(Scenario {
        name: format!("drone_doorway_{players}"),
        problem: GameProblem {
            model,
            players,
            horizon,
            dt,
            x0: JointState::new(x0, n_per),
            objectives,
            constraints,
        },
        lane_axis: [1.0, 0.0],
        sampling: SamplingSpec {
            longitudinal: 0.5,
            lateral: 0.3,
            heading: 0.0,
            speed_frac: 0.0,
        },
        ego: None,
    })
}

/// Build a scenario by name, for configs: `ramp_merging`, `intersection`,
/// `highway_merge_crowded`, `drone_doorway` (double-integrator model).
pub fn by_name(name: &str, players: usize) -> Result<Scenario, GameError> {
    match name {
        "ramp_merging" => ramp_merging(players),
        "intersection" => intersection(players),
        "highway_merge_crowded" => Ok(highway_merge_crowded()),
        "drone_doorway" => drone_doorway(players, ModelSpec::new(ModelKind::DoubleIntegrator2D)),
        _ => Err(GameError::InvalidArgument {
            arg: "scenario",
            reason: format!("unknown scenario '{name}'"),
        }),
    }
}

/// Strict state-level feasibility of a joint state: every pairwise distance
/// beyond 2r and every wall clearance beyond r, with margin to spare.
pub fn state_strictly_feasible(p: &GameProblem, x: &JointState, margin: f64) -> bool {
    let n_per = p.model.state_dim();
    let cs = &p.constraints;
    let pos = |i: usize| (x.x[i * n_per], x.x[i * n_per + 1]);
    if cs.enable_collisions {
        let min_d2 = 4.0 * cs.collision_radius * cs.collision_radius;
        for a in 0..p.players {
            for b in (a + 1)..p.players {
                let (ax, ay) = pos(a);
                let (bx, by) = pos(b);
                let d2 = (ax - bx).powi(2) + (ay - by).powi(2);
                if min_d2 - d2 >= -margin {
                    return false;
                }
            }
        }
    }
    let r2 = cs.collision_radius * cs.collision_radius;
    for seg in &cs.boundaries {
        for i in 0..p.players {
            let (px, py) = pos(i);
            let (cp, _) = seg.closest_point([px, py]);
            let d2 = (px - cp[0]).powi(2) + (py - cp[1]).powi(2);
            if r2 - d2 >= -margin {
                return false;
            }
        }
    }
    true
}

fn player_heading(model: &ModelSpec, x: &DVector<f64>, o: usize, lane_axis: [f64; 2]) -> f64 {
    match model.kind {
        ModelKind::Unicycle | ModelKind::Bicycle => x[o + 2],
        ModelKind::DoubleIntegrator2D => {
            let (vx, vy) = (x[o + 2], x[o + 3]);
            if vx.hypot(vy) > 1e-9 {
                vy.atan2(vx)
            } else {
                lane_axis[1].atan2(lane_axis[0])
            }
        }
        ModelKind::DoubleIntegrator3D => {
            let (vx, vy) = (x[o + 3], x[o + 4]);
            if vx.hypot(vy) > 1e-9 {
                vy.atan2(vx)
            } else {
                lane_axis[1].atan2(lane_axis[0])
            }
        }
        ModelKind::Quadrotor => x[o + 8],
    }
}

fn apply_perturbation(
    model: &ModelSpec,
    x: &mut DVector<f64>,
    o: usize,
    heading: f64,
    dlon: f64,
    dlat: f64,
    dhead: f64,
    dspd: f64,
) {
    let (c, s) = (heading.cos(), heading.sin());
    x[o] += c * dlon - s * dlat;
    x[o + 1] += s * dlon + c * dlat;
    match model.kind {
        ModelKind::Unicycle | ModelKind::Bicycle => {
            x[o + 2] += dhead;
            x[o + 3] *= 1.0 + dspd;
        }
        ModelKind::DoubleIntegrator2D => {
            let (vx, vy) = (x[o + 2], x[o + 3]);
            let (hc, hs) = (dhead.cos(), dhead.sin());
            x[o + 2] = (hc * vx - hs * vy) * (1.0 + dspd);
            x[o + 3] = (hs * vx + hc * vy) * (1.0 + dspd);
        }
        ModelKind::DoubleIntegrator3D => {
            let (vx, vy) = (x[o + 3], x[o + 4]);
            let (hc, hs) = (dhead.cos(), dhead.sin());
            x[o + 3] = (hc * vx - hs * vy) * (1.0 + dspd);
            x[o + 4] = (hs * vx + hc * vy) * (1.0 + dspd);
            x[o + 5] *= 1.0 + dspd;
        }
        ModelKind::Quadrotor => {
            x[o + 8] += dhead;
            for j in 3..6 {
                x[o + j] *= 1.0 + dspd;
            }
        }
    }
}

/// Uniform per-player perturbation of the nominal state within the
/// scenario's sampling ranges, resampled until strictly feasible (up to 100
/// draws). Zero-width channels consume no randomness, so zero ranges return
/// the nominal exactly.
pub fn sample_initial_state(s: &Scenario, seed: u64) -> Result<JointState, GameError> {
    let p = &s.problem;
    let n_per = p.model.state_dim();
    let spec = &s.sampling;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rng: &mut ChaCha8Rng, half: f64| {
        if half > 0.0 {
            rng.gen_range(-half..half)
        } else {
            0.0
        }
    };
    for _ in 0..100 {
        let mut x = p.x0.x.clone();
        for i in 0..p.players {
            let o = i * n_per;
            let h = player_heading(&p.model, &x, o, s.lane_axis);
            let dlon = draw(&mut rng, spec.longitudinal);
            let dlat = draw(&mut rng, spec.lateral);
            let dhead = draw(&mut rng, spec.heading);
            let dspd = draw(&mut rng, spec.speed_frac);
            apply_perturbation(&p.model, &mut x, o, h, dlon, dlat, dhead, dspd);
        }
        let state = JointState::new(x, n_per);
        if state_strictly_feasible(p, &state, 1e-6) {
            return Ok(state);
        }
    }
    Err(GameError::SamplingExhausted { attempts: 100 })
}
