//! Deterministic planar pushing simulator.
//!
//! A kinematic disc pusher contacts a rigid polygonal object resting on a
//! frictional table. Contact uses a penalty spring-damper with regularized
//! Coulomb friction; table friction acts at the CoM as a regularized force
//! plus a torsional term with effective radius `kappa`. The state is advanced
//! with semi-implicit Euler at the physics rate, several substeps per control
//! step, with the pusher moving linearly across each control interval.
//!
//! `SimState::pose` is the body-frame origin. `SimState::twist` holds the
//! linear velocity of the CoM and the angular velocity.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{MassProperties, RigidObjectSpec};
use crate::math::{wrap_angle, Pose2, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Physics step (s).
    pub dt_physics: f64,
    pub substeps_per_control: u32,
    /// Contact stiffness (N/m).
    pub k_n: f64,
    /// Contact damping (N s/m).
    pub k_d: f64,
    /// Pusher-object friction coefficient.
    pub mu_contact: f64,
    /// Object-table friction coefficient.
    pub mu_support: f64,
    pub g: f64,
    /// Velocity regularization for Coulomb friction (m/s).
    pub eps_v: f64,
    /// Angular-velocity regularization for the torsional friction (rad/s).
    pub eps_w: f64,
    /// Torsional friction radius as a fraction of the mean vertex distance from the CoM.
    pub kappa_frac: f64,
    pub pusher_radius: f64,
    /// Largest pusher displacement per control step (m).
    pub d_max: f64,
    pub max_speed: f64,
    pub max_omega: f64,
    /// A free object below both rest thresholds is put to sleep.
    pub rest_speed: f64,
    pub rest_omega: f64,
    /// Gap between the pusher and the object's bounding circle at reset (m).
    pub reset_standoff: f64,
    /// Lateral pusher jitter at reset, uniform in +/- this value (m).
    pub reset_jitter: f64,
    /// Poses must satisfy |x|, |y| <= this bound (m).
    pub workspace_half_extent: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt_physics: 1.0 / 240.0,
            substeps_per_control: 24,
            k_n: 4000.0,
            k_d: 4.0,
            mu_contact: 0.5,
            mu_support: 0.35,
            g: 9.81,
            eps_v: 0.05,
            eps_w: 0.2,
            kappa_frac: 0.6,
            pusher_radius: 0.01,
            d_max: 0.01,
            max_speed: 1.0,
            max_omega: 20.0,
            rest_speed: 1e-5,
            rest_omega: 1e-4,
            reset_standoff: 0.02,
            reset_jitter: 0.01,
            workspace_half_extent: 1.0,
        }
    }
}

impl SimParams {
    pub fn control_period(&self) -> f64 {
        self.dt_physics * self.substeps_per_control as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_physics", self.dt_physics),
            ("k_n", self.k_n),
            ("k_d", self.k_d),
            ("mu_contact", self.mu_contact),
            ("mu_support", self.mu_support),
            ("g", self.g),
            ("eps_v", self.eps_v),
            ("eps_w", self.eps_w),
            ("kappa_frac", self.kappa_frac),
            ("pusher_radius", self.pusher_radius),
            ("d_max", self.d_max),
            ("max_speed", self.max_speed),
            ("max_omega", self.max_omega),
            ("rest_speed", self.rest_speed),
            ("rest_omega", self.rest_omega),
            ("workspace_half_extent", self.workspace_half_extent),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("sim.{name} must be positive, got {v}")));
            }
        }
        if self.substeps_per_control == 0 {
            return Err(Error::InvalidConfig("sim.substeps_per_control must be >= 1".into()));
        }
        if !(self.reset_standoff >= 0.0 && self.reset_jitter >= 0.0) {
            return Err(Error::InvalidConfig("reset standoff and jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist2 {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Twist2 {
    pub fn linear(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose2,
    pub twist: Twist2,
    pub pusher_pos: Vec2,
    pub time: f64,
    /// Whether the pusher touched the object during the last control step.
    pub contact: bool,
    /// Control steps taken since reset.
    pub step: u64,
}

impl SimState {
    pub fn is_finite(&self) -> bool {
        [
            self.pose.x,
            self.pose.y,
            self.pose.theta,
            self.twist.vx,
            self.twist.vy,
            self.twist.omega,
            self.pusher_pos.x,
            self.pusher_pos.y,
            self.time,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn kinetic_energy(&self, mass: &MassProperties) -> f64 {
        0.5 * mass.mass * self.twist.linear().norm_sq() + 0.5 * mass.inertia * self.twist.omega.powi(2)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PusherCommand {
    pub delta: Vec2,
}

impl PusherCommand {
    pub fn new(dx: f64, dy: f64) -> Self {
        PusherCommand {
            delta: Vec2::new(dx, dy),
        }
    }
}

/// Closest-feature query result between the pusher disc and a polygon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    /// Signed gap (m): positive when separated, negative when penetrating.
    pub phi: f64,
    /// Closest point on the polygon boundary.
    pub point: Vec2,
    /// Unit normal from the polygon toward the disc.
    pub normal: Vec2,
}

/// Signed distance between a disc and one convex, counterclockwise polygon.
pub fn signed_distance_convex(center: Vec2, radius: f64, poly: &[Vec2]) -> Contact {
    let n = poly.len();
    let mut inside = true;
    let mut best_d2 = f64::INFINITY;
    let mut best_point = poly[0];
    let mut best_depth = f64::INFINITY;
    let mut best_edge_normal = Vec2::new(1.0, 0.0);
    for i in 0..n {
        let a = poly[i];
        let b = poly[if i + 1 == n { 0 } else { i + 1 }];
        let e = b - a;
        let len2 = e.norm_sq();
        let outward = Vec2::new(e.y, -e.x) * (1.0 / len2.sqrt());
        let s = (center - a).dot(outward);
        if s > 0.0 {
            inside = false;
        }
        if -s < best_depth {
            best_depth = -s;
            best_edge_normal = outward;
        }
        let t = ((center - a).dot(e) / len2).clamp(0.0, 1.0);
        let q = a + e * t;
        let d2 = (center - q).norm_sq();
        if d2 < best_d2 {
            best_d2 = d2;
            best_point = q;
        }
    }
    if inside {
        Contact {
            phi: -best_depth - radius,
            point: center + best_edge_normal * best_depth,
            normal: best_edge_normal,
        }
    } else {
        let d = best_d2.sqrt();
        Contact {
            phi: d - radius,
            point: best_point,
            normal: (center - best_point) * (1.0 / d),
        }
    }
}

/// Minimum signed distance between a disc and a union of convex polygons.
pub fn signed_distance(center: Vec2, radius: f64, parts: &[Vec<Vec2>]) -> Contact {
    parts
        .iter()
        .map(|p| signed_distance_convex(center, radius, p))
        .min_by(|a, b| a.phi.total_cmp(&b.phi))
        .expect("object has at least one part")
}

/// Convex parts plus the mass data the dynamics need.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    /// Convex counterclockwise parts in the body frame.
    pub parts: Vec<Vec<Vec2>>,
    pub mass: MassProperties,
    /// Torsional friction radius (m).
    pub kappa: f64,
    /// Largest vertex distance from the body origin.
    pub bounding_radius: f64,
}

impl ObjectModel {
    pub fn new(spec: &RigidObjectSpec, params: &SimParams) -> Result<ObjectModel> {
        spec.validate()?;
        for part in &spec.parts {
            if !part.is_convex() {
                return Err(Error::InvalidGeometry(format!(
                    "object '{}' has a non-convex part; decompose it first",
                    spec.name
                )));
            }
        }
        let mass = spec.mass_properties()?;
        let verts: Vec<Vec2> = spec.parts.iter().flat_map(|p| p.vertices.iter().copied()).collect();
        let mean_dist = verts.iter().map(|v| (*v - mass.com).norm()).sum::<f64>() / verts.len() as f64;
        Ok(ObjectModel {
            parts: spec.parts.iter().map(|p| p.vertices.clone()).collect(),
            mass,
            kappa: params.kappa_frac * mean_dist,
            bounding_radius: spec.bounding_radius(),
        })
    }

    pub fn world_parts(&self, pose: &Pose2) -> Vec<Vec<Vec2>> {
        self.parts
            .iter()
            .map(|p| p.iter().map(|v| pose.transform(*v)).collect())
            .collect()
    }
}

/// Per-substep diagnostics passed to [`step_physics_observed`].
#[derive(Clone, Copy, Debug)]
pub struct SubstepInfo {
    pub state: SimState,
    pub in_contact: bool,
    /// Deepest penetration over all parts (m), zero when separated.
    pub penetration: f64,
    pub kinetic_energy: f64,
}

pub fn step_physics(
    state: &SimState,
    model: &ObjectModel,
    params: &SimParams,
    command: PusherCommand,
) -> Result<SimState> {
    step_physics_observed(state, model, params, command, |_| {})
}

/// Advances one control step, calling `observe` after every physics substep.
pub fn step_physics_observed(
    state: &SimState,
    model: &ObjectModel,
    params: &SimParams,
    command: PusherCommand,
    mut observe: impl FnMut(&SubstepInfo),
) -> Result<SimState> {
    let mut delta = command.delta;
    if !delta.is_finite() {
        return Err(Error::SimulationDiverged {
            step: state.step,
            detail: "non-finite pusher command".into(),
        });
    }
    let dn = delta.norm();
    if dn > params.d_max {
        delta = delta * (params.d_max / dn);
    }
    // the pusher may not leave the workspace square (or move further out)
    let w = params.workspace_half_extent;
    let p = state.pusher_pos;
    let target = p + delta;
    delta = Vec2::new(
        target.x.clamp(p.x.min(-w), p.x.max(w)),
        target.y.clamp(p.y.min(-w), p.y.max(w)),
    ) - p;
    let dn = delta.norm();
    if dn > params.d_max {
        delta = delta * (params.d_max / dn);
    }

    let n = params.substeps_per_control;
    let dt = params.dt_physics;
    let v_pusher = delta * (1.0 / params.control_period());
    let start = state.pusher_pos;
    let com_body = model.mass.com;
    let m = model.mass.mass;
    let inertia = model.mass.inertia;
    let support_lin = dt * params.mu_support * params.g;
    let support_rot = support_lin * m * model.kappa / inertia;

    let mut world: Vec<Vec<Vec2>> = model.parts.clone();
    let mut s = *state;
    s.contact = false;

    for k in 0..n {
        s.pusher_pos = start + delta * ((k + 1) as f64 / n as f64);
        let (sn, cs) = s.pose.theta.sin_cos();
        let origin = s.pose.position();
        let com_world = origin + com_body.rotate_sc(sn, cs);
        let mut v = s.twist.linear();
        let mut w = s.twist.omega;

        let mut force = Vec2::ZERO;
        let mut torque = 0.0;
        let mut in_contact = false;
        let mut penetration: f64 = 0.0;
        for (part, buf) in model.parts.iter().zip(world.iter_mut()) {
            for (dst, src) in buf.iter_mut().zip(part) {
                *dst = src.rotate_sc(sn, cs) + origin;
            }
            let c = signed_distance_convex(s.pusher_pos, params.pusher_radius, buf);
            if c.phi >= 0.0 {
                continue;
            }
            in_contact = true;
            penetration = penetration.max(-c.phi);
            let r = c.point - com_world;
            let v_obj = Vec2::new(v.x - w * r.y, v.y + w * r.x);
            let v_rel = v_pusher - v_obj;
            let f_n = (params.k_n * -c.phi - params.k_d * v_rel.dot(c.normal)).max(0.0);
            let tangent = c.normal.perp();
            let v_t = (v_obj - v_pusher).dot(tangent);
            let f_t = -params.mu_contact * f_n * v_t / (v_t.abs() + params.eps_v);
            let f = c.normal * -f_n + tangent * f_t;
            force += f;
            torque += r.cross(f);
        }

        v += force * (dt / m);
        w += torque * dt / inertia;

        // Table friction is applied to the post-contact velocity and may
        // stop the body but never reverse it.
        let fv = (support_lin / (v.norm() + params.eps_v)).min(1.0);
        v = v * (1.0 - fv);
        let fw = (support_rot / (w.abs() + params.eps_w)).min(1.0);
        w *= 1.0 - fw;

        let speed = v.norm();
        if speed > params.max_speed {
            v = v * (params.max_speed / speed);
        }
        w = w.clamp(-params.max_omega, params.max_omega);
        if !in_contact && v.norm() < params.rest_speed && w.abs() < params.rest_omega {
            v = Vec2::ZERO;
            w = 0.0;
        }

        let com_next = com_world + v * dt;
        let theta = wrap_angle(s.pose.theta + w * dt);
        let origin_next = com_next - com_body.rotate(theta);
        s.pose = Pose2::new(origin_next.x, origin_next.y, theta);
        s.twist = Twist2 {
            vx: v.x,
            vy: v.y,
            omega: w,
        };
        s.time = state.time + (k + 1) as f64 * dt;
        s.contact |= in_contact;

        if !s.is_finite() {
            return Err(Error::SimulationDiverged {
                step: state.step,
                detail: format!("non-finite state at substep {k}"),
            });
        }
        observe(&SubstepInfo {
            state: s,
            in_contact,
            penetration,
            kinetic_energy: s.kinetic_energy(&model.mass),
        });
    }
    s.step = state.step + 1;
    Ok(s)
}

/// Places the object at `init` at rest with the pusher behind it relative to
/// the goal direction, jittered laterally by a seeded offset.
pub fn reset(
    model: &ObjectModel,
    params: &SimParams,
    init: Pose2,
    goal: Pose2,
    seed: u64,
) -> Result<SimState> {
    let bound = params.workspace_half_extent;
    for (what, p) in [("initial", init), ("goal", goal)] {
        let finite = p.x.is_finite() && p.y.is_finite() && p.theta.is_finite();
        if !finite || p.x.abs() > bound || p.y.abs() > bound {
            return Err(Error::InvalidReset(format!(
                "{what} pose ({}, {}) outside workspace +/-{bound} m",
                p.x, p.y
            )));
        }
    }
    let mut dir = goal.position() - init.position();
    let len = dir.norm();
    dir = if len > 1e-9 { dir * (1.0 / len) } else { Vec2::new(1.0, 0.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lateral = if params.reset_jitter > 0.0 {
        rng.gen_range(-params.reset_jitter..=params.reset_jitter)
    } else {
        0.0
    };
    let back = model.bounding_radius + params.pusher_radius + params.reset_standoff;
    let pusher = init.position() - dir * back + dir.perp() * lateral;
    let state = SimState {
        pose: Pose2::new(init.x, init.y, wrap_angle(init.theta)),
        twist: Twist2::default(),
        pusher_pos: pusher,
        time: 0.0,
        contact: false,
        step: 0,
    };
    let c = signed_distance(pusher, params.pusher_radius, &model.world_parts(&state.pose));
    if c.phi <= 0.0 {
        return Err(Error::InvalidReset(format!(
            "pusher overlaps the object at reset (gap {:.4} m)",
            c.phi
        )));
    }
    Ok(state)
}

/// Owned simulator instance.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub model: ObjectModel,
    pub params: SimParams,
    pub state: SimState,
}

impl Simulator {
    pub fn new(spec: &RigidObjectSpec, params: SimParams) -> Result<Simulator> {
        params.validate()?;
        let model = ObjectModel::new(spec, &params)?;
        Ok(Simulator {
            model,
            params,
            state: SimState::default(),
        })
    }

    pub fn reset(&mut self, init: Pose2, goal: Pose2, seed: u64) -> Result<&SimState> {
        self.state = reset(&self.model, &self.params, init, goal, seed)?;
        Ok(&self.state)
    }

    pub fn step(&mut self, command: PusherCommand) -> Result<&SimState> {
        self.state = step_physics(&self.state, &self.model, &self.params, command)?;
        Ok(&self.state)
    }
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,theta,vx,vy,omega,px,py,contact";

/// Writes one CSV row per state with 9 significant digits.
pub fn write_trajectory_csv<W: Write>(mut out: W, states: &[SimState]) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for s in states {
        let cols = [
            s.time,
            s.pose.x,
            s.pose.y,
            s.pose.theta,
            s.twist.vx,
            s.twist.vy,
            s.twist.omega,
            s.pusher_pos.x,
            s.pusher_pos.y,
        ];
        let mut line: Vec<String> = cols.iter().map(|v| format_sig(*v, 9)).collect();
        line.push(if s.contact { "1".into() } else { "0".into() });
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// `%.{digits}g`-style formatting.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        return format!("{}e{}", trim_zeros(mantissa), exp);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{tblock_with_weight_at, PolygonPart, PointWeight, TBLOCK_WEIGHT_BOTTOM_Y, TBLOCK_WEIGHT_TOP_Y};
    use proptest::prelude::*;
    use rand::Rng;

    fn square_spec() -> RigidObjectSpec {
        RigidObjectSpec {
            name: "square".into(),
            parts: vec![PolygonPart::rect(-0.05, -0.05, 0.05, 0.05, 20.0)],
            weight: PointWeight::default(),
        }
    }

    fn point_in_convex(p: Vec2, poly: &[Vec2]) -> bool {
        let n = poly.len();
        (0..n).all(|i| (poly[(i + 1) % n] - poly[i]).cross(p - poly[i]) >= 0.0)
    }

    fn brute_force_phi(center: Vec2, radius: f64, poly: &[Vec2], per_edge: usize) -> f64 {
        let n = poly.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            for k in 0..=per_edge {
                let q = a + (b - a) * (k as f64 / per_edge as f64);
                best = best.min((center - q).norm());
            }
        }
        if point_in_convex(center, poly) {
            -best - radius
        } else {
            best - radius
        }
    }

    #[test]
    fn signed_distance_far_and_on_edge() {
        let sq = square_spec().parts[0].vertices.clone();
        let c = signed_distance_convex(Vec2::new(0.25, 0.0), 0.01, &sq);
        assert!((c.phi - 0.19).abs() < 1e-15);
        assert_eq!(c.normal, Vec2::new(1.0, 0.0));
        assert_eq!(c.point, Vec2::new(0.05, 0.0));
        let c = signed_distance_convex(Vec2::new(0.05, 0.01), 0.01, &sq);
        assert!((c.phi + 0.01).abs() < 1e-15);
        let c = signed_distance_convex(Vec2::new(0.2, 0.2), 0.0, &sq);
        assert!((c.phi - (0.15f64 * 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn signed_distance_matches_dense_sampling() {
        let spec = tblock_with_weight_at(0.0).unwrap();
        let model = ObjectModel::new(&spec, &SimParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let pose = Pose2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-3.1..3.1));
            let parts = model.world_parts(&pose);
            let center = Vec2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let got = signed_distance(center, 0.01, &parts).phi;
            let want = parts
                .iter()
                .map(|p| brute_force_phi(center, 0.01, p, 10_000))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max((got - want).abs());
        }
        assert!(worst < 1e-6, "max |phi| error {worst}");
    }

    #[test]
    fn free_object_decelerates_monotonically() {
        let params = SimParams::default();
        let model = ObjectModel::new(&square_spec(), &params).unwrap();
        let mut s = SimState {
            twist: Twist2 { vx: 0.3, vy: -0.1, omega: 2.0 },
            pusher_pos: Vec2::new(5.0, 5.0),
            ..SimState::default()
        };
        let mut last_speed = s.twist.linear().norm();
        let mut last_ke = s.kinetic_energy(&model.mass);
        for _ in 0..20 {
            s = step_physics_observed(&s, &model, &params, PusherCommand::default(), |info| {
                let speed = info.state.twist.linear().norm();
                if last_speed > params.rest_speed {
                    assert!(speed < last_speed);
                }
                assert!(info.kinetic_energy <= last_ke);
                last_speed = speed;
                last_ke = info.kinetic_energy;
            })
            .unwrap();
        }
        assert_eq!(s.twist, Twist2::default());
    }

    #[test]
    fn push_through_symmetry_axis_does_not_rotate() {
        let spec = tblock_with_weight_at(0.0).unwrap().with_com_y(0.03).unwrap();
        let params = SimParams::default();
        let model = ObjectModel::new(&spec, &params).unwrap();
        let mut s = SimState {
            pusher_pos: Vec2::new(0.0, -0.125 - 0.011),
            ..SimState::default()
        };
        for _ in 0..12 {
            s = step_physics(&s, &model, &params, PusherCommand::new(0.0, 0.01)).unwrap();
        }
        assert!(s.pose.y > 0.05, "object moved {}", s.pose.y);
        assert!(s.pose.theta.abs() < 1e-3);
    }

    #[test]
    fn com_sign_flips_rotation() {
        let params = SimParams::default();
        let push_y = 0.025;
        let mut turned = Vec::new();
        let mut oracle = Vec::new();
        for weight_y in [TBLOCK_WEIGHT_TOP_Y, TBLOCK_WEIGHT_BOTTOM_Y] {
            let spec = tblock_with_weight_at(weight_y).unwrap();
            let model = ObjectModel::new(&spec, &params).unwrap();
            // pusher left of the stem, moving +x
            let mut s = SimState {
                pusher_pos: Vec2::new(-0.02 - 0.012, push_y),
                ..SimState::default()
            };
            let mut first_torque = None;
            for _ in 0..8 {
                s = step_physics_observed(&s, &model, &params, PusherCommand::new(0.01, 0.0), |info| {
                    if info.in_contact && first_torque.is_none() {
                        let r = Vec2::new(-0.02, push_y) - model.mass.com;
                        first_torque = Some(r.cross(Vec2::new(1.0, 0.0)));
                    }
                })
                .unwrap();
            }
            turned.push(s.pose.theta);
            oracle.push(first_torque.unwrap());
        }
        assert!(oracle[0] > 0.0 && oracle[1] < 0.0);
        assert_eq!(turned[0].signum(), oracle[0].signum());
        assert_eq!(turned[1].signum(), oracle[1].signum());
    }

    #[test]
    fn reset_places_pusher_behind_object() {
        let params = SimParams::default();
        let model = ObjectModel::new(&tblock_with_weight_at(0.095).unwrap(), &params).unwrap();
        let init = Pose2::new(0.0, 0.0, 0.3);
        let goal = Pose2::new(0.4, 0.0, 0.0);
        let a = reset(&model, &params, init, goal, 3).unwrap();
        let b = reset(&model, &params, init, goal, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.pusher_pos.x < -model.bounding_radius);
        assert_eq!(a.twist, Twist2::default());

        let states: Vec<SimState> = (0..8)
            .map(|k| {
                let th = (k as f64 * 45.0).to_radians();
                reset(&model, &params, Pose2::new(0.0, 0.0, th), goal, 0).unwrap()
            })
            .collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(states[i], states[j]);
            }
        }
        assert!(reset(&model, &params, Pose2::new(2.0, 0.0, 0.0), goal, 0).is_err());
    }

    #[test]
    fn reset_rejects_colliding_pusher() {
        let params = SimParams {
            reset_standoff: 0.0,
            pusher_radius: 0.01,
            ..SimParams::default()
        };
        let mut model = ObjectModel::new(&square_spec(), &params).unwrap();
        model.bounding_radius = 0.0;
        let err = reset(&model, &params, Pose2::default(), Pose2::new(0.3, 0.0, 0.0), 0);
        assert!(matches!(err, Err(Error::InvalidReset(_))));
    }

    #[test]
    fn diverged_state_reports_step() {
        let params = SimParams::default();
        let model = ObjectModel::new(&square_spec(), &params).unwrap();
        let s = SimState {
            step: 7,
            pusher_pos: Vec2::new(1.0, 1.0),
            ..SimState::default()
        };
        let err = step_physics(&s, &model, &params, PusherCommand::new(f64::NAN, 0.0)).unwrap_err();
        assert!(matches!(err, Error::SimulationDiverged { step: 7, .. }));
    }

    #[test]
    fn format_sig_like_printf_g() {
        assert_eq!(format_sig(0.0, 9), "0");
        assert_eq!(format_sig(1.5, 9), "1.5");
        assert_eq!(format_sig(0.1 + 0.2, 9), "0.3");
        assert_eq!(format_sig(-123456.789, 9), "-123456.789");
        assert_eq!(format_sig(1.23456789012e-7, 9), "1.23456789e-7");
        assert_eq!(format_sig(2.0 / 3.0, 9), "0.666666667");
        assert_eq!(format_sig(1e10, 9), "1e10");
    }

    #[test]
    fn trajectory_csv_layout() {
        let s = SimState {
            contact: true,
            time: 0.1,
            ..SimState::default()
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_HEADER);
        assert_eq!(lines.next().unwrap(), "0.1,0,0,0,0,0,0,0,0,1");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn free_object_comes_to_rest(vx in -0.5f64..0.5, vy in -0.5f64..0.5, w in -5.0f64..5.0, th in -3.0f64..3.0) {
            let params = SimParams::default();
            let model = ObjectModel::new(&tblock_with_weight_at(0.09).unwrap(), &params).unwrap();
            let mut s = SimState {
                pose: Pose2::new(0.0, 0.0, th),
                twist: Twist2 { vx, vy, omega: w },
                pusher_pos: Vec2::new(3.0, 0.0),
                ..SimState::default()
            };
            for _ in 0..50 {
                s = step_physics(&s, &model, &params, PusherCommand::default()).unwrap();
            }
            prop_assert!(s.twist.linear().norm() < 1e-4);
            prop_assert!(s.twist.omega.abs() < 1e-3);
        }
    }
}
