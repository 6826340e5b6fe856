//! Single-lane mixed-platoon plant: one preceding vehicle (PV) followed by
//! n vehicles, each either a CAV (externally commanded acceleration) or an
//! HDV driven by the intelligent driver model (IDM).
//!
//! Spacing is bumper-to-bumper and evolves by the exact kinematic relation
//!   s_i(k+1) = s_i(k) + (v_{i-1}(k) - v_i(k))·dt + ½(a_{i-1}(k) - a_i(k))·dt²
//! while velocities integrate forward-Euler and are floored at zero (the
//! floor is folded back into the applied acceleration so the kinematic
//! identity holds exactly for logged accelerations).

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default actuator acceleration bounds [min, max] in m/s², shared by the
/// IDM clip, the OVM-ACC baseline clip, and the controller input box.
pub const DEFAULT_ACCEL_BOUNDS: (f64, f64) = (-5.0, 4.0);

/// Fixed vehicle length (m) for position <-> spacing conversion.
pub const VEHICLE_LENGTH: f64 = 5.0;

/// Role of a vehicle in the platoon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    /// Head vehicle; follows an external speed profile, never controlled.
    Pv,
    /// Connected automated vehicle; acceleration is the control input.
    Cav,
    /// Human-driven vehicle; acceleration comes from the IDM.
    Hdv,
}

/// Kinematic state of one vehicle. `spacing` is bumper-to-bumper distance to
/// the predecessor (undefined for the PV, kept at +inf). `acceleration` is
/// the value applied over the step that produced this state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub spacing: f64,
}

/// IDM parameters. Defaults are the nominal calibration used throughout:
/// a_max 4, delta 4, s_gap 2, b_max -5, v_d 25, T 1.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration a (m/s²), > 0.
    pub a_max: f64,
    /// Free-flow exponent δ (dimensionless).
    pub delta: f64,
    /// Standstill gap s_gap (m), > 0.
    pub s_gap: f64,
    /// Comfortable braking bound b (m/s²), < 0; also the hard output floor.
    pub b_max: f64,
    /// Desired (free-flow) speed v_d (m/s), > 0.
    pub v_d: f64,
    /// Desired time headway T (s).
    pub t_headway: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 4.0,
            delta: 4.0,
            s_gap: 2.0,
            b_max: -5.0,
            v_d: 25.0,
            t_headway: 1.5,
        }
    }
}

impl IdmParams {
    /// Same parameters with a different desired time headway.
    #[must_use]
    pub fn with_headway(mut self, t_headway: f64) -> Self {
        self.t_headway = t_headway;
        self
    }
}

/// OVM-ACC baseline parameters: a = α(V(s) − v) + β(v_pre − v) with V the
/// clipped half-cosine desired-velocity curve between s_st and s_go.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmParams {
    pub alpha: f64,
    pub beta: f64,
    pub s_st: f64,
    pub s_go: f64,
    pub v_max: f64,
}

impl OvmParams {
    /// Aggressive gain set (α=0.8, β=0.5).
    #[must_use]
    pub fn aggressive() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.5,
            s_st: 5.0,
            s_go: 35.0,
            v_max: 30.0,
        }
    }

    /// Mild gain set (α=0.5, β=0.8).
    #[must_use]
    pub fn mild() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.8,
            s_st: 5.0,
            s_go: 35.0,
            v_max: 30.0,
        }
    }
}

/// Linearization point: equilibrium velocity and spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub v_star: f64,
    pub s_star: f64,
}

/// Sampled PV speed trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl SpeedProfile {
    /// Duration in seconds covered by the samples.
    #[must_use]
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    /// Write as CSV with header `t,v`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,v")?;
        for (k, v) in self.samples.iter().enumerate() {
            writeln!(w, "{:.3},{:.6}", k as f64 * self.dt, v)?;
        }
        Ok(())
    }

    /// Parse from CSV with header `t,v`; dt is inferred from the first two rows.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text)?;
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('t')) {
                continue;
            }
            let mut parts = line.split(',');
            let t: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad profile row {i}: {line}")))?;
            let v: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad profile row {i}: {line}")))?;
            times.push(t);
            samples.push(v);
        }
        if samples.len() < 2 {
            return Err(Error::Parse("speed profile needs at least 2 rows".into()));
        }
        if samples.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parse("speed profile has negative/non-finite speeds".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::Parse("speed profile time column is not increasing".into()));
        }
        Ok(Self { dt, samples })
    }
}

/// Static description of the platoon behind the PV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    /// Number of followers (CAVs + HDVs), excluding the PV.
    pub n: usize,
    /// 1-based follower indices that are CAVs, sorted; must contain 1.
    pub cav_indices: Vec<usize>,
    /// Sampling interval (s).
    pub dt: f64,
    /// Vehicle length (m) for position <-> spacing conversion.
    pub vehicle_length: f64,
    /// Base IDM parameters (t_headway is the nominal value; per-HDV
    /// headways below override it per driver).
    pub idm: IdmParams,
    /// Desired time headway per HDV, in platoon order.
    pub hdv_headways: Vec<f64>,
}

impl PlatoonConfig {
    /// 5-vehicle reference platoon: followers [CAV, HDV, CAV, HDV].
    #[must_use]
    pub fn reference(hdv_headways: [f64; 2]) -> Self {
        Self {
            n: 4,
            cav_indices: vec![1, 3],
            dt: 0.1,
            vehicle_length: VEHICLE_LENGTH,
            idm: IdmParams::default(),
            hdv_headways: hdv_headways.to_vec(),
        }
    }

    /// Validate structural invariants; call once after construction.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("platoon needs at least one follower".into()));
        }
        if self.cav_indices.is_empty() || self.cav_indices[0] != 1 {
            return Err(Error::InvalidConfig(
                "the first follower (index 1) must be a CAV".into(),
            ));
        }
        if self.cav_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("cav_indices must be strictly increasing".into()));
        }
        if self.cav_indices.iter().any(|&i| i == 0 || i > self.n) {
            return Err(Error::InvalidConfig("cav_indices out of range".into()));
        }
        let hdv_count = self.n - self.cav_indices.len();
        if self.hdv_headways.len() != hdv_count {
            return Err(Error::Dimension {
                context: "hdv_headways",
                expected: hdv_count,
                got: self.hdv_headways.len(),
            });
        }
        if !(self.dt > 0.0) || !(self.vehicle_length > 0.0) {
            return Err(Error::InvalidConfig("dt and vehicle_length must be positive".into()));
        }
        Ok(())
    }

    /// Number of CAVs (control inputs).
    #[must_use]
    pub fn m(&self) -> usize {
        self.cav_indices.len()
    }

    /// Output dimension: velocity + spacing errors for every follower.
    #[must_use]
    pub fn p(&self) -> usize {
        2 * self.n
    }

    /// Kind of vehicle `i` (0 = PV, 1..=n followers).
    #[must_use]
    pub fn kind(&self, i: usize) -> VehicleKind {
        if i == 0 {
            VehicleKind::Pv
        } else if self.cav_indices.contains(&i) {
            VehicleKind::Cav
        } else {
            VehicleKind::Hdv
        }
    }

    /// 1-based follower indices of the HDVs, in platoon order.
    #[must_use]
    pub fn hdv_indices(&self) -> Vec<usize> {
        (1..=self.n).filter(|i| !self.cav_indices.contains(i)).collect()
    }

    /// IDM parameters for HDV follower `i` (its own sampled headway).
    pub fn idm_for(&self, i: usize) -> Result<IdmParams> {
        let pos = self
            .hdv_indices()
            .iter()
            .position(|&h| h == i)
            .ok_or_else(|| Error::InvalidConfig(format!("vehicle {i} is not an HDV")))?;
        Ok(self.idm.with_headway(self.hdv_headways[pos]))
    }
}

/// IDM car-following acceleration. `delta_v = v − v_preceding` (positive
/// when closing in). Output is clipped to [b_max, a_max].
pub fn idm_acceleration(v: f64, delta_v: f64, s: f64, p: &IdmParams) -> Result<f64> {
    if !(v.is_finite() && delta_v.is_finite() && s.is_finite()) {
        return Err(Error::NonFinite { context: "idm_acceleration" });
    }
    if s <= 0.0 {
        return Err(Error::Collision { vehicle: 0, spacing: s });
    }
    let s_star = p.s_gap + v * p.t_headway + v * delta_v / (2.0 * (p.a_max * p.b_max.abs()).sqrt());
    let raw = p.a_max * (1.0 - (v / p.v_d).powf(p.delta) - (s_star / s).powi(2));
    Ok(raw.clamp(p.b_max, p.a_max))
}

/// Equilibrium spacing for a given speed: the s with
/// idm_acceleration(v*, 0, s) = 0, i.e. (s_gap + v*·T) / sqrt(1 − (v*/v_d)^δ).
pub fn idm_equilibrium_spacing(v_star: f64, p: &IdmParams) -> Result<f64> {
    if !v_star.is_finite() || v_star < 0.0 {
        return Err(Error::NonFinite { context: "idm_equilibrium_spacing" });
    }
    if v_star >= p.v_d {
        return Err(Error::NoEquilibrium { v_star, v_d: p.v_d });
    }
    let deficit = 1.0 - (v_star / p.v_d).powf(p.delta);
    Ok((p.s_gap + v_star * p.t_headway) / deficit.sqrt())
}

/// Half-cosine desired-velocity curve of the OVM-ACC baseline.
fn ovm_desired_velocity(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_st {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        0.5 * p.v_max * (1.0 - (std::f64::consts::PI * (s - p.s_st) / (p.s_go - p.s_st)).cos())
    }
}

/// OVM-ACC baseline acceleration α(V(s) − v) + β(v_pre − v), clipped to the
/// default actuator bounds.
pub fn ovm_acc_baseline(s: f64, v: f64, v_pre: f64, p: &OvmParams) -> Result<f64> {
    if !(s.is_finite() && v.is_finite() && v_pre.is_finite()) {
        return Err(Error::NonFinite { context: "ovm_acc_baseline" });
    }
    let raw = p.alpha * (ovm_desired_velocity(s, p) - v) + p.beta * (v_pre - v);
    Ok(raw.clamp(DEFAULT_ACCEL_BOUNDS.0, DEFAULT_ACCEL_BOUNDS.1))
}

/// Initialize the platoon at the equilibrium of `v_star`: every follower at
/// speed v_star with its own equilibrium spacing (per-driver headway for
/// HDVs, nominal headway for CAVs). PV leads at position 0.
pub fn init_equilibrium(cfg: &PlatoonConfig, v_star: f64) -> Result<Vec<VehicleState>> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.n + 1);
    states.push(VehicleState {
        position: 0.0,
        velocity: v_star,
        acceleration: 0.0,
        spacing: f64::INFINITY,
    });
    for i in 1..=cfg.n {
        let s_eq = match cfg.kind(i) {
            VehicleKind::Hdv => idm_equilibrium_spacing(v_star, &cfg.idm_for(i)?)?,
            _ => idm_equilibrium_spacing(v_star, &cfg.idm)?,
        };
        let prev = states[i - 1].position;
        states.push(VehicleState {
            position: prev - s_eq - cfg.vehicle_length,
            velocity: v_star,
            acceleration: 0.0,
            spacing: s_eq,
        });
    }
    Ok(states)
}

/// Advance the platoon one step of length `dt`.
///
/// HDV accelerations come from the IDM, CAV accelerations from
/// `cav_inputs` (one per CAV, platoon order), and the PV tracks
/// `pv_velocity_next`. Velocities are floored at zero with the floor folded
/// into the applied acceleration, so spacings follow the exact kinematic
/// update with the accelerations recorded on the returned states.
pub fn step_platoon(
    states: &[VehicleState],
    cav_inputs: &[f64],
    pv_velocity_next: f64,
    dt: f64,
    cfg: &PlatoonConfig,
) -> Result<Vec<VehicleState>> {
    if states.len() != cfg.n + 1 {
        return Err(Error::Dimension {
            context: "step_platoon states",
            expected: cfg.n + 1,
            got: states.len(),
        });
    }
    if cav_inputs.len() != cfg.m() {
        return Err(Error::Dimension {
            context: "step_platoon cav_inputs",
            expected: cfg.m(),
            got: cav_inputs.len(),
        });
    }
    if !(dt > 0.0) || !pv_velocity_next.is_finite() || cav_inputs.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite { context: "step_platoon inputs" });
    }

    // Commanded acceleration per vehicle (PV from its profile).
    let mut accel = vec![0.0; cfg.n + 1];
    accel[0] = (pv_velocity_next.max(0.0) - states[0].velocity) / dt;
    let mut cav_iter = cav_inputs.iter();
    for i in 1..=cfg.n {
        accel[i] = match cfg.kind(i) {
            VehicleKind::Cav => *cav_iter.next().expect("one input per CAV"),
            VehicleKind::Hdv => {
                let dv = states[i].velocity - states[i - 1].velocity;
                idm_acceleration(states[i].velocity, dv, states[i].spacing, &cfg.idm_for(i)?)
                    .map_err(|e| match e {
                        Error::Collision { spacing, .. } => Error::Collision { vehicle: i, spacing },
                        other => other,
                    })?
            }
            VehicleKind::Pv => unreachable!(),
        };
    }

    // Fold the v >= 0 floor into the applied acceleration.
    let applied: Vec<f64> = (0..=cfg.n)
        .map(|i| {
            let v_next = states[i].velocity + accel[i] * dt;
            if v_next < 0.0 {
                -states[i].velocity / dt
            } else {
                accel[i]
            }
        })
        .collect();

    let mut next = Vec::with_capacity(cfg.n + 1);
    for i in 0..=cfg.n {
        let v = states[i].velocity;
        let a = applied[i];
        let spacing = if i == 0 {
            f64::INFINITY
        } else {
            states[i].spacing
                + (states[i - 1].velocity - v) * dt
                + 0.5 * (applied[i - 1] - a) * dt * dt
        };
        if i > 0 && spacing <= 0.0 {
            return Err(Error::Collision { vehicle: i, spacing });
        }
        next.push(VehicleState {
            position: states[i].position + v * dt + 0.5 * a * dt * dt,
            velocity: (v + a * dt).max(0.0),
            acceleration: a,
            spacing,
        });
    }
    Ok(next)
}

/// Stack follower states into the output vector
/// y = [ṽ_1..ṽ_n, s̃_1..s̃_n] of velocity then spacing errors.
#[must_use]
pub fn to_error_states(states: &[VehicleState], eq: &EquilibriumPoint) -> DVector<f64> {
    let n = states.len() - 1;
    let mut y = DVector::zeros(2 * n);
    for i in 1..=n {
        y[i - 1] = states[i].velocity - eq.v_star;
        y[n + i - 1] = states[i].spacing - eq.s_star;
    }
    y
}

/// Invert [`to_error_states`]: recover (velocity, spacing) per follower.
#[must_use]
pub fn from_error_states(y: &DVector<f64>, eq: &EquilibriumPoint) -> Vec<(f64, f64)> {
    let n = y.len() / 2;
    (0..n).map(|i| (y[i] + eq.v_star, y[n + i] + eq.s_star)).collect()
}

/// Draw `per_group` distinct headways uniformly inside each of `group_count`
/// equal partitions of `range`. Deterministic under `seed`; output is in
/// group order.
pub fn sample_headways(
    seed: u64,
    group_count: usize,
    range: [f64; 2],
    per_group: usize,
) -> Result<Vec<f64>> {
    let [lo, hi] = range;
    if !(hi > lo) || group_count == 0 {
        return Err(Error::InvalidConfig("headway range/groups invalid".into()));
    }
    if per_group > 1_000_000 {
        return Err(Error::InvalidConfig(
            "per_group exceeds representable distinct headways".into(),
        ));
    }
    let width = (hi - lo) / group_count as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(group_count * per_group);
    for g in 0..group_count {
        let g_lo = lo + g as f64 * width;
        let mut group = Vec::with_capacity(per_group);
        while group.len() < per_group {
            let v = g_lo + rng.gen::<f64>() * width;
            if !group.contains(&v) {
                group.push(v);
            }
        }
        out.extend(group);
    }
    Ok(out)
}

/// Kind of synthetic PV speed cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    /// Hard accelerate/brake pattern; contains at least 3 decelerations
    /// steeper than −2 m/s².
    Aggressive,
    /// Gentle speed drift, |a| ≲ 1 m/s².
    Mild,
    /// Repeated near-stops and launches.
    StopAndGo,
}

/// Generate a deterministic piecewise-smooth synthetic PV cycle.
///
/// The cycle is a chain of cruise segments and half-cosine speed ramps. The
/// aggressive kind is built from `max(3, duration/15s)` blocks, each ending
/// in one hard braking ramp, so the ≥3 steep-deceleration guarantee holds by
/// construction.
#[must_use]
pub fn synth_cycle(kind: CycleKind, duration: f64, dt: f64, seed: u64) -> SpeedProfile {
    assert!(duration > 0.0 && dt > 0.0, "duration and dt must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let count = (duration / dt).round() as usize;

    // Piecewise description: (segment duration, v_start, v_end); ramps are
    // half-cosine in velocity, cruises hold v.
    let mut segs: Vec<(f64, f64, f64)> = Vec::new();
    let push_ramp = |segs: &mut Vec<(f64, f64, f64)>, v0: f64, v1: f64, peak: f64| {
        // Half-cosine ramp peak acceleration is π·|Δv|/(2τ); pick τ for the
        // requested peak.
        let tau = (std::f64::consts::PI * (v1 - v0).abs() / (2.0 * peak)).max(2.0 * dt);
        segs.push((tau, v0, v1));
    };

    match kind {
        CycleKind::Aggressive => {
            let blocks = ((duration / 15.0).floor() as usize).max(3);
            let block_len = duration / blocks as f64;
            let mut v = 10.0 + rng.gen::<f64>() * 4.0;
            for _ in 0..blocks {
                let mut used = 0.0;
                let v_hi = (v + 4.0 + rng.gen::<f64>() * 5.0).min(22.0);
                let a_up = 1.4 + rng.gen::<f64>() * 0.8;
                push_ramp(&mut segs, v, v_hi, a_up);
                used += segs.last().unwrap().0;
                let cruise = (0.5 + rng.gen::<f64>() * 1.5).min((block_len - used).max(0.1) * 0.4);
                segs.push((cruise, v_hi, v_hi));
                used += cruise;
                // One guaranteed hard brake per block, peak in [2.4, 3.4].
                let v_lo = (v_hi - 5.0 - rng.gen::<f64>() * 4.0).max(4.0);
                let a_dn = 2.4 + rng.gen::<f64>() * 1.0;
                push_ramp(&mut segs, v_hi, v_lo, a_dn);
                used += segs.last().unwrap().0;
                if used < block_len {
                    segs.push((block_len - used, v_lo, v_lo));
                }
                v = v_lo;
            }
        }
        CycleKind::Mild => {
            let mut v = 12.0 + rng.gen::<f64>() * 3.0;
            let mut t = 0.0;
            while t < duration {
                let target = (v + rng.gen_range(-3.0..3.0)).clamp(9.0, 18.0);
                let peak = 0.4 + rng.gen::<f64>() * 0.5;
                push_ramp(&mut segs, v, target, peak);
                t += segs.last().unwrap().0;
                let cruise = 2.0 + rng.gen::<f64>() * 4.0;
                segs.push((cruise, target, target));
                t += cruise;
                v = target;
            }
        }
        CycleKind::StopAndGo => {
            let mut v = 10.0 + rng.gen::<f64>() * 3.0;
            let mut t = 0.0;
            while t < duration {
                let low = rng.gen_range(0.0..2.0);
                push_ramp(&mut segs, v, low, 1.6 + rng.gen::<f64>() * 0.6);
                t += segs.last().unwrap().0;
                let wait = 1.0 + rng.gen::<f64>() * 3.0;
                segs.push((wait, low, low));
                t += wait;
                let high = rng.gen_range(8.0..14.0);
                push_ramp(&mut segs, low, high, 1.2 + rng.gen::<f64>() * 0.8);
                t += segs.last().unwrap().0;
                let cruise = 2.0 + rng.gen::<f64>() * 3.0;
                segs.push((cruise, high, high));
                t += cruise;
                v = high;
            }
        }
    }

    // Sample the chain; repeat it if the requested duration overruns.
    let total: f64 = segs.iter().map(|s| s.0).sum();
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let mut t = (k as f64 * dt) % total;
        let mut v = segs.last().unwrap().2;
        for &(tau, v0, v1) in &segs {
            if t <= tau {
                let phase = (t / tau).clamp(0.0, 1.0);
                v = v0 + (v1 - v0) * 0.5 * (1.0 - (std::f64::consts::PI * phase).cos());
                break;
            }
            t -= tau;
        }
        samples.push(v.max(0.0));
    }
    SpeedProfile { dt, samples }
}
