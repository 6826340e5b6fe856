//! Battery-terminal power model for an electric vehicle, its polynomial
//! surrogate, and the convex per-step power estimate used in the controller
//! cost.
//!
//! The physical model computes traction power
//!   P_w = v·(m·g·(f·cosα + sinα) + ½·ρ·C_D·A_f·v² + m·δ·a)
//! and maps it to battery power through the drivetrain efficiency when
//! discharging (P_w ≥ 0) or through the speed-dependent regeneration factor
//! k(v) when braking. The surrogate is a least-squares fit of that model on
//! a (v, a) grid over eight monomials v^i·a^j (i ≤ 3, j ≤ 2, cross terms
//! p_11, p_22, p_31, p_32 pinned to zero), which makes the mean-speed
//! quadratic form exact at v = v̄. The fit constrains the coefficients so
//! that the quadratic form stays convex for every mean speed in the fitted
//! range; see the shipped fixture for the resulting values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::TrajectoryLog;
use crate::{Error, Result};

/// Physical vehicle/energy parameters. Defaults: 1500 kg sedan with
/// f=0.015, ρ=1.225, C_D=0.30, A_f=2.2, δ=1.05, η_t=0.95, η_m=0.90, flat road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalEnergyParams {
    pub mass: f64,
    pub f_roll: f64,
    pub g: f64,
    pub rho: f64,
    pub c_d: f64,
    pub a_f: f64,
    pub delta_mass: f64,
    pub eta_t: f64,
    pub eta_m: f64,
    pub grade: f64,
}

impl Default for PhysicalEnergyParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            f_roll: 0.015,
            g: 9.81,
            rho: 1.225,
            c_d: 0.30,
            a_f: 2.2,
            delta_mass: 1.05,
            eta_t: 0.95,
            eta_m: 0.90,
            grade: 0.0,
        }
    }
}

/// Monomials retained in the surrogate, as (i, j) powers of v^i·a^j, in the
/// canonical fitting order.
pub const RETAINED_TERMS: [(usize, usize); 8] =
    [(0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (0, 2), (2, 1), (1, 2)];

/// Polynomial surrogate coefficients p_ij (i∈0..3, j∈0..2, units compose to
/// W). Cross terms p_11, p_22, p_31, p_32 are identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyCoefficients {
    /// p[i][j] multiplies v^i·a^j.
    pub p: [[f64; 3]; 4],
}

impl PolyCoefficients {
    /// Coefficient of v^i·a^j.
    #[must_use]
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.p[i][j]
    }

    /// A zeroed coefficient grid.
    #[must_use]
    pub fn zeros() -> Self {
        Self { p: [[0.0; 3]; 4] }
    }

    /// Build from the 8 retained-term values in [`RETAINED_TERMS`] order.
    #[must_use]
    pub fn from_retained(vals: &[f64; 8]) -> Self {
        let mut c = Self::zeros();
        for (k, &(i, j)) in RETAINED_TERMS.iter().enumerate() {
            c.p[i][j] = vals[k];
        }
        c
    }
}

/// Quadratic per-step power estimate around mean speed v̄:
///   P̃(v, a) = c_vv·v² + c_aa·a² + c_va·v·a + c_v·v + c_a·a + c_0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexPowerForm {
    pub v_bar: f64,
    pub c_vv: f64,
    pub c_aa: f64,
    pub c_va: f64,
    pub c_v: f64,
    pub c_a: f64,
    pub c_0: f64,
}

impl ConvexPowerForm {
    /// Evaluate P̃(v, a) in W.
    #[must_use]
    pub fn eval(&self, v: f64, a: f64) -> f64 {
        self.c_vv * v * v
            + self.c_aa * a * a
            + self.c_va * v * a
            + self.c_v * v
            + self.c_a * a
            + self.c_0
    }

    /// Smallest eigenvalue of the (v, a) Hessian [[2c_vv, c_va],[c_va, 2c_aa]].
    #[must_use]
    pub fn hessian_min_eig(&self) -> f64 {
        let (h11, h22, h12) = (2.0 * self.c_vv, 2.0 * self.c_aa, self.c_va);
        let tr = h11 + h22;
        let det = h11 * h22 - h12 * h12;
        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
    }
}

/// Regenerative braking factor k(v): 0.5·v/5 below 5 m/s, then
/// 0.5 + 0.3·(v−5)/20.
pub fn regen_factor(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite { context: "regen_factor" });
    }
    if v < 0.0 {
        return Err(Error::Parse(format!("regen_factor: v = {v} < 0")));
    }
    Ok(if v < 5.0 { 0.5 * v / 5.0 } else { 0.5 + 0.3 * (v - 5.0) / 20.0 })
}

/// Battery-terminal power (W): discharge P_w/(η_t·η_m) when traction power
/// P_w ≥ 0, recovery k(v)·η_t·η_m·P_w when braking.
pub fn physical_power(v: f64, a: f64, p: &PhysicalEnergyParams) -> Result<f64> {
    if !(v.is_finite() && a.is_finite()) {
        return Err(Error::NonFinite { context: "physical_power" });
    }
    if v < 0.0 {
        return Err(Error::Parse(format!("physical_power: v = {v} < 0")));
    }
    let road = p.mass * p.g * (p.f_roll * p.grade.cos() + p.grade.sin());
    let drag = 0.5 * p.rho * p.c_d * p.a_f * v * v;
    let inertia = p.mass * p.delta_mass * a;
    let p_w = v * (road + drag + inertia);
    Ok(if p_w >= 0.0 {
        p_w / (p.eta_t * p.eta_m)
    } else {
        regen_factor(v)? * p.eta_t * p.eta_m * p_w
    })
}

/// Result of fitting the polynomial surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: PolyCoefficients,
    /// Root-mean-square residual against the physical model on the fit grid (W).
    pub rms_w: f64,
    /// Largest absolute residual on the fit grid (W).
    pub max_abs_w: f64,
}

/// Least-squares fit of [`physical_power`] over the retained monomials,
/// constrained so the downstream quadratic form stays convex for every v̄
/// inside the fitted speed range. See [`fit_poly_to_values`].
pub fn fit_poly_coeffs(
    p: &PhysicalEnergyParams,
    v_grid: &[f64],
    a_grid: &[f64],
) -> Result<PolyFit> {
    let mut values = Vec::with_capacity(v_grid.len() * a_grid.len());
    for &v in v_grid {
        for &a in a_grid {
            values.push(physical_power(v, a, p)?);
        }
    }
    fit_poly_to_values(v_grid, a_grid, &values)
}

/// Convexity-constrained least-squares fit of the retained monomials to
/// power samples `values[iv * a_grid.len() + ia]` = P(v_grid[iv], a_grid[ia]).
///
/// Plain least squares is used whenever its induced quadratic form is
/// already PSD for every v̄ in the fitted speed range (always the case for
/// data sampled from a convex surrogate, which it then recovers exactly).
/// Otherwise the fit solves the constrained program directly — see
/// [`psd_constrained_ls`]. The physical model triggers the constrained
/// path: its large v·a content (inertia times speed) has no retained v·a
/// monomial and loads p_21 far beyond what the convexity coupling allows.
pub fn fit_poly_to_values(
    v_grid: &[f64],
    a_grid: &[f64],
    values: &[f64],
) -> Result<PolyFit> {
    if v_grid.len() < 20 || a_grid.len() < 20 {
        return Err(Error::InvalidConfig("fit grid needs at least 20x20 points".into()));
    }
    let n = v_grid.len() * a_grid.len();
    if values.len() != n {
        return Err(Error::Dimension {
            context: "fit_poly_to_values",
            expected: n,
            got: values.len(),
        });
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "fit_poly_to_values" });
    }
    let mut design = DMatrix::zeros(n, 8);
    let mut target = DVector::zeros(n);
    let mut row = 0;
    for &v in v_grid {
        for &a in a_grid {
            for (k, &(i, j)) in RETAINED_TERMS.iter().enumerate() {
                design[(row, k)] = v.powi(i as i32) * a.powi(j as i32);
            }
            target[row] = values[row];
            row += 1;
        }
    }

    // The surrogate steers sustained speed choices, so fidelity at small
    // accelerations dominates the fit; hard-transient corners — which an
    // 8-term basis cannot serve at the same time as the cruise slice —
    // contribute at reduced weight.
    let mut design_w = design.clone();
    let mut target_w = target.clone();
    let mut row = 0;
    for _ in v_grid {
        for &a in a_grid {
            let w = (-0.5 * (a / ACCEL_WEIGHT_SCALE).powi(2)).exp().sqrt();
            for k in 0..8 {
                design_w[(row, k)] *= w;
            }
            target_w[row] *= w;
            row += 1;
        }
    }

    let v_max = v_grid.iter().cloned().fold(0.0, f64::max);
    let vbar_grid: Vec<f64> = (0..=100).map(|k| v_max * k as f64 / 100.0).collect();

    let mut theta = pinned_ls(&design_w, &target_w, &[None; 8])?;
    let c = PolyCoefficients::from_retained(&theta_array(&theta));
    if !psd_over(&c, &vbar_grid) {
        theta = psd_constrained_ls(&design_w, &target_w, &vbar_grid)?;
    }
    let coeffs = PolyCoefficients::from_retained(&theta_array(&theta));
    if !psd_over(&coeffs, &vbar_grid) {
        return Err(Error::NonConvexPowerForm { v_bar: v_max });
    }

    // Quality metrics are reported unweighted over the full grid.
    let resid = &design * &theta - &target;
    let rms_w = (resid.norm_squared() / n as f64).sqrt();
    let max_abs_w = resid.amax();
    Ok(PolyFit { coeffs, rms_w, max_abs_w })
}

/// Least squares subject to the induced form being PSD at every v̄ in
/// `vbars`.
///
/// With x = c_vv(v̄), y = c_aa(v̄), z = c_va(v̄)/2 (each affine in the
/// coefficients), PSD at one v̄ is x ≥ 0, y ≥ 0, x·y ≥ z² — equivalently the
/// second-order cone ‖(x−y, 2z)‖ ≤ x + y — so the feasible set is convex and
/// the program is solved by outer approximation: solve the QP with the
/// current half-space rows, add the supporting hyperplane of the most
/// violated cone at the iterate, and repeat until every cone holds with a
/// small relative margin. The margin keeps the returned form strictly inside
/// the PSD set so downstream construction checks cannot fail on roundoff.
fn psd_constrained_ls(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    vbars: &[f64],
) -> Result<DVector<f64>> {
    const MARGIN: f64 = 1e-7;
    let n = design.nrows() as f64;
    let v_max = vbars.iter().cloned().fold(0.0, f64::max);

    // Column scaling keeps the 8×8 Gram manageable (raw monomial columns
    // span ~6 orders of magnitude).
    let mut scale = DVector::from_element(8, 1.0);
    for k in 0..8 {
        scale[k] = design.column(k).norm().max(1e-12);
    }
    let mut a_s = design.clone();
    for k in 0..8 {
        a_s.column_mut(k).unscale_mut(scale[k]);
    }
    let mut h = DMatrix::zeros(8, 8);
    h.gemm_tr(2.0 / n, &a_s, &a_s, 0.0);
    let mut f = DVector::zeros(8);
    f.gemv_tr(-2.0 / n, &a_s, target, 0.0);
    let h_scale = h.amax();
    h /= h_scale;
    f /= h_scale;
    for k in 0..8 {
        h[(k, k)] += 1e-12;
    }

    // Every constraint is a homogeneous row g·θ ≤ 0 in scaled coordinates; a
    // row in coefficient space scales entrywise by 1/scale[k].
    let scaled_row = |r: &[f64; 8]| {
        DVector::from_iterator(8, r.iter().zip(scale.iter()).map(|(v, s)| v / s))
    };
    // c_vv and c_aa are affine in v̄, so nonnegativity at the range endpoints
    // gives nonnegativity on the whole range (rows negated into ≤ form).
    let mut rows: Vec<DVector<f64>> = vec![
        scaled_row(&[0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        scaled_row(&[0.0, 0.0, -1.0, -v_max, 0.0, 0.0, 0.0, 0.0]),
        scaled_row(&[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]),
        scaled_row(&[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -v_max]),
    ];

    let mut theta = DVector::zeros(8);
    for _ in 0..400 {
        let mut g = DMatrix::zeros(rows.len(), 8);
        for (i, r) in rows.iter().enumerate() {
            g.row_mut(i).copy_from(&r.transpose());
        }
        let theta_s = active_set_homogeneous_qp(&h, &f, &g)?;
        for k in 0..8 {
            theta[k] = theta_s[k] / scale[k];
        }

        // Most violated cone over the v̄ grid, with margin.
        let mut worst: Option<(f64, f64, [f64; 2])> = None;
        for &vb in vbars {
            let x = theta[2] + vb * theta[3];
            let y = theta[5] + vb * theta[7];
            let u = [x - y, theta[6] * vb];
            let norm_u = u[0].hypot(u[1]);
            let viol = norm_u - (1.0 - MARGIN) * (x + y);
            if viol > 0.0 && worst.as_ref().is_none_or(|(w, _, _)| viol > *w) {
                worst = Some((viol, vb, u));
            }
        }
        let Some((viol, vb, u)) = worst else {
            return Ok(theta);
        };
        let norm_u = u[0].hypot(u[1]).max(1e-300);
        if viol <= 1e-9 * (1.0 + norm_u) {
            return Ok(theta);
        }
        if std::env::var_os("PADEEPC_DIAG").is_some() {
            eprintln!("fit cut {}: worst viol {viol:.3e} at v_bar {vb:.2}", rows.len());
        }
        let (w1, w2) = (u[0] / norm_u, u[1] / norm_u);
        // w·(x−y, p21·v̄) ≤ (1−margin)(x+y), written as row·θ ≤ 0.
        let keep = 1.0 - MARGIN;
        let cut = [
            0.0,
            0.0,
            w1 - keep,
            vb * (w1 - keep),
            0.0,
            -w1 - keep,
            w2 * vb,
            vb * (-w1 - keep),
        ];
        rows.push(scaled_row(&cut));
    }
    Err(Error::NonConvexPowerForm { v_bar: v_max })
}

/// Exact primal active-set solve of min ½θᵀHθ + fᵀθ subject to G·θ ≤ 0,
/// starting from the (always feasible) origin. H must be positive definite.
/// Small and dense on purpose: the fit's outer approximation needs exact
/// subproblem solutions or its cut loop stalls on solver noise.
fn active_set_homogeneous_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = h.nrows();
    let m = g.nrows();
    let mut theta: DVector<f64> = DVector::zeros(n);
    let mut work: Vec<usize> = Vec::new();
    for _ in 0..1000 {
        let nw = work.len();
        let mut kkt = DMatrix::zeros(n + nw, n + nw);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (slot, &i) in work.iter().enumerate() {
            for c in 0..n {
                kkt[(n + slot, c)] = g[(i, c)];
                kkt[(c, n + slot)] = g[(i, c)];
            }
        }
        let mut rhs = DVector::zeros(n + nw);
        for c in 0..n {
            rhs[c] = -f[c];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            // Linearly dependent working set: retry without the newest row.
            work.pop();
            continue;
        };
        let minimizer = sol.rows(0, n).into_owned();
        let d = &minimizer - &theta;
        if d.amax() <= 1e-13 * (1.0 + theta.amax()) {
            // At the working-set minimizer: optimal once no multiplier of a
            // ≤-row is negative; otherwise release the most negative one.
            let mut drop_slot: Option<usize> = None;
            let mut most_neg = -1e-9;
            for slot in 0..nw {
                if sol[n + slot] < most_neg {
                    most_neg = sol[n + slot];
                    drop_slot = Some(slot);
                }
            }
            match drop_slot {
                Some(slot) => {
                    work.remove(slot);
                }
                None => return Ok(theta),
            }
        } else {
            // Step toward the minimizer, stopping at the first blocking row.
            let mut alpha = 1.0;
            let mut block: Option<usize> = None;
            for i in 0..m {
                if work.contains(&i) {
                    continue;
                }
                let gd: f64 = (0..n).map(|c| g[(i, c)] * d[c]).sum();
                if gd > 1e-14 {
                    let gt: f64 = (0..n).map(|c| g[(i, c)] * theta[c]).sum();
                    let a = (-gt / gd).max(0.0);
                    if a < alpha - 1e-15 {
                        alpha = a;
                        block = Some(i);
                    }
                }
            }
            theta.axpy(alpha, &d, 1.0);
            if let Some(i) = block {
                work.push(i);
            }
        }
    }
    Err(Error::Solver { status: crate::qp::SolveStatus::MaxIter })
}

fn theta_array(theta: &DVector<f64>) -> [f64; 8] {
    let mut out = [0.0; 8];
    for k in 0..8 {
        out[k] = theta[k];
    }
    out
}

/// Least squares with selected coefficients pinned to fixed values.
fn pinned_ls(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    pinned: &[Option<f64>; 8],
) -> Result<DVector<f64>> {
    let free: Vec<usize> = (0..8).filter(|k| pinned[*k].is_none()).collect();
    let mut adjusted = target.clone();
    for (k, pin) in pinned.iter().enumerate() {
        if let Some(val) = pin {
            adjusted -= design.column(k) * *val;
        }
    }
    let sub = design.select_columns(free.iter());
    let svd = sub.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < free.len() {
        return Err(Error::RankDeficient { order: 0, rank, required: free.len() });
    }
    let sol = svd
        .solve(&adjusted, tol)
        .map_err(|e| Error::Parse(format!("fit solve failed: {e}")))?;
    let mut theta = DVector::zeros(8);
    for (k, pin) in pinned.iter().enumerate() {
        if let Some(val) = pin {
            theta[k] = *val;
        }
    }
    for (slot, &k) in free.iter().enumerate() {
        theta[k] = sol[slot];
    }
    Ok(theta)
}

fn psd_over(c: &PolyCoefficients, vbars: &[f64]) -> bool {
    vbars.iter().all(|&vb| {
        let cvv = c.p(3, 0) * vb + c.p(2, 0);
        let caa = c.p(1, 2) * vb + c.p(0, 2);
        let cva = c.p(2, 1) * vb;
        let s = cvv.abs() + caa.abs() + 1.0;
        cvv >= -1e-9 * s && caa >= -1e-9 * s && 4.0 * cvv * caa - cva * cva >= -1e-9 * s * s
    })
}

/// Evaluate the polynomial surrogate P_tot = Σ p_ij·v^i·a^j (W).
#[must_use]
pub fn poly_power(v: f64, a: f64, c: &PolyCoefficients) -> f64 {
    let mut total = 0.0;
    for i in 0..4 {
        for j in 0..3 {
            let p = c.p[i][j];
            if p != 0.0 {
                total += p * v.powi(i as i32) * a.powi(j as i32);
            }
        }
    }
    total
}

/// Quadratic power estimate at mean speed v̄ (Hessian PSD checked here).
pub fn convex_power_form(v_bar: f64, c: &PolyCoefficients) -> Result<ConvexPowerForm> {
    if !v_bar.is_finite() || v_bar < 0.0 {
        return Err(Error::NonFinite { context: "convex_power_form v_bar" });
    }
    let form = ConvexPowerForm {
        v_bar,
        c_vv: c.p(3, 0) * v_bar + c.p(2, 0),
        c_aa: c.p(1, 2) * v_bar + c.p(0, 2),
        c_va: c.p(2, 1) * v_bar,
        c_v: c.p(1, 0),
        c_a: c.p(0, 1),
        c_0: c.p(0, 0),
    };
    // Tolerance scaled to the coefficient magnitude: exact-zero forms pass.
    let scale = form.c_vv.abs().max(form.c_aa.abs()).max(1.0);
    if form.hessian_min_eig() < -1e-9 * scale {
        return Err(Error::NonConvexPowerForm { v_bar });
    }
    Ok(form)
}

/// Speed grid spanning the operating range (0–25 m/s, 0.5 m/s pitch).
#[must_use]
pub fn reference_speed_grid() -> Vec<f64> {
    (0..=50).map(|k| k as f64 * 0.5).collect()
}

/// Acceleration grid spanning the actuator range (−5–4 m/s², 0.25 pitch).
#[must_use]
pub fn reference_accel_grid() -> Vec<f64> {
    (0..=36).map(|k| -5.0 + k as f64 * 0.25).collect()
}

/// The surrogate fit at default physical parameters over the reference
/// grids, computed once per process.
pub fn reference_fit() -> &'static PolyFit {
    static FIT: std::sync::OnceLock<PolyFit> = std::sync::OnceLock::new();
    FIT.get_or_init(|| {
        fit_poly_coeffs(
            &PhysicalEnergyParams::default(),
            &reference_speed_grid(),
            &reference_accel_grid(),
        )
        .expect("reference surrogate fit must succeed")
    })
}

/// Coefficients of [`reference_fit`].
#[must_use]
pub fn reference_coefficients() -> PolyCoefficients {
    reference_fit().coeffs
}

/// Per-vehicle trip energy (kJ): Σ poly_power(v_k, a_k)·dt over the applied
/// steps of the log (the final record starts no step and contributes none).
pub fn trip_energy(log: &TrajectoryLog, c: &PolyCoefficients) -> Result<Vec<f64>> {
    let velocity = log.velocity_series();
    let accel = log.accel_series();
    if velocity.is_empty() || velocity[0].len() < 2 {
        return Err(Error::InvalidConfig("trip_energy: empty trajectory log".into()));
    }
    let steps = velocity[0].len() - 1;
    let mut out = Vec::with_capacity(velocity.len());
    for (vs, accels) in velocity.iter().zip(&accel) {
        let mut joules = 0.0;
        for k in 0..steps {
            joules += poly_power(vs[k], accels[k], c) * log.dt;
        }
        out.push(joules / 1000.0);
    }
    Ok(out)
}
