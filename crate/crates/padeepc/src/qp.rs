//! Dense convex quadratic programming by operator splitting (ADMM).
//!
//! Problem form:
//!   minimize    ½·zᵀHz + fᵀz
//!   subject to  A_eq·z = b_eq
//!               lb_in ≤ A_in·z ≤ ub_in
//!               lb ≤ z ≤ ub
//!
//! The solver stacks all constraints into one row set l ≤ Āz ≤ u and runs
//! the OSQP splitting: Ruiz equilibration, over-relaxed ADMM iterations on
//! the KKT-regularized normal matrix H + σI + ρ·ĀᵀĀ, adaptive step size,
//! divergence-based primal/dual infeasibility certificates, and a final
//! active-set polish solve for machine-accuracy solutions. Everything is
//! deterministic given the inputs and options.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Equality rows get a stiffer step size than inequality rows.
const RHO_EQ_SCALE: f64 = 1e3;
/// Regularization added to the splitting normal matrix.
const INFEAS_TOL: f64 = 1e-6;

/// Outcome of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// KKT residuals met the requested tolerances.
    Optimal,
    /// Iteration budget exhausted; the returned point is the best iterate.
    MaxIter,
    /// A primal infeasibility certificate was detected.
    PrimalInfeasible,
    /// A dual infeasibility (unboundedness) certificate was detected.
    DualInfeasible,
}

/// Dense convex QP.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb_in: DVector<f64>,
    pub ub_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    #[must_use]
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        assert_eq!(h.nrows(), n, "Hessian must be n x n");
        assert_eq!(h.ncols(), n, "Hessian must be n x n");
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb_in: DVector::zeros(0),
            ub_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    #[must_use]
    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.ncols(), self.n(), "equality columns");
        assert_eq!(a.nrows(), b.len(), "equality rows");
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    #[must_use]
    pub fn with_ineq(mut self, a: DMatrix<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        assert_eq!(a.ncols(), self.n(), "inequality columns");
        assert_eq!(a.nrows(), lb.len(), "inequality rows");
        assert_eq!(lb.len(), ub.len(), "inequality bounds");
        self.a_in = a;
        self.lb_in = lb;
        self.ub_in = ub;
        self
    }

    #[must_use]
    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        assert_eq!(lb.len(), self.n(), "bound length");
        assert_eq!(ub.len(), self.n(), "bound length");
        self.lb = lb;
        self.ub = ub;
        self
    }

    /// Number of decision variables.
    #[must_use]
    pub fn n(&self) -> usize {
        self.f.len()
    }

    /// Objective ½zᵀHz + fᵀz at a point.
    #[must_use]
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[(0, 0)] + self.f.dot(z)
    }
}

/// Dual variables in the problem's constraint blocks. `bounds` has one
/// entry per variable (zero for inactive/free coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDuals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub bounds: DVector<f64>,
}

/// ∞-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
}

/// Solver result.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    pub duals: QpDuals,
}

/// Solver settings. Defaults: tolerances 1e−6, 4000 iterations, adaptive
/// step size, polish on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Initial ADMM step size ρ̄ (per-row scaling applied internally).
    pub rho: f64,
    /// Splitting regularization σ.
    pub sigma: f64,
    /// Over-relaxation α ∈ (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Residual/certificate check cadence (iterations).
    pub check_every: usize,
    /// Attempt an active-set polish solve once residuals are small.
    pub polish: bool,
    /// Ruiz equilibration sweeps (0 disables scaling).
    pub scaling_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            check_every: 25,
            polish: true,
            scaling_iters: 10,
        }
    }
}

/// Warm-start point (typically the previous receding-horizon solution).
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub duals: QpDuals,
}

/// Reusable work for repeated solves that share the constraint matrices
/// (receding-horizon loops). The caller owns cache invalidation through
/// `structure_token`; a token change rebuilds everything.
#[derive(Debug, Default)]
pub struct QpCache {
    token: u64,
    n: usize,
    m: usize,
    /// Āᵀ·diag(type multipliers)·Ā for the stacked scaled constraint rows.
    ata: Option<DMatrix<f64>>,
    /// Carried-over adapted step size.
    rho_bar: Option<f64>,
    /// Carried-over scaling (D, E, c) — only valid per token.
    scaling: Option<(DVector<f64>, DVector<f64>, f64)>,
}

impl QpCache {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }
}

/// Solve a dense convex QP. Non-PSD Hessians are a hard error; primal/dual
/// infeasibility are reported through `status`.
pub fn solve_qp(p: &QpProblem, opts: &SolveOptions) -> Result<QpSolution> {
    let mut cache = QpCache::new();
    solve_qp_full(p, opts, None, &mut cache, 0)
}

/// [`solve_qp`] with warm starting and a caller-managed structure cache.
/// `token` identifies the constraint structure; reuse of a cache across
/// problems with different H/f/rhs but identical A-matrices is what it is
/// for. Changing constraint matrices without changing the token is a logic
/// error the solver cannot detect.
pub fn solve_qp_warm(
    p: &QpProblem,
    opts: &SolveOptions,
    warm: Option<&WarmStart>,
    cache: &mut QpCache,
    token: u64,
) -> Result<QpSolution> {
    solve_qp_full(p, opts, warm, cache, token)
}

/// ∞-norm KKT residuals at (z, duals): primal = worst constraint violation,
/// dual = ‖Hz + f + A_eqᵀν + A_inᵀμ + μ_bounds‖∞.
#[must_use]
pub fn kkt_residuals(p: &QpProblem, z: &DVector<f64>, duals: &QpDuals) -> Residuals {
    assert_eq!(z.len(), p.n(), "kkt_residuals: z dimension");
    assert_eq!(duals.eq.len(), p.b_eq.len(), "kkt_residuals: eq duals");
    assert_eq!(duals.ineq.len(), p.lb_in.len(), "kkt_residuals: ineq duals");
    assert_eq!(duals.bounds.len(), p.n(), "kkt_residuals: bound duals");

    let mut primal: f64 = 0.0;
    if p.b_eq.len() > 0 {
        primal = primal.max((&p.a_eq * z - &p.b_eq).amax());
    }
    if p.lb_in.len() > 0 {
        let az = &p.a_in * z;
        for i in 0..az.len() {
            primal = primal.max(p.lb_in[i] - az[i]).max(az[i] - p.ub_in[i]);
        }
    }
    for i in 0..p.n() {
        primal = primal.max(p.lb[i] - z[i]).max(z[i] - p.ub[i]);
    }
    primal = primal.max(0.0);

    let mut grad = &p.h * z + &p.f;
    if p.b_eq.len() > 0 {
        grad += p.a_eq.transpose() * &duals.eq;
    }
    if p.lb_in.len() > 0 {
        grad += p.a_in.transpose() * &duals.ineq;
    }
    grad += &duals.bounds;
    Residuals { primal, dual: grad.amax() }
}

// ---------------------------------------------------------------------------
// Internal machinery
// ---------------------------------------------------------------------------

struct Stacked {
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    m_eq: usize,
    m_in: usize,
    /// Variable index behind each bound row.
    bound_vars: Vec<usize>,
}

fn stack_constraints(p: &QpProblem) -> Stacked {
    let n = p.n();
    let m_eq = p.b_eq.len();
    let m_in = p.lb_in.len();
    let bound_vars: Vec<usize> = (0..n)
        .filter(|&i| p.lb[i].is_finite() || p.ub[i].is_finite())
        .collect();
    let m = m_eq + m_in + bound_vars.len();
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    a.rows_mut(0, m_eq).copy_from(&p.a_eq);
    l.rows_mut(0, m_eq).copy_from(&p.b_eq);
    u.rows_mut(0, m_eq).copy_from(&p.b_eq);
    a.rows_mut(m_eq, m_in).copy_from(&p.a_in);
    l.rows_mut(m_eq, m_in).copy_from(&p.lb_in);
    u.rows_mut(m_eq, m_in).copy_from(&p.ub_in);
    for (k, &i) in bound_vars.iter().enumerate() {
        a[(m_eq + m_in + k, i)] = 1.0;
        l[m_eq + m_in + k] = p.lb[i];
        u[m_eq + m_in + k] = p.ub[i];
    }
    Stacked { a, l, u, m_eq, m_in, bound_vars }
}

/// Modified Ruiz equilibration of the (P, A, f) data. Returns (D, E, c).
fn ruiz_scaling(
    h: &mut DMatrix<f64>,
    a: &mut DMatrix<f64>,
    f: &mut DVector<f64>,
    iters: usize,
) -> (DVector<f64>, DVector<f64>, f64) {
    let n = h.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..iters {
        // Column norms of the stacked [[P],[A]] for variables, row norms of
        // A for constraints.
        let mut delta_d = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 1e-12 {
                delta_d[j] = 1.0 / norm.sqrt();
            }
        }
        let mut delta_e = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 1e-12 {
                delta_e[i] = 1.0 / norm.sqrt();
            }
        }
        // Apply.
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= delta_d[i] * delta_d[j];
            }
        }
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] *= delta_e[i] * delta_d[j];
            }
        }
        for j in 0..n {
            f[j] *= delta_d[j];
            d[j] *= delta_d[j];
        }
        for i in 0..m {
            e[i] *= delta_e[i];
        }
        // Cost normalization.
        let mut col_mean = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            col_mean += norm;
        }
        col_mean /= n.max(1) as f64;
        let gamma = 1.0 / col_mean.max(f.amax()).max(1e-12);
        if (gamma - 1.0).abs() > 1e-12 {
            *h *= gamma;
            *f *= gamma;
            c *= gamma;
        }
    }
    (d, e, c)
}

fn solve_qp_full(
    p: &QpProblem,
    opts: &SolveOptions,
    warm: Option<&WarmStart>,
    cache: &mut QpCache,
    token: u64,
) -> Result<QpSolution> {
    let n = p.n();
    if p.h.nrows() != n || p.h.ncols() != n {
        return Err(Error::Dimension { context: "QP Hessian", expected: n, got: p.h.nrows() });
    }

    // Symmetrize and check PSD on ingest (Cholesky with tiny shift).
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = 0.5 * (p.h[(i, j)] + p.h[(j, i)]);
        }
    }
    let scale = h.amax().max(1.0);
    let mut shifted = h.clone();
    for i in 0..n {
        shifted[(i, i)] += 1e-8 * scale;
    }
    if Cholesky::new(shifted).is_none() {
        let min_eig = h
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        return Err(Error::NonPsdHessian { min_eig });
    }

    let stacked = stack_constraints(p);
    let m = stacked.a.nrows();

    // Trivially contradictory ranges are an infeasibility report, not an error.
    for i in 0..m {
        if stacked.l[i] > stacked.u[i] {
            return Ok(infeasible_solution(n, &stacked, SolveStatus::PrimalInfeasible));
        }
    }

    // --- Scaling (recomputed per token; the constraint structure and the
    // magnitude profile of H are stable within one) -------------------------
    let reuse = cache.token == token && cache.n == n && cache.m == m && cache.scaling.is_some();
    let (d, e, c_scale, h_s, a_s, mut f_s) = if reuse {
        let (d, e, c) = cache.scaling.clone().unwrap();
        // Rescale H and f with the cached diagonals.
        let mut h_s = h.clone();
        for i in 0..n {
            for j in 0..n {
                h_s[(i, j)] *= c * d[i] * d[j];
            }
        }
        let mut a_s = stacked.a.clone();
        for i in 0..m {
            for j in 0..n {
                a_s[(i, j)] *= e[i] * d[j];
            }
        }
        let mut f_s = p.f.clone();
        for j in 0..n {
            f_s[j] *= c * d[j];
        }
        (d, e, c, h_s, a_s, f_s)
    } else {
        let mut h_s = h.clone();
        let mut a_s = stacked.a.clone();
        let mut f_s = p.f.clone();
        let (d, e, c) = ruiz_scaling(&mut h_s, &mut a_s, &mut f_s, opts.scaling_iters);
        cache.token = token;
        cache.n = n;
        cache.m = m;
        cache.scaling = Some((d.clone(), e.clone(), c));
        cache.ata = None;
        cache.rho_bar = None;
        (d, e, c, h_s, a_s, f_s)
    };
    let _ = &mut f_s;

    let mut l_s = stacked.l.clone();
    let mut u_s = stacked.u.clone();
    for i in 0..m {
        if l_s[i].is_finite() {
            l_s[i] *= e[i];
        }
        if u_s[i].is_finite() {
            u_s[i] *= e[i];
        }
    }

    // Per-row step-size multipliers: equalities are stiffer.
    let mut rho_mult = DVector::from_element(m, 1.0);
    for i in 0..m {
        if stacked.l[i] == stacked.u[i] {
            rho_mult[i] = RHO_EQ_SCALE;
        }
    }

    // Āᵀ·diag(mult)·Ā is ρ̄-independent; cache it per token.
    if cache.ata.is_none() {
        let mut weighted = a_s.clone();
        for i in 0..m {
            for j in 0..n {
                weighted[(i, j)] *= rho_mult[i];
            }
        }
        cache.ata = Some(a_s.transpose() * weighted);
    }
    let ata = cache.ata.as_ref().unwrap();

    let mut rho_bar = cache.rho_bar.unwrap_or(opts.rho);

    // The proximal weight may need to grow with ρ̄·‖ĀᵀĀ‖: when the G
    // matrix spans many orders of magnitude, a σ near machine-epsilon of
    // its largest entry drowns in rounding and the factorization fails
    // even though G is PD in exact arithmetic. Escalating σ keeps the
    // splitting valid (any σ > 0 does) at a mild convergence cost.
    let factorize = |rho_bar: f64, sigma0: f64| -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
        let mut base = h_s.clone();
        for i in 0..n {
            for j in 0..n {
                base[(i, j)] += rho_bar * ata[(i, j)];
            }
        }
        let gmax = base.amax().max(1.0);
        let mut sigma = sigma0;
        loop {
            let mut g = base.clone();
            for i in 0..n {
                g[(i, i)] += sigma;
            }
            if let Some(chol) = Cholesky::new(g) {
                return Ok((chol, sigma));
            }
            if sigma > 1e-2 * gmax {
                return Err(Error::NonPsdHessian { min_eig: f64::NAN });
            }
            sigma *= 1e3;
        }
    };
    let (mut chol, mut sigma) = factorize(rho_bar, opts.sigma)?;

    // Iterates in scaled space.
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    let mut z = DVector::zeros(m);
    if let Some(w) = warm {
        if w.z.len() == n {
            for j in 0..n {
                x[j] = w.z[j] / d[j];
            }
            let mut stacked_y = DVector::zeros(m);
            if w.duals.eq.len() == stacked.m_eq && w.duals.ineq.len() == stacked.m_in {
                stacked_y.rows_mut(0, stacked.m_eq).copy_from(&w.duals.eq);
                stacked_y
                    .rows_mut(stacked.m_eq, stacked.m_in)
                    .copy_from(&w.duals.ineq);
                for (k, &var) in stacked.bound_vars.iter().enumerate() {
                    stacked_y[stacked.m_eq + stacked.m_in + k] = w.duals.bounds[var];
                }
                for i in 0..m {
                    y[i] = stacked_y[i] * c_scale / e[i];
                }
            }
            z = &a_s * &x;
            for i in 0..m {
                z[i] = z[i].clamp(l_s[i], u_s[i]);
            }
        }
    }

    let mut iterations = 0;
    let mut status = SolveStatus::MaxIter;
    let mut best = Residuals { primal: f64::INFINITY, dual: f64::INFINITY };
    let mut polish_attempts = 0usize;
    let mut early: Option<(DVector<f64>, DVector<f64>, Residuals)> = None;

    let unscale_x = |x: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |j, _| x[j] * d[j])
    };
    let unscale_y = |y: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(m, |i, _| y[i] * e[i] / c_scale)
    };

    let mut x_prev = x.clone();
    let mut y_prev = y.clone();

    while iterations < opts.max_iter {
        x_prev.copy_from(&x);
        y_prev.copy_from(&y);

        // x-update.
        let mut rhs = DVector::zeros(n);
        for j in 0..n {
            rhs[j] = sigma * x[j] - f_s[j];
        }
        let mut tmp = DVector::zeros(m);
        for i in 0..m {
            tmp[i] = rho_bar * rho_mult[i] * z[i] - y[i];
        }
        rhs += a_s.transpose() * &tmp;
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &a_s * &x_tilde;

        // Over-relaxed z/y updates.
        for j in 0..n {
            x[j] = opts.alpha * x_tilde[j] + (1.0 - opts.alpha) * x[j];
        }
        for i in 0..m {
            let rho_i = rho_bar * rho_mult[i];
            let z_relaxed = opts.alpha * z_tilde[i] + (1.0 - opts.alpha) * z[i];
            let z_new = (z_relaxed + y[i] / rho_i).clamp(l_s[i], u_s[i]);
            y[i] += rho_i * (z_relaxed - z_new);
            z[i] = z_new;
        }
        iterations += 1;

        if iterations % opts.check_every != 0 && iterations != opts.max_iter {
            continue;
        }

        // True-space residuals, converged when below tolerances scaled by
        // the magnitudes they are measured against (with an absolute floor
        // of the bare tolerance for small-scale problems).
        let xu = unscale_x(&x);
        let yu = unscale_y(&y);
        let ax = &stacked.a * &xu;
        let mut r_prim: f64 = 0.0;
        for i in 0..m {
            r_prim = r_prim.max(stacked.l[i] - ax[i]).max(ax[i] - stacked.u[i]);
        }
        r_prim = r_prim.max(0.0);
        let hx = &h * &xu;
        let aty = stacked.a.transpose() * &yu;
        let grad = &hx + &p.f + &aty;
        let r_dual = grad.amax();
        best = Residuals { primal: r_prim, dual: r_dual };

        let prim_scale = 1.0 + ax.amax();
        let dual_scale = 1.0 + hx.amax().max(p.f.amax()).max(aty.amax());
        if r_prim <= opts.tol_primal * prim_scale && r_dual <= opts.tol_dual * dual_scale {
            status = SolveStatus::Optimal;
            break;
        }

        // Early polish: once the iterate is within two orders of the
        // tolerance, the dual-sign active-set estimate is usually final,
        // and a successful equality solve on it ends the run early.
        if opts.polish
            && m > 0
            && polish_attempts < 4
            && r_prim <= 100.0 * opts.tol_primal * prim_scale
            && r_dual <= 100.0 * opts.tol_dual * dual_scale
        {
            polish_attempts += 1;
            if let Some((x_pol, y_pol)) = polish(&h, &p.f, &stacked, &yu) {
                let r_new = true_residuals(&h, &p.f, &stacked, &x_pol, &y_pol);
                if r_new.primal <= opts.tol_primal * prim_scale
                    && r_new.dual <= opts.tol_dual * dual_scale
                {
                    early = Some((x_pol, y_pol, r_new));
                    status = SolveStatus::Optimal;
                    break;
                }
            }
        }

        // Infeasibility certificates from one-iteration deltas.
        let dx = unscale_x(&(&x - &x_prev));
        let dy = unscale_y(&(&y - &y_prev));
        let dy_norm = dy.amax();
        if dy_norm > 1e-12 {
            let at_dy = stacked.a.transpose() * &dy;
            if at_dy.amax() <= INFEAS_TOL * dy_norm {
                let mut support = 0.0;
                let mut bounded = true;
                for i in 0..m {
                    let pos = dy[i].max(0.0);
                    let neg = dy[i].min(0.0);
                    if pos > INFEAS_TOL * dy_norm && !stacked.u[i].is_finite() {
                        bounded = false;
                        break;
                    }
                    if neg < -INFEAS_TOL * dy_norm && !stacked.l[i].is_finite() {
                        bounded = false;
                        break;
                    }
                    if stacked.u[i].is_finite() {
                        support += stacked.u[i] * pos;
                    }
                    if stacked.l[i].is_finite() {
                        support += stacked.l[i] * neg;
                    }
                }
                if bounded && support <= -INFEAS_TOL * dy_norm {
                    status = SolveStatus::PrimalInfeasible;
                    break;
                }
            }
        }
        let dx_norm = dx.amax();
        if dx_norm > 1e-12 {
            let h_dx = &h * &dx;
            let a_dx = &stacked.a * &dx;
            let mut cone_ok = h_dx.amax() <= INFEAS_TOL * dx_norm
                && p.f.dot(&dx) <= -INFEAS_TOL * dx_norm;
            if cone_ok {
                for i in 0..m {
                    let lo_fin = stacked.l[i].is_finite();
                    let hi_fin = stacked.u[i].is_finite();
                    let v = a_dx[i];
                    let ok = match (lo_fin, hi_fin) {
                        (true, true) => v.abs() <= INFEAS_TOL * dx_norm,
                        (true, false) => v >= -INFEAS_TOL * dx_norm,
                        (false, true) => v <= INFEAS_TOL * dx_norm,
                        (false, false) => true,
                    };
                    if !ok {
                        cone_ok = false;
                        break;
                    }
                }
            }
            if cone_ok {
                status = SolveStatus::DualInfeasible;
                break;
            }
        }

        // Step-size adaptation.
        if opts.adaptive_rho && iterations < opts.max_iter {
            let ax_norm = ax.amax().max(1e-10);
            let denom = (dual_scale - 1.0).max(1e-10);
            let ratio = ((r_prim / ax_norm) / (r_dual / denom).max(1e-16)).sqrt();
            if ratio > 5.0 || ratio < 0.2 {
                rho_bar = (rho_bar * ratio).clamp(1e-6, 1e6);
                let (c, s) = factorize(rho_bar, opts.sigma)?;
                chol = c;
                sigma = s;
            }
        }
    }
    cache.rho_bar = Some(rho_bar);

    let early_polished = early.is_some();
    let (mut xu, mut yu) = match early {
        Some((x_pol, y_pol, r_new)) => {
            best = r_new;
            (x_pol, y_pol)
        }
        None => (unscale_x(&x), unscale_y(&y)),
    };

    // Polish: equality solve on the detected active set, kept only when it
    // improves the residuals.
    if opts.polish
        && !early_polished
        && matches!(status, SolveStatus::Optimal | SolveStatus::MaxIter)
        && m > 0
    {
        if let Some((x_pol, y_pol)) = polish(&h, &p.f, &stacked, &yu) {
            let r_old = true_residuals(&h, &p.f, &stacked, &xu, &yu);
            let r_new = true_residuals(&h, &p.f, &stacked, &x_pol, &y_pol);
            if r_new.primal.max(r_new.dual) < r_old.primal.max(r_old.dual) {
                xu = x_pol;
                yu = y_pol;
                best = r_new;
                if best.primal <= opts.tol_primal && best.dual <= opts.tol_dual {
                    status = SolveStatus::Optimal;
                }
            }
        }
    }

    if matches!(status, SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible) {
        return Ok(infeasible_solution(n, &stacked, status));
    }

    let duals = split_duals(&stacked, &yu, n);
    Ok(QpSolution {
        objective: p.objective(&xu),
        residuals: best,
        status,
        iterations,
        duals,
        z_star: xu,
    })
}

fn true_residuals(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    stacked: &Stacked,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Residuals {
    let ax = &stacked.a * x;
    let mut primal: f64 = 0.0;
    for i in 0..stacked.a.nrows() {
        primal = primal.max(stacked.l[i] - ax[i]).max(ax[i] - stacked.u[i]);
    }
    let grad = h * x + f + stacked.a.transpose() * y;
    Residuals { primal: primal.max(0.0), dual: grad.amax() }
}

fn split_duals(stacked: &Stacked, y: &DVector<f64>, n: usize) -> QpDuals {
    let mut bounds = DVector::zeros(n);
    for (k, &var) in stacked.bound_vars.iter().enumerate() {
        bounds[var] = y[stacked.m_eq + stacked.m_in + k];
    }
    QpDuals {
        eq: y.rows(0, stacked.m_eq).into_owned(),
        ineq: y.rows(stacked.m_eq, stacked.m_in).into_owned(),
        bounds,
    }
}

fn infeasible_solution(n: usize, stacked: &Stacked, status: SolveStatus) -> QpSolution {
    QpSolution {
        z_star: DVector::zeros(n),
        objective: f64::NAN,
        status,
        residuals: Residuals { primal: f64::INFINITY, dual: f64::INFINITY },
        iterations: 0,
        duals: split_duals(stacked, &DVector::zeros(stacked.a.nrows()), n),
    }
}

/// Active-set polish: equality-solve on rows detected active by dual sign,
/// with light regularization and one refinement round.
fn polish(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    stacked: &Stacked,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = stacked.a.nrows();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if stacked.l[i] == stacked.u[i] {
            active.push((i, stacked.l[i]));
        } else if y[i] < -1e-10 && stacked.l[i].is_finite() {
            active.push((i, stacked.l[i]));
        } else if y[i] > 1e-10 && stacked.u[i].is_finite() {
            active.push((i, stacked.u[i]));
        }
    }
    let k = active.len();
    let dim = n + k;
    let reg = 1e-9 * h.amax().max(1.0);
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for j in 0..n {
        kkt[(j, j)] += reg;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -f[j];
    }
    for (slot, &(row, val)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + slot, j)] = stacked.a[(row, j)];
            kkt[(j, n + slot)] = stacked.a[(row, j)];
        }
        kkt[(n + slot, n + slot)] = -reg;
        rhs[n + slot] = val;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // One round of iterative refinement against the unregularized system.
    let mut kkt0 = kkt.clone();
    for j in 0..n {
        kkt0[(j, j)] -= reg;
    }
    for slot in 0..k {
        kkt0[(n + slot, n + slot)] += reg;
    }
    for _ in 0..2 {
        let resid = &rhs - &kkt0 * &sol;
        if let Some(corr) = lu.solve(&resid) {
            sol += corr;
        } else {
            break;
        }
    }
    let x_pol = sol.rows(0, n).into_owned();
    let mut y_pol = DVector::zeros(m);
    for (slot, &(row, _)) in active.iter().enumerate() {
        y_pol[row] = sol[n + slot];
    }
    if x_pol.iter().any(|v| !v.is_finite()) || y_pol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((x_pol, y_pol))
}
