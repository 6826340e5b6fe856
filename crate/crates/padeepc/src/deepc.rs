//! Non-parametric (data-driven) predictive control core.
//!
//! Raw input/output trajectories are organized into block-Hankel matrices
//! whose columns are overlapping signal windows. Split into past/future
//! blocks (`U_p`, `U_f`, `Y_p`, `Y_f`), they replace a parametric plant
//! model: any behavior the data spans can be written as a linear
//! combination `g` of columns. This module builds the matrices, verifies
//! persistency of excitation, generates excitation inputs, and assembles
//! the regularized tracking program solved by [`crate::qp`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::qp::QpProblem;
use crate::{Error, Result};

/// Safety factor on the SVD tolerance used for numerical rank decisions.
const RANK_TOL_SAFETY: f64 = 100.0;
/// Attempt budget for excitation regeneration when a draw fails the
/// persistency check.
const EXCITATION_RETRIES: usize = 20;

/// Block-Hankel matrix of depth `l`: column `j` stacks `seq[j..j+l]`.
///
/// `seq` holds `T` samples of an `m`-dimensional signal; the result is
/// `(m·l) × (T − l + 1)`.
pub fn build_hankel(seq: &[DVector<f64>], l: usize) -> Result<DMatrix<f64>> {
    let t = seq.len();
    if l == 0 {
        return Err(Error::InvalidConfig("Hankel depth must be at least 1".into()));
    }
    if t < l {
        return Err(Error::Dimension { context: "Hankel sequence length", expected: l, got: t });
    }
    let m = seq[0].len();
    if seq.iter().any(|s| s.len() != m) {
        return Err(Error::InvalidConfig("ragged signal dimensions in Hankel input".into()));
    }
    let cols = t - l + 1;
    let mut h = DMatrix::zeros(m * l, cols);
    for j in 0..cols {
        for row_blk in 0..l {
            for ch in 0..m {
                h[(row_blk * m + ch, j)] = seq[j + row_blk][ch];
            }
        }
    }
    Ok(h)
}

/// Numerical rank from singular values with the standard tolerance
/// σ_max · max(rows, cols) · ε, widened by a safety factor.
#[must_use]
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * RANK_TOL_SAFETY;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Persistency of excitation of order `l`: the depth-`l` Hankel matrix of
/// the input sequence has full row rank.
pub fn check_pe(u_seq: &[DVector<f64>], l: usize) -> Result<bool> {
    let h = build_hankel(u_seq, l)?;
    Ok(numerical_rank(&h) == h.nrows())
}

/// Minimum data length for excitation of order `l` with `m` inputs and
/// state-dimension upper bound `n`: (m+1)·l + n − 1.
#[must_use]
pub fn min_data_length(m: usize, l: usize, n: usize) -> usize {
    (m + 1) * l + n - 1
}

/// Multilevel pseudo-random excitation: `m` channels over `t` steps, each
/// channel stepping through `levels` evenly spaced values in [−amp, amp],
/// held for `hold` steps. The draw is regenerated (bounded retries) until
/// it passes the persistency check at order `pe_order`.
pub fn gen_excitation(
    m: usize,
    t: usize,
    levels: usize,
    hold: usize,
    amp: f64,
    pe_order: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    use rand::Rng;
    use rand::SeedableRng;
    if levels < 2 {
        return Err(Error::InvalidConfig("excitation needs at least 2 levels".into()));
    }
    if hold == 0 {
        return Err(Error::InvalidConfig("excitation hold must be at least 1 step".into()));
    }
    let level_set: Vec<f64> = (0..levels)
        .map(|i| -amp + 2.0 * amp * i as f64 / (levels - 1) as f64)
        .collect();
    for attempt in 0..EXCITATION_RETRIES {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let mut seq = Vec::with_capacity(t);
        let mut current = DVector::zeros(m);
        for k in 0..t {
            if k % hold == 0 {
                for ch in 0..m {
                    current[ch] = level_set[rng.gen_range(0..levels)];
                }
            }
            seq.push(current.clone());
        }
        if check_pe(&seq, pe_order)? {
            return Ok(seq);
        }
    }
    Err(Error::ExcitationRetries { attempts: EXCITATION_RETRIES })
}

/// Library dimensions: `m` inputs, `p` outputs, `t` data length, past
/// window `t_ini`, horizon `n_pred`, and column count `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryDims {
    pub m: usize,
    pub p: usize,
    pub t: usize,
    pub t_ini: usize,
    pub n_pred: usize,
    pub k: usize,
}

impl LibraryDims {
    /// Total window depth T_ini + N.
    #[must_use]
    pub fn depth(&self) -> usize {
        self.t_ini + self.n_pred
    }
}

/// Past/future-partitioned data matrices. Immutable after construction;
/// the input blocks are guaranteed persistently exciting.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelLibrary {
    pub u_p: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub dims: LibraryDims,
}

impl HankelLibrary {
    /// Build the four blocks from one consecutive trajectory and verify
    /// the input-Hankel rank at order T_ini + N.
    pub fn from_trajectory(
        u_seq: &[DVector<f64>],
        y_seq: &[DVector<f64>],
        t_ini: usize,
        n_pred: usize,
    ) -> Result<Self> {
        if u_seq.len() != y_seq.len() {
            return Err(Error::Dimension {
                context: "library input/output length",
                expected: u_seq.len(),
                got: y_seq.len(),
            });
        }
        let depth = t_ini + n_pred;
        let t = u_seq.len();
        if t < depth + 1 {
            return Err(Error::Dimension { context: "library data length", expected: depth + 1, got: t });
        }
        let m = u_seq[0].len();
        let p = y_seq[0].len();
        let hu = build_hankel(u_seq, depth)?;
        let hy = build_hankel(y_seq, depth)?;
        let k = hu.ncols();
        let lib = Self {
            u_p: hu.rows(0, m * t_ini).into_owned(),
            u_f: hu.rows(m * t_ini, m * n_pred).into_owned(),
            y_p: hy.rows(0, p * t_ini).into_owned(),
            y_f: hy.rows(p * t_ini, p * n_pred).into_owned(),
            dims: LibraryDims { m, p, t, t_ini, n_pred, k },
        };
        let rank = numerical_rank(&hu);
        if rank < hu.nrows() {
            return Err(Error::RankDeficient { order: depth, rank, required: hu.nrows() });
        }
        Ok(lib)
    }

    /// Assemble blocks directly (column-updated libraries). The caller
    /// asserts the persistency invariant; `input_rank` re-derives it.
    pub(crate) fn from_blocks(
        u_p: DMatrix<f64>,
        u_f: DMatrix<f64>,
        y_p: DMatrix<f64>,
        y_f: DMatrix<f64>,
        dims: LibraryDims,
    ) -> Result<Self> {
        let k = dims.k;
        for (name, mat, rows) in [
            ("U_p", &u_p, dims.m * dims.t_ini),
            ("U_f", &u_f, dims.m * dims.n_pred),
            ("Y_p", &y_p, dims.p * dims.t_ini),
            ("Y_f", &y_f, dims.p * dims.n_pred),
        ] {
            if mat.nrows() != rows || mat.ncols() != k {
                let _ = name;
                return Err(Error::Dimension { context: "library block shape", expected: rows, got: mat.nrows() });
            }
        }
        Ok(Self { u_p, u_f, y_p, y_f, dims })
    }

    /// Stacked input block [U_p; U_f] (the persistency-relevant rows).
    #[must_use]
    pub fn input_block(&self) -> DMatrix<f64> {
        let rows = self.u_p.nrows() + self.u_f.nrows();
        let mut out = DMatrix::zeros(rows, self.dims.k);
        out.rows_mut(0, self.u_p.nrows()).copy_from(&self.u_p);
        out.rows_mut(self.u_p.nrows(), self.u_f.nrows()).copy_from(&self.u_f);
        out
    }

    /// Numerical rank of the input block.
    #[must_use]
    pub fn input_rank(&self) -> usize {
        numerical_rank(&self.input_block())
    }

    /// Stacked data matrix [U_p; Y_p; U_f; Y_f] in the row order used by
    /// the program assembly.
    #[must_use]
    pub fn stacked(&self) -> DMatrix<f64> {
        let rows = self.u_p.nrows() + self.y_p.nrows() + self.u_f.nrows() + self.y_f.nrows();
        let mut out = DMatrix::zeros(rows, self.dims.k);
        let mut at = 0;
        for blk in [&self.u_p, &self.y_p, &self.u_f, &self.y_f] {
            out.rows_mut(at, blk.nrows()).copy_from(blk);
            at += blk.nrows();
        }
        out
    }
}

/// Sliding window of the most recent T_ini input/output samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RecentWindow {
    t_ini: usize,
    m: usize,
    p: usize,
    u: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
}

impl RecentWindow {
    #[must_use]
    pub fn new(t_ini: usize, m: usize, p: usize) -> Self {
        Self { t_ini, m, p, u: VecDeque::new(), y: VecDeque::new() }
    }

    /// Record one step; the window keeps only the latest T_ini samples.
    pub fn push(&mut self, u: DVector<f64>, y: DVector<f64>) {
        assert_eq!(u.len(), self.m, "window input dimension");
        assert_eq!(y.len(), self.p, "window output dimension");
        self.u.push_back(u);
        self.y.push_back(y);
        while self.u.len() > self.t_ini {
            self.u.pop_front();
            self.y.pop_front();
        }
    }

    #[must_use]
    pub fn filled(&self) -> bool {
        self.u.len() == self.t_ini
    }

    /// Stacked u_ini (length m·T_ini, oldest first).
    #[must_use]
    pub fn u_ini(&self) -> DVector<f64> {
        stack_window(&self.u, self.m, self.t_ini)
    }

    /// Stacked y_ini (length p·T_ini, oldest first).
    #[must_use]
    pub fn y_ini(&self) -> DVector<f64> {
        stack_window(&self.y, self.p, self.t_ini)
    }
}

fn stack_window(q: &VecDeque<DVector<f64>>, dim: usize, t_ini: usize) -> DVector<f64> {
    let mut out = DVector::zeros(dim * t_ini);
    for (k, v) in q.iter().enumerate() {
        out.rows_mut(k * dim, dim).copy_from(v);
    }
    out
}

/// Cost weights of the regularized program: per-step output weight `q`
/// (PSD diagonal), per-step input weight `r` (PD diagonal), and the
/// regularizers on the combination vector and the past-output slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepcWeights {
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub lambda_g: f64,
    pub lambda_y: f64,
}

impl DeepcWeights {
    /// Uniform diagonal weights.
    #[must_use]
    pub fn uniform(q: f64, r: f64, p: usize, m: usize, lambda_g: f64, lambda_y: f64) -> Self {
        Self {
            q: DVector::from_element(p, q),
            r: DVector::from_element(m, r),
            lambda_g,
            lambda_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("output weight must be nonnegative".into()));
        }
        if self.r.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("input weight must be positive".into()));
        }
        if self.lambda_g < 0.0 || self.lambda_y < 0.0 {
            return Err(Error::InvalidConfig("regularizers must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Index layout of the stacked decision vector z = (g, u, y, σ_y).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZLayout {
    pub k: usize,
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub n_pred: usize,
}

impl ZLayout {
    #[must_use]
    pub fn for_library(dims: &LibraryDims) -> Self {
        Self { k: dims.k, m: dims.m, p: dims.p, t_ini: dims.t_ini, n_pred: dims.n_pred }
    }

    #[must_use]
    pub fn total(&self) -> usize {
        self.k + self.m * self.n_pred + self.p * self.n_pred + self.p * self.t_ini
    }

    #[must_use]
    pub fn g_start(&self) -> usize {
        0
    }

    /// Index of input channel `ch` at horizon step `k`.
    #[must_use]
    pub fn u_idx(&self, k: usize, ch: usize) -> usize {
        debug_assert!(k < self.n_pred && ch < self.m);
        self.k + k * self.m + ch
    }

    /// Index of output channel `ch` at horizon step `k`.
    #[must_use]
    pub fn y_idx(&self, k: usize, ch: usize) -> usize {
        debug_assert!(k < self.n_pred && ch < self.p);
        self.k + self.m * self.n_pred + k * self.p + ch
    }

    #[must_use]
    pub fn sigma_start(&self) -> usize {
        self.k + (self.m + self.p) * self.n_pred
    }
}

/// Per-channel box bounds applied at every horizon step (`None` leaves a
/// signal unconstrained).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalBounds {
    pub input: Option<(f64, f64)>,
    pub output: Option<Vec<(f64, f64)>>,
}

/// Assemble the regularized tracking program over z = (g, u, y, σ_y):
/// minimize Σ_k ‖y_k‖²_Q + ‖u_k‖²_R + λ_g‖g‖² + λ_y‖σ_y‖² subject to the
/// data equations U_p·g = u_ini, Y_p·g = y_ini + σ_y, U_f·g = u,
/// Y_f·g = y, and per-step signal boxes.
pub fn assemble_tracking_qp(
    lib: &HankelLibrary,
    win: &RecentWindow,
    w: &DeepcWeights,
    boxes: &SignalBounds,
) -> Result<QpProblem> {
    w.validate()?;
    let d = &lib.dims;
    if !win.filled() {
        return Err(Error::InvalidConfig("recent window not yet filled".into()));
    }
    if win.u_ini().len() != d.m * d.t_ini || win.y_ini().len() != d.p * d.t_ini {
        return Err(Error::Dimension {
            context: "window/library dims",
            expected: d.m * d.t_ini,
            got: win.u_ini().len(),
        });
    }
    if w.q.len() != d.p || w.r.len() != d.m {
        return Err(Error::Dimension { context: "weight dims", expected: d.p, got: w.q.len() });
    }
    let z = ZLayout::for_library(d);
    let nz = z.total();

    // Quadratic cost (½zᵀHz convention ⇒ factor 2 on every squared term).
    let mut h = DMatrix::zeros(nz, nz);
    for j in 0..d.k {
        h[(j, j)] = 2.0 * w.lambda_g;
    }
    for k in 0..d.n_pred {
        for ch in 0..d.m {
            let i = z.u_idx(k, ch);
            h[(i, i)] = 2.0 * w.r[ch];
        }
        for ch in 0..d.p {
            let i = z.y_idx(k, ch);
            h[(i, i)] = 2.0 * w.q[ch];
        }
    }
    for j in 0..d.p * d.t_ini {
        let i = z.sigma_start() + j;
        h[(i, i)] = 2.0 * w.lambda_y;
    }
    let f = DVector::zeros(nz);

    let (a_eq, b_eq) = data_equations(lib, &win.u_ini(), &win.y_ini(), &z);

    let mut p = QpProblem::new(h, f).with_eq(a_eq, b_eq);

    let mut lb = DVector::from_element(nz, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nz, f64::INFINITY);
    if let Some((lo, hi)) = boxes.input {
        for k in 0..d.n_pred {
            for ch in 0..d.m {
                lb[z.u_idx(k, ch)] = lo;
                ub[z.u_idx(k, ch)] = hi;
            }
        }
    }
    if let Some(out) = &boxes.output {
        if out.len() != d.p {
            return Err(Error::Dimension { context: "output bounds", expected: d.p, got: out.len() });
        }
        for k in 0..d.n_pred {
            for (ch, &(lo, hi)) in out.iter().enumerate() {
                lb[z.y_idx(k, ch)] = lo;
                ub[z.y_idx(k, ch)] = hi;
            }
        }
    }
    p = p.with_bounds(lb, ub);
    Ok(p)
}

/// Equality rows shared by the tracking and eco programs:
/// U_p·g = u_ini; Y_p·g − σ = y_ini; U_f·g − u = 0; Y_f·g − y = 0.
pub(crate) fn data_equations(
    lib: &HankelLibrary,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    z: &ZLayout,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = &lib.dims;
    let rows = (d.m + d.p) * (d.t_ini + d.n_pred);
    let nz = z.total();
    let mut a = DMatrix::zeros(rows, nz);
    let mut b = DVector::zeros(rows);
    let mut at = 0;

    a.view_mut((at, 0), (d.m * d.t_ini, d.k)).copy_from(&lib.u_p);
    b.rows_mut(at, d.m * d.t_ini).copy_from(u_ini);
    at += d.m * d.t_ini;

    a.view_mut((at, 0), (d.p * d.t_ini, d.k)).copy_from(&lib.y_p);
    for j in 0..d.p * d.t_ini {
        a[(at + j, z.sigma_start() + j)] = -1.0;
    }
    b.rows_mut(at, d.p * d.t_ini).copy_from(y_ini);
    at += d.p * d.t_ini;

    a.view_mut((at, 0), (d.m * d.n_pred, d.k)).copy_from(&lib.u_f);
    for k in 0..d.n_pred {
        for ch in 0..d.m {
            a[(at + k * d.m + ch, z.u_idx(k, ch))] = -1.0;
        }
    }
    at += d.m * d.n_pred;

    a.view_mut((at, 0), (d.p * d.n_pred, d.k)).copy_from(&lib.y_f);
    for k in 0..d.n_pred {
        for ch in 0..d.p {
            a[(at + k * d.p + ch, z.y_idx(k, ch))] = -1.0;
        }
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Library sidecar metadata written next to a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub dims: LibraryDims,
    pub pe_ok: bool,
    pub dt: f64,
}

/// Write a dataset CSV with columns `t, u_1..u_m, y_1..y_p`.
pub fn write_dataset(
    path: &Path,
    dt: f64,
    u_seq: &[DVector<f64>],
    y_seq: &[DVector<f64>],
) -> Result<()> {
    if u_seq.len() != y_seq.len() || u_seq.is_empty() {
        return Err(Error::Dimension {
            context: "dataset length",
            expected: u_seq.len(),
            got: y_seq.len(),
        });
    }
    let m = u_seq[0].len();
    let p = y_seq[0].len();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("t");
    for ch in 1..=m {
        header.push_str(&format!(",u_{ch}"));
    }
    for ch in 1..=p {
        header.push_str(&format!(",y_{ch}"));
    }
    writeln!(file, "{header}")?;
    for (k, (u, y)) in u_seq.iter().zip(y_seq).enumerate() {
        let mut row = format!("{:.6}", k as f64 * dt);
        for v in u.iter() {
            row.push_str(&format!(",{v:.9}"));
        }
        for v in y.iter() {
            row.push_str(&format!(",{v:.9}"));
        }
        writeln!(file, "{row}")?;
    }
    Ok(())
}

/// Read a dataset CSV written by [`write_dataset`]; `m` and `p` recover
/// the channel split.
pub fn read_dataset(path: &Path, m: usize, p: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut u_seq = Vec::new();
    let mut y_seq = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("dataset row {idx}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 1 + m + p {
            return Err(Error::Dimension { context: "dataset columns", expected: 1 + m + p, got: vals.len() });
        }
        u_seq.push(DVector::from_column_slice(&vals[1..1 + m]));
        y_seq.push(DVector::from_column_slice(&vals[1 + m..]));
    }
    Ok((u_seq, y_seq))
}
