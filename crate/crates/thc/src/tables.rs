//! Offline construction of optimal non-uniform lookup tables.
//!
//! A lookup table `T` maps the `2^b` transmitted indices to integer values in
//! `[0, g]` (`g` is the granularity). Decoding maps value `v` to the
//! quantization value `m + v*(M-m)/g`, so choosing `T` chooses which `2^b` of
//! the `g+1` uniformly spaced quantization values the workers may emit. The
//! optimal table minimizes the stochastic-quantization variance of a standard
//! normal source truncated to `[-t_p, t_p]`:
//!
//! ```text
//! V(T) = sum over consecutive value pairs (c0, c1) of
//!        integral_{c0}^{c1} (a - c0)(c1 - a) phi(a) da
//! ```
//!
//! (the integrand is the exact per-point variance of unbiased two-point
//! rounding). The search space is every strictly increasing table with fixed
//! endpoints `T[0] = 0`, `T[2^b-1] = g` - a stars-and-bars family over the
//! `2^b - 1` positive value differences - enumerated exhaustively by bin
//! rotation. For odd `g` (and `b >= 2`) the normal distribution's symmetry
//! restricts the search to tables with `T[z + 2^{b-1}] - T[z] = (g+1)/2`.
//!
//! Tables are solved once offline and cached in a line-oriented text format,
//! keyed by `(b, g, p)` with `p` stored as an exact rational.

use crate::hadamard::{compute_tp, normal_pdf, HadamardError};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("infeasible key: granularity {granularity} < 2^{bits} - 1")]
    Infeasible { bits: u8, granularity: u32 },
    #[error("invalid table key: {0}")]
    InvalidKey(String),
    #[error("invalid lookup table: {0}")]
    InvalidTable(String),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("no cached table for {key}")]
    NotFound { key: TableKey },
    #[error("table cache format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Hadamard(#[from] HadamardError),
}

/// Identity of a lookup table: bit budget, granularity, and support fraction.
///
/// `p` is kept as an exact (reduced) rational so cache keys compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TableKey {
    pub bits: u8,
    pub granularity: u32,
    pub p_num: u64,
    pub p_den: u64,
}

impl TableKey {
    pub fn new(bits: u8, granularity: u32, p_num: u64, p_den: u64) -> Result<Self, TableError> {
        if bits == 0 || bits > 16 {
            return Err(TableError::InvalidKey(format!(
                "bit budget {bits} outside 1..=16"
            )));
        }
        if p_num == 0 || p_num >= p_den {
            return Err(TableError::InvalidKey(format!(
                "support fraction {p_num}/{p_den} outside (0, 1)"
            )));
        }
        let d = gcd(p_num, p_den);
        let key = Self {
            bits,
            granularity,
            p_num: p_num / d,
            p_den: p_den / d,
        };
        if granularity < key.min_granularity() {
            return Err(TableError::Infeasible { bits, granularity });
        }
        Ok(key)
    }

    /// Smallest feasible granularity, `2^b - 1`.
    pub fn min_granularity(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Number of table entries, `2^b`.
    pub fn entries(&self) -> usize {
        1usize << self.bits
    }

    /// The support fraction as a float.
    pub fn p(&self) -> f64 {
        self.p_num as f64 / self.p_den as f64
    }
}

impl fmt::Display for TableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(b={}, g={}, p={}/{})",
            self.bits, self.granularity, self.p_num, self.p_den
        )
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A solved lookup table with its clamp threshold and achieved variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub key: TableKey,
    pub t_p: f64,
    /// `2^b` strictly increasing integers, `values[0] = 0`, last `= g`.
    pub values: Vec<u32>,
    /// Quantization variance of the truncated-normal source under this table.
    pub variance: f64,
}

impl LookupTable {
    /// Structural invariants: endpoints, strict monotonicity, and for odd `g`
    /// with `b >= 2` the half-shift symmetry `T[z + 2^{b-1}] - T[z] = (g+1)/2`.
    pub fn validate(&self) -> Result<(), TableError> {
        let g = self.key.granularity;
        validate_values(&self.values, self.key.bits, g, true)?;
        if self.variance < 0.0 || !self.variance.is_finite() {
            return Err(TableError::InvalidTable(format!(
                "variance {} not a finite non-negative number",
                self.variance
            )));
        }
        if !self.t_p.is_finite() || self.t_p <= 0.0 {
            return Err(TableError::InvalidTable(format!("bad t_p {}", self.t_p)));
        }
        Ok(())
    }

    /// Inverse map value -> index; `None` for values outside `Im(T)`.
    pub fn inverse(&self) -> Vec<Option<u16>> {
        let g = self.key.granularity as usize;
        let mut inv = vec![None; g + 1];
        for (z, &v) in self.values.iter().enumerate() {
            inv[v as usize] = Some(z as u16);
        }
        inv
    }

    /// Whether this is the identity table (`g = 2^b - 1`, `T[j] = j`).
    pub fn is_identity(&self) -> bool {
        self.key.granularity == self.key.min_granularity()
            && self.values.iter().enumerate().all(|(j, &v)| v == j as u32)
    }

    /// The identity table reproducing uniform stochastic quantization.
    pub fn identity(bits: u8, p_num: u64, p_den: u64) -> Result<Self, TableError> {
        let key = TableKey::new(bits, (1u32 << bits) - 1, p_num, p_den)?;
        let t_p = compute_tp(key.p())?;
        let values: Vec<u32> = (0..key.entries() as u32).collect();
        let variance = quantization_variance(&values, t_p, 1e-12)?;
        Ok(Self {
            key,
            t_p,
            values,
            variance,
        })
    }
}

fn validate_values(
    values: &[u32],
    bits: u8,
    g: u32,
    require_symmetry: bool,
) -> Result<(), TableError> {
    if values.len() != 1usize << bits {
        return Err(TableError::InvalidTable(format!(
            "expected {} entries, got {}",
            1usize << bits,
            values.len()
        )));
    }
    if values[0] != 0 || *values.last().unwrap() != g {
        return Err(TableError::InvalidTable(format!(
            "endpoints must be 0 and {g}, got {} and {}",
            values[0],
            values.last().unwrap()
        )));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TableError::InvalidTable(
            "values not strictly increasing".into(),
        ));
    }
    // Odd-granularity symmetry. For b = 1 the only feasible table {0, g}
    // cannot satisfy it unless g = 1, so the constraint is scoped to b >= 2.
    // Only solved tables carry it; arbitrary search candidates need not.
    if require_symmetry && g % 2 == 1 && bits >= 2 {
        let half = values.len() / 2;
        let shift = (g + 1) / 2;
        for z in 0..half {
            if values[z + half] - values[z] != shift {
                return Err(TableError::InvalidTable(format!(
                    "odd-g symmetry violated at index {z}"
                )));
            }
        }
    }
    Ok(())
}

/// The set of real quantization values a table induces on `[m, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationValues {
    /// `values[j] = m + T[j] * (M - m) / g`, strictly increasing.
    pub values: Vec<f64>,
    pub m: f64,
    pub max: f64,
}

/// Map table entries onto the concrete range: `q[j] = m + T[j]*(M-m)/g`.
pub fn calc_quantization_values(
    m: f64,
    max: f64,
    table: &LookupTable,
) -> Result<QuantizationValues, TableError> {
    if !(m < max) {
        return Err(TableError::InvalidKey(format!(
            "need m < M, got m={m}, M={max}"
        )));
    }
    let g = table.key.granularity as f64;
    let values = table
        .values
        .iter()
        .map(|&v| m + v as f64 * (max - m) / g)
        .collect();
    Ok(QuantizationValues { values, m, max })
}

// ---------------------------------------------------------------------------
// Stars-and-bars enumeration
// ---------------------------------------------------------------------------

/// Enumerates every way of throwing `n` identical balls into `k` bins, in
/// bin-rotation order: start from `[n, 0, .., 0]`; each step finds the first
/// non-empty bin `a`, moves one ball to bin `a+1`, and returns the remaining
/// `B[a] - 1` balls to bin 0.
pub struct StarsAndBars {
    bins: Vec<u64>,
    balls: u64,
    state: SabState,
}

enum SabState {
    Fresh,
    Running,
    Done,
}

impl StarsAndBars {
    pub fn new(balls: u64, k: usize) -> Self {
        assert!(k >= 1, "need at least one bin");
        let mut bins = vec![0u64; k];
        bins[0] = balls;
        Self {
            bins,
            balls,
            state: SabState::Fresh,
        }
    }

    fn at_last(&self) -> bool {
        self.bins.len() == 1 || self.bins[self.bins.len() - 1] == self.balls
    }

    fn advance(&mut self) {
        let a = self.bins.iter().position(|&b| b > 0).expect("not at last");
        let moved = self.bins[a] - 1;
        self.bins[a + 1] += 1;
        self.bins[a] = 0;
        self.bins[0] = moved;
    }
}

impl Iterator for StarsAndBars {
    type Item = Vec<u64>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.state {
            SabState::Fresh => {
                self.state = if self.at_last() {
                    SabState::Done
                } else {
                    SabState::Running
                };
                Some(self.bins.clone())
            }
            SabState::Running => {
                self.advance();
                if self.at_last() {
                    self.state = SabState::Done;
                }
                Some(self.bins.clone())
            }
            SabState::Done => None,
        }
    }
}

/// Number of strictly increasing tables with fixed endpoints: `C(g-1, 2^b-2)`.
pub fn candidate_count(bits: u8, granularity: u32) -> u128 {
    binomial((granularity - 1) as u128, (1u128 << bits) - 2)
}

/// Number of odd-`g` symmetric candidates for `b >= 2`:
/// `C((g-1)/2 - 1, 2^{b-1} - 2)`.
pub fn symmetric_candidate_count(bits: u8, granularity: u32) -> u128 {
    assert!(bits >= 2 && granularity % 2 == 1);
    binomial(
        ((granularity - 1) / 2 - 1) as u128,
        (1u128 << (bits - 1)) - 2,
    )
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 1..=k {
        result = result * (n - k + i) / i;
    }
    result
}

enum EnumMode {
    /// All strictly increasing tables: bins are the `2^b - 1` differences - 1.
    Full,
    /// Odd-g symmetric tables: bins enumerate the first half, mirrored up.
    Symmetric { half: usize, shift: u32 },
    /// b = 1 with odd g > 1: the symmetric family is empty.
    Empty,
}

/// Stream of candidate tables for `(b, g)`, in stars-and-bars order.
///
/// With `symmetric_only` (odd `g` required) only tables satisfying the
/// half-shift symmetry are produced.
pub struct TableEnumerator {
    sab: StarsAndBars,
    mode: EnumMode,
    granularity: u32,
    exhausted: bool,
}

pub fn enumerate_tables(
    bits: u8,
    granularity: u32,
    symmetric_only: bool,
) -> Result<TableEnumerator, TableError> {
    if bits == 0 || bits > 16 {
        return Err(TableError::InvalidKey(format!(
            "bit budget {bits} outside 1..=16"
        )));
    }
    let k = (1u32 << bits) - 1;
    if granularity < k {
        return Err(TableError::Infeasible { bits, granularity });
    }
    if symmetric_only {
        if granularity % 2 == 0 {
            return Err(TableError::InvalidKey(
                "symmetric enumeration requires odd granularity".into(),
            ));
        }
        if bits == 1 {
            // Only {0, 1} is symmetric; for larger odd g the family is empty.
            return Ok(TableEnumerator {
                sab: StarsAndBars::new(0, 1),
                mode: if granularity == 1 {
                    EnumMode::Full
                } else {
                    EnumMode::Empty
                },
                granularity,
                exhausted: false,
            });
        }
        let half = 1usize << (bits - 1);
        let top = (granularity - 1) / 2; // fixed last value of the first half
        let bins = half - 1;
        let balls = (top as u64) - (bins as u64);
        return Ok(TableEnumerator {
            sab: StarsAndBars::new(balls, bins),
            mode: EnumMode::Symmetric {
                half,
                shift: (granularity + 1) / 2,
            },
            granularity,
            exhausted: false,
        });
    }
    Ok(TableEnumerator {
        sab: StarsAndBars::new((granularity - k) as u64, k as usize),
        mode: EnumMode::Full,
        granularity,
        exhausted: false,
    })
}

impl Iterator for TableEnumerator {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.exhausted {
            return None;
        }
        match &self.mode {
            EnumMode::Empty => None,
            EnumMode::Full => {
                let bins = self.sab.next()?;
                let mut table = Vec::with_capacity(bins.len() + 1);
                let mut v = 0u32;
                table.push(0);
                for &b in &bins {
                    v += 1 + b as u32;
                    table.push(v);
                }
                debug_assert_eq!(v, self.granularity);
                Some(table)
            }
            EnumMode::Symmetric { half, shift } => {
                let (half, shift) = (*half, *shift);
                let bins = self.sab.next()?;
                let mut table = Vec::with_capacity(2 * half);
                let mut v = 0u32;
                table.push(0);
                for &b in &bins {
                    v += 1 + b as u32;
                    table.push(v);
                }
                for z in 0..half {
                    table.push(table[z] + shift);
                }
                Some(table)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Quantization variance (per-interval Gauss-Legendre quadrature)
// ---------------------------------------------------------------------------

const GL_NODES: usize = 32;

fn gauss_legendre() -> &'static [(f64, f64); GL_NODES] {
    static TABLE: OnceLock<[(f64, f64); GL_NODES]> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Newton iteration on Legendre P_n; nodes/weights on [-1, 1].
        let n = GL_NODES;
        let mut out = [(0.0f64, 0.0f64); GL_NODES];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0f64, x);
                for j in 2..=n {
                    let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            out[i] = (x, 2.0 / ((1.0 - x * x) * dp * dp));
        }
        out
    })
}

/// 32-node quadrature of `(a - c0)(c1 - a) phi(a)` over the panel `[lo, hi]`.
fn gl_panel(lo: f64, hi: f64, c0: f64, c1: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut acc = 0.0;
    for &(x, w) in gauss_legendre() {
        let a = mid + half * x;
        acc += w * (a - c0) * (c1 - a) * normal_pdf(a);
    }
    acc * half
}

/// `integral_{c0}^{c1} (a - c0)(c1 - a) phi(a) da` - the exact variance
/// contribution of stochastic rounding between values `c0 < c1`, integrated by
/// composite 32-node Gauss-Legendre with panel doubling until `tol` is met.
pub fn interval_cost(c0: f64, c1: f64, tol: f64) -> f64 {
    debug_assert!(c1 >= c0);
    if c1 <= c0 {
        return 0.0;
    }
    let composite = |panels: usize| -> f64 {
        let step = (c1 - c0) / panels as f64;
        (0..panels)
            .map(|i| gl_panel(c0 + i as f64 * step, c0 + (i + 1) as f64 * step, c0, c1))
            .sum()
    };
    let mut panels = ((c1 - c0).ceil() as usize).max(1);
    let mut coarse = composite(panels);
    loop {
        let fine = composite(panels * 2);
        if (fine - coarse).abs() <= tol * 0.5 || panels >= 64 {
            return fine;
        }
        panels *= 2;
        coarse = fine;
    }
}

/// Quantization variance of the standard normal truncated to `[-t_p, t_p]`
/// under table `values` (scaled as `q_j = 2 t_p T[j]/g - t_p`).
///
/// For `a` between bracketing quantization values `c0 <= a <= c1`, unbiased
/// stochastic rounding contributes `(a - c0)(c1 - a)`; at a quantization value
/// the integrand vanishes.
pub fn quantization_variance(values: &[u32], t_p: f64, tol: f64) -> Result<f64, TableError> {
    if !(tol > 0.0) {
        return Err(TableError::BadTolerance(tol));
    }
    if values.len() < 2 || !values.len().is_power_of_two() {
        return Err(TableError::InvalidTable(format!(
            "table length {} is not a power of two >= 2",
            values.len()
        )));
    }
    let g = *values.last().unwrap();
    let bits = values.len().trailing_zeros() as u8;
    validate_values(values, bits, g, false)?;
    let scale = |v: u32| 2.0 * t_p * v as f64 / g as f64 - t_p;
    let per_interval_tol = tol / (values.len() - 1) as f64;
    Ok(values
        .windows(2)
        .map(|w| interval_cost(scale(w[0]), scale(w[1]), per_interval_tol))
        .sum())
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

/// Exhaustively minimize the quantization variance over the candidate family.
///
/// Evaluates every table from [`enumerate_tables`] (the odd-g symmetric
/// subfamily when applicable), summing precomputed per-interval costs with
/// early abort against the best-so-far. Ties are broken toward the
/// lexicographically smallest table, independent of enumeration order.
pub fn solve_optimal_table(key: &TableKey, tol: f64) -> Result<LookupTable, TableError> {
    if !(tol > 0.0) {
        return Err(TableError::BadTolerance(tol));
    }
    let t_p = compute_tp(key.p())?;
    let g = key.granularity;
    let entries = key.entries();
    let intervals = entries - 1;

    // Pair costs between all grid points, computed once by quadrature.
    let scale = |v: u32| 2.0 * t_p * v as f64 / g as f64 - t_p;
    let per_interval_tol = tol / intervals as f64;
    let n_grid = (g + 1) as usize;
    let mut costs = vec![0.0f64; n_grid * n_grid];
    for i in 0..n_grid {
        for j in (i + 1)..n_grid {
            costs[i * n_grid + j] =
                interval_cost(scale(i as u32), scale(j as u32), per_interval_tol);
        }
    }
    let cost = |lo: u32, hi: u32| costs[lo as usize * n_grid + hi as usize];
    let eval = |table: &[u32], bound: f64| -> Option<f64> {
        let mut acc = 0.0;
        for w in table.windows(2) {
            acc += cost(w[0], w[1]);
            if acc > bound {
                return None;
            }
        }
        Some(acc)
    };

    // Seed the pruning bound with the most uniform member of the family
    // being enumerated (it is revisited by the stream, so ties still race).
    let symmetric = g % 2 == 1 && (key.bits >= 2 || g == 1);
    let seed_candidate: Vec<u32> = if symmetric && key.bits >= 2 {
        let half = entries / 2;
        let top = ((g - 1) / 2) as u64;
        let mut first: Vec<u32> = (0..half)
            .map(|j| ((j as u64 * top) / (half as u64 - 1)) as u32)
            .collect();
        let shift = (g + 1) / 2;
        for z in 0..half {
            let v = first[z] + shift;
            first.push(v);
        }
        first
    } else {
        (0..entries)
            .map(|j| ((j as u64 * g as u64) / intervals as u64) as u32)
            .collect()
    };
    let mut best_var = eval(&seed_candidate, f64::INFINITY).unwrap();
    let mut best: Option<Vec<u32>> = None;
    if symmetric || key.bits == 1 || candidate_count(key.bits, g) <= 1 << 22 {
        for table in enumerate_tables(key.bits, g, symmetric)? {
            if let Some(var) = eval(&table, best_var) {
                if var < best_var || (var == best_var && best.as_ref().is_none_or(|b| table < *b)) {
                    best_var = var;
                    best = Some(table);
                }
            }
        }
    } else {
        // Large even-g searches: same candidate stream, but the table is
        // maintained incrementally instead of re-materialized per step.
        let k = intervals;
        let balls = (g - k as u32) as u64;
        let mut bins = vec![0u64; k];
        bins[0] = balls;
        let mut table: Vec<u32> = Vec::with_capacity(entries);
        table.push(0);
        let mut v = 0u32;
        for &b in &bins {
            v += 1 + b as u32;
            table.push(v);
        }
        loop {
            if let Some(var) = eval(&table, best_var) {
                if var < best_var || (var == best_var && best.as_ref().is_none_or(|b| table < *b)) {
                    best_var = var;
                    best = Some(table.clone());
                }
            }
            if k == 1 || bins[k - 1] == balls {
                break;
            }
            // Alg-4 rotation, mirrored onto the prefix sums.
            let a = bins.iter().position(|&b| b > 0).unwrap();
            let moved = bins[a] - 1;
            bins[a + 1] += 1;
            bins[a] = 0;
            bins[0] = moved;
            for slot in table.iter_mut().take(a + 1).skip(1) {
                *slot += moved as u32;
            }
            table[a + 1] -= 1;
        }
    }

    let values = match best {
        Some(v) => v,
        // Every candidate tied with the uniform seed's bound and lost the
        // lexicographic race to nothing: the seed itself was optimal but the
        // stream still re-finds it (equal variance, table <= itself), so this
        // only happens when enumeration produced no candidates at all.
        None => {
            return Err(TableError::Infeasible {
                bits: key.bits,
                granularity: g,
            })
        }
    };
    let variance = quantization_variance(&values, t_p, tol)?;
    let table = LookupTable {
        key: *key,
        t_p,
        values,
        variance,
    };
    table.validate()?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// One record per table:
///
/// ```text
/// b g p_num p_den t_p variance
/// v0 v1 ... v_{2^b - 1}
/// ```
///
/// Integers are exact; reals use 17 significant digits (lossless for f64).
fn format_record(table: &LookupTable) -> String {
    let k = &table.key;
    let values: Vec<String> = table.values.iter().map(|v| v.to_string()).collect();
    format!(
        "{} {} {} {} {:.16e} {:.16e}\n{}\n",
        k.bits,
        k.granularity,
        k.p_num,
        k.p_den,
        table.t_p,
        table.variance,
        values.join(" ")
    )
}

struct RecordParser<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> RecordParser<'a> {
    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T, TableError> {
        Err(TableError::Format {
            offset,
            reason: reason.into(),
        })
    }

    /// Next non-empty line with the byte offset of its first character.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        while self.offset < self.text.len() {
            let rest = &self.text[self.offset..];
            let (line, consumed) = match rest.find('\n') {
                Some(i) => (&rest[..i], i + 1),
                None => (rest, rest.len()),
            };
            let start = self.offset;
            self.offset += consumed;
            if !line.trim().is_empty() {
                return Some((start, line));
            }
        }
        None
    }

    fn next_record(&mut self) -> Result<Option<LookupTable>, TableError> {
        let Some((hdr_off, header)) = self.next_line() else {
            return Ok(None);
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 {
            return self.fail(
                hdr_off,
                format!(
                    "header needs 6 fields (b g p_num p_den t_p variance), got {}",
                    fields.len()
                ),
            );
        }
        let bits: u8 = fields[0].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad bit budget: {e}"),
        })?;
        let granularity: u32 = fields[1].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad granularity: {e}"),
        })?;
        let p_num: u64 = fields[2].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad p numerator: {e}"),
        })?;
        let p_den: u64 = fields[3].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad p denominator: {e}"),
        })?;
        let t_p: f64 = fields[4].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad t_p: {e}"),
        })?;
        let variance: f64 = fields[5].parse().map_err(|e| TableError::Format {
            offset: hdr_off,
            reason: format!("bad variance: {e}"),
        })?;
        let key =
            TableKey::new(bits, granularity, p_num, p_den).map_err(|e| TableError::Format {
                offset: hdr_off,
                reason: e.to_string(),
            })?;

        let Some((val_off, line)) = self.next_line() else {
            return self.fail(self.text.len(), "record truncated: missing values line");
        };
        let mut values = Vec::with_capacity(key.entries());
        for tok in line.split_whitespace() {
            values.push(tok.parse::<u32>().map_err(|e| TableError::Format {
                offset: val_off,
                reason: format!("bad table value {tok:?}: {e}"),
            })?);
        }
        if values.len() != key.entries() {
            return self.fail(
                val_off,
                format!("expected {} values, got {}", key.entries(), values.len()),
            );
        }
        let table = LookupTable {
            key,
            t_p,
            values,
            variance,
        };
        table.validate().map_err(|e| TableError::Format {
            offset: val_off,
            reason: e.to_string(),
        })?;
        Ok(Some(table))
    }
}

fn parse_cache(text: &str) -> Result<Vec<LookupTable>, TableError> {
    let mut parser = RecordParser { text, offset: 0 };
    let mut out = Vec::new();
    while let Some(rec) = parser.next_record()? {
        out.push(rec);
    }
    Ok(out)
}

fn read_cache(path: &Path) -> Result<Vec<LookupTable>, TableError> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| TableError::Format {
        offset: e.valid_up_to(),
        reason: "cache is not valid UTF-8".into(),
    })?;
    parse_cache(text)
}

/// Insert or replace `table`'s record in the cache file at `path`.
pub fn save_table(path: impl AsRef<Path>, table: &LookupTable) -> Result<(), TableError> {
    table.validate()?;
    let path = path.as_ref();
    let mut records = if path.exists() {
        read_cache(path)?
    } else {
        Vec::new()
    };
    records.retain(|r| r.key != table.key);
    records.push(table.clone());
    let mut text = String::new();
    for r in &records {
        text.push_str(&format_record(r));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load the record keyed `(b, g, p)`; `NotFound` if absent, `Format` on a
/// corrupt file (no partial table is ever returned).
pub fn load_table(path: impl AsRef<Path>, key: &TableKey) -> Result<LookupTable, TableError> {
    let records = read_cache(path.as_ref())?;
    records
        .into_iter()
        .find(|r| r.key == *key)
        .ok_or(TableError::NotFound { key: *key })
}

/// All records in a cache file.
pub fn list_tables(path: impl AsRef<Path>) -> Result<Vec<LookupTable>, TableError> {
    read_cache(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hadamard::normal_cdf;
    use rand::Rng;

    #[test]
    fn stars_and_bars_matches_hand_trace() {
        let opts: Vec<Vec<u64>> = StarsAndBars::new(2, 2).collect();
        assert_eq!(opts, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn stars_and_bars_counts() {
        for (n, k) in [(0u64, 1usize), (3, 1), (2, 3), (5, 4), (7, 3)] {
            let got = StarsAndBars::new(n, k).count() as u128;
            assert_eq!(got, binomial((n + k as u64 - 1) as u128, (k - 1) as u128));
        }
    }

    #[test]
    fn enumeration_forced_cases() {
        let one: Vec<_> = enumerate_tables(1, 1, false).unwrap().collect();
        assert_eq!(one, vec![vec![0, 1]]);
        let forced: Vec<_> = enumerate_tables(2, 3, false).unwrap().collect();
        assert_eq!(forced, vec![vec![0, 1, 2, 3]]);
        assert!(matches!(
            enumerate_tables(3, 5, false),
            Err(TableError::Infeasible { .. })
        ));
    }

    #[test]
    fn enumeration_count_matches_binomial() {
        for (b, g) in [(2u8, 4u32), (2, 9), (3, 9), (3, 12), (2, 36)] {
            let got = enumerate_tables(b, g, false).unwrap().count() as u128;
            assert_eq!(got, candidate_count(b, g), "b={b} g={g}");
        }
        assert_eq!(candidate_count(4, 51), 937_845_656_300);
        assert_eq!(candidate_count(4, 38), 6_107_086_800);
        assert_eq!(symmetric_candidate_count(4, 51), 134_596);
    }

    #[test]
    fn symmetric_enumeration_yields_symmetric_tables() {
        let all: Vec<_> = enumerate_tables(3, 11, true).unwrap().collect();
        assert_eq!(all.len() as u128, symmetric_candidate_count(3, 11));
        for t in &all {
            for z in 0..4 {
                assert_eq!(t[z + 4] - t[z], 6);
            }
            assert_eq!(t[0], 0);
            assert_eq!(t[7], 11);
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn variance_of_two_point_table() {
        // b=1, g=1: V = integral (a+t)(t-a) phi(a) da over [-t, t].
        // Frozen from the closed-form moments; re-derived by Monte Carlo below.
        let t_p = compute_tp(1.0 / 32.0).unwrap();
        let v = quantization_variance(&[0, 1], t_p, 1e-12).unwrap();
        assert!((v - 3.694_408_939_214_772_8).abs() < 1e-9, "v={v}");

        let (mc, sigma) = mc_variance(&[0, 1], 1, t_p, 1_000_000, 99);
        assert!((v - mc).abs() < 3.0 * sigma, "v={v} mc={mc} sigma={sigma}");
    }

    /// Monte Carlo oracle: draw standard normals, stochastically quantize the
    /// in-range ones against the scaled table, average the squared error.
    fn mc_variance(values: &[u32], g: u32, t_p: f64, samples: usize, seed: u64) -> (f64, f64) {
        let q: Vec<f64> = values
            .iter()
            .map(|&v| 2.0 * t_p * v as f64 / g as f64 - t_p)
            .collect();
        let mut rng = crate::seed::stream(seed);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let a = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let err = if a.abs() > t_p {
                0.0
            } else {
                let hi = q.partition_point(|&v| v <= a).min(q.len() - 1);
                let lo = hi - 1;
                let frac = (a - q[lo]) / (q[hi] - q[lo]);
                let picked = if rng.random::<f64>() < frac {
                    q[hi]
                } else {
                    q[lo]
                };
                (picked - a) * (picked - a)
            };
            sum += err;
            sum_sq += err * err;
        }
        let mean = sum / samples as f64;
        let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
        (mean, (var / samples as f64).sqrt())
    }

    #[test]
    fn variance_matches_worked_three_integral_example() {
        // T = {0,1,3,4}, g = 4: the objective written out interval by
        // interval with explicit probabilities, integrated independently.
        let t = compute_tp(1.0 / 32.0).unwrap();
        let spelled = |c0: f64, c1: f64| {
            // integral of [ (a-c0)/(c1-c0) (a-c1)^2 + (c1-a)/(c1-c0) (a-c0)^2 ] phi
            let n = 20_000;
            let h = (c1 - c0) / n as f64;
            let f = |a: f64| {
                ((a - c0) / (c1 - c0) * (a - c1) * (a - c1)
                    + (c1 - a) / (c1 - c0) * (a - c0) * (a - c0))
                    * normal_pdf(a)
            };
            // Simpson
            let mut acc = f(c0) + f(c1);
            for i in 1..n {
                let x = c0 + i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            acc * h / 3.0
        };
        let direct = spelled(-t, -t / 2.0) + spelled(-t / 2.0, t / 2.0) + spelled(t / 2.0, t);
        let quad = quantization_variance(&[0, 1, 3, 4], t, 1e-12).unwrap();
        assert!((quad - direct).abs() < 1e-9, "quad={quad} direct={direct}");
        assert!((quad - 0.643_040_942_351_456).abs() < 1e-10);

        let (mc, sigma) = mc_variance(&[0, 1, 3, 4], 4, t, 10_000_000, 7);
        assert!((quad - mc).abs() < 3.0 * sigma, "quad={quad} mc={mc}");
    }

    #[test]
    fn variance_is_bounded() {
        let t_p = compute_tp(1.0 / 64.0).unwrap();
        let bound = (2.0 * t_p) * (2.0 * t_p) / 4.0;
        for table in enumerate_tables(2, 7, false).unwrap() {
            let v = quantization_variance(&table, t_p, 1e-10).unwrap();
            assert!(v >= 0.0 && v <= bound);
        }
    }

    #[test]
    fn interval_cost_matches_closed_form() {
        // Closed form from normal moments:
        //   I = -M2 + (c0+c1) M1 - c0 c1 M0
        let closed = |c0: f64, c1: f64| {
            let m0 = normal_cdf(c1) - normal_cdf(c0);
            let m1 = normal_pdf(c0) - normal_pdf(c1);
            let m2 = m0 + c0 * normal_pdf(c0) - c1 * normal_pdf(c1);
            -m2 + (c0 + c1) * m1 - c0 * c1 * m0
        };
        let mut rng = crate::seed::stream(4);
        for _ in 0..200 {
            let a = rng.random::<f64>() * 8.0 - 4.0;
            let w = rng.random::<f64>() * 5.0;
            let got = interval_cost(a, a + w, 1e-13);
            assert!((got - closed(a, a + w)).abs() < 1e-10);
        }
    }

    #[test]
    fn solver_forced_and_small_argmin() {
        let key = TableKey::new(2, 3, 1, 32).unwrap();
        let t = solve_optimal_table(&key, 1e-12).unwrap();
        assert_eq!(t.values, vec![0, 1, 2, 3]);

        // b=2, g=4: three candidates; {0,1,2,4} and its mirror {0,2,3,4} tie
        // and beat {0,1,3,4}; lexicographic tie-break picks {0,1,2,4}.
        let key = TableKey::new(2, 4, 1, 32).unwrap();
        let t = solve_optimal_table(&key, 1e-12).unwrap();
        let tp = t.t_p;
        let v134 = quantization_variance(&[0, 1, 3, 4], tp, 1e-12).unwrap();
        let v124 = quantization_variance(&[0, 1, 2, 4], tp, 1e-12).unwrap();
        let v234 = quantization_variance(&[0, 2, 3, 4], tp, 1e-12).unwrap();
        assert!((v124 - v234).abs() < 1e-12);
        assert!(v124 < v134);
        assert_eq!(t.values, vec![0, 1, 2, 4]);
        assert!((t.variance - 0.468_824_592_404_311).abs() < 1e-10);
    }

    #[test]
    fn solver_respects_odd_g_symmetry() {
        let key = TableKey::new(3, 11, 1, 32).unwrap();
        let t = solve_optimal_table(&key, 1e-12).unwrap();
        t.validate().unwrap();
        for z in 0..4 {
            assert_eq!(t.values[z + 4] - t.values[z], 6);
        }
    }

    #[test]
    fn half_shift_closure_holds_only_sometimes() {
        // The half-shift reduction keeps the true optimum on some odd
        // granularities and excludes it on others; the solver mirrors the
        // constrained search, so both behaviors are pinned here.
        let full_argmin = |b: u8, g: u32, t_p: f64| -> (f64, Vec<u32>) {
            let mut best = f64::INFINITY;
            let mut best_table = Vec::new();
            for cand in enumerate_tables(b, g, false).unwrap() {
                let v = quantization_variance(&cand, t_p, 1e-12).unwrap();
                if v < best || (v == best && cand < best_table) {
                    best = v;
                    best_table = cand;
                }
            }
            (best, best_table)
        };

        // closure holds: constrained == unconstrained
        for (b, g) in [(2u8, 3u32), (2, 5), (3, 7)] {
            let key = TableKey::new(b, g, 1, 32).unwrap();
            let sym = solve_optimal_table(&key, 1e-12).unwrap();
            let (best, best_table) = full_argmin(b, g, sym.t_p);
            assert!((sym.variance - best).abs() < 1e-10, "b={b} g={g}");
            assert_eq!(sym.values, best_table, "b={b} g={g}");
        }

        // counterexample: at b=2, g=7 the unconstrained optimum {0,2,4,7}
        // violates the half-shift constraint and beats the constrained
        // winner {0,3,4,7} by ~18%
        let key = TableKey::new(2, 7, 1, 32).unwrap();
        let sym = solve_optimal_table(&key, 1e-12).unwrap();
        assert_eq!(sym.values, vec![0, 3, 4, 7]);
        let (best, best_table) = full_argmin(2, 7, sym.t_p);
        assert_eq!(best_table, vec![0, 2, 4, 7]);
        assert!(
            best < sym.variance * 0.90,
            "expected a large closure gap: full {best} vs constrained {}",
            sym.variance
        );
    }

    /// Independent optimality oracle: shortest path over closed-form interval
    /// costs (layered DP - a different optimizer and a different integrator).
    fn dp_optimal_variance(bits: u8, g: u32, t_p: f64) -> f64 {
        let closed = |c0: f64, c1: f64| {
            let m0 = normal_cdf(c1) - normal_cdf(c0);
            let m1 = normal_pdf(c0) - normal_pdf(c1);
            let m2 = m0 + c0 * normal_pdf(c0) - c1 * normal_pdf(c1);
            -m2 + (c0 + c1) * m1 - c0 * c1 * m0
        };
        let scale = |v: u32| 2.0 * t_p * v as f64 / g as f64 - t_p;
        let k = 1usize << bits;
        let n = (g + 1) as usize;
        let mut dp = vec![f64::INFINITY; n];
        dp[0] = 0.0;
        for _layer in 1..k {
            let mut next = vec![f64::INFINITY; n];
            for v in 1..n {
                for u in 0..v {
                    if dp[u].is_finite() {
                        let c = dp[u] + closed(scale(u as u32), scale(v as u32));
                        if c < next[v] {
                            next[v] = c;
                        }
                    }
                }
            }
            dp = next;
        }
        dp[n - 1]
    }

    #[test]
    fn solver_matches_dp_shortest_path() {
        // DP searches the unconstrained family, so the sweep sticks to even
        // g (and b = 1) where the solver does too.
        for (b, g) in [
            (1u8, 1u32),
            (1, 8),
            (2, 4),
            (2, 12),
            (3, 12),
            (3, 20),
            (4, 20),
        ] {
            for (pn, pd) in [(1u64, 32u64), (1, 512)] {
                let key = TableKey::new(b, g, pn, pd).unwrap();
                let t = solve_optimal_table(&key, 1e-12).unwrap();
                let dp = dp_optimal_variance(b, g, t.t_p);
                assert!(
                    (t.variance - dp).abs() < 1e-9,
                    "b={b} g={g} p={pn}/{pd}: solver {} dp {dp}",
                    t.variance
                );
            }
        }
    }

    #[test]
    fn variance_weakly_decreases_along_nested_grids() {
        // Finer grids only help when the coarse grid embeds in the fine one
        // (g | g'), which is the sense in which granularity buys accuracy.
        let t_key = |g| TableKey::new(2, g, 1, 32).unwrap();
        let mut last = f64::INFINITY;
        for g in [3u32, 6, 12, 24, 48] {
            let v = solve_optimal_table(&t_key(g), 1e-12).unwrap().variance;
            assert!(v <= last + 1e-12, "g={g}: {v} > {last}");
            last = v;
        }
    }

    #[test]
    fn quantization_values_match_worked_example() {
        let key = TableKey::new(2, 4, 1, 32).unwrap();
        let table = LookupTable {
            key,
            t_p: compute_tp(1.0 / 32.0).unwrap(),
            values: vec![0, 1, 3, 4],
            variance: 0.643_040_942_351_456,
        };
        let q = calc_quantization_values(-1.0, 1.0, &table).unwrap();
        assert_eq!(q.values, vec![-1.0, -0.5, 0.5, 1.0]);

        let ident = LookupTable::identity(2, 1, 32).unwrap();
        let q = calc_quantization_values(-1.0, 1.0, &ident).unwrap();
        for (got, want) in q.values.iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }

        // symmetric table about 0 gives values symmetric about 0
        let key = TableKey::new(2, 5, 1, 32).unwrap();
        let sym = solve_optimal_table(&key, 1e-12).unwrap();
        let q = calc_quantization_values(-2.0, 2.0, &sym).unwrap();
        for j in 0..q.values.len() {
            assert!((q.values[j] + q.values[q.values.len() - 1 - j]).abs() < 1e-12);
        }

        assert!(calc_quantization_values(1.0, 1.0, &ident).is_err());
    }

    #[test]
    fn cache_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join(format!("thc-cache-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tables.cache");
        let _ = std::fs::remove_file(&path);

        let key = TableKey::new(2, 4, 1, 32).unwrap();
        let table = solve_optimal_table(&key, 1e-12).unwrap();
        save_table(&path, &table).unwrap();
        let other = solve_optimal_table(&TableKey::new(3, 9, 1, 512).unwrap(), 1e-12).unwrap();
        save_table(&path, &other).unwrap();

        let loaded = load_table(&path, &key).unwrap();
        assert_eq!(loaded, table);
        let loaded = load_table(&path, &other.key).unwrap();
        assert_eq!(loaded, other);

        // unknown key
        let missing = TableKey::new(2, 7, 1, 32).unwrap();
        assert!(matches!(
            load_table(&path, &missing),
            Err(TableError::NotFound { .. })
        ));

        // truncated file: drop the last line
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.trim_end().rfind('\n').unwrap();
        let bad = dir.join("truncated.cache");
        std::fs::write(&bad, &text[..cut]).unwrap();
        match load_table(&bad, &key) {
            Err(TableError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // duplicate key is replaced, not appended
        save_table(&path, &table).unwrap();
        assert_eq!(list_tables(&path).unwrap().len(), 2);

        std::fs::remove_dir_all(&dir).unwrap();
    }
}
