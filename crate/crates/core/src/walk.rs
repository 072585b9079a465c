//! The centered random walk `S` of the many-to-one formula, its renewal
//! function `R`, and exact lattice dynamic programs for the random-walk
//! estimates the rest of the crate leans on.
//!
//! Lattice walks are handled exactly. Positions are kept as integer multiples
//! of the lattice span; the walk started at `x` lives on `x + span·ℤ`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;
use rand::RngCore;

use crate::num::{self, exp, fabs, floor, ksum, sqrt, KahanSum};
use crate::offspring::{OffspringLaw, DEFAULT_BOUNDARY_TOL};
use crate::rng::{pick_cumulative, pick_weighted};
use crate::stats::MeanVar;

/// Work (time steps × lattice sites × support size) allowed for one DP call.
pub const DP_WORK_LIMIT: f64 = 2e10;
/// Lattice points covered by a renewal table beyond its grid.
pub const DEFAULT_RENEWAL_COVER: usize = 4096;
const SUPPORT_MERGE_TOL: f64 = 1e-12;
const INDEX_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum WalkError {
    /// The law's exponential mass is not 1, so the tilt is not a probability.
    NotNormalized { exp_mass: f64 },
    /// The step law is not centered.
    Drifted { mean: f64 },
    /// An exact lattice routine was called on a non-lattice law.
    NonLattice,
    InvalidArgument(String),
    /// The requested range needs more DP work than [`DP_WORK_LIMIT`].
    DpTooLarge { work: f64, limit: f64 },
    /// `R(x) = 0` where a positive value is required.
    Domain(String),
    /// No admissible move (all conditioned weights vanish).
    ZeroMass,
    /// The ladder-height factorization left a large residual.
    Factorization { residual: f64 },
}

impl fmt::Display for WalkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WalkError::NotNormalized { exp_mass } => {
                write!(f, "law has E∫e^(-x)L(dx) = {exp_mass}, expected 1")
            }
            WalkError::Drifted { mean } => write!(f, "step law has mean {mean}, expected 0"),
            WalkError::NonLattice => write!(f, "step law is non-lattice; use the Monte Carlo variant"),
            WalkError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            WalkError::DpTooLarge { work, limit } => write!(
                f,
                "dynamic program needs {work:.3e} operations (limit {limit:.1e}); \
                 split the n range into smaller blocks or reduce the starting points"
            ),
            WalkError::Domain(msg) => write!(f, "domain error: {msg}"),
            WalkError::ZeroMass => write!(f, "conditioned step has no admissible move"),
            WalkError::Factorization { residual } => {
                write!(f, "ladder-height factorization residual {residual:e} too large")
            }
        }
    }
}

impl core::error::Error for WalkError {}

/// Step distribution of the many-to-one walk.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLaw {
    support: Vec<(f64, f64)>,
    mean: f64,
    variance: f64,
    lattice_span: Option<f64>,
}

/// A lattice step law in integer units of its span.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeStep {
    pub span: f64,
    /// `(offset, prob)` sorted by offset.
    pub steps: Vec<(i64, f64)>,
    pub min_step: i64,
    pub max_step: i64,
}

impl StepLaw {
    /// Build from `(value, prob)` pairs; equal values are merged and the result
    /// sorted.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, WalkError> {
        if points.is_empty() {
            return Err(WalkError::InvalidArgument("empty step support".to_string()));
        }
        let mut pts: Vec<(f64, f64)> = points.into_iter().filter(|&(_, p)| p > 0.0).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
        for (x, p) in pts {
            if !(x.is_finite() && p.is_finite()) {
                return Err(WalkError::InvalidArgument("non-finite step point".to_string()));
            }
            match support.last_mut() {
                Some(last) if fabs(last.0 - x) <= SUPPORT_MERGE_TOL * (1.0 + fabs(x)) => last.1 += p,
                _ => support.push((x, p)),
            }
        }
        let total = ksum(support.iter().map(|s| s.1));
        if fabs(total - 1.0) > 1e-12 {
            return Err(WalkError::InvalidArgument(alloc::format!("step probabilities sum to {total}")));
        }
        let mean = ksum(support.iter().map(|&(x, p)| x * p));
        let variance = ksum(support.iter().map(|&(x, p)| (x - mean) * (x - mean) * p));
        let values: Vec<f64> = support.iter().map(|s| s.0).collect();
        let lattice_span = num::lattice_span(&values);
        Ok(Self { support, mean, variance, lattice_span })
    }

    pub fn support(&self) -> &[(f64, f64)] {
        &self.support
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `σ² = Var(S₁)`.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lattice_span(&self) -> Option<f64> {
        self.lattice_span
    }

    pub fn lattice(&self) -> Option<LatticeStep> {
        let span = self.lattice_span?;
        let steps: Vec<(i64, f64)> =
            self.support.iter().map(|&(x, p)| (num::lattice_index(x, span), p)).collect();
        let min_step = steps.first()?.0;
        let max_step = steps.last()?.0;
        Some(LatticeStep { span, steps, min_step, max_step })
    }

    fn require_lattice(&self) -> Result<LatticeStep, WalkError> {
        self.lattice().ok_or(WalkError::NonLattice)
    }

    fn require_centered(&self) -> Result<(), WalkError> {
        let scale = 1.0 + self.support.iter().fold(0.0f64, |m, s| m.max(fabs(s.0)));
        if fabs(self.mean) > 1e-10 * scale {
            return Err(WalkError::Drifted { mean: self.mean });
        }
        Ok(())
    }

    /// One step of the walk.
    pub fn sample<R: RngCore + ?Sized>(&self, cumulative: &[f64], rng: &mut R) -> f64 {
        self.support[pick_cumulative(cumulative, rng)].0
    }

    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = KahanSum::new();
        self.support
            .iter()
            .map(|s| {
                acc.add(s.1);
                acc.value()
            })
            .collect()
    }
}

/// `P(S₁ = x) = E[Σ_{|u|=1} e^{−V(u)} 1{V(u) = x}]`.
pub fn derive_step_law(law: &OffspringLaw) -> Result<StepLaw, WalkError> {
    derive_step_law_with_tol(law, DEFAULT_BOUNDARY_TOL)
}

pub fn derive_step_law_with_tol(law: &OffspringLaw, tol: f64) -> Result<StepLaw, WalkError> {
    let exp_mass = ksum(
        law.atoms()
            .iter()
            .map(|a| a.prob * ksum(a.children.iter().map(|&x| exp(-x)))),
    );
    if fabs(exp_mass - 1.0) > tol {
        return Err(WalkError::NotNormalized { exp_mass });
    }
    let points = law
        .atoms()
        .iter()
        .filter(|a| a.prob > 0.0)
        .flat_map(|a| a.children.iter().map(move |&x| (x, a.prob * exp(-x))))
        .collect::<Vec<_>>();
    // renormalize away the rounding of the exponential mass
    let points = points.into_iter().map(|(x, p)| (x, p / exp_mass)).collect();
    StepLaw::new(points)
}

/// How a renewal table was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenewalMethod {
    /// Exact: ladder-height law from the Wiener–Hopf roots, then the renewal
    /// recursion truncated at `horizon` ladder epochs.
    LadderFactorization,
    /// Time-domain DP over `horizon` steps (tail estimate is heuristic).
    TimeDp,
    /// Monte Carlo over `horizon` steps (values carry standard errors).
    MonteCarlo,
}

/// Renewal function `R(x) = Σ_k P(S_k ≥ −x, S_k < min_{j<k} S_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenewalTable {
    grid: Vec<f64>,
    values: Vec<f64>,
    horizon: usize,
    tail_bound: f64,
    c_r_estimate: f64,
    method: RenewalMethod,
    stderr: Option<Vec<f64>>,
    /// Lattice span and `R` at lattice indices `0..=M`.
    lattice: Option<(f64, Vec<f64>)>,
    /// Slope used beyond the covered range (`1/(span·E[H])` for lattice walks).
    asymptotic_slope: f64,
    harmonic_residual: f64,
    ladder_heights: Option<Vec<f64>>,
}

impl RenewalTable {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Bound on the mass omitted by truncation plus the numerical residual
    /// (heuristic for the time-domain and Monte Carlo methods).
    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn c_r_estimate(&self) -> f64 {
        self.c_r_estimate
    }

    pub fn method(&self) -> RenewalMethod {
        self.method
    }

    pub fn stderr(&self) -> Option<&[f64]> {
        self.stderr.as_deref()
    }

    /// Largest `|R(x) − E[R(x+S₁); x+S₁ ≥ 0]|` seen on the covered lattice.
    pub fn harmonic_residual(&self) -> f64 {
        self.harmonic_residual
    }

    /// Strict descending ladder-height law, `P(H = k·span)` at index `k − 1`.
    pub fn ladder_heights(&self) -> Option<&[f64]> {
        self.ladder_heights.as_deref()
    }

    pub fn lattice_span(&self) -> Option<f64> {
        self.lattice.as_ref().map(|l| l.0)
    }

    /// `R(x)`; zero for `x < 0`.
    pub fn eval(&self, x: f64) -> f64 {
        if let Some((span, vals)) = &self.lattice {
            let q = x / span;
            if q < -INDEX_TOL {
                return 0.0;
            }
            let idx = floor(q + INDEX_TOL) as usize;
            if idx < vals.len() {
                vals[idx]
            } else {
                let last = vals.len() - 1;
                vals[last] + (idx - last) as f64 * span * self.asymptotic_slope
            }
        } else {
            if x < 0.0 {
                return 0.0;
            }
            match self.grid.iter().rposition(|&g| g <= x) {
                Some(i) if i + 1 < self.grid.len() => self.values[i],
                Some(i) => self.values[i] + (x - self.grid[i]) * self.asymptotic_slope,
                None => 1.0,
            }
        }
    }

    /// `R_α(x) = R(α + x)`.
    #[inline]
    pub fn eval_alpha(&self, alpha: f64, x: f64) -> f64 {
        self.eval(alpha + x)
    }
}

fn validate_grid(grid: &[f64]) -> Result<(), WalkError> {
    if grid.is_empty() {
        return Err(WalkError::InvalidArgument("empty grid".to_string()));
    }
    if grid.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
        return Err(WalkError::InvalidArgument("grid values must be finite and ≥ 0".to_string()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(WalkError::InvalidArgument("grid must be strictly increasing".to_string()));
    }
    Ok(())
}

/// Least-squares slope of `R` on the upper half of the grid.
fn regress_c_r(grid: &[f64], values: &[f64], fallback: f64) -> f64 {
    let start = grid.len() / 2;
    let (gx, gy) = (&grid[start..], &values[start..]);
    match num::linear_fit(gx, gy) {
        Some((slope, _, _)) if slope > 0.0 => slope,
        _ => fallback,
    }
}

/// Strict descending ladder-height law of a centered lattice walk, from the
/// roots of `z^d (1 − φ(z))` inside the unit disk. Entry `k − 1` is `P(H = k)`.
pub fn ladder_height_law(lattice: &LatticeStep) -> Result<(Vec<f64>, f64), WalkError> {
    let d = (-lattice.min_step).max(0) as usize;
    let u = lattice.max_step.max(0) as usize;
    if d == 0 || u == 0 {
        return Err(WalkError::Drifted { mean: if d == 0 { 1.0 } else { -1.0 } });
    }
    if d == 1 {
        return Ok((vec![1.0], 0.0));
    }
    let deg = d + u;
    let mut coeffs = vec![0.0; deg + 1];
    coeffs[d] += 1.0;
    for &(j, p) in &lattice.steps {
        coeffs[(j + d as i64) as usize] -= p;
    }
    let (q1, r1) = num::deflate(&coeffs, 1.0);
    let (q2, r2) = num::deflate(&q1, 1.0);
    let mut roots = num::poly_roots(&q2);
    roots.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    if roots.len() < d - 1 {
        return Err(WalkError::Factorization { residual: f64::INFINITY });
    }
    let inside = &roots[..d - 1];
    let separation = if roots.len() > d - 1 { roots[d - 1].norm() } else { f64::INFINITY };
    if inside.iter().any(|r| r.norm() >= 1.0) || separation <= 1.0 {
        return Err(WalkError::Factorization { residual: 1.0 });
    }
    // (1 − w)·Π(1 − r_i w), coefficients in w = 1/z
    let mut poly = vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)];
    for r in inside {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (k, c) in poly.iter().enumerate() {
            next[k] += *c;
            next[k + 1] -= *c * *r;
        }
        poly = next;
    }
    let mut imag: f64 = 0.0;
    let mut pmf = Vec::with_capacity(d);
    for c in &poly[1..] {
        imag = imag.max(fabs(c.im));
        let p = -c.re;
        if p < -1e-10 {
            return Err(WalkError::Factorization { residual: -p });
        }
        pmf.push(p.max(0.0));
    }
    let total = ksum(pmf.iter().copied());
    let residual = fabs(total - 1.0) + imag + fabs(r1) + fabs(r2);
    if residual > 1e-8 {
        return Err(WalkError::Factorization { residual });
    }
    for p in pmf.iter_mut() {
        *p /= total;
    }
    Ok((pmf, residual))
}

/// Exact renewal function of a centered lattice walk.
///
/// The strict descending ladder-height law comes from the Wiener–Hopf
/// factorization; `R` at lattice points is then the renewal sum over at most
/// `horizon` ladder epochs. Heights are at least one lattice unit, so the
/// truncation is exact as soon as `horizon` exceeds the number of lattice
/// points covered; otherwise the omitted mass is computed and reported.
///
/// Non-lattice laws return [`WalkError::NonLattice`]; use
/// [`renewal_function_mc`] for those.
pub fn renewal_function(step: &StepLaw, grid: &[f64], horizon: usize) -> Result<RenewalTable, WalkError> {
    renewal_function_covering(step, grid, horizon, 0.0)
}

/// As [`renewal_function`], guaranteeing exact lattice values up to `cover`.
pub fn renewal_function_covering(
    step: &StepLaw,
    grid: &[f64],
    horizon: usize,
    cover: f64,
) -> Result<RenewalTable, WalkError> {
    validate_grid(grid)?;
    if horizon == 0 {
        return Err(WalkError::InvalidArgument("horizon must be ≥ 1".to_string()));
    }
    step.require_centered()?;
    let lattice = step.require_lattice()?;
    let (heights, fact_residual) = ladder_height_law(&lattice)?;
    let span = lattice.span;
    let grid_max = grid[grid.len() - 1].max(cover);
    let m_max = (floor(grid_max / span + INDEX_TOL) as usize).max(DEFAULT_RENEWAL_COVER);

    // full renewal sequence U(m) = Σ_k P(H_1 + … + H_k = m)
    let mut renewal_density = vec![0.0; m_max + 1];
    renewal_density[0] = 1.0;
    for m in 1..=m_max {
        let mut acc = KahanSum::new();
        for (k, &g) in heights.iter().enumerate() {
            let h = k + 1;
            if h > m {
                break;
            }
            acc.add(g * renewal_density[m - h]);
        }
        renewal_density[m] = acc.value();
    }
    let mut full = vec![0.0; m_max + 1];
    let mut acc = KahanSum::new();
    for m in 0..=m_max {
        acc.add(renewal_density[m]);
        full[m] = acc.value();
    }

    let (values_lattice, omitted) = if horizon >= m_max {
        (full, 0.0)
    } else {
        // sum only the first `horizon` ladder epochs
        let mut conv = vec![0.0; m_max + 1];
        conv[0] = 1.0;
        let mut trunc = vec![0.0; m_max + 1];
        trunc[0] = 1.0;
        for _ in 1..=horizon {
            let mut next = vec![0.0; m_max + 1];
            for m in 1..=m_max {
                let mut a = KahanSum::new();
                for (k, &g) in heights.iter().enumerate() {
                    if k + 1 > m {
                        break;
                    }
                    a.add(g * conv[m - k - 1]);
                }
                next[m] = a.value();
            }
            for m in 0..=m_max {
                trunc[m] += next[m];
            }
            conv = next;
        }
        let mut acc = KahanSum::new();
        let mut cum = vec![0.0; m_max + 1];
        for m in 0..=m_max {
            acc.add(trunc[m]);
            cum[m] = acc.value();
        }
        let omitted = full[m_max] - cum[m_max];
        (cum, omitted.max(0.0))
    };

    let mean_height = ksum(heights.iter().enumerate().map(|(k, g)| (k + 1) as f64 * g));
    let asymptotic_slope = 1.0 / (span * mean_height);

    // harmonicity check on the covered range
    let mut harmonic_residual: f64 = 0.0;
    let check_to = m_max.saturating_sub(lattice.max_step as usize).min(4 * DEFAULT_RENEWAL_COVER);
    for m in 0..=check_to {
        let mut acc = KahanSum::new();
        for &(j, p) in &lattice.steps {
            let t = m as i64 + j;
            if t >= 0 {
                acc.add(p * values_lattice[t as usize]);
            }
        }
        let r = fabs(acc.value() - values_lattice[m]) / values_lattice[m];
        harmonic_residual = harmonic_residual.max(r);
    }
    if omitted > 0.0 {
        harmonic_residual = f64::NAN;
    }

    let values: Vec<f64> = grid
        .iter()
        .map(|&x| values_lattice[floor(x / span + INDEX_TOL) as usize])
        .collect();
    let c_r_estimate = regress_c_r(grid, &values, asymptotic_slope);
    let numeric = fact_residual * (m_max as f64 + 1.0) * (m_max as f64 + 1.0);
    Ok(RenewalTable {
        grid: grid.to_vec(),
        values,
        horizon,
        tail_bound: omitted + numeric,
        c_r_estimate,
        method: RenewalMethod::LadderFactorization,
        stderr: None,
        lattice: Some((span, values_lattice)),
        asymptotic_slope,
        harmonic_residual,
        ladder_heights: Some(heights),
    })
}

/// Renewal function by the time-domain DP over `horizon` steps.
///
/// By time reversal, `P(S_k ≥ −x, S_k < min_{j<k} S_j) = P(S_1, …, S_k < 0,
/// S_k ≥ −x)`, so one killed DP on the strictly negative half-line gives every
/// term. Mass that leaves the window `[−x_max − margin, 0)` downward is dropped
/// and reported; the tail beyond `horizon` is extrapolated from the `k^{−3/2}`
/// decay of the last terms (heuristic).
pub fn renewal_function_time_dp(step: &StepLaw, grid: &[f64], horizon: usize) -> Result<RenewalTable, WalkError> {
    validate_grid(grid)?;
    if horizon == 0 {
        return Err(WalkError::InvalidArgument("horizon must be ≥ 1".to_string()));
    }
    step.require_centered()?;
    let lattice = step.require_lattice()?;
    let span = lattice.span;
    let grid_idx: Vec<usize> = grid.iter().map(|&x| floor(x / span + INDEX_TOL) as usize).collect();
    let x_max = grid_idx[grid_idx.len() - 1];
    let margin = (8.0 * sqrt(horizon as f64) * (lattice.max_step - lattice.min_step) as f64) as usize + 8;
    let width = x_max + 1 + margin;
    let work = horizon as f64 * width as f64 * lattice.steps.len() as f64;
    if work > DP_WORK_LIMIT {
        return Err(WalkError::DpTooLarge { work, limit: DP_WORK_LIMIT });
    }
    // cell i ↔ position −(i + 1)
    let mut dist = vec![0.0; width];
    let mut next = vec![0.0; width];
    let mut counts = vec![0.0; x_max + 1];
    counts.iter_mut().for_each(|c| *c = 1.0); // k = 0 term
    let mut at_xmax = Vec::with_capacity(horizon);
    let mut leaked = 0.0;
    // first step from 0
    for &(j, p) in &lattice.steps {
        if j < 0 {
            let i = (-j - 1) as usize;
            if i < width {
                dist[i] += p;
            } else {
                leaked += p;
            }
        }
    }
    for k in 1..=horizon {
        // accumulate visits of [−x, 0) at time k
        let mut run = 0.0;
        let mut prefix = vec![0.0; x_max + 1];
        for (i, p) in prefix.iter_mut().enumerate() {
            run += dist[i];
            *p = run;
        }
        for (x, c) in counts.iter_mut().enumerate() {
            if x > 0 {
                *c += prefix[x - 1];
            }
        }
        at_xmax.push(if x_max > 0 { prefix[x_max - 1] } else { 0.0 });
        if k == horizon {
            break;
        }
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, &m) in dist.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let pos = -(i as i64) - 1;
            for &(j, p) in &lattice.steps {
                let np = pos + j;
                if np >= 0 {
                    continue;
                }
                let ni = (-np - 1) as usize;
                if ni < width {
                    next[ni] += m * p;
                } else {
                    leaked += m * p;
                }
            }
        }
        core::mem::swap(&mut dist, &mut next);
    }
    let values: Vec<f64> = grid_idx.iter().map(|&i| counts[i]).collect();
    let tail = eppel_tail(&at_xmax) + leaked * (x_max as f64 + 1.0);
    let c_r_estimate = regress_c_r(grid, &values, 1.0 / span);
    Ok(RenewalTable {
        grid: grid.to_vec(),
        values: values.clone(),
        horizon,
        tail_bound: tail,
        c_r_estimate,
        method: RenewalMethod::TimeDp,
        stderr: None,
        lattice: None,
        asymptotic_slope: c_r_estimate,
        harmonic_residual: f64::NAN,
        ladder_heights: None,
    })
}

/// Tail `Σ_{k>T} t_k` assuming `t_k ≈ C k^{−3/2}`, with `C` read off the mass of
/// the last half of the horizon.
fn eppel_tail(terms: &[f64]) -> f64 {
    let t = terms.len();
    if t < 4 {
        return f64::INFINITY;
    }
    let half = ksum(terms[t / 2..].iter().copied());
    half / (core::f64::consts::SQRT_2 - 1.0)
}

/// Monte Carlo renewal function for non-lattice walks, counting strict
/// descending ladder points above `−x` over `horizon` steps.
pub fn renewal_function_mc<R: RngCore + ?Sized>(
    step: &StepLaw,
    grid: &[f64],
    horizon: usize,
    replicas: usize,
    rng: &mut R,
) -> Result<RenewalTable, WalkError> {
    validate_grid(grid)?;
    step.require_centered()?;
    if horizon == 0 || replicas < 2 {
        return Err(WalkError::InvalidArgument("need horizon ≥ 1 and at least 2 replicas".to_string()));
    }
    let cumulative = step.cumulative();
    let mut acc: Vec<MeanVar> = vec![MeanVar::new(); grid.len()];
    let mut late = MeanVar::new();
    let mut counts = vec![0.0; grid.len()];
    for _ in 0..replicas {
        counts.iter_mut().for_each(|c| *c = 1.0);
        let mut s = 0.0;
        let mut running_min = 0.0;
        let mut late_hits = 0.0;
        for k in 1..=horizon {
            s += step.sample(&cumulative, rng);
            if s < running_min {
                running_min = s;
                // contributes to every x ≥ −s
                let first = grid.partition_point(|&g| g < -s);
                for c in counts[first..].iter_mut() {
                    *c += 1.0;
                }
                if 2 * k > horizon && first < grid.len() {
                    late_hits += 1.0;
                }
            }
        }
        for (a, &c) in acc.iter_mut().zip(&counts) {
            a.push(c);
        }
        late.push(late_hits);
    }
    let values: Vec<f64> = acc.iter().map(|a| a.mean()).collect();
    let stderr: Vec<f64> = acc.iter().map(|a| a.stderr()).collect();
    let c_r_estimate = regress_c_r(grid, &values, 1.0);
    Ok(RenewalTable {
        grid: grid.to_vec(),
        values,
        horizon,
        tail_bound: late.mean() / (core::f64::consts::SQRT_2 - 1.0),
        c_r_estimate,
        method: RenewalMethod::MonteCarlo,
        stderr: Some(stderr),
        lattice: None,
        asymptotic_slope: c_r_estimate,
        harmonic_residual: f64::NAN,
        ladder_heights: None,
    })
}

// ---------------------------------------------------------------------------
// Killed lattice dynamic programs

/// Distribution of a lattice walk on `[lo, lo + len)` (integer units).
#[derive(Clone, Debug)]
pub(crate) struct LatticeDist {
    pub lo: i64,
    pub mass: Vec<f64>,
}

impl LatticeDist {
    pub fn point(at: i64) -> Self {
        Self { lo: at, mass: vec![1.0] }
    }

    pub fn total(&self) -> f64 {
        ksum(self.mass.iter().copied())
    }

    /// One step; mass landing below `barrier` is removed and returned.
    pub fn step(&mut self, lattice: &LatticeStep, barrier: i64) -> f64 {
        let new_lo_raw = self.lo + lattice.min_step;
        let new_hi = self.lo + self.mass.len() as i64 - 1 + lattice.max_step;
        let new_lo = new_lo_raw.max(barrier);
        if new_hi < new_lo {
            let killed = self.total();
            self.mass.clear();
            self.lo = barrier;
            return killed;
        }
        let mut next = vec![0.0; (new_hi - new_lo + 1) as usize];
        let mut killed = 0.0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let pos = self.lo + i as i64;
            for &(j, p) in &lattice.steps {
                let np = pos + j;
                if np < barrier {
                    killed += m * p;
                } else {
                    next[(np - new_lo) as usize] += m * p;
                }
            }
        }
        // trim leading zeros so the window tracks the support
        let first = next.iter().position(|&v| v != 0.0).unwrap_or(next.len());
        let last = next.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
        if first >= last {
            self.mass.clear();
            self.lo = new_lo;
        } else {
            self.mass = next[first..last].to_vec();
            self.lo = new_lo + first as i64;
        }
        killed
    }

    /// Remove mass below `barrier`, returning it.
    pub fn kill_below(&mut self, barrier: i64) -> f64 {
        if self.lo >= barrier {
            return 0.0;
        }
        let cut = ((barrier - self.lo) as usize).min(self.mass.len());
        let killed = ksum(self.mass[..cut].iter().copied());
        self.mass.drain(..cut);
        self.lo = barrier;
        killed
    }

    pub fn sum_between(&self, lo: i64, hi: i64) -> f64 {
        let mut acc = KahanSum::new();
        for (i, &m) in self.mass.iter().enumerate() {
            let pos = self.lo + i as i64;
            if pos >= lo && pos <= hi {
                acc.add(m);
            }
        }
        acc.value()
    }
}

fn check_work(steps: usize, lattice: &LatticeStep, calls: usize) -> Result<(), WalkError> {
    let width = steps as f64 * (lattice.max_step - lattice.min_step) as f64 + 1.0;
    let work = steps as f64 * width * lattice.steps.len() as f64 * calls as f64;
    if work > DP_WORK_LIMIT {
        return Err(WalkError::DpTooLarge { work, limit: DP_WORK_LIMIT });
    }
    Ok(())
}

/// Lattice index `k` of the barrier relative to a start at `x`: the walk
/// satisfies `x + k·span ≥ barrier` iff `k ≥ barrier_index(...)`.
fn barrier_index(x: f64, barrier: f64, span: f64) -> i64 {
    libm::ceil((barrier - x) / span - INDEX_TOL) as i64
}

/// `P_x(min_{0≤i≤k} S_i ≥ barrier)` for `k = 0..=n`.
pub fn survival_curve(step: &StepLaw, x: f64, n: usize, barrier: f64) -> Result<Vec<f64>, WalkError> {
    let lattice = step.require_lattice()?;
    check_work(n, &lattice, 1)?;
    let b = barrier_index(x, barrier, lattice.span);
    let mut out = Vec::with_capacity(n + 1);
    if b > 0 {
        out.resize(n + 1, 0.0);
        return Ok(out);
    }
    let mut dist = LatticeDist::point(0);
    out.push(1.0);
    for _ in 0..n {
        dist.step(&lattice, b);
        out.push(dist.total());
    }
    Ok(out)
}

/// Exact `P_x(min_{0≤i≤n} S_i ≥ barrier)` for lattice walks.
pub fn survival_prob(step: &StepLaw, x: f64, n: usize, barrier: f64) -> Result<f64, WalkError> {
    if n == 0 {
        return Err(WalkError::InvalidArgument("n must be ≥ 1".to_string()));
    }
    Ok(survival_curve(step, x, n, barrier)?[n])
}

/// Monte Carlo `(estimate, stderr)` of `P_x(min_{0≤i≤n} S_i ≥ barrier)`.
pub fn survival_prob_mc<R: RngCore + ?Sized>(
    step: &StepLaw,
    x: f64,
    n: usize,
    barrier: f64,
    replicas: usize,
    rng: &mut R,
) -> (f64, f64) {
    let cumulative = step.cumulative();
    let mut hits = 0u64;
    for _ in 0..replicas {
        let mut s = x;
        let mut ok = s >= barrier;
        for _ in 0..n {
            if !ok {
                break;
            }
            s += step.sample(&cumulative, rng);
            ok = s >= barrier;
        }
        if ok {
            hits += 1;
        }
    }
    crate::stats::proportion(hits, replicas as u64)
}

/// Draw the next position of the walk conditioned to stay in `[−α, ∞)`:
/// `y` with probability `∝ P(S₁ = y − x)·R_α(y)·1{y ≥ −α}`.
pub fn conditioned_step<R: RngCore + ?Sized>(
    step: &StepLaw,
    renewal: &RenewalTable,
    alpha: f64,
    x: f64,
    rng: &mut R,
) -> Result<f64, WalkError> {
    if x < -alpha {
        return Err(WalkError::Domain(alloc::format!("start {x} is below the barrier {}", -alpha)));
    }
    let weights: Vec<f64> = step
        .support()
        .iter()
        .map(|&(s, p)| {
            let y = x + s;
            if y >= -alpha {
                p * renewal.eval_alpha(alpha, y)
            } else {
                0.0
            }
        })
        .collect();
    let total = ksum(weights.iter().copied());
    if !(total > 0.0) {
        return Err(WalkError::ZeroMass);
    }
    Ok(x + step.support()[pick_weighted(&weights, total, rng)].0)
}

/// Exact law of the conditioned walk after `n` steps from `x`:
/// `(1/R_α(x))·E_x[1{S_n = y} R_α(S_n) 1{min S ≥ −α}]`, as `(y, prob)` pairs.
pub fn conditioned_marginal(
    step: &StepLaw,
    renewal: &RenewalTable,
    alpha: f64,
    x: f64,
    n: usize,
) -> Result<Vec<(f64, f64)>, WalkError> {
    let lattice = step.require_lattice()?;
    check_work(n, &lattice, 1)?;
    let r0 = renewal.eval_alpha(alpha, x);
    if !(r0 > 0.0) {
        return Err(WalkError::Domain(alloc::format!("R_alpha({x}) = 0")));
    }
    let b = barrier_index(x, -alpha, lattice.span);
    let mut dist = LatticeDist::point(0);
    for _ in 0..n {
        dist.step(&lattice, b);
    }
    Ok(dist
        .mass
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| {
            let y = x + (dist.lo + i as i64) as f64 * lattice.span;
            (y, m * renewal.eval_alpha(alpha, y) / r0)
        })
        .collect())
}

/// `h_x(j) = √j · P_x(min_{i≤j} S_i ≥ 0) / R(x)`.
pub fn h_function(step: &StepLaw, renewal: &RenewalTable, x: f64, j: usize) -> Result<f64, WalkError> {
    if j == 0 {
        return Err(WalkError::InvalidArgument("j must be ≥ 1".to_string()));
    }
    let r = renewal.eval(x);
    if !(r > 0.0) {
        return Err(WalkError::Domain(alloc::format!("R({x}) = 0")));
    }
    Ok(sqrt(j as f64) * survival_prob(step, x, j, 0.0)? / r)
}

// ---------------------------------------------------------------------------
// Estimate witnesses

/// Which random-walk estimate to witness numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateKind {
    /// `P_x(min S_n ≥ 0) ≤ c (1+x) n^{−1/2}`
    F1,
    /// `P_x(min_{n−1} S > S_n ≥ 0) ≤ c (1+x) R(x) n^{−3/2}`
    AJ,
    /// `P_x(min S_n ≥ 0) ~ θ R(x) n^{−1/2}`
    K1,
    /// `P_x(S_n ∈ [a,b], min S_n ≥ 0) ≤ c (1+x)(1+b−a)(1+b) n^{−3/2}`
    AS1,
    /// as AS1 with the window shifted by `y` and `min_{rn≤j≤n} S_j ≥ y`
    AS2,
    /// `|P_x(min S_n ≥ 0)/(R(x) P(min S_n ≥ 0)) − 1| ≤ c (1+x)/√n`
    L22,
    /// `P(T⁻ = k) ≤ c k^{−3/2}`
    Eppel,
}

impl EstimateKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "F1" => Self::F1,
            "AJ" => Self::AJ,
            "K1" => Self::K1,
            "AS1" => Self::AS1,
            "AS2" => Self::AS2,
            "L22" => Self::L22,
            "EPPEL" => Self::Eppel,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateParams {
    pub xs: Vec<f64>,
    /// Times `n` (or `k` for the first-passage estimate).
    pub ns: Vec<usize>,
    pub a: f64,
    pub b: f64,
    pub y: f64,
    pub r: f64,
}

impl Default for EstimateParams {
    fn default() -> Self {
        Self { xs: vec![0.0], ns: vec![10, 100, 1000], a: 0.0, b: 1.0, y: 0.0, r: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub x: f64,
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub kind: EstimateKind,
    pub rows: Vec<EstimateRow>,
    /// Witnessed supremum of the ratio column.
    pub sup_ratio: f64,
}

/// Evaluate both sides of one estimate on the requested range. Constants are
/// never asserted: the report carries the witnessed supremum.
pub fn check_estimates(
    step: &StepLaw,
    renewal: &RenewalTable,
    kind: EstimateKind,
    params: &EstimateParams,
) -> Result<EstimateReport, WalkError> {
    let lattice = step.require_lattice()?;
    step.require_centered()?;
    let n_max = params.ns.iter().copied().max().unwrap_or(0);
    if n_max == 0 || params.ns.iter().any(|&n| n == 0) {
        return Err(WalkError::InvalidArgument("times must be ≥ 1".to_string()));
    }
    let xs: &[f64] = if kind == EstimateKind::Eppel { &[0.0] } else { &params.xs };
    if xs.iter().any(|&x| x < 0.0) {
        return Err(WalkError::InvalidArgument("starting points must be ≥ 0".to_string()));
    }
    let calls = match kind {
        EstimateKind::AS1 | EstimateKind::AS2 => xs.len() * params.ns.len(),
        EstimateKind::L22 => xs.len() + 1,
        _ => xs.len(),
    };
    check_work(n_max, &lattice, calls)?;
    let span = lattice.span;
    let mut rows = Vec::new();
    let sqrt_n = |n: usize| sqrt(n as f64);
    let n32 = |n: usize| libm::pow(n as f64, -1.5);
    match kind {
        EstimateKind::F1 | EstimateKind::K1 | EstimateKind::L22 => {
            let base = if kind == EstimateKind::L22 { Some(survival_curve(step, 0.0, n_max, 0.0)?) } else { None };
            for &x in xs {
                let curve = survival_curve(step, x, n_max, 0.0)?;
                let rx = renewal.eval(x);
                for &n in &params.ns {
                    let p = curve[n];
                    let row = match kind {
                        EstimateKind::F1 => {
                            let rhs = (1.0 + x) / sqrt_n(n);
                            EstimateRow { x, n, lhs: p, rhs, ratio: p / rhs }
                        }
                        EstimateKind::K1 => {
                            let rhs = rx / sqrt_n(n);
                            EstimateRow { x, n, lhs: p, rhs, ratio: p / rhs }
                        }
                        _ => {
                            let base = base.as_ref().unwrap()[n];
                            let lhs = p / (rx * base);
                            let rhs = (1.0 + x) / sqrt_n(n);
                            EstimateRow { x, n, lhs, rhs, ratio: fabs(lhs - 1.0) / rhs }
                        }
                    };
                    rows.push(row);
                }
            }
        }
        EstimateKind::AJ => {
            // by time reversal: P(S_1..S_n < 0, S_n ≥ −x) from 0
            let mut neg = LatticeDist::point(0);
            let mut per_n: Vec<Vec<f64>> = vec![Vec::new(); n_max + 1];
            let x_idx: Vec<i64> = xs.iter().map(|&x| floor(x / span + INDEX_TOL) as i64).collect();
            for n in 1..=n_max {
                // keep only strictly negative positions: reflect to use a lower barrier
                step_strictly_negative(&mut neg, &lattice);
                per_n[n] = x_idx.iter().map(|&xi| neg.sum_between(-xi, -1)).collect();
            }
            for (ix, &x) in xs.iter().enumerate() {
                let rx = renewal.eval(x);
                for &n in &params.ns {
                    let lhs = per_n[n][ix];
                    let rhs = (1.0 + x) * rx * n32(n);
                    rows.push(EstimateRow { x, n, lhs, rhs, ratio: lhs / rhs });
                }
            }
        }
        EstimateKind::AS1 | EstimateKind::AS2 => {
            if params.b < params.a || params.a < 0.0 {
                return Err(WalkError::InvalidArgument("need b ≥ a ≥ 0".to_string()));
            }
            if kind == EstimateKind::AS2 && !(params.r > 0.0 && params.r < 1.0 && params.y >= 0.0) {
                return Err(WalkError::InvalidArgument("need 0 < r < 1 and y ≥ 0".to_string()));
            }
            for &x in xs {
                for &n in &params.ns {
                    let b0 = barrier_index(x, 0.0, span);
                    let mut dist = LatticeDist::point(0);
                    let switch = if kind == EstimateKind::AS2 { libm::ceil(params.r * n as f64) as usize } else { n + 1 };
                    let by = barrier_index(x, params.y, span).max(b0);
                    if switch == 0 {
                        dist.kill_below(by);
                    }
                    for i in 1..=n {
                        let bar = if i >= switch { by } else { b0 };
                        dist.step(&lattice, bar);
                    }
                    let shift = if kind == EstimateKind::AS2 { params.y } else { 0.0 };
                    let lo = libm::ceil((shift + params.a - x) / span - INDEX_TOL) as i64;
                    let hi = floor((shift + params.b - x) / span + INDEX_TOL) as i64;
                    let lhs = dist.sum_between(lo, hi);
                    let rhs = (1.0 + x) * (1.0 + params.b - params.a) * (1.0 + params.b) * n32(n);
                    rows.push(EstimateRow { x, n, lhs, rhs, ratio: lhs / rhs });
                }
            }
        }
        EstimateKind::Eppel => {
            let mut dist = LatticeDist::point(0);
            let mut first_passage = vec![0.0; n_max + 1];
            for slot in first_passage.iter_mut().skip(1) {
                *slot = dist.step(&lattice, 0);
            }
            for &k in &params.ns {
                let lhs = first_passage[k];
                let rhs = n32(k);
                rows.push(EstimateRow { x: 0.0, n: k, lhs, rhs, ratio: lhs / rhs });
            }
        }
    }
    let sup_ratio = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    Ok(EstimateReport { kind, rows, sup_ratio })
}

/// One step of the walk killed on `[0, ∞)`.
fn step_strictly_negative(dist: &mut LatticeDist, lattice: &LatticeStep) {
    let lo = dist.lo + lattice.min_step;
    let hi = (dist.lo + dist.mass.len() as i64 - 1 + lattice.max_step).min(-1);
    if dist.mass.is_empty() || hi < lo {
        dist.mass.clear();
        return;
    }
    let mut next = vec![0.0; (hi - lo + 1) as usize];
    for (i, &w) in dist.mass.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let pos = dist.lo + i as i64;
        for &(j, p) in &lattice.steps {
            let np = pos + j;
            if np <= -1 {
                next[(np - lo) as usize] += w * p;
            }
        }
    }
    dist.lo = lo;
    dist.mass = next;
}
