//! Trees under the truncated tilt `Q^{(α)}` with `dQ/dP = D_n^{(α)}/D_0^{(α)}`.
//!
//! The spine starts at the root. From spine position `x` its brood is drawn
//! from the law tilted by
//! `Σ_j R_α(x+c_j) e^{−(x+c_j)} 1{x+c_j ≥ −α} / (R_α(x) e^{−x})`, the next
//! spine particle is picked with probability `∝ R_α(V) e^{−V} 1{V ≥ −α}`, and
//! every other child starts an ordinary `P` subtree. The spine positions then
//! form the walk conditioned to stay in `[−α, ∞)`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use rand::RngCore;

use crate::engine::{detect_events, EventWindowSpec, Tree};
use crate::num::{exp, floor, pow, sqrt, KahanSum};
use crate::offspring::OffspringLaw;
use crate::rng::{pick_cumulative, pick_weighted, replica_rng};
use crate::stats::MeanVar;
use crate::walk::{h_function, survival_prob, RenewalTable, StepLaw, WalkError};

#[derive(Clone, Debug, PartialEq)]
pub enum SpineError {
    InvalidArgument(String),
    /// The tilted brood has no admissible child (cannot happen for an exact
    /// renewal table).
    ZeroTilt { position: f64 },
    TreeTooLarge { depth: usize, particles: usize, cap: usize },
    Walk(WalkError),
}

impl fmt::Display for SpineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpineError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            SpineError::ZeroTilt { position } => write!(f, "spine at {position} has zero tilt mass"),
            SpineError::TreeTooLarge { depth, particles, cap } => {
                write!(f, "spine tree reached {particles} particles at depth {depth}, above the cap {cap}")
            }
            SpineError::Walk(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SpineError {}

impl From<WalkError> for SpineError {
    fn from(e: WalkError) -> Self {
        SpineError::Walk(e)
    }
}

/// Tilted brood law at one spine site.
#[derive(Clone, Debug)]
struct Kernel {
    /// Cumulative tilted atom probabilities.
    atom_cumulative: Vec<f64>,
    /// Per atom, per child: `R_α(x+c) e^{−c} 1{x+c ≥ −α}`.
    child_weights: Vec<Vec<f64>>,
    /// `E[Σ R_α(x+c) e^{−c} 1{…}] / R_α(x)`; 1 for an exact harmonic `R`.
    mass: f64,
}

/// Samples spine trees for one law, renewal table and `α`. Brood kernels are
/// cached per site.
pub struct SpineSampler<'a> {
    law: &'a OffspringLaw,
    renewal: &'a RenewalTable,
    alpha: f64,
    span: Option<f64>,
    cache: RefCell<BTreeMap<i64, Kernel>>,
    cap: usize,
}

/// A tree drawn under `Q^{(α)}`.
#[derive(Clone, Debug)]
pub struct SpineRealization {
    pub tree: Tree,
    /// `V(ξ_0), …, V(ξ_n)`.
    pub spine_positions: Vec<f64>,
    /// Index of `ξ_i` within generation `i`.
    pub spine_indices: Vec<usize>,
    /// Brood displacements of `ξ_i`, for `i < n`.
    pub offspring_of_spine: Vec<Vec<f64>>,
    /// `D_n^{(α)} / D_0^{(α)}` on the realized tree.
    pub weight: f64,
    pub w_alpha: f64,
    pub d_alpha: f64,
    pub alpha: f64,
}

impl SpineRealization {
    /// `(depth, position)` of every off-spine child of the spine.
    pub fn offspring_subtrees(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (i, brood) in self.offspring_of_spine.iter().enumerate() {
            let range = self.tree.children(i, self.spine_indices[i]);
            for (off, c) in range.zip(brood) {
                if off != self.spine_indices[i + 1] {
                    out.push((i + 1, self.spine_positions[i] + c));
                }
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.spine_positions.len() - 1
    }
}

impl<'a> SpineSampler<'a> {
    pub fn new(law: &'a OffspringLaw, renewal: &'a RenewalTable, alpha: f64) -> Result<Self, SpineError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(SpineError::InvalidArgument("alpha must be finite and ≥ 0".into()));
        }
        if !(renewal.eval(alpha) > 0.0) {
            return Err(SpineError::InvalidArgument("R(alpha) must be positive".into()));
        }
        Ok(Self {
            law,
            renewal,
            alpha,
            span: law.lattice_span(),
            cache: RefCell::new(BTreeMap::new()),
            cap: crate::engine::DEFAULT_CAP,
        })
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn renewal(&self) -> &RenewalTable {
        self.renewal
    }

    /// `D_0^{(α)} = R(α)`.
    pub fn d0(&self) -> f64 {
        self.renewal.eval(self.alpha)
    }

    fn site_key(&self, x: f64) -> i64 {
        match self.span {
            Some(h) => floor(x / h + 0.5) as i64,
            None => x.to_bits() as i64,
        }
    }

    fn build_kernel(&self, x: f64) -> Result<Kernel, SpineError> {
        let r_here = self.renewal.eval_alpha(self.alpha, x);
        if !(r_here > 0.0) {
            return Err(SpineError::ZeroTilt { position: x });
        }
        let mut child_weights = Vec::with_capacity(self.law.atoms().len());
        let mut atom_w = Vec::with_capacity(self.law.atoms().len());
        for atom in self.law.atoms() {
            let ws: Vec<f64> = atom
                .children
                .iter()
                .map(|&c| {
                    let y = x + c;
                    if y >= -self.alpha {
                        self.renewal.eval_alpha(self.alpha, y) * exp(-c)
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = ws.iter().sum();
            atom_w.push(atom.prob * s / r_here);
            child_weights.push(ws);
        }
        let mut acc = KahanSum::new();
        let atom_cumulative: Vec<f64> = atom_w
            .iter()
            .map(|&w| {
                acc.add(w);
                acc.value()
            })
            .collect();
        let mass = acc.value();
        if !(mass > 0.0) {
            return Err(SpineError::ZeroTilt { position: x });
        }
        Ok(Kernel { atom_cumulative, child_weights, mass })
    }

    /// Total tilted mass at `x` (1 when `R_α` is exactly harmonic).
    pub fn tilt_mass(&self, x: f64) -> Result<f64, SpineError> {
        Ok(self.build_kernel(x)?.mass)
    }

    /// Draw the spine's brood at `x`: `(atom index, spine child index)`.
    pub fn sample_brood<R: RngCore + ?Sized>(&self, x: f64, rng: &mut R) -> Result<(usize, usize), SpineError> {
        let key = self.site_key(x);
        let mut cache = self.cache.borrow_mut();
        if !cache.contains_key(&key) {
            let k = self.build_kernel(x)?;
            cache.insert(key, k);
        }
        let kernel = &cache[&key];
        let atom = pick_cumulative(&kernel.atom_cumulative, rng);
        let ws = &kernel.child_weights[atom];
        let total: f64 = ws.iter().sum();
        if !(total > 0.0) {
            return Err(SpineError::ZeroTilt { position: x });
        }
        Ok((atom, pick_weighted(ws, total, rng)))
    }

    /// Draw a tree to `depth` under `Q^{(α)}` and its weight at that depth.
    pub fn sample<R: RngCore + ?Sized>(&self, depth: usize, rng: &mut R) -> Result<SpineRealization, SpineError> {
        if depth == 0 {
            return Err(SpineError::InvalidArgument("depth must be ≥ 1".into()));
        }
        let mut tree = Tree::from_generations(&[]).expect("root tree");
        let mut spine_positions = vec![0.0];
        let mut spine_indices = vec![0usize];
        let mut offspring_of_spine = Vec::with_capacity(depth);
        let mut total = 1usize;
        for d in 0..depth {
            let spine_idx = spine_indices[d];
            let spine_pos = spine_positions[d];
            let mut failure = None;
            let mut next_spine = (0usize, 0.0f64);
            tree.push_generation(|i, v, buf| {
                if i == spine_idx {
                    match self.sample_brood(v, rng) {
                        Ok((atom, child)) => {
                            let kids = &self.law.atoms()[atom].children;
                            next_spine = (child, v + kids[child]);
                            buf.extend_from_slice(kids);
                        }
                        Err(e) => failure = Some(e),
                    }
                } else {
                    buf.extend_from_slice(self.law.sample(rng));
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let range = tree.children(d, spine_idx);
            offspring_of_spine.push(tree.positions(d + 1)[range.clone()].iter().map(|&y| y - spine_pos).collect());
            spine_indices.push(range.start + next_spine.0);
            spine_positions.push(next_spine.1);
            total += tree.positions(d + 1).len();
            if total > self.cap {
                return Err(SpineError::TreeTooLarge { depth: d + 1, particles: total, cap: self.cap });
            }
        }
        let stats = tree.stats(self.alpha, Some(self.renewal), 0);
        let last = stats.last();
        let weight = last.d_alpha / self.d0();
        Ok(SpineRealization {
            tree,
            spine_positions,
            spine_indices,
            offspring_of_spine,
            weight,
            w_alpha: last.w_alpha,
            d_alpha: last.d_alpha,
            alpha: self.alpha,
        })
    }
}

/// Convenience wrapper over [`SpineSampler::sample`].
pub fn sample_spine_tree<R: RngCore + ?Sized>(
    law: &OffspringLaw,
    alpha: f64,
    n: usize,
    renewal: &RenewalTable,
    rng: &mut R,
) -> Result<SpineRealization, SpineError> {
    SpineSampler::new(law, renewal, alpha)?.sample(n, rng)
}

/// Tree functionals for importance sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpineFunctional {
    One,
    /// `√n · W_n^{(α)}`.
    WAlpha,
    /// `√n · W_n^{(α)} / D_n^{(α)}`.
    WRatio,
    /// `1{A(n, λ)}`; needs trees of depth `2n`.
    EventA { lambda: f64, k_const: f64 },
}

impl SpineFunctional {
    /// Tree depth needed to evaluate the functional at time `n`.
    pub fn depth(&self, n: usize) -> usize {
        match self {
            SpineFunctional::EventA { .. } => 2 * n,
            _ => n,
        }
    }

    pub fn evaluate(&self, real: &SpineRealization, n: usize) -> Result<f64, SpineError> {
        let rn = sqrt(n as f64);
        Ok(match *self {
            SpineFunctional::One => 1.0,
            SpineFunctional::WAlpha => rn * real.w_alpha,
            SpineFunctional::WRatio => rn * real.w_alpha / real.d_alpha,
            SpineFunctional::EventA { lambda, k_const } => {
                let spec = EventWindowSpec::new(n, lambda, k_const)
                    .map_err(|e| SpineError::InvalidArgument(alloc::format!("{e}")))?;
                let out = detect_events(&real.tree, &spec).map_err(|e| SpineError::InvalidArgument(alloc::format!("{e}")))?;
                if out.occurred {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }
}

/// One importance-sampling replica: `(f(tree), D_0/D_n)`; `None` when the
/// weight is zero or not finite.
pub fn importance_replica<R: RngCore + ?Sized>(
    sampler: &SpineSampler<'_>,
    functional: SpineFunctional,
    n: usize,
    rng: &mut R,
) -> Result<Option<(f64, f64)>, SpineError> {
    let real = sampler.sample(functional.depth(n), rng)?;
    let w = real.weight;
    if !(w > 0.0 && w.is_finite()) {
        return Ok(None);
    }
    let f = functional.evaluate(&real, n)?;
    Ok(Some((f, 1.0 / w)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportanceEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub accepted: u64,
    pub rejected: u64,
}

/// Mergeable accumulator of `f · D_0/D_n`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImportanceAccumulator {
    pub values: MeanVar,
    pub rejected: u64,
}

impl ImportanceAccumulator {
    pub fn push(&mut self, sample: Option<(f64, f64)>) {
        match sample {
            Some((f, w)) => self.values.push(f * w),
            None => self.rejected += 1,
        }
    }

    pub fn merge(&mut self, other: &ImportanceAccumulator) {
        self.values.merge(&other.values);
        self.rejected += other.rejected;
    }

    pub fn finish(&self) -> ImportanceEstimate {
        ImportanceEstimate {
            estimate: self.values.mean(),
            stderr: self.values.stderr(),
            accepted: self.values.count(),
            rejected: self.rejected,
        }
    }
}

/// `E_P[f] = E_Q[f · D_0/D_n]` over replicas `first..first + replicas` of the
/// stream family `master_seed`.
pub fn importance_estimate(
    sampler: &SpineSampler<'_>,
    functional: SpineFunctional,
    n: usize,
    replicas: core::ops::Range<u64>,
    master_seed: u64,
) -> Result<ImportanceEstimate, SpineError> {
    let mut acc = ImportanceAccumulator::default();
    for r in replicas {
        let mut rng = replica_rng(master_seed, r);
        acc.push(importance_replica(sampler, functional, n, &mut rng)?);
    }
    Ok(acc.finish())
}

/// Sample moments of `√n W_n^{(α)} / D_n^{(α)}` under `Q^{(α)}`, mergeable.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RatioMoments {
    count: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl RatioMoments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let t1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += t1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += t1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += t1;
    }

    pub fn merge(&mut self, o: &RatioMoments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3 + o.m3 + d * d2 * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.count += o.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn mean_stderr(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            sqrt(self.variance() / self.count as f64)
        }
    }

    /// Large-sample standard error of the variance, `√((μ₄ − σ⁴)/N)`.
    pub fn variance_stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let mu4 = self.m4 / n;
        let s2 = self.m2 / n;
        sqrt(((mu4 - s2 * s2) / n).max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub n: usize,
    pub variance: f64,
    pub stderr: f64,
    pub mean: f64,
    pub mean_stderr: f64,
    /// `h_α(n) = √n P_α(min S_n ≥ 0) / R(α)`, the exact `Q`-mean.
    pub h_alpha: f64,
    /// `n^{−δ} + sup_{k^{1/3} ≤ x ≤ k} |h_{x+α}(n−k)/h_α(n) − 1|`, `k = ⌊n^{1/3}⌋`.
    pub surrogate: f64,
    pub rejected: u64,
}

/// Right side of the variance bound with unit constant.
pub fn variance_surrogate(step: &StepLaw, renewal: &RenewalTable, alpha: f64, n: usize, delta: f64) -> Result<f64, SpineError> {
    let h_alpha = h_function(step, renewal, alpha, n)?;
    let k = floor(pow(n as f64, 1.0 / 3.0) + 1e-9) as usize;
    let lo = pow(k as f64, 1.0 / 3.0);
    let mut sup: f64 = 0.0;
    if k >= 1 && n > k {
        let span = step.lattice_span().ok_or(WalkError::NonLattice)?;
        let mut m = libm::ceil(lo / span - 1e-9) as i64;
        while (m as f64) * span <= k as f64 + 1e-9 {
            let x = m as f64 * span;
            let hx = h_function(step, renewal, x + alpha, n - k)?;
            sup = sup.max((hx / h_alpha - 1.0).abs());
            m += 1;
        }
    }
    Ok(pow(n as f64, -delta) + sup)
}

/// Exponent used in the variance surrogate.
pub const SURROGATE_DELTA: f64 = 0.5;

/// Empirical `Var_Q(√n W_n^{(α)}/D_n^{(α)})` over replicas, with the exact mean
/// `h_α(n)` and the surrogate bound.
pub fn variance_functional(
    sampler: &SpineSampler<'_>,
    step: &StepLaw,
    n: usize,
    replicas: core::ops::Range<u64>,
    master_seed: u64,
) -> Result<VarianceReport, SpineError> {
    let mut m = RatioMoments::default();
    let mut rejected = 0;
    for r in replicas {
        let mut rng = replica_rng(master_seed, r);
        match ratio_replica(sampler, n, &mut rng)? {
            Some(x) => m.push(x),
            None => rejected += 1,
        }
    }
    variance_report(sampler, step, n, &m, rejected)
}

/// One replica of `√n W_n^{(α)}/D_n^{(α)}` under `Q^{(α)}`.
pub fn ratio_replica<R: RngCore + ?Sized>(sampler: &SpineSampler<'_>, n: usize, rng: &mut R) -> Result<Option<f64>, SpineError> {
    let real = sampler.sample(n, rng)?;
    let x = sqrt(n as f64) * real.w_alpha / real.d_alpha;
    Ok(if x.is_finite() && real.d_alpha > 0.0 { Some(x) } else { None })
}

pub fn variance_report(
    sampler: &SpineSampler<'_>,
    step: &StepLaw,
    n: usize,
    m: &RatioMoments,
    rejected: u64,
) -> Result<VarianceReport, SpineError> {
    let alpha = sampler.alpha();
    let renewal = sampler.renewal();
    let h_alpha = sqrt(n as f64) * survival_prob(step, alpha, n, 0.0)? / renewal.eval(alpha);
    Ok(VarianceReport {
        n,
        variance: m.variance(),
        stderr: m.variance_stderr(),
        mean: m.mean(),
        mean_stderr: m.mean_stderr(),
        h_alpha,
        surrogate: variance_surrogate(step, renewal, alpha, n, SURROGATE_DELTA)?,
        rejected,
    })
}
