//! Forward simulation of the branching random walk under `P`.
//!
//! [`simulate`] walks the tree depth-first with an explicit stack and keeps
//! only per-depth accumulators, so memory is bounded by the stack. [`grow_tree`]
//! keeps every particle (with sibling structure) for event detection.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::num::{exp, log, pow, sqrt, KahanSum};
use crate::offspring::OffspringLaw;
use crate::walk::RenewalTable;

/// Default particle cap per replica.
pub const DEFAULT_CAP: usize = 10_000_000;
/// Default window constant of the event `A(n, λ)`.
pub const DEFAULT_K: f64 = 10.0;
/// Deepest tree event detection keeps by default.
pub const DEFAULT_EVENT_DEPTH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum EngineError {
    InvalidArgument(String),
    /// The pruning policy would drop the root.
    RootPruned,
    /// A full tree exceeded the particle cap.
    TreeTooLarge { depth: usize, particles: usize, cap: usize },
    /// Event detection needs a complete tree to depth `2n`.
    IncompleteTree { needed: usize, available: usize, pruned: bool },
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            EngineError::RootPruned => write!(f, "pruning policy removes the root particle"),
            EngineError::TreeTooLarge { depth, particles, cap } => {
                write!(f, "tree reached {particles} particles at depth {depth}, above the cap {cap}")
            }
            EngineError::IncompleteTree { needed, available, pruned } => {
                if *pruned {
                    write!(f, "event detection refuses pruned trees (sibling sets are incomplete)")
                } else {
                    write!(f, "event detection needs depth {needed}, tree has depth {available}")
                }
            }
        }
    }
}

impl core::error::Error for EngineError {}

/// Drop particles with `V(u) > upper_level` or `e^{−V(u)} < weight_floor`, and
/// stop a replica after `cap` particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrunePolicy {
    pub upper_level: f64,
    pub weight_floor: f64,
    pub cap: usize,
}

impl Default for PrunePolicy {
    fn default() -> Self {
        Self { upper_level: f64::INFINITY, weight_floor: 0.0, cap: DEFAULT_CAP }
    }
}

impl PrunePolicy {
    /// Position above which particles are dropped.
    pub fn effective_level(&self) -> f64 {
        let from_floor = if self.weight_floor > 0.0 { -log(self.weight_floor) } else { f64::INFINITY };
        self.upper_level.min(from_floor)
    }

    pub fn is_pruning(&self) -> bool {
        self.effective_level() < f64::INFINITY
    }

    #[inline]
    fn drops(&self, v: f64) -> bool {
        v > self.upper_level || exp(-v) < self.weight_floor
    }

    /// A priori bound on `E[W_k] − E[W_k(pruned)]`. The lost mass is
    /// `P(max_{j≤k} S_j > L)`, at most `σ²k/L²` (Kolmogorov) and, for walks
    /// with steps in an interval of width `r`, at most `exp(−2L²/(k r²))`
    /// (Hoeffding via Doob).
    pub fn bias_bound(&self, sigma2: f64, step_range: Option<f64>, k: usize) -> f64 {
        let level = self.effective_level();
        if level == f64::INFINITY || k == 0 {
            return 0.0;
        }
        if level <= 0.0 {
            return 1.0;
        }
        let kf = k as f64;
        let mut b = sigma2 * kf / (level * level);
        if let Some(r) = step_range.filter(|r| *r > 0.0 && r.is_finite()) {
            b = b.min(exp(-2.0 * level * level / (kf * r * r)));
        }
        b.min(1.0)
    }
}

/// Smallest prune level whose a priori bias bound at depth `k` is `target`.
pub fn level_for_bias(sigma2: f64, step_range: Option<f64>, k: usize, target: f64) -> f64 {
    let kf = k as f64;
    let mut level = sqrt(sigma2 * kf / target);
    if let Some(r) = step_range.filter(|r| *r > 0.0 && r.is_finite()) {
        level = level.min(r * sqrt(kf * log(1.0 / target) / 2.0));
    }
    level
}

pub fn prune_policy(upper_level: f64, weight_floor: f64, cap: usize) -> Result<PrunePolicy, EngineError> {
    if cap == 0 {
        return Err(EngineError::RootPruned);
    }
    if upper_level.is_nan() || weight_floor.is_nan() || weight_floor < 0.0 {
        return Err(EngineError::InvalidArgument("prune levels must be numbers, floor ≥ 0".into()));
    }
    if upper_level < 0.0 || weight_floor > 1.0 {
        return Err(EngineError::RootPruned);
    }
    Ok(PrunePolicy { upper_level, weight_floor, cap })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub alpha: f64,
    pub prune: PrunePolicy,
    /// `σ²` of the many-to-one walk, used for the a priori pruning bound.
    pub sigma2: f64,
    /// Width of the walk's step support, when bounded.
    pub step_range: Option<f64>,
}

impl SimConfig {
    pub fn new(n: usize, alpha: f64) -> Self {
        Self { n, alpha, prune: PrunePolicy::default(), sigma2: 0.0, step_range: None }
    }
}

/// Statistics of one generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRecord {
    pub k: usize,
    /// `M_k`; `None` encodes `+∞` (no particle).
    pub min: Option<f64>,
    pub w: f64,
    pub d: f64,
    pub w_alpha: f64,
    /// `D_k^{(α)}`; `NaN` when no renewal table was supplied.
    pub d_alpha: f64,
    pub z: u64,
    /// No particle at depth `k` and nothing was pruned on the way.
    pub extinct: bool,
    /// A priori bound on the expected pruning loss of `W_k`.
    pub pruned_bound: f64,
    /// `Σ e^{−V}` over particles pruned at depths `≤ k`; equals the conditional
    /// expectation of the `W_k` mass they would have carried.
    pub pruned_w: f64,
    /// Same for `D_k`: `Σ V e^{−V}` over pruned particles.
    pub pruned_d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    pub records: Vec<DepthRecord>,
    pub alpha: f64,
    pub seed: u64,
    /// The particle cap stopped the replica early.
    pub truncated: bool,
}

impl TrajectoryStats {
    pub fn last(&self) -> &DepthRecord {
        &self.records[self.records.len() - 1]
    }
}

#[derive(Clone, Copy)]
struct Acc {
    min: f64,
    w: KahanSum,
    d: KahanSum,
    wa: KahanSum,
    da: KahanSum,
    z: u64,
    pruned_w: KahanSum,
    pruned_d: KahanSum,
    pruned_any: bool,
}

impl Acc {
    fn new() -> Self {
        Self {
            min: f64::INFINITY,
            w: KahanSum::new(),
            d: KahanSum::new(),
            wa: KahanSum::new(),
            da: KahanSum::new(),
            z: 0,
            pruned_w: KahanSum::new(),
            pruned_d: KahanSum::new(),
            pruned_any: false,
        }
    }
}

fn validate_common(law: &OffspringLaw, n: usize, alpha: f64) -> Result<(), EngineError> {
    if n == 0 {
        return Err(EngineError::InvalidArgument("n must be ≥ 1".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(EngineError::InvalidArgument("alpha must be finite and ≥ 0".into()));
    }
    if law.atoms().is_empty() {
        return Err(EngineError::InvalidArgument("empty law".into()));
    }
    Ok(())
}

/// Simulate one replica to depth `cfg.n`.
///
/// Children are generated depth-first in atom order, so the draw sequence and
/// hence the result depend only on the stream.
pub fn simulate<R: RngCore + ?Sized>(
    law: &OffspringLaw,
    cfg: &SimConfig,
    renewal: Option<&RenewalTable>,
    seed: u64,
    rng: &mut R,
) -> Result<TrajectoryStats, EngineError> {
    validate_common(law, cfg.n, cfg.alpha)?;
    if cfg.prune.cap == 0 || cfg.prune.drops(0.0) {
        return Err(EngineError::RootPruned);
    }
    let n = cfg.n;
    let alpha = cfg.alpha;
    let mut acc = vec![Acc::new(); n + 1];
    let mut produced: usize = 1;
    let mut truncated = false;
    // (position, depth, path minimum)
    let mut stack: Vec<(f64, usize, f64)> = vec![(0.0, 0, 0.0)];
    while let Some((v, depth, pmin)) = stack.pop() {
        let a = &mut acc[depth];
        let weight = exp(-v);
        a.z += 1;
        a.min = a.min.min(v);
        a.w.add(weight);
        a.d.add(v * weight);
        if pmin >= -alpha {
            a.wa.add(weight);
            if let Some(r) = renewal {
                a.da.add(r.eval_alpha(alpha, v) * weight);
            }
        }
        if depth == n {
            continue;
        }
        let children = law.sample(rng);
        // push in reverse so children are visited in atom order
        for &c in children.iter().rev() {
            let y = v + c;
            if cfg.prune.drops(y) {
                let p = &mut acc[depth + 1];
                p.pruned_any = true;
                p.pruned_w.add(exp(-y));
                p.pruned_d.add(y * exp(-y));
                continue;
            }
            if produced >= cfg.prune.cap {
                truncated = true;
                continue;
            }
            produced += 1;
            stack.push((y, depth + 1, pmin.min(y)));
        }
        if truncated {
            break;
        }
    }
    let mut records = Vec::with_capacity(n + 1);
    let mut pruned_w = 0.0;
    let mut pruned_d = 0.0;
    let mut pruned_seen = false;
    for (k, a) in acc.iter().enumerate() {
        pruned_w += a.pruned_w.value();
        pruned_d += a.pruned_d.value();
        pruned_seen |= a.pruned_any;
        records.push(DepthRecord {
            k,
            min: if a.z > 0 { Some(a.min) } else { None },
            w: a.w.value(),
            d: a.d.value(),
            w_alpha: a.wa.value(),
            d_alpha: if renewal.is_some() { a.da.value() } else { f64::NAN },
            z: a.z,
            extinct: a.z == 0 && !pruned_seen && !truncated,
            pruned_bound: cfg.prune.bias_bound(cfg.sigma2, cfg.step_range, k),
            pruned_w,
            pruned_d,
        });
    }
    Ok(TrajectoryStats { records, alpha, seed, truncated })
}

/// A complete tree stored generation by generation. Children of one parent are
/// contiguous, so the brothers of a node are its parent's other children.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    levels: Vec<Level>,
    pruned: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Level {
    positions: Vec<f64>,
    parent: Vec<u32>,
    /// `children_start[i]..children_start[i + 1]` indexes the next level.
    children_start: Vec<u32>,
}

/// Particle cloud at one depth, with path minima.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub depth: usize,
    pub positions: Vec<f64>,
    pub min_prefix: Vec<f64>,
    pub pruned_weight_bound: f64,
}

impl Tree {
    /// Build from explicit generations: `levels[k]` lists `(parent index,
    /// position)` of every depth-`k + 1` particle, parents nondecreasing.
    pub fn from_generations(levels: &[Vec<(usize, f64)>]) -> Result<Self, EngineError> {
        let mut out = Tree::root();
        for gen in levels {
            let parents = out.levels[out.levels.len() - 1].positions.len();
            if gen.windows(2).any(|w| w[1].0 < w[0].0) || gen.iter().any(|c| c.0 >= parents) {
                return Err(EngineError::InvalidArgument("children must be grouped by a valid parent".into()));
            }
            let last = out.levels.len() - 1;
            let mut starts = vec![0u32; parents + 1];
            for c in gen {
                starts[c.0 + 1] += 1;
            }
            for i in 0..parents {
                starts[i + 1] += starts[i];
            }
            out.levels[last].children_start = starts;
            out.levels.push(Level {
                positions: gen.iter().map(|c| c.1).collect(),
                parent: gen.iter().map(|c| c.0 as u32).collect(),
                children_start: Vec::new(),
            });
        }
        Ok(out)
    }

    fn root() -> Self {
        Tree { levels: vec![Level { positions: vec![0.0], parent: vec![0], children_start: Vec::new() }], pruned: false }
    }

    /// Deepest generation stored (the last one may be empty).
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }

    pub fn size(&self) -> usize {
        self.levels.iter().map(|l| l.positions.len()).sum()
    }

    pub fn positions(&self, depth: usize) -> &[f64] {
        &self.levels[depth].positions
    }

    pub fn parent(&self, depth: usize, idx: usize) -> usize {
        self.levels[depth].parent[idx] as usize
    }

    /// Index range of the children of node `idx` at `depth`.
    pub fn children(&self, depth: usize, idx: usize) -> core::ops::Range<usize> {
        let s = &self.levels[depth].children_start;
        if s.is_empty() {
            return 0..0;
        }
        s[idx] as usize..s[idx + 1] as usize
    }

    /// Index range of the node and its brothers.
    pub fn sibling_range(&self, depth: usize, idx: usize) -> core::ops::Range<usize> {
        if depth == 0 {
            return 0..1;
        }
        self.children(depth - 1, self.parent(depth, idx))
    }

    /// Ancestral positions `V(u_0), …, V(u_depth)` of node `idx`.
    pub fn path(&self, depth: usize, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; depth + 1];
        let mut i = idx;
        for d in (0..=depth).rev() {
            out[d] = self.levels[d].positions[i];
            if d > 0 {
                i = self.parent(d, i);
            }
        }
        out
    }

    pub fn generation(&self, depth: usize) -> Generation {
        let mut mins: Vec<f64> = vec![0.0];
        for d in 1..=depth {
            let lvl = &self.levels[d];
            mins = lvl
                .positions
                .iter()
                .zip(&lvl.parent)
                .map(|(&v, &p)| v.min(mins[p as usize]))
                .collect();
        }
        Generation { depth, positions: self.levels[depth].positions.clone(), min_prefix: mins, pruned_weight_bound: 0.0 }
    }

    /// Per-depth statistics of the stored tree.
    pub fn stats(&self, alpha: f64, renewal: Option<&RenewalTable>, seed: u64) -> TrajectoryStats {
        let mut records = Vec::with_capacity(self.levels.len());
        let mut mins: Vec<f64> = vec![0.0];
        for (k, lvl) in self.levels.iter().enumerate() {
            if k > 0 {
                mins = lvl
                    .positions
                    .iter()
                    .zip(&lvl.parent)
                    .map(|(&v, &p)| v.min(mins[p as usize]))
                    .collect();
            }
            let mut a = Acc::new();
            for (&v, &m) in lvl.positions.iter().zip(&mins) {
                let weight = exp(-v);
                a.z += 1;
                a.min = a.min.min(v);
                a.w.add(weight);
                a.d.add(v * weight);
                if m >= -alpha {
                    a.wa.add(weight);
                    if let Some(r) = renewal {
                        a.da.add(r.eval_alpha(alpha, v) * weight);
                    }
                }
            }
            records.push(DepthRecord {
                k,
                min: if a.z > 0 { Some(a.min) } else { None },
                w: a.w.value(),
                d: a.d.value(),
                w_alpha: a.wa.value(),
                d_alpha: if renewal.is_some() { a.da.value() } else { f64::NAN },
                z: a.z,
                extinct: a.z == 0 && !self.pruned,
                pruned_bound: 0.0,
                pruned_w: 0.0,
                pruned_d: 0.0,
            });
        }
        TrajectoryStats { records, alpha, seed, truncated: false }
    }

    /// Append one generation; `children_of(depth, idx, position)` yields the
    /// displacements of each current node's children.
    pub(crate) fn push_generation<F>(&mut self, mut children_of: F)
    where
        F: FnMut(usize, f64, &mut Vec<f64>),
    {
        let last = self.levels.len() - 1;
        let mut next = Level::default();
        let mut starts = Vec::with_capacity(self.levels[last].positions.len() + 1);
        starts.push(0u32);
        let mut buf = Vec::new();
        for (i, &v) in self.levels[last].positions.iter().enumerate() {
            buf.clear();
            children_of(i, v, &mut buf);
            for &c in &buf {
                next.positions.push(v + c);
                next.parent.push(i as u32);
            }
            starts.push(next.positions.len() as u32);
        }
        self.levels[last].children_start = starts;
        self.levels.push(next);
    }
}

/// Grow a complete tree to `depth`, failing once it holds more than `cap`
/// particles.
pub fn grow_tree<R: RngCore + ?Sized>(
    law: &OffspringLaw,
    depth: usize,
    cap: usize,
    rng: &mut R,
) -> Result<Tree, EngineError> {
    let mut tree = Tree::root();
    let mut total = 1usize;
    for d in 0..depth {
        tree.push_generation(|_, _, buf| buf.extend_from_slice(law.sample(rng)));
        total += tree.levels[d + 1].positions.len();
        if total > cap {
            return Err(EngineError::TreeTooLarge { depth: d + 1, particles: total, cap });
        }
    }
    Ok(tree)
}

/// Window data of the event `A(n, λ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventWindowSpec {
    pub n: usize,
    pub lambda: f64,
    pub k_const: f64,
}

impl EventWindowSpec {
    pub fn new(n: usize, lambda: f64, k_const: f64) -> Result<Self, EngineError> {
        if n < 2 {
            return Err(EngineError::InvalidArgument("event windows need n ≥ 2".into()));
        }
        if !(k_const > 0.0 && k_const.is_finite()) || !lambda.is_finite() {
            return Err(EngineError::InvalidArgument("K must be positive and λ finite".into()));
        }
        Ok(Self { n, lambda, k_const })
    }

    /// `0 ≤ λ ≤ (1/3) log n`.
    pub fn in_validity_range(&self) -> bool {
        self.lambda >= 0.0 && self.lambda <= log(self.n as f64) / 3.0
    }

    /// `s = ½ log n − λ`.
    pub fn s(&self) -> f64 {
        0.5 * log(self.n as f64) - self.lambda
    }

    /// `a_i = s·1{n/2 < i ≤ 2n}`.
    pub fn a(&self, i: usize) -> f64 {
        if 2 * i > self.n && i <= 2 * self.n {
            self.s()
        } else {
            0.0
        }
    }

    /// `b_i^{(k,n)} = i^{1/12}` for `i ≤ n/2`, `(k − i)^{1/12}` for `n/2 < i ≤ k`.
    pub fn b(&self, i: usize, k: usize) -> f64 {
        if 2 * i <= self.n {
            pow(i as f64, 1.0 / 12.0)
        } else {
            pow((k - i) as f64, 1.0 / 12.0)
        }
    }

    /// `K e^{−b_i^{(k,n)}}`.
    pub fn f_bound(&self, i: usize, k: usize) -> f64 {
        self.k_const * exp(-self.b(i, k))
    }

    /// `s ≤ v ≤ s + K`.
    pub fn in_window(&self, v: f64) -> bool {
        let s = self.s();
        s <= v && v <= s + self.k_const
    }

    /// Brother mass `(1 + (V(v) − a)_+) e^{−(V(v) − a)}` of one brother.
    #[inline]
    pub fn brother_term(v: f64, a: f64) -> f64 {
        let d = v - a;
        (1.0 + d.max(0.0)) * exp(-d)
    }

    /// Largest `k ∈ (i, 2n]` such that the brother sum at level `i` passes for
    /// every `k' ≤ k`, found with the same comparisons as the definition.
    fn kmax_at(&self, i: usize, sum: f64) -> usize {
        let top = 2 * self.n;
        let mut kmax = i;
        for k in i + 1..=top {
            if sum <= self.f_bound(i, k) {
                kmax = k;
            } else if 2 * i > self.n {
                break; // the bound decreases in k
            }
        }
        kmax
    }
}

/// Outcome of [`detect_events`]; witnesses are `(k, node index at depth k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventOutcome {
    pub occurred: bool,
    pub witnesses: Vec<(usize, usize)>,
}

/// Decide `A(n, λ)` on a complete tree and list every witness `u ∈ E_k ∩ F_k`,
/// `n < k ≤ 2n`.
///
/// The search descends only along prefixes that still satisfy the barrier and
/// brother conditions; the brother condition at level `i > n/2` tightens with
/// `k`, so each prefix carries the largest `k` it still allows.
pub fn detect_events(tree: &Tree, spec: &EventWindowSpec) -> Result<EventOutcome, EngineError> {
    let top = 2 * spec.n;
    if tree.is_pruned() || tree.depth() < top {
        return Err(EngineError::IncompleteTree { needed: top, available: tree.depth(), pruned: tree.is_pruned() });
    }
    let mut witnesses = Vec::new();
    // (depth, index, kmax)
    let mut stack: Vec<(usize, usize, usize)> = vec![(0, 0, top)];
    while let Some((i, idx, kmax)) = stack.pop() {
        let v = tree.positions(i)[idx];
        if i > spec.n && i <= kmax && spec.in_window(v) {
            witnesses.push((i, idx));
        }
        if i >= kmax || i == top {
            continue;
        }
        let kids = tree.children(i, idx);
        let a_i = spec.a(i);
        let a_next = spec.a(i + 1);
        let positions = tree.positions(i + 1);
        for c in kids.clone() {
            let y = positions[c];
            if y < a_next {
                continue;
            }
            let mut sum = 0.0;
            for b in kids.clone() {
                if b != c {
                    sum += EventWindowSpec::brother_term(positions[b], a_i);
                }
            }
            let km = kmax.min(spec.kmax_at(i, sum));
            if km <= i || km <= spec.n {
                continue;
            }
            stack.push((i + 1, c, km));
        }
    }
    witnesses.sort_unstable();
    Ok(EventOutcome { occurred: !witnesses.is_empty(), witnesses })
}

/// Decide `A(n, λ)` for several `λ` on one tree.
pub fn detect_events_multi(tree: &Tree, specs: &[EventWindowSpec]) -> Result<Vec<bool>, EngineError> {
    specs.iter().map(|s| detect_events(tree, s).map(|o| o.occurred)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::Atom;
    use crate::rng::replica_rng;
    use crate::stats::MeanVar;
    use crate::walk::{derive_step_law, renewal_function};

    fn ssrw() -> OffspringLaw {
        OffspringLaw::builtin("ssrw-coupled").unwrap()
    }

    #[test]
    fn empty_law_goes_extinct() {
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![])]).unwrap();
        let mut rng = replica_rng(1, 0);
        let t = simulate(&law, &SimConfig::new(3, 0.0), None, 1, &mut rng).unwrap();
        let r1 = t.records[1];
        assert!(r1.extinct);
        assert_eq!(r1.w, 0.0);
        assert_eq!(r1.min, None);
        assert_eq!(t.records[0].w, 1.0);
    }

    #[test]
    fn w2_has_mean_one() {
        let law = ssrw();
        let cfg = SimConfig::new(2, 0.0);
        let mv: MeanVar = (0..100_000u64)
            .map(|r| simulate(&law, &cfg, None, 3, &mut replica_rng(3, r)).unwrap().last().w)
            .collect();
        assert!((mv.mean() - 1.0).abs() < 4.0 * mv.stderr(), "{} ± {}", mv.mean(), mv.stderr());
    }

    #[test]
    fn truncated_mean_matches_walk() {
        // E[W_2^(0)] = P(S_1 ≥ 0, S_2 ≥ 0) = 1/2
        let law = ssrw();
        let cfg = SimConfig::new(2, 0.0);
        let mv: MeanVar = (0..100_000u64)
            .map(|r| simulate(&law, &cfg, None, 4, &mut replica_rng(4, r)).unwrap().last().w_alpha)
            .collect();
        assert!((mv.mean() - 0.5).abs() < 4.0 * mv.stderr());
    }

    #[test]
    fn pointwise_invariants() {
        let law = ssrw();
        let step = derive_step_law(&law).unwrap();
        let grid: Vec<f64> = (0..=40).map(|x| x as f64).collect();
        let table = renewal_function(&step, &grid, 1_000_000).unwrap();
        for r in 0..200u64 {
            let t = simulate(&law, &SimConfig::new(8, 1.0), Some(&table), 9, &mut replica_rng(9, r)).unwrap();
            let overall_min = t.records.iter().filter_map(|x| x.min).fold(0.0f64, f64::min);
            for rec in &t.records {
                if let Some(m) = rec.min {
                    assert!(exp(-m) <= rec.w);
                }
                assert!(rec.w_alpha <= rec.w + 1e-12);
                assert!(rec.d_alpha >= 0.0);
                if overall_min >= -1.0 {
                    assert_eq!(rec.w_alpha, rec.w);
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let law = ssrw();
        let a = simulate(&law, &SimConfig::new(6, 0.0), None, 5, &mut replica_rng(5, 2)).unwrap();
        let b = simulate(&law, &SimConfig::new(6, 0.0), None, 5, &mut replica_rng(5, 2)).unwrap();
        assert_eq!(alloc::format!("{a:?}"), alloc::format!("{b:?}"));
    }

    #[test]
    fn prune_policy_errors() {
        assert!(prune_policy(f64::INFINITY, 0.0, 10).is_ok());
        assert_eq!(prune_policy(1.0, 0.0, 0), Err(EngineError::RootPruned));
        assert_eq!(prune_policy(-0.5, 0.0, 10), Err(EngineError::RootPruned));
        assert_eq!(prune_policy(5.0, 1.5, 10), Err(EngineError::RootPruned));
    }

    #[test]
    fn prune_bias_bound() {
        let p = prune_policy(20.0, 0.0, DEFAULT_CAP).unwrap();
        assert!((p.bias_bound(1.0, None, 10) - 0.025).abs() < 1e-15);
        assert_eq!(PrunePolicy::default().bias_bound(1.0, None, 10), 0.0);
        // ±1 steps: Hoeffding beats Chebyshev far out
        let far = prune_policy(30.0, 0.0, DEFAULT_CAP).unwrap();
        assert!((far.bias_bound(1.0, Some(2.0), 64) - exp(-2.0 * 900.0 / 256.0)).abs() < 1e-15);
        let l = level_for_bias(1.0, Some(2.0), 64, 0.01);
        let at = prune_policy(l, 0.0, DEFAULT_CAP).unwrap();
        assert!((at.bias_bound(1.0, Some(2.0), 64) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn pruning_loss_is_tracked() {
        let law = ssrw();
        let full = SimConfig::new(10, 0.0);
        let mut pruned = full;
        pruned.prune = prune_policy(3.0, 0.0, DEFAULT_CAP).unwrap();
        pruned.sigma2 = 1.0;
        let mut gap = MeanVar::new();
        for r in 0..3000u64 {
            let a = simulate(&law, &full, None, 0, &mut replica_rng(6, r)).unwrap();
            let b = simulate(&law, &pruned, None, 0, &mut replica_rng(6, r)).unwrap();
            let rb = b.last();
            assert!(rb.w <= a.last().w + 1e-12 || rb.pruned_w > 0.0);
            gap.push(1.0 - rb.w - rb.pruned_w);
        }
        // E[W_n] = 1 = E[W_n(pruned)] + E[pruned mass]
        assert!(gap.mean().abs() < 4.0 * gap.stderr() + 1e-12);
    }

    #[test]
    fn window_schedules() {
        let s = EventWindowSpec::new(4, 0.0, 10.0).unwrap();
        assert_eq!(s.a(2), 0.0);
        assert_eq!(s.a(3), 0.5 * log(4.0));
        assert_eq!(s.a(8), 0.5 * log(4.0));
        assert_eq!(s.b(0, 6), 0.0);
        assert_eq!(s.b(2, 6), pow(2.0, 1.0 / 12.0));
        assert_eq!(s.b(3, 6), pow(3.0, 1.0 / 12.0));
        assert_eq!(s.b(5, 6), 1.0);
        assert!(s.in_validity_range());
        assert!(!EventWindowSpec::new(4, 1.0, 10.0).unwrap().in_validity_range());
    }

    #[test]
    fn single_line_of_descent() {
        // one child per generation: brother sets are empty, only the window matters
        let gens: Vec<Vec<(usize, f64)>> = (1..=8).map(|k| vec![(0, k as f64 * 0.3)]).collect();
        let tree = Tree::from_generations(&gens).unwrap();
        let spec = EventWindowSpec::new(4, 0.0, 10.0).unwrap();
        let out = detect_events(&tree, &spec).unwrap();
        assert!(out.occurred);
        assert_eq!(out.witnesses, vec![(5, 0), (6, 0), (7, 0), (8, 0)]);
        let narrow = EventWindowSpec::new(4, 0.0, 0.2).unwrap();
        assert!(!detect_events(&tree, &narrow).unwrap().occurred);
    }

    #[test]
    fn detection_refuses_shallow_or_pruned() {
        let mut rng = replica_rng(2, 0);
        let tree = grow_tree(&ssrw(), 5, 1000, &mut rng).unwrap();
        let spec = EventWindowSpec::new(4, 0.0, 10.0).unwrap();
        assert!(matches!(detect_events(&tree, &spec), Err(EngineError::IncompleteTree { .. })));
    }

    #[test]
    fn tree_stats_match_generation_view() {
        let mut rng = replica_rng(8, 1);
        let tree = grow_tree(&ssrw(), 6, 100_000, &mut rng).unwrap();
        let st = tree.stats(0.0, None, 0);
        for k in 0..=6 {
            let g = tree.generation(k);
            assert_eq!(g.positions.len() as u64, st.records[k].z);
            for (p, m) in g.positions.iter().zip(&g.min_prefix) {
                assert!(m <= p);
            }
        }
    }
}
