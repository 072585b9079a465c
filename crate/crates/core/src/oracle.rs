//! Exhaustive enumeration for small laws. Everything here is exact up to
//! compensated floating-point summation and serves as ground truth for the
//! sampling code.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{EventWindowSpec, Tree};
use crate::num::{exp, lattice_index, pow, sqrt, KahanSum};
use crate::offspring::OffspringLaw;
use crate::walk::{RenewalTable, StepLaw};

pub const DEFAULT_MAX_TREES: u64 = 10_000_000;

/// Limits on exhaustive enumeration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumerationBudget {
    pub max_depth: usize,
    /// Largest number of outcomes (lineages, paths or states) enumerated.
    pub max_trees: u64,
    /// Largest brood size accepted.
    pub law_arity_bound: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_depth: 16, max_trees: DEFAULT_MAX_TREES, law_arity_bound: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OracleError {
    /// The enumeration would need `count` outcomes (or more), above `max`.
    BudgetExceeded { count: u64, max: u64 },
    NonLattice,
    InvalidArgument(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::BudgetExceeded { count, max } => {
                write!(f, "enumeration needs {count} outcomes, budget is {max}")
            }
            OracleError::NonLattice => write!(f, "oracle needs a lattice law"),
            OracleError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for OracleError {}

fn check_budget(count: f64, budget: &EnumerationBudget) -> Result<(), OracleError> {
    if count > budget.max_trees as f64 {
        let c = if count >= u64::MAX as f64 { u64::MAX } else { count as u64 };
        return Err(OracleError::BudgetExceeded { count: c, max: budget.max_trees });
    }
    Ok(())
}

fn check_law(law: &OffspringLaw, depth: usize, budget: &EnumerationBudget) -> Result<(), OracleError> {
    if depth > budget.max_depth {
        return Err(OracleError::InvalidArgument(alloc::format!(
            "depth {depth} above the budget's {}",
            budget.max_depth
        )));
    }
    if law.max_children() > budget.law_arity_bound {
        return Err(OracleError::InvalidArgument(alloc::format!(
            "brood size {} above the budget's {}",
            law.max_children(),
            budget.law_arity_bound
        )));
    }
    Ok(())
}

/// A function of the path `V(u_1), …, V(u_n)`.
pub type PathFn = Box<dyn Fn(&[f64]) -> f64>;

/// Named path functionals: constants, barrier indicators, coordinate
/// projections and a few products of them.
pub fn default_battery(n: usize) -> Vec<(String, PathFn)> {
    let mut out: Vec<(String, PathFn)> = vec![
        ("one".to_string(), Box::new(|_: &[f64]| 1.0)),
        ("const-2.5".to_string(), Box::new(|_: &[f64]| 2.5)),
    ];
    for level in [0.0, -1.0, -2.0] {
        out.push((
            alloc::format!("min>={level}"),
            Box::new(move |p: &[f64]| if p.iter().all(|&v| v >= level) { 1.0 } else { 0.0 }),
        ));
    }
    out.push(("max<=1".to_string(), Box::new(|p: &[f64]| if p.iter().all(|&v| v <= 1.0) { 1.0 } else { 0.0 })));
    for i in 0..n {
        out.push((alloc::format!("V{}", i + 1), Box::new(move |p: &[f64]| p[i])));
    }
    out.push(("endpoint^2".to_string(), Box::new(|p: &[f64]| p[p.len() - 1] * p[p.len() - 1])));
    out.push((
        "endpoint*1{min>=0}".to_string(),
        Box::new(|p: &[f64]| if p.iter().all(|&v| v >= 0.0) { p[p.len() - 1] } else { 0.0 }),
    ));
    out.push(("exp(endpoint/2)".to_string(), Box::new(|p: &[f64]| exp(p[p.len() - 1] / 2.0))));
    out
}

/// Both sides of the many-to-one identity:
/// `E[Σ_{|u|=n} e^{−V(u)} f(V(u_1..u_n))]` by enumerating every lineage
/// (a sequence of atom and child choices, weighted by the atom probabilities),
/// and `E[f(S_1..S_n)]` by enumerating every walk path.
pub fn exact_expectation(
    law: &OffspringLaw,
    step: &StepLaw,
    n: usize,
    f: &dyn Fn(&[f64]) -> f64,
    budget: &EnumerationBudget,
) -> Result<(f64, f64), OracleError> {
    if n == 0 {
        return Err(OracleError::InvalidArgument("n must be ≥ 1".into()));
    }
    check_law(law, n, budget)?;
    let lineages: f64 = law.atoms().iter().map(|a| a.children.len() as f64).sum();
    check_budget(pow(lineages, n as f64), budget)?;
    check_budget(pow(step.support().len() as f64, n as f64), budget)?;

    let mut tree_side = KahanSum::new();
    let mut path = vec![0.0; n];
    lineage_sum(law, 0, 0.0, 1.0, &mut path, f, &mut tree_side);

    let mut walk_side = KahanSum::new();
    walk_sum(step, 0, 0.0, 1.0, &mut path, f, &mut walk_side);
    Ok((tree_side.value(), walk_side.value()))
}

fn lineage_sum(
    law: &OffspringLaw,
    depth: usize,
    v: f64,
    prob: f64,
    path: &mut Vec<f64>,
    f: &dyn Fn(&[f64]) -> f64,
    acc: &mut KahanSum,
) {
    if depth == path.len() {
        acc.add(prob * exp(-v) * f(path));
        return;
    }
    for atom in law.atoms() {
        for &c in &atom.children {
            path[depth] = v + c;
            lineage_sum(law, depth + 1, v + c, prob * atom.prob, path, f, acc);
        }
    }
}

fn walk_sum(
    step: &StepLaw,
    depth: usize,
    s: f64,
    prob: f64,
    path: &mut Vec<f64>,
    f: &dyn Fn(&[f64]) -> f64,
    acc: &mut KahanSum,
) {
    if depth == path.len() {
        acc.add(prob * f(path));
        return;
    }
    for &(x, p) in step.support() {
        path[depth] = s + x;
        walk_sum(step, depth + 1, s + x, prob * p, path, f, acc);
    }
}

// ---------------------------------------------------------------------------
// Generation quotient: a generation is a multiset of (site, alive) pairs,
// where `alive` records that the ancestral path never went below −α.

type Site = (i64, bool);
type Multiset = Vec<(Site, u32)>;

struct LatticeLaw {
    span: f64,
    probs: Vec<f64>,
    /// Children of each atom in lattice units.
    children: Vec<Vec<i64>>,
}

impl LatticeLaw {
    fn new(law: &OffspringLaw) -> Result<Self, OracleError> {
        let span = law.lattice_span().ok_or(OracleError::NonLattice)?;
        Ok(Self {
            span,
            probs: law.atoms().iter().map(|a| a.prob).collect(),
            children: law
                .atoms()
                .iter()
                .map(|a| a.children.iter().map(|&c| lattice_index(c, span)).collect())
                .collect(),
        })
    }

    fn pos(&self, site: i64) -> f64 {
        site as f64 * self.span
    }

    fn alive(&self, site: i64, alpha: f64) -> bool {
        self.pos(site) >= -alpha - 1e-9 * self.span
    }
}

fn push_site(map: &mut BTreeMap<Site, u32>, site: Site, count: u32) {
    *map.entry(site).or_insert(0) += count;
}

/// Every way `count` identical particles can pick atoms, with its multinomial
/// probability: calls `visit(choice counts, prob)`.
fn compositions(probs: &[f64], count: u32, visit: &mut dyn FnMut(&[u32], f64)) {
    fn rec(probs: &[f64], i: usize, left: u32, prob: f64, choice: &mut Vec<u32>, visit: &mut dyn FnMut(&[u32], f64)) {
        if i + 1 == probs.len() {
            choice[i] = left;
            visit(choice, prob * pow(probs[i], left as f64));
            return;
        }
        let mut binom = 1.0;
        for k in 0..=left {
            if k > 0 {
                binom = binom * (left - k + 1) as f64 / k as f64;
            }
            choice[i] = k;
            rec(probs, i + 1, left - k, prob * binom * pow(probs[i], k as f64), choice, visit);
        }
    }
    let mut choice = vec![0u32; probs.len()];
    rec(probs, 0, count, 1.0, &mut choice, visit);
}

/// Distribution of the depth-`n` generation (as a multiset with alive flags).
fn generation_law(
    lat: &LatticeLaw,
    alpha: f64,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<BTreeMap<Multiset, f64>, OracleError> {
    let mut states: BTreeMap<Multiset, f64> = BTreeMap::new();
    states.insert(vec![((0, true), 1)], 1.0);
    for _ in 0..n {
        let mut next: BTreeMap<Multiset, KahanSum> = BTreeMap::new();
        for (ms, &p) in &states {
            expand(lat, alpha, ms, p, &mut |child: BTreeMap<Site, u32>, q| {
                let key: Multiset = child.into_iter().collect();
                next.entry(key).or_default().add(q);
            });
            check_budget(next.len() as f64, budget)?;
        }
        states = next.into_iter().map(|(k, v)| (k, v.value())).collect();
    }
    Ok(states)
}

/// All next generations of `ms`, weighted by `p`.
fn expand(lat: &LatticeLaw, alpha: f64, ms: &Multiset, p: f64, emit: &mut dyn FnMut(BTreeMap<Site, u32>, f64)) {
    fn rec(
        lat: &LatticeLaw,
        alpha: f64,
        ms: &Multiset,
        idx: usize,
        acc: BTreeMap<Site, u32>,
        p: f64,
        emit: &mut dyn FnMut(BTreeMap<Site, u32>, f64),
    ) {
        if idx == ms.len() {
            emit(acc, p);
            return;
        }
        let ((site, alive), count) = ms[idx];
        compositions(&lat.probs, count, &mut |choice, q| {
            if q == 0.0 {
                return;
            }
            let mut next = acc.clone();
            for (a, &k) in choice.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                for &c in &lat.children[a] {
                    let y = site + c;
                    push_site(&mut next, (y, alive && lat.alive(y, alpha)), k);
                }
            }
            rec(lat, alpha, ms, idx + 1, next, p * q, emit);
        });
    }
    rec(lat, alpha, ms, 0, BTreeMap::new(), p, emit);
}

/// `Σ_a p_a Σ_c R_α(x+c) e^{−c} 1{x+c ≥ −α}`: the one-step conditional mean
/// of the `D^{(α)}` contribution of a particle at `x`, divided by `e^{−x}`.
fn one_step_d(lat: &LatticeLaw, renewal: &RenewalTable, alpha: f64, site: i64) -> f64 {
    let mut acc = KahanSum::new();
    for (a, kids) in lat.children.iter().enumerate() {
        for &c in kids {
            let y = site + c;
            if lat.alive(y, alpha) {
                acc.add(lat.probs[a] * renewal.eval_alpha(alpha, lat.pos(y)) * exp(-lat.pos(c)));
            }
        }
    }
    acc.value()
}

/// `sup |E[D_n^{(α)} | F_{n−1}] − D_{n−1}^{(α)}|` over every depth-`(n−1)`
/// generation, with `R` from the law's own walk.
pub fn exact_martingale_gap(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    exact_martingale_gap_with_renewal(law, renewal, alpha, n, budget)
}

/// As [`exact_martingale_gap`] with an arbitrary table, so a perturbed law can
/// be tested against the unperturbed `R`.
pub fn exact_martingale_gap_with_renewal(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    if n == 0 {
        return Err(OracleError::InvalidArgument("n must be ≥ 1".into()));
    }
    check_law(law, n, budget)?;
    let lat = LatticeLaw::new(law)?;
    let states = generation_law(&lat, alpha, n - 1, budget)?;
    let mut sup: f64 = 0.0;
    for ms in states.keys() {
        let mut gap = KahanSum::new();
        for &((site, alive), count) in ms {
            if !alive {
                continue;
            }
            let x = lat.pos(site);
            let here = renewal.eval_alpha(alpha, x);
            let next = one_step_d(&lat, renewal, alpha, site);
            gap.add(count as f64 * exp(-x) * (next - here));
        }
        sup = sup.max(gap.value().abs());
    }
    Ok(sup)
}

/// Law of `V(ξ_n)`: `(1/R_α(0)) E[1{S_n = y} R_α(S_n) 1{min S ≥ −α}]` by walk
/// path enumeration.
pub fn exact_spine_marginal(
    step: &StepLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<(f64, f64)>, OracleError> {
    let span = step.lattice_span().ok_or(OracleError::NonLattice)?;
    check_budget(pow(step.support().len() as f64, n as f64), budget)?;
    let steps: Vec<(i64, f64)> = step.support().iter().map(|&(x, p)| (lattice_index(x, span), p)).collect();
    let r0 = renewal.eval(alpha);
    let mut out: BTreeMap<i64, KahanSum> = BTreeMap::new();
    fn rec(
        steps: &[(i64, f64)],
        span: f64,
        alpha: f64,
        left: usize,
        site: i64,
        prob: f64,
        out: &mut BTreeMap<i64, KahanSum>,
    ) {
        if left == 0 {
            out.entry(site).or_default().add(prob);
            return;
        }
        for &(j, p) in steps {
            let y = site + j;
            if (y as f64) * span >= -alpha - 1e-9 * span {
                rec(steps, span, alpha, left - 1, y, prob * p, out);
            }
        }
    }
    rec(&steps, span, alpha, n, 0, 1.0, &mut out);
    Ok(out
        .into_iter()
        .map(|(site, p)| {
            let y = site as f64 * span;
            (y, p.value() * renewal.eval_alpha(alpha, y) / r0)
        })
        .filter(|&(_, p)| p > 0.0)
        .collect())
}

/// A functional of one generation under the spine construction: the
/// off-spine multiset as `(position, alive, count)` triples and, on the `Q`
/// side, the spine position.
pub type GenerationFn<'a> = &'a dyn Fn(&[(f64, bool, u32)], Option<f64>) -> f64;

/// Both sides of the change of measure at depth `n`:
/// `E_P[f · D_n^{(α)}/D_0^{(α)}]` over every generation, and `E_Q[f]` over every
/// spine construction (spine brood tilt, spine pick, ordinary off-spine
/// broods). `f` sees the full generation (spine included) on both sides.
pub fn exact_measure_change(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    f: GenerationFn<'_>,
    budget: &EnumerationBudget,
) -> Result<(f64, f64), OracleError> {
    check_law(law, n, budget)?;
    let lat = LatticeLaw::new(law)?;
    let d0 = renewal.eval(alpha);
    let to_vec = |ms: &Multiset| -> Vec<(f64, bool, u32)> { ms.iter().map(|&((s, a), c)| (lat.pos(s), a, c)).collect() };

    let p_states = generation_law(&lat, alpha, n, budget)?;
    let mut p_side = KahanSum::new();
    for (ms, &p) in &p_states {
        let mut d = KahanSum::new();
        for &((site, alive), count) in ms {
            if alive {
                let x = lat.pos(site);
                d.add(count as f64 * renewal.eval_alpha(alpha, x) * exp(-x));
            }
        }
        p_side.add(p * f(&to_vec(ms), None) * d.value() / d0);
    }

    let q_states = spine_generation_law(&lat, renewal, alpha, n, budget)?;
    let mut q_side = KahanSum::new();
    for ((ms, spine), &p) in &q_states {
        let mut full: BTreeMap<Site, u32> = ms.iter().copied().collect();
        push_site(&mut full, (*spine, true), 1);
        let full: Multiset = full.into_iter().collect();
        q_side.add(p * f(&to_vec(&full), Some(lat.pos(*spine))));
    }
    Ok((p_side.value(), q_side.value()))
}

/// `E_Q[g · 1/R_α(V(ξ_n))]` and `E_Q[g · W_n^{(α)}/D_n^{(α)}]` for a generation
/// functional `g`; equal because `Q(ξ_n = u | F_n) ∝ R_α(V(u)) e^{−V(u)}`.
pub fn exact_spine_projection(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    g: GenerationFn<'_>,
    budget: &EnumerationBudget,
) -> Result<(f64, f64), OracleError> {
    check_law(law, n, budget)?;
    let lat = LatticeLaw::new(law)?;
    let states = spine_generation_law(&lat, renewal, alpha, n, budget)?;
    let mut lhs = KahanSum::new();
    let mut rhs = KahanSum::new();
    for ((ms, spine), &p) in &states {
        let mut full: BTreeMap<Site, u32> = ms.iter().copied().collect();
        push_site(&mut full, (*spine, true), 1);
        let full: Vec<(f64, bool, u32)> = full.into_iter().map(|((s, a), c)| (lat.pos(s), a, c)).collect();
        let gv = g(&full, None);
        let (mut w, mut d) = (KahanSum::new(), KahanSum::new());
        for &(x, alive, c) in &full {
            if alive {
                w.add(c as f64 * exp(-x));
                d.add(c as f64 * renewal.eval_alpha(alpha, x) * exp(-x));
            }
        }
        lhs.add(p * gv / renewal.eval_alpha(alpha, lat.pos(*spine)));
        rhs.add(p * gv * w.value() / d.value());
    }
    Ok((lhs.value(), rhs.value()))
}

type SpineState = (Multiset, i64);

fn spine_generation_law(
    lat: &LatticeLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<BTreeMap<SpineState, f64>, OracleError> {
    let mut states: BTreeMap<SpineState, f64> = BTreeMap::new();
    states.insert((Vec::new(), 0), 1.0);
    for _ in 0..n {
        let mut next: BTreeMap<SpineState, KahanSum> = BTreeMap::new();
        for ((ms, spine), &p) in &states {
            let x = lat.pos(*spine);
            let r_here = renewal.eval_alpha(alpha, x);
            // spine brood: atom a with the tilted probability, then child j
            for (a, kids) in lat.children.iter().enumerate() {
                let weights: Vec<f64> = kids
                    .iter()
                    .map(|&c| {
                        let y = spine + c;
                        if lat.alive(y, alpha) {
                            renewal.eval_alpha(alpha, lat.pos(y)) * exp(-lat.pos(c))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                let atom_q = lat.probs[a] * total / r_here;
                for (j, &wj) in weights.iter().enumerate() {
                    if wj == 0.0 {
                        continue;
                    }
                    let pick = wj / total;
                    let new_spine = spine + kids[j];
                    let mut base: BTreeMap<Site, u32> = BTreeMap::new();
                    for (jj, &c) in kids.iter().enumerate() {
                        if jj != j {
                            let y = spine + c;
                            push_site(&mut base, (y, lat.alive(y, alpha)), 1);
                        }
                    }
                    let weight = p * atom_q * pick;
                    expand(lat, alpha, ms, weight, &mut |child, q| {
                        let mut merged = base.clone();
                        for (site, c) in child {
                            push_site(&mut merged, site, c);
                        }
                        let key: Multiset = merged.into_iter().collect();
                        next.entry((key, new_spine)).or_default().add(q);
                    });
                }
            }
            check_budget(next.len() as f64, budget)?;
        }
        states = next.into_iter().map(|(k, v)| (k, v.value())).collect();
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// Window events

/// Every witness `(k, index)` of `A(n, λ)` on `tree`, checking each node of
/// depth `k ∈ (n, 2n]` against the definitions directly.
pub fn brute_force_events(tree: &Tree, spec: &EventWindowSpec) -> Vec<(usize, usize)> {
    let n = spec.n;
    let mut out = Vec::new();
    for k in n + 1..=(2 * n).min(tree.depth()) {
        for idx in 0..tree.positions(k).len() {
            if is_witness(tree, spec, k, idx) {
                out.push((k, idx));
            }
        }
    }
    out
}

fn is_witness(tree: &Tree, spec: &EventWindowSpec, k: usize, idx: usize) -> bool {
    let path = tree.path(k, idx);
    let s = spec.s();
    let v = path[k];
    if !(s <= v && v <= s + spec.k_const) {
        return false;
    }
    if (0..=k).any(|i| path[i] < spec.a(i)) {
        return false;
    }
    // node indices along the path
    let mut nodes = vec![0usize; k + 1];
    nodes[k] = idx;
    for d in (1..=k).rev() {
        nodes[d - 1] = tree.parent(d, nodes[d]);
    }
    for i in 0..k {
        let me = nodes[i + 1];
        let sibs = tree.sibling_range(i + 1, me);
        let a_i = spec.a(i);
        let mut sum = 0.0;
        for b in sibs {
            if b != me {
                let d = tree.positions(i + 1)[b] - a_i;
                sum += (1.0 + d.max(0.0)) * exp(-d);
            }
        }
        let bound = spec.k_const * exp(-spec.b(i, k));
        if !(sum <= bound) {
            return false;
        }
    }
    true
}

/// Exact `P(A(n, λ))` for a lattice law.
///
/// The subtrees of distinct children are independent, so
/// `q(i, x, k̄) = P(no witness below a node at depth i, site x, whose path
/// allows final depths ≤ k̄)` satisfies a product recursion over broods.
pub fn exact_event_probability(
    law: &OffspringLaw,
    spec: &EventWindowSpec,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    let q = exact_no_event(law, &[*spec], budget)?;
    Ok(1.0 - q)
}

/// Exact `P(A(n, λ) ∩ A(m, μ))` by inclusion–exclusion over the joint
/// recursion.
pub fn exact_joint_event_probability(
    law: &OffspringLaw,
    first: &EventWindowSpec,
    second: &EventWindowSpec,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    let p1 = exact_event_probability(law, first, budget)?;
    let p2 = exact_event_probability(law, second, budget)?;
    let none = exact_no_event(law, &[*first, *second], budget)?;
    Ok(p1 + p2 - (1.0 - none))
}

/// `P(no witness for any of the specs)`.
fn exact_no_event(law: &OffspringLaw, specs: &[EventWindowSpec], budget: &EnumerationBudget) -> Result<f64, OracleError> {
    let lat = LatticeLaw::new(law)?;
    let depth = specs.iter().map(|s| 2 * s.n).max().unwrap_or(0);
    check_law(law, depth, budget)?;
    let mut memo: BTreeMap<(usize, i64, Vec<usize>), f64> = BTreeMap::new();
    // a kmax of 0 marks a spec whose conditions already failed on the path
    let start: Vec<usize> = specs.iter().map(|s| 2 * s.n).collect();
    let mut ctx = EventDp { lat: &lat, specs, memo: &mut memo, budget };
    ctx.q(0, 0, &start)
}

struct EventDp<'a> {
    lat: &'a LatticeLaw,
    specs: &'a [EventWindowSpec],
    memo: &'a mut BTreeMap<(usize, i64, Vec<usize>), f64>,
    budget: &'a EnumerationBudget,
}

impl EventDp<'_> {
    fn q(&mut self, i: usize, site: i64, kmax: &[usize]) -> Result<f64, OracleError> {
        let key = (i, site, kmax.to_vec());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let mut total = KahanSum::new();
        let nat = self.lat.probs.len();
        for a in 0..nat {
            let kids = self.lat.children[a].clone();
            let positions: Vec<f64> = kids.iter().map(|&c| self.lat.pos(site + c)).collect();
            let mut prob = 1.0;
            for (j, &c) in kids.iter().enumerate() {
                let y = site + c;
                let d = i + 1;
                let mut child_kmax = vec![0usize; self.specs.len()];
                let mut witness = false;
                for (t, spec) in self.specs.iter().enumerate() {
                    let km_parent = kmax[t];
                    if km_parent <= i || positions[j] < spec.a(d) {
                        continue;
                    }
                    let a_i = spec.a(i);
                    let mut sum = 0.0;
                    for (jj, &yy) in positions.iter().enumerate() {
                        if jj != j {
                            let dd = yy - a_i;
                            sum += (1.0 + dd.max(0.0)) * exp(-dd);
                        }
                    }
                    let mut km = i;
                    for k in i + 1..=2 * spec.n {
                        if sum <= spec.k_const * exp(-spec.b(i, k)) {
                            km = k;
                        } else if 2 * i > spec.n {
                            break;
                        }
                    }
                    let km = km.min(km_parent);
                    if km < d || km <= spec.n {
                        continue;
                    }
                    if d > spec.n && spec.in_window(positions[j]) {
                        witness = true;
                        break;
                    }
                    if d < km {
                        child_kmax[t] = km;
                    }
                }
                if witness {
                    prob = 0.0;
                    break;
                }
                if child_kmax.iter().any(|&k| k > 0) {
                    prob *= self.q(d, y, &child_kmax)?;
                }
            }
            total.add(self.lat.probs[a] * prob);
        }
        let v = total.value();
        self.memo.insert(key, v);
        check_budget(self.memo.len() as f64, self.budget)?;
        Ok(v)
    }
}

/// `√(2/(πσ²))`.
pub fn liminf_constant(sigma2: f64) -> f64 {
    sqrt(2.0 / (core::f64::consts::PI * sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{detect_events, grow_tree};
    use crate::offspring::{normalize_to_boundary, Atom};
    use crate::rng::replica_rng;
    use crate::walk::{conditioned_marginal, derive_step_law, renewal_function};

    fn ssrw() -> (OffspringLaw, StepLaw, RenewalTable) {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        let step = derive_step_law(&law).unwrap();
        let grid: Vec<f64> = (0..=40).map(|x| x as f64).collect();
        let t = renewal_function(&step, &grid, 1_000_000).unwrap();
        (law, step, t)
    }

    fn budget() -> EnumerationBudget {
        EnumerationBudget::default()
    }

    #[test]
    fn many_to_one_examples() {
        let (law, step, t) = ssrw();
        let (a, b) = exact_expectation(&law, &step, 1, &|_| 1.0, &budget()).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let pos = |p: &[f64]| if p.iter().all(|&v| v >= 0.0) { 1.0 } else { 0.0 };
        let (a, b) = exact_expectation(&law, &step, 3, &pos, &budget()).unwrap();
        assert!((a - 0.375).abs() < 1e-12 && (b - 0.375).abs() < 1e-12);
        let f = |p: &[f64]| if p.iter().all(|&v| v >= 0.0) { t.eval(p[p.len() - 1]) } else { 0.0 };
        let (a, b) = exact_expectation(&law, &step, 2, &f, &budget()).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn battery_agrees_for_a_normalized_law() {
        let raw = OffspringLaw::new(None, vec![Atom::new(0.1, vec![-1.0]), Atom::new(0.9, vec![1.0, 1.0])]).unwrap();
        let law = normalize_to_boundary(&raw, 1e-12, 200).unwrap().law;
        let step = derive_step_law(&law).unwrap();
        for n in 1..=4 {
            for (name, f) in default_battery(n) {
                let (a, b) = exact_expectation(&law, &step, n, &*f, &budget()).unwrap();
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{name} n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let (law, step, _) = ssrw();
        let tight = EnumerationBudget { max_trees: 100, ..budget() };
        let err = exact_expectation(&law, &step, 5, &|_| 1.0, &tight).unwrap_err();
        assert_eq!(err, OracleError::BudgetExceeded { count: 32768, max: 100 });
    }

    #[test]
    fn martingale_gap_vanishes() {
        let (law, _, t) = ssrw();
        for alpha in [0.0, 1.0, 2.0] {
            for n in 1..=3 {
                let gap = exact_martingale_gap(&law, &t, alpha, n, &budget()).unwrap();
                assert!(gap <= 1e-10, "alpha={alpha} n={n} gap={gap}");
            }
        }
    }

    #[test]
    fn perturbed_law_has_a_gap() {
        let (law, _, t) = ssrw();
        let eps = 0.01;
        let mut atoms: Vec<Atom> = law.atoms().to_vec();
        atoms[0].prob += eps;
        atoms[3].prob -= eps;
        let bad = OffspringLaw::new(None, atoms).unwrap();
        let gap = exact_martingale_gap_with_renewal(&bad, &t, 0.0, 2, &budget()).unwrap();
        assert!(gap > 1e-4);
    }

    #[test]
    fn spine_marginal_examples() {
        let (_, step, t) = ssrw();
        assert_eq!(exact_spine_marginal(&step, &t, 0.0, 1, &budget()).unwrap(), vec![(1.0, 1.0)]);
        let m = exact_spine_marginal(&step, &t, 0.0, 2, &budget()).unwrap();
        assert_eq!(m.len(), 2);
        assert!((m[0].0 - 0.0).abs() < 1e-12 && (m[0].1 - 0.25).abs() < 1e-12);
        assert!((m[1].0 - 2.0).abs() < 1e-12 && (m[1].1 - 0.75).abs() < 1e-12);
        for alpha in [0.0, 1.0] {
            for n in 1..=6 {
                let e = exact_spine_marginal(&step, &t, alpha, n, &budget()).unwrap();
                let total: f64 = e.iter().map(|x| x.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
                let dp = conditioned_marginal(&step, &t, alpha, 0.0, n).unwrap();
                assert_eq!(e.len(), dp.len());
                for (a, b) in e.iter().zip(&dp) {
                    assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn measure_change_consistency() {
        let law = OffspringLaw::builtin("two-atom").unwrap();
        let step = derive_step_law(&law).unwrap();
        let h = step.lattice_span().unwrap();
        let grid: Vec<f64> = (0..=40).map(|x| x as f64 * h).collect();
        let t = renewal_function(&step, &grid, 1_000_000).unwrap();
        let fs: Vec<(&str, Box<dyn Fn(&[(f64, bool, u32)], Option<f64>) -> f64>)> = vec![
            ("one", Box::new(|_: &[(f64, bool, u32)], _| 1.0)),
            ("z", Box::new(|g: &[(f64, bool, u32)], _| g.iter().map(|x| x.2 as f64).sum())),
            ("min<=h", Box::new(move |g: &[(f64, bool, u32)], _| if g.iter().any(|x| x.0 <= h + 1e-9) { 1.0 } else { 0.0 })),
            ("w", Box::new(|g: &[(f64, bool, u32)], _| g.iter().map(|x| x.2 as f64 * exp(-x.0)).sum())),
        ];
        for alpha in [0.0, h] {
            for n in 1..=3 {
                for (name, f) in &fs {
                    let (p, q) = exact_measure_change(&law, &t, alpha, n, &**f, &budget()).unwrap();
                    assert!((p - q).abs() < 1e-10, "{name} alpha={alpha} n={n}: {p} vs {q}");
                }
                let g = |gen: &[(f64, bool, u32)], _: Option<f64>| gen.len() as f64;
                let (a, b) = exact_spine_projection(&law, &t, alpha, n, &g, &budget()).unwrap();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn enumeration_is_order_independent() {
        let (law, step, t) = ssrw();
        let mut atoms = law.atoms().to_vec();
        atoms.reverse();
        let rev = OffspringLaw::new(None, atoms).unwrap();
        let f = |p: &[f64]| p[p.len() - 1] * p[0];
        let a = exact_expectation(&law, &step, 4, &f, &budget()).unwrap();
        let b = exact_expectation(&rev, &step, 4, &f, &budget()).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12);
        let g1 = exact_martingale_gap(&law, &t, 1.0, 3, &budget()).unwrap();
        let g2 = exact_martingale_gap(&rev, &t, 1.0, 3, &budget()).unwrap();
        assert!((g1 - g2).abs() < 1e-12);
        let spec = EventWindowSpec::new(3, 0.2, 2.0).unwrap();
        let p1 = exact_event_probability(&law, &spec, &budget()).unwrap();
        let p2 = exact_event_probability(&rev, &spec, &budget()).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn detection_matches_brute_force_on_random_trees() {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        for r in 0..300u64 {
            let mut rng = replica_rng(21, r);
            let tree = grow_tree(&law, 8, 1_000_000, &mut rng).unwrap();
            for (lambda, k) in [(0.0, 10.0), (0.46, 10.0), (0.2, 1.0), (0.0, 0.5), (0.3, 3.0)] {
                let spec = EventWindowSpec::new(4, lambda, k).unwrap();
                let fast = detect_events(&tree, &spec).unwrap();
                assert_eq!(fast.witnesses, brute_force_events(&tree, &spec), "replica {r} λ={lambda} K={k}");
            }
        }
    }

    /// All outcome trees to `depth`, with probabilities.
    fn all_trees(law: &OffspringLaw, depth: usize) -> Vec<(Tree, f64)> {
        let mut out = Vec::new();
        let mut gens: Vec<Vec<(usize, f64)>> = Vec::new();
        fn rec(law: &OffspringLaw, depth: usize, gens: &mut Vec<Vec<(usize, f64)>>, current: Vec<f64>, prob: f64, out: &mut Vec<(Tree, f64)>) {
            if gens.len() == depth {
                out.push((Tree::from_generations(gens).unwrap(), prob));
                return;
            }
            // every atom choice for every particle of the current generation
            let m = current.len();
            let na = law.atoms().len();
            let mut choice = vec![0usize; m];
            loop {
                let mut next = Vec::new();
                let mut positions = Vec::new();
                let mut p = prob;
                for (i, &a) in choice.iter().enumerate() {
                    p *= law.atoms()[a].prob;
                    for &c in &law.atoms()[a].children {
                        next.push((i, current[i] + c));
                        positions.push(current[i] + c);
                    }
                }
                gens.push(next);
                rec(law, depth, gens, positions, p, out);
                gens.pop();
                let mut i = 0;
                while i < m {
                    choice[i] += 1;
                    if choice[i] < na {
                        break;
                    }
                    choice[i] = 0;
                    i += 1;
                }
                if i == m {
                    break;
                }
            }
        }
        rec(law, depth, &mut gens, vec![0.0], 1.0, &mut out);
        out
    }

    #[test]
    fn event_probability_matches_tree_enumeration() {
        // binary or childless: a two-atom boundary law with small trees
        let t = core::f64::consts::LN_2 / 3.0;
        let p = 1.0 / (exp(t) + exp(-2.0 * t));
        let law = OffspringLaw::new(None, vec![Atom::new(p, vec![-t, 2.0 * t]), Atom::new(1.0 - p, vec![])]).unwrap();
        let trees = all_trees(&law, 4);
        let total: f64 = trees.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (lambda, k) in [(0.0, 10.0), (libm::log(2.0) / 3.0, 10.0), (0.1, 0.3), (0.0, 0.05)] {
            let spec = EventWindowSpec::new(2, lambda, k).unwrap();
            let mut enumerated = KahanSum::new();
            for (tree, p) in &trees {
                let fast = detect_events(tree, &spec).unwrap();
                assert_eq!(fast.witnesses, brute_force_events(tree, &spec));
                if fast.occurred {
                    enumerated.add(*p);
                }
            }
            let exact = exact_event_probability(&law, &spec, &budget()).unwrap();
            assert!((exact - enumerated.value()).abs() < 1e-12, "{exact} vs {}", enumerated.value());
        }
    }

    #[test]
    fn joint_probability_is_consistent() {
        let (law, _, _) = ssrw();
        let a = EventWindowSpec::new(2, 0.0, 1.0).unwrap();
        let b = EventWindowSpec::new(8, 0.0, 1.0).unwrap();
        let j = exact_joint_event_probability(&law, &a, &b, &budget()).unwrap();
        let pa = exact_event_probability(&law, &a, &budget()).unwrap();
        let pb = exact_event_probability(&law, &b, &budget()).unwrap();
        assert!(j >= -1e-12 && j <= pa.min(pb) + 1e-12);
        let same = exact_joint_event_probability(&law, &a, &a, &budget()).unwrap();
        assert!((same - pa).abs() < 1e-12);
    }
}
