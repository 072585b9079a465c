//! Finite point-process reproduction laws.
//!
//! A law is a finite list of atoms; each atom is a probability together with
//! the displacements of the children born when that atom is drawn. Continuous
//! displacement laws have to be discretized before they can be used here.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::num::{self, exp, fabs, ksum, log, log_plus, pow, KahanSum};
use crate::rng::pick_cumulative;

/// Default tolerance for the two boundary identities.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-10;
/// Default exponent in the strengthened moment condition.
pub const DEFAULT_EPS0: f64 = 0.1;
const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub prob: f64,
    pub children: Vec<f64>,
}

impl Atom {
    pub fn new(prob: f64, children: Vec<f64>) -> Self {
        Self { prob, children }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LawError {
    NoAtoms,
    InvalidProbability { atom: usize, prob: f64 },
    NonFiniteChild { atom: usize, child: usize },
    ProbabilitySum { sum: f64 },
    InvalidTolerance(f64),
    UnknownBuiltin(String),
    InvalidParameter(String),
    /// Normalization has no solution with a positive scale.
    Infeasible(String),
    NonConvergence { residual: f64 },
}

impl fmt::Display for LawError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LawError::NoAtoms => write!(f, "law has no atoms"),
            LawError::InvalidProbability { atom, prob } => {
                write!(f, "atom {atom}: probability {prob} is not in [0, 1]")
            }
            LawError::NonFiniteChild { atom, child } => {
                write!(f, "atom {atom}: child {child} has a non-finite displacement")
            }
            LawError::ProbabilitySum { sum } => {
                write!(f, "atom probabilities sum to {sum}, expected 1 (tolerance 1e-12)")
            }
            LawError::InvalidTolerance(t) => write!(f, "tolerance must be positive, got {t}"),
            LawError::UnknownBuiltin(name) => write!(f, "unknown built-in law `{name}`"),
            LawError::InvalidParameter(msg) => write!(f, "invalid law parameter: {msg}"),
            LawError::Infeasible(msg) => write!(f, "no boundary normalization exists: {msg}"),
            LawError::NonConvergence { residual } => {
                write!(f, "boundary normalization did not converge (residual {residual:e})")
            }
        }
    }
}

impl core::error::Error for LawError {}

/// A validated reproduction law.
#[derive(Clone, Debug, PartialEq)]
pub struct OffspringLaw {
    name: Option<String>,
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
    lattice_span: Option<f64>,
}

impl OffspringLaw {
    pub fn new(name: Option<String>, atoms: Vec<Atom>) -> Result<Self, LawError> {
        if atoms.is_empty() {
            return Err(LawError::NoAtoms);
        }
        for (i, a) in atoms.iter().enumerate() {
            if !(a.prob.is_finite() && (0.0..=1.0).contains(&a.prob)) {
                return Err(LawError::InvalidProbability { atom: i, prob: a.prob });
            }
            if let Some(j) = a.children.iter().position(|c| !c.is_finite()) {
                return Err(LawError::NonFiniteChild { atom: i, child: j });
            }
        }
        let sum = ksum(atoms.iter().map(|a| a.prob));
        if fabs(sum - 1.0) > PROB_SUM_TOL {
            return Err(LawError::ProbabilitySum { sum });
        }
        let mut acc = KahanSum::new();
        let cumulative = atoms
            .iter()
            .map(|a| {
                acc.add(a.prob);
                acc.value()
            })
            .collect();
        let values: Vec<f64> = atoms
            .iter()
            .filter(|a| a.prob > 0.0)
            .flat_map(|a| a.children.iter().copied())
            .collect();
        let lattice_span = num::lattice_span(&values);
        Ok(Self { name, atoms, cumulative, lattice_span })
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// Maximal span `h` with every displacement in `h·ℤ`; `None` if non-lattice.
    pub fn lattice_span(&self) -> Option<f64> {
        self.lattice_span
    }

    pub fn max_children(&self) -> usize {
        self.atoms.iter().map(|a| a.children.len()).max().unwrap_or(0)
    }

    /// Smallest and largest displacement over atoms with positive mass.
    pub fn displacement_range(&self) -> Option<(f64, f64)> {
        let mut it = self
            .atoms
            .iter()
            .filter(|a| a.prob > 0.0)
            .flat_map(|a| a.children.iter().copied());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
    }

    /// Apply `x ↦ scale·x + drift` to every displacement.
    pub fn map_linear(&self, scale: f64, drift: f64) -> Result<Self, LawError> {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom::new(a.prob, a.children.iter().map(|&x| scale * x + drift).collect()))
            .collect();
        OffspringLaw::new(self.name.clone(), atoms)
    }

    /// Draw one atom and return its children.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> &[f64] {
        &self.atoms[self.sample_atom(rng)].children
    }

    pub fn sample_atom<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        pick_cumulative(&self.cumulative, rng)
    }

    /// Built-in laws addressable by name:
    ///
    /// * `ssrw-coupled`: an independent `+1` brood of size 2 (prob `e/2 − 1`)
    ///   or 1, plus a `−1` child with prob `1/(2e)`. Its many-to-one walk is the
    ///   simple symmetric walk.
    /// * `bernoulli-pm:H` (`0 < H ≤ ln 2`): independent children at `+H` with
    ///   prob `e^H/2` and at `−H` with prob `e^{−H}/2`. Walk: `±H` symmetric.
    /// * `two-atom`: `{p: [−h, h, h], 1−p: [h]}` with `h = ln(1+√2)` and
    ///   `p = e^{−h}/2`. Walk: `±h` symmetric.
    pub fn builtin(name: &str) -> Result<Self, LawError> {
        let e = core::f64::consts::E;
        let atoms = match name {
            "ssrw-coupled" => {
                let p2 = e / 2.0 - 1.0;
                let q = 1.0 / (2.0 * e);
                alloc::vec![
                    Atom::new(p2 * q, alloc::vec![1.0, 1.0, -1.0]),
                    Atom::new(p2 * (1.0 - q), alloc::vec![1.0, 1.0]),
                    Atom::new((1.0 - p2) * q, alloc::vec![1.0, -1.0]),
                    Atom::new((1.0 - p2) * (1.0 - q), alloc::vec![1.0]),
                ]
            }
            "two-atom" => {
                let h = log(1.0 + core::f64::consts::SQRT_2);
                let p = exp(-h) / 2.0;
                alloc::vec![Atom::new(p, alloc::vec![-h, h, h]), Atom::new(1.0 - p, alloc::vec![h])]
            }
            _ => {
                if let Some(arg) = name.strip_prefix("bernoulli-pm:") {
                    let h: f64 = arg
                        .parse()
                        .map_err(|_| LawError::InvalidParameter(format!("span `{arg}`")))?;
                    if !(h > 0.0 && h <= core::f64::consts::LN_2) {
                        return Err(LawError::InvalidParameter(format!(
                            "bernoulli-pm span must lie in (0, ln 2], got {h}"
                        )));
                    }
                    let p = exp(h) / 2.0;
                    let q = exp(-h) / 2.0;
                    alloc::vec![
                        Atom::new(p * q, alloc::vec![h, -h]),
                        Atom::new(p * (1.0 - q), alloc::vec![h]),
                        Atom::new((1.0 - p) * q, alloc::vec![-h]),
                        Atom::new((1.0 - p) * (1.0 - q), alloc::vec![]),
                    ]
                } else {
                    return Err(LawError::UnknownBuiltin(name.to_string()));
                }
            }
        };
        OffspringLaw::new(Some(name.to_string()), atoms)
    }
}

/// Moments and hypothesis flags of a law.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryReport {
    /// `E[ℒ(ℝ)]`
    pub mean_offspring: f64,
    /// `E ∫ e^{−x} ℒ(dx)`
    pub exp_mass: f64,
    /// `E ∫ x e^{−x} ℒ(dx)`
    pub tilt_mean: f64,
    /// `E ∫ x² e^{−x} ℒ(dx)`
    pub sigma2: f64,
    /// `E[η (log₊η)² + η̃ log₊η̃]`
    pub eta_log2_moment: f64,
    /// `E[η^{1+ε₀} + ∫ e^{−x}|x|^{2+ε₀} ℒ(dx)]`
    pub eps0_moment: f64,
    pub eps0: f64,
    pub supercritical: bool,
    pub boundary: bool,
    pub int1: bool,
    pub int2: bool,
    pub int3: bool,
    pub tol: f64,
}

pub fn check_boundary(law: &OffspringLaw, tol: f64) -> Result<BoundaryReport, LawError> {
    check_boundary_with(law, tol, DEFAULT_EPS0)
}

/// Exact finite sums over atoms; `η` and `η̃` are evaluated per atom and then
/// averaged.
pub fn check_boundary_with(law: &OffspringLaw, tol: f64, eps0: f64) -> Result<BoundaryReport, LawError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(LawError::InvalidTolerance(tol));
    }
    if !(eps0 > 0.0 && eps0.is_finite()) {
        return Err(LawError::InvalidParameter(format!("eps0 must be positive, got {eps0}")));
    }
    let mut mean = KahanSum::new();
    let mut mass = KahanSum::new();
    let mut tilt = KahanSum::new();
    let mut var = KahanSum::new();
    let mut eta_mom = KahanSum::new();
    let mut eps_mom = KahanSum::new();
    for a in law.atoms() {
        let p = a.prob;
        let eta = ksum(a.children.iter().map(|&x| exp(-x)));
        let eta_tilde = ksum(a.children.iter().filter(|&&x| x > 0.0).map(|&x| x * exp(-x)));
        mean.add(p * a.children.len() as f64);
        mass.add(p * eta);
        tilt.add(p * ksum(a.children.iter().map(|&x| x * exp(-x))));
        var.add(p * ksum(a.children.iter().map(|&x| x * x * exp(-x))));
        let lp = log_plus(eta);
        eta_mom.add(p * (eta * lp * lp + eta_tilde * log_plus(eta_tilde)));
        let abs_moment = ksum(a.children.iter().map(|&x| exp(-x) * pow(fabs(x), 2.0 + eps0)));
        eps_mom.add(p * (pow(eta, 1.0 + eps0) + abs_moment));
    }
    let exp_mass = mass.value();
    let tilt_mean = tilt.value();
    let sigma2 = var.value();
    let eta_log2_moment = eta_mom.value();
    let eps0_moment = eps_mom.value();
    let mean_offspring = mean.value();
    Ok(BoundaryReport {
        mean_offspring,
        exp_mass,
        tilt_mean,
        sigma2,
        eta_log2_moment,
        eps0_moment,
        eps0,
        supercritical: mean_offspring > 1.0,
        boundary: fabs(exp_mass - 1.0) <= tol && fabs(tilt_mean) <= tol,
        int1: sigma2.is_finite() && sigma2 > 0.0,
        int2: eta_log2_moment.is_finite(),
        int3: eps0_moment.is_finite(),
        tol,
    })
}

/// Result of [`normalize_to_boundary`]: the law `x ↦ scale·x + drift`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub scale: f64,
    pub drift: f64,
    pub law: OffspringLaw,
}

/// Sums `A(θ) = E Σ e^{−θx}`, `B = E Σ x e^{−θx}`, `C = E Σ x² e^{−θx}`, all
/// multiplied by `e^{θ·x_min}` to stay finite for large `θ`.
fn shifted_moments(law: &OffspringLaw, theta: f64, x_min: f64) -> (f64, f64, f64) {
    let mut a = KahanSum::new();
    let mut b = KahanSum::new();
    let mut c = KahanSum::new();
    for atom in law.atoms() {
        for &x in &atom.children {
            let w = atom.prob * exp(-theta * (x - x_min));
            a.add(w);
            b.add(w * x);
            c.add(w * x * x);
        }
    }
    (a.value(), b.value(), c.value())
}

/// Residuals `(log E Σ e^{−y}, E Σ y e^{−y})` for `y = θx + c`.
fn residuals(law: &OffspringLaw, theta: f64, drift: f64, x_min: f64) -> (f64, f64) {
    let (a, b, _) = shifted_moments(law, theta, x_min);
    let log_mass = log(a) - theta * x_min - drift;
    let mass = exp(log_mass);
    (log_mass, mass * (theta * b / a + drift))
}

/// Find `(θ, c)` with `θ > 0` such that `x ↦ θx + c` puts the law in the
/// boundary case.
///
/// Damped Newton on `(log exp_mass, tilt_mean)`; if it stalls, bisection on the
/// reduced equation `ψ(θ) = θψ'(θ)` with `ψ(θ) = log E Σ e^{−θx}` and the drift
/// recovered as `c = ψ(θ)`.
pub fn normalize_to_boundary(law: &OffspringLaw, tol: f64, max_iter: usize) -> Result<Normalization, LawError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(LawError::InvalidTolerance(tol));
    }
    let report = check_boundary(law, tol)?;
    if report.boundary {
        return Ok(Normalization { scale: 1.0, drift: 0.0, law: law.clone() });
    }
    let (x_min, x_max) = law
        .displacement_range()
        .ok_or_else(|| LawError::Infeasible("the law never produces children".to_string()))?;
    if x_max - x_min <= num::LATTICE_TOL * (1.0 + fabs(x_min)) {
        return Err(LawError::Infeasible(
            "all displacements are equal, so the tilted mean cannot vanish".to_string(),
        ));
    }
    if report.mean_offspring <= 1.0 {
        return Err(LawError::Infeasible(format!(
            "mean offspring {} ≤ 1 leaves only the degenerate scale 0",
            report.mean_offspring
        )));
    }
    let leftmost_mass = ksum(law.atoms().iter().map(|a| {
        a.prob * a.children.iter().filter(|&&x| fabs(x - x_min) <= num::LATTICE_TOL).count() as f64
    }));
    if leftmost_mass >= 1.0 {
        return Err(LawError::Infeasible(format!(
            "expected number of leftmost children {leftmost_mass} ≥ 1"
        )));
    }

    let finish = |theta: f64, drift: f64| -> Result<Normalization, LawError> {
        let mapped = law.map_linear(theta, drift)?;
        let r = check_boundary(&mapped, tol)?;
        if r.boundary {
            Ok(Normalization { scale: theta, drift, law: mapped })
        } else {
            Err(LawError::NonConvergence { residual: fabs(r.exp_mass - 1.0).max(fabs(r.tilt_mean)) })
        }
    };

    // Newton on (θ, c).
    let mut theta = 1.0;
    let (a0, _, _) = shifted_moments(law, theta, x_min);
    let mut drift = log(a0) - theta * x_min;
    let target = tol * 1e-3;
    let mut newton_ok = false;
    for _ in 0..max_iter {
        let (f1, f2) = residuals(law, theta, drift, x_min);
        let norm = fabs(f1).max(fabs(f2));
        if norm <= target {
            newton_ok = true;
            break;
        }
        let (a, b, c) = shifted_moments(law, theta, x_min);
        let (ba, ca) = (b / a, c / a);
        let mass = exp(log(a) - theta * x_min - drift);
        let j11 = -ba;
        let j12 = -1.0;
        // mass' = −(B/A)·mass and (B/A)' = −(C/A − (B/A)²)
        let j21 = mass * (ba - theta * (ca - ba * ba) - ba * (theta * ba + drift));
        let j22 = mass * (1.0 - (theta * ba + drift));
        let det = j11 * j22 - j12 * j21;
        if !(det.is_finite() && fabs(det) > 1e-300) {
            break;
        }
        let dt = (f1 * j22 - j12 * f2) / det;
        let dc = (j11 * f2 - j21 * f1) / det;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let nt = theta - step * dt;
            let nc = drift - step * dc;
            if nt > 0.0 {
                let (g1, g2) = residuals(law, nt, nc, x_min);
                let n2 = fabs(g1).max(fabs(g2));
                if n2.is_finite() && n2 < norm {
                    theta = nt;
                    drift = nc;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if newton_ok {
        if let Ok(n) = finish(theta, drift) {
            return Ok(n);
        }
    }

    // Fallback: g(θ) = ψ(θ) − θψ'(θ) is decreasing from log m > 0.
    let g = |t: f64| {
        let (a, b, _) = shifted_moments(law, t, x_min);
        (log(a) - t * x_min) + t * b / a
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut expand = 0;
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        expand += 1;
        if expand > 200 {
            return Err(LawError::NonConvergence { residual: g(hi) });
        }
    }
    for _ in 0..max_iter.max(200) {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let theta = 0.5 * (lo + hi);
    let (a, _, _) = shifted_moments(law, theta, x_min);
    let drift = log(a) - theta * x_min;
    finish(theta, drift)
}

/// One draw from the law: the children of a single reproduction event.
pub fn sample_offspring<'a, R: RngCore + ?Sized>(law: &'a OffspringLaw, rng: &mut R) -> &'a [f64] {
    law.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;
    use alloc::vec;

    const LN2: f64 = core::f64::consts::LN_2;

    #[test]
    fn two_children_at_ln2_is_not_boundary() {
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![LN2, LN2])]).unwrap();
        let r = check_boundary(&law, 1e-10).unwrap();
        assert!((r.exp_mass - 1.0).abs() < 1e-15);
        assert!((r.tilt_mean - LN2).abs() < 1e-15);
        assert!(!r.boundary);
        assert!(r.supercritical);
    }

    #[test]
    fn identity_law() {
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![0.0])]).unwrap();
        let r = check_boundary(&law, 1e-10).unwrap();
        assert_eq!((r.exp_mass, r.tilt_mean, r.mean_offspring), (1.0, 0.0, 1.0));
        assert!(!r.supercritical);
    }

    #[test]
    fn ssrw_coupled_is_boundary() {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        let r = check_boundary(&law, 1e-10).unwrap();
        assert!((r.exp_mass - 1.0).abs() < 1e-14);
        assert!(r.tilt_mean.abs() < 1e-14);
        assert!((r.sigma2 - 1.0).abs() < 1e-14);
        assert!(r.boundary && r.supercritical && r.int1 && r.int2 && r.int3);
        assert_eq!(law.lattice_span(), Some(1.0));
    }

    #[test]
    fn other_builtins_are_boundary() {
        for name in ["two-atom", "bernoulli-pm:0.5", "bernoulli-pm:0.25"] {
            let law = OffspringLaw::builtin(name).unwrap();
            let r = check_boundary(&law, 1e-10).unwrap();
            assert!(r.boundary, "{name}: {r:?}");
            assert!(r.supercritical, "{name}");
        }
        assert!(matches!(OffspringLaw::builtin("bernoulli-pm:0.9"), Err(LawError::InvalidParameter(_))));
        assert!(matches!(OffspringLaw::builtin("nope"), Err(LawError::UnknownBuiltin(_))));
    }

    #[test]
    fn validation_names_the_atom() {
        let err = OffspringLaw::new(None, vec![Atom::new(0.5, vec![1.0]), Atom::new(0.4, vec![])]).unwrap_err();
        assert!(matches!(err, LawError::ProbabilitySum { .. }));
        let err = OffspringLaw::new(None, vec![Atom::new(1.0, vec![1.0]), Atom::new(0.0, vec![f64::NAN])])
            .unwrap_err();
        assert_eq!(err, LawError::NonFiniteChild { atom: 1, child: 0 });
        let err = OffspringLaw::new(None, vec![Atom::new(1.5, vec![]), Atom::new(-0.5, vec![])]).unwrap_err();
        assert_eq!(err, LawError::InvalidProbability { atom: 0, prob: 1.5 });
        assert!(check_boundary(&OffspringLaw::builtin("two-atom").unwrap(), 0.0).is_err());
    }

    #[test]
    fn normalization_fixed_point() {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        let n = normalize_to_boundary(&law, 1e-10, 100).unwrap();
        assert_eq!((n.scale, n.drift), (1.0, 0.0));
        assert_eq!(n.law, law);
    }

    #[test]
    fn normalization_rejects_deterministic_displacements() {
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![0.0, 0.0])]).unwrap();
        assert!(matches!(normalize_to_boundary(&law, 1e-10, 100), Err(LawError::Infeasible(_))));
    }

    #[test]
    fn normalization_rejects_single_child_laws() {
        let law = OffspringLaw::new(None, vec![Atom::new(0.1, vec![-1.0]), Atom::new(0.9, vec![1.0])]).unwrap();
        assert!(matches!(normalize_to_boundary(&law, 1e-10, 100), Err(LawError::Infeasible(_))));
    }

    #[test]
    fn normalization_of_two_atom_law() {
        let law = OffspringLaw::new(None, vec![Atom::new(0.1, vec![-1.0]), Atom::new(0.9, vec![1.0, 1.0])]).unwrap();
        let n = normalize_to_boundary(&law, 1e-10, 100).unwrap();
        let r = check_boundary(&n.law, 1e-10).unwrap();
        assert!(r.boundary);
        assert!((r.exp_mass - 1.0).abs() < 1e-12 && r.tilt_mean.abs() < 1e-12);
        assert!(n.scale > 0.0);
    }

    #[test]
    fn permutation_invariance_of_report() {
        let law = OffspringLaw::builtin("ssrw-coupled").unwrap();
        let mut atoms: Vec<Atom> = law.atoms().to_vec();
        atoms.reverse();
        for a in atoms.iter_mut() {
            a.children.reverse();
        }
        let permuted = OffspringLaw::new(None, atoms).unwrap();
        let a = check_boundary(&law, 1e-10).unwrap();
        let b = check_boundary(&permuted, 1e-10).unwrap();
        assert!((a.exp_mass - b.exp_mass).abs() < 1e-15);
        assert!((a.tilt_mean - b.tilt_mean).abs() < 1e-15);
        assert!((a.sigma2 - b.sigma2).abs() < 1e-15);
        assert!((a.eta_log2_moment - b.eta_log2_moment).abs() < 1e-14);
    }

    #[test]
    fn sampling_single_atom_and_extinction() {
        let mut rng = replica_rng(3, 0);
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![2.0, -1.0])]).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_offspring(&law, &mut rng), &[2.0, -1.0]);
        }
        let law = OffspringLaw::new(None, vec![Atom::new(1.0, vec![])]).unwrap();
        assert!(sample_offspring(&law, &mut rng).is_empty());
    }
}
