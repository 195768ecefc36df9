//! Sensitivity-weighted privacy budget allocation.
//!
//! Given a total index-space budget `B` over a template's `k` roots, the
//! allocator splits it so that roots with a larger influence on the
//! target get more budget. Influence of root `i` is
//! `h_i = |dg/dx_i|` at the population mean, and the domain enters
//! through the grid spacing `delta_i`.
//!
//! Three methods:
//! * uniform: `B/k` each, the baseline;
//! * closed form: proportional to `w_i = sqrt(h_i * delta_i)`, the
//!   stationary split of the first-order noise-cost model where expected
//!   error scales like `h_i * delta_i / eps_i`;
//! * numeric: direct minimization of `sum_i h_i * eta_i(eps_i)` using
//!   the exact worst-case expected noise of the chosen mechanism,
//!   solved by equalizing marginal costs with a bisection on the
//!   multiplier.
//!
//! Roots whose formula ignores them (`h_i = 0`) are pinned to the floor
//! `eps_min`; spending more there buys no accuracy.

use crate::error::Error;
use crate::mechanisms::{expected_abs_noise_index, MechanismKind, NoiseParams};
use crate::templates::Template;
use crate::Result;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS_MIN: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocationMethod {
    Uniform,
    ClosedForm,
    Numeric,
}

impl AllocationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationMethod::Uniform => "uniform",
            AllocationMethod::ClosedForm => "closed-form",
            AllocationMethod::Numeric => "numeric",
        }
    }
}

impl std::str::FromStr for AllocationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(AllocationMethod::Uniform),
            "closed-form" | "closed_form" | "closed" => Ok(AllocationMethod::ClosedForm),
            "numeric" | "optimal" => Ok(AllocationMethod::Numeric),
            other => Err(Error::Config(format!("unknown allocation method '{other}'"))),
        }
    }
}

/// Per-root influence and grid spacing at the allocation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub h: Vec<f64>,
    pub delta: Vec<f64>,
}

impl SensitivityProfile {
    pub fn weights(&self) -> Vec<f64> {
        self.h
            .iter()
            .zip(&self.delta)
            .map(|(&h, &d)| (h * d).sqrt())
            .collect()
    }
}

/// Result of splitting a budget over roots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Allocation {
    pub eps: Vec<f64>,
    pub clamped: Vec<bool>,
    /// Set when every weight vanished and the split fell back to uniform.
    pub uniform_fallback: bool,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.eps.iter().sum()
    }
}

/// Influence magnitudes and grid spacings for a template, evaluated at
/// the population mean with `m` candidates per root.
pub fn compute_sensitivities(template: &Template, m: usize) -> Result<SensitivityProfile> {
    let means = template.population_means();
    let grad = template.target_gradient(&means)?;
    let h = grad.iter().map(|g| g.abs()).collect();
    let delta = (0..template.k())
        .map(|i| Ok(template.root_grid(i, m)?.spacing()))
        .collect::<Result<_>>()?;
    Ok(SensitivityProfile { h, delta })
}

fn check_budget(k: usize, budget: f64, eps_min: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("allocation over zero roots".into()));
    }
    if !(eps_min > 0.0) {
        return Err(Error::Config(format!("eps_min must be positive, got {eps_min}")));
    }
    if !(budget >= k as f64 * eps_min) {
        return Err(Error::Config(format!(
            "budget {budget} cannot cover {k} roots at the floor {eps_min}"
        )));
    }
    Ok(())
}

pub fn uniform_allocation(k: usize, budget: f64, eps_min: f64) -> Result<Allocation> {
    check_budget(k, budget, eps_min)?;
    Ok(Allocation {
        eps: vec![budget / k as f64; k],
        clamped: vec![false; k],
        uniform_fallback: false,
    })
}

/// Split the budget proportionally to the weights, pinning any root that
/// would fall below `eps_min` to the floor and re-splitting the rest.
/// Terminates in at most `k` rounds since each round pins at least one
/// more root.
pub fn closed_form_allocation(
    weights: &[f64],
    budget: f64,
    eps_min: f64,
) -> Result<Allocation> {
    let k = weights.len();
    check_budget(k, budget, eps_min)?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("weights must be finite and non-negative".into()));
    }
    if weights.iter().all(|&w| w == 0.0) {
        let mut a = uniform_allocation(k, budget, eps_min)?;
        a.uniform_fallback = true;
        return Ok(a);
    }

    let mut clamped: Vec<bool> = weights.iter().map(|&w| w == 0.0).collect();
    let mut eps = vec![eps_min; k];
    loop {
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let free_budget = budget - n_clamped as f64 * eps_min;
        let wsum: f64 = weights
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(&w, _)| w)
            .sum();
        if wsum == 0.0 {
            // every root pinned; spread any slack uniformly to conserve
            // the budget exactly
            let extra = (budget - k as f64 * eps_min) / k as f64;
            eps.fill(eps_min + extra);
            break;
        }
        let mut newly = false;
        for i in 0..k {
            if clamped[i] {
                continue;
            }
            let share = weights[i] / wsum * free_budget;
            if share < eps_min {
                clamped[i] = true;
                newly = true;
            } else {
                eps[i] = share;
            }
        }
        if !newly {
            break;
        }
    }
    Ok(Allocation {
        eps,
        clamped,
        uniform_fallback: false,
    })
}

/// Tabulated worst-case expected noise in index units for one mechanism
/// and grid size, on a log-spaced epsilon lattice. Piecewise linear in
/// `(ln eps, ln eta)`; the slope gives the marginal `d eta / d eps`.
pub struct NoiseCurve {
    log_eps: Vec<f64>,
    log_eta: Vec<f64>,
}

const CURVE_EPS_LO: f64 = 1e-4;
const CURVE_EPS_HI: f64 = 1e3;
const CURVE_POINTS: usize = 181;

impl NoiseCurve {
    pub fn build(kind: MechanismKind, m: usize) -> NoiseCurve {
        let (lo, hi) = (CURVE_EPS_LO.ln(), CURVE_EPS_HI.ln());
        let log_eps: Vec<f64> = (0..CURVE_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64)
            .collect();
        let log_eta = log_eps
            .iter()
            .map(|&le| {
                let p = NoiseParams::new(kind, le.exp()).expect("lattice eps > 0");
                expected_abs_noise_index(&p, m).max(1e-300).ln()
            })
            .collect();
        NoiseCurve { log_eps, log_eta }
    }

    fn segment(&self, le: f64) -> usize {
        let n = self.log_eps.len();
        let step = self.log_eps[1] - self.log_eps[0];
        (((le - self.log_eps[0]) / step).floor() as isize)
            .clamp(0, n as isize - 2) as usize
    }

    /// Interpolated expected noise in index units.
    pub fn eta(&self, eps: f64) -> f64 {
        let le = eps.ln().clamp(self.log_eps[0], *self.log_eps.last().unwrap());
        let i = self.segment(le);
        let frac = (le - self.log_eps[i]) / (self.log_eps[i + 1] - self.log_eps[i]);
        (self.log_eta[i] + frac * (self.log_eta[i + 1] - self.log_eta[i])).exp()
    }

    /// Magnitude of `d eta / d eps` from the local log-log slope.
    pub fn marginal(&self, eps: f64) -> f64 {
        let le = eps.ln().clamp(self.log_eps[0], *self.log_eps.last().unwrap());
        let i = self.segment(le);
        let slope = (self.log_eta[i + 1] - self.log_eta[i])
            / (self.log_eps[i + 1] - self.log_eps[i]);
        (slope * self.eta(eps) / eps).abs()
    }
}

/// Minimize `sum_i h_i * delta_i * eta(eps_i)` subject to the budget and
/// the floor, by bisection on the shared marginal cost.
pub fn numeric_allocation(
    profile: &SensitivityProfile,
    kind: MechanismKind,
    m: usize,
    budget: f64,
    eps_min: f64,
) -> Result<Allocation> {
    let k = profile.h.len();
    check_budget(k, budget, eps_min)?;
    let weights: Vec<f64> = profile
        .h
        .iter()
        .zip(&profile.delta)
        .map(|(&h, &d)| h * d)
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        let mut a = uniform_allocation(k, budget, eps_min)?;
        a.uniform_fallback = true;
        return Ok(a);
    }

    let curve = NoiseCurve::build(kind, m);
    // eps_i(lambda): the point where w_i * |eta'(eps)| = lambda, found by
    // bisection; |eta'| decreases in eps, so eps_i decreases in lambda.
    let eps_at = |w: f64, lambda: f64| -> f64 {
        if w == 0.0 {
            return eps_min;
        }
        let (mut lo, mut hi) = (CURVE_EPS_LO, CURVE_EPS_HI);
        for _ in 0..60 {
            let mid = (lo * hi).sqrt();
            if w * curve.marginal(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt().max(eps_min)
    };

    let total_at = |lambda: f64, clamped: &[bool]| -> f64 {
        weights
            .iter()
            .zip(clamped)
            .map(|(&w, &c)| if c { eps_min } else { eps_at(w, lambda) })
            .sum()
    };

    let mut clamped: Vec<bool> = weights.iter().map(|&w| w == 0.0).collect();
    let mut eps = vec![eps_min; k];
    loop {
        // outer bisection on lambda; total eps decreases in lambda
        let (mut lam_lo, mut lam_hi) = (1e-18f64, 1e18f64);
        for _ in 0..80 {
            let mid = (lam_lo * lam_hi).sqrt();
            if total_at(mid, &clamped) > budget {
                lam_lo = mid;
            } else {
                lam_hi = mid;
            }
        }
        let lambda = (lam_lo * lam_hi).sqrt();
        let mut newly = false;
        for i in 0..k {
            if clamped[i] {
                continue;
            }
            let e = eps_at(weights[i], lambda);
            if e <= eps_min {
                clamped[i] = true;
                newly = true;
            } else {
                eps[i] = e;
            }
        }
        if !newly {
            break;
        }
    }

    // rescale the free mass so the budget holds to tight tolerance
    let n_clamped = clamped.iter().filter(|&&c| c).count();
    let free_target = budget - n_clamped as f64 * eps_min;
    let free_sum: f64 = eps
        .iter()
        .zip(&clamped)
        .filter(|(_, &c)| !c)
        .map(|(&e, _)| e)
        .sum();
    if free_sum > 0.0 {
        let scale = free_target / free_sum;
        for (e, &c) in eps.iter_mut().zip(&clamped) {
            if !c {
                *e *= scale;
            }
        }
    } else if n_clamped == k {
        let extra = (budget - k as f64 * eps_min) / k as f64;
        eps.fill(eps_min + extra);
    }

    let residual = (eps.iter().sum::<f64>() - budget).abs();
    if residual > 1e-6 {
        return Err(Error::Solver { residual });
    }
    Ok(Allocation {
        eps,
        clamped,
        uniform_fallback: false,
    })
}

/// Allocate a template's budget with the chosen method.
pub fn allocate(
    method: AllocationMethod,
    template: &Template,
    kind: MechanismKind,
    m: usize,
    budget: f64,
    eps_min: f64,
) -> Result<Allocation> {
    match method {
        AllocationMethod::Uniform => uniform_allocation(template.k(), budget, eps_min),
        AllocationMethod::ClosedForm => {
            let profile = compute_sensitivities(template, m)?;
            closed_form_allocation(&profile.weights(), budget, eps_min)
        }
        AllocationMethod::Numeric => {
            let profile = compute_sensitivities(template, m)?;
            numeric_allocation(&profile, kind, m, budget, eps_min)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::{by_name, TemplateName};

    const EPS_MIN: f64 = 1e-4;

    #[test]
    fn proportional_split_two_roots() {
        let a = closed_form_allocation(&[2.0, 1.0], 0.3, EPS_MIN).unwrap();
        assert!((a.eps[0] - 0.2).abs() < 1e-12);
        assert!((a.eps[1] - 0.1).abs() < 1e-12);
        assert!(!a.clamped.iter().any(|&c| c));
    }

    #[test]
    fn equal_weights_split_evenly() {
        let a = closed_form_allocation(&[1.0, 1.0], 0.62, EPS_MIN).unwrap();
        assert!((a.eps[0] - 0.31).abs() < 1e-12);
        assert!((a.eps[1] - 0.31).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_root_is_pinned() {
        let a = closed_form_allocation(&[1.0, 0.0, 1.0], 1.0, EPS_MIN).unwrap();
        assert!(a.clamped[1]);
        assert_eq!(a.eps[1], EPS_MIN);
        assert!((a.eps[0] - a.eps[2]).abs() < 1e-12);
        assert!((a.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        let a = closed_form_allocation(&[0.0, 0.0], 0.4, EPS_MIN).unwrap();
        assert!(a.uniform_fallback);
        assert!((a.eps[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tiny_weight_hits_the_floor() {
        let a = closed_form_allocation(&[1.0, 1e-9], 0.5, 0.01).unwrap();
        assert!(a.clamped[1]);
        assert_eq!(a.eps[1], 0.01);
        assert!((a.eps[0] - 0.49).abs() < 1e-12);
    }

    #[test]
    fn budget_below_floor_rejected() {
        assert!(closed_form_allocation(&[1.0, 1.0], 0.001, 0.01).is_err());
    }

    #[test]
    fn anemia_rbc_and_aip_tc_get_the_floor() {
        // the target formula ignores these roots, so their gradient is 0
        for (name, idx) in [(TemplateName::Anemia, 2), (TemplateName::Aip, 2)] {
            let t = by_name(name).unwrap();
            for method in [AllocationMethod::ClosedForm, AllocationMethod::Numeric] {
                let a = allocate(method, &t, MechanismKind::Exponential, 200, 1.0, EPS_MIN)
                    .unwrap();
                assert!(a.clamped[idx], "{name} {method:?}");
                assert_eq!(a.eps[idx], EPS_MIN);
            }
        }
    }

    #[test]
    fn budget_is_conserved_tightly() {
        for t in crate::templates::registry().unwrap() {
            for method in [
                AllocationMethod::Uniform,
                AllocationMethod::ClosedForm,
                AllocationMethod::Numeric,
            ] {
                for budget in [0.1, 0.62, 3.0] {
                    let a = allocate(method, &t, MechanismKind::Exponential, 300, budget, EPS_MIN)
                        .unwrap();
                    assert!(
                        (a.total() - budget).abs() < 1e-9,
                        "{} {method:?} B={budget}: total {}",
                        t.name,
                        a.total()
                    );
                }
            }
        }
    }

    #[test]
    fn larger_weight_never_gets_less_budget() {
        let a = closed_form_allocation(&[0.5, 2.0, 1.0, 3.0], 2.0, EPS_MIN).unwrap();
        let pairs = [(0, 2), (2, 1), (1, 3)];
        for (lo, hi) in pairs {
            assert!(a.eps[lo] < a.eps[hi]);
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let a = closed_form_allocation(&[1.0, 3.0, 2.0], 0.9, EPS_MIN).unwrap();
        let b = closed_form_allocation(&[10.0, 30.0, 20.0], 0.9, EPS_MIN).unwrap();
        for (x, y) in a.eps.iter().zip(&b.eps) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_is_idempotent() {
        let a = closed_form_allocation(&[1.0, 1e-9, 1e-9, 1.0], 0.1, 0.01).unwrap();
        // feeding the surviving weights back at the reduced budget
        // reproduces the free shares
        let b = closed_form_allocation(&[1.0, 1.0], 0.1 - 0.02, 0.01).unwrap();
        assert!((a.eps[0] - b.eps[0]).abs() < 1e-12);
        assert!((a.eps[3] - b.eps[1]).abs() < 1e-12);
    }

    #[test]
    fn numeric_split_is_a_local_minimum() {
        let t = by_name(TemplateName::Fib4).unwrap();
        let m = 300;
        let profile = compute_sensitivities(&t, m).unwrap();
        let a = numeric_allocation(&profile, MechanismKind::Exponential, m, 0.8, EPS_MIN).unwrap();
        let curve = NoiseCurve::build(MechanismKind::Exponential, m);
        let cost = |eps: &[f64]| -> f64 {
            eps.iter()
                .enumerate()
                .map(|(i, &e)| profile.h[i] * profile.delta[i] * curve.eta(e))
                .sum()
        };
        let base = cost(&a.eps);
        // shifting mass between any free pair should not beat the solution
        for i in 0..t.k() {
            for j in 0..t.k() {
                if i == j || a.clamped[i] || a.clamped[j] {
                    continue;
                }
                for shift in [0.02, 0.05] {
                    let d = shift * a.eps[i].min(a.eps[j]);
                    let mut e = a.eps.clone();
                    e[i] += d;
                    e[j] -= d;
                    assert!(
                        cost(&e) >= base * (1.0 - 1e-6),
                        "shifting {d} from {j} to {i} lowered the cost"
                    );
                }
            }
        }
    }

    #[test]
    fn numeric_equalizes_weighted_marginals() {
        let t = by_name(TemplateName::Tyg).unwrap();
        let m = 300;
        let profile = compute_sensitivities(&t, m).unwrap();
        let a = numeric_allocation(&profile, MechanismKind::BoundedLaplace, m, 0.6, EPS_MIN)
            .unwrap();
        let curve = NoiseCurve::build(MechanismKind::BoundedLaplace, m);
        let marg: Vec<f64> = (0..t.k())
            .filter(|&i| !a.clamped[i])
            .map(|i| profile.h[i] * profile.delta[i] * curve.marginal(a.eps[i]))
            .collect();
        let max = marg.iter().cloned().fold(f64::MIN, f64::max);
        let min = marg.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.05, "marginals spread: {marg:?}");
    }

    #[test]
    fn noise_curve_matches_exact_values() {
        let curve = NoiseCurve::build(MechanismKind::Exponential, 250);
        for eps in [0.05, 0.3, 1.7] {
            let exact = expected_abs_noise_index(
                &NoiseParams::new(MechanismKind::Exponential, eps).unwrap(),
                250,
            );
            let approx = curve.eta(eps);
            assert!(
                (approx - exact).abs() / exact < 0.01,
                "eps={eps}: {approx} vs {exact}"
            );
        }
    }
}
