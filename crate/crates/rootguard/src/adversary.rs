//! MAP reconstruction adversary.
//!
//! The attacker sees a transcript of noised root releases, knows the
//! mechanism, the per-root epsilons, and the grids, and estimates each
//! root by maximizing the observation log-likelihood plus a log prior
//! over the grid candidates. Roots factorize: noise is drawn per root,
//! so the joint MAP splits into independent one-dimensional argmax
//! problems.
//!
//! Two query strategies for building the attack transcript:
//! * `Focused`: spend every query on the root with the largest epsilon,
//!   the cheapest root to pin down per observation;
//! * `RoundRobin`: cycle through the roots in declaration order.

use crate::allocator::Allocation;
use crate::controller::Request;
use crate::error::Error;
use crate::mechanisms::{log_pmf, MechanismKind, NoiseParams};
use crate::templates::Template;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Focused,
    RoundRobin,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Focused => "focused",
            Strategy::RoundRobin => "round-robin",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "focused" | "a" => Ok(Strategy::Focused),
            "round-robin" | "roundrobin" | "b" => Ok(Strategy::RoundRobin),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Attacker's belief over each root before seeing the transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Prior {
    Uniform,
    /// Independent Gaussians, one per root (population moments).
    Informed { mean: Vec<f64>, std: Vec<f64> },
}

impl std::str::FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Prior::Uniform),
            other => Err(Error::Config(format!(
                "unknown prior '{other}' (informed priors carry parameters)"
            ))),
        }
    }
}

impl Prior {
    /// Population-moment prior for a template.
    pub fn informed(template: &Template) -> Prior {
        Prior::Informed {
            mean: template.roots.iter().map(|r| r.mean).collect(),
            std: template.roots.iter().map(|r| r.std).collect(),
        }
    }
}

/// Observed noised releases, grouped per root. Each entry is the
/// released grid index and the epsilon it was drawn with.
#[derive(Debug, Clone, Default)]
pub struct Observations {
    pub per_root: Vec<Vec<(usize, f64)>>,
}

impl Observations {
    pub fn new(k: usize) -> Observations {
        Observations {
            per_root: vec![Vec::new(); k],
        }
    }

    pub fn push(&mut self, root: usize, index: usize, eps: f64) {
        self.per_root[root].push((index, eps));
    }

    pub fn count(&self, root: usize) -> usize {
        self.per_root[root].len()
    }
}

/// Root with the largest per-root budget; ties resolve to the first
/// index in root order.
pub fn focus_root(allocation: &Allocation) -> usize {
    allocation
        .eps
        .iter()
        .enumerate()
        .fold((0usize, f64::MIN), |best, (i, &e)| {
            if e > best.1 {
                (i, e)
            } else {
                best
            }
        })
        .0
}

/// The attacker's full session plan: `q` root queries followed by the
/// target-bundle turn.
pub fn build_plan(allocation: &Allocation, strategy: Strategy, q: usize) -> Vec<Request> {
    let k = allocation.eps.len();
    let mut plan: Vec<Request> = match strategy {
        Strategy::Focused => vec![Request::Root(focus_root(allocation)); q],
        Strategy::RoundRobin => (0..q).map(|i| Request::Root(i % k)).collect(),
    };
    plan.push(Request::TargetBundle);
    plan
}

/// Per-root MAP estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub values: Vec<f64>,
    /// Set when a root had no observations and no informative prior, so
    /// the reported value is just the grid midpoint.
    pub unidentifiable: Vec<bool>,
}

/// Maximize observation log-likelihood plus log prior over the grid,
/// independently per root.
pub fn map_estimate(
    template: &Template,
    mechanism: MechanismKind,
    m: usize,
    obs: &Observations,
    prior: &Prior,
) -> Result<Estimate> {
    let k = template.k();
    if obs.per_root.len() != k {
        return Err(Error::Config(format!(
            "{}: observations cover {} roots, template has {}",
            template.name,
            obs.per_root.len(),
            k
        )));
    }
    let mut values = Vec::with_capacity(k);
    let mut unidentifiable = vec![false; k];
    for i in 0..k {
        let grid = template.root_grid(i, m)?;
        let entries = &obs.per_root[i];
        if entries.is_empty() {
            match prior {
                Prior::Informed { mean, .. } => values.push(mean[i]),
                Prior::Uniform => {
                    unidentifiable[i] = true;
                    values.push((grid.lower() + grid.upper()) / 2.0);
                }
            }
            continue;
        }
        // cache NoiseParams per distinct epsilon in the entry list
        let params: Vec<NoiseParams> = entries
            .iter()
            .map(|&(_, eps)| NoiseParams::new(mechanism, eps))
            .collect::<Result<_>>()?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..m {
            let t = c as f64;
            let mut score = 0.0;
            for (&(s, _), p) in entries.iter().zip(&params) {
                score += log_pmf(p, s, t, &grid)?;
            }
            if let Prior::Informed { mean, std } = prior {
                let x = grid.from_index(c)?;
                let z = (x - mean[i]) / std[i];
                score -= 0.5 * z * z;
            }
            if score > best.1 {
                best = (c, score);
            }
        }
        values.push(grid.from_index(best.0)?);
    }
    Ok(Estimate {
        values,
        unidentifiable,
    })
}

/// Per-root absolute reconstruction errors.
pub fn reconstruction_error(estimate: &Estimate, truth: &[f64]) -> Vec<f64> {
    estimate
        .values
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).abs())
        .collect()
}
