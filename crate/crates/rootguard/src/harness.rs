//! Metrics and the RQ1/RQ2/RQ3 sweep harness.
//!
//! Budget accounting differs by release method. A privacy level
//! `epsilon` and a turn budget `t = a*k + 1` (multiplier `a` of 1, 2, or
//! 3) give the interaction budget `B = t * epsilon`. The fresh method
//! spends `epsilon` on every single release, so its accuracy per release
//! never changes with `t`; the caching methods take all of `B` upfront
//! and split it over the roots, so more turns buy them strictly more
//! accuracy. That opposition is the double asymmetry the utility sweep
//! measures.
//!
//! The privacy sweep fixes a per-root level `eps_r`, runs the attacker's
//! plan (`q` root queries plus the target-bundle turn), and reports the
//! MAP reconstruction error. Under the caching methods repeated queries
//! return the same draw, so the attacker deduplicates them; under the
//! fresh method every release is an independent observation.
//!
//! Per-patient noise streams are keyed by coordinates, so sweep output
//! is byte-identical across thread counts and execution orders.

use crate::adversary::{build_plan, focus_root, map_estimate, Observations, Prior, Strategy};
use crate::allocator::{
    compute_sensitivities, numeric_allocation, uniform_allocation, Allocation, AllocationMethod,
};
use crate::controller::{Method, ReleaseValue, Request, Session, SessionConfig};
use crate::error::Error;
use crate::mechanisms::MechanismKind;
use crate::population::Patient;
use crate::rng::{stream, StreamKey};
use crate::templates::{Template, TemplateName};
use crate::Result;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Weighted mean absolute percentage error,
/// `100 * sum |est - truth| / sum |truth|`.
pub fn wmape(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::Metric(format!(
            "wMAPE needs matched non-empty slices, got {} and {}",
            est.len(),
            truth.len()
        )));
    }
    let denom: f64 = truth.iter().map(|y| y.abs()).sum();
    if denom == 0.0 {
        return Err(Error::Metric("wMAPE undefined: all true values are zero".into()));
    }
    let num: f64 = est.iter().zip(truth).map(|(e, y)| (e - y).abs()).sum();
    Ok(100.0 * num / denom)
}

/// Mean normalized risk-class error, `100 * mean |c_est - c_true| / (C-1)`.
pub fn risk_class_error(est: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::Metric("class error needs matched non-empty slices".into()));
    }
    if classes < 2 {
        return Err(Error::Metric(format!("class error needs >= 2 classes, got {classes}")));
    }
    let span = (classes - 1) as f64;
    let total: f64 = est
        .iter()
        .zip(truth)
        .map(|(&e, &t)| (e as f64 - t as f64).abs() / span)
        .sum();
    Ok(100.0 * total / est.len() as f64)
}

/// Combine independent per-template standard errors into one aggregate,
/// `sqrt(sum se_i^2) / k`.
pub fn aggregate_se(ses: &[f64]) -> f64 {
    (ses.iter().map(|s| s * s).sum::<f64>()).sqrt() / ses.len() as f64
}

/// Bootstrap standard error of a patient-level statistic: resample the
/// patient indices, re-evaluate, take the spread.
fn bootstrap_se(n: usize, seed: u64, tag: u32, stat: impl Fn(&[usize]) -> f64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mut rng = stream(StreamKey {
        seed,
        template: u32::MAX,
        patient: tag,
        root: u32::MAX,
        draw: u32::MAX - 1,
    });
    let stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            stat(&sample)
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64).sqrt()
}

/// Which prior the attacker runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    Uniform,
    Informed,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Uniform => "uniform",
            PriorKind::Informed => "informed",
        }
    }

    fn build(&self, template: &Template) -> Prior {
        match self {
            PriorKind::Uniform => Prior::Uniform,
            PriorKind::Informed => Prior::informed(template),
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(PriorKind::Uniform),
            "informed" => Ok(PriorKind::Informed),
            other => Err(Error::Config(format!("unknown prior '{other}'"))),
        }
    }
}

/// Per-root budget for a utility cell. The fresh method pays `epsilon`
/// on each release; the caching methods split `B = (a*k+1) * epsilon`.
pub fn utility_allocation(
    method: Method,
    template: &Template,
    mechanism: MechanismKind,
    m: usize,
    epsilon: f64,
    multiplier: u32,
    eps_min: f64,
) -> Result<Allocation> {
    let k = template.k();
    let turns = multiplier as usize * k + 1;
    let budget = turns as f64 * epsilon;
    match method {
        Method::MAll => Ok(Allocation {
            eps: vec![epsilon; k],
            clamped: vec![false; k],
            uniform_fallback: false,
        }),
        Method::MRoots => uniform_allocation(k, budget, eps_min),
        Method::MOpt => {
            let profile = compute_sensitivities(template, m)?;
            numeric_allocation(&profile, mechanism, m, budget, eps_min)
        }
    }
}

/// Per-root budget for a privacy cell at fixed per-root level `eps_r`.
/// The optimized method re-splits the same total `k * eps_r`.
pub fn privacy_allocation(
    method: Method,
    template: &Template,
    mechanism: MechanismKind,
    m: usize,
    eps_r: f64,
    eps_min: f64,
) -> Result<Allocation> {
    let k = template.k();
    match method {
        Method::MAll | Method::MRoots => Ok(Allocation {
            eps: vec![eps_r; k],
            clamped: vec![false; k],
            uniform_fallback: false,
        }),
        Method::MOpt => {
            let profile = compute_sensitivities(template, m)?;
            numeric_allocation(&profile, mechanism, m, k as f64 * eps_r, eps_min)
        }
    }
}

/// One utility (RQ1) grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityCell {
    pub template: TemplateName,
    pub mechanism: MechanismKind,
    pub method: Method,
    pub epsilon: f64,
    /// `a` in the turn budget `t = a*k + 1`.
    pub multiplier: u32,
}

/// One per-patient utility observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityRow {
    pub template: String,
    pub mechanism: String,
    pub method: String,
    pub epsilon: f64,
    pub multiplier: u32,
    pub patient: String,
    pub target_true: f64,
    pub target_released: f64,
    pub class_true: usize,
    pub class_released: usize,
}

/// Aggregated utility metrics for one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilitySummary {
    pub template: String,
    pub mechanism: String,
    pub method: String,
    pub epsilon: f64,
    pub multiplier: u32,
    pub patients: usize,
    pub wmape: f64,
    pub wmape_se: f64,
    pub rce: f64,
    pub rce_se: f64,
}

/// Run every patient through one utility cell. Only the target-bundle
/// turn matters for utility: earlier root turns either post-process the
/// cache or are independent draws the bundle replaces.
pub fn run_utility_cell(
    template: &Template,
    patients: &[Patient],
    cell: &UtilityCell,
    m: usize,
    seed: u64,
    eps_min: f64,
) -> Result<(Vec<UtilityRow>, UtilitySummary)> {
    if patients.is_empty() {
        return Err(Error::Config("cell has no patients".into()));
    }
    let allocation = utility_allocation(
        cell.method,
        template,
        cell.mechanism,
        m,
        cell.epsilon,
        cell.multiplier,
        eps_min,
    )?;
    let rows: Vec<UtilityRow> = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<UtilityRow> {
            let cfg = SessionConfig {
                method: cell.method,
                mechanism: cell.mechanism,
                allocation: allocation.clone(),
                m,
                seed,
                patient: i as u32,
                fresh_target_draw: true,
            };
            let mut session = Session::new(template.clone(), p.values.clone(), cfg)?;
            let (target_released, class_released) =
                match &session.answer(Request::TargetBundle)?.value {
                    ReleaseValue::Bundle { target, class, .. } => (*target, class.index),
                    _ => unreachable!("target bundle releases a bundle"),
                };
            let target_true = template.evaluate_target(&p.values)?;
            let class_true = template.classify(target_true)?.index;
            Ok(UtilityRow {
                template: template.name.to_string(),
                mechanism: cell.mechanism.name().to_string(),
                method: cell.method.name().to_string(),
                epsilon: cell.epsilon,
                multiplier: cell.multiplier,
                patient: p.id.clone(),
                target_true,
                target_released,
                class_true,
                class_released,
            })
        })
        .collect::<Result<_>>()?;
    let summary = summarize_utility(&rows, template.class_count(), seed)?;
    Ok((rows, summary))
}

fn summarize_utility(
    rows: &[UtilityRow],
    classes: usize,
    seed: u64,
) -> Result<UtilitySummary> {
    let n = rows.len();
    let est: Vec<f64> = rows.iter().map(|r| r.target_released).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.target_true).collect();
    let cest: Vec<usize> = rows.iter().map(|r| r.class_released).collect();
    let ctruth: Vec<usize> = rows.iter().map(|r| r.class_true).collect();
    let wmape_se = bootstrap_se(n, seed, 0, |idx| {
        let e: Vec<f64> = idx.iter().map(|&i| est[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
        wmape(&e, &t).unwrap_or(f64::NAN)
    });
    let rce_se = bootstrap_se(n, seed, 1, |idx| {
        let e: Vec<usize> = idx.iter().map(|&i| cest[i]).collect();
        let t: Vec<usize> = idx.iter().map(|&i| ctruth[i]).collect();
        risk_class_error(&e, &t, classes).unwrap_or(f64::NAN)
    });
    let first = &rows[0];
    Ok(UtilitySummary {
        template: first.template.clone(),
        mechanism: first.mechanism.clone(),
        method: first.method.clone(),
        epsilon: first.epsilon,
        multiplier: first.multiplier,
        patients: n,
        wmape: wmape(&est, &truth)?,
        wmape_se,
        rce: risk_class_error(&cest, &ctruth, classes)?,
        rce_se,
    })
}

/// One privacy (RQ2) grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyCell {
    pub template: TemplateName,
    pub mechanism: MechanismKind,
    pub method: Method,
    pub eps_r: f64,
    pub q: usize,
    pub strategy: Strategy,
    pub prior: PriorKind,
}

/// Aggregated reconstruction metrics for one cell. The scope follows
/// the strategy: the focused attacker is scored on its target root, the
/// round-robin attacker on the unweighted mean across roots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub template: String,
    pub mechanism: String,
    pub method: String,
    pub eps_r: f64,
    pub q: usize,
    pub strategy: String,
    pub prior: String,
    pub scope: String,
    pub patients: usize,
    pub recon_wmape: f64,
    pub recon_wmape_se: f64,
    /// Per-root wMAPE in root order.
    pub per_root_wmape: Vec<f64>,
    /// Per-patient scope statistic terms kept for paired comparisons.
    #[serde(skip)]
    pub per_patient: Vec<PatientRecon>,
}

/// One patient's reconstruction outcome: absolute errors and truth
/// magnitudes per root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecon {
    pub abs_err: Vec<f64>,
    pub abs_truth: Vec<f64>,
}

/// Extract the attacker's observations from one executed plan.
fn collect_observations(
    template: &Template,
    allocation: &Allocation,
    method: Method,
    m: usize,
    session: &mut Session,
    plan: &[Request],
) -> Result<Observations> {
    let mut obs = Observations::new(template.k());
    for req in plan {
        let rel = session.answer(req.clone())?;
        match (&rel.request, &rel.value) {
            (Request::Root(i), ReleaseValue::Scalar(v)) => {
                let grid = template.root_grid(*i, m)?;
                obs.push(*i, grid.nearest_index(*v)?, allocation.eps[*i]);
            }
            (Request::TargetBundle, ReleaseValue::Bundle { roots, .. }) => {
                // the bundle's sanitized roots are observations too
                for (i, v) in roots.iter().enumerate() {
                    let grid = template.root_grid(i, m)?;
                    obs.push(i, grid.nearest_index(*v)?, allocation.eps[i]);
                }
            }
            _ => {}
        }
    }
    if method.caches() {
        // repeated queries return the same cached draw; identical values
        // carry no extra evidence, so the attacker counts each once
        for entries in &mut obs.per_root {
            entries.dedup();
            debug_assert!(entries.len() <= 1 || entries.iter().all(|e| e == &entries[0]));
            entries.truncate(1);
        }
    }
    Ok(obs)
}

/// Run every patient through one privacy cell and score the MAP
/// reconstruction.
pub fn run_privacy_cell(
    template: &Template,
    patients: &[Patient],
    cell: &PrivacyCell,
    m: usize,
    seed: u64,
    eps_min: f64,
) -> Result<PrivacySummary> {
    if patients.is_empty() {
        return Err(Error::Config("cell has no patients".into()));
    }
    let allocation = privacy_allocation(
        cell.method,
        template,
        cell.mechanism,
        m,
        cell.eps_r,
        eps_min,
    )?;
    // the focused strategy aims at the best-funded root of the optimized
    // split, whatever method is under attack
    let opt_allocation =
        privacy_allocation(Method::MOpt, template, cell.mechanism, m, cell.eps_r, eps_min)?;
    let plan = build_plan(&opt_allocation, cell.strategy, cell.q);
    let prior = cell.prior.build(template);

    let per_patient: Vec<PatientRecon> = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<PatientRecon> {
            let cfg = SessionConfig {
                method: cell.method,
                mechanism: cell.mechanism,
                allocation: allocation.clone(),
                m,
                seed,
                patient: i as u32,
                fresh_target_draw: true,
            };
            let mut session = Session::new(template.clone(), p.values.clone(), cfg)?;
            let obs = collect_observations(template, &allocation, cell.method, m, &mut session, &plan)?;
            let estimate = map_estimate(template, cell.mechanism, m, &obs, &prior)?;
            Ok(PatientRecon {
                abs_err: estimate
                    .values
                    .iter()
                    .zip(&p.values)
                    .map(|(e, t)| (e - t).abs())
                    .collect(),
                abs_truth: p.values.iter().map(|v| v.abs()).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let k = template.k();
    let focus = focus_root(&opt_allocation);
    let scope_roots: Vec<usize> = match cell.strategy {
        Strategy::Focused => vec![focus],
        Strategy::RoundRobin => (0..k).collect(),
    };
    let per_root = |idx: &[usize]| -> Vec<f64> {
        (0..k)
            .map(|r| {
                let num: f64 = idx.iter().map(|&p| per_patient[p].abs_err[r]).sum();
                let den: f64 = idx.iter().map(|&p| per_patient[p].abs_truth[r]).sum();
                100.0 * num / den
            })
            .collect()
    };
    let scope_stat = |idx: &[usize]| -> f64 {
        let pr = per_root(idx);
        scope_roots.iter().map(|&r| pr[r]).sum::<f64>() / scope_roots.len() as f64
    };
    let all: Vec<usize> = (0..per_patient.len()).collect();
    let recon_wmape = scope_stat(&all);
    let recon_wmape_se = bootstrap_se(per_patient.len(), seed, 2, scope_stat);

    Ok(PrivacySummary {
        template: template.name.to_string(),
        mechanism: cell.mechanism.name().to_string(),
        method: cell.method.name().to_string(),
        eps_r: cell.eps_r,
        q: cell.q,
        strategy: cell.strategy.name().to_string(),
        prior: cell.prior.name().to_string(),
        scope: match cell.strategy {
            Strategy::Focused => "targeted-root".to_string(),
            Strategy::RoundRobin => "all-roots".to_string(),
        },
        patients: patients.len(),
        recon_wmape,
        recon_wmape_se,
        per_root_wmape: per_root(&all),
        per_patient,
    })
}

/// Which experiment a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    Utility,
    Privacy,
}

/// Full sweep request; mirrors the CLI config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub experiment: Experiment,
    pub templates: Vec<TemplateName>,
    pub mechanisms: Vec<MechanismKind>,
    pub methods: Vec<Method>,
    /// Utility axis: privacy levels.
    pub epsilons: Vec<f64>,
    /// Utility axis: `a` values for the turn budget `t = a*k + 1`.
    pub multipliers: Vec<u32>,
    /// Privacy axis: per-root levels.
    pub eps_r: Vec<f64>,
    pub qs: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub priors: Vec<PriorKind>,
    pub patients: usize,
    pub m: usize,
    pub seed: u64,
    pub eps_min: f64,
}

impl Default for SweepSpec {
    fn default() -> SweepSpec {
        SweepSpec {
            experiment: Experiment::Utility,
            templates: TemplateName::ALL.to_vec(),
            mechanisms: vec![MechanismKind::Exponential],
            methods: vec![Method::MAll, Method::MRoots, Method::MOpt],
            epsilons: vec![0.1],
            multipliers: vec![2],
            eps_r: vec![0.1],
            qs: vec![1, 4, 8, 16],
            strategies: vec![Strategy::RoundRobin],
            priors: vec![PriorKind::Informed],
            patients: 200,
            m: 1000,
            seed: 20260825,
            eps_min: crate::allocator::DEFAULT_EPS_MIN,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.mechanisms.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("sweep axes must be non-empty".into()));
        }
        match self.experiment {
            Experiment::Utility => {
                if self.epsilons.is_empty() || self.multipliers.is_empty() {
                    return Err(Error::Config(
                        "utility sweeps need epsilons and multipliers".into(),
                    ));
                }
            }
            Experiment::Privacy => {
                if self.eps_r.is_empty()
                    || self.qs.is_empty()
                    || self.strategies.is_empty()
                    || self.priors.is_empty()
                {
                    return Err(Error::Config(
                        "privacy sweeps need eps_r, qs, strategies, and priors".into(),
                    ));
                }
            }
        }
        if self.patients == 0 {
            return Err(Error::Config("sweeps need at least one patient".into()));
        }
        Ok(())
    }

    pub fn utility_cells(&self) -> Vec<UtilityCell> {
        let mut cells = Vec::new();
        for &template in &self.templates {
            for &mechanism in &self.mechanisms {
                for &method in &self.methods {
                    for &epsilon in &self.epsilons {
                        for &multiplier in &self.multipliers {
                            cells.push(UtilityCell {
                                template,
                                mechanism,
                                method,
                                epsilon,
                                multiplier,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn privacy_cells(&self) -> Vec<PrivacyCell> {
        let mut cells = Vec::new();
        for &template in &self.templates {
            for &mechanism in &self.mechanisms {
                for &method in &self.methods {
                    for &eps_r in &self.eps_r {
                        for &q in &self.qs {
                            for &strategy in &self.strategies {
                                for &prior in &self.priors {
                                    cells.push(PrivacyCell {
                                        template,
                                        mechanism,
                                        method,
                                        eps_r,
                                        q,
                                        strategy,
                                        prior,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

/// Find the template instance for a cell's name.
fn template_for(templates: &[Template], name: TemplateName) -> Result<&Template> {
    templates
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("no template instance for {name}")))
}

/// Run a utility sweep. `populations` holds one patient list per entry
/// of `templates`.
pub fn run_utility_sweep(
    spec: &SweepSpec,
    templates: &[Template],
    populations: &[Vec<Patient>],
) -> Result<(Vec<UtilityRow>, Vec<UtilitySummary>)> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for cell in spec.utility_cells() {
        let idx = templates.iter().position(|t| t.name == cell.template);
        let t = template_for(templates, cell.template)?;
        let pop = &populations[idx.unwrap()];
        let (r, s) = run_utility_cell(t, pop, &cell, spec.m, spec.seed, spec.eps_min)?;
        rows.extend(r);
        summaries.push(s);
    }
    Ok((rows, summaries))
}

/// Run a privacy sweep.
pub fn run_privacy_sweep(
    spec: &SweepSpec,
    templates: &[Template],
    populations: &[Vec<Patient>],
) -> Result<Vec<PrivacySummary>> {
    spec.validate()?;
    spec.privacy_cells()
        .iter()
        .map(|cell| {
            let idx = templates
                .iter()
                .position(|t| t.name == cell.template)
                .ok_or_else(|| Error::Config(format!("no template instance for {}", cell.template)))?;
            run_privacy_cell(
                &templates[idx],
                &populations[idx],
                cell,
                spec.m,
                spec.seed,
                spec.eps_min,
            )
        })
        .collect()
}

/// Unweighted template mean of a per-template metric with SE
/// propagation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
    pub templates: usize,
}

pub fn aggregate(values: &[f64], ses: &[f64]) -> Result<Aggregate> {
    if values.is_empty() || values.len() != ses.len() {
        return Err(Error::Metric("aggregate needs matched non-empty inputs".into()));
    }
    Ok(Aggregate {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        se: aggregate_se(ses),
        templates: values.len(),
    })
}

/// Write serializable rows as CSV with headers.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Write serializable rows as pretty JSON.
pub fn write_json<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, rows)?;
    Ok(())
}

/// Pooled log-log slope of the allocated per-root epsilon against the
/// root influence `h_i * D_i`, over the non-pinned roots, with
/// per-template mean centering. The closed-form split puts this at one
/// half exactly; the numeric split tracks it.
pub fn allocation_power_law(
    templates: &[Template],
    method: AllocationMethod,
    kind: MechanismKind,
    m: usize,
    epsilon: f64,
    multiplier: u32,
    eps_min: f64,
) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in templates {
        let budget = (multiplier as usize * t.k() + 1) as f64 * epsilon;
        let profile = compute_sensitivities(t, m)?;
        let alloc = match method {
            AllocationMethod::Uniform => uniform_allocation(t.k(), budget, eps_min)?,
            AllocationMethod::ClosedForm => {
                crate::allocator::closed_form_allocation(&profile.weights(), budget, eps_min)?
            }
            AllocationMethod::Numeric => {
                numeric_allocation(&profile, kind, m, budget, eps_min)?
            }
        };
        let mut tx = Vec::new();
        let mut ty = Vec::new();
        for i in 0..t.k() {
            if alloc.clamped[i] || profile.h[i] == 0.0 {
                continue;
            }
            let width = t.roots[i].upper - t.roots[i].lower;
            tx.push((profile.h[i] * width).ln());
            ty.push(alloc.eps[i].ln());
        }
        if tx.len() < 2 {
            continue; // a single active root carries no slope information
        }
        let mx = tx.iter().sum::<f64>() / tx.len() as f64;
        let my = ty.iter().sum::<f64>() / ty.len() as f64;
        xs.extend(tx.iter().map(|x| x - mx));
        ys.extend(ty.iter().map(|y| y - my));
    }
    if xs.len() < 2 {
        return Err(Error::Metric("not enough active roots for a slope".into()));
    }
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    if sxx == 0.0 {
        return Err(Error::Metric("degenerate influence spread".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::synthesize;
    use crate::templates::{by_name, registry};

    #[test]
    fn wmape_known_values() {
        assert!((wmape(&[2.0, 0.0], &[1.0, 1.0]).unwrap() - 100.0).abs() < 1e-12);
        assert!((wmape(&[11.0, -9.0], &[10.0, -10.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(wmape(&[5.0], &[5.0]).unwrap(), 0.0);
        assert!(wmape(&[1.0], &[0.0]).is_err());
        assert!(wmape(&[], &[]).is_err());
    }

    #[test]
    fn class_error_known_values() {
        // half the patients one class off with three classes
        let e = risk_class_error(&[1, 2], &[0, 2], 3).unwrap();
        assert!((e - 25.0).abs() < 1e-12);
        assert_eq!(risk_class_error(&[0, 1], &[0, 1], 2).unwrap(), 0.0);
        // every patient two classes off with three classes
        assert!((risk_class_error(&[2, 2], &[0, 0], 3).unwrap() - 100.0).abs() < 1e-12);
        assert!(risk_class_error(&[0], &[0], 1).is_err());
    }

    #[test]
    fn aggregate_se_known_value() {
        assert!((aggregate_se(&[3.0, 4.0]) - 2.5).abs() < 1e-12);
        let agg = aggregate(&[10.0, 20.0], &[3.0, 4.0]).unwrap();
        assert!((agg.mean - 15.0).abs() < 1e-12);
        assert!((agg.se - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_of_a_constant_is_zero() {
        let se = bootstrap_se(50, 1, 0, |_| 7.0);
        assert_eq!(se, 0.0);
        // and spread shows up
        let data: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 0.0 } else { 10.0 }).collect();
        let se2 = bootstrap_se(50, 1, 0, |idx| {
            idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64
        });
        assert!(se2 > 0.3);
        assert_eq!(
            se2,
            bootstrap_se(50, 1, 0, |idx| idx.iter().map(|&i| data[i]).sum::<f64>()
                / idx.len() as f64)
        );
    }

    #[test]
    fn utility_allocation_semantics() {
        let t = by_name(TemplateName::Homa).unwrap(); // k = 2
        let m = 200;
        let eps = 0.1;
        // fresh method: per-release epsilon, independent of the multiplier
        for a in [1, 2, 3] {
            let alloc = utility_allocation(
                Method::MAll,
                &t,
                MechanismKind::Exponential,
                m,
                eps,
                a,
                1e-3,
            )
            .unwrap();
            assert_eq!(alloc.eps, vec![0.1, 0.1]);
        }
        // caching baseline: B = (2k+1) * eps split evenly
        let alloc = utility_allocation(
            Method::MRoots,
            &t,
            MechanismKind::Exponential,
            m,
            eps,
            2,
            1e-3,
        )
        .unwrap();
        assert!((alloc.eps[0] - 0.25).abs() < 1e-12);
        assert!((alloc.eps[1] - 0.25).abs() < 1e-12);
        // optimized: same total, different split
        let opt = utility_allocation(
            Method::MOpt,
            &t,
            MechanismKind::Exponential,
            m,
            eps,
            2,
            1e-3,
        )
        .unwrap();
        assert!((opt.eps.iter().sum::<f64>() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cell_grids_expand_fully() {
        let spec = SweepSpec {
            experiment: Experiment::Utility,
            templates: vec![TemplateName::Homa, TemplateName::Nlr],
            mechanisms: vec![MechanismKind::Exponential],
            methods: vec![Method::MAll, Method::MOpt],
            epsilons: vec![0.1, 0.5],
            multipliers: vec![1, 2, 3],
            ..SweepSpec::default()
        };
        assert_eq!(spec.utility_cells().len(), 2 * 2 * 2 * 3);
        let spec2 = SweepSpec {
            experiment: Experiment::Privacy,
            templates: vec![TemplateName::Homa],
            eps_r: vec![0.1, 0.2],
            qs: vec![1, 16],
            strategies: vec![Strategy::Focused, Strategy::RoundRobin],
            priors: vec![PriorKind::Uniform],
            methods: vec![Method::MAll],
            ..SweepSpec::default()
        };
        assert_eq!(spec2.privacy_cells().len(), 2 * 2 * 2);
        assert!(SweepSpec {
            templates: vec![],
            ..SweepSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn utility_cell_is_deterministic_and_budget_sensitive() {
        let t = by_name(TemplateName::Tyg).unwrap();
        let patients = synthesize(&t, 40, 5);
        let run = |eps: f64| {
            let cell = UtilityCell {
                template: t.name,
                mechanism: MechanismKind::Exponential,
                method: Method::MRoots,
                epsilon: eps,
                multiplier: 2,
            };
            run_utility_cell(&t, &patients, &cell, 300, 11, 1e-4).unwrap().1
        };
        let a = run(0.1);
        let b = run(0.1);
        assert_eq!(a.wmape.to_bits(), b.wmape.to_bits());
        assert!(run(5.0).wmape < run(0.02).wmape);
    }

    #[test]
    fn caching_reconstruction_does_not_grow_with_queries() {
        let t = by_name(TemplateName::Homa).unwrap();
        let patients = synthesize(&t, 30, 8);
        let run = |q: usize| {
            let cell = PrivacyCell {
                template: t.name,
                mechanism: MechanismKind::Exponential,
                method: Method::MRoots,
                eps_r: 0.1,
                q,
                strategy: Strategy::RoundRobin,
                prior: PriorKind::Informed,
            };
            run_privacy_cell(&t, &patients, &cell, 250, 21, 1e-3).unwrap()
        };
        let a = run(1);
        let b = run(16);
        // cached draws: identical observations, bit-identical estimate
        assert_eq!(a.recon_wmape.to_bits(), b.recon_wmape.to_bits());
        for (x, y) in a.per_patient.iter().zip(&b.per_patient) {
            assert_eq!(x.abs_err, y.abs_err);
        }
    }

    #[test]
    fn fresh_reconstruction_improves_with_queries() {
        let t = by_name(TemplateName::Nlr).unwrap();
        let patients = synthesize(&t, 120, 6);
        let run = |q: usize| {
            let cell = PrivacyCell {
                template: t.name,
                mechanism: MechanismKind::Exponential,
                method: Method::MAll,
                eps_r: 0.1,
                q,
                strategy: Strategy::RoundRobin,
                prior: PriorKind::Uniform,
            };
            run_privacy_cell(&t, &patients, &cell, 250, 31, 1e-3).unwrap().recon_wmape
        };
        assert!(run(16) < run(1));
    }

    #[test]
    fn focused_scope_reports_the_target_root() {
        let t = by_name(TemplateName::Homa).unwrap();
        let patients = synthesize(&t, 25, 9);
        let cell = PrivacyCell {
            template: t.name,
            mechanism: MechanismKind::Exponential,
            method: Method::MAll,
            eps_r: 0.1,
            q: 4,
            strategy: Strategy::Focused,
            prior: PriorKind::Uniform,
        };
        let s = run_privacy_cell(&t, &patients, &cell, 250, 14, 1e-3).unwrap();
        assert_eq!(s.scope, "targeted-root");
        let opt = privacy_allocation(Method::MOpt, &t, MechanismKind::Exponential, 250, 0.1, 1e-3)
            .unwrap();
        let focus = focus_root(&opt);
        assert_eq!(s.recon_wmape, s.per_root_wmape[focus]);
    }

    #[test]
    fn closed_form_power_law_slope_is_one_half() {
        let templates = registry().unwrap();
        let slope = allocation_power_law(
            &templates,
            AllocationMethod::ClosedForm,
            MechanismKind::Exponential,
            500,
            0.1,
            2,
            1e-4,
        )
        .unwrap();
        assert!((slope - 0.5).abs() < 1e-9, "slope {slope}");
    }

    #[test]
    fn csv_and_json_writers_round_trip() {
        let t = by_name(TemplateName::Nlr).unwrap();
        let patients = synthesize(&t, 10, 2);
        let cell = UtilityCell {
            template: t.name,
            mechanism: MechanismKind::BoundedLaplace,
            method: Method::MAll,
            epsilon: 0.5,
            multiplier: 1,
        };
        let (rows, summary) = run_utility_cell(&t, &patients, &cell, 150, 13, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("rows.csv");
        let json_path = dir.path().join("summary.json");
        write_csv(&rows, &csv_path).unwrap();
        write_json(&[summary], &json_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.lines().count() == rows.len() + 1);
        assert!(text.contains("NLR"));
        let parsed: Vec<UtilitySummary> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed[0].template, "NLR");
    }

    #[test]
    fn sweeps_run_end_to_end() {
        let spec = SweepSpec {
            experiment: Experiment::Utility,
            templates: vec![TemplateName::Homa],
            methods: vec![Method::MRoots],
            epsilons: vec![0.5],
            multipliers: vec![2],
            patients: 12,
            m: 120,
            seed: 4,
            ..SweepSpec::default()
        };
        let t = by_name(TemplateName::Homa).unwrap();
        let pop = synthesize(&t, spec.patients, spec.seed);
        let (rows, summaries) = run_utility_sweep(&spec, std::slice::from_ref(&t), std::slice::from_ref(&pop)).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(summaries.len(), 1);

        let spec2 = SweepSpec {
            experiment: Experiment::Privacy,
            templates: vec![TemplateName::Homa],
            methods: vec![Method::MAll],
            eps_r: vec![0.2],
            qs: vec![2],
            strategies: vec![Strategy::RoundRobin],
            priors: vec![PriorKind::Informed],
            patients: 12,
            m: 120,
            seed: 4,
            ..SweepSpec::default()
        };
        let res = run_privacy_sweep(&spec2, &[t], &[pop]).unwrap();
        assert_eq!(res.len(), 1);
        assert!(res[0].recon_wmape.is_finite());
    }
}
