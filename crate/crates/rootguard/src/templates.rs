//! The eight clinical diagnostic templates.
//!
//! Each template names its root attributes, the published target formula
//! `g`, closed-form partial derivatives of `g`, and the published risk
//! thresholds. Threshold boundary handling encodes the exact inequality
//! of each band (a value equal to a cutoff written with `<=` stays in the
//! lower class; a cutoff written with `>=` promotes it).
//!
//! Root domain bounds and population statistics ship as placeholder data
//! (`data/root_stats.json`, flagged NON-PAPER); loading a population CSV
//! replaces them with min/max/mean/std computed from the rows.

use crate::error::Error;
use crate::mechanisms::Grid;
use crate::population::PopulationStats;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    I,
    II,
}

fn default_category() -> Category {
    Category::II
}

/// One private attribute: bounded domain plus population statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RootSpec {
    pub name: String,
    /// Template roots are numeric measurements; identifier-like
    /// attributes never appear in a formula, so II is the default.
    #[serde(default = "default_category")]
    pub category: Category,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
    pub std: f64,
}

impl RootSpec {
    fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::Config(format!(
                "root '{}': lower must be below upper",
                self.name
            )));
        }
        if !(self.mean >= self.lower && self.mean <= self.upper) {
            return Err(Error::Config(format!(
                "root '{}': mean {} outside [{}, {}]",
                self.name, self.mean, self.lower, self.upper
            )));
        }
        if !(self.std > 0.0) {
            return Err(Error::Config(format!("root '{}': std must be positive", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateName {
    Anemia,
    Fib4,
    Aip,
    Conicity,
    Vascular,
    Tyg,
    Homa,
    Nlr,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::Anemia,
        TemplateName::Fib4,
        TemplateName::Aip,
        TemplateName::Conicity,
        TemplateName::Vascular,
        TemplateName::Tyg,
        TemplateName::Homa,
        TemplateName::Nlr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateName::Anemia => "ANEMIA",
            TemplateName::Fib4 => "FIB4",
            TemplateName::Aip => "AIP",
            TemplateName::Conicity => "CONICITY",
            TemplateName::Vascular => "VASCULAR",
            TemplateName::Tyg => "TYG",
            TemplateName::Homa => "HOMA",
            TemplateName::Nlr => "NLR",
        }
    }

    /// Stable numeric id used in RNG stream keys.
    pub fn id(&self) -> u32 {
        TemplateName::ALL.iter().position(|t| t == self).unwrap() as u32
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ANEMIA" => Ok(TemplateName::Anemia),
            "FIB4" | "FIB-4" => Ok(TemplateName::Fib4),
            "AIP" => Ok(TemplateName::Aip),
            "CONICITY" => Ok(TemplateName::Conicity),
            "VASCULAR" => Ok(TemplateName::Vascular),
            "TYG" => Ok(TemplateName::Tyg),
            "HOMA" | "HOMA-IR" => Ok(TemplateName::Homa),
            "NLR" => Ok(TemplateName::Nlr),
            other => Err(Error::Config(format!("unknown template '{other}'"))),
        }
    }
}

/// One risk cutoff. `eq_goes_lower` records which side of the band the
/// published inequality puts a value that lands exactly on the cutoff.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub eq_goes_lower: bool,
}

/// Ordinal risk class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskClass {
    pub index: usize,
    pub label: String,
}

/// A deterministic intermediate node computable from a subset of roots.
/// Released by the controller as post-processing of cached noised roots.
#[derive(Clone)]
pub struct DerivedNode {
    pub id: &'static str,
    /// Indices into the template's root vector, in argument order.
    pub parents: Vec<usize>,
    pub func: fn(&[f64]) -> Result<f64>,
}

impl fmt::Debug for DerivedNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DerivedNode")
            .field("id", &self.id)
            .field("parents", &self.parents)
            .finish()
    }
}

/// A root declared to be a deterministic function of other roots.
/// The controller recomputes it from its parents' cached noised values
/// instead of spending budget on it.
#[derive(Clone)]
pub struct RootDependency {
    pub root: usize,
    pub parents: Vec<usize>,
    pub func: fn(&[f64]) -> f64,
}

impl fmt::Debug for RootDependency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RootDependency")
            .field("root", &self.root)
            .field("parents", &self.parents)
            .finish()
    }
}

/// A clinical profile: root specs, target formula with analytic partials,
/// risk thresholds, and the derived nodes the controller may release.
#[derive(Debug, Clone)]
pub struct Template {
    pub name: TemplateName,
    pub roots: Vec<RootSpec>,
    pub thresholds: Vec<Threshold>,
    pub class_labels: Vec<&'static str>,
    pub target_lower: f64,
    pub target_upper: f64,
    pub derived: Vec<DerivedNode>,
    pub dependencies: Vec<RootDependency>,
}

fn guard_nonzero(value: f64, root: &str) -> Result<f64> {
    if value == 0.0 {
        return Err(Error::Evaluation {
            root: root.to_string(),
            reason: "division by zero".to_string(),
        });
    }
    Ok(value)
}

impl Template {
    pub fn k(&self) -> usize {
        self.roots.len()
    }

    pub fn class_count(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn root_index(&self, name: &str) -> Option<usize> {
        self.roots.iter().position(|r| r.name == name)
    }

    pub fn root_grid(&self, i: usize, m: usize) -> Result<Grid> {
        let r = &self.roots[i];
        Grid::new(r.lower, r.upper, m)
    }

    pub fn target_grid(&self, m: usize) -> Result<Grid> {
        Grid::new(self.target_lower, self.target_upper, m)
    }

    pub fn derived_node(&self, id: &str) -> Option<&DerivedNode> {
        self.derived.iter().find(|d| d.id == id)
    }

    /// Declare a root as a deterministic function of other roots
    /// (Level-1 structural knowledge).
    pub fn add_dependency(&mut self, dep: RootDependency) {
        self.dependencies.push(dep);
    }

    fn check_inputs(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.k() {
            return Err(Error::Config(format!(
                "{}: expected {} root values, got {}",
                self.name,
                self.k(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Evaluate the published target formula `g(x)`.
    pub fn evaluate_target(&self, x: &[f64]) -> Result<f64> {
        self.check_inputs(x)?;
        match self.name {
            TemplateName::Anemia => {
                // MCHC = 100 * Hb / Hct (RBC does not enter)
                let (hb, hct) = (x[0], x[1]);
                Ok(100.0 * hb / guard_nonzero(hct, "Hct")?)
            }
            TemplateName::Fib4 => {
                let (age, ast, plt, alt) = (x[0], x[1], x[2], x[3]);
                if alt <= 0.0 {
                    return Err(Error::Evaluation {
                        root: "ALT".into(),
                        reason: "sqrt of non-positive value".into(),
                    });
                }
                Ok(age * ast / (guard_nonzero(plt, "PLT")? * alt.sqrt()))
            }
            TemplateName::Aip => {
                let (tg, hdl) = (x[0], x[1]);
                let ratio = tg / guard_nonzero(hdl, "HDL")?;
                if ratio <= 0.0 {
                    return Err(Error::Evaluation {
                        root: "TG".into(),
                        reason: "log of non-positive ratio".into(),
                    });
                }
                Ok(ratio.log10())
            }
            TemplateName::Conicity => {
                let (waist, wt, ht) = (x[0], x[1], x[2]);
                guard_nonzero(ht, "ht")?;
                let ratio = wt / ht;
                if ratio <= 0.0 {
                    return Err(Error::Evaluation {
                        root: "wt".into(),
                        reason: "sqrt of non-positive ratio".into(),
                    });
                }
                Ok(waist / (0.109 * ratio.sqrt()))
            }
            TemplateName::Vascular => {
                let (sbp, dbp) = (x[0], x[1]);
                Ok((sbp - dbp) / guard_nonzero(sbp, "SBP")?)
            }
            TemplateName::Tyg => {
                let (tg, glu) = (x[0], x[1]);
                let prod = tg * glu / 2.0;
                if prod <= 0.0 {
                    return Err(Error::Evaluation {
                        root: "TG".into(),
                        reason: "log of non-positive product".into(),
                    });
                }
                Ok(prod.ln())
            }
            TemplateName::Homa => {
                let (glu, ins) = (x[0], x[1]);
                Ok(glu * ins / 405.0)
            }
            TemplateName::Nlr => {
                let (neu, lym) = (x[0], x[1]);
                Ok(neu / guard_nonzero(lym, "LYM")?)
            }
        }
    }

    /// Closed-form partials of the target at `x`.
    pub fn target_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x)?;
        match self.name {
            TemplateName::Anemia => {
                let (hb, hct) = (x[0], x[1]);
                guard_nonzero(hct, "Hct")?;
                Ok(vec![100.0 / hct, -100.0 * hb / (hct * hct), 0.0])
            }
            TemplateName::Fib4 => {
                let (age, ast, plt, alt) = (x[0], x[1], x[2], x[3]);
                guard_nonzero(plt, "PLT")?;
                if alt <= 0.0 {
                    return Err(Error::Evaluation {
                        root: "ALT".into(),
                        reason: "sqrt of non-positive value".into(),
                    });
                }
                let sqrt_alt = alt.sqrt();
                Ok(vec![
                    ast / (plt * sqrt_alt),
                    age / (plt * sqrt_alt),
                    -age * ast / (plt * plt * sqrt_alt),
                    -0.5 * age * ast / (plt * alt * sqrt_alt),
                ])
            }
            TemplateName::Aip => {
                let (tg, hdl) = (x[0], x[1]);
                guard_nonzero(tg, "TG")?;
                guard_nonzero(hdl, "HDL")?;
                let ln10 = std::f64::consts::LN_10;
                Ok(vec![1.0 / (tg * ln10), -1.0 / (hdl * ln10), 0.0])
            }
            TemplateName::Conicity => {
                let g = self.evaluate_target(x)?;
                let (waist, wt, ht) = (x[0], x[1], x[2]);
                guard_nonzero(waist, "waist")?;
                Ok(vec![g / waist, -g / (2.0 * wt), g / (2.0 * ht)])
            }
            TemplateName::Vascular => {
                let (sbp, dbp) = (x[0], x[1]);
                guard_nonzero(sbp, "SBP")?;
                Ok(vec![dbp / (sbp * sbp), -1.0 / sbp])
            }
            TemplateName::Tyg => {
                let (tg, glu) = (x[0], x[1]);
                guard_nonzero(tg, "TG")?;
                guard_nonzero(glu, "Glu")?;
                Ok(vec![1.0 / tg, 1.0 / glu])
            }
            TemplateName::Homa => Ok(vec![x[1] / 405.0, x[0] / 405.0]),
            TemplateName::Nlr => {
                let (neu, lym) = (x[0], x[1]);
                guard_nonzero(lym, "LYM")?;
                Ok(vec![1.0 / lym, -neu / (lym * lym)])
            }
        }
    }

    /// Map a target value to its risk class.
    pub fn classify(&self, y: f64) -> Result<RiskClass> {
        if !y.is_finite() {
            return Err(Error::Evaluation {
                root: "target".into(),
                reason: format!("non-finite target value {y}"),
            });
        }
        let index = self
            .thresholds
            .iter()
            .filter(|th| y > th.value || (y == th.value && !th.eq_goes_lower))
            .count();
        Ok(RiskClass {
            index,
            label: self.class_labels[index].to_string(),
        })
    }

    pub fn population_means(&self) -> Vec<f64> {
        self.roots.iter().map(|r| r.mean).collect()
    }

    /// Rebuild the template around measured population statistics:
    /// bounds become the observed min/max, means and stds the observed
    /// moments, and the target grid is recomputed from the new root box.
    pub fn with_stats(&self, stats: &PopulationStats) -> Result<Template> {
        let mut t = self.clone();
        for (i, root) in t.roots.iter_mut().enumerate() {
            let s = &stats.per_root[i];
            root.lower = s.min;
            root.upper = s.max;
            root.mean = s.mean;
            root.std = s.std;
            root.validate()?;
        }
        let (lo, hi) = target_range(&t)?;
        t.target_lower = lo;
        t.target_upper = hi;
        Ok(t)
    }
}

/// Range of the target formula over the root box, by corner enumeration
/// (every template formula is monotone in each argument on its domain)
/// plus the mean point.
fn target_range(t: &Template) -> Result<(f64, f64)> {
    let k = t.k();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut probe = |x: &[f64]| -> Result<()> {
        let y = t.evaluate_target(x)?;
        lo = lo.min(y);
        hi = hi.max(y);
        Ok(())
    };
    for mask in 0..(1usize << k) {
        let corner: Vec<f64> = (0..k)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    t.roots[i].upper
                } else {
                    t.roots[i].lower
                }
            })
            .collect();
        probe(&corner)?;
    }
    probe(&t.population_means())?;
    if !(hi > lo) {
        return Err(Error::Config(format!("{}: degenerate target range", t.name)));
    }
    Ok((lo, hi))
}

fn mcv(x: &[f64]) -> Result<f64> {
    Ok(10.0 * x[0] / guard_nonzero(x[1], "RBC")?)
}

fn mch(x: &[f64]) -> Result<f64> {
    Ok(10.0 * x[0] / guard_nonzero(x[1], "RBC")?)
}

fn non_hdl(x: &[f64]) -> Result<f64> {
    Ok(x[0] - x[1])
}

fn friedewald_ldl(x: &[f64]) -> Result<f64> {
    Ok(x[0] - x[1] - x[2] / 5.0)
}

fn pulse_pressure(x: &[f64]) -> Result<f64> {
    Ok(x[0] - x[1])
}

fn mean_arterial_pressure(x: &[f64]) -> Result<f64> {
    Ok(x[1] + (x[0] - x[1]) / 3.0)
}

fn mid_blood_pressure(x: &[f64]) -> Result<f64> {
    Ok((x[0] + x[1]) / 2.0)
}

fn nlr_sum(x: &[f64]) -> Result<f64> {
    Ok(x[0] + x[1])
}

fn nlr_diff(x: &[f64]) -> Result<f64> {
    Ok((x[0] - x[1]).abs())
}

fn bmi(x: &[f64]) -> Result<f64> {
    let ht = guard_nonzero(x[1], "ht")?;
    Ok(x[0] / (ht * ht))
}

fn waist_height_ratio(x: &[f64]) -> Result<f64> {
    Ok(x[0] / guard_nonzero(x[1], "ht")?)
}

#[derive(Deserialize)]
struct StatsFile {
    templates: HashMap<String, Vec<RootSpec>>,
}

fn derived_nodes(name: TemplateName) -> Vec<DerivedNode> {
    match name {
        TemplateName::Anemia => vec![
            // MCV = 10 * Hct / RBC, MCH = 10 * Hb / RBC
            DerivedNode { id: "mcv", parents: vec![1, 2], func: mcv },
            DerivedNode { id: "mch", parents: vec![0, 2], func: mch },
        ],
        TemplateName::Aip => vec![
            DerivedNode { id: "non_hdl", parents: vec![2, 1], func: non_hdl },
            DerivedNode { id: "ldl", parents: vec![2, 1, 0], func: friedewald_ldl },
        ],
        TemplateName::Vascular => vec![
            DerivedNode { id: "pp", parents: vec![0, 1], func: pulse_pressure },
            DerivedNode { id: "map", parents: vec![0, 1], func: mean_arterial_pressure },
            DerivedNode { id: "mbp", parents: vec![0, 1], func: mid_blood_pressure },
        ],
        TemplateName::Nlr => vec![
            DerivedNode { id: "nlr_sum", parents: vec![0, 1], func: nlr_sum },
            DerivedNode { id: "nlr_diff", parents: vec![0, 1], func: nlr_diff },
        ],
        TemplateName::Conicity => vec![
            DerivedNode { id: "bmi", parents: vec![1, 2], func: bmi },
            DerivedNode { id: "whtr", parents: vec![0, 2], func: waist_height_ratio },
        ],
        TemplateName::Fib4 | TemplateName::Tyg | TemplateName::Homa => vec![],
    }
}

fn thresholds_for(name: TemplateName) -> (Vec<Threshold>, Vec<&'static str>) {
    match name {
        // hypochromic < 32, normochromic 32 <= MCHC <= 36, hyperchromic > 36
        TemplateName::Anemia => (
            vec![
                Threshold { value: 32.0, eq_goes_lower: false },
                Threshold { value: 36.0, eq_goes_lower: true },
            ],
            vec!["hypochromic", "normochromic", "hyperchromic"],
        ),
        // low < 1.30, indeterminate 1.30 <= FIB-4 <= 2.67, high > 2.67
        TemplateName::Fib4 => (
            vec![
                Threshold { value: 1.30, eq_goes_lower: false },
                Threshold { value: 2.67, eq_goes_lower: true },
            ],
            vec!["low", "indeterminate", "high"],
        ),
        // low < 0.11, intermediate 0.11 <= AIP <= 0.21, high > 0.21
        TemplateName::Aip => (
            vec![
                Threshold { value: 0.11, eq_goes_lower: false },
                Threshold { value: 0.21, eq_goes_lower: true },
            ],
            vec!["low", "intermediate", "high"],
        ),
        // central obesity when CI > 1.25
        TemplateName::Conicity => (
            vec![Threshold { value: 1.25, eq_goes_lower: true }],
            vec!["normal", "central-obesity"],
        ),
        // high stiffness when PPI > 0.60
        TemplateName::Vascular => (
            vec![Threshold { value: 0.60, eq_goes_lower: true }],
            vec!["normal", "high-stiffness"],
        ),
        // insulin resistance when TyG > 8.5
        TemplateName::Tyg => (
            vec![Threshold { value: 8.5, eq_goes_lower: true }],
            vec!["not-resistant", "resistant"],
        ),
        // sensitive < 1.0, normal 1.0 <= HOMA < 2.5, resistant >= 2.5
        TemplateName::Homa => (
            vec![
                Threshold { value: 1.0, eq_goes_lower: false },
                Threshold { value: 2.5, eq_goes_lower: false },
            ],
            vec!["sensitive", "normal", "resistant"],
        ),
        // inflammation when NLR >= 3.0
        TemplateName::Nlr => (
            vec![Threshold { value: 3.0, eq_goes_lower: false }],
            vec!["normal", "inflammation"],
        ),
    }
}

/// Build the full template registry from the bundled placeholder stats.
pub fn registry() -> Result<Vec<Template>> {
    let file: StatsFile = serde_json::from_str(include_str!("../data/root_stats.json"))?;
    TemplateName::ALL
        .iter()
        .map(|&name| {
            let roots = file
                .templates
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("no root stats for {name}")))?
                .clone();
            for r in &roots {
                r.validate()?;
            }
            let (thresholds, class_labels) = thresholds_for(name);
            let mut t = Template {
                name,
                roots,
                thresholds,
                class_labels,
                target_lower: 0.0,
                target_upper: 1.0,
                derived: derived_nodes(name),
                dependencies: vec![],
            };
            let (lo, hi) = target_range(&t)?;
            t.target_lower = lo;
            t.target_upper = hi;
            Ok(t)
        })
        .collect()
}

/// Look up one template by name.
pub fn by_name(name: TemplateName) -> Result<Template> {
    registry()?
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("template {name} missing from registry")))
}
