//! Patient population ingestion and synthesis.
//!
//! A population CSV carries one row per patient with an `id` column and
//! one numeric column per root attribute of the chosen template. The
//! first 200 rows become the evaluation split; everything after feeds
//! the attacker's prior and the population statistics that rebind the
//! template's domains.

use crate::error::Error;
use crate::rng::{stream, StreamKey};
use crate::templates::Template;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Rows reserved for evaluation; the remainder is holdout.
pub const TEST_SPLIT: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    /// Root values in the template's declared root order.
    pub values: Vec<f64>,
}

/// Per-root sample statistics over the holdout split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RootStat {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationStats {
    pub per_root: Vec<RootStat>,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub test: Vec<Patient>,
    pub holdout: Vec<Patient>,
}

impl Population {
    /// Holdout statistics; falls back to the evaluation split when the
    /// file had no rows past the split point.
    pub fn stats(&self) -> Result<PopulationStats> {
        let rows = if self.holdout.is_empty() {
            &self.test
        } else {
            &self.holdout
        };
        compute_stats(rows)
    }
}

fn compute_stats(rows: &[Patient]) -> Result<PopulationStats> {
    if rows.is_empty() {
        return Err(Error::Config("population has no rows".into()));
    }
    let k = rows[0].values.len();
    let n = rows.len() as f64;
    let per_root = (0..k)
        .map(|i| {
            let xs: Vec<f64> = rows.iter().map(|p| p.values[i]).collect();
            let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let std = var.sqrt().max(1e-12);
            RootStat { min, max, mean, std }
        })
        .collect();
    Ok(PopulationStats { per_root })
}

/// Load a population CSV for a template. The header must contain `id`
/// plus every root name; extra columns are ignored.
pub fn load_csv(path: &Path, template: &Template) -> Result<Population> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
            })
    };
    let id_col = find("id")?;
    let root_cols: Vec<usize> = template
        .roots
        .iter()
        .map(|r| find(&r.name))
        .collect::<Result<_>>()?;

    let mut patients = Vec::new();
    for (row_i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row_i + 2; // 1-based, after the header line
        let id = record
            .get(id_col)
            .ok_or_else(|| Error::Parse {
                row,
                column: "id".into(),
                reason: "missing field".into(),
            })?
            .to_string();
        let mut values = Vec::with_capacity(root_cols.len());
        for (&col, spec) in root_cols.iter().zip(&template.roots) {
            let raw = record.get(col).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: spec.name.clone(),
                reason: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: spec.name.clone(),
                    reason: format!("non-finite value {v}"),
                });
            }
            values.push(v);
        }
        patients.push(Patient { id, values });
    }
    if patients.is_empty() {
        return Err(Error::Config(format!("{}: population CSV has no data rows", template.name)));
    }
    let holdout = patients.split_off(patients.len().min(TEST_SPLIT));
    Ok(Population {
        test: patients,
        holdout,
    })
}

/// Draw `n` synthetic patients by truncated-Gaussian rejection sampling
/// against each root's `[lower, upper]` domain.
pub fn synthesize(template: &Template, n: usize, seed: u64) -> Vec<Patient> {
    (0..n)
        .map(|p| {
            let values = template
                .roots
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut rng = stream(StreamKey {
                        seed,
                        template: template.name.id(),
                        patient: p as u32,
                        root: i as u32,
                        draw: u32::MAX, // synthesis namespace, disjoint from noise draws
                    });
                    loop {
                        // Box-Muller; rejection keeps the draw in-domain
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen();
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        let x = r.mean + r.std * z;
                        if x >= r.lower && x <= r.upper {
                            return x;
                        }
                    }
                })
                .collect();
            Patient {
                id: format!("synth-{p}"),
                values,
            }
        })
        .collect()
}
