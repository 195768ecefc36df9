//! Multi-turn sanitization controller.
//!
//! A session holds one patient's true root values and answers a stream
//! of queries under one of three release methods:
//!
//! * `MAll`: every query is answered with fresh noise, so the effective
//!   guarantee on a root degrades linearly with its release count;
//! * `MRoots`: each root is noised exactly once at session start and
//!   every later answer, including derived nodes and the target, is
//!   post-processing of that cache;
//! * `MOpt`: the same caching protocol as `MRoots`; it differs only in
//!   the allocation handed in (the optimized split).
//!
//! Roots declared as deterministic functions of other roots are never
//! drawn; they are recomputed from their parents' released values, which
//! both saves budget and keeps the released record arithmetically
//! consistent.
//!
//! Identifier-like attributes are sanitized with a keyed format-
//! preserving permutation (`sanitize_category1`), not noise.

use crate::allocator::Allocation;
use crate::error::Error;
use crate::mechanisms::{sample, Grid, MechanismKind, NoiseParams};
use crate::rng::{stream, StreamKey};
use crate::templates::{RiskClass, Template};
use crate::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    MAll,
    MRoots,
    MOpt,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MAll => "m-all",
            Method::MRoots => "m-roots",
            Method::MOpt => "m-opt",
        }
    }

    pub fn caches(&self) -> bool {
        matches!(self, Method::MRoots | Method::MOpt)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m-all" | "mall" | "all" => Ok(Method::MAll),
            "m-roots" | "mroots" | "roots" => Ok(Method::MRoots),
            "m-opt" | "mopt" | "opt" => Ok(Method::MOpt),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Request {
    /// One root attribute by index.
    Root(usize),
    /// One derived node by id.
    Derived(String),
    /// The target value plus its risk class, released as a single turn.
    TargetBundle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ReleaseValue {
    Scalar(f64),
    /// The bundle also carries the sanitized root values it was computed
    /// from; those values are themselves releases, so exposing them adds
    /// nothing beyond what the turn already spent.
    Bundle {
        roots: Vec<f64>,
        target: f64,
        class: RiskClass,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Release {
    pub turn: usize,
    pub request: Request,
    pub value: ReleaseValue,
    /// Fresh budget consumed by this turn (0 for post-processing).
    pub eps_spent: f64,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub method: Method,
    pub mechanism: MechanismKind,
    pub allocation: Allocation,
    pub m: usize,
    pub seed: u64,
    pub patient: u32,
    /// Under `MAll`, whether a target bundle redraws every root (the
    /// default) or reuses each root's latest released draw.
    pub fresh_target_draw: bool,
}

pub struct Session {
    cfg: SessionConfig,
    template: Template,
    truth: Vec<f64>,
    /// Latest released index per root (the only draw under caching).
    cache: Vec<Option<usize>>,
    /// Next draw index per root; also advanced for derived-node draws.
    draws: Vec<u32>,
    /// Derived-node draw counters under `MAll`, keyed by ordinal.
    derived_draws: Vec<u32>,
    log: Vec<Release>,
    spent: f64,
}

impl Session {
    /// Open a session. Under the caching methods every non-dependent
    /// root is drawn here, at draw index 0; dependent roots are
    /// recomputed from their parents' draws.
    pub fn new(template: Template, truth: Vec<f64>, cfg: SessionConfig) -> Result<Session> {
        if truth.len() != template.k() {
            return Err(Error::Config(format!(
                "{}: expected {} true values, got {}",
                template.name,
                template.k(),
                truth.len()
            )));
        }
        if cfg.allocation.eps.len() != template.k() {
            return Err(Error::Config(format!(
                "{}: allocation covers {} roots, template has {}",
                template.name,
                cfg.allocation.eps.len(),
                template.k()
            )));
        }
        for (i, (&x, r)) in truth.iter().zip(&template.roots).enumerate() {
            if !(x >= r.lower && x <= r.upper) {
                return Err(Error::Request(format!(
                    "root {i} ('{}') value {x} outside [{}, {}]",
                    r.name, r.lower, r.upper
                )));
            }
        }
        let k = template.k();
        let mut s = Session {
            derived_draws: vec![0; template.derived.len()],
            cache: vec![None; k],
            draws: vec![0; k],
            log: Vec::new(),
            spent: 0.0,
            cfg,
            template,
            truth,
        };
        if s.cfg.method.caches() {
            for i in 0..k {
                if s.is_dependent(i) {
                    continue;
                }
                s.draw_root(i)?;
            }
        }
        Ok(s)
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn log(&self) -> &[Release] {
        &self.log
    }

    /// Fresh budget consumed so far (init draws included).
    pub fn spent(&self) -> f64 {
        self.spent
    }

    fn is_dependent(&self, root: usize) -> bool {
        self.template.dependencies.iter().any(|d| d.root == root)
    }

    fn grid(&self, root: usize) -> Result<Grid> {
        self.template.root_grid(root, self.cfg.m)
    }

    /// Draw fresh noise for a root, advancing its draw counter.
    fn draw_root(&mut self, root: usize) -> Result<usize> {
        let grid = self.grid(root)?;
        let params = NoiseParams::new(self.cfg.mechanism, self.cfg.allocation.eps[root])?;
        let t = grid.to_index(self.truth[root])?;
        let mut rng = stream(StreamKey {
            seed: self.cfg.seed,
            template: self.template.name.id(),
            patient: self.cfg.patient,
            root: root as u32,
            draw: self.draws[root],
        });
        let s = sample(&params, t, &grid, &mut rng)?;
        self.draws[root] += 1;
        self.spent += self.cfg.allocation.eps[root];
        self.cache[root] = Some(s);
        Ok(s)
    }

    /// Released value of a root, drawing if the method requires it.
    /// Returns the value and the fresh budget it cost.
    fn root_value(&mut self, root: usize) -> Result<(f64, f64)> {
        if root >= self.template.k() {
            return Err(Error::Request(format!(
                "{}: no root at index {root}",
                self.template.name
            )));
        }
        if let Some(dep) = self
            .template
            .dependencies
            .iter()
            .find(|d| d.root == root)
            .cloned()
        {
            // dependent root: recompute from parents' released values
            let mut args = Vec::with_capacity(dep.parents.len());
            let mut cost = 0.0;
            for &p in &dep.parents {
                if dep.parents.contains(&root) || p == root {
                    return Err(Error::Config(format!(
                        "{}: root {root} depends on itself",
                        self.template.name
                    )));
                }
                let (v, c) = self.root_value(p)?;
                args.push(v);
                cost += c;
            }
            return Ok(((dep.func)(&args), cost));
        }
        if self.cfg.method.caches() {
            let s = self.cache[root].ok_or_else(|| {
                Error::Protocol(format!("root {root} missing from the session cache"))
            })?;
            return Ok((self.grid(root)?.from_index(s)?, 0.0));
        }
        let before = self.spent;
        let s = self.draw_root(root)?;
        Ok((self.grid(root)?.from_index(s)?, self.spent - before))
    }

    /// Latest released value of a root without spending anything; draws
    /// once if nothing has been released yet.
    fn root_value_reuse(&mut self, root: usize) -> Result<(f64, f64)> {
        if self.is_dependent(root) || self.cfg.method.caches() {
            return self.root_value(root);
        }
        match self.cache[root] {
            Some(s) => Ok((self.grid(root)?.from_index(s)?, 0.0)),
            None => self.root_value(root),
        }
    }

    /// Range of a derived node over its parents' domain box, by corner
    /// enumeration. Every registered node is monotone per argument.
    fn derived_grid(&self, ord: usize) -> Result<Grid> {
        let node = &self.template.derived[ord];
        let np = node.parents.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for mask in 0..(1usize << np) {
            let corner: Vec<f64> = node
                .parents
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    if mask >> j & 1 == 1 {
                        self.template.roots[p].upper
                    } else {
                        self.template.roots[p].lower
                    }
                })
                .collect();
            let y = (node.func)(&corner)?;
            lo = lo.min(y);
            hi = hi.max(y);
        }
        if !(hi > lo) {
            // constant node over the box; widen to a token interval
            hi = lo + 1.0;
        }
        Grid::new(lo, hi, self.cfg.m)
    }

    fn answer_derived(&mut self, id: &str) -> Result<(f64, f64)> {
        let ord = self
            .template
            .derived
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| {
                Error::Request(format!("{}: no derived node '{id}'", self.template.name))
            })?;
        let node = self.template.derived[ord].clone();
        if self.cfg.method.caches() {
            // post-processing of the cached roots
            let mut args = Vec::with_capacity(node.parents.len());
            for &p in &node.parents {
                args.push(self.root_value(p)?.0);
            }
            return Ok(((node.func)(&args)?, 0.0));
        }
        // MAll: noise the node's true value on its own grid, spending the
        // smallest parent budget (a conservative fresh release)
        let truth_args: Vec<f64> = node.parents.iter().map(|&p| self.truth[p]).collect();
        let y = (node.func)(&truth_args)?;
        let grid = self.derived_grid(ord)?;
        let eps = node
            .parents
            .iter()
            .map(|&p| self.cfg.allocation.eps[p])
            .fold(f64::INFINITY, f64::min);
        let params = NoiseParams::new(self.cfg.mechanism, eps)?;
        let t = grid.to_index(y.clamp(grid.lower(), grid.upper()))?;
        let mut rng = stream(StreamKey {
            seed: self.cfg.seed,
            template: self.template.name.id(),
            patient: self.cfg.patient,
            // derived nodes draw on a namespace above the root indices
            root: (self.template.k() + ord) as u32,
            draw: self.derived_draws[ord],
        });
        let s = sample(&params, t, &grid, &mut rng)?;
        self.derived_draws[ord] += 1;
        self.spent += eps;
        Ok((grid.from_index(s)?, eps))
    }

    /// Answer one query and append it to the transcript.
    pub fn answer(&mut self, request: Request) -> Result<&Release> {
        let (value, eps_spent) = match &request {
            Request::Root(i) => {
                let (v, c) = self.root_value(*i)?;
                (ReleaseValue::Scalar(v), c)
            }
            Request::Derived(id) => {
                let (v, c) = self.answer_derived(id)?;
                (ReleaseValue::Scalar(v), c)
            }
            Request::TargetBundle => {
                let mut cost = 0.0;
                let mut xs = Vec::with_capacity(self.template.k());
                for i in 0..self.template.k() {
                    let (v, c) = if self.cfg.fresh_target_draw {
                        self.root_value(i)?
                    } else {
                        self.root_value_reuse(i)?
                    };
                    xs.push(v);
                    cost += c;
                }
                let target = self.template.evaluate_target(&xs)?;
                let class = self.template.classify(target)?;
                (
                    ReleaseValue::Bundle {
                        roots: xs,
                        target,
                        class,
                    },
                    cost,
                )
            }
        };
        let release = Release {
            turn: self.log.len(),
            request,
            value,
            eps_spent,
        };
        self.log.push(release);
        Ok(self.log.last().unwrap())
    }

    /// Total fresh draws made for a root so far.
    pub fn draw_count(&self, root: usize) -> u32 {
        self.draws[root]
    }

    /// Serialize the transcript as JSON lines.
    pub fn write_transcript<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for release in &self.log {
            serde_json::to_writer(&mut w, release)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Format-preserving keyed permutation of `{0, ..., n-1}` for
/// identifier-like attributes: a 4-round Feistel network with a hash
/// round function, cycle-walked back into the domain. The hash is a
/// deterministic mixing function here, not a cryptographic claim.
pub fn sanitize_category1(value: u64, n: u64, key: u64) -> Result<u64> {
    if n < 2 {
        return Err(Error::Config(format!("permutation domain must have >= 2 values, got {n}")));
    }
    if value >= n {
        return Err(Error::Request(format!("value {value} outside permutation domain 0..{n}")));
    }
    // half-width in bits covering sqrt of the smallest power-of-4 box >= n
    let bits = (64 - (n - 1).leading_zeros()).div_ceil(2).max(1);
    let mask = (1u64 << bits) - 1;
    let round = |half: u64, r: u32| -> u64 {
        let mut h = Sha256::new();
        h.update(b"rootguard-perm-v1");
        h.update(key.to_le_bytes());
        h.update(r.to_le_bytes());
        h.update(half.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap()) & mask
    };
    let mut x = value;
    loop {
        let (mut l, mut r) = (x >> bits, x & mask);
        for i in 0..4 {
            let next = l ^ round(r, i);
            l = r;
            r = next;
        }
        x = (l << bits) | r;
        if x < n {
            return Ok(x);
        }
        // cycle-walk: re-encrypt until the output lands inside the domain
    }
}
