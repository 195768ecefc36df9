//! Command-line front end for the sanitization library.
//!
//! Subcommands:
//! * `rq1`: utility sweep (released target error vs privacy level and
//!   turn budget);
//! * `rq2`: reconstruction sweep (MAP attacker error vs query count,
//!   strategy, and prior);
//! * `alloc-dump`: per-root budget allocations plus the power-law slope
//!   of epsilon against root influence;
//! * `table`: render a summary JSON file as an aligned text table;
//! * `synth`: write synthetic population CSVs;
//! * `validate`: run fast self-checks of the mechanism and allocator
//!   contracts.
//!
//! Sweeps read an optional TOML config mirroring the library's
//! `SweepSpec`; command-line flags override the file.

use clap::{Args, Parser, Subcommand};
use rootguard::allocator::{self, AllocationMethod};
use rootguard::controller::Method;
use rootguard::harness::{self, Experiment, PriorKind, SweepSpec};
use rootguard::mechanisms::{self, Grid, MechanismKind, NoiseParams};
use rootguard::population::{self, Patient};
use rootguard::templates::{registry, Template, TemplateName};
use rootguard::adversary::Strategy;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "rootguard",
    about = "Dependency-aware sanitization sweeps for multi-turn numeric releases",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// TOML file mirroring the sweep spec; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Templates to run (repeatable); default: all eight.
    #[arg(long = "template")]
    templates: Vec<String>,
    /// Noise mechanisms (exponential, bounded-laplace, staircase).
    #[arg(long = "mechanism")]
    mechanisms: Vec<String>,
    /// Release methods (m-all, m-roots, m-opt).
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Privacy levels (rq1) or per-root levels (rq2).
    #[arg(long = "eps")]
    eps: Vec<f64>,
    /// Turn-budget multipliers a, giving t = a*k + 1 (rq1 only).
    #[arg(long = "budget-mult")]
    budget_mult: Vec<u32>,
    /// Attacker query counts (rq2 only).
    #[arg(long = "q")]
    qs: Vec<usize>,
    /// Attacker priors: uniform, informed (rq2 only).
    #[arg(long = "prior")]
    priors: Vec<String>,
    /// Attacker strategies: focused (a), round-robin (b) (rq2 only).
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    /// Patients per template (synthetic) or test-split cap (loaded).
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid resolution m.
    #[arg(long)]
    m: Option<usize>,
    /// Population CSV with an id column plus one column per root.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Output directory for CSV/JSON results.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Utility sweep: released-target wMAPE and risk-class error.
    Rq1(SweepArgs),
    /// Reconstruction sweep: MAP attacker wMAPE per scope.
    Rq2(SweepArgs),
    /// Dump per-root allocations and the power-law slope.
    AllocDump {
        #[arg(long, default_value = "exponential")]
        mechanism: String,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long = "budget-mult", default_value_t = 2)]
        budget_mult: u32,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a summary JSON file as an aligned text table.
    Table { file: PathBuf },
    /// Write synthetic population CSVs, one per template.
    Synth {
        #[arg(long = "template")]
        templates: Vec<String>,
        #[arg(long, default_value_t = 200)]
        patients: usize,
        #[arg(long, default_value_t = 20260825)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run fast self-checks of the mechanism and allocator contracts.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> rootguard::Result<ExitCode> {
    match cli.command {
        Command::Rq1(args) => {
            let spec = build_spec(&args, Experiment::Utility)?;
            let (templates, populations) = prepare(&spec, args.population.as_deref())?;
            std::fs::create_dir_all(&args.out)?;
            let (rows, summaries) = harness::run_utility_sweep(&spec, &templates, &populations)?;
            harness::write_csv(&rows, &args.out.join("rq1_rows.csv"))?;
            harness::write_json(&summaries, &args.out.join("rq1_summary.json"))?;
            print_utility_table(&summaries);
            println!(
                "wrote {} rows to {}",
                rows.len(),
                args.out.join("rq1_rows.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Rq2(args) => {
            let spec = build_spec(&args, Experiment::Privacy)?;
            let (templates, populations) = prepare(&spec, args.population.as_deref())?;
            std::fs::create_dir_all(&args.out)?;
            let summaries = harness::run_privacy_sweep(&spec, &templates, &populations)?;
            let flat: Vec<PrivacyCsvRow> = summaries.iter().map(PrivacyCsvRow::from).collect();
            harness::write_csv(&flat, &args.out.join("rq2_summary.csv"))?;
            harness::write_json(&summaries, &args.out.join("rq2_summary.json"))?;
            print_privacy_table(&summaries);
            Ok(ExitCode::SUCCESS)
        }
        Command::AllocDump {
            mechanism,
            eps,
            budget_mult,
            m,
            population,
            out,
        } => {
            let kind = MechanismKind::from_str(&mechanism)?;
            let spec = SweepSpec::default();
            let (templates, _) = prepare_templates(&spec.templates, population.as_deref(), spec.patients, spec.seed)?;
            let rows = alloc_rows(&templates, kind, m, eps, budget_mult)?;
            print_alloc_table(&rows);
            for method in [AllocationMethod::ClosedForm, AllocationMethod::Numeric] {
                let slope = harness::allocation_power_law(
                    &templates,
                    method,
                    kind,
                    m,
                    eps,
                    budget_mult,
                    allocator::DEFAULT_EPS_MIN,
                )?;
                println!("power-law slope ({}): {slope:.4}", method.name());
            }
            if let Some(path) = out {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                harness::write_csv(&rows, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Table { file } => {
            render_table(&file)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            templates,
            patients,
            seed,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            for t in select_templates(&templates)? {
                let rows = population::synthesize(&t, patients, seed);
                let path = out.join(format!("{}.csv", t.name));
                write_population_csv(&t, &rows, &path)?;
                println!("wrote {} patients to {}", rows.len(), path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate => validate(),
    }
}

fn parse_each<T: FromStr<Err = rootguard::Error>>(raw: &[String]) -> rootguard::Result<Vec<T>> {
    raw.iter().map(|s| T::from_str(s)).collect()
}

fn select_templates(names: &[String]) -> rootguard::Result<Vec<Template>> {
    let all = registry()?;
    if names.is_empty() || names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(all);
    }
    let wanted: Vec<TemplateName> = parse_each(names)?;
    Ok(all
        .into_iter()
        .filter(|t| wanted.contains(&t.name))
        .collect())
}

/// Merge the optional TOML config with command-line overrides.
fn build_spec(args: &SweepArgs, experiment: Experiment) -> rootguard::Result<SweepSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| rootguard::Error::Config(format!("bad config file: {e}")))?
        }
        None => SweepSpec::default(),
    };
    spec.experiment = experiment;
    if !args.templates.is_empty() && !args.templates.iter().any(|n| n.eq_ignore_ascii_case("all"))
    {
        spec.templates = parse_each(&args.templates)?;
    }
    if !args.mechanisms.is_empty() {
        spec.mechanisms = parse_each(&args.mechanisms)?;
    }
    if !args.methods.is_empty() {
        spec.methods = parse_each(&args.methods)?;
    }
    if !args.eps.is_empty() {
        match experiment {
            Experiment::Utility => spec.epsilons = args.eps.clone(),
            Experiment::Privacy => spec.eps_r = args.eps.clone(),
        }
    }
    if !args.budget_mult.is_empty() {
        spec.multipliers = args.budget_mult.clone();
    }
    if !args.qs.is_empty() {
        spec.qs = args.qs.clone();
    }
    if !args.priors.is_empty() {
        spec.priors = parse_each(&args.priors)?;
    }
    if !args.strategies.is_empty() {
        spec.strategies = parse_each(&args.strategies)?;
    }
    if let Some(p) = args.patients {
        spec.patients = p;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(m) = args.m {
        spec.m = m;
    }
    spec.validate()?;
    Ok(spec)
}

/// Resolve templates and their patient lists for a sweep: loaded test
/// split when a population CSV is given, synthetic otherwise.
fn prepare(
    spec: &SweepSpec,
    population: Option<&Path>,
) -> rootguard::Result<(Vec<Template>, Vec<Vec<Patient>>)> {
    prepare_templates(&spec.templates, population, spec.patients, spec.seed)
        .and_then(|(templates, populations)| {
            if templates.len() != spec.templates.len() {
                return Err(rootguard::Error::Config(
                    "template selection did not resolve".into(),
                ));
            }
            Ok((templates, populations))
        })
}

fn prepare_templates(
    names: &[TemplateName],
    population: Option<&Path>,
    patients: usize,
    seed: u64,
) -> rootguard::Result<(Vec<Template>, Vec<Vec<Patient>>)> {
    let all = registry()?;
    let mut templates = Vec::new();
    let mut populations = Vec::new();
    for &name in names {
        let base = all
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| rootguard::Error::Config(format!("unknown template {name}")))?
            .clone();
        match population {
            Some(path) => {
                let pop = population::load_csv(path, &base)?;
                let rebound = base.with_stats(&pop.stats()?)?;
                let mut test = pop.test;
                test.truncate(patients.max(1));
                templates.push(rebound);
                populations.push(test);
            }
            None => {
                populations.push(population::synthesize(&base, patients, seed));
                templates.push(base);
            }
        }
    }
    Ok((templates, populations))
}

/// Flat form of a privacy summary for CSV output; the per-root vector is
/// joined into one semicolon-separated column.
#[derive(serde::Serialize)]
struct PrivacyCsvRow {
    template: String,
    mechanism: String,
    method: String,
    eps_r: f64,
    q: usize,
    strategy: String,
    prior: String,
    scope: String,
    patients: usize,
    recon_wmape: f64,
    recon_wmape_se: f64,
    per_root_wmape: String,
}

impl From<&harness::PrivacySummary> for PrivacyCsvRow {
    fn from(s: &harness::PrivacySummary) -> Self {
        PrivacyCsvRow {
            template: s.template.clone(),
            mechanism: s.mechanism.clone(),
            method: s.method.clone(),
            eps_r: s.eps_r,
            q: s.q,
            strategy: s.strategy.clone(),
            prior: s.prior.clone(),
            scope: s.scope.clone(),
            patients: s.patients,
            recon_wmape: s.recon_wmape,
            recon_wmape_se: s.recon_wmape_se,
            per_root_wmape: s
                .per_root_wmape
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

#[derive(serde::Serialize)]
struct AllocRow {
    template: String,
    root: String,
    h: f64,
    width: f64,
    eps_closed: f64,
    eps_numeric: f64,
    clamped: bool,
}

fn alloc_rows(
    templates: &[Template],
    kind: MechanismKind,
    m: usize,
    eps: f64,
    mult: u32,
) -> rootguard::Result<Vec<AllocRow>> {
    let mut rows = Vec::new();
    for t in templates {
        let budget = (mult as usize * t.k() + 1) as f64 * eps;
        let profile = allocator::compute_sensitivities(t, m)?;
        let closed = allocator::closed_form_allocation(
            &profile.weights(),
            budget,
            allocator::DEFAULT_EPS_MIN,
        )?;
        let numeric =
            allocator::numeric_allocation(&profile, kind, m, budget, allocator::DEFAULT_EPS_MIN)?;
        for i in 0..t.k() {
            rows.push(AllocRow {
                template: t.name.to_string(),
                root: t.roots[i].name.clone(),
                h: profile.h[i],
                width: t.roots[i].upper - t.roots[i].lower,
                eps_closed: closed.eps[i],
                eps_numeric: numeric.eps[i],
                clamped: numeric.clamped[i],
            });
        }
    }
    Ok(rows)
}

fn print_aligned(headers: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<String>| {
        let joined: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        println!("{}", joined.join("  "));
    };
    line(headers.iter().map(|h| h.to_string()).collect());
    for row in rows {
        line(row.clone());
    }
}

fn print_utility_table(summaries: &[harness::UtilitySummary]) {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.template.clone(),
                s.mechanism.clone(),
                s.method.clone(),
                format!("{:.3}", s.epsilon),
                s.multiplier.to_string(),
                format!("{:.2}", s.wmape),
                format!("{:.2}", s.wmape_se),
                format!("{:.2}", s.rce),
                format!("{:.2}", s.rce_se),
            ]
        })
        .collect();
    print_aligned(
        &["template", "mechanism", "method", "eps", "mult", "wMAPE", "SE", "RCE", "SE"],
        &rows,
    );
}

fn print_privacy_table(summaries: &[harness::PrivacySummary]) {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.template.clone(),
                s.method.clone(),
                s.prior.clone(),
                s.strategy.clone(),
                format!("{:.3}", s.eps_r),
                s.q.to_string(),
                s.scope.clone(),
                format!("{:.2}", s.recon_wmape),
                format!("{:.2}", s.recon_wmape_se),
            ]
        })
        .collect();
    print_aligned(
        &["template", "method", "prior", "strategy", "eps_r", "q", "scope", "wMAPE", "SE"],
        &rows,
    );
}

fn print_alloc_table(rows: &[AllocRow]) {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.template.clone(),
                r.root.clone(),
                format!("{:.4}", r.h),
                format!("{:.3}", r.width),
                format!("{:.5}", r.eps_closed),
                format!("{:.5}", r.eps_numeric),
                if r.clamped { "floor" } else { "" }.to_string(),
            ]
        })
        .collect();
    print_aligned(
        &["template", "root", "h", "width", "eps(closed)", "eps(numeric)", ""],
        &cells,
    );
}

/// Render either summary JSON flavor as a text table.
fn render_table(file: &Path) -> rootguard::Result<()> {
    let text = std::fs::read_to_string(file)?;
    if let Ok(s) = serde_json::from_str::<Vec<harness::UtilitySummary>>(&text) {
        print_utility_table(&s);
        return Ok(());
    }
    if let Ok(s) = serde_json::from_str::<Vec<harness::PrivacySummary>>(&text) {
        print_privacy_table(&s);
        return Ok(());
    }
    Err(rootguard::Error::Config(format!(
        "{} is not a recognized summary file",
        file.display()
    )))
}

fn write_population_csv(
    template: &Template,
    rows: &[Patient],
    path: &Path,
) -> rootguard::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(template.roots.iter().map(|r| r.name.clone()));
    writeln!(f, "{}", header.join(","))?;
    for p in rows {
        let mut cells = vec![p.id.clone()];
        cells.extend(p.values.iter().map(|v| format!("{v}")));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Fast self-checks over the library's core contracts; prints one line
/// per check and fails the process if any check fails.
fn validate() -> rootguard::Result<ExitCode> {
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        println!("{}  {name}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    // PMF normalization for every mechanism on a small grid
    let grid = Grid::new(0.0, 1.0, 101)?;
    let mut norm_ok = true;
    for kind in MechanismKind::ALL {
        for eps in [0.1, 1.0] {
            let p = NoiseParams::new(kind, eps)?;
            for t in [0.0, 33.7, 100.0] {
                let total: f64 = (0..101)
                    .map(|s| mechanisms::pmf(&p, s, t, &grid).unwrap())
                    .sum();
                norm_ok &= (total - 1.0).abs() < 1e-10;
            }
        }
    }
    check("pmf normalizes to 1", norm_ok);

    // distance-scaled ratio bound at adjacent integer centers
    let mut ratio_ok = true;
    for kind in MechanismKind::ALL {
        let eps = 0.5;
        let p = NoiseParams::new(kind, eps)?;
        for t in 0..100u32 {
            for s in 0..101 {
                let a = mechanisms::log_pmf(&p, s, t as f64, &grid)?;
                let b = mechanisms::log_pmf(&p, s, (t + 1) as f64, &grid)?;
                ratio_ok &= a - b <= eps + 1e-9;
            }
        }
    }
    check("adjacent-center likelihood ratio within e^eps", ratio_ok);

    // allocation conserves budget and pins zero-influence roots
    let templates = registry()?;
    let mut alloc_ok = true;
    for t in &templates {
        let profile = allocator::compute_sensitivities(t, 500)?;
        let alloc =
            allocator::closed_form_allocation(&profile.weights(), 1.0, allocator::DEFAULT_EPS_MIN)?;
        alloc_ok &= (alloc.total() - 1.0).abs() < 1e-9;
        for i in 0..t.k() {
            if profile.h[i] == 0.0 {
                alloc_ok &= alloc.clamped[i];
            }
        }
    }
    check("allocation conserves budget and pins flat roots", alloc_ok);

    // power-law slope of the closed-form split
    let slope = harness::allocation_power_law(
        &templates,
        AllocationMethod::ClosedForm,
        MechanismKind::Exponential,
        500,
        0.1,
        2,
        allocator::DEFAULT_EPS_MIN,
    )?;
    check("closed-form power-law slope is 0.50", (slope - 0.5).abs() < 1e-6);

    // caching determinism end to end
    let t = templates.iter().find(|t| t.name == TemplateName::Homa).unwrap();
    let pop = population::synthesize(t, 10, 3);
    let cell = harness::PrivacyCell {
        template: t.name,
        mechanism: MechanismKind::Exponential,
        method: Method::MRoots,
        eps_r: 0.1,
        q: 4,
        strategy: Strategy::RoundRobin,
        prior: PriorKind::Informed,
    };
    let a = harness::run_privacy_cell(t, &pop, &cell, 200, 5, 1e-3)?;
    let b = harness::run_privacy_cell(t, &pop, &cell, 200, 5, 1e-3)?;
    check(
        "sweep cells replay bit-identically",
        a.recon_wmape.to_bits() == b.recon_wmape.to_bits(),
    );

    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
