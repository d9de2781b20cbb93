//! Command-line driver: argument parsing, orchestration and output files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use effdid::efftreat::Design;
use effdid::{
    aggregate_time_average, compute_effective_treatment, default_design, estimate_cells, multiplier_bootstrap,
    pretrends_report, run_monte_carlo, Aggregate, Band, BootstrapConfig, BootstrapResult, BootstrapTarget,
    BuiltinKind, Cell, Error, ErrorCategory, EstimandKind, Estimate, GpsLink, MonteCarloDesign, Options, Panel,
    PanelSchema, PretrendsVerdict, SimConfig, TreatmentSpec, WeightKind,
};
use effdid::simulate::{ErrorLaws, Law};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;
pub const EXIT_INFERENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "effdid", version, about = "Doubly robust DiD with effective treatments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate every cell of the default design with uniform bands.
    Estimate(EstimateArgs),
    /// Estimate with pre-trend cells and report the parallel-trends check.
    Pretrends(EstimateArgs),
    /// Time-average of once-type cells.
    Aggregate(AggregateArgs),
    /// Monte Carlo table for the built-in simulation design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "unit")]
    pub unit: String,
    #[arg(long, default_value = "period")]
    pub period: String,
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Comma-separated treatment columns.
    #[arg(long, value_delimiter = ',', default_value = "d")]
    pub treatment: Vec<String>,
    /// Comma-separated time-invariant covariates.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "once")]
    pub spec: BuiltinKind,
    /// Anticipation window.
    #[arg(long, default_value_t = 0)]
    pub delta: usize,
    #[arg(long, default_value = "logit")]
    pub gps: GpsLink,
    /// Drop units outside the overlap band.
    #[arg(long)]
    pub trim: bool,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args)]
pub struct BootArgs {
    #[arg(long, default_value_t = 999)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, env = "EFFDID_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "mammen")]
    pub weights: WeightKind,
    #[arg(long, env = "EFFDID_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write plot.svg.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Add pre-trend cells to the design.
    #[arg(long)]
    pub pretrends: bool,
    /// Critical values for post and pre-trend cells computed separately.
    #[arg(long)]
    pub post_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Put the aggregate in one max-t set with its component cells.
    #[arg(long)]
    pub uniform_with_components: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub t: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value = "once")]
    pub spec: BuiltinKind,
    #[arg(long, env = "EFFDID_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 999)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, env = "EFFDID_THREADS")]
    pub threads: Option<usize>,
    /// Include pre-trend cells.
    #[arg(long)]
    pub pretrends: bool,
    /// Coefficient of the parallel-trends violation `c * alpha_i * t`.
    #[arg(long)]
    pub drift: Option<f64>,
    /// Logistic selection errors without unit heterogeneity in selection and outcomes.
    #[arg(long)]
    pub logistic_u: bool,
    /// Comma-separated estimators (dr, or, ipw).
    #[arg(long, value_delimiter = ',', default_value = "dr")]
    pub estimators: Vec<EstimandKind>,
    #[arg(long, default_value = "table.csv")]
    pub out: PathBuf,
}

/// A failure carrying the exit code and a one-line message.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn line(&self) -> String {
        format!("error code={} exit={} message={:?}", self.code, self.exit_code, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit_code = match e.category() {
            ErrorCategory::Input => EXIT_INPUT,
            ErrorCategory::Estimation => EXIT_ESTIMATION,
            ErrorCategory::Inference => EXIT_INFERENCE,
        };
        Self {
            exit_code,
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            exit_code: EXIT_INPUT,
            code: "SERIALIZATION".into(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize)]
pub struct InputFingerprint {
    pub path: String,
    pub size_bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct NuisanceManifest {
    pub gps: GpsLink,
    pub trim: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub overlap_eps: f64,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapManifest {
    pub reps: usize,
    pub alpha: f64,
    pub weights: WeightKind,
    pub seed: u64,
}

/// Everything needed to rerun a command; threads are deliberately absent.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub spec: String,
    pub delta: usize,
    pub estimator: EstimandKind,
    pub cells: Vec<String>,
    pub dropped_cells: Vec<String>,
    pub nuisance: NuisanceManifest,
    pub bootstrap: BootstrapManifest,
    pub input: Option<InputFingerprint>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunManifest {
    fn comment_lines(&self) -> CliResult<String> {
        let json = serde_json::to_value(self)?;
        let mut out = String::new();
        if let serde_json::Value::Object(map) = json {
            for (k, v) in map {
                let _ = writeln!(out, "# {k}: {}", serde_json::to_string(&v)?);
            }
        }
        Ok(out)
    }
}

pub fn fingerprint(path: &Path) -> CliResult<InputFingerprint> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(InputFingerprint {
        path: path.display().to_string(),
        size_bytes: bytes.len() as u64,
        sha256: hex,
    })
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError {
                    exit_code: EXIT_INPUT,
                    code: "THREAD_POOL".into(),
                    message: e.to_string(),
                })?;
            Ok(pool.install(f))
        }
    }
}

fn load(data: &DataArgs) -> CliResult<Panel> {
    let treat: Vec<&str> = data.treatment.iter().map(String::as_str).collect();
    let cov: Vec<&str> = data.covariates.iter().map(String::as_str).collect();
    let schema = PanelSchema::new(&data.unit, &data.period, &data.outcome, &treat, &cov);
    Ok(effdid::load_panel_csv(&data.input, &schema)?)
}

fn nuisance_options(m: &ModelArgs) -> Options {
    Options {
        link: m.gps,
        max_iter: m.max_iter,
        tol: m.tol,
        trim: m.trim,
        ..Options::default()
    }
}

fn boot_config(b: &BootArgs) -> BootstrapConfig {
    BootstrapConfig {
        n_reps: b.bootstrap,
        alpha: b.alpha,
        weight_kind: b.weights,
        seed: b.seed,
        skip_degenerate: false,
    }
}

fn manifest(
    subcommand: &str,
    data: &DataArgs,
    model: &ModelArgs,
    boot: &BootArgs,
    design: &Design,
) -> CliResult<RunManifest> {
    let opts = nuisance_options(model);
    Ok(RunManifest {
        subcommand: subcommand.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        spec: model.spec.to_string(),
        delta: model.delta,
        estimator: EstimandKind::Dr,
        cells: design.cells.iter().map(Cell::to_string).collect(),
        dropped_cells: design.dropped.iter().map(|(c, why)| format!("{c}: {why}")).collect(),
        nuisance: NuisanceManifest {
            gps: opts.link,
            trim: opts.trim,
            max_iter: opts.max_iter,
            tol: opts.tol,
            overlap_eps: opts.overlap_eps,
            covariates: data.covariates.clone(),
        },
        bootstrap: BootstrapManifest {
            reps: boot.bootstrap,
            alpha: boot.alpha,
            weights: boot.weights,
            seed: boot.seed,
        },
        input: Some(fingerprint(&data.input)?),
        notes: Vec::new(),
    })
}

/// One output row per estimated cell.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub cell: String,
    pub t: usize,
    pub s: usize,
    pub r: Option<usize>,
    pub e: i64,
    pub point: f64,
    pub analytic_se: f64,
    pub bootstrap_se: f64,
    pub lower: f64,
    pub upper: f64,
    pub critical_value: f64,
    pub n_movers: usize,
    pub n_stayers: usize,
    pub is_pretrend: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateOutput {
    pub manifest: RunManifest,
    pub rows: Vec<EstimateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrends: Option<PretrendsVerdict>,
}

fn run_design(
    panel: &Panel,
    model: &ModelArgs,
    include_pretrends: bool,
) -> CliResult<(Design, Vec<Estimate>)> {
    let spec = TreatmentSpec::builtin(model.spec, model.delta);
    let eff = compute_effective_treatment(panel, &spec)?;
    for w in eff.warnings() {
        log_line(w);
    }
    let design = default_design(&eff, &spec, include_pretrends);
    if design.cells.is_empty() {
        return Err(Error::EmptyCell {
            cell: "all cells".into(),
            movers: 0,
            stayers: 0,
        }
        .into());
    }
    let opts = nuisance_options(model);
    let results = estimate_cells(panel, &eff, &design.cells, EstimandKind::Dr, &opts);
    let estimates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((design, estimates))
}

fn log_line(msg: &str) {
    eprintln!("warning: {msg}");
}

fn bootstrap_groups(estimates: &[Estimate], cfg: &BootstrapConfig, separate: bool) -> CliResult<Vec<Band>> {
    let groups: Vec<Vec<&Estimate>> = if separate {
        let (pre, post): (Vec<&Estimate>, Vec<&Estimate>) = estimates.iter().partition(|e| e.is_pretrend);
        [post, pre].into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![estimates.iter().collect()]
    };
    let mut bands: Vec<Band> = Vec::new();
    for g in groups {
        let targets: Vec<&dyn BootstrapTarget<f64>> = g.iter().map(|e| *e as &dyn BootstrapTarget<f64>).collect();
        let res: BootstrapResult = multiplier_bootstrap(&targets, cfg)?;
        bands.extend(res.bands);
    }
    // Restore design order.
    let mut ordered = Vec::with_capacity(estimates.len());
    for e in estimates {
        let j = bands.iter().position(|b| b.cell == Some(e.cell)).expect("band per cell");
        ordered.push(bands[j].clone());
    }
    Ok(ordered)
}

fn critical_value_of(b: &Band) -> f64 {
    if b.se > 0.0 {
        (b.upper - b.point) / b.se
    } else {
        0.0
    }
}

fn rows(estimates: &[Estimate], bands: &[Band]) -> Vec<EstimateRow> {
    estimates
        .iter()
        .zip(bands)
        .map(|(e, b)| EstimateRow {
            cell: e.cell.to_string(),
            t: e.cell.t,
            s: e.cell.s,
            r: e.cell.r,
            e: e.cell.e,
            point: e.point,
            analytic_se: e.analytic_se,
            bootstrap_se: b.se,
            lower: b.lower,
            upper: b.upper,
            critical_value: critical_value_of(b),
            n_movers: e.n_movers,
            n_stayers: e.n_stayers,
            is_pretrend: e.is_pretrend,
        })
        .collect()
}

fn write_csv_with_manifest<S: Serialize>(path: &Path, manifest: &RunManifest, rows: &[S]) -> CliResult<()> {
    let mut buf = manifest.comment_lines()?.into_bytes();
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(Error::from)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Point-and-band chart; pre-trend cells are drawn as boxes, post cells as circles.
pub fn render_svg(rows: &[EstimateRow], manifest: &RunManifest) -> CliResult<String> {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 90.0);
    let mut lo = rows.iter().map(|r| r.lower).fold(0.0_f64, f64::min);
    let mut hi = rows.iter().map(|r| r.upper).fold(0.0_f64, f64::max);
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);
    let n = rows.len().max(1) as f64;
    let x = |j: usize| left + (j as f64 + 0.5) * (w - left - right) / n;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&serde_json::to_string(manifest)?));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        y(0.0),
        w - right
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/>"#,
        h - bottom
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (j, r) in rows.iter().enumerate() {
        let cx = x(j);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black" stroke-width="1.5"/>"#,
            y(r.lower),
            y(r.upper)
        );
        if r.is_pretrend {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="white" stroke="black"/>"#,
                cx - 4.0,
                y(r.point) - 4.0
            );
        } else {
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.2}" cy="{:.2}" r="4" fill="black"/>"#,
                y(r.point)
            );
        }
        let ly = h - bottom + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{ly:.2}" font-size="10" text-anchor="end" transform="rotate(-45 {cx:.2} {ly:.2})">{}</text>"#,
            xml_escape(&r.cell)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn emit(
    out: &OutputArgs,
    stem: &str,
    manifest: &RunManifest,
    rows: &[EstimateRow],
    pretrends: Option<PretrendsVerdict>,
) -> CliResult<()> {
    fs::create_dir_all(&out.out_dir)?;
    write_csv_with_manifest(&out.out_dir.join(format!("{stem}.csv")), manifest, rows)?;
    let doc = EstimateOutput {
        manifest: manifest.clone(),
        rows: rows.to_vec(),
        pretrends,
    };
    write_json(&out.out_dir.join(format!("{stem}.json")), &doc)?;
    if out.plot {
        fs::write(out.out_dir.join("plot.svg"), render_svg(rows, manifest)?)?;
    }
    Ok(())
}

fn print_table(rows: &[EstimateRow]) {
    println!("{:<22} {:>10} {:>10} {:>10} {:>10}", "cell", "point", "se", "lower", "upper");
    for r in rows {
        println!(
            "{:<22} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.cell, r.point, r.bootstrap_se, r.lower, r.upper
        );
    }
}

pub fn cmd_estimate(args: &EstimateArgs, subcommand: &str) -> CliResult<()> {
    let pretrends = args.pretrends || subcommand == "pretrends";
    let panel = load(&args.data)?;
    let cfg = boot_config(&args.boot);
    cfg.validate()?;
    let (design, estimates, bands) = with_threads(args.boot.threads, || -> CliResult<_> {
        let (design, estimates) = run_design(&panel, &args.model, pretrends)?;
        let bands = bootstrap_groups(&estimates, &cfg, args.post_only)?;
        Ok((design, estimates, bands))
    })??;
    let mut m = manifest(subcommand, &args.data, &args.model, &args.boot, &design)?;
    if pretrends {
        m.notes.push(if args.post_only {
            "post and pre-trend cells use separate critical values".into()
        } else {
            "critical value computed over post and pre-trend cells jointly".into()
        });
    }
    let verdict = if pretrends { Some(pretrends_report(&bands)?) } else { None };
    let table = rows(&estimates, &bands);
    emit(&args.output, "estimates", &m, &table, verdict.clone())?;
    print_table(&table);
    if let Some(v) = verdict {
        println!(
            "pre-trends: {} of {} bands exclude zero; {} (necessary condition only)",
            v.excluding_zero.len(),
            v.n_pretrend_cells,
            if v.consistent_with_parallel_trends {
                "consistent with parallel trends"
            } else {
                "inconsistent with parallel trends"
            }
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub kind: String,
    pub point: f64,
    pub analytic_se: f64,
    pub bootstrap_se: f64,
    pub lower: f64,
    pub upper: f64,
    pub critical_value: f64,
    pub n_components: usize,
}

#[derive(Debug, Clone, Serialize)]
struct AggregateOutput {
    manifest: RunManifest,
    aggregate: AggregateRow,
    components: Vec<(String, f64)>,
}

pub fn cmd_aggregate(args: &AggregateArgs) -> CliResult<()> {
    if args.model.spec != BuiltinKind::Once {
        return Err(Error::InvalidConfig("the time average is defined for the once specification".into()).into());
    }
    let panel = load(&args.data)?;
    let cfg = boot_config(&args.boot);
    cfg.validate()?;
    let n_periods = panel.n_periods();
    let (design, agg, band) = with_threads(args.boot.threads, || -> CliResult<_> {
        let (design, estimates) = run_design(&panel, &args.model, false)?;
        let agg: Aggregate = aggregate_time_average(&estimates, n_periods)?;
        let mut targets: Vec<&dyn BootstrapTarget<f64>> = vec![&agg];
        if args.uniform_with_components {
            targets.extend(estimates.iter().map(|e| e as &dyn BootstrapTarget<f64>));
        }
        let res = multiplier_bootstrap(&targets, &cfg)?;
        Ok((design, agg, res.bands[0].clone()))
    })??;
    let mut m = manifest("aggregate", &args.data, &args.model, &args.boot, &design)?;
    m.notes.push(if args.uniform_with_components {
        "aggregate banded jointly with its components".into()
    } else {
        "aggregate banded on its own".into()
    });
    let row = AggregateRow {
        kind: agg.kind.to_string(),
        point: agg.point,
        analytic_se: agg.analytic_se,
        bootstrap_se: band.se,
        lower: band.lower,
        upper: band.upper,
        critical_value: critical_value_of(&band),
        n_components: agg.components.len(),
    };
    fs::create_dir_all(&args.output.out_dir)?;
    write_csv_with_manifest(&args.output.out_dir.join("aggregate.csv"), &m, std::slice::from_ref(&row))?;
    write_json(
        &args.output.out_dir.join("aggregate.json"),
        &AggregateOutput {
            manifest: m,
            aggregate: row.clone(),
            components: agg.components.iter().map(|(c, w)| (c.to_string(), *w)).collect(),
        },
    )?;
    println!(
        "{}: {:.4} [{:.4}, {:.4}]",
        row.kind, row.point, row.lower, row.upper
    );
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut cfg = SimConfig::new(args.n, args.t);
    cfg.reps = args.reps;
    cfg.seed = args.seed;
    cfg.parallel_trends_violation = args.drift;
    if args.logistic_u {
        cfg.error_laws = ErrorLaws {
            u: Law::StandardLogistic,
            alpha: Law::Zero,
            ..ErrorLaws::default()
        };
    }
    let design = MonteCarloDesign {
        include_pretrends: args.pretrends,
        estimators: args.estimators.clone(),
        bootstrap: BootstrapConfig {
            n_reps: args.bootstrap,
            alpha: args.alpha,
            ..BootstrapConfig::default()
        },
        ..MonteCarloDesign::new(args.spec)
    };
    let table = with_threads(args.threads, || run_monte_carlo(&cfg, &design))??;
    let m = RunManifest {
        subcommand: "simulate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        spec: args.spec.to_string(),
        delta: 0,
        estimator: args.estimators.first().copied().unwrap_or_default(),
        cells: design.resolved_cells(args.t).iter().map(Cell::to_string).collect(),
        dropped_cells: Vec::new(),
        nuisance: NuisanceManifest {
            gps: GpsLink::Logit,
            trim: false,
            max_iter: design.nuisance.max_iter,
            tol: design.nuisance.tol,
            overlap_eps: design.nuisance.overlap_eps,
            covariates: vec!["x".into()],
        },
        bootstrap: BootstrapManifest {
            reps: args.bootstrap,
            alpha: args.alpha,
            weights: WeightKind::Mammen,
            seed: args.seed,
        },
        input: None,
        notes: vec![
            format!("n={} t={} reps={} reps_ok={}", args.n, args.t, args.reps, table.metadata.reps_ok),
            format!("flagged_reps={}", table.metadata.flagged.len()),
        ],
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut buf = m.comment_lines()?.into_bytes();
    table.write_csv(&mut buf)?;
    fs::File::create(&args.out)?.write_all(&buf)?;
    for r in &table.rows {
        println!(
            "{:<4} ({},{},{}{}) bias={:.4} rmse={:.4} pw_cp={:.3} u_cp={:.3} ci_l={:.3}",
            r.estimator.to_string(),
            r.t,
            r.s,
            r.e,
            r.r.map(|v| format!(",r={v}")).unwrap_or_default(),
            r.bias,
            r.rmse,
            r.pw_cp,
            r.u_cp,
            r.ci_l
        );
    }
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, "estimate"),
        Command::Pretrends(a) => cmd_estimate(a, "pretrends"),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code
        }
    }
}
