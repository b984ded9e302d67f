use std::path::{Path, PathBuf};

use clap::Args;
use metacond::gmcm::{compare_csv, summarize, MethodSummary};
use metacond::pipeline::{fit_joint_with_summary, PitKind};
use metacond::{
    compare_fitters as run_compare, evaluate_split, scenarios, ConditionRequest,
    Error, Family, FitMethod, FitOptions, GmcmParams, JointConfig, LatentFamily, MarginKind, MetaModel,
    Scenario, ScoreReport, SplitConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset, Table};
use crate::{CliError, Global};

const GLOBAL_KEYS: [&str; 2] = ["seed", "threads"];
const MIN_ROWS: usize = 20;

fn keys<'a>(own: &[&'a str]) -> Vec<&'a str> {
    GLOBAL_KEYS.iter().copied().chain(own.iter().copied()).collect()
}

fn parse_family(s: &str) -> Result<Family, CliError> {
    Family::parse(s).ok_or_else(|| {
        CliError::input(format!("unknown family {s:?} (expected gmcm, gc, tgmm or student-t)"))
    })
}

fn parse_margins(s: &str) -> Result<MarginKind, CliError> {
    match s {
        "gmm-aic" => Ok(MarginKind::GmmAic),
        "empirical" => Ok(MarginKind::Empirical),
        other => Err(CliError::input(format!(
            "unknown margins {other:?} (expected gmm-aic or empirical)"
        ))),
    }
}

fn parse_pit(s: &str) -> Result<PitKind, CliError> {
    match s {
        "parametric" => Ok(PitKind::Parametric),
        "ranks" => Ok(PitKind::Ranks),
        other => Err(CliError::input(format!(
            "unknown pit {other:?} (expected parametric or ranks)"
        ))),
    }
}

fn family_label(f: Family) -> &'static str {
    match f {
        Family::GaussianCopula => "gc",
        other => other.name(),
    }
}

/// Errors from a fitting phase; a malformed model document keeps its own code.
fn fit_error(e: Error) -> CliError {
    match e.root() {
        Error::Format(_) => CliError::format(e.to_string()),
        _ => CliError::fit(format!("fit failed: {e}")),
    }
}

fn joint_config(
    g: &Global,
    margins: Option<String>,
    pit: Option<String>,
    max_iter: Option<usize>,
) -> Result<JointConfig, CliError> {
    let c = &g.config;
    let mut cfg = JointConfig {
        margins: parse_margins(&c.pick_or(margins, "margins", "gmm-aic".to_string())?)?,
        pit: parse_pit(&c.pick_or(pit, "pit", "parametric".to_string())?)?,
        ..JointConfig::default()
    };
    if let Some(m) = c.pick(max_iter, "max-iter")? {
        if m == 0 {
            return Err(CliError::input("max-iter must be at least 1"));
        }
        cfg.gmcm.max_iter = m;
    }
    Ok(cfg)
}

fn load_table(input: &Path, dataset: Option<&str>) -> Result<(Table, Option<Dataset>), CliError> {
    let ds = dataset.map(Dataset::parse).transpose()?;
    Ok((data::load(input, ds)?, ds))
}

#[derive(Args)]
pub struct FitArgs {
    /// Input CSV with a header row
    pub input: PathBuf,
    /// Latent family: gmcm, gc, tgmm or student-t [default: gmcm]
    #[arg(long)]
    pub family: Option<String>,
    /// Mixture components for gmcm and tgmm [default: 2, or the dataset's K]
    #[arg(long)]
    pub k: Option<usize>,
    /// Marginal models: gmm-aic or empirical [default: gmm-aic]
    #[arg(long)]
    pub margins: Option<String>,
    /// Uniforms for the copula stage: parametric or ranks [default: parametric]
    #[arg(long)]
    pub pit: Option<String>,
    /// Iteration cap of the copula optimizer [default: 10000]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Read a public data file: wine or breast-cancer
    #[arg(long)]
    pub dataset: Option<String>,
    /// Model file [default: model.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn fit(a: FitArgs, g: &Global) -> Result<(), CliError> {
    let c = &g.config;
    c.check_keys(&keys(&["family", "k", "margins", "pit", "max-iter", "dataset", "out"]))?;
    let dataset: Option<String> = c.pick(a.dataset, "dataset")?;
    let (table, ds) = load_table(&a.input, dataset.as_deref())?;
    let (n, d) = table.data.shape();
    if n < MIN_ROWS {
        return Err(CliError::input(format!("{n} data rows; fitting needs at least {MIN_ROWS}")));
    }
    if d < 2 {
        return Err(CliError::input("fitting needs at least two columns"));
    }
    let family = parse_family(&c.pick_or(a.family, "family", "gmcm".to_string())?)?;
    let k = c.pick_or(a.k, "k", ds.map_or(2, Dataset::default_k))?;
    let mut cfg = joint_config(g, a.margins, a.pit, a.max_iter)?;
    cfg.column_names = Some(table.names.clone());
    let out = c.pick_or(a.out, "out", PathBuf::from("model.json"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let (model, summary) =
        fit_joint_with_summary(&table.data, family, k, &cfg, &mut rng).map_err(fit_error)?;
    let json = model.to_json().map_err(|e| CliError::format(e.to_string()))?;
    data::emit(Some(&out), &json)?;

    println!("family: {}", family_label(family));
    if matches!(family, Family::Gmcm | Family::Tgmm) {
        println!("components: {k}");
    }
    println!("rows: {n}");
    println!("columns: {}", table.names.join(","));
    println!("loglik: {}", summary.loglik);
    println!("iterations: {}", summary.iterations);
    match model.latent() {
        LatentFamily::GaussianCopula(r) => {
            println!("correlation:");
            for i in 0..r.nrows() {
                let row: Vec<String> = r.row(i).iter().map(|v| format!("{v:.4}")).collect();
                println!("  {}", row.join(" "));
            }
        }
        LatentFamily::StudentT(t) => println!("dof: {}", t.dof()),
        _ => {}
    }
    println!("model: {}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct ConditionArgs {
    /// Model JSON written by `fit`
    pub model: PathBuf,
    /// Conditioning values, e.g. "x2=2.0,x3=-1"
    #[arg(long)]
    pub given: Option<String>,
    /// Number of conditional samples [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Evaluate the conditional CDF of the single target column at the
    /// values listed in this file instead of sampling
    #[arg(long)]
    pub cdf_grid: Option<PathBuf>,
    /// Output CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_given(list: &str, model: &MetaModel) -> Result<(Vec<usize>, Vec<f64>), CliError> {
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("expected col=value, got {item:?}")))?;
        let name = name.trim();
        let j = model.column_index(name).ok_or_else(|| {
            CliError::input(format!(
                "unknown column {name:?} (model columns: {})",
                model.column_names().join(", ")
            ))
        })?;
        let v: f64 = value
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CliError::input(format!("bad value {value:?} for column {name}")))?;
        if pairs.iter().any(|(k, _)| *k == j) {
            return Err(CliError::input(format!("column {name} given twice")));
        }
        pairs.push((j, v));
    }
    if pairs.is_empty() {
        return Err(CliError::input("--given lists no columns"));
    }
    pairs.sort_by_key(|p| p.0);
    Ok(pairs.into_iter().unzip())
}

pub fn condition(a: ConditionArgs, g: &Global) -> Result<(), CliError> {
    let c = &g.config;
    c.check_keys(&keys(&["given", "n", "cdf-grid", "out"]))?;
    let text = std::fs::read_to_string(&a.model)
        .map_err(|e| CliError::input(format!("cannot read model {}: {e}", a.model.display())))?;
    let model = MetaModel::from_json(&text)
        .map_err(|e| CliError::format(format!("{}: {e}", a.model.display())))?;
    let given: String = c
        .pick(a.given, "given")?
        .ok_or_else(|| CliError::input("--given is required"))?;
    let (cols, values) = parse_given(&given, &model)?;
    if cols.len() >= model.dim() {
        return Err(CliError::input("every column is given; no target column left"));
    }
    let n = c.pick_or(a.n, "n", 1000)?;
    if n == 0 {
        return Err(CliError::input("n must be at least 1"));
    }
    let grid: Option<PathBuf> = c.pick(a.cdf_grid, "cdf-grid")?;
    let out: Option<PathBuf> = c.pick(a.out, "out")?;
    let mut req = ConditionRequest::new(cols, values, n);
    let target = model.target_columns(&req).map_err(|e| CliError::input(e.to_string()))?;
    let names: Vec<String> = target.iter().map(|&j| model.column_names()[j].clone()).collect();

    let text = match grid {
        Some(path) => {
            if target.len() != 1 {
                return Err(CliError::input(format!(
                    "a CDF grid needs exactly one target column, this request leaves {}",
                    target.len()
                )));
            }
            let grid = data::read_grid(&path)?;
            req = req.with_grid(grid.clone());
            let cdf = model
                .conditional_cdf(&req)
                .map_err(|e| CliError::condition(format!("conditioning failed: {e}")))?;
            let mut s = String::from("grid,value\n");
            for (x, p) in grid.iter().zip(&cdf) {
                s.push_str(&format!("{x},{p}\n"));
            }
            s
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            let samples = model
                .conditional_sample(&req, &mut rng)
                .map_err(|e| CliError::condition(format!("conditioning failed: {e}")))?;
            data::to_csv(&names, &samples)
        }
    };
    data::emit(out.as_deref(), &text)
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Input CSV with a header row (omit with --synthetic)
    pub input: Option<PathBuf>,
    /// Score on a generated scenario instead: gmm or meta-gmm
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Rows generated with --synthetic [default: 2000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated methods: gc, gmcm, tgmm, student-t, ckde, ckde-std
    /// [default: gc,gmcm,tgmm,ckde]
    #[arg(long)]
    pub methods: Option<String>,
    /// Random train/test splits [default: 1]
    #[arg(long)]
    pub splits: Option<usize>,
    /// Mixture components for gmcm and tgmm [default: 2, or the dataset's K]
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated target columns, by name or 0-based index
    /// [default: first column, or the first three for --dataset]
    #[arg(long)]
    pub target: Option<String>,
    /// Conditional samples drawn per test point [default: 1000]
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Training fraction of each split [default: 0.8]
    #[arg(long)]
    pub split_frac: Option<f64>,
    /// Score at most this many test points per split
    #[arg(long)]
    pub max_test: Option<usize>,
    /// Marginal models: gmm-aic or empirical [default: gmm-aic]
    #[arg(long)]
    pub margins: Option<String>,
    /// Iteration cap of the copula optimizer [default: 10000]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Read a public data file: wine or breast-cancer
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output prefix; writes PREFIX.json and PREFIX.csv [default: scores]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_targets(list: &str, names: &[String]) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let j = match names.iter().position(|n| n == item) {
            Some(j) => j,
            None => item
                .parse::<usize>()
                .ok()
                .filter(|&j| j < names.len())
                .ok_or_else(|| {
                    CliError::input(format!(
                        "unknown target column {item:?} (columns: {})",
                        names.join(", ")
                    ))
                })?,
        };
        if out.contains(&j) {
            return Err(CliError::input(format!("target column {item} listed twice")));
        }
        out.push(j);
    }
    out.sort_unstable();
    if out.is_empty() || out.len() >= names.len() {
        return Err(CliError::input(
            "targets must be a non-empty proper subset of the columns",
        ));
    }
    Ok(out)
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn score_summary(report: &ScoreReport) -> String {
    let mut s = String::from("method,score,mean,sd,n\n");
    for a in &report.aggregate {
        s.push_str(&format!("{},{},{:.4},{:.4},{}\n", a.method, a.score, a.mean, a.sd, a.n));
    }
    for f in &report.failures {
        let at = match (f.split, f.point) {
            (Some(sp), Some(p)) => format!(" (split {sp}, row {p})"),
            (Some(sp), None) => format!(" (split {sp})"),
            _ => String::new(),
        };
        s.push_str(&format!("failed: {}{at}: {}\n", f.method, f.message));
    }
    s
}

/// Mean-CRPS ordering check: GMCM and TGMM (tied within 0.02) below CKDE,
/// CKDE below GC, and on the raw GMM scenario GC at least twice GMCM.
fn ordering_footer(report: &ScoreReport, scenario: Scenario) -> Option<String> {
    let m = |name: &str| report.mean(name, "crps").filter(|v| v.is_finite());
    let (gc, gmcm, tgmm, ckde) = (m("gc")?, m("gmcm")?, m("tgmm")?, m("ckde")?);
    let tie = gmcm <= tgmm + 0.02;
    let order = gmcm < ckde && tgmm < ckde && ckde < gc;
    let mut s = format!(
        "ordering {{gmcm, tgmm}} < ckde < gc on mean crps (gmcm-tgmm tie 0.02): {}\n",
        if tie && order { "holds" } else { "violated" }
    );
    if scenario == Scenario::Gmm {
        let ratio = gc / gmcm;
        s.push_str(&format!(
            "gc/gmcm crps ratio {ratio:.3} > 2: {}\n",
            if ratio > 2.0 { "holds" } else { "violated" }
        ));
    }
    Some(s)
}

pub fn score(a: ScoreArgs, g: &Global) -> Result<(), CliError> {
    let c = &g.config;
    c.check_keys(&keys(&[
        "synthetic", "n", "methods", "splits", "k", "target", "n-samples", "split-frac", "max-test",
        "margins", "max-iter", "dataset", "out",
    ]))?;
    let synthetic: Option<String> = c.pick(a.synthetic, "synthetic")?;
    let dataset: Option<String> = c.pick(a.dataset, "dataset")?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let (table, ds, scenario) = match (&a.input, synthetic) {
        (Some(path), None) => {
            let (t, ds) = load_table(path, dataset.as_deref())?;
            (t, ds, None)
        }
        (None, Some(name)) => {
            if dataset.is_some() {
                return Err(CliError::input("--dataset needs an input file, not --synthetic"));
            }
            let sc = match Scenario::from_name(&name) {
                Some(s @ (Scenario::Gmm | Scenario::MetaGmm)) => s,
                _ => {
                    return Err(CliError::input(format!(
                        "unknown synthetic scenario {name:?} (expected gmm or meta-gmm)"
                    )))
                }
            };
            let n = c.pick_or(a.n, "n", 2000)?;
            let data_seed: u64 = rng.random();
            let data = sc
                .generate(n, &mut ChaCha8Rng::seed_from_u64(data_seed))
                .map_err(|e| CliError::input(e.to_string()))?;
            (Table { names: sc.column_names(), data }, None, Some(sc))
        }
        _ => return Err(CliError::input("give exactly one of an input file or --synthetic")),
    };
    if table.data.nrows() < MIN_ROWS {
        return Err(CliError::input(format!(
            "{} data rows; scoring needs at least {MIN_ROWS}",
            table.data.nrows()
        )));
    }
    let methods: Vec<String> = c
        .pick_or(a.methods, "methods", "gc,gmcm,tgmm,ckde".to_string())?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if methods.is_empty() {
        return Err(CliError::input("no methods listed"));
    }
    let default_target = if ds.is_some() { "0,1,2" } else { "0" };
    let target = parse_targets(&c.pick_or(a.target, "target", default_target.to_string())?, &table.names)?;
    let mut cfg = SplitConfig {
        target_columns: target,
        n_samples: c.pick_or(a.n_samples, "n-samples", 1000)?,
        n_splits: c.pick_or(a.splits, "splits", 1)?,
        split_frac: c.pick_or(a.split_frac, "split-frac", 0.8)?,
        k: c.pick_or(a.k, "k", ds.map_or(2, Dataset::default_k))?,
        max_test_points: c.pick(a.max_test, "max-test")?,
        joint: joint_config(g, a.margins, None, a.max_iter)?,
        ..SplitConfig::default()
    };
    cfg.joint.column_names = Some(table.names.clone());
    if cfg.n_samples == 0 || cfg.n_splits == 0 {
        return Err(CliError::input("n-samples and splits must be at least 1"));
    }
    let out = c.pick_or(a.out, "out", PathBuf::from("scores"))?;

    let report = evaluate_split(&table.data, &methods, &cfg, &mut rng).map_err(|e| match e {
        Error::InvalidIndices(_) | Error::InvalidParameter(_) => CliError::input(e.to_string()),
        other => CliError::fit(other.to_string()),
    })?;
    let json = report.to_json().map_err(|e| CliError::format(e.to_string()))?;
    data::emit(Some(&with_extension(&out, "json")), &json)?;
    data::emit(Some(&with_extension(&out, "csv")), &report.to_csv())?;

    print!("{}", score_summary(&report));
    if let Some(footer) = scenario.and_then(|sc| ordering_footer(&report, sc)) {
        print!("{footer}");
    }
    if report.succeeded().is_empty() {
        return Err(CliError::fit("every method failed"));
    }
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Copula configuration: 2d or 3d
    #[arg(long)]
    pub config: Option<String>,
    /// Sample size per replicate [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Replicates [default: 5]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Iteration cap of every fitter [default: 10000]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Output CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn compare_footer(summary: &[MethodSummary]) -> String {
    let mut s = String::from("method,ok,mean_loglik,sd_loglik,mean_energy_distance,sd_energy_distance\n");
    for m in summary {
        s.push_str(&format!(
            "{},{},{:.3},{:.3},{:.6},{:.6}\n",
            m.method.name(),
            m.n_ok,
            m.mean_loglik,
            m.sd_loglik,
            m.mean_energy,
            m.sd_energy
        ));
    }
    let get = |f: FitMethod| summary.iter().find(|m| m.method == f);
    let holds = match (get(FitMethod::Ad), get(FitMethod::Fd), get(FitMethod::Pem)) {
        (Some(ad), Some(fd), Some(pem)) => {
            ad.mean_loglik > fd.mean_loglik
                && ad.mean_loglik > pem.mean_loglik
                && ad.mean_energy < fd.mean_energy
                && ad.mean_energy < pem.mean_energy
        }
        _ => false,
    };
    s.push_str(&format!(
        "AD best (highest mean loglik, lowest mean energy distance): {}\n",
        if holds { "holds" } else { "violated" }
    ));
    s
}

pub fn compare_fitters(a: CompareArgs, g: &Global) -> Result<(), CliError> {
    let c = &g.config;
    c.check_keys(&keys(&["config", "n", "reps", "max-iter", "out"]))?;
    let name: String = c
        .pick(a.config, "config")?
        .ok_or_else(|| CliError::input("--config is required (2d or 3d)"))?;
    let truth = match name.as_str() {
        "2d" => scenarios::gmcm_2d(),
        "3d" => scenarios::gmcm_3d(),
        other => return Err(CliError::input(format!("unknown config {other:?} (expected 2d or 3d)"))),
    };
    let truth = GmcmParams::new(truth);
    let n = c.pick_or(a.n, "n", 1000)?;
    let reps = c.pick_or(a.reps, "reps", 5)?;
    let mut opts = FitOptions::default();
    if let Some(m) = c.pick(a.max_iter, "max-iter")? {
        opts.max_iter = m;
    }
    let out: Option<PathBuf> = c.pick(a.out, "out")?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let rows = run_compare(&truth, truth.n_components(), n, reps, &opts, &mut rng)
        .map_err(|e| CliError::input(e.to_string()))?;
    data::emit(out.as_deref(), &compare_csv(&rows))?;
    let footer = compare_footer(&summarize(&rows));
    if out.is_some() {
        print!("{footer}");
    } else {
        eprint!("{footer}");
    }
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// gmm, meta-gmm, gmcm-2d or gmcm-3d
    #[arg(long)]
    pub scenario: Option<String>,
    /// Rows [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Output CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn generate(a: GenerateArgs, g: &Global) -> Result<(), CliError> {
    let c = &g.config;
    c.check_keys(&keys(&["scenario", "n", "out"]))?;
    let name: String = c
        .pick(a.scenario, "scenario")?
        .ok_or_else(|| CliError::input("--scenario is required"))?;
    let sc = Scenario::from_name(&name).ok_or_else(|| {
        CliError::input(format!(
            "unknown scenario {name:?} (expected gmm, meta-gmm, gmcm-2d or gmcm-3d)"
        ))
    })?;
    let n = c.pick_or(a.n, "n", 1000)?;
    if n == 0 {
        return Err(CliError::input("n must be at least 1"));
    }
    let out: Option<PathBuf> = c.pick(a.out, "out")?;
    let data = sc
        .generate(n, &mut ChaCha8Rng::seed_from_u64(g.seed))
        .map_err(|e| CliError::input(e.to_string()))?;
    data::emit(out.as_deref(), &data::to_csv(&sc.column_names(), &data))
}
