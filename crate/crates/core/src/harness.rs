//! Experiment orchestration: KL tables, mitigation sweeps, KL–AUC correlation
//! and ablations, with CSV outputs and a JSON run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{Distribution, N_ATOMS};
use crate::error::{Error, Result};
use crate::grouping::{annotate_samples, GroupingScheme};
use crate::metrics::{evaluate, pearson, EvalReport};
use crate::mitigation::{jtt_candidates, select_jtt, train, JttCandidate, Method, TrainConfig};
use crate::reweight::{min_kl_table, reference_deviations, write_kl_table_csv, KlTableRow};
use crate::seed::derive_seed;
use crate::synth::{make_splits, FeatureConfig, Splits};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything that determines a sweep. Read from JSON; absent fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    /// Schemes for every grouped method; `None` uses each method's default
    /// list.
    pub schemes: Option<Vec<GroupingScheme>>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub p_s0: f64,
    pub p_s1: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            methods: Method::ALL.to_vec(),
            schemes: None,
            seeds: vec![0, 1, 2],
            master_seed: 0,
            p_s0: 0.95,
            p_s1: 0.8,
            n_train: 8000,
            n_val: 2000,
            n_test: 8000,
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ExperimentSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be non-empty".into()));
        }
        if let Some(s) = &self.schemes {
            if s.is_empty() {
                return Err(Error::Config("schemes, when given, must be non-empty".into()));
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Distribution::biased(self.p_s0, self.p_s1)?;
        self.features.validate()?;
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn p_train(&self) -> Result<Distribution> {
        Distribution::biased(self.p_s0, self.p_s1)
    }

    /// Schemes trained for `method`; ERM has none.
    pub fn schemes_for(&self, method: Method) -> Vec<GroupingScheme> {
        if !method.uses_grouping() {
            return Vec::new();
        }
        self.schemes.clone().unwrap_or_else(|| method.default_schemes())
    }

    /// Every scheme used by any method, deduplicated in first-seen order.
    pub fn all_schemes(&self) -> Vec<GroupingScheme> {
        let mut out: Vec<GroupingScheme> = Vec::new();
        for m in &self.methods {
            for s in self.schemes_for(*m) {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}

/// Seed of one (method, scheme, seed index) cell. ERM ignores the grouping,
/// so its seed does not depend on the scheme.
pub fn cell_seed(master: u64, method: Method, scheme: Option<&GroupingScheme>, seed_index: u64) -> u64 {
    let m = method.to_string();
    let i = seed_index.to_string();
    match (method, scheme) {
        (Method::Erm, _) | (_, None) => derive_seed(master, &[&m, &i]),
        (_, Some(s)) => derive_seed(master, &[&m, &s.to_string(), &i]),
    }
}

/// Seed of the data splits for a seed index; shared by all methods so that
/// comparisons are paired.
pub fn data_seed(master: u64, seed_index: u64) -> u64 {
    derive_seed(master, &["data", &seed_index.to_string()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    /// Scheme name, or `none` for ERM.
    pub grouping: String,
    pub seed: u64,
    pub cell_seed: u64,
    pub val_auc: Option<f64>,
    pub test: Option<EvalReport>,
    pub min_kl_gdro: Option<f64>,
    pub min_kl_resampling: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub spec: ExperimentSpec,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub min_kl: Vec<KlTableRow>,
    pub cells: Vec<CellResult>,
}

impl RunRecord {
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean and sample sd of a test metric per (method, grouping), over the
    /// cells that succeeded. Order follows the cell order.
    pub fn aggregate(&self, metric: impl Fn(&CellResult) -> Option<f64>) -> Vec<Aggregate> {
        let mut order: Vec<(Method, String)> = Vec::new();
        let mut values: BTreeMap<(Method, String), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            let key = (c.method, c.grouping.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            if let Some(v) = metric(c) {
                values.entry(key).or_default().push(v);
            }
        }
        order
            .into_iter()
            .map(|key| {
                let v = values.remove(&key).unwrap_or_default();
                let (mean, sd) = mean_sd(&v);
                Aggregate {
                    method: key.0,
                    grouping: key.1,
                    n: v.len(),
                    mean,
                    sd,
                }
            })
            .collect()
    }

    pub fn mean_of(&self, method: Method, grouping: &str, metric: impl Fn(&CellResult) -> Option<f64>) -> Option<f64> {
        self.aggregate(metric)
            .into_iter()
            .find(|a| a.method == method && a.grouping == grouping && a.n > 0)
            .map(|a| a.mean)
    }

    fn min_kl_for(&self, grouping: &str) -> Option<&KlTableRow> {
        self.min_kl.iter().find(|r| r.scheme.to_string() == grouping)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub grouping: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn test_auc(c: &CellResult) -> Option<f64> {
    c.test.as_ref().map(|t| t.overall_auc)
}

pub fn val_auc(c: &CellResult) -> Option<f64> {
    c.val_auc
}

pub fn gap_s(c: &CellResult) -> Option<f64> {
    c.test.as_ref().map(|t| t.gap_s)
}

pub fn min_acc_s(c: &CellResult) -> Option<f64> {
    c.test.as_ref().map(|t| t.min_acc_s)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Thread pool capped by `SSL_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SSL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("SSL_THREADS={v:?} is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config("SSL_THREADS must be ≥ 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlAnalysis {
    pub rows: Vec<KlTableRow>,
    /// `(scheme, column, got, want)` beyond tolerance; filled only on check.
    pub deviations: Vec<(String, &'static str, f64, f64)>,
}

/// Minimum-KL table for `schemes` (all reweighting schemes by default),
/// written to `<out>/kl_table.csv`. With `check`, compares against the
/// reference table, which only applies to the default 0.95 / 0.80 shift.
pub fn cmd_analyze_kl(spec: &ExperimentSpec, schemes: Option<&[GroupingScheme]>, check: bool) -> Result<KlAnalysis> {
    let defaults = GroupingScheme::reweighting_schemes();
    let schemes = schemes.unwrap_or(&defaults);
    let rows = min_kl_table(schemes, &spec.p_train()?, &Distribution::uniform(N_ATOMS))?;
    create_dir(&spec.out)?;
    write_kl_table_csv(&rows, create_file(&spec.out.join("kl_table.csv"))?)?;
    let deviations = if check {
        if (spec.p_s0, spec.p_s1) != (0.95, 0.8) {
            return Err(Error::Config(
                "--check compares against the reference for p_s0 = 0.95, p_s1 = 0.8 only".into(),
            ));
        }
        reference_deviations(&rows)
    } else {
        Vec::new()
    };
    Ok(KlAnalysis { rows, deviations })
}

fn run_cell(
    spec: &ExperimentSpec,
    splits: &Splits,
    jtt: Option<&Result<Vec<JttCandidate>>>,
    method: Method,
    scheme: Option<&GroupingScheme>,
    seed_index: u64,
) -> Result<(f64, EvalReport)> {
    let seed = cell_seed(spec.master_seed, method, scheme, seed_index);
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    let model = match (method, scheme) {
        (Method::Jtt, Some(s)) => {
            let cands = jtt.expect("JTT candidates precomputed").as_ref().map_err(|e| Error::Config(e.to_string()))?;
            let val = annotate_samples(&splits.val, s, derive_seed(seed, &["annotate", "val"]))?;
            select_jtt(cands, &val)?
        }
        (_, Some(s)) => {
            let tr = annotate_samples(&splits.train, s, derive_seed(seed, &["annotate", "train"]))?;
            train(method, &tr, &splits.val, &cfg)?
        }
        (_, None) => train(method, &splits.train, &splits.val, &cfg)?,
    };
    let val = evaluate(&model, &splits.val)?;
    Ok((val.overall_auc, evaluate(&model, &splits.test)?))
}

/// Runs every (method, scheme, seed) cell and writes `results.csv`,
/// `relative_auc.csv`, `disparity_s.csv` and `run_record.json` under the
/// spec's output directory. Failed cells are recorded and skipped in the
/// aggregates.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<RunRecord> {
    spec.validate()?;
    let started = now_unix();
    let pool = thread_pool()?;
    let p_train = spec.p_train()?;
    let all_schemes = spec.all_schemes();
    let min_kl = if all_schemes.is_empty() {
        Vec::new()
    } else {
        min_kl_table(&all_schemes, &p_train, &Distribution::uniform(N_ATOMS))?
    };
    if spec.n_train < 8 * N_ATOMS {
        log::warn!(
            "n_train = {} < {}: fine groupings such as YSA may have empty groups",
            spec.n_train,
            8 * N_ATOMS
        );
    }

    let (cells, splits) = pool.install(|| -> Result<_> {
        let splits: Vec<Splits> = spec
            .seeds
            .par_iter()
            .map(|&i| {
                make_splits(
                    &spec.features,
                    spec.n_train,
                    spec.n_val,
                    spec.n_test,
                    spec.p_s0,
                    spec.p_s1,
                    data_seed(spec.master_seed, i),
                )
            })
            .collect::<Result<_>>()?;

        // JTT's two-stage grid ignores the grouping; train it once per seed.
        let jtt: Vec<Option<Result<Vec<JttCandidate>>>> = spec
            .seeds
            .par_iter()
            .zip(&splits)
            .map(|(&i, sp)| {
                spec.methods.contains(&Method::Jtt).then(|| {
                    let cfg = TrainConfig {
                        seed: cell_seed(spec.master_seed, Method::Jtt, None, i),
                        ..spec.train.clone()
                    };
                    jtt_candidates(&sp.train, &cfg)
                })
            })
            .collect();

        let mut jobs = Vec::new();
        for &m in &spec.methods {
            for (k, _) in spec.seeds.iter().enumerate() {
                if m.uses_grouping() {
                    for s in spec.schemes_for(m) {
                        jobs.push((k, m, Some(s)));
                    }
                } else {
                    jobs.push((k, m, None));
                }
            }
        }
        let cells: Vec<CellResult> = jobs
            .par_iter()
            .map(|(k, method, scheme)| {
                let (method, scheme) = (*method, scheme.as_ref());
                let i = spec.seeds[*k];
                let outcome = run_cell(spec, &splits[*k], jtt[*k].as_ref(), method, scheme, i);
                let kl = scheme.and_then(|s| min_kl.iter().find(|r| r.scheme == *s));
                let (val_auc, test, error) = match outcome {
                    Ok((v, t)) => (Some(v), Some(t), None),
                    Err(e) => {
                        log::warn!("cell {method}/{}/{i} failed: {e}", scheme.map_or("none".into(), |s| s.to_string()));
                        (None, None, Some(e.to_string()))
                    }
                };
                CellResult {
                    method,
                    grouping: scheme.map_or_else(|| "none".to_string(), |s| s.to_string()),
                    seed: i,
                    cell_seed: cell_seed(spec.master_seed, method, scheme, i),
                    val_auc,
                    test,
                    min_kl_gdro: kl.map(|r| r.kl_gdro),
                    min_kl_resampling: kl.map(|r| r.kl_resampling),
                    error,
                }
            })
            .collect();
        Ok((cells, splits))
    })?;
    drop(splits);

    let mut cells = cells;
    // deterministic order: method, scheme position, seed position
    cells.sort_by_key(|c| {
        let m = spec.methods.iter().position(|m| *m == c.method).unwrap_or(usize::MAX);
        let s = spec
            .schemes_for(c.method)
            .iter()
            .position(|s| s.to_string() == c.grouping)
            .unwrap_or(0);
        let k = spec.seeds.iter().position(|&x| x == c.seed).unwrap_or(usize::MAX);
        (m, s, k)
    });

    let record = RunRecord {
        spec_hash: spec.hash(),
        spec: spec.clone(),
        version: VERSION.to_string(),
        started_unix: started,
        finished_unix: now_unix(),
        min_kl,
        cells,
    };
    write_run_outputs(&record, &spec.out)?;
    Ok(record)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

/// Writes the per-cell results, the relative-AUC and S-disparity summaries
/// and the JSON manifest.
pub fn write_run_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut w = csv::Writer::from_writer(create_file(&dir.join("results.csv"))?);
    w.write_record([
        "method",
        "grouping",
        "seed",
        "val_auc",
        "test_auc",
        "min_acc_A",
        "gap_A",
        "min_acc_S",
        "gap_S",
        "min_kl_gdro",
        "min_kl_resampling",
    ])?;
    for c in &record.cells {
        let t = c.test.as_ref();
        w.write_record([
            c.method.to_string(),
            c.grouping.clone(),
            c.seed.to_string(),
            fmt_opt(c.val_auc),
            fmt_opt(t.map(|t| t.overall_auc)),
            fmt_opt(t.map(|t| t.min_acc_a)),
            fmt_opt(t.map(|t| t.gap_a)),
            fmt_opt(t.map(|t| t.min_acc_s)),
            fmt_opt(t.map(|t| t.gap_s)),
            fmt_opt(c.min_kl_gdro),
            fmt_opt(c.min_kl_resampling),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let erm = record.mean_of(Method::Erm, "none", test_auc);
    let mut w = csv::Writer::from_writer(create_file(&dir.join("relative_auc.csv"))?);
    w.write_record(["method", "grouping", "n", "mean_test_auc", "sd_test_auc", "delta_auc_vs_erm"])?;
    for a in record.aggregate(test_auc) {
        w.write_record([
            a.method.to_string(),
            a.grouping.clone(),
            a.n.to_string(),
            fmt_f(a.mean),
            fmt_f(a.sd),
            fmt_opt(erm.map(|e| a.mean - e).filter(|d| d.is_finite())),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mins = record.aggregate(min_acc_s);
    let mut w = csv::Writer::from_writer(create_file(&dir.join("disparity_s.csv"))?);
    w.write_record(["method", "grouping", "n", "mean_min_acc_S", "sd_min_acc_S", "mean_gap_S", "sd_gap_S"])?;
    for (m, g) in mins.iter().zip(record.aggregate(gap_s)) {
        w.write_record([
            m.method.to_string(),
            m.grouping.clone(),
            m.n.to_string(),
            fmt_f(m.mean),
            fmt_f(m.sd),
            fmt_f(g.mean),
            fmt_f(g.sd),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let json = serde_json::to_string_pretty(record)?;
    let path = dir.join("run_record.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub method: Method,
    pub n_schemes: usize,
    pub r: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: Method,
    pub grouping: String,
    pub min_kl: f64,
    pub mean_auc: f64,
    pub sd_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub correlations: Vec<Correlation>,
    pub scatter: Vec<ScatterPoint>,
}

impl CorrelationReport {
    pub fn get(&self, method: Method) -> Option<&Correlation> {
        self.correlations.iter().find(|c| c.method == method)
    }
}

/// Scatter points for one reweighting method: its own minimum KL (optimal
/// weights for gDRO, uniform for resampling) against mean test AUC.
fn scatter_for(record: &RunRecord, method: Method) -> Vec<ScatterPoint> {
    record
        .aggregate(test_auc)
        .into_iter()
        .filter(|a| a.method == method && a.n > 0)
        .filter_map(|a| {
            let row = record.min_kl_for(&a.grouping)?;
            let min_kl = if method == Method::Gdro {
                row.kl_gdro
            } else {
                row.kl_resampling
            };
            Some(ScatterPoint {
                method,
                grouping: a.grouping,
                min_kl,
                mean_auc: a.mean,
                sd_auc: a.sd,
            })
        })
        .collect()
}

/// Pearson correlation between minimum KL and mean test AUC across schemes,
/// separately for gDRO and resampling. Methods absent from the record are
/// skipped; a present method with fewer than three schemes is an error.
pub fn correlate(record: &RunRecord) -> Result<CorrelationReport> {
    let mut correlations = Vec::new();
    let mut scatter = Vec::new();
    for method in [Method::Gdro, Method::Resampling] {
        if !record.cells.iter().any(|c| c.method == method) {
            continue;
        }
        let pts = scatter_for(record, method);
        if pts.len() < 3 {
            return Err(Error::InsufficientSchemes {
                needed: 3,
                got: pts.len(),
            });
        }
        let x: Vec<f64> = pts.iter().map(|p| p.min_kl).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.mean_auc).collect();
        let (r, p_value) = pearson(&x, &y)?;
        correlations.push(Correlation {
            method,
            n_schemes: pts.len(),
            r,
            p_value,
        });
        scatter.extend(pts);
    }
    if correlations.is_empty() {
        return Err(Error::InsufficientSchemes { needed: 3, got: 0 });
    }
    Ok(CorrelationReport { correlations, scatter })
}

/// [`correlate`] plus `correlation.csv` and `scatter.csv` in `dir`.
pub fn cmd_correlate(record: &RunRecord, dir: &Path) -> Result<CorrelationReport> {
    let report = correlate(record)?;
    create_dir(dir)?;
    let mut w = csv::Writer::from_writer(create_file(&dir.join("correlation.csv"))?);
    w.write_record(["method", "n_schemes", "r", "p_value"])?;
    for c in &report.correlations {
        w.write_record([
            c.method.to_string(),
            c.n_schemes.to_string(),
            format!("{:.6}", c.r),
            format!("{:.6e}", c.p_value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(create_file(&dir.join("scatter.csv"))?);
    w.write_record(["method", "grouping", "min_kl", "mean_auc", "sd_auc"])?;
    for p in &report.scatter {
        w.write_record([
            p.method.to_string(),
            p.grouping.clone(),
            format!("{:.6}", p.min_kl),
            format!("{:.6}", p.mean_auc),
            format!("{:.6}", p.sd_auc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(report)
}

/// One sweep of an ablation: ERM shift and correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub p_s0: f64,
    pub p_s1: f64,
    pub n_train: usize,
    pub erm_val_auc: f64,
    pub erm_test_auc: f64,
    pub correlations: Vec<Correlation>,
    /// Whether each correlation has the same sign as in the baseline.
    pub sign_preserved: bool,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

impl AblationVariant {
    pub fn erm_drop(&self) -> f64 {
        self.erm_val_auc - self.erm_test_auc
    }
}

fn variant(name: &str, record: RunRecord, dir: &Path, baseline: Option<&CorrelationReport>) -> Result<AblationVariant> {
    let report = cmd_correlate(&record, dir)?;
    let sign_preserved = baseline.is_none_or(|b| {
        report.correlations.iter().all(|c| {
            b.get(c.method)
                .is_none_or(|bc| bc.r.signum() == c.r.signum())
        })
    });
    let spec = &record.spec;
    Ok(AblationVariant {
        name: name.to_string(),
        p_s0: spec.p_s0,
        p_s1: spec.p_s1,
        n_train: spec.n_train,
        erm_val_auc: record.mean_of(Method::Erm, "none", val_auc).unwrap_or(f64::NAN),
        erm_test_auc: record.mean_of(Method::Erm, "none", test_auc).unwrap_or(f64::NAN),
        correlations: report.correlations,
        sign_preserved,
        record: Some(record),
    })
}

/// Reruns the sweep with a weaker shift (0.85 / 0.70) and with an 8× smaller
/// training set, comparing each with the baseline sweep (run here unless
/// given). Writes each sweep to a subdirectory and `ablation.csv`.
pub fn cmd_ablate(spec: &ExperimentSpec, baseline: Option<RunRecord>) -> Result<Vec<AblationVariant>> {
    spec.validate()?;
    let sub = |name: &str| spec.out.join(name);
    let base_record = match baseline {
        Some(r) => r,
        None => cmd_run(&ExperimentSpec {
            out: sub("baseline"),
            ..spec.clone()
        })?,
    };
    let base = variant("baseline", base_record, &sub("baseline"), None)?;
    let base_report = CorrelationReport {
        correlations: base.correlations.clone(),
        scatter: Vec::new(),
    };

    let weak = ExperimentSpec {
        p_s0: 0.85,
        p_s1: 0.70,
        out: sub("weak_sc"),
        ..spec.clone()
    };
    let small = ExperimentSpec {
        n_train: (spec.n_train / 8).max(1),
        out: sub("small_n"),
        ..spec.clone()
    };
    if small.n_train < 8000 {
        log::warn!(
            "downsampled n_train = {}: small groups make per-group estimates noisy",
            small.n_train
        );
    }
    let weak_v = variant("weak_sc", cmd_run(&weak)?, &weak.out, Some(&base_report))?;
    let small_v = variant("small_n", cmd_run(&small)?, &small.out, Some(&base_report))?;
    let variants = vec![base, weak_v, small_v];

    create_dir(&spec.out)?;
    let mut w = csv::Writer::from_writer(create_file(&spec.out.join("ablation.csv"))?);
    w.write_record([
        "variant",
        "p_s0",
        "p_s1",
        "n_train",
        "erm_val_auc",
        "erm_test_auc",
        "erm_drop",
        "method",
        "r",
        "p_value",
        "sign_preserved",
    ])?;
    for v in &variants {
        for c in &v.correlations {
            w.write_record([
                v.name.clone(),
                v.p_s0.to_string(),
                v.p_s1.to_string(),
                v.n_train.to_string(),
                fmt_f(v.erm_val_auc),
                fmt_f(v.erm_test_auc),
                fmt_f(v.erm_drop()),
                c.method.to_string(),
                format!("{:.6}", c.r),
                format!("{:.6e}", c.p_value),
                v.sign_preserved.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&spec.out, e))?;
    Ok(variants)
}
