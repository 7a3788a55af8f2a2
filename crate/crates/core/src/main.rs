use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subshift::harness::{cmd_ablate, cmd_analyze_kl, cmd_correlate, cmd_run, ExperimentSpec, RunRecord};
use subshift::{GroupingScheme, Result};

#[derive(Parser)]
#[command(version, about = "Subgroup choice and bias mitigation under spurious-correlation shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment spec; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long = "p-s0")]
    p_s0: Option<f64>,
    #[arg(long = "p-s1")]
    p_s1: Option<f64>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_json_file(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        if let Some(s) = &self.seeds {
            spec.seeds = s.clone();
        }
        if let Some(p) = self.p_s0 {
            spec.p_s0 = p;
        }
        if let Some(p) = self.p_s1 {
            spec.p_s1 = p;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Minimum achievable KL per grouping scheme.
    AnalyzeKl {
        #[command(flatten)]
        common: Common,
        /// Restrict to these schemes (repeatable).
        #[arg(long)]
        scheme: Vec<GroupingScheme>,
        /// Fail if any cell deviates from the reference table.
        #[arg(long)]
        check: bool,
    },
    /// Train and evaluate every (method, scheme, seed) cell.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Correlate minimum KL with mean test AUC from a run record.
    Correlate {
        /// run_record.json, or the directory containing it.
        record: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weak-shift and downsampled reruns with correlation comparison.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse an existing baseline run record instead of rerunning it.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn record_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("run_record.json")
    } else {
        p
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::AnalyzeKl { common, scheme, check } => {
            let spec = common.spec()?;
            let schemes = (!scheme.is_empty()).then_some(scheme.as_slice());
            let analysis = cmd_analyze_kl(&spec, schemes, check)?;
            println!("{:<16} {:>9} {:>13}", "scheme", "kl_gdro", "kl_resampling");
            for r in &analysis.rows {
                println!("{:<16} {:>9.3} {:>13.3}", r.scheme.to_string(), r.kl_gdro, r.kl_resampling);
            }
            for (scheme, col, got, want) in &analysis.deviations {
                eprintln!("mismatch: {scheme} {col} = {got:.6}, reference {want:.3}");
            }
            if !analysis.deviations.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Run { common } => {
            let record = cmd_run(&common.spec()?)?;
            let failed = record.failures().count();
            println!(
                "{} cells, {failed} failed; results in {}",
                record.cells.len(),
                record.spec.out.display()
            );
        }
        Command::Correlate { record, out } => {
            let path = record_path(record);
            let rec = RunRecord::load(&path)?;
            let dir = out.unwrap_or_else(|| path.parent().map(PathBuf::from).unwrap_or_default());
            let report = cmd_correlate(&rec, &dir)?;
            for c in &report.correlations {
                println!("{:<11} n={:<3} r={:+.3} p={:.2e}", c.method.to_string(), c.n_schemes, c.r, c.p_value);
            }
        }
        Command::Ablate { common, baseline } => {
            let baseline = baseline.map(|p| RunRecord::load(&record_path(p))).transpose()?;
            for v in cmd_ablate(&common.spec()?, baseline)? {
                print!("{:<9} ERM val {:.3} test {:.3}", v.name, v.erm_val_auc, v.erm_test_auc);
                for c in &v.correlations {
                    print!("  {} r={:+.3}", c.method, c.r);
                }
                println!("  signs preserved: {}", v.sign_preserved);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
