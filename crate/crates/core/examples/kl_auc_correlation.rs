//! Small sweep over schemes for gDRO and resampling, then the correlation
//! between minimum KL and mean test AUC.
//!
//!     SSL_THREADS=4 cargo run --release --example kl_auc_correlation [out_dir]

use std::path::PathBuf;

use subshift::harness::{cmd_correlate, cmd_run, test_auc, ExperimentSpec};
use subshift::mitigation::Method;

fn main() -> subshift::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/correlation".into()));
    let spec = ExperimentSpec {
        methods: vec![Method::Erm, Method::Gdro, Method::Resampling],
        seeds: vec![0, 1, 2],
        out: out.clone(),
        ..ExperimentSpec::default()
    };
    let record = cmd_run(&spec)?;

    for agg in record.aggregate(test_auc) {
        println!("{:<11} {:<14} {:.3} ± {:.3}", agg.method.to_string(), agg.grouping, agg.mean, agg.sd);
    }
    let report = cmd_correlate(&record, &out)?;
    for c in &report.correlations {
        println!("{}: r = {:+.3} over {} schemes (p = {:.1e})", c.method, c.r, c.n_schemes, c.p_value);
    }
    println!("outputs in {}", out.display());
    Ok(())
}
