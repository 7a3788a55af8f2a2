//! Baseline, weaker shortcut and downsampled training set, compared side by side.
//! Runs three full sweeps; expect a few minutes.

use std::path::PathBuf;

use subshift::harness::{cmd_ablate, ExperimentSpec};
use subshift::mitigation::Method;

fn main() -> subshift::Result<()> {
    let spec = ExperimentSpec {
        methods: vec![Method::Erm, Method::Gdro, Method::Resampling],
        out: PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/ablation".into())),
        ..ExperimentSpec::default()
    };
    for v in cmd_ablate(&spec, None)? {
        println!(
            "{:<9} p=({}, {}) n={:<5} ERM val {:.3} test {:.3} drop {:.3}",
            v.name, v.p_s0, v.p_s1, v.n_train, v.erm_val_auc, v.erm_test_auc, v.erm_drop()
        );
        for c in &v.correlations {
            println!("          {:<11} r = {:+.3}", c.method.to_string(), c.r);
        }
    }
    Ok(())
}
