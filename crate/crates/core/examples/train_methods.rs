//! Trains each mitigation method on one seed and reports test AUC and S-group accuracy.
//!
//!     cargo run --release --example train_methods

use subshift::mitigation::{train, Method, TrainConfig};
use subshift::{annotate_samples, evaluate, make_splits, FeatureConfig, GroupingScheme};

fn main() -> subshift::Result<()> {
    let splits = make_splits(&FeatureConfig::default(), 8000, 2000, 8000, 0.95, 0.8, 1)?;
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };

    let runs = [
        (Method::Erm, None),
        (Method::Gdro, Some(GroupingScheme::AY)),
        (Method::Gdro, Some(GroupingScheme::S)),
        (Method::Resampling, Some(GroupingScheme::AY)),
        (Method::Resampling, Some(GroupingScheme::S)),
        (Method::DomainInd, Some(GroupingScheme::A)),
        (Method::CFair, Some(GroupingScheme::A)),
        (Method::Jtt, Some(GroupingScheme::AY)),
    ];
    println!("{:<11} {:<5} {:>8} {:>8} {:>9} {:>7}", "method", "group", "val_auc", "test_auc", "min_acc_S", "gap_S");
    for (method, scheme) in runs {
        let (tr, va) = match &scheme {
            Some(s) => (annotate_samples(&splits.train, s, 1)?, annotate_samples(&splits.val, s, 2)?),
            None => (splits.train.clone(), splits.val.clone()),
        };
        let model = train(method, &tr, &va, &cfg)?;
        let v = evaluate(&model, &splits.val)?;
        let t = evaluate(&model, &splits.test)?;
        let name = scheme.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:<11} {:<5} {:>8.3} {:>8.3} {:>9.3} {:>7.3}",
            method.to_string(),
            name,
            v.overall_auc,
            t.overall_auc,
            t.min_acc_s,
            t.gap_s
        );
    }
    Ok(())
}
