//! Optimal group weights for one scheme, and the reweighted atom distribution they produce.
//!
//!     cargo run --release --example optimal_weights -- AY

use subshift::reweight::{resampling_weights, OptimizerOptions};
use subshift::{atom_grouping, divergence_to_target, optimal_weights, reweighted_distribution};
use subshift::{Atom, Distribution, GroupingScheme};

fn main() -> subshift::Result<()> {
    let scheme: GroupingScheme = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "AY".into())
        .parse()
        .expect("unknown scheme");
    let train = Distribution::biased(0.95, 0.8)?;
    let target = Distribution::uniform(8);
    let grouping = atom_grouping(&scheme, &train)?;

    let opt = optimal_weights(&train, &grouping, &target, OptimizerOptions::default())?;
    let uni = resampling_weights(&grouping);
    println!("{scheme}: {} groups, {} iterations, converged={}", grouping.n_groups(), opt.iterations, opt.converged);
    for (name, w) in grouping.group_names().iter().zip(opt.weights.as_slice()) {
        println!("  w[{name}] = {w:.4}");
    }

    let p_opt = reweighted_distribution(&train, &grouping, &opt.weights)?;
    let p_uni = reweighted_distribution(&train, &grouping, &uni)?;
    println!("\n atom (y,s,a)   P_train   optimal   uniform");
    for atom in Atom::all() {
        let j = atom.index();
        println!(
            "  ({},{},{})        {:.4}    {:.4}    {:.4}",
            atom.y,
            atom.s,
            atom.a,
            train.get(j),
            p_opt.get(j),
            p_uni.get(j)
        );
    }
    println!(
        "\nKL to uniform: optimal {:.4}, uniform weights {:.4}",
        divergence_to_target(&p_opt, &target)?,
        divergence_to_target(&p_uni, &target)?
    );
    Ok(())
}
