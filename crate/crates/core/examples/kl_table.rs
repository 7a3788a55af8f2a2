//! Minimum reachable divergence to the unbiased distribution for every grouping.
//!
//!     cargo run --release --example kl_table [p_s0 p_s1]

use subshift::reweight::min_kl_table;
use subshift::{Distribution, GroupingScheme};

fn main() -> subshift::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("probability")).collect();
    let (p0, p1) = match args[..] {
        [a, b] => (a, b),
        _ => (0.95, 0.8),
    };
    let train = Distribution::biased(p0, p1)?;
    let target = Distribution::uniform(8);

    let mut schemes = GroupingScheme::reweighting_schemes();
    schemes.extend([GroupingScheme::AS, GroupingScheme::A4, GroupingScheme::S4]);
    println!("P_train(s0={p0}, s1={p1})");
    println!("{:<14} {:>8} {:>8}", "scheme", "optimal", "uniform");
    for row in min_kl_table(&schemes, &train, &target)? {
        println!("{:<14} {:>8.3} {:>8.3}", row.scheme.to_string(), row.kl_gdro, row.kl_resampling);
    }
    Ok(())
}
