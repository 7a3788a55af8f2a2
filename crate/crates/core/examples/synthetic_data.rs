//! Draws biased train/val and unbiased test splits, prints atom frequencies,
//! and writes them to a directory as CSV plus JSON sidecars.
//!
//!     cargo run --release --example synthetic_data [out_dir]

use std::path::PathBuf;

use subshift::{annotate_samples, make_splits, Atom, FeatureConfig, GroupingScheme};

fn main() -> subshift::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/synthetic".into()));
    let cfg = FeatureConfig::default();
    let splits = make_splits(&cfg, 8000, 2000, 8000, 0.95, 0.8, 7)?;

    println!("{} features per sample", cfg.n_features());
    println!(" atom (y,s,a)   train    test");
    let (tr, te) = (splits.train.atom_frequencies(), splits.test.atom_frequencies());
    for atom in Atom::all() {
        let j = atom.index();
        println!("  ({},{},{})       {:.3}   {:.3}", atom.y, atom.s, atom.a, tr[j], te[j]);
    }

    let train = annotate_samples(&splits.train, &GroupingScheme::AY, 7)?;
    let groups = train.groups().expect("annotated");
    let mut counts = [0usize; 4];
    for g in groups {
        counts[g] += 1;
    }
    println!("AY group sizes in train: {counts:?}");

    train.save(&out, "train")?;
    splits.val.save(&out, "val")?;
    splits.test.save(&out, "test")?;
    println!("wrote {}", out.display());
    Ok(())
}
