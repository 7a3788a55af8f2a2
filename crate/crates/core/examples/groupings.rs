//! Atom-to-group matrices for hard, coarse-grained, random and noisy schemes.

use subshift::{atom_grouping, Atom, Distribution, GroupingScheme};

fn main() -> subshift::Result<()> {
    let train = Distribution::biased(0.95, 0.8)?;
    for scheme in [
        GroupingScheme::AY,
        GroupingScheme::ScNoSc,
        GroupingScheme::Random(4),
        GroupingScheme::NoisyAY(0.25),
    ] {
        let g = atom_grouping(&scheme, &train)?;
        println!("{scheme} (hard={}, y-free={})", g.is_hard(), g.is_y_free());
        print!("  y s a ");
        for name in g.group_names() {
            print!("{name:>8}");
        }
        println!();
        for atom in Atom::all() {
            print!("  {} {} {} ", atom.y, atom.s, atom.a);
            for p in g.row(atom.index()) {
                print!("{p:>8.3}");
            }
            println!();
        }
        let masses: Vec<String> = g.group_masses(&train).iter().map(|m| format!("{m:.3}")).collect();
        println!("  group mass under P_train: [{}]\n", masses.join(", "));
    }
    Ok(())
}
