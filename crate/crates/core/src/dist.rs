//! Probability vectors over the joint assignments of the binary variables
//! (Y, S, A), together with reweighting, divergences and the Pinsker bound.
//!
//! Atoms are laid out as `index = 4·y + 2·s + a`, so index 0 is
//! (y=0, s=0, a=0) and index 7 is (y=1, s=1, a=1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::SoftGrouping;
use crate::reweight::WeightVector;

/// Number of atoms for three binary variables.
pub const N_ATOMS: usize = 8;

const INPUT_SLACK: f64 = 1e-9;
const NEG_SLACK: f64 = 1e-12;

/// One joint assignment of (Y, S, A).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub y: u8,
    pub s: u8,
    pub a: u8,
}

impl Atom {
    pub fn new(y: u8, s: u8, a: u8) -> Self {
        debug_assert!(y <= 1 && s <= 1 && a <= 1);
        Atom { y, s, a }
    }

    pub fn index(self) -> usize {
        4 * self.y as usize + 2 * self.s as usize + self.a as usize
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < N_ATOMS, "atom index {index} out of range");
        Atom {
            y: (index >> 2) as u8 & 1,
            s: (index >> 1) as u8 & 1,
            a: index as u8 & 1,
        }
    }

    /// All atoms in canonical index order.
    pub fn all() -> impl Iterator<Item = Atom> {
        (0..N_ATOMS).map(Atom::from_index)
    }

    /// Bias-aligned atoms satisfy the spurious correlation `a == y`.
    pub fn is_bias_aligned(self) -> bool {
        self.a == self.y
    }
}

/// A validated probability vector. Entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Distribution::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

impl Distribution {
    /// Validates a probability vector. Tiny negatives (down to -1e-12) are
    /// clamped to zero and a sum within 1e-9 of one is renormalized.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::NonNormalizable("empty vector".into()));
        }
        for (j, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() || *p < -NEG_SLACK {
                return Err(Error::NonNormalizable(format!("entry {j} = {p}")));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > INPUT_SLACK {
            return Err(Error::NonNormalizable(format!("sum = {total}")));
        }
        if total != 1.0 {
            for p in probs.iter_mut() {
                *p /= total;
            }
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Distribution over the 8 atoms with balanced classes and attributes,
    /// where a fraction `p_s0` (resp. `p_s1`) of the S=0 (resp. S=1) mass is
    /// bias-aligned (`a == y`).
    pub fn biased(p_s0: f64, p_s1: f64) -> Result<Self> {
        for (name, v) in [("p_s0", p_s0), ("p_s1", p_s1)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::OutOfRange(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        let probs = Atom::all()
            .map(|atom| {
                let aligned = if atom.s == 0 { p_s0 } else { p_s1 };
                0.25 * if atom.is_bias_aligned() {
                    aligned
                } else {
                    1.0 - aligned
                }
            })
            .collect();
        Distribution::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, j: usize) -> f64 {
        self.probs[j]
    }

    /// Probability of the atoms for which `pred` holds.
    pub fn mass_where(&self, pred: impl Fn(Atom) -> bool) -> f64 {
        assert_eq!(self.len(), N_ATOMS);
        Atom::all()
            .filter(|&atom| pred(atom))
            .map(|atom| self.probs[atom.index()])
            .sum()
    }
}

/// `KL(p ‖ q) = Σ p_j ln(p_j / q_j)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} atoms",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (j, (&pj, &qj)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pj == 0.0 {
            continue;
        }
        if qj == 0.0 {
            return Err(Error::SupportMismatch { atom: j, p: pj });
        }
        kl += pj * (pj / qj).ln();
    }
    // rounding can leave a tiny negative when p ≈ q
    Ok(kl.max(0.0))
}

/// Divergence of a (reweighted) training distribution from a deployment
/// target, measured as `KL(target ‖ p_w)`.
///
/// This is the direction in which the reference value 0.527 for the default
/// biased distribution against the uniform target is obtained; the forward
/// direction gives 0.344. The target must be absolutely continuous with
/// respect to `p_w`, so reweightings that zero out an atom the target cares
/// about are reported as a support mismatch.
pub fn divergence_to_target(p_w: &Distribution, target: &Distribution) -> Result<f64> {
    kl_divergence(target, p_w)
}

/// Total variation distance `½ Σ |p_j − q_j|`.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> f64 {
    assert_eq!(p.len(), q.len(), "tv_distance on unequal lengths");
    0.5 * p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Upper bound on deployment error from training error and divergence:
/// `train_err + sqrt(kl / 2)`.
pub fn pinsker_bound(train_err: f64, kl: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&train_err) {
        return Err(Error::OutOfRange(format!("train_err = {train_err}")));
    }
    if !(kl >= 0.0) {
        return Err(Error::OutOfRange(format!("kl = {kl}")));
    }
    Ok(train_err + (kl / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub kl: f64,
    pub tv: f64,
    pub pinsker_bound: f64,
}

impl DivergenceReport {
    pub fn new(p_w: &Distribution, target: &Distribution, train_err: f64) -> Result<Self> {
        let kl = divergence_to_target(p_w, target)?;
        Ok(DivergenceReport {
            kl,
            tv: tv_distance(p_w, target),
            pinsker_bound: pinsker_bound(train_err, kl)?,
        })
    }
}

/// Reweights `p` so that group `i` carries total mass `w_i` while the
/// relative proportions of atoms inside each group are kept.
///
/// For a soft grouping with conditionals `P(g_i | atom j)`, atom `j`
/// contributes `m_{j,i} = p_j · P(g_i | j)` to group `i`, and
/// `P^w[j] = Σ_i w_i · m_{j,i} / M_i` with `M_i = Σ_j m_{j,i}`.
/// Groups with zero mass and zero weight are skipped.
pub fn reweighted_distribution(
    p: &Distribution,
    grouping: &SoftGrouping,
    w: &WeightVector,
) -> Result<Distribution> {
    let k = grouping.n_groups();
    check_shapes(p, grouping.n_atoms(), k, w)?;
    let mass = grouping.group_masses(p);
    let mut out = vec![0.0; p.len()];
    for i in 0..k {
        let wi = w.get(i);
        if mass[i] == 0.0 {
            if wi > 0.0 {
                return Err(Error::EmptyGroup(i));
            }
            log::warn!("dropping empty group {i} ({})", grouping.group_names()[i]);
            continue;
        }
        if wi == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let m = p.get(j) * grouping.prob(j, i);
            *o += wi * (m / mass[i]);
        }
    }
    Distribution::new(out)
}

/// Reweighting for a hard partition given as index sets.
pub fn reweighted_hard(
    p: &Distribution,
    groups: &[Vec<usize>],
    w: &WeightVector,
) -> Result<Distribution> {
    check_shapes(p, p.len(), groups.len(), w)?;
    let mut out = vec![0.0; p.len()];
    for (i, members) in groups.iter().enumerate() {
        let mut mass = 0.0;
        for j in 0..p.len() {
            if members.contains(&j) {
                mass += p.get(j);
            }
        }
        let wi = w.get(i);
        if mass == 0.0 {
            if wi > 0.0 {
                return Err(Error::EmptyGroup(i));
            }
            continue;
        }
        if wi == 0.0 {
            continue;
        }
        for &j in members {
            out[j] += wi * (p.get(j) / mass);
        }
    }
    Distribution::new(out)
}

fn check_shapes(p: &Distribution, n_atoms: usize, k: usize, w: &WeightVector) -> Result<()> {
    if p.len() != n_atoms {
        return Err(Error::DimensionMismatch(format!(
            "distribution has {} atoms, grouping {}",
            p.len(),
            n_atoms
        )));
    }
    if w.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} groups",
            w.len(),
            k
        )));
    }
    Ok(())
}
