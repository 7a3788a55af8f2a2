//! Subgroup definitions as conditional assignment matrices `P(g | atom)`,
//! and sample-level annotation driven by those matrices.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{Atom, Distribution, N_ATOMS};
use crate::error::{Error, Result};
use crate::synth::Dataset;

const ROW_TOL: f64 = 1e-12;

/// Atoms × groups matrix of conditional group probabilities. A hard
/// partition is the special case where every row holds a single one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftGrouping {
    n_atoms: usize,
    n_groups: usize,
    /// row-major `[n_atoms × n_groups]`
    assign: Vec<f64>,
    group_names: Vec<String>,
    scheme_id: String,
}

impl SoftGrouping {
    pub fn new(
        rows: Vec<Vec<f64>>,
        group_names: Vec<String>,
        scheme_id: impl Into<String>,
    ) -> Result<Self> {
        let n_atoms = rows.len();
        let k = group_names.len();
        if n_atoms == 0 || k == 0 {
            return Err(Error::InvalidScheme("grouping needs ≥ 1 atom and ≥ 1 group".into()));
        }
        let mut assign = Vec::with_capacity(n_atoms * k);
        for (j, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidScheme(format!(
                    "row {j} has {} entries for {k} groups",
                    row.len()
                )));
            }
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidScheme(format!("row {j} has a negative entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidScheme(format!("row {j} sums to {total}")));
            }
            assign.extend(row);
        }
        Ok(SoftGrouping {
            n_atoms,
            n_groups: k,
            assign,
            group_names,
            scheme_id: scheme_id.into(),
        })
    }

    /// Hard partition from one group label per atom.
    pub fn hard(
        labels: Vec<usize>,
        group_names: Vec<String>,
        scheme_id: impl Into<String>,
    ) -> Result<Self> {
        let k = group_names.len();
        let rows = labels
            .iter()
            .map(|&g| {
                if g >= k {
                    return Err(Error::InvalidScheme(format!("label {g} ≥ {k} groups")));
                }
                let mut row = vec![0.0; k];
                row[g] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        SoftGrouping::new(rows, group_names, scheme_id)
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn scheme_id(&self) -> &str {
        &self.scheme_id
    }

    /// `P(group | atom)`.
    pub fn prob(&self, atom: usize, group: usize) -> f64 {
        self.assign[atom * self.n_groups + group]
    }

    pub fn row(&self, atom: usize) -> &[f64] {
        &self.assign[atom * self.n_groups..(atom + 1) * self.n_groups]
    }

    /// Mass `M_i = Σ_j p_j · P(g_i | j)` of every group under `p`.
    pub fn group_masses(&self, p: &Distribution) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_groups];
        for j in 0..self.n_atoms {
            for (i, m) in mass.iter_mut().enumerate() {
                *m += p.get(j) * self.prob(j, i);
            }
        }
        mass
    }

    pub fn is_hard(&self) -> bool {
        self.assign.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Index sets of a hard partition, `None` for soft groupings.
    pub fn hard_groups(&self) -> Option<Vec<Vec<usize>>> {
        if !self.is_hard() {
            return None;
        }
        let mut groups = vec![Vec::new(); self.n_groups];
        for j in 0..self.n_atoms {
            let g = self.row(j).iter().position(|&v| v == 1.0)?;
            groups[g].push(j);
        }
        Some(groups)
    }

    /// True when no group assignment depends on the class label, i.e.
    /// atoms that differ only in `y` share the same row.
    pub fn is_y_free(&self) -> bool {
        if self.n_atoms != N_ATOMS {
            return false;
        }
        (0..N_ATOMS)
            .filter(|j| Atom::from_index(*j).y == 0)
            .all(|j| self.row(j) == self.row(j ^ 4))
    }

    /// Splits every group into two children of equal conditional mass.
    /// Children of group `i` are `2i` and `2i + 1`.
    pub fn refine(&self) -> SoftGrouping {
        let k = self.n_groups;
        let mut assign = Vec::with_capacity(self.n_atoms * 2 * k);
        for j in 0..self.n_atoms {
            for &v in self.row(j) {
                assign.push(0.5 * v);
                assign.push(0.5 * v);
            }
        }
        let group_names = self
            .group_names
            .iter()
            .flat_map(|n| [format!("{n}/0"), format!("{n}/1")])
            .collect();
        SoftGrouping {
            n_atoms: self.n_atoms,
            n_groups: 2 * k,
            assign,
            group_names,
            scheme_id: format!("{}_refined", self.scheme_id),
        }
    }
}

/// The subgroup definitions that can drive mitigation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupingScheme {
    Y,
    A,
    S,
    AY,
    SY,
    YSA,
    ScNoSc,
    AY8,
    SY8,
    A4,
    S4,
    AS,
    Random(usize),
    NoisyAY(f64),
    NoisyA(f64),
}

/// Noise levels swept for the noisy schemes.
pub const NOISE_LEVELS: [f64; 5] = [0.01, 0.05, 0.10, 0.25, 0.50];

impl GroupingScheme {
    /// The fifteen schemes usable with reweighting methods, in reporting order.
    pub fn reweighting_schemes() -> Vec<GroupingScheme> {
        use GroupingScheme::*;
        let mut v = vec![A, Y, S, AY, SY, YSA, ScNoSc, AY8, SY8, Random(4)];
        v.extend(NOISE_LEVELS.iter().map(|&b| NoisyAY(b)));
        v
    }

    /// Label-free schemes usable with model-based methods.
    pub fn model_based_schemes() -> Vec<GroupingScheme> {
        use GroupingScheme::*;
        let mut v = vec![A, S, AS, A4, S4, Random(4)];
        v.extend(NOISE_LEVELS.iter().map(|&b| NoisyA(b)));
        v
    }

    pub fn is_noisy(&self) -> bool {
        matches!(self, GroupingScheme::NoisyAY(_) | GroupingScheme::NoisyA(_))
    }

    pub fn n_groups(&self) -> usize {
        use GroupingScheme::*;
        match self {
            Y | A | S | ScNoSc | NoisyA(_) => 2,
            AY | SY | AS | A4 | S4 | NoisyAY(_) => 4,
            YSA | AY8 | SY8 => 8,
            Random(k) => *k,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            GroupingScheme::Random(0) => Err(Error::InvalidScheme("Random needs k ≥ 1".into())),
            GroupingScheme::NoisyAY(b) | GroupingScheme::NoisyA(b) if !(0.0..1.0).contains(&b) => {
                Err(Error::InvalidScheme(format!("noise fraction {b} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GroupingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use GroupingScheme::*;
        match self {
            Y => f.write_str("Y"),
            A => f.write_str("A"),
            S => f.write_str("S"),
            AY => f.write_str("AY"),
            SY => f.write_str("SY"),
            YSA => f.write_str("YSA"),
            ScNoSc => f.write_str("SC_noSC"),
            AY8 => f.write_str("AY_8"),
            SY8 => f.write_str("SY_8"),
            A4 => f.write_str("A_4"),
            S4 => f.write_str("S_4"),
            AS => f.write_str("AS"),
            Random(4) => f.write_str("Random"),
            Random(k) => write!(f, "Random_{k}"),
            NoisyAY(b) => write!(f, "Noisy_AY_{b:.2}"),
            NoisyA(b) => write!(f, "Noisy_A_{b:.2}"),
        }
    }
}

impl FromStr for GroupingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use GroupingScheme::*;
        let bad = || Error::InvalidScheme(format!("unknown scheme {s:?}"));
        let scheme = match s {
            "Y" => Y,
            "A" => A,
            "S" => S,
            "AY" => AY,
            "SY" => SY,
            "YSA" => YSA,
            "SC_noSC" => ScNoSc,
            "AY_8" => AY8,
            "SY_8" => SY8,
            "A_4" => A4,
            "S_4" => S4,
            "AS" => AS,
            "Random" => Random(4),
            _ => {
                if let Some(k) = s.strip_prefix("Random_") {
                    Random(k.parse().map_err(|_| bad())?)
                } else if let Some(b) = s.strip_prefix("Noisy_AY_") {
                    NoisyAY(b.parse().map_err(|_| bad())?)
                } else if let Some(b) = s.strip_prefix("Noisy_A_") {
                    NoisyA(b.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl Serialize for GroupingScheme {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupingScheme {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn hard_by(
    scheme: &GroupingScheme,
    names: &[&str],
    label: impl Fn(Atom) -> usize,
) -> Result<SoftGrouping> {
    SoftGrouping::hard(
        Atom::all().map(label).collect(),
        names.iter().map(|s| s.to_string()).collect(),
        scheme.to_string(),
    )
}

fn with_id(mut g: SoftGrouping, scheme: &GroupingScheme) -> SoftGrouping {
    g.scheme_id = scheme.to_string();
    g
}

/// Mixes a clean hard grouping with its group marginals under `p_train`:
/// row `(1 − b)·δ_clean + b·marginal`.
fn noisy(clean: SoftGrouping, b: f64, p_train: &Distribution, scheme: &GroupingScheme) -> Result<SoftGrouping> {
    let marginal = clean.group_masses(p_train);
    let rows = (0..clean.n_atoms())
        .map(|j| {
            clean
                .row(j)
                .iter()
                .zip(&marginal)
                .map(|(&d, &m)| (1.0 - b) * d + b * m)
                .collect()
        })
        .collect();
    SoftGrouping::new(rows, clean.group_names.clone(), scheme.to_string())
}

/// Builds the atom-level assignment matrix of a scheme. `p_train` supplies
/// the group marginals that noisy annotations are drawn from.
pub fn atom_grouping(scheme: &GroupingScheme, p_train: &Distribution) -> Result<SoftGrouping> {
    use GroupingScheme::*;
    scheme.validate()?;
    if p_train.len() != N_ATOMS {
        return Err(Error::DimensionMismatch(format!(
            "groupings are defined over {N_ATOMS} atoms, got {}",
            p_train.len()
        )));
    }
    match *scheme {
        Y => hard_by(scheme, &["Y=0", "Y=1"], |t| t.y as usize),
        A => hard_by(scheme, &["A=0", "A=1"], |t| t.a as usize),
        S => hard_by(scheme, &["S=0", "S=1"], |t| t.s as usize),
        AY => hard_by(
            scheme,
            &["Y=0,A=0", "Y=0,A=1", "Y=1,A=0", "Y=1,A=1"],
            |t| 2 * t.y as usize + t.a as usize,
        ),
        SY => hard_by(
            scheme,
            &["Y=0,S=0", "Y=0,S=1", "Y=1,S=0", "Y=1,S=1"],
            |t| 2 * t.y as usize + t.s as usize,
        ),
        AS => hard_by(
            scheme,
            &["A=0,S=0", "A=0,S=1", "A=1,S=0", "A=1,S=1"],
            |t| 2 * t.a as usize + t.s as usize,
        ),
        YSA => {
            let names: Vec<String> = Atom::all()
                .map(|t| format!("Y={},S={},A={}", t.y, t.s, t.a))
                .collect();
            SoftGrouping::hard((0..N_ATOMS).collect(), names, scheme.to_string())
        }
        ScNoSc => hard_by(scheme, &["SC", "noSC"], |t| {
            if t.is_bias_aligned() {
                0
            } else {
                1
            }
        }),
        AY8 => Ok(with_id(atom_grouping(&AY, p_train)?.refine(), scheme)),
        SY8 => Ok(with_id(atom_grouping(&SY, p_train)?.refine(), scheme)),
        A4 => Ok(with_id(atom_grouping(&A, p_train)?.refine(), scheme)),
        S4 => Ok(with_id(atom_grouping(&S, p_train)?.refine(), scheme)),
        Random(k) => SoftGrouping::new(
            vec![vec![1.0 / k as f64; k]; N_ATOMS],
            (0..k).map(|i| format!("R{i}")).collect(),
            scheme.to_string(),
        ),
        NoisyAY(b) => noisy(atom_grouping(&AY, p_train)?, b, p_train, scheme),
        NoisyA(b) => noisy(atom_grouping(&A, p_train)?, b, p_train, scheme),
    }
}

/// Group annotation carried by an annotated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnnotation {
    pub scheme: GroupingScheme,
    pub n_groups: usize,
    pub group_names: Vec<String>,
    pub y_free: bool,
}

/// Annotates every sample with a group id drawn from its atom's row of the
/// scheme's assignment matrix. Only the `group` field is written.
pub fn annotate_samples(dataset: &Dataset, scheme: &GroupingScheme, seed: u64) -> Result<Dataset> {
    let grouping = atom_grouping(scheme, dataset.source_distribution())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for sample in out.samples_mut() {
        let row = grouping.row(sample.atom().index());
        sample.group = Some(draw_from_row(row, &mut rng));
    }
    out.set_annotation(GroupAnnotation {
        scheme: *scheme,
        n_groups: grouping.n_groups(),
        group_names: grouping.group_names().to_vec(),
        y_free: grouping.is_y_free(),
    });
    Ok(out)
}

fn draw_from_row(row: &[f64], rng: &mut impl Rng) -> usize {
    if let Some(g) = row.iter().position(|&v| v == 1.0) {
        return g;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (g, &v) in row.iter().enumerate() {
        acc += v;
        if u < acc {
            return g;
        }
    }
    // u landed in the rounding slack past the last positive entry
    row.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}
