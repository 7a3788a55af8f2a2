//! Synthetic tabular data with the structure of the spurious-correlation
//! setting: three Gaussian feature blocks encoding Y, A and S, with the joint
//! distribution of (Y, S, A) drawn from a biased or an unbiased distribution.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{Atom, Distribution};
use crate::error::{Error, Result};
use crate::grouping::GroupAnnotation;
use crate::seed::derive_seed;

/// Block sizes and signal strengths of the feature generator.
///
/// Block `b` of a sample is drawn from `N(mu_b·(2v − 1)·1, noise_sd²·I)`
/// where `v` is the sample's binary value of the block's variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub d_y: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub mu_y: f64,
    pub mu_a: f64,
    pub mu_s: f64,
    pub noise_sd: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d_y: 5,
            d_a: 5,
            d_s: 5,
            mu_y: 0.25,
            mu_a: 2.0,
            mu_s: 1.0,
            noise_sd: 1.0,
        }
    }
}

impl FeatureConfig {
    pub fn n_features(&self) -> usize {
        self.d_y + self.d_a + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_y == 0 || self.d_a == 0 || self.d_s == 0 {
            return Err(Error::Config("feature blocks need ≥ 1 dimension".into()));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config(format!("noise_sd = {}", self.noise_sd)));
        }
        if ![self.mu_y, self.mu_a, self.mu_s].iter().all(|m| m.is_finite()) {
            return Err(Error::Config("non-finite signal mean".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub y: u8,
    pub s: u8,
    pub a: u8,
    pub group: Option<usize>,
}

impl Sample {
    pub fn atom(&self) -> Atom {
        Atom::new(self.y, self.s, self.a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    source_distribution: Distribution,
    seed: u64,
    feature_config: FeatureConfig,
    annotation: Option<GroupAnnotation>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        source_distribution: Distribution,
        seed: u64,
        feature_config: FeatureConfig,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("dataset must be non-empty".into()));
        }
        let d = feature_config.n_features();
        if let Some(s) = samples.iter().find(|s| s.features.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} features, config {d}",
                s.features.len()
            )));
        }
        Ok(Dataset {
            samples,
            source_distribution,
            seed,
            feature_config,
            annotation: None,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source_distribution(&self) -> &Distribution {
        &self.source_distribution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.feature_config
    }

    pub fn n_features(&self) -> usize {
        self.feature_config.n_features()
    }

    pub fn annotation(&self) -> Option<&GroupAnnotation> {
        self.annotation.as_ref()
    }

    pub(crate) fn set_annotation(&mut self, annotation: GroupAnnotation) {
        self.annotation = Some(annotation);
    }

    /// Group id of every sample; `None` when the dataset is not annotated.
    pub fn groups(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.group).collect()
    }

    /// Empirical atom frequencies.
    pub fn atom_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0.0; crate::dist::N_ATOMS];
        for s in &self.samples {
            counts[s.atom().index()] += 1.0;
        }
        let n = self.len() as f64;
        counts.iter().map(|c| c / n).collect()
    }

    /// A dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut out = Dataset::new(
            samples,
            self.source_distribution.clone(),
            self.seed,
            self.feature_config.clone(),
        )?;
        out.annotation = self.annotation.clone();
        Ok(out)
    }

    /// Writes `feat_0..feat_{d-1},y,s,a,group`; the group column is empty
    /// for unannotated samples.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.n_features()).map(|i| format!("feat_{i}")).collect();
        header.extend(["y", "s", "a", "group"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
            rec.push(s.y.to_string());
            rec.push(s.s.to_string());
            rec.push(s.a.to_string());
            rec.push(s.group.map(|g| g.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
        Ok(())
    }

    /// JSON sidecar recording how the dataset was generated.
    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            feature_config: self.feature_config.clone(),
            distribution: self.source_distribution.clone(),
            seed: self.seed,
            n_samples: self.len(),
            annotation: self.annotation.clone(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(BufWriter::new(f))?;
        let json_path = dir.join(format!("{stem}.json"));
        let f = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.sidecar())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub feature_config: FeatureConfig,
    pub distribution: Distribution,
    pub seed: u64,
    pub n_samples: usize,
    pub annotation: Option<GroupAnnotation>,
}

/// Draws `n` i.i.d. samples: the atom from `dist`, then each feature block
/// from its Gaussian.
pub fn sample_dataset(dist: &Distribution, n: usize, cfg: &FeatureConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be ≥ 1".into()));
    }
    if dist.len() != crate::dist::N_ATOMS {
        return Err(Error::DimensionMismatch(format!(
            "sampling needs an {}-atom distribution",
            crate::dist::N_ATOMS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = WeightedIndex::new(dist.probs())
        .map_err(|e| Error::NonNormalizable(format!("cannot sample from distribution: {e}")))?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let atom = Atom::from_index(atoms.sample(&mut rng));
        let mut features = Vec::with_capacity(cfg.n_features());
        for (dim, mu, v) in [(cfg.d_y, cfg.mu_y, atom.y), (cfg.d_a, cfg.mu_a, atom.a), (cfg.d_s, cfg.mu_s, atom.s)] {
            let centre = mu * (2.0 * v as f64 - 1.0);
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(centre + cfg.noise_sd * z);
            }
        }
        samples.push(Sample {
            features,
            y: atom.y,
            s: atom.s,
            a: atom.a,
            group: None,
        });
    }
    Dataset::new(samples, dist.clone(), seed, cfg.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Biased train and validation splits plus an unbiased (uniform) test split.
pub fn make_splits(
    cfg: &FeatureConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    p_s0: f64,
    p_s1: f64,
    seed: u64,
) -> Result<Splits> {
    let biased = Distribution::biased(p_s0, p_s1)?;
    let unbiased = Distribution::uniform(crate::dist::N_ATOMS);
    Ok(Splits {
        train: sample_dataset(&biased, n_train, cfg, derive_seed(seed, &["split", "train"]))?,
        val: sample_dataset(&biased, n_val, cfg, derive_seed(seed, &["split", "val"]))?,
        test: sample_dataset(&unbiased, n_test, cfg, derive_seed(seed, &["split", "test"]))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_atom_frequencies() {
        let d = sample_dataset(&Distribution::uniform(8), 80_000, &FeatureConfig::default(), 1).unwrap();
        for f in d.atom_frequencies() {
            assert!((f - 0.125).abs() < 0.005, "{f}");
        }
        // independence of Y and A
        let a1: Vec<_> = d.samples().iter().filter(|s| s.a == 1).collect();
        let y1 = a1.iter().filter(|s| s.y == 1).count() as f64 / a1.len() as f64;
        assert!((y1 - 0.5).abs() < 0.01);
    }

    #[test]
    fn biased_aligned_fraction_within_s0() {
        let p = Distribution::biased(0.95, 0.8).unwrap();
        let d = sample_dataset(&p, 80_000, &FeatureConfig::default(), 2).unwrap();
        let s0: Vec<_> = d.samples().iter().filter(|s| s.s == 0).collect();
        let aligned = s0.iter().filter(|s| s.a == s.y).count() as f64 / s0.len() as f64;
        assert!((aligned - 0.95).abs() < 0.01, "{aligned}");
    }

    #[test]
    fn deterministic_given_seed() {
        let p = Distribution::biased(0.95, 0.8).unwrap();
        let cfg = FeatureConfig::default();
        assert_eq!(sample_dataset(&p, 300, &cfg, 7).unwrap(), sample_dataset(&p, 300, &cfg, 7).unwrap());
        assert_ne!(sample_dataset(&p, 300, &cfg, 7).unwrap(), sample_dataset(&p, 300, &cfg, 8).unwrap());
    }

    #[test]
    fn block_means_match_config() {
        let cfg = FeatureConfig::default();
        let n = 40_000;
        let d = sample_dataset(&Distribution::uniform(8), n, &cfg, 3).unwrap();
        let blocks = [(0, cfg.d_y, cfg.mu_y, 0), (cfg.d_y, cfg.d_a, cfg.mu_a, 1), (cfg.d_y + cfg.d_a, cfg.d_s, cfg.mu_s, 2)];
        for (start, dim, mu, which) in blocks {
            let ones: Vec<_> = d
                .samples()
                .iter()
                .filter(|s| [s.y, s.a, s.s][which] == 1)
                .collect();
            let n_block = (ones.len() * dim) as f64;
            let mean: f64 = ones.iter().flat_map(|s| &s.features[start..start + dim]).sum::<f64>() / n_block;
            assert!((mean - mu).abs() < 3.0 * cfg.noise_sd / n_block.sqrt(), "block {which}: {mean}");
        }
    }

    #[test]
    fn splits_have_expected_sources() {
        let s = make_splits(&FeatureConfig::default(), 100, 50, 80, 0.95, 0.8, 0).unwrap();
        assert_eq!(s.train.source_distribution(), &Distribution::biased(0.95, 0.8).unwrap());
        assert_eq!(s.val.source_distribution(), s.train.source_distribution());
        assert_eq!(s.test.source_distribution(), &Distribution::uniform(8));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (100, 50, 80));
        assert_ne!(s.train.seed(), s.val.seed());
    }

    #[test]
    fn csv_layout() {
        let cfg = FeatureConfig { d_y: 1, d_a: 1, d_s: 1, ..FeatureConfig::default() };
        let d = sample_dataset(&Distribution::uniform(8), 3, &cfg, 0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "feat_0,feat_1,feat_2,y,s,a,group");
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = FeatureConfig { noise_sd: 0.0, ..FeatureConfig::default() };
        assert!(sample_dataset(&Distribution::uniform(8), 10, &cfg, 0).is_err());
        assert!(sample_dataset(&Distribution::uniform(8), 0, &FeatureConfig::default(), 0).is_err());
    }
}
