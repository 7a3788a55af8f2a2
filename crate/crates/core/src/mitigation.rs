//! Training procedures: ERM and five bias-mitigation methods, each driven
//! by the group annotation of the training (or validation) data.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{GroupAnnotation, GroupingScheme};
use crate::nnet::{
    adam_step, adversary_loss_and_grad, bce_loss_and_grad, forward, grad_reversal_backward, sigmoid, AdamState, Batch,
    HeadRouting, ModelParams, ModelShape,
};
use crate::seed::derive_seed;
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Erm,
    Gdro,
    Resampling,
    DomainInd,
    CFair,
    Jtt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Erm,
        Method::Gdro,
        Method::Resampling,
        Method::DomainInd,
        Method::CFair,
        Method::Jtt,
    ];

    /// Whether training consumes group annotations at all.
    pub fn uses_grouping(self) -> bool {
        !matches!(self, Method::Erm)
    }

    /// Model-based methods need groups that contain both classes.
    pub fn requires_y_free(self) -> bool {
        matches!(self, Method::DomainInd | Method::CFair)
    }

    /// Default scheme list for the method.
    pub fn default_schemes(self) -> Vec<GroupingScheme> {
        if self.requires_y_free() {
            GroupingScheme::model_based_schemes()
        } else {
            GroupingScheme::reweighting_schemes()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Erm => "ERM",
            Method::Gdro => "gDRO",
            Method::Resampling => "resampling",
            Method::DomainInd => "DomainInd",
            Method::CFair => "CFair",
            Method::Jtt => "JTT",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// How DomainInd turns its per-group heads into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainIndRule {
    /// Logit of the head with the largest |logit|.
    #[default]
    MaxAbsLogit,
    /// Sum of all head logits.
    SumLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_gamma` every `lr_step_epochs`.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub hidden: usize,
    pub gdro_eta: f64,
    pub gdro_size_adjust: f64,
    pub cfair_mu: f64,
    pub jtt_stage1_epochs: Vec<usize>,
    pub jtt_upweight: Vec<f64>,
    pub domain_ind_rule: DomainIndRule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            hidden: 16,
            gdro_eta: 0.01,
            gdro_size_adjust: 1.0,
            cfair_mu: 0.1,
            jtt_stage1_epochs: vec![1, 2],
            jtt_upweight: vec![5.0, 20.0, 50.0],
            domain_ind_rule: DomainIndRule::MaxAbsLogit,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("epochs, batch_size and hidden must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_gamma > 0.0) || self.lr_step_epochs == 0 {
            return bad("learning-rate settings must be positive");
        }
        if !(self.gdro_eta >= 0.0) || !(self.gdro_size_adjust >= 0.0) || !(self.cfair_mu >= 0.0) {
            return bad("gdro_eta, gdro_size_adjust and cfair_mu must be ≥ 0");
        }
        if self.jtt_stage1_epochs.is_empty() || self.jtt_stage1_epochs.contains(&0) {
            return bad("jtt_stage1_epochs must be a non-empty list of positive values");
        }
        if self.jtt_upweight.is_empty() || self.jtt_upweight.iter().any(|&u| !(u >= 1.0)) {
            return bad("jtt_upweight values must be ≥ 1");
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// gDRO group weights at the end of the epoch; empty for other methods.
    pub group_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub method: Method,
    pub scheme: Option<GroupingScheme>,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub domain_ind_rule: DomainIndRule,
}

impl TrainedModel {
    /// Class-1 probabilities for every sample. Group annotations are never
    /// read at inference.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let batch = full_batch(data, false)?;
        let fwd = forward(&self.params, &batch)?;
        let k = self.params.shape.n_heads;
        Ok(fwd
            .logits
            .chunks(k)
            .map(|row| {
                let z = if k == 1 {
                    row[0]
                } else {
                    match self.domain_ind_rule {
                        DomainIndRule::MaxAbsLogit => row.iter().cloned().fold(0.0_f64, |best, z| {
                            if z.abs() > best.abs() {
                                z
                            } else {
                                best
                            }
                        }),
                        DomainIndRule::SumLogits => row.iter().sum(),
                    }
                };
                sigmoid(z)
            })
            .collect())
    }

    /// `epoch,train_loss,group_0_weight,...`
    pub fn write_history_csv(&self, out: impl Write) -> Result<()> {
        let k = self.history.iter().map(|r| r.group_weights.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "train_loss".to_string()];
        header.extend((0..k).map(|i| format!("group_{i}_weight")));
        w.write_record(&header)?;
        for r in &self.history {
            let mut rec = vec![r.epoch.to_string(), format!("{:.8}", r.train_loss)];
            rec.extend((0..k).map(|i| r.group_weights.get(i).map(|v| format!("{v:.8}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<history csv>", e))?;
        Ok(())
    }
}

fn full_batch(data: &Dataset, need_groups: bool) -> Result<Batch> {
    let idx: Vec<usize> = (0..data.len()).collect();
    gather(data, &idx, need_groups)
}

fn gather(data: &Dataset, idx: &[usize], need_groups: bool) -> Result<Batch> {
    let d = data.n_features();
    let mut features = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    let mut groups = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples()[i];
        features.extend_from_slice(&s.features);
        y.push(s.y);
        groups.push(match (s.group, need_groups) {
            (Some(g), _) => g,
            (None, false) => 0,
            (None, true) => return Err(Error::Config("training data is not group-annotated".into())),
        });
    }
    Batch::new(d, features, y, groups)
}

fn annotation(data: &Dataset) -> Result<&GroupAnnotation> {
    let ann = data
        .annotation()
        .ok_or_else(|| Error::Config("training data is not group-annotated".into()))?;
    if data.samples().iter().any(|s| s.group.is_none()) {
        return Err(Error::Config("some samples lack a group annotation".into()));
    }
    Ok(ann)
}

fn group_counts(data: &Dataset, k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for s in data.samples() {
        if let Some(g) = s.group {
            counts[g] += 1;
        }
    }
    counts
}

/// Parameters, optimizer state and the batch RNG of one training run.
struct Run<'a> {
    data: &'a Dataset,
    cfg: &'a TrainConfig,
    params: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl<'a> Run<'a> {
    fn new(data: &'a Dataset, cfg: &'a TrainConfig, shape: ModelShape) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let params = ModelParams::init(shape, derive_seed(cfg.seed, &["init"]));
        let adam = AdamState::new(params.data.len());
        Ok(Run {
            data,
            cfg,
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["batches"])),
        })
    }

    fn shuffled_batches(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    fn step(&mut self, grads: &ModelParams, epoch: usize) -> Result<()> {
        adam_step(&mut self.params, grads, &mut self.adam, self.cfg.lr_at(epoch), self.cfg.weight_decay)
    }

    fn finish(self, method: Method, scheme: Option<GroupingScheme>, history: Vec<EpochRecord>) -> TrainedModel {
        TrainedModel {
            params: self.params,
            method,
            scheme,
            history,
            seed: self.cfg.seed,
            domain_ind_rule: self.cfg.domain_ind_rule,
        }
    }
}

fn shape_for(data: &Dataset, cfg: &TrainConfig) -> ModelShape {
    ModelShape::single(data.n_features(), cfg.hidden)
}

/// Per-sample weighted ERM; shared by ERM and both JTT stages.
fn train_weighted(
    train: &Dataset,
    cfg: &TrainConfig,
    weights: &[f64],
    epochs: usize,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut run = Run::new(train, cfg, shape_for(train, cfg))?;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let batches = run.shuffled_batches();
        for idx in &batches {
            let batch = gather(train, idx, false)?;
            let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
            let (loss, grads) = bce_loss_and_grad(&run.params, &batch, &w, HeadRouting::Single)?;
            run.step(&grads, epoch)?;
            total += loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            group_weights: Vec::new(),
        });
    }
    Ok((run.params, history))
}

/// Plain empirical risk minimization: unweighted mean BCE.
pub fn train_erm(train: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let (params, history) = train_weighted(train, cfg, &vec![1.0; train.len()], cfg.epochs)?;
    Ok(TrainedModel {
        params,
        method: Method::Erm,
        scheme: None,
        history,
        seed: cfg.seed,
        domain_ind_rule: cfg.domain_ind_rule,
    })
}

/// Online group DRO. Keeps weights `q` on the simplex; on every batch the
/// groups present get `q_g ← q_g·exp(η(L̂_g + C/√n_g))`, then the model
/// descends on `Σ_g q_g L̂_g`.
pub fn train_gdro(train: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let ann = annotation(train)?.clone();
    let k = ann.n_groups;
    let counts = group_counts(train, k);
    let mut run = Run::new(train, cfg, shape_for(train, cfg))?;
    let mut q = vec![1.0 / k as f64; k];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = run.shuffled_batches();
        for idx in &batches {
            let batch = gather(train, idx, true)?;
            let fwd = forward(&run.params, &batch)?;
            let mut loss_sum = vec![0.0; k];
            let mut n_in = vec![0usize; k];
            for (i, &g) in batch.groups.iter().enumerate() {
                let z = fwd.logits[i];
                let y = batch.y[i] as f64;
                loss_sum[g] += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                n_in[g] += 1;
            }
            for g in (0..k).filter(|&g| n_in[g] > 0) {
                let mean = loss_sum[g] / n_in[g] as f64;
                let adjust = cfg.gdro_size_adjust / (counts[g] as f64).sqrt();
                q[g] *= (cfg.gdro_eta * (mean + adjust)).exp();
            }
            let z: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= z);

            // weights so that Σ_i w_i ℓ_i / B = Σ_g q_g L̂_g
            let b = batch.len() as f64;
            let w: Vec<f64> = batch.groups.iter().map(|&g| q[g] * b / n_in[g] as f64).collect();
            let (loss, grads) = bce_loss_and_grad(&run.params, &batch, &w, HeadRouting::Single)?;
            run.step(&grads, epoch)?;
            total += loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            group_weights: q.clone(),
        });
    }
    Ok(run.finish(Method::Gdro, Some(ann.scheme), history))
}

/// Draws group-balanced batches: a uniformly chosen group, then a uniformly
/// chosen member, with replacement.
#[derive(Debug, Clone)]
pub struct GroupBalancedSampler {
    members: Vec<Vec<usize>>,
}

impl GroupBalancedSampler {
    pub fn new(data: &Dataset) -> Result<Self> {
        let ann = annotation(data)?;
        let mut members = vec![Vec::new(); ann.n_groups];
        for (i, s) in data.samples().iter().enumerate() {
            members[s.group.expect("checked by annotation()")].push(i);
        }
        if let Some(g) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::EmptyGroup(g));
        }
        Ok(GroupBalancedSampler { members })
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                let g = &self.members[rng.random_range(0..self.members.len())];
                g[rng.random_range(0..g.len())]
            })
            .collect()
    }
}

/// Group-balanced resampling with plain BCE.
pub fn train_resampling(train: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let scheme = annotation(train)?.scheme;
    let sampler = GroupBalancedSampler::new(train)?;
    let mut run = Run::new(train, cfg, shape_for(train, cfg))?;
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..n_batches {
            let idx = sampler.batch(cfg.batch_size, &mut run.rng);
            let batch = gather(train, &idx, false)?;
            let (loss, grads) = bce_loss_and_grad(&run.params, &batch, &vec![1.0; idx.len()], HeadRouting::Single)?;
            run.step(&grads, epoch)?;
            total += loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / n_batches as f64,
            group_weights: Vec::new(),
        });
    }
    Ok(run.finish(Method::Resampling, Some(scheme), history))
}

fn require_y_free(ann: &GroupAnnotation) -> Result<()> {
    if !ann.y_free {
        return Err(Error::YBasedGrouping(ann.scheme.to_string()));
    }
    Ok(())
}

/// Shared encoder with one classifier head per group; each sample trains
/// only its own group's head.
pub fn train_domain_ind(train: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let ann = annotation(train)?.clone();
    require_y_free(&ann)?;
    let shape = ModelShape {
        n_heads: ann.n_groups,
        ..shape_for(train, cfg)
    };
    let mut run = Run::new(train, cfg, shape)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = run.shuffled_batches();
        for idx in &batches {
            let batch = gather(train, idx, true)?;
            let (loss, grads) = bce_loss_and_grad(&run.params, &batch, &vec![1.0; idx.len()], HeadRouting::PerGroup)?;
            run.step(&grads, epoch)?;
            total += loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            group_weights: Vec::new(),
        });
    }
    Ok(run.finish(Method::DomainInd, Some(ann.scheme), history))
}

/// Classification plus per-class adversaries that predict the group from the
/// hidden layer. Adversaries descend on their loss; the encoder receives the
/// adversary gradient reversed and scaled by `cfair_mu`.
pub fn train_cfair(train: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let ann = annotation(train)?.clone();
    require_y_free(&ann)?;
    if ann.n_groups < 2 {
        return Err(Error::Config("CFair needs at least two groups".into()));
    }
    let shape = ModelShape {
        n_adversaries: 2,
        adv_groups: ann.n_groups,
        ..shape_for(train, cfg)
    };
    let mut run = Run::new(train, cfg, shape)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = run.shuffled_batches();
        for idx in &batches {
            let batch = gather(train, idx, true)?;
            let (loss, cls) = bce_loss_and_grad(&run.params, &batch, &vec![1.0; idx.len()], HeadRouting::Single)?;
            let (_, adv) = adversary_loss_and_grad(&run.params, &batch)?;
            let grads = cls.plus(&grad_reversal_backward(&adv, cfg.cfair_mu)?);
            run.step(&grads, epoch)?;
            total += loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            group_weights: Vec::new(),
        });
    }
    Ok(run.finish(Method::CFair, Some(ann.scheme), history))
}

/// One stage-2 JTT model and the hyperparameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct JttCandidate {
    pub stage1_epochs: usize,
    pub upweight: f64,
    pub n_errors: usize,
    pub model: TrainedModel,
}

/// Trains the JTT grid: for each stage-1 length, an ERM model identifies
/// misclassified training samples; for each upweight a fresh model is trained
/// with those samples' weights set to the upweight.
pub fn jtt_candidates(train: &Dataset, cfg: &TrainConfig) -> Result<Vec<JttCandidate>> {
    cfg.validate()?;
    let max_stage1 = *cfg.jtt_stage1_epochs.iter().max().expect("validated non-empty");
    let mut out = Vec::new();
    for &t in &cfg.jtt_stage1_epochs {
        let (params, _) = train_weighted(train, cfg, &vec![1.0; train.len()], t.min(max_stage1))?;
        let stage1 = TrainedModel {
            params,
            method: Method::Erm,
            scheme: None,
            history: Vec::new(),
            seed: cfg.seed,
            domain_ind_rule: cfg.domain_ind_rule,
        };
        let probs = stage1.predict(train)?;
        let errors: Vec<bool> = train
            .samples()
            .iter()
            .zip(&probs)
            .map(|(s, &p)| (p > 0.5) != (s.y == 1))
            .collect();
        let n_errors = errors.iter().filter(|&&e| e).count();
        if n_errors == 0 {
            log::warn!("JTT stage 1 ({t} epochs) misclassified no training samples; stage 2 is plain ERM");
        }
        for &up in &cfg.jtt_upweight {
            let weights: Vec<f64> = errors.iter().map(|&e| if e { up } else { 1.0 }).collect();
            let (params, history) = train_weighted(train, cfg, &weights, cfg.epochs)?;
            out.push(JttCandidate {
                stage1_epochs: t,
                upweight: up,
                n_errors,
                model: TrainedModel {
                    params,
                    method: Method::Jtt,
                    scheme: None,
                    history,
                    seed: cfg.seed,
                    domain_ind_rule: cfg.domain_ind_rule,
                },
            });
        }
    }
    Ok(out)
}

/// Worst-group accuracy on `val` under its group annotation, or overall
/// accuracy when `val` is not annotated.
pub fn selection_score(model: &TrainedModel, val: &Dataset) -> Result<f64> {
    let probs = model.predict(val)?;
    let hits = val.samples().iter().zip(&probs).map(|(s, &p)| (p > 0.5) == (s.y == 1));
    match val.annotation() {
        None => Ok(hits.filter(|&h| h).count() as f64 / val.len() as f64),
        Some(ann) => {
            let mut tally = vec![(0usize, 0usize); ann.n_groups];
            for (s, hit) in val.samples().iter().zip(hits) {
                let g = s.group.ok_or_else(|| Error::Config("validation sample lacks a group".into()))?;
                tally[g].0 += hit as usize;
                tally[g].1 += 1;
            }
            Ok(tally
                .iter()
                .filter(|(_, n)| *n > 0)
                .map(|(c, n)| *c as f64 / *n as f64)
                .fold(f64::INFINITY, f64::min))
        }
    }
}

/// Picks the candidate with the best selection score (first wins ties).
pub fn select_jtt(candidates: &[JttCandidate], val: &Dataset) -> Result<TrainedModel> {
    let mut best: Option<(f64, &JttCandidate)> = None;
    for c in candidates {
        let score = selection_score(&c.model, val)?;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, c));
        }
    }
    let (_, c) = best.ok_or_else(|| Error::Config("no JTT candidates".into()))?;
    let mut model = c.model.clone();
    model.scheme = val.annotation().map(|a| a.scheme);
    Ok(model)
}

/// Just Train Twice with model selection on `val`; annotate `val` with a
/// grouping to select by worst-group accuracy.
pub fn train_jtt(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    select_jtt(&jtt_candidates(train, cfg)?, val)
}

/// Dispatches to the trainer of `method`. `train` must carry group
/// annotations for every method except ERM and JTT; JTT reads them from
/// `val`.
pub fn train(method: Method, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    match method {
        Method::Erm => train_erm(train, cfg),
        Method::Gdro => train_gdro(train, cfg),
        Method::Resampling => train_resampling(train, cfg),
        Method::DomainInd => train_domain_ind(train, cfg),
        Method::CFair => train_cfair(train, cfg),
        Method::Jtt => train_jtt(train, val, cfg),
    }
}
