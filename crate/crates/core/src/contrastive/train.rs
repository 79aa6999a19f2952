use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::world::{alignment_metric, sample_world, trait_energy_ratio, uniformity_metric, SyntheticDataset, WorldConfig, WorldModel};
use super::{class_embeddings, dual_loss, embed_for_eval, loss_and_gradients, ContrastiveError, Gradients, LossConfig, ModelDims, ModelParams};
use crate::eval::top1_accuracy;
use crate::linalg::{unit_normalize, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    step: u64,
}

impl AdamState {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn optimizer_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &OptimizerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ms = state.m.matrices_mut();
    let vs = state.v.matrices_mut();
    for (((p, g), m), v) in params.matrices_mut().into_iter().zip(grads.matrices()).zip(ms).zip(vs) {
        let g = g.data();
        for (k, ((p, m), v)) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).enumerate() {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g[k];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g[k] * g[k];
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *p -= cfg.lr * (update + cfg.weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Capped at the number of classes unless label collisions are allowed.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Training rows used for per-epoch diagnostics.
    pub metric_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            metric_rows: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub trait_energy_ratio: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,loss,trait_energy_ratio,alignment,uniformity";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let ter = r.trait_energy_ratio.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, ter, r.alignment, r.uniformity));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ContrastiveError),
    #[error("training diverged at epoch {epoch}; returning the last finite parameters")]
    Diverged {
        epoch: usize,
        last_finite: Box<TrainOutcome>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Shuffled batches. Without label collisions each batch holds at most one
/// sample per class: classes are dealt round-robin from shuffled per-class
/// queues.
fn make_batches(labels: &[usize], n_classes: usize, batch_size: usize, allow_collisions: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    if allow_collisions {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut queues = vec![Vec::new(); n_classes];
    for &i in &order {
        queues[labels[i]].push(i);
    }
    let rounds = queues.iter().map(Vec::len).max().unwrap_or(0);
    let size = batch_size.min(n_classes).max(1);
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut round: Vec<usize> = queues.iter().filter_map(|q| q.get(r).copied()).collect();
        round.shuffle(rng);
        batches.extend(round.chunks(size).map(<[usize]>::to_vec));
    }
    batches
}

struct Probe {
    batches: Vec<Vec<usize>>,
    x: Matrix,
    labels: Vec<usize>,
}

fn evaluate(
    data: &SyntheticDataset,
    probe: &Probe,
    params: &ModelParams,
    cfg: &TrainConfig,
    trait_loading: Option<&Matrix>,
    epoch: usize,
) -> Result<EpochRecord, ContrastiveError> {
    let mut loss = 0.0;
    for b in &probe.batches {
        loss += dual_loss(&data.batch(b), params, &cfg.loss)?;
    }
    loss /= probe.batches.len().max(1) as f64;
    let u = embed_for_eval(params, &probe.x)?;
    let v = unit_normalize(&params.t.select_rows(&probe.labels))?;
    let trait_energy_ratio = match trait_loading {
        Some(a) => Some(trait_energy_ratio(&params.taxonomy_map(), a)?),
        None => None,
    };
    Ok(EpochRecord {
        epoch,
        loss,
        trait_energy_ratio,
        alignment: alignment_metric(&u, &v)?,
        uniformity: if u.rows() >= 2 { uniformity_metric(&u)? } else { 0.0 },
    })
}

/// Mini-batch AdamW training. Epoch 0 of the history is the initial state;
/// each record's loss is measured on a fixed probe set of batches, so a run
/// with `lr = 0` yields a flat history. Deterministic given the config.
pub fn train(data: &SyntheticDataset, init: &ModelParams, cfg: &TrainConfig, trait_loading: Option<&Matrix>) -> Result<TrainOutcome, TrainError> {
    init.validate()?;
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(ContrastiveError::EmptyBatch.into());
    }
    let n_classes = init.dims().n_classes;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= n_classes) {
        return Err(ContrastiveError::LabelOutOfRange {
            label: bad,
            classes: n_classes,
        }
        .into());
    }

    let probe_rows: Vec<usize> = (0..data.len().min(cfg.metric_rows.max(2))).collect();
    let probe_labels: Vec<usize> = probe_rows.iter().map(|&i| data.labels[i]).collect();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0B_E000);
    let probe = Probe {
        batches: make_batches(&probe_labels, n_classes, cfg.batch_size, cfg.loss.allow_label_collisions, &mut probe_rng),
        x: data.x.select_rows(&probe_rows),
        labels: probe_labels,
    };

    let mut params = init.clone();
    let mut state = AdamState::new(init.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    history.records.push(evaluate(data, &probe, &params, cfg, trait_loading, 0)?);

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&data.labels, n_classes, cfg.batch_size, cfg.loss.allow_label_collisions, &mut rng);
        for idx in &batches {
            let before = params.clone();
            let (parts, grads) = loss_and_gradients(&data.batch(idx), &params, &cfg.loss)?;
            optimizer_step(&mut params, &grads, &mut state, &cfg.optimizer);
            if !parts.total.is_finite() || params.matrices().iter().any(|m| !m.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(TrainOutcome { params: before, history }),
                });
            }
        }
        let record = evaluate(data, &probe, &params, cfg, trait_loading, epoch)?;
        history.records.push(record);
    }
    Ok(TrainOutcome { params, history })
}

/// The held-out comparison of taxonomy-only, faithful-caption and
/// noisy-caption training over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub d_h: usize,
    pub d_e: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    /// `‖G Dᵀ‖_F / ‖A Bᵀ‖_F` for the noisy-caption arm.
    pub noisy_ratio: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            d_h: 8,
            d_e: 16,
            n_train: 2000,
            n_test: 500,
            seeds: (0..5).collect(),
            noisy_ratio: 1.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub arm: &'static str,
    pub seed: u64,
    pub trait_energy_ratio: f64,
    pub top1: f64,
    #[serde(skip)]
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: &'static str,
    pub mean_trait_energy_ratio: f64,
    pub mean_top1: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub taxonomy_only: ArmSummary,
    pub faithful: ArmSummary,
    pub noisy: ArmSummary,
}

impl ExperimentSummary {
    pub const SLACK: f64 = 0.02;

    pub fn faithful_beats_noisy_ter(&self) -> bool {
        self.faithful.mean_trait_energy_ratio > self.noisy.mean_trait_energy_ratio
    }

    pub fn faithful_top1_holds(&self) -> bool {
        self.faithful.mean_top1 >= self.taxonomy_only.mean_top1 - Self::SLACK
    }

    pub fn noisy_top1_holds(&self) -> bool {
        self.noisy.mean_top1 <= self.taxonomy_only.mean_top1 + Self::SLACK
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("arm            mean_TER  mean_top1\n");
        for a in [&self.taxonomy_only, &self.faithful, &self.noisy] {
            out.push_str(&format!("{:<14} {:>8.4}  {:>9.4}\n", a.arm, a.mean_trait_energy_ratio, a.mean_top1));
        }
        out.push_str(&format!(
            "faithful > noisy (TER): {}\nfaithful top1 >= taxonomy-only - 2pp: {}\nnoisy top1 <= taxonomy-only + 2pp: {}\n",
            self.faithful_beats_noisy_ter(),
            self.faithful_top1_holds(),
            self.noisy_top1_holds()
        ));
        out
    }
}

/// Independent RNG stream for one purpose within a seed.
fn stream(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn run_arm(cfg: &ExperimentConfig, seed: u64, arm: &'static str) -> Result<RunResult, TrainError> {
    let base = WorldModel::generate(&cfg.world, stream(seed, 1));
    let ratio = if arm == "noisy" { cfg.noisy_ratio } else { 0.0 };
    let world = base.with_caption_nuisance(&base.random_nuisance_direction(stream(seed, 2)), ratio)?;
    let train_set = sample_world(&world, cfg.n_train, stream(seed, 3))?;
    let test_set = sample_world(&world, cfg.n_test, stream(seed, 4))?;
    let dims = ModelDims {
        d_x: cfg.world.d_x,
        d_c: cfg.world.d_c,
        d_h: cfg.d_h,
        d_e: cfg.d_e,
        n_classes: cfg.world.n_classes,
    };
    let init = ModelParams::init(dims, stream(seed, 5));
    let mut tc = cfg.train.clone();
    tc.seed = stream(seed, 6);
    if arm == "taxonomy_only" {
        tc.loss.w_cap = 0.0;
    }
    let out = train(&train_set, &init, &tc, Some(&world.a))?;
    let top1 = top1_accuracy(&embed_for_eval(&out.params, &test_set.x)?, &class_embeddings(&out.params)?, &test_set.labels)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(RunResult {
        arm,
        seed,
        trait_energy_ratio: trait_energy_ratio(&out.params.taxonomy_map(), &world.a)?,
        top1,
        history: out.history,
    })
}

/// Runs every (arm, seed) pair on its own thread; results do not depend on
/// scheduling.
pub fn run_caption_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, TrainError> {
    if cfg.seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    const ARMS: [&str; 3] = ["taxonomy_only", "faithful", "noisy"];
    let results: Vec<Result<RunResult, TrainError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ARMS
            .iter()
            .flat_map(|&arm| cfg.seeds.iter().map(move |&seed| (arm, seed)))
            .map(|(arm, seed)| s.spawn(move || run_arm(cfg, seed, arm)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summarize = |arm: &'static str| {
        let runs: Vec<RunResult> = results.iter().filter(|r| r.arm == arm).cloned().collect();
        let n = runs.len() as f64;
        ArmSummary {
            arm,
            mean_trait_energy_ratio: runs.iter().map(|r| r.trait_energy_ratio).sum::<f64>() / n,
            mean_top1: runs.iter().map(|r| r.top1).sum::<f64>() / n,
            runs,
        }
    };
    Ok(ExperimentSummary {
        taxonomy_only: summarize("taxonomy_only"),
        faithful: summarize("faithful"),
        noisy: summarize("noisy"),
    })
}
