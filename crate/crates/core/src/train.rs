//! SGD training loop with the scheme discipline: which phases shuffle is
//! explicit, train and eval randomness never share streams, and a run is
//! fully determined by (seed, config, scheme).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, LabeledImage, Normalization};
use crate::error::{Error, Result};
use crate::model::{Model, ShuffleSites};
use crate::rng::{self, Domain};
use crate::shuffle::{ShuffleKind, ShuffleRng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Elem;

/// Optimizer/run hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// (epoch, multiplier): the learning rate is multiplied once the epoch
    /// index reaches each entry; epochs must be strictly increasing.
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimConfig {
    /// The desk-scale recipe: momentum 0.9, weight decay 5e-4, step decay
    /// x0.1 at 50% and 75% of the epoch budget.
    pub fn desk(lr: f64, epochs: usize, batch_size: usize) -> Self {
        let mut schedule = Vec::new();
        if epochs >= 4 {
            schedule.push((epochs / 2, 0.1));
            schedule.push((epochs * 3 / 4, 0.1));
        }
        OptimConfig {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule,
            batch_size,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        let mut last: Option<usize> = None;
        for &(epoch, mult) in &self.schedule {
            if !(mult > 0.0) {
                return Err(Error::Config(format!("schedule multiplier must be > 0, got {}", mult)));
            }
            if let Some(prev) = last {
                if epoch <= prev {
                    return Err(Error::Config("schedule epochs must be strictly increasing".into()));
                }
            }
            last = Some(epoch);
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(e, m) in &self.schedule {
            if epoch >= e {
                lr *= m;
            }
        }
        lr
    }
}

/// Train/test scheme as in the scheme matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    None,
    Spatial,
    Channel,
    Patch(usize),
}

impl Scheme {
    pub fn kind(&self) -> Option<ShuffleKind> {
        match self {
            Scheme::None => None,
            Scheme::Spatial => Some(ShuffleKind::Spatial),
            Scheme::Channel => Some(ShuffleKind::Channel),
            Scheme::Patch(p) => Some(ShuffleKind::Patch(*p)),
        }
    }

    /// Sites for this scheme over the last `k` of `countable` layers.
    pub fn sites_last_k(&self, countable: usize, k: usize) -> ShuffleSites {
        match self.kind() {
            Some(kind) => ShuffleSites::last_k(countable, kind, k),
            None => ShuffleSites::none(countable),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::None => write!(f, "none"),
            Scheme::Spatial => write!(f, "spatial"),
            Scheme::Channel => write!(f, "channel"),
            Scheme::Patch(p) => write!(f, "patch{}", p),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "spatial" => Ok(Scheme::Spatial),
            "channel" => Ok(Scheme::Channel),
            other => {
                if let Some(p) = other.strip_prefix("patch") {
                    p.parse::<usize>()
                        .map(Scheme::Patch)
                        .map_err(|_| Error::Config(format!("bad patch scheme '{}'", other)))
                } else {
                    Err(Error::Config(format!(
                        "unknown scheme '{}' (expected none, spatial, channel or patchN)",
                        other
                    )))
                }
            }
        }
    }
}

/// One cell of the train-scheme x test-scheme matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeCell {
    pub train: Scheme,
    pub test: Scheme,
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub acc: f64,
}

/// Emitted metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochStats>,
    pub test_top1: f64,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_s: f64,
}

impl RunReport {
    /// The report with wall-clock zeroed: every remaining field is fully
    /// determined by (config digest, seed).
    pub fn canonical(&self) -> RunReport {
        RunReport { wall_clock_s: 0.0, ..self.clone() }
    }
}

/// Momentum buffers, one per parameter.
pub struct SgdState {
    velocity: Vec<Vec<Elem>>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// v <- momentum*v + g + weight_decay*w; w <- w - lr*v. Consumes and clears
/// parameter gradients; parameters without a gradient this step are skipped.
pub fn sgd_step(params: &[Tensor], state: &mut SgdState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    for (index, (param, vel)) in params.iter().zip(&mut state.velocity).enumerate() {
        let Some(grad) = param.grad_to_vec() else {
            continue;
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                name: format!("shape {:?}", param.shape()),
            });
        }
        let mut data = param.data_mut();
        for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(&grad) {
            *v = cfg.momentum as Elem * *v + *g + cfg.weight_decay as Elem * *w;
            *w -= lr as Elem * *v;
        }
        drop(data);
        param.zero_grad();
    }
    Ok(())
}

/// Derive the evaluation seed from the training seed; combined with the
/// eval phase tag this keeps test-time randomness disjoint from training.
pub fn eval_seed_for(seed: u64) -> u64 {
    seed.wrapping_add(0x517c_c1b7_2722_0a95)
}

/// Stack images into a standardized [N,C,H,W] batch plus labels.
pub fn make_batch(images: &[&LabeledImage], norm: &Normalization) -> Result<(Tensor, Vec<usize>)> {
    let first = images.first().ok_or_else(|| Error::InvalidArg {
        op: "make_batch",
        detail: "empty batch".into(),
    })?;
    let [c, h, w] = first.shape;
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    let mut labels = Vec::with_capacity(images.len());
    for img in images {
        let mut px = img.pixels.clone();
        norm.standardize(&mut px, c);
        data.extend_from_slice(&px);
        labels.push(img.label);
    }
    Ok((Tensor::from_vec(&[images.len(), c, h, w], data)?, labels))
}

fn argmax_rows(values: &[Elem], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy over an image stream. With shuffle sites active, logits
/// are averaged over `passes` stochastic forward passes per batch; with no
/// active sites the pass count has no effect and a single pass runs.
pub fn evaluate_images(
    model: &mut Model,
    images: &[LabeledImage],
    norm: &Normalization,
    sites: &ShuffleSites,
    eval_seed: u64,
    passes: usize,
) -> Result<f64> {
    if passes == 0 {
        return Err(Error::InvalidArg {
            op: "evaluate",
            detail: "passes must be >= 1".into(),
        });
    }
    let passes = if sites.any_active() { passes } else { 1 };
    let mut correct = 0usize;
    for (batch_idx, chunk) in images.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, labels) = make_batch(&refs, norm)?;
        let classes = model.spec.classes;
        let mut summed = vec![0.0; chunk.len() * classes];
        for pass in 0..passes {
            let step = (batch_idx * passes + pass) as u64;
            let srng = ShuffleRng::eval(eval_seed, step);
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &x, &srng, sites)?;
            for (s, v) in summed.iter_mut().zip(logits.data().iter()) {
                *s += v;
            }
        }
        let preds = argmax_rows(&summed, classes);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Evaluate on the dataset's test split.
pub fn evaluate(
    model: &mut Model,
    data: &Dataset,
    sites: &ShuffleSites,
    eval_seed: u64,
    passes: usize,
) -> Result<f64> {
    evaluate_images(model, &data.test, &data.norm, sites, eval_seed, passes)
}

/// Everything a training run needs besides the model itself.
#[derive(Debug, Clone)]
pub struct TrainRun<'a> {
    pub data: &'a Dataset,
    pub cfg: &'a OptimConfig,
    pub train_sites: ShuffleSites,
    pub eval_sites: ShuffleSites,
    pub seed: u64,
    pub augment: bool,
    pub eval_passes: usize,
    pub config_digest: String,
}

impl<'a> TrainRun<'a> {
    pub fn new(data: &'a Dataset, cfg: &'a OptimConfig, seed: u64) -> Self {
        let countable = 0;
        TrainRun {
            data,
            cfg,
            train_sites: ShuffleSites::none(countable),
            eval_sites: ShuffleSites::none(countable),
            seed,
            augment: true,
            eval_passes: 1,
            config_digest: String::new(),
        }
    }
}

/// Train `model` in place and report per-epoch metrics plus final test
/// top-1. Deterministic given (seed, cfg, sites) under this single-threaded
/// loop; shuffle layers are active per the train sites during training and
/// per the eval sites at test time, with a derived eval seed.
pub fn train(model: &mut Model, run: &TrainRun) -> Result<RunReport> {
    run.cfg.validate()?;
    let started = Instant::now();
    let params = model.params();
    let mut sgd = SgdState::new(&params);
    let n = run.data.train.len();
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "train",
            detail: "empty training split".into(),
        });
    }
    let mut epochs = Vec::with_capacity(run.cfg.epochs);
    let mut step: u64 = 0;
    let mut last_good = (0usize, f64::NAN);
    for epoch in 0..run.cfg.epochs {
        let lr = run.cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = rng::stream(run.seed, Domain::DataOrder, &[epoch as u64]);
        rng::fisher_yates(&mut order_rng, &mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(run.cfg.batch_size) {
            let images: Vec<LabeledImage> = chunk
                .iter()
                .map(|&idx| {
                    let mut aug_rng =
                        rng::stream(run.seed, Domain::Augment, &[epoch as u64, idx as u64]);
                    augment(&run.data.train[idx], &mut aug_rng, run.augment)
                })
                .collect();
            let refs: Vec<&LabeledImage> = images.iter().collect();
            let (x, labels) = make_batch(&refs, &run.data.norm)?;

            let srng = ShuffleRng::train(run.seed, step);
            step += 1;
            let mut tape = Tape::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    last_good_epoch: last_good.0,
                    last_good_loss: last_good.1,
                },
                other => other,
            };
            let logits = model.forward(&mut tape, &x, &srng, &run.train_sites).map_err(diverged)?;
            let (loss, probs) = tape.softmax_cross_entropy(&logits, &labels).map_err(diverged)?;
            tape.backward(&loss).map_err(diverged)?;
            sgd_step(&params, &mut sgd, lr, run.cfg)?;

            loss_sum += loss.item() as f64 * labels.len() as f64;
            let preds = argmax_rows(&probs, model.spec.classes);
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let stats = EpochStats {
            loss: loss_sum / n as f64,
            acc: correct as f64 / n as f64,
        };
        last_good = (epoch, stats.loss);
        epochs.push(stats);
    }

    let test_top1 = evaluate(
        model,
        run.data,
        &run.eval_sites,
        eval_seed_for(run.seed),
        run.eval_passes,
    )?;
    Ok(RunReport {
        epochs,
        test_top1,
        seed: run.seed,
        config_digest: run.config_digest.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpatialTask, TaskKind};
    use crate::zoo;

    #[test]
    fn sgd_momentum_recurrence_matches_hand_computation() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        w.accumulate_grad(&[1.0]);
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: vec![],
            batch_size: 1,
            epochs: 1,
        };
        let params = vec![w.clone()];
        let mut state = SgdState::new(&params);
        sgd_step(&params, &mut state, 0.1, &cfg).unwrap();
        assert!((w.to_vec()[0] - 0.9).abs() < 1e-12);
        assert!((state.velocity[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_alone_shrinks_weights() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        w.accumulate_grad(&[0.0]);
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.1,
            schedule: vec![],
            batch_size: 1,
            epochs: 1,
        };
        let params = vec![w.clone()];
        let mut state = SgdState::new(&params);
        sgd_step(&params, &mut state, 0.1, &cfg).unwrap();
        assert!((w.to_vec()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_leaves_params_and_decays_velocity() {
        let w = Tensor::param(&[1], vec![2.0]).unwrap();
        w.accumulate_grad(&[0.0]);
        let cfg = OptimConfig {
            lr: 0.5,
            momentum: 0.5,
            weight_decay: 0.0,
            schedule: vec![],
            batch_size: 1,
            epochs: 1,
        };
        let params = vec![w.clone()];
        let mut state = SgdState::new(&params);
        state.velocity[0][0] = 1.0;
        sgd_step(&params, &mut state, 0.5, &cfg).unwrap();
        assert!((state.velocity[0][0] - 0.5).abs() < 1e-12);
        assert!((w.to_vec()[0] - (2.0 - 0.5 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_nan_gradients() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        w.accumulate_grad(&[Elem::NAN]);
        let cfg = OptimConfig::desk(0.1, 1, 1);
        let params = vec![w];
        let mut state = SgdState::new(&params);
        assert!(matches!(
            sgd_step(&params, &mut state, 0.1, &cfg),
            Err(Error::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn schedule_multiplies_from_the_named_epoch() {
        let cfg = OptimConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: vec![(2, 0.1), (4, 0.5)],
            batch_size: 1,
            epochs: 6,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(2), 0.1);
        assert_eq!(cfg.lr_at(3), 0.1);
        assert!((cfg.lr_at(4) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn schedule_must_be_strictly_increasing() {
        let cfg = OptimConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: vec![(2, 0.1), (2, 0.5)],
            batch_size: 1,
            epochs: 6,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scheme_strings_round_trip() {
        for s in ["none", "spatial", "channel", "patch4"] {
            let parsed: Scheme = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("bogus".parse::<Scheme>().is_err());
    }

    #[test]
    fn untrained_model_scores_near_chance_on_balanced_classes() {
        let task = SyntheticSpatialTask::new(5, 12, TaskKind::Texture);
        let data = synthetic_dataset(&task, 8, 400).unwrap();
        let spec = zoo::build_tiny_cnn(task.shape(), task.classes());
        let mut model = Model::init(&spec, 0).unwrap();
        let sites = ShuffleSites::none(model.countable_count());
        let acc = evaluate(&mut model, &data, &sites, 1, 1).unwrap();
        // Binomial 3-sigma bound around 1/4 with n = 400.
        let sigma = (0.25f64 * 0.75 / 400.0).sqrt();
        assert!(
            (acc - 0.25).abs() <= 3.0 * sigma + 1e-9,
            "untrained accuracy {} outside 3 sigma of chance",
            acc
        );
    }

    #[test]
    fn eval_passes_have_no_effect_without_active_sites() {
        let task = SyntheticSpatialTask::new(6, 12, TaskKind::Texture);
        let data = synthetic_dataset(&task, 8, 64).unwrap();
        let spec = zoo::build_tiny_cnn(task.shape(), task.classes());
        let mut model = Model::init(&spec, 3).unwrap();
        let sites = ShuffleSites::none(model.countable_count());
        let a1 = evaluate(&mut model, &data, &sites, 9, 1).unwrap();
        let a3 = evaluate(&mut model, &data, &sites, 9, 3).unwrap();
        assert_eq!(a1, a3);
    }

    #[test]
    fn eval_seed_differs_from_train_seed() {
        assert_ne!(eval_seed_for(42), 42);
    }
}
