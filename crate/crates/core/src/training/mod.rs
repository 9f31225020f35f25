//! End-to-end training of the quality head with a template triplet loss.
//!
//! One step: stack every instance of the batch, run the head with batch
//! statistics, pool each template component-wise, mine triplets on the
//! pooled representations, then backpropagate the hinge loss through the
//! pooling, the fully-connected layer and the batch norm. Embeddings are
//! treated as constants.

mod mining;
mod sampling;

pub use mining::{mine_all_triplets, mine_hard_triplets, triplet_loss, Triplet, TripletLoss};
pub use sampling::{augment_noise, sample_batch, Batch, AUGMENT_PROBABILITY};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    pool_cfan_backward, pool_cfan_forward, quality_backward, quality_forward, stack_rows, HeadMode, PoolCache,
    QualityGrads, QualityHead, StatsMode,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math::{norm, DenseMatrix};
use crate::synthetic::QualityEncoding;

/// Momentum of the running batch-norm statistics.
pub const BN_STATS_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningStrategy {
    BatchHard,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub subjects_per_batch: usize,
    pub templates_per_subject: usize,
    pub images_per_template: usize,
    pub seed: u64,
    /// Standard deviation of feature-space corruption, `None` for off.
    pub noise_augment: Option<f64>,
    /// L2-normalize pooled representations before the triplet distance.
    pub normalize_reps: bool,
    pub mining: MiningStrategy,
    pub head_mode: HeadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.01,
            steps: 4000,
            subjects_per_batch: 20,
            templates_per_subject: 4,
            images_per_template: 3,
            seed: 0,
            noise_augment: None,
            normalize_reps: true,
            mining: MiningStrategy::BatchHard,
            head_mode: HeadMode::ComponentWise,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates_per_subject < 2 {
            return Err(Error::Config("templates_per_subject must be >= 2".into()));
        }
        if self.images_per_template < 1 {
            return Err(Error::Config("images_per_template must be >= 1".into()));
        }
        if self.subjects_per_batch < 2 {
            return Err(Error::Config("subjects_per_batch must be >= 2".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(s) = self.noise_augment {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Config(format!("noise_augment sigma must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// SGD momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub v_gamma: Vec<f64>,
    pub v_beta: Vec<f64>,
    pub v_weight: DenseMatrix,
    pub v_bias: Vec<f64>,
}

impl OptimizerState {
    pub fn new(head: &QualityHead) -> Self {
        Self {
            v_gamma: vec![0.0; head.bn.gamma.len()],
            v_beta: vec![0.0; head.bn.beta.len()],
            v_weight: DenseMatrix::zeros(head.fc.weight.rows(), head.fc.weight.cols()),
            v_bias: vec![0.0; head.fc.bias.len()],
        }
    }

    /// `v <- momentum * v - lr * (g + weight_decay * theta)`, `theta <- theta + v`.
    pub fn apply(&mut self, head: &mut QualityHead, grads: &QualityGrads, cfg: &TrainConfig) {
        let update = |theta: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = cfg.momentum * *vi - cfg.lr * (gi + cfg.weight_decay * *t);
                *t += *vi;
            }
        };
        update(&mut head.bn.gamma, &mut self.v_gamma, &grads.dgamma);
        update(&mut head.bn.beta, &mut self.v_beta, &grads.dbeta);
        update(
            head.fc.weight.as_mut_slice(),
            self.v_weight.as_mut_slice(),
            grads.dweight.as_slice(),
        );
        update(&mut head.fc.bias, &mut self.v_bias, &grads.dbias);
    }
}

struct BatchForward {
    /// Representations fed to the loss (normalized if configured).
    reps: DenseMatrix,
    /// Pooled representations before normalization.
    pooled: DenseMatrix,
    pools: Vec<PoolCache>,
    quality_cache: crate::aggregation::QualityCache,
}

fn forward_batch(batch: &Batch, head: &QualityHead, normalize: bool) -> Result<BatchForward> {
    let d = head.embed_dim();
    let all = batch.templates.iter().flat_map(|t| t.instances.iter());
    let maps = stack_rows(
        all.clone().map(|i| i.feature_map.as_slice()),
        head.map_dim(),
        "batch feature maps",
    )?;
    let embeddings = stack_rows(all.map(|i| i.embedding.as_slice()), d, "batch embeddings")?;
    let (q, quality_cache) = quality_forward(&maps, head, StatsMode::Batch)?;

    let mut pooled = DenseMatrix::zeros(batch.templates.len(), d);
    let mut pools = Vec::with_capacity(batch.templates.len());
    let mut start = 0;
    for (t, template) in batch.templates.iter().enumerate() {
        let end = start + template.len();
        let (rep, cache) = pool_cfan_forward(&embeddings.slice_rows(start, end), &q.slice_rows(start, end))?;
        pooled.row_mut(t).copy_from_slice(&rep.vector);
        pools.push(cache);
        start = end;
    }
    let reps = if normalize {
        let mut r = pooled.clone();
        for i in 0..r.rows() {
            let n = norm(r.row(i));
            if n > 0.0 {
                r.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
        }
        r
    } else {
        pooled.clone()
    };
    Ok(BatchForward {
        reps,
        pooled,
        pools,
        quality_cache,
    })
}

/// Triplet loss of a batch for fixed triplets. Used to check gradients.
pub fn batch_loss(batch: &Batch, head: &QualityHead, triplets: &[Triplet], cfg: &TrainConfig) -> Result<f64> {
    let fwd = forward_batch(batch, head, cfg.normalize_reps)?;
    Ok(triplet_loss(&fwd.reps, triplets, cfg.alpha).loss)
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub active: usize,
    pub triplets: Vec<Triplet>,
    pub grads: QualityGrads,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Forward pass, mining, loss and exact gradients with respect to every head parameter.
pub fn batch_gradients(batch: &Batch, head: &QualityHead, cfg: &TrainConfig) -> Result<BatchGradients> {
    let fwd = forward_batch(batch, head, cfg.normalize_reps)?;
    let triplets = match cfg.mining {
        MiningStrategy::BatchHard => mine_hard_triplets(&fwd.reps, &batch.labels),
        MiningStrategy::Exhaustive => mine_all_triplets(&batch.labels),
    };
    let tl = triplet_loss(&fwd.reps, &triplets, cfg.alpha);

    let d = head.embed_dim();
    let mut dq = DenseMatrix::zeros(batch.n_instances(), d);
    let mut start = 0;
    for (t, cache) in fwd.pools.iter().enumerate() {
        let mut d_rep = tl.grad.row(t).to_vec();
        if cfg.normalize_reps {
            let n = norm(fwd.pooled.row(t));
            if n > 0.0 {
                let unit = fwd.reps.row(t);
                let proj: f64 = unit.iter().zip(&d_rep).map(|(u, g)| u * g).sum();
                for (g, u) in d_rep.iter_mut().zip(unit) {
                    *g = (*g - u * proj) / n;
                }
            }
        }
        let (_, dq_t) = pool_cfan_backward(&d_rep, cache)?;
        for i in 0..dq_t.rows() {
            dq.row_mut(start + i).copy_from_slice(dq_t.row(i));
        }
        start += dq_t.rows();
    }
    let grads = quality_backward(&dq, &fwd.quality_cache, head)?;
    let (mean, var) = fwd
        .quality_cache
        .batch_stats()
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .unwrap_or_default();
    Ok(BatchGradients {
        loss: tl.loss,
        active: tl.active,
        triplets,
        grads,
        batch_mean: mean,
        batch_var: var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub active_triplets: usize,
}

/// One SGD step on `batch`; updates the head parameters, the running
/// batch-norm statistics and the momentum buffers in place.
pub fn train_step(
    batch: &Batch,
    head: &mut QualityHead,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
    last_loss: f64,
) -> Result<StepLog> {
    let g = batch_gradients(batch, head, cfg)?;
    if !g.loss.is_finite() || !grads_finite(&g.grads) {
        return Err(Error::NonFiniteLoss {
            step,
            active: g.active,
            last_loss,
        });
    }
    opt.apply(head, &g.grads, cfg);
    head.stats.update(&g.batch_mean, &g.batch_var, BN_STATS_MOMENTUM);
    Ok(StepLog {
        step,
        loss: g.loss,
        active_triplets: g.active,
    })
}

fn grads_finite(g: &QualityGrads) -> bool {
    g.dgamma
        .iter()
        .chain(&g.dbeta)
        .chain(&g.dbias)
        .chain(g.dweight.as_slice())
        .all(|v| v.is_finite())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// One `step <n> loss <v> active_triplets <k>` line per step.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.steps {
            let _ = writeln!(
                s,
                "step {} loss {} active_triplets {}",
                e.step, e.loss, e.active_triplets
            );
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|e| e.loss).collect()
    }
}

/// Initializes a head from `cfg.seed` and runs `cfg.steps` steps. `encoding`
/// is only needed when noise augmentation is enabled.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    encoding: Option<&QualityEncoding>,
) -> Result<(QualityHead, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = QualityHead::init(dataset.map_dim, dataset.embed_dim, cfg.head_mode, &mut rng);
    let mut opt = OptimizerState::new(&head);
    let mut log = TrainLog::default();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = sample_batch(dataset, cfg, encoding, &mut rng)?;
        let entry = train_step(&batch, &mut head, &mut opt, cfg, step, last_loss)?;
        last_loss = entry.loss;
        log.steps.push(entry);
    }
    Ok((head, log))
}
