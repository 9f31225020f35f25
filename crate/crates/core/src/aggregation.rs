//! Set pooling: average, instance-level and component-wise (C-FAN) fusion,
//! plus the batch-norm + fully-connected quality head feeding the latter two.
//!
//! The component-wise pooler computes, for a set of embeddings `f_i` with
//! quality vectors `q_i`,
//!
//! ```text
//! w_ij = exp(q_ij) / sum_k exp(q_kj)        r_j = sum_i w_ij * f_ij
//! ```
//!
//! The instance-level baseline is the special case where every `q_i` is a
//! constant vector; average pooling is the case where all `q_i` are equal.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{
    batchnorm_backward, batchnorm_forward, batchnorm_inference, linear_backward, linear_forward, softmax,
    softmax_over_set, BatchNormCache, BatchNormParams, BatchNormStats, DenseMatrix, LinearParams,
};

/// Default batch-norm epsilon of a freshly initialized head.
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInstance {
    /// Input of the quality head.
    pub feature_map: Vec<f64>,
    /// The embedding that gets fused.
    pub embedding: Vec<f64>,
}

impl FeatureInstance {
    pub fn new(feature_map: Vec<f64>, embedding: Vec<f64>) -> Self {
        Self { feature_map, embedding }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub subject_id: String,
    pub template_id: String,
    pub instances: Vec<FeatureInstance>,
}

impl Template {
    pub fn new(subject_id: impl Into<String>, template_id: impl Into<String>, instances: Vec<FeatureInstance>) -> Self {
        Self {
            subject_id: subject_id.into(),
            template_id: template_id.into(),
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Embeddings stacked as an `N x dim` matrix.
    pub fn embeddings(&self, dim: usize) -> Result<DenseMatrix> {
        stack_rows(
            self.instances.iter().map(|i| i.embedding.as_slice()),
            dim,
            "template embeddings",
        )
    }

    pub fn feature_maps(&self, dim: usize) -> Result<DenseMatrix> {
        stack_rows(
            self.instances.iter().map(|i| i.feature_map.as_slice()),
            dim,
            "template feature maps",
        )
    }
}

pub(crate) fn stack_rows<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    dim: usize,
    what: &'static str,
) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::shape(what, dim, r.len()));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    DenseMatrix::from_vec(n, dim, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    Average,
    Instance,
    Cfan,
}

impl PoolingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Average => "average",
            PoolingMode::Instance => "instance",
            PoolingMode::Cfan => "cfan",
        }
    }

    /// Head layout a trained model needs for this pooling mode.
    pub fn head_mode(self) -> Option<HeadMode> {
        match self {
            PoolingMode::Average => None,
            PoolingMode::Instance => Some(HeadMode::InstanceScalar),
            PoolingMode::Cfan => Some(HeadMode::ComponentWise),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(PoolingMode::Average),
            "instance" => Ok(PoolingMode::Instance),
            "cfan" => Ok(PoolingMode::Cfan),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected average, instance or cfan)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// One quality score per embedding component.
    ComponentWise,
    /// One scalar per instance, broadcast across components.
    InstanceScalar,
}

/// Whether batch norm uses statistics of the current batch or the frozen
/// running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Batch,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityHead {
    pub bn: BatchNormParams,
    pub stats: BatchNormStats,
    pub fc: LinearParams,
    pub mode: HeadMode,
    embed_dim: usize,
}

impl QualityHead {
    /// `gamma = 1`, `beta = 0`, fc weights iid uniform in `[-1/sqrt(M), 1/sqrt(M)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(map_dim: usize, embed_dim: usize, mode: HeadMode, rng: &mut R) -> Self {
        let out = Self::out_dim_for(mode, embed_dim);
        let bound = 1.0 / (map_dim.max(1) as f64).sqrt();
        let weight: Vec<f64> = (0..map_dim * out).map(|_| rng.random_range(-bound..=bound)).collect();
        let fc = LinearParams::new(
            DenseMatrix::from_vec(map_dim, out, weight).expect("sized above"),
            vec![0.0; out],
        )
        .expect("sized above");
        Self {
            bn: BatchNormParams::identity(map_dim, DEFAULT_BN_EPS),
            stats: BatchNormStats::initial(map_dim),
            fc,
            mode,
            embed_dim,
        }
    }

    /// Assembles a head from explicit parameters, validating every dimension.
    pub fn from_parts(
        bn: BatchNormParams,
        stats: BatchNormStats,
        fc: LinearParams,
        mode: HeadMode,
        embed_dim: usize,
    ) -> Result<Self> {
        bn.validate()?;
        let m = bn.dim();
        if stats.mean.len() != m || stats.var.len() != m {
            return Err(Error::shape("QualityHead stats", m, stats.mean.len()));
        }
        if fc.in_dim() != m {
            return Err(Error::shape("QualityHead fc input", m, fc.in_dim()));
        }
        let out = Self::out_dim_for(mode, embed_dim);
        if fc.out_dim() != out || fc.bias.len() != out {
            return Err(Error::shape("QualityHead fc output", out, fc.out_dim()));
        }
        Ok(Self {
            bn,
            stats,
            fc,
            mode,
            embed_dim,
        })
    }

    /// A head whose output ignores its input: zero fc weight, bias `value`.
    pub fn constant(map_dim: usize, embed_dim: usize, mode: HeadMode, value: f64) -> Self {
        let out = Self::out_dim_for(mode, embed_dim);
        Self {
            bn: BatchNormParams::identity(map_dim, DEFAULT_BN_EPS),
            stats: BatchNormStats::initial(map_dim),
            fc: LinearParams::new(DenseMatrix::zeros(map_dim, out), vec![value; out]).expect("sized above"),
            mode,
            embed_dim,
        }
    }

    fn out_dim_for(mode: HeadMode, embed_dim: usize) -> usize {
        match mode {
            HeadMode::ComponentWise => embed_dim,
            HeadMode::InstanceScalar => 1,
        }
    }

    pub fn map_dim(&self) -> usize {
        self.bn.dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn pooling_mode(&self) -> PoolingMode {
        match self.mode {
            HeadMode::ComponentWise => PoolingMode::Cfan,
            HeadMode::InstanceScalar => PoolingMode::Instance,
        }
    }
}

/// Intermediate values of a batch-statistics quality forward pass.
#[derive(Debug, Clone)]
pub struct QualityCache {
    bn: Option<BatchNormCache>,
    normalized: DenseMatrix,
}

impl QualityCache {
    /// Batch mean and variance used for normalization, when batch statistics were used.
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.bn
            .as_ref()
            .map(|c| (c.batch_mean.as_slice(), c.batch_var.as_slice()))
    }
}

/// Maps `N x M` feature maps to `N x D` raw (unnormalized) quality scores.
pub fn quality_forward(
    maps: &DenseMatrix,
    head: &QualityHead,
    stats: StatsMode,
) -> Result<(DenseMatrix, QualityCache)> {
    if maps.rows() == 0 {
        return Err(Error::EmptySet);
    }
    if maps.cols() != head.map_dim() {
        return Err(Error::shape("quality_forward", head.map_dim(), maps.cols()));
    }
    let (normalized, bn) = match stats {
        StatsMode::Batch => {
            let (y, cache) = batchnorm_forward(maps, &head.bn)?;
            (y, Some(cache))
        }
        StatsMode::Frozen => (batchnorm_inference(maps, &head.bn, &head.stats)?, None),
    };
    let raw = linear_forward(&normalized, &head.fc)?;
    let q = match head.mode {
        HeadMode::ComponentWise => raw,
        HeadMode::InstanceScalar => {
            let mut q = DenseMatrix::zeros(raw.rows(), head.embed_dim);
            for i in 0..raw.rows() {
                q.row_mut(i).fill(raw[(i, 0)]);
            }
            q
        }
    };
    Ok((q, QualityCache { bn, normalized }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityGrads {
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dweight: DenseMatrix,
    pub dbias: Vec<f64>,
}

/// Backpropagates `dq` (`N x D`) to the head parameters. Requires a cache from
/// a [`StatsMode::Batch`] forward pass.
pub fn quality_backward(dq: &DenseMatrix, cache: &QualityCache, head: &QualityHead) -> Result<QualityGrads> {
    let bn_cache = cache
        .bn
        .as_ref()
        .ok_or_else(|| Error::Protocol("quality_backward needs a batch-statistics forward pass".into()))?;
    if dq.rows() != cache.normalized.rows() || dq.cols() != head.embed_dim {
        return Err(Error::shape(
            "quality_backward",
            format!("{}x{}", cache.normalized.rows(), head.embed_dim),
            format!("{}x{}", dq.rows(), dq.cols()),
        ));
    }
    let draw = match head.mode {
        HeadMode::ComponentWise => dq.clone(),
        HeadMode::InstanceScalar => {
            // broadcast in forward, so the scalar collects every component's gradient
            let sums: Vec<f64> = dq.iter_rows().map(|r| r.iter().sum()).collect();
            DenseMatrix::from_vec(dq.rows(), 1, sums)?
        }
    };
    let lin = linear_backward(&cache.normalized, &draw, &head.fc)?;
    let bn = batchnorm_backward(&lin.dx, bn_cache)?;
    Ok(QualityGrads {
        dgamma: bn.dgamma,
        dbeta: bn.dbeta,
        dweight: lin.dweight,
        dbias: lin.dbias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedRep {
    pub vector: Vec<f64>,
    pub mode: PoolingMode,
    pub n_instances: usize,
}

impl AggregatedRep {
    pub fn zero(dim: usize, mode: PoolingMode) -> Self {
        Self {
            vector: vec![0.0; dim],
            mode,
            n_instances: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub fn pool_average(features: &DenseMatrix) -> AggregatedRep {
    let n = features.rows();
    if n == 0 {
        return AggregatedRep::zero(features.cols(), PoolingMode::Average);
    }
    let vector = features.column_sums().into_iter().map(|s| s / n as f64).collect();
    AggregatedRep {
        vector,
        mode: PoolingMode::Average,
        n_instances: n,
    }
}

/// Weighted row sum with one softmax-normalized scalar per instance.
pub fn pool_instance(features: &DenseMatrix, scores: &[f64]) -> Result<AggregatedRep> {
    let (n, d) = features.shape();
    if scores.len() != n {
        return Err(Error::shape("pool_instance", n, scores.len()));
    }
    if n == 0 {
        return Ok(AggregatedRep::zero(d, PoolingMode::Instance));
    }
    let w = softmax(scores)?;
    let mut vector = vec![0.0; d];
    for (row, wi) in features.iter_rows().zip(&w) {
        for (r, f) in vector.iter_mut().zip(row) {
            *r += wi * f;
        }
    }
    Ok(AggregatedRep {
        vector,
        mode: PoolingMode::Instance,
        n_instances: n,
    })
}

/// Saved state of a component-wise pooling forward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub features: DenseMatrix,
    pub weights: DenseMatrix,
    pub output: Vec<f64>,
}

/// Component-wise pooling returning the cache for [`pool_cfan_backward`].
/// Requires a non-empty set.
pub fn pool_cfan_forward(features: &DenseMatrix, quality: &DenseMatrix) -> Result<(AggregatedRep, PoolCache)> {
    if features.shape() != quality.shape() {
        return Err(Error::shape(
            "pool_cfan",
            format!("{}x{}", features.rows(), features.cols()),
            format!("{}x{}", quality.rows(), quality.cols()),
        ));
    }
    let weights = softmax_over_set(quality)?;
    let d = features.cols();
    let mut vector = vec![0.0; d];
    for i in 0..features.rows() {
        for ((r, f), w) in vector.iter_mut().zip(features.row(i)).zip(weights.row(i)) {
            *r += w * f;
        }
    }
    let rep = AggregatedRep {
        vector: vector.clone(),
        mode: PoolingMode::Cfan,
        n_instances: features.rows(),
    };
    let cache = PoolCache {
        features: features.clone(),
        weights,
        output: vector,
    };
    Ok((rep, cache))
}

/// `r_j = sum_i softmax_i(q_.j) * f_ij`. An empty set pools to the zero vector.
pub fn pool_cfan(features: &DenseMatrix, quality: &DenseMatrix) -> Result<AggregatedRep> {
    if features.rows() == 0 && quality.rows() == 0 {
        return Ok(AggregatedRep::zero(features.cols(), PoolingMode::Cfan));
    }
    pool_cfan_forward(features, quality).map(|(rep, _)| rep)
}

/// Returns `(dF, dQ)` for an upstream gradient `dR` on the pooled vector.
///
/// `dF_ij = w_ij dR_j` and, through the column softmax,
/// `dQ_ij = dR_j w_ij (f_ij - r_j)`.
pub fn pool_cfan_backward(d_rep: &[f64], cache: &PoolCache) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, d) = cache.features.shape();
    if d_rep.len() != d {
        return Err(Error::shape("pool_cfan_backward", d, d_rep.len()));
    }
    let mut df = DenseMatrix::zeros(n, d);
    let mut dq = DenseMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let w = cache.weights[(i, j)];
            df[(i, j)] = w * d_rep[j];
            dq[(i, j)] = d_rep[j] * w * (cache.features[(i, j)] - cache.output[j]);
        }
    }
    Ok((df, dq))
}

/// Aggregates one template with the requested pooling mode. `dim` is the
/// embedding dimension, needed to size the zero vector of an empty template.
/// Inference always uses the head's frozen batch-norm statistics.
pub fn aggregate_template(
    template: &Template,
    head: Option<&QualityHead>,
    mode: PoolingMode,
    dim: usize,
) -> Result<AggregatedRep> {
    let head = match (mode.head_mode(), head) {
        (None, _) => None,
        (Some(want), Some(h)) if h.mode == want => Some(h),
        (Some(want), Some(h)) => {
            return Err(Error::Config(format!(
                "mode {mode} needs a {want:?} head, got a {:?} head",
                h.mode
            )))
        }
        (Some(_), None) => return Err(Error::Config(format!("mode {mode} requires a quality head"))),
    };
    if let Some(h) = head {
        if h.embed_dim() != dim {
            return Err(Error::shape("aggregate_template head", dim, h.embed_dim()));
        }
    }
    if template.is_empty() {
        return Ok(AggregatedRep::zero(dim, mode));
    }
    let features = template.embeddings(dim)?;
    match (mode, head) {
        (PoolingMode::Average, _) => Ok(pool_average(&features)),
        (_, Some(h)) => {
            let maps = template.feature_maps(h.map_dim())?;
            let (q, _) = quality_forward(&maps, h, StatsMode::Frozen)?;
            match mode {
                PoolingMode::Instance => pool_instance(&features, &q.column(0)),
                _ => pool_cfan(&features, &q),
            }
        }
        (_, None) => unreachable!("checked above"),
    }
}
