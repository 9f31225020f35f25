//! Synthetic sets following the additive noise model `f_i = mu + eps_i`, with
//! noise scales drawn independently for every instance and component.
//!
//! Each instance also gets a feature map from which its noise scales can be
//! recovered by a linear map: a random projection of the embedding followed
//! by `quality_latent_dim` coordinates holding an orthogonal mix of
//! `ln(sigma)`. The inverse-variance oracle gives the best achievable linear
//! fusion for comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{FeatureInstance, Template};
use crate::dataset::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::math::{dot, DenseMatrix};

/// Noise scales below this are clamped before taking the log.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Seed of the feature-map mixing matrices. The encoding depends only on the
/// dimensions, so any consumer of a feature file can rebuild it.
const ENCODING_SEED: u64 = 0x5eed_c0de_f00d;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModelConfig {
    pub n_subjects: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Feature-map dimension.
    pub map_dim: usize,
    pub instances_per_subject: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Number of leading embedding components whose noise scale is visible in the feature map.
    pub quality_latent_dim: usize,
    /// Standard deviation of the subject means.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for NoiseModelConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            dim: 64,
            map_dim: 128,
            instances_per_subject: 12,
            sigma_min: 0.1,
            sigma_max: 2.0,
            quality_latent_dim: 64,
            mean_scale: 1.0,
            seed: 0,
        }
    }
}

impl NoiseModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max.is_finite() && self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(Error::Config(format!(
                "need 0 <= sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.quality_latent_dim > self.map_dim || self.quality_latent_dim > self.dim {
            return Err(Error::Config(format!(
                "quality_latent_dim {} must not exceed map_dim {} or dim {}",
                self.quality_latent_dim, self.map_dim, self.dim
            )));
        }
        if self.dim == 0 || self.map_dim == 0 {
            return Err(Error::Config("dim and map_dim must be positive".into()));
        }
        if !(self.mean_scale.is_finite() && self.mean_scale >= 0.0) {
            return Err(Error::Config(format!(
                "mean_scale must be >= 0, got {}",
                self.mean_scale
            )));
        }
        Ok(())
    }
}

/// Fixed linear encoding of `(embedding, noise scales)` into a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityEncoding {
    embed_mix: DenseMatrix,
    latent_mix: DenseMatrix,
}

impl QualityEncoding {
    pub fn new(dim: usize, map_dim: usize, latent_dim: usize) -> Result<Self> {
        if latent_dim > map_dim || latent_dim > dim {
            return Err(Error::Config(format!(
                "quality latent dim {latent_dim} exceeds map_dim {map_dim} or dim {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            ENCODING_SEED ^ ((dim as u64) << 32) ^ ((map_dim as u64) << 16) ^ latent_dim as u64,
        );
        let scale = 1.0 / (dim as f64).sqrt();
        let embed_rows = map_dim - latent_dim;
        let data = (0..embed_rows * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let embed_mix = DenseMatrix::from_vec(embed_rows, dim, data)?;
        let latent_mix = random_orthogonal(latent_dim, &mut rng);
        Ok(Self { embed_mix, latent_mix })
    }

    pub fn dim(&self) -> usize {
        self.embed_mix.cols()
    }

    pub fn map_dim(&self) -> usize {
        self.embed_mix.rows() + self.latent_mix.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_mix.rows()
    }

    /// Feature map for an embedding whose components carry noise scales `sigmas`.
    pub fn encode(&self, embedding: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let mut map = self.embed_mix.matvec(embedding)?;
        let latent: Vec<f64> = sigmas[..self.latent_dim()]
            .iter()
            .map(|&s| s.max(SIGMA_FLOOR).ln())
            .collect();
        map.extend(self.latent_mix.matvec(&latent)?);
        Ok(map)
    }

    /// Noise scales of the observable components, read back from a feature map.
    pub fn decode_sigmas(&self, feature_map: &[f64]) -> Result<Vec<f64>> {
        if feature_map.len() != self.map_dim() {
            return Err(Error::shape("decode_sigmas", self.map_dim(), feature_map.len()));
        }
        let coords = &feature_map[self.embed_mix.rows()..];
        let l = self.latent_dim();
        Ok((0..l)
            .map(|k| (0..l).map(|i| self.latent_mix[(i, k)] * coords[i]).sum::<f64>().exp())
            .collect())
    }
}

/// Rows of a Gaussian matrix orthonormalized by modified Gram-Schmidt.
fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DenseMatrix {
    loop {
        let data = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut m = DenseMatrix::from_vec(n, n, data).expect("square");
        let mut ok = true;
        for i in 0..n {
            for k in 0..i {
                let proj = dot(m.row(i), m.row(k));
                let prev = m.row(k).to_vec();
                for (v, p) in m.row_mut(i).iter_mut().zip(&prev) {
                    *v -= proj * p;
                }
            }
            let nrm = crate::math::norm(m.row(i));
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            m.row_mut(i).iter_mut().for_each(|v| *v /= nrm);
        }
        if ok {
            return m;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub mean: Vec<f64>,
    pub instances: Vec<FeatureInstance>,
    /// Noise scale per instance and component.
    pub sigmas: Vec<Vec<f64>>,
    /// Realized noise: `embedding = mean + noise`.
    pub noise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: NoiseModelConfig,
    pub encoding: QualityEncoding,
    pub subjects: Vec<SyntheticSubject>,
}

pub fn generate(cfg: &NoiseModelConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let encoding = QualityEncoding::new(cfg.dim, cfg.map_dim, cfg.quality_latent_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.sigma_max - cfg.sigma_min;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for k in 0..cfg.n_subjects {
        let mean: Vec<f64> = (0..cfg.dim)
            .map(|_| cfg.mean_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut instances = Vec::with_capacity(cfg.instances_per_subject);
        let mut sigmas = Vec::with_capacity(cfg.instances_per_subject);
        let mut noise = Vec::with_capacity(cfg.instances_per_subject);
        for _ in 0..cfg.instances_per_subject {
            let s: Vec<f64> = (0..cfg.dim)
                .map(|_| cfg.sigma_min + width * rng.random::<f64>())
                .collect();
            let e: Vec<f64> = s.iter().map(|&sj| sj * rng.sample::<f64, _>(StandardNormal)).collect();
            let embedding: Vec<f64> = mean.iter().zip(&e).map(|(m, x)| m + x).collect();
            let feature_map = encoding.encode(&embedding, &s)?;
            instances.push(FeatureInstance::new(feature_map, embedding));
            sigmas.push(s);
            noise.push(e);
        }
        subjects.push(SyntheticSubject {
            id: format!("subject_{k:05}"),
            mean,
            instances,
            sigmas,
            noise,
        });
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        encoding,
        subjects,
    })
}

impl SyntheticDataset {
    /// Drops the ground truth, keeping subject-grouped instances.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            map_dim: self.config.map_dim,
            embed_dim: self.config.dim,
            subjects: self
                .subjects
                .iter()
                .map(|s| Subject {
                    id: s.id.clone(),
                    instances: s.instances.clone(),
                })
                .collect(),
        }
    }

    /// Splits every subject's instances into consecutive templates of
    /// `template_size`; a short tail becomes a smaller last template.
    pub fn templates(&self, template_size: usize) -> Vec<Template> {
        let size = template_size.max(1);
        self.subjects
            .iter()
            .flat_map(|s| {
                s.instances
                    .chunks(size)
                    .enumerate()
                    .map(|(t, chunk)| Template::new(s.id.clone(), format!("{}_t{t}", s.id), chunk.to_vec()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Embeddings of each subject as an `N_k x D` matrix.
    pub fn embedding_groups(&self) -> Vec<DenseMatrix> {
        self.subjects
            .iter()
            .map(|s| {
                DenseMatrix::from_rows(&s.instances.iter().map(|i| i.embedding.clone()).collect::<Vec<_>>())
                    .unwrap_or_else(|_| DenseMatrix::zeros(0, self.config.dim))
            })
            .collect()
    }
}

/// Inverse-variance weights per component, normalized over the set.
///
/// A zero noise scale is an exact observation: the zero-noise instances of a
/// component share its weight uniformly and everything else gets zero.
pub fn oracle_weights(sigmas: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, d) = sigmas.shape();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if sigmas.as_slice().iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
        return Err(Error::NonFinite("oracle_weights sigmas"));
    }
    let mut w = DenseMatrix::zeros(n, d);
    for j in 0..d {
        let exact = (0..n).filter(|&i| sigmas[(i, j)] == 0.0).count();
        if exact > 0 {
            let share = 1.0 / exact as f64;
            for i in 0..n {
                if sigmas[(i, j)] == 0.0 {
                    w[(i, j)] = share;
                }
            }
            continue;
        }
        let total: f64 = (0..n).map(|i| 1.0 / (sigmas[(i, j)] * sigmas[(i, j)])).sum();
        for i in 0..n {
            w[(i, j)] = 1.0 / (sigmas[(i, j)] * sigmas[(i, j)]) / total;
        }
    }
    Ok(w)
}

/// Minimum-variance unbiased linear fusion of `features` given the true noise scales.
pub fn oracle_pool(features: &DenseMatrix, sigmas: &DenseMatrix) -> Result<Vec<f64>> {
    if features.shape() != sigmas.shape() {
        return Err(Error::shape(
            "oracle_pool",
            format!("{}x{}", features.rows(), features.cols()),
            format!("{}x{}", sigmas.rows(), sigmas.cols()),
        ));
    }
    if features.rows() == 0 {
        return Ok(vec![0.0; features.cols()]);
    }
    let w = oracle_weights(sigmas)?;
    let mut r = vec![0.0; features.cols()];
    for i in 0..features.rows() {
        for ((rj, f), wij) in r.iter_mut().zip(features.row(i)).zip(w.row(i)) {
            *rj += wij * f;
        }
    }
    Ok(r)
}

/// Absolute Pearson correlation between components of the within-subject
/// residuals, pooled across subjects. Subjects with a single instance carry
/// no residual and are skipped. A component with zero residual variance gets
/// zero off-diagonal entries.
pub fn intra_class_correlation(groups: &[DenseMatrix]) -> Result<DenseMatrix> {
    let d = match groups.iter().find(|g| g.rows() >= 2) {
        Some(g) => g.cols(),
        None => {
            return Err(Error::Protocol(
                "intra-class correlation needs a subject with at least two instances".into(),
            ))
        }
    };
    let mut residuals: Vec<Vec<f64>> = Vec::new();
    let mut raw_sq = vec![0.0; d];
    for g in groups.iter().filter(|g| g.rows() >= 2) {
        if g.cols() != d {
            return Err(Error::shape("intra_class_correlation", d, g.cols()));
        }
        let inv = 1.0 / g.rows() as f64;
        let mean: Vec<f64> = g.column_sums().into_iter().map(|s| s * inv).collect();
        for row in g.iter_rows() {
            for (acc, x) in raw_sq.iter_mut().zip(row) {
                *acc += x * x;
            }
            residuals.push(row.iter().zip(&mean).map(|(x, m)| x - m).collect());
        }
    }
    let n = residuals.len() as f64;
    let mut center = vec![0.0; d];
    for r in &residuals {
        for (c, v) in center.iter_mut().zip(r) {
            *c += v / n;
        }
    }
    let mut cov = DenseMatrix::zeros(d, d);
    for r in &residuals {
        let c: Vec<f64> = r.iter().zip(&center).map(|(v, m)| v - m).collect();
        for a in 0..d {
            if c[a] == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    // residual variance at rounding level counts as zero
    let degenerate: Vec<bool> = (0..d)
        .map(|a| cov[(a, a)] <= f64::EPSILON * f64::EPSILON * raw_sq[a].max(f64::MIN_POSITIVE))
        .collect();
    let mut corr = DenseMatrix::identity(d);
    for a in 0..d {
        for b in a + 1..d {
            let v = if degenerate[a] || degenerate[b] {
                0.0
            } else {
                (cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()).abs().min(1.0)
            };
            corr[(a, b)] = v;
            corr[(b, a)] = v;
        }
    }
    Ok(corr)
}
