use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{FeatureInstance, Template};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::synthetic::QualityEncoding;

use super::TrainConfig;

/// Probability that a sampled instance is corrupted when augmentation is on.
pub const AUGMENT_PROBABILITY: f64 = 0.5;

/// Templates of one mini-batch with per-template subject labels in `0..subjects_per_batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub templates: Vec<Template>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn n_instances(&self) -> usize {
        self.templates.iter().map(Template::len).sum()
    }
}

/// Draws `subjects_per_batch` subjects without replacement, then for each one
/// `templates_per_subject * images_per_template` distinct instances, cut into
/// consecutive templates.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    encoding: Option<&QualityEncoding>,
    rng: &mut R,
) -> Result<Batch> {
    cfg.validate()?;
    let need = cfg.templates_per_subject * cfg.images_per_template;
    if dataset.subjects.len() < cfg.subjects_per_batch {
        return Err(Error::Config(format!(
            "dataset has {} subjects, batch needs {}",
            dataset.subjects.len(),
            cfg.subjects_per_batch
        )));
    }
    if let Some(s) = dataset.subjects.iter().find(|s| s.instances.len() < need) {
        return Err(Error::InsufficientData {
            subject: s.id.clone(),
            have: s.instances.len(),
            need,
        });
    }
    let augment = match cfg.noise_augment {
        Some(sigma) if sigma > 0.0 => Some((
            sigma,
            encoding.ok_or_else(|| Error::Config("noise augmentation needs the feature-map encoding".into()))?,
        )),
        _ => None,
    };

    let chosen = index::sample(rng, dataset.subjects.len(), cfg.subjects_per_batch);
    let mut templates = Vec::with_capacity(cfg.subjects_per_batch * cfg.templates_per_subject);
    let mut labels = Vec::with_capacity(templates.capacity());
    for (label, s_idx) in chosen.iter().enumerate() {
        let subject = &dataset.subjects[s_idx];
        let picks = index::sample(rng, subject.instances.len(), need).into_vec();
        for (t, chunk) in picks.chunks(cfg.images_per_template).enumerate() {
            let mut instances = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let inst = &subject.instances[i];
                match augment {
                    Some((sigma, enc)) if rng.random::<f64>() < AUGMENT_PROBABILITY => {
                        instances.push(augment_noise(inst, sigma, enc, rng)?)
                    }
                    _ => instances.push(inst.clone()),
                }
            }
            templates.push(Template::new(subject.id.clone(), format!("batch_t{t}"), instances));
            labels.push(label);
        }
    }
    Ok(Batch { templates, labels })
}

/// Adds iid `N(0, sigma^2)` noise to the embedding and rewrites the feature
/// map so its quality coordinates report the combined noise scale
/// `sqrt(s^2 + sigma^2)` of every observable component.
///
/// The feature map must come from `encoding`.
pub fn augment_noise<R: Rng + ?Sized>(
    instance: &FeatureInstance,
    sigma: f64,
    encoding: &QualityEncoding,
    rng: &mut R,
) -> Result<FeatureInstance> {
    if sigma == 0.0 {
        return Ok(instance.clone());
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("augmentation sigma must be >= 0, got {sigma}")));
    }
    if instance.embedding.len() != encoding.dim() {
        return Err(Error::shape(
            "augment_noise embedding",
            encoding.dim(),
            instance.embedding.len(),
        ));
    }
    let mut sigmas = encoding.decode_sigmas(&instance.feature_map)?;
    for s in sigmas.iter_mut() {
        *s = (*s * *s + sigma * sigma).sqrt();
    }
    let embedding: Vec<f64> = instance
        .embedding
        .iter()
        .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let feature_map = encoding.encode(&embedding, &sigmas)?;
    Ok(FeatureInstance::new(feature_map, embedding))
}
