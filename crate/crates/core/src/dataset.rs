use std::collections::HashMap;

use crate::aggregation::{FeatureInstance, Template};
use crate::error::{Error, Result};

/// One stored observation together with its subject and template labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub subject_id: String,
    pub template_id: String,
    pub instance: FeatureInstance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub instances: Vec<FeatureInstance>,
}

/// Instances grouped by subject, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub map_dim: usize,
    pub embed_dim: usize,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn new(map_dim: usize, embed_dim: usize, subjects: Vec<Subject>) -> Result<Self> {
        for s in &subjects {
            for inst in &s.instances {
                check_dims(inst, map_dim, embed_dim)?;
            }
        }
        Ok(Self {
            map_dim,
            embed_dim,
            subjects,
        })
    }

    pub fn from_records(map_dim: usize, embed_dim: usize, records: &[FeatureRecord]) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut subjects: Vec<Subject> = Vec::new();
        for r in records {
            check_dims(&r.instance, map_dim, embed_dim)?;
            let k = *index.entry(r.subject_id.as_str()).or_insert_with(|| {
                subjects.push(Subject {
                    id: r.subject_id.clone(),
                    instances: Vec::new(),
                });
                subjects.len() - 1
            });
            subjects[k].instances.push(r.instance.clone());
        }
        Ok(Self {
            map_dim,
            embed_dim,
            subjects,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.subjects.iter().map(|s| s.instances.len()).sum()
    }
}

fn check_dims(inst: &FeatureInstance, map_dim: usize, embed_dim: usize) -> Result<()> {
    if inst.feature_map.len() != map_dim {
        return Err(Error::shape("feature_map", map_dim, inst.feature_map.len()));
    }
    if inst.embedding.len() != embed_dim {
        return Err(Error::shape("embedding", embed_dim, inst.embedding.len()));
    }
    Ok(())
}

/// Groups records into templates keyed by `(subject_id, template_id)`, in
/// order of first appearance.
pub fn templates_from_records(records: &[FeatureRecord]) -> Vec<Template> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut templates: Vec<Template> = Vec::new();
    for r in records {
        let k = *index
            .entry((r.subject_id.as_str(), r.template_id.as_str()))
            .or_insert_with(|| {
                templates.push(Template::new(r.subject_id.clone(), r.template_id.clone(), Vec::new()));
                templates.len() - 1
            });
        templates[k].instances.push(r.instance.clone());
    }
    templates
}
