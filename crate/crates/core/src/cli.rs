//! Subcommand implementations behind the `cfan` binary.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aggregation::{aggregate_template, PoolingMode, Template};
use crate::config::RunConfig;
use crate::dataset::{templates_from_records, Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::evaluation::{
    cmc_curve, evaluate_identification, open_set_curve, pairwise_protocol, roc_curve, score_matrix, score_probes,
    split_scores, verification_tar, EvalReport, Gallery, ProbeSet, DEFAULT_FAR_TARGETS, DEFAULT_FOLDS,
    DEFAULT_FPIR_TARGETS, DEFAULT_RANKS,
};
use crate::io::{load_head, read_text, save_head, write_text, FeatureFile, RepFile, RepRecord};
use crate::math::DenseMatrix;
use crate::synthetic::{generate, intra_class_correlation, QualityEncoding};
use crate::training::{train, TrainLog};

/// Generates a synthetic dataset and writes it as a feature file. Each
/// subject's instances are cut into templates of `cfg.template_size`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<FeatureFile> {
    if cfg.noise.n_subjects == 0 || cfg.noise.instances_per_subject == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.template_size == 0 {
        return Err(Error::Config("template_size must be positive".into()));
    }
    let syn = generate(&cfg.noise)?;
    let records = syn
        .templates(cfg.template_size)
        .into_iter()
        .flat_map(|t| {
            let (subject_id, template_id) = (t.subject_id, t.template_id);
            t.instances.into_iter().map(move |instance| FeatureRecord {
                subject_id: subject_id.clone(),
                template_id: template_id.clone(),
                instance,
            })
        })
        .collect();
    let file = FeatureFile {
        map_dim: cfg.noise.map_dim,
        embed_dim: cfg.noise.dim,
        records,
    };
    file.save(out)?;
    Ok(file)
}

/// Trains a quality head for `cfg.mode` and writes it to `model_out`.
pub fn cmd_train(data: &Path, cfg: &RunConfig, model_out: &Path) -> Result<TrainLog> {
    let file = FeatureFile::load(data)?;
    if file.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dataset = Dataset::from_records(file.map_dim, file.embed_dim, &file.records)?;
    let head_mode = cfg
        .mode
        .head_mode()
        .ok_or_else(|| Error::Config(format!("mode {} has no trainable head", cfg.mode)))?;
    let train_cfg = crate::training::TrainConfig {
        head_mode,
        ..cfg.train.clone()
    };
    let encoding = match train_cfg.noise_augment {
        Some(_) => Some(QualityEncoding::new(
            file.embed_dim,
            file.map_dim,
            cfg.noise.quality_latent_dim,
        )?),
        None => None,
    };
    let (head, log) = train(&dataset, &train_cfg, encoding.as_ref())?;
    save_head(&head, model_out)?;
    Ok(log)
}

/// Reads `subject_id<TAB>template_id` lines.
fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (s, t) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected subject<TAB>template", n + 1)))?;
            Ok((s.to_string(), t.to_string()))
        })
        .collect()
}

/// Pools every template of a feature file. With a manifest, exactly the
/// listed templates are written in manifest order and listed templates with
/// no instances pool to the zero vector.
pub fn cmd_aggregate(
    data: &Path,
    model: Option<&Path>,
    mode: PoolingMode,
    manifest: Option<&Path>,
    out: &Path,
) -> Result<RepFile> {
    let file = FeatureFile::load(data)?;
    let head = match (mode, model) {
        (PoolingMode::Average, _) => None,
        (_, Some(p)) => Some(load_head(p)?),
        (_, None) => return Err(Error::Config(format!("mode {mode} requires --model"))),
    };
    if let Some(h) = &head {
        if h.map_dim() != file.map_dim {
            return Err(Error::shape("model feature-map dimension", file.map_dim, h.map_dim()));
        }
    }
    let mut templates = templates_from_records(&file.records);
    if let Some(m) = manifest {
        let mut by_key: HashMap<(String, String), Template> = templates
            .into_iter()
            .map(|t| ((t.subject_id.clone(), t.template_id.clone()), t))
            .collect();
        templates = read_manifest(m)?
            .into_iter()
            .map(|key| {
                by_key
                    .remove(&key)
                    .unwrap_or_else(|| Template::new(key.0, key.1, Vec::new()))
            })
            .collect();
    }
    let records = templates
        .iter()
        .map(|t| {
            Ok(RepRecord {
                subject_id: t.subject_id.clone(),
                template_id: t.template_id.clone(),
                rep: aggregate_template(t, head.as_ref(), mode, file.embed_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = RepFile {
        dim: file.embed_dim,
        mode,
        records,
    };
    reps.save(out)?;
    Ok(reps)
}

/// Where the compared representations come from.
#[derive(Debug, Clone)]
pub enum EvalInput {
    /// Separate probe and gallery files; the gallery holds one template per subject.
    Identification { probe: PathBuf, gallery: PathBuf },
    /// One representation file plus `template_a<TAB>template_b<TAB>same` lines
    /// with `same` in `{1, 0}`.
    Pairs { reps: PathBuf, pairs: PathBuf },
    /// One representation file: each subject's first template enrolls, the
    /// rest probe. With `unmated_every = k`, every k-th subject is left out
    /// of the gallery so its templates probe as unmated.
    SelfSplit {
        reps: PathBuf,
        unmated_every: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ranks: Vec<usize>,
    pub fpir_targets: Vec<f64>,
    pub far_targets: Vec<f64>,
    pub folds: usize,
    /// Prefix for `_cmc.csv`, `_open_set.csv` and `_roc.csv` curve dumps.
    pub curves: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ranks: DEFAULT_RANKS.to_vec(),
            fpir_targets: DEFAULT_FPIR_TARGETS.to_vec(),
            far_targets: DEFAULT_FAR_TARGETS.to_vec(),
            folds: DEFAULT_FOLDS,
            curves: None,
        }
    }
}

fn curve_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_text(path, &text)
}

fn identification_split(reps: RepFile, unmated_every: Option<usize>) -> Result<(ProbeSet, Gallery)> {
    if unmated_every == Some(0) {
        return Err(Error::Config("unmated_every must be positive".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for r in &reps.records {
        if seen.insert(r.subject_id.clone()) {
            order.push(r.subject_id.clone());
        }
    }
    let withheld: HashSet<&str> = match unmated_every {
        Some(k) => order.iter().skip(k - 1).step_by(k).map(String::as_str).collect(),
        None => HashSet::new(),
    };
    let mut enrolled = HashSet::new();
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for r in reps.records {
        if !withheld.contains(r.subject_id.as_str()) && enrolled.insert(r.subject_id.clone()) {
            gallery.push((r.subject_id, r.rep));
        } else {
            probes.push((r.subject_id, r.rep));
        }
    }
    let gallery = Gallery::new(gallery)?;
    Ok((ProbeSet::against(&gallery, probes), gallery))
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String, bool)>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            match cols.as_slice() {
                [a, b, "1"] => Ok((a.to_string(), b.to_string(), true)),
                [a, b, "0"] => Ok((a.to_string(), b.to_string(), false)),
                _ => Err(Error::Format(format!(
                    "pair list line {}: expected template_a<TAB>template_b<TAB>0|1",
                    n + 1
                ))),
            }
        })
        .collect()
}

/// Scores one of the supported protocols and writes the report text to `out`
/// when given.
pub fn cmd_evaluate(input: &EvalInput, opts: &EvalOptions, out: Option<&Path>) -> Result<EvalReport> {
    let report = match input {
        EvalInput::Identification { probe, gallery } => {
            let g = RepFile::load(gallery)?;
            let p = RepFile::load(probe)?;
            let gallery = Gallery::new(g.records.into_iter().map(|r| (r.subject_id, r.rep)).collect())?;
            let probes = ProbeSet::against(&gallery, p.records.into_iter().map(|r| (r.subject_id, r.rep)).collect());
            identification_report(&probes, &gallery, opts)?
        }
        EvalInput::SelfSplit { reps, unmated_every } => {
            let (probes, gallery) = identification_split(RepFile::load(reps)?, *unmated_every)?;
            identification_report(&probes, &gallery, opts)?
        }
        EvalInput::Pairs { reps, pairs } => {
            let reps = RepFile::load(reps)?;
            let mut by_id: HashMap<&str, &[f64]> = HashMap::new();
            for r in &reps.records {
                if by_id.insert(r.template_id.as_str(), r.rep.vector.as_slice()).is_some() {
                    return Err(Error::Protocol(format!("duplicate template id '{}'", r.template_id)));
                }
            }
            let lookup = |id: &str| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("pair references unknown template '{id}'")))
            };
            let pairs = read_pairs(pairs)?;
            let mut scores = Vec::with_capacity(pairs.len());
            let mut same = Vec::with_capacity(pairs.len());
            for (a, b, s) in &pairs {
                scores.push(score_matrix(&[lookup(a)?], &[lookup(b)?])[(0, 0)]);
                same.push(*s);
            }
            let genuine: Vec<f64> = scores.iter().zip(&same).filter(|(_, &s)| s).map(|(&v, _)| v).collect();
            let impostor: Vec<f64> = scores.iter().zip(&same).filter(|(_, &s)| !s).map(|(&v, _)| v).collect();
            let mut report = EvalReport {
                pair_accuracy: Some(pairwise_protocol(&scores, &same, opts.folds)?),
                ..EvalReport::default()
            };
            if !genuine.is_empty() && !impostor.is_empty() {
                report.tar_far = verification_tar(&genuine, &impostor, &opts.far_targets)?;
            }
            if let Some(prefix) = &opts.curves {
                write_roc(prefix, &genuine, &impostor)?;
            }
            report
        }
    };
    if let Some(path) = out {
        write_text(path, &report.to_text())?;
    }
    Ok(report)
}

fn write_roc(prefix: &Path, genuine: &[f64], impostor: &[f64]) -> Result<()> {
    write_csv(
        &curve_path(prefix, "_roc.csv"),
        "threshold,far,tar",
        roc_curve(genuine, impostor)
            .into_iter()
            .map(|(t, f, a)| format!("{t},{f},{a}")),
    )
}

fn identification_report(probes: &ProbeSet, gallery: &Gallery, opts: &EvalOptions) -> Result<EvalReport> {
    let report = evaluate_identification(probes, gallery, &opts.ranks, &opts.fpir_targets, &opts.far_targets)?;
    if let Some(prefix) = &opts.curves {
        let scores = score_probes(probes, gallery);
        let truth = probes.truth(gallery)?;
        let mated: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].is_some()).collect();
        if !mated.is_empty() {
            let sub = DenseMatrix::from_rows(&mated.iter().map(|&i| scores.row(i).to_vec()).collect::<Vec<_>>())?;
            let sub_truth: Vec<Option<usize>> = mated.iter().map(|&i| truth[i]).collect();
            write_csv(
                &curve_path(prefix, "_cmc.csv"),
                "rank,ir",
                cmc_curve(&sub, &sub_truth)?
                    .into_iter()
                    .map(|(r, v)| format!("{r},{v}")),
            )?;
        }
        if truth.iter().any(Option::is_none) {
            write_csv(
                &curve_path(prefix, "_open_set.csv"),
                "threshold,fpir,tpir",
                open_set_curve(&scores, &truth)
                    .into_iter()
                    .map(|(t, f, p)| format!("{t},{f},{p}")),
            )?;
        }
        let (genuine, impostor) = split_scores(&scores, &truth);
        write_roc(prefix, &genuine, &impostor)?;
    }
    Ok(report)
}

/// Writes the intra-class component correlation of the embeddings as
/// comma-separated rows.
pub fn cmd_analyze_corr(data: &Path, out: &Path) -> Result<DenseMatrix> {
    let file = FeatureFile::load(data)?;
    let dataset = Dataset::from_records(file.map_dim, file.embed_dim, &file.records)?;
    let groups = dataset
        .subjects
        .iter()
        .map(|s| {
            DenseMatrix::from_vec(
                s.instances.len(),
                file.embed_dim,
                s.instances.iter().flat_map(|i| i.embedding.iter().copied()).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let corr = intra_class_correlation(&groups)?;
    let mut text = String::new();
    for row in corr.iter_rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(text, "{}", cells.join(","));
    }
    write_text(out, &text)?;
    Ok(corr)
}
