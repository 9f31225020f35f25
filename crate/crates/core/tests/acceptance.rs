//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cfan::aggregation::{
    aggregate_template, pool_average, pool_cfan, pool_cfan_backward, pool_cfan_forward, pool_instance, FeatureInstance,
    HeadMode, PoolingMode, QualityHead, Template,
};
use cfan::dataset::Dataset;
use cfan::evaluation::{closed_set_ir, open_set_tpir, pairwise_protocol, score_matrix, verification_tar};
use cfan::math::{
    batchnorm_backward, batchnorm_forward, linear_backward, linear_forward, BatchNormParams, DenseMatrix, LinearParams,
};
use cfan::synthetic::{generate, intra_class_correlation, oracle_pool, NoiseModelConfig};
use cfan::training::{batch_gradients, batch_loss, mine_hard_triplets, train, triplet_loss, Batch, TrainConfig};
use common::oracles::{cmc_by_sort, pair_folds_by_search, tar_by_sweep, tpir_by_sweep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, || {
        format!("runtime {:.1}s exceeds {:.0}s", t.as_secs_f64(), limit.as_secs_f64())
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(&v);
            v[i] = orig - h;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2(a).max(l2(b));
    if scale == 0.0 {
        0.0
    } else {
        l2(&diff) / scale
    }
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
/// Gradients that vanish analytically are compared in absolute terms.
const ZERO_GRAD_ABS: f64 = 1e-7;

fn dot_loss(y: &DenseMatrix, c: &DenseMatrix) -> f64 {
    y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

struct GradCheck {
    worst: f64,
    name: String,
}

impl GradCheck {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let e = if l2(analytic).max(l2(numeric)) <= ZERO_GRAD_ABS {
            0.0
        } else {
            rel_err(analytic, numeric)
        };
        if e > self.worst {
            self.worst = e;
            self.name = name.to_string();
        }
    }
}

fn toy_batch(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Batch {
    let mut templates = Vec::new();
    let mut labels = Vec::new();
    for s in 0..3 {
        for t in 0..2 {
            let n = rng.random_range(1..=5);
            let instances = (0..n)
                .map(|_| {
                    FeatureInstance::new(
                        (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    )
                })
                .collect();
            templates.push(Template::new(format!("s{s}"), format!("t{t}"), instances));
            labels.push(s);
        }
    }
    Batch { templates, labels }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut check = GradCheck {
        worst: 0.0,
        name: String::new(),
    };
    let seeds = 20;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=8);
        let d = rng.random_range(2..=8);

        // batch norm
        let x = random_matrix(&mut rng, n, m);
        let params = BatchNormParams {
            gamma: (0..m).map(|_| rng.random_range(0.5..2.0)).collect(),
            beta: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            eps: 1e-5,
        };
        let c = random_matrix(&mut rng, n, m);
        let (_, cache) = batchnorm_forward(&x, &params).unwrap();
        let g = batchnorm_backward(&c, &cache).unwrap();
        let fx = |v: &[f64]| {
            dot_loss(
                &batchnorm_forward(&DenseMatrix::from_vec(n, m, v.to_vec()).unwrap(), &params)
                    .unwrap()
                    .0,
                &c,
            )
        };
        check.record(
            "batchnorm dx",
            g.dx.as_slice(),
            &central_diff(fx, x.as_slice(), FD_STEP),
        );
        let fg = |v: &[f64]| {
            let p = BatchNormParams {
                gamma: v.to_vec(),
                ..params.clone()
            };
            dot_loss(&batchnorm_forward(&x, &p).unwrap().0, &c)
        };
        check.record("batchnorm dgamma", &g.dgamma, &central_diff(fg, &params.gamma, FD_STEP));
        let fb = |v: &[f64]| {
            let p = BatchNormParams {
                beta: v.to_vec(),
                ..params.clone()
            };
            dot_loss(&batchnorm_forward(&x, &p).unwrap().0, &c)
        };
        check.record("batchnorm dbeta", &g.dbeta, &central_diff(fb, &params.beta, FD_STEP));

        // linear
        let lin = LinearParams::new(
            random_matrix(&mut rng, m, d),
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let cy = random_matrix(&mut rng, n, d);
        let g = linear_backward(&x, &cy, &lin).unwrap();
        let fx = |v: &[f64]| {
            dot_loss(
                &linear_forward(&DenseMatrix::from_vec(n, m, v.to_vec()).unwrap(), &lin).unwrap(),
                &cy,
            )
        };
        check.record("linear dx", g.dx.as_slice(), &central_diff(fx, x.as_slice(), FD_STEP));
        let fw = |v: &[f64]| {
            let p = LinearParams::new(DenseMatrix::from_vec(m, d, v.to_vec()).unwrap(), lin.bias.clone()).unwrap();
            dot_loss(&linear_forward(&x, &p).unwrap(), &cy)
        };
        check.record(
            "linear dweight",
            g.dweight.as_slice(),
            &central_diff(fw, lin.weight.as_slice(), FD_STEP),
        );
        let fb = |v: &[f64]| {
            let p = LinearParams::new(lin.weight.clone(), v.to_vec()).unwrap();
            dot_loss(&linear_forward(&x, &p).unwrap(), &cy)
        };
        check.record("linear dbias", &g.dbias, &central_diff(fb, &lin.bias, FD_STEP));

        // component-wise softmax pooling
        let f = random_matrix(&mut rng, n, d);
        let q = random_matrix(&mut rng, n, d);
        let dr: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, pc) = pool_cfan_forward(&f, &q).unwrap();
        let (df, dq) = pool_cfan_backward(&dr, &pc).unwrap();
        let pooled = |f: &DenseMatrix, q: &DenseMatrix| -> f64 {
            pool_cfan(f, q)
                .unwrap()
                .vector
                .iter()
                .zip(&dr)
                .map(|(a, b)| a * b)
                .sum()
        };
        let ff = |v: &[f64]| pooled(&DenseMatrix::from_vec(n, d, v.to_vec()).unwrap(), &q);
        check.record("pool dF", df.as_slice(), &central_diff(ff, f.as_slice(), FD_STEP));
        let fq = |v: &[f64]| pooled(&f, &DenseMatrix::from_vec(n, d, v.to_vec()).unwrap());
        check.record("pool dQ", dq.as_slice(), &central_diff(fq, q.as_slice(), FD_STEP));

        // triplet loss, margin large enough that every hinge is active
        let labels = [0, 0, 1, 1, 2, 2];
        let reps = random_matrix(&mut rng, 6, d);
        let triplets = mine_hard_triplets(&reps, &labels);
        let alpha = 1000.0;
        let tl = triplet_loss(&reps, &triplets, alpha);
        let ft = |v: &[f64]| triplet_loss(&DenseMatrix::from_vec(6, d, v.to_vec()).unwrap(), &triplets, alpha).loss;
        check.record(
            "triplet",
            tl.grad.as_slice(),
            &central_diff(ft, reps.as_slice(), FD_STEP),
        );

        // composed graph, both head modes, with and without L2 normalization
        for mode in [HeadMode::ComponentWise, HeadMode::InstanceScalar] {
            for normalize in [false, true] {
                let batch = toy_batch(&mut rng, m, d);
                let mut head = QualityHead::init(m, d, mode, &mut rng);
                for v in head.bn.gamma.iter_mut() {
                    *v = rng.random_range(0.5..2.0);
                }
                for v in head.bn.beta.iter_mut().chain(head.fc.bias.iter_mut()) {
                    *v = rng.random_range(-1.0..1.0);
                }
                let cfg = TrainConfig {
                    alpha: if normalize { 5.0 } else { 1000.0 },
                    normalize_reps: normalize,
                    head_mode: mode,
                    ..TrainConfig::default()
                };
                let bg = batch_gradients(&batch, &head, &cfg).unwrap();
                let tr = bg.triplets.clone();
                let tag = format!("{mode:?} normalize={normalize}");
                let loss_with = |edit: &dyn Fn(&mut QualityHead)| {
                    let mut h = head.clone();
                    edit(&mut h);
                    batch_loss(&batch, &h, &tr, &cfg).unwrap()
                };
                let ng = central_diff(|v| loss_with(&|h| h.bn.gamma = v.to_vec()), &head.bn.gamma, FD_STEP);
                let nb = central_diff(|v| loss_with(&|h| h.bn.beta = v.to_vec()), &head.bn.beta, FD_STEP);
                let nw = central_diff(
                    |v| {
                        loss_with(&|h| {
                            h.fc.weight =
                                DenseMatrix::from_vec(h.fc.weight.rows(), h.fc.weight.cols(), v.to_vec()).unwrap()
                        })
                    },
                    head.fc.weight.as_slice(),
                    FD_STEP,
                );
                let nbias = central_diff(|v| loss_with(&|h| h.fc.bias = v.to_vec()), &head.fc.bias, FD_STEP);
                check.record(&format!("graph dgamma {tag}"), &bg.grads.dgamma, &ng);
                check.record(&format!("graph dbeta {tag}"), &bg.grads.dbeta, &nb);
                check.record(&format!("graph dweight {tag}"), bg.grads.dweight.as_slice(), &nw);
                check.record(&format!("graph dbias {tag}"), &bg.grads.dbias, &nbias);
                let analytic: Vec<f64> = [
                    &bg.grads.dgamma[..],
                    &bg.grads.dbeta,
                    bg.grads.dweight.as_slice(),
                    &bg.grads.dbias,
                ]
                .concat();
                let numeric: Vec<f64> = [&ng[..], &nb, &nw, &nbias].concat();
                check.record(&format!("graph all {tag}"), &analytic, &numeric);
            }
        }
    }
    ensure(check.worst <= GRAD_TOL, || {
        format!("worst relative error {:.2e} in {}", check.worst, check.name)
    })?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "{seeds} seeds, worst relative error {:.2e} ({})",
        check.worst, check.name
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=8);
        let f = random_matrix(&mut rng, n, d);
        let c = rng.random_range(-5.0..5.0);
        let constant = DenseMatrix::filled(n, d, c);
        worst = worst.max(max_abs_diff(
            &pool_cfan(&f, &constant).unwrap().vector,
            &pool_average(&f).vector,
        ));

        let per_instance: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let rows: Vec<Vec<f64>> = per_instance.iter().map(|&s| vec![s; d]).collect();
        let q = DenseMatrix::from_rows(&rows).unwrap();
        worst = worst.max(max_abs_diff(
            &pool_cfan(&f, &q).unwrap().vector,
            &pool_instance(&f, &per_instance).unwrap().vector,
        ));

        let one = random_matrix(&mut rng, 1, d);
        let q1 = random_matrix(&mut rng, 1, d);
        let sig = DenseMatrix::from_vec(1, d, (0..d).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
        for v in [
            pool_average(&one).vector,
            pool_instance(&one, &[q1[(0, 0)]]).unwrap().vector,
            pool_cfan(&one, &q1).unwrap().vector,
            oracle_pool(&one, &sig).unwrap(),
        ] {
            worst = worst.max(max_abs_diff(&v, one.row(0)));
        }
        let m = rng.random_range(1..=8);
        let t = Template::new(
            "s",
            "t",
            vec![FeatureInstance::new(
                (0..m).map(|_| rng.random()).collect(),
                one.row(0).to_vec(),
            )],
        );
        for mode in [HeadMode::ComponentWise, HeadMode::InstanceScalar] {
            let head = QualityHead::init(m, d, mode, &mut rng);
            let r = aggregate_template(&t, Some(&head), head.pooling_mode(), d).unwrap();
            worst = worst.max(max_abs_diff(&r.vector, one.row(0)));
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.2e}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("300 trials, max deviation {worst:.2e}"))
}

fn sq_err(v: &[f64], mean: &[f64]) -> f64 {
    v.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = NoiseModelConfig {
        n_subjects: 10_000,
        instances_per_subject: 5,
        seed: 3,
        ..NoiseModelConfig::default()
    };
    let syn = generate(&cfg).map_err(|e| e.to_string())?;
    let (mut avg, mut orc) = (0.0, 0.0);
    for s in &syn.subjects {
        let f = DenseMatrix::from_rows(&s.instances.iter().map(|i| i.embedding.clone()).collect::<Vec<_>>()).unwrap();
        let sig = DenseMatrix::from_rows(&s.sigmas).unwrap();
        avg += sq_err(&pool_average(&f).vector, &s.mean);
        orc += sq_err(&oracle_pool(&f, &sig).unwrap(), &s.mean);
    }
    let k = syn.subjects.len() as f64;
    let (avg, orc) = (avg / k, orc / k);
    let gap = (avg - orc) / avg;
    let detail = format!(
        "10000 templates, MSE average {avg:.4} oracle {orc:.4}, paired gap {:.1}%",
        100.0 * gap
    );
    ensure(orc < avg && gap > 0.05, || detail.clone())?;
    within(Duration::from_secs(30), start)?;
    Ok(detail)
}

/// Held-out results of the learning experiment shared by criteria 4 and 5.
#[derive(Debug, Clone)]
struct Experiment {
    ir: [f64; 4],
    mse: [f64; 4],
    elapsed: Duration,
}

const METHODS: [&str; 4] = ["average", "instance", "cfan", "oracle"];
const EXPERIMENT_DATA_SEED: u64 = 7;
const EXPERIMENT_TRAIN_SEED: u64 = 11;
const EXPERIMENT_MEAN_SCALE: f64 = 0.4;
const N_TRAIN_SUBJECTS: usize = 200;
const N_TEST_SUBJECTS: usize = 1000;
const TEMPLATE_SIZE: usize = 5;

fn run_experiment() -> Result<Experiment, String> {
    let start = Instant::now();
    let cfg = NoiseModelConfig {
        n_subjects: N_TRAIN_SUBJECTS + N_TEST_SUBJECTS,
        instances_per_subject: 12,
        mean_scale: EXPERIMENT_MEAN_SCALE,
        seed: EXPERIMENT_DATA_SEED,
        ..NoiseModelConfig::default()
    };
    let syn = generate(&cfg).map_err(|e| e.to_string())?;
    let full = syn.to_dataset();
    let train_set = Dataset::new(full.map_dim, full.embed_dim, full.subjects[..N_TRAIN_SUBJECTS].to_vec())
        .map_err(|e| e.to_string())?;
    let mut heads = Vec::new();
    for mode in [HeadMode::InstanceScalar, HeadMode::ComponentWise] {
        let tc = TrainConfig {
            steps: 2000,
            seed: EXPERIMENT_TRAIN_SEED,
            head_mode: mode,
            ..TrainConfig::default()
        };
        heads.push(train(&train_set, &tc, None).map_err(|e| e.to_string())?.0);
    }
    let d = cfg.dim;
    let test = &syn.subjects[N_TRAIN_SUBJECTS..];
    let mut ir = [0.0; 4];
    let mut mse = [0.0; 4];
    for (k, name) in METHODS.iter().enumerate() {
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        let mut err = 0.0;
        for s in test {
            for (lo, out) in [(0, &mut gallery), (TEMPLATE_SIZE, &mut probes)] {
                let hi = lo + TEMPLATE_SIZE;
                let t = Template::new(s.id.clone(), "t", s.instances[lo..hi].to_vec());
                let v = match *name {
                    "average" => aggregate_template(&t, None, PoolingMode::Average, d),
                    "instance" => aggregate_template(&t, Some(&heads[0]), PoolingMode::Instance, d),
                    "cfan" => aggregate_template(&t, Some(&heads[1]), PoolingMode::Cfan, d),
                    _ => {
                        let sig = DenseMatrix::from_rows(&s.sigmas[lo..hi]).unwrap();
                        Ok(cfan::AggregatedRep {
                            vector: oracle_pool(&t.embeddings(d).unwrap(), &sig).unwrap(),
                            mode: PoolingMode::Average,
                            n_instances: TEMPLATE_SIZE,
                        })
                    }
                }
                .map_err(|e| e.to_string())?
                .vector;
                err += sq_err(&v, &s.mean);
                out.push(v);
            }
        }
        let scores = score_matrix(&probes, &gallery);
        let truth: Vec<Option<usize>> = (0..test.len()).map(Some).collect();
        ir[k] = closed_set_ir(&scores, &truth, &[1]).map_err(|e| e.to_string())?[0].1;
        mse[k] = err / (2 * test.len()) as f64;
    }
    Ok(Experiment {
        ir,
        mse,
        elapsed: start.elapsed(),
    })
}

fn experiment() -> Result<&'static Experiment, String> {
    static CELL: OnceLock<Result<Experiment, String>> = OnceLock::new();
    CELL.get_or_init(run_experiment).as_ref().map_err(Clone::clone)
}

fn summary(e: &Experiment) -> String {
    METHODS
        .iter()
        .enumerate()
        .map(|(k, m)| format!("{m} IR@1 {:.1}% MSE {:.4}", 100.0 * e.ir[k], e.mse[k]))
        .collect::<Vec<_>>()
        .join("; ")
}

fn criterion_4() -> Outcome {
    let e = experiment()?;
    let [avg_ir, _, cfan_ir, _] = e.ir;
    let [avg_mse, _, cfan_mse, oracle_mse] = e.mse;
    let detail = format!(
        "{} (data seed {EXPERIMENT_DATA_SEED}, train seed {EXPERIMENT_TRAIN_SEED})",
        summary(e)
    );
    ensure(cfan_ir >= avg_ir + 0.02, || {
        format!("C-FAN IR not 2 points above average: {detail}")
    })?;
    ensure(oracle_mse < cfan_mse && cfan_mse < avg_mse, || {
        format!("C-FAN MSE out of order: {detail}")
    })?;
    ensure(e.elapsed <= Duration::from_secs(300), || {
        format!("runtime {:.1}s", e.elapsed.as_secs_f64())
    })?;
    Ok(detail)
}

fn criterion_5() -> Outcome {
    let e = experiment()?;
    let detail = format!("C-FAN IR@1 {:.1}% vs instance {:.1}%", 100.0 * e.ir[2], 100.0 * e.ir[1]);
    ensure(e.ir[2] >= e.ir[1] - 0.005, || detail.clone())?;
    Ok(detail)
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if tied {
                rng.random_range(-4i32..=4) as f64 / 4.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = Vec::new();
    let targets = [0.0, 0.001, 0.01, 0.1, 0.2, 0.5, 1.0];
    for case in 0..100 {
        let tied = case % 2 == 0;
        let p = rng.random_range(2..=30);
        let g = rng.random_range(2..=30);
        let rows: Vec<Vec<f64>> = (0..p).map(|_| random_scores(&mut rng, g, tied)).collect();
        let scores = DenseMatrix::from_rows(&rows).unwrap();

        let truth: Vec<usize> = (0..p).map(|_| rng.random_range(0..g)).collect();
        let ranks: Vec<usize> = (1..=g).collect();
        let got: Vec<f64> = closed_set_ir(&scores, &truth.iter().map(|&t| Some(t)).collect::<Vec<_>>(), &ranks)
            .unwrap()
            .into_iter()
            .map(|r| r.1)
            .collect();
        if got != cmc_by_sort(&rows, &truth) {
            mismatches.push(format!("case {case} closed-set"));
        }

        let mut open: Vec<Option<usize>> = (0..p)
            .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..g)))
            .collect();
        open[0] = Some(rng.random_range(0..g));
        open[1] = None;
        for (pt, &t) in open_set_tpir(&scores, &open, &targets).unwrap().iter().zip(&targets) {
            if (pt.threshold, pt.tpir, pt.achieved_fpir) != tpir_by_sweep(&rows, &open, t) {
                mismatches.push(format!("case {case} open-set target {t}"));
            }
        }

        let (n_gen, n_imp) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let genuine = random_scores(&mut rng, n_gen, tied);
        let impostor = random_scores(&mut rng, n_imp, tied);
        for (pt, &t) in verification_tar(&genuine, &impostor, &targets)
            .unwrap()
            .iter()
            .zip(&targets)
        {
            if (pt.threshold, pt.tar, pt.achieved_far) != tar_by_sweep(&genuine, &impostor, t) {
                mismatches.push(format!("case {case} verification target {t}"));
            }
        }

        let n_pairs = rng.random_range(10..=60);
        let pair_scores = random_scores(&mut rng, n_pairs, tied);
        let same: Vec<bool> = (0..n_pairs).map(|_| rng.random()).collect();
        if pairwise_protocol(&pair_scores, &same, 10).unwrap().fold_accuracies
            != pair_folds_by_search(&pair_scores, &same, 10)
        {
            mismatches.push(format!("case {case} pair protocol"));
        }
    }
    ensure(mismatches.is_empty(), || {
        format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
    })?;
    within(Duration::from_secs(10), start)?;
    Ok("100 random instances, closed-set, open-set, verification and pair protocol all identical".into())
}

fn criterion_7() -> Outcome {
    let cfg = NoiseModelConfig {
        n_subjects: 1000,
        instances_per_subject: 10,
        seed: 7,
        ..NoiseModelConfig::default()
    };
    let syn = generate(&cfg).map_err(|e| e.to_string())?;
    let mut groups = syn.embedding_groups();
    let corr = intra_class_correlation(&groups).map_err(|e| e.to_string())?;
    let d = corr.rows();
    let mut sum = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                sum += corr[(a, b)];
            }
        }
    }
    let mean_off = sum / (d * (d - 1)) as f64;
    for g in groups.iter_mut() {
        for i in 0..g.rows() {
            g[(i, 1)] = g[(i, 0)];
        }
    }
    let dup = intra_class_correlation(&groups).map_err(|e| e.to_string())?[(0, 1)];
    let detail = format!("10000 instances, mean off-diagonal |corr| {mean_off:.4}, duplicated component {dup}");
    ensure(mean_off < 0.05 && (dup - 1.0).abs() <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, d) = (6, 5);
    let empty = Template::new("x", "empty", Vec::new());
    let heads = [
        (PoolingMode::Average, None),
        (
            PoolingMode::Instance,
            Some(QualityHead::init(m, d, HeadMode::InstanceScalar, &mut rng)),
        ),
        (
            PoolingMode::Cfan,
            Some(QualityHead::init(m, d, HeadMode::ComponentWise, &mut rng)),
        ),
    ];
    for (mode, head) in &heads {
        let r = aggregate_template(&empty, head.as_ref(), *mode, d).map_err(|e| e.to_string())?;
        ensure(r.vector == vec![0.0; d] && r.n_instances == 0, || {
            format!("{mode} empty template is not zero")
        })?;
    }

    let gallery: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let row = score_matrix(&[vec![0.0; d]], &gallery);
    ensure(row.as_slice().iter().all(|&s| s == -1.0), || {
        "empty probe scores differ from -1".into()
    })?;

    // an enrolled empty template never wins rank 1 for a real probe
    let mut with_empty = gallery.clone();
    with_empty[17] = vec![0.0; d];
    let probes: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let s = score_matrix(&probes, &with_empty);
    let wins = s
        .iter_rows()
        .filter(|r| {
            let best = r.iter().cloned().fold(f64::MIN, f64::max);
            r.iter().position(|&v| v == best) == Some(17)
        })
        .count();
    ensure(wins == 0, || {
        format!("empty gallery template ranked first {wins} times")
    })?;

    // every probe empty: mated and unmated alike score -1 everywhere
    let empty_probes = vec![vec![0.0; d]; 40];
    let s = score_matrix(&empty_probes, &gallery[..20]);
    let truth: Vec<Option<usize>> = (0..40).map(|i| (i < 20).then_some(i)).collect();
    let pts = open_set_tpir(&s, &truth, &[0.01, 0.10]).map_err(|e| e.to_string())?;
    ensure(pts.iter().all(|p| p.tpir == 0.0), || format!("TPIR not zero: {pts:?}"))?;
    ensure(pts[1].tie_limited, || "unreachable 10% FPIR not flagged".into())?;
    Ok(format!(
        "zero vector in all modes, row of -1, never rank 1 over 2000 probes, TPIR {} / {} at 1% / 10% FPIR (achieved FPIR {})",
        pts[0].tpir, pts[1].tpir, pts[1].achieved_fpir
    ))
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_cfan");
    std::fs::write(
        dir.join("run.cfg"),
        "n_subjects = 40\ninstances_per_subject = 12\ndim = 16\nmap_dim = 32\nquality_latent_dim = 16\n\
         mean_scale = 0.4\nsteps = 200\nnoise_augment = 0.3\n",
    )
    .map_err(|e| e.to_string())?;
    for args in [
        &["--config", "run.cfg", "--seed", "5", "gen-data", "--out", "data.bin"][..],
        &[
            "--config",
            "run.cfg",
            "--seed",
            "9",
            "train",
            "--data",
            "data.bin",
            "--out",
            "model.bin",
        ],
        &[
            "aggregate",
            "--data",
            "data.bin",
            "--model",
            "model.bin",
            "--mode",
            "cfan",
            "--out",
            "reps.bin",
        ],
        &[
            "evaluate",
            "--reps",
            "reps.bin",
            "--unmated-every",
            "4",
            "--out",
            "report.txt",
        ],
    ] {
        let o = Command::new(bin)
            .current_dir(dir)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "{args:?} failed: {}",
                String::from_utf8_lossy(&o.stderr).trim()
            ));
        }
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    for f in ["data.bin", "model.bin", "reps.bin", "report.txt"] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok("gen-data, train, aggregate, evaluate twice: data, model, reps and report byte-identical".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("gradient suite", criterion_1),
        ("degeneracy equalities", criterion_2),
        ("oracle dominance", criterion_3),
        ("learning beats average pooling", criterion_4),
        ("component-wise vs instance ordering", criterion_5),
        ("metric oracles", criterion_6),
        ("intra-class correlation", criterion_7),
        ("empty templates", criterion_8),
        ("pipeline determinism", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS [{secs:.1}s] {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL [{secs:.1}s] {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
