//! Experiment drivers composed from the core library: single runs, the
//! lambda sweep, jump-schedule study, label-noise study and the analysis
//! commands. Independent runs execute on worker threads.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use textalign_core::analysis::{self, linear_cka, FeatureMatrix, FfdReport, ProbeConfig, FFD_EPS_SCALE};
use textalign_core::data::Dataset;
use textalign_core::linalg::Matrix;
use textalign_core::schedule::ScheduleSpec;
use textalign_core::text_targets::{pseudo_encode, whiten, RawEmbeddingSet};
use textalign_core::trainer::{embed_dataset, train, MetricRecord, Model, TrainConfig, TrainHooks, TrainOutcome};
use textalign_core::Error;

use crate::cache::{save_cache, EmbeddingCache};
use crate::config::Prepared;
use crate::error::{LabError, Result};
use crate::metrics::RunHooks;

/// Worker threads for independent runs: `TT_THREADS` if set, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("TT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every job on up to `threads` workers; results keep job
/// order.
pub fn parallel_map<J, R, F>(jobs: &[J], threads: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains one configuration on prepared data.
pub fn run(config: &TrainConfig, data: &Prepared, hooks: &mut dyn TrainHooks) -> Result<TrainOutcome> {
    Ok(train(config, &data.train, data.eval.as_ref(), data.targets.as_ref(), hooks)?)
}

fn final_eval(log: &[MetricRecord]) -> Option<f64> {
    log.last().and_then(|r| r.eval_accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub adaptive: bool,
    pub seed: u64,
    /// Final eval accuracy; `None` if the run diverged.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// One run per `(lambda, adaptive, seed)`. Divergence is recorded in the
/// row, other errors abort.
pub fn sweep_lambda(
    base: &TrainConfig,
    data: &Prepared,
    lambdas: &[f64],
    adaptive: &[bool],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for &l in lambdas {
        for &a in adaptive {
            for &s in seeds {
                jobs.push((l, a, s));
            }
        }
    }
    let results = parallel_map(&jobs, threads, |&(lambda, adaptive, seed)| {
        let cfg = TrainConfig {
            schedule: ScheduleSpec {
                peak: lambda,
                ..base.schedule.clone()
            },
            adaptive,
            seed,
            ..base.clone()
        };
        let outcome = run(&cfg, data, &mut RunHooks::new());
        (lambda, adaptive, seed, outcome)
    });
    results
        .into_iter()
        .map(|(lambda, adaptive, seed, outcome)| {
            let (accuracy, error) = match outcome {
                Ok(o) => (final_eval(&o.log), None),
                Err(LabError::Core(e @ (Error::Diverged { .. } | Error::NonFiniteLayer { .. } | Error::NonFinite { .. }))) => {
                    (None, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                lambda,
                adaptive,
                seed,
                accuracy,
                error,
            })
        })
        .collect()
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "nan".to_string(), |v| format!("{v}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,adaptive,seed,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.lambda, r.adaptive, r.seed, fmt_acc(r.accuracy)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub rho: f64,
    pub aligned: bool,
    pub seed: u64,
    pub accuracy: Option<f64>,
}

/// Paired runs with and without the alignment term at each noise rate.
pub fn noise_study(base: &TrainConfig, data: &Prepared, rhos: &[f64], seeds: &[u64], threads: usize) -> Result<Vec<NoiseRow>> {
    let mut jobs = Vec::new();
    for &rho in rhos {
        for &tt in &[true, false] {
            for &seed in seeds {
                jobs.push((rho, tt, seed));
            }
        }
    }
    let results = parallel_map(&jobs, threads, |&(rho, tt, seed)| {
        let cfg = TrainConfig {
            noise_rho: rho,
            baseline: !tt,
            seed,
            ..base.clone()
        };
        run(&cfg, data, &mut RunHooks::new()).map(|o| NoiseRow {
            rho,
            aligned: tt,
            seed,
            accuracy: final_eval(&o.log),
        })
    });
    results.into_iter().collect()
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("rho,method,seed,accuracy\n");
    for r in rows {
        let method = if r.aligned { "aligned" } else { "baseline" };
        out.push_str(&format!("{},{},{},{}\n", r.rho, method, r.seed, fmt_acc(r.accuracy)));
    }
    out
}

/// Labelled embeddings of a dataset under a model.
pub fn features(model: &Model<f32>, data: &Dataset) -> Result<FeatureMatrix> {
    let z = embed_dataset(model, data)?;
    Ok(FeatureMatrix::from_tensor(&z, Some(data.labels()))?)
}

struct SnapshotHooks<'a> {
    inner: RunHooks,
    probe: &'a Dataset,
    snapshots: Vec<FeatureMatrix>,
}

impl TrainHooks for SnapshotHooks<'_> {
    fn elapsed_seconds(&mut self) -> f64 {
        self.inner.elapsed_seconds()
    }

    fn on_epoch(&mut self, record: &MetricRecord, model: &Model<f32>) -> textalign_core::Result<()> {
        let f = features(model, self.probe).map_err(|e| Error::Config(e.to_string()))?;
        self.snapshots.push(f);
        self.inner.on_epoch(record, model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRun {
    pub jump_epoch: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// FFD of each epoch's probe features to the final epoch's.
    pub ffd_to_final: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStudy {
    /// Which images the FFD features come from.
    pub probe_set: String,
    pub runs: Vec<JumpRun>,
}

/// Jump schedules at each `t*`, keeping `base.schedule`'s peak and ramp.
/// Features for FFD come from `data.eval` (a fixed held-out probe set).
pub fn jump_study(base: &TrainConfig, data: &Prepared, jump_epochs: &[usize], seeds: &[u64], threads: usize) -> Result<JumpStudy> {
    let probe = data
        .eval
        .as_ref()
        .ok_or_else(|| LabError::Invalid("the jump study needs an eval split as probe set".into()))?;
    let mut jobs = Vec::new();
    for &t in jump_epochs {
        for &s in seeds {
            jobs.push((t, s));
        }
    }
    let results = parallel_map(&jobs, threads, |&(t, seed)| -> Result<JumpRun> {
        let cfg = TrainConfig {
            schedule: ScheduleSpec::jump(base.schedule.peak, base.epochs, t, base.schedule.ramp),
            seed,
            ..base.clone()
        };
        let mut hooks = SnapshotHooks {
            inner: RunHooks::new(),
            probe,
            snapshots: Vec::new(),
        };
        let outcome = run(&cfg, data, &mut hooks)?;
        let last = hooks.snapshots.last().expect("at least one epoch");
        let ffd_to_final = hooks
            .snapshots
            .iter()
            .map(|f| Ok(analysis::ffd(f, last, FFD_EPS_SCALE)?.mean))
            .collect::<Result<_>>()?;
        Ok(JumpRun {
            jump_epoch: t,
            seed,
            accuracy: final_eval(&outcome.log),
            ffd_to_final,
        })
    });
    Ok(JumpStudy {
        probe_set: "eval".into(),
        runs: results.into_iter().collect::<Result<_>>()?,
    })
}

pub fn jump_accuracy_csv(study: &JumpStudy) -> String {
    let mut out = String::from("jump_epoch,seed,accuracy\n");
    for r in &study.runs {
        out.push_str(&format!("{},{},{}\n", r.jump_epoch, r.seed, fmt_acc(r.accuracy)));
    }
    out
}

pub fn jump_ffd_csv(study: &JumpStudy) -> String {
    let mut out = String::from("jump_epoch,seed,epoch,ffd\n");
    for r in &study.runs {
        for (e, v) in r.ffd_to_final.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", r.jump_epoch, r.seed, e, v));
        }
    }
    out
}

/// Pairwise linear CKA between the embeddings of several models.
pub fn cka_matrix(models: &[Model<f32>], data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let feats: Vec<Matrix> = models
        .iter()
        .map(|m| Ok(features(m, data)?.features))
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; feats.len()]; feats.len()];
    for i in 0..feats.len() {
        for j in i..feats.len() {
            let v = linear_cka(&feats[i], &feats[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

pub fn ffd_between(a: &Model<f32>, b: &Model<f32>, data: &Dataset) -> Result<FfdReport> {
    Ok(analysis::ffd(&features(a, data)?, &features(b, data)?, FFD_EPS_SCALE)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub caption: String,
    pub probabilities: Vec<f64>,
    pub top_class: usize,
    pub top_name: Option<String>,
}

/// Pseudo-encodes a caption, whitens it with `stats` if given, and maps it
/// back through the text head to a class distribution.
pub fn invert_caption(
    model: &Model<f32>,
    caption: &str,
    text_seed: u64,
    stats: Option<&textalign_core::text_targets::WhiteningStats>,
    class_names: Option<&[String]>,
) -> Result<Inversion> {
    let raw = pseudo_encode(caption, model.d_txt(), text_seed)?;
    let e = match stats {
        Some(s) => whiten(&raw, s)?,
        None => raw,
    };
    let heads = model.cast::<f64>().heads;
    let probabilities = analysis::invert_text_head(&e, &heads)?;
    let top_class = textalign_core::trainer::argmax(&probabilities);
    Ok(Inversion {
        caption: caption.to_string(),
        top_class,
        top_name: class_names.and_then(|n| n.get(top_class).cloned()),
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Linear probe on cached embeddings: fit on `train` ids, score on `test`
/// ids, labels from the datasets.
pub fn probe_embeddings(rows: &RawEmbeddingSet, train_set: &Dataset, test_set: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for s in train_set.samples.iter().chain(&test_set.samples) {
        let row = rows
            .get(&s.id)
            .ok_or_else(|| Error::MissingTarget(s.id.clone()))?;
        x.push(row.to_vec());
        labels.push(s.label);
    }
    let x = Matrix::from_rows(&x)?;
    let n_train = train_set.len();
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..labels.len()).collect();
    let accuracy = analysis::linear_probe(&x, &labels, &train_idx, &test_idx, cfg)?;
    Ok(ProbeResult {
        accuracy,
        chance: 1.0 / train_set.num_classes().max(1) as f64,
        train_samples: n_train,
        test_samples: test_idx.len(),
    })
}

/// Writes the embeddings `z` of every sample as a raw cache keyed by id.
pub fn export_embeddings(model: &Model<f32>, data: &Dataset, path: impl AsRef<Path>) -> Result<RawEmbeddingSet> {
    let z = embed_dataset(model, data)?;
    let mut set = RawEmbeddingSet::new(model.config.width);
    for (s, row) in data.samples.iter().zip(z.data().chunks_exact(model.config.width)) {
        set.insert(s.id.clone(), row.iter().map(|&v| v as f64).collect())?;
    }
    let cache = EmbeddingCache::Raw(set);
    save_cache(&cache, path)?;
    match cache {
        EmbeddingCache::Raw(set) => Ok(set),
        EmbeddingCache::Whitened(_) => unreachable!(),
    }
}
