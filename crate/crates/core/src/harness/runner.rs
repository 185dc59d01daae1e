//! Episode orchestration: dataset preparation, the worker pool and the
//! ablation grid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use super::config::{AblationAxes, RunConfig};
use super::report::{
    accuracy_digest, CheckpointSummary, CsvRow, DatasetReport, EpisodeFailure, RunReport, Summary,
    REPORT_FORMAT_VERSION,
};
use crate::adaptation::{evaluate_episode, AdaptConfig, EpisodeOutcome};
use crate::adapters::{attach, AdapterConfig, AdapterKind, Decomposition};
use crate::backbone::{import_weights, pretrain_mdl, BackboneWeights, PretrainLog};
use crate::episodes::{benchmark_domains, data_root, gen_synthetic_domains, load_idx_dir, sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Largest tolerated fraction of failed episodes.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Loaded datasets and backbone weights shared by every run of a config.
#[derive(Clone)]
pub struct Prepared {
    pub datasets: Vec<Dataset>,
    pub weights: Arc<BackboneWeights>,
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generates the synthetic suite and loads the configured IDX datasets,
/// conformed to the backbone's input shape.
pub fn load_datasets(config: &RunConfig) -> Result<Vec<Dataset>> {
    let spec = config.backbone.backbone_spec()?;
    let suite = &config.synthetic;
    let specs = benchmark_domains(suite.seen, suite.unseen, suite.seed);
    let mut datasets = gen_synthetic_domains(&specs, suite.seed)?;
    for src in &config.idx {
        let root = match &src.root {
            Some(r) => r.clone(),
            None => data_root().ok_or_else(|| {
                Error::config(format!("dataset {}: no root given and TSA_DATA_DIR is unset", src.name))
            })?,
        };
        let mut ds = load_idx_dir(root, &src.name, &src.file, config.split)?
            .conform(spec.in_channels, spec.input_resolution)?;
        ds.standardize();
        ds.domain_id = datasets.len();
        datasets.push(ds);
    }
    for name in &config.datasets {
        if !datasets.iter().any(|d| &d.name == name) {
            return Err(Error::config(format!("dataset {name:?} is not loaded")));
        }
    }
    Ok(datasets)
}

/// Pretrains the configured backbone on the seen domains among `datasets`.
pub fn pretrain_backbone(config: &RunConfig, datasets: &[Dataset]) -> Result<(BackboneWeights, PretrainLog)> {
    let spec = config.backbone.backbone_spec()?;
    let seen: Vec<Dataset> = datasets.iter().filter(|d| d.seen).cloned().collect();
    if seen.is_empty() {
        return Err(Error::config("no seen domains to pretrain on"));
    }
    log::info!("pretraining {} on {} seen domains", config.backbone.spec, seen.len());
    let (w, log) = pretrain_mdl(&seen, &spec, &config.pretrain)?;
    Ok((w.meta_test_snapshot(), log))
}

/// Loads (or generates) the configured datasets and backbone.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let spec = config.backbone.backbone_spec()?;
    let datasets = load_datasets(config)?;
    let weights = match &config.backbone.weights {
        Some(path) => {
            let w = import_weights(path)?;
            if w.spec != spec {
                return Err(Error::config(format!(
                    "weights in {} were built for a different backbone",
                    path.display()
                )));
            }
            w
        }
        None => pretrain_backbone(config, &datasets)?.0,
    };
    Ok(Prepared {
        datasets,
        weights: Arc::new(weights),
    })
}

/// Runs `job(i)` for `i in 0..n` on `workers` threads; results keep index
/// order regardless of scheduling.
pub fn run_pool<T: Send>(n: usize, workers: usize, job: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

/// Per-episode seed, independent of worker count and order.
pub fn episode_seed(run_seed: u64, dataset: &str, episode: usize) -> u64 {
    derive_seed(run_seed, &[name_key(dataset), episode as u64])
}

fn adapt_config_for(config: &RunConfig, dataset: &Dataset, seed: u64) -> AdaptConfig {
    let mut a = config.adapt.clone();
    a.head = config.head;
    a.seed = seed;
    if config.lr_preset {
        a = a.for_domain(dataset.seen);
    }
    a
}

/// Evaluates one episode of `dataset` under `config`.
pub fn run_episode(config: &RunConfig, prepared: &Prepared, dataset: &Dataset, episode: usize) -> Result<EpisodeOutcome> {
    let seed = episode_seed(config.seed, &dataset.name, episode);
    let mut rng = rng_for(seed, &[0]);
    let ep = sample_episode(dataset, config.split, config.protocol, &mut rng, episode as u64)?;
    let model = attach(prepared.weights.clone(), &config.adapter, seed)?.with_head(config.head);
    evaluate_episode(model, &ep, &adapt_config_for(config, dataset, seed))
}

fn summarize(config: &RunConfig, dataset: &Dataset, outcomes: Vec<Result<EpisodeOutcome>>) -> Result<DatasetReport> {
    let total = outcomes.len();
    let mut accuracies = Vec::new();
    let mut failures = Vec::new();
    let mut checkpoints: Vec<Vec<f64>> = vec![Vec::new(); config.adapt.checkpoints.len()];
    for (episode, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                accuracies.push(o.accuracy);
                for (slot, (_, acc)) in checkpoints.iter_mut().zip(&o.checkpoints) {
                    slot.push(*acc);
                }
            }
            Err(e) => {
                log::warn!("{} episode {episode} failed: {e}", dataset.name);
                failures.push(EpisodeFailure {
                    episode,
                    error: e.to_string(),
                })
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total,
            first: failures[0].error.clone(),
        });
    }
    let s = Summary::of(&accuracies);
    Ok(DatasetReport {
        name: dataset.name.clone(),
        seen: dataset.seen,
        n_episodes: accuracies.len(),
        mean: s.mean,
        ci95: s.ci95,
        digest: accuracy_digest(&accuracies),
        checkpoints: config
            .adapt
            .checkpoints
            .iter()
            .zip(checkpoints)
            .map(|(&iterations, accs)| {
                let s = Summary::of(&accs);
                CheckpointSummary {
                    iterations,
                    mean: s.mean,
                    ci95: s.ci95,
                    accuracies: accs,
                }
            })
            .collect(),
        accuracies,
        failures,
    })
}

fn selected<'a>(config: &RunConfig, prepared: &'a Prepared) -> Vec<&'a Dataset> {
    prepared
        .datasets
        .iter()
        .filter(|d| config.datasets.is_empty() || config.datasets.contains(&d.name))
        .collect()
}

/// Runs every configured dataset on already prepared data.
pub fn run_prepared(config: &RunConfig, prepared: &Prepared) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let params = config.adapter.count_parameters(&prepared.weights.spec)?;
    let datasets = selected(config, prepared);
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..config.episodes).map(move |e| (d, e)))
        .collect();
    let outcomes = run_pool(jobs.len(), config.workers, &|i| {
        let (d, e) = jobs[i];
        run_episode(config, prepared, datasets[d], e)
    });
    let mut per_dataset: Vec<Vec<Result<EpisodeOutcome>>> = datasets.iter().map(|_| Vec::new()).collect();
    for ((d, _), o) in jobs.iter().zip(outcomes) {
        per_dataset[*d].push(o);
    }
    let reports = datasets
        .iter()
        .zip(per_dataset)
        .map(|(ds, outs)| summarize(config, ds, outs))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        format_version: REPORT_FORMAT_VERSION,
        method: config.method_label(),
        config: config.clone(),
        params: params.into(),
        datasets: reports,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Prepares data, runs the experiment and writes `config.out` and
/// `config.csv` when set.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    let prepared = prepare(config)?;
    let report = run_prepared(config, &prepared)?;
    if let Some(out) = &config.out {
        report.save(out)?;
    }
    if let Some(csv) = &config.csv {
        super::report::append_csv(csv, &report.csv_rows())?;
    }
    Ok(report)
}

fn axis_or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// The adapter configurations spanned by the structural axes, with
/// unusable combinations dropped (and logged).
pub fn grid_configs(base: &RunConfig, axes: &AblationAxes) -> Result<Vec<AdapterConfig>> {
    let base_kind = base.adapter.kind.clone().ok_or_else(|| {
        Error::config("ablation needs an adapter configuration to vary (base adapter is none/PA)")
    })?;
    let connections = axis_or(&axes.connection, base_kind.connection);
    let forms = axis_or(&axes.form, base_kind.form);
    let attachments = if axes.attachment.is_empty() {
        vec![base.adapter.attachment.clone()]
    } else {
        axes.attachments()?
    };
    let divisors: Vec<Option<Decomposition>> = if axes.divisor.is_empty() {
        vec![base_kind.decomposition.clone()]
    } else {
        axes.divisor
            .iter()
            .map(|&n| {
                (n > 0).then(|| Decomposition {
                    divisor: n,
                    stages: base_kind.decomposition.as_ref().map(|d| d.stages.clone()).unwrap_or_default(),
                })
            })
            .collect()
    };
    let spec = base.backbone.backbone_spec()?;
    let mut out = Vec::new();
    for &connection in &connections {
        for &form in &forms {
            for attachment in &attachments {
                for decomposition in &divisors {
                    let cfg = AdapterConfig {
                        kind: Some(AdapterKind {
                            connection,
                            form,
                            decomposition: decomposition.clone(),
                        }),
                        attachment: attachment.clone(),
                        ..base.adapter.clone()
                    };
                    let code = cfg.code();
                    match code.parse::<AdapterConfig>().and_then(|_| cfg.selected_sites(&spec)) {
                        Ok(_) => out.push(cfg),
                        Err(e) => log::warn!("skipping {code} ({attachment}): {e}"),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the Cartesian product of `axes` around `base`. All iteration counts
/// of one adapter configuration share a single adaptation run per episode.
pub fn ablation_grid(base: &RunConfig, axes: &AblationAxes, prepared: &Prepared) -> Result<(Vec<RunReport>, Vec<CsvRow>)> {
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let iterations = if axes.iterations.is_empty() {
        vec![base.adapt.iterations]
    } else {
        axes.iterations.clone()
    };
    for adapter in grid_configs(base, axes)? {
        let mut cfg = base.clone();
        cfg.adapter = adapter;
        cfg.method = None;
        cfg.adapt.iterations = *iterations.iter().max().expect("non-empty");
        cfg.adapt.checkpoints = iterations.clone();
        let attachment = cfg.adapter.attachment.to_string();
        let label = format!("{}@{attachment}+{}", cfg.adapter.code(), cfg.head);
        cfg.method = Some(label.clone());
        let report = run_prepared(&cfg, prepared)?;
        for r in report.csv_rows() {
            let ds = report.datasets.iter().find(|d| d.name == r.dataset).expect("row dataset");
            for cp in &ds.checkpoints {
                rows.push(CsvRow {
                    method: format!("{label}@{}it", cp.iterations),
                    mean_acc: cp.mean,
                    ci95: cp.ci95,
                    ..r.clone()
                });
            }
        }
        reports.push(report);
    }
    Ok((reports, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_preserves_order() {
        for workers in [1, 3, 8] {
            let out = run_pool(20, workers, &|i| i * i);
            assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(run_pool(0, 2, &|i| i).is_empty());
    }

    #[test]
    fn episode_seeds_depend_on_dataset_and_index() {
        assert_ne!(episode_seed(1, "a", 0), episode_seed(1, "b", 0));
        assert_ne!(episode_seed(1, "a", 0), episode_seed(1, "a", 1));
        assert_eq!(episode_seed(1, "a", 3), episode_seed(1, "a", 3));
    }
}
