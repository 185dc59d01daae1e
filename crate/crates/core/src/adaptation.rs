//! Support-set optimization of the task-specific parameters and episode
//! evaluation.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsa_tensor::{adadelta_step, AdadeltaState, Tape, Tensor, Var};

use crate::adapters::TaskModel;
use crate::backbone::{BackboneWeights, BoundBackbone};
use crate::classifiers::{
    self, accuracy, class_counts, knn_predict, md_logits, md_logits_on_tape, ncc_logits, ncc_logits_on_tape,
    train_linear_head, HeadKind, LinearHead, LinearHeadConfig, LinearKind, Metric, Prototypes, DEFAULT_TAU,
};
use crate::episodes::Episode;
use crate::error::{Error, Result};

/// Learning rate for `beta` on domains seen during pretraining.
pub const LR_BETA_SEEN: f64 = 0.1;
/// Learning rate for `beta` on unseen domains.
pub const LR_BETA_UNSEEN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adadelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr_beta: f64,
    /// Defaults to `lr_beta / 2`.
    pub lr_alpha: Option<f64>,
    pub optimizer: Optimizer,
    pub head: HeadKind,
    /// Train every backbone tensor too (the finetuning baseline).
    pub finetune_all: bool,
    pub seed: u64,
    pub tau: f64,
    pub metric: Metric,
    /// Extra iteration counts at which query accuracy is recorded; the run
    /// extends to the largest of these and `iterations`.
    pub checkpoints: Vec<usize>,
    pub linear_head: LinearHeadConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 40,
            lr_beta: LR_BETA_SEEN,
            lr_alpha: None,
            optimizer: Optimizer::Adadelta,
            head: HeadKind::Ncc,
            finetune_all: false,
            seed: 0,
            tau: DEFAULT_TAU,
            metric: Metric::Cosine,
            checkpoints: Vec::new(),
            linear_head: LinearHeadConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn lr_alpha(&self) -> f64 {
        self.lr_alpha.unwrap_or(self.lr_beta / 2.0)
    }

    /// Applies the seen/unseen learning-rate preset.
    pub fn for_domain(mut self, seen: bool) -> Self {
        self.lr_beta = if seen { LR_BETA_SEEN } else { LR_BETA_UNSEEN };
        self
    }

    fn total_iterations(&self) -> usize {
        self.checkpoints.iter().copied().fold(self.iterations, usize::max)
    }

    fn finetunes(&self) -> bool {
        self.finetune_all || self.head == HeadKind::FinetuneNcc
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !lr_ok(self.lr_beta) || !lr_ok(self.lr_alpha()) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        Ok(())
    }
}

/// Per-iteration record of an adaptation run; entry `t` describes the
/// parameters before update `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl AdaptTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.losses.iter().cloned().reduce(f64::min)
    }
}

/// Linear head trained alongside `theta` (LR and softmax heads).
#[derive(Clone, Debug)]
struct JointHead {
    head: LinearHead,
    step: f64,
}

impl JointHead {
    fn logits_on_tape(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var, Var)> {
        let z = match self.head.kind {
            LinearKind::Lr => tape.l2_normalize(z)?,
            LinearKind::Softmax => z,
        };
        let w = tape.param(self.head.weight.clone());
        let b = tape.param(self.head.bias.clone());
        let wt = tape.transpose(w)?;
        let l = tape.matmul(z, wt)?;
        let l = match self.head.kind {
            LinearKind::Lr => tape.add_row(l, b)?,
            LinearKind::Softmax => l,
        };
        Ok((l, w, b))
    }
}

fn linear_kind(head: HeadKind) -> Option<LinearKind> {
    match head {
        HeadKind::Lr => Some(LinearKind::Lr),
        HeadKind::Softmax => Some(LinearKind::Softmax),
        _ => None,
    }
}

/// Model state after adaptation: the task model plus a trained linear head
/// when the classifier needs one.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub model: TaskModel,
    pub linear_head: Option<LinearHead>,
}

impl Adapted {
    /// Query predictions under the configured head, using `support` to build
    /// the non-parametric heads.
    pub fn predict(&self, support: &Tensor, labels: &[usize], query: &Tensor, cfg: &AdaptConfig) -> Result<Vec<usize>> {
        let way = way_of(labels)?;
        let zs = self.model.features(support)?;
        let zq = self.model.features(query)?;
        predict_from_features(&zs, labels, way, &zq, cfg, self.linear_head.as_ref())
    }
}

fn predict_from_features(
    zs: &Tensor,
    labels: &[usize],
    way: usize,
    zq: &Tensor,
    cfg: &AdaptConfig,
    linear: Option<&LinearHead>,
) -> Result<Vec<usize>> {
    match cfg.head {
        HeadKind::Ncc | HeadKind::FinetuneNcc => {
            let p = Prototypes::fit(zs, labels, way)?;
            Ok(classifiers::predict(&ncc_logits(zq, &p, cfg.metric, cfg.tau)?))
        }
        HeadKind::Md => Ok(classifiers::predict(&md_logits(zq, zs, labels, way)?)),
        HeadKind::Knn(k) => knn_predict(zq, zs, labels, k),
        HeadKind::Lr | HeadKind::Softmax => {
            let kind = linear_kind(cfg.head).expect("linear head");
            let fitted;
            let head = match linear {
                Some(h) => h,
                None => {
                    fitted = train_linear_head(kind, zs, labels, way, &cfg.linear_head)?;
                    &fitted
                }
            };
            head.predict(zq)
        }
    }
}

fn way_of(labels: &[usize]) -> Result<usize> {
    let way = labels.iter().max().map_or(0, |m| m + 1);
    class_counts(labels, way)?;
    Ok(way)
}

/// Optimizes the task parameters on the support set.
///
/// `observer` is called with the iteration count `t` (starting at 0, before
/// any update) and the current state after every update.
pub fn adapt_observed(
    model: TaskModel,
    support: &Tensor,
    labels: &[usize],
    cfg: &AdaptConfig,
    observer: &mut dyn FnMut(usize, &Adapted) -> Result<()>,
) -> Result<(Adapted, AdaptTrace)> {
    cfg.validate()?;
    let way = way_of(labels)?;
    if support.shape().first() != Some(&labels.len()) {
        return Err(Error::config(format!(
            "support of shape {:?} does not match {} labels",
            support.shape(),
            labels.len()
        )));
    }
    let finetune = cfg.finetunes();
    let mut state = Adapted {
        model,
        linear_head: None,
    };
    let has_theta = !state.model.params().is_empty() || finetune;
    let total = if has_theta { cfg.total_iterations() } else { 0 };

    let mut joint = match linear_kind(cfg.head) {
        Some(kind) => {
            let zs = state.model.features(support)?;
            let head = train_linear_head(kind, &zs, labels, way, &cfg.linear_head)?;
            let mean_sq = match kind {
                LinearKind::Lr => 1.0,
                LinearKind::Softmax => {
                    (zs.data().iter().map(|v| v * v).sum::<f64>() / labels.len() as f64).max(1e-12)
                }
            };
            state.linear_head = Some(head.clone());
            Some(JointHead {
                head,
                step: cfg.linear_head.lr / mean_sq,
            })
        }
        None => None,
    };

    let lr_alpha = cfg.lr_alpha();
    let names = state.model.param_names();
    let mut theta_opt: Vec<AdadeltaState> = state
        .model
        .params()
        .iter()
        .zip(&names)
        .map(|(t, n)| AdadeltaState::with_lr(t.shape(), if n == "beta" { cfg.lr_beta } else { lr_alpha }))
        .collect::<std::result::Result<_, _>>()?;
    let phi_names = if finetune {
        state.model.backbone.trainable_names()
    } else {
        Vec::new()
    };
    let mut phi_opt: Vec<AdadeltaState> = phi_names
        .iter()
        .map(|n| AdadeltaState::with_lr(state.model.backbone.tensors[n].shape(), lr_alpha))
        .collect::<std::result::Result<_, _>>()?;

    observer(0, &state)?;
    let mut trace = AdaptTrace::default();
    for t in 0..total {
        let start = Instant::now();
        let mut tape = Tape::new();
        let backbone = BoundBackbone::new(&mut tape, &state.model.backbone, &|_| finetune);
        let bound = state.model.bind(&mut tape);
        let x = tape.constant(support.clone());
        let z = state.model.features_on_tape(&mut tape, &backbone, &bound, x)?;
        if tape.value(z).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                loss: f64::NAN,
            });
        }
        let mut head_vars = None;
        let logits = match (&joint, cfg.head) {
            (Some(j), _) => {
                let (l, w, b) = j.logits_on_tape(&mut tape, z)?;
                head_vars = Some((w, b));
                l
            }
            (None, HeadKind::Md) => md_logits_on_tape(&mut tape, z, z, labels, way)?,
            (None, _) => ncc_logits_on_tape(&mut tape, z, z, labels, way, cfg.metric, cfg.tau)?,
        };
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                loss: loss_value,
            });
        }
        let preds = classifiers::predict(tape.value(logits));
        trace.losses.push(loss_value);
        trace.accuracies.push(accuracy(&preds, labels));

        let grads = tape.backward(loss)?;
        let vars = bound.vars();
        for ((p, v), opt) in state.model.params_mut().into_iter().zip(&vars).zip(&mut theta_opt) {
            adadelta_step(p, grads.get(*v).expect("theta is tracked"), opt)?;
        }
        if finetune {
            let phi = Arc::make_mut(&mut state.model.backbone);
            for (name, opt) in phi_names.iter().zip(&mut phi_opt) {
                let g = grads.get(backbone.var(name)?).expect("phi is tracked when finetuning");
                adadelta_step(phi.tensors.get_mut(name).expect("known tensor"), g, opt)?;
            }
        }
        if let (Some(j), Some((w, b))) = (&mut joint, head_vars) {
            let gw = grads.get(w).expect("tracked");
            for (p, g) in j.head.weight.data_mut().iter_mut().zip(gw.data()) {
                *p -= j.step * g;
            }
            if j.head.kind == LinearKind::Lr {
                let gb = grads.get(b).expect("tracked");
                for (p, g) in j.head.bias.data_mut().iter_mut().zip(gb.data()) {
                    *p -= j.step * g;
                }
            }
            state.linear_head = Some(j.head.clone());
        }
        trace.seconds.push(start.elapsed().as_secs_f64());
        observer(t + 1, &state)?;
    }
    Ok((state, trace))
}

/// [`adapt_observed`] without an observer.
pub fn adapt(model: TaskModel, support: &Tensor, labels: &[usize], cfg: &AdaptConfig) -> Result<(Adapted, AdaptTrace)> {
    adapt_observed(model, support, labels, cfg, &mut |_, _| Ok(()))
}

/// Finetunes every backbone tensor (and `beta`, if the model has one) with
/// the NCC loss.
pub fn finetune_baseline(
    backbone: Arc<BackboneWeights>,
    support: &Tensor,
    labels: &[usize],
    cfg: &AdaptConfig,
) -> Result<(Adapted, AdaptTrace)> {
    let model = crate::adapters::attach(backbone, &crate::adapters::AdapterConfig::default(), cfg.seed)?;
    let cfg = AdaptConfig {
        finetune_all: true,
        head: HeadKind::FinetuneNcc,
        ..cfg.clone()
    };
    adapt(model, support, labels, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    /// Query accuracy after `iterations` updates.
    pub accuracy: f64,
    /// `(iterations, query accuracy)` for each requested checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub predictions: Vec<usize>,
    pub trace: AdaptTrace,
}

/// Adapts on the episode's support set and scores the query set.
pub fn evaluate_episode(model: TaskModel, episode: &Episode, cfg: &AdaptConfig) -> Result<EpisodeOutcome> {
    let mut wanted: Vec<usize> = cfg.checkpoints.clone();
    wanted.push(cfg.iterations);
    wanted.sort_unstable();
    wanted.dedup();
    let has_theta = !model.params().is_empty() || cfg.finetunes();
    let mut results: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut last: Option<Vec<usize>> = None;
    let mut observer = |t: usize, state: &Adapted| -> Result<()> {
        if wanted.contains(&t) || !has_theta && t == 0 {
            let preds = state.predict(&episode.support, &episode.support_labels, &episode.query, cfg)?;
            results.push((t, preds.clone()));
            last = Some(preds);
        }
        Ok(())
    };
    let (_, trace) = adapt_observed(model, &episode.support, &episode.support_labels, cfg, &mut observer)?;
    let score = |p: &[usize]| accuracy(p, &episode.query_labels);
    // without trainable parameters every checkpoint equals iteration 0
    let at = |t: usize| -> Vec<usize> {
        results
            .iter()
            .find(|(i, _)| *i == t)
            .map(|(_, p)| p.clone())
            .or_else(|| last.clone())
            .expect("at least one evaluation")
    };
    let predictions = at(cfg.iterations);
    Ok(EpisodeOutcome {
        accuracy: score(&predictions),
        checkpoints: cfg.checkpoints.iter().map(|&c| (c, score(&at(c)))).collect(),
        predictions,
        trace,
    })
}
