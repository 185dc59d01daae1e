//! Vanilla multi-domain pretraining: a shared backbone with one linear head
//! per domain, trained on the sum of per-domain average cross-entropies.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tsa_tensor::{SgdMomentum, Tape, Tensor};

use super::{forward_on_tape, BackboneSpec, BackboneWeights, BnMode, BoundBackbone, DomainHead};
use crate::episodes::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Images per domain per step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Running-average momentum for batch-norm statistics.
    pub bn_momentum: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine: bool,
    /// Random horizontal flips.
    pub flip: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 7e-4,
            bn_momentum: 0.1,
            cosine: true,
            flip: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Summed per-domain loss at each step.
    pub losses: Vec<f64>,
    /// Per step, per domain batch accuracy.
    pub accuracy: Vec<Vec<f64>>,
}

impl PretrainLog {
    /// Mean of the last `window` losses.
    pub fn tail_loss(&self, window: usize) -> f64 {
        let n = self.losses.len().min(window).max(1);
        self.losses.iter().rev().take(n).sum::<f64>() / n as f64
    }
}

struct DomainData<'a> {
    dataset: &'a Dataset,
    /// Training images with labels remapped to `0..classes`.
    items: Vec<(usize, usize)>,
    classes: usize,
}

fn flip_horizontal(images: &mut Tensor, rows: &[bool]) {
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let data = images.data_mut();
    for (n, &flip) in rows.iter().enumerate() {
        if !flip {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let off = ((n * c + ch) * h + y) * w;
                data[off..off + w].reverse();
            }
        }
    }
}

/// Trains a backbone jointly on all `datasets` (their train-split classes).
///
/// Each step draws one batch per domain, runs them through the backbone as a
/// single batch, and minimizes the sum over domains of the mean
/// cross-entropy of that domain's head. The returned weights keep the heads;
/// [`BackboneWeights::meta_test_snapshot`] strips them.
pub fn pretrain_mdl(
    datasets: &[Dataset],
    spec: &BackboneSpec,
    cfg: &PretrainConfig,
) -> Result<(BackboneWeights, PretrainLog)> {
    if datasets.is_empty() {
        return Err(Error::config("pretraining needs at least one domain"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut domains = Vec::new();
    for ds in datasets {
        let classes = ds.classes_in(Split::Train);
        if ds.is_empty() || classes.is_empty() {
            return Err(Error::Dataset {
                dataset: ds.name.clone(),
                reason: "no training images".into(),
            });
        }
        if classes.len() < 2 {
            return Err(Error::Dataset {
                dataset: ds.name.clone(),
                reason: format!("needs at least 2 training classes, has {}", classes.len()),
            });
        }
        if ds.channels != spec.in_channels || ds.height != spec.input_resolution || ds.width != spec.input_resolution {
            return Err(Error::Dataset {
                dataset: ds.name.clone(),
                reason: "image geometry does not match the backbone input".into(),
            });
        }
        let mut items = Vec::new();
        for (local, &class) in classes.iter().enumerate() {
            items.extend(ds.indices_of(class).iter().map(|&i| (i, local)));
        }
        domains.push(DomainData {
            dataset: ds,
            items,
            classes: classes.len(),
        });
    }

    let mut init_rng = rng_for(cfg.seed, &[0]);
    let mut weights = BackboneWeights::init(spec, &mut init_rng)?;
    let d = spec.feature_dim();
    weights.heads = domains
        .iter()
        .map(|dom| DomainHead {
            weight: Tensor::zeros([dom.classes, d]),
            bias: Tensor::zeros([dom.classes]),
        })
        .collect();

    let trainable = weights.trainable_names();
    let mut opt: Vec<SgdMomentum> = trainable
        .iter()
        .map(|n| SgdMomentum::new(weights.tensors[n].shape(), cfg.momentum, cfg.weight_decay))
        .collect();
    let mut head_opt: Vec<(SgdMomentum, SgdMomentum)> = weights
        .heads
        .iter()
        .map(|h| {
            (
                SgdMomentum::new(h.weight.shape(), cfg.momentum, cfg.weight_decay),
                SgdMomentum::new(h.bias.shape(), cfg.momentum, 0.0),
            )
        })
        .collect();

    let mut log = PretrainLog::default();
    for step in 0..cfg.steps {
        let mut rng = rng_for(cfg.seed, &[1, step as u64]);
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for dom in &domains {
            let start = indices.len();
            let batch: Vec<&(usize, usize)> = if dom.items.len() >= cfg.batch_size {
                dom.items.choose_multiple(&mut rng, cfg.batch_size).collect()
            } else {
                (0..cfg.batch_size)
                    .map(|_| &dom.items[rng.gen_range(0..dom.items.len())])
                    .collect()
            };
            for &&(i, y) in &batch {
                indices.push((dom.dataset, i));
                labels.push(y);
            }
            rows.push((start..indices.len()).collect::<Vec<_>>());
        }
        let mut images = Dataset::batch_from(&indices)?;
        if cfg.flip {
            let flips: Vec<bool> = (0..indices.len()).map(|_| rng.gen_bool(0.5)).collect();
            flip_horizontal(&mut images, &flips);
        }

        let mut tape = Tape::new();
        let bound = BoundBackbone::new(&mut tape, &weights, &|_| true);
        let head_vars: Vec<_> = weights
            .heads
            .iter()
            .map(|h| {
                let w = tape.param(h.weight.clone());
                let b = tape.param(h.bias.clone().reshape([1, h.bias.len()]).expect("vector"));
                (w, b)
            })
            .collect();
        let x = tape.constant(images);
        let out = forward_on_tape(&mut tape, &weights, &bound, x, BnMode::Train, None)?;

        let mut total = None;
        let mut accs = Vec::with_capacity(domains.len());
        for (k, r) in rows.iter().enumerate() {
            let feats = tape.gather_rows(out.features, r)?;
            let wt = tape.transpose(head_vars[k].0)?;
            let logits = tape.matmul(feats, wt)?;
            let logits = tape.add_row(logits, head_vars[k].1)?;
            let ys: Vec<usize> = r.iter().map(|&i| labels[i]).collect();
            let lv = tape.value(logits);
            let correct = ys
                .iter()
                .enumerate()
                .filter(|(i, &y)| crate::classifiers::argmax(lv.row(*i)) == y)
                .count();
            accs.push(correct as f64 / ys.len() as f64);
            let loss = tape.softmax_cross_entropy(logits, &ys)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let total = total.expect("at least one domain");
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: step,
                loss: loss_value,
            });
        }
        let grads = tape.backward(total)?;

        let lr = if cfg.cosine && cfg.steps > 0 {
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.lr
        };
        for (name, o) in trainable.iter().zip(opt.iter_mut()) {
            let g = grads.get(bound.var(name)?).expect("tracked");
            o.step(weights.tensors.get_mut(name).expect("known name"), g, lr)?;
        }
        for ((head, (ow, ob)), (wv, bv)) in weights.heads.iter_mut().zip(head_opt.iter_mut()).zip(&head_vars) {
            ow.step(&mut head.weight, grads.get(*wv).expect("tracked"), lr)?;
            let gb = grads.get(*bv).expect("tracked").clone().reshape([head.bias.len()])?;
            ob.step(&mut head.bias, &gb, lr)?;
        }
        let m = cfg.bn_momentum;
        for (prefix, mean, var) in out.bn_batch_stats {
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let running = weights
                    .tensors
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .expect("bn stats exist");
                for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
        log.losses.push(loss_value);
        log.accuracy.push(accs);
    }
    Ok((weights, log))
}
