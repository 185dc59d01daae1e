//! Datasets, synthetic domains, IDX ingestion and episode sampling.

mod idx;
mod sampler;
mod shift;
mod synthetic;

use serde::{Deserialize, Serialize};
use tsa_tensor::Tensor;

use crate::error::{Error, Result};

pub use idx::{
    data_root, load_idx, load_idx_dir, parse_idx_images, parse_idx_labels, write_idx_images,
    write_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};
pub use sampler::{sample_episode, Episode, Protocol, QUERY_PER_CLASS};
pub use shift::{
    apply_channel_mix, condition_number, luminance_swap_matrix, make_channel_shift_episode, random_mixing_matrix,
    MAX_CONDITION,
};
pub use synthetic::{
    benchmark_domains, check_seen_unseen_disjoint, gen_synthetic_domains, render_domain, DomainTransform,
    SplitSizes, SyntheticDomainSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labeled images of one domain. Images are stored channel-major
/// (`C x H x W`) as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain_id: usize,
    pub seen: bool,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
    /// Split assignment per class id.
    class_splits: Vec<Split>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        domain_id: usize,
        seen: bool,
        (channels, height, width): (usize, usize, usize),
        images: Vec<f64>,
        labels: Vec<usize>,
        class_splits: Vec<Split>,
    ) -> Result<Self> {
        let name = name.into();
        let err = |reason: String| Error::Dataset {
            dataset: name.clone(),
            reason,
        };
        let per = channels * height * width;
        if per == 0 {
            return Err(err("zero-sized images".into()));
        }
        if images.len() != labels.len() * per {
            return Err(err(format!(
                "{} pixel values for {} labels of {per} values each",
                images.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(err("no images".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_splits.len()) {
            return Err(err(format!("label {bad} has no split assignment")));
        }
        let mut by_class = vec![Vec::new(); class_splits.len()];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        Ok(Dataset {
            name,
            domain_id,
            seen,
            channels,
            height,
            width,
            images,
            labels,
            class_splits,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_splits.len()
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.class_splits[class]
    }

    /// Class ids assigned to `split` that have at least one image.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.class_splits[c] == split && !self.by_class[c].is_empty())
            .collect()
    }

    pub fn indices_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// Stacks images into an `[N, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().copied());
        }
        Tensor::new([indices.len(), self.channels, self.height, self.width], data)
            .expect("consistent geometry")
    }

    /// Stacks images drawn from several datasets of identical geometry.
    pub fn batch_from(items: &[(&Dataset, usize)]) -> Result<Tensor> {
        let Some(&(first, _)) = items.first() else {
            return Err(Error::Sampling("empty batch".into()));
        };
        let geom = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(items.len() * first.image_len());
        for &(ds, i) in items {
            if (ds.channels, ds.height, ds.width) != geom {
                return Err(Error::Dataset {
                    dataset: ds.name.clone(),
                    reason: "image geometry differs within batch".into(),
                });
            }
            data.extend(ds.image(i).iter().copied());
        }
        Ok(Tensor::new([items.len(), geom.0, geom.1, geom.2], data)?)
    }

    /// Per-channel mean and standard deviation over the train-split images,
    /// or over all images when the dataset has no train split.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let train: Vec<usize> = (0..self.len())
            .filter(|&i| self.class_splits[self.labels[i]] == Split::Train)
            .collect();
        let pool: Vec<usize> = if train.is_empty() {
            (0..self.len()).collect()
        } else {
            train
        };
        let plane = self.height * self.width;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for &i in &pool {
            let img = self.image(i);
            for c in 0..self.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (pool.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        (mean, std)
    }

    /// Standardizes every channel with the train-split statistics.
    pub fn standardize(&mut self) {
        let (mean, std) = self.channel_stats();
        let plane = self.height * self.width;
        let per = self.image_len();
        for img in self.images.chunks_mut(per) {
            for c in 0..self.channels {
                let s = if std[c] > 1e-12 { std[c] } else { 1.0 };
                for v in &mut img[c * plane..(c + 1) * plane] {
                    *v = (*v - mean[c]) / s;
                }
            }
        }
    }

    /// Replicates single-channel images to `channels` and center-pads or
    /// crops to `resolution` x `resolution` (padding with zeros).
    pub fn conform(&self, channels: usize, resolution: usize) -> Result<Dataset> {
        if self.channels != channels && self.channels != 1 {
            return Err(Error::Dataset {
                dataset: self.name.clone(),
                reason: format!("cannot map {} channels to {channels}", self.channels),
            });
        }
        let mut out = Vec::with_capacity(self.len() * channels * resolution * resolution);
        let dy = resolution as isize - self.height as isize;
        let dx = resolution as isize - self.width as isize;
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..channels {
                let src_c = if self.channels == 1 { 0 } else { c };
                for y in 0..resolution as isize {
                    for x in 0..resolution as isize {
                        let sy = y - dy / 2;
                        let sx = x - dx / 2;
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width;
                        out.push(if inside {
                            img[(src_c * self.height + sy as usize) * self.width + sx as usize]
                        } else {
                            0.0
                        });
                    }
                }
            }
        }
        Dataset::new(
            self.name.clone(),
            self.domain_id,
            self.seen,
            (channels, resolution, resolution),
            out,
            self.labels.clone(),
            self.class_splits.clone(),
        )
    }
}
