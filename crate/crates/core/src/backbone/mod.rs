//! Task-agnostic ResNet feature extractor.
//!
//! A backbone is a stem convolution followed by stages of basic residual
//! blocks and global average pooling. Every stage after the first halves the
//! spatial resolution in its first block. Main-path 3x3 convolutions are the
//! sites where task-specific adapters can be attached; see [`LayerSite`].

mod io;
mod pretrain;

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tsa_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub use io::{export_weights, import_weights, read_weights, write_weights, FORMAT_VERSION, MAGIC};
pub use pretrain::{pretrain_mdl, PretrainConfig, PretrainLog};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_resolution: usize,
}

impl BackboneSpec {
    /// Desk-scale default: 32x32 RGB input, 3x3 stem to 16 channels,
    /// stages [16, 32, 64, 128] with two basic blocks each, d = 128.
    pub fn resnet_s() -> Self {
        BackboneSpec {
            in_channels: 3,
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 1,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            input_resolution: 32,
        }
    }

    /// ResNet-18 layout (7x7 stride-2 stem, stages [64, 128, 256, 512]).
    /// Used for parameter accounting only; the stem max-pool is omitted
    /// because it has no parameters.
    pub fn resnet18() -> Self {
        BackboneSpec {
            in_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            input_resolution: 224,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated spec has stages")
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("backbone spec: {m}")));
        if self.stage_channels.is_empty() {
            return bad("at least one stage required");
        }
        if self.stage_channels.contains(&0) || self.stem_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be positive");
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem kernel and stride must be positive");
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem kernel must be odd");
        }
        let mut res = (self.input_resolution + 2 * (self.stem_kernel / 2) - self.stem_kernel)
            / self.stem_stride
            + 1;
        for _ in 1..self.num_stages() {
            res = (res - 1) / 2 + 1;
        }
        if self.input_resolution == 0 || res == 0 {
            return bad("input resolution too small for the number of stages");
        }
        Ok(())
    }

    /// Stable enumeration of every convolution in forward order.
    pub fn sites(&self) -> Vec<LayerSite> {
        let mut sites = vec![LayerSite {
            index: 0,
            stage: 0,
            block: 0,
            conv: 0,
            c_in: self.in_channels,
            c_out: self.stem_channels,
            kernel: self.stem_kernel,
            stride: self.stem_stride,
            role: SiteRole::Stem,
        }];
        let mut c_prev = self.stem_channels;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            let stage = s + 1;
            for block in 0..self.blocks_per_stage {
                let (c_in, stride) = if block == 0 {
                    (c_prev, if stage == 1 { 1 } else { 2 })
                } else {
                    (c, 1)
                };
                let mut push = |conv, c_in, kernel, stride, role| {
                    let index = sites.len();
                    sites.push(LayerSite {
                        index,
                        stage,
                        block,
                        conv,
                        c_in,
                        c_out: c,
                        kernel,
                        stride,
                        role,
                    });
                };
                push(1, c_in, 3, stride, SiteRole::Main);
                push(2, c, 3, 1, SiteRole::Main);
                if c_in != c || stride != 1 {
                    push(0, c_in, 1, stride, SiteRole::Downsample);
                }
            }
            c_prev = c;
        }
        sites
    }

    pub fn main_sites(&self) -> Vec<LayerSite> {
        self.sites()
            .into_iter()
            .filter(|s| s.role == SiteRole::Main)
            .collect()
    }

    /// Sum of all convolution kernel sizes.
    pub fn conv_params(&self) -> usize {
        self.sites().iter().map(LayerSite::kernel_params).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteRole {
    Stem,
    /// 3x3 convolution on the residual main path.
    Main,
    /// 1x1 projection on the shortcut.
    Downsample,
}

/// One convolution of the backbone. `stage` is 1-based (0 for the stem);
/// `conv` is 1 or 2 for main-path convs and 0 for stem/downsample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSite {
    pub index: usize,
    pub stage: usize,
    pub block: usize,
    pub conv: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub role: SiteRole,
}

impl LayerSite {
    /// Name of the kernel tensor in [`BackboneWeights`].
    pub fn weight_name(&self) -> String {
        match self.role {
            SiteRole::Stem => "stem.conv".into(),
            SiteRole::Main => format!("s{}.b{}.conv{}", self.stage, self.block, self.conv),
            SiteRole::Downsample => format!("s{}.b{}.down", self.stage, self.block),
        }
    }

    /// Prefix of the batch-norm tensors following this conv.
    pub fn bn_name(&self) -> String {
        match self.role {
            SiteRole::Stem => "stem.bn".into(),
            SiteRole::Main => format!("s{}.b{}.bn{}", self.stage, self.block, self.conv),
            SiteRole::Downsample => format!("s{}.b{}.down_bn", self.stage, self.block),
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn kernel_params(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn label(&self) -> String {
        self.weight_name()
    }
}

/// Linear classifier for one pretraining domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Named backbone tensors plus (during pretraining only) per-domain heads.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub spec: BackboneSpec,
    pub tensors: BTreeMap<String, Tensor>,
    pub heads: Vec<DomainHead>,
}

pub const BN_SUFFIXES: [&str; 4] = ["gamma", "beta", "mean", "var"];

impl BackboneWeights {
    /// Every tensor name with its expected shape, in a stable order.
    pub fn expected_shapes(spec: &BackboneSpec) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for site in spec.sites() {
            out.push((site.weight_name(), site.kernel_shape().to_vec()));
            for s in BN_SUFFIXES {
                out.push((format!("{}.{s}", site.bn_name()), vec![site.c_out]));
            }
        }
        out.sort();
        out
    }

    /// He-normal convolution kernels, unit BN scale, zero BN shift and mean,
    /// unit BN variance.
    pub fn init(spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut tensors = BTreeMap::new();
        for site in spec.sites() {
            let fan_in = (site.c_in * site.kernel * site.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let kernel = Tensor::from_fn(site.kernel_shape().to_vec(), |_| normal.sample(rng));
            tensors.insert(site.weight_name(), kernel);
            let bn = site.bn_name();
            tensors.insert(format!("{bn}.gamma"), Tensor::ones([site.c_out]));
            tensors.insert(format!("{bn}.beta"), Tensor::zeros([site.c_out]));
            tensors.insert(format!("{bn}.mean"), Tensor::zeros([site.c_out]));
            tensors.insert(format!("{bn}.var"), Tensor::ones([site.c_out]));
        }
        Ok(BackboneWeights {
            spec: spec.clone(),
            tensors,
            heads: Vec::new(),
        })
    }

    /// All-zero weights with unit BN variance; used for parameter accounting.
    pub fn zeros(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = Self::expected_shapes(spec)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".var") {
                    Tensor::ones(shape)
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(BackboneWeights {
            spec: spec.clone(),
            tensors,
            heads: Vec::new(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    /// Copy without the pretraining heads, as handed to meta-test.
    pub fn meta_test_snapshot(&self) -> Self {
        BackboneWeights {
            spec: self.spec.clone(),
            tensors: self.tensors.clone(),
            heads: Vec::new(),
        }
    }

    /// Names of the trainable backbone tensors (kernels and BN affine).
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !n.ends_with(".mean") && !n.ends_with(".var"))
            .cloned()
            .collect()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.spec);
        if expected.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, spec requires {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &BackboneWeights) -> bool {
        self.spec == other.spec
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Batch-norm behaviour during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Stored running statistics.
    Inference,
    /// Batch statistics; running-average updates are reported back.
    Train,
}

/// Backbone tensors placed on a tape.
pub struct BoundBackbone {
    vars: HashMap<String, Var>,
}

impl BoundBackbone {
    /// `trainable` selects which tensor names become gradient-tracked leaves;
    /// everything else is a constant.
    pub fn new(tape: &mut Tape, weights: &BackboneWeights, trainable: &dyn Fn(&str) -> bool) -> Self {
        let vars = weights
            .tensors
            .iter()
            .filter(|(n, _)| !n.ends_with(".mean") && !n.ends_with(".var"))
            .map(|(n, t)| {
                let v = if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundBackbone { vars }
    }

    pub fn frozen(tape: &mut Tape, weights: &BackboneWeights) -> Self {
        Self::new(tape, weights, &|_| false)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Modifies the output of a main-path convolution. `input` is the tensor the
/// convolution consumed, `conv_out` its output.
pub trait SiteHook {
    fn apply(&self, tape: &mut Tape, site: &LayerSite, input: Var, conv_out: Var) -> Result<Var>;
}

/// Result of a forward pass: pooled features and, in train mode, the batch
/// statistics per BN prefix.
pub struct ForwardOutput {
    pub features: Var,
    pub bn_batch_stats: Vec<(String, Tensor, Tensor)>,
}

struct Forward<'a> {
    weights: &'a BackboneWeights,
    bound: &'a BoundBackbone,
    mode: BnMode,
    hook: Option<&'a dyn SiteHook>,
    stats: Vec<(String, Tensor, Tensor)>,
}

impl Forward<'_> {
    fn conv(&self, tape: &mut Tape, site: &LayerSite, x: Var) -> Result<Var> {
        let k = self.bound.var(&site.weight_name())?;
        let out = tape.conv2d(x, k, site.stride, site.padding())?;
        match (self.hook, site.role) {
            (Some(h), SiteRole::Main) => h.apply(tape, site, x, out),
            _ => Ok(out),
        }
    }

    fn bn(&mut self, tape: &mut Tape, site: &LayerSite, x: Var) -> Result<Var> {
        let p = site.bn_name();
        let gamma = self.bound.var(&format!("{p}.gamma"))?;
        let beta = self.bound.var(&format!("{p}.beta"))?;
        match self.mode {
            BnMode::Inference => {
                let mean = self.weights.get(&format!("{p}.mean"))?;
                let var = self.weights.get(&format!("{p}.var"))?;
                Ok(tape.batch_norm_inference(x, mean, var, gamma, beta, BN_EPS)?)
            }
            BnMode::Train => {
                let (y, m, v) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((p, m, v));
                Ok(y)
            }
        }
    }
}

/// Runs the backbone on `images` (NCHW) already placed on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &BackboneWeights,
    bound: &BoundBackbone,
    images: Var,
    mode: BnMode,
    hook: Option<&dyn SiteHook>,
) -> Result<ForwardOutput> {
    let spec = &weights.spec;
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4
        || shape[1] != spec.in_channels
        || shape[2] != spec.input_resolution
        || shape[3] != spec.input_resolution
    {
        return Err(Error::config(format!(
            "images of shape {shape:?} do not match backbone input [N, {}, {r}, {r}]",
            spec.in_channels,
            r = spec.input_resolution
        )));
    }
    let mut fw = Forward {
        weights,
        bound,
        mode,
        hook,
        stats: Vec::new(),
    };
    let sites = spec.sites();
    let mut it = sites.iter().peekable();
    let stem = it.next().expect("stem site");
    let x = fw.conv(tape, stem, images)?;
    let x = fw.bn(tape, stem, x)?;
    let mut x = tape.relu(x)?;
    while let Some(conv1) = it.next() {
        let conv2 = it.next().expect("conv2 follows conv1");
        let down = it.next_if(|s| s.role == SiteRole::Downsample);
        let h = x;
        let a = fw.conv(tape, conv1, h)?;
        let a = fw.bn(tape, conv1, a)?;
        let a = tape.relu(a)?;
        let b = fw.conv(tape, conv2, a)?;
        let b = fw.bn(tape, conv2, b)?;
        let shortcut = match down {
            Some(d) => {
                let s = fw.conv(tape, d, h)?;
                fw.bn(tape, d, s)?
            }
            None => h,
        };
        let sum = tape.add(b, shortcut)?;
        x = tape.relu(sum)?;
    }
    let features = tape.global_avg_pool(x)?;
    Ok(ForwardOutput {
        features,
        bn_batch_stats: fw.stats,
    })
}

/// Inference-mode features `[N, d]` with an optional site hook.
pub fn forward_features(
    weights: &BackboneWeights,
    images: &Tensor,
    hook: Option<&dyn SiteHook>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundBackbone::frozen(&mut tape, weights);
    let x = tape.constant(images.clone());
    let out = forward_on_tape(&mut tape, weights, &bound, x, BnMode::Inference, hook)?;
    Ok(tape.value(out.features).clone())
}
