//! Task-specific adapters attached to the main-path convolutions of a frozen
//! backbone, plus the pre-classifier linear alignment `beta`.
//!
//! Configurations have string codes: `none`, `PA`, or
//! `Ad-{S|R}-{M|CW}[-DN{N}[@{stages}]][-PA]`, e.g. `Ad-R-M-DN32@34-PA` for
//! residual matrix adapters whose stages 3 and 4 are decomposed with
//! divisor 32.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tsa_tensor::{Tape, Tensor, Var};

use crate::backbone::{
    forward_on_tape, BackboneSpec, BackboneWeights, BnMode, BoundBackbone, LayerSite, SiteHook,
};
use crate::classifiers::HeadKind;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Residual adapters start at `DEFAULT_DELTA * I`.
pub const DEFAULT_DELTA: f64 = 1e-4;
/// Images per forward chunk when computing features without gradients.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Serial,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Matrix,
    Channelwise,
}

/// Low-rank factorization `alpha = V gamma^T` of matrix adapters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Decomposition {
    pub divisor: usize,
    /// Stages (1-based) that are decomposed; empty means every attached stage.
    pub stages: Vec<usize>,
}

impl Decomposition {
    fn covers(&self, stage: usize) -> bool {
        self.stages.is_empty() || self.stages.contains(&stage)
    }

    pub fn bottleneck(&self, c_out: usize) -> usize {
        c_out.div_ceil(self.divisor).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdapterKind {
    pub connection: Connection,
    pub form: Form,
    pub decomposition: Option<Decomposition>,
}

/// Which main-path convolutions receive adapters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum Attachment {
    #[default]
    All,
    /// Every stage from the given one (1-based) to the last: `block4`,
    /// `block3-4`, `block2-4` on a four-stage backbone.
    FromStage(usize),
    /// Explicit site labels such as `s1.b1.conv1`.
    Sites(Vec<String>),
    /// Every site at which the adapter form is legal.
    Legal,
}

impl fmt::Display for Attachment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attachment::All => f.write_str("all"),
            Attachment::Legal => f.write_str("legal"),
            Attachment::FromStage(s) => write!(f, "from-stage{s}"),
            Attachment::Sites(sites) => write!(f, "sites:{}", sites.join(",")),
        }
    }
}

impl FromStr for Attachment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown attachment {s:?}"));
        Ok(match s {
            "all" | "block-all" => Attachment::All,
            "legal" => Attachment::Legal,
            "block4" => Attachment::FromStage(4),
            "block3-4" | "block3,4" => Attachment::FromStage(3),
            "block2-4" | "block2,3,4" => Attachment::FromStage(2),
            _ => {
                if let Some(n) = s.strip_prefix("from-stage") {
                    Attachment::FromStage(n.parse().map_err(|_| bad())?)
                } else if let Some(list) = s.strip_prefix("sites:") {
                    Attachment::Sites(list.split(',').map(|x| x.trim().to_string()).collect())
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterInit {
    /// Serial: exact identity. Residual: `delta`-scaled identity.
    Identity { delta: f64 },
    /// Gaussian entries of standard deviation `scale` (around the identity
    /// for serial adapters).
    Random { scale: f64 },
}

impl Default for AdapterInit {
    fn default() -> Self {
        AdapterInit::Identity { delta: DEFAULT_DELTA }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdapterConfig {
    /// `None` attaches no adapters.
    pub kind: Option<AdapterKind>,
    pub attachment: Attachment,
    pub init: AdapterInit,
    pub include_pa: bool,
}

impl AdapterConfig {
    pub fn code(&self) -> String {
        self.to_string()
    }

    pub fn with_attachment(mut self, attachment: Attachment) -> Self {
        self.attachment = attachment;
        self
    }

    pub fn with_init(mut self, init: AdapterInit) -> Self {
        self.init = init;
        self
    }

    /// Why an adapter of this kind cannot wrap `site`, if it cannot.
    fn illegal_reason(kind: &AdapterKind, site: &LayerSite) -> Option<String> {
        if kind.connection == Connection::Residual
            && kind.form == Form::Channelwise
            && (site.c_in != site.c_out || site.stride != 1)
        {
            return Some(format!(
                "residual channelwise adapter needs equal input/output channels and stride 1, site has {}->{} stride {}",
                site.c_in, site.c_out, site.stride
            ));
        }
        None
    }

    /// The main-path sites this configuration attaches to, in network order.
    pub fn selected_sites(&self, spec: &BackboneSpec) -> Result<Vec<LayerSite>> {
        let Some(kind) = &self.kind else {
            return Ok(Vec::new());
        };
        let main = spec.main_sites();
        let picked: Vec<LayerSite> = match &self.attachment {
            Attachment::All => main,
            Attachment::Legal => main
                .into_iter()
                .filter(|s| Self::illegal_reason(kind, s).is_none())
                .collect(),
            Attachment::FromStage(first) => {
                if *first == 0 || *first > spec.num_stages() {
                    return Err(Error::config(format!(
                        "attachment from stage {first} on a {}-stage backbone",
                        spec.num_stages()
                    )));
                }
                main.into_iter().filter(|s| s.stage >= *first).collect()
            }
            Attachment::Sites(labels) => {
                for l in labels {
                    if !main.iter().any(|s| &s.label() == l) {
                        return Err(Error::config(format!("unknown main-path site {l:?}")));
                    }
                }
                main.into_iter().filter(|s| labels.contains(&s.label())).collect()
            }
        };
        for site in &picked {
            if let Some(reason) = Self::illegal_reason(kind, site) {
                return Err(Error::IllegalAdapter {
                    site: site.label(),
                    reason,
                });
            }
        }
        if let Some(dec) = &kind.decomposition {
            if let Some(&bad) = dec.stages.iter().find(|&&s| s == 0 || s > spec.num_stages()) {
                return Err(Error::config(format!("decomposition names missing stage {bad}")));
            }
        }
        Ok(picked)
    }

    /// Trainable parameter count on `spec` without allocating anything.
    pub fn count_parameters(&self, spec: &BackboneSpec) -> Result<ParamCount> {
        let mut adapters = 0;
        if let Some(kind) = &self.kind {
            for site in self.selected_sites(spec)? {
                adapters += SiteShape::of(kind, &site).params();
            }
        }
        let pa = if self.include_pa {
            spec.feature_dim() * spec.feature_dim()
        } else {
            0
        };
        Ok(ParamCount {
            adapters,
            pa,
            backbone_conv: spec.conv_params(),
        })
    }
}

fn validate_kind(kind: &AdapterKind) -> Result<()> {
    if let Some(dec) = &kind.decomposition {
        if dec.divisor < 2 {
            return Err(Error::config(format!(
                "decomposition divisor must be at least 2, got {}",
                dec.divisor
            )));
        }
        if kind.form != Form::Matrix {
            return Err(Error::config("decomposition applies to matrix adapters only"));
        }
        if kind.connection != Connection::Residual {
            return Err(Error::config(
                "decomposition requires the residual connection (a low-rank serial map discards channels)",
            ));
        }
    }
    Ok(())
}

impl fmt::Display for AdapterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            None if self.include_pa => f.write_str("PA"),
            None => f.write_str("none"),
            Some(k) => {
                let c = match k.connection {
                    Connection::Serial => "S",
                    Connection::Residual => "R",
                };
                let m = match k.form {
                    Form::Matrix => "M",
                    Form::Channelwise => "CW",
                };
                write!(f, "Ad-{c}-{m}")?;
                if let Some(d) = &k.decomposition {
                    write!(f, "-DN{}", d.divisor)?;
                    if !d.stages.is_empty() {
                        f.write_str("@")?;
                        for s in &d.stages {
                            write!(f, "{s}")?;
                        }
                    }
                }
                if self.include_pa {
                    f.write_str("-PA")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for AdapterConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::config(format!("adapter code {s:?}: {why}"));
        match s {
            "none" => return Ok(AdapterConfig::default()),
            "PA" => {
                return Ok(AdapterConfig {
                    include_pa: true,
                    ..AdapterConfig::default()
                })
            }
            _ => {}
        }
        let mut parts = s.split('-');
        if parts.next() != Some("Ad") {
            return Err(bad("expected none, PA or Ad-..."));
        }
        let connection = match parts.next() {
            Some("S") => Connection::Serial,
            Some("R") => Connection::Residual,
            _ => return Err(bad("connection must be S or R")),
        };
        let form = match parts.next() {
            Some("M") => Form::Matrix,
            Some("CW") => Form::Channelwise,
            _ => return Err(bad("form must be M or CW")),
        };
        let mut decomposition = None;
        let mut include_pa = false;
        for part in parts {
            if part == "PA" && !include_pa {
                include_pa = true;
            } else if let Some(rest) = part.strip_prefix("DN").filter(|_| decomposition.is_none() && !include_pa) {
                let (n, stages) = match rest.split_once('@') {
                    Some((n, st)) => (n, st),
                    None => (rest, ""),
                };
                let divisor = n.parse().map_err(|_| bad("DN needs an integer divisor"))?;
                let stages = stages
                    .chars()
                    .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(|| bad("stages are digits")))
                    .collect::<Result<Vec<_>>>()?;
                decomposition = Some(Decomposition { divisor, stages });
            } else {
                return Err(bad(&format!("unexpected segment {part:?}")));
            }
        }
        let kind = AdapterKind {
            connection,
            form,
            decomposition,
        };
        validate_kind(&kind)?;
        Ok(AdapterConfig {
            kind: Some(kind),
            include_pa,
            ..AdapterConfig::default()
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterConfigRepr {
    code: String,
    #[serde(default = "default_attachment")]
    attachment: String,
    #[serde(default)]
    init: AdapterInit,
}

fn default_attachment() -> String {
    "all".into()
}

impl Serialize for AdapterConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AdapterConfigRepr {
            code: self.code(),
            attachment: self.attachment.to_string(),
            init: self.init,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AdapterConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = AdapterConfigRepr::deserialize(d)?;
        let mut cfg: AdapterConfig = r.code.parse().map_err(serde::de::Error::custom)?;
        cfg.attachment = r.attachment.parse().map_err(serde::de::Error::custom)?;
        cfg.init = r.init;
        Ok(cfg)
    }
}

/// Trainable parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapters: usize,
    pub pa: usize,
    pub backbone_conv: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.adapters + self.pa
    }

    /// Trainable parameters as a fraction of backbone convolution parameters.
    pub fn fraction(&self) -> f64 {
        self.total() as f64 / self.backbone_conv as f64
    }
}

/// Per-site adapter geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SiteShape {
    /// `alpha` of shape `[rows, cols]`.
    Matrix { rows: usize, cols: usize },
    Channelwise { channels: usize },
    /// `V: [rows, b]`, `gamma: [cols, b]`.
    Decomposed { rows: usize, cols: usize, b: usize },
}

impl SiteShape {
    fn of(kind: &AdapterKind, site: &LayerSite) -> Self {
        let cols = match kind.connection {
            Connection::Serial => site.c_out,
            Connection::Residual => site.c_in,
        };
        match (kind.form, &kind.decomposition) {
            (Form::Channelwise, _) => SiteShape::Channelwise { channels: site.c_out },
            (Form::Matrix, Some(d)) if d.covers(site.stage) => SiteShape::Decomposed {
                rows: site.c_out,
                cols,
                b: d.bottleneck(site.c_out),
            },
            (Form::Matrix, _) => SiteShape::Matrix {
                rows: site.c_out,
                cols,
            },
        }
    }

    fn params(&self) -> usize {
        match *self {
            SiteShape::Matrix { rows, cols } => rows * cols,
            SiteShape::Channelwise { channels } => channels,
            SiteShape::Decomposed { rows, cols, b } => (rows + cols) * b,
        }
    }
}

/// Adapter weights at one site.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterParams {
    Matrix(Tensor),
    Channelwise(Tensor),
    Decomposed { v: Tensor, gamma: Tensor },
}

impl AdapterParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AdapterParams::Matrix(a) | AdapterParams::Channelwise(a) => vec![a],
            AdapterParams::Decomposed { v, gamma } => vec![v, gamma],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AdapterParams::Matrix(a) | AdapterParams::Channelwise(a) => vec![a],
            AdapterParams::Decomposed { v, gamma } => vec![v, gamma],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSite {
    pub site: LayerSite,
    pub connection: Connection,
    pub params: AdapterParams,
}

impl AdapterSite {
    /// `V gamma^T` for decomposed sites, `alpha` for matrix sites.
    pub fn effective_matrix(&self) -> Result<Tensor> {
        match &self.params {
            AdapterParams::Matrix(a) => Ok(a.clone()),
            AdapterParams::Decomposed { v, gamma } => Ok(v.matmul(&gamma.transpose())?),
            AdapterParams::Channelwise(_) => Err(Error::config(format!(
                "site {} is channelwise and has no matrix",
                self.site.label()
            ))),
        }
    }

    fn param_names(&self) -> Vec<String> {
        let l = self.site.label();
        match self.params {
            AdapterParams::Matrix(_) | AdapterParams::Channelwise(_) => vec![format!("{l}.alpha")],
            AdapterParams::Decomposed { .. } => vec![format!("{l}.v"), format!("{l}.gamma")],
        }
    }
}

fn gaussian(shape: [usize; 2], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// `[rows, cols]` with `scale` on the leading diagonal.
fn rect_eye(rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn([rows, cols], |i| if i / cols == i % cols { scale } else { 0.0 })
}

fn init_params(shape: SiteShape, connection: Connection, init: AdapterInit, rng: &mut impl Rng) -> AdapterParams {
    let serial = connection == Connection::Serial;
    match (shape, init) {
        (SiteShape::Matrix { rows, cols }, AdapterInit::Identity { delta }) => {
            AdapterParams::Matrix(rect_eye(rows, cols, if serial { 1.0 } else { delta }))
        }
        (SiteShape::Matrix { rows, cols }, AdapterInit::Random { scale }) => {
            let mut a = gaussian([rows, cols], scale, rng);
            if serial {
                for i in 0..rows.min(cols) {
                    a.data_mut()[i * cols + i] += 1.0;
                }
            }
            AdapterParams::Matrix(a)
        }
        (SiteShape::Channelwise { channels }, AdapterInit::Identity { delta }) => {
            AdapterParams::Channelwise(Tensor::full([channels], if serial { 1.0 } else { delta }))
        }
        (SiteShape::Channelwise { channels }, AdapterInit::Random { scale }) => {
            let base = if serial { 1.0 } else { 0.0 };
            AdapterParams::Channelwise(Tensor::from_fn([channels], |_| {
                base + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            }))
        }
        (SiteShape::Decomposed { rows, cols, b }, AdapterInit::Identity { delta }) => AdapterParams::Decomposed {
            v: rect_eye(rows, b, delta),
            gamma: rect_eye(cols, b, 1.0),
        },
        (SiteShape::Decomposed { rows, cols, b }, AdapterInit::Random { scale }) => AdapterParams::Decomposed {
            v: gaussian([rows, b], scale, rng),
            gamma: gaussian([cols, b], scale, rng),
        },
    }
}

/// Adapter output on the tape for one site given its bound parameters.
fn adapter_on_tape(
    tape: &mut Tape,
    site: &AdapterSite,
    vars: &[Var],
    h: Var,
    conv_out: Var,
) -> Result<Var> {
    let s = &site.site;
    let matrix = match &site.params {
        AdapterParams::Matrix(_) => Some(vars[0]),
        AdapterParams::Decomposed { .. } => {
            let gt = tape.transpose(vars[1])?;
            Some(tape.matmul(vars[0], gt)?)
        }
        AdapterParams::Channelwise(_) => None,
    };
    let out = match (site.connection, matrix) {
        (Connection::Serial, Some(m)) => {
            let k = tape.reshape(m, &[s.c_out, s.c_out, 1, 1])?;
            tape.conv2d(conv_out, k, 1, 0)?
        }
        (Connection::Serial, None) => tape.channel_scale(conv_out, vars[0])?,
        (Connection::Residual, Some(m)) => {
            let k = tape.reshape(m, &[s.c_out, s.c_in, 1, 1])?;
            let r = tape.conv2d(h, k, s.stride, 0)?;
            if tape.shape(r) != tape.shape(conv_out) {
                return Err(Error::config(format!(
                    "residual branch {:?} does not match conv output {:?} at {}",
                    tape.shape(r),
                    tape.shape(conv_out),
                    s.label()
                )));
            }
            tape.add(r, conv_out)?
        }
        (Connection::Residual, None) => {
            if tape.shape(h) != tape.shape(conv_out) {
                return Err(Error::config(format!(
                    "channelwise residual input {:?} does not match conv output {:?} at {}",
                    tape.shape(h),
                    tape.shape(conv_out),
                    s.label()
                )));
            }
            let r = tape.channel_scale(h, vars[0])?;
            tape.add(r, conv_out)?
        }
    };
    Ok(out)
}

/// Applies one adapter to plain tensors: `h` is the wrapped convolution's
/// input and `conv_out` its output.
pub fn apply_adapter(h: &Tensor, conv_out: &Tensor, site: &AdapterSite) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let cv = tape.constant(conv_out.clone());
    let vars: Vec<Var> = site.params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
    let out = adapter_on_tape(&mut tape, site, &vars, hv, cv)?;
    Ok(tape.value(out).clone())
}

/// `z beta^T` for `[N, d]` embeddings.
pub fn pre_classifier_align(z: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = z.shape().get(1).copied().unwrap_or(0);
    if z.rank() != 2 || beta.shape() != [d, d] {
        return Err(Error::config(format!(
            "beta {:?} does not fit embeddings {:?}",
            beta.shape(),
            z.shape()
        )));
    }
    Ok(z.matmul(&beta.transpose())?)
}

/// A frozen backbone with task-specific parameters `theta` (adapters and the
/// optional `beta`) and a classifier head.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub backbone: Arc<BackboneWeights>,
    pub config: AdapterConfig,
    pub sites: Vec<AdapterSite>,
    pub beta: Option<Tensor>,
    pub head: HeadKind,
}

/// `theta` placed on a tape.
pub struct BoundTask {
    site_vars: Vec<Vec<Var>>,
    beta: Option<Var>,
    /// Site index in the backbone -> position in `site_vars`.
    lookup: Vec<Option<usize>>,
}

impl BoundTask {
    /// Vars in the order of [`TaskModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.site_vars.iter().flatten().copied().chain(self.beta).collect()
    }
}

struct Hook<'a> {
    model: &'a TaskModel,
    bound: &'a BoundTask,
}

impl SiteHook for Hook<'_> {
    fn apply(&self, tape: &mut Tape, site: &LayerSite, input: Var, conv_out: Var) -> Result<Var> {
        match self.bound.lookup.get(site.index).copied().flatten() {
            Some(k) => adapter_on_tape(tape, &self.model.sites[k], &self.bound.site_vars[k], input, conv_out),
            None => Ok(conv_out),
        }
    }
}

/// Attaches adapters (initialized per `config`) to a frozen backbone.
pub fn attach(backbone: Arc<BackboneWeights>, config: &AdapterConfig, seed: u64) -> Result<TaskModel> {
    let spec = &backbone.spec;
    let mut rng = rng_for(seed, &[0xada]);
    let mut sites = Vec::new();
    if let Some(kind) = &config.kind {
        validate_kind(kind)?;
        for site in config.selected_sites(spec)? {
            let shape = SiteShape::of(kind, &site);
            sites.push(AdapterSite {
                params: init_params(shape, kind.connection, config.init, &mut rng),
                connection: kind.connection,
                site,
            });
        }
    }
    let beta = config.include_pa.then(|| Tensor::eye(spec.feature_dim(), 1.0));
    Ok(TaskModel {
        backbone,
        config: config.clone(),
        sites,
        beta,
        head: HeadKind::Ncc,
    })
}

impl TaskModel {
    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    /// Trainable tensors in a fixed order: site parameters in network order,
    /// then `beta`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.sites
            .iter()
            .flat_map(|s| s.params.tensors())
            .chain(self.beta.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.sites
            .iter_mut()
            .flat_map(|s| s.params.tensors_mut())
            .chain(self.beta.as_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.sites
            .iter()
            .flat_map(AdapterSite::param_names)
            .chain(self.beta.as_ref().map(|_| "beta".to_string()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTask {
        let mut lookup = vec![None; self.backbone.spec.sites().len()];
        let site_vars = self
            .sites
            .iter()
            .enumerate()
            .map(|(k, s)| {
                lookup[s.site.index] = Some(k);
                s.params.tensors().into_iter().map(|t| tape.param(t.clone())).collect()
            })
            .collect();
        let beta = self.beta.as_ref().map(|b| tape.param(b.clone()));
        BoundTask {
            site_vars,
            beta,
            lookup,
        }
    }

    /// Aligned features of `images` (a tape var) through the frozen
    /// backbone (inference-mode normalization) and the bound adapters.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape,
        frozen: &BoundBackbone,
        bound: &BoundTask,
        images: Var,
    ) -> Result<Var> {
        let hook = Hook { model: self, bound };
        let out = forward_on_tape(tape, &self.backbone, frozen, images, BnMode::Inference, Some(&hook))?;
        match bound.beta {
            Some(b) => {
                let bt = tape.transpose(b)?;
                Ok(tape.matmul(out.features, bt)?)
            }
            None => Ok(out.features),
        }
    }

    /// Aligned features of `[N, C, H, W]` images, computed in chunks.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::config(format!("expected NCHW images, got {s:?}")));
        }
        let per: usize = s[1..].iter().product();
        let mut data = Vec::new();
        let mut d = self.backbone.spec.feature_dim();
        for start in (0..s[0]).step_by(INFERENCE_CHUNK) {
            let n = INFERENCE_CHUNK.min(s[0] - start);
            let chunk = Tensor::new(
                [n, s[1], s[2], s[3]],
                images.data()[start * per..(start + n) * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let frozen = BoundBackbone::frozen(&mut tape, &self.backbone);
            let bound = self.bind(&mut tape);
            let x = tape.constant(chunk);
            let f = self.features_on_tape(&mut tape, &frozen, &bound, x)?;
            d = tape.shape(f)[1];
            data.extend_from_slice(tape.value(f).data());
        }
        Ok(Tensor::new([s[0], d], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for code in [
            "none",
            "PA",
            "Ad-S-M",
            "Ad-R-M",
            "Ad-S-CW",
            "Ad-R-CW-PA",
            "Ad-R-M-PA",
            "Ad-R-M-DN32",
            "Ad-R-M-DN32@34-PA",
        ] {
            let cfg: AdapterConfig = code.parse().unwrap();
            assert_eq!(cfg.code(), code);
        }
        for bad in ["Ad-X-M", "Ad-R-M-DN1", "Ad-S-M-DN4", "Ad-R-CW-DN4", "Ad-R-M-PA-DN4", "Ad-R-M-foo", "ad-r-m"] {
            assert!(bad.parse::<AdapterConfig>().is_err(), "{bad}");
        }
    }

    #[test]
    fn attachment_codes() {
        assert_eq!("block4".parse::<Attachment>().unwrap(), Attachment::FromStage(4));
        assert_eq!("block2,3,4".parse::<Attachment>().unwrap(), Attachment::FromStage(2));
        for a in [Attachment::All, Attachment::Legal, Attachment::FromStage(3), Attachment::Sites(vec!["s1.b1.conv1".into()])] {
            assert_eq!(a.to_string().parse::<Attachment>().unwrap(), a);
        }
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg: AdapterConfig = "Ad-R-M-DN8@4-PA".parse().unwrap();
        let cfg = cfg.with_attachment(Attachment::FromStage(3)).with_init(AdapterInit::Random { scale: 0.01 });
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<AdapterConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn rect_eye_places_leading_diagonal() {
        let t = rect_eye(2, 3, 5.0);
        assert_eq!(t.data(), &[5.0, 0.0, 0.0, 0.0, 5.0, 0.0]);
    }
}
