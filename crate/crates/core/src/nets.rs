//! Label and domain classifiers.
//!
//! The domain network is `G` followed by a linear softmax head `S`; its
//! penultimate activation is the domain embedding ĝ. The label network is a
//! trunk whose hidden activation two layers before the logits is
//! concatenated with ĝ. The DAN variant shares one trunk between a label head
//! and a gradient-reversed domain head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputKind {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputKind {
    /// Per-example shape, excluding the batch axis.
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            InputKind::Vector { dim } => vec![dim],
            InputKind::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    pub fn size(&self) -> usize {
        self.shape().iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "default_true")]
    pub pool: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureActivation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input: InputKind,
    /// Fully connected hidden widths of the label trunk (also the DAN trunk).
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    /// Hidden widths of the domain network before the ĝ layer.
    #[serde(default = "default_domain_hidden")]
    pub domain_hidden: Vec<usize>,
    #[serde(default = "default_g_dim")]
    pub g_dim: usize,
    #[serde(default)]
    pub g_activation: FeatureActivation,
    pub num_labels: usize,
    pub num_domains: usize,
    /// Convolution stack applied to image inputs before the dense layers.
    #[serde(default)]
    pub conv: Vec<ConvLayer>,
    /// Number of label-trunk hidden layers evaluated before ĝ is
    /// concatenated. Defaults to leaving exactly two affine layers after the
    /// concat point.
    #[serde(default)]
    pub concat_after: Option<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_domain_hidden() -> Vec<usize> {
    vec![64]
}

fn default_g_dim() -> usize {
    16
}

impl NetConfig {
    /// Dense defaults: label trunk fc(64)-fc(64), domain net fc(64)-fc(q).
    pub fn vector(dim: usize, num_labels: usize, num_domains: usize) -> Self {
        Self {
            input: InputKind::Vector { dim },
            hidden_sizes: default_hidden(),
            domain_hidden: default_domain_hidden(),
            g_dim: default_g_dim(),
            g_activation: FeatureActivation::Relu,
            num_labels,
            num_domains,
            conv: Vec::new(),
            concat_after: None,
        }
    }

    /// conv(8, 3×3)-conv(16, 3×3)-fc(64)-fc(labels), each conv followed by a
    /// 2×2 pool whenever its output side is even.
    pub fn image(channels: usize, size: usize, num_labels: usize, num_domains: usize) -> Self {
        let mut side = size;
        let conv = [8, 16]
            .into_iter()
            .map(|filters| {
                side = side.saturating_sub(2);
                let pool = side % 2 == 0;
                if pool {
                    side /= 2;
                }
                ConvLayer {
                    filters,
                    kernel: 3,
                    pool,
                }
            })
            .collect();
        Self {
            input: InputKind::Image {
                channels,
                height: size,
                width: size,
            },
            hidden_sizes: vec![64],
            domain_hidden: vec![],
            g_dim: default_g_dim(),
            g_activation: FeatureActivation::Relu,
            num_labels,
            num_domains,
            conv,
            concat_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_dim < 1 {
            return Err(Error::Contract("g_dim must be ≥ 1".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Contract("num_labels must be ≥ 2".into()));
        }
        if self.num_domains < 2 {
            return Err(Error::Contract("num_domains must be ≥ 2".into()));
        }
        if self.hidden_sizes.iter().chain(&self.domain_hidden).any(|&h| h == 0) {
            return Err(Error::Contract("hidden widths must be positive".into()));
        }
        if self.input.size() == 0 {
            return Err(Error::Contract("input must be non-empty".into()));
        }
        if let Some(k) = self.concat_after {
            if k > self.hidden_sizes.len() {
                return Err(Error::Contract(format!(
                    "concat_after = {k} exceeds {} hidden layers",
                    self.hidden_sizes.len()
                )));
            }
        }
        if !self.conv.is_empty() && !matches!(self.input, InputKind::Image { .. }) {
            return Err(Error::Contract("conv layers need an image input".into()));
        }
        self.conv_output()?;
        Ok(())
    }

    pub fn concat_index(&self) -> usize {
        self.concat_after
            .unwrap_or_else(|| self.hidden_sizes.len().saturating_sub(1))
    }

    /// Shape after the conv stack, flattened width included.
    fn conv_output(&self) -> Result<(Vec<usize>, usize)> {
        let mut shape = self.input.shape();
        for (i, layer) in self.conv.iter().enumerate() {
            let (h, w) = (shape[1], shape[2]);
            if layer.kernel == 0 || layer.kernel > h || layer.kernel > w {
                return Err(Error::Dimension(format!(
                    "conv{i} kernel {} does not fit input {h}×{w}",
                    layer.kernel
                )));
            }
            let (mut oh, mut ow) = (h - layer.kernel + 1, w - layer.kernel + 1);
            if layer.pool {
                if oh % 2 != 0 || ow % 2 != 0 {
                    return Err(Error::Dimension(format!(
                        "conv{i} output {oh}×{ow} cannot be 2×2 pooled"
                    )));
                }
                oh /= 2;
                ow /= 2;
            }
            shape = vec![layer.filters, oh, ow];
        }
        let flat = shape.iter().product();
        Ok((shape, flat))
    }

    fn feature_width(&self) -> usize {
        self.conv_output().map(|(_, f)| f).unwrap_or(0)
    }
}

/// What a parameter set computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Label classifier θl; `uses_g` selects C(x, ĝ) over a trunk-only net.
    Label { uses_g: bool },
    /// Domain classifier θd.
    Domain,
    /// Shared trunk with label head and gradient-reversed domain head.
    Dan,
}

/// Ordered, named tensors for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    role: Role,
    tensors: Vec<(String, Tensor)>,
}

impl NetParams {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `tape` as a leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Replaces tensor values from a name-keyed list, checking names and shapes.
    pub fn load_from(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.tensors.iter_mut() {
            let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) else {
                return Err(Error::Consistency(format!("missing tensor {name}")));
            };
            if t.shape() != slot.shape() {
                return Err(Error::Consistency(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
}

fn dense_specs(out: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(Spec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        fan_in,
        fan_out,
        bias: false,
    });
    out.push(Spec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        fan_in,
        fan_out,
        bias: true,
    });
}

fn conv_specs(out: &mut Vec<Spec>, cfg: &NetConfig) {
    let mut channels = cfg.input.shape()[0];
    for (i, layer) in cfg.conv.iter().enumerate() {
        let area = layer.kernel * layer.kernel;
        out.push(Spec {
            name: format!("conv{i}.w"),
            shape: vec![layer.filters, channels, layer.kernel, layer.kernel],
            fan_in: channels * area,
            fan_out: layer.filters * area,
            bias: false,
        });
        out.push(Spec {
            name: format!("conv{i}.b"),
            shape: vec![layer.filters],
            fan_in: 0,
            fan_out: 0,
            bias: true,
        });
        channels = layer.filters;
    }
}

fn layout(cfg: &NetConfig, role: Role) -> Vec<Spec> {
    let mut specs = Vec::new();
    conv_specs(&mut specs, cfg);
    let mut width = cfg.feature_width();
    match role {
        Role::Label { uses_g } => {
            let concat_at = cfg.concat_index();
            for (i, &h) in cfg.hidden_sizes.iter().enumerate() {
                if uses_g && i == concat_at {
                    width += cfg.g_dim;
                }
                dense_specs(&mut specs, &format!("fc{i}"), width, h);
                width = h;
            }
            if uses_g && concat_at == cfg.hidden_sizes.len() {
                width += cfg.g_dim;
            }
            dense_specs(&mut specs, "out", width, cfg.num_labels);
        }
        Role::Domain => {
            for (i, &h) in cfg.domain_hidden.iter().enumerate() {
                dense_specs(&mut specs, &format!("fc{i}"), width, h);
                width = h;
            }
            dense_specs(&mut specs, "g", width, cfg.g_dim);
            dense_specs(&mut specs, "head", cfg.g_dim, cfg.num_domains);
        }
        Role::Dan => {
            for (i, &h) in cfg.hidden_sizes.iter().enumerate() {
                dense_specs(&mut specs, &format!("fc{i}"), width, h);
                width = h;
            }
            dense_specs(&mut specs, "out", width, cfg.num_labels);
            dense_specs(&mut specs, "dhead", width, cfg.num_domains);
        }
    }
    specs
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(cfg: &NetConfig, role: Role, seed: u64) -> Result<NetParams> {
    cfg.validate()?;
    let stream = match role {
        Role::Domain => Stream::DomainInit,
        _ => Stream::LabelInit,
    };
    let mut rng = substream(seed, stream);
    let tensors = layout(cfg, role)
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data = if spec.bias {
                vec![0.0; n]
            } else {
                let s = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-s..s)).collect()
            };
            (spec.name, Tensor::new(spec.shape, data).expect("layout shape"))
        })
        .collect();
    Ok(NetParams { role, tensors })
}

/// A parameter set bound to a tape, consumed front to back by the forward
/// builders.
struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [NodeId]) -> Self {
        Self { ids, pos: 0 }
    }

    fn pair(&mut self) -> (NodeId, NodeId) {
        let p = (self.ids[self.pos], self.ids[self.pos + 1]);
        self.pos += 2;
        p
    }
}

fn check_input(tape: &Tape, cfg: &NetConfig, x: NodeId) -> Result<()> {
    let shape = tape.value(x).shape();
    let expected = cfg.input.shape();
    if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
        return Err(Error::Dimension(format!(
            "input of shape {:?} does not match [B, {:?}]",
            shape, expected
        )));
    }
    Ok(())
}

/// Conv stack and flatten; returns `[B, features]`.
fn features(tape: &mut Tape, cfg: &NetConfig, cur: &mut Cursor, x: NodeId) -> Result<NodeId> {
    check_input(tape, cfg, x)?;
    let batch = tape.value(x).shape()[0];
    let mut h = x;
    for layer in &cfg.conv {
        let (k, b) = cur.pair();
        h = tape.conv2d(h, k, b, 1)?;
        h = tape.relu(h);
        if layer.pool {
            h = tape.max_pool2(h)?;
        }
    }
    if tape.value(h).rank() != 2 {
        let width = tape.value(h).len() / batch.max(1);
        h = tape.reshape(h, vec![batch, width])?;
    }
    Ok(h)
}

fn dense(tape: &mut Tape, cur: &mut Cursor, x: NodeId, relu: bool) -> Result<NodeId> {
    let (w, b) = cur.pair();
    let h = tape.affine(x, w, b)?;
    Ok(if relu { tape.relu(h) } else { h })
}

#[derive(Debug, Clone, Copy)]
pub struct DomainOutputs {
    /// ĝ, the input to the softmax head.
    pub g: NodeId,
    pub logits: NodeId,
}

pub fn domain_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &[NodeId],
    x: NodeId,
) -> Result<DomainOutputs> {
    let mut cur = Cursor::new(params);
    let mut h = features(tape, cfg, &mut cur, x)?;
    for _ in &cfg.domain_hidden {
        h = dense(tape, &mut cur, h, true)?;
    }
    let g = dense(
        tape,
        &mut cur,
        h,
        cfg.g_activation == FeatureActivation::Relu,
    )?;
    let logits = dense(tape, &mut cur, g, false)?;
    Ok(DomainOutputs { g, logits })
}

/// Label logits; `g` is required exactly when the parameters were built with
/// `Role::Label { uses_g: true }`.
pub fn label_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &[NodeId],
    x: NodeId,
    g: Option<NodeId>,
) -> Result<NodeId> {
    if let Some(g) = g {
        let gs = tape.value(g).shape();
        let batch = tape.value(x).shape()[0];
        if gs.len() != 2 || gs[1] != cfg.g_dim || gs[0] != batch {
            return Err(Error::Dimension(format!(
                "ĝ of shape {:?} does not match [{batch}, {}]",
                gs, cfg.g_dim
            )));
        }
    }
    let mut cur = Cursor::new(params);
    let h = label_hidden(tape, cfg, &mut cur, x, g)?;
    dense(tape, &mut cur, h, false)
}

/// The label trunk up to (not including) the output layer.
fn label_hidden(
    tape: &mut Tape,
    cfg: &NetConfig,
    cur: &mut Cursor<'_>,
    x: NodeId,
    g: Option<NodeId>,
) -> Result<NodeId> {
    let mut h = features(tape, cfg, cur, x)?;
    let concat_at = cfg.concat_index();
    for i in 0..cfg.hidden_sizes.len() {
        if i == concat_at {
            if let Some(g) = g {
                h = tape.concat(h, g)?;
            }
        }
        h = dense(tape, cur, h, true)?;
    }
    if concat_at == cfg.hidden_sizes.len() {
        if let Some(g) = g {
            h = tape.concat(h, g)?;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
pub struct DanOutputs {
    pub label_logits: NodeId,
    pub domain_logits: NodeId,
}

pub fn dan_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &[NodeId],
    x: NodeId,
    lambda: f64,
) -> Result<DanOutputs> {
    let mut cur = Cursor::new(params);
    let mut h = features(tape, cfg, &mut cur, x)?;
    for _ in &cfg.hidden_sizes {
        h = dense(tape, &mut cur, h, true)?;
    }
    let label_logits = dense(tape, &mut cur, h, false)?;
    let reversed = tape.gradient_reversal(h, lambda);
    let domain_logits = dense(tape, &mut cur, reversed, false)?;
    Ok(DanOutputs {
        label_logits,
        domain_logits,
    })
}

fn expect_role(params: &NetParams, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what} called with {:?} parameters",
            params.role()
        )))
    }
}

/// ĝ = G(x) for a batch, as a `[B, q]` tensor.
pub fn domain_features(cfg: &NetConfig, theta_d: &NetParams, x: &Tensor) -> Result<Tensor> {
    expect_role(theta_d, theta_d.role() == Role::Domain, "domain_features")?;
    let mut tape = Tape::new();
    let ids = theta_d.bind(&mut tape);
    let xi = tape.leaf(x.clone());
    let out = domain_forward(&mut tape, cfg, &ids, xi)?;
    Ok(tape.value(out.g).clone())
}

pub fn domain_logits(cfg: &NetConfig, theta_d: &NetParams, x: &Tensor) -> Result<Tensor> {
    expect_role(theta_d, theta_d.role() == Role::Domain, "domain_logits")?;
    let mut tape = Tape::new();
    let ids = theta_d.bind(&mut tape);
    let xi = tape.leaf(x.clone());
    let out = domain_forward(&mut tape, cfg, &ids, xi)?;
    Ok(tape.value(out.logits).clone())
}

pub fn label_logits(
    cfg: &NetConfig,
    theta_l: &NetParams,
    x: &Tensor,
    g: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = theta_l.bind(&mut tape);
    let xi = tape.leaf(x.clone());
    let logits = match theta_l.role() {
        Role::Label { uses_g } => {
            if uses_g != g.is_some() {
                return Err(Error::Contract(if uses_g {
                    "label network expects ĝ".into()
                } else {
                    "trunk-only label network given ĝ".into()
                }));
            }
            let gi = g.map(|g| tape.leaf(g.clone()));
            label_forward(&mut tape, cfg, &ids, xi, gi)?
        }
        Role::Dan => dan_forward(&mut tape, cfg, &ids, xi, 0.0)?.label_logits,
        Role::Domain => {
            return Err(Error::Contract("label_logits called with domain parameters".into()))
        }
    };
    Ok(tape.value(logits).clone())
}

/// Last hidden activations of a trunk-only label network.
pub fn label_features(cfg: &NetConfig, theta_l: &NetParams, x: &Tensor) -> Result<Tensor> {
    expect_role(
        theta_l,
        theta_l.role() == Role::Label { uses_g: false },
        "label_features",
    )?;
    let mut tape = Tape::new();
    let ids = theta_l.bind(&mut tape);
    let xi = tape.leaf(x.clone());
    let h = label_hidden(&mut tape, cfg, &mut Cursor::new(&ids), xi, None)?;
    Ok(tape.value(h).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let width = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted labels via Pr(y | x, ĝ) with ĝ inferred by `theta_d`.
pub fn predict_label(
    cfg: &NetConfig,
    theta_l: &NetParams,
    theta_d: Option<&NetParams>,
    x: &Tensor,
) -> Result<Vec<usize>> {
    let g = match (theta_l.role(), theta_d) {
        (Role::Label { uses_g: true }, Some(d)) => Some(domain_features(cfg, d, x)?),
        (Role::Label { uses_g: true }, None) => {
            return Err(Error::Contract("label network needs a domain network".into()))
        }
        _ => None,
    };
    Ok(argmax_rows(&label_logits(cfg, theta_l, x, g.as_ref())?))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let width = logits.shape().last().copied().unwrap_or(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(batch: usize, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, Stream::Fixture);
        let mut full = vec![batch];
        full.extend_from_slice(shape);
        let n = full.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(full, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = NetConfig::vector(2, 3, 4);
        for role in [Role::Label { uses_g: true }, Role::Domain, Role::Dan] {
            let a = init_params(&cfg, role, 11).unwrap();
            let b = init_params(&cfg, role, 11).unwrap();
            assert_eq!(a, b);
            for (name, t) in a.tensors() {
                if name.ends_with(".b") {
                    assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
                }
            }
        }
        let c = init_params(&cfg, Role::Domain, 12).unwrap();
        assert_ne!(init_params(&cfg, Role::Domain, 11).unwrap(), c);
    }

    #[test]
    fn init_weight_spread_matches_glorot_bound() {
        let mut cfg = NetConfig::vector(256, 2, 2);
        cfg.hidden_sizes = vec![256];
        cfg.concat_after = Some(0);
        let p = init_params(&cfg, Role::Label { uses_g: false }, 3).unwrap();
        let w = p.get("fc0.w").unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let s = (6.0f64 / 512.0).sqrt();
        let expected = s / 3f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.1);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = NetConfig::vector(2, 1, 3);
        assert!(init_params(&cfg, Role::Domain, 0).is_err());
        cfg.num_labels = 2;
        cfg.g_dim = 0;
        assert!(init_params(&cfg, Role::Domain, 0).is_err());
    }

    #[test]
    fn domain_features_shape_and_zero_input() {
        let cfg = NetConfig::vector(3, 2, 4);
        let p = init_params(&cfg, Role::Domain, 5).unwrap();
        for b in [1, 7] {
            let g = domain_features(&cfg, &p, &random_batch(b, &[3], 1)).unwrap();
            assert_eq!(g.shape(), &[b, 16]);
        }
        let g = domain_features(&cfg, &p, &Tensor::zeros(&[4, 3])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            domain_features(&cfg, &p, &Tensor::zeros(&[4, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn domain_softmax_rows_sum_to_one() {
        let cfg = NetConfig::vector(2, 2, 5);
        let p = init_params(&cfg, Role::Domain, 2).unwrap();
        let probs = softmax_rows(&domain_logits(&cfg, &p, &random_batch(9, &[2], 4)).unwrap());
        for row in probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_g_matches_trunk_only_network() {
        let cfg = NetConfig::vector(4, 3, 2);
        let with_g = init_params(&cfg, Role::Label { uses_g: true }, 8).unwrap();
        let mut trunk = init_params(&cfg, Role::Label { uses_g: false }, 99).unwrap();
        // Copy weights, dropping the rows that would read ĝ.
        for (name, t) in trunk.tensors.iter_mut() {
            let src = with_g.get(name).unwrap();
            if src.shape() == t.shape() {
                *t = src.clone();
            } else {
                let cols = t.shape()[1];
                let rows = t.shape()[0];
                *t = Tensor::new(t.shape().to_vec(), src.data()[..rows * cols].to_vec()).unwrap();
            }
        }
        let x = random_batch(5, &[4], 3);
        let g0 = Tensor::zeros(&[5, cfg.g_dim]);
        let a = label_logits(&cfg, &with_g, &x, Some(&g0)).unwrap();
        let b = label_logits(&cfg, &trunk, &x, None).unwrap();
        assert_eq!(a.shape(), &[5, 3]);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_g_width_rejected() {
        let cfg = NetConfig::vector(4, 3, 2);
        let p = init_params(&cfg, Role::Label { uses_g: true }, 8).unwrap();
        let x = random_batch(2, &[4], 3);
        let g = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            label_logits(&cfg, &p, &x, Some(&g)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn label_gradient_reaches_x_and_g() {
        let cfg = NetConfig::vector(4, 3, 2);
        let p = init_params(&cfg, Role::Label { uses_g: true }, 8).unwrap();
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = tape.leaf(random_batch(6, &[4], 3));
        let g = tape.leaf(random_batch(6, &[16], 5).map(f64::abs));
        let logits = label_forward(&mut tape, &cfg, &ids, x, Some(g)).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2, 0, 1, 2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).max_abs() > 0.0);
        assert!(grads.get(g).max_abs() > 0.0);
    }

    #[test]
    fn label_logits_equivariant_to_batch_permutation() {
        let cfg = NetConfig::vector(3, 4, 2);
        let l = init_params(&cfg, Role::Label { uses_g: true }, 1).unwrap();
        let d = init_params(&cfg, Role::Domain, 1).unwrap();
        let x = random_batch(5, &[3], 7);
        let perm = [3, 0, 4, 1, 2];
        let xp_data: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let xp = Tensor::new(vec![5, 3], xp_data).unwrap();
        let a = label_logits(&cfg, &l, &x, Some(&domain_features(&cfg, &d, &x).unwrap())).unwrap();
        let b =
            label_logits(&cfg, &l, &xp, Some(&domain_features(&cfg, &d, &xp).unwrap())).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.row(i), b.row(k));
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::from_rows(&[vec![0.0, 5.0, 1.0, 5.0], vec![0.1, 9.0, 0.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 1]);
        let single = Tensor::from_rows(&[vec![-1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(argmax_rows(&single), vec![2]);
    }

    #[test]
    fn image_network_shapes() {
        let cfg = NetConfig::image(1, 16, 4, 3);
        let d = init_params(&cfg, Role::Domain, 2).unwrap();
        let l = init_params(&cfg, Role::Label { uses_g: true }, 2).unwrap();
        let x = random_batch(2, &[1, 16, 16], 1);
        let g = domain_features(&cfg, &d, &x).unwrap();
        assert_eq!(g.shape(), &[2, 16]);
        let y = predict_label(&cfg, &l, Some(&d), &x).unwrap();
        assert_eq!(y.len(), 2);
        assert_eq!(cfg.conv.iter().map(|c| c.pool).collect::<Vec<_>>(), [true, false]);
        // Second conv output is 5×5, which cannot be pooled.
        let mut bad = cfg.clone();
        bad.conv[1].pool = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dan_zero_lambda_blocks_domain_gradient_into_trunk() {
        let cfg = NetConfig::vector(3, 2, 3);
        let p = init_params(&cfg, Role::Dan, 4).unwrap();
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape);
        let x = tape.leaf(random_batch(4, &[3], 2));
        let out = dan_forward(&mut tape, &cfg, &ids, x, 0.0).unwrap();
        let loss = tape.softmax_cross_entropy(out.domain_logits, &[0, 1, 2, 0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[0]).max_abs(), 0.0);
        assert!(g.get(*ids.last().unwrap()).max_abs() > 0.0);
    }
}
