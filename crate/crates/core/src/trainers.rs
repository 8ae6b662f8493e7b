//! Training regimes: ERM baseline, LabelGrad, DAN and CrossGrad, with SGD and
//! RMSProp updates and a bit-reproducible training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{make_batches, Batch, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{
    dan_forward, domain_forward, init_params, label_forward, predict_label, NetConfig, NetParams,
    Role,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    LabelGrad,
    Dan,
    CrossGrad,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::LabelGrad,
        Method::Dan,
        Method::CrossGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LabelGrad => "labelgrad",
            Method::Dan => "dan",
            Method::CrossGrad => "crossgrad",
        }
    }

    /// Whether the method has (α, ε) hyperparameters to sweep.
    pub fn is_perturbative(self) -> bool {
        matches!(self, Method::LabelGrad | Method::CrossGrad)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    RmsProp {
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_epsilon_stab")]
        epsilon_stab: f64,
    },
}

fn default_decay() -> f64 {
    0.9
}

fn default_epsilon_stab() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::RmsProp {
            decay: default_decay(),
            epsilon_stab: default_epsilon_stab(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub method: Method,
    pub eps_l: f64,
    pub eps_d: f64,
    pub alpha_l: f64,
    pub alpha_d: f64,
    pub eta: f64,
    pub steps_n: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub dan_lambda: f64,
    /// Perturb along the elementwise sign of the gradient instead of the raw
    /// gradient.
    pub sign_normalize: bool,
    /// Pair `eps_d` with the domain-gradient perturbation and `eps_l` with
    /// the label-gradient one (the reverse of the default pairing).
    pub swap_eps: bool,
    /// Record training losses every `log_every` steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::CrossGrad,
            eps_l: 1.0,
            eps_d: 1.0,
            alpha_l: 0.5,
            alpha_d: 0.5,
            eta: 0.02,
            steps_n: 500,
            batch_size: 32,
            optimizer: Optimizer::default(),
            dan_lambda: 1.0,
            sign_normalize: false,
            swap_eps: false,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(what.to_string()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !finite_nonneg(self.eps_l) || !finite_nonneg(self.eps_d) {
            return bad("eps_l and eps_d must be finite and ≥ 0");
        }
        if !unit(self.alpha_l) || !unit(self.alpha_d) {
            return bad("alpha_l and alpha_d must lie in [0, 1]");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be ≥ 1");
        }
        if !finite_nonneg(self.dan_lambda) {
            return bad("dan_lambda must be ≥ 0");
        }
        if let Optimizer::RmsProp {
            decay,
            epsilon_stab,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&decay) || !(epsilon_stab > 0.0) {
                return bad("rmsprop needs decay in [0, 1) and epsilon_stab > 0");
            }
        }
        Ok(())
    }

    /// Step sizes `(domain-gradient perturbation, label-gradient perturbation)`.
    fn perturbation_eps(&self) -> (f64, f64) {
        if self.swap_eps {
            (self.eps_d, self.eps_l)
        } else {
            (self.eps_l, self.eps_d)
        }
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method == method {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{method} step called with method = {}",
                self.method
            )))
        }
    }
}

/// RMSProp second-moment caches (one per parameter tensor) and a step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cache: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &NetParams) -> Self {
        Self {
            cache: params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }
}

fn check_finite(grads: &[Tensor], step: usize) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        return Ok(());
    }
    let max_abs_grad = grads
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    Err(Error::NonFinite { step, max_abs_grad })
}

/// Applies one SGD or RMSProp update in place.
pub fn optimizer_update(
    params: &mut NetParams,
    grads: &[Tensor],
    opt: &mut OptimizerState,
    optimizer: Optimizer,
    eta: f64,
) -> Result<()> {
    if grads.len() != params.len() || opt.cache.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} caches for {} parameters",
            grads.len(),
            opt.cache.len(),
            params.len()
        )));
    }
    for (((name, p), g), c) in params.tensors().iter().zip(grads).zip(&opt.cache) {
        if p.shape() != g.shape() || p.shape() != c.shape() {
            return Err(Error::Contract(format!(
                "{name}: parameter {:?}, gradient {:?}, cache {:?}",
                p.shape(),
                g.shape(),
                c.shape()
            )));
        }
    }
    check_finite(grads, opt.step)?;
    for ((p, g), c) in params.tensors_mut().zip(grads).zip(opt.cache.iter_mut()) {
        match optimizer {
            Optimizer::Sgd => {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= eta * gv;
                }
            }
            Optimizer::RmsProp {
                decay,
                epsilon_stab,
            } => {
                let it = p.data_mut().iter_mut().zip(g.data()).zip(c.data_mut());
                for ((pv, gv), cv) in it {
                    *cv = decay * *cv + (1.0 - decay) * gv * gv;
                    *pv -= eta * gv / (cv.sqrt() + epsilon_stab);
                }
            }
        }
    }
    opt.step += 1;
    Ok(())
}

/// Loss value, parameter gradients, and gradient w.r.t. the input batch.
struct LossGrads {
    loss: f64,
    params: Vec<Tensor>,
    input: Tensor,
}

/// J_l(X, Y; θl). For a label net that reads ĝ, ĝ = G(X; θd) is computed on
/// the same tape, so the input gradient is the total derivative through both
/// paths; θd gradients are never collected here.
fn label_loss(
    net: &NetConfig,
    theta_l: &NetParams,
    theta_d: Option<&NetParams>,
    x: &Tensor,
    y: &[usize],
) -> Result<LossGrads> {
    let mut tape = Tape::new();
    let ids = theta_l.bind(&mut tape);
    let d_ids = theta_d.map(|d| d.bind(&mut tape));
    let xi = tape.leaf(x.clone());
    let logits = match theta_l.role() {
        Role::Label { uses_g } => {
            let g = match (uses_g, d_ids) {
                (true, Some(d)) => Some(domain_forward(&mut tape, net, &d, xi)?.g),
                (true, None) => {
                    return Err(Error::Contract("label network needs a domain network".into()))
                }
                (false, _) => None,
            };
            label_forward(&mut tape, net, &ids, xi, g)?
        }
        role => {
            return Err(Error::Contract(format!(
                "label loss needs label parameters, got {role:?}"
            )))
        }
    };
    let loss = tape.softmax_cross_entropy(logits, y)?;
    let grads = tape.backward(loss)?;
    Ok(LossGrads {
        loss: tape.value(loss).item(),
        params: ids.iter().map(|&i| grads.get(i)).collect(),
        input: grads.get(xi),
    })
}

/// J_d(X, D; θd).
fn domain_loss(net: &NetConfig, theta_d: &NetParams, x: &Tensor, d: &[usize]) -> Result<LossGrads> {
    if theta_d.role() != Role::Domain {
        return Err(Error::Contract("domain loss needs domain parameters".into()));
    }
    let mut tape = Tape::new();
    let ids = theta_d.bind(&mut tape);
    let xi = tape.leaf(x.clone());
    let out = domain_forward(&mut tape, net, &ids, xi)?;
    let loss = tape.softmax_cross_entropy(out.logits, d)?;
    let grads = tape.backward(loss)?;
    Ok(LossGrads {
        loss: tape.value(loss).item(),
        params: ids.iter().map(|&i| grads.get(i)).collect(),
        input: grads.get(xi),
    })
}

/// `x + eps · dir(grad)`, detached from any tape.
fn perturb(x: &Tensor, grad: &Tensor, eps: f64, sign: bool) -> Result<Tensor> {
    if sign {
        let s = grad.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        x.add_scaled(&s, eps)
    } else {
        x.add_scaled(grad, eps)
    }
}

/// `(1 − α)·clean + α·perturbed`, leaving `clean` untouched when α = 0.
fn mix(clean: Vec<Tensor>, perturbed: Option<Vec<Tensor>>, alpha: f64) -> Result<Vec<Tensor>> {
    match perturbed {
        None => Ok(clean),
        Some(p) => clean
            .iter()
            .zip(&p)
            .map(|(c, q)| c.map(|v| (1.0 - alpha) * v).add_scaled(q, alpha))
            .collect(),
    }
}

/// Mean losses observed during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub label_loss: f64,
    pub domain_loss: Option<f64>,
}

/// Plain gradient step on J_l(X, Y; θl). A label net that reads ĝ takes it
/// from `theta_d`, which is not updated.
pub fn erm_step(
    net: &NetConfig,
    theta_l: &mut NetParams,
    theta_d: Option<&NetParams>,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    let lg = label_loss(net, theta_l, theta_d, &batch.x, &batch.y)?;
    optimizer_update(theta_l, &lg.params, opt, cfg.optimizer, cfg.eta)?;
    Ok(StepStats {
        label_loss: lg.loss,
        domain_loss: None,
    })
}

/// Plain gradient step on J_d(X, D; θd).
pub fn domain_erm_step(
    net: &NetConfig,
    theta_d: &mut NetParams,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let dg = domain_loss(net, theta_d, &batch.x, &batch.d)?;
    optimizer_update(theta_d, &dg.params, opt, cfg.optimizer, cfg.eta)?;
    Ok(dg.loss)
}

/// Trains a trunk-only label net on `(1 − α)·J_l(X) + α·J_l(X_p)` with
/// `X_p = X + ε_l·∇_X J_l(X)`.
pub fn labelgrad_step(
    net: &NetConfig,
    theta_l: &mut NetParams,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    cfg.expect(Method::LabelGrad)?;
    if theta_l.role() != (Role::Label { uses_g: false }) {
        return Err(Error::Contract("labelgrad trains a trunk-only label net".into()));
    }
    let clean = label_loss(net, theta_l, None, &batch.x, &batch.y)?;
    check_finite(std::slice::from_ref(&clean.input), opt.step)?;
    let perturbed = if cfg.alpha_l > 0.0 {
        let xp = perturb(&batch.x, &clean.input, cfg.eps_l, cfg.sign_normalize)?;
        Some(label_loss(net, theta_l, None, &xp, &batch.y)?.params)
    } else {
        None
    };
    let grads = mix(clean.params, perturbed, cfg.alpha_l)?;
    optimizer_update(theta_l, &grads, opt, cfg.optimizer, cfg.eta)?;
    Ok(StepStats {
        label_loss: clean.loss,
        domain_loss: None,
    })
}

/// One backward through J_l + J_d, the domain head reading the shared
/// features through a gradient reversal of strength `dan_lambda`.
pub fn dan_step(
    net: &NetConfig,
    params: &mut NetParams,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    cfg.expect(Method::Dan)?;
    if params.role() != Role::Dan {
        return Err(Error::Contract("dan_step needs DAN parameters".into()));
    }
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let xi = tape.leaf(batch.x.clone());
    let out = dan_forward(&mut tape, net, &ids, xi, cfg.dan_lambda)?;
    let jl = tape.softmax_cross_entropy(out.label_logits, &batch.y)?;
    let jd = tape.softmax_cross_entropy(out.domain_logits, &batch.d)?;
    let total = tape.add(jl, jd)?;
    let grads = tape.backward(total)?;
    let grads: Vec<Tensor> = ids.iter().map(|&i| grads.get(i)).collect();
    optimizer_update(params, &grads, opt, cfg.optimizer, cfg.eta)?;
    Ok(StepStats {
        label_loss: tape.value(jl).item(),
        domain_loss: Some(tape.value(jd).item()),
    })
}

/// One simultaneous update of both networks:
///
/// - `X_d = X + ε_l·∇_X J_d(X, D; θd)` and `X_l = X + ε_d·∇_X J_l(X, Y; θl)`,
///   both detached;
/// - θl descends `(1 − α_l)·J_l(X) + α_l·J_l(X_d)` with ĝ recomputed on each
///   input;
/// - θd descends `(1 − α_d)·J_d(X) + α_d·J_d(X_l)`.
///
/// All gradients are taken at the pre-step parameters.
pub fn crossgrad_step(
    net: &NetConfig,
    theta_l: &mut NetParams,
    theta_d: &mut NetParams,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt_l: &mut OptimizerState,
    opt_d: &mut OptimizerState,
) -> Result<StepStats> {
    cfg.expect(Method::CrossGrad)?;
    if theta_l.role() != (Role::Label { uses_g: true }) {
        return Err(Error::Contract("crossgrad trains a label net that reads ĝ".into()));
    }
    let (eps_dom, eps_lab) = cfg.perturbation_eps();
    let jd = domain_loss(net, theta_d, &batch.x, &batch.d)?;
    let jl = label_loss(net, theta_l, Some(theta_d), &batch.x, &batch.y)?;
    check_finite(&[jd.input.clone(), jl.input.clone()], opt_l.step)?;

    let label_perturbed = if cfg.alpha_l > 0.0 {
        let x_d = perturb(&batch.x, &jd.input, eps_dom, cfg.sign_normalize)?;
        Some(label_loss(net, theta_l, Some(theta_d), &x_d, &batch.y)?.params)
    } else {
        None
    };
    let domain_perturbed = if cfg.alpha_d > 0.0 {
        let x_l = perturb(&batch.x, &jl.input, eps_lab, cfg.sign_normalize)?;
        Some(domain_loss(net, theta_d, &x_l, &batch.d)?.params)
    } else {
        None
    };
    let grads_l = mix(jl.params, label_perturbed, cfg.alpha_l)?;
    let grads_d = mix(jd.params, domain_perturbed, cfg.alpha_d)?;
    check_finite(&grads_d, opt_d.step)?;
    optimizer_update(theta_l, &grads_l, opt_l, cfg.optimizer, cfg.eta)?;
    optimizer_update(theta_d, &grads_d, opt_d, cfg.optimizer, cfg.eta)?;
    Ok(StepStats {
        label_loss: jl.loss,
        domain_loss: Some(jd.loss),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    /// 𝕁ᵀ·∇_ĝ J_d, with 𝕁 = ∂ĝ/∂x assembled one ĝ component at a time.
    pub lhs: Tensor,
    /// ∇_x J_d by direct backpropagation.
    pub rhs: Tensor,
    pub max_abs_diff: f64,
}

/// Verifies that the input-space gradient of the domain loss factors through
/// the domain features: ∇_x J_d = 𝕁ᵀ ∇_ĝ J_d.
pub fn chain_rule_identity_check(
    net: &NetConfig,
    theta_d: &NetParams,
    x: &[f64],
    d: usize,
) -> Result<IdentityCheck> {
    let mut shape = vec![1];
    shape.extend(net.input.shape());
    let mut tape = Tape::new();
    let ids = theta_d.bind(&mut tape);
    let xi = tape.leaf(Tensor::new(shape.clone(), x.to_vec())?);
    let out = domain_forward(&mut tape, net, &ids, xi)?;
    let loss = tape.softmax_cross_entropy(out.logits, &[d])?;
    let grads = tape.backward(loss)?;
    let rhs = grads.get(xi);
    let dg = grads.get(out.g);

    let q = net.g_dim;
    let mut lhs = Tensor::zeros(&shape);
    for j in 0..q {
        let mut e = vec![0.0; q];
        e[j] = 1.0;
        let gj = tape.dot(out.g, Tensor::new(vec![1, q], e)?)?;
        let row = tape.backward(gj)?.get(xi);
        lhs = lhs.add_scaled(&row, dg.data()[j])?;
    }
    let max_abs_diff = lhs
        .data()
        .iter()
        .zip(rhs.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(IdentityCheck {
        lhs,
        rhs,
        max_abs_diff,
    })
}

/// Trained networks for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: NetConfig,
    pub method: Method,
    /// θl (or the whole DAN network).
    pub label: NetParams,
    /// θd, present for CrossGrad.
    pub domain: Option<NetParams>,
}

impl Model {
    pub fn init(net: &NetConfig, method: Method, seed: u64) -> Result<Self> {
        net.validate()?;
        let (label_role, with_domain) = match method {
            Method::Baseline | Method::LabelGrad => (Role::Label { uses_g: false }, false),
            Method::CrossGrad => (Role::Label { uses_g: true }, true),
            Method::Dan => (Role::Dan, false),
        };
        Ok(Self {
            net: net.clone(),
            method,
            label: init_params(net, label_role, seed)?,
            domain: if with_domain {
                Some(init_params(net, Role::Domain, seed)?)
            } else {
                None
            },
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        predict_label(&self.net, &self.label, self.domain.as_ref(), x)
    }

    /// Predictions for every example, evaluated in chunks.
    pub fn predict_dataset(&self, ds: &DomainDataset) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut out = Vec::with_capacity(ds.len());
        for chunk in idx.chunks(512) {
            out.extend(self.predict(&ds.stack(chunk))?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, ds: &DomainDataset) -> Result<f64> {
        let pred = self.predict_dataset(ds)?;
        let hits = pred.iter().zip(&ds.examples).filter(|(p, e)| **p == e.y).count();
        Ok(hits as f64 / ds.len() as f64)
    }

    /// All tensors, names prefixed `label/` or `domain/`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .label
            .tensors()
            .iter()
            .map(|(n, t)| (format!("label/{n}"), t.clone()))
            .collect();
        if let Some(d) = &self.domain {
            out.extend(d.tensors().iter().map(|(n, t)| (format!("domain/{n}"), t.clone())));
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let strip = |prefix: &str| -> Vec<(String, Tensor)> {
            tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        self.label.load_from(&strip("label/"))?;
        if let Some(d) = self.domain.as_mut() {
            d.load_from(&strip("domain/"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "step,split,metric,value";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.split, r.metric, r.value)?;
    }
    Ok(())
}

/// Inputs to [`train_loop`] besides the configs.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a DomainDataset,
    pub val: Option<&'a DomainDataset>,
    /// Source domain ids that must never appear in a training batch.
    pub forbidden_sources: &'a [usize],
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a DomainDataset, val: Option<&'a DomainDataset>) -> Self {
        Self {
            train,
            val,
            forbidden_sources: &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (final ones without a
    /// validation set).
    pub model: Model,
    /// Mean training label loss, one entry per `log_every` steps.
    pub loss_curve: Vec<(usize, f64)>,
    /// Validation accuracy after each epoch.
    pub val_curve: Vec<(usize, f64)>,
    pub best_val: Option<f64>,
    pub metrics: Vec<MetricRow>,
}

fn audit_batch(batch: &Batch, ds: &DomainDataset, forbidden: &[usize]) -> Result<()> {
    for &d in &batch.d {
        let source = ds.domains[d].source;
        if forbidden.contains(&source) {
            return Err(Error::Consistency(format!(
                "training batch contains held-out source domain {source}"
            )));
        }
    }
    Ok(())
}

/// Runs `steps_n` steps of the configured method, cycling through reshuffled
/// epochs, and keeps the parameters with the best validation accuracy.
pub fn train_loop(cfg: &TrainerConfig, net: &NetConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = data.train;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if net.num_domains != train.domain_count() && cfg.method != Method::Baseline {
        return Err(Error::Contract(format!(
            "net expects {} domains, training split has {}",
            net.num_domains,
            train.domain_count()
        )));
    }
    let mut model = Model::init(net, cfg.method, cfg.seed)?;
    let mut opt_l = OptimizerState::new(&model.label);
    let mut opt_d = model.domain.as_ref().map(OptimizerState::new);

    let mut metrics = Vec::new();
    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut window = (0.0, 0.0, 0usize);
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps_n {
        let batches = make_batches(train, cfg.batch_size, cfg.seed, epoch)?;
        for batch in &batches {
            if step == cfg.steps_n {
                break;
            }
            audit_batch(batch, train, data.forbidden_sources)?;
            let stats = match cfg.method {
                Method::Baseline => erm_step(net, &mut model.label, None, batch, cfg, &mut opt_l)?,
                Method::LabelGrad => labelgrad_step(net, &mut model.label, batch, cfg, &mut opt_l)?,
                Method::Dan => dan_step(net, &mut model.label, batch, cfg, &mut opt_l)?,
                Method::CrossGrad => crossgrad_step(
                    net,
                    &mut model.label,
                    model.domain.as_mut().expect("crossgrad model has θd"),
                    batch,
                    cfg,
                    &mut opt_l,
                    opt_d.as_mut().expect("crossgrad model has θd state"),
                )?,
            };
            step += 1;
            window.0 += stats.label_loss;
            window.1 += stats.domain_loss.unwrap_or(0.0);
            window.2 += 1;
            if step % cfg.log_every == 0 {
                let n = window.2 as f64;
                loss_curve.push((step, window.0 / n));
                metrics.push(MetricRow {
                    step,
                    split: "train",
                    metric: "label_loss",
                    value: window.0 / n,
                });
                if stats.domain_loss.is_some() {
                    metrics.push(MetricRow {
                        step,
                        split: "train",
                        metric: "domain_loss",
                        value: window.1 / n,
                    });
                }
                window = (0.0, 0.0, 0);
            }
        }
        epoch += 1;
        if let Some(val) = data.val {
            let acc = model.accuracy(val)?;
            val_curve.push((step, acc));
            metrics.push(MetricRow {
                step,
                split: "val",
                metric: "accuracy",
                value: acc,
            });
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
    }
    let (best_val, model) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        loss_curve,
        val_curve,
        best_val,
        metrics,
    })
}
