//! Leave-one-domain-out evaluation, hyperparameter sweeps, and embedding
//! analysis (PCA, interpolation between domains, label-absence probe).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{split_by_domain, DomainDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::nets::{argmax_rows, domain_forward, domain_logits, NetConfig, NetParams};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;
use crate::trainers::{train_loop, Method, Model, TrainData, TrainOutcome, TrainerConfig};

/// α grid for the perturbation weight (shared by α_l and α_d).
pub const ALPHA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
/// Multipliers applied to the per-dataset base ε.
pub const EPS_MULTIPLIERS: [f64; 4] = [0.5, 1.0, 2.0, 2.5];
pub const BASE_EPS_CLOUDS: f64 = 1.0;
pub const BASE_EPS_GLYPHS: f64 = 0.5;

/// Accuracy per source domain id and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainAccuracy {
    /// `source id -> (accuracy, example count)`.
    pub per_domain: BTreeMap<usize, (f64, usize)>,
    pub overall: f64,
}

pub fn accuracy_from_predictions(ds: &DomainDataset, predictions: &[usize]) -> Result<DomainAccuracy> {
    if ds.is_empty() || predictions.len() != ds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} examples",
            predictions.len(),
            ds.len()
        )));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (ex, &p) in ds.examples.iter().zip(predictions) {
        let entry = tally.entry(ds.domains[ex.d].source).or_default();
        entry.0 += usize::from(p == ex.y);
        entry.1 += 1;
    }
    let hits: usize = tally.values().map(|t| t.0).sum();
    Ok(DomainAccuracy {
        per_domain: tally
            .into_iter()
            .map(|(d, (h, n))| (d, (h as f64 / n as f64, n)))
            .collect(),
        overall: hits as f64 / ds.len() as f64,
    })
}

pub fn accuracy_by_domain(model: &Model, ds: &DomainDataset) -> Result<DomainAccuracy> {
    accuracy_from_predictions(ds, &model.predict_dataset(ds)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub accuracy: DomainAccuracy,
    pub loss_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    pub config: TrainerConfig,
    pub seed: u64,
}

/// How LODO picks the validation data from the remaining domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationRule {
    /// The remaining domain with the lowest angle.
    LowestRemaining,
    /// The nearest remaining domain by angle, the lower one on ties.
    Adjacent,
}

impl Default for ValidationRule {
    fn default() -> Self {
        ValidationRule::LowestRemaining
    }
}

impl ValidationRule {
    pub fn pick(self, ds: &DomainDataset, held_out: usize) -> usize {
        let remaining = (0..ds.domain_count()).filter(|&d| d != held_out);
        let angle = |d: usize| ds.domains[d].angle;
        let key = |d: usize| match self {
            ValidationRule::LowestRemaining => (angle(d), 0.0),
            ValidationRule::Adjacent => ((angle(d) - angle(held_out)).abs(), angle(d)),
        };
        remaining
            .min_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite angles"))
            .expect("at least one remaining domain")
    }
}

/// One trained grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub eps_mult: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub best: TrainerConfig,
    pub best_point: GridPoint,
    pub best_outcome: TrainOutcome,
    pub points: Vec<GridPoint>,
}

/// Grid settings for [`hyperparam_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSpec {
    pub base_eps: f64,
    /// Set α_d = α_l at every grid point; otherwise α_d keeps its base value.
    pub tie_alpha: bool,
}

impl SweepSpec {
    pub fn new(base_eps: f64) -> Self {
        Self {
            base_eps,
            tie_alpha: true,
        }
    }

    /// The config for one grid point: α_l = α, ε_l = ε_d = mult · base ε.
    pub fn config(&self, base: &TrainerConfig, alpha: f64, eps_mult: f64) -> TrainerConfig {
        TrainerConfig {
            alpha_l: alpha,
            alpha_d: if self.tie_alpha { alpha } else { base.alpha_d },
            eps_l: eps_mult * self.base_eps,
            eps_d: eps_mult * self.base_eps,
            ..base.clone()
        }
    }
}

/// Trains every (α, ε) grid point for a perturbative method (a single run
/// otherwise) and keeps the best validation accuracy; ties go to smaller ε,
/// then smaller α.
pub fn hyperparam_sweep(
    base: &TrainerConfig,
    net: &NetConfig,
    data: TrainData<'_>,
    spec: SweepSpec,
) -> Result<SweepResult> {
    if data.val.map_or(true, |v| v.is_empty()) {
        return Err(Error::Contract("hyperparameter sweep needs a validation split".into()));
    }
    let grid: Vec<(f64, f64)> = if base.method.is_perturbative() {
        EPS_MULTIPLIERS
            .iter()
            .flat_map(|&e| ALPHA_GRID.iter().map(move |&a| (a, e)))
            .collect()
    } else {
        vec![(0.0, 0.0)]
    };
    let mut points: Vec<GridPoint> = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, TrainerConfig, TrainOutcome)> = None;
    for (alpha, eps_mult) in grid {
        let cfg = if base.method.is_perturbative() {
            spec.config(base, alpha, eps_mult)
        } else {
            base.clone()
        };
        let outcome = train_loop(&cfg, net, data)?;
        let val_acc = outcome.best_val.expect("validation split present");
        let better = best
            .as_ref()
            .map_or(true, |(i, _, _)| val_acc > points[*i].val_acc);
        points.push(GridPoint {
            alpha,
            eps_mult,
            val_acc,
        });
        if better {
            best = Some((points.len() - 1, cfg, outcome));
        }
    }
    let (i, best, best_outcome) = best.expect("grid is nonempty");
    Ok(SweepResult {
        best,
        best_point: points[i].clone(),
        best_outcome,
        points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LodoRow {
    pub method: Method,
    /// Source domain id of the held-out test domain.
    pub held_out_domain: usize,
    pub seed: u64,
    pub alpha: f64,
    pub eps_mult: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

pub const RESULTS_HEADER: &str = "method,held_out_domain,seed,alpha,eps_mult,val_acc,test_acc";

pub fn write_results_csv<W: Write>(mut w: W, rows: &[LodoRow]) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method, r.held_out_domain, r.seed, r.alpha, r.eps_mult, r.val_acc, r.test_acc
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LodoPlan<'a> {
    pub methods: &'a [Method],
    pub seeds: &'a [u64],
    /// Domains to hold out in turn; all of them when `None`.
    pub held_out: Option<&'a [usize]>,
    pub rule: ValidationRule,
    /// Select (α, ε) on validation accuracy; `None` trains `base` as is.
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone)]
pub struct LodoRun {
    pub row: LodoRow,
    pub outcome: TrainOutcome,
}

/// For each held-out domain: reserve one remaining domain for validation,
/// train on the rest, pick hyperparameters on validation accuracy, and report
/// test accuracy per method and seed. `on_run` sees each finished run.
pub fn leave_one_domain_out(
    ds: &DomainDataset,
    base: &TrainerConfig,
    net: &NetConfig,
    plan: &LodoPlan<'_>,
    mut on_run: impl FnMut(&LodoRun),
) -> Result<Vec<LodoRow>> {
    if ds.domain_count() < 3 {
        return Err(Error::Contract(format!(
            "leave-one-domain-out needs ≥ 3 domains, got {}",
            ds.domain_count()
        )));
    }
    let all: Vec<usize> = (0..ds.domain_count()).collect();
    let held_out = plan.held_out.unwrap_or(&all);
    let mut net = net.clone();
    net.num_domains = ds.domain_count() - 2;
    let mut rows = Vec::new();
    for &test in held_out {
        if test >= ds.domain_count() {
            return Err(Error::Contract(format!("no domain {test} to hold out")));
        }
        let val = plan.rule.pick(ds, test);
        let split = split_by_domain(ds, &SplitSpec::leave_out(ds.domain_count(), test, Some(val)))?;
        let val_ds = split.val.as_ref().expect("one validation domain");
        let test_ds = split.test.as_ref().expect("one test domain");
        if val_ds.domains.iter().any(|m| m.source == test) {
            return Err(Error::Consistency("validation split contains the test domain".into()));
        }
        let forbidden = [test, val];
        let data = TrainData {
            train: &split.train,
            val: Some(val_ds),
            forbidden_sources: &forbidden,
        };
        for &method in plan.methods {
            for &seed in plan.seeds {
                let cfg = TrainerConfig {
                    method,
                    seed,
                    ..base.clone()
                };
                let (point, outcome) = match plan.sweep {
                    Some(spec) => {
                        let sweep = hyperparam_sweep(&cfg, &net, data, spec)?;
                        (sweep.best_point, sweep.best_outcome)
                    }
                    None => {
                        let outcome = train_loop(&cfg, &net, data)?;
                        let point = GridPoint {
                            alpha: if method.is_perturbative() { cfg.alpha_l } else { 0.0 },
                            eps_mult: 0.0,
                            val_acc: outcome.best_val.expect("validation split present"),
                        };
                        (point, outcome)
                    }
                };
                let test_acc = outcome.model.accuracy(test_ds)?;
                let row = LodoRow {
                    method,
                    held_out_domain: test,
                    seed,
                    alpha: point.alpha,
                    eps_mult: point.eps_mult,
                    val_acc: point.val_acc,
                    test_acc,
                };
                on_run(&LodoRun {
                    row: row.clone(),
                    outcome,
                });
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `(method, held-out domain) -> (mean, std)` of test accuracy over seeds.
pub fn summarize(rows: &[LodoRow]) -> BTreeMap<(Method, usize), (f64, f64)> {
    let mut groups: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.held_out_domain))
            .or_default()
            .push(r.test_acc);
    }
    groups.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub domain: usize,
    pub label: usize,
    pub perturbed: bool,
    pub g: Vec<f64>,
}

/// ĝ for every example (domain ids are source ids). With `perturb`, also
/// ĝ of `x + eps·∇_x ℓ_d(x)`, where ℓ_d is the example's own domain loss
/// against the domain θd predicts for it.
pub fn export_embeddings(
    net: &NetConfig,
    theta_d: &NetParams,
    ds: &DomainDataset,
    perturb: bool,
    eps: f64,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(ds.len() * (1 + usize::from(perturb)));
    let mut extra = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let x = ds.stack(chunk);
        let targets = argmax_rows(&domain_logits(net, theta_d, &x)?);
        let mut tape = Tape::new();
        let ids = theta_d.bind(&mut tape);
        let xi = tape.leaf(x.clone());
        let out = domain_forward(&mut tape, net, &ids, xi)?;
        let g = tape.value(out.g).clone();
        let row_of = |i: usize, g: &Tensor, k: usize, perturbed: bool| {
            let ex = &ds.examples[i];
            EmbeddingRow {
                domain: ds.domains[ex.d].source,
                label: ex.y,
                perturbed,
                g: g.row(k).to_vec(),
            }
        };
        rows.extend(chunk.iter().enumerate().map(|(k, &i)| row_of(i, &g, k, false)));
        if perturb {
            let loss = tape.softmax_cross_entropy(out.logits, &targets)?;
            // The batch-mean loss scaled back to per-example gradients.
            let grad = tape.backward(loss)?.get(xi);
            let xp = x.add_scaled(&grad, eps * chunk.len() as f64)?;
            let gp = crate::nets::domain_features(net, theta_d, &xp)?;
            extra.extend(chunk.iter().enumerate().map(|(k, &i)| row_of(i, &gp, k, true)));
        }
    }
    rows.extend(extra);
    Ok(rows)
}

/// Last hidden label-trunk activations of a baseline model, shaped like
/// unperturbed embedding rows, as a control for the label probe.
pub fn label_feature_rows(net: &NetConfig, theta_l: &NetParams, ds: &DomainDataset) -> Result<Vec<EmbeddingRow>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(256) {
        let h = crate::nets::label_features(net, theta_l, &ds.stack(chunk))?;
        rows.extend(chunk.iter().enumerate().map(|(k, &i)| {
            let ex = &ds.examples[i];
            EmbeddingRow {
                domain: ds.domains[ex.d].source,
                label: ex.y,
                perturbed: false,
                g: h.row(k).to_vec(),
            }
        }));
    }
    Ok(rows)
}

pub fn write_embeddings_csv<W: Write>(mut w: W, rows: &[EmbeddingRow]) -> Result<()> {
    let q = rows.first().map_or(0, |r| r.g.len());
    let cols: Vec<String> = (0..q).map(|i| format!("g_{i}")).collect();
    writeln!(w, "domain,label,perturbed,{}", cols.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.g.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", r.domain, r.label, r.perturbed, vals.join(","))?;
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations,
/// run until the off-diagonal Frobenius norm is ≤ 1e-12 (relative to the
/// matrix norm when that exceeds 1). Returns eigenvalues in descending order
/// and the matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("jacobi_eigen needs a square matrix".into()));
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let off = |a: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > 1e-12 * scale {
        sweeps += 1;
        if sweeps > 100 {
            return Err(Error::Consistency("Jacobi iteration did not converge".into()));
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).expect("finite eigenvalues"));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// All eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Top-k unit components; the largest-magnitude entry of each is positive.
    pub components: Vec<Vec<f64>>,
    /// k coordinates per input row.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(g).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Principal components of the (n − 1)-normalized covariance of `rows`.
pub fn pca_project(rows: &[EmbeddingRow], k: usize) -> Result<Pca> {
    let q = rows.first().map_or(0, |r| r.g.len());
    if k == 0 || k > q {
        return Err(Error::Contract(format!("k = {k} must lie in 1..={q}")));
    }
    if rows.len() < k + 1 {
        return Err(Error::Contract(format!(
            "pca needs ≥ {} rows, got {}",
            k + 1,
            rows.len()
        )));
    }
    if rows.iter().any(|r| r.g.len() != q) {
        return Err(Error::Dimension("embedding rows differ in width".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..q).map(|j| rows.iter().map(|r| r.g[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; q]; q];
    for r in rows {
        for i in 0..q {
            let di = r.g[i] - mean[i];
            for j in i..q {
                cov[i][j] += di * (r.g[j] - mean[j]);
            }
        }
    }
    for i in 0..q {
        for j in i..q {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(&cov)?;
    let components: Vec<Vec<f64>> = vectors
        .into_iter()
        .take(k)
        .map(|mut c| {
            let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
            c
        })
        .collect();
    let mut pca = Pca {
        mean,
        eigenvalues,
        components,
        projected: Vec::new(),
    };
    pca.projected = rows.iter().map(|r| pca.project(&r.g)).collect();
    Ok(pca)
}

pub fn write_pca_csv<W: Write>(mut w: W, rows: &[EmbeddingRow], pca: &Pca) -> Result<()> {
    let cols: Vec<String> = (1..=pca.components.len()).map(|i| format!("pc_{i}")).collect();
    writeln!(w, "domain,label,perturbed,{}", cols.join(","))?;
    for (r, p) in rows.iter().zip(&pca.projected) {
        let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", r.domain, r.label, r.perturbed, vals.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationScore {
    /// The middle domain's mean projects strictly between its neighbors'
    /// means on the first principal component.
    pub betweenness: bool,
    /// How much closer the perturbed middle-domain mean sits to the nearer
    /// neighbor mean than the unperturbed one; 0 without perturbed rows.
    pub shift_gain: f64,
}

fn domain_mean(rows: &[EmbeddingRow], domain: usize, perturbed: bool) -> Option<Vec<f64>> {
    let sel: Vec<&EmbeddingRow> = rows
        .iter()
        .filter(|r| r.domain == domain && r.perturbed == perturbed)
        .collect();
    let first = sel.first()?;
    let mut m = vec![0.0; first.g.len()];
    for r in &sel {
        for (a, b) in m.iter_mut().zip(&r.g) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= sel.len() as f64);
    Some(m)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Scores the domain triple `(a, mid, b)`; the first principal component is
/// fitted on all unperturbed rows.
pub fn interpolation_score(rows: &[EmbeddingRow], triple: (usize, usize, usize)) -> Result<InterpolationScore> {
    let (a, mid, b) = triple;
    let mean = |d: usize| {
        domain_mean(rows, d, false)
            .ok_or_else(|| Error::Contract(format!("domain {d} has no unperturbed rows")))
    };
    let (ma, mm, mb) = (mean(a)?, mean(mid)?, mean(b)?);
    let clean: Vec<EmbeddingRow> = rows.iter().filter(|r| !r.perturbed).cloned().collect();
    let pca = pca_project(&clean, 1)?;
    let (pa, pm, pb) = (pca.project(&ma)[0], pca.project(&mm)[0], pca.project(&mb)[0]);
    let betweenness = (pa < pm && pm < pb) || (pb < pm && pm < pa);
    let shift_gain = match domain_mean(rows, mid, true) {
        Some(mp) => {
            let near = if dist(&mm, &ma) <= dist(&mm, &mb) { &ma } else { &mb };
            dist(&mm, near) - dist(&mp, near)
        }
        None => 0.0,
    };
    Ok(InterpolationScore {
        betweenness,
        shift_gain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy of the linear probe.
    pub accuracy: f64,
    /// 1 / number of labels present.
    pub chance: f64,
}

/// Softmax regression from g to y (500 full-batch gradient steps, η = 0.1,
/// features standardized on the training part) fitted on a seeded 80% of
/// the rows and scored on the other 20%.
pub fn label_absence_probe(rows: &[EmbeddingRow], seed: u64) -> Result<ProbeResult> {
    let labels: BTreeSet<usize> = rows.iter().map(|r| r.label).collect();
    if labels.len() < 2 {
        return Err(Error::Contract("probe needs at least two labels".into()));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let q = rows[0].g.len();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Probe));
    let cut = (rows.len() * 4) / 5;
    let (train, test) = order.split_at(cut.clamp(1, rows.len() - 1));

    let nt = train.len() as f64;
    let mean: Vec<f64> = (0..q).map(|j| train.iter().map(|&i| rows[i].g[j]).sum::<f64>() / nt).collect();
    let sd: Vec<f64> = (0..q)
        .map(|j| {
            let v = train.iter().map(|&i| (rows[i].g[j] - mean[j]).powi(2)).sum::<f64>() / nt;
            v.sqrt()
        })
        .collect();
    let feat = |i: usize| -> Vec<f64> {
        (0..q)
            .map(|j| if sd[j] > 1e-12 { (rows[i].g[j] - mean[j]) / sd[j] } else { 0.0 })
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| feat(i)).collect();

    let mut w = vec![vec![0.0; classes]; q];
    let mut b = vec![0.0; classes];
    let logits = |w: &[Vec<f64>], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + x.iter().zip(w).map(|(xv, wr)| xv * wr[c]).sum::<f64>())
            .collect()
    };
    for _ in 0..500 {
        let mut gw = vec![vec![0.0; classes]; q];
        let mut gb = vec![0.0; classes];
        for (x, &i) in xs.iter().zip(train) {
            let z = logits(&w, &b, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / s - f64::from(u8::from(c == rows[i].label));
                gb[c] += d / nt;
                for j in 0..q {
                    gw[j][c] += d * x[j] / nt;
                }
            }
        }
        for c in 0..classes {
            b[c] -= 0.1 * gb[c];
            for j in 0..q {
                w[j][c] -= 0.1 * gw[j][c];
            }
        }
    }
    let hits = test
        .iter()
        .filter(|&&i| {
            let z = logits(&w, &b, &feat(i));
            argmax_rows(&Tensor::vector(z))[0] == rows[i].label
        })
        .count();
    Ok(ProbeResult {
        accuracy: hits as f64 / test.len() as f64,
        chance: 1.0 / labels.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCountRow {
    pub train_domains: usize,
    pub method: Method,
    pub seed: u64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCountStudy {
    pub rows: Vec<DomainCountRow>,
    /// `(count, method) -> mean accuracy − mean baseline accuracy`.
    pub gains: BTreeMap<(usize, Method), f64>,
}

/// Trains each method on `train_angles(count)` domains for every count and
/// scores it on the fixed `test` dataset. `make` builds a dataset from a list
/// of angles.
pub fn domain_count_study(
    make: &dyn Fn(&[f64]) -> Result<DomainDataset>,
    counts: &[usize],
    test_angles: &[f64],
    base: &TrainerConfig,
    net: &NetConfig,
    methods: &[Method],
    seeds: &[u64],
) -> Result<DomainCountStudy> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("domain counts must be strictly ascending".into()));
    }
    let test = make(test_angles)?;
    let mut rows = Vec::new();
    let mut gains = BTreeMap::new();
    for &count in counts {
        let angles = spread_angles(count, 0.0, 75.0);
        if angles.iter().any(|a| test_angles.iter().any(|t| (a - t).abs() < 1e-9)) {
            return Err(Error::Contract(format!(
                "training angles for {count} domains overlap the test angles"
            )));
        }
        let train = make(&angles)?;
        let mut net = net.clone();
        net.num_domains = count;
        let mut means = BTreeMap::new();
        for &method in methods.iter().chain([Method::Baseline].iter()) {
            if means.contains_key(&method) {
                continue;
            }
            let mut accs = Vec::new();
            for &seed in seeds {
                let cfg = TrainerConfig {
                    method,
                    seed,
                    ..base.clone()
                };
                let out = train_loop(&cfg, &net, TrainData::new(&train, None))?;
                let acc = out.model.accuracy(&test)?;
                accs.push(acc);
                rows.push(DomainCountRow {
                    train_domains: count,
                    method,
                    seed,
                    test_acc: acc,
                });
            }
            means.insert(method, mean_std(&accs).0);
        }
        for (&m, &v) in &means {
            gains.insert((count, m), v - means[&Method::Baseline]);
        }
    }
    Ok(DomainCountStudy { rows, gains })
}

/// `count` evenly spaced angles from `lo` to `hi` inclusive.
pub fn spread_angles(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}
