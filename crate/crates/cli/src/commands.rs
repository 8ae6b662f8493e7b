use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crossgrad::checkpoint;
use crossgrad::data::{split_by_domain, DomainDataset, Split, SplitSpec};
use crossgrad::eval::{
    export_embeddings, hyperparam_sweep, interpolation_score, label_absence_probe,
    leave_one_domain_out, pca_project, summarize, write_embeddings_csv, write_pca_csv,
    write_results_csv, LodoPlan, LodoRow, SweepSpec,
};
use crossgrad::nets::{init_params, Role};
use crossgrad::trainers::{train_loop, write_metrics_csv, TrainData};
use crossgrad::verify::{check_ops, identity_sweep, CHECKED_OPS, IDENTITY_TOLERANCE};
use crossgrad::{Method, Tensor, TrainerConfig};

use crate::config::{build_dataset, load_config, LoadedConfig, RunConfig};
use crate::{CliError, Command};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const RESULTS_CSV: &str = "results.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "method,alpha_l,alpha_d,eps_mult,val_acc";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const PCA_CSV: &str = "pca.csv";
pub const DATASET_CSV: &str = "dataset.csv";

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config, out: dir } => cmd_train(&config, dir, out),
        Command::Lodo {
            config,
            methods,
            seeds,
            out: dir,
        } => cmd_lodo(&config, methods.as_deref(), seeds, dir, out),
        Command::Sweep { config, out: dir } => cmd_sweep(&config, dir, out),
        Command::Embed {
            checkpoint,
            config,
            perturb,
            out: dir,
        } => cmd_embed(&checkpoint, &config, perturb, dir, out),
        Command::Gradcheck {
            seed,
            configs,
            nets,
            inject_fault,
        } => cmd_gradcheck(seed, configs, nets, inject_fault.as_deref(), out),
        Command::Export { config, out: dir } => cmd_export(&config, dir, out),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.eval.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set eval.out_dir".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(dir: &Path, resolved: &RunConfig) -> Result<()> {
    let text = resolved.to_toml()?;
    fs::write(dir.join(RESOLVED_CONFIG), text)
        .map_err(|e| CliError::Io(format!("cannot write {RESOLVED_CONFIG}: {e}")))
}

/// Train / validation / test split from `eval.val_domains` and
/// `eval.test_domains`; everything else trains.
fn fixed_split(cfg: &RunConfig, ds: &DomainDataset) -> Result<Split> {
    let held: BTreeSet<usize> = cfg.eval.val_domains.iter().chain(&cfg.eval.test_domains).copied().collect();
    let train = (0..ds.domain_count()).filter(|d| !held.contains(d));
    let spec = SplitSpec::new(train, cfg.eval.val_domains.clone(), cfg.eval.test_domains.clone());
    split_by_domain(ds, &spec).map_err(|e| CliError::Config(format!("[eval] split: {e}")))
}

fn held_sources(cfg: &RunConfig) -> Vec<usize> {
    cfg.eval.val_domains.iter().chain(&cfg.eval.test_domains).copied().collect()
}

fn load(config: &Path) -> Result<(LoadedConfig, DomainDataset)> {
    let loaded = load_config(config)?;
    let ds = build_dataset(&loaded.config.dataset, &loaded.base_dir)?;
    Ok((loaded, ds))
}

pub fn cmd_train(config: &Path, dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let (loaded, ds) = load(config)?;
    let cfg = &loaded.config;
    cfg.trainer.validate().map_err(|e| CliError::Config(format!("[trainer]: {e}")))?;
    let dir = out_dir(dir, cfg)?;
    let split = fixed_split(cfg, &ds)?;
    let net = cfg.net_for(&split.train, split.train.domain_count().max(2))?;
    echo_config(&dir, &cfg.resolved(&net))?;

    let forbidden = held_sources(cfg);
    let data = TrainData {
        train: &split.train,
        val: split.val.as_ref(),
        forbidden_sources: &forbidden,
    };
    let outcome = train_loop(&cfg.trainer, &net, data)?;
    write_metrics_csv(create(&dir.join(METRICS_CSV))?, &outcome.metrics)?;
    checkpoint::save(&dir.join(CHECKPOINT), &outcome.model.named_tensors())?;

    writeln!(out, "method={}", cfg.trainer.method)?;
    writeln!(out, "steps={}", cfg.trainer.steps_n)?;
    if let Some(&(_, loss)) = outcome.loss_curve.last() {
        writeln!(out, "final_label_loss={loss}")?;
    }
    writeln!(out, "train_acc={}", outcome.model.accuracy(&split.train)?)?;
    if let Some(v) = outcome.best_val {
        writeln!(out, "best_val_acc={v}")?;
    }
    if let Some(test) = &split.test {
        writeln!(out, "test_acc={}", outcome.model.accuracy(test)?)?;
    }
    Ok(())
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Method>().map_err(|e| CliError::Config(format!("--methods: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(CliError::Config("--methods: empty methods list".into()));
    }
    Ok(methods)
}

/// Methods as rows, held-out domains (by angle) as columns, mean ± std of
/// test accuracy in percent.
pub fn format_summary(rows: &[LodoRow], ds: &DomainDataset) -> String {
    let stats = summarize(rows);
    let mut methods: Vec<Method> = Vec::new();
    let mut domains: Vec<usize> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !domains.contains(&r.held_out_domain) {
            domains.push(r.held_out_domain);
        }
    }
    let mut s = format!("{:<10}", "method");
    for &d in &domains {
        s += &format!(" {:>13}", format!("M{}", ds.domains[d].angle));
    }
    s.push('\n');
    for &m in &methods {
        s += &format!("{:<10}", m.name());
        for &d in &domains {
            let (mean, sd) = stats[&(m, d)];
            s += &format!(" {:>13}", format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * sd));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_lodo(
    config: &Path,
    methods: Option<&str>,
    seeds: Option<usize>,
    dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let (loaded, ds) = load(config)?;
    let mut cfg = loaded.config;
    if let Some(list) = methods {
        cfg.eval.methods = parse_methods(list)?;
    }
    if let Some(n) = seeds {
        cfg.eval.seeds = n;
    }
    if cfg.eval.methods.is_empty() {
        return Err(CliError::Config("[eval]: empty methods list".into()));
    }
    if cfg.eval.seeds == 0 {
        return Err(CliError::Config("[eval]: seeds must be ≥ 1".into()));
    }
    if ds.domain_count() < 3 {
        return Err(CliError::Config(format!(
            "[dataset]: leave-one-domain-out needs ≥ 3 domains, got {}",
            ds.domain_count()
        )));
    }
    cfg.trainer.validate().map_err(|e| CliError::Config(format!("[trainer]: {e}")))?;
    let dir = out_dir(dir, &cfg)?;
    let net = cfg.net_for(&ds, ds.domain_count() - 2)?;
    echo_config(&dir, &cfg.resolved(&net))?;

    let seed_list = cfg.eval.seed_list();
    let plan = LodoPlan {
        methods: &cfg.eval.methods,
        seeds: &seed_list,
        held_out: cfg.eval.held_out.as_deref(),
        rule: cfg.eval.validation,
        sweep: cfg.eval.sweep.then(|| SweepSpec {
            base_eps: cfg.base_eps(),
            tie_alpha: cfg.eval.tie_alpha,
        }),
    };
    let ckpt_dir = dir.join("checkpoints");
    if cfg.eval.save_checkpoints {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut save_error = None;
    let rows = leave_one_domain_out(&ds, &cfg.trainer, &net, &plan, |run| {
        if cfg.eval.save_checkpoints && save_error.is_none() {
            let r = &run.row;
            let path = ckpt_dir.join(format!("{}_d{}_s{}.ckpt", r.method, r.held_out_domain, r.seed));
            if let Err(e) = checkpoint::save(&path, &run.outcome.model.named_tensors()) {
                save_error = Some(e);
            }
        }
    })?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    write_results_csv(create(&dir.join(RESULTS_CSV))?, &rows)?;
    write!(out, "{}", format_summary(&rows, &ds))?;
    Ok(())
}

pub fn cmd_sweep(config: &Path, dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let (loaded, ds) = load(config)?;
    let cfg = &loaded.config;
    if cfg.eval.val_domains.is_empty() {
        return Err(CliError::Config("[eval]: sweep needs val_domains".into()));
    }
    if cfg.eval.methods.is_empty() {
        return Err(CliError::Config("[eval]: empty methods list".into()));
    }
    cfg.trainer.validate().map_err(|e| CliError::Config(format!("[trainer]: {e}")))?;
    let dir = out_dir(dir, cfg)?;
    let split = fixed_split(cfg, &ds)?;
    let net = cfg.net_for(&split.train, split.train.domain_count().max(2))?;
    let resolved = cfg.resolved(&net);
    echo_config(&dir, &resolved)?;

    let forbidden = held_sources(cfg);
    let data = TrainData {
        train: &split.train,
        val: split.val.as_ref(),
        forbidden_sources: &forbidden,
    };
    let spec = SweepSpec {
        base_eps: cfg.base_eps(),
        tie_alpha: cfg.eval.tie_alpha,
    };
    let mut csv = create(&dir.join(SWEEP_CSV))?;
    writeln!(csv, "{SWEEP_HEADER}")?;
    for &method in &cfg.eval.methods {
        let base = TrainerConfig {
            method,
            ..cfg.trainer.clone()
        };
        let sweep = hyperparam_sweep(&base, &net, data, spec)?;
        for p in &sweep.points {
            let (alpha_l, alpha_d) = if method.is_perturbative() {
                let c = spec.config(&base, p.alpha, p.eps_mult);
                (c.alpha_l, c.alpha_d)
            } else {
                (0.0, 0.0)
            };
            writeln!(csv, "{method},{alpha_l},{alpha_d},{},{}", p.eps_mult, p.val_acc)?;
        }
        let mut best = resolved.clone();
        best.trainer = sweep.best.clone();
        best.eval.methods = vec![method];
        fs::write(dir.join(format!("best_{method}.toml")), best.to_toml()?)?;
        let b = &sweep.best_point;
        writeln!(
            out,
            "best method={method} alpha={} eps_mult={} val_acc={}",
            b.alpha, b.eps_mult, b.val_acc
        )?;
    }
    csv.flush()?;
    Ok(())
}

/// `(a, mid, b)` source domain ids for the interpolation score: the
/// configured angles, else the test domain and its angle neighbours, else
/// the middle three domains.
fn pick_triple(cfg: &RunConfig, ds: &DomainDataset) -> Result<(usize, usize, usize)> {
    if let Some([a, m, b]) = cfg.eval.triple {
        let find = |angle: f64| {
            ds.domain_by_angle(angle)
                .ok_or_else(|| CliError::Config(format!("[eval] triple: no domain at {angle}°")))
        };
        return Ok((find(a)?, find(m)?, find(b)?));
    }
    let mut by_angle: Vec<usize> = (0..ds.domain_count()).collect();
    by_angle.sort_by(|&x, &y| ds.domains[x].angle.total_cmp(&ds.domains[y].angle));
    if by_angle.len() < 3 {
        return Err(CliError::Config("[dataset]: embedding analysis needs ≥ 3 domains".into()));
    }
    let interior = |pos: usize| (by_angle[pos - 1], by_angle[pos], by_angle[pos + 1]);
    if let [t] = cfg.eval.test_domains[..] {
        if let Some(pos) = by_angle.iter().position(|&d| d == t) {
            if pos > 0 && pos + 1 < by_angle.len() {
                return Ok(interior(pos));
            }
        }
    }
    Ok(interior(by_angle.len() / 2))
}

pub fn cmd_embed(
    checkpoint_path: &Path,
    config: &Path,
    perturb: Option<f64>,
    dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let tensors = checkpoint::load(checkpoint_path)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", checkpoint_path.display())))?;
    let (loaded, ds) = load(config)?;
    let cfg = &loaded.config;
    if let Some(eps) = perturb {
        if !eps.is_finite() {
            return Err(CliError::Config("--perturb must be finite".into()));
        }
    }
    let domain: Vec<(String, Tensor)> = tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("domain/").map(|s| (s.to_string(), t.clone())))
        .collect();
    let num_domains = domain
        .iter()
        .find(|(n, _)| n == "head.b")
        .map(|(_, t)| t.len())
        .ok_or_else(|| CliError::Config("checkpoint has no domain network".into()))?;
    let net = cfg.net_for(&ds, num_domains)?;
    let mut theta_d = init_params(&net, Role::Domain, 0)?;
    theta_d
        .load_from(&domain)
        .map_err(|e| CliError::Config(format!("checkpoint does not match the config: {e}")))?;
    let dir = out_dir(dir, cfg)?;
    echo_config(&dir, &cfg.resolved(&net))?;

    // Training steps along the gradient of a batch-mean loss, so a training
    // ε moves each example by ε / batch_size times its own gradient.
    let step = perturb.unwrap_or(0.0) / cfg.trainer.batch_size as f64;
    let rows = export_embeddings(&net, &theta_d, &ds, perturb.is_some(), step)?;
    write_embeddings_csv(create(&dir.join(EMBEDDINGS_CSV))?, &rows)?;
    let pca = pca_project(&rows, net.g_dim.min(2))?;
    write_pca_csv(create(&dir.join(PCA_CSV))?, &rows, &pca)?;

    let (a, m, b) = pick_triple(cfg, &ds)?;
    let score = interpolation_score(&rows, (a, m, b))?;
    let clean: Vec<_> = rows.iter().filter(|r| !r.perturbed).cloned().collect();
    let probe = label_absence_probe(&clean, cfg.trainer.seed)?;
    let angle = |d: usize| ds.domains[d].angle;
    writeln!(out, "triple={},{},{}", angle(a), angle(m), angle(b))?;
    writeln!(out, "betweenness={}", score.betweenness)?;
    writeln!(out, "shift_gain={}", score.shift_gain)?;
    writeln!(out, "probe_accuracy={}", probe.accuracy)?;
    writeln!(out, "probe_chance={}", probe.chance)?;
    Ok(())
}

pub fn cmd_gradcheck(
    seed: u64,
    configs: usize,
    nets: usize,
    fault: Option<&str>,
    out: &mut dyn Write,
) -> Result<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            CHECKED_OPS
                .into_iter()
                .find(|op| op.to_string() == name)
                .ok_or_else(|| CliError::Config(format!("--inject-fault: unknown op {name:?}")))?,
        ),
    };
    let checks = check_ops(seed, configs, fault).map_err(|e| CliError::Verification(e.to_string()))?;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        writeln!(out, "op={} configs={} max_rel_err={:.3e} {verdict}", c.op, c.configs, c.max_rel_err)?;
    }
    let identity = identity_sweep(seed, nets).map_err(|e| CliError::Verification(e.to_string()))?;
    let identity_ok = identity <= IDENTITY_TOLERANCE;
    writeln!(
        out,
        "identity nets={nets} max_abs_diff={identity:.3e} {}",
        if identity_ok { "ok" } else { "FAIL" }
    )?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one op");
    if !worst.passed() {
        writeln!(out, "worst op={} max_rel_err={:.3e}", worst.op, worst.max_rel_err)?;
        return Err(CliError::Verification(format!(
            "gradient check failed, worst op {} (relative error {:.3e})",
            worst.op, worst.max_rel_err
        )));
    }
    if !identity_ok {
        return Err(CliError::Verification(format!(
            "input-gradient identity off by {identity:.3e}"
        )));
    }
    Ok(())
}

pub fn cmd_export(config: &Path, dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let (loaded, ds) = load(config)?;
    let dir = out_dir(dir, &loaded.config)?;
    ds.write_csv(create(&dir.join(DATASET_CSV))?)?;
    writeln!(out, "examples={} domains={}", ds.len(), ds.domain_count())?;
    Ok(())
}
