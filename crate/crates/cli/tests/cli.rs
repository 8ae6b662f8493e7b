use std::fs;
use std::path::{Path, PathBuf};

use crossgrad::checkpoint;
use crossgrad::data::split_by_domain;
use crossgrad::data::SplitSpec;
use crossgrad::eval::RESULTS_HEADER;
use crossgrad::trainers::{Model, METRICS_HEADER};
use crossgrad_cli::commands::{
    CHECKPOINT, DATASET_CSV, EMBEDDINGS_CSV, METRICS_CSV, PCA_CSV, RESOLVED_CONFIG, RESULTS_CSV,
    SWEEP_CSV, SWEEP_HEADER,
};
use crossgrad_cli::{build_dataset, parse_config, run, Method};
use tempfile::TempDir;

const SMALL: &str = r#"
[dataset]
per_domain = 12
num_labels = 3

[net]
hidden_sizes = [8, 8]
domain_hidden = [8]
g_dim = 3

[trainer]
steps_n = 6
batch_size = 8
log_every = 2

[eval]
seeds = 2
sweep = false
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("crossgrad").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("nope.toml");
    let r = cli(&["train", "--config", s(&path), "--out", s(tmp.path())]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("nope.toml"), "{}", r.stderr);
}

#[test]
fn unknown_key_exits_1_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[trainer]\nlearning_rate = 0.1\n");
    let r = cli(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("learning_rate"), "{}", r.stderr);
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    assert_eq!(cli(&["train", "--config", s(&cfg)]).code, 1);
}

#[test]
fn zero_steps_leaves_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("steps_n = 6", "steps_n = 0");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("run");
    let r = cli(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let parsed = parse_config(&text).unwrap();
    let ds = build_dataset(&parsed.dataset, tmp.path()).unwrap();
    let net = parsed.net_for(&ds, ds.domain_count()).unwrap();
    let init = Model::init(&net, parsed.trainer.method, parsed.trainer.seed).unwrap();
    assert_eq!(checkpoint::load(&out.join(CHECKPOINT)).unwrap(), init.named_tensors());
}

#[test]
fn train_is_deterministic_and_echoes_its_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let r = cli(&["train", "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        assert!(r.stdout.contains("train_acc="));
    }
    for file in [METRICS_CSV, CHECKPOINT, RESOLVED_CONFIG] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let metrics = fs::read_to_string(a.join(METRICS_CSV)).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));

    // The echoed config is complete and reruns to the same bytes.
    let echoed = fs::read_to_string(a.join(RESOLVED_CONFIG)).unwrap();
    assert!(echoed.contains("g_dim = 3") && echoed.contains("base_eps = 1.0"), "{echoed}");
    let cfg2 = write_config(tmp.path(), "echoed.toml", &echoed);
    let c = tmp.path().join("c");
    assert_eq!(cli(&["train", "--config", s(&cfg2), "--out", s(&c)]).code, 0);
    assert_eq!(fs::read(a.join(METRICS_CSV)).unwrap(), fs::read(c.join(METRICS_CSV)).unwrap());
}

#[test]
fn divergence_exits_2() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("log_every = 2", "log_every = 2\neta = 1e300\n[trainer.optimizer]\nkind = \"sgd\"");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let r = cli(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn lodo_writes_one_row_per_method_domain_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("lodo");
    let r = cli(&[
        "lodo", "--config", s(&cfg), "--methods", "baseline,crossgrad", "--seeds", "5", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = fs::read_to_string(out.join(RESULTS_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(RESULTS_HEADER));
    assert_eq!(lines.count(), 2 * 6 * 5);

    // Methods as rows, held-out domains as columns.
    let table: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(table.len(), 3, "{}", r.stdout);
    let header: Vec<&str> = table[0].split_whitespace().collect();
    assert_eq!(header, ["method", "M0", "M15", "M30", "M45", "M60", "M75"]);
    assert!(table[1].starts_with("baseline") && table[2].starts_with("crossgrad"));
    assert_eq!(table[1].matches('±').count(), 6);
}

#[test]
fn lodo_rejects_an_empty_method_list() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let r = cli(&["lodo", "--config", s(&cfg), "--methods", "", "--out", s(tmp.path())]);
    assert_eq!(r.code, 1);
    let r = cli(&["lodo", "--config", s(&cfg), "--methods", "sgd", "--out", s(tmp.path())]);
    assert_eq!(r.code, 1);
}

#[test]
fn lodo_saves_checkpoints_on_request() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("sweep = false", "sweep = false\nsave_checkpoints = true\nheld_out = [3]");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("lodo");
    let r = cli(&["lodo", "--config", s(&cfg), "--methods", "crossgrad", "--seeds", "1", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(out.join("checkpoints/crossgrad_d3_s0.ckpt").exists());
}

fn sweep_config(tie: bool) -> String {
    SMALL.replace(
        "sweep = false",
        &format!("methods = [\"baseline\", \"crossgrad\"]\nval_domains = [1]\ntest_domains = [3]\ntie_alpha = {tie}"),
    )
}

#[test]
fn sweep_covers_the_grid_and_its_best_config_reproduces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &sweep_config(true));
    let out = tmp.path().join("sweep");
    let r = cli(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = fs::read_to_string(out.join(SWEEP_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(SWEEP_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().filter(|r| r[0] == "crossgrad").count(), 20);
    assert_eq!(rows.iter().filter(|r| r[0] == "baseline").count(), 1);
    assert!(rows.iter().filter(|r| r[0] == "crossgrad").all(|r| r[1] == r[2]));

    let best_line = r.stdout.lines().find(|l| l.contains("method=crossgrad")).unwrap();
    let recorded: f64 = best_line.rsplit("val_acc=").next().unwrap().parse().unwrap();
    let rerun = tmp.path().join("rerun");
    let best = out.join("best_crossgrad.toml");
    let r = cli(&["train", "--config", s(&best), "--out", s(&rerun)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let val: f64 = r
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("best_val_acc="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(val, recorded);
}

#[test]
fn sweep_can_leave_alpha_d_untied() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &sweep_config(false));
    let out = tmp.path().join("sweep");
    assert_eq!(cli(&["sweep", "--config", s(&cfg), "--out", s(&out)]).code, 0);
    let csv = fs::read_to_string(out.join(SWEEP_CSV)).unwrap();
    let cg: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| l.starts_with("crossgrad"))
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(cg.len(), 20);
    assert!(cg.iter().all(|r| r[2] == "0.5"));
    assert!(cg.iter().any(|r| r[1] != r[2]));
}

#[test]
fn sweep_without_validation_domains_exits_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    assert_eq!(cli(&["sweep", "--config", s(&cfg), "--out", s(tmp.path())]).code, 1);
}

fn trained_checkpoint(tmp: &Path) -> (PathBuf, PathBuf) {
    let text = SMALL.replace("steps_n = 6", "steps_n = 40");
    let cfg = write_config(tmp, "c.toml", &text);
    let out = tmp.join("train");
    assert_eq!(cli(&["train", "--config", s(&cfg), "--out", s(&out)]).code, 0);
    (cfg, out.join(CHECKPOINT))
}

#[test]
fn embed_writes_documented_csvs_and_scores() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_checkpoint(tmp.path());
    let out = tmp.path().join("embed");
    let r = cli(&["embed", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--perturb", "0", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    for key in ["triple=30,45,60", "betweenness=", "shift_gain=", "probe_accuracy=", "probe_chance="] {
        assert!(r.stdout.contains(key), "{key} missing from {}", r.stdout);
    }
    let emb = fs::read_to_string(out.join(EMBEDDINGS_CSV)).unwrap();
    assert_eq!(emb.lines().next(), Some("domain,label,perturbed,g_0,g_1,g_2"));
    let pca = fs::read_to_string(out.join(PCA_CSV)).unwrap();
    assert_eq!(pca.lines().next(), Some("domain,label,perturbed,pc_1,pc_2"));

    // With a zero step the perturbed rows repeat the clean ones.
    let rows: Vec<Vec<&str>> = emb.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let (clean, pert): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r[2] == "false");
    assert_eq!(clean.len(), 72);
    assert_eq!(pert.len(), 72);
    for (a, b) in clean.iter().zip(&pert) {
        assert_eq!(a[..2], b[..2]);
        assert_eq!(a[3..], b[3..]);
    }
}

#[test]
fn embed_rejects_a_bad_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_checkpoint(tmp.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'Z';
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let r = cli(&["embed", "--checkpoint", s(&bad), "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.code, 1, "{}", r.stderr);

    // A baseline checkpoint has no domain network to embed with.
    let text = SMALL.replace("[trainer]", "[trainer]\nmethod = \"baseline\"");
    let base_cfg = write_config(tmp.path(), "b.toml", &text);
    let out = tmp.path().join("base");
    assert_eq!(cli(&["train", "--config", s(&base_cfg), "--out", s(&out)]).code, 0);
    let r = cli(&["embed", "--checkpoint", s(&out.join(CHECKPOINT)), "--config", s(&base_cfg), "--out", s(tmp.path())]);
    assert_eq!(r.code, 1);
}

#[test]
fn gradcheck_passes_with_one_line_per_op() {
    let r = cli(&["gradcheck", "--seed", "0"]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    let lines: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("op=")).count(), 12);
    assert!(lines.iter().any(|l| l.starts_with("identity nets=100") && l.ends_with("ok")));
}

#[test]
fn gradcheck_flags_a_corrupted_backward() {
    let r = cli(&["gradcheck", "--configs", "3", "--nets", "5", "--inject-fault", "relu"]);
    assert_eq!(r.code, 3);
    assert!(r.stdout.contains("worst op=relu"), "{}", r.stdout);
    assert_eq!(cli(&["gradcheck", "--inject-fault", "bogus"]).code, 1);
}

#[test]
fn export_writes_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let r = cli(&["export", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.code, 0);
    let csv = fs::read_to_string(tmp.path().join(DATASET_CSV)).unwrap();
    assert_eq!(csv.lines().next(), Some("x_0,x_1,y,d"));
    assert_eq!(csv.lines().count(), 1 + 72);
}

#[test]
fn fixed_split_keeps_held_domains_out_of_training() {
    let cfg = parse_config(&sweep_config(true)).unwrap();
    let ds = build_dataset(&cfg.dataset, Path::new(".")).unwrap();
    let split = split_by_domain(&ds, &SplitSpec::new([0, 2, 4, 5], [1], [3])).unwrap();
    assert_eq!(split.train.domain_count(), 4);
    assert_eq!(cfg.eval.methods, vec![Method::Baseline, Method::CrossGrad]);
}
