use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtz::format;
use mtz::report::parse_records;

const SPEC: &str = r#"
[[task]]
name = "left"
seed = 1
trunk_seed = 5
input_dim = 8
classes = 3
trunk = [12]
train_samples = 400
test_samples = 200

[[task]]
name = "twin"
seed = 1
trunk_seed = 5
input_dim = 8
classes = 3
trunk = [12]
train_samples = 400
test_samples = 200

[[task]]
name = "right"
seed = 2
trunk_seed = 5
input_dim = 8
classes = 3
trunk = [12]
train_samples = 400
test_samples = 200
"#;

struct Workdir(PathBuf);

impl Workdir {
    fn new(name: &str) -> Self {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{name}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("tasks.toml"), SPEC).unwrap();
        Workdir(dir)
    }

    fn path(&self, name: &str) -> String {
        self.0.join(name).display().to_string()
    }

    fn mtz(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mtz"))
            .args(args)
            .current_dir(&self.0)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.mtz(args);
        assert!(
            out.status.success(),
            "mtz {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, task: &str, out: &str, iterations: &str) -> String {
        self.ok(&[
            "train",
            "--arch",
            "mlp-16-8",
            "--synthetic",
            "tasks.toml",
            "--task",
            task,
            "--seed",
            "3",
            "--iterations",
            iterations,
            "--lr",
            "0.05",
            "--batch",
            "32",
            "--out",
            out,
        ])
    }
}

fn field(line: &str, key: &str) -> f64 {
    parse_records(line)
        .iter()
        .find_map(|r| r.number(key))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
}

#[test]
fn zero_iterations_saves_the_initial_model() {
    let w = Workdir::new("zero");
    let out = w.train("left", "init.mtz", "0");
    assert!(out.contains("iterations=0"));
    let net = format::load_network(Path::new(&w.path("init.mtz"))).unwrap();
    assert_eq!(net.task().as_str(), "left");
    let eval = w.ok(&["eval", "--model", "init.mtz", "--synthetic", "tasks.toml"]);
    assert_eq!(field(&eval, "error"), field(&out, "test_error"));
}

#[test]
fn training_is_deterministic() {
    let w = Workdir::new("determinism");
    w.train("left", "a.mtz", "200");
    w.train("left", "b.mtz", "200");
    assert_eq!(fs::read(w.path("a.mtz")).unwrap(), fs::read(w.path("b.mtz")).unwrap());
}

#[test]
fn identical_models_zip_without_loss() {
    let w = Workdir::new("self");
    w.train("left", "left.mtz", "300");
    w.train("twin", "twin.mtz", "300");
    let report = w.ok(&[
        "zip",
        "--models",
        "left.mtz",
        "twin.mtz",
        "--synthetic",
        "tasks.toml",
        "--share",
        "full",
        "--retrain-schedule",
        "none",
        "--out",
        "joint.mtz",
        "--report",
        "report.txt",
    ]);
    let summary = parse_records(&report).into_iter().find(|r| r.tag.as_deref() == Some("summary")).unwrap();
    assert_eq!(summary.number("err_pre_left"), summary.number("err_post_left"));
    assert_eq!(summary.number("err_pre_twin"), summary.number("err_post_twin"));
    assert!(summary.number("params_after").unwrap() * 2.0 - summary.number("params_before").unwrap() < 200.0);
    assert_eq!(fs::read_to_string(w.path("report.txt")).unwrap(), report);
    let inspect = w.ok(&["inspect", "--model", "joint.mtz"]);
    assert!(inspect.contains("model=joint tasks=left,twin"));
    assert!(inspect.contains("shared_fraction=1.0000"));
    let inspect = w.ok(&["inspect", "--report", "report.txt"]);
    assert!(inspect.contains("summary: tasks left,twin"));
}

#[test]
fn sharing_nothing_keeps_errors_and_three_models_chain() {
    let w = Workdir::new("none");
    let left = w.train("left", "left.mtz", "300");
    let right = w.train("right", "right.mtz", "300");
    w.ok(&[
        "zip",
        "--models",
        "left.mtz",
        "right.mtz",
        "--synthetic",
        "tasks.toml",
        "--share",
        "none",
        "--retrain-schedule",
        "none",
        "--out",
        "joint.mtz",
    ]);
    let eval = w.ok(&["eval", "--model", "joint.mtz", "--synthetic", "tasks.toml"]);
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(field(lines[0], "error"), field(&left, "test_error"));
    assert_eq!(field(lines[1], "error"), field(&right, "test_error"));

    w.train("twin", "twin.mtz", "300");
    let report = w.ok(&[
        "zip",
        "--models",
        "left.mtz",
        "right.mtz",
        "twin.mtz",
        "--synthetic",
        "tasks.toml",
        "--share",
        "fractions:0.5,0.5",
        "--retrain-schedule",
        "20,20",
        "--out",
        "three.mtz",
    ]);
    assert!(report.contains("summary tasks=left,right,twin"));
    let joint = format::load_zipped(Path::new(&w.path("three.mtz"))).unwrap();
    assert_eq!(joint.num_tasks(), 3);
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let w = Workdir::new("config");
    fs::write(
        w.0.join("train.toml"),
        "arch = \"mlp-16-8\"\nsynthetic = \"tasks.toml\"\ntask = \"left\"\niterations = 50\nseed = 3\nout = \"cfg.mtz\"\n",
    )
    .unwrap();
    let out = w.ok(&["train", "--config", "train.toml", "--iterations", "7"]);
    assert!(out.contains("iterations=7"));
    assert!(Path::new(&w.path("cfg.mtz")).is_file());
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let w = Workdir::new("exit");
    w.train("left", "left.mtz", "0");
    w.train("right", "right.mtz", "0");
    let code = |args: &[&str]| w.mtz(args).status.code();
    assert_eq!(code(&["train", "--arch", "bogus", "--synthetic", "tasks.toml", "--task", "left", "--out", "x.mtz"]), Some(2));
    assert_eq!(
        code(&["zip", "--models", "left.mtz", "right.mtz", "--synthetic", "tasks.toml", "--share", "counts:1", "--out", "j.mtz"]),
        Some(2)
    );
    assert_eq!(
        code(&["zip", "--models", "left.mtz", "right.mtz", "--synthetic", "tasks.toml", "--share", "counts:99,0", "--retrain-schedule", "none", "--out", "j.mtz"]),
        Some(2)
    );
    assert_eq!(code(&["eval", "--model", "missing.mtz", "--synthetic", "tasks.toml"]), Some(1));
    fs::write(w.0.join("junk.mtz"), b"not a model").unwrap();
    assert_eq!(code(&["inspect", "--model", "junk.mtz"]), Some(1));
}
