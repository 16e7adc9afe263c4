use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn hstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hstyle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    styles: Vec<PathBuf>,
    train_stdout: String,
}

/// A micro model trained for a few steps through the CLI itself.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let o = hstyle(&["make-corpus", "--out", p(&corpus), "--count", "8", "--size", "16", "--seed", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let config = root.join("hstyle.toml");
        std::fs::write(
            &config,
            "[train]\npreset = \"micro\"\nbatch_size = 4\nmax_steps = 2\npretrain_steps = 2\n",
        )
        .unwrap();
        let out = root.join("run");
        let o = hstyle(&[
            "train",
            "--config",
            p(&config),
            "--data",
            p(&corpus.join("manifest.jsonl")),
            "--out",
            p(&out),
            "--max-steps",
            "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let styles = ["img_00000.png", "img_00001.png", "img_00002.png"]
            .iter()
            .map(|f| corpus.join(f))
            .collect();
        Fixture {
            _dir: dir,
            ckpt: out.join("model.ckpt"),
            root,
            styles,
            train_stdout: stdout(&o),
        }
    })
}

fn resolved(out: &str) -> serde_json::Value {
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("resolved config: "))
        .expect("resolved config printed");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = hstyle(&["sample", "--nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.lines().next().unwrap().starts_with("error: kind=usage message="));
    assert!(err.contains("Usage:"));
}

#[test]
fn mix_needs_all_three_levels() {
    let o = hstyle(&["mix", "--ckpt", "c", "--prompt", "x", "--low", "a.png", "--mid", "b.png", "--out", "o.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--high"));
}

#[test]
fn invalid_option_values_are_usage_errors() {
    let o = hstyle(&["sample", "--ckpt", "c", "--prompt", "x", "--eta", "2", "--out", "o.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=argument message="));
}

#[test]
fn runtime_failure_exits_two_with_one_line() {
    let o = hstyle(&["sample", "--ckpt", "/nonexistent/model.ckpt", "--prompt", "x", "--out", "o.png"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind="));
}

#[test]
fn train_resolves_flag_over_file_over_default() {
    let f = fixture();
    let cfg = resolved(&f.train_stdout);
    assert_eq!(cfg["command"], "train");
    // Flag beats file, file beats default.
    assert_eq!(cfg["train"]["max_steps"], 3);
    assert_eq!(cfg["train"]["batch_size"], 4);
    assert_eq!(cfg["train"]["cfg_dropout_probability"], 0.1);
    assert!(f.ckpt.exists());
    assert!(f.ckpt.with_file_name("adapter_loss.csv").exists());
}

#[test]
fn sample_writes_a_reproducible_png() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        let o = hstyle(&[
            "sample", "--ckpt", p(&f.ckpt), "--prompt", "a circle on the left", "--style", p(&f.styles[0]),
            "--steps", "50", "--cfg", "9", "--seed", "7", "--out", p(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let cfg = resolved(&stdout(&o));
        assert_eq!(cfg["sample"]["steps"], 50);
        assert_eq!(cfg["sample"]["cfg_scale"], 9.0);
        assert_eq!(cfg["sample"]["seed"], 7);
        std::fs::read(out).unwrap()
    };
    let a = run("a.png");
    assert_eq!(&a[1..4], b"PNG");
    assert_eq!(a, run("b.png"));
}

#[test]
fn finetune_defaults_to_25_steps_and_feeds_sample_and_mix() {
    let f = fixture();
    let sidecar = f.root.join("r.sidecar");
    let styles = format!("{},{}", p(&f.styles[0]), p(&f.styles[1]));
    let o = hstyle(&["finetune", "--ckpt", p(&f.ckpt), "--style", &styles, "--out", p(&sidecar)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = resolved(&stdout(&o));
    assert_eq!(cfg["finetune"]["steps"], 25);
    assert_eq!(cfg["finetune"]["lr"], 0.02);
    assert_eq!(cfg["style"].as_array().unwrap().len(), 2);
    assert!(stdout(&o).contains("(25 steps"));
    assert!(sidecar.exists());

    let out = f.root.join("ft.png");
    let o = hstyle(&[
        "sample", "--ckpt", p(&f.ckpt), "--prompt", "a square", "--style", p(&f.styles[0]), "--residual",
        p(&sidecar), "--alpha-scale", "0.5", "--steps", "5", "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mix = |extra: &[&str]| {
        let out = f.root.join("mix.png");
        let mut args = vec![
            "mix", "--ckpt", p(&f.ckpt), "--prompt", "a cross", "--low", p(&f.styles[0]), "--mid",
            p(&f.styles[1]), "--high", p(&f.styles[2]), "--residual", p(&sidecar), "--steps", "5", "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        let o = hstyle(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    assert!(mix(&[]).contains("sidecar applied: false"));
    assert!(mix(&["--force-residual"]).contains("sidecar applied: true"));
}

#[test]
fn eval_writes_report_with_embedder_scores() {
    let f = fixture();
    let testset = f.root.join("testset.json");
    let styles: Vec<&str> = f.styles[..2].iter().map(|s| p(s)).collect();
    std::fs::write(
        &testset,
        serde_json::json!({"prompts": ["a circle", "a square"], "styles": styles}).to_string(),
    )
    .unwrap();
    let out = f.root.join("eval");
    let o = hstyle(&[
        "eval", "--ckpt", p(&f.ckpt), "--testset", p(&testset), "--embedder-cmd", "echo 0.5 #", "--steps", "4",
        "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["aggregates"]["mean_text"], 0.5);
    assert_eq!(report["standardized"], true);
    assert!(out.join("p001_s001.png").exists());
}
