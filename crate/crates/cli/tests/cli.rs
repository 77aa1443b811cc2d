use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for debug-mode tests
data.frames = 16
data.height = 16
data.width = 16
data.sprite_size = 4
data.videos_per_class = 2
model.dim = 12
model.enc_layers = 1
model.dec_layers = 1
model.patch = 4
model.clip_len = 4
model.mlp_ratio = 2
train.steps = 3
train.batch_size = 2
train.base_lr = 0.5
";

fn east(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_east")).args(args).env_remove("EAST_SEED").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    lines[0].to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let train = dir.join("train.bin");
    let test = dir.join("test.bin");
    ok(&east(&["gen-data", "--config", p(&cfg), "--out", p(&train)]));
    ok(&east(&["gen-data", "--config", p(&cfg), "--set", "data.seed=1", "--out", p(&test)]));
    (cfg, train, test)
}

#[test]
fn help_documents_exit_codes() {
    let text = ok(&east(&["--help"]));
    for code in ["3  configuration", "4  I/O", "5  checkpoint", "7  leakage"] {
        assert!(text.contains(code), "missing '{code}'");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, train, test) = setup(dir.path());
    assert_eq!(fs::metadata(&train).unwrap().len(), 32 + 18 * (4 + 16 * 16 * 16));
    let run = dir.path().join("run");
    ok(&east(&["train", "--config", p(&cfg), "--data", p(&train), "--out", p(&run), "--eval-data", p(&test)]));
    for f in ["checkpoint.json", "train_log.csv", "run.cfg", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let echo = fs::read_to_string(run.join("run.cfg")).unwrap();
    assert!(echo.contains("model.dim = 12") && echo.contains("train.seed = 0"));

    let metrics = dir.path().join("eval.csv");
    let ckpt = run.join("checkpoint.json");
    let stdout = ok(&east(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--rho-grid", "0.1:0.9:0.1", "--out", p(&metrics)]));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert_eq!(stdout, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rho,top1,n");
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[1].split(',').next(), Some("0.1"));
    assert!(!csv.contains('\r'));
    assert!(dir.path().join("eval.cfg").exists());

    let svg = dir.path().join("acc.svg");
    ok(&east(&["plot", "--metrics", p(&metrics), p(&run.join("metrics.csv")), "--label", "eval", "train", "--out", p(&svg)]));
    let svg = fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches(r#"class="curve""#).count(), 2);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, train, test) = setup(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&east(&["train", "--config", p(&cfg), "--data", p(&train), "--out", p(&run), "--eval-data", p(&test)]));
        outputs.push((fs::read(run.join("metrics.csv")).unwrap(), fs::read(run.join("checkpoint.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, train, _) = setup(dir.path());
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_east"))
        .args(["train", "--config", p(&cfg), "--data", p(&train), "--out", p(&run)])
        .env("EAST_SEED", "17")
        .output()
        .unwrap();
    ok(&out);
    assert!(fs::read_to_string(run.join("run.cfg")).unwrap().contains("train.seed = 17"));
}

#[test]
fn flops_ratio_is_printed() {
    let half = ok(&east(&["flops", "--k", "0.5"]));
    let none = ok(&east(&["flops", "--k", "0.0"]));
    let total = |s: &str| -> u64 {
        s.lines().find_map(|l| l.strip_prefix("total_flops=")).unwrap().parse().unwrap()
    };
    let ratio = total(&none) as f64 / total(&half) as f64;
    assert!(ratio >= 1.8, "ratio {ratio}");
    let printed: f64 = half.lines().find_map(|l| l.strip_prefix("ratio_vs_unmasked=")).unwrap().parse().unwrap();
    assert!((printed - ratio).abs() < 1e-5);
}

#[test]
fn mask_viz_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, train, _) = setup(dir.path());
    let svg = dir.path().join("mask.svg");
    let out = ok(&east(&["mask-viz", "--config", p(&cfg), "--data", p(&train), "--index", "3", "--k", "0.5", "--out", p(&svg)]));
    assert!(out.contains("kept 16 of 32"));
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn errors_have_distinct_codes_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, train, test) = setup(dir.path());

    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "model.depth = 3\n").unwrap();
    let out = east(&["flops", "--config", p(&bad_cfg), "--k", "0.5"]);
    assert_eq!(out.status.code(), Some(3));
    let line = error_line(&out);
    assert!(line.starts_with("error kind=config code=3 msg=\"") && line.contains("model.depth"), "{line}");

    let out = east(&["train", "--config", p(&cfg), "--data", p(&dir.path().join("missing.bin")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("kind=io"));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"NOTADATASET-AT-ALL-0123456789012345").unwrap();
    let out = east(&["train", "--config", p(&cfg), "--data", p(&junk), "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("offset 0"));

    let ckpt = dir.path().join("ckpt.json");
    fs::write(&ckpt, "{\"format\": \"something-else\"}").unwrap();
    let out = east(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_line(&out).contains("kind=checkpoint"));

    // A checkpoint trained for other frame sizes does not fit this dataset.
    let run = dir.path().join("run");
    ok(&east(&["train", "--config", p(&cfg), "--data", p(&train), "--out", p(&run)]));
    let other_cfg = dir.path().join("other.cfg");
    fs::write(&other_cfg, TINY.replace("data.height = 16", "data.height = 24")).unwrap();
    let other = dir.path().join("other.bin");
    ok(&east(&["gen-data", "--config", p(&other_cfg), "--out", p(&other)]));
    let out = east(&["eval", "--checkpoint", p(&run.join("checkpoint.json")), "--data", p(&other), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = east(&["eval", "--checkpoint", p(&run.join("checkpoint.json")), "--data", p(&test), "--rho-grid", "0.1:0.9", "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = east(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
