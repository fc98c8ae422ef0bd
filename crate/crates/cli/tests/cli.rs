use std::path::Path;
use std::process::{Command, Output};

fn stylecraft(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylecraft"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = stylecraft(args, cwd);
    assert!(
        out.status.success(),
        "stylecraft {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const FAST: &[&str] = &[
    "--mock-vlm",
    "--stage1-steps",
    "4",
    "--stage2-steps",
    "3",
    "--image-size",
    "16",
    "--sample-steps",
    "4",
    "--content-refs",
    "1",
];

fn args<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

fn trained(dir: &Path) {
    ok(&["make-corpus", "corpus", "--categories", "2"], dir);
    for c in ["stripes-00", "checker-01"] {
        ok(&args(&["train", &format!("corpus/{c}/manifest.toml")], FAST), dir);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stylecraft(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(stylecraft(&["train", "m.toml", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(stylecraft(&["generate", "x.ckpt"], dir.path()).status.code(), Some(2));
    assert_eq!(stylecraft(&["evaluate", "x.ckpt", "--embedder", "clip"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylecraft(&["train", "missing.toml", "--mock-vlm"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[not-found]"));
    let out = stylecraft(&["train", "m.toml", "--lambda2", "-1"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda2"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["make-corpus", "corpus", "--categories", "1"], d);
    std::fs::write(d.join("cfg.toml"), "lambda2 = 0.5\nstage2_lr = 0.002\nseed = 4\n").unwrap();
    ok(
        &args(
            &["train", "corpus/stripes-00/manifest.toml", "--config", "cfg.toml", "--seed", "9"],
            FAST,
        ),
        d,
    );
    let snapshot = std::fs::read_to_string(d.join("runs/stripes-00/config.toml")).unwrap();
    let parsed: toml_like::Snapshot = toml_like::parse(&snapshot);
    assert_eq!(parsed.get("lambda2"), "0.5");
    assert_eq!(parsed.get("stage2_lr"), "0.002");
    assert_eq!(parsed.get("seed"), "9");
    assert_eq!(parsed.get("stage1_steps"), "4");
    assert_eq!(parsed.get("lambda1"), "1.0");
}

/// Enough of a reader for flat `key = value` lines.
mod toml_like {
    pub struct Snapshot(Vec<(String, String)>);

    impl Snapshot {
        pub fn get(&self, key: &str) -> &str {
            &self.0.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("{key} missing")).1
        }
    }

    pub fn parse(text: &str) -> Snapshot {
        Snapshot(
            text.lines()
                .take_while(|l| !l.starts_with('['))
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.trim().to_string(), v.trim().trim_matches('"').to_string()))
                .collect(),
        )
    }
}

#[test]
fn generate_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let ckpt = "runs/stripes-00/stage2.ckpt";
    let gen = |seed: &str| ok(&["generate", ckpt, "--prompt", "a car with [V*] style", "--seed", seed], d);
    let first = gen("1");
    let bytes = std::fs::read(d.join(first.trim())).unwrap();
    let second = gen("1");
    assert_eq!(first, second);
    assert_eq!(std::fs::read(d.join(second.trim())).unwrap(), bytes);
    let other = gen("2");
    assert_ne!(std::fs::read(d.join(other.trim())).unwrap(), bytes);

    // plain prompts work too
    ok(&["generate", ckpt, "--prompt", "a photo of a car"], d);

    let table = ok(
        &[
            "evaluate",
            ckpt,
            "corpus/stripes-00/manifest.toml",
            "runs/checker-01/stage2.ckpt",
            "corpus/checker-01/manifest.toml",
            "--output",
            "a.json",
        ],
        d,
    );
    for col in ["Pixel-Hist", "CLIP R-Precision", "CLIP-IQA", "stripes-00", "checker-01", "mean"] {
        assert!(table.contains(col), "{table}");
    }
    ok(&["evaluate", ckpt, "corpus/stripes-00/manifest.toml", "--output", "b.json"], d);
    let comparison = ok(&["report", "a.json", "b.json"], d);
    assert_eq!(comparison.matches("**").count(), 3 * 2, "{comparison}");

    let odd = stylecraft(&["evaluate", ckpt, "corpus/stripes-00/manifest.toml", ckpt], d);
    assert!(!odd.status.success());
}

#[test]
fn warm_keyword_cache_is_not_rewritten() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["make-corpus", "corpus", "--categories", "1"], d);
    let m = "corpus/stripes-00/manifest.toml";
    let first = ok(&["extract-keywords", m, "--mock-vlm"], d);
    let cache = d.join("runs/cache/keywords/stripes-00.json");
    let before = std::fs::read(&cache).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let second = ok(&["extract-keywords", m, "--mock-vlm"], d);
    assert_eq!(first, second);
    assert_eq!(std::fs::read(&cache).unwrap(), before);
    ok(&["extract-keywords", m, "--mock-vlm", "--force-refresh"], d);
    assert_ne!(std::fs::read(&cache).unwrap(), before);
}
