use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dinf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinf"))
        .args(args)
        .env_remove("DMIN_THREADS")
        .output()
        .expect("spawn dinf")
}

fn ok(args: &[&str]) -> Output {
    let out = dinf(args);
    assert!(
        out.status.success(),
        "dinf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn cache_args(&self) -> Vec<String> {
        vec![
            "--cache-dir".into(),
            s(&self.path("cache")).into(),
            "--model".into(),
            s(&self.path("model.bin")).into(),
            "--queries".into(),
            s(&self.path("queries.bin")).into(),
        ]
    }
}

fn build() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let p = Pipeline { _tmp: tmp, root };
    let data = p.path("data.bin");
    ok(&["gen-data", "--out", s(&data), "--per-cluster", "20", "--dim", "4"]);
    ok(&["gen-data", "--out", s(&p.path("queries.bin")), "--per-cluster", "2", "--dim", "4", "--data-seed", "9"]);
    ok(&[
        "train", "--data", s(&data), "--out", s(&p.path("model.bin")), "--hidden", "16",
        "--timesteps", "20", "--epochs", "5", "--batch", "8",
    ]);
    ok(&[
        "cache-grads", "--model", s(&p.path("model.bin")), "--data", s(&data), "--cache-dir",
        s(&p.path("cache")), "--v", "64", "--s", "3",
    ]);
    p
}

#[test]
fn end_to_end_workflow() {
    let p = build();
    let cache = p.path("cache");

    let out = ok(&["validate", "--cache-dir", s(&cache)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 findings"));

    ok(&["build-index", "--cache-dir", s(&cache), "--out", s(&p.path("index.dmix"))]);
    let mut args: Vec<String> = vec!["query".into()];
    args.extend(p.cache_args());
    args.extend(["--index", s(&p.path("index.dmix")), "--k", "5", "--ef", "200"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ok(&argv);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "rank\tsample_id\tscore");
    assert_eq!(lines.len(), 6);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f[0], (i + 1).to_string());
        f[1].parse::<u64>().unwrap();
        f[2].parse::<f64>().unwrap();
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("wall time"));

    for mode in ["exact", "compressed"] {
        let mut args: Vec<String> = vec!["score".into()];
        args.extend(p.cache_args());
        let out_file = p.path(&format!("{mode}.tsv"));
        args.extend(
            ["--mode", mode, "--data", s(&p.path("data.bin")), "--out", s(&out_file)].map(String::from),
        );
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&argv);
        let text = std::fs::read_to_string(&out_file).unwrap();
        assert_eq!(text.lines().count(), 61);
    }
    let out = ok(&["eval", "--compare", s(&p.path("exact.tsv")), s(&p.path("compressed.tsv")), "--k", "5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("spearman\t"), "{text}");
    assert!(text.contains("top5_overlap\t"));

    let out = ok(&["report", "--cache-dir", s(&cache)]);
    let text = String::from_utf8(out.stdout).unwrap();
    let get = |key: &str| -> String {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}\t")))
            .unwrap()
            .to_string()
    };
    assert_eq!(get("shard_bytes_expected"), get("shard_bytes_actual"));
    assert_eq!(get("record_bytes"), (8 + 3 * 64 * 4).to_string());
}

#[test]
fn subcommands_are_idempotent() {
    let p = build();
    let read = |name: &str| std::fs::read(p.path("cache").join(name)).unwrap();
    let before = [read("manifest.txt"), read("perm.bin"), read("signs.bin"), read("shard-00000.bin")];
    ok(&[
        "cache-grads", "--model", s(&p.path("model.bin")), "--data", s(&p.path("data.bin")),
        "--cache-dir", s(&p.path("cache")), "--v", "64", "--s", "3",
    ]);
    let after = [read("manifest.txt"), read("perm.bin"), read("signs.bin"), read("shard-00000.bin")];
    assert_eq!(before, after);

    for name in ["a.dmix", "b.dmix"] {
        ok(&["build-index", "--cache-dir", s(&p.path("cache")), "--out", s(&p.path(name))]);
    }
    assert_eq!(
        std::fs::read(p.path("a.dmix")).unwrap(),
        std::fs::read(p.path("b.dmix")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let p = build();
    // Usage errors.
    assert_eq!(dinf(&["bogus"]).status.code(), Some(1));
    assert_eq!(dinf(&["gen-data"]).status.code(), Some(1));
    assert_eq!(dinf(&["--threads", "0", "validate", "--cache-dir", "x"]).status.code(), Some(1));
    let mut args: Vec<String> = vec!["query".into()];
    args.extend(p.cache_args());
    args.extend(["--index", "missing.dmix", "--k", "5", "--ef", "2"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(dinf(&argv).status.code(), Some(1));

    // Data errors.
    let shard = p.path("cache").join("shard-00000.bin");
    let bytes = std::fs::read(&shard).unwrap();
    std::fs::write(&shard, &bytes[..bytes.len() - 1]).unwrap();
    let out = dinf(&["validate", "--cache-dir", s(&p.path("cache"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("byte"));
    assert_eq!(dinf(&["report", "--cache-dir", s(&p.path("nope"))]).status.code(), Some(2));

    // Numeric errors: a diverging learning rate.
    let out = dinf(&[
        "train", "--data", s(&p.path("data.bin")), "--out", s(&p.path("bad.bin")), "--hidden", "8",
        "--timesteps", "10", "--epochs", "50", "--lr", "1e30",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_thread_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.conf");
    std::fs::write(&cfg, "per_cluster = 5\ndim = 3\nclusters = 2\n").unwrap();
    let a = tmp.path().join("a.bin");
    let b = tmp.path().join("b.bin");
    ok(&["--config", s(&cfg), "gen-data", "--out", s(&a)]);
    ok(&["gen-data", "--out", s(&b), "--per-cluster", "5", "--dim", "3", "--clusters", "2"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::metadata(&a).unwrap().len(), 18 + 10 * (4 + 12));

    // Command-line flags override the config file.
    ok(&["--config", s(&cfg), "gen-data", "--out", s(&a), "--per-cluster", "1"]);
    assert_eq!(std::fs::metadata(&a).unwrap().len(), 18 + 2 * (4 + 12));

    let out = Command::new(env!("CARGO_BIN_EXE_dinf"))
        .args(["gen-data", "--out", s(&b)])
        .env("DMIN_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_dinf"))
        .args(["gen-data", "--out", s(&b)])
        .env("DMIN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_documents_defaults() {
    for (sub, needle) in [
        ("cache-grads", "[default: 4096]"),
        ("build-index", "[default: 16]"),
        ("query", "[default: 200]"),
        ("train", "[default: scaled]"),
        ("score", "[default: compressed]"),
    ] {
        let out = ok(&[sub, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains(needle), "{sub} --help lacks {needle}:\n{text}");
    }
}
