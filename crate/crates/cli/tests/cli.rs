use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.blocks=1",
    "--set",
    "model.adapter_rank=4",
    "--set",
    "model.schedule_steps=20",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hoi-compose"))
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    bin().current_dir(cwd).args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mrpg").join(name)
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn dataset(cwd: &Path, out: &str, seed: &str) -> PathBuf {
    let o = run(
        cwd,
        &["dataset-gen", "--count", "6", "--canvas", "32", "--seed", seed, "--out", out],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    cwd.join(out).join("manifest.jsonl")
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    let bad = run(tmp.path(), &["dataset-gen", "--set", "nokey", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = run(tmp.path(), &["dataset-gen", "--set", "train.stepz=3", "--out", "x"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn generated_dataset_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), "data", "3");
    let o = run(tmp.path(), &["validate", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 violations"));
    let files = entries(&tmp.path().join("data"));
    for f in ["config.resolved.toml", "manifest.jsonl", "records", "stats.json"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }

    let line = fs::read_to_string(&manifest).unwrap();
    let broken = line.replace("_unchanged.png", "_missing.png");
    fs::write(&manifest, broken).unwrap();
    let o = run(tmp.path(), &["validate", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("6 violations"), "{}", stdout(&o));
}

#[test]
fn same_seed_same_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fs::read(dataset(tmp.path(), "a", "7")).unwrap();
    let b = fs::read(dataset(tmp.path(), "b", "7")).unwrap();
    let c = fs::read(dataset(tmp.path(), "c", "8")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn mock_region_query_matches_fixture_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    dataset(&data, "d", "0");
    let img = fs::read_dir(data.join("d/images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_background.png"))
        .unwrap();

    let cwd = tmp.path().join("cwd");
    fs::create_dir(&cwd).unwrap();
    let fx = fixture("holding_hat.json");
    let o = run(
        &cwd,
        &[
            "mrpg",
            "--fg",
            img.to_str().unwrap(),
            "--bg",
            img.to_str().unwrap(),
            "--mock",
            fx.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let want: serde_json::Value = serde_json::from_slice(&fs::read(&fx).unwrap()).unwrap();
    assert_eq!(got, want["expected"]);
    assert!(entries(&cwd).is_empty(), "wrote {:?}", entries(&cwd));

    let o = run(
        &cwd,
        &[
            "mrpg",
            "--fg",
            img.to_str().unwrap(),
            "--bg",
            img.to_str().unwrap(),
            "--mock",
            fx.to_str().unwrap(),
            "--out",
            "q",
        ],
    );
    assert!(o.status.success());
    assert_eq!(entries(&cwd), vec!["q"]);
    assert_eq!(entries(&cwd.join("q")), vec!["config.resolved.toml", "spec.json", "trace.json"]);
}

#[test]
fn train_sample_bench_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), "data", "1");
    let m = manifest.to_str().unwrap();
    let mut args = vec!["train", "--data", m, "--steps", "3", "--pretrain-steps", "2", "--out", "run"];
    args.extend(SMALL);
    args.extend(["--set", "model.image_size=32", "--set", "dataset.canvas=32"]);
    let o = run(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = tmp.path().join("run");
    let files = entries(&run_dir);
    for f in ["checkpoint", "config.resolved.toml", "losses.jsonl"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }
    assert_eq!(fs::read_to_string(run_dir.join("losses.jsonl")).unwrap().lines().count(), 3);

    let images = tmp.path().join("data/images");
    let pick = |suffix: &str| {
        fs::read_dir(&images)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.to_string_lossy().ends_with(suffix))
            .min()
            .unwrap()
    };
    let (fg, bg) = (pick("_foreground.png"), pick("_background.png"));
    let spec = tmp.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"prompt":"A girl is holding a hat","object_box":[0.3,0.4,0.55,0.7],"interaction_region":[0.1,0.2,0.9,0.8],"foreground_span":[20,23]}"#,
    )
    .unwrap();
    let ckpt = run_dir.join("checkpoint");
    let sample = |out: &str| {
        run(
            tmp.path(),
            &[
                "sample",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--fg",
                fg.to_str().unwrap(),
                "--bg",
                bg.to_str().unwrap(),
                "--spec",
                spec.to_str().unwrap(),
                "--steps",
                "4",
                "--seed",
                "5",
                "--dump-attention",
                "--out",
                out,
            ],
        )
    };
    let o = sample("s1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sample("s2").status.success());
    let png = |d: &str| fs::read(tmp.path().join(d).join("sample.png")).unwrap();
    assert_eq!(png("s1"), png("s2"));
    let maps = entries(&tmp.path().join("s1/attention"));
    assert!(maps.contains(&"block0_head1_identity.png".to_string()), "{maps:?}");

    let o = run(
        tmp.path(),
        &[
            "bench",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            m,
            "--seeds",
            "0,1",
            "--workers",
            "2",
            "--set",
            "bench.sample_steps=3",
            "--out",
            "b",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("SSIM(BG)"));
    let files = entries(&tmp.path().join("b"));
    for f in ["bench.jsonl", "contact_sheet.png", "summary.md"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }
    assert_eq!(fs::read_to_string(tmp.path().join("b/bench.jsonl")).unwrap().lines().count(), 12);

    let mut before = entries(tmp.path());
    before.sort();
    assert_eq!(before, vec!["b", "data", "run", "s1", "s2", "spec.json"]);
}
