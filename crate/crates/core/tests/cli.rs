use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csinet::data::{read_manifest, read_mask, write_manifest, write_mask, ManifestRecord};
use csinet::metrics::Report;
use csinet::oracle::pixel_counts;
use csinet::train::read_log;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_csinet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "generate",
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--side",
        "96",
        "--seed",
        "5",
    ]);
    out.join("manifest.tsv")
}

fn train_tiny(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--preset",
        "tiny",
        "--manifest",
        s(manifest),
        "--out",
        s(out),
        "--steps",
        "4",
        "--batch-size",
        "2",
        "--lr",
        "1e-3",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn params_are_deterministic_and_frozen() {
    let a = ok(&["params", "--preset", "tiny"]);
    assert_eq!(a, ok(&["params", "--preset", "tiny"]));
    assert_eq!(a.trim(), "13085");
    assert_eq!(ok(&["params", "--preset", "toy"]).trim(), "502610");
}

#[test]
fn config_errors_have_documented_codes() {
    assert_eq!(code(&run(&["params", "--input-side", "40"])), 2);
    assert_eq!(code(&run(&["params", "--dice-weight", "0.5"])), 2);
    assert_eq!(code(&run(&["params", "--view_mode=sideways"])), 2);
    assert_eq!(code(&run(&["params", "--bogus-flag", "1"])), 2);
    assert_eq!(code(&run(&["params", "--decoder", "arc"])), 5);
    assert_eq!(code(&run(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&run(&["oracle", "--which", "nope"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    assert_eq!(
        code(&run(&[
            "train",
            "--manifest",
            s(&missing),
            "--out",
            s(dir.path())
        ])),
        3
    );
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&m, &a, &[]);
    train_tiny(&m, &b, &[]);
    let la = read_log(&a.join("loss.csv")).unwrap();
    let lb = read_log(&b.join("loss.csv")).unwrap();
    assert_eq!(la.len(), 4);
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(
            (x.step, x.lr, x.total, x.dice, x.bce),
            (y.step, y.lr, y.total, y.dice, y.bce)
        );
    }
    assert_eq!(
        std::fs::read(a.join("last.ckpt")).unwrap(),
        std::fs::read(b.join("last.ckpt")).unwrap()
    );
    // Two epochs of two steps each.
    assert!(a.join("epoch000.ckpt").exists() && a.join("epoch001.ckpt").exists());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 4);
    let full = dir.path().join("full");
    train_tiny(&m, &full, &[]);
    let resumed = dir.path().join("resumed");
    let ckpt = full.join("epoch000.ckpt");
    ok(&[
        "train",
        "--manifest",
        s(&m),
        "--out",
        s(&resumed),
        "--resume",
        s(&ckpt),
    ]);
    let a = read_log(&full.join("loss.csv")).unwrap();
    let b = read_log(&resumed.join("loss.csv")).unwrap();
    assert_eq!(b.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3]);
    for r in &b {
        let u = &a[r.step];
        assert!(
            (r.total - u.total).abs() < 1e-7,
            "step {}: {} vs {}",
            r.step,
            r.total,
            u.total
        );
        assert_eq!(r.lr, u.lr);
    }
    // Changing the model on resume is a configuration error.
    let o = run(&[
        "train",
        "--manifest",
        s(&m),
        "--out",
        s(&resumed),
        "--resume",
        s(&ckpt),
        "--heads",
        "2",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn predict_writes_a_full_side_mask_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 2);
    let run_dir = dir.path().join("run");
    train_tiny(&m, &run_dir, &["--steps", "1"]);
    let ckpt = run_dir.join("last.ckpt");
    let image = read_manifest(&m).unwrap()[0].image.clone();
    let (p1, p2) = (dir.path().join("p1.png"), dir.path().join("p2.png"));
    for p in [&p1, &p2] {
        ok(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&image),
            "--expression",
            "the red circle",
            "--out",
            s(p),
        ]);
    }
    let mask = read_mask(&p1).unwrap();
    // tiny: 2 x 32.
    assert_eq!(mask.shape(), (64, 64, 1));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let missing = dir.path().join("none.png");
    let o = run(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&missing),
        "--expression",
        "x",
        "--out",
        s(&p1),
    ]);
    assert_eq!(code(&o), 3);
    let o = run(&[
        "predict",
        "--checkpoint",
        s(&missing),
        "--image",
        s(&image),
        "--expression",
        "x",
        "--out",
        s(&p1),
    ]);
    assert_eq!(code(&o), 3);
}

fn eval_predictions(m: &Path, preds: &Path, report: &Path) -> Report {
    ok(&[
        "eval",
        "--manifest",
        s(m),
        "--predictions",
        s(preds),
        "--report",
        s(report),
    ]);
    Report::from_json(&std::fs::read_to_string(report).unwrap()).unwrap()
}

#[test]
fn eval_of_ground_truth_and_inverted_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 6);
    let records = read_manifest(&m).unwrap();

    let perfect = eval_predictions(&m, &m, &dir.path().join("gt.json"));
    let o = &perfect.overall;
    assert_eq!(
        (o.pr50, o.pr60, o.pr70, o.pr80, o.pr90),
        (100.0, 100.0, 100.0, 100.0, 100.0)
    );
    assert_eq!((o.oiou, o.miou), (1.0, 1.0));
    assert_eq!(perfect.samples, 6);
    assert!(perfect.per_category.values().all(|&v| v == 1.0));

    let inv_dir = dir.path().join("inv");
    std::fs::create_dir_all(&inv_dir).unwrap();
    let mut inverted = Vec::new();
    let (mut si, mut su, mut ious) = (0u64, 0u64, Vec::new());
    for (i, r) in records.iter().enumerate() {
        let gt = read_mask(&r.mask).unwrap();
        let inv = gt.inverted();
        let p = inv_dir.join(format!("{i}.png"));
        write_mask(&inv, &p).unwrap();
        let (a, b) = pixel_counts(&inv, &gt);
        si += a;
        su += b;
        ious.push(if b == 0 { 1.0 } else { a as f64 / b as f64 });
        inverted.push(ManifestRecord {
            mask: p,
            ..r.clone()
        });
    }
    let pm = inv_dir.join("manifest.tsv");
    write_manifest(&inverted, &pm).unwrap();
    let rep = eval_predictions(&m, &pm, &dir.path().join("inv.json"));
    let o = &rep.overall;
    assert_eq!(
        (o.pr50, o.pr60, o.pr70, o.pr80, o.pr90),
        (0.0, 0.0, 0.0, 0.0, 0.0)
    );
    // Pixel-loop cross-check.
    assert_eq!(o.oiou, si as f64 / su as f64);
    assert!((o.miou - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-12);
}

#[test]
fn eval_of_a_checkpoint_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 3);
    let run_dir = dir.path().join("run");
    train_tiny(&m, &run_dir, &["--steps", "2"]);
    let ckpt = run_dir.join("last.ckpt");
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    let t1 = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&m),
        "--report",
        s(&r1),
    ]);
    let t2 = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&m),
        "--report",
        s(&r2),
    ]);
    assert_eq!(t1, t2);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert!(t1.contains("mIoU"));
}

#[test]
fn oracle_and_gradcheck_commands_pass() {
    let out = ok(&["oracle", "--which", "all", "--trials", "5", "--seed", "3"]);
    assert_eq!(
        out.lines().filter(|l| l.ends_with("PASS")).count(),
        3,
        "{out}"
    );
    let out = ok(&["gradcheck", "--module", "losses"]);
    assert!(out.lines().last().unwrap().ends_with("PASS"));
}

#[test]
fn ablate_prints_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "ablate",
        "--preset",
        "tiny",
        "--synthetic",
        "4",
        "--scene-side",
        "96",
        "--val-synthetic",
        "2",
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--variant",
        "full:view_mode=full",
        "--variant",
        "remote:view_mode=only_remote",
        "--seeds",
        "0,1",
        "--report",
        s(&dir.path().join("abl.json")),
    ]);
    assert_eq!(out.lines().count(), 5, "{out}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("abl.json")).unwrap())
            .unwrap();
    assert_eq!(doc.as_array().unwrap().len(), 4);
    let o = run(&[
        "ablate",
        "--preset",
        "tiny",
        "--synthetic",
        "2",
        "--val-synthetic",
        "1",
        "--variant",
        "x:decoder=arc",
        "--steps",
        "1",
    ]);
    assert_eq!(code(&o), 5);
}
