use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use binadapt::cli::{self, Manifest, MANIFEST_FILE};

/// Small enough that a full `run` takes well under a second per epoch.
const TINY: &str = "depth = 1\nfilters = 2\npatch_h = 16\npatch_w = 16\nepochs = 1\nbatch = 8\n";

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("binadapt").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let file = dir.join("exp.cfg");
    fs::write(&file, format!("{TINY}{extra}")).unwrap();
    file
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn synth(root: &Path) -> PathBuf {
    let data = root.join("data");
    assert_eq!(run(&["synth", "--seed", "0", "--out", path(&data)]), 0);
    data
}

#[test]
fn synth_writes_three_domains_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for domain in ["source", "target-near", "target-far"] {
        for sub in ["images", "gt"] {
            let n = fs::read_dir(data.join(domain).join(sub)).unwrap().count();
            assert!(n >= 8, "{domain}/{sub}: {n}");
        }
    }
    let again = tmp.path().join("again");
    assert_eq!(run(&["synth", "--seed", "0", "--out", path(&again)]), 0);
    let (a, b) = (manifest(&data), manifest(&again));
    assert_eq!(a.outputs, b.outputs);
    for rel in &a.outputs[..a.outputs.len() - 1] {
        assert_eq!(fs::read(data.join(rel)).unwrap(), fs::read(again.join(rel)).unwrap(), "{rel}");
    }
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn run_writes_masks_report_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let code = run(&[
        "run",
        "--config",
        path(&cfg),
        "--source",
        path(&data.join("source")),
        "--target",
        path(&data.join("target-near")),
        "--out",
        path(&out),
    ]);
    assert_eq!(code, 0);
    let m = manifest(&out);
    assert_eq!(m.command, "run");
    assert_eq!(m.checkpoint_format, "BINADAPT1");
    assert!(m.decision.is_some());
    for file in ["report.json", "hist_source.csv", "hist_target.csv", "sae.ckpt", "history_sae.csv", "summary.csv"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    let masks = fs::read_dir(out.join("masks")).unwrap().count();
    assert_eq!(masks, fs::read_dir(data.join("target-near/images")).unwrap().count());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["rho", "kl_st", "kl_ts", "js", "hist_intersection", "rho_th", "decision", "degenerate_flag"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("page,f1,precision,recall\n"));
    assert!(summary.lines().last().unwrap().starts_with("all,"));
}

#[test]
fn run_without_target_truth_skips_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let unlabeled = tmp.path().join("unlabeled");
    fs::create_dir_all(unlabeled.join("images")).unwrap();
    for entry in fs::read_dir(data.join("target-near/images")).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), unlabeled.join("images").join(entry.file_name())).unwrap();
    }
    let cfg = write_config(
        tmp.path(),
        &format!("source_dir = {}\ntarget_dir = {}\n", path(&data.join("source")), path(&unlabeled)),
    );
    let out = tmp.path().join("out");
    assert_eq!(run(&["run", "--config", path(&cfg), "--out", path(&out)]), 0);
    assert!(out.join("report.json").is_file());
    assert!(!out.join("summary.csv").exists());
}

#[test]
fn train_predict_and_self_similarity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let source = data.join("source");
    let cfg = write_config(tmp.path(), "");
    let trained = tmp.path().join("trained");
    assert_eq!(run(&["train-sae", "--config", path(&cfg), "--source", path(&source), "--out", path(&trained)]), 0);
    let ckpt = trained.join("sae.ckpt");
    assert!(ckpt.is_file() && trained.join("history.csv").is_file());

    let page = fs::read_dir(source.join("images")).unwrap().next().unwrap().unwrap().path();
    let predicted = tmp.path().join("predicted");
    assert_eq!(
        run(&["predict", "--checkpoint", path(&ckpt), "--input", path(&page), "--out", path(&predicted)]),
        0
    );
    let stem = page.file_stem().unwrap().to_str().unwrap();
    let prob = binadapt::data::read_pgm(&fs::read(predicted.join(format!("{stem}_prob.pgm"))).unwrap()).unwrap();
    let bin = binadapt::data::read_pgm(&fs::read(predicted.join(format!("{stem}_bin.pgm"))).unwrap()).unwrap();
    let original = binadapt::data::read_pgm(&fs::read(&page).unwrap()).unwrap();
    assert_eq!((prob.width, prob.height), (original.width, original.height));
    assert!(bin.pixels.iter().all(|&v| v == 0.0 || v == 1.0));

    // The source compared with itself is maximally similar.
    let sim = tmp.path().join("sim");
    let code = run(&[
        "similarity",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&ckpt),
        "--source",
        path(&source),
        "--target",
        path(&source),
        "--out",
        path(&sim),
    ]);
    assert_eq!(code, 0);
    assert_eq!(manifest(&sim).decision.map(|d| d.to_string()).as_deref(), Some("UseSAE"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = tmp.path().join("bad.cfg");
    fs::write(&bad_key, "colour = red\n").unwrap();
    assert_eq!(run(&["synth", "--config", path(&bad_key)]), 2);
    assert_eq!(run(&["synth", "--config", path(&tmp.path().join("missing.cfg"))]), 3);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["run", "--out", path(&tmp.path().join("o"))]), 2);

    let truncated = tmp.path().join("page.pgm");
    fs::write(&truncated, b"P5\n4 4\n255\nab").unwrap();
    let garbage = tmp.path().join("model.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = tmp.path().join("p");
    assert_eq!(run(&["predict", "--checkpoint", path(&garbage), "--input", path(&truncated), "--out", path(&out)]), 1);
    assert_eq!(
        run(&["predict", "--checkpoint", path(&tmp.path().join("nope.ckpt")), "--input", path(&truncated)]),
        3
    );
}

#[test]
fn binary_reports_failures_on_stderr() {
    let bin = env!("CARGO_BIN_EXE_binadapt");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 0\n").unwrap();
    let out = Command::new(bin).args(["synth", "--config", path(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error category=config exit=2:"), "{err}");

    let out = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    let out = Command::new(bin)
        .args(["synth", "--out", path(&tmp.path().join("s"))])
        .env("BINADAPT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
