use std::path::{Path, PathBuf};
use std::process::Command;

use differ::ensemble::EvalSummary;
use differ::net::load_checkpoint;
use differ::train::{load_dataset, RunMode};
use differ_cli::{cmd_eval, cmd_sample, cmd_synth, cmd_train, load_member, load_members, EvalArgs, RunConfig, SampleArgs, METRICS_HEADER};

fn tiny_config(dir: &Path, extra: &str) -> RunConfig {
    let base = format!(
        "synth_records = 24\nsynth_seed = 3\nholdout = 4\nlayers = 1\nd_model = 16\nd_ff = 32\nsteps = 10\npad_limit = 4\nbatch_size = 4\nlr = 1e-3\nepochs = 2\nseed = 5\nout = {}\n",
        dir.display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    RunConfig::parse(&text).unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_differ"));
    c.env_remove(differ_cli::OUT_ENV);
    c
}

#[test]
fn train_writes_checkpoints_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny_config(&out, "");
    let done = cmd_train(&cfg, None).unwrap();
    assert_eq!(done.out, out);
    for e in 1..=2 {
        let ck = load_checkpoint(&out.join(format!("epoch-{e:03}.ckpt"))).unwrap();
        assert_eq!(ck.extra["epoch"], e.to_string());
    }
    let last = load_checkpoint(&out.join("epoch-002.ckpt")).unwrap();
    for (a, b) in last.model.params.iter().zip(&done.trainer.model.params) {
        assert_eq!(a.data(), b.data());
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["train_records"], 20);
    assert_eq!(manifest["checkpoints"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["dataset_fingerprint"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["d_model"], 16);
    assert_eq!(load_dataset(&out.join("heldout.rxn")).unwrap().records.len(), 4);
}

#[test]
fn training_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = cmd_train(&tiny_config(&tmp.path().join("a"), ""), None).unwrap();
    let b = cmd_train(&tiny_config(&tmp.path().join("b"), ""), None).unwrap();
    assert_eq!(a.manifest.metrics, b.manifest.metrics);
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a.out), read(&b.out));
    let c = cmd_train(&tiny_config(&tmp.path().join("c"), "seed = 6"), None).unwrap();
    assert_ne!(a.manifest.metrics, c.manifest.metrics);
}

#[test]
fn baseline_mode_trains_without_pads() {
    let tmp = tempfile::tempdir().unwrap();
    let done = cmd_train(&tiny_config(&tmp.path().join("b"), "mode = baseline-length\nepochs = 1"), None).unwrap();
    assert_eq!(done.trainer.model.config().pad_limit, 0);
    assert_eq!(done.manifest.mode, "baseline-length");
}

fn trained(tmp: &Path) -> PathBuf {
    let out = tmp.join("run");
    cmd_train(&tiny_config(&out, "epochs = 1"), None).unwrap();
    out
}

#[test]
fn sampling_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path()).join("epoch-001.ckpt");
    let members = load_members(&[ckpt.clone()]).unwrap();
    let args = SampleArgs { seed: 3, n_aug: 1, oracle_length: None };
    let (agg, report) = cmd_sample(&members, "CC(=O)OCC", &args).unwrap();
    assert_eq!(agg.total, 1);
    assert_eq!(report, cmd_sample(&members, "CC(=O)OCC", &args).unwrap().1);
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), agg.ranking.len());
    assert!(agg.ranking.len() <= 1);

    let eight: Vec<PathBuf> = vec![ckpt; 8];
    let members = load_members(&eight).unwrap();
    let (agg, report) = cmd_sample(&members, "CC(=O)OCC", &SampleArgs { seed: 3, n_aug: 20, oracle_length: None }).unwrap();
    assert_eq!(agg.total, 160);
    assert!(report.lines().last().unwrap().starts_with("# samples\t160\t"));
    assert!(agg.ranking.iter().map(|c| c.frequency).sum::<f64>() <= 1.0 + 1e-12);
    let freq: f64 = report.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').nth(3).unwrap().parse::<f64>().unwrap()).sum();
    assert!(freq <= 1.0 + 1e-3);

    let (agg, _) = cmd_sample(&members[..1], "CCO", &SampleArgs { seed: 0, n_aug: 2, oracle_length: Some(3) }).unwrap();
    assert_eq!(agg.total, 2);

    let err = cmd_sample(&members[..1], "CC(C", &args).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("parenthesis"), "{err}");
}

#[test]
fn evaluation_writes_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    let member = load_member(&run.join("epoch-001.ckpt")).unwrap();
    let test = run.join("heldout.rxn");
    let args = EvalArgs { mode: RunMode::VariantPad, seed: 1, n_aug: 2, limit: None };
    let out = tmp.path().join("eval");
    let s = cmd_eval(std::slice::from_ref(&member), &test, &args, Some(&out)).unwrap();
    assert_eq!(s.reactions, 4);
    let table = std::fs::read_to_string(out.join("eval.tsv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), EvalSummary::header());
    assert_eq!(table.lines().nth(1).unwrap(), s.row());
    assert_eq!(std::fs::read_to_string(out.join("eval-reactions.tsv")).unwrap().lines().count(), 5);
    let oracle = cmd_eval(std::slice::from_ref(&member), &test, &EvalArgs { mode: RunMode::OracleLength, ..args.clone() }, None).unwrap();
    assert_eq!(oracle.reactions, 4);
    let missing = cmd_eval(&[member], &tmp.path().join("none.rxn"), &args, None).unwrap_err();
    assert_eq!(missing.exit_code(), 1);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.rxn"), tmp.path().join("sub/b.rxn"));
    cmd_synth(&a, 15, 2).unwrap();
    cmd_synth(&b, 15, 2).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_dataset(&a).unwrap().records.len(), 15);
}

#[test]
fn binary_exit_codes_and_output_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "synth_records = 10\nbogus = 3\n").unwrap();
    let o = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus") && err.contains("valid keys") && err.contains("batch_size"), "{err}");

    assert_eq!(bin().args(["sample", "--product", "CC"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    std::fs::write(&cfg, "synth_records = 8\nholdout = 2\nlayers = 1\nd_model = 16\nd_ff = 32\nsteps = 5\nepochs = 1\nout = ignored\n").unwrap();
    let out = tmp.path().join("elsewhere");
    let o = bin().args(["train", "--config"]).arg(&cfg).env(differ_cli::OUT_ENV, &out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("epoch-001.ckpt").exists());
    assert!(!tmp.path().join("ignored").exists());

    let o = bin().args(["sample", "--n-aug", "2", "--product", "CCO", "--ckpt"]).arg(out.join("epoch-001.ckpt")).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("# samples\t2"));
    let o = bin().args(["sample", "--product", "C1CC", "--ckpt"]).arg(out.join("epoch-001.ckpt")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let rxn = tmp.path().join("s.rxn");
    let o = bin().args(["synth", "--n", "5", "--seed", "1", "--out"]).arg(&rxn).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(load_dataset(&rxn).unwrap().records.len(), 5);
}
