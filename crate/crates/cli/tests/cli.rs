use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dlmlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const PAIR: &str = r#"{"type":"explicit","K":2,"H":2,"support":[[1,1],[2,2]],"prob":[0.75,0.25]}"#;

#[test]
fn schedule_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = dlmlab(&["schedule", "--steps", "4"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,beta,sigma");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].ends_with(",1e0"));
}

#[test]
fn corpus_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        stdout(&dlmlab(
            &[
                "lang", "sample", "-K", "5", "-H", "7", "--count", "20", "--seed", seed,
            ],
            dir.path(),
        ))
    };
    assert_eq!(run("3"), run("3"));
    assert_ne!(run("3"), run("4"));
    let o = dlmlab(
        &["lang", "sample", "--count", "5", "--out", "c/corpus.txt"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(dir.path().join("c/corpus.txt"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    assert!(dir.path().join("c/corpus.txt.meta.json").exists());
}

#[test]
fn kernel_table_marks_improving_edits() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pair.json"), PAIR).unwrap();
    let o = dlmlab(
        &[
            "kernel",
            "--instance",
            "pair.json",
            "--state",
            "1 2",
            "--t",
            "5",
            "--steps",
            "100",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("h,y,score,delta_d\n"));
    assert_eq!(text.lines().filter(|l| l.ends_with(",-1")).count(), 2);

    let bad = dlmlab(
        &[
            "kernel",
            "--instance",
            "pair.json",
            "--state",
            "1 2 1",
            "--t",
            "5",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pair.json"), PAIR).unwrap();
    let ok = dlmlab(
        &[
            "verify",
            "rates",
            "--instance",
            "pair.json",
            "--mechanism",
            "uniform",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(dir.path().join("r/rate_separation_uniform.csv").exists());
    // three levels are too coarse for the absorbing slope tolerance
    let coarse = dlmlab(
        &[
            "verify",
            "rates",
            "--instance",
            "pair.json",
            "--mechanism",
            "absorbing",
            "--sigma-grid",
            "0.2,0.1,0.05",
            "--out",
            "c",
        ],
        dir.path(),
    );
    assert_eq!(coarse.status.code(), Some(1));
    let rep = dlmlab(&["report", "c"], dir.path());
    assert_eq!(rep.status.code(), Some(1));
    assert!(stdout(&rep).contains("FAIL"));
    let b1 = dlmlab(&["verify", "example-b1", "--out", "b"], dir.path());
    assert!(b1.status.success());
    assert!(dlmlab(&["report", "b"], dir.path()).status.success());
    assert_eq!(
        dlmlab(&["report", "missing"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn train_sample_probe_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let walk = ["-K", "6", "-H", "5"];
    let mut train = vec![
        "train",
        "--mechanism",
        "absorbing",
        "--samples",
        "64",
        "--out",
        "ck",
    ];
    train.extend(walk);
    assert!(dlmlab(&train, p).status.success());
    let manifest = fs::read_to_string(p.join("ck/manifest.json")).unwrap();
    assert!(manifest.contains("\"tokens_seen\""));

    let mut sample = vec![
        "sample",
        "--checkpoints",
        "ck",
        "--mode",
        "hardmax",
        "--n",
        "50",
    ];
    sample.extend(walk);
    let a = dlmlab(&sample, p);
    assert!(a.status.success());
    assert_eq!(stdout(&a).lines().count(), 51);
    assert_eq!(stdout(&a), stdout(&dlmlab(&sample, p)));

    let mut direct = vec![
        "probe",
        "direct",
        "--checkpoints",
        "ck",
        "--n-samples",
        "50",
    ];
    direct.extend(walk);
    let d = dlmlab(&direct, p);
    assert!(d.status.success());
    assert!(stdout(&d).starts_with("tokens_seen,direct_support,direct_top1,direct_pairwise\n"));

    let mut indirect = vec![
        "probe",
        "indirect",
        "--checkpoints",
        "ck",
        "--corpus-size",
        "2000",
        "--save-bank",
        "bank.json",
    ];
    indirect.extend(walk);
    let i = dlmlab(&indirect, p);
    assert!(i.status.success(), "{}", String::from_utf8_lossy(&i.stderr));
    let mut reuse = vec![
        "probe",
        "indirect",
        "--checkpoints",
        "ck",
        "--bank",
        "bank.json",
    ];
    reuse.extend(walk);
    assert_eq!(stdout(&i), stdout(&dlmlab(&reuse, p)));
}

#[test]
fn exact_sampler_on_explicit_instance() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pair.json"), PAIR).unwrap();
    let o = dlmlab(
        &[
            "sample",
            "--exact",
            "--instance",
            "pair.json",
            "--mechanism",
            "absorbing",
            "--n",
            "30",
            "--steps",
            "20",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    // positions unmask independently, so a few samples may mix the two strings
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|l| !l.contains('m')));
    assert!(rows.iter().filter(|l| l.ends_with(",true,0")).count() >= 20);
    let neither = dlmlab(&["sample", "--instance", "pair.json"], dir.path());
    assert_eq!(neither.status.code(), Some(2));
}

#[test]
fn run_rejects_bad_config_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "name = \"bad\"\nseeds = []\n[instance]\ntype = \"walk\"\nK = 4\nH = 4\n",
    )
    .unwrap();
    let o = dlmlab(&["run", "bad.toml", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds"));
    assert!(!dir.path().join("o").exists());
}
