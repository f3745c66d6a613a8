use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = crac(&["gen", "--preset", "tiny", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("dataset.crsd")
}

fn write_config(dir: &Path, dataset: &Path, output: &Path, loss: &str) -> PathBuf {
    let path = dir.join(format!("{loss}.cfg"));
    std::fs::write(
        &path,
        format!(
            "dataset = {}\noutput = {}\nloss = {loss}\nepochs = 2\nbatch_size = 4\nseed = 5\n",
            dataset.display(),
            output.display()
        ),
    )
    .unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_is_deterministic_and_stays_in_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = crac(&["gen", "--preset", "tiny", "--seed", "7", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(files_under(&a), vec![a.join("dataset.crsd")]);
    assert_eq!(
        std::fs::read(a.join("dataset.crsd")).unwrap(),
        std::fs::read(b.join("dataset.crsd")).unwrap()
    );
    let mut top: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    top.sort();
    assert_eq!(top, vec![a, b]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(crac(&["gen", "--preset", "tiny"]).status.code(), Some(2));
    assert_eq!(crac(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(crac(&["train"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = crac(&["sweep", "--config", "x.cfg", "--loss", "ce", "--lambdas", "0.1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = crac(&["sweep", "--config", "x.cfg", "--loss", "nacl", "--lambdas", "", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files_under(dir.path()).is_empty());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = crac(&["gen", "--preset", "nope", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = crac(&["train", "--config", s(&dir.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn train_then_eval_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &run, "crac");
    let o = crac(&["train", "--config", s(&cfg), "--set", "epochs=3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = read_csv(&run.join("train_log.csv"));
    assert_eq!(log.len(), 4);
    assert!(log[0].contains(&"lambda_1_inner".to_string()));
    for e in 1..=3 {
        assert!(run.join(format!("epoch_{e:03}.crck")).is_file());
    }

    let ev = dir.path().join("eval");
    let o = crac(&[
        "eval",
        "--ckpt",
        s(&run.join("last.crck")),
        "--dataset",
        s(&data),
        "--split",
        "test",
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_csv(&ev.join("metrics.csv"));
    assert_eq!(m[0], ["method", "dsc", "hd95", "ece", "tace"]);
    assert_eq!(m.len(), 2);
    assert_eq!(m[1][0], "run");
    for v in &m[1][1..] {
        assert!(v.parse::<f64>().unwrap().is_finite());
    }
    let names: Vec<_> = files_under(&ev).iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["logit_hist.csv", "metrics.csv", "metrics_per_class.csv", "reliability.csv"]);
    // 3 roles x 50 bins plus the header.
    assert_eq!(read_csv(&ev.join("logit_hist.csv")).len(), 151);
    assert_eq!(read_csv(&ev.join("reliability.csv")).len(), 11);
    assert_eq!(read_csv(&ev.join("metrics_per_class.csv")).len(), 3);

    // Resume from epoch 2 into a copy reproduces the final checkpoint.
    let o = crac(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "epochs=3",
        "--resume",
        s(&run.join("epoch_002.crck")),
        "--set",
        &format!("output={}", dir.path().join("resumed").display()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(run.join("last.crck")).unwrap(),
        std::fs::read(dir.path().join("resumed/last.crck")).unwrap()
    );
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let o = crac(&["eval", "--ckpt", s(&data), "--dataset", s(&data), "--out", s(&dir.path().join("ev"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &run, "ce");
    assert!(crac(&["train", "--config", s(&cfg), "--set", "epochs=1"]).status.success());
    let other = dir.path().join("toy4");
    assert!(crac(&["gen", "--preset", "toy4", "--out", s(&other)]).status.success());
    let o = crac(&[
        "eval",
        "--ckpt",
        s(&run.join("last.crck")),
        "--dataset",
        s(&other.join("dataset.crsd")),
        "--out",
        s(&dir.path().join("ev")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("classes"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = write_config(dir.path(), &data, &dir.path().join("unused"), "ce");
    let out = dir.path().join("sweep");
    let o = crac(&[
        "sweep", "--config", s(&cfg), "--loss", "nacl", "--lambdas", "0.05,0.1,0.3", "--out", s(&out), "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ["method", "lambda", "dsc", "hd95", "ece", "tace"]);
    assert_eq!(rows[1][1], "0.05");
    assert!(out.join("nacl_lambda_0.3/metrics.csv").is_file());
    assert!(!dir.path().join("unused").exists());

    // A single value matches a plain train + eval with the same settings.
    let single = dir.path().join("single");
    assert!(crac(&["sweep", "--config", s(&cfg), "--loss", "nacl", "--lambdas", "0.1", "--out", s(&single)])
        .status
        .success());
    assert_eq!(read_csv(&single.join("sweep.csv"))[1], rows[2]);
}

fn write_table(path: &Path, header: &str, rows: &[String]) {
    std::fs::write(path, format!("{header}\n{}\n", rows.join("\n"))).unwrap();
}

#[test]
fn report_ranks_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let header = "method,acdc_dsc,acdc_hd,acdc_ece,acdc_tace,flare_dsc,flare_hd,flare_ece,flare_tace";
    // Published benchmark values.
    let rows = [
        "FL,0.620,7.30,0.153,0.224,0.834,6.65,0.053,0.145",
        "ECP,0.782,4.44,0.130,0.151,0.860,5.30,0.037,0.134",
        "LS,0.809,3.30,0.083,0.093,0.860,5.33,0.055,0.050",
        "SVLS,0.824,2.81,0.091,0.138,0.857,5.72,0.039,0.144",
        "MbLS,0.827,2.99,0.103,0.081,0.836,5.75,0.046,0.041",
        "NACL,0.854,2.93,0.068,0.073,0.868,5.12,0.033,0.031",
        "BWCR,0.841,2.69,0.051,0.075,0.848,5.39,0.029,0.059",
        "CRaC,0.877,1.72,0.057,0.058,0.876,5.52,0.029,0.033",
    ];
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_table(&a, header, &rows[..4].iter().map(|r| r.to_string()).collect::<Vec<_>>());
    write_table(&b, header, &rows[4..].iter().map(|r| r.to_string()).collect::<Vec<_>>());
    let out = dir.path().join("report");
    let o = crac(&["report", "--metrics", s(&a), s(&b), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rank = read_csv(&out.join("rank.csv"));
    assert_eq!(rank[1][0], "CRaC");
    assert_eq!(rank[1].last().unwrap(), "1");
    assert_eq!(rank[2][0], "NACL");
    assert_eq!(rank.len(), 9);
}

#[test]
fn report_single_method_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("metrics.csv");
    write_table(&a, "method,dsc,hd95,ece,tace", &["only,0.9,2,0.05,0.01".to_string()]);
    write_table(
        &dir.path().join("logit_hist.csv"),
        "method,role,bin,lower,upper,count",
        &["only,winner,0,-20,-19,3".to_string(), "only,winner,1,-19,-18,4".to_string()],
    );
    let out = dir.path().join("report");
    let o = crac(&["report", "--metrics", s(&a), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rank = read_csv(&out.join("rank.csv"));
    assert_eq!(rank[1][0], "only");
    assert_eq!(rank[1][rank[1].len() - 2], "1");
    assert_eq!(read_csv(&out.join("logit_hist_only.csv")).len(), 3);
}

#[test]
fn report_rejects_mismatched_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_table(&a, "method,dsc,ece", &["x,0.9,0.1".to_string()]);
    write_table(&b, "method,dsc,tace", &["y,0.8,0.1".to_string()]);
    let out = dir.path().join("report");
    let o = crac(&["report", "--metrics", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("columns"));
    assert!(!out.exists());
}

#[test]
fn check_passes_and_detects_noncompliant_penalty() {
    let o = crac(&["check", "--instances", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = crac(&["check", "--instances", "2", "--inject-noncompliant"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("axiom 3: FAIL") && text.contains("axiom 4: FAIL"), "{text}");
    assert!(text.contains("axiom 1: pass"));
}
