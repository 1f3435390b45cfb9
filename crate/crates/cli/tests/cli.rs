use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn prom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn quick_fit(dir: &Path, data: &str, out: &str, chains: &str) -> Output {
    prom(
        dir,
        &[
            "fit", "--data", data, "--seed", "3", "--chains", chains, "--warmup", "150", "--samples", "100", "--out-dir",
            out,
        ],
    )
}

#[test]
fn simulate_writes_cohort_truth_hidden_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = prom(tmp.path(), &["simulate", "--n", "82", "--seed", "7", "--out", "c.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("c.csv")).unwrap();
    assert_eq!(text.lines().count(), 83);
    for f in ["c.truth.json", "c.hidden.csv", "c.manifest.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let m = json(&tmp.path().join("c.manifest.json"));
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seeds"][0], 7);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["config"]["n"], 82);
}

#[test]
fn truth_file_with_missing_field_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "1", "--out", "c.csv"])), 0);
    let mut truth = json(&tmp.path().join("c.truth.json"));
    truth.as_object_mut().unwrap().remove("measurement_noise_sd");
    std::fs::write(tmp.path().join("bad.json"), truth.to_string()).unwrap();
    let o = prom(tmp.path(), &["simulate", "--seed", "1", "--truth", "bad.json", "--out", "d.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("measurement_noise_sd"), "{}", stderr(&o));

    // A round-tripped default truth file reproduces the default cohort.
    let o = prom(tmp.path(), &["simulate", "--seed", "1", "--truth", "c.truth.json", "--out", "e.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(tmp.path().join("c.csv")).unwrap(),
        std::fs::read(tmp.path().join("e.csv")).unwrap()
    );
}

#[test]
fn fit_outputs_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "2", "--out", "c.csv"])), 0);
    let o = quick_fit(tmp.path(), "c.csv", "fit", "2");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = tmp.path().join("fit");
    for f in [
        "posterior.ndjson",
        "posterior.csv",
        "model_spec.json",
        "transforms.json",
        "report.json",
        "imputation.csv",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let m = json(&dir.join("manifest.json"));
    assert!(m["sampler"]["max_rhat"].is_f64());
    assert_eq!(m["sampler"]["total_draws"], 200);
    let listed: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_str().unwrap().to_string())
        .collect();
    assert_eq!(listed.len(), 7);
    assert!(listed.iter().all(|p| tmp.path().join(p).exists()));
    // The recorded config is the resolved flag set.
    assert_eq!(m["config"]["target_accept"], 0.8);
    assert_eq!(m["config"]["max_depth"], 10);
    assert_eq!(m["config"]["parameterization"], "non-centered");

    let lines = std::fs::read_to_string(dir.join("posterior.ndjson")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for k in ["divergent", "tree_depth", "accept", "energy"] {
        assert!(first["stats"].get(k).is_some(), "{k}");
    }
    assert!(first["params"].get("beta_treatment[aug_deliv]").is_some());

    let imputation = std::fs::read_to_string(dir.join("imputation.csv")).unwrap();
    assert_eq!(imputation.lines().count(), 83);

    let o = prom(tmp.path(), &["fit", "--data", "c.csv", "--seed", "1", "--samples", "0", "--out-dir", "x"]);
    assert_eq!(code(&o), 2);
    let o = prom(tmp.path(), &["fit", "--data", "missing.csv", "--seed", "1", "--out-dir", "x"]);
    assert_eq!(code(&o), 2);
    let o = prom(tmp.path(), &["fit", "--data", "c.csv", "--out-dir", "x"]);
    assert_eq!(code(&o), 2, "seed is required");
}

#[test]
fn single_chain_fit_marks_rhat_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "4", "--out", "c.csv"])), 0);
    let o = quick_fit(tmp.path(), "c.csv", "fit", "1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json(&tmp.path().join("fit/manifest.json"));
    assert!(m["sampler"]["max_rhat"].is_null());
    let report = json(&tmp.path().join("fit/report.json"));
    assert!(report["params"][0]["rhat"].is_null());
}

#[test]
fn invalid_cohort_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.csv"), "id,foo\n1,2\n").unwrap();
    let o = prom(tmp.path(), &["fit", "--data", "bad.csv", "--seed", "1", "--out-dir", "x"]);
    assert_eq!(code(&o), 2);
    let o = prom(tmp.path(), &["baseline", "--data", "bad.csv", "--out", "b.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn summarize_and_ppc_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "5", "--out", "c.csv"])), 0);
    assert_eq!(code(&quick_fit(tmp.path(), "c.csv", "fit", "2")), 0);

    let o = prom(tmp.path(), &["summarize", "--posterior", "fit/posterior.ndjson", "--out", "forest.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let forest = std::fs::read_to_string(tmp.path().join("forest.csv")).unwrap();
    assert_eq!(forest.lines().count(), 1 + 34);
    assert!(forest.starts_with("parameter,family,outcome,mean,sd,hdr_lo,hdr_hi,significant"));
    let o = prom(tmp.path(), &["summarize", "--posterior", "fit/posterior.ndjson", "--hdr", "1.5", "--out", "f.csv"]);
    assert_eq!(code(&o), 2);
    std::fs::write(tmp.path().join("junk.ndjson"), "{\"chain\": 0}\n").unwrap();
    let o = prom(tmp.path(), &["summarize", "--posterior", "junk.ndjson", "--out", "f.csv"]);
    assert_eq!(code(&o), 2);

    let groups = |file: &str| {
        let text = std::fs::read_to_string(tmp.path().join(file)).unwrap();
        let mut g: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let mut f = l.split(',');
                (f.next().unwrap().to_string(), f.next().unwrap().to_string())
            })
            .collect();
        g.dedup();
        g.len()
    };
    let ppc = |draws: &str, out: &str| {
        prom(
            tmp.path(),
            &[
                "ppc", "--posterior", "fit/posterior.ndjson", "--data", "c.csv", "--seed", "9", "--draws", draws, "--out",
                out,
            ],
        )
    };
    assert_eq!(code(&ppc("1", "p1.csv")), 0);
    assert_eq!(groups("p1.csv"), 6 * 2);
    let o = ppc("200", "p200.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(groups("p200.csv"), 6 * 201);
    assert_eq!(code(&ppc("201", "p201.csv")), 2, "more replicates than draws");

    let o = prom(tmp.path(), &["ppc", "--posterior", "fit/posterior.ndjson", "--seed", "1", "--out", "p.csv"]);
    assert_eq!(code(&o), 2, "missing --data");
}

#[test]
fn baseline_reports_all_outcomes_and_rejects_single_arm() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "6", "--out", "c.csv"])), 0);
    let o = prom(tmp.path(), &["baseline", "--data", "c.csv", "--out", "b.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = json(&tmp.path().join("b.json"));
    assert_eq!(b["durations"].as_array().unwrap().len(), 4);
    assert!(b["cs"]["p_two_sided"].is_f64());

    let text = std::fs::read_to_string(tmp.path().join("c.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let mut single = vec![header.to_string()];
    single.extend(lines.filter(|l| l.contains(",PIT,")).map(str::to_string));
    assert!(single.len() > 5);
    std::fs::write(tmp.path().join("single.csv"), single.join("\n") + "\n").unwrap();
    let o = prom(tmp.path(), &["baseline", "--data", "single.csv", "--out", "s.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn manifest_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&prom(tmp.path(), &["simulate", "--seed", "8", "--n", "40", "--out", "c.csv"])), 0);
    let m = json(&tmp.path().join("c.manifest.json"));
    let cfg = &m["config"];
    let o = prom(
        tmp.path(),
        &[
            "simulate",
            "--n",
            &cfg["n"].to_string(),
            "--seed",
            &cfg["seed"].to_string(),
            "--truth",
            cfg["truth"].as_str().unwrap(),
            "--out",
            "again.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(tmp.path().join("c.csv")).unwrap(),
        std::fs::read(tmp.path().join("again.csv")).unwrap()
    );
}
