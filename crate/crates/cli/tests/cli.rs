use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use darkmatter::sky::read_truth;

fn model() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models/darkmatter.bug")
}

fn darkmatter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darkmatter")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_reports_node_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let out = darkmatter(dir.path(), &["check", m.to_str().unwrap(), "--const", "G=2", "--const", "H=1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("27 nodes"), "{text}");
    assert!(text.contains("3 unobserved"), "{text}");
    assert!(text.contains("total nodes: 27"), "{text}");
}

#[test]
fn check_scales_with_constants() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    for g in [1usize, 7, 100, 1000] {
        for h in 1..=3usize {
            let (gc, hc) = (format!("G={g}"), format!("H={h}"));
            let out = darkmatter(dir.path(), &["check", m.to_str().unwrap(), "--const", &gc, "--const", &hc]);
            assert_eq!(out.status.code(), Some(0), "G={g} H={h}: {}", stderr(&out));
            let expected = format!("total nodes: {}", 8 * g * h + 4 * g + 3 * h);
            assert!(stdout(&out).contains(&expected), "{}", stdout(&out));
        }
    }
}

#[test]
fn simulate_then_fit_finds_the_halo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = darkmatter(d, &["--seed", "11", "simulate", "--halo", "1500,2500,1000", "--galaxies", "400", "--out", "sky1.csv", "--truth", "truth.csv"]);
    assert_eq!(sim.status.code(), Some(0), "{}", stderr(&sim));
    assert!(stderr(&sim).contains("seed: 11"));
    let truth = read_truth(d.join("truth.csv")).unwrap();
    assert_eq!(truth.len(), 1);
    assert_eq!((truth[0].halos[0].x, truth[0].halos[0].y), (1500.0, 2500.0));

    let fit = darkmatter(d, &["--seed", "2", "fit", "--data", "sky1.csv", "--halos", "1", "--out", "fit.json"]);
    assert_eq!(fit.status.code(), Some(0), "{}", stderr(&fit));
    let v = json(&d.join("fit.json"));
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 4, "{keys:?}");
    for k in ["halos", "neg_log_posterior", "evaluations", "converged"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let h = &v["halos"][0];
    let (x, y) = (h["x"].as_f64().unwrap(), h["y"].as_f64().unwrap());
    assert!((x - 1500.0).hypot(y - 2500.0) < 50.0, "fit at ({x}, {y})");
}

#[test]
fn infer_summary_covers_every_unobserved_node() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = darkmatter(d, &["--seed", "4", "simulate", "--halo", "1000,1000,800", "--halo", "3000,3200,600", "--galaxies", "300", "--out", "sky1.csv"]);
    assert_eq!(sim.status.code(), Some(0), "{}", stderr(&sim));
    let m = model();
    let out = darkmatter(
        d,
        &["--seed", "9", "infer", "--model", m.to_str().unwrap(), "--data", "sky1.csv", "--const", "H=2",
          "--iters", "400", "--burnin", "200", "--chains", "2", "--out", "draws.csv", "--summary", "summary.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&d.join("summary.json"));
    let nodes = v["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 6);
    for n in nodes {
        assert!(n["rhat"].is_number() || n["rhat"] == "inf", "{n}");
        assert!(n["ess"].as_f64().unwrap() > 0.0);
    }
    let draws = std::fs::read_to_string(d.join("draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 1 + 2 * 200);
    assert!(draws.starts_with("chain,iteration,"));
}

#[test]
fn plot_draws_galaxies_and_markers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    darkmatter(d, &["--seed", "1", "simulate", "--halo", "1500,2500,1000", "--galaxies", "400", "--out", "sky1.csv", "--truth", "truth.csv"]);
    darkmatter(d, &["--seed", "1", "fit", "--data", "sky1.csv", "--out", "fit.json"]);
    let out = darkmatter(d, &["plot", "--data", "sky1.csv", "--truth", "truth.csv", "--fit", "fit.json", "--out", "full.svg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let svg = std::fs::read_to_string(d.join("full.svg")).unwrap();
    assert_eq!(svg.matches("<ellipse").count(), 400);
    assert_eq!(svg.matches("class=\"true-halo\"").count(), 1);
    assert_eq!(svg.matches("class=\"fitted-halo\"").count(), 1);

    let out = darkmatter(d, &["plot", "--data", "sky1.csv", "--out", "bare.svg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let svg = std::fs::read_to_string(d.join("bare.svg")).unwrap();
    assert_eq!(svg.matches("<ellipse").count(), 400);
    assert!(!svg.contains("true-halo") && !svg.contains("fitted-halo"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(darkmatter(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(darkmatter(d, &["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(darkmatter(d, &["simulate", "--halo", "1,2", "--out", "x.csv"]).status.code(), Some(1));
    assert_eq!(darkmatter(d, &["--help"]).status.code(), Some(0));

    let missing = darkmatter(d, &["fit", "--data", "nope.csv", "--out", "f.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("nope.csv"));

    std::fs::write(d.join("bad.csv"), "GalaxyID,x,y,e1,e2\n1,2,3,0.1,0.2\n2,5,oops,0.1,0.2\n").unwrap();
    let bad = darkmatter(d, &["fit", "--data", "bad.csv", "--out", "f.json"]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = stderr(&bad);
    assert!(msg.contains("bad.csv") && msg.contains("line 3"), "{msg}");

    std::fs::write(d.join("bad.bug"), "model { x <- }\n").unwrap();
    let syntax = darkmatter(d, &["check", "bad.bug", "--const", "G=1"]);
    assert_eq!(syntax.status.code(), Some(2));
    assert!(stderr(&syntax).contains("bad.bug:1:"), "{}", stderr(&syntax));
}

#[test]
fn seed_is_always_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let out = darkmatter(dir.path(), &["simulate", "--halo", "100,100,10", "--galaxies", "5", "--out", "sky1.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let line = stderr(&out).lines().find(|l| l.starts_with("seed: ")).unwrap().to_string();
    assert!(line["seed: ".len()..].parse::<u64>().is_ok(), "{line}");
}
