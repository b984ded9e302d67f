use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metacond::special::norm_cdf;
use metacond::{scenarios, ConditionRequest, MetaModel};
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacond"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A small fitted GMCM on the bivariate mixture scenario.
fn fitted_model(dir: &Path) {
    ok(dir, &["generate", "--scenario", "gmm", "--n", "400", "--out", "gmm.csv"]);
    ok(dir, &["fit", "gmm.csv", "--k", "2", "--max-iter", "150", "--out", "model.json"]);
}

#[test]
fn generate_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for scenario in ["gmm", "meta-gmm", "gmcm-2d", "gmcm-3d"] {
        ok(d, &["generate", "--scenario", scenario, "--n", "300", "--seed", "4", "--out", "a.csv"]);
        ok(d, &["generate", "--scenario", scenario, "--n", "300", "--seed", "4", "--out", "b.csv"]);
        assert_eq!(read(d, "a.csv"), read(d, "b.csv"), "{scenario}");
        ok(d, &["generate", "--scenario", scenario, "--n", "300", "--seed", "5", "--out", "c.csv"]);
        assert_ne!(read(d, "a.csv"), read(d, "c.csv"), "{scenario}");
    }
    ok(d, &["generate", "--scenario", "gmm", "--n", "300", "--seed", "4", "--out", "g.csv"]);
    let stdout = ok(d, &["generate", "--scenario", "gmm", "--n", "300", "--seed", "4"]);
    assert_eq!(stdout.as_bytes(), read(d, "g.csv").as_slice());
}

#[test]
fn generate_gmm_has_the_stated_first_component_weight() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["generate", "--scenario", "gmm", "--n", "5000"]);
    let (header, rows) = parse_csv(&text);
    assert_eq!(header, vec!["x1", "x2"]);
    assert_eq!(rows.len(), 5000);
    // x1 > 1 separates the components up to about 1.7% and 0.1% misclassification.
    let frac = rows.iter().filter(|r| r[0] > 1.0).count() as f64 / 5000.0;
    assert!((frac - 0.3).abs() < 0.025, "first component share {frac}");
}

#[test]
fn generate_meta_gmm_margins_are_standard_normal() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["generate", "--scenario", "meta-gmm", "--n", "5000", "--seed", "2"]);
    let (_, rows) = parse_csv(&text);
    let n = rows.len() as f64;
    let critical = 1.9495 / n.sqrt();
    for j in 0..2 {
        let mut x: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        x.sort_by(f64::total_cmp);
        let d = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = norm_cdf(*v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < critical, "column {j}: KS statistic {d} above {critical}");
    }
}

#[test]
fn comparison_configurations_are_loaded_verbatim() {
    let m2 = scenarios::gmcm_2d();
    assert_eq!(m2.weights(), &[0.45, 0.55]);
    assert_eq!(m2.components()[0].mean().as_slice(), &[5.15, 4.32]);
    let m3 = scenarios::gmcm_3d();
    assert_eq!(m3.weights(), &[0.69, 0.163, 0.147]);
}

#[test]
fn independent_uniforms_give_identity_correlation() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    // Weyl sequences with unrelated irrational steps are close to independent.
    let mut text = String::from("a,b\n");
    for i in 1..=600 {
        let u = (i as f64 * 0.618_033_988_749_894_8).fract();
        let v = (i as f64 * 0.414_213_562_373_095_1 * 7.0 + 0.1).fract();
        text.push_str(&format!("{u},{v}\n"));
    }
    write(d, "u.csv", &text);
    let stdout = ok(d, &["fit", "u.csv", "--family", "gc", "--margins", "empirical", "--out", "gc.json"]);
    let lines: Vec<&str> = stdout.lines().collect();
    let at = lines.iter().position(|l| *l == "correlation:").expect("correlation printed");
    let r01: f64 = lines[at + 1].split_whitespace().nth(1).unwrap().parse().unwrap();
    let r00: f64 = lines[at + 1].split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(r00, 1.0);
    assert!(r01.abs() < 0.1, "off-diagonal {r01}");
}

#[test]
fn fit_summary_reports_loglik_and_iterations() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "gmm", "--n", "200", "--out", "g.csv"]);
    for family in ["gc", "tgmm", "student-t"] {
        let s = ok(d, &["fit", "g.csv", "--family", family, "--out", "m.json"]);
        assert!(s.contains(&format!("family: {family}")), "{s}");
        assert!(s.lines().any(|l| l.starts_with("loglik: ")), "{s}");
        assert!(s.lines().any(|l| l.starts_with("iterations: ")), "{s}");
        assert!(MetaModel::from_json(&String::from_utf8(read(d, "m.json")).unwrap()).is_ok());
    }
}

#[test]
fn model_file_round_trips_to_identical_conditional_cdf() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fitted_model(d);
    let json = String::from_utf8(read(d, "model.json")).unwrap();
    let model = MetaModel::from_json(&json).unwrap();
    assert_eq!(model.to_json().unwrap(), json);

    let grid: Vec<f64> = (0..41).map(|i| -6.0 + 0.3 * i as f64).collect();
    let grid_text: String = grid.iter().map(|g| format!("{g}\n")).collect();
    write(d, "grid.txt", &grid_text);
    let out = ok(d, &["condition", "model.json", "--given", "x2=2", "--cdf-grid", "grid.txt"]);
    let (header, rows) = parse_csv(&out);
    assert_eq!(header, vec!["grid", "value"]);
    let req = ConditionRequest::new(vec![1], vec![2.0], 1).with_grid(grid.clone());
    let expected = model.conditional_cdf(&req).unwrap();
    for (row, (g, e)) in rows.iter().zip(grid.iter().zip(&expected)) {
        assert_eq!(row[0], *g);
        assert_eq!(row[1].to_bits(), e.to_bits());
    }
    assert!(rows.windows(2).all(|w| w[0][1] <= w[1][1]), "CDF column must be nondecreasing");
    assert!(rows[0][1] < 0.05 && rows[rows.len() - 1][1] > 0.95);
}

#[test]
fn condition_single_draw_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fitted_model(d);
    let a = ok(d, &["condition", "model.json", "--given", "x2=1.5", "--n", "1", "--seed", "9"]);
    let b = ok(d, &["condition", "model.json", "--given", "x2=1.5", "--n", "1", "--seed", "9"]);
    assert_eq!(a, b);
    let (header, rows) = parse_csv(&a);
    assert_eq!(header, vec!["x1"]);
    assert_eq!(rows.len(), 1);
    ok(d, &["condition", "model.json", "--given", "x2=1.5", "--n", "50", "--out", "s.csv"]);
    assert_eq!(parse_csv(&String::from_utf8(read(d, "s.csv")).unwrap()).1.len(), 50);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fitted_model(d);

    let out = run(d, &["condition", "model.json", "--given", "x9=1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("x9"));

    let out = run(d, &["condition", "model.json", "--given", "x1=0,x2=1"]);
    assert_eq!(code(&out), 2, "conditioning on every column leaves no target");

    let json = String::from_utf8(read(d, "model.json")).unwrap();
    assert!(json.contains("\"format_version\": 1"));
    write(d, "v9.json", &json.replace("\"format_version\": 1", "\"format_version\": 9"));
    let out = run(d, &["condition", "v9.json", "--given", "x2=1"]);
    assert_eq!(code(&out), 5);
    write(d, "junk.json", "{not json");
    assert_eq!(code(&run(d, &["condition", "junk.json", "--given", "x2=1"])), 5);

    write(d, "text.csv", "a,b\n1,2\n3,4\nfive,6\n");
    let out = run(d, &["fit", "text.csv"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("column 1 (a)"), "{err}");

    write(d, "short.csv", "a,b\n1,2\n3,4\n");
    assert_eq!(code(&run(d, &["fit", "short.csv"])), 2);

    let mut constant = String::from("a,b\n");
    for i in 0..30 {
        constant.push_str(&format!("1,{i}\n"));
    }
    write(d, "const.csv", &constant);
    let out = run(d, &["fit", "const.csv", "--family", "gc"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("column 0"));

    assert_eq!(code(&run(d, &["fit", "gmm.csv", "--family", "nope"])), 2);
    assert_eq!(code(&run(d, &["generate", "--scenario", "nope"])), 2);
    assert_eq!(code(&run(d, &["frobnicate"])), 2);

    let help = String::from_utf8(run(d, &["--help"]).stdout).unwrap();
    for line in ["0  success", "2  input", "3  fit", "4  conditioning", "5  model file format"] {
        assert!(help.contains(line), "help lacks {line:?}");
    }
}

#[test]
fn degenerate_conditioning_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    // Both latent components put the given coordinate 1e10 away with a
    // 1e-290 variance, so every conditioning weight underflows.
    let margin = r#"{"kind": "parametric-gmm", "gmm": {"weights": [1.0], "means": [0.0], "sds": [1.0]}}"#;
    let component = r#"{"mean": [0.0, 1e10], "cov": {"rows": 2, "cols": 2, "data": [1.0, 0.0, 0.0, 1e-290]}}"#;
    let json = format!(
        r#"{{"format_version": 1, "family": "tgmm", "column_names": ["a", "b"],
            "marginals": [{margin}, {margin}],
            "latent": {{"weights": [0.5, 0.5], "components": [{component}, {component}]}}}}"#
    );
    write(d, "far.json", &json);
    let model = MetaModel::from_json(&json).unwrap();
    let req = ConditionRequest::new(vec![1], vec![0.0], 5);
    assert!(matches!(
        model.conditional_latent(&req).unwrap_err().root(),
        metacond::Error::DegenerateConditioning
    ));
    let out = run(d, &["condition", "far.json", "--given", "b=0"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn score_writes_reports_and_records_unknown_methods() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let args = [
        "score", "--synthetic", "gmm", "--n", "300", "--methods", "gc,bogus", "--splits", "1",
        "--n-samples", "200", "--max-test", "15", "--seed", "3", "--out", "r1",
    ];
    let s1 = ok(d, &args);
    let mut again = args;
    again[args.len() - 1] = "r2";
    let s2 = ok(d, &again);
    assert_eq!(s1, s2);
    assert_eq!(read(d, "r1.json"), read(d, "r2.json"));
    assert_eq!(read(d, "r1.csv"), read(d, "r2.csv"));

    let json = String::from_utf8(read(d, "r1.json")).unwrap();
    assert!(json.contains("\"bogus\"") && json.contains("unknown method"), "{json}");
    let csv = String::from_utf8(read(d, "r1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("split,method,point,score,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("gc")));
    assert!(s1.contains("failed: bogus"));

    let out = run(d, &["score", "--synthetic", "gmm", "--n", "100", "--methods", "bogus", "--out", "r3"]);
    assert_eq!(code(&out), 3, "no method succeeded");
}

#[test]
fn score_footer_reports_the_crps_ordering() {
    let dir = TempDir::new().unwrap();
    let s = ok(
        dir.path(),
        &[
            "score", "--synthetic", "gmm", "--n", "300", "--n-samples", "200", "--max-test", "10",
            "--max-iter", "100",
        ],
    );
    let footer = s
        .lines()
        .find(|l| l.starts_with("ordering {gmcm, tgmm} < ckde < gc"))
        .expect("ordering line");
    assert!(footer.ends_with("holds") || footer.ends_with("violated"));
    assert!(s.lines().any(|l| l.starts_with("gc/gmcm crps ratio")));
    assert!(dir.path().join("scores.json").exists() && dir.path().join("scores.csv").exists());
}

#[test]
fn compare_fitters_table_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let args = ["compare-fitters", "--config", "2d", "--n", "150", "--reps", "1", "--max-iter", "60"];
    let a = run(d, &args);
    let b = run(d, &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,replicate,loglik,energy_distance"));
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, vec!["AD", "FD", "PEM"]);
    let footer = String::from_utf8(a.stderr).unwrap();
    assert!(footer.contains("AD best"), "{footer}");

    ok(d, &["compare-fitters", "--config", "3d", "--n", "100", "--reps", "1", "--max-iter", "20", "--out", "c.csv"]);
    assert_eq!(String::from_utf8(read(d, "c.csv")).unwrap().lines().count(), 4);
    assert_eq!(code(&run(d, &["compare-fitters", "--config", "4d"])), 2);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "gmm", "--n", "300", "--out", "g.csv"]);
    ok(d, &["--threads", "1", "fit", "g.csv", "--max-iter", "80", "--out", "m1.json"]);
    ok(d, &["--threads", "4", "fit", "g.csv", "--max-iter", "80", "--out", "m4.json"]);
    assert_eq!(read(d, "m1.json"), read(d, "m4.json"));
    let s1 = ok(d, &["--threads", "1", "score", "g.csv", "--methods", "tgmm,ckde", "--n-samples", "100", "--out", "s1"]);
    let s4 = ok(d, &["--threads", "3", "score", "g.csv", "--methods", "tgmm,ckde", "--n-samples", "100", "--out", "s4"]);
    assert_eq!(s1, s4);
    assert_eq!(read(d, "s1.csv"), read(d, "s4.csv"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "gmm", "--n", "200", "--out", "g.csv"]);
    write(d, "run.cfg", "# fit settings\nfamily = gc\nseed = 7\nout = cfg.json\n");
    let s = ok(d, &["--config-file", "run.cfg", "fit", "g.csv"]);
    assert!(s.contains("family: gc"), "{s}");
    assert!(d.join("cfg.json").exists());
    let s = ok(d, &["--config-file", "run.cfg", "fit", "g.csv", "--family", "tgmm"]);
    assert!(s.contains("family: tgmm"), "{s}");

    write(d, "bad.cfg", "colour = red\n");
    assert_eq!(code(&run(d, &["--config-file", "bad.cfg", "fit", "g.csv"])), 2);

    write(d, "gen.cfg", "scenario = gmm\nn = 50\nseed = 11\n");
    let a = ok(d, &["--config-file", "gen.cfg", "generate"]);
    let b = ok(d, &["generate", "--scenario", "gmm", "--n", "50", "--seed", "11"]);
    assert_eq!(a, b);
}

fn wine_like(rows: usize) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let t = i as f64;
        let class = 1 + i % 3;
        let c = class as f64;
        let vals: Vec<String> = (0..13)
            .map(|j| {
                let w = ((t + 1.0) * (0.37 + 0.11 * j as f64)).sin();
                format!("{:.3}", 10.0 + c * (1.0 + j as f64 * 0.3) + 1.5 * w)
            })
            .collect();
        s.push_str(&format!("{class},{}\n", vals.join(",")));
    }
    s
}

fn wdbc_like(rows: usize) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let t = i as f64;
        let malignant = i % 3 == 0;
        let shift = if malignant { 5.0 } else { 0.0 };
        let vals: Vec<String> = (0..30)
            .map(|j| format!("{:.4}", 12.0 + shift + 2.0 * ((t + 2.0) * (0.29 + 0.07 * j as f64)).cos()))
            .collect();
        s.push_str(&format!("{},{},{}\n", 842300 + i, if malignant { "M" } else { "B" }, vals.join(",")));
    }
    s
}

#[test]
fn public_dataset_layouts_run_end_to_end() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "wine.data", &wine_like(178));
    write(d, "wdbc.data", &wdbc_like(120));
    for (file, name) in [("wine.data", "wine"), ("wdbc.data", "breast-cancer")] {
        let s = ok(
            d,
            &[
                "score", file, "--dataset", name, "--methods", "gc,gmcm,tgmm,ckde", "--n-samples", "100",
                "--max-test", "5", "--max-iter", "30", "--out", name,
            ],
        );
        assert!(s.lines().any(|l| l.starts_with("gc,es,")), "{s}");
        assert!(s.lines().any(|l| l.starts_with("gc,vs,")), "{s}");
        let json = String::from_utf8(read(d, &format!("{name}.json"))).unwrap();
        assert!(json.contains("\"target_columns\": [\n      0,\n      1,\n      2\n    ]"), "{json}");
        let fit = ok(d, &["fit", file, "--dataset", name, "--family", "gc", "--out", "ds.json"]);
        assert!(fit.contains("rows: "), "{fit}");
        assert!(fit.contains(if name == "wine" { "alcohol" } else { "radius_mean" }));
    }
}
