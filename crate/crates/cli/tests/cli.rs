use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgcp::bench::{generate_case1, run_benchmark, BenchConfig, Case, Method, ScenarioSpec};
use mgcp::{derive_seed, OutputData};
use tempfile::TempDir;

fn mgcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgcp"))
        .args(args)
        .env_remove("MGCP_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_output(path: &Path, data: &OutputData<f64>) {
    let d = data.dim();
    let mut text: String = (0..d).map(|j| format!("x{j},")).collect::<String>() + "y\n";
    for r in 0..data.len() {
        let row: Vec<String> = data.inputs().row(r).iter().map(|v| v.to_string()).collect();
        text += &format!("{},{}\n", row.join(","), data.responses()[r]);
    }
    fs::write(path, text).unwrap();
}

fn line_data(path: &Path, n: usize, slope: f64) {
    let mut text = String::from("x,y\n");
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64 * 4.0;
        text += &format!("{x},{}\n", slope * x + (3.0 * x).sin());
    }
    fs::write(path, text).unwrap();
}

fn minimal_config(dir: &Path) -> PathBuf {
    line_data(&dir.join("source.csv"), 15, 1.0);
    line_data(&dir.join("target.csv"), 6, 0.8);
    fs::write(dir.join("query.csv"), "x\n0.1\n0.7\n1.3\n2\n2.5\n3.1\n3.9\n").unwrap();
    let cfg = dir.join("fit.json");
    fs::write(
        &cfg,
        r#"{
  "sources": [{"path": "source.csv"}],
  "target": "target.csv",
  "query": "query.csv",
  "seed": 3,
  "train": {"gamma": 1.0, "restarts": 2, "max_iterations": 100}
}"#,
    )
    .unwrap();
    cfg
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn fit_writes_one_prediction_per_query_row() {
    let dir = TempDir::new().unwrap();
    let cfg = minimal_config(dir.path());
    let out = dir.path().join("out");
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("predictions.csv")), 7);
    assert_eq!(data_rows(&out.join("selection.csv")), 1);
    let hyper: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("hyperparameters.json")).unwrap()).unwrap();
    assert!(hyper["theta_hat"]["sources"].as_array().unwrap().len() == 1);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["config"]["train"]["seed"], 3);
}

#[test]
fn fit_adapts_a_source_with_a_domain_spec() {
    let dir = TempDir::new().unwrap();
    line_data(&dir.path().join("source.csv"), 20, 1.0);
    let mut text = String::from("x0,x1,y\n");
    for i in 0..4 {
        for j in 0..3 {
            let (a, b) = (i as f64, j as f64 - 1.0);
            text += &format!("{a},{b},{}\n", a + (3.0 * a).sin() + b * b);
        }
    }
    fs::write(dir.path().join("target.csv"), text).unwrap();
    let cfg = dir.path().join("fit.json");
    fs::write(
        &cfg,
        r#"{
  "sources": [{"path": "source.csv", "domain": {"shared_features": [0], "source_unique": [], "target_unique_count": 1, "target_unique": "from-target"}}],
  "target": "target.csv",
  "train": {"gamma": 1.0, "restarts": 1, "max_iterations": 50},
  "dame": {"n_induced": 4, "n_expand": 3, "bandwidth": {"fixed": 0.5}, "expansion_noise": {"fixed": 0.1}}
}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("predictions.csv")), 12);
    assert!(fs::read_to_string(out.join("selection.csv")).unwrap().contains(",true,"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = minimal_config(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let bad_field = dir.path().join("typo.json");
    fs::write(&bad_field, fs::read_to_string(&cfg).unwrap().replace("\"gamma\"", "\"gama\"")).unwrap();
    let o = mgcp(&["fit", "--config", bad_field.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));

    let no_shared = dir.path().join("dame.json");
    fs::write(
        &no_shared,
        r#"{"sources": [{"path": "source.csv", "domain": {"shared_features": [], "source_unique": [0], "target_unique_count": 1, "target_unique": "from-target"}}], "target": "target.csv"}"#,
    )
    .unwrap();
    let o = mgcp(&["fit", "--config", no_shared.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shared"), "{}", stderr(&o));

    let o = mgcp(&["fit", "--config", dir.path().join("missing.json").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mgcp(&["sim4"]).status.code(), Some(2));
    assert_eq!(mgcp(&["sim1", "--methods", "MGCP-X", "--out", out]).status.code(), Some(2));
    assert_eq!(mgcp(&["sim2", "--methods", "MGCP-T", "--out", out]).status.code(), Some(2));
    assert_eq!(mgcp(&["sweep-gamma", "--config", cfg.to_str().unwrap(), "--grid", "1,-2", "--out", out]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mgcp"))
        .args(["sim1", "--replications", "1", "--out", out])
        .env("MGCP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(out).exists(), "nothing written on config errors");
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = minimal_config(dir.path());
    let out = dir.path().join("out");
    fs::write(dir.path().join("target.csv"), "x,y\n0,1\n1,oops\n").unwrap();
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("oops"), "{}", stderr(&o));

    fs::remove_file(dir.path().join("target.csv")).unwrap();
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    line_data(&dir.path().join("target.csv"), 6, 0.8);
    fs::write(dir.path().join("query.csv"), "a,b\n1,2\n").unwrap();
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulation_outputs_are_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = mgcp(&[
            "sim1",
            "--replications",
            "2",
            "--seed",
            "7",
            "--methods",
            "MGCP-R,GCP",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["replications.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(data_rows(&a.join("replications.csv")), 4);
    assert_eq!(data_rows(&a.join("timing.csv")), 4);

    let c = dir.path().join("c");
    let o = mgcp(&["sim1", "--config", a.join("manifest.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("replications.csv")).unwrap(), fs::read(c.join("replications.csv")).unwrap());
}

#[test]
fn case3_with_ten_per_family_has_41_outputs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = mgcp(&["sim3-s1", "--ne", "10", "--replications", "1", "--methods", "GCP", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("replications.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5], "41");
}

fn export_case1(dir: &Path, sources: &[usize], seed: u64) -> String {
    let scenario = generate_case1(&ScenarioSpec::new(Case::Sim1, seed)).unwrap();
    let mut entries = Vec::new();
    for &i in sources {
        let name = format!("source{i}.csv");
        write_output(&dir.join(&name), &scenario.sources[i]);
        entries.push(format!(r#"{{"path": "{name}"}}"#));
    }
    write_output(&dir.join("target.csv"), &scenario.target);
    entries.join(",")
}

#[test]
fn cli_fit_matches_benchmark_selection() {
    let dir = TempDir::new().unwrap();
    let (data_seed, bench_seed) = (31, 5);
    let entries = export_case1(dir.path(), &[0, 1, 2, 3], data_seed);
    let root = derive_seed(derive_seed(bench_seed, "bench"), "MGCP-R");
    let config = BenchConfig {
        seed: bench_seed,
        replications: 1,
        methods: vec![Method::MgcpR],
        ..BenchConfig::default()
    };
    let cfg = dir.path().join("fit.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"sources": [{}], "target": "target.csv", "seed": {root},
  "train": {{"gamma": {}, "restarts": {}, "max_iterations": {}, "standardize": false}}}}"#,
            entries,
            config.gamma,
            config.restarts,
            config.max_iterations
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mgcp(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bench = run_benchmark(&ScenarioSpec::new(Case::Sim1, data_seed), &config).unwrap();
    assert_eq!(bench.records[0].error, None);
    let expected = &bench.records[0].selected_sources;
    assert!(!expected.is_empty() && expected.len() < 4, "{expected:?}");
    let selection = fs::read_to_string(out.join("selection.csv")).unwrap();
    let selected: Vec<usize> = selection
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",true"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(&selected, expected);
}

#[test]
fn sweep_gamma_rows_are_sorted_and_extremes_behave() {
    let dir = TempDir::new().unwrap();
    let entries = export_case1(dir.path(), &[0, 1], 11);
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"sources": [{}], "target": "target.csv", "seed": 4,
  "train": {{"restarts": 2, "max_iterations": 300, "cv_folds": 2}}}}"#,
            entries
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mgcp(&["sweep-gamma", "--config", cfg.to_str().unwrap(), "--grid", "1000000,0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("gamma_path.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["gamma", "cv_mae", "selected_count", "alpha_path"]);
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[1][0], rows[1][2]), ("0", "2"));
    assert_eq!((rows[2][0], rows[2][2]), ("1000000", "0"));
    assert_eq!(rows[1][3].split(';').count(), 2);
}
