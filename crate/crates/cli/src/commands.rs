use std::path::{Path, PathBuf};

use mgcp::bench::{run_benchmark, BenchConfig, BenchResult, Case, Method, ScenarioSpec};
use mgcp::{adapt_source, derive_seed, fit, select_gamma, DameConfig, Role, TransferData};

use crate::config::{self, FitConfig, RunManifest, SimConfig};
use crate::data::{joined, num, read_features, read_output, write_csv};
use crate::error::{CliError, CliResult};

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))
}

fn snapshot<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

fn load_fit_config(path: &Path, seed: Option<u64>) -> CliResult<FitConfig> {
    config::load::<FitConfig>(path)?.resolve(&config::base_dir(path), seed)
}

/// Reads every dataset and adapts sources that carry a domain spec.
fn load_data(cfg: &FitConfig) -> CliResult<(TransferData<f64>, Vec<bool>)> {
    let target = read_output(&cfg.target, Role::Target)?;
    let mut sources = Vec::with_capacity(cfg.sources.len());
    let mut adapted = Vec::with_capacity(cfg.sources.len());
    for (i, entry) in cfg.sources.iter().enumerate() {
        let raw = read_output(&entry.path, Role::Source(i))?;
        match &entry.domain {
            Some(spec) => {
                let dame = DameConfig {
                    seed: derive_seed(cfg.seed, &format!("dame/source/{i}")),
                    ..cfg.dame.clone()
                };
                let source = adapt_source(&raw, spec, &dame, &target).map_err(|e| match CliError::from(e) {
                    CliError::Config(m) => CliError::Config(format!("sources[{i}].domain: {m}")),
                    CliError::Data(m) => CliError::Data(format!("{}: {m}", entry.path.display())),
                    other => other,
                })?;
                sources.push(source);
                adapted.push(true);
            }
            None => {
                sources.push(raw);
                adapted.push(false);
            }
        }
    }
    let data = TransferData::new(sources, target).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((data, adapted))
}

pub fn fit_command(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let started = config::unix_now();
    let cfg = load_fit_config(config_path, seed)?;
    let (data, adapted) = load_data(&cfg)?;
    let (query_header, query) = match &cfg.query {
        Some(path) => read_features(path)?,
        None => {
            let x = data.target().inputs().clone();
            ((0..x.cols()).map(|j| format!("x{j}")).collect(), x)
        }
    };
    if query.cols() != data.dim() {
        return Err(CliError::Data(format!(
            "query has {} feature columns, the target has {}",
            query.cols(),
            data.dim()
        )));
    }

    let fitted = fit(&data, &cfg.train)?;
    let pred = fitted.predict(&data, &query, false)?;

    prepare_out(out)?;
    let hyper = serde_json::to_string_pretty(&fitted).map_err(|e| CliError::Output(e.to_string()))?;
    let hyper_path = out.join("hyperparameters.json");
    std::fs::write(&hyper_path, hyper + "\n").map_err(|e| CliError::Output(format!("{}: {e}", hyper_path.display())))?;

    let mut cols = query_header;
    cols.extend(["mean".to_string(), "variance".to_string()]);
    let rows: Vec<Vec<String>> = (0..query.rows())
        .map(|r| {
            let mut row: Vec<String> = query.row(r).iter().map(|v| num(*v)).collect();
            row.push(num(pred.mean[r]));
            row.push(num(pred.variance[r]));
            row
        })
        .collect();
    write_csv(&out.join("predictions.csv"), &cols, &rows)?;

    let alphas = fitted.standardized_transfer_alphas();
    let rows: Vec<Vec<String>> = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                s.path.display().to_string(),
                adapted[i].to_string(),
                num(alphas[i]),
                fitted.selected_sources.contains(&i).to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("selection.csv"),
        &header(&["source", "path", "adapted", "transfer_alpha", "selected"]),
        &rows,
    )?;

    println!(
        "selected sources: [{}] of {}; objective {}",
        joined(&fitted.selected_sources),
        cfg.sources.len(),
        fitted.objective
    );
    RunManifest {
        command: "fit".into(),
        config_path: Some(config_path.to_path_buf()),
        config: snapshot(&cfg),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: config::unix_now(),
        artifacts: vec!["hyperparameters.json".into(), "predictions.csv".into(), "selection.csv".into()],
    }
    .write(out)
}

pub struct SimOverrides {
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub methods: Option<String>,
    pub ne: Option<usize>,
}

fn resolve_sim(case: Case, file: SimConfig, o: &SimOverrides) -> CliResult<(ScenarioSpec, BenchConfig)> {
    let mut scenario = file.scenario.unwrap_or_else(|| ScenarioSpec::new(case, 0));
    if scenario.case != case {
        return Err(CliError::Config(format!(
            "scenario.case is `{}` but the command is `{case}`",
            scenario.case
        )));
    }
    let mut bench = file.bench.unwrap_or_else(|| BenchConfig::for_case(case));
    if let Some(seed) = o.seed {
        scenario.seed = seed;
        bench.seed = seed;
    }
    if let Some(ne) = o.ne {
        scenario.n_e = ne;
    }
    if let Some(r) = o.replications {
        bench.replications = r;
    }
    if let Some(list) = &o.methods {
        bench.methods = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Method>())
            .collect::<mgcp::Result<Vec<_>>>()?;
    }
    if bench.methods.is_empty() {
        bench.methods = Method::defaults_for(case);
    }
    scenario.validate()?;
    Ok((scenario, bench))
}

fn write_bench(out: &Path, result: &BenchResult) -> CliResult<()> {
    let rows: Vec<Vec<String>> = result
        .records
        .iter()
        .map(|r| {
            vec![
                r.replication.to_string(),
                r.method.to_string(),
                r.mae.map(num).unwrap_or_default(),
                joined(&r.selected_sources),
                joined(&r.transfer_alphas.iter().map(|a| num(*a)).collect::<Vec<_>>()),
                r.outputs.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &out.join("replications.csv"),
        &header(&["replication", "method", "mae", "selected_sources", "transfer_alphas", "outputs", "error"]),
        &rows,
    )?;

    let rows: Vec<Vec<String>> = result
        .summary()
        .iter()
        .map(|s| {
            vec![
                s.method.to_string(),
                s.completed.to_string(),
                s.failed.to_string(),
                num(s.median),
                num(s.mean),
                num(s.std),
                s.flagged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("summary.csv"),
        &header(&["method", "completed", "failed", "median_mae", "mean_mae", "std_mae", "flagged"]),
        &rows,
    )?;

    let rows: Vec<Vec<String>> = result
        .records
        .iter()
        .map(|r| {
            vec![
                r.replication.to_string(),
                r.method.to_string(),
                num(r.fit_seconds),
                num(r.predict_seconds),
            ]
        })
        .collect();
    write_csv(
        &out.join("timing.csv"),
        &header(&["replication", "method", "fit_seconds", "predict_seconds"]),
        &rows,
    )
}

pub fn sim_command(case: Case, config_path: Option<&Path>, out: &Path, o: &SimOverrides) -> CliResult<()> {
    let started = config::unix_now();
    let file = match config_path {
        Some(p) => config::load::<SimConfig>(p)?,
        None => SimConfig::default(),
    };
    let (scenario, bench) = resolve_sim(case, file, o)?;
    let result = run_benchmark(&scenario, &bench)?;

    prepare_out(out)?;
    write_bench(out, &result)?;
    for s in result.summary() {
        println!(
            "{:8} median MAE {:.4}  mean {:.4}  ({} ok, {} failed{})",
            s.method.name(),
            s.median,
            s.mean,
            s.completed,
            s.failed,
            if s.flagged { ", flagged" } else { "" }
        );
    }
    RunManifest {
        command: case.name().into(),
        config_path: config_path.map(Path::to_path_buf),
        seed: scenario.seed,
        config: snapshot(&SimConfig {
            scenario: Some(scenario),
            bench: Some(bench),
        }),
        started_unix: started,
        finished_unix: config::unix_now(),
        artifacts: vec!["replications.csv".into(), "summary.csv".into(), "timing.csv".into()],
    }
    .write(out)
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let grid = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|g| *g >= 0.0 && g.is_finite())
                .ok_or_else(|| CliError::Config(format!("--grid: `{s}` is not a non-negative number")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    if grid.is_empty() {
        return Err(CliError::Config("--grid: must list at least one value".into()));
    }
    Ok(grid)
}

pub fn sweep_command(config_path: &Path, out: &Path, seed: Option<u64>, grid: Option<&str>) -> CliResult<()> {
    let started = config::unix_now();
    let mut cfg = load_fit_config(config_path, seed)?;
    if let Some(g) = grid {
        cfg.train.gamma_grid = parse_grid(g)?;
    }
    if cfg.train.gamma_grid.is_empty() {
        return Err(CliError::Config("train.gamma_grid: must not be empty".into()));
    }
    let (data, _) = load_data(&cfg)?;
    let (best, rows) = select_gamma(&data, &cfg.train)?;

    prepare_out(out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.gamma),
                num(r.cv_mae),
                r.selected_count.to_string(),
                joined(&r.transfer_alphas.iter().map(|a| num(a.abs())).collect::<Vec<_>>()),
            ]
        })
        .collect();
    write_csv(
        &out.join("gamma_path.csv"),
        &header(&["gamma", "cv_mae", "selected_count", "alpha_path"]),
        &table,
    )?;
    println!("selected gamma {best}");
    RunManifest {
        command: "sweep-gamma".into(),
        config_path: Some(config_path.to_path_buf()),
        config: snapshot(&cfg),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: config::unix_now(),
        artifacts: vec!["gamma_path.csv".into()],
    }
    .write(out)
}

pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from("mgcp-out").join(command)
}
