//! Simulation scenarios, reference methods and the replication harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covblock::{OutputData, PredictiveDistribution, Role, TransferData};
use crate::dame::{expand, BandwidthChoice, DameConfig, DomainSpec, ExpansionNoise, InducedSet, UniqueValues};
use crate::error::{MgcpError, Result};
use crate::linalg::Matrix;
use crate::seed::derive_seed;
use crate::train::{fit, PenaltyMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    #[serde(rename = "sim1")]
    Sim1,
    #[serde(rename = "sim2")]
    Sim2,
    #[serde(rename = "sim3-s1")]
    Sim3Setting1,
    #[serde(rename = "sim3-s2")]
    Sim3Setting2,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::Sim1 => "sim1",
            Case::Sim2 => "sim2",
            Case::Sim3Setting1 => "sim3-s1",
            Case::Sim3Setting2 => "sim3-s2",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Case {
    type Err = MgcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim1" => Ok(Case::Sim1),
            "sim2" => Ok(Case::Sim2),
            "sim3-s1" => Ok(Case::Sim3Setting1),
            "sim3-s2" => Ok(Case::Sim3Setting2),
            other => Err(MgcpError::config("case", format!("unknown case `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MGCP-R")]
    MgcpR,
    #[serde(rename = "MGCP")]
    Mgcp,
    #[serde(rename = "MGCP-T")]
    MgcpT,
    #[serde(rename = "MGCP-RF")]
    MgcpRf,
    #[serde(rename = "BGCP-R")]
    BgcpR,
    #[serde(rename = "GCP")]
    Gcp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MgcpR,
        Method::Mgcp,
        Method::MgcpT,
        Method::MgcpRf,
        Method::BgcpR,
        Method::Gcp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MgcpR => "MGCP-R",
            Method::Mgcp => "MGCP",
            Method::MgcpT => "MGCP-T",
            Method::MgcpRf => "MGCP-RF",
            Method::BgcpR => "BGCP-R",
            Method::Gcp => "GCP",
        }
    }

    /// Methods run by default for a case.
    pub fn defaults_for(case: Case) -> Vec<Method> {
        match case {
            Case::Sim1 => vec![Method::MgcpR, Method::Mgcp, Method::MgcpT, Method::BgcpR, Method::Gcp],
            Case::Sim2 => vec![Method::MgcpR, Method::Mgcp, Method::BgcpR, Method::Gcp],
            Case::Sim3Setting1 | Case::Sim3Setting2 => {
                vec![Method::MgcpR, Method::Mgcp, Method::MgcpRf, Method::BgcpR, Method::Gcp]
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MgcpError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MgcpError::config("methods", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub case: Case,
    /// Sources per function family (Case III only).
    pub n_e: usize,
    /// Observations per source.
    pub n: usize,
    pub n_t: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(case: Case, seed: u64) -> Self {
        let (n_e, n, n_t, n_test) = match case {
            Case::Sim1 => (1, 30, 10, 60),
            Case::Sim2 => (1, 64, 24, 100),
            Case::Sim3Setting1 => (2, 30, 10, 60),
            Case::Sim3Setting2 => (2, 100, 50, 150),
        };
        Self {
            case,
            n_e,
            n,
            n_t,
            n_test,
            noise_std: 0.2,
            seed,
        }
    }

    pub fn with_ne(mut self, n_e: usize) -> Self {
        self.n_e = n_e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_t == 0 || self.n_test == 0 {
            return Err(MgcpError::config("scenario", "counts must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(MgcpError::config("noise_std", "must be finite and non-negative"));
        }
        if matches!(self.case, Case::Sim3Setting1 | Case::Sim3Setting2) && self.n_e == 0 {
            return Err(MgcpError::config("n_e", "must be at least 1"));
        }
        Ok(())
    }
}

/// One generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sources: Vec<OutputData<f64>>,
    pub target: OutputData<f64>,
    pub test_inputs: Matrix<f64>,
    /// Noise-free target values at `test_inputs`.
    pub test_truth: Vec<f64>,
    /// Sources built by expansion from a marginal mean.
    pub pseudo_sources: Vec<usize>,
    /// Sources the target is built from (used by MGCP-T).
    pub informative_sources: Vec<usize>,
}

impl Scenario {
    pub fn data(&self, sources: &[usize]) -> Result<TransferData<f64>> {
        TransferData::new(sources.iter().map(|&i| self.sources[i].clone()).collect(), self.target.clone())
    }

    pub fn num_outputs(&self) -> usize {
        self.sources.len() + 1
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn noisy(rng: &mut ChaCha8Rng, values: impl Iterator<Item = f64>, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    values.map(|v| v + normal.sample(rng)).collect()
}

fn output_1d(rng: &mut ChaCha8Rng, xs: &[f64], f: impl Fn(f64) -> f64, std: f64, role: Role) -> Result<OutputData<f64>> {
    let ys = noisy(rng, xs.iter().map(|&x| f(x)), std);
    OutputData::from_points(xs, ys, role)
}

fn output_nd(rng: &mut ChaCha8Rng, x: &Matrix<f64>, f: impl Fn(&[f64]) -> f64, std: f64, role: Role) -> Result<OutputData<f64>> {
    let ys = noisy(rng, (0..x.rows()).map(|r| f(x.row(r))), std);
    OutputData::new(x.clone(), ys, role)
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn grid_2d(xs: &[f64], ys: &[f64]) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = xs.iter().flat_map(|&a| ys.iter().map(move |&b| vec![a, b])).collect();
    Matrix::from_rows(&rows)
}

pub mod functions {
    //! Closed-form responses of the simulation cases.

    pub fn case1_sources(x: f64) -> [f64; 4] {
        [
            0.3 * (x - 3.0).powi(3),
            0.3 * x * x + 2.0 * (2.0 * x).sin(),
            (x - 2.0).powi(2),
            (x - 1.0) * (x - 2.0) * (x - 4.0),
        ]
    }

    pub fn case1_target(x: f64) -> f64 {
        0.2 * (x - 3.0).powi(3) + 0.15 * x * x + (2.0 * x).sin()
    }

    pub fn case2_marginal_source(x1: f64) -> f64 {
        3.0 * x1.sin()
    }

    pub fn case2_source2(x: &[f64]) -> f64 {
        4.0 * (2.0 * x[0]).cos() + x[1] * x[1] + x[1]
    }

    pub fn case2_source3(x: &[f64]) -> f64 {
        2.0 * (2.0 * x[0]).sin() + x[1] * x[1]
    }

    pub fn case2_target(x: &[f64]) -> f64 {
        2.0 * x[0].sin() + x[1] * x[1] + x[1]
    }

    /// Setting-1 family `family` (0..4) with perturbation `e`.
    pub fn case3_family(family: usize, x: f64, e: f64) -> f64 {
        match family {
            0 => 0.3 * (x - 2.5 - e).powi(3),
            1 => 0.3 * x * x + 2.0 * (2.0 * x + e).sin(),
            2 => (x - 1.5 - e).powi(2),
            3 => (x - 1.0) * (x - 2.0) * (x - 3.5 - e),
            _ => panic!("setting 1 has four families"),
        }
    }

    pub fn case3_target(x: f64, e1: f64, e2: f64) -> f64 {
        0.2 * (x - 2.5 - e1).powi(3) + 0.15 * x * x + (2.0 * x + e2).sin()
    }

    /// Setting-2 family `family` (0..3) with perturbations `e = [e_1, e_2]`.
    /// Family 0 depends on `x_1, x_2` only.
    pub fn case3_s2_family(family: usize, x: &[f64], e: [f64; 2]) -> f64 {
        match family {
            0 => 3.0 * ((x[0] + e[0]).sin() + (x[1] + e[1]).sin()),
            1 => {
                4.0 * ((2.0 * x[0] + e[0]).cos() + (2.0 * x[1] + e[1]).cos()) + x[2] * x[2] + x[2] + 2.0 * x[3]
                    - x[4]
            }
            2 => {
                2.0 * ((2.0 * (x[0] + e[0])).sin() + (2.0 * (x[0] + e[1])).sin()) + x[2] * x[2] - x[3] + 2.0 * x[4]
            }
            _ => panic!("setting 2 has three families"),
        }
    }

    pub fn case3_s2_target(x: &[f64], e: [f64; 2]) -> f64 {
        2.0 * ((x[0] + e[0]).sin() + (x[1] + e[1]).sin()) + x[2] * x[2] + x[2] + 2.0 * x[3] - x[4]
    }
}

use functions as fx;

/// Case I: four 1-D sources on `[0, 5]`, target observed on `[0, 3]` only.
pub fn generate_case1(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "case1"));
    let xs = linspace(0.0, 5.0, spec.n);
    let sources = (0..4)
        .map(|k| output_1d(&mut rng, &xs, |x| fx::case1_sources(x)[k], spec.noise_std, Role::Source(k)))
        .collect::<Result<Vec<_>>>()?;
    let xt = linspace(0.0, 3.0, spec.n_t);
    let target = output_1d(&mut rng, &xt, fx::case1_target, spec.noise_std, Role::Target)?;
    let test = uniform_points(&mut rng, spec.n_test, 0.0, 5.0);
    Ok(Scenario {
        sources,
        target,
        test_truth: test.iter().map(|&x| fx::case1_target(x)).collect(),
        test_inputs: Matrix::column(&test),
        pseudo_sources: vec![],
        informative_sources: vec![0, 1],
    })
}

fn expansion_config(n_induced: usize, n_expand: usize, std: f64, seed: u64) -> DameConfig {
    DameConfig {
        n_induced,
        n_expand,
        bandwidth: BandwidthChoice::Fixed(1.0),
        expansion_noise: ExpansionNoise::Fixed(std),
        seed,
    }
}

/// Case II: a 1-D marginal-mean source expanded onto `[−2, 2]²`, two 2-D
/// sources on an 8×8 grid, target on a 3×8 grid over `[0, 2] × [−2, 2]`.
pub fn generate_case2(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "case2"));
    let side = (spec.n as f64).sqrt().round() as usize;
    if side * side != spec.n {
        return Err(MgcpError::config("n", "Case II sources lie on a square grid; n must be a perfect square"));
    }
    let axis = linspace(-2.0, 2.0, side);
    let grid = grid_2d(&axis, &axis);

    let target_cols = spec.n_t / 3;
    if target_cols * 3 != spec.n_t {
        return Err(MgcpError::config("n_t", "Case II target lies on a 3-column grid; n_t must be divisible by 3"));
    }
    let target_x = grid_2d(&linspace(0.0, 2.0, 3), &linspace(-2.0, 2.0, target_cols));
    let target = output_nd(&mut rng, &target_x, fx::case2_target, spec.noise_std, Role::Target)?;

    let induced_x = linspace(-2.0, 2.0, side);
    let induced = InducedSet::new(
        Matrix::column(&induced_x),
        induced_x.iter().map(|&x| fx::case2_marginal_source(x)).collect(),
    )?;
    let dspec = DomainSpec::new(vec![0], vec![], 1, UniqueValues::FromTarget)?;
    let dcfg = expansion_config(side, side, spec.noise_std, derive_seed(spec.seed, "case2/expansion"));
    let pseudo = expand(&induced, &dspec, &dcfg, Some(&target))?;

    let s2 = output_nd(&mut rng, &grid, fx::case2_source2, spec.noise_std, Role::Source(1))?;
    let s3 = output_nd(&mut rng, &grid, fx::case2_source3, spec.noise_std, Role::Source(2))?;

    let side_test = (spec.n_test as f64).sqrt().round() as usize;
    let test_inputs = if side_test * side_test == spec.n_test {
        let a = linspace(-2.0, 2.0, side_test);
        grid_2d(&a, &a)
    } else {
        Matrix::from_fn(spec.n_test, 2, |_, _| rng.gen_range(-2.0..2.0))
    };
    let test_truth = (0..test_inputs.rows()).map(|r| fx::case2_target(test_inputs.row(r))).collect();
    Ok(Scenario {
        sources: vec![pseudo, s2, s3],
        target,
        test_inputs,
        test_truth,
        pseudo_sources: vec![0],
        informative_sources: vec![0, 1],
    })
}

/// Case III. Setting 1: four perturbed 1-D families of `n_e` sources each.
/// Setting 2: three 5-D families; the first is a 2-D marginal mean expanded
/// over ten random target-only points.
pub fn generate_case3(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    match spec.case {
        Case::Sim3Setting1 => generate_case3_setting1(spec),
        Case::Sim3Setting2 => generate_case3_setting2(spec),
        _ => Err(MgcpError::config("case", "generate_case3 needs sim3-s1 or sim3-s2")),
    }
}

fn generate_case3_setting1(spec: &ScenarioSpec) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "case3-s1"));
    let ne = spec.n_e;
    let e: Vec<Vec<f64>> = (0..4).map(|_| uniform_points(&mut rng, ne, 0.0, 1.0)).collect();
    let xs = linspace(0.0, 5.0, spec.n);
    let mut sources = Vec::with_capacity(4 * ne);
    for (family, ef) in e.iter().enumerate() {
        for &ek in ef {
            let role = Role::Source(sources.len());
            sources.push(output_1d(&mut rng, &xs, |x| fx::case3_family(family, x, ek), spec.noise_std, role)?);
        }
    }
    let (e1, e2) = (e[0][0], e[1][0]);
    let xt = linspace(0.0, 3.0, spec.n_t);
    let target = output_1d(&mut rng, &xt, |x| fx::case3_target(x, e1, e2), spec.noise_std, Role::Target)?;
    let test = uniform_points(&mut rng, spec.n_test, 0.0, 5.0);
    Ok(Scenario {
        sources,
        target,
        test_truth: test.iter().map(|&x| fx::case3_target(x, e1, e2)).collect(),
        test_inputs: Matrix::column(&test),
        pseudo_sources: vec![],
        informative_sources: vec![0, ne],
    })
}

fn generate_case3_setting2(spec: &ScenarioSpec) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "case3-s2"));
    let ne = spec.n_e;
    let e: Vec<Vec<[f64; 2]>> = (0..3)
        .map(|_| (0..ne).map(|_| [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)]).collect())
        .collect();
    let n_side = (spec.n as f64).sqrt().round() as usize;
    if n_side * n_side != spec.n {
        return Err(MgcpError::config("n", "setting 2 pseudo sources need n to be a perfect square"));
    }

    // Target first so its noise draws do not depend on n_e.
    let e_target = e[0][0];
    let mut train_rows = Vec::with_capacity(spec.n_t);
    let mut drawn = 0;
    while train_rows.len() < spec.n_t {
        let row: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        drawn += 1;
        if row[0] > 0.0 {
            train_rows.push(row);
        }
        if drawn > 1000 * spec.n_t {
            return Err(MgcpError::InvalidData("could not draw enough target points with x1 > 0".into()));
        }
    }
    let target_x = Matrix::from_rows(&train_rows);
    let target = output_nd(&mut rng, &target_x, |x| fx::case3_s2_target(x, e_target), spec.noise_std, Role::Target)?;
    let test_inputs = normal_matrix(&mut rng, spec.n_test, 5);
    let test_truth = (0..spec.n_test).map(|r| fx::case3_s2_target(test_inputs.row(r), e_target)).collect();

    let mut sources = Vec::with_capacity(3 * ne);
    for (k, ek) in e[0].iter().enumerate() {
        let induced_x = normal_matrix(&mut rng, n_side, 2);
        let induced_y = (0..n_side).map(|r| fx::case3_s2_family(0, induced_x.row(r), *ek)).collect();
        let unique = normal_matrix(&mut rng, n_side, 3);
        let points = (0..n_side).map(|r| unique.row(r).to_vec()).collect();
        let dspec = DomainSpec::new(vec![0, 1], vec![], 3, UniqueValues::Points(points))?;
        let dcfg = expansion_config(n_side, n_side, spec.noise_std, derive_seed(spec.seed, &format!("case3-s2/expansion/{k}")));
        let induced = InducedSet::new(induced_x, induced_y)?;
        sources.push(expand(&induced, &dspec, &dcfg, None)?.with_role(Role::Source(sources.len())));
    }
    for family in 1..3 {
        for ek in &e[family] {
            let x = normal_matrix(&mut rng, spec.n, 5);
            let role = Role::Source(sources.len());
            sources.push(output_nd(&mut rng, &x, |v| fx::case3_s2_family(family, v, *ek), spec.noise_std, role)?);
        }
    }
    Ok(Scenario {
        sources,
        target,
        test_inputs,
        test_truth,
        pseudo_sources: (0..ne).collect(),
        informative_sources: vec![0, ne],
    })
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    match spec.case {
        Case::Sim1 => generate_case1(spec),
        Case::Sim2 => generate_case2(spec),
        Case::Sim3Setting1 | Case::Sim3Setting2 => generate_case3(spec),
    }
}

/// Precision-weighted combination of single-source predictions:
/// `μ = Σ μ_i/V_i / Σ 1/V_i`, `V = q / Σ 1/V_i`.
pub fn bgcp_combine(submodels: &[PredictiveDistribution<f64>]) -> Result<PredictiveDistribution<f64>> {
    let first = submodels
        .first()
        .ok_or_else(|| MgcpError::Combination("no sub-models to combine".into()))?;
    let m = first.mean.len();
    if submodels.iter().any(|s| s.mean.len() != m || s.variance.len() != m) {
        return Err(MgcpError::Combination("sub-model predictions differ in length".into()));
    }
    if submodels.iter().flat_map(|s| &s.variance).any(|v| !(*v > 0.0)) {
        return Err(MgcpError::Combination("a sub-model variance is zero or negative".into()));
    }
    if submodels.len() == 1 {
        return Ok(first.clone());
    }
    let q = submodels.len() as f64;
    let mut mean = Vec::with_capacity(m);
    let mut variance = Vec::with_capacity(m);
    for j in 0..m {
        let precision: f64 = submodels.iter().map(|s| 1.0 / s.variance[j]).sum();
        let weighted: f64 = submodels.iter().map(|s| s.mean[j] / s.variance[j]).sum();
        mean.push(weighted / precision);
        variance.push(q / precision);
    }
    Ok(PredictiveDistribution {
        mean,
        variance,
        includes_noise: submodels.iter().all(|s| s.includes_noise),
    })
}

pub fn mean_absolute_error(prediction: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(prediction.len(), truth.len(), "prediction and truth lengths differ");
    prediction.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64
}

/// Training settings shared by the benchmark methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Penalty weight of MGCP-R, MGCP-RF and the BGCP-R sub-models.
    pub gamma: f64,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub replications: usize,
    pub methods: Vec<Method>,
    /// Standardize responses before fitting. The simulations fit raw
    /// responses; reported alphas are on the standardized scale either way.
    pub standardize: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            restarts: 5,
            max_iterations: 1000,
            seed: 0,
            replications: 100,
            methods: Vec::new(),
            standardize: false,
        }
    }
}

impl BenchConfig {
    /// Default methods and replication count for a case.
    pub fn for_case(case: Case) -> Self {
        Self {
            replications: default_replications(case),
            methods: Method::defaults_for(case),
            ..Self::default()
        }
    }
}

/// 100 replications for Cases I and II, 50 for Case III.
pub fn default_replications(case: Case) -> usize {
    match case {
        Case::Sim1 | Case::Sim2 => 100,
        Case::Sim3Setting1 | Case::Sim3Setting2 => 50,
    }
}

/// Penalty weight used by the benchmark for the regularized methods.
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    /// `None` when the fit failed.
    pub mae: Option<f64>,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
    /// Indices into the scenario's source list.
    pub selected_sources: Vec<usize>,
    /// Fitted `α_it`, expressed on the standardized response scale.
    pub transfer_alphas: Vec<f64>,
    pub outputs: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub completed: usize,
    pub failed: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// More than 10% of replications failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: ScenarioSpec,
    pub config: BenchConfig,
    /// Ordered by replication, then method in request order.
    pub records: Vec<ReplicationRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl BenchResult {
    pub fn maes(&self, method: Method) -> Vec<f64> {
        self.records.iter().filter(|r| r.method == method).filter_map(|r| r.mae).collect()
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &ReplicationRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn summary(&self) -> Vec<MethodSummary> {
        self.config
            .methods
            .iter()
            .map(|&method| {
                let maes = self.maes(method);
                let total = self.records_for(method).count();
                let failed = total - maes.len();
                let n = maes.len() as f64;
                let mean = maes.iter().sum::<f64>() / n;
                let std = if maes.len() > 1 {
                    (maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                MethodSummary {
                    method,
                    completed: maes.len(),
                    failed,
                    median: median(&maes),
                    mean,
                    std,
                    flagged: failed * 10 > total,
                }
            })
            .collect()
    }

    pub fn summary_for(&self, method: Method) -> Option<MethodSummary> {
        self.summary().into_iter().find(|s| s.method == method)
    }
}

fn train_config(config: &BenchConfig, gamma: f64, mode: PenaltyMode, seed: u64) -> TrainConfig {
    TrainConfig {
        gamma,
        penalty_mode: mode,
        restarts: config.restarts,
        max_iterations: config.max_iterations,
        seed,
        standardize: config.standardize,
        ..TrainConfig::default()
    }
}

struct MethodOutcome {
    prediction: PredictiveDistribution<f64>,
    selected: Vec<usize>,
    alphas: Vec<f64>,
    fit_seconds: f64,
    predict_seconds: f64,
}

fn fit_and_predict(
    scenario: &Scenario,
    sources: &[usize],
    cfg: &TrainConfig,
    include_noise: bool,
) -> Result<MethodOutcome> {
    let data = scenario.data(sources)?;
    let t0 = Instant::now();
    let fitted = fit(&data, cfg)?;
    let fit_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let prediction = fitted.predict(&data, &scenario.test_inputs, include_noise)?;
    let predict_seconds = t1.elapsed().as_secs_f64();
    Ok(MethodOutcome {
        prediction,
        selected: fitted.selected_sources.iter().map(|&i| sources[i]).collect(),
        alphas: fitted.standardized_transfer_alphas(),
        fit_seconds,
        predict_seconds,
    })
}

/// Fits one method on one scenario and predicts the test inputs.
fn run_method(scenario: &Scenario, case: Case, method: Method, config: &BenchConfig, seed: u64) -> Result<MethodOutcome> {
    let all: Vec<usize> = (0..scenario.sources.len()).collect();
    let without_pseudo: Vec<usize> = if case == Case::Sim2 {
        all.iter().copied().filter(|i| !scenario.pseudo_sources.contains(i)).collect()
    } else {
        all.clone()
    };
    let seed = derive_seed(seed, method.name());
    match method {
        Method::MgcpR => fit_and_predict(scenario, &all, &train_config(config, config.gamma, PenaltyMode::L1Transfer, seed), false),
        Method::Mgcp => fit_and_predict(scenario, &without_pseudo, &train_config(config, 0.0, PenaltyMode::L1Transfer, seed), false),
        Method::MgcpT => {
            if case != Case::Sim1 {
                return Err(MgcpError::config("methods", "MGCP-T is only defined for sim1"));
            }
            fit_and_predict(
                scenario,
                &scenario.informative_sources,
                &train_config(config, 0.0, PenaltyMode::L1Transfer, seed),
                false,
            )
        }
        Method::MgcpRf => fit_and_predict(scenario, &all, &train_config(config, config.gamma, PenaltyMode::GroupL1Rf, seed), false),
        Method::Gcp => fit_and_predict(scenario, &[], &train_config(config, 0.0, PenaltyMode::None, seed), false),
        Method::BgcpR => {
            let mut subs = Vec::with_capacity(without_pseudo.len());
            let (mut fit_seconds, mut predict_seconds) = (0.0, 0.0);
            let mut selected = Vec::new();
            let mut alphas = Vec::new();
            for &i in &without_pseudo {
                let cfg = train_config(config, config.gamma, PenaltyMode::L1Transfer, derive_seed(seed, &format!("source/{i}")));
                // Predictive variances include noise so every weight is finite.
                let out = fit_and_predict(scenario, &[i], &cfg, true)?;
                fit_seconds += out.fit_seconds;
                predict_seconds += out.predict_seconds;
                selected.extend(out.selected);
                alphas.extend(out.alphas);
                subs.push(out.prediction);
            }
            let prediction = if subs.is_empty() {
                fit_and_predict(scenario, &[], &train_config(config, 0.0, PenaltyMode::None, seed), true)?.prediction
            } else {
                bgcp_combine(&subs)?
            };
            Ok(MethodOutcome {
                prediction,
                selected,
                alphas,
                fit_seconds,
                predict_seconds,
            })
        }
    }
}

/// Runs every requested method on `config.replications` regenerated
/// datasets. Replication `r` uses data seed `scenario.seed + r`.
pub fn run_benchmark(scenario: &ScenarioSpec, config: &BenchConfig) -> Result<BenchResult> {
    scenario.validate()?;
    if config.methods.is_empty() {
        return Err(MgcpError::config("methods", "must not be empty"));
    }
    if config.replications == 0 {
        return Err(MgcpError::config("replications", "must be at least 1"));
    }
    if config.methods.contains(&Method::MgcpT) && scenario.case != Case::Sim1 {
        return Err(MgcpError::config("methods", "MGCP-T is only defined for sim1"));
    }
    let datasets: Vec<Scenario> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            generate(&ScenarioSpec {
                seed: scenario.seed.wrapping_add(r as u64),
                ..scenario.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, Method)> = (0..config.replications)
        .flat_map(|r| config.methods.iter().map(move |&m| (r, m)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(r, method)| {
            let data = &datasets[r];
            let seed = derive_seed(config.seed.wrapping_add(r as u64), "bench");
            match run_method(data, scenario.case, method, config, seed) {
                Ok(out) => ReplicationRecord {
                    replication: r,
                    method,
                    mae: Some(mean_absolute_error(&out.prediction.mean, &data.test_truth)),
                    fit_seconds: out.fit_seconds,
                    predict_seconds: out.predict_seconds,
                    selected_sources: out.selected,
                    transfer_alphas: out.alphas,
                    outputs: data.num_outputs(),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    replication: r,
                    method,
                    mae: None,
                    fit_seconds: 0.0,
                    predict_seconds: 0.0,
                    selected_sources: vec![],
                    transfer_alphas: vec![],
                    outputs: data.num_outputs(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(BenchResult {
        scenario: scenario.clone(),
        config: config.clone(),
        records,
    })
}
