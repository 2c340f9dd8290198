//! Penalized maximum-likelihood fitting and penalty-weight selection.
//!
//! The objective is `L(θ|y) − P(θ)` where `P` is a Huber-smoothed L1 norm of
//! the transfer scales `α_it` (a smoothed group norm over `(α_0i, α_it)` for
//! the shared-latent model). Sources whose `α_it` is driven to zero drop out
//! of the target prediction.

use num_traits::{Num, Signed};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covblock::{
    assemble_covariance, log_likelihood_schur, log_likelihood_with_gradient, predict, Jitter,
    PredictiveDistribution, TransferData,
};
use crate::error::{MgcpError, Result};
use crate::linalg::Matrix;
use crate::optim::{minimize, LbfgsOptions, StopReason};
use crate::params::{Hyperparameters, ParamLayout};
use crate::scalar::Real;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// Independent latent processes; L1 on every `α_it`.
    L1Transfer,
    /// Adds the shared latent process; group norm over `(α_0i, α_it)`.
    GroupL1Rf,
    /// Independent latent processes, no penalty.
    None,
}

impl PenaltyMode {
    pub fn shared_latent(self) -> bool {
        self == PenaltyMode::GroupL1Rf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eta: f64,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Infinity norm of the gradient at which a restart stops.
    pub convergence_tol: f64,
    /// Relative objective change at which a restart stops.
    pub ftol: f64,
    pub seed: u64,
    pub penalty_mode: PenaltyMode,
    pub cv_folds: usize,
    pub gamma_grid: Vec<f64>,
    pub selection_threshold: f64,
    /// Standardize every output's responses before fitting.
    pub standardize: bool,
    pub jitter: Jitter<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            eta: 1e-5,
            restarts: 5,
            max_iterations: 1000,
            convergence_tol: 1e-5,
            ftol: 1e-7,
            seed: 0,
            penalty_mode: PenaltyMode::L1Transfer,
            cv_folds: 5,
            gamma_grid: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
            selection_threshold: 1e-2,
            standardize: true,
            jitter: Jitter::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1e-2) {
            return Err(MgcpError::config("eta", "must lie in (0, 1e-2]"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(MgcpError::config("gamma", "must be finite and non-negative"));
        }
        if self.restarts == 0 {
            return Err(MgcpError::config("restarts", "must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(MgcpError::config("max_iterations", "must be at least 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(MgcpError::config("convergence_tol", "must be positive"));
        }
        if !(self.ftol >= 0.0) {
            return Err(MgcpError::config("ftol", "must be non-negative"));
        }
        if !(self.selection_threshold >= 0.0) {
            return Err(MgcpError::config("selection_threshold", "must be non-negative"));
        }
        if self.gamma_grid.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(MgcpError::config("gamma_grid", "entries must be finite and non-negative"));
        }
        match self.jitter {
            Jitter::Absolute(j) | Jitter::RelativeToMeanDiagonal(j) if !(j >= 0.0 && j.is_finite()) => {
                Err(MgcpError::config("jitter", "must be finite and non-negative"))
            }
            _ => Ok(()),
        }
    }

    fn jitter_as<T: Real>(&self) -> Jitter<T> {
        match self.jitter {
            Jitter::Absolute(j) => Jitter::Absolute(T::lit(j)),
            Jitter::RelativeToMeanDiagonal(j) => Jitter::RelativeToMeanDiagonal(T::lit(j)),
        }
    }

    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tol: self.convergence_tol,
            ftol: self.ftol,
            ..LbfgsOptions::default()
        }
    }
}

// --- penalties ------------------------------------------------------------

/// `γ Σ h(α)` with `h(α) = α²/(2η)` for `|α| ≤ η` and `|α| − η/2` otherwise.
///
/// Only needs field operations and comparisons, so it also runs on exact
/// rationals.
pub fn huber_l1<T>(alphas: &[T], gamma: T, eta: T) -> T
where
    T: Clone + Num + Signed + PartialOrd,
{
    let two = T::one() + T::one();
    let mut sum = T::zero();
    for a in alphas {
        let abs = a.abs();
        sum = sum
            + if abs <= eta {
                a.clone() * a.clone() / (two.clone() * eta.clone())
            } else {
                abs - eta.clone() / two.clone()
            };
    }
    gamma * sum
}

fn huber_derivative<T: Real>(alpha: T, gamma: T, eta: T) -> T {
    if alpha.abs() <= eta {
        gamma * alpha / eta
    } else {
        gamma * alpha.signum()
    }
}

/// `γ Σ (√(a_i² + b_i² + ε²) − ε)`, a smoothed group norm.
pub fn group_l1_smoothed<T: Real>(pairs: &[(T, T)], gamma: T, eps: T) -> T {
    let e2 = eps * eps;
    gamma * pairs.iter().map(|(a, b)| (*a * *a + *b * *b + e2).sqrt() - eps).sum::<T>()
}

fn group_pairs<T: Real>(theta: &Hyperparameters<T>) -> Vec<(T, T)> {
    let shared = theta.shared.as_ref().expect("shared kernels");
    shared
        .sources
        .iter()
        .zip(&theta.sources)
        .map(|(k0, s)| (k0.alpha, s.transfer_kernel.alpha))
        .collect()
}

fn check_mode<T: Real>(theta: &Hyperparameters<T>, config: &TrainConfig) -> Result<()> {
    if theta.is_shared() != config.penalty_mode.shared_latent() {
        return Err(MgcpError::config(
            "penalty_mode",
            "group-l1-rf requires shared-latent hyperparameters and vice versa",
        ));
    }
    Ok(())
}

/// The penalty subtracted from the log-likelihood.
pub fn penalty<T: Real>(theta: &Hyperparameters<T>, config: &TrainConfig) -> T {
    let (gamma, eta) = (T::lit(config.gamma), T::lit(config.eta));
    match config.penalty_mode {
        PenaltyMode::None => T::zero(),
        PenaltyMode::L1Transfer => huber_l1(&theta.transfer_alphas(), gamma, eta),
        PenaltyMode::GroupL1Rf => group_l1_smoothed(&group_pairs(theta), gamma, eta),
    }
}

fn penalty_gradient<T: Real>(theta: &Hyperparameters<T>, config: &TrainConfig) -> Vec<T> {
    let layout = theta.layout();
    let mut g = vec![T::zero(); layout.len()];
    let (gamma, eta) = (T::lit(config.gamma), T::lit(config.eta));
    match config.penalty_mode {
        PenaltyMode::None => {}
        PenaltyMode::L1Transfer => {
            for (i, s) in theta.sources.iter().enumerate() {
                g[layout.transfer_kernel(i)] = huber_derivative(s.transfer_kernel.alpha, gamma, eta);
            }
        }
        PenaltyMode::GroupL1Rf => {
            for (i, (a0, at)) in group_pairs(theta).into_iter().enumerate() {
                let r = (a0 * a0 + at * at + eta * eta).sqrt();
                g[layout.shared_source_kernel(i)] = gamma * a0 / r;
                g[layout.transfer_kernel(i)] = gamma * at / r;
            }
        }
    }
    g
}

/// `L(θ|y) − P(θ)`.
pub fn penalized_objective<T: Real>(data: &TransferData<T>, theta: &Hyperparameters<T>, config: &TrainConfig) -> Result<T> {
    check_mode(theta, config)?;
    let bundle = assemble_covariance(data, theta, config.jitter_as())?;
    Ok(log_likelihood_schur(&bundle, &data.stacked_responses())? - penalty(theta, config))
}

fn objective_and_gradient<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    config: &TrainConfig,
) -> Result<(T, Vec<T>)> {
    check_mode(theta, config)?;
    let bundle = assemble_covariance(data, theta, config.jitter_as())?;
    let (l, mut g) = log_likelihood_with_gradient(&bundle, data)?;
    for (gi, pi) in g.iter_mut().zip(penalty_gradient(theta, config)) {
        *gi -= pi;
    }
    Ok((l - penalty(theta, config), g))
}

/// Gradient of [`penalized_objective`] with respect to the flat parameter
/// vector (scales raw, length-scales and noise deviations in logs).
pub fn objective_gradient<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    config: &TrainConfig,
) -> Result<Vec<T>> {
    objective_and_gradient(data, theta, config).map(|(_, g)| g)
}

// --- standardization ------------------------------------------------------

/// Per-output response shift and scale; the target is last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization<T> {
    pub means: Vec<T>,
    pub scales: Vec<T>,
}

impl<T: Real> Standardization<T> {
    pub fn identity(outputs: usize) -> Self {
        Self {
            means: vec![T::zero(); outputs],
            scales: vec![T::one(); outputs],
        }
    }

    pub fn from_data(data: &TransferData<T>) -> Self {
        let q = data.num_sources();
        let (mut means, mut scales) = (Vec::new(), Vec::new());
        for p in 0..=q {
            let y = data.output(p).responses();
            let n = T::of_usize(y.len());
            let m = y.iter().copied().sum::<T>() / n;
            let var = y.iter().map(|v| (*v - m) * (*v - m)).sum::<T>() / n;
            let s = var.sqrt();
            means.push(m);
            scales.push(if s > T::lit(1e-12) * (T::one() + m.abs()) { s } else { T::one() });
        }
        Self { means, scales }
    }

    pub fn apply(&self, data: &TransferData<T>) -> Result<TransferData<T>> {
        if self.means.len() != data.num_sources() + 1 {
            return Err(MgcpError::DimensionMismatch {
                context: "standardization outputs",
                expected: data.num_sources() + 1,
                found: self.means.len(),
            });
        }
        data.map_responses(|p, y| {
            let (m, s) = (self.means[p], self.scales[p]);
            y.iter().map(|v| (*v - m) / s).collect()
        })
    }

    /// Maps a target prediction back to the original response scale.
    pub fn restore_target(&self, mut pred: PredictiveDistribution<T>) -> PredictiveDistribution<T> {
        let (m, s) = (*self.means.last().expect("target"), *self.scales.last().expect("target"));
        for v in &mut pred.mean {
            *v = *v * s + m;
        }
        for v in &mut pred.variance {
            *v *= s * s;
        }
        pred
    }
}

// --- fitting --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartDiagnostics {
    pub seed: u64,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub objective: Option<f64>,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    /// Estimate on the response scale the model was fitted on.
    pub theta_hat: Hyperparameters<T>,
    /// Penalized log-likelihood at `theta_hat` on the fitted data.
    pub objective: T,
    /// Sources whose standardized `|α_it|` exceeds `selection_threshold`,
    /// ascending.
    pub selected_sources: Vec<usize>,
    /// `None` for restarts that failed.
    pub per_restart_objectives: Vec<Option<T>>,
    pub best_restart: usize,
    pub diagnostics: Vec<RestartDiagnostics>,
    pub standardization: Standardization<T>,
    /// Target response standard deviation for a fit on raw responses, 1 for
    /// a standardized fit. Dividing `α_it` by it gives the standardized scale.
    pub alpha_scale: T,
    pub config: TrainConfig,
}

impl<T: Real> FitResult<T> {
    /// Transfer scales `α_it` on the standardized response scale.
    pub fn standardized_transfer_alphas(&self) -> Vec<T> {
        self.theta_hat.transfer_alphas().iter().map(|a| *a / self.alpha_scale).collect()
    }

    /// The data on the scale the model was fitted on.
    pub fn standardized(&self, data: &TransferData<T>) -> Result<TransferData<T>> {
        self.standardization.apply(data)
    }

    /// Target posterior at `query` on the original response scale.
    pub fn predict(&self, data: &TransferData<T>, query: &Matrix<T>, include_noise: bool) -> Result<PredictiveDistribution<T>> {
        let sdata = self.standardized(data)?;
        let bundle = assemble_covariance(&sdata, &self.theta_hat, self.config.jitter_as())?;
        let pred = predict(&bundle, &sdata, query, include_noise)?;
        Ok(self.standardization.restore_target(pred))
    }
}

struct RestartOutcome<T> {
    theta: Option<(Hyperparameters<T>, T)>,
    diag: RestartDiagnostics,
}

fn run_restart<T: Real>(data: &TransferData<T>, layout: ParamLayout, config: &TrainConfig, k: usize) -> RestartOutcome<T> {
    let seed = derive_seed(config.seed, &format!("restart/{k}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0 = Hyperparameters::<T>::random(layout, &mut rng);
    let f = |x: &[T]| -> Result<(T, Vec<T>)> {
        let theta = Hyperparameters::from_flat(layout, x)?;
        let (v, g) = objective_and_gradient(data, &theta, config)?;
        Ok((-v, g.into_iter().map(|gi| -gi).collect()))
    };
    let mut diag = RestartDiagnostics {
        seed,
        iterations: 0,
        evaluations: 0,
        gradient_norm: f64::NAN,
        objective: None,
        stop_reason: None,
        error: None,
    };
    match minimize(f, theta0.to_flat(), &config.lbfgs()) {
        Ok(out) => {
            let theta = Hyperparameters::from_flat(layout, &out.x).expect("layout");
            let value = -out.value;
            diag.iterations = out.iterations;
            diag.evaluations = out.evaluations;
            diag.gradient_norm = out.gradient.iter().fold(0.0, |m, g| m.max(g.to_f64_lossy().abs()));
            diag.objective = Some(value.to_f64_lossy());
            diag.stop_reason = Some(out.reason);
            RestartOutcome {
                theta: Some((theta, value)),
                diag,
            }
        }
        Err(e) => {
            diag.error = Some(format!("restart {k}: {e}"));
            RestartOutcome { theta: None, diag }
        }
    }
}

/// Sources whose `|α_it| / alpha_scale` exceeds `threshold`.
pub fn selected_sources<T: Real>(theta: &Hyperparameters<T>, alpha_scale: T, threshold: f64) -> Vec<usize> {
    theta
        .transfer_alphas()
        .iter()
        .map(|a| *a / alpha_scale)
        .enumerate()
        .filter(|(_, a)| a.abs().to_f64_lossy() > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Multi-start penalized maximum likelihood. Restarts run concurrently with
/// seeds derived from `config.seed`; the best objective wins, ties going to
/// the lowest restart index.
pub fn fit<T: Real>(data: &TransferData<T>, config: &TrainConfig) -> Result<FitResult<T>> {
    config.validate()?;
    let (standardization, alpha_scale) = if config.standardize {
        (Standardization::from_data(data), T::one())
    } else {
        let q = data.num_sources();
        (Standardization::identity(q + 1), Standardization::from_data(data).scales[q])
    };
    let sdata = standardization.apply(data)?;
    let layout = ParamLayout::new(data.num_sources(), data.dim(), config.penalty_mode.shared_latent());

    let outcomes: Vec<RestartOutcome<T>> = (0..config.restarts)
        .into_par_iter()
        .map(|k| run_restart(&sdata, layout, config, k))
        .collect();

    let mut best: Option<(usize, &Hyperparameters<T>, T)> = None;
    for (k, o) in outcomes.iter().enumerate() {
        if let Some((theta, v)) = &o.theta {
            if best.is_none_or(|(_, _, b)| *v > b) {
                best = Some((k, theta, *v));
            }
        }
    }
    let diagnostics: Vec<RestartDiagnostics> = outcomes.iter().map(|o| o.diag.clone()).collect();
    let Some((best_restart, theta, objective)) = best else {
        return Err(MgcpError::OptimizationFailed {
            restarts: config.restarts,
            messages: diagnostics.iter().filter_map(|d| d.error.clone()).collect(),
        });
    };
    Ok(FitResult {
        theta_hat: theta.clone(),
        objective,
        selected_sources: selected_sources(theta, alpha_scale, config.selection_threshold),
        per_restart_objectives: outcomes.iter().map(|o| o.theta.as_ref().map(|(_, v)| *v)).collect(),
        best_restart,
        diagnostics,
        standardization,
        alpha_scale,
        config: config.clone(),
    })
}

// --- penalty-weight selection -------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub gamma: f64,
    /// Mean held-out target MAE over folds; infinite if a fold fit failed.
    pub cv_mae: f64,
    pub fold_maes: Vec<f64>,
    /// Selection from a fit on all data at this `gamma`.
    pub selected_count: usize,
    /// That fit's `α_it` on the standardized scale.
    pub transfer_alphas: Vec<f64>,
}

/// Target observation indices of each fold.
pub fn target_folds(n_target: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n_target).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "cv-folds")));
    let mut out = vec![Vec::new(); folds];
    for (j, idx) in perm.into_iter().enumerate() {
        out[j % folds].push(idx);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

fn fold_mae<T: Real>(data: &TransferData<T>, config: &TrainConfig, held_out: &[usize]) -> Result<f64> {
    let target = data.target();
    let train_idx: Vec<usize> = (0..target.len()).filter(|i| !held_out.contains(i)).collect();
    let train = data.with_target(target.subset(&train_idx)?)?;
    let fitted = fit(&train, config)?;
    let test = target.subset(held_out)?;
    let pred = fitted.predict(&train, test.inputs(), false)?;
    let total: f64 = pred
        .mean
        .iter()
        .zip(test.responses())
        .map(|(m, y)| (*m - *y).abs().to_f64_lossy())
        .sum();
    Ok(total / held_out.len() as f64)
}

/// k-fold cross-validation of `gamma` over `config.gamma_grid`. Folds split
/// the target only; sources always stay in training. Returns the `gamma`
/// with the smallest mean held-out MAE (ties toward the larger `gamma`) and
/// one row per grid value in ascending order.
pub fn select_gamma<T: Real>(data: &TransferData<T>, config: &TrainConfig) -> Result<(f64, Vec<CvRow>)> {
    config.validate()?;
    if config.gamma_grid.is_empty() {
        return Err(MgcpError::config("gamma_grid", "must not be empty"));
    }
    let nt = data.target().len();
    if config.cv_folds < 2 || config.cv_folds > nt {
        return Err(MgcpError::config(
            "cv_folds",
            format!("must lie in [2, n_t = {nt}], got {}", config.cv_folds),
        ));
    }
    let mut grid = config.gamma_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let folds = target_folds(nt, config.cv_folds, config.seed);

    let rows: Vec<CvRow> = grid
        .par_iter()
        .map(|&gamma| {
            let cfg = TrainConfig {
                gamma,
                ..config.clone()
            };
            let fold_maes: Vec<f64> = folds
                .iter()
                .map(|held| fold_mae(data, &cfg, held).unwrap_or(f64::INFINITY))
                .collect();
            let cv_mae = fold_maes.iter().sum::<f64>() / fold_maes.len() as f64;
            let (selected_count, transfer_alphas) = match fit(data, &cfg) {
                Ok(f) => (
                    f.selected_sources.len(),
                    f.standardized_transfer_alphas().iter().map(|a| a.to_f64_lossy()).collect(),
                ),
                Err(_) => (0, Vec::new()),
            };
            CvRow {
                gamma,
                cv_mae,
                fold_maes,
                selected_count,
                transfer_alphas,
            }
        })
        .collect();

    if rows.iter().all(|r| !r.cv_mae.is_finite()) {
        return Err(MgcpError::OptimizationFailed {
            restarts: config.restarts,
            messages: vec!["every grid value failed in cross-validation".into()],
        });
    }
    let best = best_gamma(&rows).expect("non-empty grid");
    Ok((best, rows))
}

/// Picks the grid value with the smallest CV error, ties toward larger
/// `gamma`. `rows` must be sorted by ascending `gamma`.
pub fn best_gamma(rows: &[CvRow]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for r in rows {
        if best.is_none_or(|(_, m)| r.cv_mae <= m) {
            best = Some((r.gamma, r.cv_mae));
        }
    }
    best.map(|(g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covblock::{OutputData, Role};
    use crate::kernels::KernelParams;
    use rand::Rng;

    fn sine_data(q_copy: bool, seed: u64) -> TransferData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..15).map(|i| i as f64 * 0.35).collect();
        let xt: Vec<f64> = (0..6).map(|i| i as f64 * 0.8).collect();
        let f = |x: f64| (1.3 * x).sin() + 0.3 * x;
        let noise = |rng: &mut ChaCha8Rng| rng.gen_range(-0.05..0.05);
        let copy = OutputData::from_points(&xs, xs.iter().map(|&x| f(x) + noise(&mut rng)).collect(), Role::Source(0)).unwrap();
        let junk = OutputData::from_points(&xs, xs.iter().map(|_| rng.gen_range(-1.0..1.0)).collect(), Role::Source(1)).unwrap();
        let target = OutputData::from_points(&xt, xt.iter().map(|&x| f(x) + noise(&mut rng)).collect(), Role::Target).unwrap();
        let sources = if q_copy { vec![copy, junk] } else { vec![junk] };
        TransferData::new(sources, target).unwrap()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_l1(&[0.0, 0.0], 3.0, 1e-5), 0.0);
        let eta = 1e-3;
        let lo = huber_l1(&[eta], 1.0, eta);
        assert!((lo - eta / 2.0).abs() < 1e-18);
        let hi = huber_l1(&[eta * (1.0 + 1e-12)], 1.0, eta);
        assert!((lo - hi).abs() < 1e-12);
        let v = huber_l1(&[1.0], 2.0, 1e-5);
        assert!((v - 2.0 * (1.0 - 5e-6)).abs() < 1e-15);
        assert!((v - 1.99999).abs() < 1e-12);
        assert_eq!(huber_l1(&[-1.0], 2.0, 1e-5), v);
    }

    #[test]
    fn penalty_derivative_vanishes_at_zero() {
        assert_eq!(huber_derivative(0.0, 5.0, 1e-5), 0.0);
        assert_eq!(huber_derivative(0.5, 5.0, 1e-5), 5.0);
        assert_eq!(huber_derivative(-0.5, 5.0, 1e-5), -5.0);
    }

    #[test]
    fn group_penalty_reduces_to_abs() {
        let v = group_l1_smoothed(&[(3.0, 4.0)], 2.0, 1e-9);
        assert!((v - 10.0).abs() < 1e-8);
        assert_eq!(group_l1_smoothed(&[(0.0, 0.0)], 2.0, 1e-5), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { eta: 0.0, ..Default::default() },
            TrainConfig { eta: 0.1, ..Default::default() },
            TrainConfig { gamma: -1.0, ..Default::default() },
            TrainConfig { restarts: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(MgcpError::Config { .. })));
        }
    }

    #[test]
    fn objective_recomposes() {
        let data = sine_data(true, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = Hyperparameters::random(ParamLayout::new(2, 1, false), &mut rng);
        let cfg = TrainConfig { gamma: 1.7, ..Default::default() };
        let bundle = assemble_covariance(&data, &theta, Jitter::default()).unwrap();
        let l = log_likelihood_schur(&bundle, &data.stacked_responses()).unwrap();
        let expect = l - huber_l1(&theta.transfer_alphas(), 1.7, 1e-5);
        assert_eq!(penalized_objective(&data, &theta, &cfg).unwrap(), expect);

        let plain = TrainConfig { gamma: 0.0, ..Default::default() };
        assert_eq!(penalized_objective(&data, &theta, &plain).unwrap(), l);

        let mut zeroed = theta.clone();
        for s in &mut zeroed.sources {
            s.transfer_kernel.alpha = 0.0;
        }
        let bz = assemble_covariance(&data, &zeroed, Jitter::default()).unwrap();
        let lz = log_likelihood_schur(&bz, &data.stacked_responses()).unwrap();
        assert_eq!(penalized_objective(&data, &zeroed, &cfg).unwrap(), lz);

        let rf = TrainConfig { penalty_mode: PenaltyMode::GroupL1Rf, ..cfg };
        assert!(penalized_objective(&data, &theta, &rf).is_err());
    }

    #[test]
    fn penalized_gradient_matches_finite_differences() {
        let data = sine_data(true, 2);
        for mode in [PenaltyMode::L1Transfer, PenaltyMode::GroupL1Rf] {
            let layout = ParamLayout::new(2, 1, mode.shared_latent());
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let theta = Hyperparameters::<f64>::random(layout, &mut rng);
            let cfg = TrainConfig {
                gamma: 0.8,
                eta: 1e-2,
                penalty_mode: mode,
                jitter: Jitter::Absolute(0.0),
                ..Default::default()
            };
            let g = objective_gradient(&data, &theta, &cfg).unwrap();
            let flat = theta.to_flat();
            for k in 0..flat.len() {
                let h = 1e-5 * flat[k].abs().max(1.0);
                let (mut p, mut m) = (flat.clone(), flat.clone());
                p[k] += h;
                m[k] -= h;
                let ev = |v: &[f64]| penalized_objective(&data, &Hyperparameters::from_flat(layout, v).unwrap(), &cfg).unwrap();
                let fd = (ev(&p) - ev(&m)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{mode:?} k={k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn noise_gradient_sign_under_misfit() {
        // Responses far larger than the model's scale: more noise helps.
        let target = OutputData::from_points(&[0.0, 1.0, 2.0], vec![30.0, -25.0, 40.0], Role::Target).unwrap();
        let data = TransferData::new(vec![], target).unwrap();
        let theta = Hyperparameters {
            sources: vec![],
            target_kernel: KernelParams::new(0.5, vec![0.0]),
            target_log_sigma: 0.0,
            shared: None,
        };
        let cfg = TrainConfig::default();
        let g = objective_gradient(&data, &theta, &cfg).unwrap();
        assert!(g[theta.layout().target_noise()] > 0.0);
        let mut up = theta.clone();
        up.target_log_sigma += 1e-4;
        assert!(penalized_objective(&data, &up, &cfg).unwrap() > penalized_objective(&data, &theta, &cfg).unwrap());
    }

    #[test]
    fn fit_is_deterministic_and_consistent() {
        let data = sine_data(true, 4);
        let cfg = TrainConfig {
            gamma: 0.5,
            restarts: 3,
            max_iterations: 60,
            seed: 11,
            ..Default::default()
        };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let again = penalized_objective(&a.standardized(&data).unwrap(), &a.theta_hat, &cfg).unwrap();
        assert!((again - a.objective).abs() < 1e-10);
        let best = a.per_restart_objectives.iter().flatten().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        assert_eq!(best, a.objective);
        assert_eq!(a.selected_sources, selected_sources(&a.theta_hat, a.alpha_scale, cfg.selection_threshold));
    }

    #[test]
    fn informative_copy_is_selected() {
        let data = sine_data(true, 5);
        let cfg = TrainConfig {
            gamma: 0.5,
            restarts: 3,
            seed: 2,
            ..Default::default()
        };
        let f = fit(&data, &cfg).unwrap();
        assert!(f.selected_sources.contains(&0), "{:?}", f.theta_hat.transfer_alphas());
    }

    #[test]
    fn fit_beats_generating_parameters() {
        let target = OutputData::from_points(
            &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            vec![0.1, 0.5, 0.8, 0.9, 0.6, 0.1, -0.3],
            Role::Target,
        )
        .unwrap();
        let data = TransferData::new(vec![], target).unwrap();
        let cfg = TrainConfig {
            restarts: 3,
            standardize: false,
            penalty_mode: PenaltyMode::None,
            ..Default::default()
        };
        let truth = Hyperparameters {
            sources: vec![],
            target_kernel: KernelParams::new(0.8, vec![0.0]),
            target_log_sigma: (0.1f64).ln(),
            shared: None,
        };
        let f = fit(&data, &cfg).unwrap();
        assert!(f.objective >= penalized_objective(&data, &truth, &cfg).unwrap());
    }

    #[test]
    fn gamma_selection_rules() {
        let data = sine_data(true, 6);
        let cfg = TrainConfig {
            gamma_grid: vec![0.0],
            cv_folds: 3,
            restarts: 1,
            max_iterations: 40,
            ..Default::default()
        };
        let (g, rows) = select_gamma(&data, &cfg).unwrap();
        assert_eq!(g, 0.0);
        assert_eq!(rows.len(), 1);
        let too_many = TrainConfig { cv_folds: 7, ..cfg.clone() };
        assert!(matches!(select_gamma(&data, &too_many), Err(MgcpError::Config { .. })));

        let tied = |g: f64| CvRow {
            gamma: g,
            cv_mae: 0.25,
            fold_maes: vec![],
            selected_count: 0,
            transfer_alphas: vec![],
        };
        assert_eq!(best_gamma(&[tied(0.5), tied(2.0)]), Some(2.0));
    }

    #[test]
    fn folds_partition_target() {
        let folds = target_folds(11, 4, 3);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() >= 2));
    }
}
