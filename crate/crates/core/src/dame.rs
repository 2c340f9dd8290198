//! Marginalization and expansion of a source whose input features differ
//! from the target's.
//!
//! A source observed on `[x_c | x_s]` (shared and source-only features) is
//! first reduced to a regression on `x_c` alone with a Nadaraya–Watson
//! smoother, evaluated at a set of induced points. Those are then expanded
//! over the target-only features `x_t` to give a pseudo source on the
//! target's input space `[x_c | x_t]`.
//!
//! Target inputs are laid out with the shared features first, followed by
//! the target-only features.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::covblock::{OutputData, Role, TransferData};
use crate::error::{MgcpError, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::train::{fit, PenaltyMode, TrainConfig};

/// Where the target-only feature values for expansion come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniqueValues<T> {
    /// Bounding box of the target's own target-only columns.
    FromTarget,
    /// Explicit `[low, high]` per target-only dimension.
    Bounds(Vec<(T, T)>),
    /// Explicit rows of target-only values, used as given.
    Points(Vec<Vec<T>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec<T> {
    /// Source columns shared with the target, in target column order.
    pub shared_features: Vec<usize>,
    /// Source columns the target does not have.
    pub source_unique: Vec<usize>,
    pub target_unique_count: usize,
    pub target_unique: UniqueValues<T>,
}

impl<T: Real> DomainSpec<T> {
    pub fn new(
        shared_features: Vec<usize>,
        source_unique: Vec<usize>,
        target_unique_count: usize,
        target_unique: UniqueValues<T>,
    ) -> Result<Self> {
        let spec = Self {
            shared_features,
            source_unique,
            target_unique_count,
            target_unique,
        };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn shared_dim(&self) -> usize {
        self.shared_features.len()
    }

    /// Checks the feature partition, and with `source_dim` that it covers
    /// every source column.
    pub fn validate(&self, source_dim: Option<usize>) -> Result<()> {
        if self.shared_features.is_empty() {
            return Err(MgcpError::Domain(
                "shared_features is empty: at least one input feature must be shared between source and target".into(),
            ));
        }
        let mut all: Vec<usize> = self.shared_features.iter().chain(&self.source_unique).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(MgcpError::Domain(
                "shared_features and source_unique overlap or repeat a column".into(),
            ));
        }
        if let Some(d) = source_dim {
            if all != (0..d).collect::<Vec<_>>() {
                return Err(MgcpError::Domain(format!(
                    "shared_features and source_unique must cover source columns 0..{d} exactly"
                )));
            }
        }
        match &self.target_unique {
            UniqueValues::FromTarget => {}
            UniqueValues::Bounds(b) => {
                if b.len() != self.target_unique_count {
                    return Err(MgcpError::Domain(format!(
                        "{} bounds given for {} target-only features",
                        b.len(),
                        self.target_unique_count
                    )));
                }
                if b.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
                    return Err(MgcpError::Domain("bounds must be finite with low <= high".into()));
                }
            }
            UniqueValues::Points(p) => {
                if p.is_empty() || p.iter().any(|r| r.len() != self.target_unique_count) {
                    return Err(MgcpError::Domain(format!(
                        "explicit points must be non-empty rows of length {}",
                        self.target_unique_count
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthChoice {
    Fixed(f64),
    /// k-fold CV over `candidates`; an empty list uses [`default_bandwidth_grid`].
    CrossValidated { folds: usize, candidates: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpansionNoise {
    Fixed(f64),
    /// Noise deviation of a single-output GP fitted to the target.
    EstimateFromTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DameConfig {
    pub n_induced: usize,
    /// Values per target-only dimension.
    pub n_expand: usize,
    pub bandwidth: BandwidthChoice,
    pub expansion_noise: ExpansionNoise,
    pub seed: u64,
}

impl Default for DameConfig {
    fn default() -> Self {
        Self {
            n_induced: 8,
            n_expand: 8,
            bandwidth: BandwidthChoice::CrossValidated {
                folds: 5,
                candidates: Vec::new(),
            },
            expansion_noise: ExpansionNoise::EstimateFromTarget,
            seed: 0,
        }
    }
}

impl DameConfig {
    /// `min(n_t − 1, 10)`, at least one.
    pub fn default_n_induced(n_target: usize) -> usize {
        n_target.saturating_sub(1).clamp(1, 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_induced == 0 {
            return Err(MgcpError::config("n_induced", "must be at least 1"));
        }
        if self.n_expand == 0 {
            return Err(MgcpError::config("n_expand", "must be at least 1"));
        }
        match &self.bandwidth {
            BandwidthChoice::Fixed(b) if !(*b > 0.0 && b.is_finite()) => {
                return Err(MgcpError::config("bandwidth", "must be positive and finite"))
            }
            BandwidthChoice::CrossValidated { folds, candidates } => {
                if *folds < 2 {
                    return Err(MgcpError::config("bandwidth.folds", "must be at least 2"));
                }
                if candidates.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                    return Err(MgcpError::config("bandwidth.candidates", "must be positive and finite"));
                }
            }
            _ => {}
        }
        if let ExpansionNoise::Fixed(s) = self.expansion_noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(MgcpError::config("expansion_noise", "must be non-negative and finite"));
            }
        }
        Ok(())
    }
}

/// Regression values on the shared features at the induced points.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedSet<T> {
    pub inputs: Matrix<T>,
    pub responses: Vec<T>,
    /// Bandwidth used by the smoother, if one was fitted.
    pub bandwidth: Option<T>,
}

impl<T: Real> InducedSet<T> {
    pub fn new(inputs: Matrix<T>, responses: Vec<T>) -> Result<Self> {
        if inputs.rows() == 0 || inputs.rows() != responses.len() {
            return Err(MgcpError::DimensionMismatch {
                context: "induced responses per input row",
                expected: inputs.rows(),
                found: responses.len(),
            });
        }
        Ok(Self {
            inputs,
            responses,
            bandwidth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

fn cmp_rows<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Nadaraya–Watson estimate at `query` with kernel
/// `exp(−‖x − x′‖² / (2λ²))`.
pub fn nadaraya_watson<T: Real>(x: &Matrix<T>, y: &[T], query: &[T], bandwidth: T) -> Result<T> {
    let scale = -T::one() / (T::lit(2.0) * bandwidth * bandwidth);
    let (mut num, mut den) = (T::zero(), T::zero());
    for (r, yr) in y.iter().enumerate() {
        let d2: T = x.row(r).iter().zip(query).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        let w = (scale * d2).exp();
        num += w * *yr;
        den += w;
    }
    if !(den > T::zero()) {
        return Err(MgcpError::Bandwidth(format!(
            "all kernel weights vanish at a query point with bandwidth {bandwidth}; increase it"
        )));
    }
    Ok(num / den)
}

/// Twenty log-spaced bandwidths from 1% to 200% of the widest feature range.
pub fn default_bandwidth_grid<T: Real>(x: &Matrix<T>) -> Vec<T> {
    let mut span = T::zero();
    for j in 0..x.cols() {
        let col = x.col_values(j);
        let lo = col.iter().copied().fold(T::infinity(), T::min);
        let hi = col.iter().copied().fold(T::neg_infinity(), T::max);
        span = span.max(hi - lo);
    }
    if !(span > T::zero()) {
        span = T::one();
    }
    let (lo, hi) = ((T::lit(0.01) * span).ln(), (T::lit(2.0) * span).ln());
    let m = 20;
    (0..m)
        .map(|k| (lo + (hi - lo) * T::of_usize(k) / T::of_usize(m - 1)).exp())
        .collect()
}

/// Groups of rows with identical inputs, in canonical row order.
fn identical_input_groups<T: Real>(x: &Matrix<T>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| cmp_rows(x.row(a), x.row(b)).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if cmp_rows(x.row(g[0]), x.row(i)) == Ordering::Equal => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Picks the candidate with the smallest k-fold mean squared error of the
/// smoother. Rows with identical inputs always share a fold, so repeating
/// every observation leaves the choice unchanged. Candidates whose weights
/// vanish at a held-out point lose.
pub fn select_bandwidth<T: Real>(x: &Matrix<T>, y: &[T], folds: usize, candidates: &[T], seed: u64) -> Result<T> {
    if candidates.is_empty() {
        return Err(MgcpError::Bandwidth("no candidate bandwidths".into()));
    }
    if x.rows() != y.len() {
        return Err(MgcpError::DimensionMismatch {
            context: "bandwidth responses per row",
            expected: x.rows(),
            found: y.len(),
        });
    }
    if folds < 2 {
        return Err(MgcpError::config("folds", "must be at least 2"));
    }
    let mut groups = identical_input_groups(x);
    if groups.len() < 2 {
        return Err(MgcpError::Bandwidth("all inputs are identical; bandwidth is not identifiable".into()));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    if x.rows() < folds {
        return Err(MgcpError::Bandwidth(format!("{} points are fewer than {folds} folds", x.rows())));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "bandwidth-folds")));
    let k = folds.min(groups.len());
    let fold_of = {
        let mut f = vec![0usize; x.rows()];
        for (pos, g) in groups.iter().enumerate() {
            for &i in g {
                f[i] = pos % k;
            }
        }
        f
    };

    let mut best: Option<(T, T)> = None;
    for &lambda in candidates {
        let mut sse = T::zero();
        for fold in 0..k {
            let train: Vec<usize> = (0..x.rows()).filter(|&i| fold_of[i] != fold).collect();
            let xt = x.select_rows(&train);
            let yt: Vec<T> = train.iter().map(|&i| y[i]).collect();
            for i in (0..x.rows()).filter(|&i| fold_of[i] == fold) {
                match nadaraya_watson(&xt, &yt, x.row(i), lambda) {
                    Ok(p) => sse += (p - y[i]) * (p - y[i]),
                    Err(_) => sse = T::infinity(),
                }
            }
        }
        let score = sse / T::of_usize(x.rows());
        if score.is_finite() && best.is_none_or(|(_, s)| score < s) {
            best = Some((lambda, score));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| MgcpError::Bandwidth("every candidate bandwidth is too small for the data".into()))
}

fn bounding_box<T: Real>(x: &Matrix<T>) -> Vec<(T, T)> {
    (0..x.cols())
        .map(|j| {
            let col = x.col_values(j);
            (
                col.iter().copied().fold(T::infinity(), T::min),
                col.iter().copied().fold(T::neg_infinity(), T::max),
            )
        })
        .collect()
}

fn evenly_spaced<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::lit(0.5) * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * T::of_usize(k) / T::of_usize(n - 1)).collect()
}

/// `n` points in the box, one per stratum along every dimension.
pub fn latin_hypercube<T: Real, R: Rng + ?Sized>(n: usize, bounds: &[(T, T)], rng: &mut R) -> Matrix<T> {
    let mut m = Matrix::zeros(n, bounds.len());
    for (j, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.gen_range(0.0..1.0);
            let t = (T::of_usize(s) + T::lit(u)) / T::of_usize(n);
            m[(i, j)] = *lo + (*hi - *lo) * t;
        }
    }
    m
}

/// Reduces a source to its regression on the shared features, evaluated at
/// `config.n_induced` points evenly spaced over the projected data's range
/// (one shared feature) or on a Latin hypercube over its bounding box.
///
/// Rows are put in canonical order first, so the result does not depend on
/// the order of the source's observations.
pub fn marginalize<T: Real>(source: &OutputData<T>, spec: &DomainSpec<T>, config: &DameConfig) -> Result<InducedSet<T>> {
    config.validate()?;
    spec.validate(Some(source.dim()))?;
    if source.len() < 2 {
        return Err(MgcpError::InvalidData("marginalizing a source needs at least two observations".into()));
    }
    let projected = source.inputs().select_cols(&spec.shared_features);
    let y = source.responses();
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.sort_by(|&a, &b| {
        cmp_rows(projected.row(a), projected.row(b)).then(y[a].partial_cmp(&y[b]).unwrap_or(Ordering::Equal))
    });
    let x = projected.select_rows(&order);
    let y: Vec<T> = order.iter().map(|&i| y[i]).collect();

    let bandwidth = match &config.bandwidth {
        BandwidthChoice::Fixed(b) => T::lit(*b),
        BandwidthChoice::CrossValidated { folds, candidates } => {
            let grid: Vec<T> = if candidates.is_empty() {
                default_bandwidth_grid(&x)
            } else {
                candidates.iter().map(|c| T::lit(*c)).collect()
            };
            select_bandwidth(&x, &y, (*folds).min(x.rows()), &grid, config.seed)?
        }
    };

    let bounds = bounding_box(&x);
    let inputs = if bounds.len() == 1 {
        Matrix::column(&evenly_spaced(bounds[0].0, bounds[0].1, config.n_induced))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "induced-points"));
        latin_hypercube(config.n_induced, &bounds, &mut rng)
    };
    let responses = (0..inputs.rows())
        .map(|a| nadaraya_watson(&x, &y, inputs.row(a), bandwidth))
        .collect::<Result<Vec<T>>>()?;
    Ok(InducedSet {
        inputs,
        responses,
        bandwidth: Some(bandwidth),
    })
}

/// Target-only feature rows used for expansion.
pub fn expansion_grid<T: Real>(spec: &DomainSpec<T>, config: &DameConfig, target: Option<&OutputData<T>>) -> Result<Vec<Vec<T>>> {
    let dt = spec.target_unique_count;
    let bounds = match &spec.target_unique {
        UniqueValues::Points(p) => return Ok(p.clone()),
        UniqueValues::Bounds(b) => b.clone(),
        UniqueValues::FromTarget => {
            let target = target.ok_or_else(|| {
                MgcpError::Domain("no target data and no explicit bounds for the target-only features".into())
            })?;
            let dc = spec.shared_dim();
            if target.dim() != dc + dt {
                return Err(MgcpError::Domain(format!(
                    "target has {} columns, expected {dc} shared + {dt} target-only",
                    target.dim()
                )));
            }
            let cols: Vec<usize> = (dc..dc + dt).collect();
            bounding_box(&target.inputs().select_cols(&cols))
        }
    };
    let axes: Vec<Vec<T>> = bounds.iter().map(|(lo, hi)| evenly_spaced(*lo, *hi, config.n_expand)).collect();
    let mut rows: Vec<Vec<T>> = vec![Vec::new()];
    for axis in &axes {
        rows = rows
            .into_iter()
            .flat_map(|r| {
                axis.iter().map(move |v| {
                    let mut r = r.clone();
                    r.push(*v);
                    r
                })
            })
            .collect();
    }
    Ok(rows)
}

/// Noise deviation of a single-output GP fitted to `target`, falling back
/// to the spread of smoother residuals when the fit fails.
pub fn estimate_target_noise<T: Real>(target: &OutputData<T>, seed: u64) -> Result<T> {
    let data = TransferData::new(vec![], target.clone())?;
    let cfg = TrainConfig {
        penalty_mode: PenaltyMode::None,
        restarts: 3,
        seed: derive_seed(seed, "target-noise"),
        ..TrainConfig::default()
    };
    if let Ok(f) = fit(&data, &cfg) {
        let scale = *f.standardization.scales.last().expect("target scale");
        return Ok(f.theta_hat.target_sigma() * scale);
    }
    let x = target.inputs();
    let y = target.responses();
    let lambda = select_bandwidth(x, y, 5.min(target.len()), &default_bandwidth_grid(x), seed)?;
    let mut sq = T::zero();
    for i in 0..target.len() {
        let r = y[i] - nadaraya_watson(x, y, x.row(i), lambda)?;
        sq += r * r;
    }
    Ok((sq / T::of_usize(target.len())).sqrt())
}

/// Pseudo source on the target input space: every induced point paired
/// with every target-only grid row, response `y_a + ε`.
pub fn expand<T: Real>(
    induced: &InducedSet<T>,
    spec: &DomainSpec<T>,
    config: &DameConfig,
    target: Option<&OutputData<T>>,
) -> Result<OutputData<T>> {
    expand_with(induced, spec, config, target, |_, y| y)
}

/// [`expand`] with a response transform `h(x, y_a)` applied before noise,
/// for monotonicity or other domain knowledge about the target-only features.
pub fn expand_with<T: Real>(
    induced: &InducedSet<T>,
    spec: &DomainSpec<T>,
    config: &DameConfig,
    target: Option<&OutputData<T>>,
    transform: impl Fn(&[T], T) -> T,
) -> Result<OutputData<T>> {
    config.validate()?;
    spec.validate(None)?;
    if induced.inputs.cols() != spec.shared_dim() {
        return Err(MgcpError::DimensionMismatch {
            context: "induced point dimension vs shared features",
            expected: spec.shared_dim(),
            found: induced.inputs.cols(),
        });
    }
    let grid = expansion_grid(spec, config, target)?;
    let std = match config.expansion_noise {
        ExpansionNoise::Fixed(s) => T::lit(s),
        ExpansionNoise::EstimateFromTarget => {
            let t = target.ok_or_else(|| MgcpError::Domain("noise estimation needs target data".into()))?;
            estimate_target_noise(t, config.seed)?
        }
    };
    let normal = Normal::new(0.0, std.to_f64_lossy()).map_err(|e| MgcpError::config("expansion_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "expansion-noise"));

    let d = spec.shared_dim() + spec.target_unique_count;
    let n = induced.len() * grid.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for a in 0..induced.len() {
        for u in &grid {
            let start = xs.len();
            xs.extend_from_slice(induced.inputs.row(a));
            xs.extend_from_slice(u);
            let eps: f64 = normal.sample(&mut rng);
            ys.push(transform(&xs[start..], induced.responses[a]) + T::lit(eps));
        }
    }
    OutputData::new(Matrix::from_row_major(n, d, xs), ys, Role::Source(0))
}

/// Marginalizes `source` and expands it onto the target input space.
pub fn adapt_source<T: Real>(
    source: &OutputData<T>,
    spec: &DomainSpec<T>,
    config: &DameConfig,
    target: &OutputData<T>,
) -> Result<OutputData<T>> {
    let induced = marginalize(source, spec, config)?;
    Ok(expand(&induced, spec, config, Some(target))?.with_role(source.role()))
}
