//! Block covariance of the multi-output model.
//!
//! Observations are stacked source-major (`y_1, …, y_q`) followed by the
//! target `y_t`. Without the shared latent process the source/source blocks
//! are zero, so
//!
//! ```text
//!     C = | Ω_ss   Ω_st |      Ω_ss = diag(C_11, …, C_qq)
//!         | Ω_stᵀ  Ω_tt |      B    = Ω_tt − Ω_stᵀ Ω_ss⁻¹ Ω_st
//! ```
//!
//! and every solve, log-determinant and gradient is done through the `q`
//! source factors plus the factor of the Schur complement `B`, costing
//! `O(q n³ + n_t³)`. The shared-latent variant couples all sources and is
//! factored densely.

use serde::{Deserialize, Serialize};

use crate::error::{MgcpError, Result};
use crate::kernels::{AutoTerm, CrossTerm, KernelParams};
use crate::linalg::{Cholesky, Matrix};
use crate::params::{Hyperparameters, ParamLayout};
use crate::scalar::{dot, norm_sq, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Source(usize),
    Target,
}

/// Observations of one output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputData<T> {
    inputs: Matrix<T>,
    responses: Vec<T>,
    role: Role,
}

impl<T: Real> OutputData<T> {
    pub fn new(inputs: Matrix<T>, responses: Vec<T>, role: Role) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(MgcpError::InvalidData("an output needs at least one observation".into()));
        }
        if inputs.cols() == 0 {
            return Err(MgcpError::InvalidData("inputs need at least one feature".into()));
        }
        if inputs.rows() != responses.len() {
            return Err(MgcpError::DimensionMismatch {
                context: "responses per input row",
                expected: inputs.rows(),
                found: responses.len(),
            });
        }
        if !inputs.is_finite() || responses.iter().any(|y| !y.is_finite()) {
            return Err(MgcpError::InvalidData("non-finite input or response".into()));
        }
        Ok(Self { inputs, responses, role })
    }

    /// One-dimensional inputs.
    pub fn from_points(xs: &[T], ys: Vec<T>, role: Role) -> Result<Self> {
        Self::new(Matrix::column(xs), ys, role)
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn responses(&self) -> &[T] {
        &self.responses
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_responses(&self, responses: Vec<T>) -> Result<Self> {
        Self::new(self.inputs.clone(), responses, self.role)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select_rows(rows),
            rows.iter().map(|&r| self.responses[r]).collect(),
            self.role,
        )
    }
}

/// Sources plus one target sharing an input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferData<T> {
    sources: Vec<OutputData<T>>,
    target: OutputData<T>,
}

impl<T: Real> TransferData<T> {
    /// Sources are renumbered `Source(0..q)` in the given order.
    pub fn new(sources: Vec<OutputData<T>>, target: OutputData<T>) -> Result<Self> {
        let d = target.dim();
        for s in &sources {
            if s.dim() != d {
                return Err(MgcpError::DimensionMismatch {
                    context: "source input dimension (all outputs must share d)",
                    expected: d,
                    found: s.dim(),
                });
            }
        }
        let sources = sources
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.with_role(Role::Source(i)))
            .collect();
        Ok(Self {
            sources,
            target: target.with_role(Role::Target),
        })
    }

    /// Builds from an unordered list, ordering sources by their index.
    pub fn from_outputs(outputs: Vec<OutputData<T>>) -> Result<Self> {
        let mut target = None;
        let mut sources = Vec::new();
        for o in outputs {
            match o.role {
                Role::Target => {
                    if target.replace(o).is_some() {
                        return Err(MgcpError::InvalidData("more than one target output".into()));
                    }
                }
                Role::Source(i) => sources.push((i, o)),
            }
        }
        sources.sort_by_key(|(i, _)| *i);
        let target = target.ok_or_else(|| MgcpError::InvalidData("no target output".into()))?;
        Self::new(sources.into_iter().map(|(_, o)| o).collect(), target)
    }

    pub fn sources(&self) -> &[OutputData<T>] {
        &self.sources
    }

    pub fn target(&self) -> &OutputData<T> {
        &self.target
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn total_len(&self) -> usize {
        self.sources.iter().map(OutputData::len).sum::<usize>() + self.target.len()
    }

    /// Output `p`: sources first, the target at `p == q`.
    pub fn output(&self, p: usize) -> &OutputData<T> {
        if p < self.sources.len() {
            &self.sources[p]
        } else {
            &self.target
        }
    }

    /// Responses stacked source-major, then target.
    pub fn stacked_responses(&self) -> Vec<T> {
        let mut y = Vec::with_capacity(self.total_len());
        for s in &self.sources {
            y.extend_from_slice(&s.responses);
        }
        y.extend_from_slice(&self.target.responses);
        y
    }

    /// Start row of each output in the stacked order, plus the total length.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sources.len() + 2);
        let mut at = 0;
        for s in &self.sources {
            out.push(at);
            at += s.len();
        }
        out.push(at);
        out.push(at + self.target.len());
        out
    }

    pub fn with_target(&self, target: OutputData<T>) -> Result<Self> {
        Self::new(self.sources.clone(), target)
    }

    pub fn keep_sources(&self, keep: &[usize]) -> Result<Self> {
        Self::new(keep.iter().map(|&i| self.sources[i].clone()).collect(), self.target.clone())
    }

    /// Applies `f` to every output's responses.
    pub fn map_responses(&self, mut f: impl FnMut(usize, &[T]) -> Vec<T>) -> Result<Self> {
        let q = self.sources.len();
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| s.with_responses(f(i, &s.responses)))
            .collect::<Result<Vec<_>>>()?;
        let target = self.target.with_responses(f(q, &self.target.responses))?;
        Self::new(sources, target)
    }

    pub fn check_against(&self, theta: &Hyperparameters<T>) -> Result<()> {
        theta.validate()?;
        if theta.sources.len() != self.sources.len() {
            return Err(MgcpError::DimensionMismatch {
                context: "source parameter blocks",
                expected: self.sources.len(),
                found: theta.sources.len(),
            });
        }
        if theta.dim() != self.dim() {
            return Err(MgcpError::DimensionMismatch {
                context: "kernel dimension vs input dimension",
                expected: self.dim(),
                found: theta.dim(),
            });
        }
        Ok(())
    }
}

/// Mean and variance of the target at query points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    /// Whether `σ_t²` is included in `variance`.
    pub includes_noise: bool,
}

/// Diagonal jitter added before factorizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Jitter<T> {
    Absolute(T),
    /// Multiple of the mean diagonal entry of `C`.
    RelativeToMeanDiagonal(T),
}

impl<T: Real> Default for Jitter<T> {
    fn default() -> Self {
        Jitter::RelativeToMeanDiagonal(T::lit(1e-8))
    }
}

/// Maximum number of ×10 jitter escalations before giving up.
pub const JITTER_ESCALATIONS: usize = 3;

// --- covariance terms -----------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Slot {
    Source(usize),
    Transfer(usize),
    Target,
    SharedSource(usize),
    SharedTarget,
}

impl Slot {
    fn offset(self, layout: &ParamLayout) -> usize {
        match self {
            Slot::Source(i) => layout.source_kernel(i),
            Slot::Transfer(i) => layout.transfer_kernel(i),
            Slot::Target => layout.target_kernel(),
            Slot::SharedSource(i) => layout.shared_source_kernel(i),
            Slot::SharedTarget => layout.shared_target_kernel(),
        }
    }

    fn kernel<T: Real>(self, theta: &Hyperparameters<T>) -> &KernelParams<T> {
        match self {
            Slot::Source(i) => &theta.sources[i].source_kernel,
            Slot::Transfer(i) => &theta.sources[i].transfer_kernel,
            Slot::Target => &theta.target_kernel,
            Slot::SharedSource(i) => &theta.shared.as_ref().expect("shared kernels").sources[i],
            Slot::SharedTarget => &theta.shared.as_ref().expect("shared kernels").target,
        }
    }
}

enum Term<T> {
    Auto(AutoTerm<T>, usize),
    Cross(CrossTerm<T>, usize, usize),
}

/// All terms contributing to block `(p, r)` with `p ≤ r`; `q` is the target.
fn block_terms<T: Real>(theta: &Hyperparameters<T>, p: usize, r: usize) -> Vec<Term<T>> {
    let layout = theta.layout();
    let q = layout.sources;
    let shared = theta.is_shared();
    let auto = |s: Slot| Term::Auto(AutoTerm::new(s.kernel(theta)), s.offset(&layout));
    let cross = |a: Slot, b: Slot| {
        Term::Cross(
            CrossTerm::new(a.kernel(theta), b.kernel(theta)),
            a.offset(&layout),
            b.offset(&layout),
        )
    };
    let mut terms = Vec::new();
    if p == q && r == q {
        for i in 0..q {
            terms.push(auto(Slot::Transfer(i)));
        }
        terms.push(auto(Slot::Target));
        if shared {
            terms.push(auto(Slot::SharedTarget));
        }
    } else if r == q {
        terms.push(cross(Slot::Source(p), Slot::Transfer(p)));
        if shared {
            terms.push(cross(Slot::SharedSource(p), Slot::SharedTarget));
        }
    } else if p == r {
        terms.push(auto(Slot::Source(p)));
        if shared {
            terms.push(auto(Slot::SharedSource(p)));
        }
    } else if shared {
        terms.push(cross(Slot::SharedSource(p), Slot::SharedSource(r)));
    }
    terms
}

#[inline]
fn terms_value<T: Real>(terms: &[Term<T>], x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for t in terms {
        acc += match t {
            Term::Auto(a, _) => a.value(x, y),
            Term::Cross(c, _, _) => c.value(x, y),
        };
    }
    acc
}

fn noise_variance<T: Real>(theta: &Hyperparameters<T>, p: usize) -> T {
    let ls = if p < theta.sources.len() {
        theta.sources[p].log_sigma
    } else {
        theta.target_log_sigma
    };
    (ls + ls).exp()
}

/// Noise-free covariance block between outputs `p ≤ r`, optionally with
/// the noise variance on the diagonal when `p == r`.
fn assemble_block<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    p: usize,
    r: usize,
    with_noise: bool,
) -> Matrix<T> {
    let terms = block_terms(theta, p, r);
    let (xp, xr) = (data.output(p).inputs(), data.output(r).inputs());
    let mut m = if p == r {
        let n = xp.rows();
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..=a {
                let v = terms_value(&terms, xp.row(a), xp.row(b));
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        m
    } else {
        Matrix::from_fn(xp.rows(), xr.rows(), |a, b| terms_value(&terms, xp.row(a), xr.row(b)))
    };
    if with_noise && p == r {
        m.add_diagonal(noise_variance(theta, p));
    }
    m
}

// --- bundle ---------------------------------------------------------------

#[derive(Debug, Clone)]
enum Factorization<T> {
    Block {
        sources: Vec<Cholesky<T>>,
        /// `G_i = C_ii⁻¹ C_it`.
        maps: Vec<Matrix<T>>,
        schur: Cholesky<T>,
    },
    Dense {
        full: Matrix<T>,
        chol: Cholesky<T>,
    },
}

/// Assembled and factored covariance of the training data.
#[derive(Debug, Clone)]
pub struct CovarianceBundle<T> {
    theta: Hyperparameters<T>,
    offsets: Vec<usize>,
    source_blocks: Vec<Matrix<T>>,
    cross_blocks: Vec<Matrix<T>>,
    target_block: Matrix<T>,
    jitter: T,
    factor: Factorization<T>,
}

impl<T: Real> CovarianceBundle<T> {
    /// `C_ii`, including noise and jitter.
    pub fn source_blocks(&self) -> &[Matrix<T>] {
        &self.source_blocks
    }

    /// `C_it`.
    pub fn cross_blocks(&self) -> &[Matrix<T>] {
        &self.cross_blocks
    }

    /// `C_tt`, including noise and jitter.
    pub fn target_block(&self) -> &Matrix<T> {
        &self.target_block
    }

    /// Jitter actually applied, after any escalation.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn theta(&self) -> &Hyperparameters<T> {
        &self.theta
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.factor, Factorization::Dense { .. })
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().expect("offsets")
    }

    /// Cholesky factors of the `C_ii` (empty for the dense variant).
    pub fn source_factorizations(&self) -> &[Cholesky<T>] {
        match &self.factor {
            Factorization::Block { sources, .. } => sources,
            Factorization::Dense { .. } => &[],
        }
    }

    /// Cholesky factor of `B = Ω_tt − Ω_stᵀ Ω_ss⁻¹ Ω_st`.
    pub fn schur_factorization(&self) -> Option<&Cholesky<T>> {
        match &self.factor {
            Factorization::Block { schur, .. } => Some(schur),
            Factorization::Dense { .. } => None,
        }
    }

    /// The full `N × N` covariance. Built from the blocks on demand for the
    /// block structure.
    pub fn dense_full(&self) -> Matrix<T> {
        match &self.factor {
            Factorization::Dense { full, .. } => full.clone(),
            Factorization::Block { .. } => {
                let q = self.source_blocks.len();
                let mut c = Matrix::zeros(self.total_len(), self.total_len());
                let t0 = self.offsets[q];
                for i in 0..q {
                    let o = self.offsets[i];
                    c.set_block(o, o, &self.source_blocks[i]);
                    c.set_block(o, t0, &self.cross_blocks[i]);
                    c.set_block(t0, o, &self.cross_blocks[i].transpose());
                }
                c.set_block(t0, t0, &self.target_block);
                c
            }
        }
    }

    fn split<'a>(&self, v: &'a [T]) -> (Vec<&'a [T]>, &'a [T]) {
        let q = self.source_blocks.len();
        let parts = (0..q).map(|i| &v[self.offsets[i]..self.offsets[i + 1]]).collect();
        (parts, &v[self.offsets[q]..self.offsets[q + 1]])
    }

    /// Solves `C x = rhs` for a stacked vector.
    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        if rhs.len() != self.total_len() {
            return Err(MgcpError::DimensionMismatch {
                context: "stacked vector length",
                expected: self.total_len(),
                found: rhs.len(),
            });
        }
        Ok(match &self.factor {
            Factorization::Dense { chol, .. } => chol.solve(rhs),
            Factorization::Block { sources, maps, schur } => {
                let (us, ut) = self.split(rhs);
                let mut w = ut.to_vec();
                for (g, u) in maps.iter().zip(&us) {
                    for (wi, gi) in w.iter_mut().zip(g.transposed_matvec(u)) {
                        *wi -= gi;
                    }
                }
                let zt = schur.solve(&w);
                let mut out = Vec::with_capacity(rhs.len());
                for ((chol, g), u) in sources.iter().zip(maps).zip(&us) {
                    let zi = chol.solve(u);
                    let gz = g.matvec(&zt);
                    out.extend(zi.iter().zip(&gz).map(|(a, b)| *a - *b));
                }
                out.extend(zt);
                out
            }
        })
    }

    /// `log |C|`.
    pub fn log_det(&self) -> T {
        match &self.factor {
            Factorization::Dense { chol, .. } => chol.log_det(),
            Factorization::Block { sources, schur, .. } => {
                sources.iter().map(Cholesky::log_det).fold(T::zero(), |a, b| a + b) + schur.log_det()
            }
        }
    }
}

fn mean_diagonal<T: Real>(blocks: &[&Matrix<T>]) -> T {
    let (mut sum, mut n) = (T::zero(), 0usize);
    for b in blocks {
        for v in b.diagonal() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        T::one()
    } else {
        sum / T::of_usize(n)
    }
}

fn factor_blocks<T: Real>(
    source_blocks: &[Matrix<T>],
    cross_blocks: &[Matrix<T>],
    target_block: &Matrix<T>,
) -> Option<Factorization<T>> {
    let mut sources = Vec::with_capacity(source_blocks.len());
    let mut maps = Vec::with_capacity(source_blocks.len());
    let mut b = target_block.clone();
    for (cii, cit) in source_blocks.iter().zip(cross_blocks) {
        let chol = Cholesky::factor(cii).ok()?;
        let g = chol.solve_matrix(cit);
        b.sub_assign(&cit.transposed_matmul(&g));
        sources.push(chol);
        maps.push(g);
    }
    // Symmetrize against round-off before factoring B.
    let n = b.rows();
    for i in 0..n {
        for j in 0..i {
            let v = T::lit(0.5) * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    let schur = Cholesky::factor(&b).ok()?;
    Some(Factorization::Block { sources, maps, schur })
}

/// Builds `C` block by block (noise variances `σ_i²` on each output's own
/// diagonal, plus jitter) and factors it. The shared-latent variant also
/// fills the source/source blocks and is factored densely.
///
/// Factorization failures escalate the jitter ×10 up to
/// [`JITTER_ESCALATIONS`] times before reporting an indefinite covariance.
pub fn assemble_covariance<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    jitter: Jitter<T>,
) -> Result<CovarianceBundle<T>> {
    data.check_against(theta)?;
    let q = data.num_sources();
    let mut source_blocks: Vec<Matrix<T>> = (0..q).map(|i| assemble_block(data, theta, i, i, true)).collect();
    let cross_blocks: Vec<Matrix<T>> = (0..q).map(|i| assemble_block(data, theta, i, q, false)).collect();
    let mut target_block = assemble_block(data, theta, q, q, true);

    let mean_diag = {
        let mut all: Vec<&Matrix<T>> = source_blocks.iter().collect();
        all.push(&target_block);
        mean_diagonal(&all)
    };
    let base = match jitter {
        Jitter::Absolute(j) => j,
        Jitter::RelativeToMeanDiagonal(f) => f * mean_diag,
    };
    if !(base >= T::zero()) {
        return Err(MgcpError::config("jitter", "must be non-negative"));
    }
    let escalation_base = if base > T::zero() {
        base
    } else {
        T::lit(1e-10) * mean_diag.max(T::min_positive_value())
    };

    let offsets = data.offsets();
    let mut source_source: Vec<Vec<Matrix<T>>> = Vec::new();
    if theta.is_shared() {
        source_source = (0..q)
            .map(|i| (i + 1..q).map(|j| assemble_block(data, theta, i, j, false)).collect())
            .collect();
    }

    let mut applied = T::zero();
    let mut current = base;
    for attempt in 0..=JITTER_ESCALATIONS {
        if attempt > 0 {
            current = escalation_base * T::lit(10f64.powi(attempt as i32));
        }
        let delta = current - applied;
        for b in &mut source_blocks {
            b.add_diagonal(delta);
        }
        target_block.add_diagonal(delta);
        applied = current;

        let factor = if theta.is_shared() {
            let n = *offsets.last().expect("offsets");
            let mut full = Matrix::zeros(n, n);
            let t0 = offsets[q];
            for i in 0..q {
                full.set_block(offsets[i], offsets[i], &source_blocks[i]);
                full.set_block(offsets[i], t0, &cross_blocks[i]);
                full.set_block(t0, offsets[i], &cross_blocks[i].transpose());
                for (k, blk) in source_source[i].iter().enumerate() {
                    let j = i + 1 + k;
                    full.set_block(offsets[i], offsets[j], blk);
                    full.set_block(offsets[j], offsets[i], &blk.transpose());
                }
            }
            full.set_block(t0, t0, &target_block);
            Cholesky::factor(&full).ok().map(|chol| Factorization::Dense { full, chol })
        } else {
            factor_blocks(&source_blocks, &cross_blocks, &target_block)
        };
        if let Some(factor) = factor {
            return Ok(CovarianceBundle {
                theta: theta.clone(),
                offsets,
                source_blocks,
                cross_blocks,
                target_block,
                jitter: applied,
                factor,
            });
        }
    }
    Err(MgcpError::IndefiniteCovariance {
        attempts: JITTER_ESCALATIONS,
        jitter: applied.to_f64_lossy(),
    })
}

/// Gaussian log-density `L(θ|y)` evaluated through the block factors:
///
/// `-½[ỹᵀΩ_ss⁻¹ỹ + (Aỹ−y_t)ᵀB⁻¹(Aỹ−y_t)] − ½[log|Ω_ss| + log|B|] − (N/2) log 2π`
/// with `A = Ω_stᵀ Ω_ss⁻¹`. The shared variant falls back to the dense factor.
pub fn log_likelihood_schur<T: Real>(bundle: &CovarianceBundle<T>, y: &[T]) -> Result<T> {
    let n = bundle.total_len();
    if y.len() != n {
        return Err(MgcpError::DimensionMismatch {
            context: "stacked responses",
            expected: n,
            found: y.len(),
        });
    }
    let half = T::lit(0.5);
    let norm = T::of_usize(n) * half * (T::lit(2.0) * T::PI()).ln();
    let quad = match &bundle.factor {
        Factorization::Dense { chol, .. } => chol.quad_form(y),
        Factorization::Block { sources, maps, schur } => {
            let (ys, yt) = bundle.split(y);
            let mut quad = T::zero();
            let mut e: Vec<T> = yt.iter().map(|v| -*v).collect();
            for ((chol, g), yi) in sources.iter().zip(maps).zip(&ys) {
                quad += chol.quad_form(yi);
                for (ej, gj) in e.iter_mut().zip(g.transposed_matvec(yi)) {
                    *ej += gj;
                }
            }
            quad + schur.quad_form(&e)
        }
    };
    Ok(-half * quad - half * bundle.log_det() - norm)
}

/// Log-density of `N(0, C)` from a dense Cholesky of `C`.
pub fn dense_log_likelihood<T: Real>(c: &Matrix<T>, y: &[T]) -> Result<T> {
    if c.rows() != y.len() {
        return Err(MgcpError::DimensionMismatch {
            context: "dense covariance vs responses",
            expected: c.rows(),
            found: y.len(),
        });
    }
    let chol = Cholesky::factor(c).map_err(|_| MgcpError::IndefiniteCovariance {
        attempts: 0,
        jitter: 0.0,
    })?;
    let half = T::lit(0.5);
    let norm = T::of_usize(y.len()) * half * (T::lit(2.0) * T::PI()).ln();
    Ok(-half * chol.quad_form(y) - half * chol.log_det() - norm)
}

/// Posterior of the target at `query` (rows are points):
/// `μ = K*ᵀ C⁻¹ y`, `V = cov_tt(x*, x*) − K*ᵀ C⁻¹ K*`, with `σ_t²` added
/// when `include_noise`. Small negative variances from round-off are
/// clipped to zero.
pub fn predict<T: Real>(
    bundle: &CovarianceBundle<T>,
    data: &TransferData<T>,
    query: &Matrix<T>,
    include_noise: bool,
) -> Result<PredictiveDistribution<T>> {
    let theta = &bundle.theta;
    data.check_against(theta)?;
    if query.cols() != data.dim() {
        return Err(MgcpError::DimensionMismatch {
            context: "query point dimension",
            expected: data.dim(),
            found: query.cols(),
        });
    }
    if data.total_len() != bundle.total_len() {
        return Err(MgcpError::DimensionMismatch {
            context: "bundle vs data size",
            expected: bundle.total_len(),
            found: data.total_len(),
        });
    }
    let q = data.num_sources();
    let a = bundle.solve(&data.stacked_responses())?;
    let cross_terms: Vec<Vec<Term<T>>> = (0..q).map(|i| block_terms(theta, i, q)).collect();
    let tt_terms = block_terms(theta, q, q);
    let noise = noise_variance(theta, q);

    let mut mean = Vec::with_capacity(query.rows());
    let mut variance = Vec::with_capacity(query.rows());
    for m in 0..query.rows() {
        let xs = query.row(m);
        let mut k = Vec::with_capacity(bundle.total_len());
        for (i, terms) in cross_terms.iter().enumerate() {
            let xi = data.sources[i].inputs();
            k.extend((0..xi.rows()).map(|r| terms_value(terms, xi.row(r), xs)));
        }
        let xt = data.target.inputs();
        k.extend((0..xt.rows()).map(|r| terms_value(&tt_terms, xt.row(r), xs)));

        let prior = terms_value(&tt_terms, xs, xs);
        let reduction = match &bundle.factor {
            Factorization::Dense { chol, .. } => norm_sq(&chol.solve_lower(&k)),
            Factorization::Block { sources, maps, schur } => {
                let (ks, kt) = bundle.split(&k);
                let mut w = kt.to_vec();
                let mut acc = T::zero();
                for ((chol, g), ki) in sources.iter().zip(maps).zip(&ks) {
                    acc += norm_sq(&chol.solve_lower(ki));
                    for (wj, gj) in w.iter_mut().zip(g.transposed_matvec(ki)) {
                        *wj -= gj;
                    }
                }
                acc + norm_sq(&schur.solve_lower(&w))
            }
        };
        mean.push(dot(&k, &a));
        let mut v = prior - reduction;
        if v < T::zero() {
            v = T::zero();
        }
        if include_noise {
            v += noise;
        }
        variance.push(v);
    }
    Ok(PredictiveDistribution {
        mean,
        variance,
        includes_noise: include_noise,
    })
}

/// Drops the listed sources (and their kernels) from the model. With every
/// transfer scale in `drop` equal to zero the reduced model predicts the
/// target exactly as the full one does.
pub fn marginalize_sources<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    drop: &[usize],
) -> Result<(TransferData<T>, Hyperparameters<T>)> {
    let q = data.num_sources();
    if let Some(&bad) = drop.iter().find(|&&i| i >= q) {
        return Err(MgcpError::DimensionMismatch {
            context: "dropped source index",
            expected: q,
            found: bad,
        });
    }
    let keep: Vec<usize> = (0..q).filter(|i| !drop.contains(i)).collect();
    Ok((data.keep_sources(&keep)?, theta.without_sources(drop)))
}

// --- gradient ---------------------------------------------------------------

fn outer_minus<T: Real>(a: &[T], b: &[T], w: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j] - w[(i, j)])
}

/// Accumulates `½ · mult · Σ_ab M_ab ∂C_ab/∂θ` for the block `(p, r)`.
fn accumulate_block_grad<T: Real>(
    data: &TransferData<T>,
    theta: &Hyperparameters<T>,
    p: usize,
    r: usize,
    m: &Matrix<T>,
    grad: &mut [T],
) {
    let terms = block_terms(theta, p, r);
    let klen = theta.dim() + 1;
    let mult = if p == r { T::lit(0.5) } else { T::one() };
    let (xp, xr) = (data.output(p).inputs(), data.output(r).inputs());
    let mut acc: Vec<(Vec<T>, Vec<T>)> = terms.iter().map(|_| (vec![T::zero(); klen], vec![T::zero(); klen])).collect();
    for a in 0..xp.rows() {
        let x = xp.row(a);
        let mrow = m.row(a);
        for b in 0..xr.rows() {
            let w = mult * mrow[b];
            if w == T::zero() {
                continue;
            }
            let y = xr.row(b);
            for (t, (g1, g2)) in terms.iter().zip(acc.iter_mut()) {
                match t {
                    Term::Auto(at, _) => at.accumulate_grad(x, y, w, g1),
                    Term::Cross(ct, _, _) => ct.accumulate_grad(x, y, w, g1, g2),
                }
            }
        }
    }
    for (t, (g1, g2)) in terms.iter().zip(&acc) {
        match t {
            Term::Auto(_, o) => {
                for (dst, v) in grad[*o..*o + klen].iter_mut().zip(g1) {
                    *dst += *v;
                }
            }
            Term::Cross(_, o1, o2) => {
                for (dst, v) in grad[*o1..*o1 + klen].iter_mut().zip(g1) {
                    *dst += *v;
                }
                for (dst, v) in grad[*o2..*o2 + klen].iter_mut().zip(g2) {
                    *dst += *v;
                }
            }
        }
    }
    if p == r {
        // ∂(σ²)/∂log σ = 2σ² on the diagonal.
        let layout = theta.layout();
        let idx = if p < layout.sources {
            layout.source_noise(p)
        } else {
            layout.target_noise()
        };
        let s2 = noise_variance(theta, p);
        let trace: T = m.diagonal().into_iter().sum();
        grad[idx] += T::lit(0.5) * T::lit(2.0) * s2 * trace;
    }
}

/// Log-likelihood and its gradient with respect to the flat parameter
/// vector, using `∂L/∂θ = ½ aᵀ ∂C a − ½ tr(C⁻¹ ∂C)` with `a = C⁻¹ y`.
///
/// Blocks of `C⁻¹` come from the partitioned inverse
/// `W_tt = B⁻¹`, `W_it = −G_i B⁻¹`, `W_ii = C_ii⁻¹ + G_i B⁻¹ G_iᵀ`, so only
/// the blocks a parameter touches are ever formed. Jitter is treated as a
/// constant.
pub fn log_likelihood_with_gradient<T: Real>(
    bundle: &CovarianceBundle<T>,
    data: &TransferData<T>,
) -> Result<(T, Vec<T>)> {
    let theta = &bundle.theta;
    data.check_against(theta)?;
    let y = data.stacked_responses();
    let value = log_likelihood_schur(bundle, &y)?;
    let a = bundle.solve(&y)?;
    let layout = theta.layout();
    let q = layout.sources;
    let mut grad = vec![T::zero(); layout.len()];
    let (as_, at) = bundle.split(&a);

    match &bundle.factor {
        Factorization::Block { sources, maps, schur } => {
            let binv = schur.inverse();
            let mtt = outer_minus(at, at, &binv);
            accumulate_block_grad(data, theta, q, q, &mtt, &mut grad);
            for i in 0..q {
                let h = maps[i].matmul(&binv); // G_i B⁻¹
                let mut wit = h.clone();
                wit.scale(-T::one());
                let mit = outer_minus(as_[i], at, &wit);
                accumulate_block_grad(data, theta, i, q, &mit, &mut grad);
                let cinv = sources[i].inverse();
                let corr = h.matmul_transposed(&maps[i]);
                let wii = Matrix::from_fn(cinv.rows(), cinv.cols(), |r, s| cinv[(r, s)] + corr[(r, s)]);
                let mii = outer_minus(as_[i], as_[i], &wii);
                accumulate_block_grad(data, theta, i, i, &mii, &mut grad);
            }
        }
        Factorization::Dense { chol, .. } => {
            let w = chol.inverse();
            let off = &bundle.offsets;
            let n_of = |p: usize| off[p + 1] - off[p];
            for p in 0..=q {
                for r in p..=q {
                    let wb = w.block(off[p], off[r], n_of(p), n_of(r));
                    let m = outer_minus(&a[off[p]..off[p + 1]], &a[off[r]..off[r + 1]], &wb);
                    accumulate_block_grad(data, theta, p, r, &m, &mut grad);
                }
            }
        }
    }
    Ok((value, grad))
}
