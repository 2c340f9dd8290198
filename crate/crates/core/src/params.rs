//! Hyperparameters of the multi-output model and their flat layout for the
//! optimizer.
//!
//! Flat order: for each source `[α_ii, logΛ_ii.., α_it, logΛ_it.., logσ_i]`,
//! then the target `[α_tt, logΛ_tt.., logσ_t]`, then (shared-latent variant
//! only) each source's shared kernel `[α_0i, logΛ_0i..]` followed by the
//! target's shared kernel `[α_0t, logΛ_0t..]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MgcpError, Result};
use crate::kernels::KernelParams;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParams<T> {
    /// `g_ii`: links latent process `Z_i` to source `i`.
    pub source_kernel: KernelParams<T>,
    /// `g_it`: links latent process `Z_i` to the target.
    pub transfer_kernel: KernelParams<T>,
    pub log_sigma: T,
}

/// Kernels on the latent process shared by all outputs (full-covariance
/// variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedKernels<T> {
    pub sources: Vec<KernelParams<T>>,
    pub target: KernelParams<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters<T> {
    pub sources: Vec<SourceParams<T>>,
    pub target_kernel: KernelParams<T>,
    pub target_log_sigma: T,
    pub shared: Option<SharedKernels<T>>,
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub sources: usize,
    pub dim: usize,
    pub shared: bool,
}

impl ParamLayout {
    pub fn new(sources: usize, dim: usize, shared: bool) -> Self {
        Self { sources, dim, shared }
    }

    /// Parameters in one kernel block (scale plus length-scales).
    #[inline]
    pub fn kernel_len(&self) -> usize {
        self.dim + 1
    }

    #[inline]
    fn source_stride(&self) -> usize {
        2 * self.kernel_len() + 1
    }

    pub fn source_kernel(&self, i: usize) -> usize {
        i * self.source_stride()
    }

    pub fn transfer_kernel(&self, i: usize) -> usize {
        i * self.source_stride() + self.kernel_len()
    }

    pub fn source_noise(&self, i: usize) -> usize {
        i * self.source_stride() + 2 * self.kernel_len()
    }

    pub fn target_kernel(&self) -> usize {
        self.sources * self.source_stride()
    }

    pub fn target_noise(&self) -> usize {
        self.target_kernel() + self.kernel_len()
    }

    fn shared_base(&self) -> usize {
        self.target_noise() + 1
    }

    pub fn shared_source_kernel(&self, i: usize) -> usize {
        debug_assert!(self.shared);
        self.shared_base() + i * self.kernel_len()
    }

    pub fn shared_target_kernel(&self) -> usize {
        debug_assert!(self.shared);
        self.shared_base() + self.sources * self.kernel_len()
    }

    pub fn len(&self) -> usize {
        let base = self.shared_base();
        if self.shared {
            base + (self.sources + 1) * self.kernel_len()
        } else {
            base
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of each transfer scale `α_it`, the sparsity subset.
    pub fn transfer_alpha_indices(&self) -> Vec<usize> {
        (0..self.sources).map(|i| self.transfer_kernel(i)).collect()
    }

    /// Index of each shared source scale `α_0i` (shared variant only).
    pub fn shared_alpha_indices(&self) -> Vec<usize> {
        if !self.shared {
            return Vec::new();
        }
        (0..self.sources).map(|i| self.shared_source_kernel(i)).collect()
    }

    /// Whether flat index `idx` holds a scale parameter (sign-free, not
    /// log-transformed).
    pub fn is_scale(&self, idx: usize) -> bool {
        let scales = self.scale_indices();
        scales.contains(&idx)
    }

    pub fn scale_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..self.sources {
            out.push(self.source_kernel(i));
            out.push(self.transfer_kernel(i));
        }
        out.push(self.target_kernel());
        if self.shared {
            for i in 0..self.sources {
                out.push(self.shared_source_kernel(i));
            }
            out.push(self.shared_target_kernel());
        }
        out
    }
}

fn push_kernel<T: Real>(out: &mut Vec<T>, k: &KernelParams<T>) {
    out.push(k.alpha);
    out.extend_from_slice(&k.log_lambda);
}

fn read_kernel<T: Real>(flat: &[T], at: usize, dim: usize) -> KernelParams<T> {
    KernelParams::new(flat[at], flat[at + 1..at + 1 + dim].to_vec())
}

impl<T: Real> Hyperparameters<T> {
    pub fn dim(&self) -> usize {
        self.target_kernel.dim()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.sources.len(), self.dim(), self.shared.is_some())
    }

    pub fn is_shared(&self) -> bool {
        self.shared.is_some()
    }

    /// Checks that every kernel has dimension `dim` and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let mut kernels: Vec<&KernelParams<T>> = vec![&self.target_kernel];
        for s in &self.sources {
            kernels.push(&s.source_kernel);
            kernels.push(&s.transfer_kernel);
            if !s.log_sigma.is_finite() {
                return Err(MgcpError::InvalidData("non-finite source noise".into()));
            }
        }
        if let Some(sh) = &self.shared {
            if sh.sources.len() != self.sources.len() {
                return Err(MgcpError::DimensionMismatch {
                    context: "shared kernels per source",
                    expected: self.sources.len(),
                    found: sh.sources.len(),
                });
            }
            kernels.extend(sh.sources.iter());
            kernels.push(&sh.target);
        }
        for k in kernels {
            if k.dim() != d {
                return Err(MgcpError::DimensionMismatch {
                    context: "kernel length-scale dimension",
                    expected: d,
                    found: k.dim(),
                });
            }
            if !k.is_valid() {
                return Err(MgcpError::InvalidData("non-finite kernel parameter".into()));
            }
        }
        if !self.target_log_sigma.is_finite() {
            return Err(MgcpError::InvalidData("non-finite target noise".into()));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<T> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.len());
        for s in &self.sources {
            push_kernel(&mut out, &s.source_kernel);
            push_kernel(&mut out, &s.transfer_kernel);
            out.push(s.log_sigma);
        }
        push_kernel(&mut out, &self.target_kernel);
        out.push(self.target_log_sigma);
        if let Some(sh) = &self.shared {
            for k in &sh.sources {
                push_kernel(&mut out, k);
            }
            push_kernel(&mut out, &sh.target);
        }
        debug_assert_eq!(out.len(), layout.len());
        out
    }

    pub fn from_flat(layout: ParamLayout, flat: &[T]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(MgcpError::DimensionMismatch {
                context: "flat hyperparameter vector",
                expected: layout.len(),
                found: flat.len(),
            });
        }
        let d = layout.dim;
        let sources = (0..layout.sources)
            .map(|i| SourceParams {
                source_kernel: read_kernel(flat, layout.source_kernel(i), d),
                transfer_kernel: read_kernel(flat, layout.transfer_kernel(i), d),
                log_sigma: flat[layout.source_noise(i)],
            })
            .collect();
        let shared = layout.shared.then(|| SharedKernels {
            sources: (0..layout.sources)
                .map(|i| read_kernel(flat, layout.shared_source_kernel(i), d))
                .collect(),
            target: read_kernel(flat, layout.shared_target_kernel(), d),
        });
        Ok(Self {
            sources,
            target_kernel: read_kernel(flat, layout.target_kernel(), d),
            target_log_sigma: flat[layout.target_noise()],
            shared,
        })
    }

    /// Transfer scales `α_it` in source order.
    pub fn transfer_alphas(&self) -> Vec<T> {
        self.sources.iter().map(|s| s.transfer_kernel.alpha).collect()
    }

    pub fn target_sigma(&self) -> T {
        self.target_log_sigma.exp()
    }

    /// Random start: scales, noise deviations and length-scales drawn
    /// uniformly from `[0, 1]`. Logs are floored at `ln(1e-3)`.
    pub fn random<R: Rng + ?Sized>(layout: ParamLayout, rng: &mut R) -> Self {
        let floor = 1e-3;
        let mut flat = Vec::with_capacity(layout.len());
        let scales = layout.scale_indices();
        for idx in 0..layout.len() {
            let u: f64 = rng.gen_range(0.0..1.0);
            let v = if scales.contains(&idx) {
                u
            } else {
                u.max(floor).ln()
            };
            flat.push(T::lit(v));
        }
        Self::from_flat(layout, &flat).expect("layout length")
    }

    /// Removes the listed sources and their kernels.
    pub fn without_sources(&self, drop: &[usize]) -> Self {
        let keep = |i: &usize| !drop.contains(i);
        let sources = (0..self.sources.len())
            .filter(keep)
            .map(|i| self.sources[i].clone())
            .collect();
        let shared = self.shared.as_ref().map(|sh| SharedKernels {
            sources: (0..sh.sources.len())
                .filter(keep)
                .map(|i| sh.sources[i].clone())
                .collect(),
            target: sh.target.clone(),
        });
        Self {
            sources,
            target_kernel: self.target_kernel.clone(),
            target_log_sigma: self.target_log_sigma,
            shared,
        }
    }

    pub fn cast<U: Real>(&self) -> Hyperparameters<U> {
        let flat: Vec<U> = self.to_flat().iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        Hyperparameters::from_flat(self.layout(), &flat).expect("same layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_indices_cover_vector() {
        for shared in [false, true] {
            let l = ParamLayout::new(3, 2, shared);
            let mut seen = vec![0usize; l.len()];
            let mut mark = |at: usize, len: usize| {
                for s in &mut seen[at..at + len] {
                    *s += 1;
                }
            };
            for i in 0..3 {
                mark(l.source_kernel(i), 3);
                mark(l.transfer_kernel(i), 3);
                mark(l.source_noise(i), 1);
            }
            mark(l.target_kernel(), 3);
            mark(l.target_noise(), 1);
            if shared {
                for i in 0..3 {
                    mark(l.shared_source_kernel(i), 3);
                }
                mark(l.shared_target_kernel(), 3);
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
        assert_eq!(ParamLayout::new(4, 1, false).transfer_alpha_indices(), vec![2, 7, 12, 17]);
    }

    proptest! {
        #[test]
        fn flat_roundtrip(q in 0usize..5, d in 1usize..4, shared: bool, seed: u64) {
            let layout = ParamLayout::new(q, d, shared);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = Hyperparameters::<f64>::random(layout, &mut rng);
            let flat = theta.to_flat();
            let back = Hyperparameters::from_flat(layout, &flat).unwrap();
            prop_assert_eq!(&back, &theta);
            prop_assert_eq!(back.to_flat(), flat);
            prop_assert!(theta.validate().is_ok());
        }
    }

    #[test]
    fn random_start_in_unit_interval() {
        let layout = ParamLayout::new(2, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Hyperparameters::<f64>::random(layout, &mut rng);
        for s in &t.sources {
            assert!((0.0..1.0).contains(&s.source_kernel.alpha));
            assert!(s.log_sigma <= 0.0 && s.log_sigma >= (1e-3f64).ln());
        }
    }

    #[test]
    fn dropping_sources() {
        let layout = ParamLayout::new(3, 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Hyperparameters::<f64>::random(layout, &mut rng);
        let r = t.without_sources(&[0, 2]);
        assert_eq!(r.sources.len(), 1);
        assert_eq!(r.sources[0], t.sources[1]);
        assert_eq!(r.shared.as_ref().unwrap().sources[0], t.shared.as_ref().unwrap().sources[1]);
    }
}
