//! Base (`W0`) and layered (`W`) latent codes, and the PCA subspace that
//! learned directions are restricted to.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// A point in the base latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode0(pub Vec<f64>);

impl LatentCode0 {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent code has non-finite entries".into()));
        }
        Ok(LatentCode0(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A layered latent code: one base-space row per synthesis layer, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodeExt {
    layers: usize,
    dim: usize,
    values: Vec<f64>,
}

impl LatentCodeExt {
    pub fn from_rows(layers: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("layered code needs at least one layer".into()));
        }
        if values.len() != layers * dim {
            return Err(Error::InvalidArgument(format!(
                "layered code of {layers}x{dim} given {} values",
                values.len()
            )));
        }
        Ok(LatentCodeExt { layers, dim, values })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.dim..(layer + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Duplicates a base code across `layers` rows.
pub fn broadcast(w0: &LatentCode0, layers: usize) -> LatentCodeExt {
    assert!(layers >= 1, "broadcast needs at least one layer");
    let values = w0.0.iter().copied().cycle().take(layers * w0.dim()).collect();
    LatentCodeExt {
        layers,
        dim: w0.dim(),
        values,
    }
}

/// Eigen-decomposition of the sample covariance of base codes.
///
/// `components` is stored row-major as an `n x n` matrix whose columns are the
/// eigenvectors, ordered by decreasing eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub dim: usize,
    pub components: Vec<f32>,
    pub eigenvalues: Vec<f32>,
    pub mean: Vec<f32>,
    pub sample_count: usize,
}

impl PcaBasis {
    /// Column `j` (the `j`-th principal component).
    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.components[i * self.dim + j] as f64)
            .collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().map(|&v| v as f64).sum()
    }

    /// Fraction of variance carried by the first `k` components.
    pub fn explained_variance(&self, k: usize) -> f64 {
        let top: f64 = self.eigenvalues[..k.min(self.dim)].iter().map(|&v| v as f64).sum();
        top / self.total_variance()
    }

    /// The first `k` columns as an `n x k` row-major matrix.
    pub fn top_k(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * k);
        for i in 0..self.dim {
            out.extend(self.components[i * self.dim..i * self.dim + k].iter().map(|&v| v as f64));
        }
        out
    }
}

/// Exact PCA of the given samples.
pub fn compute_pca(samples: &[LatentCode0]) -> Result<PcaBasis> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples[0].dim();
    if n == 0 {
        return Err(Error::InvalidArgument("PCA on zero-dimensional codes".into()));
    }
    let mut mean = vec![0.0; n];
    for s in samples {
        if s.dim() != n {
            return Err(Error::InvalidArgument(format!(
                "PCA samples disagree in dimension ({} vs {n})",
                s.dim()
            )));
        }
        if s.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("PCA sample has non-finite entries".into()));
        }
        for (m, &v) in mean.iter_mut().zip(&s.0) {
            *m += v;
        }
    }
    let count = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);

    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mut centered = vec![0.0; n];
    for s in samples {
        for (c, (&v, &m)) in centered.iter_mut().zip(s.0.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / (count - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut components = vec![0f32; n * n];
    let mut eigenvalues = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        // Canonical sign: the largest-magnitude entry is positive.
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            components[i * n + col] = (sign * v[i]) as f32;
        }
        eigenvalues.push(eig.eigenvalues[src].max(0.0) as f32);
    }
    Ok(PcaBasis {
        dim: n,
        components,
        eigenvalues,
        mean: mean.into_iter().map(|m| m as f32).collect(),
        sample_count: samples.len(),
    })
}

/// Maps subspace coefficients to a base-space direction of the given length:
/// `length * V[:, :k] c / |V[:, :k] c|`.
pub fn project_direction(coeffs: &[f64], basis: &PcaBasis, k: usize, length: f64) -> Result<Vec<f64>> {
    if k == 0 || k > basis.dim {
        return Err(Error::InvalidArgument(format!(
            "subspace size {k} outside 1..={}",
            basis.dim
        )));
    }
    if coeffs.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} subspace coefficients, got {}",
            coeffs.len()
        )));
    }
    if !(length > 0.0) {
        return Err(Error::InvalidArgument("direction length must be positive".into()));
    }
    let top = basis.top_k(k);
    let raw: Vec<f64> = top
        .chunks_exact(k)
        .map(|row| row.iter().zip(coeffs).map(|(a, b)| a * b).sum())
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidArgument(
            "subspace coefficients project to a zero vector".into(),
        ));
    }
    Ok(raw.into_iter().map(|v| v * length / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(v: &[f64]) -> LatentCode0 {
        LatentCode0::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_axis_data_gives_that_axis() {
        // Sample variance along e3 is exactly 4, all other axes are constant.
        let a = 2f64.sqrt();
        let samples = vec![code(&[1.0, 0.0, -a, 0.0]), code(&[1.0, 0.0, a, 0.0])];
        let basis = compute_pca(&samples).unwrap();
        let first = basis.component(0);
        assert_eq!(first, vec![0.0, 0.0, 1.0, 0.0]);
        assert!((basis.eigenvalues[0] - 4.0).abs() < 1e-6);
        assert!(basis.eigenvalues[1..].iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn sign_canonicalized_even_for_negative_data() {
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let t = i as f64 - 4.5;
                code(&[-0.9 * t, 0.3 * t, 0.1])
            })
            .collect();
        let basis = compute_pca(&samples).unwrap();
        for j in 0..3 {
            let c = basis.component(j);
            let pivot = c
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0, "column {j} = {c:?}");
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(compute_pca(&[code(&[1.0, 2.0])]).is_err());
        let bad = vec![code(&[1.0]), LatentCode0(vec![f64::NAN])];
        assert!(compute_pca(&bad).is_err());
        assert!(LatentCode0::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn project_unit_coeff_returns_component() {
        let samples: Vec<_> = (0..20)
            .map(|i| {
                let t = (i as f64 * 0.7).sin();
                let u = (i as f64 * 1.3).cos();
                code(&[t + 0.2 * u, u, 0.5 * t - u])
            })
            .collect();
        let basis = compute_pca(&samples).unwrap();
        let d = project_direction(&[1.0, 0.0], &basis, 2, 1.0).unwrap();
        let c0 = basis.component(0);
        for (a, b) in d.iter().zip(&c0) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn project_errors() {
        let samples = vec![code(&[1.0, 0.0]), code(&[0.0, 1.0]), code(&[0.5, 0.2])];
        let basis = compute_pca(&samples).unwrap();
        assert!(project_direction(&[0.0, 0.0], &basis, 2, 1.0).is_err());
        assert!(project_direction(&[1.0, 0.0, 0.0], &basis, 3, 1.0).is_err());
        assert!(project_direction(&[], &basis, 0, 1.0).is_err());
        assert!(project_direction(&[1.0], &basis, 1, 0.0).is_err());
    }

    #[test]
    fn broadcast_rows() {
        let w = broadcast(&code(&[1.0, 2.0]), 3);
        assert_eq!(w.as_slice(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        for l in 0..3 {
            assert_eq!(w.row(l), &[1.0, 2.0]);
            let diff: Vec<f64> = w.row(l).iter().zip(w.row(0)).map(|(a, b)| a - b).collect();
            assert!(diff.iter().all(|&d| d == 0.0));
        }
    }

    fn random_basis(seed: u64, n: usize) -> PcaBasis {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let samples: Vec<_> = (0..40)
            .map(|_| LatentCode0((0..n).map(|j| next() * (j + 1) as f64).collect()))
            .collect();
        compute_pca(&samples).unwrap()
    }

    proptest! {
        #[test]
        fn components_orthonormal_and_sorted(seed in 0u64..500) {
            let b = random_basis(seed, 6);
            for i in 0..6 {
                for j in 0..6 {
                    let d: f64 = (0..6).map(|r| b.components[r * 6 + i] as f64 * b.components[r * 6 + j] as f64).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() < 1e-5);
                }
            }
            prop_assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn projection_has_length_and_stays_in_subspace(
            seed in 0u64..500,
            coeffs in proptest::collection::vec(-3.0f64..3.0, 3),
            length in 0.1f64..5.0,
        ) {
            prop_assume!(coeffs.iter().map(|c| c * c).sum::<f64>() > 1e-6);
            let b = random_basis(seed, 6);
            let d = project_direction(&coeffs, &b, 3, length).unwrap();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - length).abs() < 1e-6 * length.max(1.0));
            // Independent oracle: re-project onto the first three columns and
            // measure the residual.
            let mut recon = vec![0.0; 6];
            for j in 0..3 {
                let col = b.component(j);
                let c: f64 = col.iter().zip(&d).map(|(a, b)| a * b).sum();
                for (r, v) in recon.iter_mut().zip(&col) {
                    *r += c * v;
                }
            }
            let resid = recon.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(resid < 1e-6 * length.max(1.0));
        }
    }

    #[test]
    fn total_variance_matches_trace() {
        let b = random_basis(7, 5);
        // trace of the covariance computed independently
        let mut state = 7u64.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let samples: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|j| next() * (j + 1) as f64).collect()).collect();
        let mut trace = 0.0;
        for j in 0..5 {
            let m: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / 40.0;
            trace += samples.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / 39.0;
        }
        assert!((b.total_variance() - trace).abs() / trace < 1e-4);
    }

    #[test]
    fn deterministic() {
        assert_eq!(random_basis(3, 5), random_basis(3, 5));
    }
}
