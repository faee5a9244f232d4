//! Gaussian latent algebra: projecting native D-dimensional diagonal
//! Gaussians onto a frozen k-dimensional principal subspace, KL divergence
//! and sampling there, and reprojection of compact samples back to R^D.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_psd, Matrix};

/// Orthonormality tolerance for a projection basis.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-5;

/// Diagonal Gaussian in the native latent space, parameterized by log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianD {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianD {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::shape(
                "GaussianD",
                format!(
                    "mean has {} entries, log-variance {}",
                    mu.len(),
                    log_var.len()
                ),
            ));
        }
        if !mu.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("GaussianD parameters".into()));
        }
        Ok(Self { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

/// Full-covariance Gaussian in the compact subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianK {
    pub mu: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianK {
    pub fn new(mu: Vec<f64>, cov: Matrix) -> Result<Self> {
        if !cov.is_square() || cov.rows() != mu.len() {
            return Err(Error::shape(
                "GaussianK",
                format!(
                    "mean of length {} with {}x{} covariance",
                    mu.len(),
                    cov.rows(),
                    cov.cols()
                ),
            ));
        }
        Ok(Self { mu, cov })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Frozen affine map between R^D and the top-k principal subspace: a mean
/// `m` and a D×k basis with orthonormal columns. No mutating methods exist;
/// share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    mean: Vec<f64>,
    basis: Matrix,
}

impl Projection {
    pub fn new(mean: Vec<f64>, basis: Matrix) -> Result<Self> {
        let (d, k) = (basis.rows(), basis.cols());
        if mean.len() != d {
            return Err(Error::shape(
                "Projection",
                format!("mean of length {} for a {d}x{k} basis", mean.len()),
            ));
        }
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!(
                "projection rank k={k} must lie in [1, {d}]"
            )));
        }
        if !basis.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection".into()));
        }
        let p = Self { mean, basis };
        let err = p.orthonormality_error();
        if err > ORTHONORMALITY_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (‖UᵀU − I‖max = {err:e})"
            )));
        }
        Ok(p)
    }

    /// `m = 0`, `U = I_D`: the native space itself.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            basis: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// D×k, columns are the principal directions.
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn is_identity(&self) -> bool {
        self.k() == self.dim()
            && self.mean.iter().all(|&v| v == 0.0)
            && self.basis == Matrix::identity(self.dim())
    }

    /// `‖UᵀU − I_k‖max`
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self
            .basis
            .transpose()
            .matmul(&self.basis)
            .expect("conformable");
        gram.max_abs_diff(&Matrix::identity(self.k()))
    }
}

/// A compact draw and, once reprojected, its native-space image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_k: Vec<f64>,
    pub z_tilde: Option<Vec<f64>>,
}

impl LatentSample {
    pub fn reproject(mut self, p: &Projection) -> Result<Self> {
        self.z_tilde = Some(inverse_reproject(&self.z_k, p)?);
        Ok(self)
    }
}

/// `μ_k = Uᵀ(μ − m)`, `Σ_k = Uᵀ diag(exp(log_var)) U`. Prior and posterior
/// must go through the same `Projection`.
pub fn project_gaussian(g: &GaussianD, p: &Projection) -> Result<GaussianK> {
    if g.dim() != p.dim() {
        return Err(Error::shape(
            "project_gaussian",
            format!(
                "Gaussian in R^{} with projection from R^{}",
                g.dim(),
                p.dim()
            ),
        ));
    }
    let u = p.basis();
    let centred: Vec<f64> = g.mu.iter().zip(p.mean()).map(|(a, b)| a - b).collect();
    let mu = u.tr_mat_vec(&centred)?;
    let var = g.variances();
    let k = p.k();
    let mut cov = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v: f64 = (0..p.dim()).map(|d| u[(d, a)] * var[d] * u[(d, b)]).sum();
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    GaussianK::new(mu, cov)
}

/// Closed-form KL(q ‖ p) between full-covariance Gaussians via Cholesky
/// factors of both covariances (jitter ladder applied).
pub fn kl_compact(q: &GaussianK, p: &GaussianK) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape(
            "kl_compact",
            format!("q in R^{}, p in R^{}", q.dim(), p.dim()),
        ));
    }
    let k = q.dim();
    let lq = cholesky(&q.cov)?;
    let lp = cholesky(&p.cov)?;
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖_F²
    let mut trace = 0.0;
    for c in 0..k {
        let col = lq.factor().column(c);
        trace += lp.solve_lower(&col).iter().map(|v| v * v).sum::<f64>();
    }
    let delta: Vec<f64> = p.mu.iter().zip(&q.mu).map(|(a, b)| a - b).collect();
    let maha: f64 = lp.solve_lower(&delta).iter().map(|v| v * v).sum();
    Ok(0.5 * (trace + maha - k as f64 + lp.log_det() - lq.log_det()))
}

/// `z_k = μ + L·noise`.
pub fn sample_compact(g: &GaussianK, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != g.dim() {
        return Err(Error::shape(
            "sample_compact",
            format!("noise of length {} for R^{}", noise.len(), g.dim()),
        ));
    }
    let chol = cholesky_psd(&g.cov)?;
    let z_k = chol
        .apply(noise)
        .iter()
        .zip(&g.mu)
        .map(|(a, b)| a + b)
        .collect();
    Ok(LatentSample { z_k, z_tilde: None })
}

/// `z̃ = U z_k + m`.
pub fn inverse_reproject(z_k: &[f64], p: &Projection) -> Result<Vec<f64>> {
    if z_k.len() != p.k() {
        return Err(Error::shape(
            "inverse_reproject",
            format!("z_k of length {} with k={}", z_k.len(), p.k()),
        ));
    }
    let uz = p.basis().mat_vec(z_k)?;
    Ok(uz.iter().zip(p.mean()).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Full-space KL between diagonal Gaussians, written out term by term.
    pub(crate) fn kl_diag_fullspace(q: &GaussianD, p: &GaussianD) -> f64 {
        let mut total = 0.0;
        for i in 0..q.dim() {
            let var_q = q.log_var[i].exp();
            let var_p = p.log_var[i].exp();
            let diff = q.mu[i] - p.mu[i];
            total += (var_p / var_q).ln() + (var_q + diff * diff) / var_p - 1.0;
        }
        0.5 * total
    }

    /// Random orthonormal D×k basis via Gram–Schmidt on Gaussian columns.
    pub(crate) fn random_projection(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Projection {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut basis = Matrix::zeros(d, k);
        for (c, col) in cols.iter().enumerate() {
            for r in 0..d {
                basis[(r, c)] = col[r];
            }
        }
        let mean = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        Projection::new(mean, basis).unwrap()
    }

    fn random_gaussian_d(d: usize, rng: &mut ChaCha8Rng) -> GaussianD {
        let mu = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let lv = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        GaussianD::new(mu, lv).unwrap()
    }

    fn basis_columns(d: usize, k: usize) -> Projection {
        let mut b = Matrix::zeros(d, k);
        for i in 0..k {
            b[(i, i)] = 1.0;
        }
        Projection::new(vec![0.0; d], b).unwrap()
    }

    #[test]
    fn projection_selects_coordinates() {
        let g = GaussianD::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0]).unwrap();
        let gk = project_gaussian(&g, &basis_columns(3, 2)).unwrap();
        assert_eq!(gk.mu, vec![1.0, 2.0]);
        assert_eq!(gk.cov, Matrix::diagonal(&[1.0, 1f64.exp()]));
    }

    #[test]
    fn identity_projection_is_transparent() {
        let g = GaussianD::new(vec![0.5, -1.0], vec![0.3, -0.7]).unwrap();
        let gk = project_gaussian(&g, &Projection::identity(2)).unwrap();
        assert_eq!(gk.mu, g.mu);
        assert_eq!(gk.cov, Matrix::diagonal(&g.variances()));
    }

    #[test]
    fn diagonal_direction_projection() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p =
            Projection::new(vec![0.0, 0.0], Matrix::from_vec(2, 1, vec![h, h]).unwrap()).unwrap();
        let g = GaussianD::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let gk = project_gaussian(&g, &p).unwrap();
        assert!((gk.mu[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((gk.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let g = GaussianD::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            project_gaussian(&g, &Projection::identity(3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn projection_rejects_non_orthonormal_basis() {
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(Projection::new(vec![0.0, 0.0], b).is_err());
    }

    #[test]
    fn kl_identity_and_mean_shift() {
        let q = GaussianK::new(vec![0.0, 0.0], Matrix::identity(2)).unwrap();
        assert!(kl_compact(&q, &q).unwrap().abs() <= 1e-9);
        let p = GaussianK::new(vec![1.0, 0.0], Matrix::identity(2)).unwrap();
        assert!((kl_compact(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_diag_formula_under_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = random_gaussian_d(5, &mut rng);
            let p = random_gaussian_d(5, &mut rng);
            let id = Projection::identity(5);
            let compact = kl_compact(
                &project_gaussian(&q, &id).unwrap(),
                &project_gaussian(&p, &id).unwrap(),
            )
            .unwrap();
            assert!((compact - kl_diag_fullspace(&q, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_rotation_invariant_when_k_equals_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let proj = random_projection(6, 6, &mut rng);
            let q = random_gaussian_d(6, &mut rng);
            let p = random_gaussian_d(6, &mut rng);
            let compact = kl_compact(
                &project_gaussian(&q, &proj).unwrap(),
                &project_gaussian(&p, &proj).unwrap(),
            )
            .unwrap();
            assert!((compact - kl_diag_fullspace(&q, &p)).abs() < 1e-7 * (1.0 + compact));
        }
    }

    #[test]
    fn kl_singular_prior_errors() {
        let q = GaussianK::new(vec![0.0], Matrix::identity(1)).unwrap();
        let p = GaussianK::new(vec![0.0], Matrix::diagonal(&[-1.0])).unwrap();
        assert!(matches!(
            kl_compact(&q, &p),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn sampling_degenerate_cases() {
        let g = GaussianK::new(vec![0.3, -0.2], Matrix::zeros(2, 2)).unwrap();
        assert_eq!(
            sample_compact(&g, &[5.0, -9.0]).unwrap().z_k,
            vec![0.3, -0.2]
        );
        let g = GaussianK::new(vec![0.0, 0.0], Matrix::identity(2)).unwrap();
        assert_eq!(
            sample_compact(&g, &[0.7, -1.1]).unwrap().z_k,
            vec![0.7, -1.1]
        );
    }

    #[test]
    fn sampling_statistics() {
        let cov =
            Matrix::from_rows(&[&[1.0, 0.3, 0.0], &[0.3, 0.5, -0.1], &[0.0, -0.1, 0.8]]).unwrap();
        let g = GaussianK::new(vec![0.5, -1.0, 2.0], cov.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut outer = [[0.0; 3]; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = sample_compact(&g, &eps).unwrap().z_k;
            for i in 0..3 {
                sum[i] += z[i];
                for j in 0..3 {
                    outer[i][j] += z[i] * z[j];
                }
            }
        }
        for i in 0..3 {
            let mi = sum[i] / n as f64;
            assert!((mi - g.mu[i]).abs() < 0.02);
            for j in 0..3 {
                let c = outer[i][j] / n as f64 - mi * sum[j] / n as f64;
                assert!((c - cov[(i, j)]).abs() < 0.02, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn reprojection_cases() {
        let p = Projection::new(vec![1.0, 2.0, 3.0], basis_columns(3, 2).basis().clone()).unwrap();
        assert_eq!(
            inverse_reproject(&[0.0, 0.0], &p).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let p = basis_columns(4, 2);
        assert_eq!(
            inverse_reproject(&[0.5, -2.0], &p).unwrap(),
            vec![0.5, -2.0, 0.0, 0.0]
        );
        assert!(inverse_reproject(&[0.0; 3], &p).is_err());
    }

    #[test]
    fn latent_sample_reprojection_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_projection(6, 2, &mut rng);
        let g = project_gaussian(&random_gaussian_d(6, &mut rng), &p).unwrap();
        let s = sample_compact(&g, &[0.3, 0.1])
            .unwrap()
            .reproject(&p)
            .unwrap();
        let expected: Vec<f64> = p
            .basis()
            .mat_vec(&s.z_k)
            .unwrap()
            .iter()
            .zip(p.mean())
            .map(|(a, b)| a + b)
            .collect();
        let z_tilde = s.z_tilde.unwrap();
        assert!(z_tilde
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    proptest! {
        #[test]
        fn projected_covariance_is_psd_and_kl_obeys_data_processing(
            seed in any::<u64>(), d in 2usize..8, kfrac in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + ((d - 1) as f64 * kfrac).round() as usize;
            let proj = random_projection(d, k, &mut rng);
            let q = random_gaussian_d(d, &mut rng);
            let p = random_gaussian_d(d, &mut rng);
            let qk = project_gaussian(&q, &proj).unwrap();
            let pk = project_gaussian(&p, &proj).unwrap();
            prop_assert!(qk.cov.max_asymmetry() <= 1e-6);
            let eig = crate::linalg::symmetric_eigen(&qk.cov).unwrap();
            prop_assert!(eig.values.iter().all(|&v| v >= -1e-8));
            let kl = kl_compact(&qk, &pk).unwrap();
            prop_assert!(kl >= -1e-9);
            prop_assert!(kl <= kl_diag_fullspace(&q, &p) + 1e-7);
            prop_assert!(kl_compact(&qk, &qk).unwrap().abs() <= 1e-9);
        }

        #[test]
        fn reprojection_round_trip(seed in any::<u64>(), d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + (seed as usize % d);
            let proj = random_projection(d, k, &mut rng);
            let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let back = inverse_reproject(&z, &proj).unwrap();
            let centred: Vec<f64> = back.iter().zip(proj.mean()).map(|(a, b)| a - b).collect();
            let z2 = proj.basis().tr_mat_vec(&centred).unwrap();
            prop_assert!(z.iter().zip(&z2).all(|(a, b)| (a - b).abs() <= 1e-5));
        }
    }
}
