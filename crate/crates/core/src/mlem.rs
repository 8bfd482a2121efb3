//! Maximum-likelihood expectation maximization for Poisson projection data.
//!
//! Update, with sensitivity `s_j = Σ_i a_ij`:
//!
//! ```text
//! x_j ← (x_j / s_j) · Σ_i a_ij · y_i / (Σ_k a_ik x_k + ε)
//! ```
//!
//! Bins with `y_i = 0` contribute nothing, so `ε = 0` is allowed. Voxels no
//! bin sees (`s_j = 0`) stay at zero. The iterate is held in `f64`.

use serde::{Deserialize, Serialize};

use crate::datamodel::{ProjectionSet, VolumeGrid};
use crate::error::{Error, Result};
use crate::geometry::SystemMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlemConfig {
    pub n_iters: usize,
    /// Denominator stabilizer. `None` selects `1e-8 · max(y)`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub initial_value: f64,
}

impl Default for MlemConfig {
    fn default() -> Self {
        MlemConfig {
            n_iters: 50,
            epsilon: None,
            initial_value: 1.0,
        }
    }
}

impl MlemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("MLEM needs at least one iteration".into()));
        }
        if let Some(eps) = self.epsilon {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(Error::Config(format!("MLEM epsilon must be >= 0, got {eps}")));
            }
        }
        if !(self.initial_value > 0.0) || !self.initial_value.is_finite() {
            return Err(Error::Config(format!(
                "MLEM initial value must be positive, got {}",
                self.initial_value
            )));
        }
        Ok(())
    }

    fn epsilon_for(&self, y: &[f64]) -> f64 {
        self.epsilon
            .unwrap_or_else(|| 1e-8 * y.iter().copied().fold(0.0, f64::max))
    }
}

/// Stateful MLEM iteration, for callers that want to inspect every iterate.
pub struct Mlem<'a> {
    matrix: &'a SystemMatrix,
    y: Vec<f64>,
    x: Vec<f64>,
    sensitivity: Vec<f64>,
    epsilon: f64,
    iteration: usize,
}

impl<'a> Mlem<'a> {
    pub fn new(matrix: &'a SystemMatrix, y: &[f64], cfg: &MlemConfig) -> Result<Self> {
        cfg.validate()?;
        if y.len() != matrix.n_rows() {
            return Err(Error::Shape(format!(
                "{} projection values for a {}-row matrix",
                y.len(),
                matrix.n_rows()
            )));
        }
        if let Some(i) = y.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Numerical(format!("projection bin {i} is negative or non-finite")));
        }
        let sensitivity = matrix.sensitivity();
        if sensitivity.iter().all(|&s| s == 0.0) {
            return Err(Error::Reconstruction("sensitivity image is identically zero".into()));
        }
        let x = sensitivity
            .iter()
            .map(|&s| if s > 0.0 { cfg.initial_value } else { 0.0 })
            .collect();
        Ok(Mlem {
            matrix,
            y: y.to_vec(),
            x,
            sensitivity,
            epsilon: cfg.epsilon_for(y),
            iteration: 0,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let expected = self.matrix.apply(&self.x)?;
        let ratio: Vec<f64> = self
            .y
            .iter()
            .zip(&expected)
            .map(|(&y, &e)| if y == 0.0 { 0.0 } else { y / (e + self.epsilon) })
            .collect();
        let back = self.matrix.apply_transpose(&ratio)?;
        for ((x, &b), &s) in self.x.iter_mut().zip(&back).zip(&self.sensitivity) {
            *x = if s > 0.0 { *x * b / s } else { 0.0 };
        }
        if let Some(j) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "MLEM iterate became non-finite at voxel {j} (iteration {})",
                self.iteration + 1
            )));
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn estimate(&self) -> &[f64] {
        &self.x
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Log-likelihood of the current iterate, using the same ε as the update.
    pub fn loglik(&self) -> Result<f64> {
        poisson_loglik(self.matrix, &self.x, &self.y, self.epsilon)
    }
}

pub fn mlem_reconstruct(
    matrix: &SystemMatrix,
    y: &ProjectionSet,
    cfg: &MlemConfig,
    voxel_size: [f64; 3],
) -> Result<VolumeGrid> {
    if y.dims() != matrix.proj_dims() {
        return Err(Error::Shape(format!(
            "projection dims {:?} do not match matrix rows {:?}",
            y.dims(),
            matrix.proj_dims()
        )));
    }
    let ys: Vec<f64> = y.values().iter().map(|&v| v as f64).collect();
    let mut run = Mlem::new(matrix, &ys, cfg)?;
    for _ in 0..cfg.n_iters {
        run.step()?;
    }
    VolumeGrid::new(
        matrix.grid_dims(),
        voxel_size,
        run.estimate().iter().map(|&v| v as f32).collect(),
    )
}

/// `Σ_i [ y_i ln(ŷ_i + ε) − ŷ_i ]` with `ŷ = S x`. Terms with `y_i = 0`
/// contribute `−ŷ_i` only.
pub fn poisson_loglik(matrix: &SystemMatrix, x: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    if y.len() != matrix.n_rows() {
        return Err(Error::Shape(format!(
            "{} projection values for a {}-row matrix",
            y.len(),
            matrix.n_rows()
        )));
    }
    let expected = matrix.apply(x)?;
    let total: f64 = y
        .iter()
        .zip(&expected)
        .map(|(&y, &e)| if y == 0.0 { -e } else { y * (e + epsilon).ln() - e })
        .sum();
    if !total.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Dims3, ProjDims};
    use crate::geometry::{build_geometry, build_system_matrix, AngleSet, GeometryConfig, GridSpec};

    fn scalar_matrix(a: f64) -> SystemMatrix {
        SystemMatrix::from_rows(
            ProjDims {
                n_angles: 1,
                n_modules: 1,
                nu: 1,
                nv: 1,
            },
            Dims3::new(1, 1, 1),
            vec![vec![(0, a)]],
        )
        .unwrap()
    }

    fn toy_scanner() -> (SystemMatrix, GridSpec) {
        let mut cfg = GeometryConfig::desk();
        cfg.nu = 8;
        cfg.nv = 8;
        cfg.pitch = 6.0;
        cfg.rays_per_bin_axis = 2;
        let grid = GridSpec {
            dims: Dims3::new(8, 8, 6),
            voxel_size: [6.0; 3],
            center: [0.0; 3],
        };
        let g = build_geometry(&cfg).unwrap();
        (build_system_matrix(&g, &AngleSet::four_angle(), &grid).unwrap(), grid)
    }

    #[test]
    fn scalar_system_converges_in_one_iteration() {
        for (a, y) in [(0.37, 12.0), (2.5, 3.0), (1e-3, 1e4)] {
            let s = scalar_matrix(a);
            let cfg = MlemConfig {
                n_iters: 1,
                epsilon: Some(0.0),
                initial_value: 1.0,
            };
            let mut run = Mlem::new(&s, &[y], &cfg).unwrap();
            run.step().unwrap();
            let x = run.estimate()[0];
            assert!((x - y / a).abs() <= 1e-12 * (y / a), "{x} vs {}", y / a);
        }
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let (s, grid) = toy_scanner();
        let y = ProjectionSet::zeros(s.proj_dims(), AngleSet::four_angle().ids()).unwrap();
        let cfg = MlemConfig {
            n_iters: 1,
            ..Default::default()
        };
        let x = mlem_reconstruct(&s, &y, &cfg, grid.voxel_size).unwrap();
        assert!(x.values().iter().all(|&v| v.abs() <= 1e-8));
    }

    #[test]
    fn loglik_arithmetic() {
        let s = scalar_matrix(1.0);
        let ll = poisson_loglik(&s, &[2.0], &[3.0], 0.0).unwrap();
        assert!((ll - (3.0 * 2f64.ln() - 2.0)).abs() < 1e-12);
        assert!((ll - 0.0794).abs() < 1e-4);
        assert_eq!(poisson_loglik(&s, &[0.0], &[0.0], 0.0).unwrap(), 0.0);
        assert!(poisson_loglik(&s, &[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn point_source_error_decreases() {
        let (s, grid) = toy_scanner();
        let mut truth = vec![0.0f64; grid.dims.len()];
        truth[grid.dims.index(4, 3, 3)] = 100.0;
        let y = s.apply(&truth).unwrap();
        let mut run = Mlem::new(&s, &y, &MlemConfig::default()).unwrap();
        let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nrmse = |x: &[f64]| {
            x.iter()
                .zip(&truth)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / norm
        };
        let mut last = nrmse(run.estimate());
        for _ in 0..20 {
            run.step().unwrap();
            let e = nrmse(run.estimate());
            assert!(e < last, "NRMSE rose from {last} to {e} at iteration {}", run.iteration());
            last = e;
        }
    }

    #[test]
    fn loglik_is_monotone_and_iterates_nonnegative() {
        let (s, grid) = toy_scanner();
        let truth: Vec<f64> = (0..grid.dims.len()).map(|j| 1.0 + (j % 7) as f64).collect();
        let y: Vec<f64> = s.apply(&truth).unwrap().iter().map(|v| v.round()).collect();
        let mut run = Mlem::new(&s, &y, &MlemConfig::default()).unwrap();
        let mut last = run.loglik().unwrap();
        for _ in 0..30 {
            run.step().unwrap();
            let ll = run.loglik().unwrap();
            assert!(ll >= last - 1e-9 * last.abs());
            assert!(run.estimate().iter().all(|&v| v >= 0.0));
            last = ll;
        }
    }

    #[test]
    fn unseen_voxels_stay_zero() {
        // voxel 1 has no detector coverage
        let s = SystemMatrix::from_rows(
            ProjDims {
                n_angles: 1,
                n_modules: 1,
                nu: 2,
                nv: 1,
            },
            Dims3::new(2, 1, 1),
            vec![vec![(0, 1.0)], vec![(0, 0.5)]],
        )
        .unwrap();
        let mut run = Mlem::new(&s, &[4.0, 2.0], &MlemConfig::default()).unwrap();
        run.step().unwrap();
        assert_eq!(run.estimate()[1], 0.0);
    }

    #[test]
    fn zero_sensitivity_is_error() {
        let s = SystemMatrix::from_rows(
            ProjDims {
                n_angles: 1,
                n_modules: 1,
                nu: 1,
                nv: 1,
            },
            Dims3::new(2, 1, 1),
            vec![vec![]],
        )
        .unwrap();
        assert!(matches!(
            Mlem::new(&s, &[1.0], &MlemConfig::default()),
            Err(Error::Reconstruction(_))
        ));
    }

    #[test]
    fn counts_are_matched_on_a_full_rank_toy() {
        // 3 bins, 2 voxels
        let s = SystemMatrix::from_rows(
            ProjDims {
                n_angles: 1,
                n_modules: 1,
                nu: 3,
                nv: 1,
            },
            Dims3::new(2, 1, 1),
            vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 0.5), (1, 0.5)]],
        )
        .unwrap();
        let y = s.apply(&[3.0, 5.0]).unwrap();
        let total: f64 = y.iter().sum();
        let mut run = Mlem::new(&s, &y, &MlemConfig::default()).unwrap();
        for _ in 0..200 {
            run.step().unwrap();
        }
        let fitted: f64 = s.apply(run.estimate()).unwrap().iter().sum();
        assert!((fitted - total).abs() < 1e-6 * total);
    }
}
