use std::f64::consts::PI;

use super::field::{normalize, DensityField, DensitySeries};
use super::grid::ReferenceGrid;
use crate::dynamics::TrajectoryDataset;
use crate::error::{config_err, Error, Result};

/// Gaussian KDE with isotropic bandwidth `sigma`, evaluated at every grid point:
///
/// `rho(x) = 1 / (N sqrt(det(2 pi sigma^2 I_M))) * sum_n exp(-|x - chi_n|^2 / (2 sigma^2))`.
///
/// `snapshot` is `N x M` row-major. The result is not normalized on the grid.
pub fn kde_density(snapshot: &[f64], grid: &ReferenceGrid, sigma: f64) -> Result<DensityField> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(config_err(format!("KDE bandwidth must be positive, got {sigma}")));
    }
    let dim = grid.dim();
    if snapshot.is_empty() || !snapshot.len().is_multiple_of(dim) {
        return Err(Error::Schema(format!(
            "snapshot of {} values is not a non-empty set of {dim}-vectors",
            snapshot.len()
        )));
    }
    let n = snapshot.len() / dim;
    let scale = 1.0 / (n as f64 * (2.0 * PI * sigma * sigma).powf(dim as f64 / 2.0));
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let values = (0..grid.len())
        .map(|r| {
            let x = grid.point(r);
            let sum: f64 = snapshot
                .chunks_exact(dim)
                .map(|s| {
                    let d2: f64 = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2 * inv_two_var).exp()
                })
                .sum();
            scale * sum
        })
        .collect();
    DensityField::new(values, grid)
}

/// KDE of every snapshot `Y_k`, normalized on the grid.
pub fn density_series(
    dataset: &TrajectoryDataset,
    grid: &ReferenceGrid,
    sigma: f64,
) -> Result<DensitySeries> {
    if dataset.dim() != grid.dim() {
        return Err(Error::Grid(format!(
            "dataset is {}-dimensional but the grid is {}-dimensional",
            dataset.dim(),
            grid.dim()
        )));
    }
    let fields = (0..=dataset.n_steps())
        .map(|k| {
            let raw = kde_density(&dataset.snapshot(k), grid, sigma)?;
            normalize(&raw, grid, false)
        })
        .collect::<Result<Vec<_>>>()?;
    DensitySeries::new(fields, dataset.tau(), Some(sigma))
}

/// Scott-style bandwidth `N^(-1/(M+4))` times the mean per-axis standard deviation.
pub fn scott_sigma(dataset: &TrajectoryDataset) -> f64 {
    let n = dataset.n_agents() as f64;
    n.powf(-1.0 / (dataset.dim() as f64 + 4.0)) * dataset.mean_axis_std()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::field::integrate;
    use crate::density::grid::{build_grid, GridMode, GridSpec};
    use crate::dynamics::DomainBox;

    fn line_grid(points: Vec<f64>) -> ReferenceGrid {
        let n = points.len();
        ReferenceGrid::from_parts(DomainBox::cube(1, -20.0, 20.0).unwrap(), GridMode::MonteCarlo, points, vec![40.0 / n as f64; n])
            .unwrap()
    }

    #[test]
    fn single_sample_peak() {
        let g = line_grid(vec![0.0]);
        let f = kde_density(&[0.0], &g, 1.0).unwrap();
        assert!((f.values()[0] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_samples_at_one() {
        let g = line_grid(vec![1.0]);
        let f = kde_density(&[-1.0, 1.0], &g, 1.0).unwrap();
        let expected = 0.5 / (2.0 * PI).sqrt() * (1.0 + (-2.0f64).exp());
        assert!((f.values()[0] - expected).abs() < 1e-15);
        assert!((f.values()[0] - 0.226466).abs() < 1e-6);
    }

    #[test]
    fn far_tail_is_negligible() {
        let g = line_grid(vec![12.0]);
        let f = kde_density(&[0.0, -0.5], &g, 1.0).unwrap();
        assert!(f.values()[0] < 1e-30);
    }

    #[test]
    fn rejects_bad_bandwidth() {
        let g = line_grid(vec![0.0]);
        assert!(matches!(kde_density(&[0.0], &g, 0.0), Err(Error::Config(_))));
        assert!(matches!(kde_density(&[0.0], &g, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_agents_give_constant_series() {
        let domain = DomainBox::cube(2, -2.0, 2.0).unwrap();
        let mut states = Vec::new();
        for n in 0..3 {
            for _ in 0..5 {
                states.extend([n as f64 * 0.3, -0.2]);
            }
        }
        let ds = TrajectoryDataset::new(3, 4, 0.1, domain.clone(), states).unwrap();
        let grid = build_grid(&domain, &GridSpec::Lattice { per_axis: 8 }, 0).unwrap();
        let series = density_series(&ds, &grid, 0.4).unwrap();
        assert_eq!(series.len(), 5);
        for f in series.fields() {
            assert_eq!(f, &series.fields()[0]);
            assert!((integrate(f, &grid).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
