//! Reference grids, Gaussian KDE and the discrete functional calculus (quadrature,
//! inner products, KL divergence) shared by every other module.

mod field;
mod grid;
mod kde;
mod series_io;

pub use field::{
    inner_product, integrate, kl_divergence, normalize, project, projected_kl, DensityField,
    DensitySeries, KlDivergence, Projection, DEFAULT_KL_EPS, MASS_TOL,
};
pub(crate) use field::{kl_values, weighted_sum};
pub use grid::{build_grid, build_grid_with_limit, GridId, GridMode, GridSpec, ReferenceGrid, DEFAULT_MAX_POINTS};
pub use kde::{density_series, kde_density, scott_sigma};
pub use series_io::{load_series, save_series, SERIES_FORMAT, SERIES_VERSION};
