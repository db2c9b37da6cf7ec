//! Density-series file, a single JSON document:
//!
//! ```text
//! {
//!   "format": "pf-spectra/density-series",
//!   "version": 1,
//!   "mode": "lattice" | "monte-carlo",
//!   "domain": { "lower": [..M], "upper": [..M] },
//!   "points": [..R*M],          // row-major, one point per M entries
//!   "weights": [..R],
//!   "sigma": 0.5 | null,
//!   "tau": 0.01,
//!   "values": [[..R], ...]      // K + 1 rows, one normalized field per instant
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::field::{weighted_sum, DensityField, DensitySeries, MASS_TOL};
use super::grid::{GridMode, ReferenceGrid};
use crate::dynamics::DomainBox;
use crate::error::{Error, Result};

pub const SERIES_FORMAT: &str = "pf-spectra/density-series";
pub const SERIES_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SeriesFile {
    format: String,
    version: u32,
    mode: GridMode,
    domain: DomainBox,
    points: Vec<f64>,
    weights: Vec<f64>,
    sigma: Option<f64>,
    tau: f64,
    values: Vec<Vec<f64>>,
}

pub fn save_series(series: &DensitySeries, grid: &ReferenceGrid, path: impl AsRef<Path>) -> Result<()> {
    if series.grid_id() != grid.id() {
        return Err(Error::Grid("series does not live on the supplied grid".into()));
    }
    let file = SeriesFile {
        format: SERIES_FORMAT.into(),
        version: SERIES_VERSION,
        mode: grid.mode(),
        domain: grid.domain().clone(),
        points: grid.points().to_vec(),
        weights: grid.weights().to_vec(),
        sigma: series.sigma(),
        tau: series.tau(),
        values: series.fields().iter().map(|f| f.values().to_vec()).collect(),
    };
    let out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(out, &file)?;
    Ok(())
}

pub fn load_series(path: impl AsRef<Path>) -> Result<(DensitySeries, ReferenceGrid)> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: SeriesFile = serde_json::from_reader(reader)?;
    if file.format != SERIES_FORMAT {
        return Err(Error::Schema(format!("not a density-series file (format `{}`)", file.format)));
    }
    if file.version != SERIES_VERSION {
        return Err(Error::Schema(format!(
            "density-series version {} is not supported (expected {SERIES_VERSION})",
            file.version
        )));
    }
    let grid = ReferenceGrid::from_parts(file.domain, file.mode, file.points, file.weights)?;
    let fields = file
        .values
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let f = DensityField::new(v, &grid)?;
            let mass = weighted_sum(f.values(), grid.weights());
            if (mass - 1.0).abs() > MASS_TOL || !f.is_nonnegative() {
                return Err(Error::Schema(format!("field {k} is not a normalized density (mass {mass})")));
            }
            Ok(DensityField::from_raw(f.into_values(), grid.id(), true))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((DensitySeries::new(fields, file.tau, file.sigma)?, grid))
}
