//! Experiment orchestration: data, densities, training, test rollouts and the report.

mod config;
mod metrics;

pub use config::{
    AnalysisConfig, ArtifactConfig, ExperimentConfig, HeatmapConfig, ModelChoice, PisaSection, Split, Window,
    CONFIG_SCHEMA_VERSION,
};
pub use metrics::{
    compare, export_heatmap, heatmap, mass_concentration, window_means, Comparison, Heatmap, WindowMean,
    WindowRatio,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{expgen_rollout, init_expgen, train_expgen, ExpGenModel};
use crate::density::{
    build_grid, density_series, kl_values, project, projected_kl, save_series, scott_sigma, DensityField,
    DensitySeries, GridMode, GridSpec, ReferenceGrid, DEFAULT_KL_EPS,
};
use crate::dynamics::{save_trajectories, simulate, TrajectoryDataset};
use crate::error::{config_err, Error, Result};
use crate::model::{init_model, pf_step, rollout, terminal_density, SpectralPFModel};
use crate::trainer::{fd_check, model_loss, train_pisa, FdReport, LossTerms, TrainHistory};

pub const REPORT_FORMAT: &str = "pf-spectra/eval-report";
pub const REPORT_VERSION: u32 = 1;

/// Data shared by every stage after density estimation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: TrajectoryDataset,
    pub grid: ReferenceGrid,
    pub series: DensitySeries,
    pub sigma: f64,
}

impl Prepared {
    pub fn train_series(&self, split: &Split) -> Result<DensitySeries> {
        self.series.window(0, split.train_steps)
    }
}

fn staged<T>(r: Result<T>, stage: &'static str, hash: &str) -> Result<T> {
    r.map_err(|e| e.in_stage(stage, hash))
}

pub fn simulate_stage(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    let hash = cfg.hash();
    let ds = staged(simulate(&cfg.system, cfg.seed), "simulate", &hash)?;
    match &cfg.project_axes {
        Some(axes) => staged(ds.project(axes), "simulate", &hash),
        None => Ok(ds),
    }
}

/// Simulation (or loading), grid construction and KDE, with the split checked against `K`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let hash = cfg.hash();
    let dataset = simulate_stage(cfg)?;
    let k = dataset.n_steps();
    if cfg.split.train_steps + cfg.split.test_steps > k {
        return Err(config_err(format!(
            "split {} + {} exceeds the K = {k} available transitions",
            cfg.split.train_steps, cfg.split.test_steps
        ))
        .in_stage("split", &hash));
    }
    let spec = cfg.grid.clone().unwrap_or_else(|| GridSpec::default_for_dim(dataset.dim()));
    let grid = staged(build_grid(dataset.domain(), &spec, cfg.seed), "density", &hash)?;
    let sigma = cfg.sigma.unwrap_or_else(|| scott_sigma(&dataset));
    info!(
        "density estimation: N = {}, K = {k}, M = {}, R = {}, sigma = {sigma:.4}",
        dataset.n_agents(),
        dataset.dim(),
        grid.len()
    );
    let series = staged(density_series(&dataset, &grid, sigma), "density", &hash)?;
    Ok(Prepared {
        dataset,
        grid,
        series,
        sigma,
    })
}

pub fn train_pisa_stage(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(crate::trainer::TrainOutcome, Option<FdReport>)> {
    let hash = cfg.hash();
    let train = staged(prep.train_series(&cfg.split), "split", &hash)?;
    let model = staged(init_model(cfg.pisa.l, &prep.grid, &cfg.pisa.model, cfg.seed), "train-pisa", &hash)?;
    let fd = if cfg.analysis.fd_coords > 0 {
        let t = &cfg.pisa.train;
        Some(staged(
            fd_check(&model, &train, &prep.grid, t.lambda, t.mu, cfg.analysis.fd_coords, 1e-5, t.seed),
            "train-pisa",
            &hash,
        )?)
    } else {
        None
    };
    let outcome = staged(train_pisa(&model, &train, &prep.grid, &cfg.pisa.train), "train-pisa", &hash)?;
    Ok((outcome, fd))
}

pub fn train_baseline_stage(cfg: &ExperimentConfig, prep: &Prepared) -> Result<crate::baseline::BaselineOutcome> {
    let hash = cfg.hash();
    let train = staged(prep.train_series(&cfg.split), "split", &hash)?;
    let tau = prep.series.tau();
    let t_scale = cfg.split.train_steps as f64 * tau;
    let model = staged(
        init_expgen(&prep.grid, &cfg.baseline.hidden, tau, t_scale, cfg.seed.wrapping_add(1)),
        "train-baseline",
        &hash,
    )?;
    staged(train_expgen(&model, &train, &prep.grid, &cfg.baseline), "train-baseline", &hash)
}

/// Per-step test KL of a predicted series against the data, steps `1..=len-1`.
fn test_kl(predicted: &DensitySeries, truth: &[DensityField], grid: &ReferenceGrid) -> Vec<f64> {
    predicted.fields()[1..]
        .iter()
        .zip(truth)
        .map(|(p, q)| kl_values(p.values(), q.values(), grid.weights(), DEFAULT_KL_EPS))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_agents: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub tau: f64,
    pub clipped_samples: usize,
    pub sigma: f64,
    pub grid_mode: GridMode,
    pub grid_points: usize,
    pub grid_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial: LossTerms,
    pub final_total: f64,
    pub epochs_run: usize,
    /// PISA only: the epoch whose parameters are evaluated (0 = untrained).
    pub best_epoch: Option<usize>,
    pub evaluated: Option<LossTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub training: TrainingSummary,
    /// KL of the projected rollout against the data, one entry per test step.
    pub test_kl: Vec<f64>,
    /// KL against the data of the unprojected rollout (projected only for scoring);
    /// `None` when that rollout collapsed or for models that never go negative.
    pub test_kl_raw: Option<Vec<f64>>,
    pub windows: Vec<WindowMean>,
    pub clamped_mass: Vec<f64>,
    pub raw_mass: Vec<f64>,
    pub fd_max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalReport {
    pub mass_concentration: f64,
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    pub heatmap_fraction: Option<f64>,
    /// `D(proj(P rho*) || rho*)`.
    pub fixed_point_kl: f64,
    /// `D(rho_0 || rho*)` with `rho_0` the first training density.
    pub reference_kl: f64,
    pub coefficients_at_terminal: Vec<f64>,
    /// Largest `<G_i, G_j>` over `i != j`.
    pub max_basis_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub split: Split,
    pub pisa: Option<ModelReport>,
    pub baseline: Option<ModelReport>,
    pub terminal: Option<TerminalReport>,
    pub comparison: Option<Vec<WindowRatio>>,
    pub artifacts: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: EvalReport = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(Error::Schema(format!("unsupported report {} v{}", r.format, r.version)));
        }
        Ok(r)
    }
}

/// Wall-clock seconds per stage; kept out of the report so reports are reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub runtime: RuntimeStats,
    pub prepared: Prepared,
    pub pisa: Option<SpectralPFModel>,
    pub baseline: Option<ExpGenModel>,
    pub terminal_density: Option<DensityField>,
    pub pisa_history: Option<TrainHistory>,
    pub baseline_history: Option<TrainHistory>,
}

struct Writer {
    dir: Option<PathBuf>,
    names: Vec<String>,
}

impl Writer {
    fn path(&mut self, name: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        self.names.push(name.to_string());
        Some(dir.join(name))
    }
}

/// The whole pipeline. Artifacts go to `out_dir` (falling back to the config's
/// `output_dir`); nothing is written when neither is set.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate_static()?;
    let hash = cfg.hash();
    let start = Instant::now();
    let mut runtime = RuntimeStats::default();
    let mut lap = {
        let mut last = Instant::now();
        move |name: &str, rt: &mut RuntimeStats| {
            rt.stages.push((name.to_string(), last.elapsed().as_secs_f64()));
            last = Instant::now();
        }
    };
    let dir = out_dir.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone());
    if let Some(d) = &dir {
        staged(std::fs::create_dir_all(d).map_err(Error::from), "write", &hash)?;
    }
    let mut w = Writer { dir, names: Vec::new() };

    let prep = prepare(cfg)?;
    lap("prepare", &mut runtime);
    let grid = &prep.grid;
    let split = cfg.split;
    let tau = prep.series.tau();
    let truth = &prep.series.fields()[split.train_steps + 1..=split.train_steps + split.test_steps];
    let rho_start = &prep.series.fields()[split.train_steps];
    let windows = cfg.windows();

    if cfg.artifacts.trajectories {
        if let Some(p) = w.path("trajectories.csv") {
            staged(save_trajectories(&prep.dataset, p), "write", &hash)?;
        }
    }
    if cfg.artifacts.series {
        if let Some(p) = w.path("series.json") {
            staged(save_series(&prep.series, grid, p), "write", &hash)?;
        }
    }

    let mut pisa_report = None;
    let mut terminal = None;
    let mut pisa_model = None;
    let mut rho_star = None;
    let mut pisa_history = None;
    if cfg.wants(ModelChoice::Pisa) {
        let (outcome, fd) = train_pisa_stage(cfg, &prep)?;
        lap("train-pisa", &mut runtime);
        let model = outcome.best.clone();
        let t = &cfg.pisa.train;
        let train = staged(prep.train_series(&split), "split", &hash)?;
        let evaluated = staged(model_loss(&model, &train, grid, t.lambda, t.mu), "train-pisa", &hash)?;
        let meta = |which: &str, epoch: usize| {
            json!({"which": which, "epoch": epoch, "config_hash": hash, "seed": cfg.seed})
        };
        if let Some(p) = w.path("pisa_best.pfs") {
            staged(outcome.best.save(p, meta("best", outcome.best_epoch)), "write", &hash)?;
        }
        if let Some(p) = w.path("pisa_final.pfs") {
            staged(outcome.model.save(p, meta("final", outcome.history.len())), "write", &hash)?;
        }
        if let Some(p) = w.path("pisa_history.csv") {
            staged(outcome.history.save_csv(p), "write", &hash)?;
        }

        let (test, test_raw, clamped, raw_mass) = if split.test_steps > 0 {
            let r = staged(rollout(&model, rho_start, grid, split.test_steps, true, tau), "rollout", &hash)?;
            let raw = rollout(&model, rho_start, grid, split.test_steps, false, tau).ok().and_then(|r| {
                r.raw.as_ref().map(|fields| {
                    fields
                        .iter()
                        .zip(truth)
                        .map(|(f, q)| projected_kl(f, q, grid).unwrap_or(f64::NAN))
                        .collect::<Vec<f64>>()
                })
            });
            let raw = raw.filter(|v| v.iter().all(|x| x.is_finite()));
            (test_kl(&r.predicted, truth, grid), raw, r.clamped_mass, r.raw_mass)
        } else {
            (Vec::new(), None, Vec::new(), Vec::new())
        };
        lap("rollout-pisa", &mut runtime);

        let initial = outcome.history.initial.expect("trainer records the initial loss");
        pisa_report = Some(ModelReport {
            training: TrainingSummary {
                initial,
                final_total: outcome.history.final_total().unwrap_or(initial.total),
                epochs_run: outcome.history.len(),
                best_epoch: Some(outcome.best_epoch),
                evaluated: Some(evaluated),
            },
            windows: staged(window_means(&test, &windows), "analysis", &hash)?,
            test_kl: test,
            test_kl_raw: test_raw,
            clamped_mass: clamped,
            raw_mass,
            fd_max_rel_error: fd.map(|f| f.max_rel()),
        });

        let star = staged(terminal_density(&model, grid), "analysis", &hash)?;
        terminal = Some(staged(terminal_report(cfg, &model, &star, &prep, &mut w), "analysis", &hash)?);
        lap("analysis", &mut runtime);
        pisa_model = Some(model);
        rho_star = Some(star);
        pisa_history = Some(outcome.history);
    }

    let mut baseline_report = None;
    let mut baseline_model = None;
    let mut baseline_history = None;
    if cfg.wants(ModelChoice::Baseline) {
        let outcome = train_baseline_stage(cfg, &prep)?;
        lap("train-baseline", &mut runtime);
        if let Some(p) = w.path("baseline.pfs") {
            staged(
                outcome.model.save(
                    p,
                    json!({"config_hash": hash, "seed": cfg.seed, "exponent": "tau per step, t as input"}),
                ),
                "write",
                &hash,
            )?;
        }
        if let Some(p) = w.path("baseline_history.csv") {
            staged(outcome.history.save_csv(p), "write", &hash)?;
        }
        let test = if split.test_steps > 0 {
            let t0 = split.train_steps as f64 * tau;
            let r = staged(
                expgen_rollout(&outcome.model, rho_start, split.test_steps, t0, grid),
                "rollout",
                &hash,
            )?;
            test_kl(&r.predicted, truth, grid)
        } else {
            Vec::new()
        };
        lap("rollout-baseline", &mut runtime);
        let initial = outcome.history.initial.expect("baseline records the initial loss");
        let train = staged(prep.train_series(&split), "split", &hash)?;
        let final_loss = staged(crate::baseline::expgen_loss(&outcome.model, &train, grid, 0.0), "train-baseline", &hash)?;
        baseline_report = Some(ModelReport {
            training: TrainingSummary {
                initial,
                final_total: final_loss,
                epochs_run: outcome.history.len(),
                best_epoch: None,
                evaluated: None,
            },
            windows: staged(window_means(&test, &windows), "analysis", &hash)?,
            test_kl: test,
            test_kl_raw: None,
            clamped_mass: Vec::new(),
            raw_mass: Vec::new(),
            fd_max_rel_error: None,
        });
        baseline_model = Some(outcome.model);
        baseline_history = Some(outcome.history);
    }

    let comparison = match (&pisa_report, &baseline_report) {
        (Some(a), Some(b)) if split.test_steps > 0 => {
            let c = staged(compare(("pisa", &a.test_kl), ("baseline", &b.test_kl), &windows), "analysis", &hash)?;
            if let Some(p) = w.path("test_kl.csv") {
                let f = staged(std::fs::File::create(p).map_err(Error::from), "write", &hash)?;
                staged(c.write_csv(std::io::BufWriter::new(f)), "write", &hash)?;
            }
            Some(c.windows)
        }
        _ => None,
    };

    if let Some(p) = w.path("run_manifest.json") {
        let manifest = json!({
            "config": cfg,
            "config_hash": hash,
            "seed": cfg.seed,
            "sigma": prep.sigma,
            "grid_id": grid.id().to_string(),
            "tau": tau,
            "baseline_time_scale": split.train_steps as f64 * tau,
            "baseline_exponent": "tau per step, t as input",
            "package_version": env!("CARGO_PKG_VERSION"),
        });
        staged(
            std::fs::write(p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::from),
            "write",
            &hash,
        )?;
    }
    let report_path = w.path("report.json");
    let ds = &prep.dataset;
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: hash.clone(),
        seed: cfg.seed,
        dataset: DatasetSummary {
            n_agents: ds.n_agents(),
            n_steps: ds.n_steps(),
            dim: ds.dim(),
            tau,
            clipped_samples: ds.clipped(),
            sigma: prep.sigma,
            grid_mode: grid.mode(),
            grid_points: grid.len(),
            grid_id: grid.id().to_string(),
        },
        split,
        pisa: pisa_report,
        baseline: baseline_report,
        terminal,
        comparison,
        artifacts: w.names.clone(),
    };
    runtime.total = start.elapsed().as_secs_f64();
    if let Some(p) = report_path {
        staged(std::fs::write(p, report.to_json()?).map_err(Error::from), "write", &hash)?;
    }
    if let Some(dir) = &w.dir {
        staged(
            std::fs::write(dir.join("runtime.json"), serde_json::to_string_pretty(&runtime)? + "\n").map_err(Error::from),
            "write",
            &hash,
        )?;
    }
    Ok(ExperimentOutput {
        report,
        runtime,
        prepared: prep,
        pisa: pisa_model,
        baseline: baseline_model,
        terminal_density: rho_star,
        pisa_history,
        baseline_history,
    })
}

fn terminal_report(
    cfg: &ExperimentConfig,
    model: &SpectralPFModel,
    star: &DensityField,
    prep: &Prepared,
    w: &mut Writer,
) -> Result<TerminalReport> {
    let grid = &prep.grid;
    let a = &cfg.analysis;
    let conc = mass_concentration(star, grid, &a.centers, a.radius)?;
    let heatmap_fraction = match &a.heatmap {
        Some(h) => {
            let hm = match w.path("terminal_density.csv") {
                Some(p) => {
                    w.names.push("terminal_density.pgm".into());
                    export_heatmap(star, grid, h.axes, h.bins, p)?
                }
                None => heatmap(star, grid, h.axes, h.bins)?,
            };
            Some(hm.mass_fraction_near(&h.centers, h.radius))
        }
        None => None,
    };
    let stepped = project(&pf_step(model, star, grid)?, grid)?.field;
    let fixed_point_kl = kl_values(stepped.values(), star.values(), grid.weights(), DEFAULT_KL_EPS);
    let reference_kl = kl_values(prep.series.fields()[0].values(), star.values(), grid.weights(), DEFAULT_KL_EPS);
    let basis = model.eval_g(grid)?;
    let mut max_overlap: f64 = 0.0;
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            if i != j {
                max_overlap = max_overlap.max(crate::density::inner_product(&basis[i], &basis[j], grid)?);
            }
        }
    }
    Ok(TerminalReport {
        mass_concentration: conc,
        centers: a.centers.clone(),
        radius: a.radius,
        heatmap_fraction,
        fixed_point_kl,
        reference_kl,
        coefficients_at_terminal: model.eval_a(star, grid)?,
        max_basis_overlap: max_overlap,
    })
}
