use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use pf_spectra::baseline::{expgen_rollout, ExpGenModel};
use pf_spectra::density::{kl_divergence, save_series, DEFAULT_KL_EPS};
use pf_spectra::dynamics::save_trajectories;
use pf_spectra::eval::{
    self, compare, export_heatmap, mass_concentration, EvalReport, ExperimentConfig,
};
use pf_spectra::model::{rollout, terminal_density, SpectralPFModel};

#[derive(Parser)]
#[command(name = "pf-spectra", version, about = "Learn density push-forward operators from agent trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate (or load) trajectories and write them as CSV.
    Simulate(Common),
    /// Estimate the density series on the reference grid.
    EstimateDensity(Common),
    /// Train the spectral model and write checkpoints and history.
    TrainPisa(Common),
    /// Train the exponential-generator baseline.
    TrainBaseline(Common),
    /// Roll trained checkpoints over the test horizon.
    Predict(Common),
    /// Run the whole pipeline and write the evaluation report.
    Evaluate(Common),
    /// Export the terminal density of a trained checkpoint.
    TerminalDensity(Common),
    /// Tabulate PISA against the baseline from a written report.
    Compare(Common),
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> anyhow::Result<Self> {
        let cfg = ExperimentConfig::load(&c.config)?.with_seed(c.seed);
        let out = c
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn require(path: &Path, hint: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{} not found; run `pf-spectra {hint}` first", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let ctx = Ctx::new(&c)?;
            let ds = eval::simulate_stage(&ctx.cfg)?;
            let p = ctx.path("trajectories.csv");
            save_trajectories(&ds, &p)?;
            println!(
                "{} agents, {} steps, dimension {}, {} clipped samples -> {}",
                ds.n_agents(),
                ds.n_steps(),
                ds.dim(),
                ds.clipped(),
                p.display()
            );
        }
        Command::EstimateDensity(c) => {
            let ctx = Ctx::new(&c)?;
            let prep = eval::prepare(&ctx.cfg)?;
            let p = ctx.path("series.json");
            save_series(&prep.series, &prep.grid, &p)?;
            println!(
                "{} fields on {} grid points (sigma {:.4}) -> {}",
                prep.series.len(),
                prep.grid.len(),
                prep.sigma,
                p.display()
            );
        }
        Command::TrainPisa(c) => {
            let ctx = Ctx::new(&c)?;
            let prep = eval::prepare(&ctx.cfg)?;
            let (outcome, fd) = eval::train_pisa_stage(&ctx.cfg, &prep)?;
            let meta = |which: &str, epoch: usize| {
                json!({"which": which, "epoch": epoch, "config_hash": ctx.cfg.hash(), "seed": ctx.cfg.seed})
            };
            outcome.best.save(ctx.path("pisa_best.pfs"), meta("best", outcome.best_epoch))?;
            outcome.model.save(ctx.path("pisa_final.pfs"), meta("final", outcome.history.len()))?;
            outcome.history.save_csv(ctx.path("pisa_history.csv"))?;
            if let Some(fd) = fd {
                println!("gradient check: max relative error {:.3e}", fd.max_rel());
            }
            let initial = outcome.history.initial.map(|t| t.total).unwrap_or(f64::NAN);
            println!(
                "loss {initial:.6e} -> {:.6e} over {} epochs (best at epoch {})",
                outcome.history.final_total().unwrap_or(initial),
                outcome.history.len(),
                outcome.best_epoch
            );
        }
        Command::TrainBaseline(c) => {
            let ctx = Ctx::new(&c)?;
            let prep = eval::prepare(&ctx.cfg)?;
            let outcome = eval::train_baseline_stage(&ctx.cfg, &prep)?;
            outcome.model.save(
                ctx.path("baseline.pfs"),
                json!({"config_hash": ctx.cfg.hash(), "seed": ctx.cfg.seed}),
            )?;
            outcome.history.save_csv(ctx.path("baseline_history.csv"))?;
            println!("baseline trained for {} iterations", outcome.history.len());
        }
        Command::Predict(c) => {
            let ctx = Ctx::new(&c)?;
            let split = ctx.cfg.split;
            if split.test_steps == 0 {
                bail!("split.test_steps is 0; nothing to predict");
            }
            let prep = eval::prepare(&ctx.cfg)?;
            let grid = &prep.grid;
            let start = &prep.series.fields()[split.train_steps];
            let truth = &prep.series.fields()[split.train_steps + 1..=split.train_steps + split.test_steps];
            let mut columns: Vec<(&str, Vec<f64>)> = Vec::new();
            let pisa_path = ctx.path("pisa_best.pfs");
            if pisa_path.exists() {
                let model = SpectralPFModel::load(&pisa_path, grid)?;
                let r = rollout(&model, start, grid, split.test_steps, true, prep.series.tau())?;
                save_series(&r.predicted, grid, ctx.path("predicted_pisa.json"))?;
                columns.push(("pisa", per_step_kl(&r.predicted, truth, grid)?));
            }
            let base_path = ctx.path("baseline.pfs");
            if base_path.exists() {
                let model = ExpGenModel::load(&base_path, grid)?;
                let t0 = split.train_steps as f64 * prep.series.tau();
                let r = expgen_rollout(&model, start, split.test_steps, t0, grid)?;
                save_series(&r.predicted, grid, ctx.path("predicted_baseline.json"))?;
                columns.push(("baseline", per_step_kl(&r.predicted, truth, grid)?));
            }
            if columns.is_empty() {
                bail!("no checkpoints in {}; run `train-pisa` or `train-baseline` first", ctx.out.display());
            }
            let mut text = String::from("step");
            for (name, _) in &columns {
                text.push(',');
                text.push_str(name);
            }
            text.push('\n');
            for s in 0..split.test_steps {
                text.push_str(&(s + 1).to_string());
                for (_, v) in &columns {
                    text.push_str(&format!(",{}", v[s]));
                }
                text.push('\n');
            }
            std::fs::write(ctx.path("predict_kl.csv"), text)?;
            for (name, v) in &columns {
                println!("{name}: mean test KL {:.6e}", v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        Command::Evaluate(c) => {
            let ctx = Ctx::new(&c)?;
            let out = eval::run_experiment(&ctx.cfg, Some(&ctx.out))?;
            print_summary(&out.report);
            println!("report -> {}", ctx.path("report.json").display());
        }
        Command::TerminalDensity(c) => {
            let ctx = Ctx::new(&c)?;
            let p = ctx.path("pisa_best.pfs");
            require(&p, "train-pisa")?;
            let prep = eval::prepare(&ctx.cfg)?;
            let model = SpectralPFModel::load(&p, &prep.grid)?;
            let star = terminal_density(&model, &prep.grid)?;
            let a = &ctx.cfg.analysis;
            let conc = mass_concentration(&star, &prep.grid, &a.centers, a.radius)?;
            println!("mass within {} of the configured centres: {conc:.4}", a.radius);
            let (axes, bins, centers, radius) = match &a.heatmap {
                Some(h) => (h.axes, h.bins, h.centers.clone(), h.radius),
                None => ([0, 1], None, Vec::new(), 0.0),
            };
            let hm = export_heatmap(&star, &prep.grid, axes, bins, ctx.path("terminal_density.csv"))?;
            if !centers.is_empty() {
                println!(
                    "heatmap mass within {radius} of {centers:?}: {:.4}",
                    hm.mass_fraction_near(&centers, radius)
                );
            }
        }
        Command::Compare(c) => {
            let ctx = Ctx::new(&c)?;
            let p = ctx.path("report.json");
            require(&p, "evaluate")?;
            let report = EvalReport::load(&p)?;
            let (Some(a), Some(b)) = (&report.pisa, &report.baseline) else {
                bail!("the report does not contain both models");
            };
            let cmp = compare(("pisa", &a.test_kl), ("baseline", &b.test_kl), &ctx.cfg.windows())?;
            cmp.write_csv(std::io::BufWriter::new(std::fs::File::create(ctx.path("comparison.csv"))?))?;
            println!("{:<12} {:>14} {:>14} {:>10}", "window", "pisa", "baseline", "ratio");
            for w in &cmp.windows {
                println!("{:<12} {:>14.6e} {:>14.6e} {:>10.3}", w.name, w.first, w.second, w.ratio);
            }
        }
    }
    Ok(())
}

fn per_step_kl(
    predicted: &pf_spectra::density::DensitySeries,
    truth: &[pf_spectra::density::DensityField],
    grid: &pf_spectra::density::ReferenceGrid,
) -> anyhow::Result<Vec<f64>> {
    predicted.fields()[1..]
        .iter()
        .zip(truth)
        .map(|(p, q)| Ok(kl_divergence(p, q, grid, DEFAULT_KL_EPS)?.value))
        .collect()
}

fn print_summary(r: &EvalReport) {
    for (name, m) in [("pisa", &r.pisa), ("baseline", &r.baseline)] {
        if let Some(m) = m {
            println!(
                "{name}: training loss {:.6e} -> {:.6e}",
                m.training.initial.total, m.training.final_total
            );
            for w in &m.windows {
                println!("  {} (steps {}..{}): mean test KL {:.6e}", w.name, w.start, w.end, w.mean);
            }
        }
    }
    if let Some(t) = &r.terminal {
        println!(
            "terminal density: concentration {:.4}, fixed-point KL {:.3e} (reference {:.3e})",
            t.mass_concentration, t.fixed_point_kl, t.reference_kl
        );
    }
    if let Some(c) = &r.comparison {
        for w in c {
            info!("window {}: baseline / pisa = {:.3}", w.name, w.ratio);
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<pf_spectra::Error>()
                .map(pf_spectra::Error::exit_code)
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
