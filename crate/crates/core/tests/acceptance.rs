//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` doubles as a scorecard.
//! The desk-scale two-target run is shared between the criterion-4 tests.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use pf_spectra::baseline::{expgen_fd_check, init_expgen};
use pf_spectra::density::{
    build_grid, density_series, integrate, kde_density, normalize, DensityField, DensitySeries,
    GridSpec, ReferenceGrid,
};
use pf_spectra::dynamics::{simulate_vdp, DomainBox, VdpConfig};
use pf_spectra::eval::{run_experiment, ExperimentConfig, ExperimentOutput};
use pf_spectra::model::{init_model, pf_step, rollout, LinearSpectralOperator, ModelOptions};
use pf_spectra::trainer::{fd_check, loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Written to the process stdout directly so the line survives the harness's capture.
fn report(id: &str, pass: bool, detail: String) {
    let line = format!("{} criterion {id}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_config(name: &str) -> (ExperimentOutput, String, tempfile::TempDir) {
    let cfg = ExperimentConfig::load(config_path(name)).expect("config loads");
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, Some(dir.path())).expect("experiment runs");
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    (out, text, dir)
}

struct Desk {
    out: ExperimentOutput,
    report_json: String,
    _dir: tempfile::TempDir,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let (out, report_json, dir) = run_config("unicycle.json");
        Desk {
            out,
            report_json,
            _dir: dir,
        }
    })
}

fn vdp_problem(k: usize, seed: u64) -> (ReferenceGrid, DensitySeries) {
    let cfg = VdpConfig {
        n_agents: 60,
        mu: 1.0,
        t_final: 0.1 * k as f64,
        tau: 0.1,
        init_box: DomainBox::cube(2, -2.0, 2.0).unwrap(),
        domain: DomainBox::cube(2, -3.0, 3.0).unwrap(),
        substeps: 4,
    };
    let ds = simulate_vdp(&cfg, seed).unwrap();
    let grid = build_grid(ds.domain(), &GridSpec::Lattice { per_axis: 6 }, 0).unwrap();
    let series = density_series(&ds, &grid, 1.0).unwrap();
    (grid, series)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let (grid, series) = vdp_problem(6, seed);
        let opts = ModelOptions {
            hidden: vec![8, 8],
            ..ModelOptions::default()
        };
        let model = init_model(3, &grid, &opts, seed).unwrap();
        let r = fd_check(&model, &series, &grid, 1.0, 1.0, 20, 1e-5, seed).unwrap();
        worst = worst.max(r.max_rel_gamma).max(r.max_rel_theta);
        let base = init_expgen(&grid, &[8, 8], series.tau(), 1.0, seed).unwrap();
        worst = worst.max(expgen_fd_check(&base, &series, &grid, 20, 1e-5, seed).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report("1", pass, format!("max relative error {worst:.3e} (< 1e-4), {secs:.1} s (< 60 s)"));
    assert!(pass);
}

fn block_indicator(grid: &ReferenceGrid, cells: std::ops::Range<usize>) -> DensityField {
    let v: Vec<f64> = (0..grid.len()).map(|r| if cells.contains(&r) { 1.0 } else { 0.0 }).collect();
    normalize(&DensityField::new(v, grid).unwrap(), grid, false).unwrap()
}

fn mixture(grid: &ReferenceGrid, basis: &[DensityField], c: &[f64]) -> DensityField {
    let mut v = vec![0.0; grid.len()];
    for (g, ci) in basis.iter().zip(c) {
        for (o, x) in v.iter_mut().zip(g.values()) {
            *o += ci * x;
        }
    }
    normalize(&DensityField::new(v, grid).unwrap(), grid, false).unwrap()
}

#[test]
fn criterion_2_exact_decomposition_fixture() {
    let domain = DomainBox::cube(1, 0.0, 1.0).unwrap();
    let grid = build_grid(&domain, &GridSpec::Lattice { per_axis: 40 }, 0).unwrap();
    let basis = vec![
        block_indicator(&grid, 2..10),
        block_indicator(&grid, 14..22),
        block_indicator(&grid, 27..37),
    ];
    let op = LinearSpectralOperator::cyclic(&grid, basis.clone()).unwrap();
    let mut c = vec![0.6, 0.3, 0.1];
    let mut fields = Vec::new();
    for _ in 0..7 {
        fields.push(mixture(&grid, &basis, &c));
        c.rotate_right(1);
    }
    let series = DensitySeries::new(fields, 0.1, None).unwrap();
    let total = loss(&op, &series, &grid, 1.0, 1.0).unwrap().total;
    let mut sup: f64 = 0.0;
    for i in 0..3 {
        let stepped = pf_step(&op, &basis[i], &grid).unwrap();
        sup = sup.max(stepped.sup_distance(&basis[(i + 1) % 3]));
    }
    let pass = total.abs() < 1e-8 && sup < 1e-9;
    report("2", pass, format!("loss {total:.3e} (< 1e-8), permutation sup-error {sup:.3e} (< 1e-9)"));
    assert!(pass);
}

#[test]
fn criterion_3_projected_rollouts_keep_unit_mass() {
    let d = desk();
    let model = d.out.pisa.as_ref().expect("pisa trained");
    let prep = &d.out.prepared;
    let grid = &prep.grid;
    let fields = prep.series.fields();
    let starts = [
        fields[0].clone(),
        fields[fields.len() / 2].clone(),
        normalize(&DensityField::constant(1.0, grid).unwrap(), grid, false).unwrap(),
    ];
    let mut worst_mass: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    let mut negative = false;
    for rho0 in &starts {
        let r = rollout(model, rho0, grid, 100, true, prep.series.tau()).unwrap();
        for f in &r.predicted.fields()[1..] {
            negative |= f.values().iter().any(|v| *v < 0.0);
            worst_mass = worst_mass.max((integrate(f, grid).unwrap() - 1.0).abs());
        }
        for (m, a) in r.raw_mass.iter().zip(&r.coefficient_sum) {
            worst_identity = worst_identity.max((m - a).abs());
        }
    }
    let pass = !negative && worst_mass <= 1e-9 && worst_identity <= 1e-9;
    report(
        "3",
        pass,
        format!(
            "non-negative {}, max |mass - 1| {worst_mass:.2e}, max |raw mass - sum A| {worst_identity:.2e} (<= 1e-9)",
            !negative
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4a_training_halves_the_loss() {
    let p = desk().out.report.pisa.as_ref().unwrap();
    let (init, fin) = (p.training.initial.total, p.training.final_total);
    let pass = fin <= 0.5 * init;
    report("4a", pass, format!("PISA loss {init:.4e} -> {fin:.4e} (<= 0.5 x initial)"));
    assert!(pass);
}

fn window_mean(r: &pf_spectra::eval::ModelReport, name: &str) -> f64 {
    r.windows.iter().find(|w| w.name == name).expect("window configured").mean
}

#[test]
fn criterion_4b_long_horizon_beats_baseline() {
    let r = &desk().out.report;
    let pisa = window_mean(r.pisa.as_ref().unwrap(), "late");
    let base = window_mean(r.baseline.as_ref().unwrap(), "late");
    let pass = pisa <= 0.5 * base;
    report("4b", pass, format!("last-100-step mean KL: PISA {pisa:.4e}, baseline {base:.4e} (PISA <= 0.5 x baseline)"));
    assert!(pass);
}

#[test]
fn criterion_4c_terminal_density_concentrates_on_targets() {
    let t = desk().out.report.terminal.as_ref().unwrap();
    let pass = t.mass_concentration >= 0.7;
    report(
        "4c",
        pass,
        format!("terminal mass within {} of the targets: {:.4} (>= 0.70)", t.radius, t.mass_concentration),
    );
    assert!(pass);
}

#[test]
fn criterion_4d_terminal_density_is_nearly_fixed() {
    let t = desk().out.report.terminal.as_ref().unwrap();
    let pass = t.fixed_point_kl <= 0.1 * t.reference_kl;
    report(
        "4d",
        pass,
        format!("D(P rho* || rho*) {:.4e} vs D(rho_0 || rho*) {:.4e} (<= 0.1 x)", t.fixed_point_kl, t.reference_kl),
    );
    assert!(pass);
}

#[test]
fn criterion_5_five_dimensional_mixture() {
    let start = std::time::Instant::now();
    let (out, _, _dir) = run_config("mixture5d.json");
    let r = &out.report;
    let frac = r.terminal.as_ref().unwrap().heatmap_fraction.unwrap();
    let pisa = window_mean(r.pisa.as_ref().unwrap(), "final-second");
    let base = window_mean(r.baseline.as_ref().unwrap(), "final-second");
    let secs = start.elapsed().as_secs_f64();
    let pass = frac >= 0.6 && pisa <= base;
    report(
        "5",
        pass,
        format!(
            "heatmap mass near the targets {frac:.4} (>= 0.60); final-second KL PISA {pisa:.4e} vs baseline {base:.4e}; {secs:.0} s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_kde_mass_and_limit_cycle() {
    let domain = DomainBox::cube(1, -6.0, 6.0).unwrap();
    let grid = build_grid(&domain, &GridSpec::Lattice { per_axis: 256 }, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mass = integrate(&kde_density(&samples, &grid, 0.3).unwrap(), &grid).unwrap();

    let cfg = VdpConfig {
        n_agents: 20,
        mu: 1.0,
        t_final: 50.0,
        tau: 0.01,
        init_box: DomainBox::cube(2, -1.0, 1.0).unwrap(),
        domain: DomainBox::cube(2, -6.0, 6.0).unwrap(),
        substeps: 1,
    };
    let ds = simulate_vdp(&cfg, 9).unwrap();
    let from = (40.0 / cfg.tau).round() as usize;
    let mut amp: f64 = 0.0;
    for k in from..=ds.n_steps() {
        for a in 0..ds.n_agents() {
            amp = amp.max(ds.state(a, k)[0].abs());
        }
    }
    let pass = (mass - 1.0).abs() <= 0.02 && (1.8..=2.2).contains(&amp) && ds.clipped() == 0;
    report("6", pass, format!("KDE mass {mass:.5} (1 +/- 0.02), Van der Pol amplitude {amp:.4} (in [1.8, 2.2])"));
    assert!(pass);
}

#[test]
fn criterion_7_reruns_are_byte_identical() {
    let first = &desk().report_json;
    let (_, second, _dir) = run_config("unicycle.json");
    let pass = *first == second;
    report("7", pass, format!("report of a repeated run is byte-identical: {pass}"));
    assert!(pass);
}
