use std::f64::consts::PI;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::integrate::{rk4_step, VectorField};
use super::{load_trajectories, DomainBox, TrajectoryDataset};
use crate::error::{config_err, Result};

/// Per-agent random stream: agent `n` draws from `ChaCha8(seed ^ n)`.
pub(crate) fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ agent as u64)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

fn step_count(t_final: f64, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(config_err(format!("tau must be positive, got {tau}")));
    }
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(config_err(format!("t_final must be positive, got {t_final}")));
    }
    let k = (t_final / tau).round();
    if k < 1.0 || (k * tau - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(config_err(format!(
            "t_final = {t_final} is not a positive multiple of tau = {tau}"
        )));
    }
    Ok(k as usize)
}

fn uniform_in(rng: &mut ChaCha8Rng, b: &DomainBox) -> Vec<f64> {
    b.lower()
        .iter()
        .zip(b.upper())
        .map(|(lo, hi)| rng.random_range(*lo..*hi))
        .collect()
}

fn default_substeps() -> usize {
    1
}

/// Van der Pol oscillator `x1' = x2`, `x2' = mu (1 - x1^2) x2 - x1`.
#[derive(Debug, Clone, Copy)]
pub struct VanDerPol {
    pub mu: f64,
}

impl VectorField for VanDerPol {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
    }
}

/// Unicycle `x1' = u1 cos x3`, `x2' = u1 sin x3`, `x3' = u2` under a go-to-goal law
/// `u1 = k_v min(dist, v_max)`, `u2 = k_w wrap(bearing - x3)`.
#[derive(Debug, Clone, Copy)]
pub struct Unicycle {
    pub target: [f64; 2],
    pub k_v: f64,
    pub k_w: f64,
    pub v_max: f64,
}

impl VectorField for Unicycle {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let dx = self.target[0] - x[0];
        let dy = self.target[1] - x[1];
        let dist = dx.hypot(dy);
        let heading_err = if dist > 0.0 {
            wrap_angle(dy.atan2(dx) - x[2])
        } else {
            0.0
        };
        let u1 = self.k_v * dist.min(self.v_max);
        let u2 = self.k_w * heading_err;
        out[0] = u1 * x[2].cos();
        out[1] = u1 * x[2].sin();
        out[2] = u2;
    }
}

/// Gradient flow `x' = -grad V` of `V(x) = -log sum_j exp(-|x - c_j|^2 / (2 var))`.
#[derive(Debug, Clone)]
pub struct MixtureDrift {
    pub centers: Vec<Vec<f64>>,
    pub var: f64,
}

impl VectorField for MixtureDrift {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let logits: Vec<f64> = self
            .centers
            .iter()
            .map(|c| -x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * self.var))
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        out.fill(0.0);
        for (c, w) in self.centers.iter().zip(&weights) {
            let p = w / total;
            for m in 0..x.len() {
                out[m] += p * (c[m] - x[m]) / self.var;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VdpConfig {
    pub n_agents: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub t_final: f64,
    pub tau: f64,
    pub init_box: DomainBox,
    pub domain: DomainBox,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_mu() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnicycleConfig {
    pub n_agents: usize,
    pub targets: Vec<[f64; 2]>,
    /// `(k_v, k_w)`.
    pub gains: [f64; 2],
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    pub t_final: f64,
    pub tau: f64,
    /// Planar box the initial positions are drawn from.
    pub init_box: DomainBox,
    /// Planar box positions are clipped to; heading is wrapped to `(-pi, pi]`.
    pub domain: DomainBox,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_v_max() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDriftConfig {
    pub n_agents: usize,
    pub centers: Vec<Vec<f64>>,
    pub var: f64,
    pub t_final: f64,
    pub tau: f64,
    pub domain: DomainBox,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

/// Source of a trajectory dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemConfig {
    Vdp(VdpConfig),
    Unicycle(UnicycleConfig),
    MixtureDrift(MixtureDriftConfig),
    ExternalCsv {
        path: std::path::PathBuf,
        #[serde(default)]
        domain: Option<DomainBox>,
    },
}

pub fn simulate(config: &SystemConfig, seed: u64) -> Result<TrajectoryDataset> {
    match config {
        SystemConfig::Vdp(c) => simulate_vdp(c, seed),
        SystemConfig::Unicycle(c) => simulate_unicycle(c, seed),
        SystemConfig::MixtureDrift(c) => simulate_mixture_drift(c, seed),
        SystemConfig::ExternalCsv { path, domain } => {
            let (ds, report) = load_trajectories(path)?;
            if report.dropped_samples > 0 {
                log::info!(
                    "windowed {} to steps {}..={}, dropped {} samples",
                    path.display(),
                    report.window.0,
                    report.window.1,
                    report.dropped_samples
                );
            }
            match domain {
                Some(d) => ds.with_domain(d.clone()),
                None => Ok(ds),
            }
        }
    }
}

/// Integrates every agent independently; `field_for` builds the per-agent field from its
/// initial state, `post` fixes up each state after a substep (e.g. angle wrapping).
#[allow(clippy::too_many_arguments)]
fn integrate_agents<F, I, P>(
    n_agents: usize,
    n_steps: usize,
    tau: f64,
    substeps: usize,
    domain: &DomainBox,
    seed: u64,
    init: I,
    field_for: impl Fn(&[f64]) -> F,
    post: P,
) -> Result<TrajectoryDataset>
where
    F: VectorField,
    I: Fn(&mut ChaCha8Rng) -> Vec<f64>,
    P: Fn(&mut [f64]),
{
    if n_agents == 0 {
        return Err(config_err("n_agents must be at least 1"));
    }
    if substeps == 0 {
        return Err(config_err("substeps must be at least 1"));
    }
    let dim = domain.dim();
    let h = tau / substeps as f64;
    let mut states = Vec::with_capacity(n_agents * (n_steps + 1) * dim);
    let mut clipped = 0usize;
    for n in 0..n_agents {
        let mut rng = agent_rng(seed, n);
        let mut x = init(&mut rng);
        debug_assert_eq!(x.len(), dim);
        if domain.clip(&mut x) {
            clipped += 1;
        }
        let field = field_for(&x);
        states.extend_from_slice(&x);
        for _ in 0..n_steps {
            for _ in 0..substeps {
                x = rk4_step(&field, &x, h)?;
                post(&mut x);
            }
            if domain.clip(&mut x) {
                clipped += 1;
            }
            states.extend_from_slice(&x);
        }
    }
    if clipped > 0 {
        warn!("{clipped} state samples left the domain and were clipped");
    }
    Ok(TrajectoryDataset::new(n_agents, n_steps, tau, domain.clone(), states)?.with_clip_count(clipped))
}

pub fn simulate_vdp(config: &VdpConfig, seed: u64) -> Result<TrajectoryDataset> {
    if !(config.mu > 0.0) {
        return Err(config_err(format!("vdp mu must be positive, got {}", config.mu)));
    }
    if config.domain.dim() != 2 || config.init_box.dim() != 2 {
        return Err(config_err("vdp init_box and domain must be 2-dimensional"));
    }
    if !config.domain.contains_box(&config.init_box) {
        return Err(config_err("vdp init_box must lie inside the domain"));
    }
    let k = step_count(config.t_final, config.tau)?;
    let field = VanDerPol { mu: config.mu };
    integrate_agents(
        config.n_agents,
        k,
        config.tau,
        config.substeps,
        &config.domain,
        seed,
        |rng| uniform_in(rng, &config.init_box),
        |_| field,
        |_| {},
    )
}

pub fn simulate_unicycle(config: &UnicycleConfig, seed: u64) -> Result<TrajectoryDataset> {
    if config.targets.is_empty() {
        return Err(config_err("unicycle needs at least one target"));
    }
    let [k_v, k_w] = config.gains;
    if !(k_v > 0.0 && k_w > 0.0 && config.v_max > 0.0) {
        return Err(config_err(format!(
            "unicycle gains and v_max must be positive, got ({k_v}, {k_w}), {}",
            config.v_max
        )));
    }
    if config.domain.dim() != 2 || config.init_box.dim() != 2 {
        return Err(config_err("unicycle init_box and domain are planar (2-dimensional)"));
    }
    if !config.domain.contains_box(&config.init_box) {
        return Err(config_err("unicycle init_box must lie inside the domain"));
    }
    let k = step_count(config.t_final, config.tau)?;
    let domain = DomainBox::new(
        vec![config.domain.lower()[0], config.domain.lower()[1], -PI],
        vec![config.domain.upper()[0], config.domain.upper()[1], PI],
    )?;
    integrate_agents(
        config.n_agents,
        k,
        config.tau,
        config.substeps,
        &domain,
        seed,
        |rng| {
            let mut x = uniform_in(rng, &config.init_box);
            x.push(wrap_angle(rng.random_range(-PI..PI)));
            x
        },
        |x0| Unicycle {
            target: nearest_target(&config.targets, x0),
            k_v,
            k_w,
            v_max: config.v_max,
        },
        |x| x[2] = wrap_angle(x[2]),
    )
}

fn nearest_target(targets: &[[f64; 2]], x: &[f64]) -> [f64; 2] {
    let d2 = |t: &[f64; 2]| (t[0] - x[0]).powi(2) + (t[1] - x[1]).powi(2);
    *targets
        .iter()
        .min_by(|a, b| d2(a).total_cmp(&d2(b)))
        .expect("targets checked non-empty")
}

pub fn simulate_mixture_drift(config: &MixtureDriftConfig, seed: u64) -> Result<TrajectoryDataset> {
    if !(config.var > 0.0) {
        return Err(config_err(format!("mixture variance must be positive, got {}", config.var)));
    }
    if config.centers.is_empty() {
        return Err(config_err("mixture drift needs at least one center"));
    }
    for (j, c) in config.centers.iter().enumerate() {
        if !config.domain.contains(c) {
            return Err(config_err(format!("centers[{j}] = {c:?} lies outside the domain")));
        }
    }
    let k = step_count(config.t_final, config.tau)?;
    let field = MixtureDrift {
        centers: config.centers.clone(),
        var: config.var,
    };
    integrate_agents(
        config.n_agents,
        k,
        config.tau,
        config.substeps,
        &config.domain,
        seed,
        |rng| uniform_in(rng, &config.domain),
        |_| field.clone(),
        |_| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vdp_config(n: usize, t_final: f64) -> VdpConfig {
        VdpConfig {
            n_agents: n,
            mu: 1.0,
            t_final,
            tau: 0.01,
            init_box: DomainBox::cube(2, -3.0, 3.0).unwrap(),
            domain: DomainBox::cube(2, -6.0, 6.0).unwrap(),
            substeps: 1,
        }
    }

    #[test]
    fn vdp_origin_is_an_equilibrium() {
        let mut x = vec![0.0, 0.0];
        for _ in 0..1000 {
            x = rk4_step(&VanDerPol { mu: 1.0 }, &x, 0.01).unwrap();
        }
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn vdp_settles_on_limit_cycle() {
        let ds = simulate_vdp(&vdp_config(20, 50.0), 3).unwrap();
        assert_eq!(ds.n_steps(), 5000);
        for n in 0..ds.n_agents() {
            let amp = (4000..=5000)
                .map(|k| ds.state(n, k)[0].abs())
                .fold(0.0, f64::max);
            assert!((1.8..=2.2).contains(&amp), "agent {n} amplitude {amp}");
        }
    }

    #[test]
    fn t_final_must_be_multiple_of_tau() {
        let mut c = vdp_config(2, 1.05);
        c.tau = 0.01;
        assert!(simulate_vdp(&c, 0).is_ok());
        c.t_final = 1.0551;
        assert!(matches!(simulate_vdp(&c, 0), Err(crate::Error::Config(_))));
        c.t_final = -1.0;
        assert!(simulate_vdp(&c, 0).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_vdp(&vdp_config(5, 1.0), 11).unwrap();
        let b = simulate_vdp(&vdp_config(5, 1.0), 11).unwrap();
        let c = simulate_vdp(&vdp_config(5, 1.0), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states(), c.states());
    }

    fn unicycle_config(n: usize) -> UnicycleConfig {
        UnicycleConfig {
            n_agents: n,
            targets: vec![[-4.0, -4.0], [4.0, 4.0]],
            gains: [1.5, 4.0],
            v_max: 2.0,
            t_final: 8.0,
            tau: 0.01,
            init_box: DomainBox::cube(2, -7.0, 7.0).unwrap(),
            domain: DomainBox::cube(2, -8.0, 8.0).unwrap(),
            substeps: 1,
        }
    }

    #[test]
    fn unicycle_reference_shape() {
        let ds = simulate_unicycle(&unicycle_config(10), 0).unwrap();
        assert_eq!(ds.n_steps(), 800);
        assert_eq!(ds.dim(), 3);
    }

    #[test]
    fn unicycle_converges_to_targets() {
        let cfg = unicycle_config(1000);
        let ds = simulate_unicycle(&cfg, 5).unwrap();
        let k = ds.n_steps();
        let mut close = 0;
        for n in 0..ds.n_agents() {
            let target = nearest_target(&cfg.targets, ds.state(n, 0));
            let end = ds.state(n, k);
            if (end[0] - target[0]).hypot(end[1] - target[1]) < 1.0 {
                close += 1;
            }
            for k in 0..=k {
                let th = ds.state(n, k)[2];
                assert!(th > -PI && th <= PI);
            }
        }
        assert!(close as f64 >= 0.95 * ds.n_agents() as f64, "{close} of 1000");
    }

    #[test]
    fn unicycle_at_goal_stays_put() {
        let field = Unicycle {
            target: [4.0, 4.0],
            k_v: 1.5,
            k_w: 4.0,
            v_max: 2.0,
        };
        let mut x = vec![4.0, 4.0, 0.0];
        for _ in 0..800 {
            x = rk4_step(&field, &x, 0.01).unwrap();
        }
        assert!((x[0] - 4.0).abs() < 1e-6 && (x[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn unicycle_rejects_empty_targets() {
        let mut c = unicycle_config(3);
        c.targets.clear();
        assert!(matches!(simulate_unicycle(&c, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn mixture_drift_fixed_at_single_center() {
        let field = MixtureDrift {
            centers: vec![vec![1.0, -2.0, 0.5]],
            var: 0.2,
        };
        let mut x = vec![1.0, -2.0, 0.5];
        for _ in 0..600 {
            x = rk4_step(&field, &x, 0.01).unwrap();
        }
        for (a, b) in x.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_drift_descends_toward_centers() {
        let centers = vec![vec![-4.0; 5], vec![3.0; 5]];
        let cfg = MixtureDriftConfig {
            n_agents: 200,
            centers: centers.clone(),
            var: 0.2,
            t_final: 2.0,
            tau: 0.01,
            domain: DomainBox::cube(5, -8.0, 8.0).unwrap(),
            substeps: 1,
        };
        let ds = simulate_mixture_drift(&cfg, 9).unwrap();
        let nearest = |x: &[f64]| {
            centers
                .iter()
                .map(|c| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        for n in 0..ds.n_agents() {
            let d0 = nearest(ds.state(n, 0));
            let d1 = nearest(ds.state(n, ds.n_steps()));
            assert!(d1 < d0, "agent {n}: {d0} -> {d1}");
        }
    }

    #[test]
    fn mixture_center_outside_domain_rejected() {
        let cfg = MixtureDriftConfig {
            n_agents: 2,
            centers: vec![vec![9.0, 0.0]],
            var: 0.2,
            t_final: 1.0,
            tau: 0.01,
            domain: DomainBox::cube(2, -8.0, 8.0).unwrap(),
            substeps: 1,
        };
        assert!(matches!(simulate_mixture_drift(&cfg, 0), Err(crate::Error::Config(_))));
    }
}
