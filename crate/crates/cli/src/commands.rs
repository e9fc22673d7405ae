//! Subcommands. Each returns the CSV files it produced and summary lines;
//! nothing touches the filesystem here.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use seedbank::dual::{
    particle_of, state_index, subordinate_simulate, t_kernel_row, CtmcWalker, SubordinateWalk, DEFAULT_EPSILON,
};
use seedbank::envproc::{ergodic_summaries, quenched_limit_estimate, theta};
use seedbank::forward::{
    absorption_frequency, absorption_oracle, duality_check, harmonic_fixation, run_forward, sample_initial_state,
    DualityMode, ForwardState, StateSpace, Stop,
};
use seedbank::kernel::{lln_velocity_discrete, periodize, subordinate_params, SubordinateParams};
use seedbank::rational::{self, Rational};
use seedbank::spectral::{spectrum_report, DEFAULT_TOL};
use seedbank::stats::derive_stream;
use seedbank::{sample_environment, DualParticle, Environment, Error, Site};

use crate::config::{ExperimentConfig, Initial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenEnv,
    ForwardSim,
    FixationStudy,
    DualKernel,
    DualityCheck,
    Homogenize,
    Lln,
    Spectrum,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenEnv => "gen-env",
            Command::ForwardSim => "forward-sim",
            Command::FixationStudy => "fixation-study",
            Command::DualKernel => "dual-kernel",
            Command::DualityCheck => "duality-check",
            Command::Homogenize => "homogenize",
            Command::Lln => "lln",
            Command::Spectrum => "spectrum",
        }
    }
}

/// Files (name, contents) and human-readable summary lines.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<(String, String)>,
    pub summary: Vec<String>,
}

/// A CSV table whose rows all start with the config hash and root seed.
struct Table {
    prefix: String,
    text: String,
}

impl Table {
    fn new(hash: &str, seed: u64, columns: &[&str]) -> Self {
        Self {
            prefix: format!("{hash},{seed}"),
            text: format!("config_hash,seed,{}\n", columns.join(",")),
        }
    }

    fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.text, "{},{}", self.prefix, cells.join(","));
    }
}

/// Seed of environment `env_id`.
fn env_seed(cfg: &ExperimentConfig, env_id: u64) -> u64 {
    derive_stream(cfg.seed, &[1, env_id])
}

fn environment(cfg: &ExperimentConfig, env_id: u64) -> Environment {
    sample_environment(&cfg.field, cfg.geometry, env_seed(cfg, env_id))
}

fn require_torus(cfg: &ExperimentConfig, command: Command) -> Result<()> {
    if !cfg.geometry.is_torus() {
        bail!("geometry.L: {} needs a torus side, not lazy", command.name());
    }
    Ok(())
}

fn initial_state(cfg: &ExperimentConfig, env: &Environment, env_id: u64) -> Result<ForwardState> {
    match &cfg.initial {
        Initial::Explicit(st) => {
            st.validate(&env.torus_sizes()?).context("initial.X")?;
            Ok(st.clone())
        }
        Initial::Law(law) => Ok(sample_initial_state(env, &cfg.f_a, &cfg.f_d, *law, derive_stream(cfg.seed, &[2, env_id]))?),
    }
}

fn rat(r: &Rational) -> String {
    format!("{} ({r})", rational::to_f64(r))
}

fn params(cfg: &ExperimentConfig) -> Result<SubordinateParams> {
    Ok(SubordinateParams::new(&cfg.kernel, &cfg.lambda, cfg.field.k())?)
}

fn torus_params(cfg: &ExperimentConfig, env: &Environment) -> Result<SubordinateParams> {
    let folded = periodize(&cfg.kernel, env.geometry())?;
    Ok(subordinate_params(&folded, &cfg.lambda, cfg.field.k(), env)?)
}

pub fn run(command: Command, cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    match command {
        Command::GenEnv => gen_env(cfg, hash),
        Command::ForwardSim => forward_sim(cfg, hash),
        Command::FixationStudy => fixation_study(cfg, hash),
        Command::DualKernel => dual_kernel(cfg, hash),
        Command::DualityCheck => duality(cfg, hash),
        Command::Homogenize => homogenize(cfg, hash),
        Command::Lln => lln(cfg, hash),
        Command::Spectrum => spectrum(cfg, hash),
    }
}

fn gen_env(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::GenEnv)?;
    let mut t = Table::new(hash, cfg.seed, &["env_id", "env_seed", "site_index", "x", "y", "N", "M"]);
    for env_id in 0..cfg.env_count {
        let env = environment(cfg, env_id);
        for (i, s) in env.torus_sizes()?.iter().enumerate() {
            let site = cfg.geometry.site_of(i);
            t.row(&[
                env_id.to_string(),
                env_seed(cfg, env_id).to_string(),
                i.to_string(),
                site.x.to_string(),
                site.y.to_string(),
                s.n.to_string(),
                s.m.to_string(),
            ]);
        }
    }
    Ok(Report {
        files: vec![("environment.csv".into(), t.text)],
        summary: vec![format!("rho={}", rat(&cfg.field.rho_exact()))],
    })
}

fn forward_sim(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::ForwardSim)?;
    let env = environment(cfg, 0);
    let st = initial_state(cfg, &env, 0)?;
    let stop = match cfg.t_grid.first() {
        Some(&t) => Stop::Time(t),
        None => Stop::Absorption,
    };
    let outcomes: Vec<_> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let s = derive_stream(cfg.seed, &[3, r]);
            run_forward(&st, &env, &cfg.kernel, &cfg.lambda, stop, s).map(|o| (r, s, o))
        })
        .collect::<Result<_, Error>>()?;
    let mut t = Table::new(
        hash,
        cfg.seed,
        &["env_seed", "run_id", "run_seed", "t_final", "events", "absorbed", "fixation_flag"],
    );
    let mut hearts = 0u64;
    for (r, s, o) in &outcomes {
        let flag = (o.absorption == seedbank::forward::Absorption::AllHeart) as u8;
        hearts += flag as u64;
        t.row(&[
            env_seed(cfg, 0).to_string(),
            r.to_string(),
            s.to_string(),
            o.elapsed.to_string(),
            o.events.to_string(),
            o.absorption.label().into(),
            flag.to_string(),
        ]);
    }
    let mut summary = vec![format!("fixation_frequency={}", hearts as f64 / cfg.replicas.max(1) as f64)];
    if let Ok(h) = harmonic_fixation(&st, &env, &cfg.kernel) {
        summary.push(format!("harmonic_fixation={}", rat(&h)));
    }
    Ok(Report {
        files: vec![("forward_runs.csv".into(), t.text)],
        summary,
    })
}

fn fits_oracle(env: &Environment) -> bool {
    StateSpace::new(env).is_ok()
}

fn fixation_study(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::FixationStudy)?;
    let mut t = Table::new(
        hash,
        cfg.seed,
        &["env_id", "env_seed", "exact_fixation", "mc_estimate", "ci_halfwidth", "oracle"],
    );
    let mut sum = 0.0;
    let mut exact_count = 0u64;
    for env_id in 0..cfg.env_count {
        let env = environment(cfg, env_id);
        let st = initial_state(cfg, &env, env_id)?;
        let exact = match harmonic_fixation(&st, &env, &cfg.kernel) {
            Ok(h) => Some(rational::to_f64(&h)),
            Err(Error::AsymmetricKernel) => None,
            Err(e) => return Err(e.into()),
        };
        let (mc, hw) = if cfg.replicas >= 2 {
            let (m, h) =
                absorption_frequency(&st, &env, &cfg.kernel, &cfg.lambda, cfg.replicas, derive_stream(cfg.seed, &[3, env_id]))?;
            (m.to_string(), h.to_string())
        } else {
            (String::new(), String::new())
        };
        let oracle = if fits_oracle(&env) {
            absorption_oracle(&env, &cfg.kernel, &cfg.lambda, &st)?.to_string()
        } else {
            String::new()
        };
        if let Some(e) = exact {
            sum += e;
            exact_count += 1;
        }
        t.row(&[
            env_id.to_string(),
            env_seed(cfg, env_id).to_string(),
            exact.map(|e| e.to_string()).unwrap_or_default(),
            mc,
            hw,
            oracle,
        ]);
    }
    let mut summary = Vec::new();
    if exact_count > 0 {
        summary.push(format!("mean_exact_fixation={}", sum / exact_count as f64));
    }
    if matches!(cfg.initial, Initial::Law(_)) {
        summary.push(format!("theta={}", rat(&theta(&cfg.field, &cfg.f_a, &cfg.f_d)?)));
    }
    Ok(Report {
        files: vec![("fixation_study.csv".into(), t.text)],
        summary,
    })
}

fn dual_kernel(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::DualKernel)?;
    if cfg.t_grid.is_empty() {
        bail!("horizon.t: dual-kernel needs at least one time");
    }
    let env = environment(cfg, 0);
    let g = *env.geometry();
    let p = torus_params(cfg, &env)?;
    let start = cfg.dual_start.unwrap_or(DualParticle::active(Site::ORIGIN));
    let start = DualParticle::new(g.wrap(start.site), start.active);
    let mut table = Table::new(
        hash,
        cfg.seed,
        &["t", "from_site_index", "from_activity", "to_site_index", "to_activity", "exact", "poissonized_mc", "ctmc_mc"],
    );
    for (k, &t) in cfg.t_grid.iter().enumerate() {
        let row = t_kernel_row(&env, &p, start, t, DEFAULT_EPSILON)?;
        let n = row.len();
        let tally = |ends: Vec<DualParticle>| {
            let mut c = vec![0u64; n];
            for e in ends {
                c[state_index(&g, e)] += 1;
            }
            c
        };
        let poisson_ends: Vec<DualParticle> = (0..cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let path = subordinate_simulate(start, &p, &env, 0, derive_stream(cfg.seed, &[4, k as u64, r]), Some(t));
                *path.last().expect("non-empty path")
            })
            .collect();
        let ctmc_ends: Vec<DualParticle> = (0..cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let mut w = CtmcWalker::new(start, &env, &cfg.kernel, &cfg.lambda, derive_stream(cfg.seed, &[5, k as u64, r]))
                    .expect("validated parameters");
                w.advance_to(t)
            })
            .collect();
        let (pc, cc) = (tally(poisson_ends), tally(ctmc_ends));
        let denom = cfg.replicas.max(1) as f64;
        for (c, &exact) in row.iter().enumerate() {
            let to = particle_of(&g, c);
            table.row(&[
                t.to_string(),
                g.index(start.site).to_string(),
                start.alpha().to_string(),
                g.index(to.site).to_string(),
                to.alpha().to_string(),
                exact.to_string(),
                (pc[c] as f64 / denom).to_string(),
                (cc[c] as f64 / denom).to_string(),
            ]);
        }
    }
    Ok(Report {
        files: vec![("dual_kernel.csv".into(), table.text)],
        summary: vec![format!("uniform_rate={} q_s={}", rat(p.uniform_rate()), rat(p.q_s()))],
    })
}

fn duality(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::DualityCheck)?;
    if cfg.t_grid.is_empty() {
        bail!("horizon.t: duality-check needs at least one time");
    }
    let env = environment(cfg, 0);
    let g = *env.geometry();
    let st = initial_state(cfg, &env, 0)?;
    let etas: Vec<DualParticle> = match cfg.dual_start {
        Some(p) => vec![p],
        None => (0..2 * env.torus_sizes()?.len()).map(|c| particle_of(&g, c)).collect(),
    };
    let exact = fits_oracle(&env);
    let mut table = Table::new(
        hash,
        cfg.seed,
        &["t", "eta_site_index", "eta_activity", "mode", "lhs", "rhs", "abs_diff", "lhs_halfwidth"],
    );
    let mut worst: f64 = 0.0;
    for (k, &t) in cfg.t_grid.iter().enumerate() {
        for (e, eta) in etas.iter().enumerate() {
            let mode = if exact {
                DualityMode::Exact
            } else {
                DualityMode::MonteCarlo {
                    replicas: cfg.replicas,
                    seed: derive_stream(cfg.seed, &[6, k as u64, e as u64]),
                }
            };
            let d = duality_check(&st, &env, &cfg.kernel, &cfg.lambda, *eta, t, mode)?;
            worst = worst.max((d.lhs - d.rhs).abs());
            table.row(&[
                t.to_string(),
                g.index(eta.site).to_string(),
                eta.alpha().to_string(),
                if exact { "exact" } else { "monte-carlo" }.into(),
                d.lhs.to_string(),
                d.rhs.to_string(),
                (d.lhs - d.rhs).abs().to_string(),
                d.lhs_halfwidth.to_string(),
            ]);
        }
    }
    Ok(Report {
        files: vec![("duality.csv".into(), table.text)],
        summary: vec![format!("max_abs_diff={worst}")],
    })
}

fn homogenize(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    let th = theta(&cfg.field, &cfg.f_a, &cfg.f_d)?;
    let rho = cfg.field.rho_exact();
    let mut summary = vec![format!("theta={} rho={}", rat(&th), rat(&rho))];
    if !cfg.kernel.is_recurrence_regime() {
        summary.push("note: kernel is outside the recurrence regime (d <= 2, symmetric)".into());
    }
    let mut table = Table::new(hash, cfg.seed, &["env_id", "env_seed", "t", "estimate", "ci_halfwidth", "theta"]);
    let alpha0 = cfg.dual_start.map(|p| p.active).unwrap_or(true);
    let th_f = rational::to_f64(&th);
    if cfg.replicas >= 2 {
        for env_id in 0..cfg.env_count {
            let env = environment(cfg, env_id);
            for (k, &t) in cfg.t_grid.iter().enumerate() {
                let est = quenched_limit_estimate(
                    &env,
                    &cfg.kernel,
                    &cfg.lambda,
                    alpha0,
                    &cfg.f_a,
                    &cfg.f_d,
                    t,
                    cfg.replicas,
                    derive_stream(cfg.seed, &[7, env_id, k as u64]),
                )?;
                table.row(&[
                    env_id.to_string(),
                    env_seed(cfg, env_id).to_string(),
                    t.to_string(),
                    est.mean.to_string(),
                    est.halfwidth.to_string(),
                    th_f.to_string(),
                ]);
                summary.push(format!("env {env_id} t={t}: estimate={} +- {}", est.mean, est.halfwidth));
            }
        }
    }
    Ok(Report {
        files: vec![("homogenize.csv".into(), table.text)],
        summary,
    })
}

fn lln(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    if cfg.steps < 100 {
        bail!("horizon.steps: lln needs at least 100 steps");
    }
    let p = params(cfg)?;
    let rho = cfg.field.rho_exact();
    let (vx, vy) = lln_velocity_discrete(&p, &rho);
    let act = Rational::from_integer(1.into()) / (Rational::from_integer(1.into()) + &rho);
    let thin = (cfg.steps / 1000).max(1);
    let runs: Vec<_> = (0..cfg.replicas)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let es = env_seed(cfg, w);
            let ws = derive_stream(cfg.seed, &[8, w]);
            let env = sample_environment(&cfg.field, cfg.geometry, es);
            let g = *env.geometry();
            let mut trace = Vec::new();
            let (mut n, mut active, mut pos, mut prev) = (0u64, 0u64, Site::ORIGIN, None::<Site>);
            let walk = SubordinateWalk::new(DualParticle::active(Site::ORIGIN), &p, &env, ws).inspect(|s| {
                if let Some(q) = prev {
                    pos = pos + g.centered(s.site - q);
                    n += 1;
                    if w == 0 && n % thin == 0 {
                        trace.push((n, pos, active as f64 / n as f64));
                    }
                }
                active += s.active as u64;
                prev = Some(s.site);
            });
            let s = ergodic_summaries(&g, walk, cfg.steps, 100)?;
            Ok((w, es, ws, s, trace))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(
        hash,
        cfg.seed,
        &[
            "walk_id",
            "env_seed",
            "walk_seed",
            "steps",
            "velocity_x",
            "velocity_x_halfwidth",
            "velocity_y",
            "velocity_y_halfwidth",
            "activity_fraction",
            "activity_halfwidth",
            "velocity_target_x",
            "velocity_target_y",
            "activity_target",
        ],
    );
    let mut trace_table = Table::new(hash, cfg.seed, &["walk_id", "n", "x", "y", "running_activity"]);
    for (w, es, ws, s, trace) in &runs {
        table.row(&[
            w.to_string(),
            es.to_string(),
            ws.to_string(),
            (s.horizon as u64).to_string(),
            s.velocity.0.to_string(),
            s.velocity_halfwidth.0.to_string(),
            s.velocity.1.to_string(),
            s.velocity_halfwidth.1.to_string(),
            s.activity_fraction.to_string(),
            s.activity_halfwidth.to_string(),
            rational::to_f64(&vx).to_string(),
            rational::to_f64(&vy).to_string(),
            rational::to_f64(&act).to_string(),
        ]);
        for (n, pos, a) in trace {
            trace_table.row(&[w.to_string(), n.to_string(), pos.x.to_string(), pos.y.to_string(), a.to_string()]);
        }
    }
    Ok(Report {
        files: vec![("lln.csv".into(), table.text), ("lln_trajectory.csv".into(), trace_table.text)],
        summary: vec![
            format!("velocity_target=({}, {})", rat(&vx), rat(&vy)),
            format!("activity_target={} rho={}", rat(&act), rat(&rho)),
        ],
    })
}

fn spectrum(cfg: &ExperimentConfig, hash: &str) -> Result<Report> {
    require_torus(cfg, Command::Spectrum)?;
    let side = cfg.geometry.side().expect("torus");
    let mut table = Table::new(
        hash,
        cfg.seed,
        &["L", "env_id", "env_seed", "modulus_max", "one_multiplicity", "gap_to_minus_one", "db_residual"],
    );
    let results: Vec<_> = (0..cfg.env_count)
        .into_par_iter()
        .map(|e| -> Result<_> {
            let env = environment(cfg, e);
            let p = torus_params(cfg, &env)?;
            let q = seedbank::dual::exact_transition_kernel(&env, &p, seedbank::KernelMode::OneStep)?;
            let pi = match seedbank::dual::single_particle_stationary(&env, &p) {
                Ok(pi) => Some(pi.iter().map(rational::to_f64).collect::<Vec<f64>>()),
                Err(Error::AsymmetricKernel) => None,
                Err(err) => return Err(err.into()),
            };
            Ok((e, spectrum_report(&q, pi.as_deref(), DEFAULT_TOL)?))
        })
        .collect::<Result<_>>()?;
    let mut min_gap = f64::INFINITY;
    for (e, r) in &results {
        min_gap = min_gap.min(r.gap_to_minus_one);
        table.row(&[
            side.to_string(),
            e.to_string(),
            env_seed(cfg, *e).to_string(),
            r.modulus_max.to_string(),
            r.one_multiplicity.to_string(),
            r.gap_to_minus_one.to_string(),
            r.detailed_balance_residual.to_string(),
        ]);
    }
    Ok(Report {
        files: vec![("spectrum.csv".into(), table.text)],
        summary: vec![format!("environments={} min_gap_to_minus_one={min_gap}", results.len())],
    })
}
