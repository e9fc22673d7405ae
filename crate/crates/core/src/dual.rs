//! Single-particle dual: the continuous-time walker on `Z^d x {0, 1}`, its
//! uniformized subordinate chain, exact torus transition kernels and the
//! stationary law.
//!
//! Rates of the continuous-time chain from `(i, alpha)`:
//! - active (`alpha = 1`): jump to `j` at rate `a(0, j - i)`, fall dormant at
//!   rate `lambda`;
//! - dormant (`alpha = 0`): wake up at rate `lambda K_i`, no migration.
//!
//! On a torus, states are indexed `2 * site_index + alpha`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_traits::{One, Zero};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::env::{ColonySize, Environment, Geometry, Site};
use crate::error::{Error, Result};
use crate::kernel::{MigrationKernel, SubordinateParams};
use crate::rational::{self, Rational};
use crate::stats::{rng_from_seed, StreamRng};

/// Largest `2 L^d` for which dense torus matrices are built.
pub const MAX_MATRIX_DIM: usize = 4096;

/// Default Poisson-tail budget for t-kernels.
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DualParticle {
    pub site: Site,
    pub active: bool,
}

impl DualParticle {
    pub const fn new(site: Site, active: bool) -> Self {
        Self { site, active }
    }

    pub const fn active(site: Site) -> Self {
        Self { site, active: true }
    }

    pub const fn dormant(site: Site) -> Self {
        Self {
            site,
            active: false,
        }
    }

    /// `alpha`: 1 active, 0 dormant.
    pub fn alpha(&self) -> u8 {
        self.active as u8
    }
}

/// Index of a particle in torus state space.
pub fn state_index(geometry: &Geometry, p: DualParticle) -> usize {
    2 * geometry.index(p.site) + p.alpha() as usize
}

pub fn particle_of(geometry: &Geometry, index: usize) -> DualParticle {
    DualParticle::new(geometry.site_of(index / 2), index % 2 == 1)
}

/// Per-walk memo of colony sizes. Lazy environments are materialized on
/// first visit; torus lookups go straight to storage.
pub(crate) struct SizeCache<'a> {
    env: &'a Environment,
    lo: i64,
    line: Vec<Option<ColonySize>>,
    plane: HashMap<Site, ColonySize>,
}

impl<'a> SizeCache<'a> {
    pub(crate) fn new(env: &'a Environment) -> Self {
        Self {
            env,
            lo: 0,
            line: Vec::new(),
            plane: HashMap::new(),
        }
    }

    #[inline]
    pub(crate) fn get(&mut self, site: Site) -> ColonySize {
        if self.env.is_torus() {
            return self.env.sizes(site);
        }
        if self.env.geometry().dim() == 2 {
            let env = self.env;
            return *self.plane.entry(site).or_insert_with(|| env.sizes(site));
        }
        let x = site.x;
        if self.line.is_empty() {
            self.lo = x - 64;
            self.line = vec![None; 129];
        }
        if x < self.lo {
            let grow = ((self.lo - x) as usize).max(self.line.len());
            let mut fresh = vec![None; grow];
            fresh.append(&mut self.line);
            self.line = fresh;
            self.lo -= grow as i64;
        } else if x >= self.lo + self.line.len() as i64 {
            let need = (x - self.lo + 1) as usize;
            let new_len = need.max(2 * self.line.len());
            self.line.resize(new_len, None);
        }
        let slot = &mut self.line[(x - self.lo) as usize];
        match slot {
            Some(s) => *s,
            None => {
                let s = self.env.sizes(site);
                *slot = Some(s);
                s
            }
        }
    }
}

/// Cumulative jump table for sampling offsets.
#[derive(Debug, Clone)]
pub(crate) struct JumpTable {
    offsets: Vec<Site>,
    cumulative: Vec<f64>,
    total: f64,
}

impl JumpTable {
    pub(crate) fn new(weights: &[(Site, f64)]) -> Self {
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|(_, w)| {
                acc += w;
                acc / total
            })
            .collect();
        Self {
            offsets: weights.iter().map(|(s, _)| *s).collect(),
            cumulative,
            total,
        }
    }

    pub(crate) fn total(&self) -> f64 {
        self.total
    }

    #[inline]
    pub(crate) fn sample(&self, u: f64) -> Site {
        let i = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.offsets.len() - 1);
        self.offsets[i]
    }
}

/// Continuous-time walker with the dual rates.
pub struct CtmcWalker<'a> {
    env: &'a Environment,
    cache: SizeCache<'a>,
    moves: JumpTable,
    lambda: f64,
    state: DualParticle,
    time: f64,
    rng: StreamRng,
}

impl<'a> CtmcWalker<'a> {
    pub fn new(
        eta0: DualParticle,
        env: &'a Environment,
        kernel: &MigrationKernel,
        lambda: &Rational,
        seed: u64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        check_dims(env, kernel)?;
        Ok(Self {
            env,
            cache: SizeCache::new(env),
            moves: JumpTable::new(&kernel.moves_f64()),
            lambda: rational::to_f64(lambda),
            state: DualParticle::new(env.geometry().wrap(eta0.site), eta0.active),
            time: 0.0,
            rng: rng_from_seed(seed),
        })
    }

    pub fn state(&self) -> DualParticle {
        self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    fn exit_rate(&mut self) -> f64 {
        if self.state.active {
            self.moves.total() + self.lambda
        } else {
            let s = self.cache.get(self.state.site);
            self.lambda * s.n as f64 / s.m as f64
        }
    }

    /// Holding time and the next state (does not advance the clock).
    fn propose(&mut self) -> (f64, DualParticle) {
        let rate = self.exit_rate();
        let e: f64 = Exp1.sample(&mut self.rng);
        let dt = e / rate;
        let next = if self.state.active {
            let u: f64 = self.rng.random::<f64>() * rate;
            if u < self.lambda {
                DualParticle::dormant(self.state.site)
            } else {
                let off = self.moves.sample(self.rng.random::<f64>());
                DualParticle::active(self.env.geometry().wrap(self.state.site + off))
            }
        } else {
            DualParticle::active(self.state.site)
        };
        (dt, next)
    }

    /// Performs one jump; returns its time.
    pub fn step(&mut self) -> f64 {
        let (dt, next) = self.propose();
        self.time += dt;
        self.state = next;
        self.time
    }

    /// Runs until `t`, returning the state at time `t`.
    pub fn advance_to(&mut self, t: f64) -> DualParticle {
        loop {
            let (dt, next) = self.propose();
            if self.time + dt > t {
                // Memoryless: the discarded proposal does not bias the law.
                self.time = t;
                return self.state;
            }
            self.time += dt;
            self.state = next;
        }
    }
}

fn check_lambda(lambda: &Rational) -> Result<()> {
    if *lambda <= Rational::zero() {
        Err(Error::NonPositiveLambda)
    } else {
        Ok(())
    }
}

fn check_dims(env: &Environment, kernel: &MigrationKernel) -> Result<()> {
    if env.geometry().dim() != kernel.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {}-dimensional, environment is {}-dimensional",
            kernel.dim(),
            env.geometry().dim()
        )));
    }
    Ok(())
}

/// Exact CTMC path up to `t_max`: jump times with post-jump states, starting
/// with `(0, eta0)`.
pub fn ctmc_simulate(
    eta0: DualParticle,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    t_max: f64,
    seed: u64,
) -> Result<Vec<(f64, DualParticle)>> {
    let mut w = CtmcWalker::new(eta0, env, kernel, lambda, seed)?;
    let mut path = vec![(0.0, w.state())];
    loop {
        let (dt, next) = w.propose();
        if w.time + dt > t_max {
            break;
        }
        w.time += dt;
        w.state = next;
        path.push((w.time, next));
    }
    Ok(path)
}

/// Discrete subordinate chain as an endless iterator of states. The first
/// item is the starting state.
pub struct SubordinateWalk<'a> {
    env: &'a Environment,
    cache: SizeCache<'a>,
    p_hat: JumpTable,
    q_s: f64,
    lambda_over_r: f64,
    state: DualParticle,
    started: bool,
    rng: StreamRng,
}

impl<'a> SubordinateWalk<'a> {
    pub fn new(
        eta0: DualParticle,
        params: &SubordinateParams,
        env: &'a Environment,
        seed: u64,
    ) -> Self {
        let weights: Vec<(Site, f64)> = params
            .p_hat()
            .iter()
            .map(|(s, p)| (*s, rational::to_f64(p)))
            .collect();
        Self {
            env,
            cache: SizeCache::new(env),
            p_hat: JumpTable::new(&weights),
            q_s: params.q_s_f64(),
            lambda_over_r: params.lambda_f64() / params.uniform_rate_f64(),
            state: DualParticle::new(env.geometry().wrap(eta0.site), eta0.active),
            started: false,
            rng: rng_from_seed(seed),
        }
    }

    fn advance(&mut self) {
        let u: f64 = self.rng.random();
        self.state = if self.state.active {
            if u < self.q_s {
                DualParticle::dormant(self.state.site)
            } else {
                let off = self.p_hat.sample(self.rng.random::<f64>());
                DualParticle::active(self.env.geometry().wrap(self.state.site + off))
            }
        } else {
            let s = self.cache.get(self.state.site);
            let omega = self.lambda_over_r * s.n as f64 / s.m as f64;
            DualParticle::new(self.state.site, u < omega)
        };
    }
}

impl Iterator for SubordinateWalk<'_> {
    type Item = DualParticle;

    fn next(&mut self) -> Option<DualParticle> {
        if self.started {
            self.advance();
        } else {
            self.started = true;
        }
        Some(self.state)
    }
}

/// Subordinate-chain trajectory `[eta_0, ..., eta_n]`. With `poissonize =
/// Some(t)` the number of steps is drawn as Poisson(R t) and `n_steps` is
/// ignored, so the last state has the law of the CTMC at time `t`.
pub fn subordinate_simulate(
    eta0: DualParticle,
    params: &SubordinateParams,
    env: &Environment,
    n_steps: u64,
    seed: u64,
    poissonize: Option<f64>,
) -> Vec<DualParticle> {
    let mut rng = rng_from_seed(seed);
    let steps = match poissonize {
        Some(t) => sample_poisson(&mut rng, params.uniform_rate_f64() * t),
        None => n_steps,
    };
    let walk_seed: u64 = rng.random();
    SubordinateWalk::new(eta0, params, env, walk_seed)
        .take(steps as usize + 1)
        .collect()
}

pub(crate) fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

/// Poisson(`mean`) weights `w_0..=w_n*` with tail mass below `eps`.
pub fn poisson_weights(mean: f64, eps: f64) -> Vec<f64> {
    if mean == 0.0 {
        return vec![1.0];
    }
    let ln_mean = mean.ln();
    let mut weights = Vec::new();
    let mut cum = 0.0;
    let mut n = 0u64;
    loop {
        let w = (-mean + n as f64 * ln_mean - ln_gamma(n as f64 + 1.0)).exp();
        weights.push(w);
        cum += w;
        if n as f64 > mean && 1.0 - cum < eps {
            return weights;
        }
        n += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelMode {
    /// Row-stochastic one-step matrix `Q_e`.
    OneStep,
    /// `p_t = sum_n Pois(n; R t) Q^n`, truncated at tail mass `epsilon`.
    TKernel { t: f64, epsilon: f64 },
}

fn torus_dim(env: &Environment) -> Result<usize> {
    let sites = env.geometry().num_sites().ok_or(Error::NotTorus)?;
    let dim = 2 * sites;
    if dim > MAX_MATRIX_DIM {
        return Err(Error::DimensionLimit {
            dim,
            limit: MAX_MATRIX_DIM,
        });
    }
    Ok(dim)
}

/// Exact sparse one-step rows of the subordinate chain on a torus.
pub fn one_step_rows_exact(
    env: &Environment,
    params: &SubordinateParams,
) -> Result<Vec<Vec<(usize, Rational)>>> {
    let dim = torus_dim(env)?;
    let g = *env.geometry();
    let one_minus_q = Rational::one() - params.q_s();
    let mut rows = vec![Vec::new(); dim];
    for site_idx in 0..dim / 2 {
        let site = g.site_of(site_idx);
        let omega = params.omega(env.sizes(site));
        let d = 2 * site_idx;
        rows[d] = vec![(d, Rational::one() - &omega), (d + 1, omega)];
        let mut active: HashMap<usize, Rational> = HashMap::new();
        active.insert(d, params.q_s().clone());
        for (off, p) in params.p_hat() {
            let to = 2 * g.index(site + *off) + 1;
            *active.entry(to).or_insert_with(Rational::zero) += &one_minus_q * p;
        }
        let mut row: Vec<(usize, Rational)> = active.into_iter().collect();
        row.sort_by_key(|(c, _)| *c);
        rows[d + 1] = row;
    }
    Ok(rows)
}

fn rows_to_f64(rows: &[Vec<(usize, Rational)>]) -> Vec<Vec<(usize, f64)>> {
    rows.iter()
        .map(|r| r.iter().map(|(c, v)| (*c, rational::to_f64(v))).collect())
        .collect()
}

fn dense(rows: &[Vec<(usize, f64)>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut m = DMatrix::zeros(n, n);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            m[(r, c)] += v;
        }
    }
    m
}

/// `v <- v Q` with sparse rows.
fn vec_times_sparse(v: &[f64], rows: &[Vec<(usize, f64)>], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (k, &vk) in v.iter().enumerate() {
        if vk != 0.0 {
            for &(c, q) in &rows[k] {
                out[c] += vk * q;
            }
        }
    }
}

/// Dense transition matrix over `G_L = torus x {0, 1}`.
pub fn exact_transition_kernel(
    env: &Environment,
    params: &SubordinateParams,
    mode: KernelMode,
) -> Result<DMatrix<f64>> {
    let rows = rows_to_f64(&one_step_rows_exact(env, params)?);
    match mode {
        KernelMode::OneStep => Ok(dense(&rows)),
        KernelMode::TKernel { t, epsilon } => {
            let n = rows.len();
            let weights = poisson_weights(params.uniform_rate_f64() * t, epsilon);
            let mut out = DMatrix::zeros(n, n);
            let mut cur = vec![0.0; n];
            let mut next = vec![0.0; n];
            for r in 0..n {
                cur.iter_mut().for_each(|x| *x = 0.0);
                cur[r] = 1.0;
                for (step, &w) in weights.iter().enumerate() {
                    if step > 0 {
                        vec_times_sparse(&cur, &rows, &mut next);
                        std::mem::swap(&mut cur, &mut next);
                    }
                    for c in 0..n {
                        out[(r, c)] += w * cur[c];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// One row `p_t(eta, .)` of the uniformized t-kernel.
pub fn t_kernel_row(
    env: &Environment,
    params: &SubordinateParams,
    eta: DualParticle,
    t: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let rows = rows_to_f64(&one_step_rows_exact(env, params)?);
    let n = rows.len();
    let weights = poisson_weights(params.uniform_rate_f64() * t, epsilon);
    let mut cur = vec![0.0; n];
    cur[state_index(env.geometry(), eta)] = 1.0;
    let mut next = vec![0.0; n];
    let mut out = vec![0.0; n];
    for (step, &w) in weights.iter().enumerate() {
        if step > 0 {
            vec_times_sparse(&cur, &rows, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        out.iter_mut().zip(&cur).for_each(|(o, c)| *o += w * c);
    }
    Ok(out)
}

/// CTMC generator on a torus, assembled from the jump rates directly.
pub fn generator_matrix(
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    check_dims(env, kernel)?;
    let dim = torus_dim(env)?;
    let g = *env.geometry();
    let lam = rational::to_f64(lambda);
    let mut j = DMatrix::zeros(dim, dim);
    for site_idx in 0..dim / 2 {
        let site = g.site_of(site_idx);
        let s = env.sizes(site);
        let (dorm, act) = (2 * site_idx, 2 * site_idx + 1);
        let wake = lam * s.n as f64 / s.m as f64;
        j[(dorm, act)] += wake;
        j[(dorm, dorm)] -= wake;
        j[(act, dorm)] += lam;
        j[(act, act)] -= lam;
        for (off, rate) in kernel.moves_f64() {
            let to = 2 * g.index(site + off) + 1;
            if to != act {
                j[(act, to)] += rate;
                j[(act, act)] -= rate;
            }
        }
    }
    Ok(j)
}

/// `exp(t J)` by scaling and squaring of a Taylor series. Reference route
/// only: intermediate entries can be negative.
pub fn generator_exp_reference(generator: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = generator.nrows();
    let norm = generator
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * t.abs();
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let a = generator * (t / 2f64.powi(squarings as i32));
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &a / k as f64;
        sum += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Stationary law on a torus: weight 1 on active states and `M_i / N_i` on
/// dormant ones, normalized by `sum_i (1 + M_i / N_i)`.
pub fn single_particle_stationary(
    env: &Environment,
    params: &SubordinateParams,
) -> Result<Vec<Rational>> {
    let dim = torus_dim(env)?;
    if !params.p_hat_symmetric_mod(env.geometry().side()) {
        return Err(Error::AsymmetricKernel);
    }
    stationary_weights(env, dim)
}

pub(crate) fn stationary_weights(env: &Environment, dim: usize) -> Result<Vec<Rational>> {
    let g = env.geometry();
    let mut w = vec![Rational::zero(); dim];
    let mut z = Rational::zero();
    for site_idx in 0..dim / 2 {
        let ratio = env.sizes(g.site_of(site_idx)).dormant_ratio();
        z += Rational::one() + &ratio;
        w[2 * site_idx] = ratio;
        w[2 * site_idx + 1] = Rational::one();
    }
    Ok(w.into_iter().map(|x| x / &z).collect())
}

/// Sites visited are reported in the torus' canonical representatives.
pub fn trajectory_csv(path: &[(f64, DualParticle)]) -> String {
    let mut out = String::from("time,site,activity\n");
    for (t, p) in path {
        out.push_str(&format!("{t},{},{}\n", p.site, p.alpha()));
    }
    out
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
