//! Forward two-type Moran process with seed-banks on a torus.
//!
//! Count-level rates at colony `i`, from the individual rules (an active
//! individual at `i` copies the type of a uniformly drawn active individual
//! at `j` at rate `a(i, j)`; an active and a dormant individual at `i` swap
//! places at rate `lambda / M_i` per pair):
//!
//! - active-gain: `sum_j a(i,j) (N_i - X_i) X_j / N_j`
//! - active-loss: `sum_j a(i,j) X_i (N_j - X_j) / N_j`
//! - exchange-out `(X-1, Y+1)`: `lambda X_i (M_i - Y_i) / M_i`
//! - exchange-in `(X+1, Y-1)`: `lambda (N_i - X_i) Y_i / M_i`

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_traits::Zero;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use rayon::prelude::*;

use crate::dsl::DensitySpec;
use crate::dual::{particle_of, poisson_weights, t_kernel_row, DualParticle};
use crate::env::{ColonySize, Environment};
use crate::error::{Error, Result};
use crate::kernel::{periodize, MigrationKernel, SubordinateParams};
use crate::rational::{self, Rational};
use crate::stats::{derive_stream, rng_from_seed, Confidence, MeanAccumulator};

/// Largest product state space the brute-force routines accept.
pub const MAX_ORACLE_STATES: usize = 20_000;

/// Transient-state count up to which the oracle uses a dense LU solve.
const DENSE_SOLVE_LIMIT: usize = 3000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ForwardState {
    /// Type-heart active counts per colony.
    pub x: Vec<u32>,
    /// Type-heart dormant counts per colony.
    pub y: Vec<u32>,
}

impl ForwardState {
    pub fn new(x: Vec<u32>, y: Vec<u32>) -> Self {
        Self { x, y }
    }

    pub fn all_heart(env: &Environment) -> Result<Self> {
        let sizes = env.torus_sizes()?;
        Ok(Self {
            x: sizes.iter().map(|s| s.n).collect(),
            y: sizes.iter().map(|s| s.m).collect(),
        })
    }

    pub fn all_spade(env: &Environment) -> Result<Self> {
        let n = env.torus_sizes()?.len();
        Ok(Self {
            x: vec![0; n],
            y: vec![0; n],
        })
    }

    /// Swaps the two types.
    pub fn complement(&self, env: &Environment) -> Result<Self> {
        let sizes = env.torus_sizes()?;
        self.validate(&sizes)?;
        Ok(Self {
            x: sizes.iter().zip(&self.x).map(|(s, x)| s.n - x).collect(),
            y: sizes.iter().zip(&self.y).map(|(s, y)| s.m - y).collect(),
        })
    }

    pub fn validate(&self, sizes: &[ColonySize]) -> Result<()> {
        if self.x.len() != sizes.len() || self.y.len() != sizes.len() {
            return Err(Error::InconsistentState(format!(
                "state has {}/{} colonies, environment has {}",
                self.x.len(),
                self.y.len(),
                sizes.len()
            )));
        }
        for (i, s) in sizes.iter().enumerate() {
            if self.x[i] > s.n || self.y[i] > s.m {
                return Err(Error::InconsistentState(format!(
                    "colony {i}: (X, Y) = ({}, {}) exceeds (N, M) = ({}, {})",
                    self.x[i], self.y[i], s.n, s.m
                )));
            }
        }
        Ok(())
    }

    pub fn absorption(&self, sizes: &[ColonySize]) -> Absorption {
        if self.x.iter().chain(&self.y).all(|&v| v == 0) {
            Absorption::AllSpade
        } else if sizes
            .iter()
            .enumerate()
            .all(|(i, s)| self.x[i] == s.n && self.y[i] == s.m)
        {
            Absorption::AllHeart
        } else {
            Absorption::None
        }
    }

    /// `D(U, delta_eta)`: active density for an active particle, dormant
    /// density for a dormant one.
    pub fn duality_observable(&self, env: &Environment, eta: DualParticle) -> f64 {
        let g = env.geometry();
        let i = g.index(eta.site);
        let s = env.sizes(eta.site);
        if eta.active {
            self.x[i] as f64 / s.n as f64
        } else {
            self.y[i] as f64 / s.m as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Absorption {
    AllHeart,
    AllSpade,
    None,
}

impl Absorption {
    pub fn label(&self) -> &'static str {
        match self {
            Absorption::AllHeart => "all-heart",
            Absorption::AllSpade => "all-spade",
            Absorption::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialLaw {
    ProductBinomial,
    DeterministicRounding,
}

/// Initial configuration with `E[X_i / N_i] = f_A(T_i e)` and
/// `E[Y_i / M_i] = f_D(T_i e)`. Densities see the environment shifted to
/// each colony.
pub fn sample_initial_state(
    env: &Environment,
    f_a: &DensitySpec,
    f_d: &DensitySpec,
    law: InitialLaw,
    seed: u64,
) -> Result<ForwardState> {
    let sizes = env.torus_sizes()?;
    let mut rng = rng_from_seed(seed);
    let mut x = Vec::with_capacity(sizes.len());
    let mut y = Vec::with_capacity(sizes.len());
    for s in &sizes {
        let pa = f_a.eval(*s)?;
        let pd = f_d.eval(*s)?;
        match law {
            InitialLaw::ProductBinomial => {
                x.push(binomial(&mut rng, s.n, &pa));
                y.push(binomial(&mut rng, s.m, &pd));
            }
            InitialLaw::DeterministicRounding => {
                x.push(round_scaled(s.n, &pa));
                y.push(round_scaled(s.m, &pd));
            }
        }
    }
    Ok(ForwardState { x, y })
}

fn binomial<R: Rng>(rng: &mut R, n: u32, p: &Rational) -> u32 {
    let p = rational::to_f64(p).clamp(0.0, 1.0);
    Binomial::new(n as u64, p)
        .expect("probability in [0, 1]")
        .sample(rng) as u32
}

/// `floor(n p + 1/2)`, exactly.
fn round_scaled(n: u32, p: &Rational) -> u32 {
    let v = (Rational::from_integer(BigInt::from(n)) * p + rational::frac(1, 2)).floor();
    v.to_integer().try_into().expect("count fits in u32")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    ActiveGain,
    ActiveLoss,
    ExchangeIn,
    ExchangeOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateEvent {
    pub kind: EventKind,
    pub site: usize,
    /// Colony whose individual is copied, for resampling events.
    pub source: Option<usize>,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateTable {
    pub events: Vec<RateEvent>,
}

impl RateTable {
    pub fn total(&self) -> f64 {
        self.events.iter().map(|e| e.rate).sum()
    }

    pub fn total_for(&self, kind: EventKind, site: usize) -> f64 {
        self.events
            .iter()
            .filter(|e| e.kind == kind && e.site == site)
            .map(|e| e.rate)
            .sum()
    }
}

/// Precomputed torus structure shared by the simulation and the oracles.
#[derive(Debug, Clone)]
pub(crate) struct ForwardSystem {
    sizes: Vec<ColonySize>,
    /// `(j, a(i, j))` for every colony `i`, including `j = i`.
    out: Vec<Vec<(usize, f64)>>,
    /// Colonies `k` with `a(k, i) > 0`, excluding `i` itself.
    feeds: Vec<Vec<usize>>,
    lambda: f64,
}

impl ForwardSystem {
    pub(crate) fn new(env: &Environment, kernel: &MigrationKernel, lambda: &Rational) -> Result<Self> {
        if *lambda <= Rational::zero() {
            return Err(Error::NonPositiveLambda);
        }
        let g = *env.geometry();
        let folded = periodize(kernel, &g)?;
        let sizes = env.torus_sizes()?;
        let n = sizes.len();
        let mut out = vec![Vec::new(); n];
        let mut feeds = vec![Vec::new(); n];
        for (i, slot) in out.iter_mut().enumerate() {
            let site = g.site_of(i);
            for (off, rate) in folded.rates() {
                let j = g.index(site + *off);
                slot.push((j, rational::to_f64(rate)));
                if j != i {
                    feeds[j].push(i);
                }
            }
        }
        Ok(Self {
            sizes,
            out,
            feeds,
            lambda: rational::to_f64(lambda),
        })
    }

    /// Rates `[gain, loss, exchange-in, exchange-out]` of colony `i`.
    #[inline]
    fn colony_rates(&self, x: &[u32], y: &[u32], i: usize) -> [f64; 4] {
        let s = self.sizes[i];
        let (n, m) = (s.n as f64, s.m as f64);
        let (xi, yi) = (x[i] as f64, y[i] as f64);
        let (mut heart, mut spade) = (0.0, 0.0);
        for &(j, a) in &self.out[i] {
            let nj = self.sizes[j].n as f64;
            heart += a * x[j] as f64 / nj;
            spade += a * (nj - x[j] as f64) / nj;
        }
        [
            (n - xi) * heart,
            xi * spade,
            self.lambda * (n - xi) * yi / m,
            self.lambda * xi * (m - yi) / m,
        ]
    }

    fn rate_table(&self, x: &[u32], y: &[u32]) -> RateTable {
        let mut events = Vec::new();
        for i in 0..self.sizes.len() {
            let s = self.sizes[i];
            let (n, m) = (s.n as f64, s.m as f64);
            let (xi, yi) = (x[i] as f64, y[i] as f64);
            for &(j, a) in &self.out[i] {
                let nj = self.sizes[j].n as f64;
                let gain = a * (n - xi) * x[j] as f64 / nj;
                let loss = a * xi * (nj - x[j] as f64) / nj;
                if gain > 0.0 {
                    events.push(RateEvent { kind: EventKind::ActiveGain, site: i, source: Some(j), rate: gain });
                }
                if loss > 0.0 {
                    events.push(RateEvent { kind: EventKind::ActiveLoss, site: i, source: Some(j), rate: loss });
                }
            }
            let ex_in = self.lambda * (n - xi) * yi / m;
            let ex_out = self.lambda * xi * (m - yi) / m;
            if ex_in > 0.0 {
                events.push(RateEvent { kind: EventKind::ExchangeIn, site: i, source: None, rate: ex_in });
            }
            if ex_out > 0.0 {
                events.push(RateEvent { kind: EventKind::ExchangeOut, site: i, source: None, rate: ex_out });
            }
        }
        RateTable { events }
    }

    /// Successor states with their rates.
    fn transitions(&self, x: &[u32], y: &[u32], mut visit: impl FnMut(usize, EventKind, f64)) {
        for i in 0..self.sizes.len() {
            let r = self.colony_rates(x, y, i);
            let kinds = [EventKind::ActiveGain, EventKind::ActiveLoss, EventKind::ExchangeIn, EventKind::ExchangeOut];
            for (k, kind) in kinds.into_iter().enumerate() {
                if r[k] > 0.0 {
                    visit(i, kind, r[k]);
                }
            }
        }
    }
}

fn apply(x: &mut [u32], y: &mut [u32], i: usize, kind: EventKind) {
    match kind {
        EventKind::ActiveGain => x[i] += 1,
        EventKind::ActiveLoss => x[i] -= 1,
        EventKind::ExchangeIn => {
            x[i] += 1;
            y[i] -= 1;
        }
        EventKind::ExchangeOut => {
            x[i] -= 1;
            y[i] += 1;
        }
    }
}

/// Full rate table of a state; zero-rate events are omitted.
pub fn enumerate_rates(
    state: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
) -> Result<RateTable> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    state.validate(&sys.sizes)?;
    Ok(sys.rate_table(&state.x, &state.y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Stop at time `t` or at absorption, whichever comes first.
    Time(f64),
    /// Run until absorption.
    Absorption,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GillespieOptions {
    /// Recompute every rate after each event and compare with the cache.
    pub verify_cache: bool,
    /// Abort after this many events (absorption runs only).
    pub max_events: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutcome {
    pub state: ForwardState,
    pub elapsed: f64,
    pub events: u64,
    pub absorption: Absorption,
}

pub fn run_forward(
    state0: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    stop: Stop,
    seed: u64,
) -> Result<ForwardOutcome> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    run_with(&sys, state0, stop, seed, GillespieOptions::default())
}

pub fn run_forward_with(
    state0: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    stop: Stop,
    seed: u64,
    options: GillespieOptions,
) -> Result<ForwardOutcome> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    run_with(&sys, state0, stop, seed, options)
}

fn run_with(
    sys: &ForwardSystem,
    state0: &ForwardState,
    stop: Stop,
    seed: u64,
    options: GillespieOptions,
) -> Result<ForwardOutcome> {
    state0.validate(&sys.sizes)?;
    let mut rng = rng_from_seed(seed);
    let mut x = state0.x.clone();
    let mut y = state0.y.clone();
    let n = sys.sizes.len();
    let mut cache: Vec<[f64; 4]> = (0..n).map(|i| sys.colony_rates(&x, &y, i)).collect();
    let mut colony_total: Vec<f64> = cache.iter().map(|r| r.iter().sum()).collect();
    let (mut time, mut events) = (0.0, 0u64);
    let t_max = match stop {
        Stop::Time(t) => t,
        Stop::Absorption => f64::INFINITY,
    };
    loop {
        let total: f64 = colony_total.iter().sum();
        if total <= 0.0 {
            break;
        }
        let e: f64 = Exp1.sample(&mut rng);
        let dt = e / total;
        if time + dt > t_max {
            time = t_max;
            break;
        }
        if let Some(limit) = options.max_events {
            if events >= limit {
                return Err(Error::BudgetExceeded);
            }
        }
        time += dt;
        // Selection in table order: colonies, then the four kinds.
        let mut u = rng.random::<f64>() * total;
        let mut pick = (n - 1, 3);
        'outer: for i in 0..n {
            if u < colony_total[i] {
                for k in 0..4 {
                    if u < cache[i][k] {
                        pick = (i, k);
                        break 'outer;
                    }
                    u -= cache[i][k];
                }
                pick = (i, last_positive(&cache[i]));
                break;
            }
            u -= colony_total[i];
        }
        if pick.0 == n - 1 && colony_total[pick.0] <= 0.0 {
            // Rounding pushed u past the last positive colony.
            let i = (0..n).rev().find(|&i| colony_total[i] > 0.0).expect("positive total");
            pick = (i, last_positive(&cache[i]));
        }
        let (i, k) = pick;
        let kind = [EventKind::ActiveGain, EventKind::ActiveLoss, EventKind::ExchangeIn, EventKind::ExchangeOut][k];
        apply(&mut x, &mut y, i, kind);
        events += 1;
        let mut refresh = |c: usize| {
            cache[c] = sys.colony_rates(&x, &y, c);
            colony_total[c] = cache[c].iter().sum();
        };
        refresh(i);
        for &c in &sys.feeds[i] {
            refresh(c);
        }
        if options.verify_cache {
            for c in 0..n {
                let fresh = sys.colony_rates(&x, &y, c);
                assert_eq!(fresh, cache[c], "stale rate cache at colony {c}");
            }
        }
    }
    let state = ForwardState { x, y };
    let absorption = state.absorption(&sys.sizes);
    Ok(ForwardOutcome {
        state,
        elapsed: time,
        events,
        absorption,
    })
}

fn last_positive(r: &[f64; 4]) -> usize {
    (0..4).rev().find(|&k| r[k] > 0.0).unwrap_or(0)
}

/// Probability of absorption in all-heart: the active and dormant densities
/// weighted by the single-particle stationary law,
/// `sum_j (X_j + Y_j) / N_j` over `sum_j (N_j + M_j) / N_j`.
pub fn harmonic_fixation(
    state: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
) -> Result<Rational> {
    let folded = periodize(kernel, env.geometry())?;
    if !folded.is_symmetric() {
        return Err(Error::AsymmetricKernel);
    }
    let sizes = env.torus_sizes()?;
    state.validate(&sizes)?;
    let mut num = Rational::zero();
    let mut den = Rational::zero();
    for (i, s) in sizes.iter().enumerate() {
        let n = rational::int(s.n as i64);
        num += rational::int((state.x[i] + state.y[i]) as i64) / &n;
        den += rational::int((s.n + s.m) as i64) / &n;
    }
    Ok(num / den)
}

/// Mixed-radix enumeration of the full product state space.
#[derive(Debug, Clone)]
pub struct StateSpace {
    sizes: Vec<ColonySize>,
    len: usize,
}

impl StateSpace {
    pub fn new(env: &Environment) -> Result<Self> {
        let sizes = env.torus_sizes()?;
        let mut len: u128 = 1;
        for s in &sizes {
            len = len.saturating_mul(((s.n + 1) * (s.m + 1)) as u128);
        }
        if len > MAX_ORACLE_STATES as u128 {
            return Err(Error::StateSpaceTooLarge {
                size: len,
                limit: MAX_ORACLE_STATES as u128,
            });
        }
        Ok(Self {
            sizes,
            len: len as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn encode(&self, x: &[u32], y: &[u32]) -> usize {
        let mut idx = 0usize;
        for (i, s) in self.sizes.iter().enumerate().rev() {
            idx = idx * ((s.n + 1) * (s.m + 1)) as usize + (x[i] * (s.m + 1) + y[i]) as usize;
        }
        idx
    }

    pub fn decode(&self, mut idx: usize) -> ForwardState {
        let mut x = Vec::with_capacity(self.sizes.len());
        let mut y = Vec::with_capacity(self.sizes.len());
        for s in &self.sizes {
            let r = ((s.n + 1) * (s.m + 1)) as usize;
            let local = (idx % r) as u32;
            idx /= r;
            x.push(local / (s.m + 1));
            y.push(local % (s.m + 1));
        }
        ForwardState { x, y }
    }
}

/// Sparse generator rows (off-diagonal only) over the full state space.
fn generator_rows(sys: &ForwardSystem, space: &StateSpace) -> Vec<Vec<(usize, f64)>> {
    (0..space.len())
        .map(|s| {
            let st = space.decode(s);
            let mut row = Vec::new();
            sys.transitions(&st.x, &st.y, |i, kind, rate| {
                let (mut x, mut y) = (st.x.clone(), st.y.clone());
                apply(&mut x, &mut y, i, kind);
                row.push((space.encode(&x, &y), rate));
            });
            row
        })
        .collect()
}

/// Brute-force all-heart absorption probability: solves `h = P h` on the
/// transient states of the jump chain with boundary values 1 (all-heart)
/// and 0 (all-spade).
pub fn absorption_oracle(
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    state0: &ForwardState,
) -> Result<f64> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    state0.validate(&sys.sizes)?;
    let space = StateSpace::new(env)?;
    let heart = space.encode(
        &sys.sizes.iter().map(|s| s.n).collect::<Vec<_>>(),
        &sys.sizes.iter().map(|s| s.m).collect::<Vec<_>>(),
    );
    let spade = 0usize;
    let start = space.encode(&state0.x, &state0.y);
    if start == heart {
        return Ok(1.0);
    }
    if start == spade {
        return Ok(0.0);
    }
    let rows = generator_rows(&sys, &space);
    let mut transient_of = vec![usize::MAX; space.len()];
    let mut transient = Vec::new();
    for s in 0..space.len() {
        if s != heart && s != spade {
            transient_of[s] = transient.len();
            transient.push(s);
        }
    }
    let n = transient.len();
    if n <= DENSE_SOLVE_LIMIT {
        // (I - P_TT) h = P_T,heart with the jump-chain probabilities.
        let mut a = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (r, &s) in transient.iter().enumerate() {
            let total: f64 = rows[s].iter().map(|(_, q)| q).sum();
            for &(t, q) in &rows[s] {
                let p = q / total;
                if t == heart {
                    b[r] += p;
                } else if t != spade {
                    a[(r, transient_of[t])] -= p;
                }
            }
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InconsistentState("singular absorption system".into()))?;
        return Ok(h[transient_of[start]]);
    }
    let mut h = vec![0.0; space.len()];
    h[heart] = 1.0;
    let probs: Vec<Vec<(usize, f64)>> = rows
        .iter()
        .map(|row| {
            let total: f64 = row.iter().map(|(_, q)| q).sum();
            row.iter().map(|&(t, q)| (t, q / total)).collect()
        })
        .collect();
    for sweep in 0..1_000_000 {
        let mut delta: f64 = 0.0;
        for &s in &transient {
            let v: f64 = probs[s].iter().map(|&(t, p)| p * h[t]).sum();
            delta = delta.max((v - h[s]).abs());
            h[s] = v;
        }
        if delta < 1e-15 {
            return Ok(h[start]);
        }
        if sweep == 999_999 {
            break;
        }
    }
    Err(Error::NoConvergence(1_000_000))
}

/// Law of the forward state at time `t` from a deterministic start, by
/// uniformization of the full generator.
pub fn exact_forward_distribution(
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    state0: &ForwardState,
    t: f64,
) -> Result<(StateSpace, Vec<f64>)> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    state0.validate(&sys.sizes)?;
    let space = StateSpace::new(env)?;
    let rows = generator_rows(&sys, &space);
    let exit: Vec<f64> = rows.iter().map(|r| r.iter().map(|(_, q)| q).sum()).collect();
    let lam = exit.iter().cloned().fold(0.0, f64::max);
    let mut p = vec![0.0; space.len()];
    p[space.encode(&state0.x, &state0.y)] = 1.0;
    if lam == 0.0 || t == 0.0 {
        return Ok((space, p));
    }
    let weights = poisson_weights(lam * t, 1e-14);
    let mut out = vec![0.0; space.len()];
    let mut next = vec![0.0; space.len()];
    for (step, &w) in weights.iter().enumerate() {
        if step > 0 {
            for (s, v) in next.iter_mut().enumerate() {
                *v = p[s] * (1.0 - exit[s] / lam);
            }
            for (s, row) in rows.iter().enumerate() {
                if p[s] != 0.0 {
                    for &(t2, q) in row {
                        next[t2] += p[s] * q / lam;
                    }
                }
            }
            std::mem::swap(&mut p, &mut next);
        }
        out.iter_mut().zip(&p).for_each(|(o, v)| *o += w * v);
    }
    Ok((space, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualityMode {
    /// Exact forward law on the full product state space.
    Exact,
    /// Gillespie replicas for the forward side.
    MonteCarlo { replicas: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityCheck {
    /// `E[D(Z(t), delta_eta)]` under the forward process.
    pub lhs: f64,
    /// `sum_xi p_t(eta, xi) D(state0, delta_xi)` under the dual.
    pub rhs: f64,
    /// Confidence half-width of `lhs` in Monte Carlo mode, 0 otherwise.
    pub lhs_halfwidth: f64,
}

pub fn duality_check(
    state0: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    eta: DualParticle,
    t: f64,
    mode: DualityMode,
) -> Result<DualityCheck> {
    let sizes = env.torus_sizes()?;
    state0.validate(&sizes)?;
    let g = *env.geometry();
    let eta = DualParticle::new(g.wrap(eta.site), eta.active);
    let (lhs, lhs_halfwidth) = match mode {
        DualityMode::Exact => {
            let (space, p) = exact_forward_distribution(env, kernel, lambda, state0, t).map_err(|e| match e {
                Error::StateSpaceTooLarge { .. } => Error::BudgetExceeded,
                other => other,
            })?;
            let lhs = p
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(s, w)| w * space.decode(s).duality_observable(env, eta))
                .sum();
            (lhs, 0.0)
        }
        DualityMode::MonteCarlo { replicas, seed } => {
            let sys = ForwardSystem::new(env, kernel, lambda)?;
            let values: Vec<f64> = (0..replicas)
                .into_par_iter()
                .map(|r| {
                    let out = run_with(&sys, state0, Stop::Time(t), derive_stream(seed, &[r]), GillespieOptions::default())
                        .expect("validated inputs");
                    out.state.duality_observable(env, eta)
                })
                .collect();
            let mut acc = MeanAccumulator::default();
            values.iter().for_each(|v| acc.push(*v));
            let (m, hw) = acc.ci(Confidence::THREE_SIGMA)?;
            (m, hw)
        }
    };
    let k = sizes.iter().map(|s| s.n.max(s.m)).max().unwrap_or(2).max(2);
    let params = SubordinateParams::new(&periodize(kernel, &g)?, lambda, k)?;
    let row = t_kernel_row(env, &params, eta, t, 1e-13)?;
    let rhs = row
        .iter()
        .enumerate()
        .map(|(c, p)| p * state0.duality_observable(env, particle_of(&g, c)))
        .sum();
    Ok(DualityCheck {
        lhs,
        rhs,
        lhs_halfwidth,
    })
}

/// Monte Carlo all-heart absorption frequency over independent replicas.
pub fn absorption_frequency(
    state0: &ForwardState,
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    replicas: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let sys = ForwardSystem::new(env, kernel, lambda)?;
    state0.validate(&sys.sizes)?;
    let flags: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let out = run_with(&sys, state0, Stop::Absorption, derive_stream(seed, &[r]), GillespieOptions::default())
                .expect("validated inputs");
            (out.absorption == Absorption::AllHeart) as u8 as f64
        })
        .collect();
    let mut acc = MeanAccumulator::default();
    flags.iter().for_each(|v| acc.push(*v));
    acc.ci(Confidence::THREE_SIGMA)
}

/// Exact fixation value with `Rational` lifted to `f64`.
pub fn harmonic_fixation_f64(state: &ForwardState, env: &Environment, kernel: &MigrationKernel) -> Result<f64> {
    harmonic_fixation(state, env, kernel).map(|r| rational::to_f64(&r))
}
