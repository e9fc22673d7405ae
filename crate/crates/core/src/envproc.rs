//! The environment seen from the walker, `W_n = (T_{X_n} e, alpha_n)`: its
//! stationary law `Q`, exact local expectations, the one-step operator `R`,
//! the homogenized value `theta`, quenched-limit estimates and ergodic
//! averages.
//!
//! Under `Q` the pair `(e, alpha)` has density `u / (1 + rho)` against the
//! iid field law, with `u = 1` for `alpha = 1` and `u = M_0 / N_0` for
//! `alpha = 0`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use num_traits::{One, Zero};
use rand::Rng;
use rayon::prelude::*;

use crate::dsl::DensitySpec;
use crate::dual::{CtmcWalker, DualParticle, SubordinateWalk};
use crate::env::{sample_environment, ColonySize, Environment, FieldSpec, Geometry, Site, SiteView};
use crate::error::{Error, Result};
use crate::kernel::{MigrationKernel, SubordinateParams};
use crate::rational::{self, Rational};
use crate::stats::{batch_means_ci, derive_stream, rng_from_seed, Confidence, MeanAccumulator};

/// Largest number of window configurations enumerated exactly.
pub const MAX_WINDOW_CONFIGS: u128 = 10_000_000;

type Rule = Arc<dyn Fn(&dyn SiteView, bool) -> Rational + Send + Sync>;

/// A function of `(e, alpha)` that reads `e` only within `radius` of the
/// origin (sup norm).
#[derive(Clone)]
pub struct LocalFunction {
    dim: u8,
    radius: i64,
    rule: Rule,
}

impl fmt::Debug for LocalFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalFunction")
            .field("dim", &self.dim)
            .field("radius", &self.radius)
            .finish_non_exhaustive()
    }
}

/// `view` translated by `by`.
pub struct ShiftedView<'a> {
    inner: &'a dyn SiteView,
    by: Site,
}

impl<'a> ShiftedView<'a> {
    pub fn new(inner: &'a dyn SiteView, by: Site) -> Self {
        Self { inner, by }
    }
}

impl SiteView for ShiftedView<'_> {
    #[inline]
    fn colony(&self, offset: Site) -> ColonySize {
        self.inner.colony(offset + self.by)
    }
}

/// `env` seen from `at`.
pub struct EnvAt<'a> {
    env: &'a Environment,
    at: Site,
}

impl<'a> EnvAt<'a> {
    pub fn new(env: &'a Environment, at: Site) -> Self {
        Self { env, at }
    }
}

impl SiteView for EnvAt<'_> {
    #[inline]
    fn colony(&self, offset: Site) -> ColonySize {
        self.env.sizes(self.at + offset)
    }
}

/// Finite window of values; reading outside it is a bug in the caller's
/// declared radius.
struct WindowView<'a> {
    dim: u8,
    radius: i64,
    values: &'a [ColonySize],
}

impl SiteView for WindowView<'_> {
    fn colony(&self, offset: Site) -> ColonySize {
        assert!(
            offset.norm_inf() <= self.radius && (self.dim == 2 || offset.y == 0),
            "local function read {offset} outside radius {}",
            self.radius
        );
        let w = 2 * self.radius + 1;
        let idx = (offset.x + self.radius) + if self.dim == 2 { w * (offset.y + self.radius) } else { 0 };
        self.values[idx as usize]
    }
}

fn window_sites(dim: u8, radius: i64) -> Vec<Site> {
    let r = radius;
    let mut out = Vec::new();
    if dim == 1 {
        for x in -r..=r {
            out.push(Site::d1(x));
        }
    } else {
        for y in -r..=r {
            for x in -r..=r {
                out.push(Site::d2(x, y));
            }
        }
    }
    out
}

/// Exact values of a density at every size of the elliptic box.
fn density_values(spec: &DensitySpec, k: u32) -> Result<HashMap<ColonySize, Rational>> {
    let mut out = HashMap::new();
    for n in 2..=k {
        for m in 2..=k {
            let s = ColonySize::new(n, m);
            out.insert(s, spec.eval(s)?);
        }
    }
    Ok(out)
}

impl LocalFunction {
    pub fn new<F>(dim: u8, radius: i64, rule: F) -> Self
    where
        F: Fn(&dyn SiteView, bool) -> Rational + Send + Sync + 'static,
    {
        Self {
            dim,
            radius,
            rule: Arc::new(rule),
        }
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn eval(&self, view: &dyn SiteView, active: bool) -> Rational {
        (self.rule)(view, active)
    }

    /// Value at the walker's position `at` in `env`.
    pub fn eval_at(&self, env: &Environment, at: Site, active: bool) -> Rational {
        self.eval(&EnvAt::new(env, at), active)
    }

    pub fn constant(dim: u8, c: Rational) -> Self {
        Self::new(dim, 0, move |_, _| c.clone())
    }

    /// `alpha`.
    pub fn activity(dim: u8) -> Self {
        Self::new(dim, 0, |_, a| if a { Rational::one() } else { Rational::zero() })
    }

    /// `1 - alpha`.
    pub fn dormancy(dim: u8) -> Self {
        Self::new(dim, 0, |_, a| if a { Rational::zero() } else { Rational::one() })
    }

    /// `g(e_offset)` for an arbitrary exact function of one colony.
    pub fn colony_fn<G>(dim: u8, offset: Site, g: G) -> Self
    where
        G: Fn(ColonySize) -> Rational + Send + Sync + 'static,
    {
        Self::new(dim, offset.norm_inf(), move |v, _| g(v.colony(offset)))
    }

    /// Density evaluated at the colony `offset` from the origin.
    pub fn density(dim: u8, spec: &DensitySpec, k: u32, offset: Site) -> Result<Self> {
        let table = density_values(spec, k)?;
        Ok(Self::colony_fn(dim, offset, move |s| {
            table.get(&s).cloned().expect("size within the elliptic box")
        }))
    }

    /// `alpha f_A(e) + (1 - alpha) f_D(e)`.
    pub fn h(dim: u8, f_a: &DensitySpec, f_d: &DensitySpec, k: u32) -> Result<Self> {
        let ta = density_values(f_a, k)?;
        let td = density_values(f_d, k)?;
        Ok(Self::new(dim, 0, move |v, a| {
            let s = v.colony(Site::ORIGIN);
            let t = if a { &ta } else { &td };
            t.get(&s).cloned().expect("size within the elliptic box")
        }))
    }

    pub fn product(&self, other: &LocalFunction) -> Self {
        let (f, g) = (self.rule.clone(), other.rule.clone());
        Self {
            dim: self.dim,
            radius: self.radius.max(other.radius),
            rule: Arc::new(move |v, a| f(v, a) * g(v, a)),
        }
    }

    pub fn sum(&self, other: &LocalFunction) -> Self {
        let (f, g) = (self.rule.clone(), other.rule.clone());
        Self {
            dim: self.dim,
            radius: self.radius.max(other.radius),
            rule: Arc::new(move |v, a| f(v, a) + g(v, a)),
        }
    }

    pub fn scale(&self, c: Rational) -> Self {
        let f = self.rule.clone();
        Self {
            dim: self.dim,
            radius: self.radius,
            rule: Arc::new(move |v, a| &c * f(v, a)),
        }
    }
}

/// `theta = (E[f_A] + E[(M_0 / N_0) f_D]) / (1 + rho)` over the marginal.
pub fn theta(spec: &FieldSpec, f_a: &DensitySpec, f_d: &DensitySpec) -> Result<Rational> {
    let mut num = Rational::zero();
    for (s, p) in spec.entries() {
        num += p * (f_a.eval(*s)? + s.dormant_ratio() * f_d.eval(*s)?);
    }
    Ok(num / (Rational::one() + spec.rho_exact()))
}

/// `E_Q[f]` by enumerating every configuration of the window.
pub fn expectation_under_q(f: &LocalFunction, spec: &FieldSpec) -> Result<Rational> {
    let sites = window_sites(f.dim, f.radius);
    let entries = spec.entries();
    let count = (entries.len() as u128).checked_pow(sites.len() as u32).unwrap_or(u128::MAX);
    if count > MAX_WINDOW_CONFIGS {
        return Err(Error::WindowTooLarge(count));
    }
    let origin = sites.iter().position(|s| *s == Site::ORIGIN).expect("window holds the origin");
    let mut digits = vec![0usize; sites.len()];
    let mut values: Vec<ColonySize> = vec![entries[0].0; sites.len()];
    let mut total = Rational::zero();
    loop {
        let mut weight = Rational::one();
        for (slot, &d) in digits.iter().enumerate() {
            values[slot] = entries[d].0;
            weight *= &entries[d].1;
        }
        let view = WindowView {
            dim: f.dim,
            radius: f.radius,
            values: &values,
        };
        let u0 = values[origin].dormant_ratio();
        total += weight * (f.eval(&view, true) + u0 * f.eval(&view, false));
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok(total / (Rational::one() + spec.rho_exact()));
            }
            digits[pos] += 1;
            if digits[pos] < entries.len() {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// One step of the environment process applied to `f`:
/// dormant `omega(0) f(e, 1) + (1 - omega(0)) f(e, 0)`, active
/// `q_s f(e, 0) + (1 - q_s) sum_j p_hat(j) f(T_j e, 1)`.
pub fn apply_r_local(f: &LocalFunction, params: &SubordinateParams) -> LocalFunction {
    let inner = f.rule.clone();
    let p = params.clone();
    let p_hat: Vec<(Site, Rational)> = params.p_hat().iter().map(|(s, v)| (*s, v.clone())).collect();
    let radius = f.radius + params.range();
    LocalFunction {
        dim: f.dim,
        radius,
        rule: Arc::new(move |v, active| {
            if active {
                let mut moved = Rational::zero();
                for (j, pj) in &p_hat {
                    moved += pj * inner(&ShiftedView::new(v, *j), true);
                }
                p.q_s() * inner(v, false) + (Rational::one() - p.q_s()) * moved
            } else {
                let w = p.omega(v.colony(Site::ORIGIN));
                &w * inner(v, true) + (Rational::one() - &w) * inner(v, false)
            }
        }),
    }
}

/// Draws `(e, alpha)` from `Q`: `alpha = 0` with probability
/// `rho / (1 + rho)`, in which case the origin follows the marginal tilted
/// by `M / N`; every other site is iid from the marginal.
pub fn sample_from_q(spec: &FieldSpec, dim: u8, seed: u64) -> Result<(Environment, bool)> {
    let geometry = Geometry::lazy(dim)?;
    let mut rng = rng_from_seed(seed);
    let rho = spec.rho_exact();
    let p_dormant = rational::to_f64(&(&rho / (Rational::one() + &rho)));
    let env_seed = derive_stream(seed, &[1]);
    let u: f64 = rng.random();
    if u < p_dormant {
        let origin = spec.tilted_by_dormant_ratio().sample(&mut rng);
        Ok((Environment::lazy_with_origin(spec, dim, env_seed, origin), false))
    } else {
        Ok((sample_environment(spec, geometry, env_seed), true))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuenchedEstimate {
    pub mean: f64,
    pub halfwidth: f64,
    pub std_error: f64,
    pub replicas: u64,
}

/// Monte Carlo estimate of `E[h(Theta(t))]` for the CTMC dual started at
/// `(0, alpha0)` in a fixed environment. Replicas run in parallel with
/// derived seeds and are reduced in replica order.
#[allow(clippy::too_many_arguments)]
pub fn quenched_limit_estimate(
    env: &Environment,
    kernel: &MigrationKernel,
    lambda: &Rational,
    alpha0: bool,
    f_a: &DensitySpec,
    f_d: &DensitySpec,
    t: f64,
    replicas: u64,
    seed: u64,
) -> Result<QuenchedEstimate> {
    let k = env.size_bound();
    let ta = f_a.table(k)?;
    let td = f_d.table(k)?;
    let eta0 = DualParticle::new(Site::ORIGIN, alpha0);
    // Construct once to surface parameter errors before the parallel loop.
    CtmcWalker::new(eta0, env, kernel, lambda, 0)?;
    let values: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut w = CtmcWalker::new(eta0, env, kernel, lambda, derive_stream(seed, &[r]))
                .expect("validated parameters");
            let end = w.advance_to(t);
            let s = env.sizes(end.site);
            if end.active {
                ta.get(s)
            } else {
                td.get(s)
            }
        })
        .collect();
    let mut acc = MeanAccumulator::default();
    values.iter().for_each(|v| acc.push(*v));
    let (mean, halfwidth) = if replicas >= 2 {
        acc.ci(Confidence::THREE_SIGMA)?
    } else {
        (acc.mean(), f64::INFINITY)
    };
    Ok(QuenchedEstimate {
        mean,
        halfwidth,
        std_error: if replicas >= 2 { acc.std_error() } else { f64::INFINITY },
        replicas,
    })
}

/// Deterministic counterpart of [`quenched_limit_estimate`] for `d = 1`:
/// propagates the uniformized law on the segment `[-half_width, half_width]`
/// and returns the value together with the probability mass that left the
/// segment (an upper bound on the truncation error for densities in
/// `[0, 1]`).
#[allow(clippy::too_many_arguments)]
pub fn quenched_limit_exact(
    env: &Environment,
    params: &SubordinateParams,
    alpha0: bool,
    f_a: &DensitySpec,
    f_d: &DensitySpec,
    t: f64,
    half_width: i64,
    epsilon: f64,
) -> Result<(f64, f64)> {
    if env.geometry().dim() != 1 {
        return Err(Error::InvalidGeometry("segment propagation needs d = 1".into()));
    }
    let k = env.size_bound().max(params.k());
    let ta = f_a.table(k)?;
    let td = f_d.table(k)?;
    let g = *env.geometry();
    let w = half_width;
    let n_sites = (2 * w + 1) as usize;
    let site = |i: usize| g.wrap(Site::d1(i as i64 - w));
    let omega: Vec<f64> = (0..n_sites).map(|i| params.omega_f64(env.sizes(site(i)))).collect();
    let q_s = params.q_s_f64();
    let moves: Vec<(i64, f64)> = params
        .p_hat()
        .iter()
        .map(|(s, p)| (s.x, (1.0 - q_s) * rational::to_f64(p)))
        .collect();
    // Layout: [dormant..., active...].
    let mut cur = vec![0.0; 2 * n_sites];
    cur[w as usize + if alpha0 { n_sites } else { 0 }] = 1.0;
    let mut next = vec![0.0; 2 * n_sites];
    let mut value = 0.0;
    let mut kept = 0.0;
    let weights = crate::dual::poisson_weights(params.uniform_rate_f64() * t, epsilon);
    let h: Vec<f64> = (0..n_sites)
        .map(|i| td.get(env.sizes(site(i))))
        .chain((0..n_sites).map(|i| ta.get(env.sizes(site(i)))))
        .collect();
    for (step, &pw) in weights.iter().enumerate() {
        if step > 0 {
            next.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n_sites {
                let d = cur[i];
                if d != 0.0 {
                    next[i] += d * (1.0 - omega[i]);
                    next[n_sites + i] += d * omega[i];
                }
                let a = cur[n_sites + i];
                if a != 0.0 {
                    next[i] += a * q_s;
                    for &(dx, p) in &moves {
                        let j = i as i64 + dx;
                        if (0..n_sites as i64).contains(&j) {
                            next[n_sites + j as usize] += a * p;
                        }
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mass: f64 = cur.iter().sum();
        let hv: f64 = cur.iter().zip(&h).map(|(c, h)| c * h).sum();
        value += pw * hv;
        kept += pw * mass;
    }
    Ok((value, (1.0 - kept).max(0.0)))
}

/// Long-run averages along one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicSummary {
    /// Steps for discrete trajectories, elapsed time for continuous ones.
    pub horizon: f64,
    pub activity_fraction: f64,
    pub activity_halfwidth: f64,
    pub velocity: (f64, f64),
    pub velocity_halfwidth: (f64, f64),
}

/// Streaming summaries of a discrete trajectory `eta_0, eta_1, ..., eta_n`:
/// the fraction of steps `0..n` spent active and `X_n / n`, with batch-means
/// confidence half-widths over `batches` equal blocks.
pub fn ergodic_summaries<I>(geometry: &Geometry, trajectory: I, n: u64, batches: usize) -> Result<ErgodicSummary>
where
    I: IntoIterator<Item = DualParticle>,
{
    if n < batches as u64 || batches < 2 {
        return Err(Error::TooFewSamples(n as usize));
    }
    let block = n / batches as u64;
    let used = block * batches as u64;
    let mut it = trajectory.into_iter();
    let mut prev = it.next().ok_or(Error::TooFewSamples(0))?;
    let mut act_means = Vec::with_capacity(batches);
    let mut vx = Vec::with_capacity(batches);
    let mut vy = Vec::with_capacity(batches);
    let (mut total_active, mut pos) = (0u64, Site::ORIGIN);
    for _ in 0..batches {
        let (mut active, mut disp) = (0u64, Site::ORIGIN);
        for _ in 0..block {
            let next = it.next().ok_or(Error::TooFewSamples(0))?;
            active += prev.active as u64;
            disp = disp + geometry.centered(next.site - prev.site);
            prev = next;
        }
        total_active += active;
        pos = pos + disp;
        act_means.push(active as f64 / block as f64);
        vx.push(disp.x as f64 / block as f64);
        vy.push(disp.y as f64 / block as f64);
    }
    let conf = Confidence::THREE_SIGMA;
    let (_, a_hw) = batch_means_ci(&act_means, conf)?;
    let (_, x_hw) = batch_means_ci(&vx, conf)?;
    let (_, y_hw) = batch_means_ci(&vy, conf)?;
    Ok(ErgodicSummary {
        horizon: used as f64,
        activity_fraction: total_active as f64 / used as f64,
        activity_halfwidth: a_hw,
        velocity: (pos.x as f64 / used as f64, pos.y as f64 / used as f64),
        velocity_halfwidth: (x_hw, y_hw),
    })
}

/// Time-weighted summaries of a CTMC path `(t_k, eta_k)` observed on
/// `[0, t_end]`: active time over `t_end` and `x_t / t`.
pub fn ctmc_ergodic_summaries(
    geometry: &Geometry,
    path: &[(f64, DualParticle)],
    t_end: f64,
    batches: usize,
) -> Result<ErgodicSummary> {
    if path.is_empty() || batches < 2 || t_end <= 0.0 {
        return Err(Error::TooFewSamples(path.len()));
    }
    let width = t_end / batches as f64;
    let mut active = vec![0.0; batches];
    let mut disp = vec![Site::ORIGIN; batches];
    for (k, &(t0, p)) in path.iter().enumerate() {
        let t1 = path.get(k + 1).map(|x| x.0).unwrap_or(t_end).min(t_end);
        if p.active {
            let mut a = t0;
            while a < t1 {
                let b = ((a / width) as usize).min(batches - 1);
                let end = ((b + 1) as f64 * width).min(t1);
                active[b] += end - a;
                if end <= a {
                    break;
                }
                a = end;
            }
        }
        if let Some(&(tn, q)) = path.get(k + 1) {
            if tn <= t_end {
                let b = ((tn / width) as usize).min(batches - 1);
                disp[b] = disp[b] + geometry.centered(q.site - p.site);
            }
        }
    }
    let conf = Confidence::THREE_SIGMA;
    let act: Vec<f64> = active.iter().map(|a| a / width).collect();
    let vx: Vec<f64> = disp.iter().map(|d| d.x as f64 / width).collect();
    let vy: Vec<f64> = disp.iter().map(|d| d.y as f64 / width).collect();
    let (a, a_hw) = batch_means_ci(&act, conf)?;
    let (x, x_hw) = batch_means_ci(&vx, conf)?;
    let (y, y_hw) = batch_means_ci(&vy, conf)?;
    Ok(ErgodicSummary {
        horizon: t_end,
        activity_fraction: a,
        activity_halfwidth: a_hw,
        velocity: (x, y),
        velocity_halfwidth: (x_hw, y_hw),
    })
}

/// One observation of the environment process.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvProcObservation {
    pub step: u64,
    pub active: bool,
    pub displacement: Site,
    /// Sizes at the window sites around the walker, in window order.
    pub window: Vec<ColonySize>,
}

/// The chain `(T_{X_n} e, alpha_n)` observed through a finite window.
pub struct EnvironmentProcess<'a> {
    walk: SubordinateWalk<'a>,
    env: &'a Environment,
    offsets: Vec<Site>,
    step: u64,
    displacement: Site,
    last: Option<Site>,
}

impl<'a> EnvironmentProcess<'a> {
    pub fn new(eta0: DualParticle, params: &SubordinateParams, env: &'a Environment, radius: i64, seed: u64) -> Self {
        Self {
            walk: SubordinateWalk::new(eta0, params, env, seed),
            env,
            offsets: window_sites(env.geometry().dim(), radius),
            step: 0,
            displacement: Site::ORIGIN,
            last: None,
        }
    }
}

impl Iterator for EnvironmentProcess<'_> {
    type Item = EnvProcObservation;

    fn next(&mut self) -> Option<EnvProcObservation> {
        let p = self.walk.next()?;
        if let Some(prev) = self.last {
            self.displacement = self.displacement + self.env.geometry().centered(p.site - prev);
            self.step += 1;
        }
        self.last = Some(p.site);
        Some(EnvProcObservation {
            step: self.step,
            active: p.active,
            displacement: self.displacement,
            window: self.offsets.iter().map(|o| self.env.sizes(p.site + *o)).collect(),
        })
    }
}

/// Ten local test functions used to check stationarity of `Q`.
pub fn stationarity_battery(dim: u8, k: u32) -> Result<Vec<LocalFunction>> {
    let e1 = Site::d1(1);
    let two = move |s: ColonySize| if s.n == 2 { Rational::one() } else { Rational::zero() };
    let mut out = vec![
        LocalFunction::activity(dim),
        LocalFunction::dormancy(dim),
        LocalFunction::activity(dim).product(&LocalFunction::colony_fn(dim, Site::ORIGIN, two)),
        LocalFunction::dormancy(dim).product(&LocalFunction::colony_fn(dim, Site::ORIGIN, |s| s.k_ratio())),
        LocalFunction::colony_fn(dim, e1, |s| rational::int(s.n as i64)),
        LocalFunction::activity(dim).product(&LocalFunction::colony_fn(dim, -e1, |s| s.dormant_ratio())),
        LocalFunction::h(dim, &"1/N0".parse()?, &"0.5".parse()?, k)?,
        LocalFunction::colony_fn(dim, Site::ORIGIN, |s| rational::int(s.m as i64))
            .product(&LocalFunction::colony_fn(dim, e1, |s| rational::int(s.n as i64))),
        LocalFunction::dormancy(dim).product(&LocalFunction::colony_fn(dim, e1, two)),
    ];
    out.push(out[0].sum(&out[7].scale(rational::frac(1, 3))));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{frac, int};

    fn uniform23() -> FieldSpec {
        FieldSpec::uniform_product(3, &[2, 3], &[2, 3]).unwrap()
    }

    fn params() -> SubordinateParams {
        SubordinateParams::new(&MigrationKernel::preset("lazy-srw-1d").unwrap(), &int(1), 3).unwrap()
    }

    #[test]
    fn theta_examples() {
        let spec = uniform23();
        assert_eq!(theta(&spec, &"1/N0".parse().unwrap(), &"0.5".parse().unwrap()).unwrap(), frac(45, 98));
        let c: DensitySpec = "0.3".parse().unwrap();
        assert_eq!(theta(&spec, &c, &c).unwrap(), frac(3, 10));
        // kappa / N0 with kappa = 2: (E[2/N0] + rho/2) / (1 + rho).
        let rho = spec.rho_exact();
        let expected = (frac(5, 6) + &rho / int(2)) / (int(1) + &rho);
        assert_eq!(theta(&spec, &"2/N0".parse().unwrap(), &"1/2".parse().unwrap()).unwrap(), expected);
        assert!(theta(&spec, &"N0".parse().unwrap(), &c).is_err());
    }

    #[test]
    fn q_expectations() {
        let spec = uniform23();
        let rho = spec.rho_exact();
        let act = expectation_under_q(&LocalFunction::activity(1), &spec).unwrap();
        assert_eq!(act, int(1) / (int(1) + &rho));
        assert_eq!(act, frac(24, 49));
        let dorm = expectation_under_q(&LocalFunction::dormancy(1), &spec).unwrap();
        assert_eq!(dorm, &rho / (int(1) + &rho));
        let cancel = LocalFunction::dormancy(1).product(&LocalFunction::colony_fn(1, Site::ORIGIN, |s| s.k_ratio()));
        assert_eq!(expectation_under_q(&cancel, &spec).unwrap(), frac(24, 49));
        let (fa, fd) = ("1/N0".parse().unwrap(), "0.5".parse().unwrap());
        let h = LocalFunction::h(1, &fa, &fd, 3).unwrap();
        assert_eq!(expectation_under_q(&h, &spec).unwrap(), theta(&spec, &fa, &fd).unwrap());
    }

    #[test]
    fn r_operator_examples() {
        let spec = uniform23();
        let p = params();
        let c = LocalFunction::constant(1, frac(2, 7));
        let rc = apply_r_local(&c, &p);
        assert_eq!(rc.radius(), 1);
        let env = sample_environment(&spec, Geometry::lazy(1).unwrap(), 3);
        for a in [true, false] {
            assert_eq!(rc.eval_at(&env, Site::d1(5), a), frac(2, 7));
        }
        let ra = apply_r_local(&LocalFunction::activity(1), &p);
        for x in 0..20 {
            let s = env.sizes(Site::d1(x));
            assert_eq!(ra.eval_at(&env, Site::d1(x), false), p.omega(s));
            assert_eq!(ra.eval_at(&env, Site::d1(x), true), int(1) - p.q_s());
        }
    }

    #[test]
    fn q_is_stationary_for_battery() {
        let spec = uniform23();
        let p = params();
        for (i, f) in stationarity_battery(1, 3).unwrap().iter().enumerate() {
            let rf = apply_r_local(f, &p);
            assert_eq!(expectation_under_q(&rf, &spec).unwrap(), expectation_under_q(f, &spec).unwrap(), "battery {i}");
        }
    }

    #[test]
    fn q_is_stationary_for_drift_and_2d() {
        let spec = uniform23();
        let p = SubordinateParams::new(&MigrationKernel::preset("drift-1d").unwrap(), &frac(2, 3), 3).unwrap();
        for f in stationarity_battery(1, 3).unwrap() {
            assert_eq!(expectation_under_q(&apply_r_local(&f, &p), &spec).unwrap(), expectation_under_q(&f, &spec).unwrap());
        }
        let p2 = SubordinateParams::new(&MigrationKernel::preset("lazy-srw-2d").unwrap(), &int(1), 3).unwrap();
        let f = LocalFunction::activity(2).product(&LocalFunction::colony_fn(2, Site::ORIGIN, |s| int(s.n as i64)));
        assert_eq!(expectation_under_q(&apply_r_local(&f, &p2), &spec).unwrap(), expectation_under_q(&f, &spec).unwrap());
    }

    #[test]
    fn wrong_density_is_not_stationary() {
        // Replacing u by the constant 1 breaks invariance: a sanity check that
        // the identity is not vacuous.
        let spec = uniform23();
        let p = params();
        let f = LocalFunction::dormancy(1);
        let rf = apply_r_local(&f, &p);
        let plain = |g: &LocalFunction| -> Rational {
            let sites = window_sites(1, g.radius());
            let e = spec.entries();
            let mut total = Rational::zero();
            let n = e.len().pow(sites.len() as u32);
            for code in 0..n {
                let mut c = code;
                let mut vals = Vec::new();
                let mut w = Rational::one();
                for _ in 0..sites.len() {
                    vals.push(e[c % e.len()].0);
                    w *= &e[c % e.len()].1;
                    c /= e.len();
                }
                let view = WindowView { dim: 1, radius: g.radius(), values: &vals };
                total += w * (g.eval(&view, true) + g.eval(&view, false)) / int(2);
            }
            total
        };
        assert_ne!(plain(&rf), plain(&f));
    }

    #[test]
    #[should_panic(expected = "outside radius")]
    fn window_detects_undeclared_reads() {
        let f = LocalFunction::new(1, 0, |v, _| int(v.colony(Site::d1(1)).n as i64));
        let _ = expectation_under_q(&f, &uniform23());
    }

    #[test]
    fn window_limit() {
        let f = LocalFunction::new(2, 6, |_, _| int(0));
        assert!(matches!(expectation_under_q(&f, &uniform23()), Err(Error::WindowTooLarge(_))));
    }

    #[test]
    fn q_sampler_point_mass_and_tilt() {
        let point = FieldSpec::point_mass(2, ColonySize::new(2, 2)).unwrap();
        let trials = 100_000;
        let mut dormant = 0;
        for s in 0..trials {
            let (env, a) = sample_from_q(&point, 1, s).unwrap();
            assert_eq!(env.sizes(Site::d1(7)), ColonySize::new(2, 2));
            dormant += (!a) as u64;
        }
        let sigma = (0.25 / trials as f64).sqrt();
        assert!((dormant as f64 / trials as f64 - 0.5).abs() <= 3.0 * sigma);

        let spec = uniform23();
        let tilted = spec.tilted_by_dormant_ratio();
        let mut counts: HashMap<ColonySize, u64> = HashMap::new();
        let mut n_dormant = 0u64;
        for s in 0..trials {
            let (env, a) = sample_from_q(&spec, 1, s).unwrap();
            if !a {
                n_dormant += 1;
                *counts.entry(env.sizes(Site::ORIGIN)).or_default() += 1;
            }
        }
        let pd = 25.0 / 49.0;
        let sd = (pd * (1.0 - pd) / trials as f64).sqrt();
        assert!((n_dormant as f64 / trials as f64 - pd).abs() <= 3.0 * sd);
        for (s, p) in tilted.entries() {
            let p = rational::to_f64(p);
            let f = *counts.get(s).unwrap_or(&0) as f64 / n_dormant as f64;
            let sd = (p * (1.0 - p) / n_dormant as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * sd, "{s:?}: {f} vs {p}");
        }
    }

    #[test]
    fn quenched_trivial_cases() {
        let spec = uniform23();
        let env = sample_environment(&spec, Geometry::lazy(1).unwrap(), 2);
        let k = MigrationKernel::preset("lazy-srw-1d").unwrap();
        let c: DensitySpec = "0.4".parse().unwrap();
        let est = quenched_limit_estimate(&env, &k, &int(1), true, &c, &c, 50.0, 100, 1).unwrap();
        assert!((est.mean - 0.4).abs() < 1e-15);
        assert_eq!(est.halfwidth, 0.0);
        let fa: DensitySpec = "1/N0".parse().unwrap();
        let est = quenched_limit_estimate(&env, &k, &int(1), true, &fa, &c, 0.0, 10, 1).unwrap();
        let origin = env.sizes(Site::ORIGIN);
        assert_eq!(est.mean, 1.0 / origin.n as f64);
    }

    #[test]
    fn exact_quenched_matches_monte_carlo() {
        let spec = uniform23();
        let env = sample_environment(&spec, Geometry::lazy(1).unwrap(), 5);
        let k = MigrationKernel::preset("lazy-srw-1d").unwrap();
        let (fa, fd): (DensitySpec, DensitySpec) = ("1/N0".parse().unwrap(), "0.5".parse().unwrap());
        let (exact, lost) = quenched_limit_exact(&env, &params(), true, &fa, &fd, 20.0, 200, 1e-12).unwrap();
        assert!(lost < 1e-12);
        let mc = quenched_limit_estimate(&env, &k, &int(1), true, &fa, &fd, 20.0, 40_000, 9).unwrap();
        assert!((mc.mean - exact).abs() <= mc.halfwidth, "{} vs {exact}", mc.mean);
    }

    #[test]
    fn ergodic_activity_with_k_one() {
        let point = FieldSpec::point_mass(2, ColonySize::new(2, 2)).unwrap();
        let env = sample_environment(&point, Geometry::lazy(1).unwrap(), 1);
        let p = SubordinateParams::new(&MigrationKernel::preset("lazy-srw-1d").unwrap(), &int(1), 2).unwrap();
        let n = 1_000_000;
        let walk = SubordinateWalk::new(DualParticle::active(Site::ORIGIN), &p, &env, 4);
        let s = ergodic_summaries(env.geometry(), walk, n, 100).unwrap();
        assert!((s.activity_fraction - 0.5).abs() <= s.activity_halfwidth);
        assert!(s.velocity.0.abs() <= s.velocity_halfwidth.0);
    }

    #[test]
    fn environment_process_windows() {
        let spec = uniform23();
        let env = sample_environment(&spec, Geometry::lazy(1).unwrap(), 1);
        let proc_ = EnvironmentProcess::new(DualParticle::active(Site::ORIGIN), &params(), &env, 1, 3);
        for obs in proc_.take(200) {
            assert_eq!(obs.window.len(), 3);
            assert_eq!(obs.window[1], env.sizes(obs.displacement));
            assert!(obs.window.iter().all(|s| s.is_elliptic(3)));
        }
    }
}
