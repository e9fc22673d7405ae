//! Translation-invariant migration kernels `a(0, .)` and the parameters of
//! the uniformized (subordinate) single-particle chain.

use std::collections::BTreeMap;

use num_integer::Integer;
use num_traits::{Signed, Zero};

use crate::env::{ColonySize, Environment, Geometry, Site};
use crate::error::{Error, Result};
use crate::rational::{self, Rational};

/// Finite-range migration kernel with cached classification.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationKernel {
    dim: u8,
    /// Offset -> rate, including the origin. Only positive rates are kept.
    rates: BTreeMap<Site, Rational>,
    /// `Some(L)` once folded onto a torus of side `L`.
    period: Option<u32>,
    speed: Rational,
    symmetric: bool,
    zero_mean: bool,
    range: i64,
}

/// Validates a rate table.
pub fn make_kernel(dim: u8, table: Vec<(Site, Rational)>) -> Result<MigrationKernel> {
    if dim != 1 && dim != 2 {
        return Err(Error::DimensionMismatch(format!("kernel dimension {dim}")));
    }
    let mut rates: BTreeMap<Site, Rational> = BTreeMap::new();
    for (offset, rate) in table {
        if dim == 1 && offset.y != 0 {
            return Err(Error::OffsetDimension(offset, dim));
        }
        if rate.is_negative() {
            return Err(Error::NegativeRate(offset));
        }
        if !rate.is_zero() {
            *rates.entry(offset).or_insert_with(Rational::zero) += rate;
        }
    }
    if !rates.contains_key(&Site::ORIGIN) {
        return Err(Error::ZeroOriginRate);
    }
    let moves: Vec<Site> = rates.keys().copied().filter(|s| *s != Site::ORIGIN).collect();
    if !generates_lattice(dim, &moves) {
        return Err(Error::NonGeneratingSupport(dim));
    }
    Ok(MigrationKernel::build(dim, rates, None))
}

/// Whether the integer vectors generate `Z^dim` as a group.
fn generates_lattice(dim: u8, moves: &[Site]) -> bool {
    if dim == 1 {
        moves.iter().fold(0i64, |g, s| g.gcd(&s.x)) == 1
    } else {
        // Index of the generated sublattice = gcd of all 2x2 minors.
        let mut g = 0i64;
        for (a, u) in moves.iter().enumerate() {
            for v in &moves[a + 1..] {
                g = g.gcd(&(u.x * v.y - u.y * v.x));
            }
        }
        g == 1
    }
}

impl MigrationKernel {
    fn build(dim: u8, rates: BTreeMap<Site, Rational>, period: Option<u32>) -> Self {
        let speed: Rational = rates
            .iter()
            .filter(|(s, _)| **s != Site::ORIGIN)
            .map(|(_, r)| r.clone())
            .sum();
        let reflect = |s: Site| match period {
            Some(l) => {
                let l = l as i64;
                centered_mod(-s, l)
            }
            None => -s,
        };
        let symmetric = rates
            .iter()
            .all(|(s, r)| rates.get(&reflect(*s)).is_some_and(|q| q == r));
        let (mx, my) = rates.iter().fold((Rational::zero(), Rational::zero()), |(x, y), (s, r)| {
            (x + r * rational::int(s.x), y + r * rational::int(s.y))
        });
        let zero_mean = mx.is_zero() && my.is_zero();
        let range = rates.keys().map(|s| s.norm_inf()).max().unwrap_or(0);
        Self {
            dim,
            rates,
            period,
            speed,
            symmetric,
            zero_mean,
            range,
        }
    }

    /// Named presets: `lazy-srw-1d`, `drift-1d`, `lazy-srw-2d`.
    pub fn preset(name: &str) -> Result<Self> {
        let h = || rational::frac(1, 2);
        let q = || rational::frac(1, 4);
        match name {
            "lazy-srw-1d" => make_kernel(
                1,
                vec![(Site::d1(0), h()), (Site::d1(1), h()), (Site::d1(-1), h())],
            ),
            "drift-1d" => make_kernel(
                1,
                vec![
                    (Site::d1(0), h()),
                    (Site::d1(1), rational::frac(3, 4)),
                    (Site::d1(-1), q()),
                ],
            ),
            "lazy-srw-2d" => make_kernel(
                2,
                vec![
                    (Site::ORIGIN, h()),
                    (Site::d2(1, 0), q()),
                    (Site::d2(-1, 0), q()),
                    (Site::d2(0, 1), q()),
                    (Site::d2(0, -1), q()),
                ],
            ),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn rates(&self) -> &BTreeMap<Site, Rational> {
        &self.rates
    }

    pub fn rate(&self, offset: Site) -> Rational {
        self.rates.get(&offset).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn origin_rate(&self) -> Rational {
        self.rate(Site::ORIGIN)
    }

    /// `c = sum_{j != 0} a(0, j)`.
    pub fn speed(&self) -> &Rational {
        &self.speed
    }

    pub fn total_rate(&self) -> Rational {
        self.rates.values().cloned().sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_zero_mean(&self) -> bool {
        self.zero_mean
    }

    /// Sup-norm range of the support.
    pub fn range(&self) -> i64 {
        self.range
    }

    pub fn period(&self) -> Option<u32> {
        self.period
    }

    /// Sufficient condition for a recurrent, locally-CLT-regular walk: finite
    /// range (always), symmetric, `d <= 2`. Recurrence itself is not tested.
    pub fn is_recurrence_regime(&self) -> bool {
        self.dim <= 2 && self.symmetric
    }

    /// `sum_j j a(0, j)`.
    pub fn mean_displacement(&self) -> (Rational, Rational) {
        self.rates.iter().fold((Rational::zero(), Rational::zero()), |(x, y), (s, r)| {
            (x + r * rational::int(s.x), y + r * rational::int(s.y))
        })
    }

    /// Nonzero offsets with rates as doubles.
    pub fn moves_f64(&self) -> Vec<(Site, f64)> {
        self.rates
            .iter()
            .filter(|(s, _)| **s != Site::ORIGIN)
            .map(|(s, r)| (*s, rational::to_f64(r)))
            .collect()
    }
}

fn centered_mod(s: Site, l: i64) -> Site {
    let c = |v: i64| {
        let r = v.rem_euclid(l);
        if 2 * r > l {
            r - l
        } else {
            r
        }
    };
    Site::d2(c(s.x), c(s.y))
}

/// Folds the kernel onto a torus: offsets are reduced to representatives in
/// `(-L/2, L/2]` and coinciding residues have their rates summed.
pub fn periodize(kernel: &MigrationKernel, geometry: &Geometry) -> Result<MigrationKernel> {
    let side = geometry.side().ok_or(Error::NotTorus)?;
    if geometry.dim() != kernel.dim {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {}-dimensional, geometry is {}-dimensional",
            kernel.dim,
            geometry.dim()
        )));
    }
    if let Some(p) = kernel.period {
        if p == side {
            return Ok(kernel.clone());
        }
    }
    if kernel.range >= side as i64 {
        return Err(Error::RangeTooLarge {
            range: kernel.range,
            side,
        });
    }
    let mut folded: BTreeMap<Site, Rational> = BTreeMap::new();
    for (s, r) in &kernel.rates {
        *folded
            .entry(centered_mod(*s, side as i64))
            .or_insert_with(Rational::zero) += r;
    }
    Ok(MigrationKernel::build(kernel.dim, folded, Some(side)))
}

/// Parameters of the subordinate chain obtained by uniformizing the
/// single-particle dual at rate `R = c + lambda + lambda K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubordinateParams {
    lambda: Rational,
    k: u32,
    speed: Rational,
    uniform_rate: Rational,
    q_s: Rational,
    p_hat: BTreeMap<Site, Rational>,
    mean: (Rational, Rational),
    period: Option<u32>,
}

pub fn subordinate_params(
    kernel: &MigrationKernel,
    lambda: &Rational,
    k: u32,
    env: &Environment,
) -> Result<SubordinateParams> {
    if env.geometry().dim() != kernel.dim {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {}-dimensional, environment is {}-dimensional",
            kernel.dim,
            env.geometry().dim()
        )));
    }
    let found = env.size_bound();
    if found > k {
        return Err(Error::EllipticityExceeded { k, found });
    }
    SubordinateParams::new(kernel, lambda, k)
}

impl SubordinateParams {
    /// Parameters without an environment check; `k` must bound every size
    /// the chain will see.
    pub fn new(kernel: &MigrationKernel, lambda: &Rational, k: u32) -> Result<Self> {
        if !lambda.is_positive() {
            return Err(Error::NonPositiveLambda);
        }
        if k < 2 {
            return Err(Error::EllipticityTooSmall(k));
        }
        let kk = rational::int(k as i64);
        let c = kernel.speed().clone();
        let uniform_rate = &c + lambda + lambda * &kk;
        let q_s = lambda / &uniform_rate;
        let move_rate = &c + lambda * &kk;
        let mut p_hat = BTreeMap::new();
        p_hat.insert(Site::ORIGIN, lambda * &kk / &move_rate);
        for (s, r) in kernel.rates() {
            if *s != Site::ORIGIN {
                p_hat.insert(*s, r / &move_rate);
            }
        }
        let mean = p_hat.iter().fold((Rational::zero(), Rational::zero()), |(x, y), (s, p)| {
            (x + p * rational::int(s.x), y + p * rational::int(s.y))
        });
        Ok(Self {
            lambda: lambda.clone(),
            k,
            speed: c,
            uniform_rate,
            q_s,
            p_hat,
            mean,
            period: kernel.period(),
        })
    }

    pub fn lambda(&self) -> &Rational {
        &self.lambda
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn speed(&self) -> &Rational {
        &self.speed
    }

    /// `R = c + lambda + lambda K`.
    pub fn uniform_rate(&self) -> &Rational {
        &self.uniform_rate
    }

    pub fn q_s(&self) -> &Rational {
        &self.q_s
    }

    pub fn p_hat(&self) -> &BTreeMap<Site, Rational> {
        &self.p_hat
    }

    pub fn p_hat_at(&self, offset: Site) -> Rational {
        self.p_hat.get(&offset).cloned().unwrap_or_else(Rational::zero)
    }

    /// `v = sum_j j p_hat(j)`.
    pub fn mean(&self) -> &(Rational, Rational) {
        &self.mean
    }

    pub fn period(&self) -> Option<u32> {
        self.period
    }

    /// `omega = lambda N / (M R)`.
    pub fn omega(&self, size: ColonySize) -> Rational {
        &self.lambda * size.k_ratio() / &self.uniform_rate
    }

    pub fn omega_f64(&self, size: ColonySize) -> f64 {
        size.n as f64 * self.lambda_f64() / (size.m as f64 * self.uniform_rate_f64())
    }

    pub fn omega_at(&self, env: &Environment, site: Site) -> Rational {
        self.omega(env.sizes(site))
    }

    pub fn lambda_f64(&self) -> f64 {
        rational::to_f64(&self.lambda)
    }

    pub fn uniform_rate_f64(&self) -> f64 {
        rational::to_f64(&self.uniform_rate)
    }

    pub fn q_s_f64(&self) -> f64 {
        rational::to_f64(&self.q_s)
    }

    /// Whether `p_hat` is symmetric, modulo `side` if given.
    pub fn p_hat_symmetric_mod(&self, side: Option<u32>) -> bool {
        let fold = |s: Site| match side {
            Some(l) => centered_mod(s, l as i64),
            None => s,
        };
        let mut folded: BTreeMap<Site, Rational> = BTreeMap::new();
        for (s, p) in &self.p_hat {
            *folded.entry(fold(*s)).or_insert_with(Rational::zero) += p;
        }
        folded
            .iter()
            .all(|(s, p)| folded.get(&fold(-*s)).is_some_and(|q| q == p))
    }

    /// Range of `p_hat`.
    pub fn range(&self) -> i64 {
        self.p_hat.keys().map(|s| s.norm_inf()).max().unwrap_or(0)
    }
}

/// Discrete-time LLN velocity `(1 - q_s) v / (1 + rho)`.
pub fn lln_velocity_discrete(params: &SubordinateParams, rho: &Rational) -> (Rational, Rational) {
    let scale = (rational::int(1) - params.q_s()) / (rational::int(1) + rho);
    (&params.mean.0 * &scale, &params.mean.1 * &scale)
}

/// Continuous-time LLN velocity `R (1 - q_s) v / (1 + rho) = m_a / (1 + rho)`.
pub fn lln_velocity_continuous(kernel: &MigrationKernel, rho: &Rational) -> (Rational, Rational) {
    let (mx, my) = kernel.mean_displacement();
    let d = rational::int(1) + rho;
    (mx / &d, my / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FieldSpec;
    use crate::rational::{frac, int};
    use proptest::prelude::*;

    fn srw() -> MigrationKernel {
        MigrationKernel::preset("lazy-srw-1d").unwrap()
    }

    fn drift() -> MigrationKernel {
        MigrationKernel::preset("drift-1d").unwrap()
    }

    fn env3() -> Environment {
        Environment::constant(Geometry::torus(1, 3).unwrap(), ColonySize::new(3, 2)).unwrap()
    }

    #[test]
    fn make_kernel_examples() {
        let k = srw();
        assert!(k.is_symmetric());
        assert!(k.is_zero_mean());
        assert_eq!(k.speed(), &int(1));
        let d = drift();
        assert!(!d.is_symmetric());
        assert!(!d.is_zero_mean());
        assert_eq!(d.speed(), &int(1));
        assert_eq!(
            make_kernel(1, vec![(Site::d1(1), int(1))]),
            Err(Error::ZeroOriginRate)
        );
    }

    #[test]
    fn make_kernel_rejections() {
        assert_eq!(
            make_kernel(1, vec![(Site::ORIGIN, int(1)), (Site::d1(2), int(1)), (Site::d1(-2), int(1))]),
            Err(Error::NonGeneratingSupport(1))
        );
        assert_eq!(
            make_kernel(1, vec![(Site::ORIGIN, int(1))]),
            Err(Error::NonGeneratingSupport(1))
        );
        assert_eq!(
            make_kernel(1, vec![(Site::ORIGIN, int(1)), (Site::d1(1), frac(-1, 2))]),
            Err(Error::NegativeRate(Site::d1(1)))
        );
        // (1,1), (1,-1) generate an index-2 sublattice of Z^2.
        assert_eq!(
            make_kernel(
                2,
                vec![(Site::ORIGIN, int(1)), (Site::d2(1, 1), int(1)), (Site::d2(1, -1), int(1))]
            ),
            Err(Error::NonGeneratingSupport(2))
        );
        // Offsets 2 and 3 generate Z.
        assert!(make_kernel(1, vec![(Site::ORIGIN, int(1)), (Site::d1(2), int(1)), (Site::d1(3), int(1))]).is_ok());
        assert!(MigrationKernel::preset("lazy-srw-2d").unwrap().is_recurrence_regime());
        assert!(MigrationKernel::preset("nope").is_err());
    }

    #[test]
    fn subordinate_symmetric_example() {
        let p = subordinate_params(&srw(), &int(1), 3, &env3()).unwrap();
        assert_eq!(p.uniform_rate(), &int(5));
        assert_eq!(p.q_s(), &frac(1, 5));
        assert_eq!(p.p_hat_at(Site::ORIGIN), frac(3, 4));
        assert_eq!(p.p_hat_at(Site::d1(1)), frac(1, 8));
        assert_eq!(p.p_hat_at(Site::d1(-1)), frac(1, 8));
        assert_eq!(p.mean().0, int(0));
    }

    #[test]
    fn subordinate_drift_example() {
        let p = subordinate_params(&drift(), &int(1), 3, &env3()).unwrap();
        assert_eq!(p.p_hat_at(Site::d1(1)), frac(3, 16));
        assert_eq!(p.p_hat_at(Site::d1(-1)), frac(1, 16));
        assert_eq!(p.mean().0, frac(1, 8));
        assert_eq!(p.omega(ColonySize::new(3, 2)), frac(3, 10));
        assert_eq!(p.omega_at(&env3(), Site::d1(2)), frac(3, 10));
    }

    #[test]
    fn subordinate_rejects_bad_inputs() {
        assert_eq!(
            subordinate_params(&srw(), &int(1), 2, &env3()),
            Err(Error::EllipticityExceeded { k: 2, found: 3 })
        );
        assert_eq!(
            subordinate_params(&srw(), &int(0), 3, &env3()),
            Err(Error::NonPositiveLambda)
        );
        let lazy = crate::env::sample_environment(
            &FieldSpec::uniform_product(3, &[2, 3], &[2, 3]).unwrap(),
            Geometry::lazy(2).unwrap(),
            1,
        );
        assert!(matches!(
            subordinate_params(&srw(), &int(1), 3, &lazy),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lln_target_for_drift() {
        let spec = FieldSpec::uniform_product(3, &[2, 3], &[2, 3]).unwrap();
        let p = SubordinateParams::new(&drift(), &int(1), 3).unwrap();
        let (vx, vy) = lln_velocity_discrete(&p, &spec.rho_exact());
        assert_eq!(vx, frac(12, 245));
        assert_eq!(vy, int(0));
        // Continuous time: R times the discrete velocity.
        let (cx, _) = lln_velocity_continuous(&drift(), &spec.rho_exact());
        assert_eq!(cx, vx * int(5));
    }

    #[test]
    fn periodize_examples() {
        let g4 = Geometry::torus(1, 4).unwrap();
        let p4 = periodize(&srw(), &g4).unwrap();
        assert_eq!(p4.rates(), srw().rates());
        assert_eq!(p4.period(), Some(4));

        let g2 = Geometry::torus(1, 2).unwrap();
        let p2 = periodize(&srw(), &g2).unwrap();
        assert_eq!(p2.rates().len(), 2);
        assert_eq!(p2.rate(Site::d1(1)), int(1));
        assert_eq!(p2.total_rate(), srw().total_rate());
        assert!(p2.is_symmetric());

        let d2 = periodize(&drift(), &g2).unwrap();
        assert!(d2.is_symmetric());
        assert_eq!(d2.rate(Site::d1(1)), int(1));

        let wide = make_kernel(1, vec![(Site::ORIGIN, int(1)), (Site::d1(2), int(1)), (Site::d1(-3), int(1))]).unwrap();
        assert!(matches!(periodize(&wide, &Geometry::torus(1, 3).unwrap()), Err(Error::RangeTooLarge { .. })));
        assert!(matches!(periodize(&srw(), &Geometry::lazy(1).unwrap()), Err(Error::NotTorus)));
    }

    fn arb_kernel() -> impl Strategy<Value = MigrationKernel> {
        (1u8..=2, proptest::collection::vec((-2i64..=2, -2i64..=2, 1u32..20), 1..6), 1u32..10)
            .prop_filter_map("generating", |(dim, moves, origin)| {
                let mut table = vec![(Site::ORIGIN, frac(origin as i64, 4))];
                table.push((Site::d1(1), frac(1, 3)));
                if dim == 2 {
                    table.push((Site::d2(0, 1), frac(1, 5)));
                }
                for (x, y, r) in moves {
                    let y = if dim == 1 { 0 } else { y };
                    table.push((Site::d2(x, y), frac(r as i64, 7)));
                }
                make_kernel(dim, table).ok()
            })
    }

    proptest! {
        #[test]
        fn active_row_is_stochastic(kernel in arb_kernel(), lam in 1i64..20, k in 2u32..8) {
            let lambda = frac(lam, 4);
            let p = SubordinateParams::new(&kernel, &lambda, k).unwrap();
            let total: Rational = p.p_hat().values().cloned().sum();
            prop_assert_eq!(&total, &int(1));
            let one_minus = int(1) - p.q_s();
            prop_assert_eq!(p.q_s() + &one_minus * &total, int(1));
            // Uniformization consistency.
            for (s, r) in kernel.rates() {
                if *s != Site::ORIGIN {
                    prop_assert_eq!(&one_minus * p.p_hat_at(*s), r / p.uniform_rate());
                }
            }
            prop_assert_eq!(&one_minus * p.p_hat_at(Site::ORIGIN),
                            &lambda * int(k as i64) / p.uniform_rate());
            prop_assert!(p.p_hat_at(Site::ORIGIN) > Rational::zero());
            // omega in (0, 1) on the elliptic box.
            for n in 2..=k {
                for m in 2..=k {
                    let w = p.omega(ColonySize::new(n, m));
                    prop_assert!(w > Rational::zero() && w < int(1));
                }
            }
            if kernel.is_symmetric() {
                prop_assert!(p.p_hat_symmetric_mod(None));
                prop_assert!(p.mean().0.is_zero() && p.mean().1.is_zero());
            }
        }

        #[test]
        fn periodize_conserves_mass(kernel in arb_kernel(), side in 3u32..9) {
            let g = Geometry::torus(kernel.dim(), side).unwrap();
            let folded = periodize(&kernel, &g).unwrap();
            prop_assert_eq!(folded.total_rate(), kernel.total_rate());
            prop_assert_eq!(folded.speed(), kernel.speed());
            // idempotent
            prop_assert_eq!(periodize(&folded, &g).unwrap(), folded);
        }
    }
}
