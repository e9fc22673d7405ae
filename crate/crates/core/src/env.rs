//! Uniformly elliptic environments: per-colony active/dormant population
//! sizes `(N_i, M_i)` over a torus or over the whole lattice.

use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, Neg, Sub};
use std::sync::Arc;

use num_traits::{Signed, Zero};

use crate::error::{Error, Result};
use crate::rational::{self, Rational};
use crate::stats::{hash_words, unit_f64};

/// A lattice point of `Z^1` or `Z^2`. In one dimension `y` is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Site {
    pub x: i64,
    pub y: i64,
}

impl Site {
    pub const ORIGIN: Site = Site { x: 0, y: 0 };

    pub const fn d1(x: i64) -> Site {
        Site { x, y: 0 }
    }

    pub const fn d2(x: i64, y: i64) -> Site {
        Site { x, y }
    }

    /// Sup-norm.
    pub fn norm_inf(self) -> i64 {
        self.x.abs().max(self.y.abs())
    }
}

impl Add for Site {
    type Output = Site;
    fn add(self, o: Site) -> Site {
        Site::d2(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Site {
    type Output = Site;
    fn sub(self, o: Site) -> Site {
        Site::d2(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        Site::d2(-self.x, -self.y)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.y == 0 {
            write!(f, "{}", self.x)
        } else {
            write!(f, "{},{}", self.x, self.y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Torus,
    LazyInfinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    dim: u8,
    side: Option<u32>,
}

impl Geometry {
    pub fn torus(dim: u8, side: u32) -> Result<Self> {
        check_dim(dim)?;
        if side < 2 {
            return Err(Error::InvalidGeometry(format!("torus side must be >= 2, got {side}")));
        }
        if (side as u128).pow(dim as u32) > u32::MAX as u128 {
            return Err(Error::InvalidGeometry("torus too large".into()));
        }
        Ok(Self {
            dim,
            side: Some(side),
        })
    }

    pub fn lazy(dim: u8) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim, side: None })
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn side(&self) -> Option<u32> {
        self.side
    }

    pub fn mode(&self) -> Mode {
        if self.side.is_some() {
            Mode::Torus
        } else {
            Mode::LazyInfinite
        }
    }

    pub fn is_torus(&self) -> bool {
        self.side.is_some()
    }

    /// `L^d` for tori.
    pub fn num_sites(&self) -> Option<usize> {
        self.side.map(|l| (l as usize).pow(self.dim as u32))
    }

    pub fn fits_dimension(&self, site: Site) -> bool {
        self.dim == 2 || site.y == 0
    }

    /// Canonical representative: components reduced into `[0, L)` on tori,
    /// unchanged on the infinite lattice.
    pub fn wrap(&self, site: Site) -> Site {
        match self.side {
            Some(l) => {
                let l = l as i64;
                Site::d2(site.x.rem_euclid(l), site.y.rem_euclid(l))
            }
            None => site,
        }
    }

    /// Row-major index of a torus site (after wrapping).
    #[inline]
    pub fn index(&self, site: Site) -> usize {
        let l = self.side.expect("index() requires a torus") as i64;
        let x = site.x.rem_euclid(l);
        let y = site.y.rem_euclid(l);
        (x + l * y) as usize
    }

    pub fn site_of(&self, index: usize) -> Site {
        let l = self.side.expect("site_of() requires a torus") as usize;
        if self.dim == 1 {
            Site::d1(index as i64)
        } else {
            Site::d2((index % l) as i64, (index / l) as i64)
        }
    }

    /// All torus sites in index order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.num_sites().unwrap_or(0))
            .map(|i| self.site_of(i))
            .collect()
    }

    /// Representative of an offset in `(-L/2, L/2]` per coordinate.
    pub fn centered(&self, offset: Site) -> Site {
        match self.side {
            Some(l) => {
                let l = l as i64;
                let c = |v: i64| {
                    let r = v.rem_euclid(l);
                    if 2 * r > l {
                        r - l
                    } else {
                        r
                    }
                };
                Site::d2(c(offset.x), c(offset.y))
            }
            None => offset,
        }
    }
}

fn check_dim(dim: u8) -> Result<()> {
    if dim == 1 || dim == 2 {
        Ok(())
    } else {
        Err(Error::InvalidGeometry(format!("dimension must be 1 or 2, got {dim}")))
    }
}

/// Active and dormant population sizes `(N, M)` of one colony.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColonySize {
    pub n: u32,
    pub m: u32,
}

impl ColonySize {
    pub const fn new(n: u32, m: u32) -> Self {
        Self { n, m }
    }

    /// `K = N / M`.
    pub fn k_ratio(&self) -> Rational {
        rational::frac(self.n as i64, self.m as i64)
    }

    /// `M / N`, the relative strength of the seed-bank.
    pub fn dormant_ratio(&self) -> Rational {
        rational::frac(self.m as i64, self.n as i64)
    }

    pub fn is_elliptic(&self, k: u32) -> bool {
        (2..=k).contains(&self.n) && (2..=k).contains(&self.m)
    }
}

/// Law of an iid product field: one marginal on `{2..=K}^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    k: u32,
    entries: Vec<(ColonySize, Rational)>,
    cumulative: Vec<f64>,
}

/// Validates a marginal table. Zero-mass entries are dropped.
pub fn make_field_spec(k: u32, table: Vec<(ColonySize, Rational)>) -> Result<FieldSpec> {
    if k < 2 {
        return Err(Error::EllipticityTooSmall(k));
    }
    let mut entries: Vec<(ColonySize, Rational)> = Vec::with_capacity(table.len());
    for (size, p) in table {
        if p.is_negative() {
            return Err(Error::NegativeProbability {
                n: size.n,
                m: size.m,
            });
        }
        if !size.is_elliptic(k) {
            return Err(Error::OutsideEllipticBox {
                n: size.n,
                m: size.m,
                k,
            });
        }
        if entries.iter().any(|(s, _)| *s == size) {
            return Err(Error::DuplicateEntry {
                n: size.n,
                m: size.m,
            });
        }
        if !p.is_zero() {
            entries.push((size, p));
        }
    }
    entries.sort_by_key(|(s, _)| *s);
    let total: Rational = entries.iter().map(|(_, p)| p.clone()).sum();
    let total_f = rational::to_f64(&total);
    if (total_f - 1.0).abs() > 1e-12 || entries.is_empty() {
        return Err(Error::NotNormalized(total_f));
    }
    let mut acc = Rational::zero();
    let cumulative = entries
        .iter()
        .map(|(_, p)| {
            acc += p;
            rational::to_f64(&(&acc / &total))
        })
        .collect();
    Ok(FieldSpec {
        k,
        entries,
        cumulative,
    })
}

impl FieldSpec {
    pub fn point_mass(k: u32, size: ColonySize) -> Result<Self> {
        make_field_spec(k, vec![(size, rational::int(1))])
    }

    /// Product of independent uniform laws for `N` over `ns` and `M` over `ms`.
    pub fn uniform_product(k: u32, ns: &[u32], ms: &[u32]) -> Result<Self> {
        let w = rational::frac(1, (ns.len() * ms.len()) as i64);
        let table = ns
            .iter()
            .flat_map(|&n| ms.iter().map(move |&m| ColonySize::new(n, m)))
            .map(|s| (s, w.clone()))
            .collect();
        make_field_spec(k, table)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Support points with their probabilities, sorted by `(N, M)`.
    pub fn entries(&self) -> &[(ColonySize, Rational)] {
        &self.entries
    }

    pub fn probability(&self, size: ColonySize) -> Rational {
        self.entries
            .iter()
            .find(|(s, _)| *s == size)
            .map(|(_, p)| p.clone())
            .unwrap_or_else(Rational::zero)
    }

    /// Exact mean of `g(N, M)` under the marginal.
    pub fn expect<F: Fn(ColonySize) -> Rational>(&self, g: F) -> Rational {
        self.entries.iter().map(|(s, p)| p * g(*s)).sum()
    }

    /// `rho = E[M_0 / N_0]`, exactly.
    pub fn rho_exact(&self) -> Rational {
        self.expect(|s| s.dormant_ratio())
    }

    /// Marginal reweighted by `M/N` and normalized by `rho`.
    pub fn tilted_by_dormant_ratio(&self) -> FieldSpec {
        let rho = self.rho_exact();
        let table = self
            .entries
            .iter()
            .map(|(s, p)| (*s, p * s.dormant_ratio() / &rho))
            .collect();
        make_field_spec(self.k, table).expect("tilt of a valid marginal is valid")
    }

    /// Inverse-CDF draw from a uniform in `[0, 1)`.
    #[inline]
    pub fn sample_with(&self, u: f64) -> ColonySize {
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.entries.len() - 1);
        self.entries[idx].0
    }

    /// Random draw from an RNG.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ColonySize {
        self.sample_with(rng.random::<f64>())
    }
}

/// Free function form of [`FieldSpec::rho_exact`].
pub fn rho_exact(spec: &FieldSpec) -> Rational {
    spec.rho_exact()
}

/// Anything that answers "what are the sizes at this offset from the origin".
pub trait SiteView {
    fn colony(&self, offset: Site) -> ColonySize;
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Torus(Vec<ColonySize>),
    Lazy {
        spec: FieldSpec,
        seed: u64,
        origin: Option<ColonySize>,
    },
}

/// Where a sampled environment came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub spec: FieldSpec,
    pub seed: u64,
}

/// A static environment. Cloning and shifting are cheap; storage is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    geometry: Geometry,
    storage: Arc<Storage>,
    shift: Site,
    provenance: Option<Provenance>,
}

/// Hash-derived colony of a lazy field at an absolute site.
#[inline]
fn lazy_colony(spec: &FieldSpec, seed: u64, site: Site) -> ColonySize {
    spec.sample_with(unit_f64(hash_words(&[seed, site.x as u64, site.y as u64])))
}

/// Samples an iid environment. Torus site `i` takes the same value a lazy
/// environment with the same seed has at that site.
pub fn sample_environment(spec: &FieldSpec, geometry: Geometry, seed: u64) -> Environment {
    let storage = match geometry.num_sites() {
        Some(n) => Storage::Torus(
            (0..n)
                .map(|i| lazy_colony(spec, seed, geometry.site_of(i)))
                .collect(),
        ),
        None => Storage::Lazy {
            spec: spec.clone(),
            seed,
            origin: None,
        },
    };
    Environment {
        geometry,
        storage: Arc::new(storage),
        shift: Site::ORIGIN,
        provenance: Some(Provenance {
            spec: spec.clone(),
            seed,
        }),
    }
}

impl Environment {
    /// Torus environment from explicit sizes in site-index order.
    pub fn from_sizes(geometry: Geometry, sizes: Vec<ColonySize>) -> Result<Self> {
        let expected = geometry.num_sites().ok_or(Error::NotTorus)?;
        if sizes.len() != expected {
            return Err(Error::SiteCountMismatch {
                got: sizes.len(),
                expected,
            });
        }
        if let Some(bad) = sizes.iter().find(|s| s.n < 2 || s.m < 2) {
            return Err(Error::OutsideEllipticBox {
                n: bad.n,
                m: bad.m,
                k: bad.n.max(bad.m).max(2),
            });
        }
        Ok(Self {
            geometry,
            storage: Arc::new(Storage::Torus(sizes)),
            shift: Site::ORIGIN,
            provenance: None,
        })
    }

    /// Constant environment on a torus.
    pub fn constant(geometry: Geometry, size: ColonySize) -> Result<Self> {
        let n = geometry.num_sites().ok_or(Error::NotTorus)?;
        Self::from_sizes(geometry, vec![size; n])
    }

    /// Lazy iid field whose origin value is fixed.
    pub(crate) fn lazy_with_origin(spec: &FieldSpec, dim: u8, seed: u64, origin: ColonySize) -> Self {
        Self {
            geometry: Geometry::lazy(dim).expect("valid dimension"),
            storage: Arc::new(Storage::Lazy {
                spec: spec.clone(),
                seed,
                origin: Some(origin),
            }),
            shift: Site::ORIGIN,
            provenance: Some(Provenance {
                spec: spec.clone(),
                seed,
            }),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn is_torus(&self) -> bool {
        self.geometry.is_torus()
    }

    /// Sizes at a site, seen through the current shift.
    #[inline]
    pub fn sizes(&self, site: Site) -> ColonySize {
        let abs = site + self.shift;
        match &*self.storage {
            Storage::Torus(v) => v[self.geometry.index(abs)],
            Storage::Lazy { spec, seed, origin } => match origin {
                Some(o) if abs == Site::ORIGIN => *o,
                _ => lazy_colony(spec, *seed, abs),
            },
        }
    }

    /// Checked lookup.
    pub fn try_sizes(&self, site: Site) -> Result<ColonySize> {
        if !self.geometry.fits_dimension(site) {
            return Err(Error::InvalidSite(site));
        }
        Ok(self.sizes(site))
    }

    /// `K_i = N_i / M_i`, exactly.
    pub fn ratio_k(&self, site: Site) -> Result<Rational> {
        Ok(self.try_sizes(site)?.k_ratio())
    }

    /// View with `T_j e: i -> e(i + j)`.
    pub fn shift_view(&self, j: Site) -> Environment {
        let mut out = self.clone();
        out.shift = self.geometry.wrap(self.shift + j);
        out
    }

    /// Upper bound on all sizes: the field's `K` for lazy environments,
    /// the largest stored size on tori.
    pub fn size_bound(&self) -> u32 {
        match &*self.storage {
            Storage::Torus(v) => v.iter().map(|s| s.n.max(s.m)).max().unwrap_or(2),
            Storage::Lazy { spec, origin, .. } => {
                spec.k().max(origin.map(|o| o.n.max(o.m)).unwrap_or(2))
            }
        }
    }

    /// All torus sizes in site-index order, with the shift applied.
    pub fn torus_sizes(&self) -> Result<Vec<ColonySize>> {
        let n = self.geometry.num_sites().ok_or(Error::NotTorus)?;
        Ok((0..n).map(|i| self.sizes(self.geometry.site_of(i))).collect())
    }

    /// Writes `site_index,N,M` rows for a torus environment.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let sizes = self
            .torus_sizes()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        writeln!(w, "site_index,N,M")?;
        for (i, s) in sizes.iter().enumerate() {
            writeln!(w, "{i},{},{}", s.n, s.m)?;
        }
        Ok(())
    }
}

impl SiteView for Environment {
    #[inline]
    fn colony(&self, offset: Site) -> ColonySize {
        self.sizes(offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::frac;
    use proptest::prelude::*;

    fn uniform23() -> FieldSpec {
        FieldSpec::uniform_product(3, &[2, 3], &[2, 3]).unwrap()
    }

    #[test]
    fn field_spec_validation() {
        let d = FieldSpec::point_mass(2, ColonySize::new(2, 2)).unwrap();
        assert_eq!(d.entries().len(), 1);
        assert_eq!(uniform23().entries().len(), 4);

        let bad = make_field_spec(
            3,
            vec![
                (ColonySize::new(1, 2), frac(1, 2)),
                (ColonySize::new(2, 2), frac(1, 2)),
            ],
        );
        assert!(matches!(bad, Err(Error::OutsideEllipticBox { n: 1, m: 2, .. })));

        let big = make_field_spec(3, vec![(ColonySize::new(4, 2), frac(1, 1))]);
        assert!(matches!(big, Err(Error::OutsideEllipticBox { .. })));

        let unnormalized = make_field_spec(3, vec![(ColonySize::new(2, 2), frac(1, 2))]);
        assert!(matches!(unnormalized, Err(Error::NotNormalized(_))));

        let negative = make_field_spec(
            3,
            vec![
                (ColonySize::new(2, 2), frac(3, 2)),
                (ColonySize::new(3, 3), frac(-1, 2)),
            ],
        );
        assert!(matches!(negative, Err(Error::NegativeProbability { .. })));

        assert!(matches!(
            make_field_spec(1, vec![]),
            Err(Error::EllipticityTooSmall(1))
        ));
    }

    #[test]
    fn rho_values() {
        assert_eq!(
            FieldSpec::point_mass(2, ColonySize::new(2, 2)).unwrap().rho_exact(),
            frac(1, 1)
        );
        assert_eq!(uniform23().rho_exact(), frac(25, 24));
        assert_eq!(
            FieldSpec::point_mass(3, ColonySize::new(3, 2)).unwrap().rho_exact(),
            frac(2, 3)
        );
    }

    #[test]
    fn ratio_k_is_exact() {
        let g = Geometry::torus(1, 3).unwrap();
        let env = Environment::from_sizes(
            g,
            vec![ColonySize::new(2, 2), ColonySize::new(3, 2), ColonySize::new(2, 3)],
        )
        .unwrap();
        assert_eq!(env.ratio_k(Site::d1(0)).unwrap(), frac(1, 1));
        assert_eq!(env.ratio_k(Site::d1(1)).unwrap(), frac(3, 2));
        assert_eq!(env.ratio_k(Site::d1(2)).unwrap(), frac(2, 3));
        assert!(env.ratio_k(Site::d2(0, 1)).is_err());
    }

    #[test]
    fn point_mass_torus() {
        let spec = FieldSpec::point_mass(2, ColonySize::new(2, 2)).unwrap();
        let env = sample_environment(&spec, Geometry::torus(1, 4).unwrap(), 5);
        assert_eq!(env.torus_sizes().unwrap(), vec![ColonySize::new(2, 2); 4]);
    }

    #[test]
    fn lazy_lookups_are_pure() {
        let spec = uniform23();
        let a = sample_environment(&spec, Geometry::lazy(1).unwrap(), 1234);
        let b = sample_environment(&spec, Geometry::lazy(1).unwrap(), 1234);
        assert_eq!(a.sizes(Site::d1(17)), b.sizes(Site::d1(17)));
        let first: Vec<_> = (0..1000).map(|i| a.sizes(Site::d1(i))).collect();
        let mut mismatches = 0usize;
        for round in 0..1000 {
            for i in 0..1000 {
                if a.sizes(Site::d1(i)) != first[i as usize] {
                    mismatches += 1;
                }
            }
            let _ = round;
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn empirical_marginal_of_large_torus() {
        // Binomial(1e4, 1/4) per support point: 3 sigma = 3 * sqrt(1e4 * 3/16).
        let spec = uniform23();
        let env = sample_environment(&spec, Geometry::torus(1, 10_000).unwrap(), 77);
        let sizes = env.torus_sizes().unwrap();
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for (s, _) in spec.entries() {
            let count = sizes.iter().filter(|x| *x == s).count() as f64;
            assert!((count - 2500.0).abs() <= 3.0 * sigma, "{s:?}: {count}");
        }
    }

    #[test]
    fn shift_identity_and_wrap() {
        let spec = uniform23();
        let env = sample_environment(&spec, Geometry::torus(1, 4).unwrap(), 3);
        let same = env.shift_view(Site::ORIGIN);
        let wrapped = env.shift_view(Site::d1(4));
        for i in -8..8 {
            assert_eq!(env.sizes(Site::d1(i)), same.sizes(Site::d1(i)));
            assert_eq!(env.sizes(Site::d1(i)), wrapped.sizes(Site::d1(i)));
        }
    }

    #[test]
    fn tilted_marginal() {
        let t = uniform23().tilted_by_dormant_ratio();
        // weights (1/4) (M/N) / (25/24)
        assert_eq!(t.probability(ColonySize::new(2, 3)), frac(9, 25));
        assert_eq!(t.probability(ColonySize::new(3, 2)), frac(4, 25));
        assert_eq!(t.probability(ColonySize::new(2, 2)), frac(6, 25));
    }

    #[test]
    fn csv_export() {
        let env = Environment::constant(Geometry::torus(1, 2).unwrap(), ColonySize::new(2, 3))
            .unwrap();
        let mut buf = Vec::new();
        env.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "site_index,N,M\n0,2,3\n1,2,3\n");
    }

    proptest! {
        #[test]
        fn shift_group_law(seed in any::<u64>(), j in -50i64..50, k in -50i64..50,
                           jy in -5i64..5, ky in -5i64..5, torus in any::<bool>()) {
            let spec = uniform23();
            let g = if torus { Geometry::torus(2, 7).unwrap() } else { Geometry::lazy(2).unwrap() };
            let env = sample_environment(&spec, g, seed);
            let a = env.shift_view(Site::d2(j, jy)).shift_view(Site::d2(k, ky));
            let b = env.shift_view(Site::d2(j + k, jy + ky));
            for x in -3..3 {
                for y in -3..3 {
                    let s = Site::d2(x, y);
                    prop_assert_eq!(a.sizes(s), b.sizes(s));
                    prop_assert_eq!(a.sizes(s), env.sizes(s + Site::d2(j + k, jy + ky)));
                }
            }
        }

        #[test]
        fn sampled_sites_are_elliptic(seed in any::<u64>(), x in -1000i64..1000) {
            let spec = uniform23();
            let env = sample_environment(&spec, Geometry::lazy(1).unwrap(), seed);
            prop_assert!(env.sizes(Site::d1(x)).is_elliptic(spec.k()));
        }
    }
}
