//! Line-based `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `field.marginal` and
//! `kernel.entry` may repeat; every other key may appear once. Values may be
//! wrapped in double quotes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use seedbank::dsl::DensitySpec;
use seedbank::env::{make_field_spec, ColonySize, FieldSpec, Geometry, Site};
use seedbank::forward::{ForwardState, InitialLaw};
use seedbank::kernel::{make_kernel, MigrationKernel};
use seedbank::rational::{self, Rational};
use seedbank::DualParticle;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{key} (line {line}): unknown key")]
    UnknownKey { key: String, line: usize },
    #[error("{key} (line {line}): key given more than once")]
    Duplicate { key: String, line: usize },
    #[error("{key}: required key missing")]
    Missing { key: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

const REPEATABLE: &[&str] = &["field.marginal", "kernel.entry"];

const SINGLE: &[&str] = &[
    "command",
    "geometry.d",
    "geometry.L",
    "field.K",
    "kernel.preset",
    "lambda",
    "fA",
    "fD",
    "horizon.t",
    "horizon.t_grid",
    "horizon.steps",
    "replicas",
    "seed",
    "workers",
    "output",
    "initial.law",
    "initial.X",
    "initial.Y",
    "dual.start",
    "env.count",
];

/// Raw key/value pairs in file order.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    single: BTreeMap<String, String>,
    repeated: BTreeMap<String, Vec<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        for (k, line) in text.lines().enumerate() {
            let line_no = k + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let key = key.trim().to_string();
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if REPEATABLE.contains(&key.as_str()) {
                raw.repeated.entry(key).or_default().push(value.to_string());
            } else if SINGLE.contains(&key.as_str()) {
                if raw.single.contains_key(&key) {
                    return Err(ConfigError::Duplicate { key, line: line_no });
                }
                raw.single.insert(key, value.to_string());
            } else {
                return Err(ConfigError::UnknownKey { key, line: line_no });
            }
        }
        Ok(raw)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.single.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing { key: key.into() })
    }

    fn rows(&self, key: &str) -> &[String] {
        self.repeated.get(key).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn invalid(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| invalid(key, format!("{v:?}: {e}")))
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',')
        .map(|p| {
            let x: f64 = parse_num(key, p.trim())?;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(invalid(key, format!("{x} is not a non-negative time")))
            }
        })
        .collect()
}

fn parse_counts(key: &str, v: &str) -> Result<Vec<u32>, ConfigError> {
    v.split_whitespace().map(|p| parse_num(key, p)).collect()
}

fn parse_offset(key: &str, text: &str, dim: u8) -> Result<Site, ConfigError> {
    let parts: Vec<i64> = text
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_, _>>()?;
    match (dim, parts.as_slice()) {
        (1, [x]) => Ok(Site::d1(*x)),
        (2, [x, y]) => Ok(Site::d2(*x, *y)),
        _ => Err(invalid(key, format!("offset {text:?} does not match dimension {dim}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    Law(InitialLaw),
    Explicit(ForwardState),
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub geometry: Geometry,
    pub field: FieldSpec,
    pub kernel: MigrationKernel,
    pub lambda: Rational,
    pub f_a: DensitySpec,
    pub f_d: DensitySpec,
    pub t_grid: Vec<f64>,
    pub steps: u64,
    pub replicas: u64,
    pub seed: u64,
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub initial: Initial,
    pub dual_start: Option<DualParticle>,
    pub env_count: u64,
}

impl ExperimentConfig {
    /// Parses and validates. `seed_override` replaces the `seed` key, which
    /// is otherwise required.
    pub fn from_text(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(text)?;
        let dim: u8 = parse_num("geometry.d", raw.require("geometry.d")?)?;
        let geometry = match raw.require("geometry.L")? {
            "lazy" => Geometry::lazy(dim),
            side => Geometry::torus(dim, parse_num("geometry.L", side)?),
        }
        .map_err(|e| invalid("geometry", e))?;

        let k: u32 = parse_num("field.K", raw.require("field.K")?)?;
        let rows = raw.rows("field.marginal");
        if rows.is_empty() {
            return Err(ConfigError::Missing { key: "field.marginal".into() });
        }
        let mut table = Vec::new();
        for row in rows {
            let parts: Vec<&str> = row.split_whitespace().collect();
            let [n, m, p] = parts.as_slice() else {
                return Err(invalid("field.marginal", format!("{row:?}: expected \"N M prob\"")));
            };
            let prob = rational::parse(p).ok_or_else(|| invalid("field.marginal", format!("{p:?} is not a number")))?;
            table.push((ColonySize::new(parse_num("field.marginal", n)?, parse_num("field.marginal", m)?), prob));
        }
        let field = make_field_spec(k, table).map_err(|e| invalid("field.marginal", e))?;

        let entries = raw.rows("kernel.entry");
        let kernel = match (raw.get("kernel.preset"), entries.is_empty()) {
            (Some(_), false) => return Err(invalid("kernel", "give kernel.preset or kernel.entry, not both")),
            (Some(name), true) => MigrationKernel::preset(name).map_err(|e| invalid("kernel.preset", e))?,
            (None, false) => {
                let mut table = Vec::new();
                for row in entries {
                    let parts: Vec<&str> = row.split_whitespace().collect();
                    let [off, rate] = parts.as_slice() else {
                        return Err(invalid("kernel.entry", format!("{row:?}: expected \"offset rate\"")));
                    };
                    let rate = rational::parse(rate)
                        .ok_or_else(|| invalid("kernel.entry", format!("{rate:?} is not a number")))?;
                    table.push((parse_offset("kernel.entry", off, dim)?, rate));
                }
                make_kernel(dim, table).map_err(|e| invalid("kernel.entry", e))?
            }
            (None, true) => return Err(ConfigError::Missing { key: "kernel.preset".into() }),
        };
        if kernel.dim() != dim {
            return Err(invalid("kernel", format!("kernel is {}-dimensional, geometry.d = {dim}", kernel.dim())));
        }

        let lambda = rational::parse(raw.require("lambda")?).ok_or_else(|| invalid("lambda", "not a number"))?;
        if lambda <= rational::int(0) {
            return Err(invalid("lambda", "must be positive"));
        }
        let density = |key: &str| -> Result<DensitySpec, ConfigError> {
            let spec: DensitySpec = raw.get(key).unwrap_or("0.5").parse().map_err(|e| invalid(key, e))?;
            for n in 2..=k {
                for m in 2..=k {
                    spec.eval(ColonySize::new(n, m)).map_err(|e| invalid(key, e))?;
                }
            }
            Ok(spec)
        };
        let f_a = density("fA")?;
        let f_d = density("fD")?;

        let t_grid = match (raw.get("horizon.t_grid"), raw.get("horizon.t")) {
            (Some(g), _) => parse_f64_list("horizon.t_grid", g)?,
            (None, Some(t)) => parse_f64_list("horizon.t", t)?,
            (None, None) => Vec::new(),
        };
        let steps = raw.get("horizon.steps").map(|v| parse_num("horizon.steps", v)).transpose()?.unwrap_or(0);
        let replicas = raw.get("replicas").map(|v| parse_num("replicas", v)).transpose()?.unwrap_or(1);
        let seed = match seed_override {
            Some(s) => s,
            None => parse_num("seed", raw.require("seed")?)?,
        };
        let workers: usize = raw.get("workers").map(|v| parse_num("workers", v)).transpose()?.unwrap_or(1);
        if workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        let env_count = raw.get("env.count").map(|v| parse_num("env.count", v)).transpose()?.unwrap_or(1);

        let initial = match (raw.get("initial.X"), raw.get("initial.Y")) {
            (Some(x), Some(y)) => {
                if raw.get("initial.law").is_some_and(|l| l != "explicit") {
                    return Err(invalid("initial.law", "initial.X/initial.Y require initial.law = explicit"));
                }
                Initial::Explicit(ForwardState::new(parse_counts("initial.X", x)?, parse_counts("initial.Y", y)?))
            }
            (None, None) => match raw.get("initial.law").unwrap_or("product-binomial") {
                "product-binomial" => Initial::Law(InitialLaw::ProductBinomial),
                "deterministic-rounding" => Initial::Law(InitialLaw::DeterministicRounding),
                other => return Err(invalid("initial.law", format!("unknown law {other:?}"))),
            },
            _ => return Err(invalid("initial", "give both initial.X and initial.Y")),
        };
        if let Initial::Explicit(st) = &initial {
            let sizes = explicit_sizes(&geometry, &field)?;
            if let Some(sizes) = sizes {
                st.validate(&sizes).map_err(|e| invalid("initial.X", e))?;
            }
        }

        let dual_start = raw
            .get("dual.start")
            .map(|v| {
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [site, act] = parts.as_slice() else {
                    return Err(invalid("dual.start", "expected \"site activity\""));
                };
                let site = parse_offset("dual.start", site, dim)?;
                let active = match *act {
                    "1" => true,
                    "0" => false,
                    other => return Err(invalid("dual.start", format!("activity {other:?} is not 0 or 1"))),
                };
                Ok(DualParticle::new(site, active))
            })
            .transpose()?;

        Ok(Self {
            command: raw.get("command").map(String::from),
            geometry,
            field,
            kernel,
            lambda,
            f_a,
            f_d,
            t_grid,
            steps,
            replicas,
            seed,
            workers,
            output: raw.get("output").map(PathBuf::from),
            initial,
            dual_start,
            env_count,
        })
    }
}

/// Sizes every torus environment shares when the marginal is a point mass.
fn explicit_sizes(geometry: &Geometry, field: &FieldSpec) -> Result<Option<Vec<ColonySize>>, ConfigError> {
    match (geometry.num_sites(), field.entries()) {
        (Some(n), [(size, _)]) => Ok(Some(vec![*size; n])),
        (Some(_), _) => Ok(None),
        (None, _) => Err(invalid("initial.X", "explicit initial states need a torus")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "geometry.d = 1\ngeometry.L = 4\nfield.K = 3\nfield.marginal = 2 2 1/2\nfield.marginal = \"3 2 0.5\"\nkernel.preset = lazy-srw-1d\nlambda = 1\nseed = 5\n";

    #[test]
    fn parses_base() {
        let c = ExperimentConfig::from_text(BASE, None).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.field.entries().len(), 2);
        assert_eq!(c.workers, 1);
        assert_eq!(ExperimentConfig::from_text(BASE, Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn reports_key_paths() {
        let err = ExperimentConfig::from_text(&BASE.replace("seed = 5\n", ""), None).unwrap_err();
        assert_eq!(err, ConfigError::Missing { key: "seed".into() });
        let err = ExperimentConfig::from_text(&format!("{BASE}fA = N0\n"), None).unwrap_err();
        assert!(err.to_string().starts_with("fA:"), "{err}");
        let err = ExperimentConfig::from_text(&format!("{BASE}bogus = 1\n"), None).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 9, .. }));
        let err = ExperimentConfig::from_text(&format!("{BASE}lambda = 2\n"), None).unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { .. }));
        let err = ExperimentConfig::from_text(&BASE.replace("1/2", "0.4"), None).unwrap_err();
        assert!(err.to_string().starts_with("field.marginal:"), "{err}");
    }

    #[test]
    fn kernel_entries() {
        let text = BASE.replace("kernel.preset = lazy-srw-1d\n", "kernel.entry = 0 1/2\nkernel.entry = 1 1/2\nkernel.entry = -1 1/2\n");
        let c = ExperimentConfig::from_text(&text, None).unwrap();
        assert_eq!(c.kernel, MigrationKernel::preset("lazy-srw-1d").unwrap());
        let bad = BASE.replace("kernel.preset = lazy-srw-1d\n", "kernel.entry = 0,1 1/2\n");
        assert!(ExperimentConfig::from_text(&bad, None).is_err());
    }
}
