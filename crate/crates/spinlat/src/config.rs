//! Model configuration files.
//!
//! A spec is assembled from a small TOML document; the full grammar lives in
//! `docs/formats.md`. Example:
//!
//! ```toml
//! [lattice]
//! n = 64
//! r = 1
//!
//! [couplings]
//! uniform = 0.3         # or: bands = [[...], ...], one list per offset
//!
//! [field]
//! alternating = 0.2     # or: constant = 0.1, or: values = [...]
//!
//! [potential]
//! kind = "cosine"       # "zero" | "cosine"
//! a = 1.0
//! b = 2.0
//!
//! [ensemble]
//! m = 0.1               # or: sigma = 0.4
//! ```

use serde::Deserialize;
use thiserror::Error;

use crate::model::{InteractionMatrix, ModelError, ModelSpec, SingleSitePotential};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub lattice: LatticeSection,
    pub couplings: CouplingsSection,
    pub field: FieldSection,
    pub potential: PotentialSection,
    pub ensemble: EnsembleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub n: usize,
    pub r: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingsSection {
    pub uniform: Option<f64>,
    /// bands[d-1] holds the couplings at offset d, length n - d.
    pub bands: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub constant: Option<f64>,
    pub values: Option<Vec<f64>>,
    /// s_i = +v on even sites, -v on odd sites.
    pub alternating: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub kind: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub sigma: Option<f64>,
    pub m: Option<f64>,
}

/// Which ensemble a run targets: a gce at fixed sigma or a ce at fixed m.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum EnsembleParam {
    Sigma(f64),
    MeanSpin(f64),
}

/// A parsed, validated model plus the requested ensemble coordinate.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub spec: ModelSpec,
    pub ensemble: EnsembleParam,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(1);
        ConfigError::Parse {
            line,
            message: e.message().to_string(),
        }
    })
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        self.resolve_with_n(self.lattice.n)
    }

    /// Resolve with an overridden lattice size; experiments use this to
    /// sweep N while keeping the rest of the model fixed.
    pub fn resolve_with_n(&self, n: usize) -> Result<ResolvedConfig, ConfigError> {
        let r = self.lattice.r;
        let interaction = match (&self.couplings.uniform, &self.couplings.bands) {
            (Some(c), None) => InteractionMatrix::uniform(n, r, *c),
            (None, Some(bands)) => {
                if bands.len() != r {
                    return Err(ConfigError::Invalid(format!(
                        "[couplings] bands: expected {r} offset lists, got {}",
                        bands.len()
                    )));
                }
                InteractionMatrix::from_bands(n, bands.clone())?
            }
            _ => {
                return Err(ConfigError::Invalid(
                    "[couplings] needs exactly one of `uniform` or `bands`".into(),
                ))
            }
        };
        let field = match (
            &self.field.constant,
            &self.field.values,
            &self.field.alternating,
        ) {
            (Some(v), None, None) => vec![*v; n],
            (None, Some(vals), None) => vals.clone(),
            (None, None, Some(v)) => (0..n)
                .map(|i| if i % 2 == 0 { *v } else { -*v })
                .collect(),
            _ => {
                return Err(ConfigError::Invalid(
                    "[field] needs exactly one of `constant`, `values`, or `alternating`".into(),
                ))
            }
        };
        let potential = match self.potential.kind.as_str() {
            "zero" => {
                if self.potential.a.is_some() || self.potential.b.is_some() {
                    return Err(ConfigError::Invalid(
                        "[potential] kind = \"zero\" takes no parameters".into(),
                    ));
                }
                SingleSitePotential::Zero
            }
            "cosine" => SingleSitePotential::Cosine {
                a: self.potential.a.ok_or_else(|| {
                    ConfigError::Invalid("[potential] cosine needs `a`".into())
                })?,
                b: self.potential.b.ok_or_else(|| {
                    ConfigError::Invalid("[potential] cosine needs `b`".into())
                })?,
            },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "[potential] unknown kind \"{other}\" (expected \"zero\" or \"cosine\")"
                )))
            }
        };
        let (sigma, ensemble) = match (&self.ensemble.sigma, &self.ensemble.m) {
            (Some(s), None) => (*s, EnsembleParam::Sigma(*s)),
            (None, Some(m)) => (0.0, EnsembleParam::MeanSpin(*m)),
            _ => {
                return Err(ConfigError::Invalid(
                    "[ensemble] needs exactly one of `sigma` or `m`".into(),
                ))
            }
        };
        let spec = ModelSpec::new(interaction, potential, field, sigma)?;
        Ok(ResolvedConfig { spec, ensemble })
    }
}

/// Parse and resolve in one step.
pub fn load_config(text: &str) -> Result<ResolvedConfig, ConfigError> {
    parse_config(text)?.resolve()
}

/// The default experiment model: visibly non-Gaussian, safely diagonally
/// dominant, with an alternating field so the two ensembles' site means
/// genuinely differ.
pub const DEFAULT_CONFIG: &str = "\
[lattice]
n = 64
r = 1

[couplings]
uniform = 0.3

[field]
alternating = 0.2

[potential]
kind = \"cosine\"
a = 1.0
b = 2.0

[ensemble]
m = 0.1
";
