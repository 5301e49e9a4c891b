//! Run configuration. Every section is optional in the input file; the
//! resolved form written next to the outputs has all defaults filled in.

use std::path::{Path, PathBuf};

use homlab::corrector::FkConfig;
use homlab::homogenization::ConvergenceConfig;
use homlab::potential::{parse_potential, PotentialFile};
use homlab::torus::{GibbsConfig, MixingConfig};
use homlab::{BoxGeometry, PotentialSpec, Preset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::Failure;

pub const DEFAULT_OUT: &str = "homlab-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Potential TOML file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// The same description written inline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inline: Option<PotentialFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub dimension: usize,
    pub half_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
// Unknown keys are rejected by the flattened inner table.
#[serde(default)]
pub struct MixingSection {
    #[serde(flatten)]
    pub run: MixingConfig,
    /// Gibbs states used as start points, evenly strided.
    pub starts: usize,
}

impl Default for MixingSection {
    fn default() -> Self {
        Self {
            run: MixingConfig {
                pairs_per_start: 200,
                ..MixingConfig::default()
            },
            starts: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectorSection {
    #[serde(flatten)]
    pub fk: FkConfig,
    /// Gibbs states at which the corrector is tabulated.
    pub points: usize,
    pub radius: usize,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        Self {
            fk: FkConfig {
                horizon: 4.0,
                dt: 0.02,
                pairs: 400,
                h: 1e-2,
            },
            points: 16,
            radius: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    /// Derivative formula when the corrector is exact, MSD slope otherwise.
    Auto,
    Derivative,
    Martingale,
    Msd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveSection {
    pub radius: usize,
    pub estimator: EstimatorChoice,
    pub dt: f64,
    pub paths: usize,
    /// Horizon of the martingale estimator.
    pub time: f64,
    pub msd_times: Vec<f64>,
}

impl Default for EffectiveSection {
    fn default() -> Self {
        Self {
            radius: 1,
            estimator: EstimatorChoice::Auto,
            dt: 0.005,
            paths: 4000,
            time: 1.0,
            msd_times: vec![10.0, 15.0, 20.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    Equilibrium,
    Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomogenizeSection {
    #[serde(flatten)]
    pub test: ConvergenceConfig,
    pub start: StartMode,
}

impl Default for HomogenizeSection {
    fn default() -> Self {
        Self {
            test: ConvergenceConfig::default(),
            start: StartMode::Equilibrium,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomEnvSection {
    pub environments: usize,
}

impl Default for RandomEnvSection {
    fn default() -> Self {
        Self { environments: 16 }
    }
}

/// The file as written by the user.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    #[serde(default)]
    potential: PotentialSource,
    geometry: Option<Geometry>,
    #[serde(default)]
    gibbs: GibbsConfig,
    #[serde(default)]
    mixing: MixingSection,
    #[serde(default)]
    corrector: CorrectorSection,
    #[serde(default)]
    effective: EffectiveSection,
    #[serde(default)]
    homogenize: HomogenizeSection,
    #[serde(default)]
    random_env: RandomEnvSection,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub potential: PotentialSource,
    pub geometry: Geometry,
    pub gibbs: GibbsConfig,
    pub mixing: MixingSection,
    pub corrector: CorrectorSection,
    pub effective: EffectiveSection,
    pub homogenize: HomogenizeSection,
    pub random_env: RandomEnvSection,
    /// Loaded once so later stages need not revisit the source.
    #[serde(skip)]
    pub spec: PotentialSpec,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn from_toml(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, Failure> {
        let input: InputConfig =
            toml::from_str(text).map_err(|e| Failure::usage(format!("malformed config: {e}")))?;
        let spec = load_spec(&input.potential, base)?;
        let geometry = match (input.geometry, input.potential.preset) {
            (Some(g), _) => g,
            (None, Some(p)) => {
                let g = p.geometry();
                Geometry {
                    dimension: g.dimension,
                    half_width: g.half_width,
                }
            }
            (None, None) => Geometry {
                dimension: spec.dimension(),
                half_width: 2 * spec.range() as usize,
            },
        };
        if geometry.dimension != spec.dimension() {
            return Err(Failure::usage(format!(
                "geometry has dimension {} but the potential has {}",
                geometry.dimension,
                spec.dimension()
            )));
        }
        if geometry.half_width == 0 {
            return Err(Failure::usage("geometry.half_width must be positive"));
        }
        Ok(Self {
            seed: overrides.seed.or(input.seed).unwrap_or(0),
            out: overrides
                .out
                .clone()
                .or(input.out)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            potential: input.potential,
            geometry,
            gibbs: input.gibbs,
            mixing: input.mixing,
            corrector: input.corrector,
            effective: input.effective,
            homogenize: input.homogenize,
            random_env: input.random_env,
            spec,
        })
    }

    pub fn box_geometry(&self) -> BoxGeometry {
        BoxGeometry::new(self.geometry.dimension, self.geometry.half_width)
    }

    /// Resolved TOML. The output directory is left out so that moving a
    /// run does not change its hash.
    pub fn resolved_toml(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        if let Some(t) = value.as_table_mut() {
            t.remove("out");
        }
        toml::to_string_pretty(&value).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.resolved_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn load_spec(src: &PotentialSource, base: &Path) -> Result<PotentialSpec, Failure> {
    let given = [src.preset.is_some(), src.file.is_some(), src.inline.is_some()];
    if given.iter().filter(|g| **g).count() != 1 {
        return Err(Failure::usage(
            "potential needs exactly one of `preset`, `file` or `inline`",
        ));
    }
    if let Some(p) = src.preset {
        return Ok(p.spec());
    }
    if let Some(f) = &src.inline {
        return f
            .clone()
            .into_spec()
            .map_err(|e| Failure::usage(format!("potential: {e}")));
    }
    let file = base.join(src.file.as_ref().unwrap());
    let text = std::fs::read_to_string(&file)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", file.display())))?;
    parse_potential(&text).map_err(|e| Failure::usage(format!("{}: {e}", file.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_materialized() {
        let c = RunConfig::from_toml("[potential]\npreset = \"cos-1d\"\n", Path::new("."), &Overrides::default())
            .unwrap();
        let echo = c.resolved_toml();
        for key in ["seed", "[gibbs]", "[mixing]", "[corrector]", "[effective]", "[homogenize]", "half_width"] {
            assert!(echo.contains(key), "{key} missing from\n{echo}");
        }
        assert_eq!(c.geometry.half_width, 3);
    }

    #[test]
    fn seed_precedence() {
        let text = "seed = 5\n[potential]\npreset = \"free\"\n";
        let c = RunConfig::from_toml(text, Path::new("."), &Overrides::default()).unwrap();
        assert_eq!(c.seed, 5);
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let c2 = RunConfig::from_toml(text, Path::new("."), &o).unwrap();
        assert_eq!(c2.seed, 9);
        assert_ne!(c.sha256(), c2.sha256());
    }

    #[test]
    fn rejects_unknown_keys_and_double_sources() {
        let o = Overrides::default();
        assert!(RunConfig::from_toml("[potential]\npreset = \"free\"\n[gibbs]\nchainz = 3\n", Path::new("."), &o).is_err());
        let both = "[potential]\npreset = \"free\"\nfile = \"p.toml\"\n";
        assert!(RunConfig::from_toml(both, Path::new("."), &o).is_err());
    }
}
