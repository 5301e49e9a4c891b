//! The reference potentials used throughout the tests and the CLI.

use serde::{Deserialize, Serialize};

use crate::potential::{BoxGeometry, LocalFunction, PotentialSpec};
use crate::trig::TrigPoly;

/// `coef · cos(x_0)` at every site.
pub fn cosine_single_site(dimension: usize, coef: f64) -> PotentialSpec {
    let term = LocalFunction::new(vec![vec![0; dimension]], TrigPoly::cosine(&[1], coef))
        .expect("single-site term");
    PotentialSpec::new(dimension, 1, vec![term]).expect("single-site spec")
}

/// `γ · cos(x_0 − x_e)` for every positive unit vector `e`.
pub fn nearest_neighbor(dimension: usize, gamma: f64) -> PotentialSpec {
    let terms = (0..dimension)
        .map(|axis| {
            let mut e = vec![0; dimension];
            e[axis] = 1;
            LocalFunction::new(
                vec![vec![0; dimension], e],
                TrigPoly::cosine(&[1, -1], gamma),
            )
            .expect("pair term")
        })
        .collect();
    PotentialSpec::new(dimension, 1, terms).expect("pair spec")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Free,
    #[serde(rename = "cos-1d")]
    Cos1d,
    #[serde(rename = "cos-2d")]
    Cos2d,
    NearestNeighbor,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Free,
        Preset::Cos1d,
        Preset::Cos2d,
        Preset::NearestNeighbor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Free => "free",
            Preset::Cos1d => "cos-1d",
            Preset::Cos2d => "cos-2d",
            Preset::NearestNeighbor => "nearest-neighbor",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn spec(self) -> PotentialSpec {
        match self {
            Preset::Free => PotentialSpec::free(1),
            Preset::Cos1d => cosine_single_site(1, 1.0),
            Preset::Cos2d => cosine_single_site(2, 1.0),
            Preset::NearestNeighbor => nearest_neighbor(1, 0.2),
        }
    }

    /// Default box for the preset.
    pub fn geometry(self) -> BoxGeometry {
        match self {
            Preset::Free | Preset::Cos1d => BoxGeometry::new(1, 3),
            Preset::Cos2d => BoxGeometry::new(2, 1),
            Preset::NearestNeighbor => BoxGeometry::new(1, 2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()), Some(p));
            assert_eq!(p.spec().dimension(), p.geometry().dimension);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert_eq!(Preset::parse("nope"), None);
    }
}
