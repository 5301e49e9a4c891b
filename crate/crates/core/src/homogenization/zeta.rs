use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MartingalePart, PathEnsemble};
use crate::corrector::CorrectorField;
use crate::effective::{local_block, SmoothedFactor};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::stats::{self, Estimate};
use crate::torus::{draw_noise, wrap_angle};

/// Condition-number ceiling for recovering drivers from the martingale.
pub const COND_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    /// Drivers recovered from the martingale increments of the ensemble.
    SharedNoise,
    /// Fresh drivers; only distributional comparisons are meaningful.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaEnsemble {
    pub paths: PathEnsemble,
    pub n: usize,
    pub sites: Vec<usize>,
    pub mode: CouplingMode,
    /// Why shared-noise coupling was abandoned, if it was.
    pub fallback: Option<String>,
}

/// `σ^{-1} dM` through the eigendecomposition of the local block.
fn recover_drivers(block: &DMatrix<f64>, dm: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(block.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
    if cond > COND_LIMIT || max <= 0.0 {
        return Err(Error::IllConditioned { condition: cond });
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * dm)
}

/// The approximation process on the block of the smoothed factor:
/// `ζ_k = ξ_k(0) + Σ_l ∫ σ̃_{k,l}(ξ_s/ε) dB_l` for block sites, frozen at
/// `ξ_k(0)` elsewhere.
pub fn simulate_zeta(
    ens: &PathEnsemble,
    mp: &MartingalePart,
    field: &dyn CorrectorField,
    factor: &SmoothedFactor,
    mode: CouplingMode,
    stream: Stream,
) -> Result<ZetaEnsemble> {
    ens.require_full()?;
    if !(ens.eps > 0.0) {
        return Err(Error::Domain("ensemble has no ε scale".into()));
    }
    let n = ens.n_sites;
    let sites = &factor.sites;
    let m = sites.len();
    let steps = ens.times.len() - 1;
    let stream = stream.child("zeta");
    let data: Vec<Vec<f64>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut rng = stream.index(p as u64).rng();
            let mut cur = ens.frame(p, 0).to_vec();
            let mut out = Vec::with_capacity((steps + 1) * n);
            out.extend_from_slice(&cur);
            let mut y = vec![0.0; n];
            let mut z = vec![0.0; m];
            for t in 0..steps {
                let dt = ens.times[t + 1] - ens.times[t];
                y.iter_mut()
                    .zip(ens.frame(p, t))
                    .for_each(|(a, v)| *a = wrap_angle(v / ens.eps));
                let db = match mode {
                    CouplingMode::SharedNoise => {
                        let dm = DVector::from_iterator(
                            m,
                            sites.iter().map(|&k| mp.value(p, t + 1, k) - mp.value(p, t, k)),
                        );
                        recover_drivers(&local_block(field, sites, &y)?, &dm)?
                    }
                    CouplingMode::Independent => {
                        draw_noise(&mut rng, &mut z);
                        DVector::from_iterator(m, z.iter().map(|v| v * dt.sqrt()))
                    }
                };
                let inc = factor.eval(&y) * db;
                for (r, &k) in sites.iter().enumerate() {
                    cur[k] += inc[r];
                }
                out.extend_from_slice(&cur);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ZetaEnsemble {
        paths: PathEnsemble {
            data,
            ..ens.clone()
        },
        n: factor.n,
        sites: sites.clone(),
        mode,
        fallback: None,
    })
}

/// Shared-noise coupling, falling back to independent drivers when the
/// local block is too ill-conditioned to invert.
pub fn simulate_zeta_with_fallback(
    ens: &PathEnsemble,
    mp: &MartingalePart,
    field: &dyn CorrectorField,
    factor: &SmoothedFactor,
    stream: Stream,
) -> Result<ZetaEnsemble> {
    match simulate_zeta(ens, mp, field, factor, CouplingMode::SharedNoise, stream) {
        Err(Error::IllConditioned { condition }) => {
            let mut z = simulate_zeta(ens, mp, field, factor, CouplingMode::Independent, stream)?;
            z.fallback = Some(format!("condition number {condition:e} above {COND_LIMIT:e}"));
            Ok(z)
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourthMoment {
    pub times: Vec<f64>,
    pub moments: Vec<Estimate>,
    /// Log-log slope of the moment against `t`.
    pub slope: f64,
    pub slope_se: f64,
    /// Nonnegative `A`, `B` in `A t² + B t^{3/2}`.
    pub a: f64,
    pub b: f64,
    /// `C′` implied by `A = 2(5/2 + C′/N)²`, clamped at zero.
    pub c_prime: f64,
}

/// `E|ζ_k(t) − ζ_k(0)|⁴` averaged over block sites, with its log-log fit.
pub fn fourth_moment_curve(z: &ZetaEnsemble, times: &[f64]) -> Result<FourthMoment> {
    if times.len() < 2 || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config("need at least two positive times".into()));
    }
    let ens = &z.paths;
    let moments: Vec<Estimate> = times
        .iter()
        .map(|&t| {
            let ti = ens.time_index(t);
            let per_path: Vec<f64> = (0..ens.paths())
                .map(|p| {
                    z.sites
                        .iter()
                        .map(|&k| (ens.value(p, ti, k) - ens.value(p, 0, k)).powi(4))
                        .sum::<f64>()
                        / z.sites.len() as f64
                })
                .collect();
            stats::mean_se(&per_path)
        })
        .collect();
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let lm: Vec<f64> = moments.iter().map(|m| m.value.max(f64::MIN_POSITIVE).ln()).collect();
    let fit = stats::linear_fit(&lt, &lm);
    let cols = vec![
        times.iter().map(|t| t * t).collect::<Vec<_>>(),
        times.iter().map(|t| t.powf(1.5)).collect::<Vec<_>>(),
    ];
    let (coef, _) = stats::nnls_small(&cols, &moments.iter().map(|m| m.value).collect::<Vec<_>>());
    let c_prime = (((coef[0] / 2.0).sqrt() - 2.5) * z.n as f64).max(0.0);
    Ok(FourthMoment {
        times: times.to_vec(),
        moments,
        slope: fit.slope,
        slope_se: fit.slope_se,
        a: coef[0],
        b: coef[1],
        c_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::ZeroField;
    use crate::effective::SmoothedFactor;
    use crate::homogenization::{martingale_decompose, path_metric, simulate_xeps, site_norms, EnsembleConfig, Starts};
    use crate::potential::{BoxGeometry, Lattice, PotentialSpec};

    #[test]
    fn free_shared_noise_reproduces_the_path() {
        let geom = BoxGeometry::new(1, 1);
        let lat = Lattice::new(&PotentialSpec::free(1), geom).unwrap();
        let cfg = EnsembleConfig::new(0.5, 0.02, 1.0, 20);
        let ens = simulate_xeps(&lat, &cfg, Starts::Fixed(&[0.0; 3]), Stream::root(3)).unwrap();
        let field = ZeroField { n_sites: 3 };
        let mp = martingale_decompose(&ens, &field).unwrap();
        let sigma = DMatrix::<f64>::identity(3, 3) * 2f64.sqrt();
        let factor = SmoothedFactor::constant(1, geom.block(1), &sigma);
        let z = simulate_zeta(&ens, &mp, &field, &factor, CouplingMode::SharedNoise, Stream::root(4)).unwrap();
        let norms = site_norms(&geom);
        for p in 0..ens.paths() {
            let rho = path_metric(&ens.data[p], &z.paths.data[p], &ens.times, &norms, 1).unwrap();
            assert!(rho < 1e-10, "{rho}");
        }
    }

    #[test]
    fn singular_block_is_rejected() {
        let block = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let dm = DVector::from_vec(vec![0.1, 0.1]);
        assert!(matches!(recover_drivers(&block, &dm), Err(Error::IllConditioned { .. })));
    }
}
