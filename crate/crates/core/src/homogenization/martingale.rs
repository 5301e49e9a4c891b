use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PathEnsemble;
use crate::corrector::CorrectorField;
use crate::error::{Error, Result};
use crate::stats::{self, Estimate};
use crate::torus::wrap_angle;

/// `M^{ε,k}_t` on the ensemble grid, same layout as the ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingalePart {
    pub source: String,
    pub n_sites: usize,
    pub times: Vec<f64>,
    pub data: Vec<Vec<f64>>,
}

impl MartingalePart {
    #[inline]
    pub fn value(&self, p: usize, t: usize, k: usize) -> f64 {
        self.data[p][t * self.n_sites + k]
    }

    pub fn paths(&self) -> usize {
        self.data.len()
    }
}

/// `ε χ(ξ/ε)` at every recorded frame of one path.
fn scaled_corrector(field: &dyn CorrectorField, eps: f64, path: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(path.len());
    let mut y = vec![0.0; n];
    for frame in path.chunks(n) {
        y.iter_mut().zip(frame).for_each(|(a, v)| *a = wrap_angle(v / eps));
        let (a, b) = field.value_halves(&y)?;
        out.extend(a.iter().zip(&b).map(|(x, z)| 0.5 * eps * (x + z)));
    }
    Ok(out)
}

fn check_eps(ens: &PathEnsemble) -> Result<()> {
    if !(ens.eps > 0.0) {
        return Err(Error::Domain("ensemble has no ε scale".into()));
    }
    Ok(())
}

/// `M^{ε,k}_t = (ξ_k(t) − ξ_k(0)) − ε(χ_k(ξ_t/ε) − χ_k(ξ_0/ε))`.
pub fn martingale_decompose(ens: &PathEnsemble, field: &dyn CorrectorField) -> Result<MartingalePart> {
    check_eps(ens)?;
    let n = ens.n_sites;
    let data = ens
        .data
        .par_iter()
        .map(|path| {
            let chi = scaled_corrector(field, ens.eps, path, n)?;
            Ok(path
                .iter()
                .zip(&chi)
                .enumerate()
                .map(|(i, (x, c))| (x - path[i % n]) - (c - chi[i % n]))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(MartingalePart {
        source: field.tag().into(),
        n_sites: n,
        times: ens.times.clone(),
        data,
    })
}

/// The corrected process `X̂ = ξ − εχ(ξ/ε) + εχ(ξ_0/ε)`.
pub fn corrected_process(ens: &PathEnsemble, field: &dyn CorrectorField) -> Result<PathEnsemble> {
    let m = martingale_decompose(ens, field)?;
    let n = ens.n_sites;
    let data = ens
        .data
        .iter()
        .zip(&m.data)
        .map(|(path, mart)| mart.iter().enumerate().map(|(i, v)| path[i % n] + v).collect())
        .collect();
    Ok(PathEnsemble { data, ..ens.clone() })
}

/// Mean increment of `M^k` over each of `bins` consecutive time bins.
pub fn martingale_nulls(mp: &MartingalePart, k: usize, bins: usize) -> Vec<Estimate> {
    let last = mp.times.len() - 1;
    let bins = bins.clamp(1, last.max(1));
    (0..bins)
        .map(|b| {
            let t0 = b * last / bins;
            let t1 = (b + 1) * last / bins;
            let inc: Vec<f64> = (0..mp.paths())
                .map(|p| mp.value(p, t1, k) - mp.value(p, t0, k))
                .collect();
            stats::mean_se(&inc)
        })
        .collect()
}

/// `Cov(M_{t₂} − M_{t₁}, M_{t₁} − M_{t₀})` for site `k`.
pub fn increment_orthogonality(mp: &MartingalePart, k: usize, t: [usize; 3]) -> Estimate {
    let prods: Vec<f64> = (0..mp.paths())
        .map(|p| {
            (mp.value(p, t[2], k) - mp.value(p, t[1], k)) * (mp.value(p, t[1], k) - mp.value(p, t[0], k))
        })
        .collect();
    stats::mean_se(&prods)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvReport {
    pub k: usize,
    pub l: usize,
    /// `Σ ΔM^k ΔM^l` at the final time.
    pub realized: Estimate,
    /// `∫ a_{k,l}(ξ_s/ε) ds` by the left-point rule on the same grid.
    pub predicted: Estimate,
    /// Per-path difference of the two.
    pub gap: Estimate,
    pub relative_gap: f64,
}

impl QvReport {
    pub fn consistent(&self, z: f64) -> bool {
        self.gap.z_score(0.0).abs() <= z
    }
}

/// Realized quadratic covariation against the integrated local
/// diffusivity `a_{k,l} = Σ_j χ'_{k,j} χ'_{l,j}`.
pub fn qv_check(
    mp: &MartingalePart,
    ens: &PathEnsemble,
    field: &dyn CorrectorField,
    k: usize,
    l: usize,
) -> Result<QvReport> {
    check_eps(ens)?;
    ens.require_full()?;
    let n = ens.n_sites;
    if k >= n || l >= n {
        return Err(Error::Domain("site outside the box".into()));
    }
    let steps = ens.times.len() - 1;
    let triples: Vec<(f64, f64)> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut realized = 0.0;
            let mut predicted = 0.0;
            let mut y = vec![0.0; n];
            for t in 0..steps {
                realized += (mp.value(p, t + 1, k) - mp.value(p, t, k)) * (mp.value(p, t + 1, l) - mp.value(p, t, l));
                y.iter_mut()
                    .zip(ens.frame(p, t))
                    .for_each(|(a, v)| *a = wrap_angle(v / ens.eps));
                let (ga, gb) = field.gradient_halves(&y)?;
                let cp = |s: usize, j: usize| -> f64 {
                    let g = 0.5 * (ga[s][j] + gb[s][j]);
                    std::f64::consts::SQRT_2 * (f64::from(u8::from(s == j)) - g)
                };
                let a: f64 = (0..n).map(|j| cp(k, j) * cp(l, j)).sum();
                predicted += a * (ens.times[t + 1] - ens.times[t]);
            }
            Ok((realized, predicted))
        })
        .collect::<Result<_>>()?;
    let realized = stats::mean_se(&triples.iter().map(|t| t.0).collect::<Vec<_>>());
    let predicted = stats::mean_se(&triples.iter().map(|t| t.1).collect::<Vec<_>>());
    let gap = stats::mean_se(&triples.iter().map(|t| t.0 - t.1).collect::<Vec<_>>());
    Ok(QvReport {
        k,
        l,
        realized,
        predicted,
        gap,
        relative_gap: if predicted.value.abs() > 0.0 { gap.value / predicted.value } else { gap.value },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::ZeroField;
    use crate::homogenization::{simulate_xeps, EnsembleConfig, Starts};
    use crate::potential::{BoxGeometry, Lattice, PotentialSpec};
    use crate::rng::Stream;

    #[test]
    fn free_martingale_is_the_increment() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 1)).unwrap();
        let cfg = EnsembleConfig::new(1.0, 0.01, 1.0, 200);
        let ens = simulate_xeps(&lat, &cfg, Starts::Fixed(&[0.1, 0.2, 0.3]), Stream::root(2)).unwrap();
        let field = ZeroField { n_sites: 3 };
        let mp = martingale_decompose(&ens, &field).unwrap();
        assert_eq!(mp.value(3, 50, 1), ens.value(3, 50, 1) - 0.2);
        let hat = corrected_process(&ens, &field).unwrap();
        for (a, b) in hat.data.iter().flatten().zip(ens.data.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let qv = qv_check(&mp, &ens, &field, 1, 1).unwrap();
        assert!(qv.consistent(3.0), "{qv:?}");
        assert!((qv.predicted.value - 2.0).abs() < 1e-9);
        let cross = qv_check(&mp, &ens, &field, 0, 1).unwrap();
        assert!(cross.realized.within(0.0, 3.0));
        for e in martingale_nulls(&mp, 0, 4) {
            assert!(e.within(0.0, 4.0));
        }
    }
}
