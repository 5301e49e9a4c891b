//! Rescaled lattice paths `X^ε`, their Gaussian limit and the path
//! metric used to compare them.

mod convergence;
mod martingale;
mod zeta;

pub use convergence::{
    fit_distance_shape, moment_functional, random_env_run, rho_distance, tightness_diagnostic,
    weak_convergence_test, ConvergenceConfig, ConvergenceReport, EpsRecord, RandomEnvReport,
    ShapeFit, TightnessConfig, TightnessReport,
};
pub use martingale::{
    corrected_process, increment_orthogonality, martingale_decompose, martingale_nulls, qv_check,
    MartingalePart, QvReport,
};
pub use zeta::{
    fourth_moment_curve, simulate_zeta, simulate_zeta_with_fallback, CouplingMode, FourthMoment,
    ZetaEnsemble,
};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective::{factorize_block, EffectiveMatrix, FactorBlock};
use crate::error::{Error, Result};
use crate::potential::{BoxGeometry, Lattice};
use crate::rng::Stream;
use crate::torus::{draw_noise, GibbsSampleSet, Integrator};

/// Largest unit-scale step accepted for the fast variable.
pub const DT_UNIT_MAX: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// `X^ε(t) = ε X¹(t/ε²)` from a unit-scale run.
    Rescaled,
    /// Euler–Maruyama directly on the `ε` scale.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Initial {
    /// A fixed `ε`-scale configuration.
    Fixed(Vec<f64>),
    /// `ε Θ(y)` with `y` cycled through Gibbs draws.
    Equilibrium { seed: u64, draws: usize },
}

#[derive(Clone, Copy, Debug)]
pub enum Starts<'a> {
    Fixed(&'a [f64]),
    Equilibrium(&'a GibbsSampleSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Record {
    /// Every `stride`-th step of the simulation grid.
    Every(usize),
    /// The listed `ε`-scale times (rounded to the grid).
    At(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub eps: f64,
    /// Step of the unit-scale process; the `ε`-scale step is `ε² dt`.
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub record: Record,
    pub route: Route,
}

impl EnsembleConfig {
    pub fn new(eps: f64, dt: f64, horizon: f64, paths: usize) -> Self {
        Self {
            eps,
            dt,
            horizon,
            paths,
            record: Record::Every(1),
            route: Route::Rescaled,
        }
    }

    pub fn eps_dt(&self) -> f64 {
        self.eps * self.eps * self.dt
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.eps_dt()).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Domain(format!("ε must lie in (0, 1], got {}", self.eps)));
        }
        if !(self.horizon > 0.0) || self.paths == 0 {
            return Err(Error::Config("horizon and path count must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt <= DT_UNIT_MAX) {
            return Err(Error::Resolution {
                dt: self.eps_dt(),
                eps: self.eps,
                max: self.eps * self.eps * DT_UNIT_MAX,
            });
        }
        Ok(())
    }

    fn marks(&self) -> Result<Vec<usize>> {
        let steps = self.steps();
        let marks: Vec<usize> = match &self.record {
            Record::Every(stride) => {
                let s = (*stride).max(1);
                (0..=steps).filter(|i| i % s == 0 || *i == steps).collect()
            }
            Record::At(times) => {
                let mut m: Vec<usize> = std::iter::once(0)
                    .chain(times.iter().map(|t| (t / self.eps_dt()).round() as usize))
                    .collect();
                m.dedup();
                m
            }
        };
        if marks.windows(2).any(|w| w[1] <= w[0]) || *marks.last().unwrap() > steps {
            return Err(Error::Config("record times must be increasing and within the horizon".into()));
        }
        Ok(marks)
    }
}

/// Recorded `ε`-scale trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub eps: f64,
    /// `ε`-scale step between simulation points.
    pub dt: f64,
    pub times: Vec<f64>,
    pub n_sites: usize,
    /// Per path, time-major then site-major.
    pub data: Vec<Vec<f64>>,
    pub seed: u64,
    pub initial: Initial,
    pub route: Route,
    /// Whether the record holds every simulation step.
    pub full_resolution: bool,
}

impl PathEnsemble {
    pub fn paths(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn value(&self, p: usize, t: usize, k: usize) -> f64 {
        self.data[p][t * self.n_sites + k]
    }

    pub fn frame(&self, p: usize, t: usize) -> &[f64] {
        &self.data[p][t * self.n_sites..(t + 1) * self.n_sites]
    }

    /// Index of the recorded time closest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// `X_k(t) − X_k(0)` across paths.
    pub fn increments(&self, t_index: usize, k: usize) -> Vec<f64> {
        (0..self.paths())
            .map(|p| self.value(p, t_index, k) - self.value(p, 0, k))
            .collect()
    }

    fn require_full(&self) -> Result<()> {
        if !self.full_resolution {
            return Err(Error::Config(
                "this operation needs every simulation step recorded".into(),
            ));
        }
        Ok(())
    }
}

/// Simulates `dX_k = √2 dB_k + ε⁻¹ b_k(X/ε) dt`.
pub fn simulate_xeps(
    lattice: &Lattice,
    cfg: &EnsembleConfig,
    starts: Starts<'_>,
    stream: Stream,
) -> Result<PathEnsemble> {
    cfg.validate()?;
    let n = lattice.n_sites();
    let marks = cfg.marks()?;
    let steps = *marks.last().unwrap();
    let eps = cfg.eps;
    let (initial, start_of): (Initial, Box<dyn Fn(usize) -> Vec<f64> + Sync>) = match starts {
        Starts::Fixed(x) => {
            if x.len() != n {
                return Err(Error::Domain("start size does not match the box".into()));
            }
            let x = x.to_vec();
            (Initial::Fixed(x.clone()), Box::new(move |_| x.clone()))
        }
        Starts::Equilibrium(s) => {
            if s.is_empty() {
                return Err(Error::Config("no Gibbs draws for the start law".into()));
            }
            (
                Initial::Equilibrium {
                    seed: s.seed,
                    draws: s.len(),
                },
                Box::new(move |p| s.states[p % s.len()].angles().iter().map(|a| eps * a).collect()),
            )
        }
    };
    let route_stream = stream.child(match cfg.route {
        Route::Rescaled => "rescaled",
        Route::Direct => "direct",
    });
    let data: Vec<Vec<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = route_stream.index(p as u64).rng();
            let mut noise = vec![0.0; n];
            let mut out = Vec::with_capacity(marks.len() * n);
            let mut m = 0;
            let x0 = start_of(p);
            match cfg.route {
                Route::Rescaled => {
                    let mut integ = Integrator::new(lattice, cfg.dt)?;
                    let mut u: Vec<f64> = x0.iter().map(|v| v / eps).collect();
                    for step in 0..=steps {
                        if step > 0 {
                            draw_noise(&mut rng, &mut noise);
                            integ.step_with(&mut u, &noise);
                        }
                        if marks[m] == step {
                            out.extend(u.iter().map(|v| eps * v));
                            m += 1;
                        }
                    }
                }
                Route::Direct => {
                    let h = cfg.eps_dt();
                    let scale = (2.0 * h).sqrt();
                    let mut x = x0;
                    let mut drift = vec![0.0; n];
                    let mut scaled = vec![0.0; n];
                    for step in 0..=steps {
                        if step > 0 {
                            draw_noise(&mut rng, &mut noise);
                            scaled.iter_mut().zip(&x).for_each(|(s, v)| *s = v / eps);
                            lattice.drift_all(&scaled, &mut drift);
                            for ((xi, b), z) in x.iter_mut().zip(&drift).zip(&noise) {
                                *xi += b / eps * h + scale * z;
                            }
                        }
                        if marks[m] == step {
                            out.extend_from_slice(&x);
                            m += 1;
                        }
                    }
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite path value".into()));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let full = matches!(cfg.record, Record::Every(1));
    Ok(PathEnsemble {
        eps,
        dt: cfg.eps_dt(),
        times: marks.iter().map(|&m| m as f64 * cfg.eps_dt()).collect(),
        n_sites: n,
        data,
        seed: stream.key(),
        initial,
        route: cfg.route,
        full_resolution: full,
    })
}

/// Gaussian limit with covariance `t Ā` on a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSampler {
    pub radius: usize,
    pub sites: Vec<usize>,
    pub factor: FactorBlock,
    pub seed: u64,
}

impl LimitSampler {
    pub fn new(abar: &EffectiveMatrix, seed: u64) -> Result<Self> {
        Ok(Self {
            radius: abar.radius,
            sites: abar.sites.clone(),
            factor: factorize_block(&abar.symmetrized(), 1e-8)?,
            seed,
        })
    }
}

/// Paths of the limit process `𝕐` on the block, `𝕐_0 = 0`.
pub fn gaussian_limit_sample(sampler: &LimitSampler, times: &[f64], paths: usize) -> Result<PathEnsemble> {
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::Config("limit times must be nonnegative and increasing".into()));
    }
    let m = sampler.sites.len();
    let sigma = sampler.factor.matrix();
    let grid: Vec<f64> = if times.first() == Some(&0.0) {
        times.to_vec()
    } else {
        std::iter::once(0.0).chain(times.iter().copied()).collect()
    };
    let stream = Stream::root(sampler.seed).child("limit");
    let data: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream.index(p as u64).rng();
            let mut cur = vec![0.0; m];
            let mut out = Vec::with_capacity(grid.len() * m);
            out.extend_from_slice(&cur);
            let mut z = vec![0.0; m];
            for w in grid.windows(2) {
                draw_noise(&mut rng, &mut z);
                let s = (w[1] - w[0]).sqrt();
                for (r, c) in cur.iter_mut().enumerate() {
                    *c += s * (0..m).map(|q| sigma[(r, q)] * z[q]).sum::<f64>();
                }
                out.extend_from_slice(&cur);
            }
            out
        })
        .collect();
    Ok(PathEnsemble {
        eps: 0.0,
        dt: f64::NAN,
        times: grid,
        n_sites: m,
        data,
        seed: sampler.seed,
        initial: Initial::Fixed(vec![0.0; m]),
        route: Route::Rescaled,
        full_resolution: false,
    })
}

/// `ρ(x, x') = Σ_{n≤n_max} 2^{−n} min(1, (Σ_k 2^{−|k|} sup_{t≤n} |x_k − x'_k|²)^{1/2})`.
///
/// Paths are flat time-major slices on the common grid `times`. The
/// neglected remainder is at most `2^{−n_max}`; when the grid ends before
/// `n`, the sup runs over the recorded part.
pub fn path_metric(
    a: &[f64],
    b: &[f64],
    times: &[f64],
    norms: &[u32],
    n_max: u32,
) -> Result<f64> {
    let n = norms.len();
    if a.len() != b.len() || a.len() != times.len() * n {
        return Err(Error::Domain("paths must share grid and box".into()));
    }
    let mut sup = vec![0.0f64; n];
    let mut total = 0.0;
    let mut t = 0;
    for level in 1..=n_max {
        while t < times.len() && times[t] <= f64::from(level) + 1e-12 {
            for k in 0..n {
                let d = a[t * n + k] - b[t * n + k];
                sup[k] = sup[k].max(d * d);
            }
            t += 1;
        }
        let s: f64 = sup
            .iter()
            .zip(norms)
            .map(|(v, &kn)| v * 0.5f64.powi(kn as i32))
            .sum();
        total += 0.5f64.powi(level as i32) * s.sqrt().min(1.0);
    }
    Ok(total)
}

/// `|k|` for every site of the box.
pub fn site_norms(geom: &BoxGeometry) -> Vec<u32> {
    (0..geom.n_sites()).map(|i| geom.norm(i)).collect()
}

/// Empirical covariance of block increments at one recorded time.
pub fn increment_covariance(ens: &PathEnsemble, t_index: usize, sites: &[usize]) -> DMatrix<f64> {
    let m = sites.len();
    let incs: Vec<Vec<f64>> = sites.iter().map(|&k| ens.increments(t_index, k)).collect();
    let means: Vec<f64> = incs.iter().map(|v| crate::stats::mean(v)).collect();
    let n = ens.paths() as f64;
    DMatrix::from_fn(m, m, |r, c| {
        incs[r]
            .iter()
            .zip(&incs[c])
            .map(|(x, y)| (x - means[r]) * (y - means[c]))
            .sum::<f64>()
            / (n - 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::Estimator;
    use crate::potential::PotentialSpec;
    use crate::stats;

    #[test]
    fn metric_examples() {
        let times = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        let norms = [1, 0, 1];
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        assert_eq!(path_metric(&a, &a, &times, &norms, 3).unwrap(), 0.0);
        let mut b = a.clone();
        for t in 0..7 {
            b[t * 3 + 1] += 1.0;
        }
        let r = path_metric(&a, &b, &times, &norms, 3).unwrap();
        assert!((r - (1.0 - 0.125)).abs() < 1e-15);
        let mut far = a.clone();
        far.iter_mut().for_each(|v| *v += 100.0);
        assert!(path_metric(&a, &far, &times, &norms, 3).unwrap() <= 1.0);
    }

    #[test]
    fn free_paths_have_variance_two_t() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 1)).unwrap();
        let mut cfg = EnsembleConfig::new(0.5, 0.05, 1.0, 4000);
        cfg.record = Record::At(vec![1.0]);
        let ens = simulate_xeps(&lat, &cfg, Starts::Fixed(&[0.0; 3]), Stream::root(1)).unwrap();
        let inc = ens.increments(1, 1);
        let var = stats::mean_se(&inc.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!(var.within(2.0, 3.0), "{var:?}");
    }

    #[test]
    fn coarse_step_is_a_resolution_error() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 1)).unwrap();
        let cfg = EnsembleConfig::new(0.5, 0.5, 1.0, 1);
        let err = simulate_xeps(&lat, &cfg, Starts::Fixed(&[0.0; 3]), Stream::root(1)).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
    }

    #[test]
    fn limit_sample_covariance() {
        let abar = EffectiveMatrix {
            radius: 0,
            sites: vec![0, 1],
            values: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            se: vec![vec![0.0; 2]; 2],
            estimator: Estimator::Exact1d,
        };
        let sampler = LimitSampler::new(&abar, 3).unwrap();
        let ens = gaussian_limit_sample(&sampler, &[0.5, 1.0], 6000).unwrap();
        assert_eq!(ens.frame(0, 0), &[0.0, 0.0]);
        let cov = increment_covariance(&ens, 2, &[0, 1]);
        assert!((cov[(0, 0)] - 2.0).abs() < 0.12);
        assert!((cov[(0, 1)] - 0.5).abs() < 0.08);
        // Disjoint increments are uncorrelated.
        let first = ens.increments(1, 0);
        let second: Vec<f64> = (0..ens.paths()).map(|p| ens.value(p, 2, 0) - ens.value(p, 1, 0)).collect();
        let prod = stats::mean_se(&first.iter().zip(&second).map(|(a, b)| a * b).collect::<Vec<_>>());
        assert!(prod.within(0.0, 4.0));
    }
}
