use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{
    gaussian_limit_sample, path_metric, simulate_xeps, EnsembleConfig, LimitSampler, PathEnsemble,
    Record, Starts, ZetaEnsemble,
};
use crate::effective::EffectiveMatrix;
use crate::error::{Error, Result};
use crate::potential::Lattice;
use crate::rng::Stream;
use crate::stats::{self, Estimate, KsResult, PermutationResult};
use crate::torus::GibbsSampleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub eps: Vec<f64>,
    /// Observation times; the last one carries the covariance gap.
    pub times: Vec<f64>,
    /// Unit-scale step.
    pub dt: f64,
    pub paths: usize,
    pub limit_paths: usize,
    /// Paths per side fed to the energy test.
    pub energy_subsample: usize,
    pub permutations: usize,
    /// Family-wise level for the distribution tests.
    pub alpha: f64,
    /// Final-ε covariance gap allowed, relative to the largest `|ā|`.
    pub gap_tolerance: f64,
    /// Final-ε KS distance allowed beyond the two-sample noise band.
    pub ks_tolerance: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            eps: vec![1.0, 0.5, 0.25, 0.125],
            times: vec![0.5, 1.0],
            dt: 0.01,
            paths: 2000,
            limit_paths: 2000,
            energy_subsample: 300,
            permutations: 99,
            alpha: 0.01,
            gap_tolerance: 0.05,
            ks_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRecord {
    pub eps: f64,
    pub paths: usize,
    /// Smallest per-coordinate KS p-value at the last time.
    pub ks: KsResult,
    /// Energy test on the stacked block increments at all times.
    pub energy: PermutationResult,
    /// `max_{k,l} |E[ΔX_k ΔX_l]/t − ā_{k,l}|` at the last time.
    pub cov_gap: Estimate,
    pub relative_gap: f64,
    /// Block coordinates entering the KS minimum.
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub eps: Vec<f64>,
    pub records: Vec<EpsRecord>,
    pub abar_scale: f64,
    /// Gap non-increasing as ε decreases, up to one combined SE.
    pub trend: bool,
    /// Final gap within tolerance.
    pub final_gap: bool,
    /// At the final ε the KS distance is within tolerance up to sampling
    /// noise and the energy test does not reject.
    pub distributions: bool,
    /// The final gap SE is too large to resolve the tolerance.
    pub inconclusive: bool,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.trend && self.final_gap && self.distributions && !self.inconclusive
    }

    fn assemble(mut records: Vec<EpsRecord>, abar_scale: f64, cfg: &ConvergenceConfig) -> Self {
        records.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        let trend = records.windows(2).all(|w| {
            w[1].cov_gap.value <= w[0].cov_gap.value + w[0].cov_gap.se.hypot(w[1].cov_gap.se)
        });
        let last = records.last().map(|r| r.cov_gap).unwrap_or_default();
        let tol = cfg.gap_tolerance * abar_scale;
        let m = records.first().map_or(1, |r| r.coordinates).max(1);
        let distributions = records.last().is_some_and(|r| {
            let band = ks_critical(cfg.alpha / m as f64, r.paths, cfg.limit_paths);
            r.ks.statistic <= cfg.ks_tolerance + band && r.energy.p_value > cfg.alpha
        });
        Self {
            eps: records.iter().map(|r| r.eps).collect(),
            records,
            abar_scale,
            trend,
            final_gap: last.value <= tol,
            distributions,
            inconclusive: 3.0 * last.se > tol,
        }
    }
}

/// Two-sample KS critical value at level `alpha`, asymptotic form.
fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt()
}

fn validate(cfg: &ConvergenceConfig) -> Result<()> {
    if cfg.eps.is_empty() || cfg.times.is_empty() || cfg.paths < 2 || cfg.limit_paths < 2 {
        return Err(Error::Config("convergence test needs ε values, times and paths".into()));
    }
    if cfg.times.windows(2).any(|w| w[1] <= w[0]) || cfg.times[0] <= 0.0 {
        return Err(Error::Config("observation times must be positive and increasing".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || !(cfg.gap_tolerance >= 0.0) || !(cfg.ks_tolerance >= 0.0) {
        return Err(Error::Config("alpha must lie in (0, 1) and tolerances must be nonnegative".into()));
    }
    Ok(())
}

fn abar_scale(abar: &EffectiveMatrix) -> f64 {
    abar.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Stacked block increments of each path at the given time indices.
fn fdd_vectors(ens: &PathEnsemble, sites: &[usize], marks: &[usize], picks: &[usize]) -> Vec<Vec<f64>> {
    picks
        .iter()
        .map(|&p| {
            marks
                .iter()
                .flat_map(|&t| sites.iter().map(move |&k| ens.value(p, t, k) - ens.value(p, 0, k)))
                .collect()
        })
        .collect()
}

fn eps_record(
    ens: &PathEnsemble,
    limit: &PathEnsemble,
    abar: &EffectiveMatrix,
    cfg: &ConvergenceConfig,
    stream: Stream,
) -> EpsRecord {
    let mut rng = stream.rng();
    let t_last = *cfg.times.last().unwrap();
    let xi_marks: Vec<usize> = cfg.times.iter().map(|&t| ens.time_index(t)).collect();
    let lim_marks: Vec<usize> = cfg.times.iter().map(|&t| limit.time_index(t)).collect();
    let (ti, li) = (*xi_marks.last().unwrap(), *lim_marks.last().unwrap());
    let m = abar.sites.len();

    let mut ks = KsResult { statistic: 0.0, p_value: 1.0 };
    for (r, &k) in abar.sites.iter().enumerate() {
        let res = stats::ks_two_sample(&ens.increments(ti, k), &limit.increments(li, r));
        if res.p_value < ks.p_value {
            ks = res;
        }
    }
    // Bonferroni across block coordinates.
    ks.p_value = (ks.p_value * m as f64).min(1.0);

    let take = |n: usize| -> Vec<usize> {
        let k = cfg.energy_subsample.min(n);
        let mut v = sample(&mut rng.clone(), n, k).into_vec();
        v.sort_unstable();
        v
    };
    let xi_pick = take(ens.paths());
    let lim_pick = take(limit.paths());
    let limit_sites: Vec<usize> = (0..m).collect();
    let x = fdd_vectors(ens, &abar.sites, &xi_marks, &xi_pick);
    let y = fdd_vectors(limit, &limit_sites, &lim_marks, &lim_pick);
    let energy = stats::energy_test(&x, &y, cfg.permutations, &mut rng);

    let mut cov_gap = Estimate::exact(0.0);
    for r in 0..m {
        let a = ens.increments(ti, abar.sites[r]);
        for c in r..m {
            let b = ens.increments(ti, abar.sites[c]);
            let prods: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v / t_last).collect();
            let e = stats::mean_se(&prods);
            let target = abar.entry(r, c);
            let gap = Estimate::new((e.value - target.value).abs(), e.se.hypot(target.se));
            if gap.value > cov_gap.value {
                cov_gap = gap;
            }
        }
    }
    let scale = abar_scale(abar);
    EpsRecord {
        eps: ens.eps,
        paths: ens.paths(),
        ks,
        energy,
        cov_gap,
        relative_gap: if scale > 0.0 { cov_gap.value / scale } else { cov_gap.value },
        coordinates: m,
    }
}

fn ensemble_for(
    lattice: &Lattice,
    cfg: &ConvergenceConfig,
    eps: f64,
    starts: Starts<'_>,
    stream: Stream,
) -> Result<PathEnsemble> {
    let mut ec = EnsembleConfig::new(eps, cfg.dt, *cfg.times.last().unwrap(), cfg.paths);
    ec.record = Record::At(cfg.times.clone());
    simulate_xeps(lattice, &ec, starts, stream)
}

/// Finite-dimensional comparison of block increments of `X^ε` with the
/// Gaussian limit, for every ε of the ladder. `Starts::Equilibrium` gives
/// the start-averaged mode, `Starts::Fixed` the fixed-start mode.
pub fn weak_convergence_test(
    lattice: &Lattice,
    abar: &EffectiveMatrix,
    starts: Starts<'_>,
    cfg: &ConvergenceConfig,
    stream: Stream,
) -> Result<ConvergenceReport> {
    validate(cfg)?;
    let limit = gaussian_limit_sample(
        &LimitSampler::new(abar, stream.child("limit").key())?,
        &cfg.times,
        cfg.limit_paths,
    )?;
    let records = cfg
        .eps
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let s = stream.child("ladder").index(i as u64);
            let ens = ensemble_for(lattice, cfg, eps, starts, s)?;
            Ok(eps_record(&ens, &limit, abar, cfg, s.child("tests")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport::assemble(records, abar_scale(abar), cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEnvReport {
    /// Environment-averaged comparison.
    pub averaged: ConvergenceReport,
    pub environments: usize,
    /// `per_env[e][i]`: diagonal covariance gap of environment `e` at the
    /// `i`-th ε of `averaged.eps`.
    pub per_env: Vec<Vec<Estimate>>,
}

/// Runs `Z̃^{ε,y}` from the origin in environments `y` drawn from the
/// Gibbs samples. With `y` fixed, `Z̃^{ε,y} = X^ε − X^ε_0` for `X^ε`
/// started at `εy`.
pub fn random_env_run(
    lattice: &Lattice,
    abar: &EffectiveMatrix,
    gibbs: &GibbsSampleSet,
    environments: usize,
    cfg: &ConvergenceConfig,
    stream: Stream,
) -> Result<RandomEnvReport> {
    validate(cfg)?;
    if environments == 0 || environments > gibbs.len() {
        return Err(Error::Config(format!(
            "need between 1 and {} environments",
            gibbs.len()
        )));
    }
    let stride = gibbs.len() / environments;
    let envs = GibbsSampleSet {
        states: (0..environments).map(|e| gibbs.states[e * stride].clone()).collect(),
        ..gibbs.clone()
    };
    let limit = gaussian_limit_sample(
        &LimitSampler::new(abar, stream.child("limit").key())?,
        &cfg.times,
        cfg.limit_paths,
    )?;
    let mut records = Vec::new();
    let mut per_eps = Vec::new();
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let s = stream.child("env-ladder").index(i as u64);
        let mut ens = ensemble_for(lattice, cfg, eps, Starts::Equilibrium(&envs), s)?;
        let n = ens.n_sites;
        for path in &mut ens.data {
            let x0 = path[..n].to_vec();
            for (j, v) in path.iter_mut().enumerate() {
                *v -= x0[j % n];
            }
            if path[..n].iter().any(|v| *v != 0.0) {
                return Err(Error::Numeric("environment run did not start at the origin".into()));
            }
        }
        let ti = ens.time_index(*cfg.times.last().unwrap());
        let t = ens.times[ti];
        let gaps: Vec<Estimate> = (0..environments)
            .map(|e| {
                let mut worst = Estimate::exact(0.0);
                for (r, &k) in abar.sites.iter().enumerate() {
                    let sq: Vec<f64> = (e..ens.paths())
                        .step_by(environments)
                        .map(|p| ens.value(p, ti, k).powi(2) / t)
                        .collect();
                    let est = stats::mean_se(&sq);
                    let target = abar.entry(r, r);
                    let g = Estimate::new((est.value - target.value).abs(), est.se.hypot(target.se));
                    if g.value > worst.value {
                        worst = g;
                    }
                }
                worst
            })
            .collect();
        per_eps.push((eps, gaps));
        records.push(eps_record(&ens, &limit, abar, cfg, s.child("tests")));
    }
    per_eps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let per_env = (0..environments)
        .map(|e| per_eps.iter().map(|(_, g)| g[e]).collect())
        .collect();
    Ok(RandomEnvReport {
        averaged: ConvergenceReport::assemble(records, abar_scale(abar), cfg),
        environments,
        per_env,
    })
}

/// Mean of `ρ(ξ, ζ)` over the paths of a coupled pair.
pub fn rho_distance(xi: &PathEnsemble, zeta: &ZetaEnsemble, norms: &[u32], n_max: u32) -> Result<Estimate> {
    if xi.paths() != zeta.paths.paths() || xi.times != zeta.paths.times {
        return Err(Error::Domain("ξ and ζ must share paths and grid".into()));
    }
    let values = (0..xi.paths())
        .map(|p| path_metric(&xi.data[p], &zeta.paths.data[p], &xi.times, norms, n_max))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::mean_se(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessConfig {
    /// Horizon over which the modulus is taken.
    pub horizon: f64,
    /// Ladder of `(h_m, δ_m)`: a path violates level `m` when its weighted
    /// modulus over windows of length `h_m` exceeds `δ_m`.
    pub levels: Vec<(f64, f64)>,
    /// Radius for the weighted start norm.
    pub bound: f64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            levels: (1..=4).map(|m| (0.5f64.powi(2 * m as i32), 1.0 / m as f64)).collect(),
            bound: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub levels: Vec<(f64, f64)>,
    /// Fraction of paths violating each level.
    pub violations: Vec<Estimate>,
    /// Fraction of paths whose start lies outside the radius.
    pub unbounded: Estimate,
}

/// `sup_{s,t ≤ T, |s−t| ≤ h} Σ_k 2^{−|k|/2} |x_k(s) − x_k(t)|` on the grid.
fn weighted_modulus(path: &[f64], times: &[f64], weights: &[f64], horizon: f64, h: f64) -> f64 {
    let n = weights.len();
    let dist = |s: usize, t: usize| -> f64 {
        (0..n)
            .map(|k| weights[k] * (path[s * n + k] - path[t * n + k]).abs())
            .sum()
    };
    let end = times.iter().take_while(|&&t| t <= horizon + 1e-12).count();
    let mut best = 0.0f64;
    for s in 0..end {
        for t in s + 1..end {
            if times[t] - times[s] > h + 1e-12 {
                break;
            }
            best = best.max(dist(s, t));
        }
    }
    best
}

/// Empirical violation fractions of the modulus and boundedness
/// conditions that define compact sets of path space.
pub fn tightness_diagnostic(ens: &PathEnsemble, norms: &[u32], cfg: &TightnessConfig) -> Result<TightnessReport> {
    if norms.len() != ens.n_sites {
        return Err(Error::Domain("norms must cover the box".into()));
    }
    if ens.times.last().is_none_or(|&t| t + 1e-12 < cfg.horizon) {
        return Err(Error::Config("ensemble ends before the tightness horizon".into()));
    }
    let weights: Vec<f64> = norms.iter().map(|&k| 0.5f64.powf(f64::from(k) / 2.0)).collect();
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let violations = cfg
        .levels
        .iter()
        .map(|&(h, delta)| {
            let v: Vec<f64> = ens
                .data
                .iter()
                .map(|p| indicator(weighted_modulus(p, &ens.times, &weights, cfg.horizon, h) > delta))
                .collect();
            stats::mean_se(&v)
        })
        .collect();
    let unbounded: Vec<f64> = ens
        .data
        .iter()
        .map(|p| {
            let r: f64 = weights.iter().zip(p).map(|(w, v)| w * v.abs()).sum();
            indicator(r > cfg.bound)
        })
        .collect();
    Ok(TightnessReport {
        levels: cfg.levels.clone(),
        violations,
        unbounded: stats::mean_se(&unbounded),
    })
}

/// `E[Σ_k 2^{−|k|} sup_{t≤T} |X_k(t) − X_k(0)|²]`.
pub fn moment_functional(ens: &PathEnsemble, norms: &[u32], horizon: f64) -> Result<Estimate> {
    if norms.len() != ens.n_sites {
        return Err(Error::Domain("norms must cover the box".into()));
    }
    let n = ens.n_sites;
    let end = ens.times.iter().take_while(|&&t| t <= horizon + 1e-12).count();
    let values: Vec<f64> = ens
        .data
        .iter()
        .map(|p| {
            (0..n)
                .map(|k| {
                    let sup = (0..end).map(|t| (p[t * n + k] - p[k]).powi(2)).fold(0.0, f64::max);
                    0.5f64.powi(norms[k] as i32) * sup
                })
                .sum()
        })
        .collect();
    Ok(stats::mean_se(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFit {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// `‖ρ − fit‖ / ‖ρ‖`.
    pub relative_residual: f64,
    /// Distances strictly decreasing along the ladder as ε decreases.
    pub decreasing: bool,
}

impl ShapeFit {
    pub fn predict(&self, eps: f64, n: usize) -> f64 {
        let n = n as f64;
        self.c1 / n.sqrt() + self.c2 * eps + self.c3 * (-self.c4 * n).exp()
    }
}

/// Nonnegative fit of `C₁/√N + C₂ε + C₃e^{−C₄N}`; `C₄` by grid search.
pub fn fit_distance_shape(eps: &[f64], n: &[usize], rho: &[f64]) -> Result<ShapeFit> {
    if eps.len() != n.len() || eps.len() != rho.len() || eps.len() < 2 || n.contains(&0) {
        return Err(Error::Config("shape fit needs matching ladders with N ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
    let decreasing = order.windows(2).all(|w| rho[w[1]] < rho[w[0]]);
    let norm: f64 = rho.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<ShapeFit> = None;
    for i in 0..=60 {
        let c4 = 0.05 * 1.1f64.powi(i);
        let cols = vec![
            n.iter().map(|&v| 1.0 / (v as f64).sqrt()).collect::<Vec<_>>(),
            eps.to_vec(),
            n.iter().map(|&v| (-c4 * v as f64).exp()).collect::<Vec<_>>(),
        ];
        let (coef, rss) = stats::nnls_small(&cols, rho);
        let fit = ShapeFit {
            c1: coef[0],
            c2: coef[1],
            c3: coef[2],
            c4,
            relative_residual: if norm > 0.0 { rss.sqrt() / norm } else { 0.0 },
            decreasing,
        };
        if best.as_ref().is_none_or(|b| fit.relative_residual < b.relative_residual) {
            best = Some(fit);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::Estimator;
    use crate::homogenization::site_norms;
    use crate::potential::{BoxGeometry, PotentialSpec};

    fn free_abar(sites: Vec<usize>) -> EffectiveMatrix {
        let m = sites.len();
        EffectiveMatrix {
            radius: 0,
            values: (0..m).map(|r| (0..m).map(|c| if r == c { 2.0 } else { 0.0 }).collect()).collect(),
            se: vec![vec![0.0; m]; m],
            sites,
            estimator: Estimator::Exact1d,
        }
    }

    #[test]
    fn free_case_sits_at_the_noise_floor() {
        let geom = BoxGeometry::new(1, 1);
        let lat = Lattice::new(&PotentialSpec::free(1), geom).unwrap();
        let cfg = ConvergenceConfig {
            eps: vec![1.0, 0.5],
            dt: 0.05,
            paths: 1500,
            limit_paths: 1500,
            energy_subsample: 120,
            permutations: 49,
            gap_tolerance: 0.2,
            ..Default::default()
        };
        let abar = free_abar(vec![geom.origin()]);
        let r = weak_convergence_test(&lat, &abar, Starts::Fixed(&[0.0; 3]), &cfg, Stream::root(5)).unwrap();
        assert!(r.distributions, "{r:?}");
        for rec in &r.records {
            assert!(rec.cov_gap.value <= 3.0 * rec.cov_gap.se + 1e-12, "{rec:?}");
        }
    }

    #[test]
    fn tightness_matches_brownian_reference_and_nests() {
        let geom = BoxGeometry::new(1, 1);
        let lat = Lattice::new(&PotentialSpec::free(1), geom).unwrap();
        let mut ec = EnsembleConfig::new(1.0, 0.02, 1.0, 1000);
        ec.record = Record::Every(5);
        let ens = simulate_xeps(&lat, &ec, Starts::Fixed(&[0.0; 3]), Stream::root(8)).unwrap();
        let reference = gaussian_limit_sample(
            &LimitSampler::new(&free_abar(vec![0, 1, 2]), 9).unwrap(),
            &ens.times[1..],
            1000,
        )
        .unwrap();
        let norms = site_norms(&geom);
        let cfg = TightnessConfig {
            levels: vec![(0.5, 2.0), (0.25, 2.0), (0.1, 2.0), (0.05, 2.0)],
            ..Default::default()
        };
        let a = tightness_diagnostic(&ens, &norms, &cfg).unwrap();
        let b = tightness_diagnostic(&reference, &norms, &cfg).unwrap();
        for (x, y) in a.violations.iter().zip(&b.violations) {
            assert!(x.agrees_with(y, 4.0), "{x:?} vs {y:?}");
        }
        assert!(a.violations.windows(2).all(|w| w[1].value <= w[0].value));

        let flat = PathEnsemble {
            data: vec![vec![0.3; ens.data[0].len()]; 5],
            ..ens.clone()
        };
        let c = tightness_diagnostic(&flat, &norms, &cfg).unwrap();
        assert!(c.violations.iter().all(|v| v.value == 0.0));
        assert_eq!(c.unbounded.value, 0.0);
    }

    #[test]
    fn moment_functional_is_stable_in_box_size() {
        let mut values = Vec::new();
        for l in [1, 2] {
            let geom = BoxGeometry::new(1, l);
            let lat = Lattice::new(&PotentialSpec::free(1), geom).unwrap();
            let ec = EnsembleConfig::new(1.0, 0.02, 1.0, 800);
            let start = vec![0.0; geom.n_sites()];
            let ens = simulate_xeps(&lat, &ec, Starts::Fixed(&start), Stream::root(4)).unwrap();
            values.push(moment_functional(&ens, &site_norms(&geom), 1.0).unwrap());
        }
        let tail = 2.0 * 0.25 * 2.0 * 4.0;
        assert!(values[1].value - values[0].value < tail, "{values:?}");
        assert!(values[1].value.is_finite());
    }

    #[test]
    fn shape_fit_recovers_a_synthetic_ladder() {
        let eps = [1.0, 0.5, 0.25, 0.125];
        let n = [1, 1, 2, 3];
        let rho: Vec<f64> = eps
            .iter()
            .zip(&n)
            .map(|(e, &k)| 0.1 / (k as f64).sqrt() + 0.3 * e + 0.2 * (-1.0 * k as f64).exp())
            .collect();
        let fit = fit_distance_shape(&eps, &n, &rho).unwrap();
        assert!(fit.decreasing);
        assert!(fit.relative_residual < 1e-3, "{fit:?}");
        assert!(fit.c1 >= 0.0 && fit.c2 >= 0.0 && fit.c3 >= 0.0);
    }
}
