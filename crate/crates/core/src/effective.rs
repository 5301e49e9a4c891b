//! Effective diffusion matrix `Ā` by three estimators, PSD block
//! factorization, trigonometric smoothing of factor fields and the
//! truncation level `N(ε)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{CorrectorDerivatives, CorrectorField};
use crate::error::{Error, Result};
use crate::potential::{Lattice, Observable};
use crate::rng::Stream;
use crate::stats::{self, Estimate};
use crate::torus::{draw_noise, wrap_angle, GibbsSampleSet, Integrator, MixingFit};
use crate::trig::{TrigPoly, TrigTerm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Derivative,
    Martingale,
    Msd,
    Exact1d,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Derivative => "derivative",
            Estimator::Martingale => "martingale",
            Estimator::Msd => "msd",
            Estimator::Exact1d => "exact1d",
        }
    }
}

/// A block `{ā_{k,l} : |k|, |l| ≤ M}` with per-entry standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveMatrix {
    pub radius: usize,
    /// Box indices of the block sites.
    pub sites: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub estimator: Estimator,
}

impl EffectiveMatrix {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn entry(&self, r: usize, c: usize) -> Estimate {
        Estimate::new(self.values[r][c], self.se[r][c])
    }

    /// Position of box site `k` within the block.
    pub fn position(&self, k: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == k)
    }

    pub fn max_se(&self) -> f64 {
        self.se.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn symmetrized(&self) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(m, m, |r, c| 0.5 * (self.values[r][c] + self.values[c][r]))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        SymmetricEigen::new(self.symmetrized())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -3.0 * self.max_se() - 1e-12
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.len();
        (0..m).all(|r| (0..m).all(|c| self.entry(r, c).agrees_with(&self.entry(c, r), 3.0)))
    }

    /// Entries with equal (periodic) offset `k − l` agree within three
    /// combined standard errors.
    pub fn is_translation_invariant(&self, lattice: &Lattice) -> bool {
        let g = lattice.geometry();
        let offset = |r: usize, c: usize| -> usize {
            let a = g.coords(self.sites[r]);
            let b = g.coords(self.sites[c]);
            let d: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            g.wrapped_index(&d)
        };
        let m = self.len();
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        for r in 0..m {
            for c in 0..m {
                pairs.push((offset(r, c), r, c));
            }
        }
        pairs.iter().all(|&(o, r, c)| {
            pairs
                .iter()
                .filter(|p| p.0 == o)
                .all(|&(_, r2, c2)| self.entry(r, c).agrees_with(&self.entry(r2, c2), 3.0))
        })
    }

    /// Largest `|z|` between matching entries of two estimates.
    pub fn max_z_against(&self, other: &EffectiveMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.len() {
            for c in 0..self.len() {
                let a = self.entry(r, c);
                let b = other.entry(r, c);
                let se = a.se.hypot(b.se);
                let d = (a.value - b.value).abs();
                worst = worst.max(if se > 0.0 { d / se } else if d < 1e-12 { 0.0 } else { f64::INFINITY });
            }
        }
        worst
    }

    fn from_samples(
        radius: usize,
        sites: Vec<usize>,
        estimator: Estimator,
        per_entry: impl Fn(usize, usize) -> Estimate,
    ) -> Self {
        let m = sites.len();
        let mut values = vec![vec![0.0; m]; m];
        let mut se = vec![vec![0.0; m]; m];
        for r in 0..m {
            for c in 0..m {
                let e = per_entry(r, c);
                values[r][c] = e.value;
                se[r][c] = e.se;
            }
        }
        Self {
            radius,
            sites,
            values,
            se,
            estimator,
        }
    }
}

/// `ā_{k,l} = ⟨Σ_j χ'_{k,j} χ'_{l,j}⟩` over the sample points, with each
/// product taken across independent derivative halves.
pub fn abar_from_derivatives(
    lattice: &Lattice,
    radius: usize,
    derivs: &CorrectorDerivatives,
    samples: &GibbsSampleSet,
) -> Result<EffectiveMatrix> {
    if samples.states != derivs.points {
        return Err(Error::Domain("derivatives were not evaluated at the sample points".into()));
    }
    let sites = lattice.geometry().block(radius);
    let n = lattice.n_sites();
    let per_point = |r: usize, c: usize| -> Vec<f64> {
        let (k, l) = (sites[r], sites[c]);
        (0..samples.len())
            .map(|p| {
                (0..n)
                    .map(|j| {
                        0.5 * (derivs.chi_prime(0, p, k, j) * derivs.chi_prime(1, p, l, j)
                            + derivs.chi_prime(1, p, k, j) * derivs.chi_prime(0, p, l, j))
                    })
                    .sum()
            })
            .collect()
    };
    let est = if derivs.source == "exact-single-site" {
        Estimator::Exact1d
    } else {
        Estimator::Derivative
    };
    Ok(EffectiveMatrix::from_samples(radius, sites.clone(), est, |r, c| {
        samples.estimate_values(&per_point(r, c))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dt: f64,
    pub paths: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            paths: 2000,
        }
    }
}

/// Simulates unit-scale paths from Gibbs starts and records
/// `X(t) − X(0)` at each requested time, plus the end points.
fn stationary_increments(
    lattice: &Lattice,
    samples: &GibbsSampleSet,
    times: &[f64],
    cfg: &RunConfig,
    stream: Stream,
) -> Result<Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)>> {
    if samples.is_empty() || cfg.paths == 0 {
        return Err(Error::Config("stationary runs need samples and paths".into()));
    }
    let marks: Vec<usize> = times.iter().map(|t| (t / cfg.dt).round().max(1.0) as usize).collect();
    if marks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("times must be increasing on the step grid".into()));
    }
    let n = lattice.n_sites();
    (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let start = samples.states[p % samples.len()].angles().to_vec();
            let mut x = start.clone();
            let mut integ = Integrator::new(lattice, cfg.dt)?;
            let mut rng = stream.index(p as u64).rng();
            let mut noise = vec![0.0; n];
            let mut rec = Vec::with_capacity(marks.len());
            let mut m = 0;
            for step in 1..=*marks.last().unwrap() {
                draw_noise(&mut rng, &mut noise);
                integ.step_with(&mut x, &noise);
                if marks[m] == step {
                    rec.push(x.iter().zip(&start).map(|(a, b)| a - b).collect());
                    m += 1;
                }
            }
            Ok((start, rec, x))
        })
        .collect()
}

/// `ā_{k,l} ≈ E[M^k_t M^l_t] / t` with `M^k_t = X_k(t) − X_k(0) − (χ_k(X_t) − χ_k(X_0))`.
pub fn abar_from_martingale(
    lattice: &Lattice,
    radius: usize,
    field: &dyn CorrectorField,
    samples: &GibbsSampleSet,
    t: f64,
    cfg: &RunConfig,
    stream: Stream,
) -> Result<EffectiveMatrix> {
    let runs = stationary_increments(lattice, samples, &[t], cfg, stream.child("martingale"))?;
    let sites = lattice.geometry().block(radius);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = runs
        .par_iter()
        .map(|(start, rec, end)| {
            let reduced: Vec<f64> = end.iter().map(|&v| wrap_angle(v)).collect();
            let (ea, eb) = field.value_halves(&reduced)?;
            let (sa, sb) = field.value_halves(start)?;
            let ma = sites.iter().map(|&k| rec[0][k] - (ea[k] - sa[k])).collect();
            let mb = sites.iter().map(|&k| rec[0][k] - (eb[k] - sb[k])).collect();
            Ok((ma, mb))
        })
        .collect::<Result<_>>()?;
    Ok(EffectiveMatrix::from_samples(radius, sites.clone(), Estimator::Martingale, |r, c| {
        let v: Vec<f64> = parts
            .iter()
            .map(|(a, b)| 0.5 * (a[r] * b[c] + b[r] * a[c]) / t)
            .collect();
        stats::mean_se(&v)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdEstimate {
    pub matrix: EffectiveMatrix,
    /// Largest standardized deviation of a second moment from the fitted
    /// line.
    pub fit_z: f64,
    pub flagged: bool,
}

/// Least-squares slope of `E[(X_k(t)−X_k(0))(X_l(t)−X_l(0))]` against `t`.
///
/// Runs start in equilibrium, so the increments have mean zero and raw
/// second moments are used.
pub fn abar_from_msd(
    lattice: &Lattice,
    radius: usize,
    samples: &GibbsSampleSet,
    times: &[f64],
    cfg: &RunConfig,
    stream: Stream,
) -> Result<MsdEstimate> {
    if times.len() < 2 {
        return Err(Error::Config("need at least two times for a slope".into()));
    }
    let runs = stationary_increments(lattice, samples, times, cfg, stream.child("msd"))?;
    let sites = lattice.geometry().block(radius);
    let w = stats::slope_weights(times);
    let mut fit_z: f64 = 0.0;
    let matrix = EffectiveMatrix::from_samples(radius, sites.clone(), Estimator::Msd, |r, c| {
        let (k, l) = (sites[r], sites[c]);
        let slopes: Vec<f64> = runs
            .iter()
            .map(|(_, rec, _)| rec.iter().zip(&w).map(|(d, wi)| wi * d[k] * d[l]).sum())
            .collect();
        stats::mean_se(&slopes)
    });
    for r in 0..sites.len() {
        let (k, l) = (sites[r], sites[r]);
        let moments: Vec<Estimate> = (0..times.len())
            .map(|ti| stats::mean_se(&runs.iter().map(|(_, rec, _)| rec[ti][k] * rec[ti][l]).collect::<Vec<_>>()))
            .collect();
        let fit = stats::linear_fit(times, &moments.iter().map(|m| m.value).collect::<Vec<_>>());
        for (t, m) in times.iter().zip(&moments) {
            let resid = m.value - fit.intercept - fit.slope * t;
            if m.se > 0.0 {
                fit_z = fit_z.max(resid.abs() / m.se);
            }
        }
    }
    Ok(MsdEstimate {
        matrix,
        fit_z,
        flagged: fit_z > 4.0,
    })
}

/// A factor `σ` of a PSD block with `σσᵀ = A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorBlock {
    pub sigma: Vec<Vec<f64>>,
    pub rank: usize,
    /// `‖σσᵀ − A‖_F / ‖A‖_F` (zero for a zero block).
    pub reconstruction_error: f64,
}

impl FactorBlock {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.sigma.len();
        DMatrix::from_fn(n, n, |r, c| self.sigma[r][c])
    }
}

/// Eigenvalue clamping threshold for rank-deficient blocks.
pub const PSD_CLAMP: f64 = 1e-12;

/// Pivoted Cholesky factorization of a symmetric PSD block.
pub fn factorize_block(a: &DMatrix<f64>, tolerance: f64) -> Result<FactorBlock> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Domain("block must be square".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let scale = sym.norm();
    if n > 0 && scale > 0.0 {
        let min = SymmetricEigen::new(sym.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min < -tolerance.max(PSD_CLAMP) * scale.max(1.0) {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance,
            });
        }
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut resid = sym.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rank = 0;
    for step in 0..n {
        let (piv_pos, piv_val) = perm[step..]
            .iter()
            .enumerate()
            .map(|(i, &p)| (step + i, resid[(p, p)]))
            .fold((step, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if piv_val <= PSD_CLAMP * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        perm.swap(step, piv_pos);
        let p = perm[step];
        let d = piv_val.sqrt();
        for &q in &perm[step..] {
            l[(q, step)] = resid[(q, p)] / d;
        }
        for &q in &perm[step..] {
            for &s in &perm[step..] {
                resid[(q, s)] -= l[(q, step)] * l[(s, step)];
            }
        }
        rank += 1;
    }
    let rec = &l * l.transpose();
    let reconstruction_error = if scale > 0.0 { (rec - &sym).norm() / scale } else { 0.0 };
    if reconstruction_error > 1e-10 {
        return Err(Error::Numeric(format!(
            "factor reconstruction error {reconstruction_error:e} exceeds 1e-10"
        )));
    }
    Ok(FactorBlock {
        sigma: (0..n).map(|r| (0..n).map(|c| l[(r, c)]).collect()).collect(),
        rank,
        reconstruction_error,
    })
}

/// Symmetric PSD square root; continuous in the block, unlike pivoted
/// Cholesky, so it is used for factor fields.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// The local block `a(y)|_{Λ_N} = χ'χ'ᵀ` restricted to `sites`.
pub fn local_block(field: &dyn CorrectorField, sites: &[usize], y: &[f64]) -> Result<DMatrix<f64>> {
    let (ga, gb) = field.gradient_halves(y)?;
    let n = y.len();
    let cp = |k: usize, j: usize| -> f64 {
        let g = 0.5 * (ga[k][j] + gb[k][j]);
        std::f64::consts::SQRT_2 * (f64::from(u8::from(k == j)) - g)
    };
    let m = sites.len();
    Ok(DMatrix::from_fn(m, m, |r, c| {
        (0..n).map(|j| cp(sites[r], j) * cp(sites[c], j)).sum()
    }))
}

/// Pointwise factor field `σ^N(y)`: square root of the local block.
pub fn pointwise_factor(field: &dyn CorrectorField, sites: &[usize], y: &[f64]) -> Result<DMatrix<f64>> {
    Ok(psd_sqrt(&local_block(field, sites, y)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    /// Smallest total frequency degree tried. Fixing it across a ladder of
    /// radii keeps the truncation constants comparable.
    pub min_cutoff: u32,
    /// Largest total frequency degree tried.
    pub max_cutoff: u32,
    /// Entry `(k, l)` is fitted in the coordinates within this sup-norm
    /// distance of `k` or `l`.
    pub window: usize,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            min_cutoff: 0,
            max_cutoff: 4,
            window: 0,
        }
    }
}

/// Trigonometric-polynomial fit `σ̃^N` of a factor field.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedFactor {
    pub n: usize,
    pub sites: Vec<usize>,
    pub entries: Vec<Vec<Observable>>,
    /// Held-out `Σ_l ‖σ̃_{k,l} − σ_{k,l}‖_{L²(μ₀)}` per row.
    pub row_distance: Vec<f64>,
    pub cutoff: u32,
    /// `(cutoff, largest row distance)` for each cutoff tried.
    pub history: Vec<(u32, f64)>,
}

impl SmoothedFactor {
    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let m = self.sites.len();
        DMatrix::from_fn(m, m, |r, c| self.entries[r][c].eval(y))
    }

    /// Constant factor (no dependence on the configuration).
    pub fn constant(n: usize, sites: Vec<usize>, sigma: &DMatrix<f64>) -> Self {
        let m = sites.len();
        Self {
            n,
            entries: (0..m)
                .map(|r| (0..m).map(|c| Observable::constant(sigma[(r, c)])).collect())
                .collect(),
            sites,
            row_distance: vec![0.0; m],
            cutoff: 0,
            history: vec![(0, 0.0)],
        }
    }
}

/// Frequency vectors of total degree `1..=cutoff` whose first nonzero
/// entry is positive.
fn half_frequencies(vars: usize, cutoff: u32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = vec![0i32; vars];
    fn rec(i: usize, left: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if i == cur.len() {
            let first = cur.iter().find(|&&v| v != 0);
            if matches!(first, Some(&v) if v > 0) {
                out.push(cur.clone());
            }
            return;
        }
        for v in -left..=left {
            cur[i] = v;
            rec(i + 1, left - v.abs(), cur, out);
        }
        cur[i] = 0;
    }
    rec(0, cutoff as i32, &mut cur, &mut out);
    out
}

fn fit_entry(vars: &[usize], cutoff: u32, train: &[&[f64]], target: &[f64]) -> Result<TrigPoly> {
    let freqs = half_frequencies(vars.len(), cutoff);
    let cols = 1 + 2 * freqs.len();
    if train.len() < cols {
        return Err(Error::Config(format!(
            "{} fitting points cannot determine {cols} coefficients",
            train.len()
        )));
    }
    let phase = |y: &[f64], f: &[i32]| -> f64 {
        vars.iter().zip(f).map(|(&s, &k)| f64::from(k) * y[s]).sum()
    };
    let design = DMatrix::from_fn(train.len(), cols, |r, c| {
        if c == 0 {
            1.0
        } else {
            let p = phase(train[r], &freqs[(c - 1) / 2]);
            if c % 2 == 1 {
                p.cos()
            } else {
                p.sin()
            }
        }
    });
    let rhs = DVector::from_column_slice(target);
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numeric(e.into()))?;
    let mut terms = vec![TrigTerm {
        freq: vec![0; vars.len()],
        cos: coef[0],
        sin: 0.0,
    }];
    for (i, f) in freqs.iter().enumerate() {
        terms.push(TrigTerm {
            freq: f.clone(),
            cos: coef[1 + 2 * i],
            sin: coef[2 + 2 * i],
        });
    }
    TrigPoly::from_terms(vars.len(), terms)
}

/// Fits every entry of `σ^N` by trigonometric least squares on half of
/// the samples, raising the cutoff until every held-out row distance is
/// below `1/N`.
pub fn smooth_factor(
    field: &dyn CorrectorField,
    lattice: &Lattice,
    n: usize,
    samples: &GibbsSampleSet,
    cfg: &SmoothConfig,
) -> Result<SmoothedFactor> {
    if n == 0 {
        return Err(Error::Domain("block radius must be at least 1".into()));
    }
    let geom = lattice.geometry();
    let sites = geom.block(n);
    let m = sites.len();
    let sigma: Vec<DMatrix<f64>> = samples
        .states
        .par_iter()
        .map(|s| pointwise_factor(field, &sites, s.angles()))
        .collect::<Result<_>>()?;
    let target = 1.0 / n as f64;
    let train_idx: Vec<usize> = (0..samples.len()).step_by(2).collect();
    let test_idx: Vec<usize> = (1..samples.len()).step_by(2).collect();
    if test_idx.is_empty() {
        return Err(Error::Config("smoothing needs at least two samples".into()));
    }
    let train: Vec<&[f64]> = train_idx.iter().map(|&i| samples.states[i].angles()).collect();
    let near = |a: usize, b: usize| -> bool {
        let ca = geom.coords(a);
        let cb = geom.coords(b);
        let side = geom.side() as i32;
        ca.iter().zip(&cb).all(|(x, y)| {
            let d = (x - y).rem_euclid(side);
            d.min(side - d) as usize <= cfg.window
        })
    };
    let vars_for = |r: usize, c: usize| -> Vec<usize> {
        (0..lattice.n_sites())
            .filter(|&s| near(s, sites[r]) || near(s, sites[c]))
            .collect()
    };
    let mut history = Vec::new();
    let mut last_err = None;
    for cutoff in cfg.min_cutoff..=cfg.max_cutoff.max(cfg.min_cutoff) {
        let mut entries = vec![vec![Observable::constant(0.0); m]; m];
        let mut row_distance = vec![0.0; m];
        for r in 0..m {
            for c in 0..m {
                let values: Vec<f64> = sigma.iter().map(|s| s[(r, c)]).collect();
                let obs = if values.iter().all(|v| v.abs() < 1e-14) {
                    Observable::constant(0.0)
                } else {
                    let vars = vars_for(r, c);
                    let y_train: Vec<f64> = train_idx.iter().map(|&i| values[i]).collect();
                    let poly = fit_entry(&vars, cutoff, &train, &y_train)?;
                    Observable::new(vars, poly)?
                };
                let mse = test_idx
                    .iter()
                    .map(|&i| (obs.eval(samples.states[i].angles()) - values[i]).powi(2))
                    .sum::<f64>()
                    / test_idx.len() as f64;
                row_distance[r] += mse.sqrt();
                entries[r][c] = obs;
            }
        }
        let (worst_row, worst) = row_distance
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        history.push((cutoff, worst));
        if worst < target {
            return Ok(SmoothedFactor {
                n,
                sites,
                entries,
                row_distance,
                cutoff,
                history,
            });
        }
        last_err = Some(Error::SmoothingBudget {
            row: worst_row,
            distance: worst,
            target,
            cutoff,
        });
    }
    Err(last_err.expect("at least one cutoff tried"))
}

/// `M_{N,k,l} = Σ_{j∈Λ_N} [sup|∂_j √(ã_kk ã_ll)| + sup √(ã_kk ã_ll)]`
/// with `ã = σ̃σ̃ᵀ`; sups are maxima over `cloud`. Returns the largest
/// value over `(k, l)`.
pub fn truncation_constant(factor: &SmoothedFactor, cloud: &[Vec<f64>]) -> f64 {
    let m = factor.sites.len();
    let mut sup_f = vec![vec![0.0f64; m]; m];
    let mut sup_d = vec![vec![vec![0.0f64; m]; m]; m];
    for y in cloud {
        let s = factor.eval(y);
        // ∂_j σ̃_{r,c} at block site j.
        let ds: Vec<DMatrix<f64>> = factor
            .sites
            .iter()
            .map(|&j| DMatrix::from_fn(m, m, |r, c| factor.entries[r][c].partial_at(j, y)))
            .collect();
        let diag: Vec<f64> = (0..m).map(|r| s.row(r).norm_squared()).collect();
        let ddiag: Vec<Vec<f64>> = ds
            .iter()
            .map(|d| (0..m).map(|r| 2.0 * s.row(r).dot(&d.row(r))).collect())
            .collect();
        for r in 0..m {
            for c in 0..m {
                let f = (diag[r] * diag[c]).max(0.0).sqrt();
                sup_f[r][c] = sup_f[r][c].max(f);
                for j in 0..m {
                    let num = ddiag[j][r] * diag[c] + diag[r] * ddiag[j][c];
                    let d = if f > 1e-300 { (num / (2.0 * f)).abs() } else { 0.0 };
                    sup_d[r][c][j] = sup_d[r][c][j].max(d);
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for r in 0..m {
        for c in 0..m {
            let total: f64 = (0..m).map(|j| sup_d[r][c][j] + sup_f[r][c]).sum();
            worst = worst.max(total);
        }
    }
    worst
}

/// `K′ = max(2K / c^α, K)` from the mixing fit.
pub fn k_prime(fit: &MixingFit) -> f64 {
    (2.0 * fit.k_hat / fit.c_hat.powf(fit.alpha_hat)).max(fit.k_hat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationRule {
    pub k_prime: f64,
    /// `(N, max_{k,l} M_{N,k,l})`, increasing in `N`.
    pub ladder: Vec<(usize, f64)>,
    /// Right-hand side of the defining inequality: 1 for the literal rule.
    pub threshold: f64,
    pub calibrated: bool,
}

impl TruncationRule {
    pub fn new(fit: &MixingFit, ladder: Vec<(usize, f64)>) -> Self {
        Self {
            k_prime: k_prime(fit),
            ladder,
            threshold: 1.0,
            calibrated: false,
        }
    }

    /// Rescales the threshold so that `N = 1` is exactly admissible at
    /// `eps_max`. The literal rule is infeasible on desk-scale ladders.
    pub fn calibrated(mut self, eps_max: f64) -> Self {
        if let Some(&(_, m1)) = self.ladder.first() {
            self.threshold = eps_max.sqrt() * self.k_prime * m1;
            self.calibrated = true;
        }
        self
    }

    pub fn select(&self, eps: f64) -> Result<usize> {
        select_truncation(eps, self)
    }
}

/// Largest `N` on the ladder with `√ε K′ M_N ≤ threshold`.
pub fn select_truncation(eps: f64, rule: &TruncationRule) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Domain(format!("ε must lie in (0, 1], got {eps}")));
    }
    let lhs = |m: f64| eps.sqrt() * rule.k_prime * m;
    let best = rule
        .ladder
        .iter()
        .filter(|(_, m)| lhs(*m) <= rule.threshold * (1.0 + 1e-12))
        .map(|(n, _)| *n)
        .max();
    best.ok_or_else(|| Error::TruncationInfeasible {
        eps,
        value: rule.ladder.first().map_or(f64::INFINITY, |(_, m)| lhs(*m)),
    })
}

/// Row-norm analogue `Σ_l ‖σ^N_{k,l}‖²_{L²(μ₀)} = ⟨a_kk⟩ ≤ 5/2`.
pub fn row_norm_estimates(
    field: &dyn CorrectorField,
    sites: &[usize],
    samples: &GibbsSampleSet,
) -> Result<Vec<Estimate>> {
    let blocks: Vec<DMatrix<f64>> = samples
        .states
        .par_iter()
        .map(|s| pointwise_factor(field, sites, s.angles()))
        .collect::<Result<_>>()?;
    Ok((0..sites.len())
        .map(|r| samples.estimate_values(&blocks.iter().map(|b| b.row(r).norm_squared()).collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::{SingleSiteField, ZeroField};
    use crate::potential::{BoxGeometry, PotentialSpec};
    use crate::presets;
    use crate::torus::TorusState;

    #[test]
    fn factorize_examples() {
        let two = DMatrix::<f64>::identity(3, 3) * 2.0;
        let f = factorize_block(&two, 1e-10).unwrap();
        assert!((f.matrix() * f.matrix().transpose() - &two).norm() < 1e-14);
        let ones = DMatrix::from_element(2, 2, 1.0);
        let f = factorize_block(&ones, 1e-10).unwrap();
        assert_eq!(f.rank, 1);
        assert!((f.matrix() * f.matrix().transpose() - &ones).norm() < 1e-14);
        let z = factorize_block(&DMatrix::zeros(2, 2), 1e-10).unwrap();
        assert_eq!(z.rank, 0);
        assert_eq!(z.reconstruction_error, 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factorize_block(&bad, 1e-10), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&a);
        assert!((&s * &s - a).norm() < 1e-12);
    }

    #[test]
    fn frequency_enumeration() {
        assert_eq!(half_frequencies(1, 3), vec![vec![1], vec![2], vec![3]]);
        // Degree ≤ 1 in two variables: (0,1), (1,0) up to sign.
        assert_eq!(half_frequencies(2, 1).len(), 2);
        assert_eq!(half_frequencies(2, 2).len(), 6);
    }

    fn uniform_samples(n_sites: usize, count: usize) -> GibbsSampleSet {
        let mut rng = Stream::root(4).rng();
        GibbsSampleSet {
            states: (0..count).map(|_| TorusState::uniform(n_sites, &mut rng)).collect(),
            chains: 10,
            burn_in: 0,
            thin: 0,
            acceptance: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn free_factor_smooths_exactly() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 2)).unwrap();
        let field = ZeroField { n_sites: 5 };
        let sf = smooth_factor(&field, &lat, 1, &uniform_samples(5, 40), &SmoothConfig::default()).unwrap();
        assert_eq!(sf.cutoff, 0);
        assert!(sf.row_distance.iter().all(|d| *d < 1e-12));
        let y = vec![0.3; 5];
        assert!((sf.eval(&y) - DMatrix::<f64>::identity(3, 3) * 2f64.sqrt()).norm() < 1e-12);
    }

    #[test]
    fn single_site_smoothing_improves_with_cutoff() {
        let lat = Lattice::new(&presets::cosine_single_site(1, 1.0), BoxGeometry::new(1, 3)).unwrap();
        let field = SingleSiteField::for_lattice(&lat).unwrap();
        let samples = uniform_samples(7, 400);
        let cfg = SmoothConfig { max_cutoff: 6, ..SmoothConfig::default() };
        // Radius 3 needs distance below 1/3 per row.
        let sf = smooth_factor(&field, &lat, 3, &samples, &cfg).unwrap();
        assert!(sf.row_distance.iter().all(|d| *d < 1.0 / 3.0));
        assert!(sf.history.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(sf.cutoff >= 1);
    }

    #[test]
    fn free_truncation_is_monotone() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 4)).unwrap();
        let field = ZeroField { n_sites: 9 };
        let samples = uniform_samples(9, 20);
        let cloud: Vec<Vec<f64>> = samples.states.iter().map(|s| s.angles().to_vec()).collect();
        let ladder: Vec<(usize, f64)> = (1..=4)
            .map(|n| {
                let sf = smooth_factor(&field, &lat, n, &samples, &SmoothConfig::default()).unwrap();
                (n, truncation_constant(&sf, &cloud))
            })
            .collect();
        // Free case: M_N = 2 |Λ_N|.
        for (n, m) in &ladder {
            assert!((m - 2.0 * (2 * n + 1) as f64).abs() < 1e-9);
        }
        let fit = MixingFit { k_hat: 1.0, c_hat: 1.0, alpha_hat: 2.0, rate: 1.0, rate_se: 0.0 };
        let rule = TruncationRule::new(&fit, ladder.clone());
        assert!(matches!(select_truncation(1.0, &rule), Err(Error::TruncationInfeasible { .. })));
        let rule = rule.calibrated(1.0);
        let ns: Vec<usize> = [1.0, 0.25, 1.0 / 16.0].iter().map(|&e| rule.select(e).unwrap()).collect();
        assert!(ns.windows(2).all(|w| w[1] >= w[0]), "{ns:?}");
        assert_eq!(ns[0], 1);
        // Doubling K′ never increases N.
        let mut doubled = rule.clone();
        doubled.k_prime *= 2.0;
        for e in [0.25, 1.0 / 16.0] {
            assert!(doubled.select(e).unwrap_or(0) <= rule.select(e).unwrap());
        }
        // Tiny ε saturates at the largest ladder entry.
        assert_eq!(rule.select(1e-6).unwrap(), 4);
    }
}
