//! The corrector `χ_k`: Feynman–Kac and resolvent Monte Carlo estimators,
//! finite-difference derivatives and the exact single-site solution.
//!
//! Sign convention: `χ_k` solves `Lχ_k = b_k`, so the estimators return
//! `χ_k(y) = −E_y ∫_0^∞ b_k(η_s) ds`. With it the martingale part of
//! `X_k` is `X_k(t) − χ_k(X_t)` and `χ'_{k,j} = √2 (δ_kj − ∂_jχ_k)`.

use std::f64::consts::{SQRT_2, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{Lattice, Observable};
use crate::quadrature::{integrate, periodic_trapezoid};
use crate::rng::Stream;
use crate::stats::{self, Estimate};
use crate::torus::{draw_noise, GibbsSampleSet, Integrator, MixingFit, TorusState};
use crate::trig::TrigPoly;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Antithetic path pairs per evaluation point.
    pub pairs: usize,
    /// Finite-difference step for derivatives.
    pub h: f64,
}

impl Default for FkConfig {
    fn default() -> Self {
        Self {
            horizon: 8.0,
            dt: 0.01,
            pairs: 2000,
            h: 1e-2,
        }
    }
}

impl FkConfig {
    fn validate(&self) -> Result<usize> {
        if !(self.horizon > 0.0 && self.dt > 0.0) || self.pairs == 0 {
            return Err(Error::Config(
                "Feynman–Kac needs positive horizon, step and path count".into(),
            ));
        }
        Ok((self.horizon / self.dt).round().max(1.0) as usize)
    }
}

/// Runs paths from several starts in lockstep on shared noise (each with
/// its own sign) and returns `∫ w(t) b(η_t) dt` per start, per weight
/// kernel, per site. Weights are given on the step grid.
fn lockstep_integrals(
    lattice: &Lattice,
    starts: &[(&[f64], f64)],
    dt: f64,
    kernels: &[Vec<f64>],
    stream: Stream,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = lattice.n_sites();
    let mut out = vec![vec![vec![0.0; n]; kernels.len()]; starts.len()];
    if lattice.is_free() {
        return Ok(out);
    }
    let steps = kernels[0].len() - 1;
    let mut integ = Integrator::new(lattice, dt)?;
    let mut rng = stream.rng();
    let mut xs: Vec<Vec<f64>> = starts.iter().map(|(s, _)| s.to_vec()).collect();
    let mut noise = vec![0.0; n];
    let mut signed = vec![0.0; n];
    for step in 0..=steps {
        if step < steps {
            draw_noise(&mut rng, &mut noise);
        }
        for (m, x) in xs.iter_mut().enumerate() {
            let b: &[f64] = if step < steps {
                let sign = starts[m].1;
                signed.iter_mut().zip(&noise).for_each(|(a, z)| *a = sign * z);
                integ.step_with(x, &signed);
                integ.drift_buffer()
            } else {
                integ.drift_at(x)
            };
            for (kern, acc) in kernels.iter().zip(out[m].iter_mut()) {
                let w = kern[step];
                acc.iter_mut().zip(b).for_each(|(a, bk)| *a += w * bk);
            }
        }
    }
    if out.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite drift integral".into()));
    }
    Ok(out)
}

fn trapezoid_kernel(steps: usize, dt: f64, discount: f64) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            let w = if i == 0 || i == steps { 0.5 * dt } else { dt };
            w * (-discount * i as f64 * dt).exp()
        })
        .collect()
}

/// Per-pair samples of `χ_k(y)` for every site (antithetic average).
fn chi_pair_samples(lattice: &Lattice, y: &[f64], cfg: &FkConfig, stream: Stream) -> Result<Vec<Vec<f64>>> {
    let steps = cfg.validate()?;
    let kernel = [trapezoid_kernel(steps, cfg.dt, 0.0)];
    (0..cfg.pairs)
        .into_par_iter()
        .map(|p| {
            let r = lockstep_integrals(
                lattice,
                &[(y, 1.0), (y, -1.0)],
                cfg.dt,
                &kernel,
                stream.index(p as u64),
            )?;
            Ok(r[0][0].iter().zip(&r[1][0]).map(|(a, b)| -0.5 * (a + b)).collect())
        })
        .collect()
}

/// Per-pair samples of `∂_jχ_k(y)` for every `k` from one common-random-
/// number bundle in direction `j`.
fn gradient_pair_samples(
    lattice: &Lattice,
    y: &[f64],
    j: usize,
    cfg: &FkConfig,
    stream: Stream,
) -> Result<Vec<Vec<f64>>> {
    let steps = cfg.validate()?;
    if !(cfg.h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let kernel = [trapezoid_kernel(steps, cfg.dt, 0.0)];
    let mut up = y.to_vec();
    let mut dn = y.to_vec();
    up[j] += cfg.h;
    dn[j] -= cfg.h;
    let scale = -0.25 / cfg.h;
    (0..cfg.pairs)
        .into_par_iter()
        .map(|p| {
            let r = lockstep_integrals(
                lattice,
                &[(&up, 1.0), (&dn, 1.0), (&up, -1.0), (&dn, -1.0)],
                cfg.dt,
                &kernel,
                stream.index(p as u64),
            )?;
            Ok((0..lattice.n_sites())
                .map(|k| scale * (r[0][0][k] - r[1][0][k] + r[2][0][k] - r[3][0][k]))
                .collect())
        })
        .collect()
}

fn column(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
    samples.iter().map(|row| row[k]).collect()
}

fn halves(samples: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<f64>) {
    let half = |parity: usize| -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = samples.iter().skip(parity).step_by(2).collect();
        (0..n)
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len().max(1) as f64)
            .collect()
    };
    (half(0), half(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorEstimate {
    pub site: usize,
    pub points: Vec<TorusState>,
    pub values: Vec<Estimate>,
    pub horizon: f64,
    pub dt: f64,
    pub pairs: usize,
    /// Bound on the neglected `∫_T^∞` tail, when a mixing fit was given.
    pub tail_bound: Option<f64>,
}

/// `χ_k(y)` at one point for every site, from the same paths.
pub fn chi_all(lattice: &Lattice, y: &TorusState, cfg: &FkConfig, stream: Stream) -> Result<Vec<Estimate>> {
    if y.len() != lattice.n_sites() {
        return Err(Error::Domain("point size does not match the box".into()));
    }
    let samples = chi_pair_samples(lattice, y.angles(), cfg, stream)?;
    Ok((0..lattice.n_sites())
        .map(|k| stats::mean_se(&column(&samples, k)))
        .collect())
}

/// Feynman–Kac estimate of `χ_k` at each of `points`.
pub fn chi_feynman_kac(
    lattice: &Lattice,
    k: usize,
    points: &[TorusState],
    cfg: &FkConfig,
    mixing: Option<&MixingFit>,
    stream: Stream,
) -> Result<CorrectorEstimate> {
    if k >= lattice.n_sites() {
        return Err(Error::Domain(format!("site {k} lies outside the box")));
    }
    let values = points
        .iter()
        .enumerate()
        .map(|(i, y)| Ok(chi_all(lattice, y, cfg, stream.index(i as u64))?[k]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrectorEstimate {
        site: k,
        points: points.to_vec(),
        values,
        horizon: cfg.horizon,
        dt: cfg.dt,
        pairs: cfg.pairs,
        tail_bound: mixing.map(|m| m.tail_bound(cfg.horizon, lattice.drift_norm_bound(k))),
    })
}

/// Smallest horizon whose mixing tail bound is below a third of
/// `target_se`, capped at `max_horizon`.
pub fn choose_horizon(fit: &MixingFit, drift_scale: f64, target_se: f64, max_horizon: f64) -> f64 {
    if drift_scale == 0.0 {
        return max_horizon.min(1.0);
    }
    if fit.alpha_hat <= 1.0 {
        return max_horizon;
    }
    let goal = target_se / 3.0;
    let base = goal * (fit.alpha_hat - 1.0) / (drift_scale * fit.k_hat);
    let t = base.powf(1.0 / (1.0 - fit.alpha_hat)) - fit.c_hat;
    t.clamp(1.0, max_horizon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventEstimate {
    pub lambdas: Vec<f64>,
    pub per_lambda: Vec<Estimate>,
    pub extrapolated: Estimate,
    /// Weighted residual of the linear fit in `λ`, in standard errors.
    pub fit_chi2: f64,
    pub flagged: bool,
}

/// Resolvent estimate `χ^λ_k(y) = −∫_0^∞ e^{−λτ} p_τ b_k(y) dτ` for each
/// `λ`, extrapolated linearly to `λ = 0`.
///
/// The same paths serve every `λ`, so the per-path intercept carries the
/// correlation into the standard error.
pub fn chi_resolvent(
    lattice: &Lattice,
    k: usize,
    y: &TorusState,
    lambdas: &[f64],
    cfg: &FkConfig,
    stream: Stream,
) -> Result<ResolventEstimate> {
    if lambdas.len() < 2 || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("resolvent needs at least two positive λ".into()));
    }
    if k >= lattice.n_sites() {
        return Err(Error::Domain(format!("site {k} lies outside the box")));
    }
    let steps = cfg.validate()?;
    let kernels: Vec<Vec<f64>> = lambdas
        .iter()
        .map(|&l| trapezoid_kernel(steps, cfg.dt, l))
        .collect();
    let weights = stats::slope_weights(lambdas);
    let lbar = stats::mean(lambdas);
    // Intercept weights of the least-squares line.
    let icpt: Vec<f64> = weights
        .iter()
        .map(|w| 1.0 / lambdas.len() as f64 - lbar * w)
        .collect();
    let per_path: Vec<Vec<f64>> = (0..cfg.pairs)
        .into_par_iter()
        .map(|p| {
            let r = lockstep_integrals(
                lattice,
                &[(y.angles(), 1.0), (y.angles(), -1.0)],
                cfg.dt,
                &kernels,
                stream.index(p as u64),
            )?;
            Ok((0..lambdas.len())
                .map(|li| -0.5 * (r[0][li][k] + r[1][li][k]))
                .collect())
        })
        .collect::<Result<_>>()?;
    let per_lambda: Vec<Estimate> = (0..lambdas.len())
        .map(|li| stats::mean_se(&column(&per_path, li)))
        .collect();
    let extrapolated_samples: Vec<f64> = per_path
        .iter()
        .map(|row| row.iter().zip(&icpt).map(|(v, w)| v * w).sum())
        .collect();
    let extrapolated = stats::mean_se(&extrapolated_samples);
    let fit = stats::linear_fit(
        lambdas,
        &per_lambda.iter().map(|e| e.value).collect::<Vec<_>>(),
    );
    let fit_chi2 = lambdas
        .iter()
        .zip(&per_lambda)
        .map(|(l, e)| {
            let r = e.value - fit.intercept - fit.slope * l;
            if e.se > 0.0 { (r / e.se).powi(2) } else if r.abs() < 1e-12 { 0.0 } else { f64::INFINITY }
        })
        .sum::<f64>();
    // Neighbouring λ share paths, so this is conservative.
    let flagged = fit_chi2 > 9.0 * (lambdas.len() as f64 - 1.0).max(1.0);
    Ok(ResolventEstimate {
        lambdas: lambdas.to_vec(),
        per_lambda,
        extrapolated,
        fit_chi2,
        flagged,
    })
}

/// `χ(θ) = θ − c ∫_0^θ e^{U(s)} ds` with `c = 2π / ∫_0^{2π} e^U`, by
/// adaptive quadrature.
pub fn chi_exact_1d(u: &TrigPoly, theta: f64) -> Result<f64> {
    if u.arity() != 1 {
        return Err(Error::Domain("the exact corrector needs a one-variable potential".into()));
    }
    let e = |s: f64| u.eval(&[s]).exp();
    let z = integrate(e, 0.0, TAU, 1e-13)?;
    Ok(theta - TAU / z * integrate(e, 0.0, theta, 1e-13)?)
}

/// Closed-form corrector of a single-site potential, evaluated from the
/// Fourier series of `e^U`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactCorrector1d {
    u: TrigPoly,
    c: f64,
    /// `(a_m, b_m)` of `e^U = a_0 + Σ a_m cos mθ + b_m sin mθ`, `m ≥ 1`.
    modes: Vec<(f64, f64)>,
}

impl ExactCorrector1d {
    pub fn new(u: &TrigPoly) -> Result<Self> {
        if u.arity() != 1 {
            return Err(Error::Domain("the exact corrector needs a one-variable potential".into()));
        }
        const NODES: usize = 1024;
        let vals: Vec<f64> = (0..NODES)
            .map(|i| u.eval(&[TAU * i as f64 / NODES as f64]).exp())
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("e^U overflows".into()));
        }
        let a0 = vals.iter().sum::<f64>() / NODES as f64;
        let mut modes = Vec::new();
        for m in 1..NODES / 4 {
            let (mut a, mut b) = (0.0, 0.0);
            for (i, v) in vals.iter().enumerate() {
                let t = TAU * (m * i % NODES) as f64 / NODES as f64;
                a += v * t.cos();
                b += v * t.sin();
            }
            modes.push((2.0 * a / NODES as f64, 2.0 * b / NODES as f64));
        }
        while modes
            .last()
            .is_some_and(|(a, b)| a.abs().max(b.abs()) < 1e-17 * a0)
        {
            modes.pop();
        }
        let aliasing = modes.last().map_or(0.0, |(a, b)| a.abs().max(b.abs()));
        if modes.len() >= NODES / 4 - 1 && aliasing > 1e-12 * a0 {
            return Err(Error::Numeric("Fourier series of e^U did not converge".into()));
        }
        Ok(Self {
            u: u.clone(),
            c: 1.0 / a0,
            modes,
        })
    }

    /// `c = 2π / ∫ e^U`.
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn value(&self, theta: f64) -> f64 {
        // χ(θ) = −c Σ (a_m sin mθ + b_m (1 − cos mθ)) / m.
        let (s1, c1) = theta.sin_cos();
        let (mut s, mut c) = (0.0, 1.0);
        let mut acc = 0.0;
        for (i, (a, b)) in self.modes.iter().enumerate() {
            let ns = s * c1 + c * s1;
            c = c * c1 - s * s1;
            s = ns;
            acc += (a * s + b * (1.0 - c)) / (i + 1) as f64;
        }
        -self.c * acc
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        1.0 - self.c * self.u.eval(&[theta]).exp()
    }

    /// `a(θ) = 2 (1 − χ'(θ))² = 2 c² e^{2U}`.
    pub fn local_diffusivity(&self, theta: f64) -> f64 {
        2.0 * (self.c * self.u.eval(&[theta]).exp()).powi(2)
    }

    /// `ā = 2 / (⟨e^U⟩⟨e^{−U}⟩)` with uniform averages on the circle.
    pub fn abar(&self) -> f64 {
        let n = 1024;
        let plus = periodic_trapezoid(|t| self.u.eval(&[t]).exp(), n) / TAU;
        let minus = periodic_trapezoid(|t| (-self.u.eval(&[t])).exp(), n) / TAU;
        2.0 / (plus * minus)
    }
}

/// A corrector known at arbitrary points, exactly or by Monte Carlo.
pub trait CorrectorField: Sync {
    fn tag(&self) -> &'static str;

    fn is_exact(&self) -> bool;

    /// Two independent estimates of `χ_k(y)` for every site.
    fn value_halves(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Two independent estimates of `∂_jχ_k(y)`, indexed `[k][j]`.
    fn gradient_halves(&self, y: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;
}

/// `χ ≡ 0`, the corrector of the free case.
#[derive(Clone, Copy, Debug)]
pub struct ZeroField {
    pub n_sites: usize,
}

impl CorrectorField for ZeroField {
    fn tag(&self) -> &'static str {
        "zero"
    }

    fn is_exact(&self) -> bool {
        true
    }

    fn value_halves(&self, _y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((vec![0.0; self.n_sites], vec![0.0; self.n_sites]))
    }

    fn gradient_halves(&self, _y: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let z = vec![vec![0.0; self.n_sites]; self.n_sites];
        Ok((z.clone(), z))
    }
}

/// Single-site potentials decouple, so `χ_k(y) = χ(y_k)` with the exact
/// one-variable corrector.
#[derive(Clone, Debug)]
pub struct SingleSiteField {
    pub exact: ExactCorrector1d,
    pub n_sites: usize,
}

impl SingleSiteField {
    pub fn for_lattice(lattice: &Lattice) -> Result<Self> {
        let u = lattice
            .spec()
            .single_site_function()
            .ok_or_else(|| Error::Domain("potential couples several sites".into()))?;
        Ok(Self {
            exact: ExactCorrector1d::new(&u)?,
            n_sites: lattice.n_sites(),
        })
    }
}

impl CorrectorField for SingleSiteField {
    fn tag(&self) -> &'static str {
        "exact-single-site"
    }

    fn is_exact(&self) -> bool {
        true
    }

    fn value_halves(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let v: Vec<f64> = y.iter().map(|&t| self.exact.value(t)).collect();
        Ok((v.clone(), v))
    }

    fn gradient_halves(&self, y: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut g = vec![vec![0.0; self.n_sites]; self.n_sites];
        for (k, row) in g.iter_mut().enumerate() {
            row[k] = self.exact.derivative(y[k]);
        }
        Ok((g.clone(), g))
    }
}

/// Feynman–Kac corrector evaluated on demand. Noise is keyed by the
/// evaluation point, so repeated queries agree.
#[derive(Clone, Debug)]
pub struct MonteCarloField {
    pub lattice: Lattice,
    pub config: FkConfig,
    pub stream: Stream,
}

impl CorrectorField for MonteCarloField {
    fn tag(&self) -> &'static str {
        "feynman-kac"
    }

    fn is_exact(&self) -> bool {
        false
    }

    fn value_halves(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let samples = chi_pair_samples(&self.lattice, y, &self.config, self.stream.at_point(y))?;
        Ok(halves(&samples, self.lattice.n_sites()))
    }

    fn gradient_halves(&self, y: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = self.lattice.n_sites();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![vec![0.0; n]; n];
        let base = self.stream.at_point(y);
        for j in 0..n {
            let samples = gradient_pair_samples(&self.lattice, y, j, &self.config, base.index(j as u64))?;
            let (ha, hb) = halves(&samples, n);
            for k in 0..n {
                a[k][j] = ha[k];
                b[k][j] = hb[k];
            }
        }
        Ok((a, b))
    }
}

/// Picks the exact field when one exists.
pub fn best_field(lattice: &Lattice, fallback: &FkConfig, stream: Stream) -> Result<Box<dyn CorrectorField>> {
    if lattice.is_free() {
        return Ok(Box::new(ZeroField {
            n_sites: lattice.n_sites(),
        }));
    }
    if lattice.spec().single_site_function().is_some() {
        return Ok(Box::new(SingleSiteField::for_lattice(lattice)?));
    }
    Ok(Box::new(MonteCarloField {
        lattice: lattice.clone(),
        config: fallback.clone(),
        stream,
    }))
}

/// `∂_jχ_k` for every `(k, j)` at a set of points, as two independent
/// halves so that products of derivatives can be estimated without bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorDerivatives {
    pub source: String,
    pub h: f64,
    pub points: Vec<TorusState>,
    /// `[point][k][j]`.
    pub half_a: Vec<Vec<Vec<f64>>>,
    pub half_b: Vec<Vec<Vec<f64>>>,
}

impl CorrectorDerivatives {
    pub fn from_field(field: &dyn CorrectorField, points: &[TorusState], h: f64) -> Result<Self> {
        let (half_a, half_b): (Vec<_>, Vec<_>) = points
            .iter()
            .map(|p| field.gradient_halves(p.angles()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            source: field.tag().into(),
            h,
            points: points.to_vec(),
            half_a,
            half_b,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.points.first().map_or(0, TorusState::len)
    }

    /// Average of the halves.
    pub fn grad(&self, p: usize, k: usize, j: usize) -> f64 {
        0.5 * (self.half_a[p][k][j] + self.half_b[p][k][j])
    }

    /// `χ'_{k,j} = √2 (δ_kj − ∂_jχ_k)` from one half.
    pub fn chi_prime(&self, half: usize, p: usize, k: usize, j: usize) -> f64 {
        let g = if half == 0 { &self.half_a } else { &self.half_b };
        SQRT_2 * (f64::from(u8::from(k == j)) - g[p][k][j])
    }
}

/// Monte Carlo derivatives at every point.
pub fn corrector_derivatives(
    lattice: &Lattice,
    points: &[TorusState],
    cfg: &FkConfig,
    stream: Stream,
) -> Result<CorrectorDerivatives> {
    let field = MonteCarloField {
        lattice: lattice.clone(),
        config: cfg.clone(),
        stream,
    };
    CorrectorDerivatives::from_field(&field, points, cfg.h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiPrime {
    pub value: Estimate,
    pub flagged: bool,
}

/// `χ'_{k,j}(y)` by a common-random-number central difference.
pub fn chi_prime(
    lattice: &Lattice,
    k: usize,
    j: usize,
    y: &TorusState,
    cfg: &FkConfig,
    tolerance: f64,
    stream: Stream,
) -> Result<ChiPrime> {
    let n = lattice.n_sites();
    if k >= n || j >= n {
        return Err(Error::Domain("site outside the box".into()));
    }
    let samples = gradient_pair_samples(lattice, y.angles(), j, cfg, stream)?;
    let g = stats::mean_se(&column(&samples, k));
    let delta = f64::from(u8::from(k == j));
    let value = Estimate::new(SQRT_2 * (delta - g.value), SQRT_2 * g.se);
    Ok(ChiPrime {
        value,
        flagged: value.se > tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// `Σ_j ⟨∂_jχ_k ∂_j v⟩ + ⟨b_k v⟩`.
    pub residual: Estimate,
    /// `Σ_j ⟨∂_jχ_k ∂_j v⟩ − ⟨∂_k v⟩`.
    pub alternate: Estimate,
}

impl WeakResidual {
    pub fn consistent(&self, z: f64) -> bool {
        self.residual.z_score(0.0).abs() <= z && self.alternate.z_score(0.0).abs() <= z
    }
}

fn check_points(samples: &GibbsSampleSet, derivs: &CorrectorDerivatives) -> Result<()> {
    if samples.states != derivs.points {
        return Err(Error::Domain("derivatives were not evaluated at the sample points".into()));
    }
    Ok(())
}

/// Monte Carlo residual of the weak cell equation against test function `v`.
pub fn weak_equation_residual(
    lattice: &Lattice,
    k: usize,
    v: &Observable,
    samples: &GibbsSampleSet,
    derivs: &CorrectorDerivatives,
) -> Result<WeakResidual> {
    check_points(samples, derivs)?;
    let mut res = Vec::with_capacity(samples.len());
    let mut alt = Vec::with_capacity(samples.len());
    for (p, s) in samples.states.iter().enumerate() {
        let y = s.angles();
        let mut dirichlet = 0.0;
        for &j in &v.sites {
            dirichlet += derivs.grad(p, k, j) * v.partial_at(j, y);
        }
        res.push(dirichlet + lattice.drift_at(k, y) * v.eval(y));
        alt.push(dirichlet - v.partial_at(k, y));
    }
    Ok(WeakResidual {
        residual: samples.estimate_values(&res),
        alternate: samples.estimate_values(&alt),
    })
}

/// The Dirichlet-energy ceiling `ℰ(χ_k, χ_k) ≤ 5/4`.
pub const ENERGY_BOUND: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub site: usize,
    pub energy: Estimate,
    pub within_bound: bool,
}

/// `Σ_j ⟨(∂_jχ_k)²⟩`, each square formed from independent halves.
pub fn energy_estimate(
    k: usize,
    derivs: &CorrectorDerivatives,
    samples: &GibbsSampleSet,
) -> Result<EnergyReport> {
    check_points(samples, derivs)?;
    let vals: Vec<f64> = (0..samples.len())
        .map(|p| {
            derivs.half_a[p][k]
                .iter()
                .zip(&derivs.half_b[p][k])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let energy = samples.estimate_values(&vals);
    Ok(EnergyReport {
        site: k,
        energy,
        within_bound: energy.value <= ENERGY_BOUND + 3.0 * energy.se,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::potential::{BoxGeometry, PotentialSpec};
    use crate::presets;

    fn bessel_i(nu: i32, x: f64) -> f64 {
        integrate(|t| (x * t.cos()).exp() * (f64::from(nu) * t).cos(), 0.0, PI, 1e-14).unwrap() / PI
    }

    #[test]
    fn exact_corrector_examples() {
        let zero = TrigPoly::zero(1);
        assert_eq!(chi_exact_1d(&zero, 1.3).unwrap(), 0.0);
        let u = TrigPoly::cosine(&[1], 1.0);
        assert!(chi_exact_1d(&u, PI).unwrap().abs() < 1e-12);
        let i0 = bessel_i(0, 1.0);
        let quarter = integrate(|s| s.cos().exp(), 0.0, PI / 2.0, 1e-14).unwrap();
        assert!((chi_exact_1d(&u, PI / 2.0).unwrap() - (PI / 2.0 - quarter / i0)).abs() < 1e-12);
        // χ is odd for an even potential.
        assert!((chi_exact_1d(&u, -0.7).unwrap() + chi_exact_1d(&u, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fourier_corrector_matches_quadrature() {
        for u in [
            TrigPoly::cosine(&[1], 1.0),
            TrigPoly::cosine(&[1], 0.5).add(&TrigPoly::sine(&[2], 0.8)),
        ] {
            let ex = ExactCorrector1d::new(&u).unwrap();
            for i in 0..16 {
                let t = -3.0 + 0.45 * i as f64;
                let q = chi_exact_1d(&u, t).unwrap();
                assert!((ex.value(t) - q).abs() < 1e-11, "{t}: {} vs {q}", ex.value(t));
                let fd = (ex.value(t + 1e-5) - ex.value(t - 1e-5)) / 2e-5;
                assert!((fd - ex.derivative(t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_abar_is_two_over_i0_squared() {
        let ex = ExactCorrector1d::new(&TrigPoly::cosine(&[1], 1.0)).unwrap();
        let i0 = bessel_i(0, 1.0);
        assert!((ex.abar() - 2.0 / (i0 * i0)).abs() < 1e-12);
        assert!((ex.abar() - 1.24772).abs() < 1e-5);
        assert!((ex.c() - 1.0 / i0).abs() < 1e-12);
    }

    #[test]
    fn free_case_corrector_vanishes() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 1)).unwrap();
        let y = TorusState::constant(3, 0.4);
        let cfg = FkConfig { pairs: 4, ..FkConfig::default() };
        for e in chi_all(&lat, &y, &cfg, Stream::root(1)).unwrap() {
            assert_eq!(e, Estimate::exact(0.0));
        }
        let cp = chi_prime(&lat, 1, 1, &y, &cfg, 0.1, Stream::root(1)).unwrap();
        assert_eq!(cp.value.value, SQRT_2);
        let cp = chi_prime(&lat, 1, 0, &y, &cfg, 0.1, Stream::root(1)).unwrap();
        assert_eq!(cp.value.value, 0.0);
        let r = chi_resolvent(&lat, 0, &y, &[0.2, 0.1], &cfg, Stream::root(1)).unwrap();
        assert_eq!(r.extrapolated.value, 0.0);
    }

    #[test]
    fn feynman_kac_matches_exact_at_half_pi() {
        let lat = Lattice::new(&presets::cosine_single_site(1, 1.0), BoxGeometry::new(1, 1)).unwrap();
        let y = TorusState::new(vec![0.0, PI / 2.0, 0.0]).unwrap();
        let cfg = FkConfig {
            horizon: 6.0,
            dt: 0.01,
            pairs: 1500,
            h: 1e-2,
        };
        let est = chi_all(&lat, &y, &cfg, Stream::root(11)).unwrap()[1];
        let exact = chi_exact_1d(&TrigPoly::cosine(&[1], 1.0), PI / 2.0).unwrap();
        assert!(est.within(exact, 4.0), "{est:?} vs {exact}");
        assert!(est.se < 0.05);
    }

    #[test]
    fn halves_average_to_mean() {
        let s = vec![vec![1.0], vec![3.0], vec![5.0], vec![7.0]];
        assert_eq!(halves(&s, 1), (vec![3.0], vec![5.0]));
    }

    #[test]
    fn free_weak_residual_and_energy_are_exact_zero() {
        let lat = Lattice::new(&PotentialSpec::free(1), BoxGeometry::new(1, 1)).unwrap();
        let samples = GibbsSampleSet {
            states: (0..20).map(|i| TorusState::constant(3, 0.3 * i as f64)).collect(),
            chains: 2,
            burn_in: 0,
            thin: 0,
            acceptance: 1.0,
            seed: 0,
        };
        let field = ZeroField { n_sites: 3 };
        let d = CorrectorDerivatives::from_field(&field, &samples.states, 0.0).unwrap();
        let e = energy_estimate(1, &d, &samples).unwrap();
        assert_eq!(e.energy.value, 0.0);
        let v = Observable::new(vec![1], TrigPoly::sine(&[1], 1.0)).unwrap();
        let w = weak_equation_residual(&lat, 1, &v, &samples, &d).unwrap();
        assert_eq!(w.residual.value, 0.0);
    }
}
