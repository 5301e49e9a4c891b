//! Quotient dynamics on the box torus: Euler–Maruyama steps, the Gibbs
//! sampler, the DLR kernel check, mixing curves and path unwinding.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{Lattice, Observable};
use crate::rng::Stream;
use crate::stats::{self, Estimate, LinearFit};

/// Reduces an angle to `[0, 2π)`.
#[inline]
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Representative of `x` in `(-π, π]`.
#[inline]
pub fn minimal_angle(x: f64) -> f64 {
    let r = wrap_angle(x);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusState {
    angles: Vec<f64>,
}

impl TorusState {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite angle".into()));
        }
        Ok(Self {
            angles: angles.into_iter().map(wrap_angle).collect(),
        })
    }

    pub fn constant(n_sites: usize, angle: f64) -> Self {
        Self {
            angles: vec![wrap_angle(angle); n_sites],
        }
    }

    pub fn uniform(n_sites: usize, rng: &mut impl Rng) -> Self {
        Self {
            angles: (0..n_sites).map(|_| rng.random_range(0.0..TAU)).collect(),
        }
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// The chart `Θ`: the representative in `[0, 2π)^Λ` as a lattice state.
    pub fn chart(&self) -> LatticeState {
        LatticeState {
            values: self.angles.clone(),
        }
    }

    pub fn with_angle(&self, site: usize, angle: f64) -> Self {
        let mut s = self.clone();
        s.angles[site] = wrap_angle(angle);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    pub values: Vec<f64>,
}

impl LatticeState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite lattice value".into()));
        }
        Ok(Self { values })
    }

    /// The projection `Φ` onto the torus.
    pub fn project(&self) -> TorusState {
        TorusState {
            angles: self.values.iter().map(|&v| wrap_angle(v)).collect(),
        }
    }
}

/// Euler–Maruyama integrator for `dX = √2 dB + b(X) dt` on a box.
///
/// Works on unreduced values; callers reduce when they want the
/// quotient state. Since `b` is periodic both views share one step.
pub struct Integrator<'a> {
    lattice: &'a Lattice,
    dt: f64,
    scale: f64,
    drift: Vec<f64>,
}

impl<'a> Integrator<'a> {
    pub fn new(lattice: &'a Lattice, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        Ok(Self {
            lattice,
            dt,
            scale: (2.0 * dt).sqrt(),
            drift: vec![0.0; lattice.n_sites()],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn lattice(&self) -> &Lattice {
        self.lattice
    }

    /// One step with explicit standard-normal noise.
    #[inline]
    pub fn step_with(&mut self, x: &mut [f64], noise: &[f64]) {
        if self.lattice.is_free() {
            for (xi, z) in x.iter_mut().zip(noise) {
                *xi += self.scale * z;
            }
            return;
        }
        self.lattice.drift_all(x, &mut self.drift);
        for ((xi, b), z) in x.iter_mut().zip(&self.drift).zip(noise) {
            *xi += b * self.dt + self.scale * z;
        }
    }

    /// The drift at `x` from the last call to [`Integrator::step_with`]
    /// or [`Integrator::drift_at`].
    pub fn drift_buffer(&self) -> &[f64] {
        &self.drift
    }

    pub fn drift_at(&mut self, x: &[f64]) -> &[f64] {
        self.lattice.drift_all(x, &mut self.drift);
        &self.drift
    }
}

/// Fills `noise` with standard normals.
#[inline]
pub fn draw_noise(rng: &mut impl Rng, noise: &mut [f64]) {
    for z in noise.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
}

/// One Euler–Maruyama step of the quotient process, reduced mod 2π.
pub fn step_quotient(
    lattice: &Lattice,
    state: &TorusState,
    dt: f64,
    noise: &[f64],
) -> Result<TorusState> {
    if noise.len() != state.len() || state.len() != lattice.n_sites() {
        return Err(Error::Domain(
            "state, noise and box must have the same number of sites".into(),
        ));
    }
    if noise.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite noise".into()));
    }
    let mut integ = Integrator::new(lattice, dt)?;
    let mut x = state.angles.clone();
    integ.step_with(&mut x, noise);
    TorusState::new(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub samples_per_chain: usize,
    /// Langevin proposal step `h`.
    pub step: f64,
    /// Sweeps without a single acceptance before giving up.
    pub stall_window: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            chains: 8,
            burn_in: 200,
            thin: 2,
            samples_per_chain: 250,
            step: 0.6,
            stall_window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsSampleSet {
    /// Chain-major: the first `samples_per_chain` states come from chain 0.
    pub states: Vec<TorusState>,
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub acceptance: f64,
    pub seed: u64,
}

impl GibbsSampleSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Batch-means estimate of `⟨f⟩` with one batch per chain (at least
    /// ten batches).
    pub fn estimate(&self, f: impl Fn(&TorusState) -> f64) -> Estimate {
        let values: Vec<f64> = self.states.iter().map(f).collect();
        self.estimate_values(&values)
    }

    pub fn estimate_values(&self, values: &[f64]) -> Estimate {
        stats::batch_means(values, self.chains.max(10).min(values.len().max(1)))
    }
}

/// Proposal log-density ratio term `-(to - from - h b(from))² / 4h`.
#[inline]
fn log_q(to: f64, from: f64, b_from: f64, h: f64) -> f64 {
    let d = to - from - h * b_from;
    -d * d / (4.0 * h)
}

/// Metropolis-adjusted Langevin sweeps, one site at a time, targeting
/// the density `∝ exp(-Σ J_Λ)` on the box torus.
pub fn gibbs_sample(lattice: &Lattice, config: &GibbsConfig, stream: Stream) -> Result<GibbsSampleSet> {
    if config.chains == 0 || config.samples_per_chain == 0 {
        return Err(Error::Config("need at least one chain and one sample".into()));
    }
    if !(config.step > 0.0) {
        return Err(Error::Config("proposal step must be positive".into()));
    }
    let n = lattice.n_sites();
    let h = config.step;
    let results: Vec<Result<(Vec<TorusState>, u64, u64)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.child("gibbs").index(c as u64).rng();
            let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
            let mut out = Vec::with_capacity(config.samples_per_chain);
            let (mut accepted, mut proposed) = (0u64, 0u64);
            let mut idle = 0usize;
            let total = config.burn_in + config.samples_per_chain * (config.thin + 1);
            for sweep in 0..total {
                let mut any = false;
                for i in 0..n {
                    let old = x[i];
                    let (e_old, b_old) = lattice.site_energy_and_drift(i, &x);
                    let z: f64 = rng.sample(StandardNormal);
                    let prop = old + h * b_old + (2.0 * h).sqrt() * z;
                    x[i] = prop;
                    let (e_new, b_new) = lattice.site_energy_and_drift(i, &x);
                    let log_a = -(e_new - e_old) + log_q(old, prop, b_new, h)
                        - log_q(prop, old, b_old, h);
                    proposed += 1;
                    if log_a >= 0.0 || rng.random::<f64>().ln() < log_a {
                        x[i] = wrap_angle(prop);
                        accepted += 1;
                        any = true;
                    } else {
                        x[i] = old;
                    }
                }
                idle = if any { 0 } else { idle + 1 };
                if idle >= config.stall_window.max(1) {
                    return Err(Error::SamplerStall {
                        window: config.stall_window,
                    });
                }
                if sweep >= config.burn_in && (sweep - config.burn_in) % (config.thin + 1) == config.thin {
                    out.push(TorusState { angles: x.clone() });
                }
            }
            Ok((out, accepted, proposed))
        })
        .collect();
    let mut states = Vec::with_capacity(config.chains * config.samples_per_chain);
    let (mut acc, mut prop) = (0u64, 0u64);
    for r in results {
        let (s, a, p) = r?;
        states.extend(s);
        acc += a;
        prop += p;
    }
    let acceptance = if prop == 0 { 1.0 } else { acc as f64 / prop as f64 };
    if acceptance <= 0.0 {
        return Err(Error::SamplerStall {
            window: config.stall_window,
        });
    }
    Ok(GibbsSampleSet {
        states,
        chains: config.chains,
        burn_in: config.burn_in,
        thin: config.thin,
        acceptance,
        seed: stream.key(),
    })
}

/// Points per angle for the DLR kernel quadrature.
const DLR_NODES: usize = 64;

/// The local Gibbs kernel `[𝔼^Λ φ](y)` for `|Λ| ≤ 2`.
///
/// The integrand is a trigonometric polynomial times the exponential of
/// one, so the periodic trapezoid rule converges geometrically; the
/// result is accepted when doubling the node count changes it by less
/// than `1e-10`.
pub fn gibbs_kernel(lattice: &Lattice, region: &[usize], phi: &Observable, y: &[f64]) -> Result<f64> {
    if region.is_empty() || region.len() > 2 {
        return Err(Error::Domain("DLR kernel supports one or two sites".into()));
    }
    let eval = |nodes: usize| -> f64 {
        let mut x = y.to_vec();
        let step = TAU / nodes as f64;
        let shift = lattice.local_energy_indices(region, y);
        let (mut num, mut den) = (0.0, 0.0);
        let inner = if region.len() == 2 { nodes } else { 1 };
        for a in 0..nodes {
            x[region[0]] = a as f64 * step;
            for b in 0..inner {
                if region.len() == 2 {
                    x[region[1]] = b as f64 * step;
                }
                let w = (shift - lattice.local_energy_indices(region, &x)).exp();
                num += w * phi.eval(&x);
                den += w;
            }
        }
        num / den
    };
    let coarse = eval(DLR_NODES);
    let fine = eval(2 * DLR_NODES);
    if !fine.is_finite() || (fine - coarse).abs() > 1e-10 * (1.0 + fine.abs()) {
        return Err(Error::Numeric(format!(
            "DLR kernel quadrature did not settle ({coarse} vs {fine})"
        )));
    }
    Ok(fine)
}

/// Mean of `[𝔼^Λ φ](y) − φ(y)` over the samples; the DLR equations
/// predict zero.
pub fn dlr_check(
    lattice: &Lattice,
    samples: &GibbsSampleSet,
    region: &[usize],
    phi: &Observable,
) -> Result<Estimate> {
    let diffs = samples
        .states
        .iter()
        .map(|s| Ok(gibbs_kernel(lattice, region, phi, s.angles())? - phi.eval(s.angles())))
        .collect::<Result<Vec<_>>>()?;
    Ok(samples.estimate_values(&diffs))
}

/// `Lf(y) = Σ_k ∂²_k f + b_k ∂_k f` with exact derivatives.
pub fn generator_apply(lattice: &Lattice, f: &Observable, y: &[f64]) -> Result<f64> {
    if y.len() != lattice.n_sites() {
        return Err(Error::Domain("configuration size does not match the box".into()));
    }
    if let Some(&s) = f.sites.iter().find(|&&s| s >= lattice.n_sites()) {
        return Err(Error::Domain(format!("observable site {s} lies outside the box")));
    }
    let local: Vec<f64> = f.sites.iter().map(|&s| y[s]).collect();
    let mut total = 0.0;
    for (slot, &site) in f.sites.iter().enumerate() {
        let d1 = f.poly.partial(slot);
        let d2 = d1.partial(slot);
        total += d2.eval(&local) + lattice.drift_at(site, y) * d1.eval(&local);
    }
    Ok(total)
}

/// Unwinds a sampled torus path into the continuous real-valued path
/// starting at `x0`.
pub fn continuous_lift(path: &[TorusState], x0: &LatticeState) -> Result<Vec<LatticeState>> {
    let Some(first) = path.first() else {
        return Ok(Vec::new());
    };
    if x0.values.len() != first.len() {
        return Err(Error::Domain("initial state size does not match the path".into()));
    }
    for (site, (&v, &a)) in x0.values.iter().zip(first.angles()).enumerate() {
        if minimal_angle(v - a).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "initial state does not project onto the first angle at site {site}"
            )));
        }
    }
    let mut out = Vec::with_capacity(path.len());
    let mut cur = x0.values.clone();
    out.push(LatticeState { values: cur.clone() });
    for (step, pair) in path.windows(2).enumerate() {
        for (site, (a, b)) in pair[0].angles().iter().zip(pair[1].angles()).enumerate() {
            let inc = minimal_angle(b - a);
            if inc.abs() >= PI - 1e-12 {
                return Err(Error::AmbiguousWinding {
                    step: step + 1,
                    site,
                    increment: inc,
                    limit: PI,
                });
            }
            cur[site] += inc;
        }
        out.push(LatticeState { values: cur.clone() });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    pub times: Vec<f64>,
    pub dt: f64,
    /// Antithetic pairs per start point.
    pub pairs_per_start: usize,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            times: (1..=8).map(|i| 0.25 * i as f64).collect(),
            dt: 0.01,
            pairs_per_start: 1000,
        }
    }
}

/// Power-law and exponential fits of a sup-gap curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingFit {
    /// `K` in `K (c + t)^{-α}`, normalised by the observable's norm bound.
    pub k_hat: f64,
    pub c_hat: f64,
    pub alpha_hat: f64,
    /// Rate `r` of the exponential fit `A e^{-r t}`.
    pub rate: f64,
    pub rate_se: f64,
}

impl MixingFit {
    /// `∫_T^∞ K (c + s)^{-α} ds`, infinite when `α ≤ 1`.
    pub fn tail_bound(&self, horizon: f64, scale: f64) -> f64 {
        if self.alpha_hat <= 1.0 {
            return f64::INFINITY;
        }
        scale * self.k_hat * (self.c_hat + horizon).powf(1.0 - self.alpha_hat) / (self.alpha_hat - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingCurve {
    pub times: Vec<f64>,
    pub raw_gap: Vec<f64>,
    /// Running minimum of `raw_gap`.
    pub sup_gap: Vec<f64>,
    pub se: Vec<f64>,
    /// `true` where the gap is below twice its standard error.
    pub inconclusive: Vec<bool>,
    pub mean: f64,
    pub fit: Option<MixingFit>,
}

/// Estimates `sup_y |p_t φ(y) − ⟨φ⟩|` over a finite start set.
///
/// The sup over a finite grid is a lower bound for the true sup gap.
pub fn mixing_curve(
    lattice: &Lattice,
    phi: &Observable,
    mean: f64,
    starts: &[TorusState],
    config: &MixingConfig,
    stream: Stream,
) -> Result<MixingCurve> {
    if starts.is_empty() || config.times.is_empty() || config.pairs_per_start == 0 {
        return Err(Error::Config("mixing curve needs starts, times and paths".into()));
    }
    if config.times.windows(2).any(|w| w[1] <= w[0]) || config.times[0] <= 0.0 {
        return Err(Error::Config("mixing times must be positive and increasing".into()));
    }
    let n = lattice.n_sites();
    let dt = config.dt;
    let marks: Vec<usize> = config
        .times
        .iter()
        .map(|t| (t / dt).round().max(1.0) as usize)
        .collect();
    let per_start: Vec<Vec<Estimate>> = starts
        .par_iter()
        .enumerate()
        .map(|(si, start)| {
            let stream = stream.child("mixing").index(si as u64);
            let mut values = vec![Vec::with_capacity(config.pairs_per_start); marks.len()];
            let mut integ = Integrator::new(lattice, dt)?;
            let mut noise = vec![0.0; n];
            let mut neg = vec![0.0; n];
            for p in 0..config.pairs_per_start {
                let mut rng = stream.index(p as u64).rng();
                let mut xa = start.angles().to_vec();
                let mut xb = xa.clone();
                let mut m = 0;
                for step in 1..=*marks.last().unwrap() {
                    draw_noise(&mut rng, &mut noise);
                    neg.iter_mut().zip(&noise).for_each(|(a, b)| *a = -b);
                    integ.step_with(&mut xa, &noise);
                    integ.step_with(&mut xb, &neg);
                    while m < marks.len() && marks[m] == step {
                        values[m].push(0.5 * (phi.eval(&xa) + phi.eval(&xb)));
                        m += 1;
                    }
                }
            }
            Ok(values.iter().map(|v| stats::mean_se(v)).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut raw_gap = Vec::with_capacity(marks.len());
    let mut se = Vec::with_capacity(marks.len());
    for ti in 0..marks.len() {
        let (gap, err) = per_start
            .iter()
            .map(|row| ((row[ti].value - mean).abs(), row[ti].se))
            .fold((0.0, 0.0), |acc, g| if g.0 > acc.0 { g } else { acc });
        raw_gap.push(gap);
        se.push(err);
    }
    let mut sup_gap = raw_gap.clone();
    for i in 1..sup_gap.len() {
        sup_gap[i] = sup_gap[i].min(sup_gap[i - 1]);
    }
    let inconclusive: Vec<bool> = raw_gap.iter().zip(&se).map(|(g, s)| *g < 2.0 * s).collect();
    let fit = fit_mixing(&config.times, &raw_gap, &se, &inconclusive, phi.norm_bound());
    Ok(MixingCurve {
        times: config.times.clone(),
        raw_gap,
        sup_gap,
        se,
        inconclusive,
        mean,
        fit,
    })
}

fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> LinearFit {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    LinearFit {
        slope,
        intercept,
        // Weights are inverse variances, so the scale is already absolute;
        // inflate by the reduced chi-square when the fit is poor.
        slope_se: (1.0 / sxx).sqrt() * (rss / dof).sqrt().max(1.0),
        residual_rms: (rss / sw).sqrt(),
    }
}

/// Exponential and power-law fits on the conclusive part of the curve.
pub fn fit_mixing(
    times: &[f64],
    gap: &[f64],
    se: &[f64],
    inconclusive: &[bool],
    norm: f64,
) -> Option<MixingFit> {
    let keep: Vec<usize> = (0..times.len())
        .filter(|&i| !inconclusive[i] && gap[i] > 0.0)
        .collect();
    if keep.len() < 3 {
        return None;
    }
    let t: Vec<f64> = keep.iter().map(|&i| times[i]).collect();
    let lg: Vec<f64> = keep.iter().map(|&i| gap[i].ln()).collect();
    // Delta method: Var(log g) ≈ (se/g)².
    let w: Vec<f64> = keep
        .iter()
        .map(|&i| (gap[i] / se[i].max(1e-12 * gap[i])).powi(2))
        .collect();
    let exp_fit = weighted_fit(&t, &lg, &w);

    let mut best: Option<(f64, f64, LinearFit)> = None;
    for c in [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let lt: Vec<f64> = t.iter().map(|s| (c + s).ln()).collect();
        let f = weighted_fit(&lt, &lg, &w);
        if best.as_ref().is_none_or(|b| f.residual_rms < b.1) {
            best = Some((c, f.residual_rms, f));
        }
    }
    let (c_hat, _, pf) = best?;
    Some(MixingFit {
        k_hat: pf.intercept.exp() / norm.max(f64::MIN_POSITIVE),
        c_hat,
        alpha_hat: -pf.slope,
        rate: -exp_fit.slope,
        rate_se: exp_fit.slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{BoxGeometry, PotentialSpec};
    use crate::presets;
    use crate::quadrature::integrate;
    use crate::trig::TrigPoly;

    fn lattice(spec: &PotentialSpec, half: usize) -> Lattice {
        Lattice::new(spec, BoxGeometry::new(spec.dimension(), half)).unwrap()
    }

    #[test]
    fn free_step_without_noise_is_identity() {
        let lat = lattice(&PotentialSpec::free(1), 1);
        let s = TorusState::new(vec![0.3, 1.0, 6.0]).unwrap();
        assert_eq!(step_quotient(&lat, &s, 0.01, &[0.0; 3]).unwrap(), s);
    }

    #[test]
    fn cosine_step_follows_drift() {
        let lat = lattice(&presets::cosine_single_site(1, 1.0), 1);
        let s = TorusState::new(vec![0.0, PI / 2.0, 0.0]).unwrap();
        let next = step_quotient(&lat, &s, 0.01, &[0.0; 3]).unwrap();
        assert!((next.angles()[1] - (PI / 2.0 + 0.01)).abs() < 1e-15);
        assert!(step_quotient(&lat, &s, 0.01, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn angles_stay_in_range() {
        let s = TorusState::new(vec![-1e-18, TAU, 7.0, -3.0]).unwrap();
        assert!(s.angles().iter().all(|a| (0.0..TAU).contains(a)));
    }

    #[test]
    fn generator_examples() {
        let lat = lattice(&PotentialSpec::free(1), 1);
        let f = Observable::cos_at(1, 1.0);
        let y = [0.0, 0.7, 0.0];
        assert!((generator_apply(&lat, &f, &y).unwrap() + 0.7f64.cos()).abs() < 1e-15);
        let lat = lattice(&presets::cosine_single_site(1, 1.0), 1);
        assert!((generator_apply(&lat, &f, &[0.0; 3]).unwrap() + 1.0).abs() < 1e-15);
        let outside = Observable::cos_at(5, 1.0);
        assert!(generator_apply(&lat, &outside, &[0.0; 3]).is_err());
    }

    #[test]
    fn lift_examples() {
        let constant = vec![TorusState::constant(2, 1.0); 5];
        let x0 = LatticeState::new(vec![1.0 + TAU, 1.0]).unwrap();
        let lifted = continuous_lift(&constant, &x0).unwrap();
        assert!(lifted.iter().all(|l| l == &x0));

        let winding: Vec<TorusState> = (0..=100)
            .map(|i| TorusState::new(vec![TAU * i as f64 / 100.0]).unwrap())
            .collect();
        let lifted = continuous_lift(&winding, &LatticeState::new(vec![0.0]).unwrap()).unwrap();
        assert!((lifted[100].values[0] - TAU).abs() < 1e-12);
        for (l, t) in lifted.iter().zip(&winding) {
            assert!(minimal_angle(l.project().angles()[0] - t.angles()[0]).abs() < 1e-12);
        }

        let jump = vec![TorusState::constant(1, 0.0), TorusState::constant(1, PI)];
        let err = continuous_lift(&jump, &LatticeState::new(vec![0.0]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::AmbiguousWinding { .. }));
    }

    #[test]
    fn dlr_kernel_matches_quadrature() {
        let lat = lattice(&presets::cosine_single_site(1, 1.0), 1);
        let phi = Observable::cos_at(1, 1.0);
        let got = gibbs_kernel(&lat, &[1], &phi, &[0.0, 0.0, 0.0]).unwrap();
        let num = integrate(|t| t.cos() * (-t.cos()).exp(), 0.0, TAU, 1e-13).unwrap();
        let den = integrate(|t| (-t.cos()).exp(), 0.0, TAU, 1e-13).unwrap();
        assert!((got - num / den).abs() < 1e-12);
        // Two-site kernel on a free box averages each angle away.
        let free = lattice(&PotentialSpec::free(1), 1);
        let pair = Observable::new(vec![0, 1], TrigPoly::cosine(&[1, -1], 1.0)).unwrap();
        assert!(gibbs_kernel(&free, &[0, 1], &pair, &[0.3, 0.2, 0.1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gibbs_free_case_is_uniform_and_always_accepts() {
        let lat = lattice(&PotentialSpec::free(1), 1);
        let cfg = GibbsConfig {
            chains: 4,
            samples_per_chain: 500,
            ..GibbsConfig::default()
        };
        let set = gibbs_sample(&lat, &cfg, Stream::root(5)).unwrap();
        assert_eq!(set.acceptance, 1.0);
        assert_eq!(set.len(), 2000);
        assert!(set.estimate(|s| s.angles()[0].cos()).within(0.0, 4.0));
    }

    #[test]
    fn gibbs_is_reproducible() {
        let lat = lattice(&presets::nearest_neighbor(1, 0.2), 2);
        let cfg = GibbsConfig {
            chains: 2,
            samples_per_chain: 20,
            burn_in: 10,
            ..GibbsConfig::default()
        };
        let a = gibbs_sample(&lat, &cfg, Stream::root(9)).unwrap();
        let b = gibbs_sample(&lat, &cfg, Stream::root(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_fit_recovers_exponential() {
        let times: Vec<f64> = (1..=6).map(|i| i as f64 * 0.5).collect();
        let gap: Vec<f64> = times.iter().map(|t| (-0.7 * t).exp()).collect();
        let se = vec![1e-4; 6];
        let fit = fit_mixing(&times, &gap, &se, &[false; 6], 1.0).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-9);
        assert!(fit.alpha_hat > 0.0);
    }
}
