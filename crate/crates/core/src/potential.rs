//! Shift-generated finite-range interactions on a periodic box.
//!
//! A [`PotentialSpec`] stores one representative per translation class
//! of interaction terms. [`Lattice`] instantiates every translate on a
//! [`BoxGeometry`] once, so drifts and local energies are plain sums over
//! precomputed site lists.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::trig::{TrigPoly, TrigTerm};

/// Largest number of sites a single interaction term may couple.
pub const MAX_SUPPORT: usize = 16;

/// A trigonometric polynomial attached to an ordered list of lattice
/// offsets: variable `i` of `poly` is the coordinate at `sites[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFunction {
    pub sites: Vec<Vec<i32>>,
    pub poly: TrigPoly,
}

impl LocalFunction {
    pub fn new(sites: Vec<Vec<i32>>, poly: TrigPoly) -> Result<Self> {
        if poly.arity() != sites.len() {
            return Err(Error::Config(format!(
                "function has {} variables but {} sites were declared",
                poly.arity(),
                sites.len()
            )));
        }
        if sites.len() > MAX_SUPPORT {
            return Err(Error::Config(format!(
                "support of {} sites exceeds the limit of {MAX_SUPPORT}",
                sites.len()
            )));
        }
        let distinct: BTreeSet<&Vec<i32>> = sites.iter().collect();
        if distinct.len() != sites.len() {
            return Err(Error::Config("support offsets must be distinct".into()));
        }
        Ok(Self { sites, poly })
    }

    /// Largest sup-norm distance between two support sites.
    pub fn diameter(&self) -> u32 {
        let mut d = 0;
        for a in &self.sites {
            for b in &self.sites {
                let dist = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).unsigned_abs())
                    .max()
                    .unwrap_or(0);
                d = d.max(dist);
            }
        }
        d
    }

    pub fn shifted(&self, by: &[i32]) -> Self {
        Self {
            sites: self
                .sites
                .iter()
                .map(|s| s.iter().zip(by).map(|(a, b)| a + b).collect())
                .collect(),
            poly: self.poly.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSpec {
    dimension: usize,
    range: u32,
    terms: Vec<LocalFunction>,
}

impl PotentialSpec {
    /// Builds a spec. Structural checks only: every support must contain
    /// the origin and match the dimension. The finite-range axiom is
    /// checked by [`verify_axioms`] and enforced by [`Lattice::new`].
    pub fn new(dimension: usize, range: u32, terms: Vec<LocalFunction>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if range == 0 {
            return Err(Error::Config("range must be a positive integer".into()));
        }
        for (i, t) in terms.iter().enumerate() {
            if t.sites.iter().any(|s| s.len() != dimension) {
                return Err(Error::Config(format!(
                    "term {i}: offsets must have {dimension} components"
                )));
            }
            if !t.sites.iter().any(|s| s.iter().all(|&c| c == 0)) {
                return Err(Error::Config(format!(
                    "term {i}: support must contain the origin"
                )));
            }
        }
        Ok(Self {
            dimension,
            range,
            terms,
        })
    }

    pub fn free(dimension: usize) -> Self {
        Self::new(dimension, 1, Vec::new()).expect("valid free spec")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    pub fn terms(&self) -> &[LocalFunction] {
        &self.terms
    }

    pub fn is_free(&self) -> bool {
        self.terms.iter().all(|t| t.poly.is_zero())
    }

    /// The summed single-site function if every term couples exactly one
    /// site, `None` otherwise.
    pub fn single_site_function(&self) -> Option<TrigPoly> {
        let mut acc = TrigPoly::zero(1);
        for t in &self.terms {
            if t.sites.len() != 1 {
                return None;
            }
            acc = acc.add(&t.poly);
        }
        Some(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub dimension: usize,
    pub half_width: usize,
    #[serde(default = "default_periodic")]
    pub periodic: bool,
}

fn default_periodic() -> bool {
    true
}

impl BoxGeometry {
    pub fn new(dimension: usize, half_width: usize) -> Self {
        Self {
            dimension,
            half_width,
            periodic: true,
        }
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn n_sites(&self) -> usize {
        self.side().pow(self.dimension as u32)
    }

    /// Index of an in-box coordinate, `None` outside `[-N, N]^d`.
    pub fn index_of(&self, coords: &[i32]) -> Option<usize> {
        if coords.len() != self.dimension {
            return None;
        }
        let n = self.half_width as i32;
        let side = self.side();
        let mut idx = 0;
        for &c in coords.iter().rev() {
            if c < -n || c > n {
                return None;
            }
            idx = idx * side + (c + n) as usize;
        }
        Some(idx)
    }

    /// Index after reducing each coordinate modulo the box side.
    pub fn wrapped_index(&self, coords: &[i32]) -> usize {
        let n = self.half_width as i32;
        let side = self.side() as i32;
        coords
            .iter()
            .rev()
            .fold(0usize, |idx, &c| {
                idx * side as usize + (c + n).rem_euclid(side) as usize
            })
    }

    pub fn coords(&self, index: usize) -> Vec<i32> {
        let side = self.side();
        let n = self.half_width as i32;
        let mut rem = index;
        (0..self.dimension)
            .map(|_| {
                let c = (rem % side) as i32 - n;
                rem /= side;
                c
            })
            .collect()
    }

    /// `|k|`: sup-norm distance of a site from the box centre.
    pub fn norm(&self, index: usize) -> u32 {
        self.coords(index)
            .iter()
            .map(|c| c.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    pub fn origin(&self) -> usize {
        self.index_of(&vec![0; self.dimension])
            .expect("origin lies in every box")
    }

    /// Sites with `|k| <= radius`, in index order.
    pub fn block(&self, radius: usize) -> Vec<usize> {
        (0..self.n_sites())
            .filter(|&i| self.norm(i) as usize <= radius)
            .collect()
    }

    /// The shifted configuration `(ϑ^k x)_j = x_{k+j}` (periodic wrap).
    pub fn shift_config(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let kc = self.coords(k);
        (0..self.n_sites())
            .map(|j| {
                let jc = self.coords(j);
                let src: Vec<i32> = jc.iter().zip(&kc).map(|(a, b)| a + b).collect();
                x[self.wrapped_index(&src)]
            })
            .collect()
    }

    fn check_site(&self, coords: &[i32]) -> Result<usize> {
        self.index_of(coords)
            .ok_or_else(|| Error::Domain(format!("site {coords:?} lies outside the box")))
    }
}

#[derive(Clone, Debug)]
struct Instance {
    term: usize,
    sites: Vec<usize>,
}

/// A potential instantiated on a box: every translate of every base term
/// with its resolved site indices.
#[derive(Clone, Debug)]
pub struct Lattice {
    spec: PotentialSpec,
    geom: BoxGeometry,
    instances: Vec<Instance>,
    /// For each site, `(instance, slot)` pairs of the terms touching it.
    incident: Vec<Vec<(usize, usize)>>,
}

impl Lattice {
    pub fn new(spec: &PotentialSpec, geom: BoxGeometry) -> Result<Self> {
        if spec.dimension() != geom.dimension {
            return Err(Error::Config(format!(
                "potential dimension {} does not match box dimension {}",
                spec.dimension(),
                geom.dimension
            )));
        }
        let two_l = 2 * spec.range();
        for (i, t) in spec.terms().iter().enumerate() {
            if t.diameter() > two_l {
                return Err(Error::Config(format!(
                    "term {i} has support diameter {} > 2L = {two_l}",
                    t.diameter()
                )));
            }
        }
        if geom.periodic && geom.side() as u32 <= two_l {
            return Err(Error::Config(format!(
                "box side {} must exceed 2L = {two_l} so no term wraps onto itself",
                geom.side()
            )));
        }
        let mut instances = Vec::new();
        for anchor in 0..geom.n_sites() {
            let a = geom.coords(anchor);
            for (ti, t) in spec.terms().iter().enumerate() {
                if t.poly.is_zero() {
                    continue;
                }
                let shifted = t.shifted(&a);
                let sites: Option<Vec<usize>> = if geom.periodic {
                    Some(shifted.sites.iter().map(|s| geom.wrapped_index(s)).collect())
                } else {
                    shifted.sites.iter().map(|s| geom.index_of(s)).collect()
                };
                if let Some(sites) = sites {
                    instances.push(Instance { term: ti, sites });
                }
            }
        }
        let mut incident = vec![Vec::new(); geom.n_sites()];
        for (ii, inst) in instances.iter().enumerate() {
            for (slot, &s) in inst.sites.iter().enumerate() {
                incident[s].push((ii, slot));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            geom,
            instances,
            incident,
        })
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &BoxGeometry {
        &self.geom
    }

    pub fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    pub fn is_free(&self) -> bool {
        self.instances.is_empty()
    }

    #[inline]
    fn gather(&self, inst: &Instance, x: &[f64], buf: &mut [f64; MAX_SUPPORT]) -> usize {
        for (slot, &s) in inst.sites.iter().enumerate() {
            buf[slot] = x[s];
        }
        inst.sites.len()
    }

    /// Drift `b_k(x) = -Σ_{Λ∋k} ∂J_Λ/∂x_k` at every site.
    pub fn drift_all(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_sites());
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut local = [0.0; MAX_SUPPORT];
        let mut grad = [0.0; MAX_SUPPORT];
        for inst in &self.instances {
            let m = self.gather(inst, x, &mut local);
            self.spec.terms[inst.term]
                .poly
                .value_and_gradient(&local[..m], &mut grad[..m]);
            for (slot, &s) in inst.sites.iter().enumerate() {
                out[s] -= grad[slot];
            }
        }
    }

    /// Drift at a single site (index form).
    pub fn drift_at(&self, k: usize, x: &[f64]) -> f64 {
        let mut local = [0.0; MAX_SUPPORT];
        let mut grad = [0.0; MAX_SUPPORT];
        let mut b = 0.0;
        for &(ii, slot) in &self.incident[k] {
            let inst = &self.instances[ii];
            let m = self.gather(inst, x, &mut local);
            self.spec.terms[inst.term]
                .poly
                .value_and_gradient(&local[..m], &mut grad[..m]);
            b -= grad[slot];
        }
        b
    }

    /// Sum of the terms touching site `k`, together with the drift at `k`.
    pub fn site_energy_and_drift(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let mut local = [0.0; MAX_SUPPORT];
        let mut grad = [0.0; MAX_SUPPORT];
        let (mut e, mut b) = (0.0, 0.0);
        for &(ii, slot) in &self.incident[k] {
            let inst = &self.instances[ii];
            let m = self.gather(inst, x, &mut local);
            e += self.spec.terms[inst.term]
                .poly
                .value_and_gradient(&local[..m], &mut grad[..m]);
            b -= grad[slot];
        }
        (e, b)
    }

    /// `U^Λ(x)`: sum of all terms whose support meets `region`.
    pub fn local_energy_indices(&self, region: &[usize], x: &[f64]) -> f64 {
        let mut local = [0.0; MAX_SUPPORT];
        self.instances
            .iter()
            .filter(|inst| inst.sites.iter().any(|s| region.contains(s)))
            .map(|inst| {
                let m = self.gather(inst, x, &mut local);
                self.spec.terms[inst.term].poly.eval(&local[..m])
            })
            .sum()
    }

    pub fn total_energy(&self, x: &[f64]) -> f64 {
        let mut local = [0.0; MAX_SUPPORT];
        self.instances
            .iter()
            .map(|inst| {
                let m = self.gather(inst, x, &mut local);
                self.spec.terms[inst.term].poly.eval(&local[..m])
            })
            .sum()
    }

    /// Sup bound of `|b_k| + |∇b_k|` from coefficient sums, used in the
    /// mixing tail estimates.
    pub fn drift_norm_bound(&self, k: usize) -> f64 {
        let mut value = 0.0;
        let mut grad = 0.0;
        for &(ii, slot) in &self.incident[k] {
            let poly = &self.spec.terms[self.instances[ii].term].poly;
            let d = poly.partial(slot);
            value += d.sup_bound();
            for j in 0..poly.arity() {
                grad += d.partial(j).sup_bound();
            }
        }
        value + grad
    }

    /// Resolves a local function anchored at the origin into an
    /// observable on absolute site indices.
    pub fn observable(&self, f: &LocalFunction) -> Result<Observable> {
        let sites = f
            .sites
            .iter()
            .map(|s| {
                if self.geom.periodic {
                    Ok(self.geom.wrapped_index(s))
                } else {
                    self.geom.check_site(s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let distinct: BTreeSet<usize> = sites.iter().copied().collect();
        if distinct.len() != sites.len() {
            return Err(Error::Domain(
                "observable window wraps onto itself in this box".into(),
            ));
        }
        Ok(Observable {
            sites,
            poly: f.poly.clone(),
        })
    }
}

/// A trigonometric polynomial of the coordinates at `sites` (box indices).
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    pub sites: Vec<usize>,
    pub poly: TrigPoly,
}

impl Observable {
    pub fn new(sites: Vec<usize>, poly: TrigPoly) -> Result<Self> {
        if sites.len() != poly.arity() {
            return Err(Error::Config(format!(
                "observable has {} variables but {} sites",
                poly.arity(),
                sites.len()
            )));
        }
        Ok(Self { sites, poly })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            sites: Vec::new(),
            poly: TrigPoly::constant(0, value),
        }
    }

    /// `cos(θ_site)` scaled by `coef`.
    pub fn cos_at(site: usize, coef: f64) -> Self {
        Self {
            sites: vec![site],
            poly: TrigPoly::cosine(&[1], coef),
        }
    }

    fn local(&self, x: &[f64]) -> Vec<f64> {
        self.sites.iter().map(|&s| x[s]).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.poly.eval(&self.local(x))
    }

    /// Exact partial derivative with respect to box site `j`.
    pub fn partial_at(&self, j: usize, x: &[f64]) -> f64 {
        match self.sites.iter().position(|&s| s == j) {
            Some(slot) => self.poly.partial(slot).eval(&self.local(x)),
            None => 0.0,
        }
    }

    /// `‖∇φ‖_∞ + ‖φ‖_∞` bounded through coefficient sums.
    pub fn norm_bound(&self) -> f64 {
        let grad: f64 = (0..self.poly.arity())
            .map(|j| self.poly.partial(j).sup_bound())
            .sum();
        grad + self.poly.sup_bound()
    }
}

/// Drift at site `k` (box coordinates) of the potential on `geom`.
pub fn drift(spec: &PotentialSpec, geom: BoxGeometry, k: &[i32], x: &[f64]) -> Result<f64> {
    let lattice = Lattice::new(spec, geom)?;
    let idx = geom.check_site(k)?;
    if x.len() != geom.n_sites() {
        return Err(Error::Domain(format!(
            "configuration has {} values, box has {} sites",
            x.len(),
            geom.n_sites()
        )));
    }
    Ok(lattice.drift_at(idx, x))
}

/// Local energy `U^Λ(x)` for a region given in box coordinates.
pub fn local_energy(
    spec: &PotentialSpec,
    geom: BoxGeometry,
    region: &[Vec<i32>],
    x: &[f64],
) -> Result<f64> {
    let lattice = Lattice::new(spec, geom)?;
    let idx = region
        .iter()
        .map(|s| geom.check_site(s))
        .collect::<Result<Vec<_>>>()?;
    if x.len() != geom.n_sites() {
        return Err(Error::Domain("configuration size does not match the box".into()));
    }
    Ok(lattice.local_energy_indices(&idx, x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub passed: bool,
    pub max_violation: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub periodicity: AxiomCheck,
    pub shift_covariance: AxiomCheck,
    pub finite_range: AxiomCheck,
}

impl AxiomReport {
    pub fn all_passed(&self) -> bool {
        self.periodicity.passed && self.shift_covariance.passed && self.finite_range.passed
    }
}

const AXIOM_TOLERANCE: f64 = 1e-9;

/// Numerical check of periodicity, shift covariance of the drift and the
/// declared finite range.
pub fn verify_axioms(
    spec: &PotentialSpec,
    geom: BoxGeometry,
    sample_count: usize,
    stream: Stream,
) -> AxiomReport {
    let sample_count = sample_count.max(1);
    let mut rng = stream.rng();

    let mut worst_range = 0u32;
    let mut offenders = Vec::new();
    for (i, t) in spec.terms().iter().enumerate() {
        let excess = t.diameter().saturating_sub(2 * spec.range());
        if excess > 0 {
            offenders.push(i);
            worst_range = worst_range.max(excess);
        }
    }
    let finite_range = AxiomCheck {
        passed: offenders.is_empty(),
        max_violation: f64::from(worst_range),
        message: if offenders.is_empty() {
            format!("all supports have diameter <= 2L = {}", 2 * spec.range())
        } else {
            format!(
                "terms {offenders:?} reach beyond the declared range L = {}",
                spec.range()
            )
        },
    };

    let mut worst_period: f64 = 0.0;
    for t in spec.terms() {
        let m = t.poly.arity();
        for _ in 0..sample_count {
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-PI..PI)).collect();
            let base = t.poly.eval(&x);
            for j in 0..m {
                let mut y = x.clone();
                y[j] += 2.0 * PI;
                worst_period = worst_period.max((t.poly.eval(&y) - base).abs());
            }
        }
    }
    let periodicity = AxiomCheck {
        passed: worst_period <= AXIOM_TOLERANCE,
        max_violation: worst_period,
        message: "2π shifts of each coordinate of each base term".into(),
    };

    let shift_covariance = match Lattice::new(spec, geom) {
        Ok(lat) => {
            let n = lat.n_sites();
            let origin = geom.origin();
            let mut worst: f64 = 0.0;
            for _ in 0..sample_count {
                let k = rng.random_range(0..n);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                let shifted = geom.shift_config(k, &x);
                worst = worst.max((lat.drift_at(k, &x) - lat.drift_at(origin, &shifted)).abs());
            }
            AxiomCheck {
                passed: geom.periodic && worst <= AXIOM_TOLERANCE,
                max_violation: worst,
                message: if geom.periodic {
                    "b_k(x) against b_0(ϑ^k x) at random (k, x)".into()
                } else {
                    "shift covariance requires periodic wrap".into()
                },
            }
        }
        Err(e) => AxiomCheck {
            passed: false,
            max_violation: f64::INFINITY,
            message: format!("cannot instantiate on the box: {e}"),
        },
    };

    AxiomReport {
        periodicity,
        shift_covariance,
        finite_range,
    }
}

/// On-disk potential description (TOML).
///
/// ```toml
/// format = "homlab-potential"
/// version = 1
/// dimension = 1
/// range = 1
///
/// [[terms]]
/// support = [[0], [1]]
/// modes = [{ freq = [1, -1], cos = 0.2 }]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialFile {
    pub format: String,
    pub version: u32,
    pub dimension: usize,
    pub range: u32,
    #[serde(default)]
    pub terms: Vec<TermFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermFile {
    pub support: Vec<Vec<i32>>,
    pub modes: Vec<TrigTerm>,
}

pub const POTENTIAL_FORMAT: &str = "homlab-potential";
pub const POTENTIAL_VERSION: u32 = 1;

impl PotentialFile {
    pub fn from_spec(spec: &PotentialSpec) -> Self {
        Self {
            format: POTENTIAL_FORMAT.into(),
            version: POTENTIAL_VERSION,
            dimension: spec.dimension(),
            range: spec.range(),
            terms: spec
                .terms()
                .iter()
                .map(|t| TermFile {
                    support: t.sites.clone(),
                    modes: t.poly.terms().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_spec(self) -> Result<PotentialSpec> {
        if self.format != POTENTIAL_FORMAT {
            return Err(Error::Parse(format!(
                "unknown format {:?}, expected {POTENTIAL_FORMAT:?}",
                self.format
            )));
        }
        if self.version != POTENTIAL_VERSION {
            return Err(Error::Parse(format!(
                "unsupported potential file version {}",
                self.version
            )));
        }
        let terms = self
            .terms
            .into_iter()
            .map(|t| {
                let poly = TrigPoly::from_terms(t.support.len(), t.modes)?;
                LocalFunction::new(t.support, poly)
            })
            .collect::<Result<Vec<_>>>()?;
        PotentialSpec::new(self.dimension, self.range, terms)
    }
}

pub fn parse_potential(text: &str) -> Result<PotentialSpec> {
    let file: PotentialFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_spec()
}

pub fn write_potential(spec: &PotentialSpec) -> String {
    toml::to_string(&PotentialFile::from_spec(spec)).expect("potential serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use proptest::prelude::*;

    fn single_site() -> PotentialSpec {
        presets::cosine_single_site(1, 1.0)
    }

    #[test]
    fn single_site_drift_is_sine() {
        let geom = BoxGeometry::new(1, 1);
        let x = [0.0, PI / 2.0, 0.0];
        let b = drift(&single_site(), geom, &[0], &x).unwrap();
        assert!((b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nearest_neighbour_drift() {
        let spec = presets::nearest_neighbor(1, 0.3);
        let geom = BoxGeometry::new(1, 2);
        // x_k - x_{k+1} = π/2 and x_k - x_{k-1} = 0 at k = 0.
        let x = [0.0, 1.0, 1.0, 1.0 - PI / 2.0, 0.0];
        let b = drift(&spec, geom, &[0], &x).unwrap();
        assert!((b - 0.3).abs() < 1e-14, "b = {b}");
    }

    #[test]
    fn free_drift_and_energy_vanish() {
        let geom = BoxGeometry::new(2, 1);
        let x = vec![0.7; geom.n_sites()];
        assert_eq!(drift(&PotentialSpec::free(2), geom, &[1, -1], &x).unwrap(), 0.0);
        assert_eq!(
            local_energy(&PotentialSpec::free(2), geom, &[vec![0, 0]], &x).unwrap(),
            0.0
        );
    }

    #[test]
    fn local_energy_enumerates_touching_terms() {
        let geom = BoxGeometry::new(1, 1);
        assert_eq!(
            local_energy(&single_site(), geom, &[vec![0]], &[3.0, 0.0, 3.0]).unwrap(),
            1.0
        );
        let gamma = 0.4;
        let spec = presets::nearest_neighbor(1, gamma);
        let geom = BoxGeometry::new(1, 2);
        let x = [0.1, 0.5, 1.3, -0.4, 2.0];
        let e = local_energy(&spec, geom, &[vec![0]], &x).unwrap();
        let expected = gamma * ((x[1] - x[2]).cos() + (x[2] - x[3]).cos());
        assert!((e - expected).abs() < 1e-14);
    }

    #[test]
    fn site_outside_box_is_domain_error() {
        let geom = BoxGeometry::new(1, 1);
        let err = drift(&single_site(), geom, &[2], &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn box_must_exceed_range() {
        let spec = presets::nearest_neighbor(1, 0.2);
        let err = Lattice::new(&spec, BoxGeometry::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn range_violation_fails_axiom_c() {
        let far = LocalFunction::new(
            vec![vec![0], vec![3]],
            TrigPoly::cosine(&[1, -1], 0.1),
        )
        .unwrap();
        let spec = PotentialSpec::new(1, 1, vec![far]).unwrap();
        let report = verify_axioms(&spec, BoxGeometry::new(1, 4), 8, Stream::root(1));
        assert!(!report.finite_range.passed);
        assert!(report.finite_range.max_violation >= 1.0);
        assert!(!report.all_passed());
        assert!(Lattice::new(&spec, BoxGeometry::new(1, 4)).is_err());
    }

    #[test]
    fn valid_specs_pass_all_axioms() {
        let report = verify_axioms(&single_site(), BoxGeometry::new(1, 2), 32, Stream::root(2));
        assert!(report.all_passed(), "{report:?}");
        assert!(report.periodicity.max_violation <= 1e-12);
        assert!(report.shift_covariance.max_violation <= 1e-12);
        let nn = verify_axioms(
            &presets::nearest_neighbor(2, 0.2),
            BoxGeometry::new(2, 2),
            32,
            Stream::root(3),
        );
        assert!(nn.all_passed(), "{nn:?}");
        assert!(nn.shift_covariance.max_violation <= 1e-12);
    }

    #[test]
    fn support_must_contain_origin() {
        let t = LocalFunction::new(vec![vec![1]], TrigPoly::cosine(&[1], 1.0)).unwrap();
        assert!(PotentialSpec::new(1, 1, vec![t]).is_err());
    }

    #[test]
    fn potential_file_roundtrip() {
        let spec = presets::nearest_neighbor(2, 0.25);
        let text = write_potential(&spec);
        assert_eq!(parse_potential(&text).unwrap(), spec);
        assert!(parse_potential("format = \"other\"\nversion = 1\ndimension = 1\nrange = 1").is_err());
    }

    #[test]
    fn wrapped_indexing_is_consistent() {
        let geom = BoxGeometry::new(2, 2);
        for i in 0..geom.n_sites() {
            assert_eq!(geom.index_of(&geom.coords(i)), Some(i));
            let c: Vec<i32> = geom.coords(i).iter().map(|v| v + 5).collect();
            assert_eq!(geom.wrapped_index(&c), i);
        }
        assert_eq!(geom.block(0), vec![geom.origin()]);
        assert_eq!(geom.block(1).len(), 9);
    }

    proptest! {
        #[test]
        fn drift_is_periodic_and_shift_covariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 5),
            k in 0usize..5,
            j in 0usize..5,
        ) {
            let geom = BoxGeometry::new(1, 2);
            let lat = Lattice::new(&presets::nearest_neighbor(1, 0.3), geom).unwrap();
            let mut shifted = xs.clone();
            shifted[j] += 2.0 * PI;
            prop_assert!((lat.drift_at(k, &xs) - lat.drift_at(k, &shifted)).abs() < 1e-12);
            let moved = geom.shift_config(k, &xs);
            prop_assert!((lat.drift_at(k, &xs) - lat.drift_at(geom.origin(), &moved)).abs() < 1e-12);
            let mut all = vec![0.0; 5];
            lat.drift_all(&xs, &mut all);
            prop_assert!((all[k] - lat.drift_at(k, &xs)).abs() < 1e-14);
        }

        #[test]
        fn drift_is_minus_energy_gradient(
            xs in proptest::collection::vec(-3.0f64..3.0, 9),
            k in 0usize..9,
        ) {
            let geom = BoxGeometry::new(2, 1);
            let spec = presets::nearest_neighbor(2, 0.3);
            let lat = Lattice::new(&spec, BoxGeometry { half_width: 1, ..geom }).unwrap();
            let h = 1e-5;
            let mut up = xs.clone();
            let mut dn = xs.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = -(lat.local_energy_indices(&[k], &up) - lat.local_energy_indices(&[k], &dn)) / (2.0 * h);
            let b = lat.drift_at(k, &xs);
            prop_assert!((fd - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}
