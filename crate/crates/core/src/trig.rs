//! Real trigonometric polynomials on the torus `T^m`.
//!
//! A polynomial is a finite sum of modes `a cos(n·x) + b sin(n·x)` with
//! integer frequency vectors `n`, so it is 2π-periodic in every variable
//! and all derivatives are exact coefficient maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub freq: Vec<i32>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrigPoly {
    arity: usize,
    terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn zero(arity: usize) -> Self {
        Self {
            arity,
            terms: Vec::new(),
        }
    }

    pub fn constant(arity: usize, value: f64) -> Self {
        Self::from_terms(
            arity,
            vec![TrigTerm {
                freq: vec![0; arity],
                cos: value,
                sin: 0.0,
            }],
        )
        .expect("constant term has matching arity")
    }

    /// `cos(freq · x)` scaled by `coef`.
    pub fn cosine(freq: &[i32], coef: f64) -> Self {
        Self::from_terms(
            freq.len(),
            vec![TrigTerm {
                freq: freq.to_vec(),
                cos: coef,
                sin: 0.0,
            }],
        )
        .expect("arity taken from the frequency vector")
    }

    /// `sin(freq · x)` scaled by `coef`.
    pub fn sine(freq: &[i32], coef: f64) -> Self {
        Self::from_terms(
            freq.len(),
            vec![TrigTerm {
                freq: freq.to_vec(),
                cos: 0.0,
                sin: coef,
            }],
        )
        .expect("arity taken from the frequency vector")
    }

    pub fn from_terms(arity: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        for t in &terms {
            if t.freq.len() != arity {
                return Err(Error::Config(format!(
                    "frequency vector {:?} has length {}, expected {}",
                    t.freq,
                    t.freq.len(),
                    arity
                )));
            }
            if !t.cos.is_finite() || !t.sin.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite coefficient on mode {:?}",
                    t.freq
                )));
            }
        }
        let mut p = Self { arity, terms };
        p.canonicalize();
        Ok(p)
    }

    /// Merges duplicate modes and folds `-n` onto `n` so that the first
    /// nonzero frequency component is positive.
    fn canonicalize(&mut self) {
        let mut merged: BTreeMap<Vec<i32>, (f64, f64)> = BTreeMap::new();
        for t in self.terms.drain(..) {
            let mut freq = t.freq;
            let mut sin = t.sin;
            match freq.iter().find(|&&n| n != 0) {
                None => sin = 0.0,
                Some(&n) if n < 0 => {
                    freq.iter_mut().for_each(|n| *n = -*n);
                    sin = -sin;
                }
                _ => {}
            }
            let e = merged.entry(freq).or_insert((0.0, 0.0));
            e.0 += t.cos;
            e.1 += sin;
        }
        self.terms = merged
            .into_iter()
            .filter(|(_, (c, s))| *c != 0.0 || *s != 0.0)
            .map(|(freq, (cos, sin))| TrigTerm { freq, cos, sin })
            .collect();
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Mean over the uniform measure on the torus.
    pub fn constant_term(&self) -> f64 {
        self.terms
            .iter()
            .find(|t| t.freq.iter().all(|&n| n == 0))
            .map_or(0.0, |t| t.cos)
    }

    pub fn max_frequency(&self) -> u32 {
        self.terms
            .iter()
            .flat_map(|t| t.freq.iter())
            .map(|n| n.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    #[inline]
    fn phase(freq: &[i32], x: &[f64]) -> f64 {
        freq.iter().zip(x).map(|(&n, &xi)| f64::from(n) * xi).sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.arity);
        self.terms
            .iter()
            .map(|t| {
                let (s, c) = Self::phase(&t.freq, x).sin_cos();
                t.cos * c + t.sin * s
            })
            .sum()
    }

    /// Returns the value and overwrites `grad` with the gradient.
    pub fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.arity);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for t in &self.terms {
            let (s, c) = Self::phase(&t.freq, x).sin_cos();
            value += t.cos * c + t.sin * s;
            let d = -t.cos * s + t.sin * c;
            for (g, &n) in grad.iter_mut().zip(&t.freq) {
                *g += f64::from(n) * d;
            }
        }
        value
    }

    /// Exact partial derivative with respect to variable `j`.
    pub fn partial(&self, j: usize) -> Self {
        assert!(j < self.arity, "variable {j} out of range");
        let terms = self
            .terms
            .iter()
            .filter(|t| t.freq[j] != 0)
            .map(|t| {
                let n = f64::from(t.freq[j]);
                TrigTerm {
                    freq: t.freq.clone(),
                    cos: n * t.sin,
                    sin: -n * t.cos,
                }
            })
            .collect();
        Self {
            arity: self.arity,
            terms,
        }
    }

    pub fn depends_on(&self, j: usize) -> bool {
        self.terms.iter().any(|t| t.freq[j] != 0)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm {
                freq: t.freq.clone(),
                cos: t.cos * factor,
                sin: t.sin * factor,
            })
            .collect();
        let mut p = Self {
            arity: self.arity,
            terms,
        };
        p.canonicalize();
        p
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.arity, other.arity, "arity mismatch");
        let mut p = Self {
            arity: self.arity,
            terms: self.terms.iter().chain(&other.terms).cloned().collect(),
        };
        p.canonicalize();
        p
    }

    /// Product by the angle-sum identities.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.arity, other.arity, "arity mismatch");
        let mut terms = Vec::with_capacity(2 * self.terms.len() * other.terms.len());
        for p in &self.terms {
            for q in &other.terms {
                let sum: Vec<i32> = p.freq.iter().zip(&q.freq).map(|(a, b)| a + b).collect();
                let diff: Vec<i32> = p.freq.iter().zip(&q.freq).map(|(a, b)| a - b).collect();
                let (a1, b1, a2, b2) = (p.cos, p.sin, q.cos, q.sin);
                terms.push(TrigTerm {
                    freq: sum,
                    cos: 0.5 * (a1 * a2 - b1 * b2),
                    sin: 0.5 * (a1 * b2 + b1 * a2),
                });
                terms.push(TrigTerm {
                    freq: diff,
                    cos: 0.5 * (a1 * a2 + b1 * b2),
                    sin: 0.5 * (b1 * a2 - a1 * b2),
                });
            }
        }
        let mut out = Self {
            arity: self.arity,
            terms,
        };
        out.canonicalize();
        out
    }

    /// Upper bound on the sup norm: the sum of mode amplitudes.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.cos.hypot(t.sin)).sum()
    }

    /// Re-expresses the polynomial in a larger variable set: variable `i`
    /// of `self` becomes variable `map[i]` of the result.
    pub fn embed(&self, arity: usize, map: &[usize]) -> Self {
        assert_eq!(map.len(), self.arity);
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut freq = vec![0; arity];
                for (i, &n) in t.freq.iter().enumerate() {
                    freq[map[i]] += n;
                }
                TrigTerm {
                    freq,
                    cos: t.cos,
                    sin: t.sin,
                }
            })
            .collect();
        let mut p = Self { arity, terms };
        p.canonicalize();
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sample_poly() -> TrigPoly {
        TrigPoly::from_terms(
            2,
            vec![
                TrigTerm { freq: vec![1, -1], cos: 0.3, sin: 0.0 },
                TrigTerm { freq: vec![0, 2], cos: -0.5, sin: 0.25 },
                TrigTerm { freq: vec![0, 0], cos: 1.5, sin: 0.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn canonical_form_merges_opposite_frequencies() {
        let p = TrigPoly::from_terms(
            1,
            vec![
                TrigTerm { freq: vec![-1], cos: 1.0, sin: 2.0 },
                TrigTerm { freq: vec![1], cos: 1.0, sin: 0.0 },
            ],
        )
        .unwrap();
        assert_eq!(p.terms().len(), 1);
        assert_eq!(p.terms()[0], TrigTerm { freq: vec![1], cos: 2.0, sin: -2.0 });
        for x in [0.1f64, 1.3, -2.0] {
            let direct = (-x).cos() + 2.0 * (-x).sin() + x.cos();
            assert!((p.eval(&[x]) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_of_cosine_is_minus_sine() {
        let p = TrigPoly::cosine(&[1], 1.0);
        let dp = p.partial(0);
        assert!((dp.eval(&[PI / 2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_arity() {
        let err = TrigPoly::from_terms(2, vec![TrigTerm { freq: vec![1], cos: 1.0, sin: 0.0 }]);
        assert!(err.is_err());
    }

    #[test]
    fn product_matches_pointwise_product() {
        let p = sample_poly();
        let q = TrigPoly::from_terms(
            2,
            vec![
                TrigTerm { freq: vec![2, 1], cos: 0.7, sin: -0.1 },
                TrigTerm { freq: vec![1, 0], cos: 0.0, sin: 1.0 },
            ],
        )
        .unwrap();
        let pq = p.mul(&q);
        for x in [[0.1, 0.2], [2.0, -1.0], [5.5, 3.3]] {
            assert!((pq.eval(&x) - p.eval(&x) * q.eval(&x)).abs() < 1e-13);
        }
    }

    #[test]
    fn embed_relabels_variables() {
        let p = TrigPoly::cosine(&[1, -1], 1.0);
        let e = p.embed(3, &[2, 0]);
        let x = [0.4, 9.0, 1.1];
        assert!((e.eval(&x) - (1.1f64 - 0.4).cos()).abs() < 1e-14);
        assert!(!e.depends_on(1));
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(x0 in -7.0f64..7.0, x1 in -7.0f64..7.0) {
            let p = sample_poly();
            let mut grad = [0.0; 2];
            p.value_and_gradient(&[x0, x1], &mut grad);
            let h = 1e-5;
            for j in 0..2 {
                let mut up = [x0, x1];
                let mut dn = [x0, x1];
                up[j] += h;
                dn[j] -= h;
                let fd = (p.eval(&up) - p.eval(&dn)) / (2.0 * h);
                prop_assert!((fd - grad[j]).abs() < 1e-7);
                prop_assert!((p.partial(j).eval(&[x0, x1]) - grad[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn periodic_in_each_variable(x0 in -7.0f64..7.0, x1 in -7.0f64..7.0) {
            let p = sample_poly();
            let base = p.eval(&[x0, x1]);
            prop_assert!((p.eval(&[x0 + 2.0 * PI, x1]) - base).abs() < 1e-12);
            prop_assert!((p.eval(&[x0, x1 - 2.0 * PI]) - base).abs() < 1e-12);
            prop_assert!(base.abs() <= p.sup_bound() + 1e-12);
        }
    }
}
