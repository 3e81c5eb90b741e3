//! Discretization of continuous state vectors onto qubit-register basis
//! indices.
//!
//! Each coordinate i is quantized onto `2^m` equally spaced points spanning
//! `[lower[i], upper[i]]` (both endpoints are grid points). The cell indices
//! are packed dimension-major: coordinate 0 occupies the `m` least
//! significant bits of the basis index, coordinate 1 the next `m`, and so on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statevector::{DiagonalObservable, MAX_QUBITS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingScheme {
    dims: usize,
    bits_per_dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl EncodingScheme {
    pub fn new(bits_per_dim: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let scheme = Self {
            dims: lower.len(),
            bits_per_dim,
            lower,
            upper,
        };
        let violations = scheme.violations();
        if violations.is_empty() {
            Ok(scheme)
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Every invariant this scheme breaks, for config validation.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dims == 0 {
            v.push("encoding: at least one dimension is required".to_string());
        }
        if self.lower.len() != self.dims || self.upper.len() != self.dims {
            v.push(format!(
                "encoding: lower/upper must both have {} entries (got {} and {})",
                self.dims,
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.bits_per_dim == 0 {
            v.push("encoding: bits_per_dim must be >= 1".to_string());
        }
        if self.dims * self.bits_per_dim > MAX_QUBITS {
            v.push(format!(
                "encoding: {} qubits exceeds the {MAX_QUBITS}-qubit capacity",
                self.dims * self.bits_per_dim
            ));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                v.push(format!(
                    "encoding: dimension {i} needs finite bounds with upper > lower (got [{lo}, {hi}])"
                ));
            }
        }
        v
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn bits_per_dim(&self) -> usize {
        self.bits_per_dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn num_qubits(&self) -> usize {
        self.dims * self.bits_per_dim
    }

    pub fn num_states(&self) -> usize {
        1usize << self.num_qubits()
    }

    fn levels(&self) -> usize {
        1usize << self.bits_per_dim
    }

    /// Grid spacing along dimension `i`.
    pub fn cell_width(&self, i: usize) -> f64 {
        (self.upper[i] - self.lower[i]) / (self.levels() - 1) as f64
    }

    /// Worst-case per-coordinate error of encode followed by decode.
    pub fn max_quantization_error(&self) -> Vec<f64> {
        (0..self.dims).map(|i| 0.5 * self.cell_width(i)).collect()
    }

    /// Nearest grid point for each coordinate after clamping into the box.
    /// Exact midpoints round toward the lower cell.
    pub fn encode(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dims {
            return Err(Error::Shape {
                context: "encode",
                expected: self.dims,
                found: x.len(),
            });
        }
        let top = self.levels() - 1;
        let mut index = 0usize;
        for (i, &xi) in x.iter().enumerate() {
            if xi.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {i} is NaN and cannot be encoded"
                )));
            }
            let clamped = xi.clamp(self.lower[i], self.upper[i]);
            let t = (clamped - self.lower[i]) / self.cell_width(i);
            let cell = ((t - 0.5).ceil().max(0.0) as usize).min(top);
            index |= cell << (i * self.bits_per_dim);
        }
        Ok(index)
    }

    pub fn decode(&self, index: usize) -> Result<Vec<f64>> {
        if index >= self.num_states() {
            return Err(Error::BasisIndex {
                index,
                num_states: self.num_states(),
            });
        }
        let mask = self.levels() - 1;
        Ok((0..self.dims)
            .map(|i| {
                let cell = (index >> (i * self.bits_per_dim)) & mask;
                self.lower[i] + cell as f64 * self.cell_width(i)
            })
            .collect())
    }

    /// Snap `x` to its grid point.
    pub fn quantize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(self.encode(x)?)
    }

    /// Clamp each coordinate into the box in place.
    pub fn clamp(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate().take(self.dims) {
            *xi = if xi.is_finite() {
                xi.clamp(self.lower[i], self.upper[i])
            } else if *xi == f64::INFINITY {
                self.upper[i]
            } else {
                self.lower[i]
            };
        }
    }
}

/// Evaluate `cost` at every grid point, giving the diagonal cost observable.
pub fn tabulate_cost<F>(scheme: &EncodingScheme, cost: F) -> Result<DiagonalObservable>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if scheme.num_qubits() > MAX_QUBITS {
        return Err(Error::Capacity {
            requested: scheme.num_qubits(),
            max: MAX_QUBITS,
        });
    }
    let values = (0..scheme.num_states())
        .into_par_iter()
        .map(|k| cost(&scheme.decode(k)?))
        .collect::<Result<Vec<f64>>>()?;
    DiagonalObservable::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid() -> EncodingScheme {
        EncodingScheme::new(3, vec![0.0], vec![7.0]).unwrap()
    }

    #[test]
    fn encode_examples() {
        let s = unit_grid();
        assert_eq!(s.encode(&[5.0]).unwrap(), 5);
        assert_eq!(s.encode(&[-3.0]).unwrap(), 0);
        assert_eq!(s.encode(&[100.0]).unwrap(), 7);
        assert_eq!(s.encode(&[2.5]).unwrap(), 2);
        assert_eq!(s.encode(&[2.5000001]).unwrap(), 3);
        assert!(matches!(s.encode(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(s.encode(&[f64::NAN]).is_err());
    }

    #[test]
    fn decode_examples() {
        let s = EncodingScheme::new(4, vec![-1.0, 2.0], vec![1.0, 5.0]).unwrap();
        assert_eq!(s.decode(0).unwrap(), vec![-1.0, 2.0]);
        assert_eq!(s.decode(255).unwrap(), vec![1.0, 5.0]);
        assert!(matches!(s.decode(256), Err(Error::BasisIndex { .. })));
        for k in 0..s.num_states() {
            assert_eq!(s.encode(&s.decode(k).unwrap()).unwrap(), k);
        }
    }

    #[test]
    fn dimension_zero_is_least_significant() {
        let s = EncodingScheme::new(2, vec![0.0, 0.0], vec![3.0, 3.0]).unwrap();
        assert_eq!(s.encode(&[1.0, 0.0]).unwrap(), 1);
        assert_eq!(s.encode(&[0.0, 1.0]).unwrap(), 4);
    }

    #[test]
    fn invalid_schemes_list_every_violation() {
        let err = EncodingScheme::new(0, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap_err();
        match err {
            Error::Validation(v) => assert_eq!(v.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(EncodingScheme::new(13, vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn tabulate_examples() {
        let s = EncodingScheme::new(2, vec![0.0], vec![3.0]).unwrap();
        let t = tabulate_cost(&s, |x| Ok(x[0] * x[0])).unwrap();
        assert_eq!(t.values(), &[0.0, 1.0, 4.0, 9.0]);
        let c = tabulate_cost(&s, |_| Ok(2.5)).unwrap();
        assert!(c.values().iter().all(|&v| v == 2.5));

        let s = EncodingScheme::new(3, vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
        let f = |x: &[f64]| (x[0] - 0.4).powi(2) + 2.0 * (x[1] - 1.3).powi(2);
        let t = tabulate_cost(&s, |x| Ok(f(x))).unwrap();
        let brute = (0..s.num_states())
            .min_by(|&a, &b| f(&s.decode(a).unwrap()).partial_cmp(&f(&s.decode(b).unwrap())).unwrap())
            .unwrap();
        assert_eq!(t.argmin(), brute);
    }

    proptest! {
        #[test]
        fn quantization_error_is_at_most_half_a_cell(
            x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, bits in 1usize..6,
        ) {
            let s = EncodingScheme::new(bits, vec![-2.0, -1.5], vec![2.0, 2.5]).unwrap();
            let x = [x0, x1];
            let q = s.quantize(&x).unwrap();
            for i in 0..2 {
                let clamped = x[i].clamp(s.lower()[i], s.upper()[i]);
                prop_assert!((q[i] - clamped).abs() <= 0.5 * s.cell_width(i) * (1.0 + 1e-12));
            }
        }
    }
}
