//! Small helpers around nalgebra: serde adapters that write matrices as
//! nested row arrays, and a few vector statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Serialize a `DMatrix<f64>` as `[[row0...], [row1...], ...]`.
pub mod serde_matrix {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serialize a `DVector<f64>` as a flat array.
pub mod serde_vector {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serialize a `Vec<DVector<f64>>` as an array of arrays.
pub mod serde_vectors {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(d)?
            .into_iter()
            .map(DVector::from_vec)
            .collect())
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidArgument("matrix has no rows".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(
            "matrix rows must be non-empty and of equal length".into(),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Root-mean-square difference over all coordinates.
pub fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

/// Weighted mean of a set of vectors, accumulated as offsets from the
/// heaviest point so identical points average to themselves exactly.
pub fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let heaviest = (0..points.len()).fold(0, |b, i| if weights[i] > weights[b] { i } else { b });
    let origin = &points[heaviest];
    let mut shift = DVector::zeros(origin.len());
    for (p, &w) in points.iter().zip(weights) {
        shift.axpy(w, &(p - origin), 1.0);
    }
    origin + shift
}

/// Ordinary least-squares line fit `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_rows(&to_rows(&m)).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(from_rows(&[]).is_err());
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (slope, intercept) = linear_fit(&x, &y);
        assert!((slope + 0.5).abs() < 1e-14 && (intercept - 2.0).abs() < 1e-14);
    }
}
