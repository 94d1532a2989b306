//! Small dense linear-algebra helpers and base64 serialization of f64 arrays.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Little-endian f64 bytes, base64 encoded.
pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with column-major
/// base64 data.
pub mod matrix_b64 {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Encoded {
        rows: usize,
        cols: usize,
        data: String,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Encoded {
            rows: m.nrows(),
            cols: m.ncols(),
            data: super::encode_f64s(m.as_slice()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let e = Encoded::deserialize(d)?;
        let data = super::decode_f64s(&e.data).map_err(D::Error::custom)?;
        if data.len() != e.rows * e.cols {
            return Err(D::Error::custom(format!(
                "matrix {}x{} has {} values",
                e.rows,
                e.cols,
                data.len()
            )));
        }
        Ok(DMatrix::from_vec(e.rows, e.cols, data))
    }
}

/// Serde adapter for `Vec<f64>` as base64.
pub mod vec_b64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode_f64s(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_f64s(&text).map_err(D::Error::custom)
    }
}

/// Cholesky of a symmetric matrix, retrying with diagonal jitter
/// `1e-8 · trace / p` when the plain factorization fails or is badly
/// conditioned. Returns the factor and the jitter used.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Option<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let p = a.nrows();
    if p == 0 {
        return None;
    }
    if let Some(ch) = Cholesky::new(a.clone()) {
        let diag = ch.l_dirty().diagonal();
        let (min, max) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if max > 0.0 && min / max >= 1e-7 {
            return Some((ch, 0.0));
        }
    }
    let jitter = 1e-8 * a.trace() / p as f64;
    if !(jitter > 0.0) {
        return None;
    }
    let mut b = a.clone();
    for i in 0..p {
        b[(i, i)] += jitter;
    }
    Cholesky::new(b).map(|ch| (ch, jitter))
}

/// Solves the symmetric positive-definite system `a x = b`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(a.clone()).map(|ch| ch.solve(b))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
