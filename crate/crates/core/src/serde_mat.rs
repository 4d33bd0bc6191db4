//! Serde adapters for nalgebra dynamic matrices and vectors.
//!
//! Matrices are written as `{"rows": r, "cols": c, "data": [...]}` with `data`
//! in row-major order; vectors as plain arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MatrixRecord<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> From<&DMatrix<T>> for MatrixRecord<T> {
    fn from(m: &DMatrix<T>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixRecord {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl<T: Scalar> MatrixRecord<T> {
    pub fn into_matrix(self) -> Result<DMatrix<T>, String> {
        if self.rows * self.cols != self.data.len() {
            return Err(format!(
                "matrix declares {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer, T: Scalar>(m: &DMatrix<T>, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Scalar>(d: D) -> Result<DMatrix<T>, D::Error> {
        MatrixRecord::<T>::deserialize(d)?
            .into_matrix()
            .map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer, T: Scalar>(v: &DVector<T>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Scalar>(d: D) -> Result<DVector<T>, D::Error> {
        Ok(DVector::from_vec(Vec::<T>::deserialize(d)?))
    }
}

pub mod matrix_vec {
    use super::*;

    pub fn serialize<S: Serializer, T: Scalar>(ms: &[DMatrix<T>], s: S) -> Result<S::Ok, S::Error> {
        let recs: Vec<MatrixRecord<T>> = ms.iter().map(MatrixRecord::from).collect();
        recs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Scalar>(d: D) -> Result<Vec<DMatrix<T>>, D::Error> {
        Vec::<MatrixRecord<T>>::deserialize(d)?
            .into_iter()
            .map(|r| r.into_matrix().map_err(serde::de::Error::custom))
            .collect()
    }
}

pub mod vector_vec {
    use super::*;

    pub fn serialize<S: Serializer, T: Scalar>(vs: &[DVector<T>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<&[T]> = vs.iter().map(|v| v.as_slice()).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Scalar>(d: D) -> Result<Vec<DVector<T>>, D::Error> {
        Ok(Vec::<Vec<T>>::deserialize(d)?
            .into_iter()
            .map(DVector::from_vec)
            .collect())
    }
}
