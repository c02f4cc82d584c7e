//! Linear encoder/decoder pair standing in for an autoencoder.

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{axpy, dot, norm, symmetric_eigen, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec<T> {
    /// `D`, n × r.
    decoder: Matrix<T>,
    /// `E`, r × n.
    encoder: Matrix<T>,
}

impl<T: Scalar> LinearCodec<T> {
    /// Codec with orthonormal decoder columns and `E = Dᵀ`.
    pub fn orthonormal(decoder: Matrix<T>) -> Result<Self> {
        let r = decoder.cols();
        if r == 0 || r > decoder.rows() {
            return Err(invalid(format!(
                "latent dimension {r} must be in 1..={}",
                decoder.rows()
            )));
        }
        let gram = decoder.transpose().matmul(&decoder)?;
        if gram.max_abs_diff(&Matrix::identity(r)) > T::of(1e-10) {
            return Err(Error::Matrix("orthonormal"));
        }
        Ok(Self {
            encoder: decoder.transpose(),
            decoder,
        })
    }

    /// Arbitrary linear pair; `encoder` is r × n and `decoder` n × r.
    pub fn new(encoder: Matrix<T>, decoder: Matrix<T>) -> Result<Self> {
        check_len("encoder rows", decoder.cols(), encoder.rows())?;
        check_len("encoder cols", decoder.rows(), encoder.cols())?;
        Ok(Self { decoder, encoder })
    }

    pub fn pixel_dim(&self) -> usize {
        self.decoder.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.cols()
    }

    pub fn decoder(&self) -> &Matrix<T> {
        &self.decoder
    }

    pub fn encoder(&self) -> &Matrix<T> {
        &self.encoder
    }

    pub fn encode(&self, x: &[T]) -> Vec<T> {
        self.encoder.matvec(x)
    }

    pub fn decode(&self, z: &[T]) -> Vec<T> {
        self.decoder.matvec(z)
    }

    /// `Dᵀ x`, the back-propagation through the decoder.
    pub fn decode_adjoint(&self, x: &[T]) -> Vec<T> {
        self.decoder.matvec_t(x)
    }
}

/// `z ← E(D(z))`. The identity for an orthonormal codec; for a general pair
/// it projects onto the range of `E`.
pub fn re_encode<T: Scalar>(z: &[T], codec: &LinearCodec<T>) -> Vec<T> {
    codec.encode(&codec.decode(z))
}

/// Top-`r` principal directions of the (uncentered) second-moment matrix of
/// the dataset, found through the m × m Gram matrix.
pub fn make_pca_codec<T: Scalar>(dataset: &[Vec<T>], r: usize) -> Result<LinearCodec<T>> {
    let m = dataset.len();
    if m == 0 {
        return Err(invalid("PCA codec needs a nonempty dataset"));
    }
    let n = dataset[0].len();
    for x in dataset {
        check_len("PCA sample", n, x.len())?;
    }
    if r == 0 || r > n.min(m) {
        return Err(invalid(format!("latent dimension {r} must be in 1..={}", n.min(m))));
    }
    let gram = Matrix::from_fn(m, m, |i, j| dot(&dataset[i], &dataset[j]));
    let eig = symmetric_eigen(&gram)?;
    let top = eig.values[0].max(T::min_positive_value());
    if !(eig.values[r - 1] > T::of(1e-10) * top) {
        return Err(invalid(format!(
            "data has numerical rank below {r} (eigenvalue {} vs {})",
            eig.values[r - 1], top
        )));
    }
    let mut columns: Vec<Vec<T>> = (0..r)
        .map(|k| {
            let mut d = vec![T::zero(); n];
            for (i, x) in dataset.iter().enumerate() {
                axpy(eig.vectors[(i, k)], x, &mut d);
            }
            let inv = T::one() / eig.values[k].sqrt();
            d.iter_mut().for_each(|v| *v *= inv);
            d
        })
        .collect();
    // Two passes of modified Gram-Schmidt tighten DᵀD = I to rounding level.
    for _ in 0..2 {
        for k in 0..r {
            for j in 0..k {
                let (done, rest) = columns.split_at_mut(k);
                let p = dot(&done[j], &rest[0]);
                axpy(-p, &done[j], &mut rest[0]);
            }
            let nk = norm(&columns[k]);
            columns[k].iter_mut().for_each(|v| *v /= nk);
        }
    }
    LinearCodec::orthonormal(Matrix::from_columns(&columns)?)
}
