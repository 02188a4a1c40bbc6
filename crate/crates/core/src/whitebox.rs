//! White-box fingerprints: each owner gets one column of a secret orthonormal
//! basis, and a shared Gaussian projection maps the carrier weights into the
//! basis space. The fingerprint strength of owner `j` is the cosine between
//! the projected weights `u = D^T w` and `s_j`.
//!
//! Because every owner shares the same `D`, pushing `u` towards `s_j` leaves
//! the components along the other (orthogonal) owner vectors untouched in
//! expectation.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default accusation cut on `r_j`.
pub const DEFAULT_THRESHOLD: f64 = 0.11;

#[derive(Clone, Debug, PartialEq)]
pub struct OwnerBasis {
    p: usize,
    n_owners: usize,
    /// Column-major `p x p`; column `j` is owner `j`'s vector.
    vectors: Vec<f64>,
}

impl OwnerBasis {
    /// Orthonormalizes a seeded Gaussian `p x p` matrix (Householder QR) and
    /// assigns columns `0..n_owners` to owners in registration order.
    pub fn generate(p: usize, n_owners: usize, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p", "basis dimension must be positive"));
        }
        if n_owners == 0 || n_owners > p {
            return Err(Error::invalid("n_owners", format!("need 1 <= n_owners <= p = {p}, got {n_owners}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian: Vec<f64> = (0..p * p).map(|_| rng.sample(StandardNormal)).collect();
        let q = DMatrix::from_column_slice(p, p, &gaussian).qr().q();
        Ok(Self {
            p,
            n_owners,
            vectors: q.as_slice().to_vec(),
        })
    }

    /// Wraps explicit column-major vectors; the caller vouches for orthonormality.
    pub fn from_columns(p: usize, n_owners: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != p * p {
            return Err(Error::ShapeMismatch(format!("basis needs {} entries, got {}", p * p, vectors.len())));
        }
        if n_owners == 0 || n_owners > p {
            return Err(Error::invalid("n_owners", "must lie in 1..=p"));
        }
        Ok(Self { p, n_owners, vectors })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn n_owners(&self) -> usize {
        self.n_owners
    }

    pub fn vector(&self, owner: usize) -> &[f64] {
        &self.vectors[owner * self.p..(owner + 1) * self.p]
    }

    pub fn as_column_major(&self) -> &[f64] {
        &self.vectors
    }
}

/// The secret `l x p` Gaussian projection, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn generate(l: usize, p: usize, seed: u64) -> Result<Self> {
        if l == 0 || p == 0 {
            return Err(Error::invalid("projection", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..l * p).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self { rows: l, cols: p, entries })
    }

    pub fn from_entries(l: usize, p: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != l * p || l == 0 || p == 0 {
            return Err(Error::ShapeMismatch(format!("projection needs {l} x {p} entries, got {}", entries.len())));
        }
        Ok(Self { rows: l, cols: p, entries })
    }

    /// Carrier length `l`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Basis dimension `p`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `U = W D` for `n` stacked weight rows (`W` is `n x l`); returns `n x p`.
    pub fn project_rows(&self, weights: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(weights.len(), n * self.rows, "weight rows must have length l");
        let mut out = vec![0.0; n * self.cols];
        dgemm(n, self.rows, self.cols, weights, (self.rows as isize, 1), &self.entries, (self.cols as isize, 1), &mut out);
        out
    }

    /// `G = V D^T` for `n` stacked rows of length `p`; returns `n x l`.
    pub fn back_project_rows(&self, v: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(v.len(), n * self.cols);
        let mut out = vec![0.0; n * self.rows];
        dgemm(n, self.cols, self.rows, v, (self.cols as isize, 1), &self.entries, (1, self.cols as isize), &mut out);
        out
    }

    fn check_carrier(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "carrier has {} weights but the projection expects {}",
                w.len(),
                self.rows
            )));
        }
        Ok(())
    }
}

fn dgemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the stated shapes and strides;
    // `c` is a fresh buffer that aliases neither input.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_of(u: &[f64]) -> Result<f64> {
    let norm = dot(u, u).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(norm)
}

/// `r_j = (w^T D s_j) / ||w^T D||`.
pub fn project(w: &[f64], projection: &ProjectionMatrix, owner_vector: &[f64]) -> Result<f64> {
    projection.check_carrier(w)?;
    let u = projection.project_rows(w, 1);
    Ok(dot(&u, owner_vector) / norm_of(&u)?)
}

/// `r_j` for every assigned owner of `basis`, sharing one projection of `w`.
pub fn projections(w: &[f64], projection: &ProjectionMatrix, basis: &OwnerBasis) -> Result<Vec<f64>> {
    projection.check_carrier(w)?;
    if basis.dim() != projection.cols() {
        return Err(Error::ShapeMismatch("basis dimension differs from projection width".into()));
    }
    let u = projection.project_rows(w, 1);
    let norm = norm_of(&u)?;
    Ok((0..basis.n_owners()).map(|j| dot(&u, basis.vector(j)) / norm).collect())
}

/// Regularizer `exp(-r_j)` and its gradient with respect to `w`.
pub fn regularizer_loss_and_grad(w: &[f64], projection: &ProjectionMatrix, owner_vector: &[f64]) -> Result<(f64, Vec<f64>)> {
    projection.check_carrier(w)?;
    let mut out = batch_regularizer(w, 1, projection, &[owner_vector])?;
    Ok(out.pop().expect("one row"))
}

/// Regularizer loss and gradient for `n` carriers at once (rows of `weights`),
/// each against its own owner vector. Reads the projection matrix twice in
/// total instead of twice per carrier.
pub fn batch_regularizer(weights: &[f64], n: usize, projection: &ProjectionMatrix, owner_vectors: &[&[f64]]) -> Result<Vec<(f64, Vec<f64>)>> {
    if owner_vectors.len() != n || weights.len() != n * projection.rows() {
        return Err(Error::ShapeMismatch("batch regularizer inputs disagree".into()));
    }
    let p = projection.cols();
    let u = projection.project_rows(weights, n);
    let mut v = vec![0.0; n * p];
    let mut losses = Vec::with_capacity(n);
    for (i, s) in owner_vectors.iter().enumerate() {
        if s.len() != p {
            return Err(Error::ShapeMismatch("owner vector length differs from p".into()));
        }
        let ui = &u[i * p..(i + 1) * p];
        let norm = norm_of(ui)?;
        let us = dot(ui, s);
        let r = us / norm;
        let loss = (-r).exp();
        // d loss / d u = -exp(-r) * (s / |u| - (u.s) u / |u|^3)
        let inv = 1.0 / norm;
        let inv3 = us * inv * inv * inv;
        for ((vk, &sk), &uk) in v[i * p..(i + 1) * p].iter_mut().zip(s.iter()).zip(ui) {
            *vk = -loss * (sk * inv - uk * inv3);
        }
        losses.push(loss);
    }
    let grads = projection.back_project_rows(&v, n);
    Ok(losses
        .into_iter()
        .zip(grads.chunks_exact(projection.rows()))
        .map(|(l, g)| (l, g.to_vec()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxReport {
    /// Owner index to `r_j`.
    pub projections: BTreeMap<usize, f64>,
    pub accused: Vec<usize>,
    pub threshold: f64,
}

/// Catch-all accusation: every owner with `r_j >= threshold`.
pub fn accuse_whitebox(w: &[f64], projection: &ProjectionMatrix, basis: &OwnerBasis, threshold: f64) -> Result<WhiteboxReport> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("threshold", "must be positive"));
    }
    let r = projections(w, projection, basis)?;
    let accused = r.iter().enumerate().filter(|(_, &rj)| rj >= threshold).map(|(j, _)| j).collect();
    Ok(WhiteboxReport {
        projections: r.into_iter().enumerate().collect(),
        accused,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_rejects_too_many_owners() {
        assert!(OwnerBasis::generate(4, 5, 0).is_err());
        assert!(OwnerBasis::generate(4, 0, 0).is_err());
    }

    #[test]
    fn one_dimensional_basis_is_unit() {
        let b = OwnerBasis::generate(1, 1, 0).unwrap();
        assert!((b.vector(0)[0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_basis_reconstructs_vectors() {
        let b = OwnerBasis::generate(4, 4, 9).unwrap();
        let v = [0.3, -1.2, 2.5, 0.01];
        let mut rec = [0.0; 4];
        for j in 0..4 {
            let c = dot(&v, b.vector(j));
            for (r, s) in rec.iter_mut().zip(b.vector(j)) {
                *r += c * s;
            }
        }
        for (a, b) in v.iter().zip(rec) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_carrier_is_degenerate() {
        let d = ProjectionMatrix::generate(6, 3, 1).unwrap();
        let b = OwnerBasis::generate(3, 2, 1).unwrap();
        assert!(matches!(project(&[0.0; 6], &d, b.vector(0)), Err(Error::DegenerateWeights)));
        assert!(matches!(accuse_whitebox(&[0.0; 6], &d, &b, 0.11), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn carrier_length_is_checked() {
        let d = ProjectionMatrix::generate(6, 3, 1).unwrap();
        let b = OwnerBasis::generate(3, 2, 1).unwrap();
        assert!(matches!(project(&[1.0; 5], &d, b.vector(0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn report_serializes_owner_map() {
        let report = WhiteboxReport {
            projections: [(0, 0.5), (3, -0.01)].into_iter().collect(),
            accused: vec![0],
            threshold: 0.11,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"3\":-0.01"));
        let back: WhiteboxReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
