//! Dense `O(D²)` geometric-product matrices, used only to verify the rolling
//! computation.

use crate::tensor::Real;

/// Row-major `D×D` matrices of the full channel interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseProduct<T> {
    pub dim: usize,
    /// `dot[i][j] = u_i · v_j`
    pub dot: Vec<T>,
    /// `wedge[i][j] = u_i · v_j − v_i · u_j`
    pub wedge: Vec<T>,
}

impl<T: Real> DenseProduct<T> {
    pub fn dot_at(&self, i: usize, j: usize) -> T {
        self.dot[i * self.dim + j]
    }

    pub fn wedge_at(&self, i: usize, j: usize) -> T {
        self.wedge[i * self.dim + j]
    }

    /// Coefficient of `e_i ∧ e_j` in the canonical ordered basis (`i < j`).
    pub fn bivector_coefficient(&self, i: usize, j: usize) -> T {
        assert!(i < j, "canonical basis needs i < j, got ({i}, {j})");
        self.wedge_at(i, j)
    }
}

pub fn dense_product_oracle<T: Real>(u: &[T], v: &[T]) -> DenseProduct<T> {
    assert_eq!(u.len(), v.len(), "oracle inputs must have equal length");
    let d = u.len();
    let mut dot = vec![T::zero(); d * d];
    let mut wedge = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            dot[i * d + j] = u[i] * v[j];
            wedge[i * d + j] = u[i] * v[j] - v[i] * u[j];
        }
    }
    DenseProduct { dim: d, dot, wedge }
}

/// Wrapped diagonal at offset `s`: `out[c] = matrix[c][(c + s) mod D]`.
pub fn extract_slice<T: Real>(matrix: &[T], dim: usize, s: usize) -> Vec<T> {
    assert_eq!(matrix.len(), dim * dim, "matrix must be {dim}x{dim}");
    (0..dim).map(|c| matrix[c * dim + (c + s) % dim]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wedge_matrix_is_antisymmetric_with_zero_diagonal() {
        let u = [0.5f64, -1.0, 2.0, 0.25];
        let v = [1.5f64, 0.75, -0.5, 3.0];
        let p = dense_product_oracle(&u, &v);
        for i in 0..4 {
            assert_eq!(p.wedge_at(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(p.wedge_at(i, j), -p.wedge_at(j, i));
            }
        }
    }

    #[test]
    fn identity_slices() {
        let d = 5;
        let eye: Vec<f32> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
        assert!(extract_slice(&eye, d, 0).iter().all(|&x| x == 1.0));
        for s in 1..d {
            assert!(extract_slice(&eye, d, s).iter().all(|&x| x == 0.0));
        }
    }
}
