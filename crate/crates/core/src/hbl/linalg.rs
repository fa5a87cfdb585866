//! Minimal dense linear algebra over exact rationals: reduced row echelon
//! form, rank, and null spaces.  Enough for subspace arithmetic in
//! dimension <= a few dozen; nothing here is performance sensitive.

use num_rational::BigRational;
use num_traits::{One, Zero};

/// Reduces `rows` in place to reduced row echelon form and returns the
/// pivot column of each nonzero row (so `pivots.len()` is the rank).
/// Zero rows are removed.
pub fn rref(rows: &mut Vec<Vec<BigRational>>) -> Vec<usize> {
    let ncols = rows.first().map_or(0, Vec::len);
    let mut pivots = Vec::new();
    let mut next_row = 0;
    for col in 0..ncols {
        let Some(pivot_row) = (next_row..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(next_row, pivot_row);
        let inv = rows[next_row][col].clone();
        for v in rows[next_row].iter_mut() {
            *v /= &inv;
        }
        for r in 0..rows.len() {
            if r != next_row && !rows[r][col].is_zero() {
                let factor = rows[r][col].clone();
                for c in 0..ncols {
                    let delta = &factor * &rows[next_row][c];
                    rows[r][c] -= delta;
                }
            }
        }
        pivots.push(col);
        next_row += 1;
        if next_row == rows.len() {
            break;
        }
    }
    rows.truncate(next_row);
    pivots
}

/// Rank of an arbitrary rational matrix (rows need not be independent).
pub fn rank(rows: &[Vec<BigRational>]) -> usize {
    let mut copy: Vec<Vec<BigRational>> = rows.to_vec();
    rref(&mut copy).len()
}

/// Basis of the null space `{x : rows * x = 0}` in RREF order.
pub fn null_space(rows: &[Vec<BigRational>], ncols: usize) -> Vec<Vec<BigRational>> {
    let mut copy: Vec<Vec<BigRational>> = rows.to_vec();
    let pivots = rref(&mut copy);
    let free: Vec<usize> = (0..ncols).filter(|c| !pivots.contains(c)).collect();
    let mut basis = Vec::with_capacity(free.len());
    for &f in &free {
        let mut v = vec![BigRational::zero(); ncols];
        v[f] = BigRational::one();
        for (r, &p) in pivots.iter().enumerate() {
            v[p] = -copy[r][f].clone();
        }
        basis.push(v);
    }
    basis
}

/// `matrix * vector` for a d_out x d_in matrix.
pub fn mat_vec(matrix: &[Vec<BigRational>], vector: &[BigRational]) -> Vec<BigRational> {
    matrix
        .iter()
        .map(|row| {
            row.iter()
                .zip(vector)
                .map(|(a, b)| a * b)
                .fold(BigRational::zero(), |acc, t| acc + t)
        })
        .collect()
}
