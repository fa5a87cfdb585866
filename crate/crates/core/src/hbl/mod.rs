//! Discrete Hölder–Brascamp–Lieb machinery for loop nests.
//!
//! Given integer array-access homomorphisms `phi_j : Z^d -> Z^{d_j}`, any
//! exponents `s_j in [0,1]` with `rank(H) <= sum_j s_j rank(phi_j(H))` for
//! every subgroup `H <= Z^d` bound the updates a segment can perform by
//! the product of its array footprints raised to the `s_j`.  Checking the
//! rank inequality on the lattice generated by the kernels of the
//! `phi_j` (their closure under subspace sum and intersection, over Q)
//! suffices, which turns exponent optimization into a small exact LP.
//!
//! Everything works over Q rather than Z: rational spans carry exactly
//! the rank information the constraints need, and reduced row echelon
//! form gives every subspace one canonical basis, which makes
//! deduplication a plain equality test.

pub mod linalg;


use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::simplex::{self, LpProblem, LpResult};

/// Default cap on lattice closure size before the search stops and the
/// result is marked truncated.  The convolution and matmul instances stay
/// tiny; the cap exists for user-supplied homomorphism families.
pub const DEFAULT_CLOSURE_CAP: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum HblError {
    #[error("ambient dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty homomorphism family")]
    NoHomomorphisms,
    #[error("constraint system is infeasible: constraint {0} cannot be satisfied")]
    Infeasible(String),
    #[error("homomorphism parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// An integer-matrix homomorphism `Z^d -> Z^{d_j}`; rows are output
/// coordinates expressed as integer combinations of the loop indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntHom {
    pub label: String,
    matrix: Vec<Vec<i64>>,
    dim_in: usize,
}

impl IntHom {
    pub fn new(label: impl Into<String>, matrix: Vec<Vec<i64>>) -> Result<Self, HblError> {
        let dim_in = matrix.first().map_or(0, Vec::len);
        if matrix.is_empty() || dim_in == 0 {
            return Err(HblError::NoHomomorphisms);
        }
        for row in &matrix {
            if row.len() != dim_in {
                return Err(HblError::DimensionMismatch(row.len(), dim_in));
            }
        }
        Ok(Self {
            label: label.into(),
            matrix,
            dim_in,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.matrix.len()
    }

    pub fn rows(&self) -> &[Vec<i64>] {
        &self.matrix
    }

    fn rational_rows(&self) -> Vec<Vec<BigRational>> {
        self.matrix
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| BigRational::from_integer(BigInt::from(v)))
                    .collect()
            })
            .collect()
    }

    /// Image of `v` under the map.
    pub fn apply(&self, v: &[BigRational]) -> Vec<BigRational> {
        linalg::mat_vec(&self.rational_rows(), v)
    }
}

/// A subspace of Q^d held in canonical (reduced row echelon) form, so two
/// values are equal exactly when they span the same subspace.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatSubspace {
    dim: usize,
    basis: Vec<Vec<BigRational>>,
}

impl RatSubspace {
    /// Canonicalizes an arbitrary spanning set.
    pub fn from_spanning(dim: usize, vectors: Vec<Vec<BigRational>>) -> Result<Self, HblError> {
        for v in &vectors {
            if v.len() != dim {
                return Err(HblError::DimensionMismatch(v.len(), dim));
            }
        }
        let mut rows = vectors;
        linalg::rref(&mut rows);
        Ok(Self { dim, basis: rows })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            basis: Vec::new(),
        }
    }

    pub fn full(dim: usize) -> Self {
        let mut basis = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut row = vec![BigRational::zero(); dim];
            row[i] = BigRational::one();
            basis.push(row);
        }
        Self { dim, basis }
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<BigRational>] {
        &self.basis
    }

    pub fn is_zero(&self) -> bool {
        self.basis.is_empty()
    }

    /// Membership test: `v` lies in the span of the basis.
    pub fn contains(&self, v: &[BigRational]) -> bool {
        if v.len() != self.dim {
            return false;
        }
        let mut rows = self.basis.clone();
        rows.push(v.to_vec());
        linalg::rank(&rows) == self.rank()
    }

    /// Rank of the image of this subspace under `hom`.
    pub fn image_rank(&self, hom: &IntHom) -> usize {
        let images: Vec<Vec<BigRational>> = self.basis.iter().map(|v| hom.apply(v)).collect();
        linalg::rank(&images)
    }
}

/// Rational null space of a homomorphism, canonical, with
/// `rank = d - rank(matrix)`.
pub fn kernel_of(hom: &IntHom) -> RatSubspace {
    let basis = linalg::null_space(&hom.rational_rows(), hom.dim_in());
    RatSubspace::from_spanning(hom.dim_in(), basis).expect("kernel vectors have ambient dim")
}

/// Span of the union of the two bases.
pub fn subspace_sum(a: &RatSubspace, b: &RatSubspace) -> Result<RatSubspace, HblError> {
    if a.dim != b.dim {
        return Err(HblError::DimensionMismatch(a.dim, b.dim));
    }
    let mut rows = a.basis.clone();
    rows.extend(b.basis.iter().cloned());
    RatSubspace::from_spanning(a.dim, rows)
}

/// Exact intersection via the null space of the stacked system
/// `sum u_j a_j - sum v_k b_k = 0`.
pub fn subspace_intersect(a: &RatSubspace, b: &RatSubspace) -> Result<RatSubspace, HblError> {
    if a.dim != b.dim {
        return Err(HblError::DimensionMismatch(a.dim, b.dim));
    }
    if a.is_zero() || b.is_zero() {
        return Ok(RatSubspace::zero(a.dim));
    }
    let na = a.basis.len();
    let nb = b.basis.len();
    // One equation per ambient coordinate, unknowns (u, v).
    let mut system = Vec::with_capacity(a.dim);
    for coord in 0..a.dim {
        let mut row = Vec::with_capacity(na + nb);
        for u in &a.basis {
            row.push(u[coord].clone());
        }
        for v in &b.basis {
            row.push(-v[coord].clone());
        }
        system.push(row);
    }
    let solutions = linalg::null_space(&system, na + nb);
    let vectors: Vec<Vec<BigRational>> = solutions
        .iter()
        .map(|sol| {
            let mut v = vec![BigRational::zero(); a.dim];
            for (j, u) in a.basis.iter().enumerate() {
                for c in 0..a.dim {
                    let delta = &sol[j] * &u[c];
                    v[c] += delta;
                }
            }
            v
        })
        .collect();
    RatSubspace::from_spanning(a.dim, vectors)
}

/// The lattice generated by a family of subspaces: closed under pairwise
/// sum and intersection, always containing the zero subspace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    members: Vec<RatSubspace>,
    truncated: bool,
}

impl Lattice {
    pub fn members(&self) -> &[RatSubspace] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// True when closure stopped at the member cap; constraints derived
    /// from a truncated lattice are still sound, just possibly incomplete.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn contains(&self, s: &RatSubspace) -> bool {
        self.members.contains(s)
    }
}

/// Fixpoint of the seeds under sum and intersection, capped at `cap`
/// members (see [`DEFAULT_CLOSURE_CAP`]).
pub fn lattice_closure_capped(seeds: &[RatSubspace], cap: usize) -> Result<Lattice, HblError> {
    let dim = match seeds.first() {
        Some(s) => s.ambient_dim(),
        None => return Ok(Lattice {
            members: vec![RatSubspace::zero(0)],
            truncated: false,
        }),
    };
    for s in seeds {
        if s.ambient_dim() != dim {
            return Err(HblError::DimensionMismatch(s.ambient_dim(), dim));
        }
    }

    let mut members: BTreeSet<RatSubspace> = BTreeSet::new();
    members.insert(RatSubspace::zero(dim));
    for s in seeds {
        members.insert(s.clone());
    }
    let mut truncated = false;
    loop {
        let snapshot: Vec<RatSubspace> = members.iter().cloned().collect();
        let mut grew = false;
        'pairs: for i in 0..snapshot.len() {
            for j in (i + 1)..snapshot.len() {
                for candidate in [
                    subspace_sum(&snapshot[i], &snapshot[j])?,
                    subspace_intersect(&snapshot[i], &snapshot[j])?,
                ] {
                    if members.insert(candidate) {
                        grew = true;
                        if members.len() > cap {
                            truncated = true;
                            break 'pairs;
                        }
                    }
                }
            }
        }
        if !grew || truncated {
            break;
        }
    }
    Ok(Lattice {
        members: members.into_iter().collect(),
        truncated,
    })
}

pub fn lattice_closure(seeds: &[RatSubspace]) -> Result<Lattice, HblError> {
    lattice_closure_capped(seeds, DEFAULT_CLOSURE_CAP)
}

/// One rank inequality `lhs_rank <= sum_j coeffs[j] * s_j`, with the gcd
/// of all entries divided out.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HblConstraint {
    pub coeffs: Vec<u64>,
    pub lhs_rank: u64,
}

impl HblConstraint {
    fn normalized(lhs_rank: u64, coeffs: Vec<u64>) -> Self {
        let mut g = lhs_rank;
        for &c in &coeffs {
            g = gcd(g, c);
        }
        if g > 1 {
            Self {
                coeffs: coeffs.iter().map(|c| c / g).collect(),
                lhs_rank: lhs_rank / g,
            }
        } else {
            Self { coeffs, lhs_rank }
        }
    }

    /// Exact satisfaction check.
    pub fn satisfied_by(&self, s: &[BigRational]) -> bool {
        let mut total = BigRational::zero();
        for (c, sj) in self.coeffs.iter().zip(s) {
            total += BigRational::from_integer(BigInt::from(*c)) * sj;
        }
        total >= BigRational::from_integer(BigInt::from(self.lhs_rank))
    }

    pub fn display_with(&self, labels: &[String]) -> String {
        let mut terms = Vec::new();
        for (c, label) in self.coeffs.iter().zip(labels) {
            match c {
                0 => {}
                1 => terms.push(format!("s_{label}")),
                c => terms.push(format!("{c}*s_{label}")),
            }
        }
        if terms.is_empty() {
            terms.push("0".to_string());
        }
        format!("{} <= {}", self.lhs_rank, terms.join(" + "))
    }
}

impl fmt::Display for HblConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = (1..=self.coeffs.len()).map(|i| i.to_string()).collect();
        write!(f, "{}", self.display_with(&labels))
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The rank inequality induced by a single lattice member.
pub fn member_constraint(member: &RatSubspace, homs: &[IntHom]) -> HblConstraint {
    let coeffs: Vec<u64> = homs
        .iter()
        .map(|h| member.image_rank(h) as u64)
        .collect();
    HblConstraint::normalized(member.rank() as u64, coeffs)
}

/// Constraints of every nonzero lattice member: normalized, deduplicated,
/// and with conically redundant rows removed, so the surviving set is the
/// irredundant system the LP actually needs (for the convolution nest
/// this is exactly the four-row table).
///
/// The ambient space is always included as a member: it is a subgroup of
/// itself and its rank inequality (d <= sum s_j rank(phi_j)) is the one
/// constraint left standing when the kernels are trivial.
pub fn derive_constraints(lattice: &Lattice, homs: &[IntHom]) -> Result<Vec<HblConstraint>, HblError> {
    if homs.is_empty() {
        return Err(HblError::NoHomomorphisms);
    }
    let dim = homs[0].dim_in();
    for h in homs {
        if h.dim_in() != dim {
            return Err(HblError::DimensionMismatch(h.dim_in(), dim));
        }
    }
    for m in lattice.members() {
        if m.ambient_dim() != dim {
            return Err(HblError::DimensionMismatch(m.ambient_dim(), dim));
        }
    }

    let mut set: BTreeSet<HblConstraint> = BTreeSet::new();
    for member in lattice.members() {
        if member.rank() == 0 {
            continue; // vacuous 0 <= ...
        }
        set.insert(member_constraint(member, homs));
    }
    set.insert(member_constraint(&RatSubspace::full(dim), homs));
    let mut kept: Vec<HblConstraint> = set.into_iter().collect();

    // Drop any constraint that is a nonnegative combination of the others
    // (Farkas): max sum(lambda_l * lhs_l) s.t. sum(lambda_l * coeffs_l) <=
    // coeffs componentwise reaching lhs means the row adds nothing.
    let mut i = 0;
    while i < kept.len() {
        let candidate = kept[i].clone();
        let others: Vec<&HblConstraint> = kept
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, c)| c)
            .collect();
        if is_conically_redundant(&candidate, &others) {
            kept.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(kept)
}

fn is_conically_redundant(candidate: &HblConstraint, others: &[&HblConstraint]) -> bool {
    if others.is_empty() {
        return false;
    }
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    let mut lp = LpProblem::new(others.iter().map(|c| int(c.lhs_rank)).collect());
    let m = candidate.coeffs.len();
    for j in 0..m {
        let row: Vec<BigRational> = others.iter().map(|c| int(c.coeffs[j])).collect();
        lp.add_le(row, int(candidate.coeffs[j]));
    }
    match simplex::maximize(&lp) {
        LpResult::Optimal { value, .. } => value >= int(candidate.lhs_rank),
        LpResult::Unbounded => true,
        LpResult::Infeasible => false,
    }
}

/// HBL exponents with the minimal total, exact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExponentVector {
    pub s: Vec<BigRational>,
    pub total: BigRational,
}

/// Minimizes `sum s_j` over `s in [0,1]^m` subject to the constraints.
///
/// Feasibility is pre-validated: `s = (1,...,1)` works exactly when every
/// row's coefficients cover its rank, and a row that fails that test can
/// never be satisfied.  Among minimizing vectors the result is pinned
/// deterministically: first the largest component is minimized, then the
/// vector is lexicographically minimized, so symmetric systems return the
/// symmetric optimum.
pub fn minimize_exponents(constraints: &[HblConstraint]) -> Result<ExponentVector, HblError> {
    let m = constraints
        .first()
        .map(|c| c.coeffs.len())
        .ok_or(HblError::NoHomomorphisms)?;
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    for c in constraints {
        if c.coeffs.len() != m {
            return Err(HblError::DimensionMismatch(c.coeffs.len(), m));
        }
        let cover: u64 = c.coeffs.iter().sum();
        if cover < c.lhs_rank {
            return Err(HblError::Infeasible(c.to_string()));
        }
    }

    // Variables 0..m are the exponents; variable m is the envelope used
    // for the min-max tie-break.
    let base = |with_envelope: bool, objective: Vec<BigRational>| {
        let n = if with_envelope { m + 1 } else { m };
        let mut lp = LpProblem::new(objective);
        for c in constraints {
            let mut row = vec![BigRational::zero(); n];
            for (j, coeff) in c.coeffs.iter().enumerate() {
                row[j] = int(*coeff);
            }
            lp.add_ge(row, int(c.lhs_rank));
        }
        for j in 0..m {
            let mut row = vec![BigRational::zero(); n];
            row[j] = BigRational::one();
            lp.add_le(row, BigRational::one());
        }
        lp
    };

    // Stage 1: minimal total.
    let lp1 = base(false, vec![BigRational::one(); m]);
    let total = match simplex::minimize(&lp1) {
        LpResult::Optimal { value, .. } => value,
        _ => return Err(HblError::Infeasible("total".into())),
    };

    // Stage 2: minimize the maximum component at that total.
    let mut lp2 = base(true, {
        let mut obj = vec![BigRational::zero(); m + 1];
        obj[m] = BigRational::one();
        obj
    });
    for j in 0..m {
        let mut row = vec![BigRational::zero(); m + 1];
        row[j] = BigRational::one();
        row[m] = -BigRational::one();
        lp2.add_le(row, BigRational::zero());
    }
    let mut sum_row = vec![BigRational::one(); m + 1];
    sum_row[m] = BigRational::zero();
    lp2.add_eq(sum_row, total.clone());
    let envelope = match simplex::minimize(&lp2) {
        LpResult::Optimal { value, .. } => value,
        _ => return Err(HblError::Infeasible("envelope".into())),
    };

    // Stage 3: lexicographic minimum within the optimal face.
    let mut fixed: Vec<BigRational> = Vec::with_capacity(m);
    for j in 0..m {
        let mut obj = vec![BigRational::zero(); m];
        obj[j] = BigRational::one();
        let mut lp = base(false, obj);
        lp.add_eq(vec![BigRational::one(); m], total.clone());
        for (i, v) in fixed.iter().enumerate() {
            let mut row = vec![BigRational::zero(); m];
            row[i] = BigRational::one();
            lp.add_eq(row, v.clone());
        }
        for k in 0..m {
            let mut row = vec![BigRational::zero(); m];
            row[k] = BigRational::one();
            lp.add_le(row, envelope.clone());
        }
        let value = match simplex::minimize(&lp) {
            LpResult::Optimal { value, .. } => value,
            _ => return Err(HblError::Infeasible(format!("lex stage {j}"))),
        };
        fixed.push(value);
    }

    // Exact re-verification against every input constraint.
    for c in constraints {
        if !c.satisfied_by(&fixed) {
            return Err(HblError::Infeasible(c.to_string()));
        }
    }
    for s in &fixed {
        if s.is_negative() || s > &BigRational::one() {
            return Err(HblError::Infeasible("exponent out of [0,1]".into()));
        }
    }
    Ok(ExponentVector { s: fixed, total })
}

/// End-to-end: kernels, closure, constraints, optimal exponents.
pub fn optimal_exponents(homs: &[IntHom]) -> Result<(Vec<HblConstraint>, ExponentVector), HblError> {
    let kernels: Vec<RatSubspace> = homs.iter().map(kernel_of).collect();
    let lattice = lattice_closure(&kernels)?;
    let constraints = derive_constraints(&lattice, homs)?;
    let exps = minimize_exponents(&constraints)?;
    Ok((constraints, exps))
}

// ---------------------------------------------------------------------------
// The convolution nest's access maps.
// ---------------------------------------------------------------------------

/// Array-access maps of the seven-loop nest on indices
/// (i1..i7) = (image, c_in, c_out, w_out, h_out, w_f, h_f):
/// input (i1, i2, sw*i4 + i6, sh*i5 + i7), filter (i2, i3, i6, i7),
/// output (i1, i3, i4, i5).
pub fn cnn_homomorphisms(stride_w: u64, stride_h: u64) -> [IntHom; 3] {
    let sw = stride_w as i64;
    let sh = stride_h as i64;
    let input = IntHom::new(
        "I",
        vec![
            vec![1, 0, 0, 0, 0, 0, 0],
            vec![0, 1, 0, 0, 0, 0, 0],
            vec![0, 0, 0, sw, 0, 1, 0],
            vec![0, 0, 0, 0, sh, 0, 1],
        ],
    )
    .unwrap();
    let filter = IntHom::new(
        "F",
        vec![
            vec![0, 1, 0, 0, 0, 0, 0],
            vec![0, 0, 1, 0, 0, 0, 0],
            vec![0, 0, 0, 0, 0, 1, 0],
            vec![0, 0, 0, 0, 0, 0, 1],
        ],
    )
    .unwrap();
    let output = IntHom::new(
        "O",
        vec![
            vec![1, 0, 0, 0, 0, 0, 0],
            vec![0, 0, 1, 0, 0, 0, 0],
            vec![0, 0, 0, 1, 0, 0, 0],
            vec![0, 0, 0, 0, 1, 0, 0],
        ],
    )
    .unwrap();
    [input, filter, output]
}

/// Access maps after the small-filter index rewrite `i6 = sw*q6 + r6`,
/// `i7 = sh*q7 + r7`, on variables (i1, i2, i3, i4, i5, r6, r7) with the
/// quotient coordinates held fixed: every variable appears in exactly two
/// maps (a tensor contraction).
pub fn lifted_homomorphisms() -> [IntHom; 3] {
    let select = |label: &str, cols: &[usize]| {
        let rows = cols
            .iter()
            .map(|&c| {
                let mut row = vec![0i64; 7];
                row[c] = 1;
                row
            })
            .collect();
        IntHom::new(label, rows).unwrap()
    };
    [
        select("I", &[0, 1, 3, 5, 4, 6]),
        select("F", &[1, 2, 5, 6]),
        select("O", &[0, 2, 3, 4]),
    ]
}

// ---------------------------------------------------------------------------
// Plain-text matrix import (one matrix per blank-line-separated block).
// ---------------------------------------------------------------------------

/// Parses homomorphism families from text: blocks of rows of
/// space-separated integers, blank lines between matrices, optional
/// `# name` comment naming the following matrix.
pub fn parse_homomorphisms(text: &str) -> Result<Vec<IntHom>, HblError> {
    let mut homs = Vec::new();
    let mut current: Vec<Vec<i64>> = Vec::new();
    let mut label: Option<String> = None;
    let flush = |current: &mut Vec<Vec<i64>>,
                     label: &mut Option<String>,
                     homs: &mut Vec<IntHom>,
                     line: usize|
     -> Result<(), HblError> {
        if current.is_empty() {
            return Ok(());
        }
        let name = label
            .take()
            .unwrap_or_else(|| format!("phi{}", homs.len() + 1));
        let hom = IntHom::new(name, std::mem::take(current)).map_err(|e| HblError::Parse {
            line,
            message: e.to_string(),
        })?;
        homs.push(hom);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            if current.is_empty() && !comment.trim().is_empty() {
                label = Some(comment.trim().to_string());
            }
            continue;
        }
        if trimmed.is_empty() {
            flush(&mut current, &mut label, &mut homs, line)?;
            continue;
        }
        let row: Result<Vec<i64>, _> = trimmed.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|e| HblError::Parse {
            line,
            message: format!("bad integer: {e}"),
        })?;
        if let Some(first) = current.first() {
            if first.len() != row.len() {
                return Err(HblError::Parse {
                    line,
                    message: format!("row length {} != {}", row.len(), first.len()),
                });
            }
        }
        current.push(row);
    }
    let last_line = text.lines().count();
    flush(&mut current, &mut label, &mut homs, last_line)?;
    if homs.is_empty() {
        return Err(HblError::NoHomomorphisms);
    }
    let d = homs[0].dim_in();
    for h in &homs {
        if h.dim_in() != d {
            return Err(HblError::DimensionMismatch(h.dim_in(), d));
        }
    }
    Ok(homs)
}
