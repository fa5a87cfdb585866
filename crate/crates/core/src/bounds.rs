//! Closed-form communication lower bounds with exact constants and mixed
//! precisions.
//!
//! Serial: X >= max{ p_I|I| + p_F|F| + p_O|O|,  C_p G / M - M,
//! 2 sqrt(p_I p_F p_O sigma_w sigma_h) G / sqrt(w_F h_F M) - 2M }.
//! Parallel: the memory-dependent pair divides the decaying terms by P;
//! the memory-independent pair multiplies (p_I p_F p_O)^(1/3) into
//! sqrt(G/P) and ((G sigma_w sigma_h)/(P w_F h_F))^(2/3) and subtracts the
//! load-balanced share A_p / P.
//!
//! Every irrational factor is computed as a rational rounded DOWN with
//! relative error below 2^-64, so no reported bound ever overstates.

use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::layer::{derive_sizes, uint_rat, ArrayId, ConvLayer, ModelError, PrecisionTriple};
use crate::machine::{ParallelMachine, SerialMachine};
use crate::ratmath::{nth_root_floor, sqrt_floor};

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("machine must have at least one word of memory and one processor")]
    DegenerateMachine,
}

/// Which serial term realizes the max.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerialTerm {
    Trivial,
    LargeFilter,
    SmallFilter,
}

impl std::fmt::Display for SerialTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SerialTerm::Trivial => write!(f, "trivial"),
            SerialTerm::LargeFilter => write!(f, "large-filter"),
            SerialTerm::SmallFilter => write!(f, "small-filter"),
        }
    }
}

/// The three serial terms, their max, and the dominating tag.
#[derive(Clone, Debug, PartialEq)]
pub struct SerialBoundReport {
    /// p_I|I| + p_F|F| + p_O|O| (compulsory traffic), always positive.
    pub term_trivial: BigRational,
    /// C_p G / M - M; may be negative for large caches.
    pub term_large_filter: BigRational,
    /// 2 sqrt(p_I p_F p_O sigma_w sigma_h / (w_F h_F M)) G - 2M.
    pub term_small_filter: BigRational,
    /// Square of the small-filter leading factor,
    /// 4 p_I p_F p_O sigma_w sigma_h G^2 / (w_F h_F M): exact, used by the
    /// scaling checks that the rounded term cannot support.
    pub small_filter_lead_sq: BigRational,
    /// max of the three terms (>= term_trivial > 0).
    pub bound: BigRational,
    pub dominating_term: SerialTerm,
}

/// The precision constant of the large-filter bound: p_T^2 / 4 under the
/// triangle condition, otherwise p_j (p_k + p_l) for the violating j.
pub fn cp(prec: &PrecisionTriple) -> BigRational {
    match prec.triangle_violation() {
        None => {
            let t = prec.p_total();
            &t * &t / uint_rat(4)
        }
        Some(j) => {
            let pj = prec.get(j);
            let others: BigRational = [ArrayId::Input, ArrayId::Filter, ArrayId::Output]
                .into_iter()
                .filter(|&k| k != j)
                .map(|k| prec.get(k).clone())
                .fold(BigRational::zero(), |acc, p| acc + p);
            pj * others
        }
    }
}

pub fn serial_lower_bound(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &SerialMachine,
) -> Result<SerialBoundReport, BoundError> {
    if machine.cache_words == 0 {
        return Err(BoundError::DegenerateMachine);
    }
    let sizes = derive_sizes(layer, prec)?;
    let m = uint_rat(machine.cache_words as u128);
    let g = uint_rat(sizes.g_total);

    let term_trivial = sizes.compulsory_words(prec);
    let term_large_filter = cp(prec) * &g / &m - &m;

    let wf_hf = uint_rat(layer.w_f as u128 * layer.h_f as u128);
    let strides = uint_rat(layer.stride_w as u128 * layer.stride_h as u128);
    let inner = prec.p_product() * &strides / (&wf_hf * &m);
    let lead = uint_rat(2) * &g * sqrt_floor(&inner);
    let term_small_filter = &lead - uint_rat(2) * &m;
    let small_filter_lead_sq = uint_rat(4) * prec.p_product() * strides * &g * &g / (wf_hf * &m);

    let (bound, dominating_term) = [
        (term_trivial.clone(), SerialTerm::Trivial),
        (term_large_filter.clone(), SerialTerm::LargeFilter),
        (term_small_filter.clone(), SerialTerm::SmallFilter),
    ]
    .into_iter()
    .max_by(|(a, _), (b, _)| a.cmp(b))
    .unwrap();

    Ok(SerialBoundReport {
        term_trivial,
        term_large_filter,
        term_small_filter,
        small_filter_lead_sq,
        bound,
        dominating_term,
    })
}

/// True iff the small-filter decay term eclipses the large-filter one.
///
/// The comparison is between the leading (M-decaying) factors, which for
/// unit precisions reduces exactly to the closed threshold
/// `w_F h_F < 64 M sigma_w sigma_h / 81`; both sides are squared so the
/// test is a single exact rational comparison.
pub fn small_filter_dominates(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &SerialMachine,
) -> Result<bool, BoundError> {
    if machine.cache_words == 0 {
        return Err(BoundError::DegenerateMachine);
    }
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(BoundError::Model(ModelError::InvalidLayer(violations)));
    }
    // 2 sqrt(ppp * ss) / sqrt(wf hf M) > C_p / M, squared:
    // 4 ppp ss M > C_p^2 wf hf.
    let c = cp(prec);
    let lhs = uint_rat(4)
        * prec.p_product()
        * uint_rat(layer.stride_w as u128 * layer.stride_h as u128)
        * uint_rat(machine.cache_words as u128);
    let rhs = &c * &c * uint_rat(layer.w_f as u128 * layer.h_f as u128);
    Ok(lhs > rhs)
}

/// Parallel report: the two memory-dependent terms (Theorem-2 shaped) and
/// the two memory-independent terms (Theorem-3 shaped, requiring the
/// load-balance assumption).
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelBoundReport {
    /// C_p G / (P M) - M.
    pub md_large: BigRational,
    /// 2 sqrt(p_I p_F p_O sigma_w sigma_h / (w_F h_F M)) G / P - 2M.
    pub md_small: BigRational,
    /// (p_I p_F p_O)^(1/3) sqrt(G/P) - A_p/P.
    pub mi_cube: BigRational,
    /// (p_I p_F p_O)^(1/3) ((G sw sh) / (P wf hf))^(2/3) - A_p/P.
    pub mi_small: BigRational,
    /// max(md terms, 0).
    pub bound_md: BigRational,
    /// max(mi terms, 0).
    pub bound_mi: BigRational,
    /// max(bound_md, bound_mi); a per-processor word count.
    pub bound: BigRational,
    /// The mi terms assume every array starts evenly distributed.
    pub mi_assumes_load_balance: bool,
    /// Both md terms are vacuous in this (M, P) regime:
    /// M > 3 sqrt(G)/ (2 sqrt(P)) and M^3 > G^2 sw sh / (P^2 wf hf).
    pub md_trivial_regime: bool,
}

pub fn parallel_lower_bound(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &ParallelMachine,
) -> Result<ParallelBoundReport, BoundError> {
    if machine.processors == 0 || machine.mem_words_per_proc == 0 {
        return Err(BoundError::DegenerateMachine);
    }
    let sizes = derive_sizes(layer, prec)?;
    let m = uint_rat(machine.mem_words_per_proc as u128);
    let p = uint_rat(machine.processors as u128);
    let g = uint_rat(sizes.g_total);
    let wf_hf = uint_rat(layer.w_f as u128 * layer.h_f as u128);
    let strides = uint_rat(layer.stride_w as u128 * layer.stride_h as u128);

    let md_large = cp(prec) * &g / (&p * &m) - &m;
    let inner = prec.p_product() * &strides / (&wf_hf * &m);
    let md_small = uint_rat(2) * &g * sqrt_floor(&inner) / &p - uint_rat(2) * &m;

    let share = &sizes.a_p / &p;
    // (ppp)^(1/3) * (G/P)^(1/2) as a single sixth root keeps one rounding.
    let ppp = prec.p_product();
    let cube_arg = &ppp * &ppp * &g * &g * &g / (&p * &p * &p);
    let mi_cube = nth_root_floor(&cube_arg, 6) - &share;
    let small_arg = &ppp * (&g * &strides / (&p * &wf_hf)).pow(2);
    let mi_small = nth_root_floor(&small_arg, 3) - &share;

    let zero = BigRational::zero();
    let bound_md = md_large.clone().max(md_small.clone()).max(zero.clone());
    let bound_mi = mi_cube.clone().max(mi_small.clone()).max(zero);
    let bound = bound_md.clone().max(bound_mi.clone());

    // Exact regime test with both sides raised to integer powers.
    let md_trivial_regime = {
        let first = uint_rat(4) * &p * &m * &m > uint_rat(9) * &g; // M > 3 sqrt(G) / (2 sqrt(P))
        let second = &m * &m * &m * &p * &p * &wf_hf > &g * &g * &strides;
        first && second
    };

    Ok(ParallelBoundReport {
        md_large,
        md_small,
        mi_cube,
        mi_small,
        bound_md,
        bound_mi,
        bound,
        mi_assumes_load_balance: true,
        md_trivial_regime,
    })
}
