//! Parallel blocking: each processor receives a box of the seven-loop
//! nest.  The LP fixes per-processor work at the fair share G/P (the
//! budget row) and minimizes the memory envelope that the output, filter,
//! and four input halo terms must fit under, weighted p_T for whole
//! arrays and 4 p_T for the split input terms; a second phase then
//! minimizes total work at that envelope so the solution is unique and
//! deterministic.  Integerization converts segment lengths to per-axis
//! processor counts (never exceeding the budget) and greedily refines the
//! grid while it reduces per-processor work.

use num_rational::BigRational;
use num_traits::Zero;

use crate::layer::{derive_sizes, uint_rat, ConvLayer, PrecisionTriple};
use crate::machine::ParallelMachine;
use crate::ratmath::{log2_rat, log2_slop, rat_to_f64};
use crate::simplex::{self, LpProblem, LpResult};

use super::{LpSolution, ParallelTiling, TilerError};

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelTileOutcome {
    pub tiling: ParallelTiling,
    pub lp: LpSolution,
}

/// A violated parallel-tiling invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParallelTilingViolation {
    SegmentOutOfRange { index: usize, a: u64, extent: u64 },
    BudgetExceeded { cells: u128, processors: u64 },
}

/// Segment lengths within [1, extent] and grid cells within the
/// processor budget.
pub fn validate_parallel_tiling(
    layer: &ConvLayer,
    machine: &ParallelMachine,
    tiling: &ParallelTiling,
) -> Result<(), ParallelTilingViolation> {
    let extents = layer.loop_extents();
    for (index, (&a, &extent)) in tiling.as_array().iter().zip(&extents).enumerate() {
        if a < 1 || a > extent {
            return Err(ParallelTilingViolation::SegmentOutOfRange { index, a, extent });
        }
    }
    let cells = tiling.grid_cells(layer);
    if cells > machine.processors as u128 {
        return Err(ParallelTilingViolation::BudgetExceeded {
            cells,
            processors: machine.processors,
        });
    }
    Ok(())
}

/// Row variable subsets: output, filter, and the four input halo terms.
const SUBSETS: [[u64; 7]; 6] = [
    [1, 0, 1, 1, 1, 0, 0],
    [0, 1, 1, 0, 0, 1, 1],
    [1, 1, 0, 1, 1, 0, 0],
    [1, 1, 0, 1, 0, 0, 1],
    [1, 1, 0, 0, 1, 1, 0],
    [1, 1, 0, 0, 0, 1, 1],
];

pub fn parallel_lp_tiles(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &ParallelMachine,
) -> Result<ParallelTileOutcome, TilerError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(TilerError::InvalidLayer(violations));
    }
    let sizes = derive_sizes(layer, prec).map_err(|e| TilerError::LpFailed(e.to_string()))?;
    let total_words = sizes.compulsory_words(prec);
    let available = machine.processors as u128 * machine.mem_words_per_proc as u128;
    if total_words > uint_rat(available) {
        return Err(TilerError::AggregateMemoryExceeded {
            required_words: crate::layer::format_rational(&total_words),
            available_words: available,
        });
    }

    let extents = layer.loop_extents();
    if machine.processors == 1 {
        let tiling = ParallelTiling::from_array(extents);
        let x_exact: Vec<BigRational> = extents
            .iter()
            .map(|&e| log2_rat(&uint_rat(e as u128)))
            .collect();
        let objective: BigRational = x_exact.iter().fold(BigRational::zero(), |a, v| a + v);
        let lp = LpSolution {
            x: x_exact.iter().map(rat_to_f64).collect(),
            objective: rat_to_f64(&objective),
            tight_constraints: Vec::new(),
            x_exact,
        };
        return Ok(ParallelTileOutcome { tiling, lp });
    }

    // Variables: seven log2 segment lengths plus the envelope t split
    // into a positive and negative part (t may be negative for
    // sub-word-precision inputs).
    let nvars = 9;
    let p_t = prec.p_total();
    let sw = uint_rat(layer.stride_w as u128);
    let sh = uint_rat(layer.stride_h as u128);
    let four = uint_rat(4);
    let row_weight = [
        p_t.clone(),
        p_t.clone(),
        &four * &p_t * &sw * &sh,
        &four * &p_t * &sw,
        &four * &p_t * &sh,
        &four * &p_t,
    ];

    let slop = log2_slop();
    let g_over_p =
        uint_rat(sizes.g_total) / uint_rat(machine.processors as u128);
    let work_rhs = log2_rat(&g_over_p);
    let ub: Vec<BigRational> = extents
        .iter()
        .map(|&e| log2_rat(&uint_rat(e as u128)) + &slop)
        .collect();

    let build = |objective: Vec<BigRational>| {
        let mut lp = LpProblem::new(objective);
        for (r, subset) in SUBSETS.iter().enumerate() {
            let mut row: Vec<BigRational> = subset.iter().map(|&c| uint_rat(c as u128)).collect();
            row.push(-BigRational::from_integer(1.into())); // -t_pos
            row.push(BigRational::from_integer(1.into())); // +t_neg
            lp.add_le(row, -log2_rat(&row_weight[r]));
        }
        let mut work_row = vec![BigRational::from_integer(1.into()); 7];
        work_row.push(BigRational::zero());
        work_row.push(BigRational::zero());
        lp.add_ge(work_row, work_rhs.clone());
        for (i, bound) in ub.iter().enumerate() {
            let mut row = vec![BigRational::zero(); nvars];
            row[i] = BigRational::from_integer(1.into());
            lp.add_le(row, bound.clone());
        }
        lp
    };

    // Phase 1: smallest envelope.
    let mut envelope_obj = vec![BigRational::zero(); nvars];
    envelope_obj[7] = BigRational::from_integer(1.into());
    envelope_obj[8] = -BigRational::from_integer(1.into());
    let phase1 = build(envelope_obj);
    let t_star = match simplex::minimize(&phase1) {
        LpResult::Optimal { value, .. } => value,
        other => return Err(TilerError::LpFailed(format!("phase 1: {other:?}"))),
    };

    // Phase 2: least work at that envelope.
    let mut work_obj = vec![BigRational::from_integer(1.into()); 7];
    work_obj.push(BigRational::zero());
    work_obj.push(BigRational::zero());
    let mut phase2 = build(work_obj);
    let mut t_row = vec![BigRational::zero(); nvars];
    t_row[7] = BigRational::from_integer(1.into());
    t_row[8] = -BigRational::from_integer(1.into());
    phase2.add_eq(t_row, t_star);
    let (x_exact_full, objective) = match simplex::minimize(&phase2) {
        LpResult::Optimal { x, value } => (x, value),
        other => return Err(TilerError::LpFailed(format!("phase 2: {other:?}"))),
    };
    let x_exact: Vec<BigRational> = x_exact_full[..7].to_vec();

    let tight_constraints = {
        let mut tight = Vec::new();
        for (i, (coeffs, rhs)) in phase2.constraints.iter().enumerate().take(7 + 7) {
            let lhs: BigRational = coeffs
                .iter()
                .zip(&x_exact_full)
                .map(|(c, v)| c * v)
                .fold(BigRational::zero(), |acc, t| acc + t);
            if lhs == *rhs {
                tight.push(i);
            }
        }
        tight
    };

    let lp = LpSolution {
        x: x_exact.iter().map(rat_to_f64).collect(),
        objective: rat_to_f64(&objective),
        tight_constraints,
        x_exact,
    };

    let tiling = integerize(layer, prec, &sizes, machine.processors, &lp.x);
    debug_assert!(validate_parallel_tiling(layer, machine, &tiling).is_ok());
    Ok(ParallelTileOutcome { tiling, lp })
}

/// Converts continuous segment lengths into per-axis processor counts
/// with Π counts <= P, then refines the grid greedily: each step splits
/// the dimension that most reduces (received words, per-processor work),
/// compared lexicographically, so the integer grid tracks the traffic
/// the tiling is optimized for rather than raw work alone.
fn integerize(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    sizes: &crate::layer::DerivedSizes,
    processors: u64,
    x: &[f64],
) -> ParallelTiling {
    let extents = layer.loop_extents();
    let mut lo = [1u64; 7];
    let mut hi = [1u64; 7];
    for i in 0..7 {
        let a_cont = x[i].exp2();
        let ideal = extents[i] as f64 / a_cont;
        lo[i] = ((ideal + 1e-9).floor() as u64).clamp(1, extents[i]);
        hi[i] = ((ideal - 1e-9).ceil() as u64).clamp(1, extents[i]);
    }

    let metric = |counts: &[u64; 7]| -> (BigRational, u128) {
        let mut a = [0u64; 7];
        for i in 0..7 {
            a[i] = extents[i].div_ceil(counts[i]);
        }
        let received = received_words(layer, prec, sizes, processors, &a);
        let work: u128 = a.iter().map(|&v| v as u128).product();
        (received, work)
    };

    // Flooring every continuous count can waste a large slice of the
    // processor budget; pick the best feasible floor/ceil combination.
    let mut counts = lo;
    let mut best_m = metric(&lo);
    for mask in 1u32..(1 << 7) {
        let mut cand = lo;
        for (i, c) in cand.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                *c = hi[i];
            }
        }
        if grid_product(&cand) > processors as u128 {
            continue;
        }
        let m = metric(&cand);
        if m < best_m {
            best_m = m;
            counts = cand;
        }
    }
    // Defensive: lo itself cannot exceed the budget, but guard against
    // f64 edge cases anyway.
    while grid_product(&counts) > processors as u128 {
        let (mut worst, mut worst_count) = (0, 1u64);
        for (i, &c) in counts.iter().enumerate() {
            if c > worst_count {
                worst = i;
                worst_count = c;
            }
        }
        if worst_count == 1 {
            break;
        }
        counts[worst] -= 1;
    }

    loop {
        let current = metric(&counts);
        let mut best: Option<(usize, (BigRational, u128))> = None;
        for i in 0..7 {
            if counts[i] >= extents[i] {
                continue;
            }
            let mut cand = counts;
            cand[i] += 1;
            if grid_product(&cand) > processors as u128 {
                continue;
            }
            let m = metric(&cand);
            if m < current {
                let better = match &best {
                    None => true,
                    Some((_, bm)) => m < *bm,
                };
                if better {
                    best = Some((i, m));
                }
            }
        }
        match best {
            Some((i, _)) => counts[i] += 1,
            None => break,
        }
    }

    let mut a = [0u64; 7];
    for i in 0..7 {
        a[i] = extents[i].div_ceil(counts[i]);
    }
    ParallelTiling::from_array(a)
}

fn grid_product(counts: &[u64; 7]) -> u128 {
    counts.iter().map(|&c| c as u128).product()
}

/// Interior-tile received-words estimate: footprint minus 1/P share,
/// clamped at zero per array.
fn received_words(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    sizes: &crate::layer::DerivedSizes,
    processors: u64,
    a: &[u64; 7],
) -> BigRational {
    let p = uint_rat(processors as u128);
    let in_fp = a[0] as u128
        * a[1] as u128
        * (layer.stride_w as u128 * a[3] as u128 + a[5] as u128)
        * (layer.stride_h as u128 * a[4] as u128 + a[6] as u128);
    let fil_fp = a[1] as u128 * a[2] as u128 * a[5] as u128 * a[6] as u128;
    let out_fp = a[0] as u128 * a[2] as u128 * a[3] as u128 * a[4] as u128;
    let zero = BigRational::zero();
    (prec.p_in() * uint_rat(in_fp) - prec.p_in() * uint_rat(sizes.size_in) / &p)
        .max(zero.clone())
        + (prec.p_f() * uint_rat(fil_fp) - prec.p_f() * uint_rat(sizes.size_f) / &p)
            .max(zero.clone())
        + (prec.p_out() * uint_rat(out_fp) - prec.p_out() * uint_rat(sizes.size_out) / &p)
            .max(zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::derive_sizes;

    fn toy() -> ConvLayer {
        ConvLayer {
            n_images: 2,
            c_in: 3,
            c_out: 4,
            w_out: 5,
            h_out: 5,
            w_f: 2,
            h_f: 2,
            stride_w: 2,
            stride_h: 2,
        }
    }

    #[test]
    fn single_processor_gets_the_identity_tiling() {
        let layer = toy();
        let out = parallel_lp_tiles(
            &layer,
            &PrecisionTriple::unit(),
            &ParallelMachine::new(1, 1 << 20),
        )
        .unwrap();
        assert_eq!(out.tiling, ParallelTiling::from_array(layer.loop_extents()));
    }

    #[test]
    fn one_processor_per_update_gives_unit_segments() {
        let layer = toy();
        let g = derive_sizes(&layer, &PrecisionTriple::unit())
            .unwrap()
            .g_total as u64;
        let out = parallel_lp_tiles(
            &layer,
            &PrecisionTriple::unit(),
            &ParallelMachine::new(g, 1 << 20),
        )
        .unwrap();
        assert_eq!(out.tiling, ParallelTiling::from_array([1; 7]));
    }

    #[test]
    fn toy_with_eight_processors_is_load_balanced() {
        let layer = toy();
        let machine = ParallelMachine::new(8, 1 << 20);
        let out = parallel_lp_tiles(&layer, &PrecisionTriple::unit(), &machine).unwrap();
        assert_eq!(validate_parallel_tiling(&layer, &machine, &out.tiling), Ok(()));
        let per_proc = out.tiling.updates_per_proc();
        let g = derive_sizes(&layer, &PrecisionTriple::unit()).unwrap().g_total;
        assert!(per_proc >= g / 8);
        assert!(per_proc <= 2 * (g / 8), "work {per_proc} > 2x fair share");
    }

    #[test]
    fn aggregate_memory_precondition_is_enforced() {
        let layer = toy();
        // Arrays need |I| + |F| + |O| = 864 + 48 + 200 words at unit
        // precision; 4 processors with 64 words can't hold them.
        let err = parallel_lp_tiles(
            &layer,
            &PrecisionTriple::unit(),
            &ParallelMachine::new(4, 64),
        )
        .unwrap_err();
        assert!(matches!(err, TilerError::AggregateMemoryExceeded { .. }));
    }

    #[test]
    fn deterministic_output() {
        let layer = toy();
        let machine = ParallelMachine::new(16, 1 << 20);
        let p = PrecisionTriple::from_ints(1, 1, 2).unwrap();
        assert_eq!(
            parallel_lp_tiles(&layer, &p, &machine).unwrap(),
            parallel_lp_tiles(&layer, &p, &machine).unwrap()
        );
    }

    #[test]
    fn budget_never_exceeded_across_processor_range() {
        let layer = toy();
        for p in [2u64, 3, 5, 8, 13, 50, 240, 2400] {
            let machine = ParallelMachine::new(p, 1 << 24);
            let out = parallel_lp_tiles(&layer, &PrecisionTriple::unit(), &machine).unwrap();
            assert_eq!(
                validate_parallel_tiling(&layer, &machine, &out.tiling),
                Ok(()),
                "P={p}"
            );
        }
    }
}
