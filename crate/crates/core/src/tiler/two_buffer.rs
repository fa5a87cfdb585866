//! Tile optimization for the two-buffer accelerator layout: input and
//! filter tiles share the scratchpad, the output tile lives in the
//! accumulator, and double buffering halves both usable capacities.
//! An LP relaxation seeds a deterministic local search (per-coordinate
//! +-1 and x/2 moves, exact feasibility checks) that maximizes the
//! update count per tile under integral tile sizes.

use std::sync::atomic::{AtomicBool, Ordering};

use num_rational::BigRational;
use num_traits::Zero;

use crate::layer::{format_rational, uint_rat, ConvLayer, PrecisionTriple};
use crate::machine::TwoBufferMachine;
use crate::ratmath::{log2_rat, log2_slop, rat_to_f64};
use crate::simplex::{self, LpProblem, LpResult};

use super::{lifted_extents, SerialTiling, TilerError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TwoBufferOptions {
    /// Pins b_w_out and b_h_out to their full extents: the whole image
    /// plane stays untiled (an entire row fits a scratchpad line).
    pub forbid_image_tiling: bool,
}

pub fn two_buffer_tiles(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &TwoBufferMachine,
    options: &TwoBufferOptions,
) -> Result<SerialTiling, TilerError> {
    two_buffer_tiles_cancellable(layer, prec, machine, options, &AtomicBool::new(false))
}

/// [`two_buffer_tiles`] with a cooperative cancellation token: when the
/// flag is raised the search stops at its current (always feasible)
/// iterate instead of running to a local optimum.
pub fn two_buffer_tiles_cancellable(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &TwoBufferMachine,
    options: &TwoBufferOptions,
    cancel: &AtomicBool,
) -> Result<SerialTiling, TilerError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(TilerError::InvalidLayer(violations));
    }
    let scratch = uint_rat(machine.usable_scratchpad_words() as u128);
    let accum = machine.usable_accumulator_entries() as u128;
    let extents = lifted_extents(layer);

    let minimal = minimal_tiling(&extents, options);
    if !fits(prec, &minimal, &scratch, accum) {
        return Err(TilerError::BufferTooSmall(format!(
            "minimal tile needs {} scratch words and {} accumulator entries \
             (usable: {} and {})",
            format_rational(&scratch_words(prec, &minimal)),
            minimal.output_tile_elems(),
            format_rational(&scratch),
            accum,
        )));
    }

    let start = lp_seed(prec, &extents, &scratch, accum, options).unwrap_or(minimal);

    // Exact repair: shrink any coordinate whose LP seed overshoots.
    let mut blocks = start.as_array();
    while !fits(prec, &SerialTiling::from_array(blocks), &scratch, accum) {
        // Halve the largest non-pinned block; terminates at the minimal
        // tiling, which fits.
        let (mut idx, mut max) = (usize::MAX, 1u64);
        for (i, &b) in blocks.iter().enumerate() {
            if pinned(i, options) {
                continue;
            }
            if b > max {
                idx = i;
                max = b;
            }
        }
        if idx == usize::MAX {
            break;
        }
        blocks[idx] = (blocks[idx] / 2).max(1);
    }

    // Coordinate search: scan in fixed order, try doubling then +-1;
    // accept any exactly feasible move that increases updates per tile.
    loop {
        if cancel.load(Ordering::Relaxed) {
            break;
        }
        let mut improved = false;
        for i in 0..9 {
            if pinned(i, options) {
                continue;
            }
            for candidate in [blocks[i].saturating_mul(2), blocks[i] + 1, blocks[i] / 2, blocks[i].saturating_sub(1)] {
                let candidate = candidate.clamp(1, extents[i]);
                if candidate == blocks[i] {
                    continue;
                }
                let mut trial = blocks;
                trial[i] = candidate;
                let trial_t = SerialTiling::from_array(trial);
                if product(&trial) > product(&blocks)
                    && fits(prec, &trial_t, &scratch, accum)
                {
                    blocks = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    Ok(SerialTiling::from_array(blocks))
}

fn pinned(index: usize, options: &TwoBufferOptions) -> bool {
    options.forbid_image_tiling && (index == 3 || index == 4)
}

fn minimal_tiling(extents: &[u64; 9], options: &TwoBufferOptions) -> SerialTiling {
    let mut blocks = [1u64; 9];
    if options.forbid_image_tiling {
        blocks[3] = extents[3];
        blocks[4] = extents[4];
    }
    SerialTiling::from_array(blocks)
}

fn product(blocks: &[u64; 9]) -> u128 {
    blocks.iter().map(|&b| b as u128).product()
}

fn scratch_words(prec: &PrecisionTriple, t: &SerialTiling) -> BigRational {
    prec.p_in() * uint_rat(t.input_tile_elems()) + prec.p_f() * uint_rat(t.filter_tile_elems())
}

/// Exact capacity test: shared scratchpad plus accumulator entries.
fn fits(prec: &PrecisionTriple, t: &SerialTiling, scratch: &BigRational, accum: u128) -> bool {
    scratch_words(prec, t) <= *scratch && t.output_tile_elems() <= accum
}

/// Continuous seed from a conservative LP split: the filter gets half the
/// scratchpad, each of the four input halo terms an eighth.
fn lp_seed(
    prec: &PrecisionTriple,
    extents: &[u64; 9],
    scratch: &BigRational,
    accum: u128,
    options: &TwoBufferOptions,
) -> Option<SerialTiling> {
    let slop = log2_slop();
    let half = scratch / uint_rat(2) / prec.p_f();
    let eighth = scratch / uint_rat(8) / prec.p_in();
    if half <= BigRational::zero() || eighth <= BigRational::zero() || accum == 0 {
        return None;
    }
    let rhs_out = (log2_rat(&uint_rat(accum)) - &slop).max(BigRational::zero());
    let rhs_fil = (log2_rat(&half) - &slop).max(BigRational::zero());
    let rhs_in = (log2_rat(&eighth) - &slop).max(BigRational::zero());

    let rows: [([u64; 9], &BigRational); 6] = [
        ([1, 0, 1, 1, 1, 0, 0, 0, 0], &rhs_out),
        ([0, 1, 1, 0, 0, 1, 1, 1, 1], &rhs_fil),
        ([1, 1, 0, 1, 1, 0, 1, 0, 1], &rhs_in),
        ([1, 1, 0, 1, 0, 0, 1, 1, 1], &rhs_in),
        ([1, 1, 0, 0, 1, 1, 1, 0, 1], &rhs_in),
        ([1, 1, 0, 0, 0, 1, 1, 1, 1], &rhs_in),
    ];
    let mut lp = LpProblem::new(vec![BigRational::from_integer(1.into()); 9]);
    for (coeffs, rhs) in rows {
        lp.add_le(
            coeffs.iter().map(|&c| uint_rat(c as u128)).collect(),
            (*rhs).clone(),
        );
    }
    for (i, &e) in extents.iter().enumerate() {
        let mut row = vec![BigRational::zero(); 9];
        row[i] = BigRational::from_integer(1.into());
        let bound = log2_rat(&uint_rat(e as u128)) + &slop;
        if pinned(i, options) {
            lp.add_eq(row, bound);
        } else {
            lp.add_le(row, bound);
        }
    }
    let x = simplex::maximize(&lp);
    let LpResult::Optimal { x, .. } = x else {
        return None;
    };
    let mut blocks = [1u64; 9];
    for i in 0..9 {
        if pinned(i, options) {
            blocks[i] = extents[i];
        } else {
            let cont = rat_to_f64(&x[i]).exp2();
            blocks[i] = (cont.floor().max(1.0) as u64).clamp(1, extents[i]);
        }
    }
    Some(SerialTiling::from_array(blocks))
}
