//! Tile-size selection via log-space linear programs.
//!
//! Serial tilings block the nine-index lifted nest (the filter loops are
//! rewritten as quotient/remainder pairs: i6 = stride_w*q6 + r6 and
//! likewise vertically), the memory constraints split the input halo
//! product into four terms, and the continuous LP optimum is rounded to
//! integers and greedily regrown under the exact (unsplit) constraints.
//! Parallel tilings assign each processor a box of the seven-loop nest.
//! The two-buffer variant models a scratchpad shared by input and filter
//! tiles plus an accumulator that holds the output tile.

mod parallel;
mod serial;
mod two_buffer;

pub use parallel::{
    parallel_lp_tiles, validate_parallel_tiling, ParallelTileOutcome, ParallelTilingViolation,
};
pub use serial::{round_tiles, serial_lp_tiles, SerialTileOutcome};
pub use two_buffer::{two_buffer_tiles, two_buffer_tiles_cancellable, TwoBufferOptions};

use std::fmt;

use num_rational::BigRational;
use thiserror::Error;

use crate::layer::{uint_rat, ConvLayer, LayerViolation, PrecisionTriple};
use crate::machine::SerialMachine;

/// Block extents of the lifted nine-index serial nest, in loop order
/// (N, c_in, c_out, w_out, h_out, wf_q, wf_r, hf_q, hf_r).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerialTiling {
    pub b_n: u64,
    pub b_c_in: u64,
    pub b_c_out: u64,
    pub b_w_out: u64,
    pub b_h_out: u64,
    /// Quotient block of the filter width loop; extent ceil(w_f / stride_w).
    pub b_wf_q: u64,
    /// Remainder block of the filter width loop; extent stride_w.
    pub b_wf_r: u64,
    pub b_hf_q: u64,
    pub b_hf_r: u64,
}

/// Per-processor segment lengths of the seven parallel loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParallelTiling {
    pub a_n: u64,
    pub a_c_in: u64,
    pub a_c_out: u64,
    pub a_w_out: u64,
    pub a_h_out: u64,
    pub a_w_f: u64,
    pub a_h_f: u64,
}

/// Continuous LP solution in log2 space: `x[i] = log2(block_i)`,
/// objective = sum of x.  `x_exact` carries the exact rationals the
/// rounding step starts from; the f64 views satisfy `Ax <= b` within
/// 1e-9 because they are projections of an exact solution.
#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Indices of constraint rows satisfied with equality (memory rows
    /// first, then per-variable upper bounds).
    pub tight_constraints: Vec<usize>,
    pub x_exact: Vec<BigRational>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TilerError {
    #[error("layer is invalid: {0:?}")]
    InvalidLayer(Vec<LayerViolation>),
    #[error("cache of {cache_words} words is too small: the serial LP needs M > 4*p_total = {min_exclusive}")]
    CacheTooSmall {
        cache_words: u64,
        min_exclusive: String,
    },
    #[error("aggregate memory too small: arrays need {required_words} words but P*M = {available_words}")]
    AggregateMemoryExceeded {
        required_words: String,
        available_words: u128,
    },
    #[error("two-buffer capacities cannot hold even the minimal tile: {0}")]
    BufferTooSmall(String),
    #[error("LP solver failed unexpectedly: {0}")]
    LpFailed(String),
}

/// A violated serial-tiling constraint; data, not a failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SerialTilingViolation {
    BlockOutOfRange { index: usize, block: u64, extent: u64 },
    OutputTileTooLarge,
    FilterTileTooLarge,
    InputTileTooLarge,
}

impl fmt::Display for SerialTilingViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SerialTilingViolation::BlockOutOfRange {
                index,
                block,
                extent,
            } => write!(
                f,
                "block {block} at loop {index} outside [1, {extent}]"
            ),
            SerialTilingViolation::OutputTileTooLarge => {
                write!(f, "output tile exceeds M/p_total")
            }
            SerialTilingViolation::FilterTileTooLarge => {
                write!(f, "filter tile exceeds M/p_total")
            }
            SerialTilingViolation::InputTileTooLarge => {
                write!(f, "input tile exceeds M/p_total")
            }
        }
    }
}

impl SerialTiling {
    pub fn from_array(b: [u64; 9]) -> Self {
        Self {
            b_n: b[0],
            b_c_in: b[1],
            b_c_out: b[2],
            b_w_out: b[3],
            b_h_out: b[4],
            b_wf_q: b[5],
            b_wf_r: b[6],
            b_hf_q: b[7],
            b_hf_r: b[8],
        }
    }

    pub fn as_array(&self) -> [u64; 9] {
        [
            self.b_n, self.b_c_in, self.b_c_out, self.b_w_out, self.b_h_out, self.b_wf_q,
            self.b_wf_r, self.b_hf_q, self.b_hf_r,
        ]
    }

    pub fn ones() -> Self {
        Self::from_array([1; 9])
    }

    /// Full-extent tiling (one tile covering the whole lifted nest).
    pub fn full(layer: &ConvLayer) -> Self {
        Self::from_array(lifted_extents(layer))
    }

    /// Output tile element count b_N * b_cO * b_wO * b_hO.
    pub fn output_tile_elems(&self) -> u128 {
        self.b_n as u128 * self.b_c_out as u128 * self.b_w_out as u128 * self.b_h_out as u128
    }

    /// Filter tile element count over the four lifted filter blocks.
    pub fn filter_tile_elems(&self) -> u128 {
        self.b_c_in as u128
            * self.b_c_out as u128
            * self.b_wf_q as u128
            * self.b_wf_r as u128
            * self.b_hf_q as u128
            * self.b_hf_r as u128
    }

    /// Input tile element count with the halo form
    /// b_N * b_cI * (b_wO + b_wfq)(b_hO + b_hfq) * b_wfr * b_hfr.
    pub fn input_tile_elems(&self) -> u128 {
        self.b_n as u128
            * self.b_c_in as u128
            * (self.b_w_out as u128 + self.b_wf_q as u128)
            * (self.b_h_out as u128 + self.b_hf_q as u128)
            * self.b_wf_r as u128
            * self.b_hf_r as u128
    }
}

/// Extents of the lifted nine-index nest.
pub fn lifted_extents(layer: &ConvLayer) -> [u64; 9] {
    [
        layer.n_images,
        layer.c_in,
        layer.c_out,
        layer.w_out,
        layer.h_out,
        layer.w_f.div_ceil(layer.stride_w),
        layer.stride_w,
        layer.h_f.div_ceil(layer.stride_h),
        layer.stride_h,
    ]
}

/// Checks the three memory inequalities of the blocking problem exactly,
/// in rational arithmetic, plus the block ranges.
pub fn validate_serial_tiling(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &SerialMachine,
    tiling: &SerialTiling,
) -> Result<(), SerialTilingViolation> {
    let extents = lifted_extents(layer);
    for (index, (&block, &extent)) in tiling.as_array().iter().zip(&extents).enumerate() {
        if block < 1 || block > extent {
            return Err(SerialTilingViolation::BlockOutOfRange {
                index,
                block,
                extent,
            });
        }
    }
    let cap = uint_rat(machine.cache_words as u128);
    let p_t = prec.p_total();
    // Each tile must fit its p_j * M / p_T share, i.e. tile <= M / p_T.
    if &p_t * uint_rat(tiling.output_tile_elems()) > cap {
        return Err(SerialTilingViolation::OutputTileTooLarge);
    }
    if &p_t * uint_rat(tiling.filter_tile_elems()) > cap {
        return Err(SerialTilingViolation::FilterTileTooLarge);
    }
    if &p_t * uint_rat(tiling.input_tile_elems()) > cap {
        return Err(SerialTilingViolation::InputTileTooLarge);
    }
    Ok(())
}

impl ParallelTiling {
    pub fn from_array(a: [u64; 7]) -> Self {
        Self {
            a_n: a[0],
            a_c_in: a[1],
            a_c_out: a[2],
            a_w_out: a[3],
            a_h_out: a[4],
            a_w_f: a[5],
            a_h_f: a[6],
        }
    }

    pub fn as_array(&self) -> [u64; 7] {
        [
            self.a_n, self.a_c_in, self.a_c_out, self.a_w_out, self.a_h_out, self.a_w_f,
            self.a_h_f,
        ]
    }

    /// Per-processor update count (product of the segment lengths).
    pub fn updates_per_proc(&self) -> u128 {
        self.as_array().iter().map(|&a| a as u128).product()
    }

    /// Number of grid cells Π ceil(extent / a).
    pub fn grid_cells(&self, layer: &ConvLayer) -> u128 {
        layer
            .loop_extents()
            .iter()
            .zip(self.as_array())
            .map(|(&ext, a)| ext.div_ceil(a) as u128)
            .product()
    }
}

// ---------------------------------------------------------------------------
// key = value serialization shared with layer spec files.
// ---------------------------------------------------------------------------

const SERIAL_KEYS: [&str; 9] = [
    "b_n", "b_c_in", "b_c_out", "b_w_out", "b_h_out", "b_wf_q", "b_wf_r", "b_hf_q", "b_hf_r",
];
const PARALLEL_KEYS: [&str; 7] = [
    "a_n", "a_c_in", "a_c_out", "a_w_out", "a_h_out", "a_w_f", "a_h_f",
];

pub fn format_serial_tiling(t: &SerialTiling) -> String {
    SERIAL_KEYS
        .iter()
        .zip(t.as_array())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn format_parallel_tiling(t: &ParallelTiling) -> String {
    PARALLEL_KEYS
        .iter()
        .zip(t.as_array())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TilingParseError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value")]
    BadValue { line: usize },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("missing key `{0}`")]
    Missing(String),
}

fn parse_kv_u64(text: &str, keys: &[&str]) -> Result<Vec<u64>, TilingParseError> {
    let mut values: Vec<Option<u64>> = vec![None; keys.len()];
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(TilingParseError::Malformed { line });
        };
        let key = key.trim();
        let pos = keys
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| TilingParseError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
        let v = value
            .trim()
            .parse::<u64>()
            .map_err(|_| TilingParseError::BadValue { line })?;
        values[pos] = Some(v);
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| TilingParseError::Missing(keys[i].to_string())))
        .collect()
}

pub fn parse_serial_tiling(text: &str) -> Result<SerialTiling, TilingParseError> {
    let v = parse_kv_u64(text, &SERIAL_KEYS)?;
    Ok(SerialTiling::from_array(v.try_into().unwrap()))
}

pub fn parse_parallel_tiling(text: &str) -> Result<ParallelTiling, TilingParseError> {
    let v = parse_kv_u64(text, &PARALLEL_KEYS)?;
    Ok(ParallelTiling::from_array(v.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ConvLayer {
        ConvLayer {
            n_images: 4,
            c_in: 4,
            c_out: 4,
            w_out: 4,
            h_out: 4,
            w_f: 2,
            h_f: 2,
            stride_w: 1,
            stride_h: 1,
        }
    }

    #[test]
    fn lifted_extents_cover_quotient_and_remainder() {
        let mut layer = toy();
        layer.w_f = 7;
        layer.stride_w = 2;
        layer.w_out = 8;
        assert_eq!(lifted_extents(&layer)[5], 4); // ceil(7/2)
        assert_eq!(lifted_extents(&layer)[6], 2); // stride
    }

    #[test]
    fn all_ones_tiling_fits_four_p_total() {
        let layer = ConvLayer {
            n_images: 1,
            c_in: 1,
            c_out: 1,
            w_out: 2,
            h_out: 2,
            w_f: 1,
            h_f: 1,
            stride_w: 1,
            stride_h: 1,
        };
        let prec = PrecisionTriple::unit();
        // Minimal input tile is (1+1)*(1+1) = 4 elements, so M = 4 p_T works.
        let ok = validate_serial_tiling(
            &layer,
            &prec,
            &SerialMachine::new(12),
            &SerialTiling::ones(),
        );
        assert_eq!(ok, Ok(()));
        let too_small = validate_serial_tiling(
            &layer,
            &prec,
            &SerialMachine::new(11),
            &SerialTiling::ones(),
        );
        assert_eq!(too_small, Err(SerialTilingViolation::InputTileTooLarge));
    }

    #[test]
    fn full_extent_tiling_with_tiny_cache_names_a_constraint() {
        let layer = toy();
        let prec = PrecisionTriple::unit();
        let err = validate_serial_tiling(
            &layer,
            &prec,
            &SerialMachine::new(16),
            &SerialTiling::full(&layer),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SerialTilingViolation::OutputTileTooLarge
                | SerialTilingViolation::FilterTileTooLarge
                | SerialTilingViolation::InputTileTooLarge
        ));
    }

    #[test]
    fn block_range_checked() {
        let layer = toy();
        let prec = PrecisionTriple::unit();
        let mut t = SerialTiling::ones();
        t.b_w_out = 9;
        let err = validate_serial_tiling(&layer, &prec, &SerialMachine::new(1 << 20), &t)
            .unwrap_err();
        assert_eq!(
            err,
            SerialTilingViolation::BlockOutOfRange {
                index: 3,
                block: 9,
                extent: 4
            }
        );
    }

    #[test]
    fn tiling_serialization_round_trips() {
        let t = SerialTiling::from_array([2, 1, 4, 2, 2, 2, 1, 2, 1]);
        let text = format_serial_tiling(&t);
        assert_eq!(parse_serial_tiling(&text).unwrap(), t);

        let p = ParallelTiling::from_array([2, 1, 4, 2, 2, 2, 1]);
        let text = format_parallel_tiling(&p);
        assert_eq!(parse_parallel_tiling(&text).unwrap(), p);

        assert!(matches!(
            parse_serial_tiling("b_n = 1\nbogus = 2\n"),
            Err(TilingParseError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            parse_serial_tiling("b_n = 1\n"),
            Err(TilingParseError::Missing(_))
        ));
    }
}
