//! Analytical communication-volume models for naive, blocked, and im2col
//! schedules, plus the CSV sweep machinery.
//!
//! The blocking model follows the documented loop order: the output tile
//! stays resident across its reduction sweep (written once, never read
//! back) while input and filter tiles are fetched on every tile visit;
//! the input tile uses the halo footprint from the blocking constraints.
//! The im2col model reads the input once, writes and re-reads the
//! expanded matrix, and costs the product phase with the tight matmul
//! bound family 2 sqrt(p_I p_F p_O) m k n / sqrt(M) + p_O m n.  These are
//! models, not bounds: the cache-simulation oracle keeps them honest.

use std::fmt::Write as _;

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use thiserror::Error;

use crate::bounds::{parallel_lower_bound, serial_lower_bound};
use crate::layer::{derive_sizes, uint_rat, ConvLayer, LayerViolation, PrecisionTriple};
use crate::machine::{ParallelMachine, SerialMachine};
use crate::ratmath::{fmt_sig6, rat_to_f64, sqrt_floor};
use crate::tiler::{
    lifted_extents, parallel_lp_tiles, serial_lp_tiles, ParallelTiling, SerialTiling,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficReport {
    pub words_in: BigRational,
    pub words_f: BigRational,
    pub words_out: BigRational,
    /// Always the sum of the three parts.
    pub total: BigRational,
    /// The applicable lower bound, when the caller attached one.
    pub bound: Option<BigRational>,
    /// total / bound whenever bound > 0.
    pub ratio: Option<f64>,
}

impl TrafficReport {
    fn new(words_in: BigRational, words_f: BigRational, words_out: BigRational) -> Self {
        let total = &words_in + &words_f + &words_out;
        Self {
            words_in,
            words_f,
            words_out,
            total,
            bound: None,
            ratio: None,
        }
    }

    /// Attaches a lower bound and derives the ratio.
    pub fn with_bound(mut self, bound: BigRational) -> Self {
        self.ratio = if bound.is_positive() {
            Some(rat_to_f64(&(&self.total / &bound)))
        } else {
            None
        };
        self.bound = Some(bound);
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("layer is invalid: {0:?}")]
    InvalidLayer(Vec<LayerViolation>),
    #[error("tiling invalid: {0}")]
    InvalidTiling(String),
    #[error("sweep range invalid: from {from}, to {to}, factor {factor}")]
    InvalidRange { from: u64, to: u64, factor: u64 },
}

fn checked_sizes(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
) -> Result<crate::layer::DerivedSizes, VolumeError> {
    derive_sizes(layer, prec).map_err(|e| match e {
        crate::layer::ModelError::InvalidLayer(v) => VolumeError::InvalidLayer(v),
        other => VolumeError::InvalidTiling(other.to_string()),
    })
}

/// One operand load per update for input and filter; the output is
/// written on first touch and read-modify-written afterwards:
/// (p_I + p_F) G + p_O (2G - |O|).
pub fn naive_volume_serial(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
) -> Result<TrafficReport, VolumeError> {
    let sizes = checked_sizes(layer, prec)?;
    let g = uint_rat(sizes.g_total);
    let words_in = prec.p_in() * &g;
    let words_f = prec.p_f() * &g;
    let words_out = prec.p_out() * (uint_rat(2) * &g - uint_rat(sizes.size_out));
    Ok(TrafficReport::new(words_in, words_f, words_out))
}

/// Blocked schedule: every (output-tile, reduction-tile) visit fetches
/// one input tile and one filter tile; outputs are written once.
pub fn blocking_volume_serial(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    tiling: &SerialTiling,
) -> Result<TrafficReport, VolumeError> {
    let sizes = checked_sizes(layer, prec)?;
    let extents = lifted_extents(layer);
    let blocks = tiling.as_array();
    for (i, (&b, &e)) in blocks.iter().zip(&extents).enumerate() {
        if b < 1 || b > e {
            return Err(VolumeError::InvalidTiling(format!(
                "block {b} outside [1, {e}] at loop {i}"
            )));
        }
    }
    let visits: u128 = (0..9).map(|i| extents[i].div_ceil(blocks[i]) as u128).product();
    let visits = uint_rat(visits);
    let words_in = &visits * prec.p_in() * uint_rat(tiling.input_tile_elems());
    let words_f = &visits * prec.p_f() * uint_rat(tiling.filter_tile_elems());
    let words_out = prec.p_out() * uint_rat(sizes.size_out);
    Ok(TrafficReport::new(words_in, words_f, words_out))
}

/// im2col: read the input once, write and later read the expanded
/// matrix (G / c_out elements at input precision each way), then a
/// matmul with m = N w_O h_O, k = c_in w_F h_F, n = c_out costed as
/// 2 sqrt(p_I p_F p_O) m k n / sqrt(M) + p_O m n.
pub fn im2col_volume_serial(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    machine: &SerialMachine,
) -> Result<TrafficReport, VolumeError> {
    let sizes = checked_sizes(layer, prec)?;
    if machine.cache_words == 0 {
        return Err(VolumeError::InvalidTiling("machine with zero words".into()));
    }
    let g = uint_rat(sizes.g_total);
    let expanded = &g / uint_rat(layer.c_out as u128); // m * k elements
    let words_in = prec.p_in() * uint_rat(sizes.size_in) + uint_rat(2) * prec.p_in() * expanded;
    // Product-phase streaming traffic (reloaded operands).
    let inner = prec.p_product() / uint_rat(machine.cache_words as u128);
    let words_f = uint_rat(2) * &g * sqrt_floor(&inner);
    let words_out = prec.p_out() * uint_rat(sizes.size_out);
    Ok(TrafficReport::new(words_in, words_f, words_out))
}

/// Per-processor traffic of a parallel blocking (interior tile, the max
/// over processors under uniform partitioning): footprint of the block
/// in each array minus the initial 1/P share, clamped at zero per array.
pub fn blocking_volume_parallel(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    tiling: &ParallelTiling,
    processors: u64,
) -> Result<TrafficReport, VolumeError> {
    let sizes = checked_sizes(layer, prec)?;
    if processors == 0 {
        return Err(VolumeError::InvalidTiling("zero processors".into()));
    }
    let extents = layer.loop_extents();
    for (i, (&a, &e)) in tiling.as_array().iter().zip(&extents).enumerate() {
        if a < 1 || a > e {
            return Err(VolumeError::InvalidTiling(format!(
                "segment {a} outside [1, {e}] at loop {i}"
            )));
        }
    }
    let p = uint_rat(processors as u128);
    let a = tiling.as_array();
    let in_fp = a[0] as u128
        * a[1] as u128
        * (layer.stride_w as u128 * a[3] as u128 + a[5] as u128)
        * (layer.stride_h as u128 * a[4] as u128 + a[6] as u128);
    let fil_fp = a[1] as u128 * a[2] as u128 * a[5] as u128 * a[6] as u128;
    let out_fp = a[0] as u128 * a[2] as u128 * a[3] as u128 * a[4] as u128;

    let zero = BigRational::zero();
    let words_in = (prec.p_in() * uint_rat(in_fp)
        - prec.p_in() * uint_rat(sizes.size_in) / &p)
        .max(zero.clone());
    let words_f = (prec.p_f() * uint_rat(fil_fp) - prec.p_f() * uint_rat(sizes.size_f) / &p)
        .max(zero.clone());
    let words_out = (prec.p_out() * uint_rat(out_fp)
        - prec.p_out() * uint_rat(sizes.size_out) / &p)
        .max(zero);
    Ok(TrafficReport::new(words_in, words_f, words_out))
}

// ---------------------------------------------------------------------------
// Sweeps.
// ---------------------------------------------------------------------------

/// Geometric parameter range: from, from*factor, ... while <= to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepRange {
    pub from: u64,
    pub to: u64,
    pub factor: u64,
}

impl SweepRange {
    pub fn new(from: u64, to: u64, factor: u64) -> Result<Self, VolumeError> {
        if from == 0 || to < from || factor < 2 {
            return Err(VolumeError::InvalidRange { from, to, factor });
        }
        Ok(Self { from, to, factor })
    }

    pub fn points(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut v = self.from;
        while v <= self.to {
            out.push(v);
            match v.checked_mul(self.factor) {
                Some(next) => v = next,
                None => break,
            }
        }
        out
    }
}

/// One sweep point.  Empty cells mean the model or tiler declined at this
/// parameter; the note says why.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: u64,
    pub bound: Option<BigRational>,
    pub naive: Option<BigRational>,
    pub blocking: Option<BigRational>,
    pub im2col: Option<BigRational>,
    pub note: String,
}

impl SweepRow {
    pub fn ratio(&self, value: &Option<BigRational>) -> Option<f64> {
        match (&self.bound, value) {
            (Some(b), Some(v)) if b.is_positive() => Some(rat_to_f64(&(v / b))),
            _ => None,
        }
    }
}

/// Cache-size sweep of the serial models against the serial bound.
pub fn sweep_serial_m(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    range: &SweepRange,
) -> Result<Vec<SweepRow>, VolumeError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(VolumeError::InvalidLayer(violations));
    }
    let naive = naive_volume_serial(layer, prec)?.total;
    let mut rows = Vec::new();
    for m in range.points() {
        let machine = SerialMachine::new(m);
        let mut note = String::new();
        let bound = serial_lower_bound(layer, prec, &machine)
            .map(|r| r.bound)
            .ok();
        let im2col = im2col_volume_serial(layer, prec, &machine).map(|r| r.total).ok();
        let blocking = match serial_lp_tiles(layer, prec, &machine) {
            Ok(out) => Some(blocking_volume_serial(layer, prec, &out.tiling)?.total),
            Err(e) => {
                let _ = write!(note, "blocking: {e}");
                None
            }
        };
        rows.push(SweepRow {
            param: m,
            bound,
            naive: Some(naive.clone()),
            blocking,
            im2col,
            note,
        });
    }
    Ok(rows)
}

/// Processor-count sweep of the parallel blocking against the
/// memory-independent bound.  The naive and im2col columns stay empty
/// (their models here are serial); the schema keeps the slots so other
/// models can be plugged in.
pub fn sweep_parallel_p(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    range: &SweepRange,
    mem_words_per_proc: u64,
) -> Result<Vec<SweepRow>, VolumeError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(VolumeError::InvalidLayer(violations));
    }
    let mut rows = Vec::new();
    for p in range.points() {
        let machine = ParallelMachine::new(p, mem_words_per_proc);
        let mut note = String::from("serial-only models omitted");
        let bound = parallel_lower_bound(layer, prec, &machine)
            .map(|r| r.bound_mi)
            .ok();
        let blocking = match parallel_lp_tiles(layer, prec, &machine) {
            Ok(out) => {
                Some(blocking_volume_parallel(layer, prec, &out.tiling, p)?.total)
            }
            Err(e) => {
                let _ = write!(note, "; blocking: {e}");
                None
            }
        };
        rows.push(SweepRow {
            param: p,
            bound,
            naive: None,
            blocking,
            im2col: None,
            note,
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "param,bound,naive,blocking,im2col,ratio_naive,ratio_blocking,ratio_im2col,note";

/// Renders sweep rows as CSV with six-significant-digit decimals.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let cell = |v: &Option<BigRational>| v.as_ref().map_or(String::new(), |r| fmt_sig6(rat_to_f64(r)));
    let ratio_cell = |v: Option<f64>| v.map_or(String::new(), fmt_sig6);
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.param,
            cell(&row.bound),
            cell(&row.naive),
            cell(&row.blocking),
            cell(&row.im2col),
            ratio_cell(row.ratio(&row.naive)),
            ratio_cell(row.ratio(&row.blocking)),
            ratio_cell(row.ratio(&row.im2col)),
            row.note,
        );
    }
    out
}
