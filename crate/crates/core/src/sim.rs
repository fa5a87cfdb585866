//! Brute-force oracles: a word-accurate cache simulation of the tiled
//! loop nest, and an exact footprint accountant for parallel tilings.
//!
//! The serial simulator executes every update of the (lifted) nest in a
//! documented loop order against a fully associative LRU cache with
//! write-allocate / write-back behavior; an element of array j occupies
//! p_j words.  Output elements are pure accumulations, so their first
//! touch allocates without a fill read; a re-touch after eviction reads
//! the partial sum back.  LRU over-approximates optimal replacement, so
//! simulated traffic validates lower bounds (>=) but cannot certify
//! tightness.
//!
//! Arrays begin in slow memory and every declared entry is communicated
//! at least once (that is what the compulsory bound term counts), so the
//! input's stride-padding entries, which the nest itself never indexes,
//! are charged one load in the final accounting.
//!
//! This is a desk-scale oracle: it refuses update counts above a
//! configurable cap instead of pretending to validate at ResNet scale.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::layer::{derive_sizes, uint_rat, ConvLayer, LayerViolation, PrecisionTriple};
use crate::machine::ParallelMachine;
use crate::tiler::{
    lifted_extents, validate_parallel_tiling, ParallelTiling, ParallelTilingViolation,
    SerialTiling,
};

/// Fully associative LRU cache description.  One line holds one array
/// element (p_j words); eviction happens only on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheModel {
    pub capacity_words: u64,
    /// Refusal threshold for the oracle, in updates.
    pub update_cap: u64,
}

pub const DEFAULT_UPDATE_CAP: u64 = 10_000_000;

impl CacheModel {
    pub fn new(capacity_words: u64) -> Self {
        Self {
            capacity_words,
            update_cap: DEFAULT_UPDATE_CAP,
        }
    }

    pub fn with_update_cap(mut self, cap: u64) -> Self {
        self.update_cap = cap;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub loads_words: BigRational,
    pub stores_words: BigRational,
    pub total_words: BigRational,
    pub peak_resident_words: BigRational,
    pub updates_executed: u128,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("layer is invalid: {0:?}")]
    InvalidLayer(Vec<LayerViolation>),
    #[error("update count {updates} exceeds the oracle cap {cap}")]
    UpdateCapExceeded { updates: u128, cap: u64 },
    #[error("cache of {capacity} words cannot hold one update's operands ({needed} words)")]
    CapacityTooSmall { capacity: u64, needed: String },
    #[error("tiling invalid: {0}")]
    InvalidTiling(String),
    #[error("precisions too fine-grained for the scaled-integer simulator")]
    PrecisionTooFine,
    #[error(
        "processor block at {coords:?} needs {footprint_words} words but local memory is {mem_words}"
    )]
    FootprintExceedsMemory {
        coords: Vec<u64>,
        footprint_words: String,
        mem_words: u64,
    },
}

/// Canonical tile-loop order: output tiles outermost (N, c_out, w_out,
/// h_out), reduction tiles innermost (c_in, wf_q, wf_r, hf_q, hf_r), so
/// an output tile stays resident across its whole reduction sweep.
pub const DEFAULT_TILE_ORDER: [usize; 9] = [0, 2, 3, 4, 1, 5, 6, 7, 8];

pub fn simulate_serial(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    tiling: &SerialTiling,
    cache: &CacheModel,
) -> Result<SimResult, SimError> {
    simulate_serial_with_order(layer, prec, tiling, cache, &DEFAULT_TILE_ORDER, None)
}

/// Like [`simulate_serial`] but with an explicit tile-loop permutation
/// and an optional miss trace (one line per miss: array, indices, words).
pub fn simulate_serial_with_order(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    tiling: &SerialTiling,
    cache: &CacheModel,
    tile_order: &[usize; 9],
    mut trace: Option<&mut dyn Write>,
) -> Result<SimResult, SimError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(SimError::InvalidLayer(violations));
    }
    let sizes = derive_sizes(layer, prec).map_err(|e| SimError::InvalidTiling(e.to_string()))?;
    if sizes.g_total > cache.update_cap as u128 {
        return Err(SimError::UpdateCapExceeded {
            updates: sizes.g_total,
            cap: cache.update_cap,
        });
    }
    {
        let mut sorted = *tile_order;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3, 4, 5, 6, 7, 8] {
            return Err(SimError::InvalidTiling(format!(
                "tile order {tile_order:?} is not a permutation"
            )));
        }
    }

    // Scale precisions to a common denominator so occupancy stays integer.
    let p_t = prec.p_total();
    let denom_lcm = lcm3(
        prec.p_in().denom().clone(),
        prec.p_f().denom().clone(),
        prec.p_out().denom().clone(),
    );
    let scale_u: u128 = u128::try_from(denom_lcm.magnitude().clone())
        .map_err(|_| SimError::PrecisionTooFine)?;
    let scaled = |p: &BigRational| -> Result<u128, SimError> {
        let v = p * uint_rat(scale_u);
        u128::try_from(v.numer().magnitude().clone()).map_err(|_| SimError::PrecisionTooFine)
    };
    let words_in = scaled(prec.p_in())?;
    let words_f = scaled(prec.p_f())?;
    let words_out = scaled(prec.p_out())?;
    let capacity_scaled = cache.capacity_words as u128 * scale_u;
    if capacity_scaled < words_in + words_f + words_out {
        return Err(SimError::CapacityTooSmall {
            capacity: cache.capacity_words,
            needed: crate::layer::format_rational(&p_t),
        });
    }

    let extents = lifted_extents(layer);
    let blocks = tiling.as_array();
    for i in 0..9 {
        if blocks[i] < 1 || blocks[i] > extents[i] {
            return Err(SimError::InvalidTiling(format!(
                "block {} outside [1, {}] at loop {i}",
                blocks[i], extents[i]
            )));
        }
    }

    let mut cachestate = Lru::new(capacity_scaled);
    let mut first_touched = vec![false; sizes.size_out as usize];

    let in_w = layer.in_width() as u64;
    let in_h = layer.in_height() as u64;
    let sw = layer.stride_w;
    let sh = layer.stride_h;
    let mut updates: u128 = 0;

    // Walk tiles in `tile_order`, then the intra-tile loops in canonical
    // order; indices are (n, c_in, c_out, w_out, h_out, q6, r6, q7, r7).
    let tile_counts: Vec<u64> = (0..9).map(|i| extents[i].div_ceil(blocks[i])).collect();
    let mut tile_idx = [0u64; 9];
    'tiles: loop {
        // Per-dimension index ranges of this tile.
        let mut lo = [0u64; 9];
        let mut hi = [0u64; 9];
        for d in 0..9 {
            lo[d] = tile_idx[d] * blocks[d];
            hi[d] = (lo[d] + blocks[d]).min(extents[d]);
        }
        let mut ix = lo;
        'cells: loop {
            let (n, ci, co, wo, ho, q6, r6, q7, r7) = (
                ix[0], ix[1], ix[2], ix[3], ix[4], ix[5], ix[6], ix[7], ix[8],
            );
            let i6 = sw * q6 + r6;
            let i7 = sh * q7 + r7;
            if i6 < layer.w_f && i7 < layer.h_f {
                updates += 1;
                // Input(n, ci, sw*wo + i6, sh*ho + i7)
                let x = sw * wo + i6;
                let y = sh * ho + i7;
                let in_idx = ((n * layer.c_in + ci) * in_w + x) * in_h + y;
                cachestate.touch_load(
                    Tag::Input,
                    in_idx,
                    words_in,
                    &mut trace,
                    &[n, ci, x, y],
                    scale_u,
                );
                // Filter(ci, co, i6, i7)
                let f_idx = ((ci * layer.c_out + co) * layer.w_f + i6) * layer.h_f + i7;
                cachestate.touch_load(
                    Tag::Filter,
                    f_idx,
                    words_f,
                    &mut trace,
                    &[ci, co, i6, i7],
                    scale_u,
                );
                // Output(n, co, wo, ho): accumulation, no fill on first touch.
                let o_idx = ((n * layer.c_out + co) * layer.w_out + wo) * layer.h_out + ho;
                let first = !first_touched[o_idx as usize];
                first_touched[o_idx as usize] = true;
                cachestate.touch_store(
                    o_idx,
                    words_out,
                    first,
                    &mut trace,
                    &[n, co, wo, ho],
                    scale_u,
                );
            }
            // Advance intra-tile indices (canonical order, last fastest).
            for d in (0..9).rev() {
                ix[d] += 1;
                if ix[d] < hi[d] {
                    continue 'cells;
                }
                ix[d] = lo[d];
            }
            break;
        }
        // Advance tile indices in the requested order (last fastest).
        for pos in (0..9).rev() {
            let d = tile_order[pos];
            tile_idx[d] += 1;
            if tile_idx[d] < tile_counts[d] {
                continue 'tiles;
            }
            tile_idx[d] = 0;
        }
        break;
    }

    // Compulsory transfer of input entries the nest never indexes (the
    // declared array is stride-padded beyond the accessed cross product).
    let accessed_in = layer.n_images as u128
        * layer.c_in as u128
        * stride_span(sw, layer.w_out, layer.w_f)
        * stride_span(sh, layer.h_out, layer.h_f);
    let pad_loads = (sizes.size_in - accessed_in) * words_in;

    let flushed = cachestate.flush_dirty();
    let to_words = |scaled: u128| uint_rat(scaled) / uint_rat(scale_u);
    let loads = to_words(cachestate.loads + pad_loads);
    let stores = to_words(cachestate.stores + flushed);
    Ok(SimResult {
        total_words: &loads + &stores,
        loads_words: loads,
        stores_words: stores,
        peak_resident_words: to_words(cachestate.peak),
        updates_executed: updates,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Tag {
    Input,
    Filter,
    Output,
}

impl Tag {
    fn name(self) -> &'static str {
        match self {
            Tag::Input => "input",
            Tag::Filter => "filter",
            Tag::Output => "output",
        }
    }
}

struct Entry {
    stamp: u64,
    words: u128,
    dirty: bool,
}

/// Fully associative LRU with variable-size entries (scaled words).
struct Lru {
    capacity: u128,
    used: u128,
    peak: u128,
    clock: u64,
    map: HashMap<(u8, u64), Entry>,
    recency: BTreeMap<u64, (u8, u64)>,
    loads: u128,
    stores: u128,
}

impl Lru {
    fn new(capacity: u128) -> Self {
        Self {
            capacity,
            used: 0,
            peak: 0,
            clock: 0,
            map: HashMap::new(),
            recency: BTreeMap::new(),
            loads: 0,
            stores: 0,
        }
    }

    fn key(tag: Tag, idx: u64) -> (u8, u64) {
        (tag as u8, idx)
    }

    fn bump(&mut self, key: (u8, u64)) {
        let entry = self.map.get_mut(&key).unwrap();
        self.recency.remove(&entry.stamp);
        self.clock += 1;
        entry.stamp = self.clock;
        self.recency.insert(self.clock, key);
    }

    fn evict_for(&mut self, needed: u128) {
        while self.used + needed > self.capacity {
            let (&stamp, &key) = self.recency.iter().next().expect("cache cannot be empty");
            self.recency.remove(&stamp);
            let entry = self.map.remove(&key).unwrap();
            self.used -= entry.words;
            if entry.dirty {
                self.stores += entry.words;
            }
        }
    }

    fn insert(&mut self, key: (u8, u64), words: u128, dirty: bool) {
        self.evict_for(words);
        self.clock += 1;
        self.map.insert(
            key,
            Entry {
                stamp: self.clock,
                words,
                dirty,
            },
        );
        self.recency.insert(self.clock, key);
        self.used += words;
        self.peak = self.peak.max(self.used);
    }

    fn touch_load(
        &mut self,
        tag: Tag,
        idx: u64,
        words: u128,
        trace: &mut Option<&mut dyn Write>,
        coords: &[u64],
        scale: u128,
    ) {
        let key = Self::key(tag, idx);
        if self.map.contains_key(&key) {
            self.bump(key);
        } else {
            self.loads += words;
            if let Some(w) = trace.as_deref_mut() {
                let _ = writeln!(
                    w,
                    "{} {:?} {}",
                    tag.name(),
                    coords,
                    crate::ratmath::fmt_sig6(words as f64 / scale as f64)
                );
            }
            self.insert(key, words, false);
        }
    }

    fn touch_store(
        &mut self,
        idx: u64,
        words: u128,
        first_touch: bool,
        trace: &mut Option<&mut dyn Write>,
        coords: &[u64],
        scale: u128,
    ) {
        let key = Self::key(Tag::Output, idx);
        if self.map.contains_key(&key) {
            self.bump(key);
            self.map.get_mut(&key).unwrap().dirty = true;
        } else {
            // Accumulations allocate without a fill read on first touch;
            // a revisit reloads the evicted partial sum.
            if !first_touch {
                self.loads += words;
            }
            if let Some(w) = trace.as_deref_mut() {
                let _ = writeln!(
                    w,
                    "output {:?} {}",
                    coords,
                    crate::ratmath::fmt_sig6(words as f64 / scale as f64)
                );
            }
            self.insert(key, words, true);
        }
    }

    fn flush_dirty(&self) -> u128 {
        self.map
            .values()
            .filter(|e| e.dirty)
            .map(|e| e.words)
            .sum()
    }
}

fn lcm3(a: num_bigint::BigInt, b: num_bigint::BigInt, c: num_bigint::BigInt) -> num_bigint::BigInt {
    use num_integer::Integer;
    a.lcm(&b).lcm(&c)
}

// ---------------------------------------------------------------------------
// Parallel footprint accounting.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelSimResult {
    /// Words received by the worst processor: sum over arrays of
    /// max(0, footprint_j - p_j|array_j|/P).
    pub max_received: BigRational,
    pub min_received: BigRational,
    pub mean_received: BigRational,
    /// Grid coordinates of the worst processor.
    pub max_coords: Vec<u64>,
    /// Active processors (grid cells).
    pub active_processors: u128,
}

/// Exact per-processor footprints of a parallel tiling via interval
/// arithmetic on each processor's index box (input halos included), and
/// the words each processor must receive beyond its load-balanced share.
pub fn simulate_parallel_footprints(
    layer: &ConvLayer,
    prec: &PrecisionTriple,
    tiling: &ParallelTiling,
    machine: &ParallelMachine,
) -> Result<ParallelSimResult, SimError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(SimError::InvalidLayer(violations));
    }
    validate_parallel_tiling(layer, machine, tiling).map_err(|v| match v {
        ParallelTilingViolation::SegmentOutOfRange { index, a, extent } => {
            SimError::InvalidTiling(format!("segment {a} at loop {index} outside [1, {extent}]"))
        }
        ParallelTilingViolation::BudgetExceeded { cells, processors } => SimError::InvalidTiling(
            format!("{cells} grid cells exceed {processors} processors"),
        ),
    })?;
    let sizes = derive_sizes(layer, prec).map_err(|e| SimError::InvalidTiling(e.to_string()))?;
    let p = uint_rat(machine.processors as u128);
    let share_in = prec.p_in() * uint_rat(sizes.size_in) / &p;
    let share_f = prec.p_f() * uint_rat(sizes.size_f) / &p;
    let share_out = prec.p_out() * uint_rat(sizes.size_out) / &p;

    let extents = layer.loop_extents();
    let a = tiling.as_array();
    let counts: [u64; 7] = std::array::from_fn(|i| extents[i].div_ceil(a[i]));

    let mut max_received: Option<(BigRational, Vec<u64>)> = None;
    let mut min_received: Option<BigRational> = None;
    let mut sum = BigRational::zero();
    let mut cells: u128 = 0;

    let mut grid = [0u64; 7];
    loop {
        // Segment lengths of this cell.
        let mut len = [0u64; 7];
        for d in 0..7 {
            let lo = grid[d] * a[d];
            len[d] = (lo + a[d]).min(extents[d]) - lo;
        }
        let (ln, lci, lco, lwo, lho, lwf, lhf) =
            (len[0], len[1], len[2], len[3], len[4], len[5], len[6]);
        let out_fp = ln as u128 * lco as u128 * lwo as u128 * lho as u128;
        let fil_fp = lci as u128 * lco as u128 * lwf as u128 * lhf as u128;
        let in_fp = ln as u128
            * lci as u128
            * stride_span(layer.stride_w, lwo, lwf)
            * stride_span(layer.stride_h, lho, lhf);

        let words_in = prec.p_in() * uint_rat(in_fp);
        let words_f = prec.p_f() * uint_rat(fil_fp);
        let words_out = prec.p_out() * uint_rat(out_fp);
        let footprint = &words_in + &words_f + &words_out;
        if footprint > uint_rat(machine.mem_words_per_proc as u128) {
            return Err(SimError::FootprintExceedsMemory {
                coords: grid.to_vec(),
                footprint_words: crate::layer::format_rational(&footprint),
                mem_words: machine.mem_words_per_proc,
            });
        }

        let zero = BigRational::zero();
        let received = (&words_in - &share_in).max(zero.clone())
            + (&words_f - &share_f).max(zero.clone())
            + (&words_out - &share_out).max(zero);

        sum += &received;
        cells += 1;
        match &min_received {
            Some(m) if *m <= received => {}
            _ => min_received = Some(received.clone()),
        }
        match &max_received {
            Some((m, _)) if *m >= received => {}
            _ => max_received = Some((received, grid.to_vec())),
        }

        // Next cell; stop after the last one.
        let mut carried = true;
        for d in (0..7).rev() {
            grid[d] += 1;
            if grid[d] < counts[d] {
                carried = false;
                break;
            }
            grid[d] = 0;
        }
        if carried {
            let (max, coords) = max_received.unwrap();
            return Ok(ParallelSimResult {
                max_received: max,
                min_received: min_received.unwrap(),
                mean_received: &sum / uint_rat(cells),
                max_coords: coords,
                active_processors: cells,
            });
        }
    }
}

/// Distinct values of `stride*i + j` for `i` in a length-`a` interval and
/// `j` in a length-`b` interval: contiguous when b >= stride, otherwise
/// disjoint groups.
fn stride_span(stride: u64, a: u64, b: u64) -> u128 {
    if b >= stride {
        stride as u128 * (a as u128 - 1) + b as u128
    } else {
        a as u128 * b as u128
    }
}
