//! Command-line surface of the convbound toolkit: parse layer specs, run
//! bounds / tilings / volume models / simulations / sweeps, and emit
//! fixed-width tables or CSV.
//!
//! Exit codes: 0 success, 2 validation error (bad flags, malformed or
//! invalid layer files, oracle refusals), 3 infeasibility (machine too
//! small for any tiling or simulation).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::BigRational;

use convbound::bounds::{parallel_lower_bound, serial_lower_bound, BoundError};
use convbound::hbl::{
    cnn_homomorphisms, derive_constraints, kernel_of, lattice_closure, lifted_homomorphisms,
    minimize_exponents, parse_homomorphisms, IntHom,
};
use convbound::layer::{format_rational, parse_layer_spec, ConvLayer, PrecisionTriple};
use convbound::machine::{ParallelMachine, SerialMachine, TwoBufferMachine};
use convbound::ratmath::{fmt_sig6, rat_to_f64};
use convbound::sim::{
    simulate_parallel_footprints, simulate_serial_with_order, CacheModel, SimError,
    DEFAULT_TILE_ORDER,
};
use convbound::tiler::{
    format_parallel_tiling, format_serial_tiling, parallel_lp_tiles, parse_parallel_tiling,
    parse_serial_tiling, serial_lp_tiles, two_buffer_tiles, SerialTiling, TilerError,
    TwoBufferOptions,
};
use convbound::volume::{
    blocking_volume_serial, im2col_volume_serial, naive_volume_serial, rows_to_csv,
    sweep_parallel_p, sweep_serial_m, SweepRange, SweepRow,
};

#[derive(Parser)]
#[command(
    name = "convbound",
    about = "Communication bounds, tilings, and traffic models for direct CNN convolution",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct LayerIo {
    /// Layer spec file (key = value lines).
    #[arg(long, value_name = "FILE")]
    layer: Option<PathBuf>,
    /// Shipped preset name (resnet50-conv1 .. resnet50-conv5x).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepAxis {
    M,
    P,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the communication lower bounds.
    Bounds {
        #[command(flatten)]
        io: LayerIo,
        /// Cache words (serial) or per-processor memory words (parallel).
        #[arg(long, value_name = "WORDS")]
        m_words: u64,
        /// Also report the parallel bounds for this processor count.
        #[arg(long, value_name = "P")]
        procs: Option<u64>,
    },
    /// Derive a communication-minimizing tiling.
    Tile {
        #[command(flatten)]
        io: LayerIo,
        /// Cache words for the serial LP (or per-processor memory with --procs).
        #[arg(long, value_name = "WORDS")]
        m_words: Option<u64>,
        /// Parallel tiling for this processor count.
        #[arg(long, value_name = "P")]
        procs: Option<u64>,
        /// Two-buffer mode: total scratchpad words.
        #[arg(long, value_name = "WORDS", requires = "accumulator")]
        scratchpad: Option<u64>,
        /// Two-buffer mode: total accumulator entries.
        #[arg(long, value_name = "ENTRIES", requires = "scratchpad")]
        accumulator: Option<u64>,
        /// Halve both usable two-buffer capacities.
        #[arg(long)]
        double_buffer: bool,
        /// Keep the output image plane untiled (two-buffer mode).
        #[arg(long)]
        no_image_tiling: bool,
        /// Write the tiling to a file instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Analytical traffic of naive, blocking, and im2col schedules.
    Volumes {
        #[command(flatten)]
        io: LayerIo,
        #[arg(long, value_name = "WORDS")]
        m_words: u64,
    },
    /// Run the cache-simulation oracle (or parallel footprint accountant).
    Simulate {
        #[command(flatten)]
        io: LayerIo,
        /// Cache words (serial) or per-processor memory words (parallel).
        #[arg(long, value_name = "WORDS")]
        m_words: u64,
        /// Account footprints for this processor count instead.
        #[arg(long, value_name = "P")]
        procs: Option<u64>,
        /// Tiling file; defaults to the LP tiling for this machine.
        #[arg(long, value_name = "FILE")]
        tiling: Option<PathBuf>,
        /// Use the all-ones tiling (serial only).
        #[arg(long, conflicts_with = "tiling")]
        all_ones: bool,
        /// Dump one line per cache miss to this file.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Raise the oracle's update cap.
        #[arg(long, value_name = "UPDATES")]
        update_cap: Option<u64>,
    },
    /// Sweep the cache size or the processor count.
    Sweep {
        #[command(flatten)]
        io: LayerIo,
        #[arg(long, value_enum, value_name = "m|p")]
        sweep: SweepAxis,
        #[arg(long)]
        from: u64,
        #[arg(long)]
        to: u64,
        #[arg(long)]
        factor: u64,
        /// Per-processor memory words for a P sweep (default 2^24).
        #[arg(long, value_name = "WORDS")]
        m_words: Option<u64>,
        /// Write CSV here; without it a table goes to stdout.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// HBL constraints and optimal exponents for access maps.
    Hbl {
        /// Built-in homomorphism family.
        #[arg(long, value_enum, conflicts_with = "matrices")]
        builtin: Option<Builtin>,
        /// Strides (width height) for the builtin cnn family.
        #[arg(long, num_args = 2, value_names = ["SW", "SH"], default_values = ["1", "1"])]
        stride: Vec<u64>,
        /// Matrix file: blank-line-separated integer matrices.
        #[arg(long, value_name = "FILE")]
        matrices: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Builtin {
    Cnn,
    Lifted,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn infeasible(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<TilerError> for Failure {
    fn from(e: TilerError) -> Self {
        match e {
            TilerError::InvalidLayer(_) => Failure::validation(e.to_string()),
            _ => Failure::infeasible(e.to_string()),
        }
    }
}

impl From<BoundError> for Failure {
    fn from(e: BoundError) -> Self {
        Failure::validation(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::CapacityTooSmall { .. } | SimError::FootprintExceedsMemory { .. } => {
                Failure::infeasible(e.to_string())
            }
            _ => Failure::validation(e.to_string()),
        }
    }
}

const PRESETS: [(&str, &str); 5] = [
    (
        "resnet50-conv1",
        include_str!("../presets/resnet50-conv1.txt"),
    ),
    (
        "resnet50-conv2x",
        include_str!("../presets/resnet50-conv2x.txt"),
    ),
    (
        "resnet50-conv3x",
        include_str!("../presets/resnet50-conv3x.txt"),
    ),
    (
        "resnet50-conv4x",
        include_str!("../presets/resnet50-conv4x.txt"),
    ),
    (
        "resnet50-conv5x",
        include_str!("../presets/resnet50-conv5x.txt"),
    ),
];

fn load_preset(name: &str) -> Result<(ConvLayer, PrecisionTriple), Failure> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Failure::validation(format!(
                "unknown preset `{name}`; valid presets: {}",
                names.join(", ")
            ))
        })?;
    parse_layer_spec(text).map_err(|e| Failure::validation(format!("preset `{name}`: {e}")))
}

fn load_layer(io: &LayerIo) -> Result<(ConvLayer, PrecisionTriple), Failure> {
    let (layer, prec) = match (&io.layer, &io.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
            parse_layer_spec(&text)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => load_preset(name)?,
        _ => return Err(Failure::validation("exactly one of --layer/--preset")),
    };
    let violations = layer.validate();
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::validation(format!(
            "layer invariants violated: {}",
            lines.join("; ")
        )));
    }
    Ok((layer, prec))
}

fn words_cell(r: &BigRational) -> String {
    fmt_sig6(rat_to_f64(r))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Bounds { io, m_words, procs } => cmd_bounds(&io, m_words, procs),
        Command::Tile {
            io,
            m_words,
            procs,
            scratchpad,
            accumulator,
            double_buffer,
            no_image_tiling,
            out,
        } => cmd_tile(
            &io,
            m_words,
            procs,
            scratchpad.zip(accumulator),
            double_buffer,
            no_image_tiling,
            out,
        ),
        Command::Volumes { io, m_words } => cmd_volumes(&io, m_words),
        Command::Simulate {
            io,
            m_words,
            procs,
            tiling,
            all_ones,
            trace,
            update_cap,
        } => cmd_simulate(&io, m_words, procs, tiling, all_ones, trace, update_cap),
        Command::Sweep {
            io,
            sweep,
            from,
            to,
            factor,
            m_words,
            csv,
        } => cmd_sweep(&io, sweep, from, to, factor, m_words, csv),
        Command::Hbl {
            builtin,
            stride,
            matrices,
        } => cmd_hbl(builtin, &stride, matrices),
    }
}

fn print_layer_header(layer: &ConvLayer, prec: &PrecisionTriple) {
    println!(
        "layer: N={} c_in={} c_out={} w_out={} h_out={} w_f={} h_f={} stride=({},{})",
        layer.n_images,
        layer.c_in,
        layer.c_out,
        layer.w_out,
        layer.h_out,
        layer.w_f,
        layer.h_f,
        layer.stride_w,
        layer.stride_h
    );
    println!(
        "precisions: p_in={} p_f={} p_out={} (p_total={})",
        format_rational(prec.p_in()),
        format_rational(prec.p_f()),
        format_rational(prec.p_out()),
        format_rational(&prec.p_total())
    );
}

fn cmd_bounds(io: &LayerIo, m_words: u64, procs: Option<u64>) -> Result<(), Failure> {
    let (layer, prec) = load_layer(io)?;
    print_layer_header(&layer, &prec);
    let report = serial_lower_bound(&layer, &prec, &SerialMachine::new(m_words))?;
    println!("serial lower bound (M = {m_words} words)");
    println!("  {:<14}{:>16}", "term", "words");
    println!(
        "  {:<14}{:>16}",
        "trivial",
        words_cell(&report.term_trivial)
    );
    println!(
        "  {:<14}{:>16}",
        "large-filter",
        words_cell(&report.term_large_filter)
    );
    println!(
        "  {:<14}{:>16}",
        "small-filter",
        words_cell(&report.term_small_filter)
    );
    println!(
        "  {:<14}{:>16}  dominating: {}",
        "bound",
        words_cell(&report.bound),
        report.dominating_term
    );
    if let Some(p) = procs {
        let preport = parallel_lower_bound(&layer, &prec, &ParallelMachine::new(p, m_words))?;
        println!("parallel lower bound (P = {p}, M = {m_words} words per processor)");
        println!("  {:<14}{:>16}", "md-large", words_cell(&preport.md_large));
        println!("  {:<14}{:>16}", "md-small", words_cell(&preport.md_small));
        println!("  {:<14}{:>16}", "mi-cube", words_cell(&preport.mi_cube));
        println!("  {:<14}{:>16}", "mi-small", words_cell(&preport.mi_small));
        println!("  {:<14}{:>16}", "bound-md", words_cell(&preport.bound_md));
        println!(
            "  {:<14}{:>16}  (assumes load-balanced arrays)",
            "bound-mi",
            words_cell(&preport.bound_mi)
        );
        println!("  {:<14}{:>16}", "bound", words_cell(&preport.bound));
        if preport.md_trivial_regime {
            println!("  note: memory-dependent terms are vacuous in this regime");
        }
    }
    Ok(())
}

fn cmd_tile(
    io: &LayerIo,
    m_words: Option<u64>,
    procs: Option<u64>,
    two_buffer: Option<(u64, u64)>,
    double_buffer: bool,
    no_image_tiling: bool,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (layer, prec) = load_layer(io)?;
    let text = if let Some((scratch, accum)) = two_buffer {
        let machine = TwoBufferMachine::new(scratch, accum, double_buffer);
        let options = TwoBufferOptions {
            forbid_image_tiling: no_image_tiling,
        };
        let tiling = two_buffer_tiles(&layer, &prec, &machine, &options)?;
        format_serial_tiling(&tiling)
    } else if let Some(p) = procs {
        let m = m_words
            .ok_or_else(|| Failure::validation("--procs needs --m-words (per-processor memory)"))?;
        let outcome = parallel_lp_tiles(&layer, &prec, &ParallelMachine::new(p, m))?;
        format_parallel_tiling(&outcome.tiling)
    } else {
        let m = m_words.ok_or_else(|| Failure::validation("serial tiling needs --m-words"))?;
        let outcome = serial_lp_tiles(&layer, &prec, &SerialMachine::new(m))?;
        format_serial_tiling(&outcome.tiling)
    };
    match out {
        Some(path) => fs::write(&path, text)
            .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_volumes(io: &LayerIo, m_words: u64) -> Result<(), Failure> {
    let (layer, prec) = load_layer(io)?;
    print_layer_header(&layer, &prec);
    let machine = SerialMachine::new(m_words);
    let bound = serial_lower_bound(&layer, &prec, &machine)?.bound;
    let naive = naive_volume_serial(&layer, &prec)
        .map_err(|e| Failure::validation(e.to_string()))?
        .with_bound(bound.clone());
    let im2col = im2col_volume_serial(&layer, &prec, &machine)
        .map_err(|e| Failure::validation(e.to_string()))?
        .with_bound(bound.clone());
    println!("traffic models (M = {m_words} words)");
    println!("  {:<10}{:>16}{:>12}", "model", "words", "ratio");
    let ratio_cell = |r: Option<f64>| r.map_or(String::from("-"), fmt_sig6);
    println!(
        "  {:<10}{:>16}{:>12}",
        "bound",
        words_cell(&bound),
        "1.00000"
    );
    println!(
        "  {:<10}{:>16}{:>12}",
        "naive",
        words_cell(&naive.total),
        ratio_cell(naive.ratio)
    );
    match serial_lp_tiles(&layer, &prec, &machine) {
        Ok(outcome) => {
            let blocking = blocking_volume_serial(&layer, &prec, &outcome.tiling)
                .map_err(|e| Failure::validation(e.to_string()))?
                .with_bound(bound.clone());
            println!(
                "  {:<10}{:>16}{:>12}",
                "blocking",
                words_cell(&blocking.total),
                ratio_cell(blocking.ratio)
            );
        }
        Err(e) => println!("  {:<10}  unavailable: {e}", "blocking"),
    }
    println!(
        "  {:<10}{:>16}{:>12}",
        "im2col",
        words_cell(&im2col.total),
        ratio_cell(im2col.ratio)
    );
    Ok(())
}

fn cmd_simulate(
    io: &LayerIo,
    m_words: u64,
    procs: Option<u64>,
    tiling_path: Option<PathBuf>,
    all_ones: bool,
    trace: Option<PathBuf>,
    update_cap: Option<u64>,
) -> Result<(), Failure> {
    let (layer, prec) = load_layer(io)?;
    print_layer_header(&layer, &prec);
    if let Some(p) = procs {
        let machine = ParallelMachine::new(p, m_words);
        let tiling = match tiling_path {
            Some(path) => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
                parse_parallel_tiling(&text)
                    .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?
            }
            None => parallel_lp_tiles(&layer, &prec, &machine)?.tiling,
        };
        let res = simulate_parallel_footprints(&layer, &prec, &tiling, &machine)?;
        println!("parallel footprints (P = {p}, M = {m_words} words per processor)");
        println!("  active processors: {}", res.active_processors);
        println!("  received max:  {}", words_cell(&res.max_received));
        println!("  received min:  {}", words_cell(&res.min_received));
        println!("  received mean: {}", words_cell(&res.mean_received));
        println!("  worst processor at grid {:?}", res.max_coords);
        return Ok(());
    }

    let machine = SerialMachine::new(m_words);
    let tiling = if all_ones {
        SerialTiling::ones()
    } else {
        match tiling_path {
            Some(path) => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
                parse_serial_tiling(&text)
                    .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?
            }
            None => serial_lp_tiles(&layer, &prec, &machine)?.tiling,
        }
    };
    let mut cache = CacheModel::new(m_words);
    if let Some(cap) = update_cap {
        cache = cache.with_update_cap(cap);
    }
    let mut trace_file = match &trace {
        Some(path) => Some(
            fs::File::create(path)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let res = simulate_serial_with_order(
        &layer,
        &prec,
        &tiling,
        &cache,
        &DEFAULT_TILE_ORDER,
        trace_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    )?;
    let bound = serial_lower_bound(&layer, &prec, &machine)?.bound;
    println!("cache simulation (M = {m_words} words, LRU)");
    println!("  loads:  {}", words_cell(&res.loads_words));
    println!("  stores: {}", words_cell(&res.stores_words));
    println!("  total:  {}", words_cell(&res.total_words));
    println!("  peak resident: {}", words_cell(&res.peak_resident_words));
    println!("  updates: {}", res.updates_executed);
    println!("  lower bound: {}", words_cell(&bound));
    Ok(())
}

fn cmd_sweep(
    io: &LayerIo,
    axis: SweepAxis,
    from: u64,
    to: u64,
    factor: u64,
    m_words: Option<u64>,
    csv: Option<PathBuf>,
) -> Result<(), Failure> {
    let (layer, prec) = load_layer(io)?;
    let range =
        SweepRange::new(from, to, factor).map_err(|e| Failure::validation(e.to_string()))?;
    let rows = match axis {
        SweepAxis::M => sweep_serial_m(&layer, &prec, &range),
        SweepAxis::P => {
            let mem = m_words.unwrap_or(1 << 24);
            sweep_parallel_p(&layer, &prec, &range, mem)
        }
    }
    .map_err(|e| Failure::validation(e.to_string()))?;
    match csv {
        Some(path) => fs::write(&path, rows_to_csv(&rows))
            .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?,
        None => print_sweep_table(&rows),
    }
    Ok(())
}

fn print_sweep_table(rows: &[SweepRow]) {
    println!(
        "{:>12}{:>14}{:>14}{:>14}{:>14}{:>12}{:>12}{:>12}  note",
        "param", "bound", "naive", "blocking", "im2col", "r_naive", "r_block", "r_im2col"
    );
    let cell = |v: &Option<BigRational>| v.as_ref().map_or(String::from("-"), words_cell);
    let ratio = |v: Option<f64>| v.map_or(String::from("-"), fmt_sig6);
    for row in rows {
        println!(
            "{:>12}{:>14}{:>14}{:>14}{:>14}{:>12}{:>12}{:>12}  {}",
            row.param,
            cell(&row.bound),
            cell(&row.naive),
            cell(&row.blocking),
            cell(&row.im2col),
            ratio(row.ratio(&row.naive)),
            ratio(row.ratio(&row.blocking)),
            ratio(row.ratio(&row.im2col)),
            row.note
        );
    }
}

fn cmd_hbl(
    builtin: Option<Builtin>,
    stride: &[u64],
    matrices: Option<PathBuf>,
) -> Result<(), Failure> {
    let homs: Vec<IntHom> = match (builtin, matrices) {
        (Some(Builtin::Cnn), None) => {
            let (sw, sh) = (stride[0], stride[1]);
            if sw == 0 || sh == 0 {
                return Err(Failure::validation("strides must be >= 1"));
            }
            cnn_homomorphisms(sw, sh).to_vec()
        }
        (Some(Builtin::Lifted), None) => lifted_homomorphisms().to_vec(),
        (None, Some(path)) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
            parse_homomorphisms(&text)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?
        }
        _ => {
            return Err(Failure::validation(
                "need exactly one of --builtin or --matrices",
            ))
        }
    };

    let labels: Vec<String> = homs.iter().map(|h| h.label.clone()).collect();
    println!(
        "homomorphisms: {} maps on Z^{}",
        homs.len(),
        homs[0].dim_in()
    );
    let kernels: Vec<_> = homs.iter().map(kernel_of).collect();
    let lattice = lattice_closure(&kernels).map_err(|e| Failure::validation(e.to_string()))?;
    if lattice.truncated() {
        println!(
            "note: lattice closure truncated at the member cap; constraints may be incomplete"
        );
    }
    println!("kernel lattice members: {}", lattice.len());
    let constraints =
        derive_constraints(&lattice, &homs).map_err(|e| Failure::validation(e.to_string()))?;
    println!("constraints:");
    for c in &constraints {
        println!("  {}", c.display_with(&labels));
    }
    let exps = minimize_exponents(&constraints).map_err(|e| Failure::infeasible(e.to_string()))?;
    println!("optimal exponents:");
    for (label, s) in labels.iter().zip(&exps.s) {
        println!("  s_{label} = {}", format_rational(s));
    }
    println!("total = {}", format_rational(&exps.total));
    Ok(())
}
