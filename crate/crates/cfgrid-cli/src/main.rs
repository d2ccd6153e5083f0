//! cfgrid command line. Four batch subcommands: `powerflow` solves the
//! steady operating point, `simulate` integrates the dynamics onto a csv
//! trajectory, `analyze` decomposes the recorded voltage CFs and audits
//! the exact identities, `plot` renders csv columns as an SVG line chart.
//!
//! Every output is deterministic: fixed-format numbers, sorted map
//! iteration, no timestamps. On failure the last stderr line is one JSON
//! object and the exit code gives the class: 2 usage, 3 io, 4 solver.

mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfgrid_core::dynamics::TrajectoryError;
use cfgrid_core::{
    decompose_trajectory, parse_case, simulate, steady_coefficients, AnalysisError,
    AnalysisOptions, CfDecomposition, NetworkCase, PfOptions, SimError, SimOptions, Trajectory,
};

#[derive(Parser)]
#[command(name = "cfgrid", version, about = "Hybrid AC/DC grid simulation and complex-frequency analysis")]
struct Cli {
    #[command(flatten)]
    numerics: Numerics,
    #[command(subcommand)]
    command: Command,
}

/// Numeric knobs shared by every subcommand. Unset flags keep the
/// library defaults, which differ between the standalone power flow and
/// the one embedded in the simulator.
#[derive(Args)]
struct Numerics {
    /// Newton residual tolerance, pu.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Newton iteration cap.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Admittance magnitudes at or below this count as singular during analysis.
    #[arg(long, global = true)]
    eps_sing: Option<f64>,
}

impl Numerics {
    fn pf(&self) -> PfOptions {
        let mut o = PfOptions::default();
        if let Some(t) = self.tol {
            o.tol = t;
        }
        if let Some(n) = self.max_iter {
            o.max_iter = n;
        }
        o
    }

    fn sim(&self, tstop: f64, dt: f64) -> SimOptions {
        let mut o = SimOptions { tstop, dt, ..SimOptions::default() };
        if let Some(t) = self.tol {
            o.newton_tol = t;
            o.pf.tol = t;
        }
        if let Some(n) = self.max_iter {
            o.max_newton = n;
            o.pf.max_iter = n;
        }
        o
    }

    fn analysis(&self, buses: &[String]) -> AnalysisOptions {
        let mut o = AnalysisOptions::default();
        if let Some(e) = self.eps_sing {
            o.eps_sing = e;
        }
        if !buses.is_empty() {
            o.buses = Some(buses.iter().cloned().collect::<BTreeSet<_>>());
        }
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the steady operating point of a case.
    Powerflow(PowerflowArgs),
    /// Integrate the case dynamics and write the trajectory csv.
    Simulate(SimulateArgs),
    /// Decompose recorded bus voltage CFs and audit the weight identities.
    Analyze(AnalyzeArgs),
    /// Render csv columns as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PowerflowArgs {
    /// Case file (json).
    case: PathBuf,
    /// Write the solved bus voltages to this csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the steady decomposition weights of every bus to this csv.
    #[arg(long)]
    coeffs: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Case file (json).
    case: PathBuf,
    /// Stop time, s.
    #[arg(long, default_value_t = 10.0)]
    tstop: f64,
    /// Fixed step, s. Event times must lie on the sample grid.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Trajectory csv path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Case file (json).
    case: PathBuf,
    /// Trajectory csv written by `simulate` from the same case.
    #[arg(long)]
    traj: PathBuf,
    /// Restrict output to these buses (repeatable); default is all.
    #[arg(long = "bus")]
    buses: Vec<String>,
    /// Decomposition csv path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the audit report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Input csv.
    input: PathBuf,
    /// Column names to draw, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    columns: Vec<String>,
    /// Column supplying x values; defaults to the first column.
    #[arg(long)]
    x: Option<String>,
    /// Keep only rows where a column equals a value, as col=value (repeatable).
    #[arg(long = "filter")]
    filters: Vec<String>,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Chart title; empty for none.
    #[arg(long, default_value = "")]
    title: String,
    /// X axis label; defaults to the x column name.
    #[arg(long)]
    xlabel: Option<String>,
    /// Y axis label; empty for none.
    #[arg(long, default_value = "")]
    ylabel: String,
}

enum CliError {
    Usage(String),
    Io(String),
    Solver(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Solver(_) => "solver",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Solver(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Solver(m) => m,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {}", path.display(), e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CFGRID_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; those exit clean.
            let is_usage = e.exit_code() != 0;
            let _ = e.print();
            if !is_usage {
                return ExitCode::SUCCESS;
            }
            emit_error_json("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error_json(e.kind(), e.message());
            ExitCode::from(e.code())
        }
    }
}

fn emit_error_json(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Powerflow(ref a) => run_powerflow(a, &cli.numerics),
        Command::Simulate(ref a) => run_simulate(a, &cli.numerics),
        Command::Analyze(ref a) => run_analyze(a, &cli.numerics),
        Command::Plot(ref a) => run_plot(a),
    }
}

fn load_case(path: &Path) -> Result<NetworkCase, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_case(&text).map_err(|e| io_err(path, e))
}

/// 12 significant digits, the precision every csv number carries.
fn sig(x: f64) -> String {
    format!("{x:.11e}")
}

fn run_powerflow(args: &PowerflowArgs, num: &Numerics) -> Result<(), CliError> {
    let case = load_case(&args.case)?;
    let sol = cfgrid_core::powerflow::solve(&case, &num.pf())
        .map_err(|e| CliError::Solver(e.to_string()))?;
    println!("case {}: power flow converged in {} iterations", case.name, sol.iterations);
    for (b, v) in case.buses.iter().zip(&sol.v) {
        println!("bus {}: {:.6} pu, {:.6} rad", b.id, v.norm(), v.arg());
    }
    for (id, sp) in &sol.converters {
        println!("converter {}: m {:.6}, alpha {:.6} rad", id, sp.m, sp.alpha);
    }
    if let Some(out) = &args.out {
        let mut w = csv_writer(out)?;
        let mut res: io::Result<()> = writeln!(w, "bus,v_re,v_im,v_mag,v_ang");
        for (b, v) in case.buses.iter().zip(&sol.v) {
            if res.is_ok() {
                res = writeln!(
                    w,
                    "{},{},{},{},{}",
                    b.id,
                    sig(v.re),
                    sig(v.im),
                    sig(v.norm()),
                    sig(v.arg())
                );
            }
        }
        res.and_then(|_| w.flush()).map_err(|e| io_err(out, e))?;
    }
    if let Some(out) = &args.coeffs {
        let records = steady_coefficients(&case, &sol, &num.analysis(&[]))
            .map_err(|e| CliError::Solver(e.to_string()))?;
        let mut w = csv_writer(out)?;
        write_decomposition_csv(&mut w, records.into_iter()).map_err(|e| io_err(out, e))?;
    }
    Ok(())
}

fn run_simulate(args: &SimulateArgs, num: &Numerics) -> Result<(), CliError> {
    let case = load_case(&args.case)?;
    let traj = simulate(&case, &num.sim(args.tstop, args.dt)).map_err(sim_error)?;
    let mut w = csv_writer(&args.out)?;
    traj.write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&args.out, e))?;
    println!(
        "case {}: {} samples at dt {} s, {} event(s)",
        traj.case_name,
        traj.n_samples(),
        traj.dt,
        traj.events.len()
    );
    for ev in &traj.events {
        println!(
            "event t={:.6}: {} (max voltage jump {:.3e} pu)",
            ev.t, ev.description, ev.max_voltage_jump
        );
    }
    Ok(())
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::BadOptions(_) | SimError::EventOffGrid { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Solver(e.to_string()),
    }
}

fn analysis_error(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::UnknownBus(_) => CliError::Usage(e.to_string()),
        // The trajectory csv does not belong to the case it was paired with.
        AnalysisError::MissingChannel(_) | AnalysisError::BadTrajectory(_) => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Solver(e.to_string()),
    }
}

fn run_analyze(args: &AnalyzeArgs, num: &Numerics) -> Result<(), CliError> {
    let case = load_case(&args.case)?;
    let file = fs::File::open(&args.traj).map_err(|e| io_err(&args.traj, e))?;
    let traj = Trajectory::read_csv(BufReader::new(file), &case).map_err(|e| match e {
        TrajectoryError::Io(e) => io_err(&args.traj, e),
        TrajectoryError::Parse(m) => io_err(&args.traj, m),
    })?;
    let opts = num.analysis(&args.buses);
    let mut w = csv_writer(&args.out)?;
    let mut sink_err: Option<io::Error> = None;
    write_decomposition_header(&mut w).map_err(|e| io_err(&args.out, e))?;
    let report = decompose_trajectory(&case, &traj, &opts, |rec| {
        if sink_err.is_none() {
            if let Err(e) = write_decomposition_rows(&mut w, &rec) {
                sink_err = Some(e);
            }
        }
    })
    .map_err(analysis_error)?;
    if let Some(e) = sink_err {
        return Err(io_err(&args.out, e));
    }
    w.flush().map_err(|e| io_err(&args.out, e))?;
    print!("{report}");
    if let Some(path) = &args.report {
        fs::write(path, report.to_string()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_decomposition_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "t,bus,term,counterpart,coef_re,coef_im,cf_re,cf_im")
}

/// One row per weight: branch admittance terms, neighbor voltage terms,
/// then the injection term, each with the CF value the weight multiplies
/// (rho in the re column, omega in im). Undefined CFs print as NaN.
fn write_decomposition_rows<W: Write>(w: &mut W, rec: &CfDecomposition) -> io::Result<()> {
    let t = sig(rec.time);
    for (id, coef) in &rec.c_chi {
        let cf = rec.chi[id];
        writeln!(
            w,
            "{},{},c_chi,{},{},{},{},{}",
            t,
            rec.bus,
            id,
            sig(coef.re),
            sig(coef.im),
            sig(cf.rho),
            sig(cf.omega)
        )?;
    }
    for (id, coef) in &rec.c_eta {
        let cf = rec.eta_neighbors[id];
        writeln!(
            w,
            "{},{},c_eta,{},{},{},{},{}",
            t,
            rec.bus,
            id,
            sig(coef.re),
            sig(coef.im),
            sig(cf.rho),
            sig(cf.omega)
        )?;
    }
    writeln!(
        w,
        "{},{},c_xi,{},{},{},{},{}",
        t,
        rec.bus,
        rec.bus,
        sig(rec.c_xi.re),
        sig(rec.c_xi.im),
        sig(rec.xi.rho),
        sig(rec.xi.omega)
    )
}

fn write_decomposition_csv<W: Write>(
    w: &mut W,
    records: impl Iterator<Item = CfDecomposition>,
) -> io::Result<()> {
    write_decomposition_header(w)?;
    for rec in records {
        write_decomposition_rows(w, &rec)?;
    }
    w.flush()
}

fn run_plot(args: &PlotArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.input).map_err(|e| io_err(&args.input, e))?;
    let table = Table::parse(&text).map_err(|m| io_err(&args.input, m))?;
    let mut filters = Vec::new();
    for f in &args.filters {
        let (col, value) = f
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("filter {f:?} is not col=value")))?;
        filters.push((table.column_index(col)?, value));
    }
    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&r| filters.iter().all(|&(c, value)| table.cell(r, c) == value))
        .collect();
    let x_name = args.x.as_deref().unwrap_or(&table.header[0]);
    let x_col = table.column_index(x_name)?;
    let x = table.numeric_column(x_col, &rows);
    let mut series = Vec::new();
    for name in &args.columns {
        let c = table.column_index(name)?;
        series.push(plot::Series { label: name.clone(), y: table.numeric_column(c, &rows) });
    }
    let spec = plot::PlotSpec {
        title: args.title.clone(),
        x_label: args.xlabel.clone().unwrap_or_else(|| x_name.to_string()),
        y_label: args.ylabel.clone(),
        x,
        series,
    };
    let svg = plot::render(&spec).map_err(|e| match e {
        plot::PlotError::EmptyData => {
            CliError::Io(format!("{}: no plottable rows", args.input.display()))
        }
    })?;
    fs::write(&args.out, svg).map_err(|e| io_err(&args.out, e))?;
    Ok(())
}

/// Comma separated table with a header line. Values are kept as strings;
/// fields never contain commas in any csv this tool writes or reads.
struct Table<'a> {
    header: Vec<&'a str>,
    cells: Vec<Vec<&'a str>>,
}

impl<'a> Table<'a> {
    fn parse(text: &'a str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header: Vec<&str> =
            lines.next().ok_or_else(|| "empty file".to_string())?.split(',').collect();
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<&str> = line.split(',').collect();
            if row.len() != header.len() {
                return Err(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                ));
            }
            cells.push(row);
        }
        Ok(Self { header, cells })
    }

    fn n_rows(&self) -> usize {
        self.cells.len()
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.cells[row][col]
    }

    fn column_index(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Usage(format!("column {name:?} not found")))
    }

    /// Column values over the selected rows; unparsable fields become NaN
    /// and are skipped by the renderer.
    fn numeric_column(&self, col: usize, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.cells[r][col].parse::<f64>().unwrap_or(f64::NAN)).collect()
    }
}
