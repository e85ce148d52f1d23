//! Command-line front end: `check`, `simulate`, `infer`, `fit` and `plot`.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or model errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use darkmatter::cmaes::{fit_halos, CmaesConfig};
use darkmatter::dsl::{self, DataArray};
use darkmatter::mcmc::{run_chains, sort_halo_labels, summarize, write_draws_csv, SamplerConfig};
use darkmatter::sky::{
    model_bindings, read_sky, read_truth, simulate_batch, simulate_sky, write_sky, write_truth,
    HaloTruth, SimConfig,
};
use darkmatter::{Halo, LensModelParams, Point2, Sky};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "darkmatter", version, about = "Dark matter halo localization from galaxy ellipticities")]
pub struct Cli {
    /// Random seed; drawn from the clock and echoed when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a model and print its node counts.
    Check(CheckArgs),
    /// Simulate a sky (or a competition-style batch of skies).
    Simulate(SimulateArgs),
    /// Sample the posterior of a model given a sky.
    Infer(InferArgs),
    /// Fit halo locations and masses with CMA-ES.
    Fit(FitArgs),
    /// Render a sky, with optional true and fitted halos, as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub model: PathBuf,
    /// Model constant, e.g. `--const G=20`. Repeatable.
    #[arg(long = "const", value_name = "NAME=VALUE", value_parser = parse_const)]
    pub consts: Vec<(String, f64)>,
    /// Sky whose galaxies are bound as data; placeholders of length G otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Halo as `x,y,mass`. Repeatable up to 3 times.
    #[arg(long = "halo", value_name = "X,Y,MASS", value_parser = parse_halo)]
    pub halos: Vec<Halo>,
    /// Galaxy count; drawn from [300, 740] when omitted.
    #[arg(long)]
    pub galaxies: Option<usize>,
    /// Sky CSV to write (single-sky mode).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Halo truth CSV to write.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Number of competition-style skies to generate into `--out-dir`.
    #[arg(long, conflicts_with_all = ["halos", "galaxies", "out"])]
    pub batch: Option<usize>,
    #[arg(long, requires = "batch")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub sky_id: i64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "const", value_name = "NAME=VALUE", value_parser = parse_const)]
    pub consts: Vec<(String, f64)>,
    #[arg(long, default_value_t = 20_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    /// Draws CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Posterior summary JSON to write.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub halos: usize,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_evals: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Truth CSV; the row matching the sky id is drawn as red crosses.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// True halo as `x,y,mass`, alternative to `--truth`. Repeatable.
    #[arg(long = "halo", value_name = "X,Y,MASS", value_parser = parse_halo, conflicts_with = "truth")]
    pub halos: Vec<Halo>,
    /// Fit JSON as written by `fit`; drawn as green circles.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_const(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(format!("empty constant name in `{s}`"));
    }
    let value: f64 = value.trim().parse().map_err(|_| format!("`{value}` is not a number"))?;
    if !value.is_finite() {
        return Err(format!("constant {name} must be finite"));
    }
    Ok((name.to_string(), value))
}

fn parse_halo(s: &str) -> Result<Halo, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [x, y, m] = parts[..] else {
        return Err(format!("expected x,y,mass, got `{s}`"));
    };
    let num = |v: &str| -> Result<f64, String> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("`{v}` is not a finite number"))
    };
    let (x, y, m) = (num(x)?, num(y)?, num(m)?);
    if m < 0.0 {
        return Err(format!("halo mass must be non-negative, got {m}"));
    }
    Ok(Halo::new(x, y, m))
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let seed = cli.seed.unwrap_or_else(clock_seed);
    eprintln!("seed: {seed}");
    match execute(&cli.command, seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn clock_seed() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

pub fn execute(command: &Command, seed: u64) -> Result<(), CliError> {
    match command {
        Command::Check(a) => check(a),
        Command::Simulate(a) => simulate(a, seed),
        Command::Infer(a) => infer(a, seed),
        Command::Fit(a) => fit(a, seed),
        Command::Plot(a) => plot(a),
    }
}

fn read_model(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check(a: &CheckArgs) -> Result<(), CliError> {
    let source = read_model(&a.model)?;
    let ast = dsl::parse(&dsl::tokenize(&source).map_err(|e| model_err(&a.model, e))?)
        .map_err(|e| model_err(&a.model, e))?;
    let mut constants: HashMap<String, f64> = a.consts.iter().cloned().collect();
    let data = match &a.data {
        Some(path) => {
            let sky = read_sky(path).map_err(data_err)?;
            let h = constants.get("H").copied().unwrap_or(1.0) as usize;
            let (c, d) = model_bindings(&sky, h);
            for (k, v) in c {
                constants.entry(k).or_insert(v);
            }
            d
        }
        None => placeholder_data(&ast, &constants),
    };
    let graph = dsl::compile(&ast, &constants, &data).map_err(|e| model_err(&a.model, e))?;
    println!("{}: {graph}", a.model.display());
    println!(
        "total nodes: {}\nunobserved: {}\nobserved: {}",
        graph.len(),
        graph.unobserved().len(),
        graph.observed_count()
    );
    Ok(())
}

// Positional errors already start with `line:column`.
fn model_err(path: &Path, e: dsl::DslError) -> CliError {
    let msg = e.to_string();
    let sep = if msg.starts_with(|c: char| c.is_ascii_digit()) { ":" } else { ": " };
    CliError::Data(format!("{}{sep}{msg}", path.display()))
}

// Zero-valued stand-ins for the halo model's per-galaxy data, so a model can
// be checked before any sky exists.
fn placeholder_data(ast: &dsl::ModelAst, constants: &HashMap<String, f64>) -> HashMap<String, DataArray> {
    let Some(&g) = constants.get("G") else {
        return HashMap::new();
    };
    let g = g.max(0.0) as usize;
    let names = ast.referenced_names();
    ["gx", "gy", "e1", "e2"]
        .iter()
        .filter(|n| names.contains(**n))
        .map(|n| {
            // Distinct locations keep every galaxy-halo distance well defined.
            let values = (0..g).map(|i| (i as f64 + 0.5) * 4200.0 / g.max(1) as f64).collect();
            let values = if n.starts_with('g') { values } else { vec![0.0; g] };
            (n.to_string(), DataArray::vector(values))
        })
        .collect()
}

fn simulate(a: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    if let Some(n) = a.batch {
        let dir = a
            .out_dir
            .as_ref()
            .ok_or_else(|| CliError::Usage("--batch requires --out-dir".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let skies = simulate_batch(n, seed).map_err(data_err)?;
        let mut truth = Vec::with_capacity(n);
        for s in &skies {
            write_sky(&s.sky, dir.join(format!("Sky{}.csv", s.sky.id))).map_err(data_err)?;
            truth.push(HaloTruth {
                sky_id: s.sky.id,
                halos: s.halos.iter().map(|h| h.loc).collect(),
            });
        }
        let truth_path = a.truth.clone().unwrap_or_else(|| dir.join("truth.csv"));
        write_truth(&truth, truth_path).map_err(data_err)?;
        println!("wrote {n} skies to {}", dir.display());
        return Ok(());
    }
    if a.halos.is_empty() || a.halos.len() > 3 {
        return Err(CliError::Usage(format!(
            "between 1 and 3 --halo flags required, got {}",
            a.halos.len()
        )));
    }
    let out = a
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let config = SimConfig {
        n_galaxies: a.galaxies,
        ..SimConfig::new(a.halos.clone(), seed)
    };
    let sky = simulate_sky(&config, a.sky_id).map_err(data_err)?;
    write_sky(&sky, out).map_err(data_err)?;
    if let Some(t) = &a.truth {
        let row = HaloTruth {
            sky_id: a.sky_id,
            halos: a.halos.iter().map(|h| h.loc).collect(),
        };
        write_truth(&[row], t).map_err(data_err)?;
    }
    println!("wrote {} galaxies to {}", sky.len(), out.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(data_err)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn infer(a: &InferArgs, seed: u64) -> Result<(), CliError> {
    let source = read_model(&a.model)?;
    let sky = read_sky(&a.data).map_err(data_err)?;
    let consts: HashMap<String, f64> = a.consts.iter().cloned().collect();
    let h = consts.get("H").copied().unwrap_or(1.0);
    if h.fract() != 0.0 || !(1.0..=3.0).contains(&h) {
        return Err(CliError::Usage(format!("H must be 1, 2 or 3, got {h}")));
    }
    let (mut constants, data) = model_bindings(&sky, h as usize);
    constants.extend(consts);
    let graph = dsl::compile_source(&source, &constants, &data).map_err(|e| model_err(&a.model, e))?;
    let config = SamplerConfig {
        iterations: a.iters,
        burn_in: a.burnin,
        thin: a.thin,
        n_chains: a.chains,
        seed,
        ..Default::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let run = run_chains(&graph, &config).map_err(data_err)?;
    write_draws_csv(&run, &a.out).map_err(data_err)?;
    if let Some(path) = &a.summary {
        let sorted = sort_halo_labels(&run.names, &run.draws_by_chain());
        let summary = summarize(&run.names, &sorted).map_err(data_err)?;
        write_json(path, &summary)?;
    }
    let rates: Vec<String> = run
        .chains
        .iter()
        .map(|c| {
            let mean = c.acceptance.iter().sum::<f64>() / c.acceptance.len() as f64;
            format!("{mean:.3}")
        })
        .collect();
    println!(
        "{} chains x {} draws of {} nodes; mean acceptance per chain: {}",
        run.chains.len(),
        config.retained(),
        run.names.len(),
        rates.join(", ")
    );
    Ok(())
}

fn fit(a: &FitArgs, seed: u64) -> Result<(), CliError> {
    if a.halos == 0 || a.halos > 3 {
        return Err(CliError::Usage(format!("--halos must be 1, 2 or 3, got {}", a.halos)));
    }
    let sky = read_sky(&a.data).map_err(data_err)?;
    let mut config = CmaesConfig::for_halos(a.halos, seed);
    if let Some(r) = a.restarts {
        config.restarts = r;
    }
    if let Some(m) = a.max_evals {
        config.max_evals = m;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let result = fit_halos(&sky, a.halos, &LensModelParams::default(), &config).map_err(data_err)?;
    write_json(&a.out, &result)?;
    for h in &result.halos {
        println!("halo at ({:.1}, {:.1}) mass {:.1}", h.loc.x, h.loc.y, h.mass);
    }
    Ok(())
}

/// Reads the halos back from a fit JSON file.
pub fn read_fit_halos(path: &Path) -> Result<Vec<Halo>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let bad = || CliError::Data(format!("{}: expected {{\"halos\": [{{\"x\", \"y\", \"mass\"}}]}}", path.display()));
    value["halos"]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|h| match (h["x"].as_f64(), h["y"].as_f64(), h["mass"].as_f64()) {
            (Some(x), Some(y), Some(m)) => Ok(Halo::new(x, y, m)),
            _ => Err(bad()),
        })
        .collect()
}

fn plot(a: &PlotArgs) -> Result<(), CliError> {
    let sky = read_sky(&a.data).map_err(data_err)?;
    let truth: Option<Vec<Point2>> = match &a.truth {
        Some(path) => {
            let rows = read_truth(path).map_err(data_err)?;
            let row = rows.into_iter().find(|r| r.sky_id == sky.id).ok_or_else(|| {
                CliError::Data(format!("{}: no row for sky {}", path.display(), sky.id))
            })?;
            Some(row.halos)
        }
        None if !a.halos.is_empty() => Some(a.halos.iter().map(|h| h.loc).collect()),
        None => None,
    };
    let fitted = a.fit.as_deref().map(read_fit_halos).transpose()?;
    render_sky_svg(&sky, truth.as_deref(), fitted.as_deref(), &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

const GALAXY_RADIUS: f64 = 30.0;
const MARKER_SIZE: f64 = 70.0;

fn num(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// SVG markup for a sky: one ellipse per galaxy (orientation ½·atan2(e2, e1),
/// axis ratio (1 − |e|)/(1 + |e|)), red crosses at true halos and green
/// circles at fitted halos. Sky coordinates map to the viewBox with y up.
pub fn sky_svg(sky: &Sky, true_halos: Option<&[Point2]>, fitted: Option<&[Halo]>) -> String {
    let size = num(sky.field_size);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="800" height="800">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{size}" height="{size}" fill="black"/>"#);
    let _ = writeln!(s, r#"<g transform="translate(0,{size}) scale(1,-1)">"#);
    let _ = writeln!(s, r#"<g class="galaxies" fill="none" stroke="white" stroke-width="4">"#);
    for g in sky.galaxies() {
        let e = g.ell.magnitude().min(0.999);
        let angle = 0.5 * g.ell.e2.atan2(g.ell.e1).to_degrees();
        let ry = GALAXY_RADIUS * (1.0 - e) / (1.0 + e);
        let _ = writeln!(
            s,
            r#"<ellipse cx="{x}" cy="{y}" rx="{rx}" ry="{ry}" transform="rotate({a} {x} {y})"/>"#,
            x = num(g.loc.x),
            y = num(g.loc.y),
            rx = num(GALAXY_RADIUS),
            ry = num(ry),
            a = num(angle),
        );
    }
    s.push_str("</g>\n");
    for p in true_halos.unwrap_or_default() {
        let (x0, x1, y0, y1) = (p.x - MARKER_SIZE, p.x + MARKER_SIZE, p.y - MARKER_SIZE, p.y + MARKER_SIZE);
        let _ = writeln!(
            s,
            r#"<g class="true-halo" stroke="red" stroke-width="14"><line x1="{}" y1="{}" x2="{}" y2="{}"/><line x1="{}" y1="{}" x2="{}" y2="{}"/></g>"#,
            num(x0), num(y0), num(x1), num(y1), num(x0), num(y1), num(x1), num(y0)
        );
    }
    for h in fitted.unwrap_or_default() {
        let _ = writeln!(
            s,
            r#"<g class="fitted-halo" stroke="lime" stroke-width="14" fill="none"><circle cx="{}" cy="{}" r="{}"/></g>"#,
            num(h.loc.x),
            num(h.loc.y),
            num(MARKER_SIZE)
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Writes [`sky_svg`] to `path`.
pub fn render_sky_svg(
    sky: &Sky,
    true_halos: Option<&[Point2]>,
    fitted: Option<&[Halo]>,
    path: &Path,
) -> Result<(), CliError> {
    let svg = sky_svg(sky, true_halos, fitted);
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    f.write_all(svg.as_bytes())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use darkmatter::{Ellipticity, Galaxy};

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_const("G=20"), Ok(("G".to_string(), 20.0)));
        assert!(parse_const("G").is_err());
        assert!(parse_const("=3").is_err());
        assert_eq!(parse_halo("1500,2500,1000"), Ok(Halo::new(1500.0, 2500.0, 1000.0)));
        assert!(parse_halo("1,2").is_err());
        assert!(parse_halo("1,2,-3").is_err());
        assert!(parse_halo("1,x,3").is_err());
    }

    fn sky(ells: &[(f64, f64)]) -> Sky {
        let galaxies = ells
            .iter()
            .enumerate()
            .map(|(i, &(e1, e2))| Galaxy {
                id: i as i64,
                loc: Point2::new(100.0 * i as f64, 50.0),
                ell: Ellipticity::new(e1, e2),
            })
            .collect();
        Sky::new(1, galaxies, 4200.0).unwrap()
    }

    #[test]
    fn round_galaxy_is_a_circle() {
        let svg = sky_svg(&sky(&[(0.0, 0.0)]), None, None);
        assert!(svg.contains(r#"rx="30" ry="30""#), "{svg}");
        assert!(svg.contains(r#"viewBox="0 0 4200 4200""#));
        assert!(!svg.contains("true-halo") && !svg.contains("fitted-halo"));
    }

    #[test]
    fn ellipse_orientation_and_axis_ratio() {
        // e = (0, 0.5): |e| = 0.5, ratio 1/3, angle 45 degrees.
        let svg = sky_svg(&sky(&[(0.0, 0.5)]), None, None);
        assert!(svg.contains(r#"ry="10""#), "{svg}");
        assert!(svg.contains("rotate(45 0 50)"), "{svg}");
    }

    #[test]
    fn marker_groups() {
        let s = sky(&[(0.1, 0.0), (0.0, 0.1), (0.2, 0.2)]);
        let svg = sky_svg(&s, Some(&[Point2::new(1.0, 2.0)]), Some(&[Halo::new(3.0, 4.0, 5.0)]));
        assert_eq!(svg.matches("<ellipse").count(), 3);
        assert_eq!(svg.matches(r#"class="true-halo""#).count(), 1);
        assert_eq!(svg.matches(r#"class="fitted-halo""#).count(), 1);
        assert_eq!(svg.matches("<circle").count(), 1);
    }
}
