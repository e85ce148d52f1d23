//! Synthetic skies and the two CSV file formats.
//!
//! Sky files carry one galaxy per row under the header `GalaxyID,x,y,e1,e2`.
//! Halo truth files carry one sky per row under
//! `SkyId,NumberHalos,x1,y1,x2,y2,x3,y3`, with unused slots written as `0`.
//! Reals are written with 17 significant digits, so reading a written file
//! gives back identical values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dsl::DataArray;
use crate::lensing::{
    predicted_ellipticity_mean, Ellipticity, Galaxy, Halo, LensError, LensModelParams, Point2, Sky,
    FIELD_SIZE,
};

pub const SKY_HEADER: [&str; 5] = ["GalaxyID", "x", "y", "e1", "e2"];
pub const TRUTH_HEADER: [&str; 8] = ["SkyId", "NumberHalos", "x1", "y1", "x2", "y2", "x3", "y3"];

/// Galaxy counts drawn when none is given.
pub const GALAXY_COUNT_RANGE: (usize, usize) = (300, 740);
/// Halo masses drawn in competition mode. Not a physical scale.
pub const MASS_RANGE: (f64, f64) = (100.0, 1500.0);
pub const MAX_HALOS: usize = 3;

// Noise redraws per galaxy before the location itself is redrawn. Close to a
// heavy halo the mean ellipticity exceeds 1 and no noise draw can bring the
// galaxy inside the unit disk.
const NOISE_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SkyError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: header mismatch: missing column(s) {missing:?}, found {found:?}")]
    Header {
        path: PathBuf,
        missing: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}: line {line}: column `{column}`: cannot parse `{value}` as a number")]
    Field {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}: duplicate galaxy id {id}")]
    DuplicateGalaxy { path: PathBuf, line: u64, id: i64 },
    #[error("{path}: line {line}: {message}")]
    Consistency {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Galaxy count; drawn uniformly from [`GALAXY_COUNT_RANGE`] when `None`.
    pub n_galaxies: Option<usize>,
    pub halos: Vec<Halo>,
    pub seed: u64,
    pub field_size: f64,
    /// Galaxies are never placed closer than this to a halo center.
    pub min_halo_clearance: f64,
    /// Per-component ellipticity noise variance.
    pub noise_var: f64,
}

impl SimConfig {
    pub fn new(halos: Vec<Halo>, seed: u64) -> Self {
        Self {
            n_galaxies: None,
            halos,
            seed,
            field_size: FIELD_SIZE,
            min_halo_clearance: 1.0,
            noise_var: 0.05,
        }
    }

    pub fn with_galaxies(mut self, n: usize) -> Self {
        self.n_galaxies = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), SkyError> {
        if self.halos.is_empty() || self.halos.len() > MAX_HALOS {
            return Err(SkyError::Config(format!(
                "between 1 and {MAX_HALOS} halos required, got {}",
                self.halos.len()
            )));
        }
        if self.n_galaxies == Some(0) {
            return Err(SkyError::Config("at least one galaxy required".into()));
        }
        if !(self.field_size > 0.0) || !(self.noise_var > 0.0) || !(self.min_halo_clearance > 0.0) {
            return Err(SkyError::Config(
                "field size, noise variance and clearance must be positive".into(),
            ));
        }
        for h in &self.halos {
            if !(h.mass >= 0.0) || !h.loc.is_finite() {
                return Err(SkyError::Config(format!("invalid halo {h:?}")));
            }
        }
        Ok(())
    }
}

/// Draws a sky from the forward model. Deterministic in `config.seed`.
pub fn simulate_sky(config: &SimConfig, sky_id: i64) -> Result<Sky, SkyError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with(config, sky_id, &mut rng)
}

fn simulate_with(config: &SimConfig, sky_id: i64, rng: &mut ChaCha8Rng) -> Result<Sky, SkyError> {
    let n = match config.n_galaxies {
        Some(n) => n,
        None => rng.random_range(GALAXY_COUNT_RANGE.0..=GALAXY_COUNT_RANGE.1),
    };
    let params = LensModelParams {
        sigma2: config.noise_var,
        field_hi: config.field_size,
        ..LensModelParams::default()
    };
    let noise = Normal::new(0.0, config.noise_var.sqrt()).expect("positive variance");

    let mut galaxies = Vec::with_capacity(n);
    while galaxies.len() < n {
        let loc = Point2::new(
            rng.random_range(0.0..config.field_size),
            rng.random_range(0.0..config.field_size),
        );
        if config
            .halos
            .iter()
            .any(|h| h.loc.distance(loc) < config.min_halo_clearance)
        {
            continue;
        }
        let mean = predicted_ellipticity_mean(loc, &config.halos, &params)?;
        let ell = (0..NOISE_ATTEMPTS).find_map(|_| {
            let e = Ellipticity::new(mean.e1 + noise.sample(rng), mean.e2 + noise.sample(rng));
            (e.e1 * e.e1 + e.e2 * e.e2 < 1.0).then_some(e)
        });
        if let Some(ell) = ell {
            galaxies.push(Galaxy {
                id: galaxies.len() as i64 + 1,
                loc,
                ell,
            });
        }
    }
    Ok(Sky::new(sky_id, galaxies, config.field_size)?)
}

/// Constants and data binding `sky` to the halo model with `num_halos`
/// halos: `G`, `H`, and the vectors `gx`, `gy`, `e1`, `e2`.
pub fn model_bindings(sky: &Sky, num_halos: usize) -> (HashMap<String, f64>, HashMap<String, DataArray>) {
    let g = sky.galaxies();
    let col = |f: fn(&Galaxy) -> f64| DataArray::vector(g.iter().map(f).collect());
    let constants = HashMap::from([
        ("G".to_string(), g.len() as f64),
        ("H".to_string(), num_halos as f64),
    ]);
    let data = HashMap::from([
        ("gx".to_string(), col(|g| g.loc.x)),
        ("gy".to_string(), col(|g| g.loc.y)),
        ("e1".to_string(), col(|g| g.ell.e1)),
        ("e2".to_string(), col(|g| g.ell.e2)),
    ]);
    (constants, data)
}

/// A simulated sky together with the halos that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSky {
    pub sky: Sky,
    pub halos: Vec<Halo>,
}

/// Competition-style batch: each sky gets 1 to 3 halos with uniform
/// locations and masses in [`MASS_RANGE`], and a galaxy count drawn from
/// [`GALAXY_COUNT_RANGE`]. Sky `k` (1-based) uses its own stream derived
/// from `(master_seed, k)`, so any sky can be regenerated alone.
pub fn simulate_batch(n_skies: usize, master_seed: u64) -> Result<Vec<SimulatedSky>, SkyError> {
    (1..=n_skies as u64)
        .map(|sky_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(sky_id);
            let n_halos = rng.random_range(1..=MAX_HALOS);
            let halos: Vec<Halo> = (0..n_halos)
                .map(|_| {
                    Halo::new(
                        rng.random_range(0.0..FIELD_SIZE),
                        rng.random_range(0.0..FIELD_SIZE),
                        rng.random_range(MASS_RANGE.0..MASS_RANGE.1),
                    )
                })
                .collect();
            let config = SimConfig::new(halos.clone(), master_seed);
            config.validate()?;
            let sky = simulate_with(&config, sky_id as i64, &mut rng)?;
            Ok(SimulatedSky { sky, halos })
        })
        .collect()
}

/// Formats a real with 17 significant digits; positional notation for
/// moderate magnitudes, scientific otherwise.
pub fn format_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.16e}");
    let exp: i32 = sci.rsplit_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    if (-5..17).contains(&exp) {
        format!("{:.*}", (16 - exp) as usize, x)
    } else {
        sci
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SkyError + '_ {
    move |source| SkyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> SkyError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => SkyError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => SkyError::Csv {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>, SkyError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        let missing = expected
            .iter()
            .filter(|c| !found.iter().any(|f| f == *c))
            .map(|c| c.to_string())
            .collect();
        return Err(SkyError::Header {
            path: path.to_path_buf(),
            missing,
            found,
        });
    }
    Ok(reader)
}

fn field<T: std::str::FromStr>(
    path: &Path,
    record: &csv::StringRecord,
    header: &[&str],
    col: usize,
) -> Result<T, SkyError> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record.get(col).unwrap_or("");
    raw.parse().map_err(|_| SkyError::Field {
        path: path.to_path_buf(),
        line,
        column: header[col].to_string(),
        value: raw.to_string(),
    })
}

// Sky id from the trailing digits of the file stem, e.g. `Training_Sky12.csv`.
fn sky_id_from_path(path: &Path) -> i64 {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(0)
}

/// Reads a sky file. The sky id is taken from trailing digits in the file
/// name (0 if there are none).
pub fn read_sky(path: impl AsRef<Path>) -> Result<Sky, SkyError> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &SKY_HEADER)?;
    let mut galaxies = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let id: i64 = field(path, &record, &SKY_HEADER, 0)?;
        let vals: Vec<f64> = (1..5)
            .map(|c| field(path, &record, &SKY_HEADER, c))
            .collect::<Result<_, _>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SkyError::Consistency {
                path: path.to_path_buf(),
                line,
                message: "non-finite value".into(),
            });
        }
        if !(0.0..=FIELD_SIZE).contains(&vals[0]) || !(0.0..=FIELD_SIZE).contains(&vals[1]) {
            return Err(SkyError::Consistency {
                path: path.to_path_buf(),
                line,
                message: format!("galaxy {id} lies outside the field [0, {FIELD_SIZE}]^2"),
            });
        }
        if !seen.insert(id) {
            return Err(SkyError::DuplicateGalaxy {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        galaxies.push(Galaxy {
            id,
            loc: Point2::new(vals[0], vals[1]),
            ell: Ellipticity::new(vals[2], vals[3]),
        });
    }
    Ok(Sky::new(sky_id_from_path(path), galaxies, FIELD_SIZE)?)
}

pub fn write_sky(sky: &Sky, path: impl AsRef<Path>) -> Result<(), SkyError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut body = String::with_capacity(sky.len() * 96);
    body.push_str(&SKY_HEADER.join(","));
    body.push('\n');
    for g in sky.galaxies() {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            g.id,
            format_real(g.loc.x),
            format_real(g.loc.y),
            format_real(g.ell.e1),
            format_real(g.ell.e2)
        ));
    }
    out.write_all(body.as_bytes()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// True halo locations for one sky. Truth files carry no masses.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloTruth {
    pub sky_id: i64,
    pub halos: Vec<Point2>,
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<HaloTruth>, SkyError> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &TRUTH_HEADER)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let consistency = |message: String| SkyError::Consistency {
            path: path.to_path_buf(),
            line,
            message,
        };
        let sky_id: i64 = field(path, &record, &TRUTH_HEADER, 0)?;
        let count: usize = field(path, &record, &TRUTH_HEADER, 1)?;
        if count == 0 || count > MAX_HALOS {
            return Err(consistency(format!(
                "NumberHalos must be between 1 and {MAX_HALOS}, got {count}"
            )));
        }
        let coords: Vec<f64> = (2..8)
            .map(|c| field(path, &record, &TRUTH_HEADER, c))
            .collect::<Result<_, _>>()?;
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(consistency("non-finite coordinate".into()));
        }
        if coords[2 * count..].iter().any(|&v| v != 0.0) {
            return Err(consistency(format!(
                "row declares {count} halo(s) but has nonzero values in unused halo columns"
            )));
        }
        let halos = coords[..2 * count]
            .chunks(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect();
        out.push(HaloTruth { sky_id, halos });
    }
    Ok(out)
}

pub fn write_truth(truth: &[HaloTruth], path: impl AsRef<Path>) -> Result<(), SkyError> {
    let path = path.as_ref();
    let mut body = TRUTH_HEADER.join(",");
    body.push('\n');
    for t in truth {
        if t.halos.is_empty() || t.halos.len() > MAX_HALOS {
            return Err(SkyError::Config(format!(
                "sky {} has {} halos; truth rows hold 1 to {MAX_HALOS}",
                t.sky_id,
                t.halos.len()
            )));
        }
        body.push_str(&format!("{},{}", t.sky_id, t.halos.len()));
        for slot in 0..MAX_HALOS {
            match t.halos.get(slot) {
                Some(p) => body.push_str(&format!(",{},{}", format_real(p.x), format_real(p.y))),
                None => body.push_str(",0,0"),
            }
        }
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}
