//! Monte-Carlo sweeps, their result table and CSV/SVG output.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, run_ce, CsiMode, Realization, Scheme};
use crate::em_basis::BasisSet;
use crate::error::{Error, Result};
use crate::estimation::CeScheme;
use crate::scenario::SystemConfig;

pub const CSV_HEADER: &str = "scheme,csi,param,value,metric,mean,stderr,n";

/// Parameter varied along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParam {
    /// CE SNR in dB.
    SnrC,
    /// Precoding SNR in dB.
    SnrP,
    /// Inter-element spacing in wavelengths.
    Spacing,
    /// Ports per axis of the discrete position grid.
    Ports,
}

impl fmt::Display for SweptParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweptParam::SnrC => "snr_c",
            SweptParam::SnrP => "snr_p",
            SweptParam::Spacing => "spacing",
            SweptParam::Ports => "ports",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Sum SE per subcarrier, bps/Hz.
    Se,
    NmseS,
    NmseE,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Se => "se",
            Metric::NmseS => "nmse_s",
            Metric::NmseE => "nmse_e",
        })
    }
}

fn default_realizations() -> usize {
    100
}

fn default_csi() -> Vec<CsiMode> {
    vec![CsiMode::Perfect]
}

fn default_ports() -> usize {
    3
}

/// A sweep description, read from TOML.
///
/// ```toml
/// param = "spacing"
/// values = [0.5, 1.0, 1.5]
/// realizations = 20
/// schemes = ["SEMRA-WMMSE", "SEMRA-ZF", "EMRA"]
/// csi = ["estimated"]
///
/// [system]
/// snr_ce_db = 20.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweptParam,
    pub values: Vec<f64>,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(with = "scheme_names")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_csi")]
    pub csi: Vec<CsiMode>,
    /// Port grid size when ports are not the swept parameter.
    #[serde(default = "default_ports")]
    pub ports: usize,
    /// Fixed settings; unlisted fields keep their defaults.
    #[serde(default)]
    pub system: SystemConfig,
}

mod scheme_names {
    use super::Scheme;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Scheme], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Scheme>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a sweep file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec = Self::from_toml_str(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.values.is_empty() {
            return bad("sweep needs at least one value");
        }
        if self.values.iter().any(|v| !v.is_finite()) || self.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep values must be finite and strictly increasing");
        }
        if self.realizations == 0 {
            return bad("realizations must be at least 1");
        }
        if self.schemes.is_empty() || self.csi.is_empty() {
            return bad("sweep needs at least one scheme and one CSI mode");
        }
        if self.param == SweptParam::Ports && self.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return bad("port counts must be positive integers");
        }
        for &v in &self.values {
            self.config_at(v).validate()?;
        }
        Ok(())
    }

    /// System configuration at one swept value.
    pub fn config_at(&self, value: f64) -> SystemConfig {
        let base = self.system.clone();
        match self.param {
            SweptParam::SnrC => SystemConfig { snr_ce_db: value, ..base },
            SweptParam::SnrP => SystemConfig { snr_precoding_db: value, ..base },
            SweptParam::Spacing => {
                let lambda = base.lambda();
                base.with_spacing(value * lambda)
            }
            SweptParam::Ports => base,
        }
    }

    fn ports_at(&self, value: f64) -> usize {
        match self.param {
            SweptParam::Ports => value as usize,
            _ => self.ports,
        }
    }
}

/// One aggregated cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: String,
    pub csi: CsiMode,
    pub param: SweptParam,
    pub value: f64,
    pub metric: Metric,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// A realization excluded from one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub scheme: String,
    pub value: f64,
    pub realization: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub quarantined: Vec<Quarantined>,
}

impl ResultTable {
    pub fn find(&self, scheme: &str, csi: CsiMode, value: f64, metric: Metric) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.csi == csi && r.value == value && r.metric == metric)
    }
}

/// Seed of realization `index`: the first word of ChaCha8 stream `index`
/// keyed by `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Mean and standard error of the mean.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

type Cell = (String, CsiMode, Metric);
type Sample = (Cell, std::result::Result<f64, String>);

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Runs `job` for every realization on the pool, then reduces in
/// realization order so the table does not depend on the job count.
fn sweep_with<F>(spec: &SweepSpec, seed: u64, jobs: usize, job: F) -> Result<ResultTable>
where
    F: Fn(&Realization, usize) -> Vec<Sample> + Sync,
{
    spec.validate()?;
    let basis = BasisSet::new(spec.system.num_basis)?;
    let pool = pool(jobs)?;
    let mut table = ResultTable::default();
    for &value in &spec.values {
        let config = spec.config_at(value);
        let ports = spec.ports_at(value);
        let per_realization: Vec<std::result::Result<Vec<Sample>, String>> = pool.install(|| {
            (0..spec.realizations)
                .into_par_iter()
                .map(|r| {
                    let real = Realization::new(&config, basis.clone(), derive_seed(seed, r as u64))
                        .map_err(|e| e.to_string())?;
                    Ok(job(&real, ports))
                })
                .collect()
        });

        let mut cells: Vec<(Cell, Vec<f64>)> = Vec::new();
        for (r, samples) in per_realization.into_iter().enumerate() {
            let samples = match samples {
                Ok(s) => s,
                Err(message) => {
                    log::warn!("value {value}: realization {r} failed: {message}");
                    table.quarantined.push(Quarantined {
                        scheme: "*".into(),
                        value,
                        realization: r,
                        message,
                    });
                    continue;
                }
            };
            for (cell, sample) in samples {
                let slot = match cells.iter().position(|(c, _)| *c == cell) {
                    Some(i) => i,
                    None => {
                        cells.push((cell.clone(), Vec::new()));
                        cells.len() - 1
                    }
                };
                match sample {
                    Ok(x) => cells[slot].1.push(x),
                    Err(message) => {
                        log::warn!("value {value}: {} realization {r} quarantined: {message}", cell.0);
                        table.quarantined.push(Quarantined {
                            scheme: cell.0.clone(),
                            value,
                            realization: r,
                            message,
                        });
                    }
                }
            }
        }
        for ((scheme, csi, metric), xs) in cells {
            if xs.is_empty() {
                continue;
            }
            let (mean, stderr) = mean_stderr(&xs);
            table.rows.push(ResultRow {
                scheme,
                csi,
                param: spec.param,
                value,
                metric,
                mean,
                stderr,
                n: xs.len(),
            });
        }
    }
    Ok(table)
}

/// SE sweep over the sweep file's schemes and CSI modes.
pub fn run_sweep(spec: &SweepSpec, seed: u64, jobs: usize) -> Result<ResultTable> {
    sweep_with(spec, seed, jobs, |real, ports| {
        evaluate(real, &spec.schemes, &spec.csi, ports)
            .into_iter()
            .map(|(scheme, mode, r)| ((scheme.to_string(), mode, Metric::Se), r.map_err(|e| e.to_string())))
            .collect()
    })
}

/// NMSE-S / NMSE-E sweep of the CE pipelines behind the sweep file's schemes.
pub fn run_ce_sweep(spec: &SweepSpec, seed: u64, jobs: usize) -> Result<ResultTable> {
    let mut pipelines: Vec<CeScheme> = spec.schemes.iter().filter_map(|s| s.ce_scheme()).collect();
    pipelines.sort_by_key(|p| *p as u8);
    pipelines.dedup();
    if pipelines.is_empty() {
        return Err(Error::InvalidConfig("no scheme in the sweep uses channel estimation".into()));
    }
    sweep_with(spec, seed, jobs, |real, _| {
        let mut out = Vec::new();
        for &p in &pipelines {
            let name = match p {
                CeScheme::Semra => "SEMRA",
                CeScheme::Emra => "EMRA",
            };
            let cell = |m| (name.to_string(), CsiMode::Estimated, m);
            match run_ce(real, p) {
                Ok(o) => {
                    out.push((cell(Metric::NmseS), Ok(o.nmse_s)));
                    out.push((cell(Metric::NmseE), Ok(o.nmse_e)));
                }
                Err(e) => {
                    out.push((cell(Metric::NmseS), Err(e.to_string())));
                    out.push((cell(Metric::NmseE), Err(e.to_string())));
                }
            }
        }
        out
    })
}

/// Writes the table as CSV with [`CSV_HEADER`].
pub fn write_csv(table: &ResultTable, out: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Numeric(format!("CSV encoding: {e}"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for row in &table.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Numeric(format!("CSV flush: {e}")))?;
    Ok(())
}

/// Parses rows written by [`write_csv`].
pub fn read_csv(input: impl Read) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Numeric(format!("CSV decoding: {e}"))))
        .collect()
}

/// Writes `<stem>.csv` and one `<stem>_<metric>.svg` per metric to `dir`.
/// An empty table yields a header-only CSV and no plot.
pub fn emit_outputs(table: &ResultTable, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
    write_csv(table, std::io::BufWriter::new(file))?;
    let mut written = vec![csv_path];
    if table.rows.is_empty() {
        log::warn!("empty result table: wrote header-only CSV, no plot");
        return Ok(written);
    }
    let mut metrics: Vec<Metric> = table.rows.iter().map(|r| r.metric).collect();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        let path = dir.join(format!("{stem}_{metric}.svg"));
        super::write_svg_plot(table, metric, &path)?;
        written.push(path);
    }
    Ok(written)
}
