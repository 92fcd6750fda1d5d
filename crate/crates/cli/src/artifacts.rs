//! Output directories, JSON/CSV artifacts and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zapstop::{ExperimentConfig, RunRecord};

pub const OUT_ENV: &str = "ZAPSTOP_OUT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] zapstop::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 1 for usage, configuration and file problems, 2 for numerical ones.
    pub fn exit_code(&self) -> u8 {
        use zapstop::Error as E;
        match self {
            Self::Core(
                E::NonFinite(_)
                | E::Singular(_)
                | E::InfiniteCovariance(_)
                | E::Integration(_)
                | E::RankDeficientBasis(_)
                | E::NoStationaryDistribution(_),
            ) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `--out`, else `output.dir`, else `$ZAPSTOP_OUT/<name>`, else
/// `zapstop-out/<name>`, where `<name>` is the experiment name or the
/// config file stem.
pub fn output_dir(cli_out: Option<&Path>, cfg: &ExperimentConfig, config_path: &Path) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output.dir {
        return cfg.resolve_path(p);
    }
    let name = cfg.name.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
    });
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("zapstop-out"), PathBuf::from);
    root.join(name)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(zapstop::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// A JSON report carrying the effective config and code version.
#[derive(Debug, Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub version: &'static str,
    pub command: &'a str,
    pub config: Value,
    pub result: &'a T,
}

impl<'a, T: Serialize> Artifact<'a, T> {
    pub fn new(command: &'a str, cfg: &ExperimentConfig, result: &'a T) -> Self {
        Self {
            version: zapstop::VERSION,
            command,
            config: cfg.to_json(),
            result,
        }
    }
}

pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: Value,
    pub records: Vec<String>,
    pub aborted: Vec<usize>,
}

pub fn record_name(replica: usize) -> String {
    format!("replica-{replica:04}.json")
}

pub fn trajectory_name(replica: usize) -> String {
    format!("replica-{replica:04}.csv")
}

/// Records listed in `dir/manifest.json`, in replica order.
pub fn load_records(dir: &Path) -> CliResult<Vec<RunRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(zapstop::Error::from)?;
    if manifest.records.is_empty() {
        return Err(CliError::Usage(format!("{}: no run records", path.display())));
    }
    manifest
        .records
        .iter()
        .map(|name| load_record(&dir.join(name)))
        .collect()
}

pub fn load_record(path: &Path) -> CliResult<RunRecord> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: corrupt run record: {e}", path.display())))
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}
