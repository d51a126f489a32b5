use std::fs::File;
use std::io::{self, BufReader, BufWriter, Stdout, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use textgeo::dataset::{parse_records, RecordFormat, RecordReader, RejectionReport};
use textgeo::util::AtomicFile;

use crate::CliError;

pub fn resolve_format(path: &Path, format: Option<RecordFormat>) -> Result<RecordFormat, CliError> {
    format.or_else(|| RecordFormat::from_path(path)).ok_or_else(|| {
        CliError::Usage(format!("cannot tell the format of {} from its extension; pass --format", path.display()))
    })
}

pub fn open_records(path: &Path, format: Option<RecordFormat>) -> Result<RecordReader<BufReader<File>>, CliError> {
    let format = resolve_format(path, format)?;
    parse_records(path, format).map_err(CliError::data)
}

/// Prints the rejection summary of an input when anything was dropped.
pub fn report_rejections(path: &Path, report: &RejectionReport) {
    if report.rejected > 0 {
        eprint!("{}: {report}", path.display());
    }
}

/// The single line on stderr describing what a run used.
pub fn print_params(command: &str, params: Value) {
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "params": params,
    });
    eprintln!("{record}");
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Stdout, or a file that only appears once complete.
pub enum Output {
    Stdout(BufWriter<Stdout>),
    File(AtomicFile),
}

impl Output {
    pub fn open(path: Option<&PathBuf>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::Stdout(BufWriter::new(io::stdout()))),
            Some(p) => AtomicFile::create(p)
                .map(Self::File)
                .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", p.display()))),
        }
    }

    pub fn finish(self) -> Result<(), CliError> {
        match self {
            Self::Stdout(mut w) => w.flush(),
            Self::File(f) => f.commit(),
        }
        .map_err(CliError::internal)
    }
}

impl Write for Output {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Self::Stdout(w) => w.write(buf),
            Self::File(f) => f.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Self::Stdout(w) => w.flush(),
            Self::File(f) => f.flush(),
        }
    }
}
