//! Training logs as JSON Lines, one epoch per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use vqa_debias_core::trainer::EpochRecord;

use crate::error::{io_err, Error, Result};

/// `model.ckpt` → `model.ckpt.log.jsonl`.
pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".log.jsonl");
    PathBuf::from(p)
}

pub struct TrainLogWriter {
    path: PathBuf,
    file: File,
}

impl TrainLogWriter {
    /// Truncates any previous log at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
