//! Run directory writers. Floats use Rust's shortest round-trip formatting,
//! so identical runs produce identical bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::HarnessError;

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: PathBuf) -> Result<Self, HarnessError> {
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(File::create(self.file(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<'a, T, I>(&self, name: &str, rows: I) -> Result<(), HarnessError>
    where
        T: Serialize + 'a,
        I: IntoIterator<Item = &'a T>,
    {
        let mut w = BufWriter::new(File::create(self.file(name))?);
        for row in rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes a header and rows of already-formatted cells.
    pub fn write_csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(self.file(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn cell(x: f64) -> String {
    format!("{x}")
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}
