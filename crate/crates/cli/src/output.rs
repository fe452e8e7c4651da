//! Buffered run outputs, written once at the end of a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use spdelab::scalar::fmt17;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";

/// Prefix of the only manifest line that varies between reruns.
pub const TIMESTAMP_PREFIX: &str = "timestamp = ";

#[derive(Debug, Default)]
pub struct RunOutput {
    files: BTreeMap<String, Vec<u8>>,
}

/// Row-oriented CSV table with a one-line header.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    fn into_bytes(self) -> Result<Vec<u8>, CliError> {
        self.writer
            .into_inner()
            .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn num(x: f64) -> String {
    fmt17(x)
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt17)
}

impl RunOutput {
    pub fn add_table(&mut self, name: &str, table: Table) -> Result<(), CliError> {
        self.files.insert(name.to_string(), table.into_bytes()?);
        Ok(())
    }

    pub fn add_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    /// Writes every file plus `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path, subcommand: &str, digest: &str, seed: u64) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        let files: Vec<&str> = self.names().collect();
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let manifest = format!(
            "subcommand = {subcommand}\nconfig_digest = {digest}\nseed = {seed}\nfiles = {}\n{TIMESTAMP_PREFIX}{stamp}\n",
            files.join(",")
        );
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }
}
