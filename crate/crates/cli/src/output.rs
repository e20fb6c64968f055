use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use muxread::config::DeviceConfig;

/// Provenance written in front of every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(command: &str, config: &DeviceConfig) -> Self {
        let digest = Sha256::digest(config.to_json_string().as_bytes());
        Meta { command: command.to_string(), config_sha256: hex::encode(digest), seed: config.generator.seed }
    }

    fn csv_header(&self) -> String {
        format!(
            "# muxread {} {}\n# config_sha256: {}\n# seed: {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.config_sha256,
            self.seed
        )
    }
}

pub fn write_csv(meta: &Meta, body: &str, out: Option<&Path>) -> Result<()> {
    write_text(&format!("{}{body}", meta.csv_header()), out)
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    meta: &'a Meta,
    result: &'a T,
}

pub fn write_json<T: Serialize>(meta: &Meta, value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Wrapped { meta, result: value })?;
    text.push('\n');
    write_text(&text, out)
}

pub fn write_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                // A closed pipe (e.g. `| head`) is not an error.
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => r.context("writing to stdout"),
            }
        }
    }
}

/// Comma-joined row.
pub fn row<I: IntoIterator<Item = String>>(cells: I) -> String {
    let mut s = cells.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}
