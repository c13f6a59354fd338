//! Writing primary outputs and their provenance manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Provenance written next to each output file as `<file>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub inputs: BTreeMap<&'a str, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Self {
            tool: "gtbow",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, name: &'a str, path: &Path) -> Self {
        self.inputs.insert(name, path.display().to_string());
        self
    }

    pub fn details(mut self, details: impl Serialize) -> Self {
        self.details = serde_json::to_value(details).expect("details serialize");
        self
    }

    pub fn write_beside(&self, output: &Path) -> Result<(), CliError> {
        self.write_to(&sidecar_path(output))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(CliError::io(path))
    }
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes `text` to `path` with a manifest beside it, or to standard output.
pub fn emit(text: &str, path: Option<&Path>, manifest: &Manifest) -> Result<(), CliError> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(CliError::io(p))?;
            manifest.write_beside(p)
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(CliError::io(Path::new("<stdout>")))
        }
    }
}

/// Renders one JSON document per line.
pub fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("record serializes"));
        s.push('\n');
    }
    s
}
