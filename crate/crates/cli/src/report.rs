//! Machine-readable report documents: one JSON document per command,
//! self-contained (config echo plus seed) so any run can be reproduced from
//! its report alone.

use std::path::Path;

use serde::Serialize;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Serialize)]
pub struct ReportDocument<R: Serialize> {
    pub schema_version: &'static str,
    pub command: &'static str,
    pub rng_seed: u64,
    pub config: serde_json::Value,
    pub results: R,
}

impl<R: Serialize> ReportDocument<R> {
    pub fn new(command: &'static str, rng_seed: u64, config: serde_json::Value, results: R) -> Self {
        Self { schema_version: SCHEMA_VERSION, command, rng_seed, config, results }
    }

    pub fn render(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports are serializable");
        text.push('\n');
        text
    }

    pub fn write(&self, path: Option<&Path>) -> std::io::Result<()> {
        if let Some(path) = path {
            std::fs::write(path, self.render())?;
        }
        Ok(())
    }
}
