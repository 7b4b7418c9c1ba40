//! Library half of the `tda` command: every subcommand is a function from a
//! resolved [`RunConfig`] to files in its output directory.

pub mod commands;
pub mod config;

use std::path::Path;

use anyhow::{Context, Result};

pub use config::{Preset, RunConfig};

pub(crate) fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_text(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}
