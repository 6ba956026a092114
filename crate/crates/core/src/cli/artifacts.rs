use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::Artifact;
use crate::error::{Error, Result};

/// Environment variable that relocates the output root (default: cwd).
pub const OUTPUT_ROOT_ENV: &str = "SDB_OUTPUT_ROOT";

/// `--out` wins; otherwise the config's `output_dir`, then
/// `runs/<experiment>-seed<seed>`, both under the output root.
pub fn resolve_output_dir(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = cli_out {
        return out.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    match &cfg.output_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => root.join(dir),
        None => root
            .join("runs")
            .join(format!("{}-seed{}", cfg.experiment.name(), cfg.seed)),
    }
}

/// Writes `files` into a sibling temp directory and renames it over `dir`.
pub fn commit_atomically(dir: &Path, files: &[Artifact]) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad output directory {}", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    let written = files.iter().try_for_each(|f| {
        if f.name.contains(['/', '\\']) {
            return Err(Error::invalid(format!(
                "artifact name {} is not a file name",
                f.name
            )));
        }
        fs::write(tmp.join(&f.name), &f.bytes).map_err(Error::from)
    });
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}
