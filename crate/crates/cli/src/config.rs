use std::fs;
use std::path::{Path, PathBuf};

use fedshare_core::experiment::{ExperimentConfig, ExperimentError};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ExperimentError::Config(format!("{key} = {value:?}: {e}")))
}

/// Sets one field by its flag or field name (`batch-size` and `batch_size` both work).
pub fn set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), ExperimentError> {
    let norm = key.trim().replace('-', "_");
    let value = value.trim();
    match norm.as_str() {
        "dataset" => cfg.dataset = parse(key, value)?,
        "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
        "m" => cfg.m = parse(key, value)?,
        "n" => cfg.n = parse(key, value)?,
        "iter" => cfg.iter = parse(key, value)?,
        "l" => cfg.l = parse(key, value)?,
        "lf" | "l_f" => cfg.l_f = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "divisor_mode" => cfg.divisor_mode = parse(key, value)?,
        "transport" => cfg.transport = parse(key, value)?,
        "listen_base_port" => cfg.listen_base_port = parse(key, value)?,
        "timeout_ms" => cfg.timeout_ms = parse(key, value)?,
        "output" => cfg.output = PathBuf::from(value),
        "max_samples" => cfg.max_samples = parse(key, value)?,
        "mode" => cfg.mode = parse(key, value)?,
        _ => return Err(ExperimentError::Config(format!("unknown setting {key:?}"))),
    }
    Ok(())
}

/// Applies `key = value` lines. Blank lines and `#` comments are ignored.
pub fn apply_text(cfg: &mut ExperimentConfig, text: &str) -> Result<(), ExperimentError> {
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value", no + 1)))?;
        set(cfg, key, value)?;
    }
    Ok(())
}

pub fn apply_file(cfg: &mut ExperimentConfig, path: &Path) -> Result<(), ExperimentError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    apply_text(cfg, &text)
}
