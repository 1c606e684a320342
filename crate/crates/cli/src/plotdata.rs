//! Reshape run outputs into one tidy long-format CSV
//! (`scenario,case,seed,t,series,value`) for plotting.

use std::fmt::Write as _;
use std::path::Path;

use crate::manifest::RunManifest;
use crate::HarnessError;

/// Emit `plotdata.csv` next to the manifest; returns the written path.
pub fn emit_plotdata(manifest_path: &Path) -> Result<std::path::PathBuf, HarnessError> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| HarnessError::Config("manifest has no parent directory".into()))?;
    let mut out = String::from("scenario,case,seed,t,series,value\n");
    for rel in &manifest.outputs {
        let path = dir.join(rel);
        if !path.exists() {
            return Err(HarnessError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing output {rel}"),
            )));
        }
        let (case, seed) = parse_output_name(rel);
        if rel.ends_with("aggregate.csv") || seed.is_some() {
            if rel.ends_with(".csv") {
                append_wide_csv(&mut out, &manifest.scenario_name, &case, &seed, &path)?;
            } else if rel.ends_with("trace.json") {
                append_trace(&mut out, &manifest.scenario_name, &case, &seed, &path)?;
            }
        }
    }
    let target = dir.join("plotdata.csv");
    std::fs::write(&target, out).map_err(HarnessError::Io)?;
    Ok(target)
}

fn parse_output_name(rel: &str) -> (String, Option<String>) {
    let mut case = String::new();
    let mut seed = None;
    for part in rel.split('/') {
        if let Some(c) = part.strip_prefix("case_") {
            case = c.to_string();
        }
        if let Some(s) = part.strip_prefix("seed_") {
            seed = Some(s.trim_end_matches(".csv").to_string());
        }
    }
    (case, seed)
}

fn append_wide_csv(
    out: &mut String,
    scenario: &str,
    case: &str,
    seed: &Option<String>,
    path: &Path,
) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::Io)?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(|s| s.to_string()).collect(),
        None => return Ok(()),
    };
    // first column is the abscissa (t, step, x, ...)
    if header.len() < 2 {
        return Ok(());
    }
    let seed = seed.clone().unwrap_or_else(|| "aggregate".into());
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        for (k, name) in header.iter().enumerate().skip(1) {
            if fields.get(k).map(|f| f.is_empty()).unwrap_or(true) {
                continue;
            }
            let _ = writeln!(out, "{scenario},{case},{seed},{},{name},{}", fields[0], fields[k]);
        }
    }
    Ok(())
}

fn append_trace(
    out: &mut String,
    scenario: &str,
    case: &str,
    seed: &Option<String>,
    path: &Path,
) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::Io)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let seed = seed.clone().unwrap_or_default();
    if let Some(residuals) = value.get("residuals").and_then(|r| r.as_array()) {
        for (k, r) in residuals.iter().enumerate() {
            if let Some(v) = r.as_f64() {
                let _ = writeln!(out, "{scenario},{case},{seed},{},residual,{v:e}", k + 1);
            }
        }
    }
    Ok(())
}
