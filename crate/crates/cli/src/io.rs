//! File formats and atomic writes: seed problems, line-delimited corpora,
//! manifests, and schema validation for the `check` subcommand.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use stepsearch::engine::ProblemInstance;
use stepsearch::forge::{DpoRecord, PrmRecord, SftRecord};
use stepsearch::tree::{deserialize_tree, TreeRecord};

/// Writes via a temp file in the same directory followed by a rename, so a
/// crash never leaves a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory `{}`", dir.display()))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut file =
            fs::File::create(&tmp).with_context(|| format!("creating `{}`", tmp.display()))?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("moving `{}` into place", path.display()))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buffer = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buffer, item)?;
        buffer.push(b'\n');
    }
    atomic_write(path, &buffer)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening `{}`", path.display()))?;
    let mut items = Vec::new();
    for (number, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), number + 1))?;
        items.push(item);
    }
    Ok(items)
}

/// Loads and validates the seed problems. Empty files are rejected before
/// any backend is touched.
pub fn read_seed_file(path: &Path) -> Result<Vec<ProblemInstance>> {
    let problems: Vec<ProblemInstance> = read_jsonl(path)?;
    if problems.is_empty() {
        bail!("seed file `{}` contains no problems", path.display());
    }
    for problem in &problems {
        problem
            .validate()
            .with_context(|| format!("seed file `{}`", path.display()))?;
    }
    Ok(problems)
}

/// Tree dump files under a directory, in name order for determinism.
pub fn tree_dump_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading tree directory `{}`", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_tree_record(path: &Path) -> Result<TreeRecord> {
    let text = fs::read_to_string(path).with_context(|| format!("reading `{}`", path.display()))?;
    let record: TreeRecord = serde_json::from_str(text.trim())
        .with_context(|| format!("parsing tree dump `{}`", path.display()))?;
    Ok(record)
}

/// Evolution run manifest: what went in, what was selected, what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub iteration: u32,
    pub config_hash: String,
    pub seed: u64,
    pub total_problems: usize,
    pub profiled: usize,
    pub selected: Vec<String>,
    pub succeeded: usize,
    pub failed: Vec<String>,
    pub wall_time_ms: u64,
}

/// Corpus extraction summary, including the filter statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub iteration: u32,
    pub trees_total: usize,
    pub trees_corrupt: usize,
    pub trees_all_correct: usize,
    pub trees_all_incorrect: usize,
    pub trees_mixed: usize,
    pub sft_records: usize,
    pub dpo_records: usize,
    pub prm_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReportRow {
    pub problem_id: String,
    pub method: String,
    pub n: usize,
    pub answer: Option<String>,
    pub correct: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub iteration: u32,
    pub method: String,
    pub n: usize,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RecordKind {
    Seeds,
    Trees,
    Sft,
    Dpo,
    Prm,
}

/// Validates one file against its published schema; returns the violations
/// found (empty means the file is clean).
pub fn validate_file(kind: RecordKind, path: &Path) -> Result<Vec<String>> {
    let mut violations = Vec::new();
    match kind {
        RecordKind::Seeds => {
            let problems: Vec<ProblemInstance> = match read_jsonl(path) {
                Ok(items) => items,
                Err(e) => return Ok(vec![format!("{e:#}")]),
            };
            for (i, problem) in problems.iter().enumerate() {
                if let Err(e) = problem.validate() {
                    violations.push(format!("record {}: {e}", i + 1));
                }
            }
        }
        RecordKind::Trees => match read_tree_record(path) {
            Ok(record) => {
                if let Err(e) = deserialize_tree(&record) {
                    violations.push(e.to_string());
                }
            }
            Err(e) => violations.push(format!("{e:#}")),
        },
        RecordKind::Sft => {
            let records: Vec<SftRecord> = match read_jsonl(path) {
                Ok(items) => items,
                Err(e) => return Ok(vec![format!("{e:#}")]),
            };
            for (i, record) in records.iter().enumerate() {
                if record.response.trim().is_empty() {
                    violations.push(format!("record {}: empty response", i + 1));
                }
            }
        }
        RecordKind::Dpo => {
            let records: Vec<DpoRecord> = match read_jsonl(path) {
                Ok(items) => items,
                Err(e) => return Ok(vec![format!("{e:#}")]),
            };
            for (i, record) in records.iter().enumerate() {
                if record.gap <= 0.0 {
                    violations.push(format!("record {}: non-positive gap {}", i + 1, record.gap));
                }
                if record.chosen == record.rejected {
                    violations.push(format!("record {}: chosen equals rejected", i + 1));
                }
            }
        }
        RecordKind::Prm => {
            let records: Vec<PrmRecord> = match read_jsonl(path) {
                Ok(items) => items,
                Err(e) => return Ok(vec![format!("{e:#}")]),
            };
            for (i, record) in records.iter().enumerate() {
                if record.steps.len() != record.labels.len() {
                    violations.push(format!(
                        "record {}: {} steps but {} labels",
                        i + 1,
                        record.steps.len(),
                        record.labels.len()
                    ));
                }
                if record.labels.iter().any(|&l| l > 1) {
                    violations.push(format!("record {}: non-binary label", i + 1));
                }
                if !["soft_dual", "hard_single", "hard_dual"].contains(&record.scheme.as_str()) {
                    violations.push(format!(
                        "record {}: unknown scheme `{}`",
                        i + 1,
                        record.scheme
                    ));
                }
            }
        }
    }
    Ok(violations)
}
