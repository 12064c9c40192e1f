use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mogen_core::meta::Provenance;
use mogen_core::oracle::TaskDescriptor;
use mogen_core::pareto::{FrontSelection, GenerationMetrics, Metric};
use mogen_core::sampler::{Batch, Generated, GuidanceScales, Phase, Regime, StretchPresets};
use mogen_core::space::{Architecture, ContinuousArch, SearchSpace};
use mogen_core::tuner::TuneResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::Mode;

pub fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            hint,
        })
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str, hint: &'static str) -> Result<T, CliError> {
    require(path, what, hint)?;
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{} is not a valid {what}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TasksFile {
    pub provenance: Provenance,
    pub tasks: Vec<TaskDescriptor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneFile {
    pub provenance: Provenance,
    pub regime: Regime,
    pub scales: GuidanceScales,
    pub result: TuneResult,
}

/// Either a tuner output or an explicit pair of presets.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ScalesFile {
    Tuned { regime: Regime, scales: GuidanceScales },
    Presets(StretchPresets),
}

pub fn read_presets(paths: &[PathBuf], mut presets: StretchPresets) -> Result<StretchPresets, CliError> {
    for p in paths {
        match read_json::<ScalesFile>(p, "scales file", "run `mogen tune` or write {\"efficient\": {...}, \"accurate\": {...}}")? {
            ScalesFile::Tuned { regime: Regime::Efficient, scales } => presets.efficient = scales,
            ScalesFile::Tuned { regime: Regime::Accurate, scales } => presets.accurate = scales,
            ScalesFile::Presets(p) => presets = p,
        }
    }
    Ok(presets)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchHeader {
    pub provenance: Provenance,
    pub space: SearchSpace,
    pub mode: Mode,
    pub task: TaskDescriptor,
    pub scales: BTreeMap<String, GuidanceScales>,
    pub size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BatchLine {
    chain: u64,
    phase: Phase,
    strict_valid: bool,
    raw: Vec<f64>,
    arch: Architecture,
}

pub fn write_batch(path: &Path, header: &BatchHeader, batch: &Batch) -> Result<(), CliError> {
    ensure_parent(path)?;
    let io = |e| CliError::io(format!("writing {}", path.display()))(e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    for g in &batch.items {
        let line = BatchLine {
            chain: g.chain,
            phase: g.phase,
            strict_valid: g.strict_valid,
            raw: g.raw.values.clone(),
            arch: g.arch.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_batch(path: &Path) -> Result<(BatchHeader, Batch), CliError> {
    require(path, "generated batch", "run `mogen generate` first")?;
    let f = File::open(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    let bad = |line: usize, e: String| CliError::Config(format!("{}:{line}: {e}", path.display()));
    let mut lines = BufReader::new(f).lines();
    let header: BatchHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(CliError::io("reading batch"))?).map_err(|e| bad(1, e.to_string()))?,
        None => return Err(bad(1, "empty batch file".into())),
    };
    let mut items = Vec::with_capacity(header.size);
    for (i, l) in lines.enumerate() {
        let l = l.map_err(CliError::io("reading batch"))?;
        if l.trim().is_empty() {
            continue;
        }
        let b: BatchLine = serde_json::from_str(&l).map_err(|e| bad(i + 2, e.to_string()))?;
        let raw = ContinuousArch::new(header.space, b.raw).map_err(|e| bad(i + 2, e.to_string()))?;
        items.push(Generated {
            chain: b.chain,
            phase: b.phase,
            raw,
            strict_valid: b.strict_valid,
            arch: b.arch,
        });
    }
    if items.len() != header.size {
        return Err(bad(items.len() + 1, format!("header declares {} architectures, found {}", header.size, items.len())));
    }
    Ok((header, Batch { items }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub provenance: Provenance,
    pub task_id: u64,
    /// Distinct architectures that would need training: the picks.
    pub trained_archs: usize,
    pub fronts: BTreeMap<Metric, FrontSelection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub metric: Option<Metric>,
    pub arch_hash: String,
    pub predicted_acc: f64,
    pub oracle_acc: f64,
    pub params: u64,
    pub macs: u64,
    pub latency_ms: f64,
    /// Relative change vs the baseline pick, in percent.
    pub delta_pct: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub provenance: Provenance,
    pub task_id: u64,
    pub rows: Vec<EvalRow>,
    pub generation: BTreeMap<String, GenerationMetrics>,
}
