//! The (task, architecture, objectives) corpus: building, JSON-Lines
//! persistence, and summary statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostReport, LatencyModel, LatencyProtocol, RankNormalizer};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, TaskDescriptor, DEFAULT_D_TASK};
use crate::seed::{self, stream};
use crate::space::{self, Architecture, Nb201Cell, SearchSpace};
use crate::stats;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_NB201_SIZE: usize = 10_000;
pub const DEFAULT_MBV3_SIZE: usize = 20_000;
pub const DEFAULT_NB201_BIAS: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub accuracy: f64,
    pub params: u64,
    pub macs: u64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub task_id: u64,
    pub arch: Architecture,
    pub objectives: Objectives,
}

/// Rank normalizers for the cost objectives, shared by training and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub params: RankNormalizer,
    pub macs: RankNormalizer,
    pub latency_ms: RankNormalizer,
}

impl NormStats {
    pub fn from_records(records: &[MetaRecord]) -> Result<Self> {
        let col = |f: fn(&Objectives) -> f64| records.iter().map(|r| f(&r.objectives)).collect::<Vec<_>>();
        Ok(Self {
            params: RankNormalizer::from_population(&col(|o| o.params as f64))?,
            macs: RankNormalizer::from_population(&col(|o| o.macs as f64))?,
            latency_ms: RankNormalizer::from_population(&col(|o| o.latency_ms))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub space: SearchSpace,
    pub n: usize,
    pub seed: u64,
    pub oracle_seed: u64,
    pub d_task: usize,
    /// Probability of drawing from the top set (NB201 only).
    pub bias: f64,
    pub latency_model: LatencyModel,
    pub latency_protocol: LatencyProtocol,
}

impl BuildConfig {
    pub fn new(space: SearchSpace, n: usize, seed: u64) -> Self {
        Self {
            space,
            n,
            seed,
            oracle_seed: 0,
            d_task: DEFAULT_D_TASK,
            bias: if space == SearchSpace::Nb201 { DEFAULT_NB201_BIAS } else { 0.0 },
            latency_model: LatencyModel::default(),
            latency_protocol: LatencyProtocol::default(),
        }
    }

    pub fn default_size(space: SearchSpace) -> usize {
        match space {
            SearchSpace::Nb201 => DEFAULT_NB201_SIZE,
            SearchSpace::Mbv3 => DEFAULT_MBV3_SIZE,
        }
    }
}

/// First line of a meta-dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHeader {
    pub version: u32,
    pub space: SearchSpace,
    pub oracle_seed: u64,
    /// Seed that regenerates each record's task from its `task_id`.
    pub task_seed: u64,
    pub d_task: usize,
    pub size: usize,
    pub build: Option<BuildConfig>,
    pub norm_stats: Option<NormStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Run identity stamped into written artifacts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// First task id of the held-out range; build rejects sizes that reach it.
pub const HELD_OUT_TASK_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub header: MetaHeader,
    pub records: Vec<MetaRecord>,
}

/// Top set for biased sampling; empty when the bias is zero.
fn top_set(cfg: &BuildConfig, oracle: &Oracle) -> Vec<Nb201Cell> {
    if cfg.space == SearchSpace::Nb201 && cfg.bias > 0.0 {
        oracle.nb201_top_set()
    } else {
        Vec::new()
    }
}

fn build_record(cfg: &BuildConfig, oracle: &Oracle, top: &[Nb201Cell], i: u64) -> Result<MetaRecord> {
    let mut rng = seed::rng(cfg.seed, &[stream::ARCH, i]);
    let arch = match cfg.space {
        SearchSpace::Nb201 => space::sample_nb201(&mut rng, top, cfg.bias)?,
        SearchSpace::Mbv3 => space::sample_mbv3(&mut rng),
    };
    let task = TaskDescriptor::generate(cfg.seed, i, cfg.d_task);
    let costs = CostReport::compute(&arch, &cfg.latency_model, &cfg.latency_protocol, seed::derive(cfg.seed, &[stream::LATENCY, i]))?;
    Ok(MetaRecord {
        task_id: i,
        objectives: Objectives {
            accuracy: oracle.accuracy(&arch, &task),
            params: costs.params,
            macs: costs.macs,
            latency_ms: costs.latency_ms,
        },
        arch,
    })
}

/// Samples `cfg.n` records in parallel. Each record depends only on
/// `(cfg, index)`, so the result is identical to a serial build.
pub fn build(cfg: &BuildConfig) -> Result<MetaDataset> {
    if cfg.n == 0 || cfg.n as u64 > HELD_OUT_TASK_BASE {
        return Err(Error::InvalidArgument(format!("meta-dataset size must be in 1..={HELD_OUT_TASK_BASE}, got {}", cfg.n)));
    }
    cfg.latency_protocol.validate()?;
    let oracle = Oracle::new(cfg.oracle_seed, cfg.d_task);
    let top = top_set(cfg, &oracle);
    let records = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| build_record(cfg, &oracle, &top, i))
        .collect::<Result<Vec<_>>>()?;
    let norm_stats = Some(NormStats::from_records(&records)?);
    Ok(MetaDataset {
        header: MetaHeader {
            version: FORMAT_VERSION,
            space: cfg.space,
            oracle_seed: cfg.oracle_seed,
            task_seed: cfg.seed,
            d_task: cfg.d_task,
            size: records.len(),
            build: Some(cfg.clone()),
            norm_stats,
            provenance: None,
        },
        records,
    })
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn space(&self) -> SearchSpace {
        self.header.space
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::new(self.header.oracle_seed, self.header.d_task)
    }

    pub fn task(&self, task_id: u64) -> TaskDescriptor {
        TaskDescriptor::generate(self.header.task_seed, task_id, self.header.d_task)
    }

    pub fn norm_stats(&self) -> Result<&NormStats> {
        self.header.norm_stats.as_ref().ok_or(Error::Empty("meta-dataset normalization stats"))
    }

    /// Re-derives record `i` from the build configuration.
    pub fn recompute(&self, i: usize) -> Result<MetaRecord> {
        let cfg = self.header.build.as_ref().ok_or(Error::Empty("build configuration"))?;
        let oracle = self.oracle();
        build_record(cfg, &oracle, &top_set(cfg, &oracle), i as u64)
    }

    /// The `k`-th task outside the training range.
    pub fn held_out_task(&self, k: u64) -> TaskDescriptor {
        TaskDescriptor::generate(self.header.task_seed, HELD_OUT_TASK_BASE + k, self.header.d_task)
    }

    /// Distinct architecture keys, used for novelty.
    pub fn arch_hashes(&self) -> std::collections::HashSet<String> {
        self.records.iter().map(|r| r.arch.hash_key()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads and validates a file; every line must parse, every architecture
    /// must be valid and in the header's space, and the record count must
    /// match the header.
    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let perr = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = reader.lines().enumerate();
        let header: MetaHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l?).map_err(|e| perr(1, format!("header: {e}")))?,
            None => return Err(perr(1, "missing header line".into())),
        };
        if header.version != FORMAT_VERSION {
            return Err(perr(1, format!("unsupported version {}", header.version)));
        }
        let mut records = Vec::with_capacity(header.size);
        for (i, l) in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let rec: MetaRecord = serde_json::from_str(&l).map_err(|e| perr(i + 1, e.to_string()))?;
            if rec.arch.space() != header.space {
                return Err(perr(i + 1, format!("record space {} differs from header space {}", rec.arch.space(), header.space)));
            }
            records.push(rec);
        }
        if records.len() != header.size {
            return Err(perr(records.len() + 2, format!("header declares {} records, found {}", header.size, records.len())));
        }
        Ok(Self { header, records })
    }

    pub fn summary(&self) -> Result<Summary> {
        if self.records.is_empty() {
            return Err(Error::Empty("meta-dataset"));
        }
        let col = |f: fn(&Objectives) -> f64| -> ColumnStats {
            ColumnStats::of(&self.records.iter().map(|r| f(&r.objectives)).collect::<Vec<_>>())
        };
        Ok(Summary {
            accuracy: col(|o| o.accuracy),
            params: col(|o| o.params as f64),
            macs: col(|o| o.macs as f64),
            latency_ms: col(|o| o.latency_ms),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Type-7 quantiles at 0.1, 0.2, ..., 0.9.
    pub deciles: Vec<f64>,
}

impl ColumnStats {
    /// Panics on an empty column.
    pub fn of(values: &[f64]) -> Self {
        let s = stats::sorted(values);
        Self {
            min: s[0],
            max: s[s.len() - 1],
            mean: stats::mean(values),
            std: stats::std_dev(values),
            deciles: (1..10).map(|k| stats::quantile_sorted(&s, k as f64 / 10.0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: ColumnStats,
    pub params: ColumnStats,
    pub macs: ColumnStats,
    pub latency_ms: ColumnStats,
}

/// Objectives of `arch` on `task`, with analytic costs and a seeded latency.
pub fn objectives_for(arch: &Architecture, task: &TaskDescriptor, oracle: &Oracle, model: &LatencyModel, seed: u64) -> Result<Objectives> {
    let c = CostReport::compute(arch, model, &LatencyProtocol::default(), seed)?;
    Ok(Objectives {
        accuracy: oracle.accuracy(arch, task),
        params: cost::count_params(arch),
        macs: cost::count_macs(arch),
        latency_ms: c.latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decile_oracle() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = ColumnStats::of(&v);
        let expected = [10.9, 20.8, 30.7, 40.6, 50.5, 60.4, 70.3, 80.2, 90.1];
        for (d, e) in c.deciles.iter().zip(expected) {
            assert!((d - e).abs() < 1e-9, "{d} vs {e}");
        }
        assert_eq!(ColumnStats::of(&[2.0; 7]).std, 0.0);
    }

    #[test]
    fn single_record_recomputes() {
        let ds = build(&BuildConfig::new(SearchSpace::Nb201, 1, 4)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.recompute(0).unwrap(), ds.records[0]);
        let ds = build(&BuildConfig::new(SearchSpace::Mbv3, 3, 4)).unwrap();
        assert_eq!(ds.recompute(2).unwrap(), ds.records[2]);
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(build(&BuildConfig::new(SearchSpace::Nb201, 0, 1)).is_err());
    }
}
