//! Pareto front filtering, Acc/Bal/Eff selection, and generation metrics.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::{self, LatencyModel, LatencyProtocol};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, TaskDescriptor};
use crate::numeric::Scalar;
use crate::predictors::PredictorSet;
use crate::sampler::{Batch, Phase};
use crate::seed::{self, stream};
use crate::space::Architecture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Params,
    Macs,
    Latency,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Params, Metric::Macs, Metric::Latency];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Params => "params",
            Metric::Macs => "macs",
            Metric::Latency => "latency",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric '{s}'")))
    }
}

/// A generated architecture with predicted accuracy and recomputed costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredArch {
    pub arch: Architecture,
    pub hash: String,
    pub predicted_acc: f64,
    pub params: u64,
    pub macs: u64,
    pub latency_ms: f64,
    pub phase: Phase,
    pub oracle_acc: Option<f64>,
}

impl ScoredArch {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Params => self.params as f64,
            Metric::Macs => self.macs as f64,
            Metric::Latency => self.latency_ms,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Latency seed of an architecture; identical architectures measure identically.
pub fn latency_seed(seed: u64, a: &Architecture) -> u64 {
    seed::derive(seed, &[stream::LATENCY, fnv1a(&a.hash_key())])
}

/// Scores a batch: denoised predicted accuracy plus analytic params/MACs and
/// a protocol latency. `oracle` fills `oracle_acc` for evaluation only.
pub fn score_batch<S: Scalar>(
    batch: &Batch,
    preds: &PredictorSet<S>,
    task: &TaskDescriptor,
    latency: (&LatencyModel, &LatencyProtocol),
    seed: u64,
    oracle: Option<&Oracle>,
) -> Result<Vec<ScoredArch>> {
    let archs = batch.archs();
    let dtilde = preds.encode(task);
    let acc = preds.predict_accuracy(&archs, &dtilde)?;
    batch
        .items
        .iter()
        .zip(acc)
        .map(|(g, predicted_acc)| {
            Ok(ScoredArch {
                hash: g.arch.hash_key(),
                predicted_acc,
                params: cost::count_params(&g.arch),
                macs: cost::count_macs(&g.arch),
                latency_ms: latency.1.measure(latency.0, &g.arch, latency_seed(seed, &g.arch))?,
                phase: g.phase,
                oracle_acc: oracle.map(|o| o.accuracy(&g.arch, task)),
                arch: g.arch.clone(),
            })
        })
        .collect()
}

/// Indices of the non-dominated points of `(accuracy ↑, metric ↓)`, ordered
/// by metric ascending (ties by input order). Exact duplicates are all kept.
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("pareto front input"));
    }
    if let Some(i) = points.iter().position(|(a, m)| !a.is_finite() || !m.is_finite()) {
        return Err(Error::InvalidArgument(format!("point {i} is not finite: {:?}", points[i])));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .1
            .total_cmp(&points[j].1)
            .then(points[j].0.total_cmp(&points[i].0))
            .then(i.cmp(&j))
    });
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        let m = points[order[k]].1;
        let top = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].1 == m {
            end += 1;
        }
        if top > best {
            front.extend(order[k..end].iter().copied().filter(|&i| points[i].0 == top));
            best = top;
        }
        k = end;
    }
    Ok(front)
}

/// `q` dominates `p`: no worse in both, strictly better in one.
pub fn dominates(q: (f64, f64), p: (f64, f64)) -> bool {
    q.0 >= p.0 && q.1 <= p.1 && (q.0 > p.0 || q.1 < p.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Picks {
    pub acc: usize,
    pub bal: usize,
    pub eff: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pick {
    Acc,
    Bal,
    Eff,
}

impl Pick {
    pub const ALL: [Pick; 3] = [Pick::Acc, Pick::Bal, Pick::Eff];

    pub fn name(self) -> &'static str {
        match self {
            Pick::Acc => "acc",
            Pick::Bal => "bal",
            Pick::Eff => "eff",
        }
    }
}

impl Picks {
    pub fn get(&self, p: Pick) -> usize {
        match p {
            Pick::Acc => self.acc,
            Pick::Bal => self.bal,
            Pick::Eff => self.eff,
        }
    }
}

/// Acc = argmax accuracy, Bal = argmax accuracy/metric, Eff = argmin metric.
/// Ties go to the smaller metric, then the lexicographically smaller hash.
pub fn select_configs(front: &[ScoredArch], metric: Metric) -> Result<Picks> {
    if front.is_empty() {
        return Err(Error::Empty("front"));
    }
    let tie = |i: usize, j: usize| {
        front[i]
            .metric(metric)
            .total_cmp(&front[j].metric(metric))
            .then_with(|| front[i].hash.cmp(&front[j].hash))
    };
    let best_by = |key: &dyn Fn(&ScoredArch) -> f64| {
        (0..front.len())
            .min_by(|&i, &j| key(&front[j]).total_cmp(&key(&front[i])).then_with(|| tie(i, j)))
            .expect("nonempty")
    };
    Ok(Picks {
        acc: best_by(&|s| s.predicted_acc),
        bal: best_by(&|s| s.predicted_acc / s.metric(metric)),
        eff: best_by(&|s| -s.metric(metric)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontSelection {
    pub metric: Metric,
    pub front: Vec<ScoredArch>,
    pub picks: Picks,
}

impl FrontSelection {
    pub fn pick(&self, p: Pick) -> &ScoredArch {
        &self.front[self.picks.get(p)]
    }
}

/// Keeps the first occurrence of each architecture hash.
pub fn dedup(scored: &[ScoredArch]) -> Vec<ScoredArch> {
    let mut seen = HashSet::new();
    scored.iter().filter(|s| seen.insert(s.hash.clone())).cloned().collect()
}

/// Deduplicates, builds the front for `metric`, and picks Acc/Bal/Eff.
pub fn select(scored: &[ScoredArch], metric: Metric) -> Result<FrontSelection> {
    let unique = dedup(scored);
    let points: Vec<(f64, f64)> = unique.iter().map(|s| (s.predicted_acc, s.metric(metric))).collect();
    let front: Vec<ScoredArch> = pareto_front(&points)?.into_iter().map(|i| unique[i].clone()).collect();
    let picks = select_configs(&front, metric)?;
    Ok(FrontSelection { metric, front, picks })
}

/// Percentages over a generated batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
}

/// validity = strictly valid / batch; uniqueness = distinct valid hashes /
/// valid; novelty = distinct valid hashes absent from `training` / distinct
/// valid hashes. Ratios with an empty denominator are 0.
pub fn generation_metrics(strict_valid: &[bool], archs: &[Architecture], training: &HashSet<String>) -> Result<GenerationMetrics> {
    if strict_valid.is_empty() {
        return Err(Error::Empty("generated batch"));
    }
    if strict_valid.len() != archs.len() {
        return Err(Error::Shape {
            op: "generation_metrics",
            detail: format!("{} validity flags for {} architectures", strict_valid.len(), archs.len()),
        });
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let valid: Vec<String> = archs
        .iter()
        .zip(strict_valid)
        .filter(|(_, &v)| v)
        .map(|(a, _)| a.hash_key())
        .collect();
    let distinct: HashSet<&String> = valid.iter().collect();
    let novel = distinct.iter().filter(|h| !training.contains(h.as_str())).count();
    Ok(GenerationMetrics {
        validity: pct(valid.len(), strict_valid.len()),
        uniqueness: pct(distinct.len(), valid.len()),
        novelty: pct(novel, distinct.len()),
    })
}

pub fn batch_metrics(batch: &Batch, training: &HashSet<String>) -> Result<GenerationMetrics> {
    let flags: Vec<bool> = batch.items.iter().map(|g| g.strict_valid).collect();
    generation_metrics(&flags, &batch.archs(), training)
}

pub const CSV_HEADER: [&str; 9] = ["arch_hash", "predicted_acc", "oracle_acc", "params", "macs", "latency_ms", "phase", "on_front", "pick"];

/// One row per distinct architecture, marking front membership and picks.
pub fn write_csv<W: Write>(w: W, scored: &[ScoredArch], sel: &FrontSelection) -> Result<()> {
    let on_front: HashSet<&str> = sel.front.iter().map(|s| s.hash.as_str()).collect();
    let mut picks: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in Pick::ALL {
        picks.entry(sel.pick(p).hash.as_str()).or_default().push(p.name());
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for s in dedup(scored) {
        out.write_record([
            s.hash.clone(),
            s.predicted_acc.to_string(),
            s.oracle_acc.map(|v| v.to_string()).unwrap_or_default(),
            s.params.to_string(),
            s.macs.to_string(),
            s.latency_ms.to_string(),
            s.phase.name().to_string(),
            on_front.contains(s.hash.as_str()).to_string(),
            picks.get(s.hash.as_str()).map(|v| v.join("+")).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Nb201Cell, Nb201Op};

    fn scored(acc: f64, metric: u64, tag: &str) -> ScoredArch {
        ScoredArch {
            arch: Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Skip)),
            hash: tag.into(),
            predicted_acc: acc,
            params: metric,
            macs: metric,
            latency_ms: metric as f64,
            phase: Phase::Single,
            oracle_acc: None,
        }
    }

    #[test]
    fn small_front() {
        let pts = [(0.9, 10.0), (0.8, 5.0), (0.7, 7.0)];
        assert_eq!(pareto_front(&pts).unwrap(), vec![1, 0]);
        assert_eq!(pareto_front(&[(0.5, 1.0)]).unwrap(), vec![0]);
        assert!(pareto_front(&[]).is_err());
    }

    #[test]
    fn picks_on_two_point_front() {
        let front = vec![scored(0.8, 5, "b"), scored(0.9, 10, "a")];
        let p = select_configs(&front, Metric::Macs).unwrap();
        assert_eq!(front[p.acc].predicted_acc, 0.9);
        assert_eq!(front[p.bal].predicted_acc, 0.8);
        assert_eq!(front[p.eff].predicted_acc, 0.8);
    }

    #[test]
    fn ties_prefer_smaller_metric_then_hash() {
        let front = vec![scored(0.9, 10, "z"), scored(0.9, 10, "a"), scored(0.9, 12, "0")];
        let p = select_configs(&front, Metric::Params).unwrap();
        assert_eq!(front[p.acc].hash, "a");
        assert_eq!(front[p.eff].hash, "a");
    }

    #[test]
    fn duplicates_collapse() {
        let s = vec![scored(0.9, 10, "x"), scored(0.9, 10, "x"), scored(0.5, 20, "y")];
        let sel = select(&s, Metric::Latency).unwrap();
        assert_eq!(sel.front.len(), 1);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = vec![scored(0.9, 10, "x"), scored(0.5, 20, "y")];
        let sel = select(&s, Metric::Macs).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &s, &sel).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], "x,0.9,,10,10,10,single,true,acc+bal+eff");
        assert_eq!(lines[2], "y,0.5,,20,20,20,single,false,");
    }
}
