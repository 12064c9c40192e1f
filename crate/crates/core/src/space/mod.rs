//! Discrete architecture encodings, validation, sampling, and the
//! continuous relaxation carried through diffusion.

pub mod mbv3;
pub mod nb201;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::AttentionMask;
pub use mbv3::{Mbv3Block, Mbv3Net, WidthMult};
pub use nb201::{Nb201Cell, Nb201Op};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    Nb201,
    Mbv3,
}

impl SearchSpace {
    /// Ops-matrix shape `(rows, cols)`; one diffusion token per row.
    pub fn shape(self) -> (usize, usize) {
        match self {
            SearchSpace::Nb201 => (nb201::ROWS, nb201::COLS),
            SearchSpace::Mbv3 => (mbv3::ROWS, mbv3::COLS),
        }
    }

    pub fn rows(self) -> usize {
        self.shape().0
    }

    pub fn cols(self) -> usize {
        self.shape().1
    }

    pub fn dim(self) -> usize {
        self.rows() * self.cols()
    }

    /// Token attention mask: each row sees itself and its DAG ancestors.
    /// The MBv3 width row is the root of the block chain, so that mask is
    /// lower-triangular.
    pub fn attention_mask(self) -> Arc<AttentionMask> {
        Arc::new(match self {
            SearchSpace::Nb201 => AttentionMask::from_dag(nb201::ROWS, &nb201::adjacency_flat())
                .expect("constant adjacency"),
            SearchSpace::Mbv3 => AttentionMask::causal(mbv3::ROWS),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SearchSpace::Nb201 => "nb201",
            SearchSpace::Mbv3 => "mbv3",
        }
    }
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SearchSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nb201" => Ok(SearchSpace::Nb201),
            "mbv3" => Ok(SearchSpace::Mbv3),
            other => Err(Error::InvalidArgument(format!("unknown search space '{other}'"))),
        }
    }
}

/// A valid point in one of the search spaces.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    Nb201(Nb201Cell),
    Mbv3(Mbv3Net),
}

impl Architecture {
    pub fn space(&self) -> SearchSpace {
        match self {
            Architecture::Nb201(_) => SearchSpace::Nb201,
            Architecture::Mbv3(_) => SearchSpace::Mbv3,
        }
    }

    pub fn encode(&self) -> Encoding {
        match self {
            Architecture::Nb201(c) => Encoding {
                space: SearchSpace::Nb201,
                ops: c.ops_matrix(),
                adj: nb201::adjacency_flat(),
                width_mult: None,
            },
            Architecture::Mbv3(n) => Encoding {
                space: SearchSpace::Mbv3,
                ops: n.ops_matrix(),
                adj: n.adjacency(),
                width_mult: Some(n.width),
            },
        }
    }

    /// One-hot ops matrix as a continuous point.
    pub fn to_continuous(&self) -> ContinuousArch {
        let ops = match self {
            Architecture::Nb201(c) => c.ops_matrix(),
            Architecture::Mbv3(n) => n.ops_matrix(),
        };
        ContinuousArch {
            space: self.space(),
            values: ops.into_iter().map(f64::from).collect(),
        }
    }

    /// Canonical key: equal architectures and only equal architectures
    /// share a key.
    pub fn hash_key(&self) -> String {
        match self {
            Architecture::Nb201(c) => format!("nb201:{c}"),
            Architecture::Mbv3(n) => format!("mbv3:{n}"),
        }
    }

    pub fn as_nb201(&self) -> Option<&Nb201Cell> {
        match self {
            Architecture::Nb201(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_mbv3(&self) -> Option<&Mbv3Net> {
        match self {
            Architecture::Mbv3(n) => Some(n),
            _ => None,
        }
    }
}

/// A broken encoding rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NotBinary { row: usize, col: usize },
    RowNotOneHot { row: usize, ones: usize },
    Placeholder { row: usize },
    Adjacency,
    WidthRow,
    WidthMismatch,
    NonPrefixStage { stage: usize },
    BadDepth { stage: usize, depth: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotBinary { row, col } => write!(f, "entry ({row},{col}) is not 0/1"),
            Violation::RowNotOneHot { row, ones } => write!(f, "row {row} has {ones} ones, expected exactly one"),
            Violation::Placeholder { row } => write!(f, "row {row} must be one-hot on its placeholder column"),
            Violation::Adjacency => write!(f, "adjacency does not match the ops structure"),
            Violation::WidthRow => write!(f, "width row must be all zeros or all ones"),
            Violation::WidthMismatch => write!(f, "width row disagrees with width_mult"),
            Violation::NonPrefixStage { stage } => write!(f, "stage {stage} active blocks are not a prefix"),
            Violation::BadDepth { stage, depth } => write!(f, "stage {stage} depth {depth} not in {{2,3,4}}"),
        }
    }
}

/// Matrix form of an architecture (row-major binary matrices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub space: SearchSpace,
    pub ops: Vec<u8>,
    pub adj: Vec<u8>,
    pub width_mult: Option<WidthMult>,
}

impl Encoding {
    /// Every violated invariant; an empty list means the encoding is valid.
    pub fn violations(&self) -> Result<Vec<Violation>> {
        let (rows, cols) = self.space.shape();
        let adj_n = match self.space {
            SearchSpace::Nb201 => nb201::ROWS,
            SearchSpace::Mbv3 => mbv3::BLOCKS,
        };
        if self.ops.len() != rows * cols || self.adj.len() != adj_n * adj_n {
            return Err(Error::Shape {
                op: "validate",
                detail: format!(
                    "{} expects {rows}x{cols} ops and {adj_n}x{adj_n} adjacency, got {} and {} entries",
                    self.space,
                    self.ops.len(),
                    self.adj.len()
                ),
            });
        }
        let mut v = ops_violations(self.space, &self.ops);
        match self.space {
            SearchSpace::Nb201 => {
                if self.adj != nb201::adjacency_flat() {
                    v.push(Violation::Adjacency);
                }
            }
            SearchSpace::Mbv3 => {
                let width_row = &self.ops[..cols];
                let declared = self.width_mult.unwrap_or(WidthMult::W1_0);
                let expect = u8::from(declared == WidthMult::W1_2);
                if width_row.iter().all(|&x| x <= 1)
                    && (width_row.iter().all(|&x| x == 0) || width_row.iter().all(|&x| x == 1))
                    && width_row[0] != expect
                {
                    v.push(Violation::WidthMismatch);
                }
                if let Some(depths) = stage_depths(&self.ops) {
                    if self.adj != mbv3::adjacency_for_depths(&depths) {
                        v.push(Violation::Adjacency);
                    }
                }
            }
        }
        Ok(v)
    }

    pub fn is_valid(&self) -> Result<bool> {
        Ok(self.violations()?.is_empty())
    }

    pub fn decode(&self) -> Result<Architecture> {
        let v = self.violations()?;
        if !v.is_empty() {
            return Err(Error::InvalidArchitecture(v.iter().map(ToString::to_string).collect()));
        }
        Ok(decode_ops_unchecked(self.space, &self.ops))
    }
}

/// Active-block counts per stage, when every stage is a legal prefix.
fn stage_depths(ops: &[u8]) -> Option<[usize; mbv3::STAGES]> {
    let mut depths = [0; mbv3::STAGES];
    for (s, d) in depths.iter_mut().enumerate() {
        let active: Vec<bool> = (0..mbv3::MAX_DEPTH)
            .map(|b| {
                let r = 1 + s * mbv3::MAX_DEPTH + b;
                ops[r * mbv3::COLS..(r + 1) * mbv3::COLS].iter().any(|&x| x != 0)
            })
            .collect();
        let n = active.iter().take_while(|&&a| a).count();
        if active[n..].iter().any(|&a| a) {
            return None;
        }
        *d = n;
    }
    Some(depths)
}

/// Violations visible in the ops matrix alone (the adjacency is implied).
fn ops_violations(space: SearchSpace, ops: &[u8]) -> Vec<Violation> {
    let (rows, cols) = space.shape();
    let mut v = Vec::new();
    for (i, &x) in ops.iter().enumerate() {
        if x > 1 {
            v.push(Violation::NotBinary {
                row: i / cols,
                col: i % cols,
            });
        }
    }
    let row = |r: usize| &ops[r * cols..(r + 1) * cols];
    let ones = |r: usize| row(r).iter().filter(|&&x| x == 1).count();
    match space {
        SearchSpace::Nb201 => {
            for (r, col) in [(0, nb201::INPUT_COL), (rows - 1, nb201::OUTPUT_COL)] {
                if ones(r) != 1 || row(r)[col] != 1 {
                    v.push(Violation::Placeholder { row: r });
                }
            }
            for r in 1..rows - 1 {
                let n = ones(r);
                if n != 1 {
                    v.push(Violation::RowNotOneHot { row: r, ones: n });
                } else if row(r)[nb201::INPUT_COL] == 1 || row(r)[nb201::OUTPUT_COL] == 1 {
                    v.push(Violation::Placeholder { row: r });
                }
            }
        }
        SearchSpace::Mbv3 => {
            let w = ones(0);
            if w != 0 && w != cols {
                v.push(Violation::WidthRow);
            }
            for s in 0..mbv3::STAGES {
                let mut active = [false; mbv3::MAX_DEPTH];
                for (b, a) in active.iter_mut().enumerate() {
                    let r = 1 + s * mbv3::MAX_DEPTH + b;
                    let n = ones(r);
                    *a = n > 0;
                    if n > 1 {
                        v.push(Violation::RowNotOneHot { row: r, ones: n });
                    }
                }
                let prefix = active.iter().take_while(|&&a| a).count();
                if active[prefix..].iter().any(|&a| a) {
                    v.push(Violation::NonPrefixStage { stage: s });
                } else if !(mbv3::MIN_DEPTH..=mbv3::MAX_DEPTH).contains(&prefix) {
                    v.push(Violation::BadDepth {
                        stage: s,
                        depth: prefix,
                    });
                }
            }
        }
    }
    v
}

/// Reads a valid ops matrix back into an architecture.
fn decode_ops_unchecked(space: SearchSpace, ops: &[u8]) -> Architecture {
    let cols = space.cols();
    let argmax = |r: usize| {
        ops[r * cols..(r + 1) * cols]
            .iter()
            .position(|&x| x == 1)
            .expect("one-hot row")
    };
    match space {
        SearchSpace::Nb201 => {
            let ops = std::array::from_fn(|e| Nb201Op::from_index(argmax(e + 1) - 1).expect("op column"));
            Architecture::Nb201(Nb201Cell { ops })
        }
        SearchSpace::Mbv3 => {
            let width = if ops[0] == 1 {
                WidthMult::W1_2
            } else {
                WidthMult::W1_0
            };
            let stages = std::array::from_fn(|s| {
                (0..mbv3::MAX_DEPTH)
                    .map(|b| 1 + s * mbv3::MAX_DEPTH + b)
                    .take_while(|&r| ops[r * cols..(r + 1) * cols].contains(&1))
                    .map(|r| Mbv3Block::from_column(argmax(r)).expect("block column"))
                    .collect()
            });
            Architecture::Mbv3(Mbv3Net { width, stages })
        }
    }
}

/// Real-valued relaxation of an ops matrix, the state of the diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousArch {
    pub space: SearchSpace,
    pub values: Vec<f64>,
}

impl ContinuousArch {
    pub fn new(space: SearchSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.dim() {
            return Err(Error::Shape {
                op: "continuous_arch",
                detail: format!("{} needs {} values, got {}", space, space.dim(), values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "continuous_arch" });
        }
        Ok(Self { space, values })
    }

    fn row(&self, r: usize) -> &[f64] {
        let c = self.space.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Projects onto the nearest valid architecture (total function).
    ///
    /// NB201: per edge row, argmax over the five operation columns.
    /// MBv3: the width row selects 1.2 when its mean is at least 0.5; a
    /// block row is inactive when its maximum is below half the mean of its
    /// stage's row maxima; each stage is then snapped to the legal depth
    /// that flips the fewest rows (ties toward the smaller depth) and active
    /// rows take their argmax column.
    pub fn quantize(&self) -> Architecture {
        match self.space {
            SearchSpace::Nb201 => {
                let ops = std::array::from_fn(|e| {
                    let row = &self.row(e + 1)[1..=5];
                    Nb201Op::from_index(argmax(row)).expect("five ops")
                });
                Architecture::Nb201(Nb201Cell { ops })
            }
            SearchSpace::Mbv3 => {
                let width_mean = self.row(0).iter().sum::<f64>() / mbv3::COLS as f64;
                let width = if width_mean >= 0.5 {
                    WidthMult::W1_2
                } else {
                    WidthMult::W1_0
                };
                let stages = std::array::from_fn(|s| {
                    let rows: Vec<&[f64]> = (0..mbv3::MAX_DEPTH)
                        .map(|b| self.row(1 + s * mbv3::MAX_DEPTH + b))
                        .collect();
                    let maxima: Vec<f64> = rows.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
                    let threshold = 0.5 * maxima.iter().sum::<f64>() / maxima.len() as f64;
                    let active: Vec<bool> = maxima.iter().map(|&m| m >= threshold).collect();
                    let depth = repair_depth(&active);
                    rows[..depth]
                        .iter()
                        .map(|r| Mbv3Block::from_column(argmax(r)).expect("nine columns"))
                        .collect()
                });
                Architecture::Mbv3(Mbv3Net { width, stages })
            }
        }
    }

    /// True when rounding every entry at 0.5 already yields a valid ops
    /// matrix, with no repair.
    pub fn strict_valid(&self) -> bool {
        let rounded: Vec<u8> = self.values.iter().map(|&v| u8::from(v >= 0.5)).collect();
        ops_violations(self.space, &rounded).is_empty()
    }
}

/// Legal stage depth flipping the fewest activity flags; ties go to the
/// smaller depth.
pub fn repair_depth(active: &[bool]) -> usize {
    mbv3::DEPTHS
        .iter()
        .copied()
        .min_by_key(|&d| {
            let flips = active
                .iter()
                .enumerate()
                .filter(|&(b, &a)| (b < d) != a)
                .count();
            (flips, d)
        })
        .expect("nonempty depth set")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Biased NB201 sampling: with probability `bias` a uniform draw from
/// `top_set`, otherwise a uniform draw from all 15,625 cells.
pub fn sample_nb201<R: Rng + ?Sized>(rng: &mut R, top_set: &[Nb201Cell], bias: f64) -> Result<Architecture> {
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::InvalidArgument(format!("bias {bias} outside [0, 1]")));
    }
    if bias > 0.0 && top_set.is_empty() {
        return Err(Error::Empty("top_set with positive bias"));
    }
    let cell = if bias > 0.0 && rng.random_bool(bias) {
        top_set[rng.random_range(0..top_set.len())]
    } else {
        Nb201Cell::random(rng)
    };
    Ok(Architecture::Nb201(cell))
}

/// Uniform MBv3 sampling over width, per-stage depth, and per-block choices.
pub fn sample_mbv3<R: Rng + ?Sized>(rng: &mut R) -> Architecture {
    Architecture::Mbv3(Mbv3Net::random(rng))
}

/// JSON form: `{"space": "nb201", "ops": [[...], ...], "width_mult": 1.2}`.
#[derive(Serialize, Deserialize)]
struct ArchJson {
    space: SearchSpace,
    ops: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_mult: Option<WidthMult>,
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let enc = self.encode();
        let cols = self.space().cols();
        ArchJson {
            space: self.space(),
            ops: enc.ops.chunks(cols).map(<[u8]>::to_vec).collect(),
            width_mult: enc.width_mult,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = ArchJson::deserialize(d)?;
        let (rows, cols) = j.space.shape();
        if j.ops.len() != rows || j.ops.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom(format!("{} ops matrix must be {rows}x{cols}", j.space)));
        }
        let ops: Vec<u8> = j.ops.concat();
        let adj = match j.space {
            SearchSpace::Nb201 => nb201::adjacency_flat(),
            SearchSpace::Mbv3 => stage_depths(&ops)
                .map(|d| mbv3::adjacency_for_depths(&d))
                .unwrap_or_else(|| vec![0; mbv3::BLOCKS * mbv3::BLOCKS]),
        };
        let width_mult = match j.space {
            SearchSpace::Nb201 => None,
            SearchSpace::Mbv3 => Some(j.width_mult.unwrap_or(WidthMult::W1_0)),
        };
        Encoding {
            space: j.space,
            ops,
            adj,
            width_mult,
        }
        .decode()
        .map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb201_enc(rows: &[[u8; 7]; 8]) -> Encoding {
        Encoding {
            space: SearchSpace::Nb201,
            ops: rows.iter().flatten().copied().collect(),
            adj: nb201::adjacency_flat(),
            width_mult: None,
        }
    }

    #[test]
    fn all_skip_cell_is_valid() {
        let a = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Skip));
        assert!(a.encode().is_valid().unwrap());
    }

    #[test]
    fn two_hot_edge_row_is_rejected() {
        let mut rows = [[0u8; 7]; 8];
        rows[0][0] = 1;
        rows[7][6] = 1;
        for r in rows.iter_mut().take(7).skip(1) {
            r[2] = 1;
        }
        rows[1] = [0, 1, 1, 0, 0, 0, 0];
        let v = nb201_enc(&rows).violations().unwrap();
        assert_eq!(v, vec![Violation::RowNotOneHot { row: 1, ones: 2 }]);
    }

    #[test]
    fn wrong_shape_is_an_error() {
        let enc = Encoding {
            space: SearchSpace::Nb201,
            ops: vec![0; 10],
            adj: nb201::adjacency_flat(),
            width_mult: None,
        };
        assert!(matches!(enc.violations(), Err(Error::Shape { .. })));
    }

    #[test]
    fn wrong_nb201_adjacency_is_flagged() {
        let mut enc = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Conv1x1)).encode();
        enc.adj[1] = 0;
        assert_eq!(enc.violations().unwrap(), vec![Violation::Adjacency]);
    }

    fn mbv3_net() -> Mbv3Net {
        let blk = Mbv3Block { expand: 4, kernel: 5 };
        Mbv3Net {
            width: WidthMult::W1_0,
            stages: std::array::from_fn(|_| vec![blk; 2]),
        }
    }

    #[test]
    fn mbv3_non_prefix_stage_is_rejected() {
        let mut enc = Architecture::Mbv3(mbv3_net()).encode();
        // Stage 0: deactivate block 0, keep block 1 active.
        enc.ops[mbv3::COLS..2 * mbv3::COLS].fill(0);
        let v = enc.violations().unwrap();
        assert!(v.contains(&Violation::NonPrefixStage { stage: 0 }), "{v:?}");
    }

    #[test]
    fn mbv3_bad_depth_and_width_rows() {
        let mut enc = Architecture::Mbv3(mbv3_net()).encode();
        enc.ops[2 * mbv3::COLS..3 * mbv3::COLS].fill(0);
        enc.ops[0] = 1;
        let v = enc.violations().unwrap();
        assert!(v.contains(&Violation::BadDepth { stage: 0, depth: 1 }), "{v:?}");
        assert!(v.contains(&Violation::WidthRow), "{v:?}");
    }

    #[test]
    fn mbv3_width_mismatch() {
        let mut enc = Architecture::Mbv3(mbv3_net()).encode();
        enc.width_mult = Some(WidthMult::W1_2);
        assert_eq!(enc.violations().unwrap(), vec![Violation::WidthMismatch]);
    }

    #[test]
    fn nb201_edge_row_argmax() {
        let mut x = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Skip)).to_continuous();
        let c = nb201::COLS;
        x.values[c..2 * c].copy_from_slice(&[0.0, 0.9, 0.1, 0.0, 0.0, 0.0, 0.0]);
        let a = x.quantize();
        assert_eq!(a.as_nb201().unwrap().ops[0], Nb201Op::Zeroise);
    }

    #[test]
    fn mbv3_depth_one_prefix_is_repaired_to_two() {
        let net = mbv3_net();
        let mut x = Architecture::Mbv3(net).to_continuous();
        // Stage 2: only block 0 clearly active; block 1 far below threshold.
        let r = 1 + 2 * mbv3::MAX_DEPTH + 1;
        x.values[r * mbv3::COLS..(r + 1) * mbv3::COLS].fill(0.01);
        let a = x.quantize();
        assert_eq!(a.as_mbv3().unwrap().stages[2].len(), 2);
        assert!(a.encode().is_valid().unwrap());
    }

    #[test]
    fn repair_prefers_fewest_flips_then_smaller_depth() {
        // Oracle: enumerate all 16 activity patterns against the legal depths.
        for mask in 0u8..16 {
            let active: Vec<bool> = (0..4).map(|b| mask >> b & 1 == 1).collect();
            let mut best = (usize::MAX, 0);
            for d in [2, 3, 4] {
                let flips = (0..4).filter(|&b| (b < d) != active[b]).count();
                if flips < best.0 {
                    best = (flips, d);
                }
            }
            assert_eq!(repair_depth(&active), best.1, "{active:?}");
        }
    }

    #[test]
    fn strict_validity_by_rounding() {
        let a = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Conv3x3));
        let x = a.to_continuous();
        assert!(x.strict_valid());
        let half = ContinuousArch::new(SearchSpace::Nb201, vec![0.5; 56]).unwrap();
        assert!(!half.strict_valid());
        let half = ContinuousArch::new(SearchSpace::Mbv3, vec![0.5; 189]).unwrap();
        assert!(!half.strict_valid());
        // Perturb every entry by 0.4 toward the wrong side: rounding still recovers.
        let near = ContinuousArch::new(
            SearchSpace::Nb201,
            x.values.iter().map(|&v| if v > 0.5 { v - 0.4 } else { v + 0.4 }).collect(),
        )
        .unwrap();
        assert!(near.strict_valid());
        assert_eq!(near.quantize(), a);
    }

    #[test]
    fn json_shape() {
        let a = Architecture::Mbv3(mbv3_net());
        let j = serde_json::to_value(&a).unwrap();
        assert_eq!(j["space"], "mbv3");
        assert_eq!(j["width_mult"], 1.0);
        assert_eq!(j["ops"].as_array().unwrap().len(), 21);
        let back: Architecture = serde_json::from_value(j).unwrap();
        assert_eq!(back, a);
        let n = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::AvgPool3x3));
        let j = serde_json::to_value(&n).unwrap();
        assert!(j.get("width_mult").is_none());
        assert_eq!(serde_json::from_value::<Architecture>(j).unwrap(), n);
    }

    #[test]
    fn invalid_json_arch_is_rejected() {
        let j = serde_json::json!({"space": "nb201", "ops": vec![vec![0u8; 7]; 8]});
        assert!(serde_json::from_value::<Architecture>(j).is_err());
    }
}
