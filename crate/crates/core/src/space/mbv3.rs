//! MobileNetV3 (OFA) space: five stages of 2-4 inverted-bottleneck blocks,
//! each with an expansion ratio and depthwise kernel, plus a width multiplier.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const STAGES: usize = 5;
pub const MAX_DEPTH: usize = 4;
pub const MIN_DEPTH: usize = 2;
pub const BLOCKS: usize = STAGES * MAX_DEPTH;
/// Width-multiplier row plus one row per block.
pub const ROWS: usize = BLOCKS + 1;
pub const COLS: usize = 9;
pub const EXPANDS: [u8; 3] = [3, 4, 6];
pub const KERNELS: [u8; 3] = [3, 5, 7];
pub const DEPTHS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WidthMult {
    W1_0,
    W1_2,
}

impl WidthMult {
    pub fn value(self) -> f64 {
        match self {
            WidthMult::W1_0 => 1.0,
            WidthMult::W1_2 => 1.2,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        if (v - 1.0).abs() < 1e-9 {
            Some(WidthMult::W1_0)
        } else if (v - 1.2).abs() < 1e-9 {
            Some(WidthMult::W1_2)
        } else {
            None
        }
    }
}

impl Serialize for WidthMult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for WidthMult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        WidthMult::from_value(v).ok_or_else(|| serde::de::Error::custom(format!("width_mult {v} not in {{1.0, 1.2}}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mbv3Block {
    pub expand: u8,
    pub kernel: u8,
}

impl Mbv3Block {
    /// Ops-matrix column: expansion group major, kernel minor.
    pub fn column(self) -> usize {
        let e = EXPANDS.iter().position(|&x| x == self.expand).expect("valid expand");
        let k = KERNELS.iter().position(|&x| x == self.kernel).expect("valid kernel");
        e * 3 + k
    }

    pub fn from_column(c: usize) -> Option<Self> {
        (c < COLS).then(|| Self {
            expand: EXPANDS[c / 3],
            kernel: KERNELS[c % 3],
        })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            expand: EXPANDS[rng.random_range(0..3)],
            kernel: KERNELS[rng.random_range(0..3)],
        }
    }
}

/// A sampled sub-network. Each stage holds its active blocks in order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mbv3Net {
    pub width: WidthMult,
    pub stages: [Vec<Mbv3Block>; STAGES],
}

impl Mbv3Net {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let width = if rng.random_bool(0.5) {
            WidthMult::W1_2
        } else {
            WidthMult::W1_0
        };
        let stages = std::array::from_fn(|_| {
            let depth = DEPTHS[rng.random_range(0..DEPTHS.len())];
            (0..depth).map(|_| Mbv3Block::random(rng)).collect()
        });
        Self { width, stages }
    }

    pub fn depths(&self) -> [usize; STAGES] {
        std::array::from_fn(|s| self.stages[s].len())
    }

    pub fn active_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Binary 21x9 ops matrix, row-major.
    pub fn ops_matrix(&self) -> Vec<u8> {
        let mut m = vec![0u8; ROWS * COLS];
        if self.width == WidthMult::W1_2 {
            m[..COLS].fill(1);
        }
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                m[(1 + s * MAX_DEPTH + b) * COLS + blk.column()] = 1;
            }
        }
        m
    }

    /// 20x20 chain over active blocks, row-major; `(i, j) = 1` when block
    /// `j` directly consumes the output of block `i`.
    pub fn adjacency(&self) -> Vec<u8> {
        adjacency_for_depths(&self.depths())
    }
}

pub fn adjacency_for_depths(depths: &[usize; STAGES]) -> Vec<u8> {
    let mut adj = vec![0u8; BLOCKS * BLOCKS];
    let active: Vec<usize> = (0..STAGES)
        .flat_map(|s| (0..depths[s].min(MAX_DEPTH)).map(move |b| s * MAX_DEPTH + b))
        .collect();
    for w in active.windows(2) {
        adj[w[0] * BLOCKS + w[1]] = 1;
    }
    adj
}

/// Exact number of distinct sub-networks including the width multiplier.
pub fn cardinality() -> u128 {
    let per_stage: u128 = DEPTHS.iter().map(|&d| 9u128.pow(d as u32)).sum();
    2 * per_stage.pow(STAGES as u32)
}

impl fmt::Display for Mbv3Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{:.1}", self.width.value())?;
        for blocks in &self.stages {
            write!(f, "|")?;
            for (i, b) in blocks.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "e{}k{}", b.expand, b.kernel)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_round_trip() {
        for c in 0..COLS {
            assert_eq!(Mbv3Block::from_column(c).unwrap().column(), c);
        }
        assert_eq!(Mbv3Block { expand: 4, kernel: 7 }.column(), 5);
    }

    #[test]
    fn adjacency_chains_active_blocks_across_stages() {
        let adj = adjacency_for_depths(&[2, 4, 2, 3, 2]);
        // stage 0 block 1 feeds stage 1 block 0.
        assert_eq!(adj[BLOCKS + 4], 1);
        assert_eq!(adj[1], 1);
        assert_eq!(adj.iter().map(|&v| v as usize).sum::<usize>(), 13 - 1);
    }

    #[test]
    fn cardinality_is_order_1e19() {
        let c = cardinality();
        assert_eq!(c, 2 * 7371u128.pow(5));
        assert!(c >= 10u128.pow(19) && c < 10u128.pow(20));
    }
}
