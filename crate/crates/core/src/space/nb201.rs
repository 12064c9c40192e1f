//! NAS-Bench-201 cell space: four nodes, six edges, five candidate ops.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ops-matrix rows: input, six edges, output.
pub const ROWS: usize = 8;
/// Ops-matrix columns: input placeholder, five operations, output placeholder.
pub const COLS: usize = 7;
pub const INPUT_COL: usize = 0;
pub const OUTPUT_COL: usize = 6;
pub const NUM_CELLS: usize = 15_625;

/// `(from, to)` node pairs of the six edges, in ops-matrix row order.
pub const EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Fixed 8x8 adjacency over ops-matrix rows (row `i` feeds row `j`).
pub const ADJACENCY: [[u8; ROWS]; ROWS] = [
    [0, 1, 1, 0, 1, 0, 0, 0],
    [0, 0, 0, 1, 0, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 0],
];

pub fn adjacency_flat() -> Vec<u8> {
    ADJACENCY.iter().flatten().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nb201Op {
    Zeroise,
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl Nb201Op {
    pub const ALL: [Nb201Op; 5] = [
        Nb201Op::Zeroise,
        Nb201Op::Skip,
        Nb201Op::Conv1x1,
        Nb201Op::Conv3x3,
        Nb201Op::AvgPool3x3,
    ];

    /// Position among the five operations (0..5).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Ops-matrix column.
    pub fn column(self) -> usize {
        self.index() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Nb201Op::Zeroise => "none",
            Nb201Op::Skip => "skip_connect",
            Nb201Op::Conv1x1 => "nor_conv_1x1",
            Nb201Op::Conv3x3 => "nor_conv_3x3",
            Nb201Op::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, Nb201Op::Conv1x1 | Nb201Op::Conv3x3)
    }
}

/// One cell: an operation per edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nb201Cell {
    pub ops: [Nb201Op; 6],
}

impl Nb201Cell {
    pub fn uniform(op: Nb201Op) -> Self {
        Self { ops: [op; 6] }
    }

    /// Base-5 index in `0..NUM_CELLS`, edge 0 most significant.
    pub fn index(&self) -> usize {
        self.ops.iter().fold(0, |acc, op| acc * 5 + op.index())
    }

    pub fn from_index(mut i: usize) -> Option<Self> {
        if i >= NUM_CELLS {
            return None;
        }
        let mut ops = [Nb201Op::Zeroise; 6];
        for slot in ops.iter_mut().rev() {
            *slot = Nb201Op::ALL[i % 5];
            i /= 5;
        }
        Some(Self { ops })
    }

    pub fn all() -> impl Iterator<Item = Nb201Cell> {
        (0..NUM_CELLS).map(|i| Self::from_index(i).expect("in range"))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_index(rng.random_range(0..NUM_CELLS)).expect("in range")
    }

    /// Binary 8x7 ops matrix, row-major.
    pub fn ops_matrix(&self) -> Vec<u8> {
        let mut m = vec![0u8; ROWS * COLS];
        m[INPUT_COL] = 1;
        for (e, op) in self.ops.iter().enumerate() {
            m[(e + 1) * COLS + op.column()] = 1;
        }
        m[(ROWS - 1) * COLS + OUTPUT_COL] = 1;
        m
    }

    /// Edges on the longest input-to-output path made of non-zero ops, or
    /// `None` when the output is disconnected from the input.
    pub fn longest_path(&self) -> Option<usize> {
        let mut best: [Option<usize>; 4] = [Some(0), None, None, None];
        for (e, &(from, to)) in EDGES.iter().enumerate() {
            if self.ops[e] == Nb201Op::Zeroise {
                continue;
            }
            if let Some(d) = best[from] {
                best[to] = Some(best[to].map_or(d + 1, |b| b.max(d + 1)));
            }
        }
        // Edges are listed so every edge into node k follows those into its sources.
        best[3]
    }

    /// Weighted ops on the longest connected path.
    pub fn conv_depth(&self) -> usize {
        let mut best: [Option<usize>; 4] = [Some(0), None, None, None];
        for (e, &(from, to)) in EDGES.iter().enumerate() {
            let op = self.ops[e];
            if op == Nb201Op::Zeroise {
                continue;
            }
            if let Some(d) = best[from] {
                let w = d + usize::from(op.has_weights());
                best[to] = Some(best[to].map_or(w, |b| b.max(w)));
            }
        }
        best[3].unwrap_or(0)
    }
}

impl fmt::Display for Nb201Cell {
    /// NAS-Bench-201 arch string, e.g. `|nor_conv_3x3~0|+|none~0|skip_connect~1|+|...|`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut e = 0;
        for node in 1..4 {
            if node > 1 {
                write!(f, "+")?;
            }
            write!(f, "|")?;
            for src in 0..node {
                write!(f, "{}~{}|", self.ops[e].name(), src)?;
                e += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip_covers_space() {
        for i in [0, 1, 4, 5, 777, NUM_CELLS - 1] {
            assert_eq!(Nb201Cell::from_index(i).unwrap().index(), i);
        }
        assert!(Nb201Cell::from_index(NUM_CELLS).is_none());
    }

    #[test]
    fn edge_order_matches_adjacency() {
        // Row 1 + e feeds the edges leaving the destination node of edge e.
        for (e, &(_, to)) in EDGES.iter().enumerate() {
            for (f, &(from, _)) in EDGES.iter().enumerate() {
                assert_eq!(ADJACENCY[e + 1][f + 1] == 1, from == to, "edges {e}->{f}");
            }
            assert_eq!(ADJACENCY[e + 1][ROWS - 1] == 1, to == 3);
            assert_eq!(ADJACENCY[0][e + 1] == 1, EDGES[e].0 == 0);
        }
    }

    #[test]
    fn arch_string_format() {
        let c = Nb201Cell::uniform(Nb201Op::Skip);
        assert_eq!(
            c.to_string(),
            "|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|"
        );
    }

    #[test]
    fn connectivity() {
        assert_eq!(Nb201Cell::uniform(Nb201Op::Zeroise).longest_path(), None);
        assert_eq!(Nb201Cell::uniform(Nb201Op::Conv3x3).longest_path(), Some(3));
        assert_eq!(Nb201Cell::uniform(Nb201Op::Conv3x3).conv_depth(), 3);
        let mut only_direct = Nb201Cell::uniform(Nb201Op::Zeroise);
        only_direct.ops[3] = Nb201Op::Conv1x1;
        assert_eq!(only_direct.longest_path(), Some(1));
    }
}
