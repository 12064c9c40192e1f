//! Synthetic classification tasks and the hidden accuracy function that
//! stands in for training each architecture on each task.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::numeric::sigmoid;
use crate::seed::{self, stream};
use crate::space::{mbv3, Architecture, Mbv3Block, Mbv3Net, Nb201Cell, Nb201Op, WidthMult};

pub const NUM_CLASSES: usize = 20;
pub const DEFAULT_D_TASK: usize = 32;
pub const DIFFICULTY_RANGE: (f64, f64) = (0.2, 0.9);
const TASK_FEATURES: usize = 6;
const NB201_FEATURES: usize = 5;
const MBV3_FEATURES: usize = 6;
pub const TOP_SET_SIZE: usize = 250;
pub const REFERENCE_TASKS: u64 = 3;

/// A 20-class task: unit-norm class prototypes and a difficulty level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: u64,
    pub difficulty: f64,
    pub prototypes: Vec<Vec<f64>>,
}

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl TaskDescriptor {
    /// Prototypes `normalize(difficulty * c + (1 - difficulty) * u_k)` around
    /// a random center `c`; harder tasks have classes packed closer together.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, task_id: u64, d_task: usize) -> Self {
        let difficulty = rng.random_range(DIFFICULTY_RANGE.0..DIFFICULTY_RANGE.1);
        let center = unit_gaussian(rng, d_task);
        let prototypes = (0..NUM_CLASSES)
            .map(|_| {
                let u = unit_gaussian(rng, d_task);
                normalized(
                    center
                        .iter()
                        .zip(&u)
                        .map(|(c, u)| difficulty * c + (1.0 - difficulty) * u)
                        .collect(),
                )
            })
            .collect();
        Self {
            task_id,
            difficulty,
            prototypes,
        }
    }

    /// The task with id `task_id` under base seed `seed`.
    pub fn generate(seed: u64, task_id: u64, d_task: usize) -> Self {
        Self::sample(&mut seed::rng(seed, &[stream::TASK, task_id]), task_id, d_task)
    }

    pub fn d_task(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Prototype rows sorted by first coordinate.
    pub fn task_matrix(&self) -> Vec<Vec<f64>> {
        let mut rows = self.prototypes.clone();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]).then_with(|| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)));
        rows
    }

    /// Mean prototype.
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.d_task();
        let mut m = vec![0.0; d];
        for p in &self.prototypes {
            for (mi, pi) in m.iter_mut().zip(p) {
                *mi += pi;
            }
        }
        let n = self.prototypes.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

type Matrix = Vec<Vec<f64>>;

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
        .collect()
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Concave capacity curve on `[0, 1]`, equal to 0 at 0 and 1 at 1.
fn diminishing(x: f64) -> f64 {
    (1.0 - (-3.0 * x).exp()) / (1.0 - (-3.0f64).exp())
}

fn log_position(v: u64, lo: u64, hi: u64) -> f64 {
    ((v as f64 / lo as f64).ln() / (hi as f64 / lo as f64).ln()).clamp(0.0, 1.0)
}

/// Hidden weights of the accuracy function. Only the seed is persisted.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub seed: u64,
    pub d_task: usize,
    task_proj: Matrix,
    nb201_pref: Matrix,
    nb201_edge: Matrix,
    mbv3_pref: Matrix,
    mbv3_stage: Matrix,
    nb201_params: (u64, u64),
    mbv3_macs: (u64, u64),
}

impl Oracle {
    pub fn new(seed: u64, d_task: usize) -> Self {
        let mut rng = seed::rng(seed, &[stream::ORACLE]);
        let task_proj = gaussian_matrix(&mut rng, TASK_FEATURES, d_task, 1.0);
        let nb201_pref = gaussian_matrix(&mut rng, NB201_FEATURES, TASK_FEATURES, 0.5);
        let nb201_edge = gaussian_matrix(&mut rng, 6, NB201_FEATURES, 0.15);
        let mbv3_pref = gaussian_matrix(&mut rng, MBV3_FEATURES, TASK_FEATURES, 0.5);
        let mbv3_stage = gaussian_matrix(&mut rng, mbv3::STAGES, mbv3::COLS, 0.1);
        let nb201_params = (
            cost::count_params(&Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Zeroise))),
            cost::count_params(&Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Conv3x3))),
        );
        let small = Mbv3Block { expand: 3, kernel: 3 };
        let large = Mbv3Block { expand: 6, kernel: 7 };
        let net = |width, blk, depth| {
            Architecture::Mbv3(Mbv3Net {
                width,
                stages: std::array::from_fn(|_| vec![blk; depth]),
            })
        };
        let mbv3_macs = (
            cost::count_macs(&net(WidthMult::W1_0, small, mbv3::MIN_DEPTH)),
            cost::count_macs(&net(WidthMult::W1_2, large, mbv3::MAX_DEPTH)),
        );
        Self {
            seed,
            d_task,
            task_proj,
            nb201_pref,
            nb201_edge,
            mbv3_pref,
            mbv3_stage,
            nb201_params,
            mbv3_macs,
        }
    }

    /// Task features: a squashed random projection of the prototype centroid.
    pub fn task_features(&self, task: &TaskDescriptor) -> Vec<f64> {
        matvec(&self.task_proj, &task.centroid())
            .into_iter()
            .map(|v| (1.5 * v).tanh())
            .collect()
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, a: &Architecture, task: &TaskDescriptor) -> f64 {
        let tau = self.task_features(task);
        let d = task.difficulty;
        let slope = 3.0 - 2.0 * d;
        match a {
            Architecture::Nb201(cell) => {
                let mut hist = [0.0; NB201_FEATURES];
                for op in cell.ops {
                    hist[op.index()] += 1.0 / 6.0;
                }
                let params = cost::count_params(a);
                let cap = diminishing(log_position(params, self.nb201_params.0, self.nb201_params.1));
                let depth = cell.conv_depth() as f64 / 3.0;
                let pref = dot(&hist, &matvec(&self.nb201_pref, &tau));
                let edge: f64 = cell.ops.iter().enumerate().map(|(e, op)| self.nb201_edge[e][op.index()]).sum();
                let disconnected = if cell.longest_path().is_none() { 3.0 } else { 0.0 };
                slope * (1.8 * cap + 0.6 * depth + pref + edge - 1.0 - 0.8 * d) - disconnected
            }
            Architecture::Mbv3(net) => {
                let n = net.active_blocks() as f64;
                let mut hist = [0.0; MBV3_FEATURES];
                let mut stage_term = 0.0;
                for (s, blocks) in net.stages.iter().enumerate() {
                    for blk in blocks {
                        let c = blk.column();
                        hist[c / 3] += 1.0 / n;
                        hist[3 + c % 3] += 1.0 / n;
                        stage_term += self.mbv3_stage[s][c] / blocks.len() as f64;
                    }
                }
                let cap = diminishing(log_position(cost::count_macs(a), self.mbv3_macs.0, self.mbv3_macs.1));
                let depth = (n - (mbv3::STAGES * mbv3::MIN_DEPTH) as f64) / (mbv3::STAGES * (mbv3::MAX_DEPTH - mbv3::MIN_DEPTH)) as f64;
                let wide = if net.width == WidthMult::W1_2 { 1.0 } else { 0.0 };
                let pref = dot(&hist, &matvec(&self.mbv3_pref, &tau));
                slope * (1.6 * cap + 0.4 * depth + 0.2 * wide + pref + stage_term - 0.9 - 0.8 * d)
            }
        }
    }

    /// Ground-truth accuracy in (0, 1).
    pub fn accuracy(&self, a: &Architecture, task: &TaskDescriptor) -> f64 {
        sigmoid(self.logit(a, task))
    }

    /// Fixed reference tasks used to rank the NB201 space.
    pub fn reference_tasks(&self) -> Vec<TaskDescriptor> {
        (0..REFERENCE_TASKS)
            .map(|i| TaskDescriptor::sample(&mut seed::rng(self.seed, &[stream::ORACLE, stream::TASK, i]), u64::MAX - i, self.d_task))
            .collect()
    }

    /// The `TOP_SET_SIZE` NB201 cells with the highest mean accuracy over the
    /// reference tasks, best first.
    pub fn nb201_top_set(&self) -> Vec<Nb201Cell> {
        let tasks = self.reference_tasks();
        let mut scored: Vec<(f64, Nb201Cell)> = Nb201Cell::all()
            .map(|c| {
                let a = Architecture::Nb201(c);
                let m = tasks.iter().map(|t| self.accuracy(&a, t)).sum::<f64>() / tasks.len() as f64;
                (m, c)
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        scored.into_iter().take(TOP_SET_SIZE).map(|(_, c)| c).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_have_twenty_unit_prototypes() {
        let t = TaskDescriptor::generate(3, 0, DEFAULT_D_TASK);
        assert_eq!(t.prototypes.len(), 20);
        for p in &t.prototypes {
            let n: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!((0.2..0.9).contains(&t.difficulty));
        assert_eq!(t, TaskDescriptor::generate(3, 0, DEFAULT_D_TASK));
        assert_ne!(t, TaskDescriptor::generate(3, 1, DEFAULT_D_TASK));
    }

    #[test]
    fn task_matrix_is_permutation_stable() {
        let t = TaskDescriptor::generate(5, 2, DEFAULT_D_TASK);
        let mut shuffled = t.clone();
        shuffled.prototypes.reverse();
        shuffled.prototypes.swap(0, 7);
        assert_eq!(t.task_matrix(), shuffled.task_matrix());
        assert_eq!(t.task_matrix().len(), 20);
        assert_eq!(t.task_matrix()[0].len(), 32);
    }

    #[test]
    fn conv_cell_beats_empty_cell() {
        let oracle = Oracle::new(11, DEFAULT_D_TASK);
        let good = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Conv3x3));
        let bad = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Zeroise));
        for id in 0..50 {
            let t = TaskDescriptor::generate(1, id, DEFAULT_D_TASK);
            let (g, b) = (oracle.accuracy(&good, &t), oracle.accuracy(&bad, &t));
            assert!(g > b && g < 1.0 && b > 0.0);
            assert_eq!(g, oracle.accuracy(&good, &t));
        }
    }

    #[test]
    fn top_set_has_250_distinct_cells() {
        let top = Oracle::new(0, DEFAULT_D_TASK).nb201_top_set();
        assert_eq!(top.len(), TOP_SET_SIZE);
        let mut s = top.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), TOP_SET_SIZE);
    }
}
