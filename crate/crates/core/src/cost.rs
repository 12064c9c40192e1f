//! Analytic parameter and MAC counts, the trimmed-mean latency protocol
//! over a surrogate latency source, and rank normalization.
//!
//! Per-layer formulas are tabulated in `docs/cost_model.md`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{mbv3, Architecture, Mbv3Net, Nb201Cell, Nb201Op};
use crate::stats;

pub const NB201_INPUT_HW: u64 = 32;
pub const MBV3_INPUT_HW: u64 = 224;
pub const NUM_CLASSES: u64 = 20;

/// Channel widths of the three NB201 stages.
pub const NB201_CHANNELS: [u64; 3] = [16, 32, 64];
pub const NB201_CELLS_PER_STAGE: usize = 5;

/// Stem, first block, five searchable stages, final expand, feature mix.
pub const MBV3_BASE_WIDTHS: [u64; 9] = [16, 16, 24, 40, 80, 112, 160, 960, 1280];
pub const MBV3_STRIDES: [u64; mbv3::STAGES] = [2, 2, 2, 1, 2];
pub const MBV3_SE: [bool; mbv3::STAGES] = [false, true, false, true, true];
pub const SE_REDUCTION: u64 = 4;

/// One counted layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Default)]
struct Tally {
    layers: Vec<Layer>,
}

impl Tally {
    fn push(&mut self, name: impl Into<String>, params: u64, macs: u64) {
        self.layers.push(Layer {
            name: name.into(),
            params,
            macs,
        });
    }

    /// k x k convolution without bias, optional grouped (depthwise).
    fn conv(&mut self, name: &str, cin: u64, cout: u64, k: u64, hw_out: u64, depthwise: bool) {
        let per_out = if depthwise { k * k } else { cin * k * k };
        self.push(name, per_out * cout, per_out * cout * hw_out * hw_out);
    }

    fn conv_bias(&mut self, name: &str, cin: u64, cout: u64, hw_out: u64) {
        self.push(name, cin * cout + cout, cin * cout * hw_out * hw_out);
    }

    fn bn(&mut self, name: &str, c: u64) {
        self.push(name, 2 * c, 0);
    }

    fn avg_pool(&mut self, name: &str, c: u64, k: u64, hw_out: u64) {
        self.push(name, 0, c * k * k * hw_out * hw_out);
    }

    fn linear(&mut self, name: &str, fin: u64, fout: u64) {
        self.push(name, fin * fout + fout, fin * fout);
    }
}

/// Costs of one NB201 cell at `c` channels and `hw` spatial size.
pub fn nb201_cell_layers(cell: &Nb201Cell, c: u64, hw: u64) -> Vec<Layer> {
    let mut t = Tally::default();
    for (e, op) in cell.ops.iter().enumerate() {
        let name = format!("edge{e}");
        match op {
            Nb201Op::Zeroise | Nb201Op::Skip => {}
            Nb201Op::Conv1x1 => {
                t.conv(&name, c, c, 1, hw, false);
                t.bn(&format!("{name}.bn"), c);
            }
            Nb201Op::Conv3x3 => {
                t.conv(&name, c, c, 3, hw, false);
                t.bn(&format!("{name}.bn"), c);
            }
            Nb201Op::AvgPool3x3 => t.avg_pool(&name, c, 3, hw),
        }
    }
    t.layers
}

fn nb201_layers(cell: &Nb201Cell) -> Vec<Layer> {
    let mut t = Tally::default();
    let mut hw = NB201_INPUT_HW;
    t.conv("stem", 3, NB201_CHANNELS[0], 3, hw, false);
    t.bn("stem.bn", NB201_CHANNELS[0]);
    for (s, &c) in NB201_CHANNELS.iter().enumerate() {
        if s > 0 {
            let cin = NB201_CHANNELS[s - 1];
            hw /= 2;
            let name = format!("reduce{s}");
            t.conv(&format!("{name}.conv_a"), cin, c, 3, hw, false);
            t.bn(&format!("{name}.bn_a"), c);
            t.conv(&format!("{name}.conv_b"), c, c, 3, hw, false);
            t.bn(&format!("{name}.bn_b"), c);
            t.avg_pool(&format!("{name}.pool"), cin, 2, hw);
            t.conv(&format!("{name}.shortcut"), cin, c, 1, hw, false);
        }
        for i in 0..NB201_CELLS_PER_STAGE {
            for mut l in nb201_cell_layers(cell, c, hw) {
                l.name = format!("stage{s}.cell{i}.{}", l.name);
                t.layers.push(l);
            }
        }
    }
    let c = NB201_CHANNELS[2];
    t.bn("head.bn", c);
    t.avg_pool("head.global_pool", c, hw, 1);
    t.linear("classifier", c, NUM_CLASSES);
    t.layers
}

/// Rounds to the nearest multiple of 8, never going below 90% of `v`.
pub fn make_divisible(v: f64, divisor: u64) -> u64 {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as u64
}

/// Channel widths after the width multiplier, in [`MBV3_BASE_WIDTHS`] order.
pub fn mbv3_widths(width: mbv3::WidthMult) -> [u64; 9] {
    let w = width.value();
    MBV3_BASE_WIDTHS.map(|base| make_divisible(base as f64 * w, 8))
}

#[allow(clippy::too_many_arguments)]
fn mb_block(t: &mut Tally, name: &str, cin: u64, cout: u64, expand: u64, k: u64, hw_in: u64, stride: u64, se: bool) {
    let hw_out = hw_in / stride;
    let mid = if expand == 1 { cin } else { make_divisible((cin * expand) as f64, 8) };
    if expand != 1 {
        t.conv(&format!("{name}.expand"), cin, mid, 1, hw_in, false);
        t.bn(&format!("{name}.expand_bn"), mid);
    }
    t.conv(&format!("{name}.depthwise"), mid, mid, k, hw_out, true);
    t.bn(&format!("{name}.depthwise_bn"), mid);
    if se {
        let squeeze = make_divisible((mid / SE_REDUCTION) as f64, 8);
        t.avg_pool(&format!("{name}.se_pool"), mid, hw_out, 1);
        t.conv_bias(&format!("{name}.se_reduce"), mid, squeeze, 1);
        t.conv_bias(&format!("{name}.se_expand"), squeeze, mid, 1);
        t.push(format!("{name}.se_scale"), 0, mid * hw_out * hw_out);
    }
    t.conv(&format!("{name}.project"), mid, cout, 1, hw_out, false);
    t.bn(&format!("{name}.project_bn"), cout);
}

fn mbv3_layers(net: &Mbv3Net) -> Vec<Layer> {
    let mut t = Tally::default();
    let w = mbv3_widths(net.width);
    let mut hw = MBV3_INPUT_HW / 2;
    t.conv("stem", 3, w[0], 3, hw, false);
    t.bn("stem.bn", w[0]);
    mb_block(&mut t, "first", w[0], w[1], 1, 3, hw, 1, false);
    let mut cin = w[1];
    for (s, blocks) in net.stages.iter().enumerate() {
        let cout = w[2 + s];
        for (b, blk) in blocks.iter().enumerate() {
            let stride = if b == 0 { MBV3_STRIDES[s] } else { 1 };
            mb_block(
                &mut t,
                &format!("stage{s}.block{b}"),
                cin,
                cout,
                u64::from(blk.expand),
                u64::from(blk.kernel),
                hw,
                stride,
                MBV3_SE[s],
            );
            hw /= stride;
            cin = cout;
        }
    }
    t.conv("final_expand", cin, w[7], 1, hw, false);
    t.bn("final_expand.bn", w[7]);
    t.avg_pool("global_pool", w[7], hw, 1);
    t.conv("feature_mix", w[7], w[8], 1, 1, false);
    t.linear("classifier", w[8], NUM_CLASSES);
    t.layers
}

/// Every counted layer of the full network.
pub fn layers(a: &Architecture) -> Vec<Layer> {
    match a {
        Architecture::Nb201(c) => nb201_layers(c),
        Architecture::Mbv3(n) => mbv3_layers(n),
    }
}

pub fn count_params(a: &Architecture) -> u64 {
    layers(a).iter().map(|l| l.params).sum()
}

/// MACs at the space's fixed input resolution (32 for NB201, 224 for MBv3).
pub fn count_macs(a: &Architecture) -> u64 {
    layers(a).iter().map(|l| l.macs).sum()
}

/// Weighted layers on the longest sequential path.
pub fn active_depth(a: &Architecture) -> u64 {
    match a {
        Architecture::Nb201(c) => (3 * NB201_CELLS_PER_STAGE * c.conv_depth()) as u64 + 6,
        Architecture::Mbv3(n) => 3 * n.active_blocks() as u64 + 6,
    }
}

pub fn millions(count: u64) -> f64 {
    count as f64 / 1e6
}

/// Surrogate latency: `alpha * MACs + beta * params + gamma * depth`
/// milliseconds, with multiplicative lognormal noise of scale `noise_sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub alpha_ms_per_mac: f64,
    pub beta_ms_per_param: f64,
    pub gamma_ms_per_layer: f64,
    pub noise_sigma: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            alpha_ms_per_mac: 1e-8,
            beta_ms_per_param: 2e-8,
            gamma_ms_per_layer: 0.05,
            noise_sigma: 0.05,
        }
    }
}

impl LatencyModel {
    pub fn base_ms(&self, macs: u64, params: u64, depth: u64) -> f64 {
        self.alpha_ms_per_mac * macs as f64 + self.beta_ms_per_param * params as f64 + self.gamma_ms_per_layer * depth as f64
    }

    pub fn base_for(&self, a: &Architecture) -> f64 {
        self.base_ms(count_macs(a), count_params(a), active_depth(a))
    }

    /// One timed run.
    pub fn draw<R: Rng + ?Sized>(&self, base: f64, rng: &mut R) -> f64 {
        if self.noise_sigma == 0.0 {
            return base;
        }
        let z: f64 = StandardNormal.sample(rng);
        base * (self.noise_sigma * z).exp()
    }
}

/// Repeat, trim to the normal-theory interval, average the survivors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyProtocol {
    pub repetitions: usize,
    pub ci_level: f64,
}

impl Default for LatencyProtocol {
    fn default() -> Self {
        Self {
            repetitions: 100,
            ci_level: 0.90,
        }
    }
}

impl LatencyProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 2 {
            return Err(Error::InvalidArgument(format!("repetitions {} < 2", self.repetitions)));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidArgument(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        Ok(())
    }

    pub fn samples<R: Rng + ?Sized>(&self, model: &LatencyModel, base: f64, rng: &mut R) -> Vec<f64> {
        (0..self.repetitions).map(|_| model.draw(base, rng)).collect()
    }

    /// Mean of the samples inside `mean ± z * sd` (sample sd), where `z`
    /// is the two-sided normal quantile of `ci_level`.
    pub fn trimmed_mean(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument("trimmed mean needs two samples".into()));
        }
        let m = shifted_mean(samples.iter().copied()).expect("nonempty");
        let n = samples.len() as f64;
        let sd = (samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let half = stats::normal_interval_z(self.ci_level) * sd;
        shifted_mean(samples.iter().copied().filter(|x| (x - m).abs() <= half))
            .ok_or(Error::Empty("every latency sample was discarded"))
    }

    /// Trimmed-mean latency with a generator seeded by `seed`.
    pub fn measure(&self, model: &LatencyModel, a: &Architecture, seed: u64) -> Result<f64> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = self.samples(model, model.base_for(a), &mut rng);
        self.trimmed_mean(&samples)
    }
}

/// Mean computed as `first + mean(x - first)`, exact when all values agree.
fn shifted_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut first = None;
    let (mut acc, mut n) = (0.0, 0usize);
    for v in values {
        let f = *first.get_or_insert(v);
        acc += v - f;
        n += 1;
    }
    first.map(|f| f + acc / n as f64)
}

/// Analytic and measured costs of one architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub latency_ms: f64,
}

impl CostReport {
    pub fn compute(a: &Architecture, model: &LatencyModel, proto: &LatencyProtocol, seed: u64) -> Result<Self> {
        Ok(Self {
            params: count_params(a),
            macs: count_macs(a),
            latency_ms: proto.measure(model, a, seed)?,
        })
    }
}

/// Empirical CDF of a population, stored as a 101-point quantile grid and
/// evaluated by piecewise-linear interpolation. The population minimum maps
/// to 0, the maximum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankNormalizer {
    pub knots: Vec<f64>,
}

pub const NORMALIZER_KNOTS: usize = 101;

impl RankNormalizer {
    pub fn from_population(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("normalization population"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "normalizer" });
        }
        let s = stats::sorted(values);
        let knots = (0..NORMALIZER_KNOTS)
            .map(|i| stats::quantile_sorted(&s, i as f64 / (NORMALIZER_KNOTS - 1) as f64))
            .collect();
        Ok(Self { knots })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        let k = &self.knots;
        let last = k.len() - 1;
        if k[last] == k[0] {
            return 0.5;
        }
        if v <= k[0] {
            return 0.0;
        }
        if v >= k[last] {
            return 1.0;
        }
        let lo = k.partition_point(|&x| x < v);
        let hi = k.partition_point(|&x| x <= v);
        let pos = if hi > lo {
            // v equals knots lo..hi; use the average position.
            (lo + hi - 1) as f64 / 2.0
        } else {
            let (a, b) = (k[lo - 1], k[lo]);
            (lo - 1) as f64 + (v - a) / (b - a)
        };
        pos / last as f64
    }
}

/// Rank-normalized position of `value` within `population`.
pub fn normalize_metric(value: f64, population: &[f64]) -> Result<f64> {
    Ok(RankNormalizer::from_population(population)?.normalize(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Mbv3Block, WidthMult};

    #[test]
    fn single_conv1x1_edge_at_16_channels() {
        let mut cell = Nb201Cell::uniform(Nb201Op::Zeroise);
        cell.ops[0] = Nb201Op::Conv1x1;
        let p: u64 = nb201_cell_layers(&cell, 16, 32).iter().map(|l| l.params).sum();
        assert_eq!(p, 288);
        let zero = Nb201Cell::uniform(Nb201Op::Zeroise);
        assert!(nb201_cell_layers(&zero, 16, 32).is_empty());
    }

    #[test]
    fn conv_ratios() {
        let mut one = Nb201Cell::uniform(Nb201Op::Zeroise);
        one.ops[2] = Nb201Op::Conv1x1;
        let mut three = one;
        three.ops[2] = Nb201Op::Conv3x3;
        let macs = |c: &Nb201Cell, hw| nb201_cell_layers(c, 32, hw).iter().map(|l| l.macs).sum::<u64>();
        assert_eq!(macs(&three, 16), 9 * macs(&one, 16));
        assert_eq!(macs(&three, 8) * 4, macs(&three, 16));
    }

    #[test]
    fn make_divisible_matches_reference_values() {
        assert_eq!(make_divisible(16.0 * 1.2, 8), 24);
        assert_eq!(make_divisible(24.0 * 1.2, 8), 32);
        assert_eq!(make_divisible(40.0 * 1.2, 8), 48);
        assert_eq!(make_divisible(112.0 * 1.2, 8), 136);
        assert_eq!(make_divisible(20.0, 8), 24);
        assert_eq!(make_divisible(3.0, 8), 8);
    }

    #[test]
    fn wider_net_costs_more() {
        let blk = Mbv3Block { expand: 3, kernel: 3 };
        let narrow = Mbv3Net {
            width: WidthMult::W1_0,
            stages: std::array::from_fn(|_| vec![blk; 2]),
        };
        let wide = Mbv3Net {
            width: WidthMult::W1_2,
            ..narrow.clone()
        };
        let (n, w) = (Architecture::Mbv3(narrow), Architecture::Mbv3(wide));
        assert!(count_params(&w) > count_params(&n));
        assert!(count_macs(&w) > count_macs(&n));
    }

    #[test]
    fn zero_noise_latency_is_exact() {
        let model = LatencyModel {
            noise_sigma: 0.0,
            ..LatencyModel::default()
        };
        let a = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Conv3x3));
        let lat = LatencyProtocol::default().measure(&model, &a, 3).unwrap();
        assert_eq!(lat, model.base_for(&a));
    }

    #[test]
    fn normalizer_endpoints_and_median() {
        let pop: Vec<f64> = (0..101).map(|i| (i * i) as f64).collect();
        let r = RankNormalizer::from_population(&pop).unwrap();
        assert_eq!(r.normalize(0.0), 0.0);
        assert_eq!(r.normalize(10_000.0), 1.0);
        assert!((r.normalize(2500.0) - 0.5).abs() < 1e-12);
        assert!(normalize_metric(1.0, &[]).is_err());
    }
}
