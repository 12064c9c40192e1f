//! Guided reverse diffusion and two-phase (stretched) generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};
use crate::oracle::TaskDescriptor;
use crate::predictors::{Head, PredictorSet};
use crate::score::{ScoreNet, SdeSchedule};
use crate::seed::{self, stream};
use crate::space::{Architecture, ContinuousArch, SearchSpace};

/// Chains advanced together in one forward pass.
pub const DEFAULT_CHUNK: usize = 32;
pub const BASELINE_BATCH: usize = 256;
pub const PHASE_BATCH: usize = 128;
/// Per-head multipliers turning published guidance scales into drift coefficients.
pub const GUIDANCE_UNITS: GuidanceScales = GuidanceScales::new(1e-3, 1e-3, 1e-3, 1e-3);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceScales {
    pub k_acc: f64,
    pub k_params: f64,
    pub k_macs: f64,
    pub k_lat: f64,
}

impl GuidanceScales {
    pub const ZERO: GuidanceScales = GuidanceScales::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(k_acc: f64, k_params: f64, k_macs: f64, k_lat: f64) -> Self {
        Self {
            k_acc,
            k_params,
            k_macs,
            k_lat,
        }
    }

    /// Single accuracy guide at 10,000, as in the DiffusionNAG baseline.
    pub const fn diffusionnag() -> Self {
        Self::new(10_000.0, 0.0, 0.0, 0.0)
    }

    pub fn get(&self, head: Head) -> f64 {
        match head {
            Head::Acc => self.k_acc,
            Head::Params => self.k_params,
            Head::Macs => self.k_macs,
            Head::Latency => self.k_lat,
            Head::AccDenoised => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for h in Head::GUIDES {
            let k = self.get(h);
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::InvalidArgument(format!("guidance scale for {} must be finite and >= 0, got {k}", h.name())));
            }
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn scaled(&self, units: &GuidanceScales) -> Self {
        Self::new(self.k_acc * units.k_acc, self.k_params * units.k_params, self.k_macs * units.k_macs, self.k_lat * units.k_lat)
    }

    pub fn is_zero(&self) -> bool {
        Head::GUIDES.iter().all(|&h| self.get(h) == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Efficient,
    Accurate,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efficient" => Ok(Regime::Efficient),
            "accurate" => Ok(Regime::Accurate),
            _ => Err(Error::InvalidArgument(format!("unknown regime '{s}' (expected efficient or accurate)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePreset {
    pub regime: Regime,
    pub scales: GuidanceScales,
}

impl PhasePreset {
    /// Published optima of the scale search.
    pub fn published(space: SearchSpace, regime: Regime) -> Self {
        let scales = match (space, regime) {
            (SearchSpace::Nb201, Regime::Efficient) => GuidanceScales::new(4732.0, 482.0, 421.0, 368.0),
            (SearchSpace::Nb201, Regime::Accurate) => GuidanceScales::new(24943.0, 12.0, 26.0, 13.0),
            (SearchSpace::Mbv3, Regime::Efficient) => GuidanceScales::new(4987.0, 494.0, 478.0, 481.0),
            (SearchSpace::Mbv3, Regime::Accurate) => GuidanceScales::new(48321.0, 21.0, 16.0, 39.0),
        };
        Self { regime, scales }
    }
}

/// The two presets of a stretched run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StretchPresets {
    pub efficient: GuidanceScales,
    pub accurate: GuidanceScales,
}

impl StretchPresets {
    pub fn published(space: SearchSpace) -> Self {
        Self {
            efficient: PhasePreset::published(space, Regime::Efficient).scales,
            accurate: PhasePreset::published(space, Regime::Accurate).scales,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Single,
    Efficient,
    Accurate,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Single => "single",
            Phase::Efficient => "efficient",
            Phase::Accurate => "accurate",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

/// Source of guidance gradients `∇_x log f_head(x, t)`.
pub trait GuideModel<S>: Sync {
    fn log_grad(&self, head: Head, x: &Tensor<S>, ts: &[f64]) -> Result<Tensor<S>>;
}

/// A predictor set conditioned on one dataset embedding.
pub struct PredictorGuide<'a, S> {
    pub preds: &'a PredictorSet<S>,
    pub dtilde: Vec<f64>,
}

impl<'a, S: Scalar> PredictorGuide<'a, S> {
    pub fn new(preds: &'a PredictorSet<S>, task: &TaskDescriptor) -> Self {
        Self {
            preds,
            dtilde: preds.encode(task),
        }
    }
}

impl<S: Scalar> GuideModel<S> for PredictorGuide<'_, S> {
    fn log_grad(&self, head: Head, x: &Tensor<S>, ts: &[f64]) -> Result<Tensor<S>> {
        Ok(self.preds.get(head).log_grad(x, ts, &self.dtilde)?.1)
    }
}

/// One Euler–Maruyama step of the guided reverse SDE for a block of chains.
///
/// `x` holds `ts.len()` stacked chains. Heads with a zero scale are not
/// evaluated, so zero guidance reproduces the unguided update exactly.
/// `noise` is omitted on the final step.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<S: Scalar>(
    net: &ScoreNet<S>,
    guide: Option<&dyn GuideModel<S>>,
    scales: &GuidanceScales,
    sde: &SdeSchedule,
    x: &mut [f64],
    t: f64,
    noise: Option<&[f64]>,
) -> Result<()> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::InvalidArgument(format!("reverse step needs t > 0, got {t}")));
    }
    let (rows, cols) = net.space.shape();
    let batch = x.len() / (rows * cols);
    let ts = vec![t; batch];
    let xt = Tensor::matrix(batch * rows, cols, x.iter().map(|&v| S::lit(v)).collect())?;
    let mut drift: Vec<f64> = net.score(&xt, &ts)?.data().iter().map(|v| v.as_f64()).collect();
    if let Some(guide) = guide {
        for head in Head::GUIDES {
            let k = scales.get(head);
            if k == 0.0 {
                continue;
            }
            let grad = guide.log_grad(head, &xt, &ts)?;
            for (d, g) in drift.iter_mut().zip(grad.data()) {
                *d += k * g.as_f64();
            }
        }
    }
    let g2dt = sde.g2(t) * sde.dt();
    let gsq = sde.g(t) * sde.dt().sqrt();
    match noise {
        Some(eps) => {
            for ((xv, d), e) in x.iter_mut().zip(&drift).zip(eps) {
                *xv += g2dt * d + gsq * e;
            }
        }
        None => {
            for (xv, d) in x.iter_mut().zip(&drift) {
                *xv += g2dt * d;
            }
        }
    }
    Ok(())
}

/// One generated chain: raw endpoint, its quantization, and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub chain: u64,
    pub phase: Phase,
    pub raw: ContinuousArch,
    pub strict_valid: bool,
    pub arch: Architecture,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub items: Vec<Generated>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn archs(&self) -> Vec<Architecture> {
        self.items.iter().map(|g| g.arch.clone()).collect()
    }

    pub fn raw(&self) -> Vec<ContinuousArch> {
        self.items.iter().map(|g| g.raw.clone()).collect()
    }

    pub fn extend(&mut self, other: Batch) {
        self.items.extend(other.items);
    }
}

/// Runs reverse chains for a score net and an optional guide.
pub struct Generator<'a, S> {
    pub net: &'a ScoreNet<S>,
    pub guide: Option<&'a dyn GuideModel<S>>,
    pub sde: SdeSchedule,
    pub chunk: usize,
    pub units: GuidanceScales,
}

impl<'a, S: Scalar> Generator<'a, S> {
    pub fn new(net: &'a ScoreNet<S>, guide: Option<&'a dyn GuideModel<S>>) -> Self {
        Self {
            net,
            guide,
            sde: net.sde,
            chunk: DEFAULT_CHUNK,
            units: GUIDANCE_UNITS,
        }
    }

    /// Same schedule with a different number of reverse steps.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.sde.steps = steps;
        self
    }

    fn chain_rng(seed: u64, phase: Phase, chain: u64) -> ChaCha8Rng {
        seed::rng(seed, &[stream::CHAIN, phase.stream(), chain])
    }

    fn draw<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn run_chunk(&self, scales: &GuidanceScales, seed: u64, phase: Phase, chains: &[u64]) -> Result<Vec<Generated>> {
        let space = self.net.space;
        let dim = space.dim();
        let mut rngs: Vec<ChaCha8Rng> = chains.iter().map(|&c| Self::chain_rng(seed, phase, c)).collect();
        let mut x: Vec<f64> = rngs
            .iter_mut()
            .flat_map(|r| Self::draw(r, dim))
            .map(|e| self.sde.sigma_max * e)
            .collect();
        let times = self.sde.reverse_times();
        let scales = scales.scaled(&self.units);
        for (i, &t) in times.iter().enumerate() {
            let noise = (i + 1 < times.len()).then(|| rngs.iter_mut().flat_map(|r| Self::draw(r, dim)).collect::<Vec<f64>>());
            guided_reverse_step(self.net, self.guide, &scales, &self.sde, &mut x, t, noise.as_deref())?;
            if let Some(b) = x.chunks(dim).position(|c| c.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    step: i,
                    detail: format!("chain {} ({} phase) left the finite range at t={t}", chains[b], phase.name()),
                });
            }
        }
        x.chunks(dim)
            .zip(chains)
            .map(|(v, &chain)| {
                let raw = ContinuousArch::new(space, v.to_vec())?;
                Ok(Generated {
                    chain,
                    phase,
                    strict_valid: raw.strict_valid(),
                    arch: raw.quantize(),
                    raw,
                })
            })
            .collect()
    }

    /// Chains `0..size` of one phase; each chain's randomness depends only on
    /// `(seed, phase, chain)`.
    pub fn run_phase(&self, scales: &GuidanceScales, size: usize, seed: u64, phase: Phase) -> Result<Batch> {
        scales.validate()?;
        self.sde.validate()?;
        if size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !scales.is_zero() && self.guide.is_none() {
            return Err(Error::InvalidArgument("non-zero guidance scales need predictors".into()));
        }
        let ids: Vec<u64> = (0..size as u64).collect();
        let parts = ids
            .par_chunks(self.chunk.max(1))
            .map(|c| self.run_chunk(scales, seed, phase, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            items: parts.into_iter().flatten().collect(),
        })
    }

    pub fn generate_batch(&self, scales: &GuidanceScales, size: usize, seed: u64) -> Result<Batch> {
        self.run_phase(scales, size, seed, Phase::Single)
    }

    /// Efficient phase then accurate phase, 128 chains each, on independent streams.
    pub fn generate_stretched(&self, presets: &StretchPresets, seed: u64) -> Result<Batch> {
        self.generate_stretched_sized(presets, PHASE_BATCH, seed)
    }

    pub fn generate_stretched_sized(&self, presets: &StretchPresets, per_phase: usize, seed: u64) -> Result<Batch> {
        let mut out = self.run_phase(&presets.efficient, per_phase, seed, Phase::Efficient)?;
        out.extend(self.run_phase(&presets.accurate, per_phase, seed, Phase::Accurate)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreConfig;

    fn tiny_net() -> ScoreNet<f64> {
        let cfg = ScoreConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            time_dim: 8,
        };
        let sde = SdeSchedule {
            steps: 20,
            ..SdeSchedule::default()
        };
        ScoreNet::new(SearchSpace::Nb201, cfg, sde, 3).unwrap()
    }

    struct Constant(f64);

    impl GuideModel<f64> for Constant {
        fn log_grad(&self, _: Head, x: &Tensor<f64>, _: &[f64]) -> Result<Tensor<f64>> {
            Ok(x.map(|_| self.0))
        }
    }

    #[test]
    fn zero_scales_match_unguided() {
        let net = tiny_net();
        let guide = Constant(1.0);
        let a = Generator::new(&net, None).generate_batch(&GuidanceScales::ZERO, 5, 9).unwrap();
        let b = Generator::new(&net, Some(&guide)).generate_batch(&GuidanceScales::ZERO, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_term_is_linear_in_scale() {
        let net = tiny_net();
        let guide = Constant(0.5);
        let sde = net.sde;
        let x0: Vec<f64> = (0..net.space.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let step = |k: f64| {
            let mut x = x0.clone();
            let s = GuidanceScales::new(0.0, 0.0, k, 0.0);
            guided_reverse_step(&net, Some(&guide), &s, &sde, &mut x, 0.5, None).unwrap();
            x
        };
        let (base, one, two) = (step(0.0), step(1.0), step(2.0));
        for i in 0..base.len() {
            let d1 = one[i] - base[i];
            let d2 = two[i] - base[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-9 * d1.abs().max(1.0));
        }
    }

    #[test]
    fn chunking_does_not_change_chains() {
        let net = tiny_net();
        let mut g = Generator::new(&net, None);
        let a = g.generate_batch(&GuidanceScales::ZERO, 7, 1).unwrap();
        g.chunk = 3;
        let b = g.generate_batch(&GuidanceScales::ZERO, 7, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_without_predictors_is_rejected() {
        let net = tiny_net();
        assert!(Generator::new(&net, None).generate_batch(&GuidanceScales::diffusionnag(), 2, 0).is_err());
        assert!(GuidanceScales::new(-1.0, 0.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn stretched_phases_are_tagged() {
        let net = tiny_net();
        let guide = Constant(0.0);
        let b = Generator::new(&net, Some(&guide))
            .generate_stretched_sized(&StretchPresets::published(SearchSpace::Nb201), 3, 4)
            .unwrap();
        let phases: Vec<Phase> = b.items.iter().map(|g| g.phase).collect();
        assert_eq!(phases, [Phase::Efficient; 3].into_iter().chain([Phase::Accurate; 3]).collect::<Vec<_>>());
        assert_ne!(b.items[0].raw, b.items[3].raw);
    }
}
