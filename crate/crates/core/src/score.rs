//! Variance-exploding SDE, the transformer score model over ops-matrix
//! tokens, and denoising score matching.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::Provenance;
use crate::nn::{Linear, TokenEmbedding, Trunk};
use crate::numeric::{self, clip_grad_norm, AdamW, AttentionMask, Bound, CosineSchedule, Graph, ParamStore, Scalar, Tensor, Var};
use crate::seed::{self, stream};
use crate::space::{Architecture, ContinuousArch, SearchSpace};

/// `σ(t) = σ_min (σ_max/σ_min)^t`, zero drift, `g(t) = σ(t) sqrt(2 ln(σ_max/σ_min))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.1,
            sigma_max: 5.0,
            t_end: 1.0,
            steps: 200,
        }
    }
}

impl SdeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps == 0 || self.t_end.is_nan() || self.t_end <= 0.0 {
            return Err(Error::InvalidArgument("need steps >= 1 and T > 0".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    pub fn g(&self, t: f64) -> f64 {
        self.sigma(t) * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt()
    }

    pub fn g2(&self, t: f64) -> f64 {
        let g = self.g(t);
        g * g
    }

    /// Reverse step size `T / N`.
    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Times visited by the reverse sampler, `T, T - dt, ..., dt`.
    pub fn reverse_times(&self) -> Vec<f64> {
        (0..self.steps).map(|i| self.t_end - i as f64 * self.dt()).collect()
    }

    /// Log-uniform draw in `[1e-3, T]`.
    pub fn sample_train_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lo = (1e-3f64).ln();
        let hi = self.t_end.ln();
        rng.random_range(lo..=hi).exp()
    }
}

/// A noised architecture and the score of its perturbation kernel.
#[derive(Clone, Debug)]
pub struct Perturbed {
    pub x: ContinuousArch,
    pub eps: Vec<f64>,
    pub true_score: Vec<f64>,
    pub sigma: f64,
}

/// `x_t = onehot(a) + σ(t) ε`, score `-(x_t - onehot(a)) / σ(t)²`.
pub fn perturb<R: Rng + ?Sized>(sde: &SdeSchedule, a: &Architecture, t: f64, rng: &mut R) -> Result<Perturbed> {
    if !(t > 0.0 && t <= sde.t_end) {
        return Err(Error::InvalidArgument(format!("perturb needs 0 < t <= {}, got {t}", sde.t_end)));
    }
    let x0 = a.to_continuous();
    let sigma = sde.sigma(t);
    let eps: Vec<f64> = (0..x0.values.len()).map(|_| StandardNormal.sample(rng)).collect();
    let values: Vec<f64> = x0.values.iter().zip(&eps).map(|(v, e)| v + sigma * e).collect();
    let true_score = values.iter().zip(&x0.values).map(|(x, v)| -(x - v) / (sigma * sigma)).collect();
    Ok(Perturbed {
        x: ContinuousArch {
            space: x0.space,
            values,
        },
        eps,
        true_score,
        sigma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 3,
            time_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Transformer score model. The head output is divided by `σ(t)` so the
/// network regresses `-ε` at every noise level.
#[derive(Clone, Debug)]
pub struct ScoreNet<S> {
    pub space: SearchSpace,
    pub config: ScoreConfig,
    pub sde: SdeSchedule,
    pub store: ParamStore<S>,
    pub provenance: Option<Provenance>,
    embed: TokenEmbedding,
    trunk: Trunk,
    head: Linear,
    mask: Arc<AttentionMask>,
}

/// Serialized alongside the parameter container.
#[derive(Serialize, Deserialize)]
struct ScoreMeta {
    space: SearchSpace,
    config: ScoreConfig,
    sde: SdeSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl<S: Scalar> ScoreNet<S> {
    pub fn new(space: SearchSpace, config: ScoreConfig, sde: SdeSchedule, seed: u64) -> Result<Self> {
        sde.validate()?;
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!("d_model {} not divisible by {} heads", config.d_model, config.heads)));
        }
        let mut rng = seed::rng(seed, &[stream::INIT]);
        let mut store = ParamStore::new();
        let (rows, cols) = space.shape();
        let embed = TokenEmbedding::new(&mut store, "embed", rows, cols, config.d_model, Some(config.time_dim), &mut rng);
        let trunk = Trunk::new(&mut store, "trunk", config.d_model, config.heads, config.blocks, &mut rng);
        let head = Linear::new(&mut store, "head", config.d_model, cols, true, &mut rng);
        Ok(Self {
            space,
            config,
            sde,
            store,
            provenance: None,
            embed,
            trunk,
            head,
            mask: space.attention_mask(),
        })
    }

    pub fn embedding(&self) -> &TokenEmbedding {
        &self.embed
    }

    pub fn mask(&self) -> &Arc<AttentionMask> {
        &self.mask
    }

    fn check_times(&self, ts: &[f64]) -> Result<()> {
        match ts.iter().find(|&&t| !(0.0..=self.sde.t_end).contains(&t)) {
            Some(t) => Err(Error::InvalidArgument(format!("t = {t} outside [0, {}]", self.sde.t_end))),
            None => Ok(()),
        }
    }

    pub fn embed_tokens(&self, g: &mut Graph<S>, p: &Bound, x: Var, ts: &[f64]) -> Result<Var> {
        self.check_times(ts)?;
        self.embed.forward(g, p, x, Some(ts))
    }

    /// Score for stacked inputs `(batch * rows) x cols`, one time per element.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, ts: &[f64]) -> Result<Var> {
        let h = self.embed_tokens(g, p, x, ts)?;
        let h = self.trunk.forward(g, p, h, &self.mask)?;
        let out = self.head.forward(g, p, h)?;
        let rows = self.space.rows();
        let cols = self.space.cols();
        let inv: Vec<S> = ts
            .iter()
            .flat_map(|&t| std::iter::repeat_n(S::lit(1.0 / self.sde.sigma(t)), rows * cols))
            .collect();
        let inv = g.leaf(Tensor::matrix(ts.len() * rows, cols, inv)?);
        g.mul(out, inv)
    }

    /// Evaluates `s_θ(x, t)` without recording gradients for later use.
    pub fn score(&self, x: &Tensor<S>, ts: &[f64]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = self.forward(&mut g, &p, xv, ts)?;
        Ok(g.value(out).clone())
    }

    /// Mean over the batch of `σ(t)² ‖s_θ(x_t, t) - score‖²`.
    pub fn dsm_loss(&self, g: &mut Graph<S>, p: &Bound, batch: &[(Perturbed, f64)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("dsm batch"));
        }
        let (rows, cols) = self.space.shape();
        let xs: Vec<S> = batch.iter().flat_map(|(b, _)| b.x.values.iter().map(|&v| S::lit(v))).collect();
        let target: Vec<S> = batch.iter().flat_map(|(b, _)| b.true_score.iter().map(|&v| S::lit(v))).collect();
        let weight: Vec<S> = batch
            .iter()
            .flat_map(|(b, _)| std::iter::repeat_n(S::lit(b.sigma), rows * cols))
            .collect();
        let ts: Vec<f64> = batch.iter().map(|(_, t)| *t).collect();
        let n = batch.len() * rows;
        let x = g.leaf(Tensor::matrix(n, cols, xs)?);
        let s = self.forward(g, p, x, &ts)?;
        let target = g.leaf(Tensor::matrix(n, cols, target)?);
        let w = g.leaf(Tensor::matrix(n, cols, weight)?);
        let d = g.sub(s, target)?;
        let d = g.mul(d, w)?;
        let sq = g.square(d)?;
        let total = g.sum(sq)?;
        g.scale(total, S::one() / S::lit(batch.len() as f64))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        numeric::save(path, &self.store)?;
        let meta = ScoreMeta {
            space: self.space,
            config: self.config,
            sde: self.sde,
            provenance: self.provenance.clone(),
        };
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ScoreMeta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let mut net = Self::new(meta.space, meta.config, meta.sde, 0)?;
        net.store.load_from(numeric::load(path)?)?;
        net.provenance = meta.provenance;
        Ok(net)
    }
}

/// Per-step mean loss of a training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// Mean loss over a window of steps.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Denoising score matching over the given architectures, sampled uniformly
/// with replacement.
pub fn train_score<S: Scalar>(
    archs: &[Architecture],
    net: &mut ScoreNet<S>,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    if archs.is_empty() {
        return Err(Error::Empty("score training set"));
    }
    if let Some(a) = archs.iter().find(|a| a.space() != net.space) {
        return Err(Error::InvalidArgument(format!("architecture from {} in a {} run", a.space(), net.space)));
    }
    let mut rng = seed::rng(cfg.seed, &[stream::TRAIN]);
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        total_steps: cfg.steps,
    };
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| {
                let a = &archs[rng.random_range(0..archs.len())];
                let t = net.sde.sample_train_time(&mut rng);
                perturb(&net.sde, a, t, &mut rng).map(|p| (p, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let diverged = |e: Error| Error::Diverged {
            step,
            detail: e.to_string(),
        };
        let mut g = Graph::new();
        let p = net.store.bind(&mut g);
        let loss = net.dsm_loss(&mut g, &p, &batch).map_err(diverged)?;
        let value = g.value(loss).item().expect("scalar loss").as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {value}"),
            });
        }
        let grads = g.backward(loss).map_err(diverged)?;
        let mut grads = net.store.collect_grads(&g, &p, &grads);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut net.store, &grads, sched.lr(step))?;
        trace.losses.push(value);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Nb201Cell, Nb201Op};

    #[test]
    fn schedule_endpoints() {
        let s = SdeSchedule::default();
        assert!((s.sigma(0.0) - 0.1).abs() < 1e-15);
        assert!((s.sigma(1.0) - 5.0).abs() < 1e-12);
        assert!((s.g(0.5) / s.sigma(0.5) - (2.0 * 50f64.ln()).sqrt()).abs() < 1e-12);
        assert_eq!(s.reverse_times().len(), 200);
        assert!((s.reverse_times()[199] - s.dt()).abs() < 1e-12);
    }

    #[test]
    fn perturb_rejects_zero_time() {
        let a = Architecture::Nb201(Nb201Cell::uniform(Nb201Op::Skip));
        let mut rng = seed::rng(0, &[]);
        assert!(perturb(&SdeSchedule::default(), &a, 0.0, &mut rng).is_err());
        let p = perturb(&SdeSchedule::default(), &a, 0.3, &mut rng).unwrap();
        for (s, e) in p.true_score.iter().zip(&p.eps) {
            assert!((s + e / p.sigma).abs() < 1e-9);
        }
    }

    #[test]
    fn output_shape_matches_input() {
        for space in [SearchSpace::Nb201, SearchSpace::Mbv3] {
            let net = ScoreNet::<f64>::new(space, ScoreConfig::default(), SdeSchedule::default(), 1).unwrap();
            let (r, c) = space.shape();
            let x = Tensor::zeros(&[2 * r, c]);
            let s = net.score(&x, &[0.5, 0.9]).unwrap();
            assert_eq!(s.shape(), &[2 * r, c]);
        }
    }
}
