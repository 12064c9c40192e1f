//! Dataset-aware performance predictors and the dataset encoder.
//!
//! Each head maps a (possibly noised) ops matrix, a diffusion time and a
//! dataset embedding to a satisfaction probability in (0, 1). Accuracy heads
//! regress the accuracy itself; cost heads regress `1 - rank(cost)`, so
//! that higher is always better and `log f` can be ascended by guidance.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{MetaDataset, NormStats, Objectives, Provenance};
use crate::nn::{Linear, TokenEmbedding, Trunk};
use crate::numeric::{self, clip_grad_norm, AdamW, AttentionMask, Bound, CosineSchedule, Graph, ParamStore, Scalar, Tensor, Var};
use crate::oracle::TaskDescriptor;
use crate::score::SdeSchedule;
use crate::seed::{self, stream};
use crate::space::{Architecture, SearchSpace};
use crate::stats;

/// Weight scale of the encoder's first layer.
const ENCODER_INPUT_SCALE: f64 = 0.15;

/// Floor applied to predictor outputs before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Acc,
    Params,
    Macs,
    Latency,
    AccDenoised,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Acc, Head::Params, Head::Macs, Head::Latency, Head::AccDenoised];
    pub const GUIDES: [Head; 4] = [Head::Acc, Head::Params, Head::Macs, Head::Latency];

    pub fn is_noisy(self) -> bool {
        self != Head::AccDenoised
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Acc => "acc",
            Head::Params => "params",
            Head::Macs => "macs",
            Head::Latency => "latency",
            Head::AccDenoised => "acc_denoised",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown predictor head '{s}'")))
    }
}

/// Regression target of `head` for a record.
pub fn satisfaction_target(head: Head, obj: &Objectives, norm: &NormStats) -> f64 {
    match head {
        Head::Acc | Head::AccDenoised => obj.accuracy,
        Head::Params => 1.0 - norm.params.normalize(obj.params as f64),
        Head::Macs => 1.0 - norm.macs.normalize(obj.macs as f64),
        Head::Latency => 1.0 - norm.latency_ms.normalize(obj.latency_ms),
    }
}

/// Fixed, seeded two-layer map of the prototype centroid:
/// `tanh(W2 tanh(W1 mean(prototypes) + b1) + b2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEncoder {
    pub seed: u64,
    pub d_task: usize,
    pub hidden: usize,
    pub d_embed: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl DatasetEncoder {
    pub fn new(seed: u64, d_task: usize, d_embed: usize) -> Self {
        let hidden = d_embed;
        let mut rng = seed::rng(seed, &[stream::ENCODER]);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
        };
        let w1 = gauss(d_task * hidden, ENCODER_INPUT_SCALE);
        let b1 = gauss(hidden, 0.1);
        let w2 = gauss(hidden * d_embed, 1.5 / (hidden as f64).sqrt());
        let b2 = gauss(d_embed, 0.1);
        Self {
            seed,
            d_task,
            hidden,
            d_embed,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn encode(&self, task: &TaskDescriptor) -> Vec<f64> {
        let m = task.centroid();
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| (self.b1[j] + (0..self.d_task).map(|i| m[i] * self.w1[i * self.hidden + j]).sum::<f64>()).tanh())
            .collect();
        (0..self.d_embed)
            .map(|k| (self.b2[k] + (0..self.hidden).map(|j| h[j] * self.w2[j * self.d_embed + k]).sum::<f64>()).tanh())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub d_embed: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            blocks: 2,
            time_dim: 32,
            d_embed: 64,
        }
    }
}

/// One head: token trunk, dataset conditioning, pooled MLP, sigmoid.
#[derive(Clone, Debug)]
pub struct Predictor<S> {
    pub head: Head,
    pub space: SearchSpace,
    pub config: PredictorConfig,
    pub store: ParamStore<S>,
    embed: TokenEmbedding,
    cond: Linear,
    trunk: Trunk,
    hidden: Linear,
    out: Linear,
    mask: Arc<AttentionMask>,
}

impl<S: Scalar> Predictor<S> {
    pub fn new(head: Head, space: SearchSpace, config: PredictorConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!("d_model {} not divisible by {} heads", config.d_model, config.heads)));
        }
        let mut rng = seed::rng(seed, &[stream::INIT, head.index() as u64]);
        let mut store = ParamStore::new();
        let (rows, cols) = space.shape();
        let d = config.d_model;
        let time = head.is_noisy().then_some(config.time_dim);
        let embed = TokenEmbedding::new(&mut store, "embed", rows, cols, d, time, &mut rng);
        let cond = Linear::new(&mut store, "cond", config.d_embed, d, true, &mut rng);
        let trunk = Trunk::new(&mut store, "trunk", d, config.heads, config.blocks, &mut rng);
        let hidden = Linear::new(&mut store, "hidden", d, d, true, &mut rng);
        let out = Linear::new(&mut store, "out", d, 1, true, &mut rng);
        Ok(Self {
            head,
            space,
            config,
            store,
            embed,
            cond,
            trunk,
            hidden,
            out,
            mask: space.attention_mask(),
        })
    }

    /// `x` is `(batch * rows) x cols`, `dtilde` is `batch x d_embed`; returns
    /// `batch x 1` values in (0, 1). `ts` is ignored by the denoised head.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, ts: &[f64], dtilde: Var) -> Result<Var> {
        let tok = self.embed.forward(g, p, x, self.head.is_noisy().then_some(ts))?;
        let c = self.cond.forward(g, p, dtilde)?;
        let c = g.repeat_rows(c, self.space.rows())?;
        let h = g.add(tok, c)?;
        let h = self.trunk.forward(g, p, h, &self.mask)?;
        let pooled = g.segment_mean(h, self.space.rows())?;
        let z = self.hidden.forward(g, p, pooled)?;
        let z = g.gelu(z)?;
        let z = self.out.forward(g, p, z)?;
        g.sigmoid(z)
    }

    fn inputs(&self, g: &mut Graph<S>, x: &Tensor<S>, dtilde: &[f64]) -> Result<(Var, Var)> {
        let batch = x.rows() / self.space.rows();
        let d = self.config.d_embed;
        let dt: Vec<S> = if dtilde.len() == d {
            (0..batch).flat_map(|_| dtilde.iter().map(|&v| S::lit(v))).collect()
        } else if dtilde.len() == batch * d {
            dtilde.iter().map(|&v| S::lit(v)).collect()
        } else {
            return Err(Error::Shape {
                op: "predictor",
                detail: format!("dataset embedding of length {} for batch {batch} x {d}", dtilde.len()),
            });
        };
        let xv = g.leaf(x.clone());
        let dv = g.leaf(Tensor::matrix(batch, d, dt)?);
        Ok((xv, dv))
    }

    /// Predictions for a batch. `dtilde` is one shared embedding or one per element.
    pub fn predict(&self, x: &Tensor<S>, ts: &[f64], dtilde: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let (xv, dv) = self.inputs(&mut g, x, dtilde)?;
        let y = self.forward(&mut g, &p, xv, ts, dv)?;
        Ok(g.value(y).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Predictions and `∇_x Σ log max(f, LOG_FLOOR)`; chains do not
    /// interact, so row block `b` of the gradient belongs to element `b`.
    pub fn log_grad(&self, x: &Tensor<S>, ts: &[f64], dtilde: &[f64]) -> Result<(Vec<f64>, Tensor<S>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let (xv, dv) = self.inputs(&mut g, x, dtilde)?;
        let y = self.forward(&mut g, &p, xv, ts, dv)?;
        let values = g.value(y).data().iter().map(|v| v.as_f64()).collect();
        let y = g.clamp_min(y, S::lit(LOG_FLOOR))?;
        let l = g.log(y)?;
        let total = g.sum(l)?;
        let grads = g.backward(total)?;
        Ok((values, grads.wrt(&g, xv)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub holdout: f64,
    /// Noisy heads are evaluated at `t ~ U(0, eval_t_max]`.
    pub eval_t_max: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 2e-3,
            min_lr: 1e-5,
            weight_decay: 5e-3,
            clip_norm: 1.0,
            holdout: 0.1,
            eval_t_max: 0.25,
            seed: 0,
        }
    }
}

/// Held-out Spearman correlation per head.
pub type SpearmanReport = std::collections::BTreeMap<Head, f64>;

/// Training view of a meta-dataset: encodings, targets, and a split.
pub struct TrainingData {
    pub space: SearchSpace,
    pub onehots: Vec<Vec<f64>>,
    pub embeddings: Vec<Arc<Vec<f64>>>,
    pub targets: HashMap<Head, Vec<f64>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrainingData {
    pub fn new(meta: &MetaDataset, encoder: &DatasetEncoder, holdout: f64, seed: u64) -> Result<Self> {
        if meta.is_empty() {
            return Err(Error::Empty("predictor training set"));
        }
        let norm = meta.norm_stats()?;
        let embeddings: Vec<Arc<Vec<f64>>> = meta
            .records
            .par_iter()
            .map(|r| Arc::new(encoder.encode(&meta.task(r.task_id))))
            .collect();
        let onehots = meta.records.iter().map(|r| r.arch.to_continuous().values).collect();
        let targets = Head::ALL
            .iter()
            .map(|&h| (h, meta.records.iter().map(|r| satisfaction_target(h, &r.objectives, norm)).collect()))
            .collect();
        let mut idx: Vec<usize> = (0..meta.len()).collect();
        idx.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
        let n_test = ((meta.len() as f64 * holdout).round() as usize).min(meta.len().saturating_sub(1));
        let test = idx[..n_test].to_vec();
        let train = idx[n_test..].to_vec();
        Ok(Self {
            space: meta.space(),
            onehots,
            embeddings,
            targets,
            train,
            test,
        })
    }

    /// Stacked inputs for records `idx`, noised at the given times (t = 0 keeps one-hots).
    fn batch<S: Scalar, R: Rng + ?Sized>(&self, idx: &[usize], ts: &[f64], sde: &SdeSchedule, rng: &mut R) -> Result<(Tensor<S>, Vec<f64>)> {
        let (rows, cols) = self.space.shape();
        let mut xs = Vec::with_capacity(idx.len() * rows * cols);
        let mut dt = Vec::with_capacity(idx.len() * self.embeddings[0].len());
        for (&i, &t) in idx.iter().zip(ts) {
            let sigma = if t > 0.0 { sde.sigma(t) } else { 0.0 };
            xs.extend(self.onehots[i].iter().map(|&v| {
                let e: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                S::lit(v + sigma * e)
            }));
            dt.extend_from_slice(&self.embeddings[i]);
        }
        Ok((Tensor::matrix(idx.len() * rows, cols, xs)?, dt))
    }
}

/// Trains one head by squared error to its satisfaction target.
pub fn train_head<S: Scalar>(pred: &mut Predictor<S>, data: &TrainingData, sde: &SdeSchedule, cfg: &PredictorTrainConfig) -> Result<Vec<f64>> {
    if data.train.is_empty() {
        return Err(Error::Empty("predictor training split"));
    }
    let head = pred.head;
    let mut rng = seed::rng(cfg.seed, &[stream::TRAIN, head as u64]);
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        total_steps: cfg.steps,
    };
    let targets = &data.targets[&head];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| data.train[rng.random_range(0..data.train.len())]).collect();
        let ts: Vec<f64> = idx
            .iter()
            .map(|_| if head.is_noisy() { sde.sample_train_time(&mut rng) } else { 0.0 })
            .collect();
        let (x, dt) = data.batch::<S, _>(&idx, &ts, sde, &mut rng)?;
        let y: Vec<S> = idx.iter().map(|&i| S::lit(targets[i])).collect();
        let diverged = |e: Error| Error::Diverged {
            step,
            detail: format!("{} head: {e}", head.name()),
        };
        let mut g = Graph::new();
        let p = pred.store.bind(&mut g);
        let (xv, dv) = pred.inputs(&mut g, &x, &dt).map_err(diverged)?;
        let out = pred.forward(&mut g, &p, xv, &ts, dv).map_err(diverged)?;
        let yv = g.leaf(Tensor::matrix(idx.len(), 1, y)?);
        let d = g.sub(out, yv).map_err(diverged)?;
        let sq = g.square(d).map_err(diverged)?;
        let loss = g.mean(sq).map_err(diverged)?;
        let value = g.value(loss).item().expect("scalar").as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{} head loss {value}", head.name()),
            });
        }
        let grads = g.backward(loss).map_err(diverged)?;
        let mut grads = pred.store.collect_grads(&g, &p, &grads);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut pred.store, &grads, sched.lr(step))?;
        losses.push(value);
    }
    Ok(losses)
}

/// Held-out Spearman of one head. Noisy heads see inputs noised at
/// `t ~ U(0, eval_t_max]`.
pub fn evaluate_head<S: Scalar>(pred: &Predictor<S>, data: &TrainingData, sde: &SdeSchedule, cfg: &PredictorTrainConfig) -> Result<f64> {
    if data.test.len() < 2 {
        return Err(Error::Empty("held-out split"));
    }
    let mut rng = seed::rng(cfg.seed, &[stream::SPLIT, pred.head as u64]);
    let mut preds = Vec::with_capacity(data.test.len());
    for chunk in data.test.chunks(64) {
        let ts: Vec<f64> = chunk
            .iter()
            .map(|_| {
                if pred.head.is_noisy() {
                    cfg.eval_t_max * (1.0 - rng.random::<f64>())
                } else {
                    0.0
                }
            })
            .collect();
        let (x, dt) = data.batch::<S, _>(chunk, &ts, sde, &mut rng)?;
        preds.extend(pred.predict(&x, &ts, &dt)?);
    }
    let truth: Vec<f64> = data.test.iter().map(|&i| data.targets[&pred.head][i]).collect();
    stats::spearman(&preds, &truth)
}

/// The five heads plus everything needed to condition and normalize them.
#[derive(Clone, Debug)]
pub struct PredictorSet<S> {
    pub space: SearchSpace,
    pub config: PredictorConfig,
    pub sde: SdeSchedule,
    pub encoder: DatasetEncoder,
    pub norm: NormStats,
    pub heads: Vec<Predictor<S>>,
    pub report: SpearmanReport,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    space: SearchSpace,
    config: PredictorConfig,
    sde: SdeSchedule,
    encoder_seed: u64,
    d_task: usize,
    norm: NormStats,
    report: SpearmanReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl<S: Scalar> PredictorSet<S> {
    pub fn get(&self, head: Head) -> &Predictor<S> {
        &self.heads[head.index()]
    }

    pub fn encode(&self, task: &TaskDescriptor) -> Vec<f64> {
        self.encoder.encode(task)
    }

    /// Predicted denoised accuracy of discrete architectures.
    pub fn predict_accuracy(&self, archs: &[Architecture], dtilde: &[f64]) -> Result<Vec<f64>> {
        let (rows, cols) = self.space.shape();
        let mut out = Vec::with_capacity(archs.len());
        for chunk in archs.chunks(64) {
            let xs: Vec<S> = chunk.iter().flat_map(|a| a.to_continuous().values).map(S::lit).collect();
            let x = Tensor::matrix(chunk.len() * rows, cols, xs)?;
            out.extend(self.get(Head::AccDenoised).predict(&x, &vec![0.0; chunk.len()], dtilde)?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &self.heads {
            numeric::save(&dir.join(format!("pred_{}.mgn", p.head.name())), &p.store)?;
        }
        let meta = SetMeta {
            space: self.space,
            config: self.config,
            sde: self.sde,
            encoder_seed: self.encoder.seed,
            d_task: self.encoder.d_task,
            norm: self.norm.clone(),
            report: self.report.clone(),
            provenance: self.provenance.clone(),
        };
        std::fs::write(dir.join("predictors.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SetMeta = serde_json::from_slice(&std::fs::read(dir.join("predictors.json"))?)?;
        let heads = Head::ALL
            .iter()
            .map(|&h| {
                let mut p = Predictor::new(h, meta.space, meta.config, 0)?;
                p.store.load_from(numeric::load(&dir.join(format!("pred_{}.mgn", h.name())))?)?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            space: meta.space,
            config: meta.config,
            sde: meta.sde,
            encoder: DatasetEncoder::new(meta.encoder_seed, meta.d_task, meta.config.d_embed),
            norm: meta.norm,
            heads,
            report: meta.report,
            provenance: meta.provenance,
        })
    }
}

/// Trains all five heads (in parallel, each with its own seed stream) and
/// reports held-out Spearman per head.
pub fn train_predictors<S: Scalar>(
    meta: &MetaDataset,
    sde: &SdeSchedule,
    config: PredictorConfig,
    cfg: &PredictorTrainConfig,
) -> Result<PredictorSet<S>> {
    let encoder = DatasetEncoder::new(cfg.seed, meta.header.d_task, config.d_embed);
    let data = TrainingData::new(meta, &encoder, cfg.holdout, cfg.seed)?;
    let trained = Head::ALL
        .par_iter()
        .map(|&h| {
            let mut p = Predictor::new(h, meta.space(), config, cfg.seed)?;
            train_head(&mut p, &data, sde, cfg)?;
            let rho = if data.test.len() >= 2 { evaluate_head(&p, &data, sde, cfg)? } else { f64::NAN };
            Ok((p, rho))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = SpearmanReport::new();
    let mut heads = Vec::with_capacity(trained.len());
    for (p, rho) in trained {
        report.insert(p.head, rho);
        heads.push(p);
    }
    Ok(PredictorSet {
        space: meta.space(),
        config,
        sde: *sde,
        encoder,
        norm: meta.norm_stats()?.clone(),
        heads,
        report,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::RankNormalizer;

    fn norm() -> NormStats {
        let pop: Vec<f64> = (1..=10).map(f64::from).collect();
        let r = RankNormalizer::from_population(&pop).unwrap();
        NormStats {
            params: r.clone(),
            macs: r.clone(),
            latency_ms: r,
        }
    }

    #[test]
    fn targets_at_endpoints() {
        let n = norm();
        let obj = |v: f64| Objectives {
            accuracy: 0.73,
            params: v as u64,
            macs: v as u64,
            latency_ms: v,
        };
        assert_eq!(satisfaction_target(Head::Macs, &obj(1.0), &n), 1.0);
        assert_eq!(satisfaction_target(Head::Latency, &obj(10.0), &n), 0.0);
        assert_eq!(satisfaction_target(Head::Acc, &obj(5.0), &n), 0.73);
        assert!(satisfaction_target(Head::Params, &obj(3.0), &n) > satisfaction_target(Head::Params, &obj(4.0), &n));
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let enc = DatasetEncoder::new(1, 32, 64);
        let t = TaskDescriptor::generate(2, 3, 32);
        let mut p = t.clone();
        p.prototypes.reverse();
        let (a, b) = (enc.encode(&t), enc.encode(&p));
        assert_eq!(a.len(), 64);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_names_round_trip() {
        for h in Head::ALL {
            assert_eq!(h.name().parse::<Head>().unwrap(), h);
        }
        assert!("bogus".parse::<Head>().is_err());
    }
}
