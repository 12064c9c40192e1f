use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mogen_core::meta::{self, MetaDataset, Provenance};
use mogen_core::numeric::Scalar;
use mogen_core::oracle::{Oracle, TaskDescriptor};
use mogen_core::pareto::{self, batch_metrics, score_batch, select, FrontSelection, Metric, Pick, ScoredArch};
use mogen_core::predictors::{train_predictors, PredictorSet};
use mogen_core::sampler::{Batch, Generator, PredictorGuide, Regime};
use mogen_core::score::{train_score, ScoreNet};
use mogen_core::tuner::{tune_scales, FrontObjective, ScaleBounds};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::files::{self, BatchHeader, EvalRow, EvaluationFile, SelectionFile, TasksFile, TuneFile};
use crate::{Command, Common, Mode};

const META_FILE: &str = "meta.jsonl";
const TASKS_FILE: &str = "tasks.json";
const SCORE_FILE: &str = "score.mgn";
const PREDICTORS_DIR: &str = "predictors";

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    seed: u64,
    seed_given: bool,
    out: Option<PathBuf>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RunConfig, common: Common) -> Self {
        Self {
            cfg,
            dir: cfg.run_dir(),
            seed: common.seed.unwrap_or(cfg.seed),
            seed_given: common.seed.is_some(),
            out: common.out,
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.cfg.hash(),
            seed: self.seed,
        }
    }

    fn path(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.dir.join(default))
    }

    fn out(&self, default: &str) -> PathBuf {
        self.path(self.out.clone(), default)
    }

    fn meta(&self, given: Option<PathBuf>) -> Result<MetaDataset, CliError> {
        let path = self.path(given, META_FILE);
        files::require(&path, "meta-dataset", "run `mogen metadataset` first")?;
        let m = MetaDataset::read(&path)?;
        self.same_space(m.space(), &path)?;
        Ok(m)
    }

    fn score<S: Scalar>(&self, given: Option<PathBuf>) -> Result<ScoreNet<S>, CliError> {
        let path = self.path(given, SCORE_FILE);
        files::require(&path, "score network", "run `mogen train-score` first")?;
        let net = ScoreNet::load(&path)?;
        self.same_space(net.space, &path)?;
        Ok(net)
    }

    fn predictors<S: Scalar>(&self, given: Option<PathBuf>) -> Result<PredictorSet<S>, CliError> {
        let dir = self.path(given, PREDICTORS_DIR);
        files::require(&dir.join("predictors.json"), "predictors", "run `mogen train-predictors` first")?;
        let p = PredictorSet::load(&dir)?;
        self.same_space(p.space, &dir)?;
        Ok(p)
    }

    fn tasks(&self, given: Option<PathBuf>) -> Result<Vec<TaskDescriptor>, CliError> {
        let path = self.path(given, TASKS_FILE);
        let f: TasksFile = files::read_json(&path, "task list", "run `mogen metadataset` first")?;
        if f.tasks.is_empty() {
            return Err(CliError::Config(format!("{} lists no tasks", path.display())));
        }
        Ok(f.tasks)
    }

    fn same_space(&self, found: mogen_core::space::SearchSpace, path: &Path) -> Result<(), CliError> {
        if found == self.cfg.space {
            Ok(())
        } else {
            Err(CliError::Config(format!("{} is for {found}, but the run uses {}", path.display(), self.cfg.space)))
        }
    }
}

pub fn dispatch<S: Scalar>(cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    match command {
        Command::Metadataset { n, tasks_out, common } => metadataset(&Ctx::new(cfg, common), n, tasks_out),
        Command::TrainScore { meta, steps, common } => train_score_cmd::<S>(&Ctx::new(cfg, common), meta, steps),
        Command::TrainPredictors { meta, steps, common } => train_predictors_cmd::<S>(&Ctx::new(cfg, common), meta, steps),
        Command::Tune {
            regime,
            budget,
            tasks,
            score,
            predictors,
            common,
        } => tune::<S>(&Ctx::new(cfg, common), regime, budget, tasks, score, predictors),
        Command::Generate {
            mode,
            task,
            task_index,
            scales,
            chains,
            score,
            predictors,
            common,
        } => generate::<S>(&Ctx::new(cfg, common), mode, task, task_index, &scales, chains, score, predictors),
        Command::Select { batch, predictors, common } => select_cmd::<S>(&Ctx::new(cfg, common), batch, predictors),
        Command::Evaluate {
            batch,
            baseline,
            meta,
            predictors,
            common,
        } => evaluate::<S>(&Ctx::new(cfg, common), batch, baseline, meta, predictors),
        Command::Report {
            batch,
            meta,
            predictors,
            common,
        } => report::<S>(&Ctx::new(cfg, common), batch, meta, predictors),
    }
}

fn metadataset(ctx: &Ctx, n: Option<usize>, tasks_out: Option<PathBuf>) -> Result<(), CliError> {
    let n = n.unwrap_or_else(|| ctx.cfg.meta_size());
    let mut m = meta::build(&ctx.cfg.build_config(n, ctx.seed))?;
    m.header.provenance = Some(ctx.provenance());
    let path = ctx.out(META_FILE);
    files::ensure_parent(&path)?;
    m.write(&path)?;
    let tasks = TasksFile {
        provenance: ctx.provenance(),
        tasks: (0..ctx.cfg.meta.held_out_tasks).map(|k| m.held_out_task(k)).collect(),
    };
    let tasks_path = tasks_out.unwrap_or_else(|| ctx.dir.join(TASKS_FILE));
    files::write_json(&tasks_path, &tasks)?;
    let s = m.summary()?;
    println!("wrote {} records to {}", m.len(), path.display());
    println!("wrote {} held-out tasks to {}", tasks.tasks.len(), tasks_path.display());
    println!(
        "accuracy mean {:.4} std {:.4}; params mean {:.0}; macs mean {:.0}; latency mean {:.3} ms",
        s.accuracy.mean, s.accuracy.std, s.params.mean, s.macs.mean, s.latency_ms.mean
    );
    Ok(())
}

fn train_score_cmd<S: Scalar>(ctx: &Ctx, meta: Option<PathBuf>, steps: Option<usize>) -> Result<(), CliError> {
    let m = ctx.meta(meta)?;
    let mut train = ctx.cfg.score.train;
    if let Some(s) = steps {
        train.steps = s;
    }
    if ctx.seed_given {
        train.seed = ctx.seed;
    }
    let mut net = ScoreNet::<S>::new(ctx.cfg.space, ctx.cfg.score.model, ctx.cfg.sde, ctx.seed)?;
    let archs: Vec<_> = m.records.iter().map(|r| r.arch.clone()).collect();
    let trace = train_score(&archs, &mut net, &train)?;
    net.provenance = Some(ctx.provenance());
    let path = ctx.out(SCORE_FILE);
    files::ensure_parent(&path)?;
    net.save(&path)?;
    let k = (trace.losses.len() / 10).max(1);
    let n = trace.losses.len();
    println!(
        "trained {} steps; loss {:.4} (first {k}) -> {:.4} (last {k})",
        n,
        trace.window_mean(0..k.min(n)),
        trace.window_mean(n - k.min(n)..n)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn train_predictors_cmd<S: Scalar>(ctx: &Ctx, meta: Option<PathBuf>, steps: Option<usize>) -> Result<(), CliError> {
    let m = ctx.meta(meta)?;
    let mut train = ctx.cfg.predictors.train;
    if let Some(s) = steps {
        train.steps = s;
    }
    if ctx.seed_given {
        train.seed = ctx.seed;
    }
    let mut set = train_predictors::<S>(&m, &ctx.cfg.sde, ctx.cfg.predictors.model, &train)?;
    set.provenance = Some(ctx.provenance());
    let dir = ctx.out(PREDICTORS_DIR);
    set.save(&dir)?;
    for (head, rho) in &set.report {
        println!("{:<12} spearman {rho:.3}", head.name());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn tune<S: Scalar>(
    ctx: &Ctx,
    regime: Regime,
    budget: Option<usize>,
    tasks: Option<PathBuf>,
    score: Option<PathBuf>,
    predictors: Option<PathBuf>,
) -> Result<(), CliError> {
    let net = ctx.score::<S>(score)?;
    let preds = ctx.predictors::<S>(predictors)?;
    let all = ctx.tasks(tasks)?;
    let mut search = ctx.cfg.tuner.search.clone();
    if let Some(b) = budget {
        search.budget = b;
    }
    if ctx.seed_given {
        search.seed = ctx.seed;
    }
    let objective = FrontObjective {
        net: &net,
        preds: &preds,
        tasks: all.into_iter().take(ctx.cfg.tuner.tasks).collect(),
        latency: ctx.cfg.meta.latency_model,
        protocol: ctx.cfg.meta.latency_protocol,
        units: ctx.cfg.sampler.units,
        seed: ctx.seed,
    };
    let result = tune_scales(&objective, &ScaleBounds::published(regime), &search)?;
    let path = ctx.out(&format!("scales_{}.json", regime_name(regime)));
    let b = result.best;
    println!(
        "best trial {} objective {:.4}: k_acc {:.1} k_params {:.1} k_macs {:.1} k_lat {:.1}",
        result.best_trial, result.best_objective, b.k_acc, b.k_params, b.k_macs, b.k_lat
    );
    files::write_json(
        &path,
        &TuneFile {
            provenance: ctx.provenance(),
            regime,
            scales: b,
            result,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Efficient => "efficient",
        Regime::Accurate => "accurate",
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Diffusionnag => "diffusionnag",
        Mode::Stretched => "stretched",
    }
}

#[allow(clippy::too_many_arguments)]
fn generate<S: Scalar>(
    ctx: &Ctx,
    mode: Mode,
    task: Option<PathBuf>,
    task_index: usize,
    scale_files: &[PathBuf],
    chains: Option<usize>,
    score: Option<PathBuf>,
    predictors: Option<PathBuf>,
) -> Result<(), CliError> {
    let tasks = ctx.tasks(task)?;
    let task = tasks
        .get(task_index)
        .cloned()
        .ok_or_else(|| CliError::Config(format!("task index {task_index} out of range (0..{})", tasks.len())))?;
    let net = ctx.score::<S>(score)?;
    let preds = ctx.predictors::<S>(predictors)?;
    let guide = PredictorGuide::new(&preds, &task);
    let mut gen = Generator::new(&net, Some(&guide));
    gen.chunk = ctx.cfg.sampler.chunk;
    gen.units = ctx.cfg.sampler.units;
    let mut scales = BTreeMap::new();
    let batch = match mode {
        Mode::Diffusionnag => {
            if !scale_files.is_empty() {
                return Err(CliError::Config("--scales applies to stretched generation only".into()));
            }
            let s = ctx.cfg.sampler.baseline_scales;
            scales.insert("single".to_string(), s);
            gen.generate_batch(&s, chains.unwrap_or(ctx.cfg.sampler.baseline_batch), ctx.seed)?
        }
        Mode::Stretched => {
            let presets = files::read_presets(scale_files, ctx.cfg.presets())?;
            scales.insert("efficient".to_string(), presets.efficient);
            scales.insert("accurate".to_string(), presets.accurate);
            gen.generate_stretched_sized(&presets, chains.unwrap_or(ctx.cfg.sampler.phase_batch), ctx.seed)?
        }
    };
    let header = BatchHeader {
        provenance: ctx.provenance(),
        space: ctx.cfg.space,
        mode,
        task,
        scales,
        size: batch.len(),
    };
    let path = ctx.out(&format!("batch_{}.jsonl", mode_name(mode)));
    files::write_batch(&path, &header, &batch)?;
    let valid = batch.items.iter().filter(|g| g.strict_valid).count();
    println!("generated {} architectures ({valid} strictly valid)", batch.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn scored<S: Scalar>(ctx: &Ctx, batch: &Batch, task: &TaskDescriptor, preds: &PredictorSet<S>, oracle: Option<&Oracle>) -> Result<Vec<ScoredArch>, CliError> {
    let lat = (&ctx.cfg.meta.latency_model, &ctx.cfg.meta.latency_protocol);
    Ok(score_batch(batch, preds, task, lat, ctx.seed, oracle)?)
}

fn selections(scored: &[ScoredArch]) -> Result<BTreeMap<Metric, FrontSelection>, CliError> {
    Metric::ALL.into_iter().map(|m| Ok((m, select(scored, m)?))).collect()
}

fn select_cmd<S: Scalar>(ctx: &Ctx, batch: Option<PathBuf>, predictors: Option<PathBuf>) -> Result<(), CliError> {
    let (header, batch) = files::read_batch(&ctx.path(batch, "batch_stretched.jsonl"))?;
    let preds = ctx.predictors::<S>(predictors)?;
    let fronts = selections(&scored(ctx, &batch, &header.task, &preds, None)?)?;
    let picked: std::collections::HashSet<&str> = fronts.values().flat_map(|f| Pick::ALL.map(|p| f.pick(p).hash.as_str())).collect();
    let file = SelectionFile {
        provenance: ctx.provenance(),
        task_id: header.task.task_id,
        trained_archs: picked.len(),
        fronts: fronts.clone(),
    };
    for (m, f) in &fronts {
        let line: Vec<String> = Pick::ALL
            .iter()
            .map(|&p| format!("{} {:.4} @ {}", p.name(), f.pick(p).predicted_acc, fmt_metric(*m, f.pick(p))))
            .collect();
        println!("{:<8} front {:>3}: {}", m.name(), f.front.len(), line.join(", "));
    }
    let path = ctx.out("selection.json");
    files::write_json(&path, &file)?;
    println!("{} distinct architectures to train; wrote {}", file.trained_archs, path.display());
    Ok(())
}

fn fmt_metric(m: Metric, s: &ScoredArch) -> String {
    match m {
        Metric::Params => format!("{:.3}M params", s.params as f64 / 1e6),
        Metric::Macs => format!("{:.2}M MACs", s.macs as f64 / 1e6),
        Metric::Latency => format!("{:.3} ms", s.latency_ms),
    }
}

fn pct_change(new: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (new - base) / base
    }
}

fn row(method: String, metric: Option<Metric>, s: &ScoredArch, base: Option<&ScoredArch>) -> EvalRow {
    let oracle_acc = s.oracle_acc.unwrap_or(f64::NAN);
    EvalRow {
        method,
        metric,
        arch_hash: s.hash.clone(),
        predicted_acc: s.predicted_acc,
        oracle_acc,
        params: s.params,
        macs: s.macs,
        latency_ms: s.latency_ms,
        delta_pct: base.map(|b| {
            BTreeMap::from([
                ("oracle_acc".to_string(), pct_change(oracle_acc, b.oracle_acc.unwrap_or(f64::NAN))),
                ("params".to_string(), pct_change(s.params as f64, b.params as f64)),
                ("macs".to_string(), pct_change(s.macs as f64, b.macs as f64)),
                ("latency_ms".to_string(), pct_change(s.latency_ms, b.latency_ms)),
            ])
        }),
    }
}

fn evaluate<S: Scalar>(
    ctx: &Ctx,
    batch: Option<PathBuf>,
    baseline: Option<PathBuf>,
    meta: Option<PathBuf>,
    predictors: Option<PathBuf>,
) -> Result<(), CliError> {
    let (header, batch) = files::read_batch(&ctx.path(batch, "batch_stretched.jsonl"))?;
    let base_path = ctx.path(baseline, "batch_diffusionnag.jsonl");
    files::require(&base_path, "baseline batch", "run `mogen generate --mode diffusionnag` first")?;
    let (base_header, base_batch) = files::read_batch(&base_path)?;
    if base_header.task != header.task {
        return Err(CliError::Config("baseline and batch were generated for different tasks".into()));
    }
    let m = ctx.meta(meta)?;
    let preds = ctx.predictors::<S>(predictors)?;
    let oracle = m.oracle();
    let training = m.arch_hashes();
    let task = &header.task;

    let base_scored = scored(ctx, &base_batch, task, &preds, Some(&oracle))?;
    let base = select(&base_scored, Metric::Params)?.pick(Pick::Acc).clone();
    let fronts = selections(&scored(ctx, &batch, task, &preds, Some(&oracle))?)?;

    let mut rows = vec![row("diffusionnag-acc".into(), None, &base, None)];
    for (metric, f) in &fronts {
        for p in [Pick::Eff, Pick::Bal, Pick::Acc] {
            rows.push(row(format!("stretched-{}", p.name()), Some(*metric), f.pick(p), Some(&base)));
        }
    }
    let generation = BTreeMap::from([
        ("diffusionnag".to_string(), batch_metrics(&base_batch, &training)?),
        ("stretched".to_string(), batch_metrics(&batch, &training)?),
    ]);
    let file = EvaluationFile {
        provenance: ctx.provenance(),
        task_id: task.task_id,
        rows,
        generation,
    };
    let path = ctx.out("evaluation.json");
    files::write_json(&path, &file)?;
    let md = markdown(&file);
    std::fs::write(path.with_extension("md"), &md).map_err(CliError::io("writing evaluation table"))?;
    print!("{md}");
    println!("wrote {}", path.display());
    Ok(())
}

fn markdown(e: &EvaluationFile) -> String {
    let mut s = format!("# Evaluation, task {}\n\n", e.task_id);
    s.push_str("| method | metric | oracle acc | params | MACs | latency ms | Δacc % | Δmetric % |\n");
    s.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
    for r in &e.rows {
        let metric = r.metric.map(|m| m.name()).unwrap_or("-");
        let (da, dm) = match (&r.delta_pct, r.metric) {
            (Some(d), Some(m)) => {
                let key = match m {
                    Metric::Params => "params",
                    Metric::Macs => "macs",
                    Metric::Latency => "latency_ms",
                };
                (format!("{:+.2}", d["oracle_acc"]), format!("{:+.2}", d[key]))
            }
            _ => ("-".into(), "-".into()),
        };
        s.push_str(&format!(
            "| {} | {metric} | {:.4} | {} | {} | {:.3} | {da} | {dm} |\n",
            r.method, r.oracle_acc, r.params, r.macs, r.latency_ms
        ));
    }
    s.push_str("\n| batch | validity % | uniqueness % | novelty % |\n|---|---:|---:|---:|\n");
    for (name, g) in &e.generation {
        s.push_str(&format!("| {name} | {:.1} | {:.1} | {:.1} |\n", g.validity, g.uniqueness, g.novelty));
    }
    s
}

fn report<S: Scalar>(ctx: &Ctx, batch: Option<PathBuf>, meta: Option<PathBuf>, predictors: Option<PathBuf>) -> Result<(), CliError> {
    let (header, batch) = files::read_batch(&ctx.path(batch, "batch_stretched.jsonl"))?;
    let m = ctx.meta(meta)?;
    let preds = ctx.predictors::<S>(predictors)?;
    let oracle = m.oracle();
    let all = scored(ctx, &batch, &header.task, &preds, Some(&oracle))?;
    let dir = ctx.out("fronts");
    std::fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    for (metric, sel) in selections(&all)? {
        let path = dir.join(format!("front_{}.csv", metric.name()));
        let f = File::create(&path).map_err(CliError::io(format!("writing {}", path.display())))?;
        pareto::write_csv(BufWriter::new(f), &all, &sel)?;
        println!("wrote {} ({} on front)", path.display(), sel.front.len());
    }
    Ok(())
}
