//! End-to-end pipelines: pretraining the surrogate on a generated world,
//! training editors, and the variant/hyper-parameter studies built on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::{lifelong_run, Benchmark, EvalPoint, Metrics};
use crate::config::{RunConfig, Variant};
use crate::editor::Editor;
use crate::error::{Error, Result};
use crate::numerics::SeedStream;
use crate::surrogate::{pretrain_surrogate, token_accuracy, PretrainReport, SeqInput, Surrogate};
use crate::training::{LossReport, Trainer};

/// A generated benchmark with the surrogate pretrained on its base mapping.
pub struct World {
    pub bench: Benchmark,
    pub surrogate: Surrogate<f32>,
    pub report: PretrainReport,
}

/// The benchmark for `cfg` (seeded by `cfg.seed`).
pub fn generate_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let s = &cfg.surrogate;
    Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, cfg.seed)
}

/// Pretrains and freezes a surrogate on `bench`'s base mapping.
pub fn pretrain_on(cfg: &RunConfig, bench: &Benchmark) -> Result<(Surrogate<f32>, PretrainReport)> {
    let seeds = SeedStream::new(cfg.seed).derive("surrogate");
    let mut rng = seeds.rng("pretrain.eval");
    let eval: Vec<SeqInput<f32>> = bench.pretrain_set(&mut rng).iter().map(|q| q.to_input()).collect();
    let mut model = Surrogate::new(cfg.surrogate.clone(), &seeds)?;
    let report = pretrain_surrogate(&mut model, |rng, n| bench.pretrain_batch(rng, n), &eval, &cfg.pretrain, &seeds)?;
    Ok((model, report))
}

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    cfg.validate()?;
    let bench = generate_benchmark(cfg)?;
    let (surrogate, report) = pretrain_on(cfg, &bench)?;
    Ok(World { bench, surrogate, report })
}

/// Accuracy of the unedited surrogate on the edit targets of the stream.
pub fn base_target_accuracy(world: &World) -> Result<f64> {
    let qs: Vec<SeqInput<f32>> = world.bench.stream.iter().map(|r| r.edit.to_input()).collect();
    token_accuracy(&world.surrogate, &qs)
}

/// Trains an editor for `cfg` on `surrogate` and returns the checkpoint with
/// the lowest smoothed loss. With `dir`, the loss log and periodic
/// checkpoints are written there and an existing checkpoint is resumed.
pub fn train_editor(
    cfg: &RunConfig,
    surrogate: &Surrogate<f32>,
    bench: &Benchmark,
    dir: Option<&Path>,
) -> Result<(Editor<f32>, Vec<LossReport>)> {
    let seeds = SeedStream::new(cfg.seed);
    let editor = Editor::new(cfg.editor.clone(), &cfg.surrogate, &seeds.derive("editor"))?;
    let train_seeds = seeds.derive("train");
    let ckpt = dir.map(|d| d.join("checkpoint.json"));
    let mut trainer = match &ckpt {
        Some(p) if p.exists() => Trainer::resume(p, editor, surrogate, bench, cfg.training.clone(), train_seeds)?,
        _ => Trainer::new(editor, surrogate, bench, cfg.training.clone(), train_seeds)?,
    };
    trainer.run(dir)?;
    Ok((trainer.best_editor()?, trainer.log.clone()))
}

/// One trained-and-evaluated configuration of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub seed: u64,
    pub parameters: usize,
    pub metrics: Metrics,
}

impl StudyRow {
    pub const CSV_HEADER: &'static str = "label,seed,parameters,rel,t_gen,m_gen,t_loc,m_loc,avg,exact_rel,exact_t_gen,exact_m_gen";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.label, self.seed, self.parameters, self.metrics.csv_row())
    }
}

pub fn rows_csv(rows: &[StudyRow]) -> String {
    let mut s = format!("{}\n", StudyRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Metrics after the whole stream for an editor trained under `cfg`.
fn run_one(cfg: &RunConfig, surrogate: &Surrogate<f32>, bench: &Benchmark, label: String) -> Result<StudyRow> {
    let (editor, _) = train_editor(cfg, surrogate, bench, None)?;
    let (_, points): (_, Vec<EvalPoint>) = lifelong_run(&editor, surrogate, &bench.stream, &[bench.stream.len()])?;
    let metrics = points
        .last()
        .map(|p| p.metrics)
        .ok_or_else(|| Error::Contract("empty edit stream".into()))?;
    Ok(StudyRow {
        label,
        seed: cfg.seed,
        parameters: editor.parameter_count(),
        metrics,
    })
}

/// Trains and evaluates each variant once per editor seed.
pub fn ablate(cfg: &RunConfig, world: &World, variants: &[Variant], seeds: &[u64]) -> Result<Vec<StudyRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut c = cfg.clone();
            c.seed = seed;
            c.editor.variant = v;
            rows.push(run_one(&c, &world.surrogate, &world.bench, v.name().to_string())?);
        }
    }
    Ok(rows)
}

/// Hyper-parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "d_m")]
    DM,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "l_e")]
    LE,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::DM => "d_m",
            Axis::R => "r",
            Axis::K => "k",
            Axis::LE => "l_e",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d_m" => Ok(Axis::DM),
            "r" => Ok(Axis::R),
            "k" => Ok(Axis::K),
            "l_e" => Ok(Axis::LE),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (expected d_m, r, k or l_e)"))),
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Axis::DM => c.editor.d_m = value,
            Axis::R => c.editor.r = value,
            Axis::K => c.editor.k = value,
            Axis::LE => c.surrogate.l_e = value,
        }
        c.validate()?;
        Ok(c)
    }
}

/// Editor parameter count for `cfg` without training.
pub fn parameter_count(cfg: &RunConfig) -> Result<usize> {
    Ok(Editor::<f32>::new(cfg.editor.clone(), &cfg.surrogate, &SeedStream::new(cfg.seed))?.parameter_count())
}

/// Trains and evaluates one editor per (value, seed).
pub fn sweep(cfg: &RunConfig, world: &World, axis: Axis, values: &[usize], seeds: &[u64]) -> Result<Vec<StudyRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in values {
            let mut c = axis.apply(cfg, v)?;
            c.seed = seed;
            let mut surrogate = world.surrogate.clone();
            surrogate.set_edit_layer(c.surrogate.l_e)?;
            rows.push(run_one(&c, &surrogate, &world.bench, format!("{}={v}", axis.name()))?);
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation of the five-metric average per label,
/// in first-seen label order.
pub fn summarize(rows: &[StudyRow]) -> Vec<(String, f64, f64)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let v: Vec<f64> = rows.iter().filter(|r| r.label == l).map(|r| r.metrics.average()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            } else {
                0.0
            };
            (l.to_string(), mean, var.sqrt())
        })
        .collect()
}
