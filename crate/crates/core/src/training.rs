//! Editor training: editing losses on a fused batch of generated experts,
//! hard/soft routing losses, and the optimisation loop with checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{Benchmark, Pool, Query};
use crate::config::{TrainConfig, Variant};
use crate::editor::{span_rows, Editor, EditorHeader};
use crate::error::{Error, Result};
use crate::numerics::blob;
use crate::numerics::{grad_check, Coverage, GradCheckReport, Graph, OptimizerState, SeedStream, Tensor, Var};
use crate::params::Bound;
use crate::repository::Fusion;
use crate::routing::{similarity, similarity_matrix, similarity_rows};
use crate::scalar::Scalar;
use crate::surrogate::{HiddenStates, SeqInput, Surrogate};

pub const CHECKPOINT_KIND: &str = "training";

/// Aligned edit, generality and locality samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub edit: Vec<SeqInput<T>>,
    pub gen: Vec<SeqInput<T>>,
    pub loc: Vec<SeqInput<T>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.edit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edit.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.edit.len();
        if b == 0 || self.gen.len() != b || self.loc.len() != b {
            return Err(Error::Contract(format!(
                "batch sizes {} / {} / {}",
                b,
                self.gen.len(),
                self.loc.len()
            )));
        }
        if self.edit.iter().chain(&self.gen).chain(&self.loc).any(|s| s.output.is_empty()) {
            return Err(Error::Contract("training samples need a non-empty output span".into()));
        }
        Ok(())
    }

    /// The `3B` sequences stacked edit, generality, locality.
    pub fn stacked(&self) -> Vec<SeqInput<T>> {
        self.edit.iter().chain(&self.gen).chain(&self.loc).cloned().collect()
    }

    pub fn cast<U: Scalar>(&self) -> TrainBatch<U> {
        let c = |v: &Vec<SeqInput<T>>| {
            v.iter()
                .map(|s| SeqInput::new(s.visual.cast(), s.prompt.clone(), s.output.clone()))
                .collect()
        };
        TrainBatch {
            edit: c(&self.edit),
            gen: c(&self.gen),
            loc: c(&self.loc),
        }
    }
}

/// The per-step random choices: which member of each (edit, generality)
/// pair feeds each routing end, and the negative for the absolute loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shuffle {
    /// `true` picks the generality sample for the edit end.
    pub pi1: Vec<bool>,
    /// `true` picks the generality sample for the input end.
    pub pi2: Vec<bool>,
    /// Index into `[edit-end textual of the shuffled set | of the locality set]`.
    pub negatives: Vec<usize>,
}

impl Shuffle {
    pub fn sample(b: usize, rng: &mut impl Rng) -> Self {
        let pi1 = (0..b).map(|_| rng.random_bool(0.5)).collect();
        let pi2 = (0..b).map(|_| rng.random_bool(0.5)).collect();
        let negatives = (0..b)
            .map(|i| {
                let j = rng.random_range(0..2 * b - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        Self { pi1, pi2, negatives }
    }

    fn pick(pi: &[bool]) -> Vec<usize> {
        let b = pi.len();
        pi.iter().enumerate().map(|(i, &p)| if p { b + i } else { i }).collect()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub hr: f64,
    pub sr1: f64,
    pub sr2: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,rel,gen,loc,hr,sr1,sr2,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.rel, self.gen, self.loc, self.hr, self.sr1, self.sr2, self.total
        )
    }

    pub fn all_finite(&self) -> bool {
        [self.rel, self.gen, self.loc, self.hr, self.sr1, self.sr2, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rel: Var,
    pub gen: Var,
    pub loc: Var,
    pub hr: Var,
    pub sr1: Option<Var>,
    pub sr2: Option<Var>,
    pub total: Var,
}

/// Frozen-backbone quantities a step needs: layer activations of the
/// stacked batch and the unedited logits on the locality outputs.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub states: HiddenStates<T>,
    pub frozen_loc_logits: Tensor<T>,
}

pub fn prepare<T: Scalar>(surrogate: &Surrogate<T>, batch: &TrainBatch<T>) -> Result<Prepared<T>> {
    batch.validate()?;
    let l_e = surrogate.config().l_e;
    let states = surrogate.forward_to_layer(&batch.stacked(), l_e)?;
    let b = batch.len();
    let n = states.spans.len();
    let d = states.h.cols();
    let loc = HiddenStates {
        h: Tensor::new([b * n, d], states.h.data()[2 * b * n * d..].to_vec())?,
        spans: states.spans,
        count: b,
    };
    let logits = surrogate.forward_from_layer(&loc, l_e)?;
    let rows = states.spans.output_predictor_rows(b);
    let v = logits.cols();
    let mut sel = Vec::with_capacity(rows.len() * v);
    for &r in &rows {
        sel.extend_from_slice(logits.row(r));
    }
    Ok(Prepared {
        frozen_loc_logits: Tensor::new([rows.len(), v], sel)?,
        states,
    })
}

/// `-log softmax(scores)[positive]` for every row, summed over rows.
fn infonce_rows<T: Scalar>(g: &mut Graph<T>, scores: Var, positives: &[usize]) -> Result<Var> {
    let ce = g.cross_entropy(scores, positives)?;
    g.scale(ce, positives.len() as f64)
}

/// InfoNCE with temperature 1: `-log softmax(sim(alpha, c_j))` at the
/// candidate equal to `positive`. Similarities use `divisor`.
pub fn infonce(alpha: &[f64], positive: &[f64], candidates: &[Vec<f64>], divisor: f64) -> Result<f64> {
    let pos = candidates
        .iter()
        .position(|c| c.as_slice() == positive)
        .ok_or_else(|| Error::Contract("positive is not among the candidates".into()))?;
    let scores = candidates
        .iter()
        .map(|c| similarity(alpha, c, divisor))
        .collect::<Result<Vec<f64>>>()?;
    let lse = crate::numerics::graph::log_sum_exp(&scores);
    Ok(lse - scores[pos])
}

/// Hard-routing loss summed over the batch. All inputs are `B x D`:
/// input-end visual features of the shuffled generality set and of the
/// locality set, their sentinel features, and the edit-end visual features.
pub fn hard_routing_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen_bar: Var,
    gen_sentinel: Var,
    loc_bar: Var,
    loc_sentinel: Var,
    gen_hat: Var,
    divisor: f64,
) -> Result<Var> {
    let b = g.shape(gen_bar)[0];
    let sg = similarity_matrix(g, gen_bar, gen_hat, divisor)?;
    let tg = similarity_rows(g, gen_bar, gen_sentinel, divisor)?;
    let first = g.concat_cols(&[sg, tg])?;
    let targets: Vec<usize> = (0..b).collect();
    let first = infonce_rows(g, first, &targets)?;
    let sl = similarity_matrix(g, loc_bar, gen_hat, divisor)?;
    let tl = similarity_rows(g, loc_bar, loc_sentinel, divisor)?;
    let second = g.concat_cols(&[sl, tl])?;
    let second = infonce_rows(g, second, &vec![b; b])?;
    g.add(first, second)
}

/// Absolute and relative soft-routing losses summed over the batch.
/// `gen_bar` is `B x D` (input end), `gen_hat` and `loc_hat` are `B x D`
/// (edit end); `negatives[b]` indexes `[gen_hat | loc_hat]`.
pub fn soft_routing_losses<T: Scalar>(
    g: &mut Graph<T>,
    gen_bar: Var,
    gen_hat: Var,
    loc_hat: Var,
    negatives: &[usize],
    divisor: f64,
) -> Result<(Var, Var)> {
    let b = g.shape(gen_bar)[0];
    let pool = g.concat_rows(&[gen_hat, loc_hat])?;
    let pos = similarity_rows(g, gen_bar, gen_hat, divisor)?;
    let negs = g.gather_rows(pool, negatives)?;
    let neg = similarity_rows(g, gen_bar, negs, divisor)?;
    let lp = g.log_sigmoid(pos)?;
    let neg = g.scale(neg, -1.0)?;
    let ln = g.log_sigmoid(neg)?;
    let both = g.add(lp, ln)?;
    let s = g.sum(both)?;
    let sr1 = g.scale(s, -1.0)?;
    let scores = similarity_matrix(g, gen_bar, pool, divisor)?;
    let targets: Vec<usize> = (0..b).collect();
    let sr2 = infonce_rows(g, scores, &targets)?;
    Ok((sr1, sr2))
}

/// Builds every loss term of one step on `g`.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    eb: &Bound,
    editor: &Editor<T>,
    surrogate: &Surrogate<T>,
    prep: &Prepared<T>,
    batch: &TrainBatch<T>,
    shuffle: &Shuffle,
) -> Result<LossVars> {
    let b = batch.len();
    let spans = prep.states.spans;
    let n = spans.len();
    let count = 3 * b;
    let cfg = editor.config();
    let div = cfg.divisor();
    let mode = editor.visual_mode();
    let sb = surrogate.params().bind_constant(g);

    let h = g.constant(&prep.states.h);
    let he = g.narrow(h, 0, 0, b * n)?;
    let (u, v) = editor.generator.generate(g, eb, he, b)?;

    let hv = g.gather_rows(h, &span_rows(spans, count, spans.visual()))?;
    let hp = g.gather_rows(h, &span_rows(spans, count, spans.prompt()))?;
    let hat = editor.edit_fe.extract(g, eb, hv, hp, count, mode)?;
    let bar = editor.input_fe.extract(g, eb, hv, hp, count, mode)?;
    let theta = editor.input_fe.sentinel(g, eb, &bar, eb[editor.sentinel], count, mode)?;

    // editing losses on the model fused with all batch experts
    let weights = match editor.fusion() {
        Fusion::Soft => {
            let psi_e = g.narrow(hat.textual, 0, 0, b)?;
            let s = similarity_matrix(g, bar.textual, psi_e, div)?;
            let abs = g.sigmoid(s)?;
            let rel = g.softmax(s, 1)?;
            g.mul(abs, rel)?
        }
        Fusion::Uniform => g.constant(&Tensor::full([count, b], T::from_f64_lossy(1.0 / b as f64))),
    };
    let edited = editor.generator.apply_weighted(g, eb, h, n, u, v, weights)?;
    let l_e = surrogate.config().l_e;
    let x = surrogate.blocks_var(g, &sb, edited, l_e, surrogate.config().layers, count)?;
    let rows = spans.output_predictor_rows(count);
    let logits = surrogate.head_var(g, &sb, x, Some(&rows))?;
    let n_o = spans.n_o;
    let targets = |set: &[SeqInput<T>]| -> Vec<usize> { set.iter().flat_map(|s| s.output.iter().copied()).collect() };
    let le = g.narrow(logits, 0, 0, b * n_o)?;
    let rel = g.cross_entropy(le, &targets(&batch.edit))?;
    let rel = g.scale(rel, n_o as f64)?;
    let lg = g.narrow(logits, 0, b * n_o, b * n_o)?;
    let gen = g.cross_entropy(lg, &targets(&batch.gen))?;
    let gen = g.scale(gen, n_o as f64)?;
    let ll = g.narrow(logits, 0, 2 * b * n_o, b * n_o)?;
    let frozen = g.constant(&prep.frozen_loc_logits);
    let loc = g.kl_rows(frozen, ll)?;

    // routing losses
    let pick_hat = Shuffle::pick(&shuffle.pi1);
    let pick_bar = Shuffle::pick(&shuffle.pi2);
    let loc_rows: Vec<usize> = (2 * b..3 * b).collect();
    let phi_hat = g.gather_rows(hat.visual, &pick_hat)?;
    let psi_hat = g.gather_rows(hat.textual, &pick_hat)?;
    let psi_hat_l = g.gather_rows(hat.textual, &loc_rows)?;
    let phi_bar = g.gather_rows(bar.visual, &pick_bar)?;
    let psi_bar = g.gather_rows(bar.textual, &pick_bar)?;
    let theta_g = g.gather_rows(theta, &pick_bar)?;
    let phi_bar_l = g.gather_rows(bar.visual, &loc_rows)?;
    let theta_l = g.gather_rows(theta, &loc_rows)?;
    let hr = hard_routing_loss(g, phi_bar, theta_g, phi_bar_l, theta_l, phi_hat, div)?;
    let (sr1, sr2) = soft_routing_losses(g, psi_bar, psi_hat, psi_hat_l, &shuffle.negatives, div)?;
    let sr1 = cfg.variant.uses_sr1().then_some(sr1);
    let sr2 = cfg.variant.uses_sr2().then_some(sr2);

    let mut total = g.add(rel, gen)?;
    total = g.add(total, loc)?;
    total = g.add(total, hr)?;
    for t in [sr1, sr2].into_iter().flatten() {
        total = g.add(total, t)?;
    }
    Ok(LossVars {
        rel,
        gen,
        loc,
        hr,
        sr1,
        sr2,
        total,
    })
}

fn report<T: Scalar>(g: &Graph<T>, l: &LossVars, step: usize) -> LossReport {
    let val = |v: Var| g.value(v).item().as_f64();
    LossReport {
        step,
        rel: val(l.rel),
        gen: val(l.gen),
        loc: val(l.loc),
        hr: val(l.hr),
        sr1: l.sr1.map_or(0.0, val),
        sr2: l.sr2.map_or(0.0, val),
        total: val(l.total),
    }
}

/// Loss values of one batch without updating anything.
pub fn evaluate_losses<T: Scalar>(
    editor: &Editor<T>,
    surrogate: &Surrogate<T>,
    batch: &TrainBatch<T>,
    shuffle: &Shuffle,
) -> Result<LossReport> {
    let prep = prepare(surrogate, batch)?;
    let mut g = Graph::new();
    let eb = editor.params().bind(&mut g);
    let l = loss_graph(&mut g, &eb, editor, surrogate, &prep, batch, shuffle)?;
    Ok(report(&g, &l, 0))
}

/// One forward/backward/update over the total loss. The surrogate must be frozen.
pub fn train_step<T: Scalar>(
    editor: &mut Editor<T>,
    surrogate: &Surrogate<T>,
    batch: &TrainBatch<T>,
    shuffle: &Shuffle,
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
    step: usize,
) -> Result<LossReport> {
    if !surrogate.is_frozen() {
        return Err(Error::Contract("editor training needs a frozen surrogate".into()));
    }
    let prep = prepare(surrogate, batch)?;
    let mut g = Graph::new();
    let eb = editor.params().bind(&mut g);
    let l = loss_graph(&mut g, &eb, editor, surrogate, &prep, batch, shuffle)?;
    let r = report(&g, &l, step);
    if !r.all_finite() {
        return Err(Error::Numerical(format!("non-finite loss at step {step}: {r:?}")));
    }
    let grads = g.backward(l.total)?;
    let grads = editor.params().collect_grads(&eb, &grads);
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at step {step}: {r:?}")));
    }
    editor.params_mut().apply(&cfg.adam, &grads, state)?;
    Ok(r)
}

/// Which loss a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Rel,
    Gen,
    Loc,
    Hr,
    Sr1,
    Sr2,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Rel,
        LossTerm::Gen,
        LossTerm::Loc,
        LossTerm::Hr,
        LossTerm::Sr1,
        LossTerm::Sr2,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Rel => "rel",
            LossTerm::Gen => "gen",
            LossTerm::Loc => "loc",
            LossTerm::Hr => "hr",
            LossTerm::Sr1 => "sr1",
            LossTerm::Sr2 => "sr2",
            LossTerm::Total => "total",
        }
    }

    fn pick(self, l: &LossVars) -> Option<Var> {
        match self {
            LossTerm::Rel => Some(l.rel),
            LossTerm::Gen => Some(l.gen),
            LossTerm::Loc => Some(l.loc),
            LossTerm::Hr => Some(l.hr),
            LossTerm::Sr1 => l.sr1,
            LossTerm::Sr2 => l.sr2,
            LossTerm::Total => Some(l.total),
        }
    }
}

/// Central-difference check of one loss term against all editor parameters.
pub fn grad_check_term(
    editor: &Editor<f64>,
    surrogate: &Surrogate<f64>,
    batch: &TrainBatch<f64>,
    shuffle: &Shuffle,
    term: LossTerm,
    eps: f64,
    coverage: Coverage,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let prep = prepare(surrogate, batch)?;
    let f = |params: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut e = editor.clone();
        e.params_mut().set_trainable_tensors(params)?;
        let mut g = Graph::new();
        g.set_check_finite(false);
        let eb = e.params().bind(&mut g);
        let l = loss_graph(&mut g, &eb, &e, surrogate, &prep, batch, shuffle)?;
        let v = term
            .pick(&l)
            .ok_or_else(|| Error::Contract(format!("loss {} is disabled for this variant", term.name())))?;
        let grads = g.backward(v)?;
        Ok((g.value(v).item(), e.params().collect_grads(&eb, &grads)))
    };
    grad_check(f, &editor.params().trainable_tensors(), eps, coverage, rng)
}

// -------------------------------------------------------------------- batch sampling

/// Draws a training batch from the benchmark's training concepts: `B`
/// distinct edited concepts, a generality neighbour for each (modal or
/// text, uniformly), and locality samples about concepts outside the batch.
pub fn sample_batch<T: Scalar>(bench: &Benchmark, b: usize, rng: &mut impl Rng) -> Result<TrainBatch<T>> {
    let pool: Vec<usize> = bench.concepts(Pool::Train).collect();
    if pool.len() < b + 1 {
        return Err(Error::Config(format!(
            "{} training concepts cannot fill a batch of {b} plus locality samples",
            pool.len()
        )));
    }
    let chosen: Vec<usize> = pool.choose_multiple(rng, b).copied().collect();
    let others: Vec<usize> = pool.iter().copied().filter(|c| !chosen.contains(c)).collect();
    let attrs = bench.cfg.attributes;
    let templates = bench.cfg.templates;
    let mut out = TrainBatch {
        edit: Vec::with_capacity(b),
        gen: Vec::with_capacity(b),
        loc: Vec::with_capacity(b),
    };
    for &c in &chosen {
        let a = rng.random_range(0..attrs);
        let rec = bench.edit_record(c, a, Pool::Train, rng);
        let gen: &Query = if rng.random_bool(0.5) {
            &rec.gen_modal[0]
        } else {
            rec.gen_text.choose(rng).expect("at least two templates")
        };
        let lc = *others.choose(rng).expect("non-empty");
        let loc = bench.base_query(lc, rng.random_range(0..attrs), rng.random_range(0..templates), rng);
        out.edit.push(rec.edit.to_input());
        out.gen.push(gen.to_input());
        out.loc.push(loc.to_input());
    }
    Ok(out)
}

// -------------------------------------------------------------------- the loop

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerHeader {
    editor: EditorHeader,
    variant: Variant,
    step: usize,
    adam_step: u64,
    best_bits: Option<u64>,
    best_step: usize,
    window: Vec<u64>,
    since_best: usize,
}

/// Stateful training session. Batches and shuffles for step `s` come from
/// named random streams indexed by `s`, so a resumed session continues
/// exactly where an unbroken one would be.
pub struct Trainer<'a, T> {
    pub editor: Editor<T>,
    surrogate: &'a Surrogate<T>,
    bench: &'a Benchmark,
    cfg: TrainConfig,
    seeds: SeedStream,
    state: OptimizerState<T>,
    step: usize,
    best: Option<(f64, Vec<Tensor<T>>)>,
    best_step: usize,
    window: Vec<f64>,
    since_best: usize,
    pub log: Vec<LossReport>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(editor: Editor<T>, surrogate: &'a Surrogate<T>, bench: &'a Benchmark, cfg: TrainConfig, seeds: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let state = editor.params().new_optimizer_state();
        Ok(Self {
            editor,
            surrogate,
            bench,
            cfg,
            seeds,
            state,
            step: 0,
            best: None,
            best_step: 0,
            window: Vec::new(),
            since_best: 0,
            log: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// The batch and shuffle used at step `s`.
    pub fn batch_at(&self, s: usize) -> Result<(TrainBatch<T>, Shuffle)> {
        let mut rng = self.seeds.rng_at("train.batch", s as u64);
        let batch = sample_batch(self.bench, self.cfg.batch, &mut rng)?;
        let mut rng = self.seeds.rng_at("train.shuffle", s as u64);
        Ok((batch, Shuffle::sample(self.cfg.batch, &mut rng)))
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let (batch, shuffle) = self.batch_at(self.step)?;
        let r = train_step(&mut self.editor, self.surrogate, &batch, &shuffle, &self.cfg, &mut self.state, self.step)?;
        self.step += 1;
        self.window.push(r.total);
        if self.window.len() >= self.cfg.smoothing {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.window.clear();
            if self.best.as_ref().is_none_or(|(b, _)| mean < *b) {
                self.best = Some((mean, self.editor.params().trainable_tensors()));
                self.best_step = self.step;
                self.since_best = 0;
            } else {
                self.since_best += self.cfg.smoothing;
            }
        }
        self.log.push(r);
        Ok(r)
    }

    /// Whether early stopping has triggered.
    pub fn stalled(&self) -> bool {
        self.cfg.patience.is_some_and(|p| self.since_best >= p)
    }

    /// Trains until `max_steps` or early stop, checkpointing into `dir`
    /// every `checkpoint_every` steps and appending log rows to `dir/train_log.csv`.
    pub fn run(&mut self, dir: Option<&Path>) -> Result<()> {
        let mut log = match dir {
            Some(d) => Some(open_log(d, self.step)?),
            None => None,
        };
        while self.step < self.cfg.max_steps && !self.stalled() {
            let r = self.step()?;
            if let Some((w, p)) = log.as_mut() {
                writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(p.clone(), e))?;
            }
            if let Some(d) = dir {
                if self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    if let Some((w, p)) = log.as_mut() {
                        w.flush().map_err(|e| Error::io(p.clone(), e))?;
                    }
                    self.save_checkpoint(&d.join("checkpoint.json"))?;
                }
            }
        }
        if let Some((mut w, p)) = log {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    /// The editor with the lowest smoothed loss seen so far (or the current one).
    pub fn best_editor(&self) -> Result<Editor<T>> {
        let mut e = self.editor.clone();
        if let Some((_, p)) = &self.best {
            e.params_mut().set_trainable_tensors(p)?;
        }
        Ok(e)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = TrainerHeader {
            editor: self.editor.header(),
            variant: self.editor.variant(),
            step: self.step,
            adam_step: self.state.step,
            best_bits: self.best.as_ref().map(|(b, _)| b.to_bits()),
            best_step: self.best_step,
            window: self.window.iter().map(|x| x.to_bits()).collect(),
            since_best: self.since_best,
        };
        let mut named: Vec<(String, &Tensor<T>)> = self.editor.params().named().collect();
        for (i, (m, v)) in self.state.first.iter().zip(&self.state.second).enumerate() {
            named.push((format!("adam.m.{i}"), m));
            named.push((format!("adam.v.{i}"), v));
        }
        if let Some((_, p)) = &self.best {
            for (i, t) in p.iter().enumerate() {
                named.push((format!("best.{i}"), t));
            }
        }
        blob::save_named(path, CHECKPOINT_KIND, header, named)
    }

    /// Restores a session saved by [`save_checkpoint`](Self::save_checkpoint).
    /// The checkpoint must match `editor`'s configuration.
    pub fn resume(
        path: &Path,
        editor: Editor<T>,
        surrogate: &'a Surrogate<T>,
        bench: &'a Benchmark,
        cfg: TrainConfig,
        seeds: SeedStream,
    ) -> Result<Self> {
        let (header, tensors) = blob::load_named::<T, TrainerHeader>(path, CHECKPOINT_KIND)?;
        if header.editor.fingerprint != editor.fingerprint() || header.editor.config != *editor.config() {
            return Err(Error::Fingerprint {
                expected: editor.fingerprint().to_string(),
                found: header.editor.fingerprint.to_string(),
            });
        }
        let mut t = Self::new(editor, surrogate, bench, cfg, seeds)?;
        let np = t.editor.params().len();
        if tensors.len() < np {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "truncated checkpoint".into(),
            });
        }
        let mut it = tensors.into_iter();
        let params: Vec<(String, Tensor<T>)> = it.by_ref().take(np).collect();
        t.editor.params_mut().assign_named(params, path)?;
        let nm = t.state.first.len();
        for i in 0..nm {
            let bad = || Error::Format {
                path: path.to_path_buf(),
                detail: format!("missing optimiser moments {i}"),
            };
            t.state.first[i] = it.next().ok_or_else(bad)?.1;
            t.state.second[i] = it.next().ok_or_else(bad)?.1;
        }
        t.state.step = header.adam_step;
        let rest: Vec<Tensor<T>> = it.map(|(_, x)| x).collect();
        t.best = header.best_bits.map(|b| (f64::from_bits(b), rest));
        t.best_step = header.best_step;
        t.window = header.window.iter().map(|&b| f64::from_bits(b)).collect();
        t.since_best = header.since_best;
        t.step = header.step;
        Ok(t)
    }
}

fn open_log(dir: &Path, step: usize) -> Result<(std::io::BufWriter<std::fs::File>, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("train_log.csv");
    let file = if step == 0 || !path.exists() {
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        f
    } else {
        truncate_log(&path, step)?;
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?
    };
    Ok((std::io::BufWriter::new(file), path))
}

/// Drops rows logged after `step` (written past the last checkpoint).
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Result of checking one loss term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Finite-difference check of every enabled loss term in f64, on an
/// untrained surrogate and editor built from `cfg` and one sampled batch.
pub fn gradcheck_suite(cfg: &crate::config::RunConfig, eps: f64, coverage: Coverage) -> Result<Vec<TermCheck>> {
    cfg.validate()?;
    let seeds = SeedStream::new(cfg.seed);
    let s = &cfg.surrogate;
    let bench = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, cfg.seed)?;
    let mut surrogate = Surrogate::<f64>::new(s.clone(), &seeds.derive("surrogate"))?;
    surrogate.freeze();
    let mut editor = Editor::<f64>::new(cfg.editor.clone(), s, &seeds.derive("editor"))?;
    // Move every parameter off its initial value so no gradient is trivially
    // zero (the value map of the expert generator starts at zero).
    let mut rng = seeds.rng("gradcheck.perturb");
    let perturbed: Vec<Tensor<f64>> = editor
        .params()
        .trainable_tensors()
        .into_iter()
        .map(|t| {
            let noise = Tensor::<f64>::normal(t.shape().to_vec(), 0.1, &mut rng);
            t.zip_map(&noise, |a, b| a + b)
        })
        .collect::<Result<_>>()?;
    editor.params_mut().set_trainable_tensors(&perturbed)?;
    let mut rng = seeds.rng_at("gradcheck.batch", 0);
    let batch = sample_batch::<f64>(&bench, cfg.training.batch, &mut rng)?;
    let shuffle = Shuffle::sample(cfg.training.batch, &mut rng);
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let enabled = match term {
            LossTerm::Sr1 => cfg.editor.variant.uses_sr1(),
            LossTerm::Sr2 => cfg.editor.variant.uses_sr2(),
            _ => true,
        };
        if !enabled {
            continue;
        }
        let mut rng = seeds.rng(&format!("gradcheck.coords.{}", term.name()));
        let r = grad_check_term(&editor, &surrogate, &batch, &shuffle, term, eps, coverage, &mut rng)?;
        out.push(TermCheck {
            term: term.name(),
            max_rel_err: r.max_rel_err,
            coords_checked: r.coords_checked,
        });
    }
    Ok(out)
}
