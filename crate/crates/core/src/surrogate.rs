//! A small decoder-only transformer over `[visual | prompt | output]`
//! sequences, standing in for the backbone being edited.
//!
//! Sequences of identical span layout are processed together as one stacked
//! `count * N x d` matrix. Every block is pre-norm with RMSNorm, causal
//! multi-head self-attention over the whole sequence (visual rows are ordinary
//! prefix positions) and a SiLU feed-forward layer.

use std::ops::Range;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PretrainConfig, SurrogateConfig};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AttentionSpec, Graph, SeedStream, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Token that terminates greedy decoding.
pub const END_TOKEN: usize = 0;

const NORM_EPS: f64 = 1e-6;
pub const CHECKPOINT_KIND: &str = "surrogate";

/// Image features of one query; `is_empty` marks the no-image case, encoded
/// as all-zero rows so the visual span keeps its width.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput<T> {
    feats: Tensor<T>,
    is_empty: bool,
}

impl<T: Scalar> VisualInput<T> {
    pub fn new(feats: Tensor<T>) -> Self {
        Self { feats, is_empty: false }
    }

    pub fn empty(n_v: usize, d_img: usize) -> Self {
        Self {
            feats: Tensor::zeros([n_v, d_img]),
            is_empty: true,
        }
    }

    pub fn feats(&self) -> &Tensor<T> {
        &self.feats
    }

    pub fn is_empty(&self) -> bool {
        self.is_empty
    }

    pub fn cast<U: Scalar>(&self) -> VisualInput<U> {
        VisualInput {
            feats: self.feats.cast(),
            is_empty: self.is_empty,
        }
    }
}

/// One model input: image, prompt tokens and (possibly empty) output tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput<T> {
    pub visual: VisualInput<T>,
    pub prompt: Vec<usize>,
    pub output: Vec<usize>,
}

impl<T: Scalar> SeqInput<T> {
    pub fn new(visual: VisualInput<T>, prompt: Vec<usize>, output: Vec<usize>) -> Self {
        Self { visual, prompt, output }
    }

    pub fn spans(&self) -> Spans {
        Spans {
            n_v: self.visual.feats.rows(),
            n_p: self.prompt.len(),
            n_o: self.output.len(),
        }
    }
}

/// Lengths of the visual, prompt and output spans of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Spans {
    pub n_v: usize,
    pub n_p: usize,
    pub n_o: usize,
}

impl Spans {
    pub fn len(&self) -> usize {
        self.n_v + self.n_p + self.n_o
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual(&self) -> Range<usize> {
        0..self.n_v
    }

    pub fn prompt(&self) -> Range<usize> {
        self.n_v..self.n_v + self.n_p
    }

    pub fn output(&self) -> Range<usize> {
        self.n_v + self.n_p..self.len()
    }

    /// Rows (within a stack of `count` sequences) whose logits predict the
    /// output tokens: for each sequence, the positions just before each one.
    pub fn output_predictor_rows(&self, count: usize) -> Vec<usize> {
        let n = self.len();
        let first = self.n_v + self.n_p - 1;
        (0..count)
            .flat_map(|s| (0..self.n_o).map(move |j| s * n + first + j))
            .collect()
    }
}

/// Layer activations for a stack of sequences sharing one span layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    pub h: Tensor<T>,
    pub spans: Spans,
    pub count: usize,
}

impl<T: Scalar> HiddenStates<T> {
    fn rows(&self, s: usize, r: Range<usize>) -> Tensor<T> {
        let n = self.spans.len();
        let d = self.h.cols();
        let lo = (s * n + r.start) * d;
        let hi = (s * n + r.end) * d;
        Tensor::new([r.len(), d], self.h.data()[lo..hi].to_vec()).expect("span rows")
    }

    /// All rows of sequence `s`.
    pub fn sequence(&self, s: usize) -> Tensor<T> {
        self.rows(s, 0..self.spans.len())
    }

    pub fn visual(&self, s: usize) -> Tensor<T> {
        self.rows(s, self.spans.visual())
    }

    /// Panics when the prompt span is empty; every query has a prompt.
    pub fn prompt(&self, s: usize) -> Tensor<T> {
        self.rows(s, self.spans.prompt())
    }

    pub fn output(&self, s: usize) -> Tensor<T> {
        self.rows(s, self.spans.output())
    }
}

/// Checks that every sequence shares the first one's span layout.
pub fn common_spans<T: Scalar>(batch: &[SeqInput<T>]) -> Result<Spans> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .spans();
    if let Some(other) = batch.iter().map(SeqInput::spans).find(|s| *s != first) {
        return Err(Error::Contract(format!(
            "batch mixes span layouts {first:?} and {other:?}"
        )));
    }
    Ok(first)
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm2: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    img_w: ParamId,
    img_b: ParamId,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    head: ParamId,
}

#[derive(Clone, Debug)]
pub struct Surrogate<T> {
    cfg: SurrogateConfig,
    params: ParamStore<T>,
    ids: Ids,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: SurrogateConfig,
    frozen: bool,
}

impl<T: Scalar> Surrogate<T> {
    pub fn new(cfg: SurrogateConfig, seeds: &SeedStream) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds.rng("surrogate.init");
        let mut p = ParamStore::new();
        let (d, hidden) = (cfg.d, cfg.d * cfg.ffn_mult);
        let lin = |p: &mut ParamStore<T>, name: String, i: usize, o: usize, gain: f64, rng: &mut _| {
            p.add(name, Tensor::uniform([i, o], gain * (3.0 / i as f64).sqrt(), rng))
        };
        let img_w = lin(&mut p, "img.w".into(), cfg.d_img, d, 1.0, &mut rng);
        let img_b = p.add("img.b", Tensor::zeros([1, d]));
        let tok = p.add("tok", Tensor::normal([cfg.vocab, d], 1.0, &mut rng));
        let pos = p.add("pos", Tensor::normal([cfg.max_seq, d], 0.5, &mut rng));
        let out_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockIds {
                norm1: p.add(n("norm1"), Tensor::full([1, d], T::one())),
                wq: lin(&mut p, n("wq"), d, d, 1.0, &mut rng),
                wk: lin(&mut p, n("wk"), d, d, 1.0, &mut rng),
                wv: lin(&mut p, n("wv"), d, d, 1.0, &mut rng),
                wo: lin(&mut p, n("wo"), d, d, out_gain, &mut rng),
                norm2: p.add(n("norm2"), Tensor::full([1, d], T::one())),
                w1: lin(&mut p, n("w1"), d, hidden, 1.0, &mut rng),
                w2: lin(&mut p, n("w2"), hidden, d, out_gain, &mut rng),
            });
        }
        let final_norm = p.add("final.norm", Tensor::full([1, d], T::one()));
        let head = lin(&mut p, "head".into(), d, cfg.vocab, 1.0, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            ids: Ids {
                img_w,
                img_b,
                tok,
                pos,
                blocks,
                final_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.cfg
    }

    /// Moves the intercepted layer; weights do not depend on it.
    pub fn set_edit_layer(&mut self, l_e: usize) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.l_e = l_e;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Any optimiser update; refused once frozen.
    pub fn apply_update(&mut self, adam: &Adam, grads: &[Tensor<T>], state: &mut crate::numerics::OptimizerState<T>) -> Result<()> {
        self.params.apply(adam, grads, state)
    }

    pub fn cast<U: Scalar>(&self) -> Surrogate<U> {
        Surrogate {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    // ---------------------------------------------------------------- graph-level pieces

    /// Embeds a batch sharing one span layout into a stacked `count * N x d` node.
    pub fn embed_var(&self, g: &mut Graph<T>, b: &Bound, batch: &[SeqInput<T>]) -> Result<(Var, Spans)> {
        let spans = common_spans(batch)?;
        let c = &self.cfg;
        if spans.n_v != c.n_v {
            return Err(Error::shape("embed", &[spans.n_v, c.d_img], &[c.n_v, c.d_img]));
        }
        if spans.len() > c.max_seq {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: spans.len(),
                bound: c.max_seq + 1,
            });
        }
        let count = batch.len();
        let mut feats = Vec::with_capacity(count * c.n_v * c.d_img);
        let mut ids = Vec::with_capacity(count * (spans.n_p + spans.n_o));
        for s in batch {
            if s.visual.feats.shape() != [c.n_v, c.d_img] {
                return Err(Error::shape("embed", s.visual.feats.shape(), &[c.n_v, c.d_img]));
            }
            feats.extend_from_slice(s.visual.feats.data());
            ids.extend(s.prompt.iter().chain(&s.output).copied());
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::OutOfRange {
                what: "token",
                index: t,
                bound: c.vocab,
            });
        }
        let vis = g.constant(&Tensor::new([count * c.n_v, c.d_img], feats)?);
        let vis = g.matmul(vis, b[self.ids.img_w])?;
        let vis = g.add_row(vis, b[self.ids.img_b])?;
        let n = spans.len();
        let n_t = n - c.n_v;
        let x = if n_t == 0 {
            vis
        } else {
            let toks = g.gather_rows(b[self.ids.tok], &ids)?;
            let all = g.concat_rows(&[vis, toks])?;
            let order: Vec<usize> = (0..count)
                .flat_map(|s| {
                    (0..c.n_v)
                        .map(move |i| s * c.n_v + i)
                        .chain((0..n_t).map(move |j| count * c.n_v + s * n_t + j))
                })
                .collect();
            g.gather_rows(all, &order)?
        };
        let pos = g.narrow(b[self.ids.pos], 0, 0, n)?;
        let pos = if count > 1 { g.tile_rows(pos, count)? } else { pos };
        Ok((g.add(x, pos)?, spans))
    }

    /// Runs blocks `from..to` on stacked activations of `count` sequences.
    pub fn blocks_var(&self, g: &mut Graph<T>, b: &Bound, mut x: Var, from: usize, to: usize, count: usize) -> Result<Var> {
        if from > to || to > self.cfg.layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: to.max(from),
                bound: self.cfg.layers + 1,
            });
        }
        let spec = AttentionSpec {
            groups: count,
            heads: self.cfg.heads,
            causal: true,
            scale: 1.0 / ((self.cfg.d / self.cfg.heads) as f64).sqrt(),
        };
        for blk in &self.ids.blocks[from..to] {
            let h = g.rms_norm(x, b[blk.norm1], NORM_EPS)?;
            let q = g.matmul(h, b[blk.wq])?;
            let k = g.matmul(h, b[blk.wk])?;
            let v = g.matmul(h, b[blk.wv])?;
            let a = g.attention(q, k, v, spec)?;
            let a = g.matmul(a, b[blk.wo])?;
            x = g.add(x, a)?;
            let h = g.rms_norm(x, b[blk.norm2], NORM_EPS)?;
            let u = g.matmul(h, b[blk.w1])?;
            let gate = g.sigmoid(u)?;
            let u = g.mul(u, gate)?;
            let u = g.matmul(u, b[blk.w2])?;
            x = g.add(x, u)?;
        }
        Ok(x)
    }

    /// Final norm and output head on the given rows of `x`.
    pub fn head_var(&self, g: &mut Graph<T>, b: &Bound, x: Var, rows: Option<&[usize]>) -> Result<Var> {
        let x = match rows {
            Some(r) => g.gather_rows(x, r)?,
            None => x,
        };
        let h = g.rms_norm(x, b[self.ids.final_norm], NORM_EPS)?;
        g.matmul(h, b[self.ids.head])
    }

    // ---------------------------------------------------------------- untracked forward passes

    fn untracked<R>(&self, f: impl FnOnce(&mut Graph<T>, &Bound) -> Result<R>) -> Result<R> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        f(&mut g, &b)
    }

    pub fn embed(&self, batch: &[SeqInput<T>]) -> Result<HiddenStates<T>> {
        self.forward_to_layer(batch, 0)
    }

    pub fn forward_to_layer(&self, batch: &[SeqInput<T>], l: usize) -> Result<HiddenStates<T>> {
        self.check_layer(l)?;
        self.untracked(|g, b| {
            let (x, spans) = self.embed_var(g, b, batch)?;
            let x = self.blocks_var(g, b, x, 0, l, batch.len())?;
            Ok(HiddenStates {
                h: g.value(x).clone(),
                spans,
                count: batch.len(),
            })
        })
    }

    /// Logits for every row of `h`, continuing from layer `l`.
    pub fn forward_from_layer(&self, h: &HiddenStates<T>, l: usize) -> Result<Tensor<T>> {
        self.check_layer(l)?;
        self.check_states(h)?;
        self.untracked(|g, b| {
            let x = g.constant(&h.h);
            let x = self.blocks_var(g, b, x, l, self.cfg.layers, h.count)?;
            let y = self.head_var(g, b, x, None)?;
            Ok(g.value(y).clone())
        })
    }

    pub fn forward(&self, batch: &[SeqInput<T>]) -> Result<Tensor<T>> {
        let h = self.forward_to_layer(batch, 0)?;
        self.forward_from_layer(&h, 0)
    }

    /// Forward pass whose layer-`l_e` activations are replaced by `hook(h)`.
    pub fn forward_edited<F>(&self, batch: &[SeqInput<T>], hook: F) -> Result<Tensor<T>>
    where
        F: FnOnce(&HiddenStates<T>) -> Result<HiddenStates<T>>,
    {
        let h = self.forward_to_layer(batch, self.cfg.l_e)?;
        let edited = hook(&h)?;
        if edited.h.shape() != h.h.shape() || edited.spans != h.spans || edited.count != h.count {
            return Err(Error::shape("forward_edited hook", h.h.shape(), edited.h.shape()));
        }
        self.forward_from_layer(&edited, self.cfg.l_e)
    }

    /// Greedy decoding of up to `max_len` tokens, stopping after [`END_TOKEN`].
    /// `hook` edits the layer-`l_e` activations at every step.
    pub fn greedy_decode_with<F>(&self, visual: &VisualInput<T>, prompt: &[usize], max_len: usize, hook: F) -> Result<Vec<usize>>
    where
        F: Fn(&HiddenStates<T>) -> Result<HiddenStates<T>>,
    {
        let mut out = Vec::new();
        while out.len() < max_len {
            let seq = SeqInput::new(visual.clone(), prompt.to_vec(), out.clone());
            let logits = self.forward_edited(std::slice::from_ref(&seq), &hook)?;
            let next = logits.argmax_row(logits.rows() - 1);
            out.push(next);
            if next == END_TOKEN {
                break;
            }
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, visual: &VisualInput<T>, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.greedy_decode_with(visual, prompt, max_len, |h| Ok(h.clone()))
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l > self.cfg.layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: l,
                bound: self.cfg.layers + 1,
            });
        }
        Ok(())
    }

    fn check_states(&self, h: &HiddenStates<T>) -> Result<()> {
        if h.h.shape() != [h.count * h.spans.len(), self.cfg.d] {
            return Err(Error::shape("hidden states", h.h.shape(), &[h.count * h.spans.len(), self.cfg.d]));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- persistence

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            frozen: self.is_frozen(),
        };
        self.params.save(path, CHECKPOINT_KIND, header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: crate::numerics::blob::Manifest<CheckpointHeader> = crate::numerics::blob::read_json(path)?;
        let mut model = Self::new(manifest.header.config, &SeedStream::new(0))?;
        let header: CheckpointHeader = model.params.load_into(path, CHECKPOINT_KIND)?;
        if header.frozen {
            model.freeze();
        }
        Ok(model)
    }
}

/// Sum of next-token log-likelihoods of `output` under the logits of one
/// sequence whose output span is its last `output.len()` rows.
pub fn sequence_log_prob<T: Scalar>(logits: &Tensor<T>, output: &[usize]) -> Result<T> {
    if output.is_empty() {
        return Err(Error::Contract("log-prob of an empty output span".into()));
    }
    let n = logits.rows();
    if output.len() >= n {
        return Err(Error::shape("sequence_log_prob", logits.shape(), &[output.len()]));
    }
    let first = n - output.len() - 1;
    let mut total = 0.0;
    for (j, &t) in output.iter().enumerate() {
        let row = logits.row(first + j);
        if t >= row.len() {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: t,
                bound: row.len(),
            });
        }
        let lse = crate::numerics::graph::log_sum_exp(row).as_f64();
        total += row[t].as_f64() - lse;
    }
    Ok(T::from_f64_lossy(total))
}

/// Teacher-forced argmax predictions for the output span of each stacked sequence.
pub fn output_predictions<T: Scalar>(logits: &Tensor<T>, spans: Spans, count: usize) -> Vec<Vec<usize>> {
    let rows = spans.output_predictor_rows(count);
    rows.chunks(spans.n_o.max(1))
        .take(if spans.n_o == 0 { 0 } else { count })
        .map(|c| c.iter().map(|&r| logits.argmax_row(r)).collect())
        .collect()
}

/// Groups indices of `batch` by span layout, preserving order within a group.
pub fn group_by_spans<T: Scalar>(batch: &[SeqInput<T>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(Spans, Vec<usize>)> = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let sp = s.spans();
        match groups.iter_mut().find(|(k, _)| *k == sp) {
            Some((_, v)) => v.push(i),
            None => groups.push((sp, vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}

/// Progress of surrogate pretraining.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub token_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Teacher-forced token accuracy of the model on `examples`.
pub fn token_accuracy<T: Scalar>(model: &Surrogate<T>, examples: &[SeqInput<T>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for group in group_by_spans(examples) {
        for chunk in group.chunks(256) {
            let batch: Vec<SeqInput<T>> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let spans = batch[0].spans();
            let logits = model.forward(&batch)?;
            for (pred, s) in output_predictions(&logits, spans, batch.len()).iter().zip(&batch) {
                hit += pred.iter().zip(&s.output).filter(|(a, b)| a == b).count();
                total += s.output.len();
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Trains the surrogate with next-token cross-entropy on output spans until
/// its teacher-forced token accuracy on `eval` reaches the target, then
/// freezes it. `sample` draws a training batch of identical span layout.
pub fn pretrain_surrogate<T, S>(
    model: &mut Surrogate<T>,
    mut sample: S,
    eval: &[SeqInput<T>],
    cfg: &PretrainConfig,
    seeds: &SeedStream,
) -> Result<PretrainReport>
where
    T: Scalar,
    S: FnMut(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<SeqInput<T>>,
{
    if model.is_frozen() {
        return Err(Error::Frozen("surrogate is already frozen".into()));
    }
    let adam = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let mut state = model.params.new_optimizer_state();
    let mut losses = Vec::new();
    let mut accuracy = token_accuracy(model, eval)?;
    let mut step = 0;
    while accuracy < cfg.target_accuracy {
        if step >= cfg.max_steps {
            return Err(Error::NotConverged(format!(
                "surrogate reached token accuracy {accuracy:.4} after {step} steps, target {}",
                cfg.target_accuracy
            )));
        }
        let mut rng = seeds.rng_at("pretrain.batch", step as u64);
        let batch = sample(&mut rng, cfg.batch);
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let (x, spans) = model.embed_var(&mut g, &b, &batch)?;
        let x = model.blocks_var(&mut g, &b, x, 0, model.cfg.layers, batch.len())?;
        let rows = spans.output_predictor_rows(batch.len());
        let logits = model.head_var(&mut g, &b, x, Some(&rows))?;
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.output.iter().copied()).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss {value} at step {step}")));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let grads = model.params.collect_grads(&b, &grads);
        model.params.apply(&adam, &grads, &mut state)?;
        step += 1;
        if step % cfg.eval_every == 0 {
            accuracy = token_accuracy(model, eval)?;
        }
    }
    model.freeze();
    Ok(PretrainReport {
        steps: step,
        token_accuracy: accuracy,
        losses,
    })
}

/// Draws `n` examples uniformly with replacement from `pool`, all from the
/// span group of the first draw.
pub fn sample_uniform<T: Scalar>(pool: &[SeqInput<T>], rng: &mut impl Rng, n: usize) -> Vec<SeqInput<T>> {
    let first = &pool[rng.random_range(0..pool.len())];
    let spans = first.spans();
    let same: Vec<&SeqInput<T>> = pool.iter().filter(|s| s.spans() == spans).collect();
    (0..n).map(|_| (*same.choose(rng).unwrap()).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SurrogateConfig {
        SurrogateConfig {
            d: 8,
            layers: 2,
            heads: 2,
            vocab: 12,
            n_v: 2,
            d_img: 3,
            max_seq: 8,
            l_e: 1,
            ffn_mult: 2,
        }
    }

    #[test]
    fn predictor_rows_point_one_before_each_output_token() {
        let s = Spans { n_v: 2, n_p: 2, n_o: 2 };
        assert_eq!(s.output_predictor_rows(2), vec![3, 4, 9, 10]);
    }

    #[test]
    fn mixed_layouts_are_rejected() {
        let m = Surrogate::<f64>::new(tiny(), &SeedStream::new(1)).unwrap();
        let v = VisualInput::empty(2, 3);
        let batch = vec![
            SeqInput::new(v.clone(), vec![1], vec![]),
            SeqInput::new(v, vec![1, 2], vec![]),
        ];
        assert!(matches!(m.forward(&batch), Err(Error::Contract(_))));
    }
}
