//! Synthetic lifelong-editing benchmark.
//!
//! A world of concepts, each with a prototype image (`N_v x d_img` features)
//! and one short answer per attribute. A query shows a noisy rendering of a
//! concept and asks about one attribute through one of several prompt
//! templates. Text-only fact queries (no image) provide the text-locality
//! probes. An edit rewrites the answer for one (concept, attribute) pair.

pub mod eval;
pub mod studies;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::numerics::{SeedStream, Tensor};
use crate::scalar::Scalar;
use crate::surrogate::{SeqInput, VisualInput, END_TOKEN};

pub use eval::{evaluate, lifelong_run, single_edit_baseline, trajectory_csv, EvalPoint, Metrics};

const QUESTION_MARK: usize = 1;
const FACT_MARK: usize = 2;
const FIRST_TEMPLATE_TOKEN: usize = 3;

/// How token ids are allotted to the roles of the synthetic language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub attributes: usize,
    pub templates: usize,
    pub facts: usize,
    pub vocab: usize,
}

impl TokenLayout {
    fn fact_base(&self) -> usize {
        FIRST_TEMPLATE_TOKEN + 2 * self.attributes * self.templates
    }

    pub fn answer_tokens(&self) -> std::ops::Range<usize> {
        self.fact_base() + self.facts..self.vocab
    }

    /// Prompt asking about `attribute` with wording `template`.
    pub fn attribute_prompt(&self, attribute: usize, template: usize) -> Vec<usize> {
        let base = FIRST_TEMPLATE_TOKEN + 2 * (attribute * self.templates + template);
        vec![base, base + 1, QUESTION_MARK]
    }

    pub fn fact_prompt(&self, fact: usize) -> Vec<usize> {
        vec![FACT_MARK, self.fact_base() + fact, QUESTION_MARK]
    }
}

/// Image features as stored in benchmark files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub empty: bool,
    pub feats: Vec<f32>,
}

impl Image {
    pub fn blank(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            empty: true,
            feats: vec![0.0; rows * cols],
        }
    }

    pub fn to_input<T: Scalar>(&self) -> VisualInput<T> {
        if self.empty {
            return VisualInput::empty(self.rows, self.cols);
        }
        let data = self.feats.iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
        VisualInput::new(Tensor::new([self.rows, self.cols], data).expect("image shape"))
    }
}

/// An (image, prompt, output) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image: Image,
    pub prompt: Vec<usize>,
    pub output: Vec<usize>,
}

impl Query {
    pub fn to_input<T: Scalar>(&self) -> SeqInput<T> {
        SeqInput::new(self.image.to_input(), self.prompt.clone(), self.output.clone())
    }

    /// The same query without its output tokens.
    pub fn prompt_only<T: Scalar>(&self) -> SeqInput<T> {
        SeqInput::new(self.image.to_input(), self.prompt.clone(), Vec::new())
    }
}

/// One edit with its generality and locality companions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub concept: usize,
    pub attribute: usize,
    /// The edit itself; `output` is the new target.
    pub edit: Query,
    /// The answer before editing.
    pub base_answer: Vec<usize>,
    /// Fresh renderings of the same concept, same prompt and target.
    pub gen_modal: Vec<Query>,
    /// Same image, alternative prompt wordings, same target.
    pub gen_text: Vec<Query>,
    /// Unrelated concept with its own (unedited) answer.
    pub loc_modal: Query,
    /// No image, unrelated fact prompt with its answer.
    pub loc_text: Query,
}

/// Concept pools of the synthetic world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Train,
    Eval,
    Locality,
}

/// The generated world plus the lifelong edit stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub cfg: BenchmarkConfig,
    pub layout: TokenLayout,
    pub n_v: usize,
    pub d_img: usize,
    prototypes: Vec<Vec<f32>>,
    answers: Vec<Vec<Vec<usize>>>,
    fact_answers: Vec<Vec<usize>>,
    pub stream: Vec<EditRecord>,
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig, n_v: usize, d_img: usize, vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = TokenLayout {
            attributes: cfg.attributes,
            templates: cfg.templates,
            facts: cfg.facts,
            vocab,
        };
        if layout.answer_tokens().len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary of {vocab} leaves fewer than two answer tokens"
            )));
        }
        let seeds = SeedStream::new(seed);
        let mut rng = seeds.rng("benchmark.world");
        let total = cfg.train_concepts + cfg.eval_concepts + cfg.locality_concepts;
        let normal = rand_distr::StandardNormal;
        let prototypes = (0..total)
            .map(|_| (0..n_v * d_img).map(|_| rng.sample::<f32, _>(normal)).collect())
            .collect();
        let answer_pool: Vec<usize> = layout.answer_tokens().collect();
        let draw_answer = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..cfg.answer_len).map(|_| *answer_pool.choose(rng).unwrap()).collect()
        };
        let answers = (0..total)
            .map(|_| (0..cfg.attributes).map(|_| draw_answer(&mut rng)).collect())
            .collect();
        let fact_answers = (0..cfg.facts).map(|_| draw_answer(&mut rng)).collect();
        let mut bench = Self {
            cfg: cfg.clone(),
            layout,
            n_v,
            d_img,
            prototypes,
            answers,
            fact_answers,
            stream: Vec::new(),
        };
        let mut rng = seeds.rng("benchmark.stream");
        let mut pairs: Vec<(usize, usize)> = bench
            .concepts(Pool::Eval)
            .flat_map(|c| (0..cfg.attributes).map(move |a| (c, a)))
            .collect();
        pairs.shuffle(&mut rng);
        bench.stream = pairs[..cfg.stream_len]
            .iter()
            .map(|&(c, a)| bench.edit_record(c, a, Pool::Locality, &mut rng))
            .collect();
        Ok(bench)
    }

    pub fn concepts(&self, pool: Pool) -> std::ops::Range<usize> {
        let (t, e, l) = (self.cfg.train_concepts, self.cfg.eval_concepts, self.cfg.locality_concepts);
        match pool {
            Pool::Train => 0..t,
            Pool::Eval => t..t + e,
            Pool::Locality => t + e..t + e + l,
        }
    }

    pub fn concept_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn base_answer(&self, concept: usize, attribute: usize) -> &[usize] {
        &self.answers[concept][attribute]
    }

    /// A rendering of `concept` with fresh Gaussian noise.
    pub fn render(&self, concept: usize, rng: &mut impl Rng) -> Image {
        let sigma = self.cfg.noise as f32;
        let feats = self.prototypes[concept]
            .iter()
            .map(|&p| {
                let z: f32 = rng.sample(rand_distr::StandardNormal);
                p + sigma * z
            })
            .collect();
        Image {
            rows: self.n_v,
            cols: self.d_img,
            empty: false,
            feats,
        }
    }

    /// A target answer differing from `base` at every position.
    pub fn new_target(&self, base: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let pool = self.layout.answer_tokens();
        base.iter()
            .map(|&b| loop {
                let t = rng.random_range(pool.clone());
                if t != b {
                    break t;
                }
            })
            .collect()
    }

    /// Base-mapping query about `concept`'s `attribute`.
    pub fn base_query(&self, concept: usize, attribute: usize, template: usize, rng: &mut impl Rng) -> Query {
        Query {
            image: self.render(concept, rng),
            prompt: self.layout.attribute_prompt(attribute, template),
            output: self.answers[concept][attribute].clone(),
        }
    }

    pub fn fact_query(&self, fact: usize) -> Query {
        Query {
            image: Image::blank(self.n_v, self.d_img),
            prompt: self.layout.fact_prompt(fact),
            output: self.fact_answers[fact].clone(),
        }
    }

    /// Builds an edit of (`concept`, `attribute`) with companions; the modal
    /// locality probe uses a concept from `loc_pool` other than `concept`.
    pub fn edit_record(&self, concept: usize, attribute: usize, loc_pool: Pool, rng: &mut impl Rng) -> EditRecord {
        let t = self.cfg.templates;
        let template = rng.random_range(0..t);
        let image = self.render(concept, rng);
        let base = self.answers[concept][attribute].clone();
        let target = self.new_target(&base, rng);
        let prompt = self.layout.attribute_prompt(attribute, template);
        let gen_modal = vec![Query {
            image: self.render(concept, rng),
            prompt: prompt.clone(),
            output: target.clone(),
        }];
        let gen_text = (0..t)
            .filter(|&u| u != template)
            .map(|u| Query {
                image: image.clone(),
                prompt: self.layout.attribute_prompt(attribute, u),
                output: target.clone(),
            })
            .collect();
        let loc_concept = loop {
            let c = rng.random_range(self.concepts(loc_pool));
            if c != concept {
                break c;
            }
        };
        let loc_modal = self.base_query(
            loc_concept,
            rng.random_range(0..self.cfg.attributes),
            rng.random_range(0..t),
            rng,
        );
        let loc_text = self.fact_query(rng.random_range(0..self.cfg.facts));
        EditRecord {
            concept,
            attribute,
            edit: Query { image, prompt, output: target },
            base_answer: base,
            gen_modal,
            gen_text,
            loc_modal,
            loc_text,
        }
    }

    /// Every (concept, attribute, template) of the base mapping plus every
    /// fact, outputs terminated by the end token, images drawn from `rng`.
    pub fn pretrain_set(&self, rng: &mut impl Rng) -> Vec<Query> {
        let mut out = Vec::new();
        for c in 0..self.concept_count() {
            for a in 0..self.cfg.attributes {
                for t in 0..self.cfg.templates {
                    out.push(terminated(self.base_query(c, a, t, rng)));
                }
            }
        }
        out.extend((0..self.cfg.facts).map(|f| terminated(self.fact_query(f))));
        out
    }

    /// A pretraining batch with fresh image noise.
    pub fn pretrain_batch<T: Scalar>(&self, rng: &mut impl Rng, n: usize) -> Vec<SeqInput<T>> {
        let image_pairs = self.concept_count() * self.cfg.attributes * self.cfg.templates;
        let total = image_pairs + self.cfg.facts;
        (0..n)
            .map(|_| {
                let i = rng.random_range(0..total);
                let q = if i < image_pairs {
                    let (c, rest) = (i / (self.cfg.attributes * self.cfg.templates), i % (self.cfg.attributes * self.cfg.templates));
                    self.base_query(c, rest / self.cfg.templates, rest % self.cfg.templates, rng)
                } else {
                    self.fact_query(i - image_pairs)
                };
                terminated(q).to_input()
            })
            .collect()
    }

    /// Writes the edit stream as JSON lines.
    pub fn write_stream(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.stream)
    }
}

fn terminated(mut q: Query) -> Query {
    q.output.push(END_TOKEN);
    q
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            train_concepts: 4,
            eval_concepts: 3,
            locality_concepts: 2,
            attributes: 2,
            templates: 2,
            facts: 3,
            answer_len: 2,
            noise: 0.3,
            stream_len: 5,
            eval_points: vec![1, 5],
        }
    }

    #[test]
    fn prompts_are_distinct_per_attribute_and_template() {
        let b = Benchmark::generate(&small(), 2, 3, 32, 7).unwrap();
        let mut seen = std::collections::HashSet::new();
        for a in 0..2 {
            for t in 0..2 {
                assert!(seen.insert(b.layout.attribute_prompt(a, t)));
            }
        }
        for f in 0..3 {
            assert!(seen.insert(b.layout.fact_prompt(f)));
        }
        let answers = b.layout.answer_tokens();
        assert!(seen.iter().flatten().all(|t| !answers.contains(t)));
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        assert!(Benchmark::generate(&small(), 2, 3, 15, 7).is_err());
    }
}
