//! The trainable editor: expert generator, edit-end and input-end feature
//! extractors and the visual sentinel, sharing one parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{EditorConfig, SurrogateConfig, Variant};
use crate::error::{Error, Result};
use crate::generator::{apply_expert, AdapterMode, Expert, GeneratorIds};
use crate::numerics::{Graph, SeedStream, Tensor};
use crate::params::{ParamId, ParamStore};
use crate::repository::{Fingerprint, Fusion, Repository, RoutedSet};
use crate::routing::{End, FeatureExtractor, RoutingFeatures, VisualMode};
use crate::scalar::Scalar;
use crate::surrogate::{HiddenStates, SeqInput, Spans, Surrogate};

pub const CHECKPOINT_KIND: &str = "editor";

#[derive(Clone, Debug)]
pub struct Editor<T> {
    cfg: EditorConfig,
    d: usize,
    n_v: usize,
    params: ParamStore<T>,
    pub generator: GeneratorIds,
    pub edit_fe: FeatureExtractor,
    pub input_fe: FeatureExtractor,
    pub sentinel: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct EditorHeader {
    pub config: EditorConfig,
    pub fingerprint: Fingerprint,
    pub d_a: usize,
    pub adapters: AdapterMode,
}

/// Row indices of one span for every sequence of a stack.
pub fn span_rows(spans: Spans, count: usize, range: std::ops::Range<usize>) -> Vec<usize> {
    let n = spans.len();
    (0..count).flat_map(|s| range.clone().map(move |i| s * n + i)).collect()
}

/// Input-end routing inputs for a stack of queries.
#[derive(Clone, Debug)]
pub struct QueryFeatures<T> {
    pub visual: Tensor<T>,
    pub textual: Tensor<T>,
    pub sentinel: Tensor<T>,
}

impl<T: Scalar> Editor<T> {
    pub fn new(cfg: EditorConfig, surrogate: &SurrogateConfig, seeds: &SeedStream) -> Result<Self> {
        cfg.validate()?;
        surrogate.validate()?;
        let mut rng = seeds.rng("editor.init");
        let mut p = ParamStore::new();
        let (d, d_a, dim) = (surrogate.d, cfg.d_a(), cfg.feature_dim());
        let generator = GeneratorIds::new(&mut p, d, cfg.d_m, d_a, cfg.r, &mut rng);
        let edit_fe = FeatureExtractor::new(&mut p, "edit_fe", d, dim, d_a, &mut rng);
        let input_fe = FeatureExtractor::new(&mut p, "input_fe", d, dim, d_a, &mut rng);
        let sentinel = p.add(
            "sentinel",
            Tensor::normal([surrogate.n_v, d], 1.0, &mut rng),
        );
        Ok(Self {
            cfg,
            d,
            n_v: surrogate.n_v,
            params: p,
            generator,
            edit_fe,
            input_fe,
            sentinel,
        })
    }

    pub fn config(&self) -> &EditorConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn visual_mode(&self) -> VisualMode {
        match self.cfg.variant {
            Variant::DirectVisual => VisualMode::Direct,
            _ => VisualMode::PromptConditioned,
        }
    }

    pub fn fusion(&self) -> Fusion {
        match self.cfg.variant {
            Variant::NoSoftRouting => Fusion::Uniform,
            _ => Fusion::Soft,
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            r: self.cfg.r,
            d_m: self.cfg.d_m,
            k: self.cfg.k,
            n_v: self.n_v,
            d: self.d,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn new_repository(&self) -> Repository<T> {
        Repository::new(self.fingerprint(), self.cfg.divisor())
    }

    pub fn cast<U: Scalar>(&self) -> Editor<U> {
        Editor {
            cfg: self.cfg.clone(),
            d: self.d,
            n_v: self.n_v,
            params: self.params.cast(),
            generator: self.generator.clone(),
            edit_fe: self.edit_fe.clone(),
            input_fe: self.input_fe.clone(),
            sentinel: self.sentinel,
        }
    }

    fn check_compatible(&self, s: &Surrogate<T>) -> Result<()> {
        let c = s.config();
        if c.d != self.d || c.n_v != self.n_v {
            return Err(Error::Fingerprint {
                expected: format!("d={} n_v={}", self.d, self.n_v),
                found: format!("d={} n_v={}", c.d, c.n_v),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- editing

    /// Expert and edit-end features for one edit sample (image, prompt, target).
    pub fn generate(&self, surrogate: &Surrogate<T>, sample: &SeqInput<T>, t: u64) -> Result<(Expert<T>, RoutingFeatures<T>)> {
        self.check_compatible(surrogate)?;
        let sp = sample.spans();
        if sp.n_v == 0 || sp.n_p == 0 || sp.n_o == 0 {
            return Err(Error::Contract("edit samples need image, prompt and target".into()));
        }
        let hs = surrogate.forward_to_layer(std::slice::from_ref(sample), surrogate.config().l_e)?;
        self.generate_from_states(&hs, t)
    }

    /// Same as [`generate`](Self::generate) from layer activations of one sequence.
    pub fn generate_from_states(&self, hs: &HiddenStates<T>, t: u64) -> Result<(Expert<T>, RoutingFeatures<T>)> {
        if hs.count != 1 {
            return Err(Error::Contract("expert generation takes one sequence".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let h = g.constant(&hs.h);
        let (u, v) = self.generator.generate(&mut g, &b, h, 1)?;
        let hv = g.constant(&hs.visual(0));
        let hp = g.constant(&hs.prompt(0));
        let f = self.edit_fe.extract(&mut g, &b, hv, hp, 1, self.visual_mode())?;
        let expert = Expert {
            u: g.value(u).clone(),
            v: g.value(v).clone(),
            id: 0,
            t,
        };
        let feats = RoutingFeatures::new(g.value(f.visual).clone(), g.value(f.textual).clone(), End::Edit)?;
        Ok((expert, feats))
    }

    /// Generates and inserts the expert for one edit; returns its id.
    pub fn apply_edit(&self, surrogate: &Surrogate<T>, repo: &mut Repository<T>, sample: &SeqInput<T>) -> Result<u64> {
        if repo.fingerprint() != self.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.fingerprint().to_string(),
                found: repo.fingerprint().to_string(),
            });
        }
        let t = repo.len() as u64 + 1;
        let (e, f) = self.generate(surrogate, sample, t)?;
        repo.insert(e.u, e.v, t, f)
    }

    // ---------------------------------------------------------------- routing at inference

    /// Input-end features (and sentinel thresholds) of stacked queries.
    pub fn query_features(&self, hs: &HiddenStates<T>) -> Result<QueryFeatures<T>> {
        if hs.spans.n_p == 0 {
            return Err(Error::Contract("routing needs a non-empty prompt".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let h = g.constant(&hs.h);
        let hv = g.gather_rows(h, &span_rows(hs.spans, hs.count, hs.spans.visual()))?;
        let hp = g.gather_rows(h, &span_rows(hs.spans, hs.count, hs.spans.prompt()))?;
        let mode = self.visual_mode();
        let f = self.input_fe.extract(&mut g, &b, hv, hp, hs.count, mode)?;
        let s = self.input_fe.sentinel(&mut g, &b, &f, b[self.sentinel], hs.count, mode)?;
        Ok(QueryFeatures {
            visual: g.value(f.visual).clone(),
            textual: g.value(f.textual).clone(),
            sentinel: g.value(s).clone(),
        })
    }

    /// Routed sets of every query in a stack.
    pub fn route(&self, repo: &Repository<T>, hs: &HiddenStates<T>) -> Result<Vec<RoutedSet<T>>> {
        let q = self.query_features(hs)?;
        let row = |t: &Tensor<T>, i: usize| Tensor::new([1, t.cols()], t.row(i).to_vec());
        (0..hs.count)
            .map(|i| repo.hard_route(&row(&q.visual, i)?, &row(&q.sentinel, i)?, &row(&q.textual, i)?))
            .collect()
    }

    /// Edits stacked layer activations with the repository's experts.
    pub fn adapt_states(&self, repo: &Repository<T>, hs: &HiddenStates<T>) -> Result<HiddenStates<T>> {
        if repo.is_empty() {
            return Ok(hs.clone());
        }
        let routed = self.route(repo, hs)?;
        let n = hs.spans.len();
        let mut out = hs.h.clone();
        let d = self.d;
        for (s, rs) in routed.iter().enumerate() {
            if rs.is_empty() {
                continue;
            }
            let weights = repo.route_weights(rs, self.fusion())?;
            let h = hs.sequence(s);
            let adapted = repo.adapt(&h, rs, &weights, |h, e| apply_expert(&self.params, &self.generator, h, e))?;
            out.data_mut()[s * n * d..(s + 1) * n * d].copy_from_slice(adapted.data());
        }
        Ok(HiddenStates {
            h: out,
            spans: hs.spans,
            count: hs.count,
        })
    }

    /// Logits of the edited model for a batch sharing one span layout.
    pub fn forward(&self, surrogate: &Surrogate<T>, repo: &Repository<T>, batch: &[SeqInput<T>]) -> Result<Tensor<T>> {
        self.check_compatible(surrogate)?;
        surrogate.forward_edited(batch, |h| self.adapt_states(repo, h))
    }

    pub fn greedy_decode(
        &self,
        surrogate: &Surrogate<T>,
        repo: &Repository<T>,
        query: &SeqInput<T>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        surrogate.greedy_decode_with(&query.visual, &query.prompt, max_len, |h| self.adapt_states(repo, h))
    }

    // ---------------------------------------------------------------- persistence

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, CHECKPOINT_KIND, self.header())
    }

    pub(crate) fn header(&self) -> EditorHeader {
        EditorHeader {
            config: self.cfg.clone(),
            fingerprint: self.fingerprint(),
            d_a: self.cfg.d_a(),
            adapters: self.generator.adapter_mode(),
        }
    }

    /// Loads an editor built for `surrogate`; the recorded shapes must match.
    pub fn load(path: &Path, surrogate: &SurrogateConfig) -> Result<Self> {
        let manifest: crate::numerics::blob::Manifest<EditorHeader> = crate::numerics::blob::read_json(path)?;
        let mut editor = Self::new(manifest.header.config.clone(), surrogate, &SeedStream::new(0))?;
        if manifest.header.fingerprint != editor.fingerprint() {
            return Err(Error::Fingerprint {
                expected: editor.fingerprint().to_string(),
                found: manifest.header.fingerprint.to_string(),
            });
        }
        editor.params.load_into::<EditorHeader>(path, CHECKPOINT_KIND)?;
        Ok(editor)
    }
}
