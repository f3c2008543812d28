//! Configuration for every stage of a run. All structs read from and write to
//! JSON; missing fields take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub n_v: usize,
    pub d_img: usize,
    pub max_seq: usize,
    /// Layer whose input the editor intercepts.
    pub l_e: usize,
    pub ffn_mult: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 6,
            heads: 4,
            vocab: 128,
            n_v: 8,
            d_img: 16,
            max_seq: 16,
            l_e: 4,
            ffn_mult: 4,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("surrogate: {m}")));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.layers == 0 || self.l_e >= self.layers {
            return bad("need 0 <= l_e < layers");
        }
        if self.n_v == 0 || self.d_img == 0 || self.vocab < 2 || self.ffn_mult == 0 {
            return bad("n_v, d_img, ffn_mult must be positive and vocab at least 2");
        }
        if self.max_seq <= self.n_v {
            return bad("max_seq must leave room for text after the visual span");
        }
        Ok(())
    }
}

/// Editor variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Trained without the absolute soft-routing loss.
    #[serde(rename = "-sr1")]
    NoSr1,
    /// Trained without the relative soft-routing loss.
    #[serde(rename = "-sr2")]
    NoSr2,
    /// Uniform fusion over the hard-routed experts, no soft-routing losses.
    #[serde(rename = "-SR")]
    NoSoftRouting,
    /// Visual routing feature compressed directly from the visual rows.
    #[serde(rename = "HR*")]
    DirectVisual,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSr1,
        Variant::NoSr2,
        Variant::NoSoftRouting,
        Variant::DirectVisual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSr1 => "-sr1",
            Variant::NoSr2 => "-sr2",
            Variant::NoSoftRouting => "-SR",
            Variant::DirectVisual => "HR*",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" | "none" => Ok(Variant::Full),
            "-sr1" => Ok(Variant::NoSr1),
            "-sr2" => Ok(Variant::NoSr2),
            "-SR" => Ok(Variant::NoSoftRouting),
            "HR*" => Ok(Variant::DirectVisual),
            other => Err(Error::Config(format!("unknown ablation mode {other:?}"))),
        }
    }

    pub fn uses_sr1(self) -> bool {
        !matches!(self, Variant::NoSr1 | Variant::NoSoftRouting)
    }

    pub fn uses_sr2(self) -> bool {
        !matches!(self, Variant::NoSr2 | Variant::NoSoftRouting)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub d_m: usize,
    pub r: usize,
    pub k: usize,
    /// Internal attention width of every cross-attention block; `d_m` if unset.
    pub d_a: Option<usize>,
    /// Divisor applied to routing inner products; `sqrt(d_m)` if unset.
    pub sim_divisor: Option<f64>,
    pub variant: Variant,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            d_m: 64,
            r: 4,
            k: 4,
            d_a: None,
            sim_divisor: None,
            variant: Variant::Full,
        }
    }
}

impl EditorConfig {
    pub fn d_a(&self) -> usize {
        self.d_a.unwrap_or(self.d_m)
    }

    pub fn divisor(&self) -> f64 {
        self.sim_divisor.unwrap_or((self.d_m as f64).sqrt())
    }

    pub fn feature_dim(&self) -> usize {
        self.k * self.d_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.r == 0 || self.k == 0 || self.d_a() == 0 {
            return Err(Error::Config("editor: d_m, r, k, d_a must be positive".into()));
        }
        if !(self.divisor() > 0.0) {
            return Err(Error::Config("editor: similarity divisor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            batch: 32,
            lr: 3e-3,
            target_accuracy: 0.99,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub max_steps: usize,
    pub adam: Adam,
    pub checkpoint_every: usize,
    /// Stop once the smoothed loss has not improved for this many steps.
    pub patience: Option<usize>,
    /// Window of the moving average used by early stopping.
    pub smoothing: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            max_steps: 200_000,
            adam: Adam::default(),
            checkpoint_every: 500,
            patience: None,
            smoothing: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.checkpoint_every == 0 || self.smoothing == 0 {
            return Err(Error::Config("training: batch, checkpoint_every, smoothing must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("training: learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train_concepts: usize,
    pub eval_concepts: usize,
    pub locality_concepts: usize,
    pub attributes: usize,
    pub templates: usize,
    pub facts: usize,
    pub answer_len: usize,
    pub noise: f64,
    pub stream_len: usize,
    pub eval_points: Vec<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_concepts: 32,
            eval_concepts: 32,
            locality_concepts: 16,
            attributes: 4,
            templates: 2,
            facts: 32,
            answer_len: 2,
            noise: 0.3,
            stream_len: 100,
            eval_points: vec![1, 10, 100, 1000],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("benchmark: {m}")));
        if self.train_concepts == 0 || self.eval_concepts == 0 || self.locality_concepts == 0 {
            return bad("every concept pool must be non-empty");
        }
        if self.attributes == 0 || self.templates < 2 || self.facts == 0 || self.answer_len == 0 {
            return bad("need attributes >= 1, templates >= 2, facts >= 1, answer_len >= 1");
        }
        if self.eval_concepts * self.attributes < self.stream_len {
            return bad("eval_concepts * attributes is smaller than the edit stream");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Everything a command needs, written to the output directory before work starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub surrogate: SurrogateConfig,
    pub pretrain: PretrainConfig,
    pub editor: EditorConfig,
    pub training: TrainConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    /// A very small configuration (d = d_m = 16, r = 2, k = 2, N_v = 4,
    /// B = 2) for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            surrogate: SurrogateConfig {
                d: 16,
                layers: 2,
                heads: 2,
                vocab: 40,
                n_v: 4,
                d_img: 4,
                max_seq: 12,
                l_e: 1,
                ffn_mult: 2,
            },
            editor: EditorConfig {
                d_m: 16,
                r: 2,
                k: 2,
                ..EditorConfig::default()
            },
            training: TrainConfig {
                batch: 2,
                ..TrainConfig::default()
            },
            benchmark: BenchmarkConfig {
                train_concepts: 6,
                eval_concepts: 4,
                locality_concepts: 3,
                attributes: 2,
                templates: 2,
                facts: 4,
                stream_len: 6,
                eval_points: vec![1, 6],
                ..BenchmarkConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        self.editor.validate()?;
        self.training.validate()?;
        self.benchmark.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.training.checkpoint_every, 500);
        assert_eq!(c.editor.r, 4);
        assert_eq!(c.editor.k, 4);
        assert_eq!(c.training.batch, 8);
        assert_eq!(c.training.adam.lr, 1e-4);
    }

    #[test]
    fn rejects_bad_edit_layer_and_unknown_fields() {
        let mut c = RunConfig::default();
        c.surrogate.l_e = c.surrogate.layers;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }
}
