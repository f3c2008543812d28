//! The lifelong expert store: append-only entries, hard routing against the
//! sentinel threshold, fused weights, and durable serialisation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Expert;
use crate::numerics::blob::{self, BlobEntry};
use crate::numerics::graph::sigmoid;
use crate::numerics::Tensor;
use crate::routing::{similarity, End, RoutingFeatures};
use crate::scalar::Scalar;

pub const REPOSITORY_VERSION: u32 = 1;

/// Shapes a repository was built for; loading requires an exact match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub r: usize,
    pub d_m: usize,
    pub k: usize,
    pub n_v: usize,
    pub d: usize,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r={} d_m={} k={} n_v={} d={}", self.r, self.d_m, self.k, self.n_v, self.d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub expert: Expert<T>,
    pub features: RoutingFeatures<T>,
}

/// How the hard-routed experts are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// `sigmoid(s) * softmax(s)` over the selected set.
    Soft,
    /// `1 / |selected|`.
    Uniform,
}

/// Entries that passed the hard filter for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedSet<T> {
    /// Entry positions with their visual scores, in repository order.
    pub selected: Vec<(usize, f64)>,
    pub threshold: f64,
    /// The query's input-end textual feature.
    pub textual: Tensor<T>,
}

impl<T> RoutedSet<T> {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|&(i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Repository<T> {
    fingerprint: Fingerprint,
    divisor: f64,
    entries: Vec<Entry<T>>,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: u64,
    t: u64,
    u: BlobEntry,
    v: BlobEntry,
    visual: BlobEntry,
    textual: BlobEntry,
}

#[derive(Serialize, Deserialize)]
struct RepositoryManifest {
    kind: String,
    version: u32,
    fingerprint: Fingerprint,
    divisor: f64,
    count: usize,
    next_id: u64,
    entries: Vec<EntryRecord>,
    blob: String,
    sha256: String,
}

impl<T: Scalar> Repository<T> {
    pub fn new(fingerprint: Fingerprint, divisor: f64) -> Self {
        Self {
            fingerprint,
            divisor,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn divisor(&self) -> f64 {
        self.divisor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    /// Appends an expert with its edit-end features; returns the new id.
    pub fn insert(&mut self, u: Tensor<T>, v: Tensor<T>, t: u64, features: RoutingFeatures<T>) -> Result<u64> {
        if features.end() != End::Edit {
            return Err(Error::Contract("repository entries need edit-end features".into()));
        }
        let fp = self.fingerprint;
        let shape = [fp.r, fp.d_m];
        if u.shape() != shape || v.shape() != shape {
            return Err(Error::shape("repository insert", u.shape(), &shape));
        }
        if features.visual.shape() != [1, fp.k * fp.d_m] {
            return Err(Error::shape("repository insert", features.visual.shape(), &[1, fp.k * fp.d_m]));
        }
        let id = self.next_id;
        self.entries.push(Entry {
            expert: Expert { u, v, id, t },
            features,
        });
        self.next_id += 1;
        Ok(id)
    }

    /// Keeps the entries whose visual score strictly beats the sentinel's.
    pub fn hard_route(&self, visual: &Tensor<T>, sentinel: &Tensor<T>, textual: &Tensor<T>) -> Result<RoutedSet<T>> {
        let threshold = similarity(visual.data(), sentinel.data(), self.divisor)?;
        let mut selected = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let s = similarity(visual.data(), e.features.visual.data(), self.divisor)?;
            if s > threshold {
                selected.push((i, s));
            }
        }
        Ok(RoutedSet {
            selected,
            threshold,
            textual: textual.clone(),
        })
    }

    /// Fusion weight of each selected entry.
    pub fn route_weights(&self, rs: &RoutedSet<T>, fusion: Fusion) -> Result<Vec<f64>> {
        if rs.is_empty() {
            return Err(Error::Contract("fusion weights of an empty routed set".into()));
        }
        match fusion {
            Fusion::Uniform => Ok(vec![1.0 / rs.selected.len() as f64; rs.selected.len()]),
            Fusion::Soft => {
                let scores = rs
                    .selected
                    .iter()
                    .map(|&(i, _)| similarity(rs.textual.data(), self.entries[i].features.textual.data(), self.divisor))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(soft_route_weights(&scores))
            }
        }
    }

    /// `h + sum_e w_e relu((h P_dn) U_e^T) V_e P_up` for one sequence `h`
    /// (`N x d`); returns `h` unchanged when nothing is selected.
    pub fn adapt<F>(&self, h: &Tensor<T>, rs: &RoutedSet<T>, weights: &[f64], residual: F) -> Result<Tensor<T>>
    where
        F: Fn(&Tensor<T>, &Expert<T>) -> Result<Tensor<T>>,
    {
        if rs.is_empty() {
            return Ok(h.clone());
        }
        if weights.len() != rs.selected.len() {
            return Err(Error::shape("adapt weights", &[weights.len()], &[rs.selected.len()]));
        }
        let mut out = h.clone();
        for (&(i, _), &w) in rs.selected.iter().zip(weights) {
            let r = residual(h, &self.entries[i].expert)?;
            if r.shape() != h.shape() {
                return Err(Error::shape("adapt residual", r.shape(), h.shape()));
            }
            let w = T::from_f64_lossy(w);
            for (o, &x) in out.data_mut().iter_mut().zip(r.data()) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.entries.iter().flat_map(|e| {
            let id = e.expert.id;
            [
                (format!("{id}.u"), &e.expert.u),
                (format!("{id}.v"), &e.expert.v),
                (format!("{id}.visual"), &e.features.visual),
                (format!("{id}.textual"), &e.features.textual),
            ]
        });
        let (bytes, layout) = blob::pack(named);
        let bpath = blob::blob_path(path);
        blob::write_bytes(&bpath, &bytes)?;
        let entries = self
            .entries
            .iter()
            .zip(layout.chunks(4))
            .map(|(e, c)| EntryRecord {
                id: e.expert.id,
                t: e.expert.t,
                u: c[0].clone(),
                v: c[1].clone(),
                visual: c[2].clone(),
                textual: c[3].clone(),
            })
            .collect();
        let manifest = RepositoryManifest {
            kind: "repository".into(),
            version: REPOSITORY_VERSION,
            fingerprint: self.fingerprint,
            divisor: self.divisor,
            count: self.entries.len(),
            next_id: self.next_id,
            entries,
            blob: bpath
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: blob::sha256_hex(&bytes),
        };
        blob::write_json(path, &manifest)
    }

    /// Loads a repository, refusing a fingerprint other than `expected`.
    pub fn load(path: &Path, expected: Fingerprint) -> Result<Self> {
        let m: RepositoryManifest = blob::read_json(path)?;
        let format = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if m.kind != "repository" || m.version != REPOSITORY_VERSION {
            return Err(format(format!("not a v{REPOSITORY_VERSION} repository")));
        }
        if m.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: m.fingerprint.to_string(),
            });
        }
        if m.count != m.entries.len() {
            return Err(format(format!("count {} but {} entries", m.count, m.entries.len())));
        }
        let bpath = path.with_file_name(&m.blob);
        let bytes = blob::read_blob_checked(&bpath, &m.sha256)?;
        let mut entries = Vec::with_capacity(m.count);
        let mut last: Option<u64> = None;
        for r in &m.entries {
            if last.is_some_and(|l| r.id <= l) || r.id >= m.next_id {
                return Err(format(format!("entry ids out of order at {}", r.id)));
            }
            last = Some(r.id);
            let features = RoutingFeatures::new(
                blob::unpack_entry(&bytes, &r.visual, &bpath)?,
                blob::unpack_entry(&bytes, &r.textual, &bpath)?,
                End::Edit,
            )?;
            entries.push(Entry {
                expert: Expert {
                    u: blob::unpack_entry(&bytes, &r.u, &bpath)?,
                    v: blob::unpack_entry(&bytes, &r.v, &bpath)?,
                    id: r.id,
                    t: r.t,
                },
                features,
            });
        }
        Ok(Self {
            fingerprint: m.fingerprint,
            divisor: m.divisor,
            entries,
            next_id: m.next_id,
        })
    }
}

/// `sigmoid(s_e) * softmax(s)_e`, evaluated in f64.
pub fn soft_route_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    scores
        .iter()
        .zip(&exps)
        .map(|(&s, &e)| sigmoid(s) * e / z)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_score_gets_half() {
        assert_eq!(soft_route_weights(&[0.0]), vec![0.5]);
    }
}
