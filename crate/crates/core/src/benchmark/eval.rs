//! Reliability, generality and locality over a lifelong edit stream.

use serde::{Deserialize, Serialize};

use crate::benchmark::{EditRecord, Query};
use crate::editor::Editor;
use crate::error::Result;
use crate::repository::Repository;
use crate::scalar::Scalar;
use crate::surrogate::{group_by_spans, output_predictions, SeqInput, Surrogate};

const CHUNK: usize = 128;

/// Token-level accuracies (and exact-match rates) after `t` edits.
///
/// `rel` is `None` when no edit has been applied yet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rel: Option<f64>,
    pub t_gen: Option<f64>,
    pub m_gen: Option<f64>,
    pub t_loc: f64,
    pub m_loc: f64,
    pub exact_rel: Option<f64>,
    pub exact_t_gen: Option<f64>,
    pub exact_m_gen: Option<f64>,
}

impl Metrics {
    /// Mean of the five token metrics that are defined.
    pub fn average(&self) -> f64 {
        let vals: Vec<f64> = [self.rel, self.t_gen, self.m_gen, Some(self.t_loc), Some(self.m_loc)]
            .into_iter()
            .flatten()
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub const CSV_HEADER: &'static str = "rel,t_gen,m_gen,t_loc,m_loc,avg,exact_rel,exact_t_gen,exact_m_gen";

    pub fn csv_row(&self) -> String {
        let o = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{}",
            o(self.rel),
            o(self.t_gen),
            o(self.m_gen),
            self.t_loc,
            self.m_loc,
            self.average(),
            o(self.exact_rel),
            o(self.exact_t_gen),
            o(self.exact_m_gen)
        )
    }
}

/// Metrics at one point of a lifelong run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub edits: usize,
    pub repo_size: usize,
    pub metrics: Metrics,
}

/// Teacher-forced argmax predictions on the output span of every query.
fn predictions<T, F>(queries: &[SeqInput<T>], mut logits: F) -> Result<Vec<Vec<usize>>>
where
    T: Scalar,
    F: FnMut(&[SeqInput<T>]) -> Result<crate::numerics::Tensor<T>>,
{
    let mut out = vec![Vec::new(); queries.len()];
    for group in group_by_spans(queries) {
        for chunk in group.chunks(CHUNK) {
            let batch: Vec<SeqInput<T>> = chunk.iter().map(|&i| queries[i].clone()).collect();
            let l = logits(&batch)?;
            for (&i, p) in chunk.iter().zip(output_predictions(&l, batch[0].spans(), batch.len())) {
                out[i] = p;
            }
        }
    }
    Ok(out)
}

/// Accuracy and exact-match rate of predictions against reference tokens.
fn score(preds: &[Vec<usize>], refs: &[&[usize]]) -> Option<(f64, f64)> {
    let total: usize = refs.iter().map(|r| r.len()).sum();
    if refs.is_empty() || total == 0 {
        return None;
    }
    let hits: usize = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| p.iter().zip(r.iter()).filter(|(a, b)| a == b).count())
        .sum();
    let exact = preds.iter().zip(refs).filter(|(p, r)| p.as_slice() == **r).count();
    Some((hits as f64 / total as f64, exact as f64 / refs.len() as f64))
}

/// Metrics of the model edited by `repo` over `records` (the edits applied so far).
///
/// Reliability and generality compare teacher-forced argmax predictions with
/// the edit target; locality compares the edited model's predictions with
/// the unedited model's, both teacher-forced on the recorded base answer.
pub fn evaluate<T: Scalar>(
    editor: &Editor<T>,
    surrogate: &Surrogate<T>,
    repo: &Repository<T>,
    records: &[EditRecord],
) -> Result<Metrics> {
    let edited = |b: &[SeqInput<T>]| editor.forward(surrogate, repo, b);
    let inputs = |qs: Vec<&Query>| -> (Vec<SeqInput<T>>, Vec<Vec<usize>>) {
        (qs.iter().map(|q| q.to_input()).collect(), qs.iter().map(|q| q.output.clone()).collect())
    };
    let set = |qs: Vec<&Query>| -> Result<Option<(f64, f64)>> {
        let (x, refs) = inputs(qs);
        let p = predictions(&x, edited)?;
        Ok(score(&p, &refs.iter().map(|r| r.as_slice()).collect::<Vec<_>>()))
    };
    let rel = set(records.iter().map(|r| &r.edit).collect())?;
    let t_gen = set(records.iter().flat_map(|r| &r.gen_text).collect())?;
    let m_gen = set(records.iter().flat_map(|r| &r.gen_modal).collect())?;
    let loc = |qs: Vec<&Query>| -> Result<f64> {
        if qs.is_empty() {
            return Ok(1.0);
        }
        let (x, _) = inputs(qs);
        let base = predictions(&x, |b| surrogate.forward(b))?;
        let now = if repo.is_empty() { base.clone() } else { predictions(&x, edited)? };
        let refs: Vec<&[usize]> = base.iter().map(|v| v.as_slice()).collect();
        Ok(score(&now, &refs).map_or(1.0, |s| s.0))
    };
    let t_loc = loc(records.iter().map(|r| &r.loc_text).collect())?;
    let m_loc = loc(records.iter().map(|r| &r.loc_modal).collect())?;
    Ok(Metrics {
        rel: rel.map(|s| s.0),
        t_gen: t_gen.map(|s| s.0),
        m_gen: m_gen.map(|s| s.0),
        t_loc,
        m_loc,
        exact_rel: rel.map(|s| s.1),
        exact_t_gen: t_gen.map(|s| s.1),
        exact_m_gen: m_gen.map(|s| s.1),
    })
}

/// Applies `stream` one edit at a time, evaluating at each requested count.
/// Counts beyond the stream length are skipped. Returns the final repository.
pub fn lifelong_run<T: Scalar>(
    editor: &Editor<T>,
    surrogate: &Surrogate<T>,
    stream: &[EditRecord],
    eval_points: &[usize],
) -> Result<(Repository<T>, Vec<EvalPoint>)> {
    let mut points: Vec<usize> = eval_points.iter().copied().filter(|&p| p <= stream.len()).collect();
    points.sort_unstable();
    points.dedup();
    let mut repo = editor.new_repository();
    let mut out = Vec::with_capacity(points.len());
    let mut next = points.iter().peekable();
    for t in 0..=stream.len() {
        if t > 0 {
            editor.apply_edit(surrogate, &mut repo, &stream[t - 1].edit.to_input())?;
        }
        while next.peek().is_some_and(|&&p| p == t) {
            next.next();
            out.push(EvalPoint {
                edits: t,
                repo_size: repo.len(),
                metrics: evaluate(editor, surrogate, &repo, &stream[..t])?,
            });
        }
        if next.peek().is_none() {
            break;
        }
    }
    Ok((repo, out))
}

/// Mean metrics when each record is edited alone into an empty repository.
pub fn single_edit_baseline<T: Scalar>(editor: &Editor<T>, surrogate: &Surrogate<T>, records: &[EditRecord]) -> Result<Metrics> {
    let mut acc = [0.0f64; 8];
    for r in records {
        let mut repo = editor.new_repository();
        editor.apply_edit(surrogate, &mut repo, &r.edit.to_input())?;
        let m = evaluate(editor, surrogate, &repo, std::slice::from_ref(r))?;
        let vals = [
            m.rel.unwrap_or(0.0),
            m.t_gen.unwrap_or(0.0),
            m.m_gen.unwrap_or(0.0),
            m.t_loc,
            m.m_loc,
            m.exact_rel.unwrap_or(0.0),
            m.exact_t_gen.unwrap_or(0.0),
            m.exact_m_gen.unwrap_or(0.0),
        ];
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v;
        }
    }
    let n = records.len().max(1) as f64;
    let has = !records.is_empty();
    let opt = |x: f64| has.then_some(x / n);
    Ok(Metrics {
        rel: opt(acc[0]),
        t_gen: opt(acc[1]),
        m_gen: opt(acc[2]),
        t_loc: if has { acc[3] / n } else { 1.0 },
        m_loc: if has { acc[4] / n } else { 1.0 },
        exact_rel: opt(acc[5]),
        exact_t_gen: opt(acc[6]),
        exact_m_gen: opt(acc[7]),
    })
}

/// Writes a trajectory as CSV with an `edits,repo_size` prefix.
pub fn trajectory_csv(points: &[EvalPoint]) -> String {
    let mut s = format!("edits,repo_size,{}\n", Metrics::CSV_HEADER);
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.edits, p.repo_size, p.metrics.csv_row()));
    }
    s
}
