//! Filtered ranking metrics, query selection by mode, emergence statistics,
//! and spread-based collapse diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{first_appearance, Split, TemporalKG};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model, SnapshotForward};
use crate::numerics::{Tape, Tensor};
use crate::transfer::PrototypeState;

pub const GS_EIGEN_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryMode {
    Vanilla,
    Emerging,
    Unknown,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::Vanilla, QueryMode::Emerging, QueryMode::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Vanilla => "vanilla",
            QueryMode::Emerging => "emerging",
            QueryMode::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(QueryMode::Vanilla),
            "emerging" => Ok(QueryMode::Emerging),
            "unknown" => Ok(QueryMode::Unknown),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?}; expected vanilla, emerging or unknown"
            ))),
        }
    }
}

/// Which side of a query must be the new entity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SidePolicy {
    #[default]
    QuerySide,
    EitherSide,
}

impl SidePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "query" | "query-side" => Ok(SidePolicy::QuerySide),
            "either" | "either-side" => Ok(SidePolicy::EitherSide),
            other => Err(Error::Config(format!("unknown side policy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalMode {
    pub kind: QueryMode,
    pub policy: SidePolicy,
}

impl EvalMode {
    pub fn new(kind: QueryMode) -> Self {
        Self {
            kind,
            policy: SidePolicy::QuerySide,
        }
    }
}

/// A test query `(entity, relation, ?, timestamp)` with its true answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Query {
    pub entity: usize,
    pub relation: usize,
    pub answer: usize,
    pub timestamp: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub query: Query,
    pub filtered: usize,
    pub raw: usize,
}

/// Pessimistic ranks of `answer`: every other candidate scoring at least as
/// high (or NaN) is placed ahead. `co_true` candidates are skipped for the
/// filtered rank.
pub fn rank_scores(scores: &[f64], answer: usize, co_true: &[usize]) -> Result<(usize, usize)> {
    let target = *scores.get(answer).ok_or(Error::Index {
        what: "answer",
        index: answer,
        len: scores.len(),
    })?;
    let mut raw = 1;
    let mut skipped = 0;
    for (j, &s) in scores.iter().enumerate() {
        if j == answer || s < target {
            continue;
        }
        raw += 1;
        if co_true.contains(&j) {
            skipped += 1;
        }
    }
    Ok((raw - skipped, raw))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

/// `None` when there are no ranks.
pub fn metrics_from_ranks(ranks: &[usize]) -> Option<Metrics> {
    if ranks.is_empty() {
        return None;
    }
    let n = ranks.len() as f64;
    Some(Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits3: ranks.iter().filter(|&&r| r <= 3).count() as f64 / n,
        hits10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
        n_queries: ranks.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: QueryMode,
    pub forward: Option<Metrics>,
    pub inverse: Option<Metrics>,
    /// Mean over the directions that have queries.
    pub average: Option<Metrics>,
}

impl MetricsReport {
    pub fn from_ranks(mode: QueryMode, forward: &[usize], inverse: &[usize]) -> Self {
        let f = metrics_from_ranks(forward);
        let i = metrics_from_ranks(inverse);
        let present: Vec<Metrics> = [f, i].into_iter().flatten().collect();
        let average = (!present.is_empty()).then(|| {
            let k = present.len() as f64;
            Metrics {
                mrr: present.iter().map(|m| m.mrr).sum::<f64>() / k,
                hits3: present.iter().map(|m| m.hits3).sum::<f64>() / k,
                hits10: present.iter().map(|m| m.hits10).sum::<f64>() / k,
                n_queries: present.iter().map(|m| m.n_queries).sum(),
            }
        });
        Self {
            mode,
            forward: f,
            inverse: i,
            average,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.average.map_or(0, |m| m.n_queries)
    }

    pub fn is_empty(&self) -> bool {
        self.average.is_none()
    }

    pub fn mrr(&self) -> Option<f64> {
        self.average.map(|m| m.mrr)
    }

    /// `mode.direction.metric=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mode = self.mode.as_str();
        let _ = writeln!(out, "{mode}.n_queries={}", self.n_queries());
        if self.is_empty() {
            let _ = writeln!(out, "{mode}.status=empty");
            return out;
        }
        for (dir, m) in [("forward", self.forward), ("inverse", self.inverse), ("average", self.average)] {
            match m {
                Some(m) => {
                    let _ = writeln!(out, "{mode}.{dir}.mrr={}", m.mrr);
                    let _ = writeln!(out, "{mode}.{dir}.hits3={}", m.hits3);
                    let _ = writeln!(out, "{mode}.{dir}.hits10={}", m.hits10);
                    let _ = writeln!(out, "{mode}.{dir}.n_queries={}", m.n_queries);
                }
                None => {
                    let _ = writeln!(out, "{mode}.{dir}.n_queries=0");
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mode = self.mode.as_str();
        let Some(avg) = self.average else {
            return format!("{mode}: no matching queries\n");
        };
        let mut out = String::new();
        for (dir, m) in [("forward", self.forward), ("inverse", self.inverse), ("average", Some(avg))] {
            if let Some(m) = m {
                let _ = writeln!(
                    out,
                    "{mode:<9} {dir:<8} MRR {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  ({} queries)",
                    m.mrr, m.hits3, m.hits10, m.n_queries
                );
            }
        }
        out
    }
}

/// Does the query fall under `mode`, given entity first appearances and the
/// evaluated range? New entities are those whose first appearance lies in
/// `range`.
pub fn selects(mode: EvalMode, first_seen: &[Option<usize>], range: &Range<usize>, q: &Query) -> bool {
    let new_at = |e: usize| first_seen.get(e).copied().flatten().filter(|t| range.contains(t));
    let hit = |e: usize| match mode.kind {
        QueryMode::Vanilla => true,
        QueryMode::Emerging => new_at(e) == Some(q.timestamp),
        QueryMode::Unknown => new_at(e).is_some_and(|t0| q.timestamp > t0),
    };
    match mode.policy {
        SidePolicy::QuerySide => hit(q.entity),
        SidePolicy::EitherSide => hit(q.entity) || hit(q.answer),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Apply dynamic prototypes; `false` scores the frozen embeddings.
    pub transfer: bool,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            transfer: true,
            threads: 1,
        }
    }
}

/// Runs the model through `range` in order, carrying prototypes between
/// snapshots from a zero start, and hands each snapshot's forward pass to
/// `visit`. Snapshots without facts are skipped.
pub fn walk<F>(model: &Model, data: &Dataset, range: Range<usize>, transfer: bool, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[(usize, usize, usize)], &Tape, &SnapshotForward) -> Result<()>,
{
    if range.end > data.graph.num_timestamps() {
        return Err(Error::Index {
            what: "timestamp",
            index: range.end,
            len: data.graph.num_timestamps(),
        });
    }
    let pi = model.assign(&data.entities)?;
    let mut carry = PrototypeState::zeros(model.hp.clusters, model.hp.dim);
    for t in range {
        let facts = data.queries_at(t);
        if facts.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = facts.iter().map(|&(e, r, _)| (e, r)).collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward_snapshot(&mut tape, &p, data, t, &pairs, &pi, &carry, transfer)?;
        visit(t, &facts, &tape, &out)?;
        carry = PrototypeState::from_values(carry.k(), carry.dim(), tape.value(out.prototypes.values)?.to_vec())?;
    }
    Ok(())
}

/// Filtered and raw ranks for every fact in `range`, both directions.
pub fn rank_range(model: &Model, data: &Dataset, range: Range<usize>, opts: EvalOptions) -> Result<Vec<RankResult>> {
    let mut results = Vec::new();
    walk(model, data, range, opts.transfer, |t, facts, tape, out| {
        let logits = tape.value(out.logits)?;
        let n = model.num_entities();
        let mut answers: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &(e, r, o) in facts {
            answers.entry((e, r)).or_default().push(o);
        }
        let rank_one = |i: usize| -> Result<RankResult> {
            let (e, r, o) = facts[i];
            let row = out.rows[i];
            let (filtered, raw) = rank_scores(&logits[row * n..(row + 1) * n], o, &answers[&(e, r)])?;
            Ok(RankResult {
                query: Query {
                    entity: e,
                    relation: r,
                    answer: o,
                    timestamp: t,
                },
                filtered,
                raw,
            })
        };
        let threads = opts.threads.max(1).min(facts.len());
        if threads <= 1 {
            for i in 0..facts.len() {
                results.push(rank_one(i)?);
            }
        } else {
            let chunk = facts.len().div_ceil(threads);
            let parts: Vec<Result<Vec<RankResult>>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..facts.len())
                    .step_by(chunk)
                    .map(|start| {
                        let rank_one = &rank_one;
                        s.spawn(move || (start..(start + chunk).min(facts.len())).map(rank_one).collect())
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("ranking thread panicked")).collect()
            });
            for part in parts {
                results.extend(part?);
            }
        }
        Ok(())
    })?;
    Ok(results)
}

/// Reduces ranks to one report per mode.
pub fn reports_from_ranks(
    results: &[RankResult],
    data: &Dataset,
    range: &Range<usize>,
    modes: &[EvalMode],
) -> Vec<MetricsReport> {
    modes
        .iter()
        .map(|&mode| {
            let (mut fwd, mut inv) = (Vec::new(), Vec::new());
            for r in results.iter().filter(|r| selects(mode, &data.first_seen, range, &r.query)) {
                if data.graph.is_inverse(r.query.relation) {
                    inv.push(r.filtered);
                } else {
                    fwd.push(r.filtered);
                }
            }
            MetricsReport::from_ranks(mode.kind, &fwd, &inv)
        })
        .collect()
}

pub fn evaluate_modes(
    model: &Model,
    data: &Dataset,
    range: Range<usize>,
    modes: &[EvalMode],
    opts: EvalOptions,
) -> Result<Vec<MetricsReport>> {
    let results = rank_range(model, data, range.clone(), opts)?;
    Ok(reports_from_ranks(&results, data, &range, modes))
}

pub fn evaluate(model: &Model, data: &Dataset, range: Range<usize>, mode: EvalMode, opts: EvalOptions) -> Result<MetricsReport> {
    Ok(evaluate_modes(model, data, range, &[mode], opts)?.remove(0))
}

/// Ranks one query, replaying its split partition from the start so the
/// prototypes match those seen by [`evaluate`].
pub fn rank_query(model: &Model, data: &Dataset, query: Query, opts: EvalOptions) -> Result<RankResult> {
    let nr = 2 * model.num_base_relations();
    if query.entity >= model.num_entities() || query.answer >= model.num_entities() || query.relation >= nr {
        return Err(Error::Vocab(format!("query {query:?} outside the model vocabulary")));
    }
    let split = &data.split;
    let start = [&split.train, &split.valid, &split.test]
        .into_iter()
        .find(|r| r.contains(&query.timestamp))
        .map(|r| r.start)
        .ok_or(Error::Index {
            what: "timestamp",
            index: query.timestamp,
            len: split.num_timestamps(),
        })?;
    let mut found = None;
    walk(model, data, start..query.timestamp + 1, opts.transfer, |t, facts, tape, out| {
        if t != query.timestamp {
            return Ok(());
        }
        let i = facts
            .iter()
            .position(|&(e, r, o)| (e, r, o) == (query.entity, query.relation, query.answer))
            .ok_or_else(|| Error::Contract(format!("{query:?} is not a fact of snapshot {t}")))?;
        let n = model.num_entities();
        let row = out.rows[i];
        let co: Vec<usize> = facts
            .iter()
            .filter(|&&(e, r, _)| (e, r) == (query.entity, query.relation))
            .map(|&(_, _, o)| o)
            .collect();
        let (filtered, raw) = rank_scores(&tape.value(out.logits)?[row * n..(row + 1) * n], query.answer, &co)?;
        found = Some(RankResult { query, filtered, raw });
        Ok(())
    })?;
    found.ok_or_else(|| Error::Contract(format!("{query:?} is not a fact of its snapshot")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmergenceStats {
    /// Distinct entities seen up to and including each timestamp.
    pub cumulative: Vec<usize>,
    /// New entities first seen at each timestamp.
    pub new_per_timestamp: Vec<usize>,
    pub observed: usize,
    pub emerging: usize,
    /// `emerging / observed`, 0 when nothing is observed.
    pub emerging_fraction: f64,
}

pub fn emergence_stats(g: &TemporalKG, split: &Split) -> EmergenceStats {
    let first = first_appearance(g);
    let mut new_per_timestamp = vec![0; g.num_timestamps()];
    for &t in first.values() {
        new_per_timestamp[t] += 1;
    }
    let cumulative = new_per_timestamp
        .iter()
        .scan(0, |acc, &n| {
            *acc += n;
            Some(*acc)
        })
        .collect();
    let emerging = first.values().filter(|t| split.test.contains(t)).count();
    let observed = first.len();
    EmergenceStats {
        cumulative,
        new_per_timestamp,
        observed,
        emerging,
        emerging_fraction: if observed == 0 { 0.0 } else { emerging as f64 / observed as f64 },
    }
}

fn centered(x: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = x.dims2();
    if n < 2 {
        return Err(Error::Contract(format!("spread needs at least 2 points, got {n}")));
    }
    let mut m = DMatrix::from_row_slice(n, d, x.data());
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

fn covariance(c: &DMatrix<f64>) -> DMatrix<f64> {
    (c.transpose() * c) / (c.nrows() as f64 - 1.0)
}

fn spread_of_eigenvalues(values: impl Iterator<Item = f64>) -> f64 {
    let logs: Vec<f64> = values.map(|l| l.max(GS_EIGEN_FLOOR).ln()).collect();
    (logs.iter().sum::<f64>() / (2.0 * logs.len() as f64)).exp()
}

/// Geometric mean of the principal-axis standard deviations of the rows of
/// `x`, with covariance eigenvalues floored at [`GS_EIGEN_FLOOR`].
pub fn generalized_spread(x: &Tensor) -> Result<f64> {
    let c = centered(x)?;
    let eig = SymmetricEigen::new(covariance(&c));
    Ok(spread_of_eigenvalues(eig.eigenvalues.iter().copied()))
}

/// Principal axes of `x` (columns, by decreasing variance).
fn principal_axes(c: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(covariance(c));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let axes = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, axes)
}

/// Subspace width for comparing sets of `n_e` and `n_r` points in `d`
/// dimensions: at most a quarter of the smaller sample, so that the sample
/// covariance of each set stays well conditioned. Equals `d` once both sets
/// have more than `4d` points.
pub fn collapse_subspace_dim(d: usize, n_e: usize, n_r: usize) -> usize {
    d.min(((n_e.min(n_r) - 1) / 4).max(1))
}

/// `GS(emerging) / GS(reference)`, both measured in the top
/// [`collapse_subspace_dim`] principal axes of the pooled, per-set centered
/// points.
pub fn collapse_ratio(emerging: &Tensor, reference: &Tensor) -> Result<f64> {
    let (ne, d) = emerging.dims2();
    let (nr, dr) = reference.dims2();
    if d != dr {
        return Err(Error::shape("collapse_ratio", emerging.shape(), reference.shape()));
    }
    let ce = centered(emerging)?;
    let cr = centered(reference)?;
    let m = collapse_subspace_dim(d, ne, nr);
    let mut pooled = DMatrix::zeros(ne + nr, d);
    pooled.rows_mut(0, ne).copy_from(&ce);
    pooled.rows_mut(ne, nr).copy_from(&cr);
    let (_, axes) = principal_axes(&pooled);
    let basis = axes.columns(0, m).into_owned();
    let spread = |c: &DMatrix<f64>| {
        let proj = c * &basis;
        let eig = SymmetricEigen::new(covariance(&proj));
        spread_of_eigenvalues(eig.eigenvalues.iter().copied())
    };
    Ok(spread(&ce) / spread(&cr))
}

/// Top-2 principal-component coordinates of each row.
pub fn project_2d(x: &Tensor) -> Result<Vec<[f64; 2]>> {
    let c = centered(x)?;
    let (_, axes) = principal_axes(&c);
    let k = axes.ncols().min(2);
    let proj = &c * axes.columns(0, k);
    Ok((0..c.nrows())
        .map(|i| [proj[(i, 0)], if k > 1 { proj[(i, 1)] } else { 0.0 }])
        .collect())
}

pub const PROJECTION_HEADER: &str = "entity_id\tlabel\tx\ty";

/// Writes `entity_id label x y` rows; `ids[i]` and `labels[i]` describe row
/// `i` of `x`.
pub fn emit_projection(x: &Tensor, ids: &[usize], labels: &[&str], path: &Path) -> Result<()> {
    let n = x.dims2().0;
    if ids.len() != n || labels.len() != n {
        return Err(Error::Contract(format!(
            "projection of {n} rows got {} ids and {} labels",
            ids.len(),
            labels.len()
        )));
    }
    let coords = project_2d(x)?;
    let mut out = String::new();
    let _ = writeln!(out, "{PROJECTION_HEADER}");
    for ((id, label), [px, py]) in ids.iter().zip(labels).zip(coords) {
        let _ = writeln!(out, "{id}\t{label}\t{px}\t{py}");
    }
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)
}

/// Transferred embeddings after the last populated snapshot of `range`.
pub fn final_transferred(model: &Model, data: &Dataset, range: Range<usize>, transfer: bool) -> Result<Tensor> {
    let mut last = None;
    walk(model, data, range, transfer, |_, _, tape, out| {
        last = Some(tape.to_tensor(out.transferred)?);
        Ok(())
    })?;
    Ok(last.unwrap_or_else(|| data.entities.tensor().clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub emerging: Vec<usize>,
    pub known: Vec<usize>,
    /// `None` when either set has fewer than 2 entities.
    pub ratio: Option<f64>,
    pub ratio_frozen: Option<f64>,
}

/// Collapse ratio of emerging versus known entities, measured on the
/// transferred embeddings at the end of the test range and on the frozen
/// inputs.
pub fn collapse_report(model: &Model, data: &Dataset, transfer: bool) -> Result<(CollapseReport, Tensor)> {
    let h = final_transferred(model, data, data.split.test.clone(), transfer)?;
    let mut emerging = Vec::new();
    let mut known = Vec::new();
    for (e, first) in data.first_seen.iter().enumerate() {
        match first {
            Some(t) if data.split.test.contains(t) => emerging.push(e),
            Some(_) => known.push(e),
            None => {}
        }
    }
    let rows = |src: &Tensor, ids: &[usize]| -> Result<Tensor> {
        let d = src.dims2().1;
        Tensor::matrix(ids.len(), d, ids.iter().flat_map(|&e| src.row(e).to_vec()).collect())
    };
    let (ratio, ratio_frozen) = if emerging.len() >= 2 && known.len() >= 2 {
        let frozen = data.entities.tensor();
        (
            Some(collapse_ratio(&rows(&h, &emerging)?, &rows(&h, &known)?)?),
            Some(collapse_ratio(&rows(frozen, &emerging)?, &rows(frozen, &known)?)?),
        )
    } else {
        (None, None)
    };
    Ok((
        CollapseReport {
            emerging,
            known,
            ratio,
            ratio_frozen,
        },
        h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn oracle_rank(scores: &[f64], answer: usize, co_true: &[usize]) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).filter(|&j| j == answer || !co_true.contains(&j)).collect();
        // Ties: answer after every equal-scored candidate.
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| (a == answer).cmp(&(b == answer)))
        });
        order.iter().position(|&j| j == answer).unwrap() + 1
    }

    #[test]
    fn hand_ranks() {
        let m = metrics_from_ranks(&[1, 2, 4]).unwrap();
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!((m.hits3 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.hits10, 1.0);
        assert!(metrics_from_ranks(&[]).is_none());
        let p = metrics_from_ranks(&[1, 1, 1]).unwrap();
        assert_eq!((p.mrr, p.hits3, p.hits10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn filtering_and_ties() {
        assert_eq!(rank_scores(&[0.1, 0.9, 0.3], 1, &[]).unwrap(), (1, 1));
        // Co-true answer 2 outranks the answer.
        assert_eq!(rank_scores(&[0.1, 0.5, 0.9, 0.7], 1, &[1, 2]).unwrap(), (2, 3));
        assert_eq!(rank_scores(&[0.5; 4], 0, &[]).unwrap(), (4, 4));
        assert_eq!(rank_scores(&[0.5, f64::NAN], 0, &[]).unwrap(), (2, 2));
        assert!(rank_scores(&[0.5], 3, &[]).is_err());
    }

    #[test]
    fn report_averages_present_directions() {
        let r = MetricsReport::from_ranks(QueryMode::Vanilla, &[1, 1], &[2]);
        let a = r.average.unwrap();
        assert!((a.mrr - 0.75).abs() < 1e-12);
        assert_eq!(a.n_queries, 3);
        let r = MetricsReport::from_ranks(QueryMode::Emerging, &[4], &[]);
        assert_eq!(r.mrr(), Some(0.25));
        let empty = MetricsReport::from_ranks(QueryMode::Unknown, &[], &[]);
        assert!(empty.is_empty());
        assert!(empty.to_kv().contains("unknown.n_queries=0"));
        assert!(!empty.to_kv().contains("NaN"));
    }

    #[test]
    fn mode_selection() {
        let first = vec![Some(0), Some(5), Some(6), None];
        let range = 5..10;
        let q = |entity, answer, timestamp| Query {
            entity,
            relation: 0,
            answer,
            timestamp,
        };
        let em = EvalMode::new(QueryMode::Emerging);
        let un = EvalMode::new(QueryMode::Unknown);
        assert!(selects(em, &first, &range, &q(1, 0, 5)));
        assert!(!selects(em, &first, &range, &q(1, 0, 6)));
        assert!(selects(un, &first, &range, &q(1, 0, 6)));
        assert!(!selects(un, &first, &range, &q(0, 1, 6)));
        let either = EvalMode {
            kind: QueryMode::Emerging,
            policy: SidePolicy::EitherSide,
        };
        assert!(!selects(em, &first, &range, &q(0, 2, 6)));
        assert!(selects(either, &first, &range, &q(0, 2, 6)));
        assert!(selects(EvalMode::new(QueryMode::Vanilla), &first, &range, &q(0, 0, 9)));
    }

    #[test]
    fn random_scores_give_harmonic_mrr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100;
        let ranks: Vec<usize> = (0..1000)
            .map(|_| {
                let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                rank_scores(&s, rng.random_range(0..n), &[]).unwrap().0
            })
            .collect();
        let expected: f64 = (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64;
        let second: f64 = (1..=n).map(|r| 1.0 / (r * r) as f64).sum::<f64>() / n as f64;
        let sigma = ((second - expected * expected) / 1000.0).sqrt();
        let mrr = metrics_from_ranks(&ranks).unwrap().mrr;
        assert!((expected - 0.0519).abs() < 1e-3);
        assert!((mrr - expected).abs() < 3.0 * sigma, "{mrr} vs {expected} ± {sigma}");
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn spread_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 5000, 4, 1.0);
        let gs = generalized_spread(&x).unwrap();
        assert!((gs - 1.0).abs() < 0.1, "{gs}");
        let scaled = Tensor::matrix(5000, 4, x.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        assert!((generalized_spread(&scaled).unwrap() / gs - 3.0).abs() < 1e-9);
        let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!((generalized_spread(&same).unwrap() - 1e-4).abs() < 1e-12);
        assert!(matches!(generalized_spread(&Tensor::zeros(vec![1, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn collapse_ratio_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 40, 6, 1.0);
        assert!((collapse_ratio(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        for s in [0.1, 0.5, 2.0] {
            let sx = Tensor::matrix(40, 6, x.data().iter().map(|v| s * v).collect()).unwrap();
            assert!((collapse_ratio(&sx, &x).unwrap() - s).abs() < 1e-6);
        }
        // Two samples of one distribution, fewer points than dimensions.
        let known = gaussian(&mut rng, 90, 32, 1.0);
        let fresh = gaussian(&mut rng, 30, 32, 1.0);
        let cr = collapse_ratio(&fresh, &known).unwrap();
        assert!((cr - 1.0).abs() < 0.2, "{cr}");
        assert_eq!(collapse_subspace_dim(32, 30, 90), 7);
        assert_eq!(collapse_subspace_dim(4, 500, 900), 4);
        // Fewer points than dimensions still yields the scaling law.
        let few = gaussian(&mut rng, 10, 32, 1.0);
        let small = Tensor::matrix(10, 32, few.data().iter().map(|v| 0.2 * v).collect()).unwrap();
        assert!((collapse_ratio(&small, &few).unwrap() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn projection_of_collinear_points() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let p = project_2d(&x).unwrap();
        assert!(p.iter().all(|c| c[1].abs() < 1e-9));
        assert!(((p[2][0] - p[0][0]).abs() - 2.0 * 14f64.sqrt()).abs() < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.tsv");
        emit_projection(&x, &[7, 8, 9], &["a", "b", "a"], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PROJECTION_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("8\tb\t"));
    }

    proptest! {
        #[test]
        fn ranks_match_sort_oracle(
            scores in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.0]), 1..30),
            pick in any::<prop::sample::Index>(),
            extra in prop::collection::vec(any::<prop::sample::Index>(), 0..4),
        ) {
            let answer = pick.index(scores.len());
            let mut co: Vec<usize> = extra.iter().map(|i| i.index(scores.len())).collect();
            co.push(answer);
            let (filtered, raw) = rank_scores(&scores, answer, &co).unwrap();
            prop_assert_eq!(filtered, oracle_rank(&scores, answer, &co));
            prop_assert_eq!(raw, oracle_rank(&scores, answer, &[]));
            prop_assert!(1 <= filtered && filtered <= raw);
        }

        #[test]
        fn collapse_ratio_rotation_invariant(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(&mut rng, 12, 5, 1.0);
            let b = gaussian(&mut rng, 15, 5, 0.7);
            let q = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
            let rot = |x: &Tensor| {
                let m = DMatrix::from_row_slice(x.dims2().0, 5, x.data()) * &q;
                Tensor::matrix(x.dims2().0, 5, m.transpose().as_slice().to_vec()).unwrap()
            };
            let base = collapse_ratio(&a, &b).unwrap();
            let turned = collapse_ratio(&rot(&a), &rot(&b)).unwrap();
            prop_assert!((base - turned).abs() < 1e-6, "{} vs {}", base, turned);
        }
    }
}
