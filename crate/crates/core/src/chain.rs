//! Windowed interaction histories filtered by relation similarity.

use std::cmp::Ordering;

use crate::data::TemporalKG;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Role the chain's own entity plays in a past fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Subject,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChainItem {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub timestamp: usize,
    pub direction: Direction,
    /// `t_q − timestamp`, always ≥ 1.
    pub gap: usize,
}

impl ChainItem {
    pub fn counterpart(&self) -> usize {
        match self.direction {
            Direction::Subject => self.object,
            Direction::Object => self.subject,
        }
    }

    fn chrono_key(&self) -> (usize, usize, usize, Direction) {
        (self.timestamp, self.relation, self.counterpart(), self.direction)
    }
}

/// `(entity, relation, timestamp)` whose history is being summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChainQuery {
    pub entity: usize,
    pub relation: usize,
    pub timestamp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionChain {
    pub query: ChainQuery,
    pub items: Vec<ChainItem>,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    timestamp: usize,
    relation: usize,
    counterpart: usize,
    direction: Direction,
}

/// Per-entity facts sorted by `(timestamp, relation, counterpart, direction)`.
#[derive(Clone, Debug)]
pub struct HistoryIndex {
    per_entity: Vec<Vec<Entry>>,
}

impl HistoryIndex {
    pub fn build(g: &TemporalKG) -> Self {
        let mut per_entity: Vec<Vec<Entry>> = vec![Vec::new(); g.num_entities()];
        for q in g.facts() {
            per_entity[q.subject].push(Entry {
                timestamp: q.timestamp,
                relation: q.relation,
                counterpart: q.object,
                direction: Direction::Subject,
            });
            per_entity[q.object].push(Entry {
                timestamp: q.timestamp,
                relation: q.relation,
                counterpart: q.subject,
                direction: Direction::Object,
            });
        }
        for list in &mut per_entity {
            list.sort_by_key(|e| (e.timestamp, e.relation, e.counterpart, e.direction));
        }
        Self { per_entity }
    }

    pub fn num_entities(&self) -> usize {
        self.per_entity.len()
    }

    /// Facts involving `entity` with timestamps in `[t_q − window, t_q)`.
    pub fn collect_window(&self, entity: usize, t_q: usize, window: usize) -> Result<Vec<ChainItem>> {
        if window == 0 {
            return Err(Error::Config("history window must be at least 1".into()));
        }
        let list = self.per_entity.get(entity).ok_or(Error::Index {
            what: "entity",
            index: entity,
            len: self.per_entity.len(),
        })?;
        let lo = t_q.saturating_sub(window);
        let start = list.partition_point(|e| e.timestamp < lo);
        let end = list.partition_point(|e| e.timestamp < t_q);
        Ok(list[start..end]
            .iter()
            .map(|e| {
                let (subject, object) = match e.direction {
                    Direction::Subject => (entity, e.counterpart),
                    Direction::Object => (e.counterpart, entity),
                };
                ChainItem {
                    subject,
                    relation: e.relation,
                    object,
                    timestamp: e.timestamp,
                    direction: e.direction,
                    gap: t_q - e.timestamp,
                }
            })
            .collect())
    }
}

/// One-off window lookup; build a [`HistoryIndex`] for repeated queries.
pub fn collect_window(g: &TemporalKG, entity: usize, t_q: usize, window: usize) -> Result<Vec<ChainItem>> {
    HistoryIndex::build(g).collect_window(entity, t_q, window)
}

/// Cosine similarity of every relation embedding row with row `r_q`.
fn relation_similarities(relations: &Tensor, r_q: usize) -> Result<Vec<f64>> {
    let (n, _) = relations.dims2();
    if r_q >= n {
        return Err(Error::Index {
            what: "query relation",
            index: r_q,
            len: n,
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q = relations.row(r_q);
    let qn = norm(q);
    Ok((0..n)
        .map(|r| {
            let row = relations.row(r);
            let denom = qn * norm(row);
            if denom == 0.0 {
                0.0
            } else {
                q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / denom
            }
        })
        .collect())
}

/// Keeps the `k` items whose relations are most cosine-similar to `r_q`.
///
/// Ties prefer the more recent item, then the lower relation id; the kept
/// items come back in chronological order.
pub fn topk_by_relation_sim(items: &[ChainItem], r_q: usize, relations: &Tensor, k: usize) -> Result<Vec<ChainItem>> {
    if k == 0 {
        return Err(Error::Config("chain length k must be at least 1".into()));
    }
    let mut chrono = items.to_vec();
    chrono.sort_by_key(ChainItem::chrono_key);
    if chrono.len() <= k {
        return Ok(chrono);
    }
    let sims = relation_similarities(relations, r_q)?;
    if let Some(bad) = chrono.iter().find(|it| it.relation >= sims.len()) {
        return Err(Error::Index {
            what: "chain relation",
            index: bad.relation,
            len: sims.len(),
        });
    }
    let mut order: Vec<usize> = (0..chrono.len()).collect();
    order.sort_by(|&a, &b| {
        let (ia, ib) = (&chrono[a], &chrono[b]);
        sims[ib.relation]
            .partial_cmp(&sims[ia.relation])
            .unwrap_or(Ordering::Equal)
            .then(ib.timestamp.cmp(&ia.timestamp))
            .then(ia.relation.cmp(&ib.relation))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    Ok(order.into_iter().map(|i| chrono[i]).collect())
}

/// One chain per query; every query must share one timestamp.
pub fn build_chains_for_snapshot(
    index: &HistoryIndex,
    queries: &[ChainQuery],
    window: usize,
    k: usize,
    relations: &Tensor,
) -> Result<Vec<InteractionChain>> {
    if let Some(first) = queries.first() {
        if queries.iter().any(|q| q.timestamp != first.timestamp) {
            return Err(Error::Contract("chain queries must share one timestamp".into()));
        }
    }
    queries
        .iter()
        .map(|&query| {
            let window_items = index.collect_window(query.entity, query.timestamp, window)?;
            Ok(InteractionChain {
                query,
                items: topk_by_relation_sim(&window_items, query.relation, relations, k)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{add_inverse_relations, Quadruple, Vocab};
    use proptest::prelude::*;

    fn graph(ne: usize, nr: usize, facts: &[(usize, usize, usize, usize)]) -> TemporalKG {
        TemporalKG::new(
            Vocab::anonymous(ne, nr),
            facts.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)),
        )
        .unwrap()
    }

    fn brute_window(g: &TemporalKG, e: usize, t_q: usize, window: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut out: Vec<_> = g
            .facts()
            .filter(|q| q.timestamp < t_q && q.timestamp + window >= t_q)
            .flat_map(|q| {
                let mut v = Vec::new();
                if q.subject == e {
                    v.push((q.timestamp, q.relation, q.object, 0));
                }
                if q.object == e {
                    v.push((q.timestamp, q.relation, q.subject, 1));
                }
                v
            })
            .collect();
        out.sort();
        out
    }

    fn summary(items: &[ChainItem]) -> Vec<(usize, usize, usize, usize)> {
        items
            .iter()
            .map(|i| (i.timestamp, i.relation, i.counterpart(), (i.direction == Direction::Object) as usize))
            .collect()
    }

    #[test]
    fn window_examples() {
        let g = graph(3, 1, &[(0, 0, 1, 3), (1, 0, 0, 5), (0, 0, 2, 9), (2, 0, 1, 4)]);
        let items = collect_window(&g, 0, 10, 6).unwrap();
        assert_eq!(items.iter().map(|i| i.timestamp).collect::<Vec<_>>(), vec![5, 9]);
        assert_eq!(items[0].direction, Direction::Object);
        assert_eq!((items[0].gap, items[1].gap), (5, 1));
        assert!(collect_window(&g, 2, 4, 3).unwrap().is_empty());
        assert!(matches!(collect_window(&g, 0, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn topk_keeps_everything_when_short() {
        let g = graph(3, 2, &[(0, 1, 1, 2), (0, 0, 2, 1)]);
        let items = collect_window(&g, 0, 5, 5).unwrap();
        let rel = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let kept = topk_by_relation_sim(&items, 0, &rel, 3).unwrap();
        assert_eq!(kept, items);
        assert!(matches!(topk_by_relation_sim(&items, 0, &rel, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_ignores_magnitude() {
        // Relation 1 is collinear with the query relation 0 but tiny; relation 2
        // is orthogonal and huge.
        let rel = Tensor::matrix(3, 2, vec![1.0, 0.0, 1e-3, 0.0, 0.0, 1e3]).unwrap();
        let g = graph(4, 3, &[(0, 2, 1, 7), (0, 1, 2, 1), (0, 2, 3, 8), (0, 1, 3, 2)]);
        let items = collect_window(&g, 0, 9, 9).unwrap();
        let kept = topk_by_relation_sim(&items, 0, &rel, 2).unwrap();
        assert!(kept.iter().all(|i| i.relation == 1));
        assert_eq!(kept.iter().map(|i| i.timestamp).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn ties_prefer_recent_then_lower_relation() {
        let rel = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        let g = graph(3, 3, &[(0, 1, 1, 1), (0, 2, 1, 4), (0, 1, 2, 4), (0, 2, 2, 2)]);
        let items = collect_window(&g, 0, 5, 5).unwrap();
        let kept = topk_by_relation_sim(&items, 0, &rel, 2).unwrap();
        assert_eq!(summary(&kept), vec![(4, 1, 2, 0), (4, 2, 1, 0)]);
        let kept = topk_by_relation_sim(&items, 0, &rel, 1).unwrap();
        assert_eq!(summary(&kept), vec![(4, 1, 2, 0)]);
    }

    #[test]
    fn snapshot_chains() {
        let g = add_inverse_relations(&graph(3, 2, &[(0, 0, 1, 0), (0, 1, 2, 1), (2, 0, 1, 1)])).unwrap();
        let index = HistoryIndex::build(&g);
        let rel = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(build_chains_for_snapshot(&index, &[], 3, 2, &rel).unwrap().is_empty());
        let qa = ChainQuery { entity: 0, relation: 0, timestamp: 2 };
        let qb = ChainQuery { relation: 1, ..qa };
        let chains = build_chains_for_snapshot(&index, &[qa, qb], 3, 1, &rel).unwrap();
        assert_ne!(chains[0].items, chains[1].items);
        let swapped = build_chains_for_snapshot(&index, &[qb, qa], 3, 1, &rel).unwrap();
        assert_eq!(swapped[0], chains[1]);
        assert_eq!(swapped[1], chains[0]);
        let mixed = [qa, ChainQuery { timestamp: 1, ..qa }];
        assert!(matches!(build_chains_for_snapshot(&index, &mixed, 3, 1, &rel), Err(Error::Contract(_))));
    }

    fn topk_oracle(items: &[ChainItem], sims: &[f64], k: usize) -> Vec<ChainItem> {
        let mut all = items.to_vec();
        all.sort_by_key(ChainItem::chrono_key);
        let mut ranked: Vec<(usize, ChainItem)> = all.iter().copied().enumerate().collect();
        ranked.sort_by(|(ia, a), (ib, b)| {
            let ka = (-sims[a.relation], usize::MAX - a.timestamp, a.relation, *ia);
            let kb = (-sims[b.relation], usize::MAX - b.timestamp, b.relation, *ib);
            ka.partial_cmp(&kb).unwrap()
        });
        let mut kept: Vec<(usize, ChainItem)> = ranked.into_iter().take(k).collect();
        kept.sort_by_key(|(i, _)| *i);
        kept.into_iter().map(|(_, it)| it).collect()
    }

    proptest! {
        #[test]
        fn window_matches_brute_force(
            facts in prop::collection::vec((0usize..5, 0usize..3, 0usize..5, 0usize..12), 0..60),
            e in 0usize..5,
            t_q in 0usize..14,
            window in 1usize..8,
        ) {
            let g = add_inverse_relations(&graph(5, 3, &facts)).unwrap();
            let items = collect_window(&g, e, t_q, window).unwrap();
            prop_assert_eq!(summary(&items), brute_window(&g, e, t_q, window));
            prop_assert!(items.iter().all(|i| i.timestamp < t_q && i.gap >= 1 && i.gap <= window));
        }

        #[test]
        fn topk_matches_sort_then_slice(
            facts in prop::collection::vec((1usize..6, 0usize..8, 0usize..12), 50),
            rel in prop::collection::vec(-3i32..4, 32),
            r_q in 0usize..8,
            scale_exp in -4i32..5,
            k in 1usize..40,
        ) {
            let quads: Vec<_> = facts.iter().map(|&(o, r, t)| (0, r, o, t)).collect();
            let g = graph(6, 8, &quads);
            let items = collect_window(&g, 0, 12, 12).unwrap();
            let rel = Tensor::matrix(8, 4, rel.iter().map(|&v| v as f64).collect()).unwrap();
            let sims = relation_similarities(&rel, r_q).unwrap();
            let kept = topk_by_relation_sim(&items, r_q, &rel, k).unwrap();
            prop_assert_eq!(&kept, &topk_oracle(&items, &sims, k));
            prop_assert!(kept.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

            let mut rescaled = rel.clone();
            rescaled.row_mut(3).iter_mut().for_each(|v| *v *= 2f64.powi(scale_exp));
            prop_assert_eq!(topk_by_relation_sim(&items, r_q, &rescaled, k).unwrap(), kept);
        }
    }
}
