//! Chronological training: one optimizer step per training snapshot, early
//! stopping on validation MRR.

use crate::codebook::{cluster_sizes, codebook_objective};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalOptions, QueryMode};
use crate::model::{Dataset, Model};
use crate::numerics::{clip_global_norm, Adam, Bound, ParamStore, Tape, Var};
use crate::transfer::PrototypeState;

/// Loss terms of one snapshot, still on the tape.
#[derive(Clone, Debug)]
pub struct SnapshotLoss {
    pub link: Var,
    pub codebook: Var,
    pub total: Var,
    pub prototypes: Var,
    pub queries: usize,
}

/// `L_lp + λ·(α·L_cb + β·L_commit)` for every fact at `t`, or `None` when
/// the snapshot is empty.
pub fn snapshot_loss(
    model: &Model,
    tape: &mut Tape,
    p: &Bound,
    data: &Dataset,
    t: usize,
    pi: &[usize],
    carry: &PrototypeState,
) -> Result<Option<SnapshotLoss>> {
    let facts = data.queries_at(t);
    if facts.is_empty() {
        return Ok(None);
    }
    let pairs: Vec<(usize, usize)> = facts.iter().map(|&(e, r, _)| (e, r)).collect();
    let out = model.forward_snapshot(tape, p, data, t, &pairs, pi, carry, true)?;
    let per_query = tape.gather_rows(out.logits, &out.rows)?;
    let targets: Vec<usize> = facts.iter().map(|&(_, _, o)| o).collect();
    let link = tape.cross_entropy_logits(per_query, &targets)?;
    let hp = &model.hp;
    let codebook = codebook_objective(tape, p[model.codebook], &data.entities, pi, hp.alpha, hp.beta)?;
    let weighted = tape.scale(codebook, hp.lambda)?;
    let total = tape.add(link, weighted)?;
    Ok(Some(SnapshotLoss {
        link,
        codebook,
        total,
        prototypes: out.prototypes.values,
        queries: facts.len(),
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub link: f64,
    pub codebook: f64,
    pub total: f64,
    pub queries: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Gradients of the total snapshot loss in store order, plus the loss values
/// and the prototypes to carry forward. `None` for an empty snapshot.
pub fn snapshot_gradients(
    model: &Model,
    data: &Dataset,
    t: usize,
    pi: &[usize],
    carry: &PrototypeState,
) -> Result<Option<(Vec<Vec<f64>>, StepLosses, PrototypeState)>> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let Some(loss) = snapshot_loss(model, &mut tape, &p, data, t, pi, carry)? else {
        return Ok(None);
    };
    let losses = StepLosses {
        link: tape.scalar(loss.link)?,
        codebook: tape.scalar(loss.codebook)?,
        total: tape.scalar(loss.total)?,
        queries: loss.queries,
        grad_norm: 0.0,
    };
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            timestamp: t,
            detail: format!("loss is {} (link {}, codebook {})", losses.total, losses.link, losses.codebook),
        });
    }
    let next = PrototypeState::from_values(carry.k(), carry.dim(), tape.value(loss.prototypes)?.to_vec())?;
    let mut grads = tape.backward(loss.total)?;
    let grads = model.store.collect_grads(&p, &mut grads)?;
    Ok(Some((grads, losses, next)))
}

/// One optimizer step on every fact at training snapshot `t`. Empty
/// snapshots leave everything untouched and report zero losses.
pub fn train_timestamp(
    model: &mut Model,
    opt: &mut Adam,
    data: &Dataset,
    t: usize,
    pi: &[usize],
    carry: &mut PrototypeState,
) -> Result<StepLosses> {
    if !data.split.train.contains(&t) {
        return Err(Error::Contract(format!(
            "timestamp {t} is outside the training range {:?}",
            data.split.train
        )));
    }
    let Some((mut grads, mut losses, next)) = snapshot_gradients(model, data, t, pi, carry)? else {
        return Ok(StepLosses::default());
    };
    losses.grad_norm = clip_global_norm(&mut grads, model.hp.clip_norm);
    if !losses.grad_norm.is_finite() {
        return Err(Error::Divergence {
            timestamp: t,
            detail: format!("gradient norm is {}", losses.grad_norm),
        });
    }
    opt.step(&mut model.store, &grads)?;
    *carry = next;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub link: f64,
    pub codebook: f64,
    pub total: f64,
    /// Snapshots that produced an optimizer step.
    pub steps: usize,
    /// Codewords with no entity assigned at the end of the epoch.
    pub dead_codes: usize,
    pub visited: Vec<usize>,
}

/// Ascending pass over the training snapshots with prototypes reset to zero.
pub fn train_epoch(model: &mut Model, opt: &mut Adam, data: &Dataset, epoch: usize) -> Result<EpochReport> {
    let mut carry = PrototypeState::zeros(model.hp.clusters, model.hp.dim);
    let mut cached = None;
    let mut sums = (0.0, 0.0, 0.0);
    let mut steps = 0;
    let mut visited = Vec::new();
    for t in data.split.train.clone() {
        let pi = match (&cached, model.hp.cache_assignments) {
            (Some(pi), true) => Vec::clone(pi),
            _ => model.assign(&data.entities)?,
        };
        if model.hp.cache_assignments && cached.is_none() {
            cached = Some(pi.clone());
        }
        let l = train_timestamp(model, opt, data, t, &pi, &mut carry)?;
        visited.push(t);
        if l.queries > 0 {
            sums.0 += l.link;
            sums.1 += l.codebook;
            sums.2 += l.total;
            steps += 1;
        }
    }
    let pi = model.assign(&data.entities)?;
    let dead_codes = cluster_sizes(&pi, model.hp.clusters).iter().filter(|&&n| n == 0).count();
    let n = steps.max(1) as f64;
    Ok(EpochReport {
        epoch,
        link: sums.0 / n,
        codebook: sums.1 / n,
        total: sums.2 / n,
        steps,
        dead_codes,
        visited,
    })
}

/// Validation MRR in Emerging mode, falling back to Vanilla when the
/// validation range has no emerging queries.
pub fn validation_mrr(model: &Model, data: &Dataset, threads: usize) -> Result<(QueryMode, Option<f64>)> {
    let opts = EvalOptions { transfer: true, threads };
    let range = data.split.valid.clone();
    let emerging = evaluate(model, data, range.clone(), EvalMode::new(QueryMode::Emerging), opts)?;
    if !emerging.is_empty() {
        return Ok((QueryMode::Emerging, emerging.mrr()));
    }
    let vanilla = evaluate(model, data, range, EvalMode::new(QueryMode::Vanilla), opts)?;
    Ok((QueryMode::Vanilla, vanilla.mrr()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub report: EpochReport,
    pub valid_mode: QueryMode,
    pub valid_mrr: Option<f64>,
}

impl EpochRecord {
    /// One `key=value` line for the append-only training log.
    pub fn to_log_line(&self) -> String {
        let r = &self.report;
        let mrr = self.valid_mrr.map_or_else(|| "none".to_string(), |m| m.to_string());
        format!(
            "epoch={} loss={} link={} codebook={} steps={} dead_codes={} valid_mode={} valid_mrr={}",
            r.epoch,
            r.total,
            r.link,
            r.codebook,
            r.steps,
            r.dead_codes,
            self.valid_mode.as_str(),
            mrr
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 means the initial model.
    pub best_epoch: usize,
    pub best_mrr: Option<f64>,
    pub stopped_early: bool,
}

/// Trains for up to `hp.epochs` epochs, keeping the parameters (and
/// optimizer state) of the best validation epoch. `on_epoch` sees each
/// record as soon as it is available.
pub fn fit<F>(model: &mut Model, opt: &mut Adam, data: &Dataset, threads: usize, mut on_epoch: F) -> Result<FitOutcome>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    let mut best: Option<(f64, ParamStore, Adam, usize)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=model.hp.epochs {
        let report = train_epoch(model, opt, data, epoch)?;
        let (valid_mode, valid_mrr) = validation_mrr(model, data, threads)?;
        let record = EpochRecord {
            report,
            valid_mode,
            valid_mrr,
        };
        on_epoch(&record)?;
        history.push(record);
        let score = valid_mrr.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, model.store.clone(), opt.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= model.hp.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_mrr) = match best {
        Some((score, store, state, epoch)) => {
            model.store = store;
            *opt = state;
            (epoch, score.is_finite().then_some(score))
        }
        None => (0, None),
    };
    Ok(FitOutcome {
        history,
        best_epoch,
        best_mrr,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EntityTable, Quadruple, TemporalKG, Vocab};
    use crate::model::Hyperparams;

    fn toy() -> (Dataset, Hyperparams) {
        let facts = [
            (0, 0, 1, 0),
            (1, 1, 2, 0),
            (2, 0, 3, 1),
            (0, 1, 3, 1),
            (3, 0, 4, 2),
            (1, 0, 4, 2),
            (4, 1, 0, 3),
            (2, 1, 1, 3),
        ];
        let g = TemporalKG::new(
            Vocab::anonymous(5, 2),
            facts.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)),
        )
        .unwrap();
        let ent: Vec<f64> = (0..40).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.5).collect();
        let data = Dataset::new(&g, EntityTable::new(5, 8, ent).unwrap(), [0.5, 0.25, 0.25]).unwrap();
        let hp = Hyperparams {
            clusters: 2,
            chain_len: 3,
            dim: 8,
            layers: 1,
            heads: 2,
            channels: 4,
            lr: 1e-2,
            ..Hyperparams::default()
        };
        (data, hp)
    }

    #[test]
    fn repeated_snapshot_loss_decreases() {
        let (data, hp) = toy();
        let mut model = Model::new(&hp, &data).unwrap();
        let mut opt = Adam::new(hp.lr);
        let pi = model.assign(&data.entities).unwrap();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut carry = PrototypeState::zeros(hp.clusters, hp.dim);
            losses.push(train_timestamp(&mut model, &mut opt, &data, 1, &pi, &mut carry).unwrap().link);
        }
        assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn lambda_zero_leaves_codewords_without_gradient() {
        let (data, mut hp) = toy();
        hp.lambda = 0.0;
        let model = Model::new(&hp, &data).unwrap();
        let pi = model.assign(&data.entities).unwrap();
        let carry = PrototypeState::zeros(hp.clusters, hp.dim);
        let (grads, ..) = snapshot_gradients(&model, &data, 1, &pi, &carry).unwrap().unwrap();
        assert!(grads[model.codebook.index()].iter().all(|&g| g == 0.0));
        assert!(grads[model.relations.index()].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn epoch_is_ascending_deterministic_and_keeps_embeddings() {
        let (data, hp) = toy();
        let before = data.entities.clone();
        let run = || {
            let mut model = Model::new(&hp, &data).unwrap();
            let mut opt = Adam::new(hp.lr);
            let r = train_epoch(&mut model, &mut opt, &data, 1).unwrap();
            (model, r)
        };
        let (a, ra) = run();
        let (b, _) = run();
        assert_eq!(a.store, b.store);
        assert_eq!(ra.visited, data.split.train.clone().collect::<Vec<_>>());
        assert_eq!(data.entities, before);
    }

    #[test]
    fn rejects_non_training_timestamp() {
        let (data, hp) = toy();
        let mut model = Model::new(&hp, &data).unwrap();
        let mut opt = Adam::new(hp.lr);
        let pi = model.assign(&data.entities).unwrap();
        let mut carry = PrototypeState::zeros(hp.clusters, hp.dim);
        let t = data.split.test.start;
        assert!(matches!(
            train_timestamp(&mut model, &mut opt, &data, t, &pi, &mut carry),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fit_restores_best_epoch() {
        let (data, mut hp) = toy();
        hp.epochs = 3;
        let mut model = Model::new(&hp, &data).unwrap();
        let mut opt = Adam::new(hp.lr);
        let mut lines = Vec::new();
        let out = fit(&mut model, &mut opt, &data, 1, |r| {
            lines.push(r.to_log_line());
            Ok(())
        })
        .unwrap();
        assert_eq!(lines.len(), out.history.len());
        assert!(lines[0].starts_with("epoch=1 loss="));
        assert!((1..=3).contains(&out.best_epoch));
        let best = &out.history[out.best_epoch - 1];
        assert_eq!(validation_mrr(&model, &data, 1).unwrap().1, best.valid_mrr);
    }
}
