//! Cluster prototypes pooled from chain summaries, and the gated transfer of
//! those prototypes onto entity embeddings.

use rand::Rng;

use crate::data::EntityTable;
use crate::encoder::Affine;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamStore, Tape, Var};

/// Which entities receive the transferred prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TransferMode {
    #[default]
    AllEntities,
    /// Entities queried at the current timestamp keep their frozen embedding.
    NonQueryOnly,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::AllEntities => "all",
            TransferMode::NonQueryOnly => "non-query",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TransferMode::AllEntities),
            "non-query" => Ok(TransferMode::NonQueryOnly),
            other => Err(Error::Config(format!("unknown transfer mode {other:?} (all | non-query)"))),
        }
    }
}

/// The gate `Ψ`: an affine map `2d → d` followed by a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferParams {
    pub psi: Affine,
}

impl TransferParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            psi: Affine::register(store, "transfer.psi", 2 * dim, dim, rng)?,
        })
    }
}

/// Prototype values carried between timestamps of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeState {
    k: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PrototypeState {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            values: vec![0.0; k * dim],
        }
    }

    pub fn from_values(k: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * dim {
            return Err(Error::shape("prototype state", &[values.len()], &[k, dim]));
        }
        Ok(Self { k, dim, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }
}

/// One pooled chain summary: the queried entity, how many queries share the
/// summary, and whether its chain was empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolMember {
    pub entity: usize,
    pub count: usize,
    pub empty: bool,
}

#[derive(Clone, Debug)]
pub struct DynamicPrototypes {
    /// `K × d`.
    pub values: Var,
    pub populated: Vec<bool>,
}

/// Per-cluster mean of the non-empty chain summaries in `reps`, each counted
/// `count` times. Clusters nobody contributes to keep their `carry` row.
pub fn cluster_pool(
    tape: &mut Tape,
    reps: Var,
    members: &[PoolMember],
    pi: &[usize],
    carry: &PrototypeState,
) -> Result<DynamicPrototypes> {
    let (k, d) = (carry.k, carry.dim);
    let shape = tape.shape(reps)?.to_vec();
    if shape.len() != 2 || shape[0] != members.len() || shape[1] != d {
        return Err(Error::shape("cluster_pool", &shape, &[members.len(), d]));
    }
    let mut totals = vec![0usize; k];
    for m in members.iter().filter(|m| !m.empty) {
        let c = *pi.get(m.entity).ok_or(Error::Index {
            what: "entity",
            index: m.entity,
            len: pi.len(),
        })?;
        if c >= k {
            return Err(Error::Index {
                what: "cluster",
                index: c,
                len: k,
            });
        }
        totals[c] += m.count;
    }
    let q = members.len();
    let mut pool = vec![0.0; k * q];
    for (j, m) in members.iter().enumerate().filter(|(_, m)| !m.empty) {
        let c = pi[m.entity];
        pool[c * q + j] = m.count as f64 / totals[c] as f64;
    }
    let populated: Vec<bool> = totals.iter().map(|&t| t > 0).collect();
    let mut kept = carry.values.clone();
    for (c, _) in populated.iter().enumerate().filter(|(_, &p)| p) {
        kept[c * d..(c + 1) * d].fill(0.0);
    }
    let pool = tape.constant(vec![k, q], pool)?;
    let mean = tape.matmul(pool, reps)?;
    let kept = tape.constant(vec![k, d], kept)?;
    Ok(DynamicPrototypes {
        values: tape.add(mean, kept)?,
        populated,
    })
}

/// `ω = sigmoid(Ψ[h ‖ c])`, row-wise.
pub fn transfer_gate(tape: &mut Tape, p: &Bound, params: &TransferParams, h: Var, c: Var) -> Result<Var> {
    let z = tape.concat_cols(&[h, c])?;
    let z = params.psi.apply(tape, p, z)?;
    tape.sigmoid(z)
}

/// `h + ω ⊙ c`.
pub fn apply_transfer(tape: &mut Tape, h: Var, omega: Var, c: Var) -> Result<Var> {
    let shift = tape.mul(omega, c)?;
    tape.add(h, shift)
}

/// Transferred embeddings for every entity, `|E| × d`.
///
/// Under [`TransferMode::NonQueryOnly`] rows flagged in `queried` stay at
/// their frozen value.
pub fn transfer_entities(
    tape: &mut Tape,
    p: &Bound,
    params: &TransferParams,
    entities: &EntityTable,
    protos: Var,
    pi: &[usize],
    mode: TransferMode,
    queried: &[bool],
) -> Result<Var> {
    let (n, d) = (entities.len(), entities.dim());
    if pi.len() != n {
        return Err(Error::shape("transfer_entities", &[pi.len()], &[n]));
    }
    let h = tape.constant(vec![n, d], entities.data().to_vec())?;
    let c = tape.gather_rows(protos, pi)?;
    let omega = transfer_gate(tape, p, params, h, c)?;
    let omega = match mode {
        TransferMode::AllEntities => omega,
        TransferMode::NonQueryOnly => {
            if queried.len() != n {
                return Err(Error::shape("transfer mask", &[queried.len()], &[n]));
            }
            let mask: Vec<f64> = queried
                .iter()
                .flat_map(|&q| std::iter::repeat_n(if q { 0.0 } else { 1.0 }, d))
                .collect();
            let mask = tape.constant(vec![n, d], mask)?;
            tape.mul(omega, mask)?
        }
    };
    apply_transfer(tape, h, omega, c)
}
