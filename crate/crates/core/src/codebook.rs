//! Vector-quantized clustering of frozen entity embeddings.
//!
//! Entities map to their nearest codeword. The codebook term pulls codewords
//! toward the embeddings assigned to them; the commitment term has the same
//! value but would only move the embeddings, which are frozen here, so it
//! never produces a trainable gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EntityTable;
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.25;

/// Cluster index per entity id.
pub type AssignmentMap = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codewords: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

impl Codebook {
    pub fn new(codewords: Tensor, alpha: f64, beta: f64) -> Result<Self> {
        if codewords.shape().len() != 2 {
            return Err(Error::Config(format!(
                "codebook must be a K×d matrix, got shape {:?}",
                codewords.shape()
            )));
        }
        if codewords.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook holds non-finite values".into()));
        }
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Config(format!("codebook weights must be positive, got α={alpha}, β={beta}")));
        }
        Ok(Self {
            codewords: codewords.with_grad(),
            alpha,
            beta,
        })
    }

    pub fn k(&self) -> usize {
        self.codewords.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.codewords.dims2().1
    }

    pub fn codewords(&self) -> &Tensor {
        &self.codewords
    }

    pub fn into_codewords(self) -> Tensor {
        self.codewords
    }

    pub fn assign(&self, embeddings: &EntityTable) -> Result<AssignmentMap> {
        assign(&self.codewords, embeddings)
    }

    /// Runs `steps` Adam updates on the codebook objective alone,
    /// reassigning before every step. Returns the objective per step.
    pub fn fit(&mut self, embeddings: &EntityTable, steps: usize, lr: f64) -> Result<Vec<f64>> {
        let mut store = ParamStore::new();
        let id = store.add("codebook", self.codewords.clone())?;
        let mut opt = Adam::new(lr);
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let pi = assign(store.get(id), embeddings)?;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = codebook_objective(&mut tape, bound[id], embeddings, &pi, self.alpha, self.beta)?;
            history.push(tape.scalar(loss)?);
            let mut grads = tape.backward(loss)?;
            let grads = store.collect_grads(&bound, &mut grads)?;
            opt.step(&mut store, &grads)?;
        }
        self.codewords = store.get(id).clone();
        Ok(history)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword by squared Euclidean distance, lowest index on ties.
pub fn assign(codewords: &Tensor, embeddings: &EntityTable) -> Result<AssignmentMap> {
    let (k, d) = codewords.dims2();
    if d != embeddings.dim() {
        return Err(Error::shape("assign", codewords.shape(), embeddings.tensor().shape()));
    }
    Ok((0..embeddings.len())
        .map(|e| {
            let h = embeddings.row(e);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = squared_distance(h, codewords.row(c));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect())
}

struct ClusterStats {
    means: Vec<f64>,
    weights: Vec<f64>,
    scatter: f64,
}

fn cluster_stats(embeddings: &EntityTable, pi: &[usize], k: usize) -> Result<ClusterStats> {
    let d = embeddings.dim();
    if pi.len() != embeddings.len() {
        return Err(Error::shape("codebook loss", &[pi.len()], &[embeddings.len()]));
    }
    if let Some(&bad) = pi.iter().find(|&&c| c >= k) {
        return Err(Error::Index {
            what: "cluster",
            index: bad,
            len: k,
        });
    }
    let mut means = vec![0.0; k * d];
    let mut weights = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (e, &c) in pi.iter().enumerate() {
        counts[c] += 1;
        for (m, h) in means[c * d..(c + 1) * d].iter_mut().zip(embeddings.row(e)) {
            *m += h;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            means[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= n);
            weights[c * d..(c + 1) * d].fill(n);
        }
    }
    let scatter = pi
        .iter()
        .enumerate()
        .map(|(e, &c)| squared_distance(embeddings.row(e), &means[c * d..(c + 1) * d]))
        .sum();
    Ok(ClusterStats { means, weights, scatter })
}

/// `Σ_e ‖h_e − c_π(e)‖²` evaluated as within-cluster scatter plus
/// `Σ_k n_k ‖mean_k − c_k‖²`, so only `K×d` values enter the tape.
fn quantization_error(tape: &mut Tape, codewords: Var, embeddings: &EntityTable, pi: &[usize]) -> Result<Var> {
    let shape = tape.shape(codewords)?.to_vec();
    if shape.len() != 2 || shape[1] != embeddings.dim() {
        return Err(Error::shape("codebook loss", &shape, embeddings.tensor().shape()));
    }
    let stats = cluster_stats(embeddings, pi, shape[0])?;
    let means = tape.constant(shape.clone(), stats.means)?;
    let weights = tape.constant(shape, stats.weights)?;
    let scatter = tape.constant(vec![1], vec![stats.scatter])?;
    let diff = tape.sub(means, codewords)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    let total = tape.sum(weighted)?;
    tape.add(total, scatter)
}

/// Codebook term: gradient reaches the codewords only.
pub fn codebook_loss(tape: &mut Tape, codewords: Var, embeddings: &EntityTable, pi: &[usize]) -> Result<Var> {
    quantization_error(tape, codewords, embeddings, pi)
}

/// Commitment term: same value, no trainable gradient.
pub fn commitment_loss(tape: &mut Tape, codewords: Var, embeddings: &EntityTable, pi: &[usize]) -> Result<Var> {
    let frozen = tape.detach(codewords)?;
    quantization_error(tape, frozen, embeddings, pi)
}

/// `α · codebook_loss + β · commitment_loss`.
pub fn codebook_objective(
    tape: &mut Tape,
    codewords: Var,
    embeddings: &EntityTable,
    pi: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let cb = codebook_loss(tape, codewords, embeddings, pi)?;
    let commit = commitment_loss(tape, codewords, embeddings, pi)?;
    let a = tape.scale(cb, alpha)?;
    let b = tape.scale(commit, beta)?;
    tape.add(a, b)
}

/// Farthest-point seeding: a uniformly drawn first entity, then repeatedly
/// the entity farthest from every codeword chosen so far.
pub fn init_codebook(embeddings: &EntityTable, k: usize, seed: u64) -> Result<Codebook> {
    let n = embeddings.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("codebook size K={k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|e| squared_distance(embeddings.row(e), embeddings.row(chosen[0])))
        .collect();
    let mut taken = vec![false; n];
    taken[chosen[0]] = true;
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for e in (0..n).filter(|&e| !taken[e]) {
            if best.is_none_or(|(_, d)| nearest[e] > d) {
                best = Some((e, nearest[e]));
            }
        }
        let (next, _) = best.expect("k <= n leaves a candidate");
        taken[next] = true;
        chosen.push(next);
        for e in 0..n {
            nearest[e] = nearest[e].min(squared_distance(embeddings.row(e), embeddings.row(next)));
        }
    }
    let d = embeddings.dim();
    let data = chosen.iter().flat_map(|&e| embeddings.row(e).to_vec()).collect();
    Codebook::new(Tensor::matrix(k, d, data)?, DEFAULT_ALPHA, DEFAULT_BETA)
}

/// Entities per cluster; zero entries are dead codewords.
pub fn cluster_sizes(pi: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &c in pi {
        sizes[c] += 1;
    }
    sizes
}

/// Fraction of items whose label is the majority label of their cluster.
pub fn purity(pi: &[usize], labels: &[usize]) -> f64 {
    if pi.is_empty() {
        return 1.0;
    }
    let mut pairs: Vec<(usize, usize)> = pi.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_unstable();
    let mut majority_total = 0;
    let mut i = 0;
    while i < pairs.len() {
        let cluster = pairs[i].0;
        let mut best = 0;
        while i < pairs.len() && pairs[i].0 == cluster {
            let label = pairs[i].1;
            let mut run = 0;
            while i < pairs.len() && pairs[i] == (cluster, label) {
                run += 1;
                i += 1;
            }
            best = best.max(run);
        }
        majority_total += best;
    }
    majority_total as f64 / pi.len() as f64
}
