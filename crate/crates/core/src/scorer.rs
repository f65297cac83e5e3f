//! Convolutional decoder scoring every candidate entity for a query.

use rand::Rng;

use crate::encoder::Affine;
use crate::error::{Error, Result};
use crate::numerics::{uniform, Bound, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_CHANNELS: usize = 50;
pub const DEFAULT_KERNEL_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScorerParams {
    /// `C × 2 × w`.
    pub kernels: ParamId,
    /// `C·d → d`.
    pub proj: Affine,
    pub channels: usize,
    pub width: usize,
}

impl ScorerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "scorer needs C ≥ 1 and an odd kernel width, got C={channels}, w={width}"
            )));
        }
        let bound = (3.0 / (2 * width) as f64).sqrt();
        Ok(Self {
            kernels: store.add("scorer.kernels", uniform(rng, vec![channels, 2, width], bound))?,
            proj: Affine::register(store, "scorer.proj", channels * dim, dim, rng)?,
            channels,
            width,
        })
    }
}

/// The per-query vector that candidates are dotted with:
/// `ReLU(proj(flatten(ReLU(conv[h_q ; h_r]))))`, one row per query.
pub fn query_vectors(tape: &mut Tape, p: &Bound, params: &ScorerParams, subjects: Var, relations: Var) -> Result<Var> {
    let conv = tape.conv_pairs(subjects, relations, p[params.kernels])?;
    let conv = tape.relu(conv)?;
    let x = params.proj.apply(tape, p, conv)?;
    tape.relu(x)
}

/// Logits `Q × |E|` for queries whose subject rows and relation rows are
/// stacked in `subjects` and `relations` (`Q × d` each).
pub fn score_all(
    tape: &mut Tape,
    p: &Bound,
    params: &ScorerParams,
    subjects: Var,
    relations: Var,
    candidates: Var,
) -> Result<Var> {
    let sd = tape.shape(subjects)?.to_vec();
    let cd = tape.shape(candidates)?.to_vec();
    if sd.len() != 2 || cd.len() != 2 || sd[1] != cd[1] {
        return Err(Error::shape("score_all", &sd, &cd));
    }
    let v = query_vectors(tape, p, params, subjects, relations)?;
    let ct = tape.transpose(candidates)?;
    tape.matmul(v, ct)
}

/// Probability reading of a logit.
pub fn score_probability(logit: f64) -> f64 {
    crate::numerics::sigmoid(logit)
}
