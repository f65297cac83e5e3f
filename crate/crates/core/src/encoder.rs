//! Chain encoder: fused tokens, a pre-norm transformer, and attention pooling
//! steered by the query relation.

use rand::Rng;

use crate::chain::{ChainItem, InteractionChain};
use crate::data::EntityTable;
use crate::error::{Error, Result};
use crate::numerics::{glorot, Bound, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Row-wise `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), glorot(rng, input, output))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    fn register(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d])?)?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![d]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.shift], LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub out: Affine,
    pub norm2: LayerNorm,
    pub ff1: Affine,
    pub ff2: Affine,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub dim: usize,
    pub heads: usize,
    pub phi_entity: Affine,
    pub phi_relation: Affine,
    pub phi_time: Affine,
    pub fusion: Affine,
    pub layers: Vec<TransformerLayer>,
    /// Scoring vector `w`, stored `d × 1`.
    pub attn_w: ParamId,
    pub attn_state: ParamId,
    pub attn_query: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        num_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads must divide model width {dim}")));
        }
        let d = dim;
        let phi_entity = Affine::register(store, "encoder.phi_entity", d, d, rng)?;
        let phi_relation = Affine::register(store, "encoder.phi_relation", d, d, rng)?;
        let phi_time = Affine::register(store, "encoder.phi_time", d, d, rng)?;
        let fusion = Affine::register(store, "encoder.fusion", 4 * d, d, rng)?;
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let name = |part: &str| format!("encoder.layer{l}.{part}");
            layers.push(TransformerLayer {
                norm1: LayerNorm::register(store, &name("norm1"), d)?,
                query: Affine::register(store, &name("query"), d, d, rng)?,
                key: Affine::register(store, &name("key"), d, d, rng)?,
                value: Affine::register(store, &name("value"), d, d, rng)?,
                out: Affine::register(store, &name("out"), d, d, rng)?,
                norm2: LayerNorm::register(store, &name("norm2"), d)?,
                ff1: Affine::register(store, &name("ff1"), d, 4 * d, rng)?,
                ff2: Affine::register(store, &name("ff2"), 4 * d, d, rng)?,
            });
        }
        Ok(Self {
            dim,
            heads,
            phi_entity,
            phi_relation,
            phi_time,
            fusion,
            layers,
            attn_w: store.add("encoder.attn.w", glorot(rng, d, 1))?,
            attn_state: store.add("encoder.attn.state", glorot(rng, d, d))?,
            attn_query: store.add("encoder.attn.query", glorot(rng, d, d))?,
        })
    }
}

/// Sinusoidal code of a positive time gap: `sin` at even entries and `cos`
/// at odd ones, with frequency `10000^{-2j/d}` for pair `j`.
pub fn embed_time_gap(gap: usize, d: usize) -> Result<Vec<f64>> {
    if gap == 0 {
        return Err(Error::Contract("time gap must be at least 1".into()));
    }
    Ok((0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = gap as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

fn entity_rows(entities: &EntityTable, ids: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for e in ids {
        if e >= entities.len() {
            return Err(Error::Index {
                what: "entity",
                index: e,
                len: entities.len(),
            });
        }
        out.extend_from_slice(entities.row(e));
    }
    Ok(out)
}

/// Tokens `tanh(fusion[φ_e(h_s) ‖ φ_r(h_r) ‖ φ_e(h_o) ‖ φ_τ(code(Δt))])`,
/// one row per item. Entity inputs enter as constants.
pub fn fuse_tokens(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    items: &[ChainItem],
    entities: &EntityTable,
    relations: Var,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Contract("cannot fuse an empty item list".into()));
    }
    let d = enc.dim;
    if entities.dim() != d {
        return Err(Error::shape("fuse_tokens", &[entities.len(), entities.dim()], &[d, d]));
    }
    let n = items.len();
    let subj = tape.constant(vec![n, d], entity_rows(entities, items.iter().map(|i| i.subject))?)?;
    let obj = tape.constant(vec![n, d], entity_rows(entities, items.iter().map(|i| i.object))?)?;
    let mut codes = Vec::with_capacity(n * d);
    for it in items {
        codes.extend(embed_time_gap(it.gap, d)?);
    }
    let gaps = tape.constant(vec![n, d], codes)?;
    let rel_ids: Vec<usize> = items.iter().map(|i| i.relation).collect();
    let rels = tape.gather_rows(relations, &rel_ids)?;

    let s = enc.phi_entity.apply(tape, p, subj)?;
    let r = enc.phi_relation.apply(tape, p, rels)?;
    let o = enc.phi_entity.apply(tape, p, obj)?;
    let t = enc.phi_time.apply(tape, p, gaps)?;
    let joined = tape.concat_cols(&[s, r, o, t])?;
    let fused = enc.fusion.apply(tape, p, joined)?;
    tape.tanh(fused)
}

fn rows_of(tape: &mut Tape, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
    let total = tape.shape(x)?[0];
    if range.start == 0 && range.end == total {
        return Ok(x);
    }
    let ids: Vec<usize> = range.collect();
    tape.gather_rows(x, &ids)
}

fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, d: usize) -> Result<Var> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Runs the transformer stack over row-stacked chains; `segments` gives the
/// contiguous row range of each chain and attention never crosses them.
pub fn encode_segments(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    tokens: Var,
    segments: &[std::ops::Range<usize>],
) -> Result<Var> {
    let rows = tape.shape(tokens)?[0];
    let mut expected = 0;
    for seg in segments {
        if seg.start != expected || seg.is_empty() {
            return Err(Error::Contract("chain segments must be non-empty and contiguous".into()));
        }
        expected = seg.end;
    }
    if expected != rows {
        return Err(Error::shape("encode_segments", &[expected], &[rows]));
    }
    let d = enc.dim;
    let mut x = tokens;
    for layer in &enc.layers {
        let a = layer.norm1.apply(tape, p, x)?;
        let q = layer.query.apply(tape, p, a)?;
        let k = layer.key.apply(tape, p, a)?;
        let v = layer.value.apply(tape, p, a)?;
        let mut mixed = Vec::with_capacity(segments.len());
        for seg in segments {
            let qs = rows_of(tape, q, seg.clone())?;
            let ks = rows_of(tape, k, seg.clone())?;
            let vs = rows_of(tape, v, seg.clone())?;
            mixed.push(self_attention(tape, qs, ks, vs, enc.heads, d)?);
        }
        let mixed = if mixed.len() == 1 { mixed[0] } else { tape.concat_rows(&mixed)? };
        let attended = layer.out.apply(tape, p, mixed)?;
        x = tape.add(x, attended)?;

        let b = layer.norm2.apply(tape, p, x)?;
        let hidden = layer.ff1.apply(tape, p, b)?;
        let hidden = tape.relu(hidden)?;
        let ff = layer.ff2.apply(tape, p, hidden)?;
        x = tape.add(x, ff)?;
    }
    Ok(x)
}

/// Contextualizes the `n × d` tokens of one chain.
pub fn encode_chain(tape: &mut Tape, p: &Bound, enc: &EncoderParams, tokens: Var) -> Result<Var> {
    let n = tape.shape(tokens)?[0];
    if n == 0 {
        return Err(Error::Contract("cannot encode an empty chain".into()));
    }
    encode_segments(tape, p, enc, tokens, &[0..n])
}

/// Pooled chain summary; `empty` marks a chain with no history, whose
/// representation is the zero vector.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub rep: Var,
    pub empty: bool,
}

/// `Σ α_i h_i` with `α = softmax(wᵀ tanh(W_h h_i + W_q h_rq))`.
///
/// `states` is `n × d` (or `None` for an empty chain); `query_rel` is `1 × d`.
pub fn relation_guided_attention(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    states: Option<Var>,
    query_rel: Var,
) -> Result<Pooled> {
    let Some(states) = states else {
        return Ok(Pooled {
            rep: tape.constant(vec![1, enc.dim], vec![0.0; enc.dim])?,
            empty: true,
        });
    };
    let h = tape.matmul(states, p[enc.attn_state])?;
    let q = tape.matmul(query_rel, p[enc.attn_query])?;
    let pre = tape.add_row(h, q)?;
    let pre = tape.tanh(pre)?;
    let scores = tape.matmul(pre, p[enc.attn_w])?;
    let scores = tape.transpose(scores)?;
    let alpha = tape.softmax_rows(scores)?;
    Ok(Pooled {
        rep: tape.matmul(alpha, states)?,
        empty: false,
    })
}

/// Representations for a batch of chains.
#[derive(Clone, Debug)]
pub struct ChainReps {
    /// `num_chains × d`, zero rows for empty chains.
    pub reps: Var,
    pub empty: Vec<bool>,
}

/// Encodes every chain against the current relation embeddings.
pub fn encode_chains(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    chains: &[InteractionChain],
    entities: &EntityTable,
    relations: Var,
) -> Result<ChainReps> {
    if chains.is_empty() {
        return Err(Error::Contract("no chains to encode".into()));
    }
    let items: Vec<ChainItem> = chains.iter().flat_map(|c| c.items.iter().copied()).collect();
    let mut segments = Vec::new();
    let mut start = 0;
    for c in chains.iter().filter(|c| !c.items.is_empty()) {
        segments.push(start..start + c.items.len());
        start += c.items.len();
    }
    let states = if items.is_empty() {
        None
    } else {
        let tokens = fuse_tokens(tape, p, enc, &items, entities, relations)?;
        Some(encode_segments(tape, p, enc, tokens, &segments)?)
    };
    let mut rows = Vec::with_capacity(chains.len());
    let mut empty = Vec::with_capacity(chains.len());
    let mut segs = segments.into_iter();
    for c in chains {
        let chain_states = if c.items.is_empty() {
            None
        } else {
            let seg = segs.next().expect("one segment per non-empty chain");
            Some(rows_of(tape, states.expect("states exist when items do"), seg)?)
        };
        let rel = tape.gather_rows(relations, &[c.query.relation])?;
        let pooled = relation_guided_attention(tape, p, enc, chain_states, rel)?;
        rows.push(pooled.rep);
        empty.push(pooled.empty);
    }
    let reps = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    Ok(ChainReps { reps, empty })
}
