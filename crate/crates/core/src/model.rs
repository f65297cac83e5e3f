//! Hyperparameters, the trainable parameter set, and the per-snapshot
//! forward pass shared by training and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::{build_chains_for_snapshot, ChainQuery, HistoryIndex};
use crate::codebook::{self, init_codebook};
use crate::data::{add_inverse_relations, chronological_split, first_appearance_vec, EntityTable, Split, TemporalKG};
use crate::encoder::{encode_chains, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{uniform, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scorer::{score_all, ScorerParams, DEFAULT_CHANNELS, DEFAULT_KERNEL_WIDTH};
use crate::transfer::{cluster_pool, transfer_entities, DynamicPrototypes, PoolMember, PrototypeState, TransferMode, TransferParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Codebook size K.
    pub clusters: usize,
    /// Chain length k kept after relation-similarity filtering.
    pub chain_len: usize,
    /// History window T in snapshots.
    pub window: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub transfer_mode: TransferMode,
    pub channels: usize,
    pub kernel_width: usize,
    pub clip_norm: f64,
    /// Reuse one assignment per epoch instead of reassigning every snapshot.
    pub cache_assignments: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            clusters: 50,
            chain_len: 30,
            window: 10,
            dim: 768,
            layers: 2,
            heads: 4,
            alpha: codebook::DEFAULT_ALPHA,
            beta: codebook::DEFAULT_BETA,
            lambda: 1.0,
            lr: 1e-3,
            epochs: 30,
            patience: 5,
            seed: 0,
            transfer_mode: TransferMode::AllEntities,
            channels: DEFAULT_CHANNELS,
            kernel_width: DEFAULT_KERNEL_WIDTH,
            clip_norm: 1.0,
            cache_assignments: false,
        }
    }
}

const KEYS: &[&str] = &[
    "clusters",
    "chain_len",
    "window",
    "dim",
    "layers",
    "heads",
    "alpha",
    "beta",
    "lambda",
    "lr",
    "epochs",
    "patience",
    "seed",
    "transfer_mode",
    "channels",
    "kernel_width",
    "clip_norm",
    "cache_assignments",
];

impl Hyperparams {
    /// Small profile used by the synthetic acceptance runs.
    pub fn test_profile() -> Self {
        Self {
            clusters: 8,
            dim: 32,
            ..Self::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusters", self.clusters),
            ("chain_len", self.chain_len),
            ("window", self.window),
            ("dim", self.dim),
            ("heads", self.heads),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.layers > 4 {
            return Err(Error::Config(format!("layers must lie in 0..=4, got {}", self.layers)));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide dim ({})", self.heads, self.dim)));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_width must be odd, got {}", self.kernel_width)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lr", self.lr), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "clusters" => self.clusters.to_string(),
            "chain_len" => self.chain_len.to_string(),
            "window" => self.window.to_string(),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "transfer_mode" => self.transfer_mode.as_str().to_string(),
            "channels" => self.channels.to_string(),
            "kernel_width" => self.kernel_width.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "cache_assignments" => self.cache_assignments.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "clusters" => self.clusters = num(key, value)?,
            "chain_len" => self.chain_len = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "transfer_mode" => self.transfer_mode = TransferMode::parse(value.trim())?,
            "channels" => self.channels = num(key, value)?,
            "kernel_width" => self.kernel_width = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "cache_assignments" => self.cache_assignments = num(key, value)?,
            other => return Err(Error::Config(format!("unknown hyperparameter {other:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut hp = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            hp.set(k.trim(), v)?;
        }
        Ok(hp)
    }
}

/// Augmented graph, frozen embeddings, split, and lookup structures.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: TemporalKG,
    pub entities: EntityTable,
    pub split: Split,
    pub index: HistoryIndex,
    pub first_seen: Vec<Option<usize>>,
}

impl Dataset {
    /// Adds inverse relations to `base` and cuts the timeline by `ratios`.
    pub fn new(base: &TemporalKG, entities: EntityTable, ratios: [f64; 3]) -> Result<Self> {
        if entities.len() != base.num_entities() {
            return Err(Error::Integrity(format!(
                "embedding table has {} rows, vocabulary has {} entities",
                entities.len(),
                base.num_entities()
            )));
        }
        let split = chronological_split(base, ratios)?;
        let graph = add_inverse_relations(base)?;
        let index = HistoryIndex::build(&graph);
        let first_seen = first_appearance_vec(&graph);
        Ok(Self {
            graph,
            entities,
            split,
            index,
            first_seen,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.graph.num_entities()
    }

    pub fn num_base_relations(&self) -> usize {
        self.graph.num_base_relations()
    }

    /// Every fact at `t` as a query `(entity, relation, answer)`, both
    /// directions.
    pub fn queries_at(&self, t: usize) -> Vec<(usize, usize, usize)> {
        self.graph
            .snapshot(t)
            .iter()
            .map(|q| (q.subject, q.relation, q.object))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub hp: Hyperparams,
    pub store: ParamStore,
    pub relations: ParamId,
    pub codebook: ParamId,
    pub encoder: EncoderParams,
    pub transfer: TransferParams,
    pub scorer: ScorerParams,
    num_entities: usize,
    num_base_relations: usize,
}

impl Model {
    /// Registers every parameter with random values; the codebook is a
    /// placeholder until [`Model::new`] seeds it from the embeddings.
    pub fn build(hp: &Hyperparams, num_entities: usize, num_base_relations: usize) -> Result<Self> {
        hp.validate()?;
        if num_base_relations == 0 || num_entities == 0 {
            return Err(Error::Config("model needs at least one entity and one relation".into()));
        }
        let d = hp.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut store = ParamStore::new();
        let rel_bound = (3.0 / d as f64).sqrt();
        let relations = store.add("relations", uniform(&mut rng, vec![2 * num_base_relations, d], rel_bound))?;
        let codebook = store.add("codebook", Tensor::zeros(vec![hp.clusters, d]))?;
        let encoder = EncoderParams::register(&mut store, d, hp.layers, hp.heads, &mut rng)?;
        let transfer = TransferParams::register(&mut store, d, &mut rng)?;
        let scorer = ScorerParams::register(&mut store, d, hp.channels, hp.kernel_width, &mut rng)?;
        Ok(Self {
            hp: hp.clone(),
            store,
            relations,
            codebook,
            encoder,
            transfer,
            scorer,
            num_entities,
            num_base_relations,
        })
    }

    pub fn new(hp: &Hyperparams, data: &Dataset) -> Result<Self> {
        if data.entities.dim() != hp.dim {
            return Err(Error::Config(format!(
                "embedding width {} does not match dim {}",
                data.entities.dim(),
                hp.dim
            )));
        }
        let mut model = Self::build(hp, data.num_entities(), data.num_base_relations())?;
        let cb = init_codebook(&data.entities, hp.clusters, hp.seed)?;
        model
            .store
            .get_mut(model.codebook)
            .data_mut()
            .copy_from_slice(cb.codewords().data());
        Ok(model)
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_base_relations(&self) -> usize {
        self.num_base_relations
    }

    pub fn assign(&self, entities: &EntityTable) -> Result<Vec<usize>> {
        codebook::assign(self.store.get(self.codebook), entities)
    }

    /// Forward pass for every query at snapshot `t`.
    ///
    /// Queries sharing `(entity, relation)` share one chain and one row of
    /// logits; `rows` maps each input query to its row.
    pub fn forward_snapshot(
        &self,
        tape: &mut Tape,
        p: &Bound,
        data: &Dataset,
        t: usize,
        queries: &[(usize, usize)],
        pi: &[usize],
        carry: &PrototypeState,
        transfer_enabled: bool,
    ) -> Result<SnapshotForward> {
        if queries.is_empty() {
            return Err(Error::Contract("forward pass needs at least one query".into()));
        }
        let nr = 2 * self.num_base_relations;
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &(e, r) in queries {
            if e >= self.num_entities || r >= nr {
                return Err(Error::Vocab(format!("query ({e}, {r}) outside the model vocabulary")));
            }
            *counts.entry((e, r)).or_default() += 1;
        }
        let unique: Vec<(usize, usize)> = counts.keys().copied().collect();
        let rows = queries
            .iter()
            .map(|q| unique.binary_search(q).expect("query present in unique set"))
            .collect();

        let chain_queries: Vec<ChainQuery> = unique
            .iter()
            .map(|&(entity, relation)| ChainQuery {
                entity,
                relation,
                timestamp: t,
            })
            .collect();
        let rel_values = self.store.get(self.relations);
        let chains = build_chains_for_snapshot(&data.index, &chain_queries, self.hp.window, self.hp.chain_len, rel_values)?;
        let relations = p[self.relations];
        let reps = encode_chains(tape, p, &self.encoder, &chains, &data.entities, relations)?;

        let members: Vec<PoolMember> = unique
            .iter()
            .zip(&reps.empty)
            .map(|(&(entity, relation), &empty)| PoolMember {
                entity,
                count: counts[&(entity, relation)],
                empty,
            })
            .collect();
        let prototypes = cluster_pool(tape, reps.reps, &members, pi, carry)?;
        let applied = if transfer_enabled {
            prototypes.values
        } else {
            tape.constant(vec![carry.k(), carry.dim()], vec![0.0; carry.k() * carry.dim()])?
        };
        let mut queried = vec![false; self.num_entities];
        for &(e, _) in &unique {
            queried[e] = true;
        }
        let transferred = transfer_entities(
            tape,
            p,
            &self.transfer,
            &data.entities,
            applied,
            pi,
            self.hp.transfer_mode,
            &queried,
        )?;
        let subj_ids: Vec<usize> = unique.iter().map(|&(e, _)| e).collect();
        let rel_ids: Vec<usize> = unique.iter().map(|&(_, r)| r).collect();
        let subjects = tape.gather_rows(transferred, &subj_ids)?;
        let rels = tape.gather_rows(relations, &rel_ids)?;
        let logits = score_all(tape, p, &self.scorer, subjects, rels, transferred)?;
        Ok(SnapshotForward {
            logits,
            unique,
            rows,
            transferred,
            prototypes,
            empty: reps.empty,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SnapshotForward {
    /// `unique.len() × |E|`.
    pub logits: Var,
    pub unique: Vec<(usize, usize)>,
    pub rows: Vec<usize>,
    /// `|E| × d` transferred embeddings.
    pub transferred: Var,
    pub prototypes: DynamicPrototypes,
    /// Empty-chain flag per unique query.
    pub empty: Vec<bool>,
}
