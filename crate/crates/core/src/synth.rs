//! Synthetic temporal graphs with planted, type-level periodic patterns.
//!
//! Every entity has a latent type. An active entity of type `τ` emits one
//! fact per pattern relation `2τ + s` (`s ∈ {0, 1}`), whose object is the
//! target that the type's schedule names for the current phase. Phases
//! advance every `phase_len` snapshots and are offset per type, so the right
//! answer depends on both type and time. Embeddings are type centroids plus
//! Gaussian jitter; emerging entities first act in the test range, where
//! only their type tells which pattern they follow.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{split_timeline, write_embeddings, write_quadruples, EntityTable, Quadruple, Split, TemporalKG, Vocab, DEFAULT_SPLIT_RATIOS};
use crate::data::{EMBEDDINGS_FILE, QUADRUPLES_FILE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub types: usize,
    pub entities_per_type: usize,
    pub relations: usize,
    pub timestamps: usize,
    /// Fraction of all entities whose first appearance is in the test range.
    pub emergence: f64,
    /// Probability that a fact's object is replaced by a random known entity.
    pub noise: f64,
    /// Probability that an entity acts at a given snapshot.
    pub activity: f64,
    pub phases: usize,
    pub phase_len: usize,
    /// Equally likely targets per (type, relation, phase).
    pub answers_per_pattern: usize,
    pub dim: usize,
    pub jitter: f64,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            types: 4,
            entities_per_type: 30,
            relations: 8,
            timestamps: 60,
            emergence: 0.25,
            noise: 0.05,
            activity: 0.3,
            phases: 3,
            phase_len: 5,
            answers_per_pattern: 1,
            dim: 32,
            jitter: 0.05,
            split: DEFAULT_SPLIT_RATIOS,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn num_entities(&self) -> usize {
        self.types * self.entities_per_type
    }

    pub fn num_emerging(&self) -> usize {
        (self.emergence * self.num_entities() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<Split> {
        let bad = |m: String| Err(Error::Config(m));
        if self.types == 0 || self.entities_per_type == 0 || self.dim == 0 {
            return bad("types, entities_per_type and dim must be positive".into());
        }
        if self.relations < 2 * self.types {
            return bad(format!("{} types need at least {} relations", self.types, 2 * self.types));
        }
        if !(0.0..1.0).contains(&self.emergence) {
            return bad(format!("emergence must lie in [0, 1), got {}", self.emergence));
        }
        for (name, p) in [("noise", self.noise), ("activity", self.activity)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.phases == 0 || self.phase_len == 0 || self.answers_per_pattern == 0 {
            return bad("phases, phase_len and answers_per_pattern must be positive".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be non-negative, got {}", self.jitter));
        }
        let per_type_emerging = self.num_emerging().div_ceil(self.types);
        let target_type_known = self.entities_per_type - per_type_emerging;
        if target_type_known < self.answers_per_pattern {
            return bad("too few known entities per type to host pattern targets".into());
        }
        split_timeline(self.timestamps, self.split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub split: Split,
    pub types: Vec<usize>,
    pub emerging: Vec<bool>,
    /// `targets[τ][s][φ]` lists the equally likely answers.
    pub targets: Vec<[Vec<Vec<usize>>; 2]>,
    pub known: Vec<usize>,
}

impl SynthTruth {
    pub fn phase(&self, ty: usize, t: usize) -> usize {
        (t / self.spec.phase_len + ty) % self.spec.phases
    }

    /// Pattern answers for `(entity, relation, ?, t)`, if the relation is one
    /// of the entity's pattern relations.
    pub fn answer_key(&self, entity: usize, relation: usize, t: usize) -> Option<&[usize]> {
        let ty = *self.types.get(entity)?;
        let s = relation.checked_sub(2 * ty).filter(|&s| s < 2)?;
        Some(&self.targets[ty][s][self.phase(ty, t)])
    }
}

#[derive(Clone, Debug)]
pub struct SynthInstance {
    pub graph: TemporalKG,
    pub embeddings: EntityTable,
    pub truth: SynthTruth,
}

impl SynthInstance {
    /// Writes vocabularies, `quadruples.txt` and the embedding file.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        self.graph.vocab().write(dir)?;
        write_quadruples(&self.graph, &dir.join(QUADRUPLES_FILE))?;
        write_embeddings(&self.embeddings, &dir.join(EMBEDDINGS_FILE))
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthInstance> {
    let split = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_entities();
    let per = spec.entities_per_type;
    let types: Vec<usize> = (0..n).map(|e| e / per).collect();

    let total_emerging = spec.num_emerging();
    let mut emerging = vec![false; n];
    for ty in 0..spec.types {
        let quota = total_emerging / spec.types + usize::from(ty < total_emerging % spec.types);
        let mut members: Vec<usize> = (ty * per..(ty + 1) * per).collect();
        members.shuffle(&mut rng);
        for &e in &members[..quota] {
            emerging[e] = true;
        }
    }
    let known: Vec<usize> = (0..n).filter(|&e| !emerging[e]).collect();

    let mut targets = Vec::with_capacity(spec.types);
    for ty in 0..spec.types {
        let target_type = (ty + 1) % spec.types;
        let mut pool: Vec<usize> = known.iter().copied().filter(|&e| types[e] == target_type).collect();
        let slots: [Vec<Vec<usize>>; 2] = std::array::from_fn(|_| {
            (0..spec.phases)
                .map(|_| {
                    pool.shuffle(&mut rng);
                    let mut pick = pool[..spec.answers_per_pattern].to_vec();
                    pick.sort_unstable();
                    pick
                })
                .collect()
        });
        targets.push(slots);
    }

    let first_test: Vec<Option<usize>> = emerging
        .iter()
        .map(|&em| em.then(|| rng.random_range(split.test.clone())))
        .collect();

    let truth = SynthTruth {
        spec: spec.clone(),
        split: split.clone(),
        types: types.clone(),
        emerging: emerging.clone(),
        targets,
        known: known.clone(),
    };

    let mut facts = Vec::new();
    for t in 0..spec.timestamps {
        for e in 0..n {
            let draw = rng.random::<f64>();
            let active = match first_test[e] {
                None => t == 0 || draw < spec.activity,
                Some(t0) => t == t0 || (t > t0 && draw < spec.activity),
            };
            if !active {
                continue;
            }
            let ty = types[e];
            for s in 0..2 {
                let relation = 2 * ty + s;
                let answers = truth.answer_key(e, relation, t).expect("pattern relation");
                let mut object = answers[rng.random_range(0..answers.len())];
                if rng.random::<f64>() < spec.noise {
                    object = known[rng.random_range(0..known.len())];
                }
                facts.push(Quadruple::new(e, relation, object, t));
            }
        }
    }
    let vocab = Vocab::new(
        (0..n).map(|e| format!("type{}_entity{}", types[e], e % per)).collect(),
        (0..spec.relations).map(|r| format!("rel{r}")).collect(),
    )?;
    let graph = TemporalKG::new(vocab, facts)?;

    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let centroids: Vec<Vec<f64>> = (0..spec.types)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let jitter = Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let data = (0..n)
        .flat_map(|e| centroids[types[e]].clone())
        .map(|c| c + jitter.sample(&mut rng))
        .collect();
    let embeddings = EntityTable::new(n, spec.dim, data)?;
    Ok(SynthInstance {
        graph,
        embeddings,
        truth,
    })
}

fn mean_reciprocal(from: usize, to: usize) -> f64 {
    (from..=to).map(|r| 1.0 / r as f64).sum::<f64>() / (to + 1 - from) as f64
}

/// Expected MRR of uniformly random ranks among `n` candidates.
pub fn random_guess_mrr(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    mean_reciprocal(1, n)
}

/// Expected MRR, over the emerging test queries actually generated, of the
/// predictor that ranks the pattern answers first, then the other known
/// entities, each group in uniformly random order.
///
/// The queries are those whose subject is an emerging entity at its first
/// appearance; `None` if there are none.
pub fn oracle_best_mrr(truth: &SynthTruth, g: &TemporalKG) -> Option<f64> {
    let first = crate::data::first_appearance_vec(g);
    let k = truth.known.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in truth.split.test.clone() {
        for q in g.snapshot(t) {
            if g.is_inverse(q.relation) || !truth.emerging[q.subject] || first[q.subject] != Some(t) {
                continue;
            }
            let answers = truth.answer_key(q.subject, q.relation, t)?;
            let a = answers.len();
            total += if answers.contains(&q.object) {
                mean_reciprocal(1, a)
            } else {
                mean_reciprocal(a + 1, k)
            };
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}
