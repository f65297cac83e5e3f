//! Quadruple facts, vocabularies, dataset files, and chronological splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ENTITY_VOCAB_FILE: &str = "entity2id.txt";
pub const RELATION_VOCAB_FILE: &str = "relation2id.txt";
pub const QUADRUPLES_FILE: &str = "quadruples.txt";
pub const EMBEDDINGS_FILE: &str = "entity_embeddings.txt";

/// A timestamped fact `(subject, relation, object, t)`; `t` is a snapshot index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub timestamp: usize,
}

impl Quadruple {
    pub fn new(subject: usize, relation: usize, object: usize, timestamp: usize) -> Self {
        Self {
            subject,
            relation,
            object,
            timestamp,
        }
    }

    pub fn involves(&self, entity: usize) -> bool {
        self.subject == entity || self.object == entity
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
}

impl Vocab {
    pub fn new(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        for (kind, names) in [("entity", &entities), ("relation", &relations)] {
            let mut seen = HashSet::with_capacity(names.len());
            if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
                return Err(Error::Vocab(format!("duplicate {kind} name {dup:?}")));
            }
        }
        Ok(Self { entities, relations })
    }

    /// Vocabulary with generated names `e0..` and `r0..`.
    pub fn anonymous(num_entities: usize, num_relations: usize) -> Self {
        Self {
            entities: (0..num_entities).map(|i| format!("e{i}")).collect(),
            relations: (0..num_relations).map(|i| format!("r{i}")).collect(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entities.get(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: usize) -> Option<&str> {
        self.relations.get(id).map(String::as_str)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entities = read_id_map(&dir.join(ENTITY_VOCAB_FILE))?;
        let relations = read_id_map(&dir.join(RELATION_VOCAB_FILE))?;
        Self::new(entities, relations)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (file, names) in [(ENTITY_VOCAB_FILE, &self.entities), (RELATION_VOCAB_FILE, &self.relations)] {
            let path = dir.join(file);
            let mut out = String::new();
            for (id, name) in names.iter().enumerate() {
                out.push_str(&format!("{name}\t{id}\n"));
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (name, id) = line
            .rsplit_once('\t')
            .or_else(|| line.trim_end().rsplit_once(char::is_whitespace))
            .ok_or_else(|| parse_err(path, lineno, "expected `name<TAB>id`"))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, &format!("invalid id {id:?}")))?;
        pairs.push((id, name.to_string()));
    }
    pairs.sort();
    for (expected, (id, _)) in pairs.iter().enumerate() {
        if *id != expected {
            return Err(Error::Vocab(format!(
                "{}: ids must be dense from 0, missing or repeated id near {expected}",
                path.display()
            )));
        }
    }
    Ok(pairs.into_iter().map(|(_, n)| n).collect())
}

fn parse_err(path: &Path, zero_based_line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: zero_based_line + 1,
        msg: msg.to_string(),
    }
}

/// Facts grouped into contiguous snapshots `0..num_timestamps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalKG {
    snapshots: Vec<Vec<Quadruple>>,
    vocab: Vocab,
    augmented: bool,
}

impl TemporalKG {
    /// Builds a graph over base relations; every id must resolve in `vocab`.
    pub fn new(vocab: Vocab, facts: impl IntoIterator<Item = Quadruple>) -> Result<Self> {
        let mut snapshots: Vec<Vec<Quadruple>> = Vec::new();
        for q in facts {
            check_ids(&vocab, &q, vocab.num_relations())?;
            if q.timestamp >= snapshots.len() {
                snapshots.resize_with(q.timestamp + 1, Vec::new);
            }
            snapshots[q.timestamp].push(q);
        }
        Ok(Self {
            snapshots,
            vocab,
            augmented: false,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    /// Number of base (non-inverse) relations, |R|.
    pub fn num_base_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    /// Size of the relation id space: 2|R| once inverses are added.
    pub fn num_relation_ids(&self) -> usize {
        if self.augmented {
            2 * self.vocab.num_relations()
        } else {
            self.vocab.num_relations()
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn num_timestamps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshot(&self, t: usize) -> &[Quadruple] {
        self.snapshots.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn facts(&self) -> impl Iterator<Item = &Quadruple> {
        self.snapshots.iter().flatten()
    }

    pub fn num_facts(&self) -> usize {
        self.snapshots.iter().map(Vec::len).sum()
    }

    pub fn is_inverse(&self, relation: usize) -> bool {
        relation >= self.vocab.num_relations()
    }
}

fn check_ids(vocab: &Vocab, q: &Quadruple, relation_ids: usize) -> Result<()> {
    let ne = vocab.num_entities();
    if q.subject >= ne || q.object >= ne {
        return Err(Error::Vocab(format!(
            "entity id in {q:?} outside vocabulary of {ne} entities"
        )));
    }
    if q.relation >= relation_ids {
        return Err(Error::Vocab(format!(
            "relation id {} outside vocabulary of {relation_ids} relations",
            q.relation
        )));
    }
    Ok(())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reads one quadruple file against the vocabularies in `vocab_dir`.
///
/// Raw times are divided by the dataset granularity, the gcd of the distinct
/// raw times (1 when every raw time is 0).
pub fn load_quadruples(path: &Path, vocab_dir: &Path) -> Result<TemporalKG> {
    load_quadruple_files(&[path.to_path_buf()], vocab_dir)
}

/// Like [`load_quadruples`] over several files sharing one time granularity.
pub fn load_quadruple_files(paths: &[PathBuf], vocab_dir: &Path) -> Result<TemporalKG> {
    let vocab = Vocab::load(vocab_dir)?;
    let mut raw = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            if cols.len() < 4 {
                return Err(parse_err(path, lineno, "expected 4 tab-separated columns"));
            }
            let mut ids = [0u64; 4];
            for (slot, col) in ids.iter_mut().zip(&cols[..4]) {
                *slot = col
                    .parse()
                    .map_err(|_| parse_err(path, lineno, &format!("non-integer field {col:?}")))?;
            }
            let q = Quadruple::new(ids[0] as usize, ids[1] as usize, ids[2] as usize, 0);
            check_ids(&vocab, &q, vocab.num_relations()).map_err(|e| match e {
                Error::Vocab(msg) => Error::Vocab(format!("{}:{}: {msg}", path.display(), lineno + 1)),
                other => other,
            })?;
            raw.push((q, ids[3]));
        }
    }
    let distinct: BTreeSet<u64> = raw.iter().map(|(_, t)| *t).collect();
    let granularity = match distinct.iter().fold(0, |g, &t| gcd(g, t)) {
        0 => 1,
        g => g,
    };
    TemporalKG::new(
        vocab,
        raw.into_iter().map(|(q, t)| Quadruple {
            timestamp: (t / granularity) as usize,
            ..q
        }),
    )
}

/// Loads `dir/quadruples.txt`, or the concatenation of whichever of
/// `train.txt`, `valid.txt`, `test.txt` exist, with vocabularies from `dir`.
pub fn load_dataset_dir(dir: &Path) -> Result<TemporalKG> {
    let single = dir.join(QUADRUPLES_FILE);
    if single.exists() {
        return load_quadruples(&single, dir);
    }
    let parts: Vec<PathBuf> = ["train.txt", "valid.txt", "test.txt"]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect();
    if parts.is_empty() {
        return Err(Error::io(
            &single,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no quadruple files found"),
        ));
    }
    load_quadruple_files(&parts, dir)
}

/// Writes base facts with raw time equal to the snapshot index.
pub fn write_quadruples(g: &TemporalKG, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for q in g.facts().filter(|q| !g.is_inverse(q.relation)) {
        writeln!(out, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.timestamp)
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Adds `(o, r + |R|, s, t)` for every base fact `(s, r, o, t)`.
pub fn add_inverse_relations(g: &TemporalKG) -> Result<TemporalKG> {
    let nr = g.num_base_relations();
    if g.augmented || g.facts().any(|q| q.relation >= nr) {
        return Err(Error::Contract("graph already carries inverse relations".into()));
    }
    let snapshots = g
        .snapshots
        .iter()
        .map(|snap| {
            let mut out = snap.clone();
            out.extend(snap.iter().map(|q| Quadruple::new(q.object, q.relation + nr, q.subject, q.timestamp)));
            out
        })
        .collect();
    Ok(TemporalKG {
        snapshots,
        vocab: g.vocab.clone(),
        augmented: true,
    })
}

/// Half-open train/valid/test timestamp ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn num_timestamps(&self) -> usize {
        self.test.end
    }
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.5, 0.2, 0.3];

/// Cuts the timeline at `floor(cumulative ratio × num_timestamps)`.
pub fn chronological_split(g: &TemporalKG, ratios: [f64; 3]) -> Result<Split> {
    split_timeline(g.num_timestamps(), ratios)
}

pub fn split_timeline(n: usize, ratios: [f64; 3]) -> Result<Split> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    // The nudge keeps exact products such as 0.7 × 10 from flooring to 6.
    let cut = |c: f64| ((c * n as f64) + 1e-9).floor() as usize;
    let a = cut(ratios[0]).min(n);
    let b = cut(ratios[0] + ratios[1]).min(n);
    let split = Split {
        train: 0..a,
        valid: a..b,
        test: b..n,
    };
    for (name, r) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if r.is_empty() {
            return Err(Error::Config(format!(
                "{name} partition is empty for {n} timestamps with ratios {ratios:?}"
            )));
        }
    }
    Ok(split)
}

/// Earliest timestamp at which each entity takes part in any fact.
pub fn first_appearance(g: &TemporalKG) -> BTreeMap<usize, usize> {
    let mut first = BTreeMap::new();
    for (t, snap) in g.snapshots.iter().enumerate() {
        for q in snap {
            first.entry(q.subject).or_insert(t);
            first.entry(q.object).or_insert(t);
        }
    }
    first
}

/// Dense form of [`first_appearance`]: `None` for entities never observed.
pub fn first_appearance_vec(g: &TemporalKG) -> Vec<Option<usize>> {
    let mut out = vec![None; g.num_entities()];
    for (e, t) in first_appearance(g) {
        out[e] = Some(t);
    }
    out
}

/// Entities whose first appearance lies inside the test range.
pub fn emerging_entities(g: &TemporalKG, split: &Split) -> BTreeSet<usize> {
    first_appearance(g)
        .into_iter()
        .filter(|(_, t)| split.test.contains(t))
        .map(|(e, _)| e)
        .collect()
}

/// Frozen `|E| × d` entity embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTable {
    matrix: Tensor,
}

impl EntityTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            matrix: Tensor::matrix(rows, dim, data)?,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::shape("entity table", t.shape(), &[0, 0]));
        }
        let (r, c) = t.dims2();
        Self::new(r, c, t.into_data())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn data(&self) -> &[f64] {
        self.matrix.data()
    }
}

/// Reads the `N d` header plus `N` rows of `entity_id v_1 … v_d`.
pub fn load_embeddings(path: &Path, expected_entities: usize) -> Result<EntityTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Integrity(format!("{}: missing `N d` header", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|tok| tok.parse().map_err(|_| parse_err(path, hline, &format!("bad header token {tok:?}"))))
        .collect::<Result<_>>()?;
    let [n, d] = dims[..] else {
        return Err(parse_err(path, hline, "header must be `N d`"));
    };
    if n != expected_entities {
        return Err(Error::Integrity(format!(
            "{}: header declares {n} entities, vocabulary has {expected_entities}",
            path.display()
        )));
    }
    if d == 0 {
        return Err(Error::Integrity(format!("{}: zero embedding dimension", path.display())));
    }
    let mut data = vec![0.0; n * d];
    let mut seen = vec![false; n];
    let mut rows = 0;
    for (lineno, line) in lines {
        let mut toks = line.split_whitespace();
        let id_tok = toks.next().unwrap_or_default();
        let id: usize = id_tok
            .parse()
            .map_err(|_| parse_err(path, lineno, &format!("invalid entity id {id_tok:?}")))?;
        rows += 1;
        if rows > n {
            return Err(Error::Integrity(format!(
                "{}: more than the declared {n} rows",
                path.display()
            )));
        }
        if id >= n || seen[id] {
            return Err(Error::Integrity(format!(
                "{}:{}: entity id {id} out of range or repeated",
                path.display(),
                lineno + 1
            )));
        }
        seen[id] = true;
        let vals: Vec<f64> = toks
            .map(|tok| tok.parse().map_err(|_| parse_err(path, lineno, &format!("non-numeric value {tok:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != d {
            return Err(Error::Integrity(format!(
                "{}:{}: expected {d} values, found {}",
                path.display(),
                lineno + 1,
                vals.len()
            )));
        }
        data[id * d..(id + 1) * d].copy_from_slice(&vals);
    }
    if rows != n {
        return Err(Error::Integrity(format!(
            "{}: header declares {n} rows, found {rows}",
            path.display()
        )));
    }
    EntityTable::new(n, d, data)
}

pub fn write_embeddings(table: &EntityTable, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{} {}", table.len(), table.dim()).map_err(io)?;
    for i in 0..table.len() {
        write!(out, "{i}").map_err(io)?;
        for v in table.row(i) {
            write!(out, " {v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}
