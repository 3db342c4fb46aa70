//! Few-shot demonstration selection: zero-shot, static, seeded random, and
//! nearest neighbours by cosine similarity with a per-class cap.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Passage};
use crate::exec::Execution;
use crate::gateway::{EmbeddingVector, Gateway, GatewayError};
use crate::prompting::Demonstration;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_PER_CLASS_CAP: usize = 3;

const NORM_TOLERANCE: f64 = 1e-6;
const EMBED_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("similar selection needs a non-empty index")]
    EmptyIndex,
    #[error("policy needs an embedding index")]
    MissingIndex,
    #[error("policy needs the training corpus")]
    MissingTrain,
    #[error("cannot sample {k} demonstrations from {pool} passages")]
    PoolTooSmall { k: usize, pool: usize },
    #[error("index entry {0} is not in the training corpus")]
    UnknownPassage(String),
    #[error("index file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("index I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SelectionError> {
    if u.dim() != v.dim() {
        return Err(SelectionError::DimMismatch(u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub passage_id: String,
    pub label: bool,
    pub vector: EmbeddingVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub corpus: String,
    pub model: String,
    pub dim: usize,
    /// Fingerprint of the run configuration that produced the index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub header: IndexHeader,
    pub entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn new(header: IndexHeader, entries: Vec<IndexEntry>) -> Result<Self, SelectionError> {
        let mut ids = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            let fail = |message: String| SelectionError::Format { line: i + 2, message };
            if e.vector.dim() != header.dim {
                return Err(fail(format!("vector has dim {}, index has {}", e.vector.dim(), header.dim)));
            }
            if (e.vector.norm() - 1.0).abs() > NORM_TOLERANCE {
                return Err(fail("vector is not unit-norm".into()));
            }
            if !ids.insert(e.passage_id.as_str()) {
                return Err(fail(format!("duplicate passage id {}", e.passage_id)));
            }
        }
        Ok(Self { header, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSONL: a header record `{corpus, model, dim}`, then one
    /// `{passage_id, label, vector}` record per entry.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), SelectionError> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header).expect("header serializes");
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({
                    "passage_id": e.passage_id,
                    "label": e.label,
                    "vector": e.vector.values,
                }),
            )
            .expect("entry serializes");
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SelectionError> {
        #[derive(Deserialize)]
        struct Row {
            passage_id: String,
            label: bool,
            vector: Vec<f64>,
        }
        let data = fs::read_to_string(path)?;
        let mut lines = data.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(SelectionError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: IndexHeader = serde_json::from_str(first).map_err(|e| SelectionError::Format {
            line: 1,
            message: e.to_string(),
        })?;
        let entries = lines
            .map(|(i, l)| {
                let row: Row = serde_json::from_str(l).map_err(|e| SelectionError::Format {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                Ok(IndexEntry {
                    passage_id: row.passage_id,
                    label: row.label,
                    vector: EmbeddingVector::new(row.vector),
                })
            })
            .collect::<Result<Vec<_>, SelectionError>>()?;
        Self::new(header, entries)
    }
}

/// Embed every training passage.
pub fn build_index(
    train: &Corpus,
    gateway: &Gateway,
    exec: Execution,
) -> Result<EmbeddingIndex, SelectionError> {
    let batches: Vec<&[Passage]> = train.passages().chunks(EMBED_BATCH).collect();
    let vectors = exec.try_map(&batches, |batch| {
        let texts: Vec<String> = batch.iter().map(|p| p.text.clone()).collect();
        gateway.embed(&texts)
    })?;
    let entries = train
        .passages()
        .iter()
        .zip(vectors.into_iter().flatten())
        .map(|(p, v)| IndexEntry {
            passage_id: p.id.clone(),
            label: p.label,
            vector: v.normalized(),
        })
        .collect();
    EmbeddingIndex::new(
        IndexHeader {
            corpus: train.name().to_string(),
            model: gateway.embedding_model().to_string(),
            dim: gateway.embedding_dim(),
            config_fingerprint: None,
        },
        entries,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionPolicy {
    ZeroShot,
    Static { demos: Vec<Demonstration> },
    Random { k: usize, seed: u64 },
    Similar { k: usize, per_class_cap: usize },
}

impl SelectionPolicy {
    pub fn static_builtin() -> Self {
        SelectionPolicy::Static {
            demos: crate::prompting::static_demos(),
        }
    }

    pub fn random(seed: u64) -> Self {
        SelectionPolicy::Random { k: DEFAULT_K, seed }
    }

    pub fn similar() -> Self {
        SelectionPolicy::Similar {
            k: DEFAULT_K,
            per_class_cap: DEFAULT_PER_CLASS_CAP,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::ZeroShot => "Zero-shot",
            SelectionPolicy::Static { .. } => "Static",
            SelectionPolicy::Random { .. } => "Random",
            SelectionPolicy::Similar { .. } => "Similar",
        }
    }
}

/// What a policy may need besides the target passage.
#[derive(Clone, Copy, Debug)]
pub struct SelectionContext<'a> {
    pub gateway: &'a Gateway,
    pub index: Option<&'a EmbeddingIndex>,
    pub train: Option<&'a Corpus>,
    pub exec: Execution,
}

/// Pick the demonstrations for one target passage. `nonce` distinguishes
/// repeated evaluation runs for the random policy.
pub fn select(
    policy: &SelectionPolicy,
    target: &Passage,
    ctx: &SelectionContext<'_>,
    nonce: u64,
) -> Result<Vec<Demonstration>, SelectionError> {
    match policy {
        SelectionPolicy::ZeroShot => Ok(Vec::new()),
        SelectionPolicy::Static { demos } => Ok(demos.clone()),
        SelectionPolicy::Random { k, seed } => {
            let train = ctx.train.ok_or(SelectionError::MissingTrain)?;
            random_sample(train, *k, *seed, nonce, &target.id)
        }
        SelectionPolicy::Similar { k, per_class_cap } => {
            let index = ctx.index.ok_or(SelectionError::MissingIndex)?;
            let train = ctx.train.ok_or(SelectionError::MissingTrain)?;
            if index.is_empty() {
                return Err(SelectionError::EmptyIndex);
            }
            let query = ctx
                .gateway
                .embed(std::slice::from_ref(&target.text))?
                .remove(0);
            let leaked: HashSet<&str> = train
                .passages()
                .iter()
                .filter(|p| p.text == target.text)
                .map(|p| p.id.as_str())
                .collect();
            let ranked = rank_similar(index, &query, &leaked, *k, *per_class_cap, ctx.exec)?;
            // Most similar goes last, next to the target message.
            ranked
                .into_iter()
                .rev()
                .map(|(i, _)| {
                    let id = &index.entries[i].passage_id;
                    let p = train
                        .get(id)
                        .ok_or_else(|| SelectionError::UnknownPassage(id.clone()))?;
                    Ok(Demonstration {
                        input_text: p.text.clone(),
                        label: p.label,
                    })
                })
                .collect()
        }
    }
}

fn random_sample(
    train: &Corpus,
    k: usize,
    seed: u64,
    nonce: u64,
    passage_id: &str,
) -> Result<Vec<Demonstration>, SelectionError> {
    let pool = train.passages();
    if k > pool.len() {
        return Err(SelectionError::PoolTooSmall { k, pool: pool.len() });
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(nonce.to_le_bytes());
    h.update(passage_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| Demonstration {
            input_text: pool[i].text.clone(),
            label: pool[i].label,
        })
        .collect())
}

fn by_similarity<'a>(
    entries: &'a [IndexEntry],
    sims: &'a [f64],
) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| entries[a].passage_id.cmp(&entries[b].passage_id))
    }
}

/// Indices of the selected entries with their similarity, most similar
/// first: at most `k` in total and at most `per_class_cap` per label, taking
/// entries in order of descending similarity (ties by ascending passage id)
/// and skipping `excluded` ids.
///
/// Equivalent to a greedy scan of the full ranking, but only the top
/// `min(k, cap)` of each class is ever sorted.
pub fn rank_similar(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    excluded: &HashSet<&str>,
    k: usize,
    per_class_cap: usize,
    exec: Execution,
) -> Result<Vec<(usize, f64)>, SelectionError> {
    let entries = &index.entries;
    let sims = exec.try_map(entries, |e| cosine(query, &e.vector))?;
    let cmp = by_similarity(entries, &sims);
    let keep = k.min(per_class_cap);
    let mut merged = Vec::with_capacity(2 * keep);
    for class in [true, false] {
        let mut members: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].label == class && !excluded.contains(entries[i].passage_id.as_str()))
            .collect();
        if keep == 0 {
            continue;
        }
        if members.len() > keep {
            members.select_nth_unstable_by(keep - 1, &cmp);
            members.truncate(keep);
        }
        merged.extend(members);
    }
    merged.sort_by(&cmp);
    merged.truncate(k);
    Ok(merged.into_iter().map(|i| (i, sims[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{HashEmbedder, ScriptedBackend};
    use std::sync::Arc;

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).normalized()
    }

    #[test]
    fn cosine_examples() {
        let u = unit(&[1.0, 1.0]);
        let v = unit(&[1.0, 0.0]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&unit(&[0.0, 1.0]), &v).unwrap(), 0.0);
        assert!((cosine(&u, &v).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine(&u, &unit(&[1.0, 0.0, 0.0])),
            Err(SelectionError::DimMismatch(2, 3))
        ));
        assert!(matches!(
            cosine(&u, &EmbeddingVector::new(vec![0.0, 0.0])),
            Err(SelectionError::ZeroVector)
        ));
    }

    /// Entries on a 2-d arc so cosine to (1, 0) equals the given similarity.
    fn arc_index(items: &[(&str, bool, f64)]) -> EmbeddingIndex {
        let entries = items
            .iter()
            .map(|&(id, label, sim)| IndexEntry {
                passage_id: id.into(),
                label,
                vector: EmbeddingVector::new(vec![sim, (1.0 - sim * sim).sqrt()]),
            })
            .collect();
        EmbeddingIndex::new(
            IndexHeader {
                corpus: "t".into(),
                model: "arc".into(),
                dim: 2,
                config_fingerprint: None,
            },
            entries,
        )
        .unwrap()
    }

    fn ids(index: &EmbeddingIndex, ranked: &[(usize, f64)]) -> Vec<String> {
        ranked.iter().map(|(i, _)| index.entries[*i].passage_id.clone()).collect()
    }

    #[test]
    fn cap_binds_on_one_class() {
        let index = arc_index(&[
            ("p1", true, 0.9),
            ("p2", true, 0.8),
            ("p3", true, 0.7),
            ("p4", true, 0.6),
            ("n1", false, 0.5),
            ("n2", false, 0.4),
        ]);
        let q = unit(&[1.0, 0.0]);
        let r = rank_similar(&index, &q, &HashSet::new(), 5, 3, Execution::Sequential).unwrap();
        assert_eq!(ids(&index, &r), ["p1", "p2", "p3", "n1", "n2"]);
    }

    #[test]
    fn small_pool_is_exhausted() {
        let index = arc_index(&[("a", true, 0.3), ("b", false, 0.2)]);
        let r = rank_similar(&index, &unit(&[1.0, 0.0]), &HashSet::new(), 5, 3, Execution::Sequential)
            .unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let index = arc_index(&[("b", true, 0.5), ("a", true, 0.5), ("c", false, 0.1)]);
        let r = rank_similar(&index, &unit(&[1.0, 0.0]), &HashSet::new(), 1, 3, Execution::Sequential)
            .unwrap();
        assert_eq!(ids(&index, &r), ["a"]);
    }

    #[test]
    fn excluded_ids_are_skipped() {
        let index = arc_index(&[("a", true, 0.9), ("b", true, 0.5)]);
        let excluded: HashSet<&str> = ["a"].into();
        let r = rank_similar(&index, &unit(&[1.0, 0.0]), &excluded, 5, 3, Execution::Sequential)
            .unwrap();
        assert_eq!(ids(&index, &r), ["b"]);
    }

    fn passage(id: &str, text: &str, label: bool) -> Passage {
        Passage {
            id: id.into(),
            report_id: "r".into(),
            text: text.into(),
            label,
        }
    }

    fn gateway() -> Gateway {
        Gateway::new(
            Arc::new(ScriptedBackend::default()),
            Arc::new(HashEmbedder::default()),
        )
    }

    #[test]
    fn similar_orders_most_similar_last_and_guards_leaks() {
        let train = Corpus::new(
            "train",
            vec![
                passage("a", "net zero by 2050 commitment", true),
                passage("b", "net zero", false),
                passage("c", "office paper recycling", false),
                passage("d", "we commit to net zero by 2050", true),
            ],
        )
        .unwrap();
        let gw = gateway();
        let index = build_index(&train, &gw, Execution::Sequential).unwrap();
        assert_eq!(index.len(), 4);
        assert!(index.entries.iter().all(|e| (e.vector.norm() - 1.0).abs() < 1e-6));
        let ctx = SelectionContext {
            gateway: &gw,
            index: Some(&index),
            train: Some(&train),
            exec: Execution::Sequential,
        };
        let target = passage("t", "we commit to net zero by 2050", true);
        let demos = select(&SelectionPolicy::similar(), &target, &ctx, 0).unwrap();
        assert_eq!(demos.len(), 3);
        assert!(demos.iter().all(|d| d.input_text != target.text));
        assert_eq!(demos.last().unwrap().input_text, "net zero by 2050 commitment");
    }

    #[test]
    fn random_is_deterministic_and_bounded() {
        let train = Corpus::new(
            "train",
            (0..20)
                .map(|i| passage(&format!("p{i:02}"), &format!("text {i}"), i % 2 == 0))
                .collect(),
        )
        .unwrap();
        let gw = gateway();
        let ctx = SelectionContext {
            gateway: &gw,
            index: None,
            train: Some(&train),
            exec: Execution::Sequential,
        };
        let target = passage("t", "x", true);
        let a = select(&SelectionPolicy::random(7), &target, &ctx, 1).unwrap();
        let b = select(&SelectionPolicy::random(7), &target, &ctx, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let distinct: HashSet<_> = a.iter().map(|d| &d.input_text).collect();
        assert_eq!(distinct.len(), 5);
        let runs: HashSet<Vec<String>> = (0..7)
            .map(|n| {
                select(&SelectionPolicy::random(7), &target, &ctx, n)
                    .unwrap()
                    .into_iter()
                    .map(|d| d.input_text)
                    .collect()
            })
            .collect();
        assert!(runs.len() > 1);
        let too_many = SelectionPolicy::Random { k: 21, seed: 0 };
        assert!(matches!(
            select(&too_many, &target, &ctx, 0),
            Err(SelectionError::PoolTooSmall { k: 21, pool: 20 })
        ));
    }

    #[test]
    fn similar_without_index_fails() {
        let gw = gateway();
        let ctx = SelectionContext {
            gateway: &gw,
            index: None,
            train: None,
            exec: Execution::Sequential,
        };
        let r = select(&SelectionPolicy::similar(), &passage("t", "x", true), &ctx, 0);
        assert!(matches!(r, Err(SelectionError::MissingIndex)));
    }

    #[test]
    fn index_file_round_trip() {
        let index = arc_index(&[("a", true, 0.3), ("b", false, 0.2)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        index.write_jsonl(&path).unwrap();
        assert_eq!(EmbeddingIndex::read_jsonl(&path).unwrap(), index);
    }
}
