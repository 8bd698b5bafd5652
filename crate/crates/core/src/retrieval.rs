//! Cached entity embeddings and exact top-K search.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::Vocabulary;
use crate::corpus::{Corpus, MentionRecord, World};
use crate::error::{Error, Result};
use crate::pooling::PoolingKind;
use crate::template::{build_entity_sequence, build_mention_sequence};
use crate::train::BiEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Dot,
    Cosine,
    Euclidean,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dot, Metric::Cosine, Metric::Euclidean];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Whether larger values rank first.
    pub fn higher_is_better(self) -> bool {
        self != Metric::Euclidean
    }

    /// Ordering with the better score first.
    pub fn compare(self, a: f64, b: f64) -> Ordering {
        if self.higher_is_better() {
            b.total_cmp(&a)
        } else {
            a.total_cmp(&b)
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Dot product, cosine of the angle, or euclidean distance.
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>, metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of width {} and {}", a.len(), b.len())));
    }
    Ok(match metric {
        Metric::Dot => a.dot(&b),
        Metric::Cosine => {
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Retrieval("cosine similarity with a zero vector".into()));
            }
            a.dot(&b) / (na * nb)
        }
        Metric::Euclidean => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub mention_id: String,
    pub candidates: Vec<Candidate>,
    /// Every entity of the world is ranked.
    pub exhaustive: bool,
}

impl RetrievalResult {
    /// 1-based rank of `entity_id`, if retrieved.
    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.entity_id == entity_id).map(|p| p + 1)
    }
}

/// One JSON object per line.
pub fn write_results(path: impl AsRef<Path>, results: &[RetrievalResult]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let line = serde_json::to_string(r).expect("results serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RetrievalResult>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Entity embeddings of one world, one row per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    entity_ids: Vec<String>,
    matrix: Array2<f64>,
    pub metric: Metric,
    pub pooling: PoolingKind,
    pub world: String,
}

impl EmbeddingIndex {
    pub fn new(
        entity_ids: Vec<String>,
        matrix: Array2<f64>,
        metric: Metric,
        pooling: PoolingKind,
        world: &str,
    ) -> Result<Self> {
        if entity_ids.is_empty() {
            return Err(Error::Retrieval("index over an empty dictionary".into()));
        }
        if entity_ids.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} entity ids for {} rows",
                entity_ids.len(),
                matrix.nrows()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index matrix".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entity_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Retrieval(format!("duplicate entity id {dup}")));
        }
        Ok(EmbeddingIndex {
            entity_ids,
            matrix,
            metric,
            pooling,
            world: world.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// The `k` best entities for `query` under `metric`, ties broken by
    /// ascending entity id.
    pub fn top_k(&self, query: ArrayView1<f64>, k: usize, metric: Metric) -> Result<Vec<Candidate>> {
        if k > self.len() {
            return Err(Error::Retrieval(format!("K={k} exceeds the {} indexed entities", self.len())));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query width {} against index width {}", query.len(), self.dim())));
        }
        let scores: Vec<f64> = self
            .matrix
            .axis_iter(Axis(0))
            .map(|row| similarity(query, row, metric))
            .collect::<Result<_>>()?;
        let order = |&a: &usize, &b: &usize| {
            metric
                .compare(scores[a], scores[b])
                .then_with(|| self.entity_ids[a].cmp(&self.entity_ids[b]))
        };
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        Ok(idx
            .into_iter()
            .map(|i| Candidate {
                entity_id: self.entity_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    /// Top-K under the index's own metric.
    pub fn search(&self, mention_id: &str, query: ArrayView1<f64>, k: usize) -> Result<RetrievalResult> {
        Ok(RetrievalResult {
            mention_id: mention_id.to_string(),
            candidates: self.top_k(query, k, self.metric)?,
            exhaustive: k == self.len(),
        })
    }

    /// Writes `<prefix>.ids`, `<prefix>.bin` and `<prefix>.meta`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let ids_path = with_suffix(prefix, "ids");
        let mut ids = String::new();
        for id in &self.entity_ids {
            ids.push_str(id);
            ids.push('\n');
        }
        std::fs::write(&ids_path, ids).map_err(|e| Error::io(&ids_path, e))?;

        let bin_path = with_suffix(prefix, "bin");
        let file = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&bin_path, e));
        write(&(self.matrix.nrows() as u64).to_le_bytes())?;
        write(&(self.matrix.ncols() as u64).to_le_bytes())?;
        for v in self.matrix.iter() {
            write(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(&bin_path, e))?;

        let meta_path = with_suffix(prefix, "meta");
        let meta = format!("metric={}\npooling={}\nworld={}\n", self.metric, self.pooling, self.world);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let ids_path = with_suffix(prefix, "ids");
        let file = std::fs::File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let entity_ids = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&ids_path, e))?;

        let bin_path = with_suffix(prefix, "bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Checkpoint(format!("{} lacks a shape header", bin_path.display())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        let (rows, cols) = (word(0) as usize, word(1) as usize);
        if bytes.len() != 16 + rows * cols * 8 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for a {rows}x{cols} matrix",
                bin_path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let matrix = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))?;

        let meta_path = with_suffix(prefix, "meta");
        let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let kv: HashMap<&str, &str> = meta.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks {k}", meta_path.display())))
        };
        EmbeddingIndex::new(entity_ids, matrix, get("metric")?.parse()?, get("pooling")?.parse()?, get("world")?)
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Embeds every entity of `world` with the entity encoder.
pub fn build_index(world: &World, model: &BiEncoder, vocab: &Vocabulary, metric: Metric) -> Result<EmbeddingIndex> {
    let entities = world.entities();
    if entities.is_empty() {
        return Err(Error::Retrieval(format!("world {} has an empty dictionary", world.name)));
    }
    let rows: Vec<_> = entities
        .par_iter()
        .map(|e| {
            let seq = build_entity_sequence(e, vocab, &model.config.template)?;
            model.embed_entity(&seq)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.values.view()).collect();
    let matrix = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingIndex::new(
        entities.iter().map(|e| e.entity_id.clone()).collect(),
        matrix,
        metric,
        model.config.pooling,
        &world.name,
    )
}

/// One index per world that has mentions in `mentions`.
pub fn build_indices<'a>(
    corpus: &Corpus,
    mentions: impl IntoIterator<Item = &'a MentionRecord>,
    model: &BiEncoder,
    vocab: &Vocabulary,
    metric: Metric,
) -> Result<BTreeMap<String, EmbeddingIndex>> {
    let mut out = BTreeMap::new();
    for m in mentions {
        if out.contains_key(&m.world) {
            continue;
        }
        let world = corpus
            .world(&m.world)
            .ok_or_else(|| Error::Retrieval(format!("mention {}: unknown world {}", m.mention_id, m.world)))?;
        out.insert(m.world.clone(), build_index(world, model, vocab, metric)?);
    }
    Ok(out)
}

/// Retrieves up to `k` candidates per mention from its own world's index.
/// Worlds smaller than `k` are ranked exhaustively.
pub fn retrieve_mentions(
    corpus: &Corpus,
    mentions: &[MentionRecord],
    indices: &BTreeMap<String, EmbeddingIndex>,
    model: &BiEncoder,
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    mentions
        .par_iter()
        .map(|m| {
            let index = indices
                .get(&m.world)
                .ok_or_else(|| Error::Retrieval(format!("no index for world {}", m.world)))?;
            let context = corpus
                .context_words(m)
                .ok_or_else(|| Error::Validation(format!("mention {}: context document missing", m.mention_id)))?;
            let seq = build_mention_sequence(m, &context, vocab, &model.config.template)?;
            let query = model.embed_mention(&seq)?;
            index.search(&m.mention_id, query.values.view(), k.min(index.len()))
        })
        .collect()
}
