//! Zeshel-format corpus ingestion.
//!
//! Entity dictionaries and context documents are line-delimited JSON objects
//! with `document_id`, `title` and `text`. Mention files carry `mention_id`,
//! `context_document_id`, `start_index`, `end_index` (inclusive word offsets
//! into the whitespace-split context text), `label_document_id` and `corpus`
//! (the world name). Entity types come from a TAB-separated sidecar file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Type label used for mentions and titles the tagger could not classify.
pub const UNK_TYPE: &str = "<unk>";

/// The 18 OntoNotes labels emitted by spaCy's English pipelines.
pub const DEFAULT_TYPE_LABELS: [&str; 18] = [
    "PERSON",
    "NORP",
    "FAC",
    "ORG",
    "GPE",
    "LOC",
    "PRODUCT",
    "EVENT",
    "WORK_OF_ART",
    "LAW",
    "LANGUAGE",
    "DATE",
    "TIME",
    "PERCENT",
    "MONEY",
    "QUANTITY",
    "ORDINAL",
    "CARDINAL",
];

/// Worlds of the public Zeshel release with their split and dictionary size.
pub const ZESHEL_WORLDS: [(&str, Split, usize); 16] = [
    ("american_football", Split::Train, 31_929),
    ("doctor_who", Split::Train, 40_281),
    ("fallout", Split::Train, 16_992),
    ("final_fantasy", Split::Train, 14_044),
    ("military", Split::Train, 104_520),
    ("pro_wrestling", Split::Train, 10_133),
    ("starwars", Split::Train, 87_056),
    ("world_of_warcraft", Split::Train, 27_677),
    ("coronation_street", Split::Val, 17_809),
    ("muppets", Split::Val, 21_344),
    ("ice_hockey", Split::Val, 28_684),
    ("elder_scrolls", Split::Val, 21_712),
    ("forgotten_realms", Split::Test, 15_603),
    ("lego", Split::Test, 10_076),
    ("star_trek", Split::Test, 34_430),
    ("yugioh", Split::Test, 10_031),
];

/// Mention file sizes of the public Zeshel release.
pub const ZESHEL_MENTION_SETS: [(&str, Split, usize); 5] = [
    ("train", Split::Train, 49_275),
    ("val", Split::Val, 10_000),
    ("test", Split::Test, 10_000),
    ("heldout_train_seen", Split::Train, 5_000),
    ("heldout_train_unseen", Split::Train, 5_000),
];

/// Reference dictionary size of a Zeshel world, if it is one.
pub fn reference_entity_count(world: &str) -> Option<usize> {
    ZESHEL_WORLDS
        .iter()
        .find(|(name, _, _)| *name == world)
        .map(|(_, _, count)| *count)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Split that owns the worlds of a named mention set.
    pub fn for_mention_set(name: &str) -> Option<Split> {
        match name {
            "train" | "heldout_train_seen" | "heldout_train_unseen" => Some(Split::Train),
            "val" | "valid" | "dev" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// An entity-type label, either one of the scheme's labels or `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityType(String);

impl EntityType {
    pub fn unknown() -> Self {
        EntityType(UNK_TYPE.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_unknown(&self) -> bool {
        self.0 == UNK_TYPE
    }
}

impl Default for EntityType {
    fn default() -> Self {
        EntityType::unknown()
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The configured set of type labels (without `<unk>`, which is always valid).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeScheme {
    labels: Vec<String>,
}

impl Default for TypeScheme {
    fn default() -> Self {
        TypeScheme {
            labels: DEFAULT_TYPE_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TypeScheme {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() || label.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid type label {label:?}")));
            }
            if label == UNK_TYPE {
                return Err(Error::Config(format!("{UNK_TYPE} is implicit in every scheme")));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::Config(format!("duplicate type label {label}")));
            }
        }
        Ok(TypeScheme { labels })
    }

    /// Labels in declaration order, `<unk>` excluded.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Labels followed by `<unk>`.
    pub fn labels_with_unknown(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(UNK_TYPE))
    }

    pub fn parse(&self, label: &str) -> Result<EntityType> {
        if label == UNK_TYPE || self.labels.iter().any(|l| l == label) {
            Ok(EntityType(label.to_string()))
        } else {
            Err(Error::Validation(format!("unknown entity type label {label:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityRecord {
    pub entity_id: String,
    pub title: String,
    pub description: String,
    pub world: String,
    pub entity_type: EntityType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MentionRecord {
    pub mention_id: String,
    pub context_document_id: String,
    /// First word of the mention, inclusive.
    pub start_index: usize,
    /// Last word of the mention, inclusive.
    pub end_index: usize,
    pub gold_entity_id: String,
    pub world: String,
    pub entity_type: EntityType,
}

#[derive(Serialize, Deserialize)]
struct DocumentRow {
    document_id: String,
    title: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct MentionRow {
    mention_id: String,
    context_document_id: String,
    start_index: usize,
    end_index: usize,
    label_document_id: String,
    corpus: String,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line of a line-delimited JSON file.
fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut rows = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

/// Loads an entity dictionary for `world`.
pub fn load_entities(path: impl AsRef<Path>, world: &str) -> Result<Vec<EntityRecord>> {
    let path = path.as_ref();
    if world.is_empty() {
        return Err(Error::Validation("world label must be non-empty".into()));
    }
    let rows: Vec<(usize, DocumentRow)> = read_rows(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.title.trim().is_empty() {
            return Err(Error::Validation(format!(
                "{}:{line}: entity {} has an empty title",
                path.display(),
                row.document_id
            )));
        }
        if !seen.insert(row.document_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate entity id {}",
                path.display(),
                row.document_id
            )));
        }
        out.push(EntityRecord {
            entity_id: row.document_id,
            title: row.title,
            description: row.text,
            world: world.to_string(),
            entity_type: EntityType::unknown(),
        });
    }
    Ok(out)
}

/// Loads context documents as an id → text map.
pub fn load_documents(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let rows: Vec<(usize, DocumentRow)> = read_rows(path)?;
    let mut docs = BTreeMap::new();
    for (line, row) in rows {
        if docs.insert(row.document_id.clone(), row.text).is_some() {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate document id {}",
                path.display(),
                row.document_id
            )));
        }
    }
    Ok(docs)
}

/// Loads a mention file. Span bounds and gold links are checked when the
/// mentions join a [`Corpus`]; here only the span order is validated.
pub fn load_mentions(path: impl AsRef<Path>) -> Result<Vec<MentionRecord>> {
    let path = path.as_ref();
    let rows: Vec<(usize, MentionRow)> = read_rows(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.start_index > row.end_index {
            return Err(Error::Validation(format!(
                "{}:{line}: mention {} has start_index {} > end_index {}",
                path.display(),
                row.mention_id,
                row.start_index,
                row.end_index
            )));
        }
        if !seen.insert(row.mention_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate mention id {}",
                path.display(),
                row.mention_id
            )));
        }
        out.push(MentionRecord {
            mention_id: row.mention_id,
            context_document_id: row.context_document_id,
            start_index: row.start_index,
            end_index: row.end_index,
            gold_entity_id: row.label_document_id,
            world: row.corpus,
            entity_type: EntityType::unknown(),
        });
    }
    Ok(out)
}

/// Loads a `id<TAB>type` annotation sidecar.
pub fn load_entity_type_annotations(
    path: impl AsRef<Path>,
    scheme: &TypeScheme,
) -> Result<HashMap<String, EntityType>> {
    let path = path.as_ref();
    let mut map = HashMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected `id<TAB>type`".into(),
        })?;
        let ty = scheme.parse(label.trim()).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        map.insert(id.to_string(), ty);
    }
    Ok(map)
}

/// Writes a `id<TAB>type` annotation sidecar, sorted by id.
pub fn write_entity_type_annotations(path: impl AsRef<Path>, types: &HashMap<String, EntityType>) -> Result<()> {
    let path = path.as_ref();
    let mut rows: Vec<_> = types.iter().collect();
    rows.sort();
    let mut body = String::new();
    for (id, ty) in rows {
        body.push_str(id);
        body.push('\t');
        body.push_str(ty.as_str());
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).expect("rows serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_entities(path: impl AsRef<Path>, entities: &[EntityRecord]) -> Result<()> {
    write_lines(
        path.as_ref(),
        entities.iter().map(|e| DocumentRow {
            document_id: e.entity_id.clone(),
            title: e.title.clone(),
            text: e.description.clone(),
        }),
    )
}

pub fn write_documents(path: impl AsRef<Path>, docs: &BTreeMap<String, String>) -> Result<()> {
    write_lines(
        path.as_ref(),
        docs.iter().map(|(id, text)| DocumentRow {
            document_id: id.clone(),
            title: id.clone(),
            text: text.clone(),
        }),
    )
}

pub fn write_mentions(path: impl AsRef<Path>, mentions: &[MentionRecord]) -> Result<()> {
    write_lines(
        path.as_ref(),
        mentions.iter().map(|m| MentionRow {
            mention_id: m.mention_id.clone(),
            context_document_id: m.context_document_id.clone(),
            start_index: m.start_index,
            end_index: m.end_index,
            label_document_id: m.gold_entity_id.clone(),
            corpus: m.world.clone(),
        }),
    )
}

/// One world: its dictionary, context documents and owning split.
#[derive(Clone, Debug)]
pub struct World {
    pub name: String,
    pub split: Option<Split>,
    entities: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
    documents: BTreeMap<String, String>,
}

impl World {
    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn entity(&self, id: &str) -> Option<&EntityRecord> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    /// Context documents that are not dictionary entries.
    pub fn extra_documents(&self) -> impl Iterator<Item = (&str, &str)> {
        self.documents.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Text of a context document. Falls back to the dictionary, since Zeshel
    /// context documents are themselves entity pages.
    pub fn document(&self, id: &str) -> Option<&str> {
        self.documents
            .get(id)
            .map(String::as_str)
            .or_else(|| self.entity(id).map(|e| e.description.as_str()))
    }
}

/// Whitespace word tokens of a context document; mention spans index these.
pub fn document_words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Loaded worlds plus named mention sets. Immutable once built.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    worlds: BTreeMap<String, World>,
    mention_sets: BTreeMap<String, Vec<MentionRecord>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_world(&mut self, name: &str, entities: Vec<EntityRecord>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Validation("world label must be non-empty".into()));
        }
        if self.worlds.contains_key(name) {
            return Err(Error::Validation(format!("world {name} added twice")));
        }
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if e.world != name {
                return Err(Error::Validation(format!(
                    "entity {} belongs to world {} not {name}",
                    e.entity_id, e.world
                )));
            }
            if by_id.insert(e.entity_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate entity id {} in world {name}",
                    e.entity_id
                )));
            }
        }
        self.worlds.insert(
            name.to_string(),
            World {
                name: name.to_string(),
                split: None,
                entities,
                by_id,
                documents: BTreeMap::new(),
            },
        );
        Ok(())
    }

    /// Registers context documents that are not dictionary entries.
    pub fn add_documents(&mut self, world: &str, docs: BTreeMap<String, String>) -> Result<()> {
        let w = self
            .worlds
            .get_mut(world)
            .ok_or_else(|| Error::Validation(format!("unknown world {world}")))?;
        w.documents.extend(docs);
        Ok(())
    }

    /// Adds a validated mention set. Every world it touches is assigned `split`;
    /// a world may not belong to two splits.
    pub fn add_mentions(
        &mut self,
        set_name: &str,
        split: Split,
        mentions: Vec<MentionRecord>,
    ) -> Result<()> {
        if self.mention_sets.contains_key(set_name) {
            return Err(Error::Validation(format!("mention set {set_name} added twice")));
        }
        for m in &mentions {
            let world = self.worlds.get(&m.world).ok_or_else(|| {
                Error::Validation(format!(
                    "mention {}: unknown world {}",
                    m.mention_id, m.world
                ))
            })?;
            validate_mention(world, m)?;
            if let Some(existing) = world.split {
                if existing != split {
                    return Err(Error::Validation(format!(
                        "world {} is in both {existing} and {split}",
                        m.world
                    )));
                }
            }
        }
        for m in &mentions {
            if let Some(w) = self.worlds.get_mut(&m.world) {
                w.split = Some(split);
            }
        }
        self.mention_sets.insert(set_name.to_string(), mentions);
        Ok(())
    }

    pub fn worlds(&self) -> impl Iterator<Item = &World> {
        self.worlds.values()
    }

    pub fn world(&self, name: &str) -> Option<&World> {
        self.worlds.get(name)
    }

    pub fn mention_set_names(&self) -> impl Iterator<Item = &str> {
        self.mention_sets.keys().map(String::as_str)
    }

    pub fn mentions(&self, set_name: &str) -> Option<&[MentionRecord]> {
        self.mention_sets.get(set_name).map(Vec::as_slice)
    }

    /// Every mention across all sets.
    pub fn all_mentions(&self) -> impl Iterator<Item = &MentionRecord> {
        self.mention_sets.values().flatten()
    }

    /// Gold entity of a mention.
    pub fn gold_entity(&self, mention: &MentionRecord) -> Option<&EntityRecord> {
        self.worlds
            .get(&mention.world)
            .and_then(|w| w.entity(&mention.gold_entity_id))
    }

    /// Words of the mention's context document.
    pub fn context_words<'a>(&'a self, mention: &MentionRecord) -> Option<Vec<&'a str>> {
        self.worlds
            .get(&mention.world)
            .and_then(|w| w.document(&mention.context_document_id))
            .map(document_words)
    }

    /// Sets entity and mention types from an annotation map. Ids absent from
    /// the map become `<unk>`.
    pub fn apply_type_annotations(&mut self, types: &HashMap<String, EntityType>) {
        let lookup = |id: &str| types.get(id).cloned().unwrap_or_default();
        for world in self.worlds.values_mut() {
            for e in &mut world.entities {
                e.entity_type = lookup(&e.entity_id);
            }
        }
        for set in self.mention_sets.values_mut() {
            for m in set {
                m.entity_type = lookup(&m.mention_id);
            }
        }
    }

    /// Resets every type to `<unk>`.
    pub fn clear_type_annotations(&mut self) {
        self.apply_type_annotations(&HashMap::new());
    }

    /// Loads a Zeshel-layout directory: `documents/<world>.json`, optional
    /// `contexts/<world>.json` for context pages outside the dictionary, and
    /// `mentions/<set>.json` for each recognised mention set.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let mut corpus = Corpus::new();
        for path in sorted_json_files(&dir.join("documents"))? {
            let world = file_stem(&path)?;
            let entities = load_entities(&path, &world)?;
            corpus.add_world(&world, entities)?;
        }
        let contexts = dir.join("contexts");
        if contexts.is_dir() {
            for path in sorted_json_files(&contexts)? {
                let world = file_stem(&path)?;
                corpus.add_documents(&world, load_documents(&path)?)?;
            }
        }
        let mentions_dir = dir.join("mentions");
        if mentions_dir.is_dir() {
            for path in sorted_json_files(&mentions_dir)? {
                let set = file_stem(&path)?;
                let split = Split::for_mention_set(&set).ok_or_else(|| {
                    Error::Validation(format!("unrecognised mention set {}", path.display()))
                })?;
                corpus.add_mentions(&set, split, load_mentions(&path)?)?;
            }
        }
        Ok(corpus)
    }

    /// Writes the corpus back in the layout [`Corpus::load_dir`] reads.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["documents", "contexts", "mentions"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for w in self.worlds.values() {
            write_entities(dir.join("documents").join(format!("{}.json", w.name)), &w.entities)?;
            if !w.documents.is_empty() {
                write_documents(
                    dir.join("contexts").join(format!("{}.json", w.name)),
                    &w.documents,
                )?;
            }
        }
        for (name, set) in &self.mention_sets {
            write_mentions(dir.join("mentions").join(format!("{name}.json")), set)?;
        }
        Ok(())
    }
}

fn validate_mention(world: &World, m: &MentionRecord) -> Result<()> {
    let doc = world.document(&m.context_document_id).ok_or_else(|| {
        Error::Validation(format!(
            "mention {}: context document {} not found",
            m.mention_id, m.context_document_id
        ))
    })?;
    let len = document_words(doc).len();
    if m.start_index > m.end_index || m.end_index >= len {
        return Err(Error::Validation(format!(
            "mention {}: span {}..={} out of bounds for document of {len} words",
            m.mention_id, m.start_index, m.end_index
        )));
    }
    if world.entity(&m.gold_entity_id).is_none() {
        return Err(Error::Validation(format!(
            "mention {}: gold entity {} not in world {}",
            m.mention_id, m.gold_entity_id, world.name
        )));
    }
    Ok(())
}

fn sorted_json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|ext| ext == "json" || ext == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Validation(format!("bad file name {}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldStats {
    pub world: String,
    pub split: Option<Split>,
    pub entities: usize,
    pub mentions: usize,
    /// Fraction of entities whose type is not `<unk>`.
    pub entity_type_coverage: f64,
    /// Fraction of mentions whose type is not `<unk>`.
    pub mention_type_coverage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub worlds: Vec<WorldStats>,
}

impl CorpusStats {
    pub fn total_entities(&self) -> usize {
        self.worlds.iter().map(|w| w.entities).sum()
    }

    pub fn total_mentions(&self) -> usize {
        self.worlds.iter().map(|w| w.mentions).sum()
    }

    pub fn world(&self, name: &str) -> Option<&WorldStats> {
        self.worlds.iter().find(|w| w.world == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("world\tsplit\tentities\tmentions\tentity_typed\tmention_typed\n");
        for w in &self.worlds {
            let split = w.split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
                w.world, split, w.entities, w.mentions, w.entity_type_coverage, w.mention_type_coverage
            ));
        }
        out
    }
}

fn fraction(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut mentions: HashMap<&str, (usize, usize)> = HashMap::new();
    for m in corpus.all_mentions() {
        let slot = mentions.entry(m.world.as_str()).or_default();
        slot.0 += 1;
        if !m.entity_type.is_unknown() {
            slot.1 += 1;
        }
    }
    let worlds = corpus
        .worlds()
        .map(|w| {
            let typed = w.entities.iter().filter(|e| !e.entity_type.is_unknown()).count();
            let (n_mentions, typed_mentions) =
                mentions.get(w.name.as_str()).copied().unwrap_or_default();
            WorldStats {
                world: w.name.clone(),
                split: w.split,
                entities: w.entities.len(),
                mentions: n_mentions,
                entity_type_coverage: fraction(typed, w.entities.len()),
                mention_type_coverage: fraction(typed_mentions, n_mentions),
            }
        })
        .collect();
    CorpusStats { worlds }
}
