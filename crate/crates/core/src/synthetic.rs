//! Seeded toy corpora: one world whose entities each own a distinct
//! pseudo-word vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, EntityRecord, EntityType, MentionRecord, Split, TypeScheme, DEFAULT_TYPE_LABELS};
use crate::error::{Error, Result};

pub const TOY_WORLD: &str = "toy";
pub const TOY_MENTION_SET: &str = "train";

const FILLER: [&str; 12] = ["the", "of", "and", "a", "in", "was", "to", "is", "by", "with", "from", "that"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub mentions: usize,
    /// Distinct pseudo-words owned by each entity, besides its title.
    pub words_per_entity: usize,
    pub description_words: usize,
    pub context_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 20,
            mentions: 50,
            words_per_entity: 6,
            description_words: 14,
            context_words: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Entity and mention id → type, in the annotation-sidecar shape.
    pub types: HashMap<String, EntityType>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn mixed_words(rng: &mut ChaCha8Rng, own: &[String], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.6) {
                own.choose(rng).unwrap().clone()
            } else {
                FILLER.choose(rng).unwrap().to_string()
            }
        })
        .collect()
}

/// Builds the toy world with mention set [`TOY_MENTION_SET`]. Mentions cycle
/// through the entities so every entity is linked at least once when
/// `mentions >= entities`. Records carry `<unk>` types; `types` holds the
/// annotations for [`Corpus::apply_type_annotations`].
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.entities == 0 || cfg.mentions == 0 || cfg.words_per_entity == 0 {
        return Err(Error::Config("synthetic corpus needs entities, mentions and words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: HashSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
    let mut entities = Vec::with_capacity(cfg.entities);
    let mut vocab = Vec::with_capacity(cfg.entities);
    let mut types = HashMap::new();
    let scheme = TypeScheme::default();
    for i in 0..cfg.entities {
        let title = pseudo_word(&mut rng, &mut taken);
        let own: Vec<String> = (0..cfg.words_per_entity).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
        let description = mixed_words(&mut rng, &own, cfg.description_words).join(" ");
        let entity_type = scheme.parse(DEFAULT_TYPE_LABELS[i % DEFAULT_TYPE_LABELS.len()])?;
        let id = format!("E{i:03}");
        types.insert(id.clone(), entity_type);
        entities.push(EntityRecord {
            entity_id: id,
            title: title.clone(),
            description,
            world: TOY_WORLD.into(),
            entity_type: EntityType::unknown(),
        });
        vocab.push((title, own));
    }
    let mut docs = BTreeMap::new();
    let mut mentions = Vec::with_capacity(cfg.mentions);
    for j in 0..cfg.mentions {
        let gold = j % cfg.entities;
        let (title, own) = &vocab[gold];
        let mut words = mixed_words(&mut rng, own, cfg.context_words.max(1) - 1);
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, title.clone());
        let doc_id = format!("D{j:03}");
        docs.insert(doc_id.clone(), words.join(" "));
        let mention_id = format!("M{j:03}");
        types.insert(mention_id.clone(), types[&entities[gold].entity_id].clone());
        mentions.push(MentionRecord {
            mention_id,
            context_document_id: doc_id,
            start_index: pos,
            end_index: pos,
            gold_entity_id: entities[gold].entity_id.clone(),
            world: TOY_WORLD.into(),
            entity_type: EntityType::unknown(),
        });
    }
    let mut corpus = Corpus::new();
    corpus.add_world(TOY_WORLD, entities)?;
    corpus.add_documents(TOY_WORLD, docs)?;
    corpus.add_mentions(TOY_MENTION_SET, Split::Train, mentions)?;
    Ok(SyntheticCorpus { corpus, types })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let s = synthetic_corpus(&SyntheticConfig::default()).unwrap();
        let world = s.corpus.world(TOY_WORLD).unwrap();
        assert_eq!(world.entities().len(), 20);
        let ms = s.corpus.mentions(TOY_MENTION_SET).unwrap();
        assert_eq!(ms.len(), 50);
        let linked: HashSet<_> = ms.iter().map(|m| m.gold_entity_id.as_str()).collect();
        assert_eq!(linked.len(), 20);
        for m in ms {
            let words = s.corpus.context_words(m).unwrap();
            assert_eq!(words[m.start_index], s.corpus.gold_entity(m).unwrap().title);
        }
        assert_eq!(s.types.len(), 70);
        let mut typed = s.corpus.clone();
        typed.apply_type_annotations(&s.types);
        let m = &typed.mentions(TOY_MENTION_SET).unwrap()[21];
        assert_eq!(m.entity_type, typed.gold_entity(m).unwrap().entity_type);
        assert_eq!(m.entity_type.as_str(), "NORP");
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let s = synthetic_corpus(&SyntheticConfig::default()).unwrap();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for e in s.corpus.world(TOY_WORLD).unwrap().entities() {
            for w in e.description.split_whitespace().chain([e.title.as_str()]) {
                if FILLER.contains(&w) {
                    continue;
                }
                let prev = owner.insert(w, &e.entity_id);
                assert!(prev.is_none() || prev == Some(e.entity_id.as_str()), "{w}");
            }
        }
    }

    #[test]
    fn seeded_and_round_trips() {
        let cfg = SyntheticConfig { seed: 7, ..Default::default() };
        let a = synthetic_corpus(&cfg).unwrap();
        let b = synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.corpus.mentions(TOY_MENTION_SET), b.corpus.mentions(TOY_MENTION_SET));
        let dir = tempfile::tempdir().unwrap();
        a.corpus.write_dir(dir.path()).unwrap();
        let back = Corpus::load_dir(dir.path()).unwrap();
        assert_eq!(back.mentions(TOY_MENTION_SET), a.corpus.mentions(TOY_MENTION_SET));
        assert_eq!(
            back.world(TOY_WORLD).unwrap().entities(),
            a.corpus.world(TOY_WORLD).unwrap().entities()
        );
        assert!(synthetic_corpus(&SyntheticConfig { entities: 0, ..cfg }).is_err());
    }
}
