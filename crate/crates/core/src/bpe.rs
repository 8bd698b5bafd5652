//! Byte-pair-encoding subword tokenizer with a reserved special-token set.
//!
//! Text is split on special-token occurrences first; the remaining pieces
//! are lower-cased and split on whitespace. Each word starts as a sequence of
//! characters, the last one carrying the `</w>` end-of-word suffix, and the
//! learned merges are applied in training order. Ties between equally frequent
//! pairs go to the lexicographically smallest pair.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::{EntityType, TypeScheme};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Suffix marking the final symbol of a word.
pub const END_OF_WORD: &str = "</w>";

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

/// Structural special tokens. Type tokens are added per [`TypeScheme`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Unk,
    Cls,
    Sep,
    MentionStart,
    MentionEnd,
    Ent,
    HSep,
}

impl Special {
    pub const ALL: [Special; 8] = [
        Special::Pad,
        Special::Unk,
        Special::Cls,
        Special::Sep,
        Special::MentionStart,
        Special::MentionEnd,
        Special::Ent,
        Special::HSep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Cls => "[CLS]",
            Special::Sep => "[SEP]",
            Special::MentionStart => "[Ms]",
            Special::MentionEnd => "[Me]",
            Special::Ent => "[ENT]",
            Special::HSep => "[H_SEP]",
        }
    }
}

/// Token string for an entity-type label, e.g. `[PERSON]`.
pub fn type_token(label: &str) -> String {
    format!("[{label}]")
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    specials: HashSet<TokenId>,
    /// Special strings, longest first, for text scanning.
    special_patterns: Vec<(String, TokenId)>,
    core: [TokenId; 8],
    type_ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn assemble(
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        scheme: &TypeScheme,
    ) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Tokenizer(format!("invalid token {t:?} at id {i}")));
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {t}")));
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if merge_ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::Tokenizer(format!(
                    "duplicate merge {} {}",
                    pair.0, pair.1
                )));
            }
        }
        let lookup = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| Error::Tokenizer(format!("special token {s} missing")))
        };
        let mut core = [0; 8];
        for (slot, sp) in core.iter_mut().zip(Special::ALL) {
            *slot = lookup(sp.as_str())?;
        }
        let mut type_ids = HashMap::new();
        for label in scheme.labels_with_unknown() {
            type_ids.insert(label.to_string(), lookup(&type_token(label))?);
        }
        let specials: HashSet<TokenId> = core.iter().chain(type_ids.values()).copied().collect();
        let mut special_patterns: Vec<(String, TokenId)> = specials
            .iter()
            .map(|&id| (tokens[id as usize].clone(), id))
            .collect();
        special_patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(Vocabulary {
            tokens,
            ids,
            merges,
            merge_ranks,
            specials,
            special_patterns,
            core,
            type_ids,
        })
    }

    fn special_strings(scheme: &TypeScheme) -> Vec<String> {
        Special::ALL
            .iter()
            .map(|s| s.as_str().to_string())
            .chain(scheme.labels_with_unknown().map(type_token))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_count(&self) -> usize {
        self.specials.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn special(&self, sp: Special) -> TokenId {
        self.core[Special::ALL.iter().position(|&s| s == sp).unwrap()]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains(&id)
    }

    /// Id of the type token for `ty`; labels outside the scheme map to `<unk>`.
    pub fn type_token_id(&self, ty: &EntityType) -> TokenId {
        self.type_ids
            .get(ty.as_str())
            .or_else(|| self.type_ids.get(crate::corpus::UNK_TYPE))
            .copied()
            .expect("unknown type token always present")
    }

    pub fn is_type_token(&self, id: TokenId) -> bool {
        self.type_ids.values().any(|&t| t == id)
    }

    /// Subword symbols of a single lower-cased word after applying merges.
    fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        let mut last_rank: Option<usize> = None;
        loop {
            let next = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .copied()
                .filter(|&r| last_rank.is_none_or(|l| r > l))
                .min();
            let Some(rank) = next else { break };
            let (a, b) = &self.merges[rank];
            merge_pair(&mut symbols, a, b);
            last_rank = Some(rank);
        }
        symbols
    }

    fn push_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let unk = self.special(Special::Unk);
        for sym in self.segment(word) {
            out.push(self.ids.get(&sym).copied().unwrap_or(unk));
        }
    }

    /// Encodes plain words (no special-token scanning). Used by templates,
    /// whose words come from an already whitespace-split document.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in words {
            for piece in w.as_ref().to_lowercase().split_whitespace() {
                self.push_word(piece, &mut out);
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in split_specials(text, &self.special_patterns) {
            match piece {
                Piece::Special(id) => out.push(id),
                Piece::Text(t) => {
                    for word in t.to_lowercase().split_whitespace() {
                        self.push_word(word, &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} out of range")))?;
            if self.is_special(id) {
                text.push(' ');
                text.push_str(tok);
                text.push(' ');
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                text.push_str(stem);
                text.push(' ');
            } else {
                text.push_str(tok);
            }
        }
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    /// Token strings, for debug dumps.
    pub fn tokens_of(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id).unwrap_or("<?>")).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, lines: &mut dyn Iterator<Item = String>| -> Result<()> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            for line in lines {
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        };
        write(VOCAB_FILE, &mut self.tokens.iter().cloned())?;
        write(
            MERGES_FILE,
            &mut self.merges.iter().map(|(a, b)| format!("{a} {b}")),
        )
    }

    /// Loads `vocab.txt` (and `merges.txt` when present). Special tokens
    /// missing from a supplied vocabulary are appended.
    pub fn load(dir: impl AsRef<Path>, scheme: &TypeScheme) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<Option<Vec<String>>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            BufReader::new(f)
                .lines()
                .map(|l| l.map_err(|e| Error::io(&path, e)))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let mut tokens: Vec<String> = read(VOCAB_FILE)?
            .ok_or_else(|| Error::io(dir.join(VOCAB_FILE), std::io::ErrorKind::NotFound.into()))?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        let present: HashSet<String> = tokens.iter().cloned().collect();
        for sp in Self::special_strings(scheme) {
            if !present.contains(&sp) {
                tokens.push(sp);
            }
        }
        let mut merges = Vec::new();
        for (i, line) in read(MERGES_FILE)?.unwrap_or_default().iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| Error::Parse {
                path: dir.join(MERGES_FILE),
                line: i + 1,
                message: "expected `left right`".into(),
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::assemble(tokens, merges, scheme)
    }
}

enum Piece<'a> {
    Special(TokenId),
    Text(&'a str),
}

fn split_specials<'a>(text: &'a str, patterns: &[(String, TokenId)]) -> Vec<Piece<'a>> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some((pat, id)) = patterns.iter().find(|(p, _)| text[i..].starts_with(p.as_str())) {
                if start < i {
                    pieces.push(Piece::Text(&text[start..i]));
                }
                pieces.push(Piece::Special(*id));
                i += pat.len();
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < text.len() {
        pieces.push(Piece::Text(&text[start..]));
    }
    pieces
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Replaces every non-overlapping occurrence of `(a, b)`, scanning left to right.
fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Word frequencies of the training texts, special-token occurrences removed.
fn word_counts<I, S>(texts: I, scheme: &TypeScheme) -> HashMap<String, u64>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let patterns: Vec<(String, TokenId)> = Vocabulary::special_strings(scheme)
        .into_iter()
        .map(|s| (s, 0))
        .collect();
    let mut counts = HashMap::new();
    for text in texts {
        for piece in split_specials(text.as_ref(), &patterns) {
            if let Piece::Text(t) = piece {
                for w in t.to_lowercase().split_whitespace() {
                    *counts.entry(w.to_string()).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// Learns merges until the vocabulary reaches `target_vocab_size` or no pair
/// remains. The vocabulary is laid out as specials, then the sorted base
/// alphabet, then one token per merge.
pub fn train_bpe<I, S>(texts: I, target_vocab_size: usize, scheme: &TypeScheme) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let counts = word_counts(texts, scheme);
    if counts.is_empty() {
        return Err(Error::Tokenizer("cannot train on an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (initial_symbols(&w), c))
        .collect();
    words.sort();

    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut tokens = Vocabulary::special_strings(scheme);
    let base = tokens.len() + alphabet.len();
    if target_vocab_size < base {
        return Err(Error::Tokenizer(format!(
            "target vocabulary size {target_vocab_size} is below alphabet plus specials ({base})"
        )));
    }
    tokens.extend(alphabet);
    let mut known: HashSet<String> = tokens.iter().cloned().collect();

    let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
    let mut where_found: HashMap<(String, String), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0].clone(), p[1].clone());
            *pair_counts.entry(key.clone()).or_insert(0) += *c as i64;
            where_found.entry(key).or_default().insert(wi);
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    while tokens.len() < target_vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(p, _)| p.clone());
        let Some(best) = best else { break };
        let affected = where_found.remove(&best).unwrap_or_default();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c as i64;
            if !syms.windows(2).any(|p| p[0] == best.0 && p[1] == best.1) {
                continue;
            }
            for p in syms.windows(2) {
                if let Some(v) = pair_counts.get_mut(&(p[0].clone(), p[1].clone())) {
                    *v -= c;
                }
            }
            merge_pair(syms, &best.0, &best.1);
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_insert(0) += c;
                where_found.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.remove(&best);
        let merged = format!("{}{}", best.0, best.1);
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push(best);
    }
    Vocabulary::assemble(tokens, merges, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme() -> TypeScheme {
        TypeScheme::default()
    }

    /// Brute-force count of adjacent symbol pairs over the initial segmentation.
    fn oracle_first_merge(corpus: &str) -> (String, String) {
        let mut counts: Vec<((String, String), u64)> = Vec::new();
        for word in corpus.split_whitespace() {
            let syms = initial_symbols(&word.to_lowercase());
            for i in 0..syms.len().saturating_sub(1) {
                let key = (syms[i].clone(), syms[i + 1].clone());
                match counts.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((key, 1)),
                }
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts[0].0.clone()
    }

    fn base_size(corpus: &str) -> usize {
        let alphabet: BTreeSet<String> = corpus
            .split_whitespace()
            .flat_map(|w| initial_symbols(w))
            .collect();
        Vocabulary::special_strings(&scheme()).len() + alphabet.len()
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        for corpus in ["ab ab ab", "aaab", "the cat sat on the mat the end"] {
            let v = train_bpe([corpus], base_size(corpus) + 1, &scheme()).unwrap();
            assert_eq!(v.merges().len(), 1, "{corpus}");
            assert_eq!(v.merges()[0], oracle_first_merge(corpus), "{corpus}");
        }
        let v = train_bpe(["ab ab ab"], base_size("ab ab ab") + 1, &scheme()).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), format!("b{END_OF_WORD}")));
        let v = train_bpe(["aaab"], base_size("aaab") + 1, &scheme()).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn zero_merge_budget_is_alphabet_plus_specials() {
        let corpus = "hello world";
        let base = base_size(corpus);
        let v = train_bpe([corpus], base, &scheme()).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), base);
        assert_eq!(v.special_count(), 8 + 19);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe(Vec::<String>::new(), 100, &scheme()).is_err());
        assert!(train_bpe(["   [CLS] "], 100, &scheme()).is_err());
    }

    #[test]
    fn merge_list_accounts_for_vocabulary_growth() {
        let corpus = "low lower lowest newer wider new news";
        let base = base_size(corpus);
        let v = train_bpe([corpus], base + 6, &scheme()).unwrap();
        assert!(v.len() <= base + 6);
        assert_eq!(v.merges().len(), v.len() - base);
    }

    #[test]
    fn specials_are_atomic_and_decode_verbatim() {
        let v = train_bpe(["some text [Ms] here"], 200, &scheme()).unwrap();
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
        for sp in Special::ALL {
            let ids = v.encode(sp.as_str());
            assert_eq!(ids, vec![v.special(sp)]);
        }
        assert_eq!(v.encode("[PERSON]").len(), 1);
        assert_eq!(v.decode(&[v.special(Special::Cls)]).unwrap(), "[CLS]");
        assert_eq!(v.decode(&[]).unwrap(), "");
        // specials are never learned as merge material
        assert!(v.merges().iter().all(|(a, b)| !a.contains('[') && !b.contains('[')));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = train_bpe(["abc"], 100, &scheme()).unwrap();
        assert!(v.decode(&[v.len() as TokenId]).is_err());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = train_bpe(["abc"], 100, &scheme()).unwrap();
        let ids = v.encode("xyz");
        assert!(ids.iter().all(|&i| i == v.special(Special::Unk)));
    }

    #[test]
    fn hello_world_round_trip() {
        let v = train_bpe(["hello world", "help the world"], 60, &scheme()).unwrap();
        let ids = v.encode("hello world");
        assert_eq!(v.decode(&ids).unwrap(), "hello world");
        assert_eq!(v.decode(&v.encode("  Hello\tWORLD ")).unwrap(), "hello world");
        assert_eq!(v.decode(&v.encode("the[Ms]hello")).unwrap(), "the [Ms] hello");
    }

    #[test]
    fn save_load_round_trip() {
        let v = train_bpe(["alpha beta gamma alphabet"], 80, &scheme()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        v.save(dir.path()).unwrap();
        let w = Vocabulary::load(dir.path(), &scheme()).unwrap();
        assert_eq!(v.tokens, w.tokens);
        assert_eq!(v.merges, w.merges);
        assert_eq!(v.encode("alphabet soup"), w.encode("alphabet soup"));
    }

    #[test]
    fn loading_a_bare_vocabulary_appends_specials() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(VOCAB_FILE), "[PAD]\n[UNK]\nh\ni</w>\n").unwrap();
        let v = Vocabulary::load(dir.path(), &scheme()).unwrap();
        assert_eq!(v.special(Special::Pad), 0);
        assert_eq!(v.len(), 4 + 6 + 19);
        assert_eq!(v.decode(&v.encode("hi")).unwrap(), "hi");
    }
}
