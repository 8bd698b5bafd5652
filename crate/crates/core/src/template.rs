//! Structured input sequences for the two encoders.
//!
//! Mention side: `[CLS] ctxtl [Ms] mention [Me] ctxtr [SEP]`, or with types
//! `[CLS] [type] mention [H_SEP] ctxtl [Ms] mention [Me] ctxtr [SEP]`.
//! Entity side: `[CLS] title [ENT] description [SEP]`, with the type token
//! inserted after `[CLS]` when types are enabled. Sequences are padded with
//! `[PAD]` to exactly `max_len` ids.

use std::io::Write;
use std::path::Path;

use crate::bpe::{Special, TokenId, Vocabulary};
use crate::corpus::{EntityRecord, MentionRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Cls,
    EntityType,
    HSep,
    MentionStart,
    MentionEnd,
    Ent,
    Sep,
}

impl Role {
    fn special(self) -> Option<Special> {
        Some(match self {
            Role::Cls => Special::Cls,
            Role::HSep => Special::HSep,
            Role::MentionStart => Special::MentionStart,
            Role::MentionEnd => Special::MentionEnd,
            Role::Ent => Special::Ent,
            Role::Sep => Special::Sep,
            Role::EntityType => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Mention,
    Entity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateConfig {
    pub max_len: usize,
    pub use_entity_type: bool,
    /// With types on, repeat the mention surface between the type token and
    /// `[H_SEP]`.
    pub repeat_mention_surface: bool,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            max_len: 32,
            use_entity_type: false,
            repeat_mention_surface: true,
        }
    }
}

impl TemplateConfig {
    pub fn new(max_len: usize, use_entity_type: bool) -> Self {
        TemplateConfig {
            max_len,
            use_entity_type,
            ..Default::default()
        }
    }

    /// Number of special tokens a sequence on `side` carries.
    pub fn special_count(&self, side: Side) -> usize {
        match (side, self.use_entity_type) {
            (Side::Mention, false) => 4,
            (Side::Mention, true) => 6,
            (Side::Entity, false) => 3,
            (Side::Entity, true) => 4,
        }
    }

    /// Shared slot count for concatenated special-token pooling.
    pub fn conc_slot_count(&self) -> usize {
        self.special_count(Side::Mention)
            .max(self.special_count(Side::Entity))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Exactly `max_len` ids, `[PAD]`-filled past `len`.
    pub ids: Vec<TokenId>,
    /// Attention length: count of real tokens.
    pub len: usize,
    /// Special-token roles in sequence order.
    pub special_positions: Vec<(Role, usize)>,
    pub side: Side,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn special_indices(&self) -> Vec<usize> {
        self.special_positions.iter().map(|&(_, i)| i).collect()
    }

    pub fn real_ids(&self) -> &[TokenId] {
        &self.ids[..self.len]
    }

    /// Checks the structural invariants against `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let bad = |msg: String| Err(Error::Template(msg));
        if self.len > self.ids.len() || self.len < 2 {
            return bad(format!("attention length {} of {}", self.len, self.ids.len()));
        }
        if self.ids[0] != vocab.special(Special::Cls) {
            return bad("sequence does not start with [CLS]".into());
        }
        let sep = vocab.special(Special::Sep);
        if self.ids[self.len - 1] != sep || self.real_ids().iter().filter(|&&i| i == sep).count() != 1 {
            return bad("real tokens must end with exactly one [SEP]".into());
        }
        let pad = vocab.special(Special::Pad);
        if self.ids[self.len..].iter().any(|&i| i != pad) {
            return bad("non-pad id past attention length".into());
        }
        let mut prev = None;
        for &(role, idx) in &self.special_positions {
            if prev.is_some_and(|p| idx <= p) || idx >= self.len {
                return bad(format!("special position {idx} out of order"));
            }
            prev = Some(idx);
            let id = self.ids[idx];
            let ok = match role.special() {
                Some(sp) => id == vocab.special(sp),
                None => vocab.is_type_token(id),
            };
            if !ok {
                return bad(format!("position {idx} does not hold {role:?}"));
            }
        }
        Ok(())
    }
}

struct Builder {
    ids: Vec<TokenId>,
    specials: Vec<(Role, usize)>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            ids: Vec::new(),
            specials: Vec::new(),
        }
    }

    fn special(&mut self, role: Role, id: TokenId) {
        self.specials.push((role, self.ids.len()));
        self.ids.push(id);
    }

    fn extend(&mut self, ids: &[TokenId]) {
        self.ids.extend_from_slice(ids);
    }

    fn finish(mut self, max_len: usize, pad: TokenId, side: Side) -> TokenSequence {
        let len = self.ids.len();
        debug_assert!(len <= max_len);
        self.ids.resize(max_len, pad);
        TokenSequence {
            ids: self.ids,
            len,
            special_positions: self.specials,
            side,
        }
    }
}

/// How many left/right context tokens fit in `budget`: an even split with the
/// odd token going left, and any share one side cannot use handed to the other.
pub fn context_window(left_len: usize, right_len: usize, budget: usize) -> (usize, usize) {
    let left = left_len.min(budget.div_ceil(2));
    let right = right_len.min(budget / 2);
    let spare = budget - left - right;
    let extra_left = (left_len - left).min(spare);
    let extra_right = (right_len - right).min(spare - extra_left);
    (left + extra_left, right + extra_right)
}

pub fn build_mention_sequence(
    mention: &MentionRecord,
    context: &[&str],
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<TokenSequence> {
    if mention.start_index > mention.end_index || mention.end_index >= context.len() {
        return Err(Error::Template(format!(
            "mention {}: span {}..={} invalid for {} context words",
            mention.mention_id,
            mention.start_index,
            mention.end_index,
            context.len()
        )));
    }
    let left = vocab.encode_words(&context[..mention.start_index]);
    let surface = vocab.encode_words(&context[mention.start_index..=mention.end_index]);
    let right = vocab.encode_words(&context[mention.end_index + 1..]);
    if surface.is_empty() {
        return Err(Error::Template(format!(
            "mention {}: span is empty after tokenization",
            mention.mention_id
        )));
    }

    let typed = cfg.use_entity_type;
    let copies = if typed && cfg.repeat_mention_surface { 2 } else { 1 };
    let specials = cfg.special_count(Side::Mention);
    let budget = cfg.max_len.saturating_sub(specials);
    let keep = surface.len().min(budget / copies);
    if keep == 0 {
        return Err(Error::Template(format!(
            "max_len {} leaves no room for the mention",
            cfg.max_len
        )));
    }
    let rest = budget - copies * keep;
    let (l, r) = context_window(left.len(), right.len(), rest);
    // a slot the context cannot fill goes to the bracketed copy
    let bracketed = &surface[..(keep + rest - l - r).min(surface.len())];
    let surface = &surface[..keep];

    let mut b = Builder::new();
    b.special(Role::Cls, vocab.special(Special::Cls));
    if typed {
        b.special(Role::EntityType, vocab.type_token_id(&mention.entity_type));
        if cfg.repeat_mention_surface {
            b.extend(surface);
        }
        b.special(Role::HSep, vocab.special(Special::HSep));
    }
    b.extend(&left[left.len() - l..]);
    b.special(Role::MentionStart, vocab.special(Special::MentionStart));
    b.extend(bracketed);
    b.special(Role::MentionEnd, vocab.special(Special::MentionEnd));
    b.extend(&right[..r]);
    b.special(Role::Sep, vocab.special(Special::Sep));
    Ok(b.finish(cfg.max_len, vocab.special(Special::Pad), Side::Mention))
}

pub fn build_entity_sequence(
    entity: &EntityRecord,
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<TokenSequence> {
    let title = vocab.encode_words(&entity.title.split_whitespace().collect::<Vec<_>>());
    if title.is_empty() {
        return Err(Error::Template(format!("entity {} has an empty title", entity.entity_id)));
    }
    let budget = cfg
        .max_len
        .saturating_sub(cfg.special_count(Side::Entity));
    if budget == 0 {
        return Err(Error::Template(format!(
            "max_len {} leaves no room for the title",
            cfg.max_len
        )));
    }
    let title = &title[..title.len().min(budget)];
    let description = vocab.encode_words(&entity.description.split_whitespace().collect::<Vec<_>>());
    let description = &description[..description.len().min(budget - title.len())];

    let mut b = Builder::new();
    b.special(Role::Cls, vocab.special(Special::Cls));
    if cfg.use_entity_type {
        b.special(Role::EntityType, vocab.type_token_id(&entity.entity_type));
    }
    b.extend(title);
    b.special(Role::Ent, vocab.special(Special::Ent));
    b.extend(description);
    b.special(Role::Sep, vocab.special(Special::Sep));
    Ok(b.finish(cfg.max_len, vocab.special(Special::Pad), Side::Entity))
}

/// One sequence as space-separated token strings.
pub fn render(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    vocab.tokens_of(&seq.ids).join(" ")
}

/// Writes one rendered sequence per line.
pub fn write_debug_dump<'a>(
    path: impl AsRef<Path>,
    seqs: impl IntoIterator<Item = &'a TokenSequence>,
    vocab: &Vocabulary,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in seqs {
        writeln!(f, "{}", render(s, vocab)).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::train_bpe;
    use crate::corpus::{EntityType, TypeScheme};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        // one symbol per single-letter word, so every word is one token
        train_bpe(["a b c d e f g h i j k l m n o p"], 200, &TypeScheme::default()).unwrap()
    }

    fn mention(start: usize, end: usize, ty: &str) -> MentionRecord {
        MentionRecord {
            mention_id: "m".into(),
            context_document_id: "d".into(),
            start_index: start,
            end_index: end,
            gold_entity_id: "e".into(),
            world: "w".into(),
            entity_type: TypeScheme::default().parse(ty).unwrap(),
        }
    }

    fn entity(title: &str, desc: &str, ty: &str) -> EntityRecord {
        EntityRecord {
            entity_id: "e".into(),
            title: title.into(),
            description: desc.into(),
            world: "w".into(),
            entity_type: TypeScheme::default().parse(ty).unwrap(),
        }
    }

    fn tokens(seq: &TokenSequence, v: &Vocabulary) -> String {
        render(seq, v).replace("</w>", "")
    }

    #[test]
    fn mention_layout_without_types() {
        let v = vocab();
        let seq = build_mention_sequence(
            &mention(1, 1, "<unk>"),
            &["a", "b", "c"],
            &v,
            &TemplateConfig::new(8, false),
        )
        .unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] a [Ms] b [Me] c [SEP] [PAD]");
        assert_eq!(seq.special_indices(), vec![0, 2, 4, 6]);
        assert_eq!(seq.len, 7);
        seq.validate(&v).unwrap();
    }

    #[test]
    fn mention_layout_with_types() {
        let v = vocab();
        let seq = build_mention_sequence(
            &mention(1, 1, "PERSON"),
            &["a", "b", "c"],
            &v,
            &TemplateConfig::new(10, true),
        )
        .unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] [PERSON] b [H_SEP] a [Ms] b [Me] c [SEP]");
        let roles: Vec<Role> = seq.special_positions.iter().map(|p| p.0).collect();
        assert_eq!(
            roles,
            [Role::Cls, Role::EntityType, Role::HSep, Role::MentionStart, Role::MentionEnd, Role::Sep]
        );
        seq.validate(&v).unwrap();

        // at max_len 8 only context is dropped
        let short = build_mention_sequence(
            &mention(1, 1, "PERSON"),
            &["a", "b", "c"],
            &v,
            &TemplateConfig::new(8, true),
        )
        .unwrap();
        assert_eq!(tokens(&short, &v), "[CLS] [PERSON] b [H_SEP] [Ms] b [Me] [SEP]");

        let no_repeat = TemplateConfig {
            repeat_mention_surface: false,
            ..TemplateConfig::new(10, true)
        };
        let seq = build_mention_sequence(&mention(1, 1, "PERSON"), &["a", "b", "c"], &v, &no_repeat)
            .unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] [PERSON] [H_SEP] a [Ms] b [Me] c [SEP] [PAD]");
    }

    /// Independent accounting: what a centred window of the given budget keeps.
    fn window_oracle(left: usize, right: usize, budget: usize) -> (usize, usize) {
        let mut best = (0, 0);
        for l in 0..=left.min(budget) {
            for r in 0..=right.min(budget - l) {
                let total = l + r;
                let imbalance = (l as i64 - r as i64 - 1).abs().min((l as i64 - r as i64).abs());
                let best_total = best.0 + best.1;
                let best_imb = (best.0 as i64 - best.1 as i64 - 1)
                    .abs()
                    .min((best.0 as i64 - best.1 as i64).abs());
                // maximise kept tokens, then balance, then prefer the left
                if total > best_total
                    || (total == best_total && imbalance < best_imb)
                    || (total == best_total && imbalance == best_imb && l > best.0)
                {
                    best = (l, r);
                }
            }
        }
        best
    }

    #[test]
    fn context_window_matches_oracle() {
        for left in 0..12 {
            for right in 0..12 {
                for budget in 0..20 {
                    assert_eq!(
                        context_window(left, right, budget),
                        window_oracle(left, right, budget),
                        "left {left} right {right} budget {budget}"
                    );
                }
            }
        }
    }

    #[test]
    fn long_context_is_centred_on_the_mention() {
        let v = vocab();
        let letters: Vec<String> = (0..1000).map(|i| ((b'a' + (i % 16) as u8) as char).to_string()).collect();
        let words: Vec<&str> = letters.iter().map(String::as_str).collect();
        let seq = build_mention_sequence(&mention(500, 500, "<unk>"), &words, &v, &TemplateConfig::new(32, false))
            .unwrap();
        assert_eq!(seq.ids.len(), 32);
        assert_eq!(seq.len, 32);
        // 32 - 4 specials - 1 mention = 27 context tokens, 14 left and 13 right
        let ms = seq.special_positions[1].1;
        let me = seq.special_positions[2].1;
        assert_eq!(ms - 1, 14);
        assert_eq!(31 - me - 1, 13);
        assert_eq!(seq.ids[ms + 1], v.encode_words(&[words[500]])[0]);
        // left context is the tail nearest the mention
        assert_eq!(&seq.ids[1..ms], v.encode_words(&words[486..500]).as_slice());
        assert_eq!(&seq.ids[me + 1..31], v.encode_words(&words[501..514]).as_slice());
    }

    #[test]
    fn oversized_mention_keeps_markers() {
        let v = vocab();
        let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let seq = build_mention_sequence(&mention(0, 7, "<unk>"), &words, &v, &TemplateConfig::new(7, false)).unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] [Ms] a b c [Me] [SEP]");
        assert!(build_mention_sequence(&mention(0, 0, "<unk>"), &words, &v, &TemplateConfig::new(4, false)).is_err());
    }

    #[test]
    fn entity_layouts() {
        let v = vocab();
        let seq = build_entity_sequence(&entity("A", "B C", "<unk>"), &v, &TemplateConfig::new(8, false)).unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] a [ENT] b c [SEP] [PAD] [PAD]");
        seq.validate(&v).unwrap();
        let seq = build_entity_sequence(&entity("A", "B C", "LOC"), &v, &TemplateConfig::new(8, true)).unwrap();
        assert_eq!(tokens(&seq, &v), "[CLS] [LOC] a [ENT] b c [SEP] [PAD]");
        assert_eq!(seq.special_positions[1], (Role::EntityType, 1));
        seq.validate(&v).unwrap();
    }

    #[test]
    fn long_description_is_tail_truncated() {
        let v = vocab();
        let desc = "b c d e f g h i j k l m n";
        let seq = build_entity_sequence(&entity("a", desc, "<unk>"), &v, &TemplateConfig::new(8, false)).unwrap();
        // 8 - 3 specials - 1 title token = 4 description tokens
        assert_eq!(tokens(&seq, &v), "[CLS] a [ENT] b c d e [SEP]");
        assert_eq!(seq.special_positions.last().unwrap().1, 8 - 1);
    }

    #[test]
    fn type_outside_scheme_uses_unknown_token() {
        let v = vocab();
        let mut e = entity("a", "b", "<unk>");
        e.entity_type = EntityType::unknown();
        let seq = build_entity_sequence(&e, &v, &TemplateConfig::new(8, true)).unwrap();
        assert_eq!(v.token(seq.ids[1]), Some("[<unk>]"));
    }

    #[test]
    fn conc_slot_counts() {
        assert_eq!(TemplateConfig::new(32, false).conc_slot_count(), 4);
        assert_eq!(TemplateConfig::new(32, true).conc_slot_count(), 6);
    }

    fn is_subsequence(short: &[TokenId], long: &[TokenId]) -> bool {
        let mut it = long.iter();
        short.iter().all(|s| it.any(|l| l == s))
    }

    proptest! {
        #[test]
        fn mention_sequences_hold_invariants(
            n_words in 1usize..60,
            start_frac in 0.0f64..1.0,
            span in 0usize..4,
            max_len in 8usize..40,
            typed in any::<bool>(),
            seed in 0u64..1000,
        ) {
            let v = vocab();
            let letters: Vec<String> = (0..n_words)
                .map(|i| ((b'a' + ((i as u64 * 7 + seed) % 16) as u8) as char).to_string())
                .collect();
            let words: Vec<&str> = letters.iter().map(String::as_str).collect();
            let start = ((n_words as f64) * start_frac) as usize;
            let end = (start + span).min(n_words - 1);
            let cfg = TemplateConfig::new(max_len, typed);
            let seq = build_mention_sequence(&mention(start, end, "ORG"), &words, &v, &cfg).unwrap();
            seq.validate(&v).unwrap();
            prop_assert_eq!(seq.ids.len(), max_len);
            let count = |sp: Special| seq.ids.iter().filter(|&&i| i == v.special(sp)).count();
            prop_assert_eq!(count(Special::MentionStart), 1);
            prop_assert_eq!(count(Special::MentionEnd), 1);
            prop_assert_eq!(count(Special::Ent), 0);
            prop_assert_eq!(seq.special_positions.len(), cfg.special_count(Side::Mention));
            // mention subwords survive whenever they fit
            let surface = v.encode_words(&words[start..=end]);
            let copies = if typed { 2 } else { 1 };
            if copies * surface.len() + cfg.special_count(Side::Mention) <= max_len {
                let ms = seq.special_positions.iter().find(|p| p.0 == Role::MentionStart).unwrap().1;
                prop_assert_eq!(&seq.ids[ms + 1..ms + 1 + surface.len()], surface.as_slice());
            }
            // growing the budget only adds tokens
            let bigger = build_mention_sequence(&mention(start, end, "ORG"), &words, &v, &TemplateConfig::new(max_len + 7, typed)).unwrap();
            prop_assert!(is_subsequence(seq.real_ids(), bigger.real_ids()));
        }

        #[test]
        fn entity_sequences_hold_invariants(
            title_words in 1usize..4,
            desc_words in 0usize..50,
            max_len in 5usize..40,
            typed in any::<bool>(),
        ) {
            let v = vocab();
            let title = vec!["k"; title_words].join(" ");
            let desc = vec!["d"; desc_words].join(" ");
            let cfg = TemplateConfig::new(max_len, typed);
            let seq = build_entity_sequence(&entity(&title, &desc, "PERSON"), &v, &cfg).unwrap();
            seq.validate(&v).unwrap();
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.ids.iter().filter(|&&i| i == v.special(Special::Ent)).count(), 1);
            prop_assert_eq!(seq.ids.iter().filter(|&&i| i == v.special(Special::MentionStart)).count(), 0);
            let bigger = build_entity_sequence(&entity(&title, &desc, "PERSON"), &v, &TemplateConfig::new(max_len + 5, typed)).unwrap();
            prop_assert!(is_subsequence(seq.real_ids(), bigger.real_ids()));
        }
    }
}
