//! WordPiece-style subword vocabulary and question/context framing.
//!
//! Text is normalised by lowercasing, splitting on whitespace and splitting
//! every ASCII punctuation character into its own word. Words are segmented
//! greedily, longest match first, with `##` marking continuation pieces.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const MAX_WORD_CHARS: usize = 100;

/// Lowercases and splits `text` into words; ASCII punctuation becomes separate words.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Normalised text re-joined with single spaces.
pub fn normalize_text(text: &str) -> String {
    normalize(text).join(" ")
}

/// Bijective token ↔ id table with the five reserved tokens at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from explicit tokens, prepending any missing reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if !RESERVED.contains(&t.as_str()) {
                all.push(t);
            }
        }
        Self::from_ordered(all)
    }

    fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("id {i} must be the reserved token {r}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Whole words plus `##` suffix pieces, most frequent first, capped at `max_size`.
    ///
    /// Every character of the corpus is included both as a word-initial and a
    /// continuation piece, so any corpus word can still be segmented. Ties in
    /// frequency keep first-occurrence order.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut docs = 0;
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            docs += 1;
            for w in normalize(doc) {
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Parameter("cannot build a vocabulary from an empty corpus".into()));
        }

        let chars: BTreeSet<char> = order.iter().flat_map(|w| w.chars()).collect();
        let mut alphabet = Vec::with_capacity(2 * chars.len());
        for c in &chars {
            alphabet.push(c.to_string());
            alphabet.push(format!("##{c}"));
        }
        if max_size < RESERVED.len() + alphabet.len() {
            return Err(Error::Parameter(format!(
                "max_size {max_size} cannot hold {} reserved tokens and {} alphabet pieces",
                RESERVED.len(),
                alphabet.len()
            )));
        }

        // (count, is_suffix, first_seen, token)
        let mut cands: Vec<(usize, bool, usize, String)> = Vec::new();
        let mut suffix_seen: HashMap<String, usize> = HashMap::new();
        for (rank, w) in order.iter().enumerate() {
            let n = counts[w];
            if w.chars().count() > 1 {
                cands.push((n, false, rank, w.clone()));
            }
            let idx: Vec<usize> = w.char_indices().map(|(i, _)| i).collect();
            for &start in idx.iter().skip(1) {
                let piece = &w[start..];
                if piece.chars().count() < 2 {
                    continue;
                }
                let key = format!("##{piece}");
                match suffix_seen.get(&key) {
                    Some(&ci) => cands[ci].0 += n,
                    None => {
                        suffix_seen.insert(key.clone(), cands.len());
                        cands.push((n, true, rank, key));
                    }
                }
            }
        }
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet);
        let mut present: BTreeSet<String> = tokens.iter().cloned().collect();
        for (_, _, _, t) in cands {
            if tokens.len() >= max_size {
                break;
            }
            if present.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::from_ordered(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first segmentation of one normalised word.
    fn segment(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                let b0 = chars[start].0;
                let b1 = chars.get(end).map(|c| c.0).unwrap_or(word.len());
                let sub = &word[b0..b1];
                let key = if start > 0 {
                    format!("##{sub}")
                } else {
                    sub.to_string()
                };
                if let Some(id) = self.id(&key) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Token ids of `text`; never fails.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in normalize(text) {
            self.segment(&w, &mut out);
        }
        out
    }

    /// Token ids of `text` together with the index of the normalised word each id came from.
    pub fn encode_with_words(&self, text: &str) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut words = Vec::new();
        for (wi, w) in normalize(text).iter().enumerate() {
            let before = ids.len();
            self.segment(w, &mut ids);
            words.extend(std::iter::repeat_n(wi, ids.len() - before));
        }
        (ids, words)
    }

    /// Joins tokens with spaces, gluing `##` pieces to their predecessor and
    /// dropping `[PAD]`, `[CLS]` and `[SEP]`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            match tok.strip_prefix("##") {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ordered(text.lines().map(str::to_string).collect())
    }
}

/// A framed `[CLS] question [SEP] context [SEP] [PAD]…` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 0 up to and including the first `[SEP]`, 1 afterwards.
    pub segments: Vec<usize>,
    /// 1 on real tokens, 0 on padding.
    pub mask: Vec<u8>,
}

impl TokenSequence {
    /// Builds an unpadded sequence from parts, checking the framing invariants.
    pub fn new(ids: Vec<usize>, segments: Vec<usize>) -> Result<Self> {
        let mask = vec![1; ids.len()];
        let seq = Self { ids, segments, mask };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.segments.len() != n || self.mask.len() != n {
            return Err(Error::Dimension("ids, segments and mask lengths differ".into()));
        }
        if self.ids.first() != Some(&CLS) {
            return Err(Error::Contract("sequence must start with [CLS]".into()));
        }
        if !self.ids.contains(&SEP) {
            return Err(Error::Contract("sequence has no [SEP]".into()));
        }
        if self.segments.iter().any(|&s| s > 1) {
            return Err(Error::Contract("segment labels must be 0 or 1".into()));
        }
        let real = self.real_len();
        if self.mask[real..].iter().any(|&m| m != 0) || self.mask[..real].iter().any(|&m| m != 1) {
            return Err(Error::Contract("mask must be a prefix of ones".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    /// The sequence with trailing padding removed.
    pub fn unpadded(&self) -> Self {
        let n = self.real_len();
        Self {
            ids: self.ids[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
        }
    }

    /// Position of the first `[SEP]`.
    pub fn first_sep(&self) -> usize {
        self.ids.iter().position(|&i| i == SEP).unwrap_or(0)
    }
}

/// Frames pre-tokenised question and context ids into exactly `max_len` positions.
///
/// The context is truncated from the end when the budget is exceeded; a
/// question longer than `max_len − 3` is an error.
pub fn frame_pair(question: &[usize], context: &[usize], max_len: usize) -> Result<TokenSequence> {
    if max_len < 4 {
        return Err(Error::Parameter(format!("max_len {max_len} is below 4")));
    }
    if question.len() > max_len - 3 {
        return Err(Error::Truncation(format!(
            "question of {} tokens exceeds the budget of {}",
            question.len(),
            max_len - 3
        )));
    }
    let room = max_len - 3 - question.len();
    let ctx = &context[..context.len().min(room)];
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(question);
    ids.push(SEP);
    let q_end = ids.len();
    ids.extend_from_slice(ctx);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let segments = (0..max_len).map(|i| usize::from(i >= q_end)).collect();
    let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(TokenSequence { ids, segments, mask })
}

pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    Vocab::build(corpus, max_size)
}

pub fn encode(text: &str, vocab: &Vocab) -> Vec<usize> {
    vocab.encode(text)
}

pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String> {
    vocab.decode(ids)
}

/// Encodes and frames a question/context pair; see [`frame_pair`].
pub fn encode_pair(question: &str, context: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    frame_pair(&vocab.encode(question), &vocab.encode(context), max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocab {
        Vocab::from_tokens(["a", "b", "##a", "##b", "aa", "##aa", "play", "##ing", "q", "c"]).unwrap()
    }

    #[test]
    fn normalizer_splits_punctuation_and_lowercases() {
        assert_eq!(normalize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(normalize("@entity3 is XXXX"), vec!["@", "entity3", "is", "xxxx"]);
        assert!(normalize("   ").is_empty());
    }

    #[test]
    fn build_vocab_examples() {
        let v = Vocab::build(["aa aa ab"], 50).unwrap();
        assert!(v.id("aa").is_some() && v.id("ab").is_some());
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.token(i), Some(*r));
        }
        assert!(matches!(Vocab::build(std::iter::empty::<&str>(), 50), Err(Error::Parameter(_))));
        // 5 reserved + {a, ##a, b, ##b}
        assert!(matches!(Vocab::build(["aa ab"], 8), Err(Error::Parameter(_))));
        assert_eq!(Vocab::build(["aa ab"], 9).unwrap().len(), 9);
    }

    #[test]
    fn build_vocab_ranks_by_frequency() {
        // "zz" appears three times, "xy" once; with room for one extra token only "zz" survives
        let v = Vocab::build(["xy zz zz zz"], 5 + 6 + 1).unwrap();
        assert!(v.id("zz").is_some());
        assert!(v.id("xy").is_none());
        assert_eq!(v.encode("xy"), vec![v.id("x").unwrap(), v.id("##y").unwrap()]);
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let corpus = ["the cat sat", "on the mat", "cats and mats"];
        let a = Vocab::build(corpus, 40).unwrap();
        let b = Vocab::build(corpus, 40).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 40);
    }

    #[test]
    fn encode_examples() {
        let v = toy();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("play"), vec![v.id("play").unwrap()]);
        assert_eq!(v.encode("aab"), vec![v.id("aa").unwrap(), v.id("##b").unwrap()]);
        assert_eq!(v.encode("playing"), vec![v.id("play").unwrap(), v.id("##ing").unwrap()]);
        assert_eq!(v.encode("xyz"), vec![UNK]);
    }

    #[test]
    fn decode_examples() {
        let v = toy();
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[CLS, v.id("q").unwrap(), SEP]).unwrap(), "q");
        assert_eq!(v.decode(&[v.id("play").unwrap(), v.id("##ing").unwrap()]).unwrap(), "playing");
        assert!(matches!(v.decode(&[999]), Err(Error::Index(_))));
    }

    #[test]
    fn encode_pair_layout() {
        let v = toy();
        let s = encode_pair("a", "b", &v, 8).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(s.ids, vec![CLS, a, SEP, b, SEP, PAD, PAD, PAD]);
        assert_eq!(s.mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(s.segments, vec![0, 0, 0, 1, 1, 1, 1, 1]);
        s.validate().unwrap();
    }

    #[test]
    fn encode_pair_truncates_context_only() {
        let v = toy();
        let s = encode_pair("a", "b b b b b b", &v, 6).unwrap();
        assert_eq!(s.ids.len(), 6);
        assert_eq!(*s.ids.last().unwrap(), SEP);
        assert_eq!(s.real_len(), 6);
        assert!(matches!(encode_pair("a a a a", "b", &v, 6), Err(Error::Truncation(_))));
        assert!(matches!(encode_pair("a", "b", &v, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn pair_round_trip() {
        let v = Vocab::build(["the drug binds.", "which target?"], 100).unwrap();
        let s = encode_pair("Which target?", "The drug binds.", &v, 32).unwrap();
        let decoded = v.decode(&s.ids).unwrap();
        assert_eq!(decoded, "which target ? the drug binds .");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = toy();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "[PAD]\n[CLS]\n").unwrap();
        assert!(Vocab::load(&p).is_err());
    }
}
