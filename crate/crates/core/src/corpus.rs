//! Vocabulary, example pairs, corpus/vocabulary file formats and the
//! synthetic copy/reverse/sort tasks.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::numkern::seeded_rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const VOCAB_HEADER: &str = "#mixer-vocab v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    words: Vec<String>,
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        let words: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = words.iter().cloned().zip(0..).collect();
        Vocabulary { index, words }
    }

    /// Builds a vocabulary from `tokens` in the given order. Reserved surface
    /// forms and duplicates are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::reserved_only();
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.words.len());
            self.words.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == RESERVED
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.word(i).map(str::to_string).ok_or(Error::WordOutOfRange {
                    index: i,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// Non-reserved tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.words[RESERVED..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(16 * self.len());
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for w in self.tokens() {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("expected header `{VOCAB_HEADER}`"),
            });
        }
        let mut v = Vocabulary::reserved_only();
        for (i, line) in lines.enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) || v.index.contains_key(line) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 2,
                    msg: format!("invalid or duplicate token {line:?}"),
                });
            }
            v.push(line);
        }
        Ok(v)
    }
}

/// Counts tokens and keeps those seen at least `min_count` times, ordered by
/// descending count then first occurrence. Everything else encodes to UNK.
pub fn build_vocab<I, S, T>(streams: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut seen = 0usize;
    for stream in streams {
        for tok in stream {
            let tok = tok.as_ref();
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            let e = counts.entry(tok.to_string()).or_insert((0, seen));
            e.0 += 1;
            seen += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut kept: Vec<(String, usize, usize)> = counts
        .into_iter()
        .filter(|(_, (c, _))| *c >= min_count)
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _, _)| t)))
}

/// A source sentence and its BOS/EOS-framed target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl ExamplePair {
    /// Frames `target_words` with BOS and EOS.
    pub fn new(source: Vec<usize>, target_words: &[usize]) -> Self {
        let mut target = Vec::with_capacity(target_words.len() + 2);
        target.push(BOS);
        target.extend_from_slice(target_words);
        target.push(EOS);
        ExamplePair { source, target }
    }

    /// Target words without the BOS/EOS frame.
    pub fn target_words(&self) -> &[usize] {
        strip_frame(&self.target)
    }

    /// Number of decoder steps needed to emit the target (words + EOS).
    pub fn steps(&self) -> usize {
        self.target.len().saturating_sub(1)
    }

    pub fn cropped(&self, t_max: usize, max_source: usize) -> Self {
        let mut source = self.source.clone();
        source.truncate(max_source);
        ExamplePair {
            source,
            target: crop(&self.target, t_max),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::InvalidArgument("empty source sentence".into()));
        }
        for &i in self.source.iter().chain(&self.target) {
            if i >= vocab_size {
                return Err(Error::WordOutOfRange {
                    index: i,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Drops a leading BOS and a trailing EOS when present.
pub fn strip_frame(seq: &[usize]) -> &[usize] {
    let seq = seq.strip_prefix(&[BOS]).unwrap_or(seq);
    seq.strip_suffix(&[EOS]).unwrap_or(seq)
}

/// Keeps the first `t_max` words of a framed target, re-appending EOS when
/// anything was cut. Lengths exclude BOS/EOS.
pub fn crop(seq: &[usize], t_max: usize) -> Vec<usize> {
    let has_bos = seq.first() == Some(&BOS);
    let words = strip_frame(seq);
    if words.len() <= t_max {
        return seq.to_vec();
    }
    let mut out = Vec::with_capacity(t_max + 2);
    if has_bos {
        out.push(BOS);
    }
    out.extend_from_slice(&words[..t_max]);
    out.push(EOS);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic task {other:?} (expected copy, reverse or sort)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl TaskKind {
    pub fn apply(self, source: &[usize]) -> Vec<usize> {
        let mut t = source.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }
}

/// Vocabulary `s0 .. s{n-1}` for the synthetic tasks; symbol `k` has index
/// `RESERVED + k`.
pub fn synthetic_vocab(symbols: usize) -> Vocabulary {
    Vocabulary::from_tokens((0..symbols).map(|k| format!("s{k}")))
}

/// `n` random source sentences over `symbols` non-reserved symbols with
/// lengths drawn uniformly from `len_range` (inclusive), targets given by
/// `kind`.
pub fn gen_synthetic(
    kind: TaskKind,
    symbols: usize,
    len_range: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<ExamplePair>> {
    let (lo, hi) = len_range;
    if symbols < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic tasks need at least 4 symbols, got {symbols}"
        )));
    }
    if n == 0 || lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and 1 <= min_len <= max_len (got n={n}, lengths {lo}..={hi})"
        )));
    }
    let mut rng = seeded_rng(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let source: Vec<usize> = (0..len).map(|_| RESERVED + rng.random_range(0..symbols)).collect();
            let target = kind.apply(&source);
            ExamplePair::new(source, &target)
        })
        .collect())
}

/// Raw tokenized pair as read from a corpus file.
pub type TokenPair = (Vec<String>, Vec<String>);

fn tokens(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Reads `source<TAB>target` lines.
pub fn read_corpus(path: &Path) -> Result<Vec<TokenPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: "expected source and target separated by a TAB".into(),
            })?;
            Ok((tokens(src), tokens(tgt)))
        })
        .collect()
}

/// Reads one tokenized sentence per line (no TAB split). Empty lines are kept
/// as empty sentences so line numbering is preserved.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokens).collect())
}

pub fn write_corpus(path: &Path, pairs: &[TokenPair]) -> Result<()> {
    let mut out = Vec::new();
    for (s, t) in pairs {
        writeln!(out, "{}\t{}", s.join(" "), t.join(" ")).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut out = Vec::new();
    for l in lines {
        writeln!(out, "{}", l.join(" ")).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Encodes raw pairs into cropped example pairs.
pub fn encode_pairs(vocab: &Vocabulary, pairs: &[TokenPair], t_max: usize, max_source: usize) -> Vec<ExamplePair> {
    pairs
        .iter()
        .map(|(s, t)| ExamplePair::new(vocab.encode(s), &vocab.encode(t)).cropped(t_max, max_source))
        .collect()
}

/// Decodes example pairs back into token pairs (frame stripped).
pub fn decode_pairs(vocab: &Vocabulary, pairs: &[ExamplePair]) -> Result<Vec<TokenPair>> {
    pairs
        .iter()
        .map(|p| Ok((vocab.decode(&p.source)?, vocab.decode(p.target_words())?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokens(s)
    }

    #[test]
    fn min_count_replaces_rare_words() {
        let v = build_vocab([toks("a a b")], 2).unwrap();
        assert_eq!(v.tokens(), &["a".to_string()]);
        assert_eq!(v.encode(&["a", "b"]), vec![RESERVED, UNK]);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build_vocab([toks("x y"), toks("z y")], 1).unwrap();
        // y appears twice; x and z once, in first-occurrence order
        assert_eq!(v.tokens(), &["y", "x", "z"]);
        assert!(v.encode(&["x", "y", "z"]).iter().all(|&i| i != UNK));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(build_vocab(empty, 1).is_err());
        assert!(build_vocab([toks("a")], 0).is_err());
    }

    #[test]
    fn reserved_indices_are_fixed() {
        let v = Vocabulary::reserved_only();
        assert_eq!(v.index_of("<pad>"), PAD);
        assert_eq!(v.index_of("<s>"), BOS);
        assert_eq!(v.index_of("</s>"), EOS);
        assert_eq!(v.index_of("<unk>"), UNK);
        assert_eq!(v.index_of("never-seen"), UNK);
    }

    #[test]
    fn crop_cases() {
        let long = ExamplePair::new(vec![5], &(0..20).map(|i| 4 + i).collect::<Vec<_>>());
        let c = crop(&long.target, 15);
        assert_eq!(c.len(), 17);
        assert_eq!(c[0], BOS);
        assert_eq!(&c[1..16], &long.target[1..16]);
        assert_eq!(*c.last().unwrap(), EOS);

        let short = ExamplePair::new(vec![5], &[4, 5, 6, 7, 8]);
        assert_eq!(crop(&short.target, 15), short.target);
        let exact = ExamplePair::new(vec![5], &[4; 15]);
        assert_eq!(crop(&exact.target, 15), exact.target);
    }

    #[test]
    fn synthetic_targets() {
        assert_eq!(TaskKind::Copy.apply(&[5, 6, 7]), vec![5, 6, 7]);
        assert_eq!(TaskKind::Reverse.apply(&[5, 6, 7]), vec![7, 6, 5]);
        assert_eq!(TaskKind::Sort.apply(&[7, 5, 6]), vec![5, 6, 7]);
        let p = ExamplePair::new(vec![5, 6, 7], &TaskKind::Reverse.apply(&[5, 6, 7]));
        assert_eq!(p.target, vec![BOS, 7, 6, 5, EOS]);
        assert!("shuffle".parse::<TaskKind>().is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(TaskKind::Reverse, 20, (5, 10), 50, 11).unwrap();
        let b = gen_synthetic(TaskKind::Reverse, 20, (5, 10), 50, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(TaskKind::Reverse, 20, (5, 10), 50, 12).unwrap();
        assert_ne!(a, c);
        for p in &a {
            assert!((5..=10).contains(&p.source.len()));
            assert_eq!(p.target_words(), TaskKind::Reverse.apply(&p.source).as_slice());
            p.validate(RESERVED + 20).unwrap();
        }
        assert!(gen_synthetic(TaskKind::Copy, 3, (1, 2), 1, 0).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab([toks("the cat sat on the mat")], 1).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#mixer-vocab v1\nthe\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);

        fs::write(&path, "the\ncat\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn corpus_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        let pairs = vec![(toks("a b c"), toks("c b a")), (toks("d"), toks("d"))];
        write_corpus(&path, &pairs).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a b c\tc b a\nd\td\n");
        assert_eq!(read_corpus(&path).unwrap(), pairs);

        fs::write(&path, "no tab here\n").unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::Parse { line: 1, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn decode_encode_roundtrip(
                words in prop::collection::vec(0usize..8, 1..30),
                min_count in 1usize..4,
            ) {
                let sentence: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
                let v = build_vocab([sentence.clone()], min_count).unwrap();
                let back = v.decode(&v.encode(&sentence)).unwrap();
                for (orig, got) in sentence.iter().zip(&back) {
                    let count = sentence.iter().filter(|s| *s == orig).count();
                    if count >= min_count {
                        prop_assert_eq!(got, orig);
                    } else {
                        prop_assert_eq!(got.as_str(), "<unk>");
                    }
                }
            }

            #[test]
            fn crop_respects_length_bound(
                len in 0usize..40,
                t_max in 1usize..20,
            ) {
                let p = ExamplePair::new(vec![4], &vec![5; len]).cropped(t_max, 50);
                prop_assert!(p.target.len() >= 2 && p.target.len() <= t_max + 2);
                prop_assert_eq!(p.target[0], BOS);
                prop_assert_eq!(*p.target.last().unwrap(), EOS);
            }
        }
    }
}
