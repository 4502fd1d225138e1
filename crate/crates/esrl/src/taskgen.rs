//! Synthetic parallel corpora with known structure: the target is a
//! deterministic transform of the source, so the best attainable BLEU is 1.0
//! and any gap is attributable to the model, not the data.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunSeed;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Token table with fixed special ids at the front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub unk_id: TokenId,
    lookup: HashMap<String, TokenId>,
}

impl Vocab {
    pub const N_SPECIAL: usize = 4;

    /// Builds a synthetic vocabulary of `size` tokens: 4 specials followed by
    /// content tokens with numeric surfaces `"0"`, `"1"`, ...
    pub fn synthetic(size: usize) -> Result<Vocab> {
        if size < 8 {
            return Err(Error::InvalidRange(format!("vocab_size {size} < 8")));
        }
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        for i in 0..size - Self::N_SPECIAL {
            tokens.push(i.to_string());
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            tokens,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
            unk_id: 3,
            lookup,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        Self::N_SPECIAL..self.size()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.lookup.get(surface).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Copy,
    Reverse,
    DigitSort,
}

impl TaskKind {
    /// The target for a given source, without the trailing EOS.
    pub fn transform(&self, source: &[TokenId]) -> Vec<TokenId> {
        match self {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::DigitSort => {
                let mut out = source.to_vec();
                out.sort_unstable();
                out
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "digitsort" | "digit-sort" | "digit_sort" => Ok(TaskKind::DigitSort),
            other => Err(Error::InvalidRange(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::Reverse => write!(f, "reverse"),
            TaskKind::DigitSort => write!(f, "digitsort"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidRange(format!("unknown split {other:?}"))),
        }
    }
}

/// One source/target pair; the target always ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    pub task_kind: TaskKind,
    pub vocab: Vocab,
    pub split: Split,
}

/// Generates `n_pairs` pairs whose target is the task transform of a source
/// drawn uniformly over the content vocabulary. Deterministic in `seed`.
pub fn generate_corpus(
    task_kind: TaskKind,
    n_pairs: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    max_decode_len: usize,
    seed: &RunSeed,
) -> Result<Corpus> {
    let (min_len, max_len) = len_range;
    if min_len < 1 {
        return Err(Error::InvalidRange("min length < 1".into()));
    }
    if min_len > max_len {
        return Err(Error::InvalidRange(format!(
            "len range ({min_len},{max_len}) inverted"
        )));
    }
    if max_len > max_decode_len.saturating_sub(1) {
        return Err(Error::InvalidRange(format!(
            "max length {max_len} leaves no room for EOS under max_decode_len {max_decode_len}"
        )));
    }
    let vocab = Vocab::synthetic(vocab_size)?;
    let content = vocab.content_ids();
    let mut rng = seed.rng();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(min_len..=max_len);
        let source: Vec<TokenId> = (0..len)
            .map(|_| rng.gen_range(content.start..content.end))
            .collect();
        let mut target = task_kind.transform(&source);
        target.push(vocab.eos_id);
        pairs.push(Pair { source, target });
    }
    Ok(Corpus {
        pairs,
        task_kind,
        vocab,
        split: Split::Train,
    })
}

/// Deterministic shuffle then partition; sizes land within one pair of
/// `ratio * n`.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: &RunSeed,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (r_train, r_dev, r_test) = ratios;
    if r_train <= 0.0 || r_dev <= 0.0 || r_test <= 0.0 {
        return Err(Error::InvalidRatio("ratios must be positive".into()));
    }
    if (r_train + r_dev + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatio(format!(
            "ratios sum to {}, expected 1",
            r_train + r_dev + r_test
        )));
    }
    let n = corpus.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed.rng();
    // Fisher-Yates, fixed traversal for determinism.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let b1 = (r_train * n as f64).round() as usize;
    let b2 = ((r_train + r_dev) * n as f64).round() as usize;
    let b1 = b1.min(n);
    let b2 = b2.clamp(b1, n);
    let take = |range: std::ops::Range<usize>, split: Split| Corpus {
        pairs: order[range].iter().map(|&i| corpus.pairs[i].clone()).collect(),
        task_kind: corpus.task_kind,
        vocab: corpus.vocab.clone(),
        split,
    };
    Ok((
        take(0..b1, Split::Train),
        take(b1..b2, Split::Dev),
        take(b2..n, Split::Test),
    ))
}

/// Writes the corpus file format: a header line
/// `#vocab=<size> task=<kind> split=<split>` followed by one
/// `source<TAB>target` pair per line, tokens as space-separated surfaces.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "#vocab={} task={} split={}",
        corpus.vocab.size(),
        corpus.task_kind,
        corpus.split
    )?;
    for pair in &corpus.pairs {
        let render = |seq: &[TokenId]| {
            seq.iter()
                .map(|&id| corpus.vocab.surface(id))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(w, "{}\t{}", render(&pair.source), render(&pair.target))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus file back against a known vocabulary.
pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let (size, task_kind, split) = parse_header(header)?;
    if size != vocab.size() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header vocab size {size} != expected {}", vocab.size()),
        });
    }

    let mut pairs = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (src_text, tgt_text) = raw.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing tab separator".into(),
        })?;
        let parse_seq = |text: &str| -> Result<Vec<TokenId>> {
            text.split_whitespace()
                .map(|tok| {
                    vocab.id_of(tok).ok_or_else(|| Error::UnknownToken {
                        token: tok.to_string(),
                        line: lineno,
                    })
                })
                .collect()
        };
        let source = parse_seq(src_text)?;
        let target = parse_seq(tgt_text)?;
        if source.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty source".into(),
            });
        }
        if target.last() != Some(&vocab.eos_id) {
            return Err(Error::Parse {
                line: lineno,
                msg: "target does not end with <eos>".into(),
            });
        }
        pairs.push(Pair { source, target });
    }
    Ok(Corpus {
        pairs,
        task_kind,
        vocab: vocab.clone(),
        split,
    })
}

/// Reads a corpus file, reconstructing the synthetic vocabulary from the
/// header's vocab size.
pub fn read_corpus_auto(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let (size, _, _) = parse_header(header)?;
    let vocab = Vocab::synthetic(size)?;
    read_corpus(path, &vocab)
}

fn parse_header(header: &str) -> Result<(usize, TaskKind, Split)> {
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let mut fields = header.split_whitespace();
    let vocab_field = fields
        .next()
        .ok_or_else(|| bad("empty header".into()))?
        .strip_prefix("#vocab=")
        .ok_or_else(|| bad("header must start with #vocab=<size>".into()))?;
    let size: usize = vocab_field
        .parse()
        .map_err(|_| bad(format!("bad vocab size {vocab_field:?}")))?;
    let task_field = fields
        .next()
        .and_then(|f| f.strip_prefix("task="))
        .ok_or_else(|| bad("header missing task=<kind>".into()))?;
    let task_kind = TaskKind::parse(task_field).map_err(|e| bad(e.to_string()))?;
    let split = match fields.next() {
        Some(f) => {
            let split_field = f
                .strip_prefix("split=")
                .ok_or_else(|| bad(format!("unexpected header field {f:?}")))?;
            Split::parse(split_field).map_err(|e| bad(e.to_string()))?
        }
        None => Split::Train,
    };
    Ok((size, task_kind, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> RunSeed {
        RunSeed::new(11)
    }

    #[test]
    fn copy_transform_is_identity() {
        let v = Vocab::synthetic(16).unwrap();
        let src = vec![5, 7, 3];
        let mut want = src.clone();
        want.push(v.eos_id);
        let mut got = TaskKind::Copy.transform(&src);
        got.push(v.eos_id);
        assert_eq!(got, want);
    }

    #[test]
    fn reverse_transform_reverses() {
        assert_eq!(TaskKind::Reverse.transform(&[5, 7, 3]), vec![3, 7, 5]);
    }

    #[test]
    fn digitsort_transform_sorts_ascending() {
        assert_eq!(TaskKind::DigitSort.transform(&[9, 2, 2, 4]), vec![2, 2, 4, 9]);
    }

    #[test]
    fn generated_pairs_satisfy_task_and_bounds() {
        let c = generate_corpus(TaskKind::DigitSort, 200, (1, 9), 16, 12, &seed()).unwrap();
        assert_eq!(c.pairs.len(), 200);
        for pair in &c.pairs {
            assert!((1..=9).contains(&pair.source.len()));
            let mut want = c.task_kind.transform(&pair.source);
            want.push(c.vocab.eos_id);
            assert_eq!(pair.target, want);
            for &t in pair.source.iter().chain(&pair.target) {
                assert!(t < c.vocab.size());
                assert_ne!(t, c.vocab.pad_id);
            }
        }
    }

    #[test]
    fn generate_rejects_bad_ranges() {
        assert!(generate_corpus(TaskKind::Copy, 5, (0, 4), 16, 12, &seed()).is_err());
        assert!(generate_corpus(TaskKind::Copy, 5, (1, 12), 16, 12, &seed()).is_err());
        assert!(generate_corpus(TaskKind::Copy, 5, (1, 4), 7, 12, &seed()).is_err());
    }

    #[test]
    fn split_exact_division() {
        let c = generate_corpus(TaskKind::Copy, 100, (1, 6), 16, 12, &seed()).unwrap();
        let (tr, dv, te) = split_corpus(&c, (0.8, 0.1, 0.1), &seed()).unwrap();
        assert_eq!((tr.pairs.len(), dv.pairs.len(), te.pairs.len()), (80, 10, 10));
        assert_eq!(tr.split, Split::Train);
        assert_eq!(dv.split, Split::Dev);
        assert_eq!(te.split, Split::Test);
    }

    #[test]
    fn split_conserves_pairs() {
        let c = generate_corpus(TaskKind::Copy, 101, (1, 6), 16, 12, &seed()).unwrap();
        let (tr, dv, te) = split_corpus(&c, (0.8, 0.1, 0.1), &seed()).unwrap();
        assert_eq!(tr.pairs.len() + dv.pairs.len() + te.pairs.len(), 101);
        for (len, ratio) in [
            (tr.pairs.len(), 0.8),
            (dv.pairs.len(), 0.1),
            (te.pairs.len(), 0.1),
        ] {
            assert!((len as f64 - ratio * 101.0).abs() <= 1.0);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let c = generate_corpus(TaskKind::Copy, 57, (1, 6), 16, 12, &seed()).unwrap();
        let a = split_corpus(&c, (0.6, 0.2, 0.2), &seed()).unwrap();
        let b = split_corpus(&c, (0.6, 0.2, 0.2), &seed()).unwrap();
        assert_eq!(a.0.pairs, b.0.pairs);
        assert_eq!(a.1.pairs, b.1.pairs);
        assert_eq!(a.2.pairs, b.2.pairs);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let c = generate_corpus(TaskKind::Copy, 10, (1, 4), 16, 12, &seed()).unwrap();
        assert!(split_corpus(&c, (0.9, 0.2, 0.1), &seed()).is_err());
        assert!(split_corpus(&c, (1.0, 0.0, 0.0), &seed()).is_err());
    }

    #[test]
    fn corpus_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let c = generate_corpus(TaskKind::Reverse, 40, (1, 8), 20, 12, &seed()).unwrap();
        write_corpus(&c, &path).unwrap();
        let back = read_corpus(&path, &c.vocab).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "#vocab=16 task=copy\n0 1\t1 0 <eos>\nabc\n").unwrap();
        let v = Vocab::synthetic(16).unwrap();
        match read_corpus(&path, &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_token_is_named_with_location() {
        // Scripted oracle: emit a good file, corrupt exactly one token,
        // assert the error carries that token and its line.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrupt.tsv");
        let c = generate_corpus(TaskKind::Copy, 5, (2, 4), 16, 12, &seed()).unwrap();
        write_corpus(&c, &path).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[3] = lines[3].replacen(' ', " zork ", 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_corpus(&path, &c.vocab) {
            Err(Error::UnknownToken { token, line }) => {
                assert_eq!(token, "zork");
                assert_eq!(line, 4);
            }
            other => panic!("expected unknown-token error, got {other:?}"),
        }
    }

    #[test]
    fn read_corpus_auto_recovers_vocab_from_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("auto.tsv");
        let c = generate_corpus(TaskKind::DigitSort, 12, (2, 6), 20, 12, &seed()).unwrap();
        write_corpus(&c, &path).unwrap();
        assert_eq!(read_corpus_auto(&path).unwrap(), c);
    }

    #[test]
    fn round_trip_identity_over_many_random_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.tsv");
        let root = RunSeed::new(99);
        for i in 0..1000 {
            let s = root.derive("corpus", i);
            let task = match i % 3 {
                0 => TaskKind::Copy,
                1 => TaskKind::Reverse,
                _ => TaskKind::DigitSort,
            };
            let c = generate_corpus(task, 3, (1, 6), 8 + (i as usize % 9), 12, &s).unwrap();
            write_corpus(&c, &path).unwrap();
            assert_eq!(read_corpus(&path, &c.vocab).unwrap(), c);
        }
    }
}
