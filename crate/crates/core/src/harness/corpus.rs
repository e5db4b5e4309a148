//! Corpus ingestion and splits.
//!
//! Input is UTF-8 plain text, one sentence per line; tokenization is
//! lowercase + split on whitespace. Lines split 80/10/10 into
//! federated-train, public-pretrain, and heldout-eval; train lines partition
//! into per-user contiguous blocks by user index.

use std::path::Path;

use crate::model::{LocalDataset, ModelError, Vocabulary};

/// Small public corpus bundled with the crate (synthetic text, generated for
/// this project and free of any usage restrictions).
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("corpus too small: {lines} usable lines, need at least {need}")]
    TooSmall { lines: usize, need: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn load_corpus(path: Option<&Path>) -> Result<String, CorpusError> {
    match path {
        None => Ok(BUNDLED_CORPUS.to_string()),
        Some(p) => std::fs::read_to_string(p)
            .map_err(|source| CorpusError::Io { path: p.to_path_buf(), source }),
    }
}

pub fn tokenize_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Line-level 80/10/10 split, in file order.
#[derive(Debug)]
pub struct CorpusSplits {
    pub train: Vec<Vec<String>>,
    pub pretrain: Vec<Vec<String>>,
    pub heldout: Vec<Vec<String>>,
}

pub fn split_corpus(text: &str) -> Result<CorpusSplits, CorpusError> {
    let lines: Vec<Vec<String>> = text
        .lines()
        .map(tokenize_line)
        .filter(|toks| !toks.is_empty())
        .collect();
    if lines.len() < 10 {
        return Err(CorpusError::TooSmall { lines: lines.len(), need: 10 });
    }
    let n = lines.len();
    let n_train = n * 8 / 10;
    let n_pre = n / 10;
    let mut iter = lines.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let pretrain: Vec<_> = iter.by_ref().take(n_pre).collect();
    let heldout: Vec<_> = iter.collect();
    Ok(CorpusSplits { train, pretrain, heldout })
}

/// Vocabulary over the whole corpus (all of it is public text here; the
/// private objects are the per-user partitions, which the simulator assigns).
pub fn build_vocab(text: &str, max_size: usize) -> Result<Vocabulary, CorpusError> {
    let tokens: Vec<String> = text.lines().flat_map(tokenize_line).collect();
    Ok(Vocabulary::build(tokens.iter().map(|s| s.as_str()), max_size)?)
}

fn to_sequences(vocab: &Vocabulary, lines: &[Vec<String>]) -> Vec<Vec<usize>> {
    lines
        .iter()
        .map(|toks| toks.iter().map(|t| vocab.lookup(t)).collect())
        .collect()
}

/// Assign train lines to users as contiguous blocks by user index; the first
/// `lines % users` users take one extra line.
pub fn partition_users(
    vocab: &Vocabulary,
    train: &[Vec<String>],
    num_users: usize,
) -> Result<Vec<(String, LocalDataset)>, CorpusError> {
    if train.len() < num_users {
        return Err(CorpusError::TooSmall { lines: train.len(), need: num_users });
    }
    let base = train.len() / num_users;
    let extra = train.len() % num_users;
    let mut out = Vec::with_capacity(num_users);
    let mut start = 0;
    for u in 0..num_users {
        let len = base + usize::from(u < extra);
        let block = &train[start..start + len];
        start += len;
        let user_id = format!("user_{u:05}");
        out.push((
            user_id.clone(),
            LocalDataset { user_id, sequences: to_sequences(vocab, block) },
        ));
    }
    Ok(out)
}

pub fn single_dataset(vocab: &Vocabulary, lines: &[Vec<String>], name: &str) -> LocalDataset {
    LocalDataset { user_id: name.to_string(), sequences: to_sequences(vocab, lines) }
}

/// Accuracy of always predicting the corpus-wide most frequent token:
/// the majority-class oracle that any trained model must beat.
pub fn majority_baseline_accuracy(vocab: &Vocabulary, heldout: &[Vec<String>]) -> f64 {
    let mut counts = vec![0u64; vocab.len()];
    let mut total = 0u64;
    for line in heldout {
        for tok in line {
            counts[vocab.lookup(tok)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    counts.iter().copied().max().unwrap_or(0) as f64 / total as f64
}
