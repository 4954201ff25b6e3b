//! Toy-corpus ingestion: whitespace tokenization, fixed-length packing and
//! masked-LM corruption, all deterministic given a seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token-string to id map with fixed reserved ids. Ids are dense in
/// [0, vocab_size) and corpus tokens never map to a reserved id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keep the `max_size - RESERVED` most frequent lowercase tokens,
    /// ordered by frequency descending then lexicographic.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocabulary> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab max_size {} must exceed the {} reserved tokens",
                max_size,
                RESERVED.len()
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for tok in tokenize_words(corpus) {
            *counts.entry(tok).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ordered.truncate(max_size - RESERVED.len());

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ordered.into_iter().map(|(t, _)| t));
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// First id that corpus text can produce (everything below is reserved).
    pub fn first_word_id(&self) -> usize {
        RESERVED.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize_words(text).map(|t| self.id(&t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Persist as a JSON array of token strings in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.id_to_token)
            .map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read vocabulary {}: {}", path.display(), e)))?;
        let id_to_token: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::Serialize(e.to_string()))?;
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Input(format!(
                    "vocabulary file {} is missing reserved token {} at id {}",
                    path.display(),
                    r,
                    i
                )));
            }
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }
}

fn tokenize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// One training batch: corrupted token ids, padding flags and per-position
/// labels (original id only where corruption was applied).
#[derive(Debug, Clone)]
pub struct MlmBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl MlmBatch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Concatenate the corpus token stream and cut it into fixed-length windows.
/// The final partial window is padded with PAD.
pub fn pack_windows(corpus: &str, vocab: &Vocabulary, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    let ids = vocab.tokenize(corpus);
    if ids.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut windows = Vec::new();
    for chunk in ids.chunks(seq_len) {
        let mut w = chunk.to_vec();
        w.resize(seq_len, PAD);
        windows.push(w);
    }
    Ok(windows)
}

/// Apply the 15%/80-10-10 corruption scheme to a set of sequences.
///
/// Roughly `mask_prob` of the non-pad positions are selected (at least one
/// per sequence); of the selected, 80% become MASK, 10% a random word token
/// and 10% stay unchanged. Labels carry the original id exactly at selected
/// positions.
pub fn make_mlm_batch(
    sequences: &[Vec<usize>],
    vocab: &Vocabulary,
    mask_prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<MlmBatch> {
    assert!(mask_prob > 0.0 && mask_prob < 1.0, "mask_prob must lie in (0,1)");
    let first_word = vocab.first_word_id();
    let n_words = vocab.size() - first_word;
    let mut token_ids = Vec::with_capacity(sequences.len());
    let mut pad_mask = Vec::with_capacity(sequences.len());
    let mut labels = Vec::with_capacity(sequences.len());

    for seq in sequences {
        let pads: Vec<bool> = seq.iter().map(|&t| t != PAD).collect();
        let live: Vec<usize> = (0..seq.len()).filter(|&i| pads[i]).collect();
        if live.is_empty() {
            return Err(Error::Input("sequence of all-pad positions".into()));
        }
        let mut selected: Vec<usize> =
            live.iter().copied().filter(|_| rng.gen::<f64>() < mask_prob).collect();
        if selected.is_empty() {
            selected.push(live[rng.gen_range(0..live.len())]);
        }

        let mut corrupted = seq.clone();
        let mut label_row: Vec<Option<usize>> = vec![None; seq.len()];
        for &pos in &selected {
            label_row[pos] = Some(seq[pos]);
            let roll = rng.gen::<f64>();
            if roll < 0.8 {
                corrupted[pos] = MASK;
            } else if roll < 0.9 && n_words > 0 {
                corrupted[pos] = first_word + rng.gen_range(0..n_words);
            } // else: keep the original token
        }
        token_ids.push(corrupted);
        pad_mask.push(pads);
        labels.push(label_row);
    }
    Ok(MlmBatch { token_ids, pad_mask, labels })
}

/// Deterministic shuffled batch stream over a fixed window set. Reshuffles
/// at every epoch boundary with its own rng stream.
pub struct BatchStream {
    windows: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    mask_prob: f64,
    vocab: Vocabulary,
    rng: ChaCha12Rng,
}

impl BatchStream {
    pub fn new(
        windows: Vec<Vec<usize>>,
        vocab: Vocabulary,
        batch_size: usize,
        mask_prob: f64,
        seed: u64,
    ) -> BatchStream {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        assert!(!windows.is_empty(), "no training windows");
        let mut s = BatchStream {
            order: (0..windows.len()).collect(),
            windows,
            cursor: 0,
            batch_size,
            mask_prob,
            vocab,
            rng: ChaCha12Rng::seed_from_u64(seed),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        // Fisher-Yates with the stream rng.
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Result<MlmBatch> {
        let mut seqs = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor >= self.order.len() {
                self.shuffle();
            }
            seqs.push(self.windows[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        make_mlm_batch(&seqs, &self.vocab, self.mask_prob, &mut self.rng)
    }
}

/// Deterministic evaluation batches: a fresh rng seeded from `seed` is used
/// for the corruption, so the same windows give the same batches on every
/// call.
pub fn eval_batches(
    windows: &[Vec<usize>],
    vocab: &Vocabulary,
    batch_size: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<MlmBatch>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    windows
        .chunks(batch_size)
        .map(|chunk| make_mlm_batch(chunk, vocab, mask_prob, &mut rng))
        .collect()
}

/// Split windows into (train, heldout) deterministically.
pub fn split_windows(
    mut windows: Vec<Vec<usize>>,
    eval_frac: f64,
    seed: u64,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    assert!((0.0..1.0).contains(&eval_frac), "eval_frac must lie in [0,1)");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..windows.len()).rev() {
        let j = rng.gen_range(0..=i);
        windows.swap(i, j);
    }
    let n_eval = ((windows.len() as f64) * eval_frac).floor() as usize;
    let n_eval = n_eval.min(windows.len().saturating_sub(1));
    let heldout = windows.split_off(windows.len() - n_eval);
    (windows, heldout)
}

const DETERMINERS: &[&str] = &["the", "a", "one", "every", "this"];
const ADJECTIVES: &[&str] = &[
    "quick", "red", "small", "sleepy", "bright", "quiet", "heavy", "gentle", "clever", "rusty",
    "golden", "narrow", "silent", "busy", "cold", "warm", "young", "old", "sharp", "round",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "robot", "painter", "sailor", "teacher", "farmer", "child",
    "fish", "owl", "horse", "rabbit", "turtle", "baker", "miner", "pilot", "singer", "doctor",
    "garden", "river", "market", "tower", "bridge", "forest", "valley", "harbor", "castle",
    "library", "kitchen", "engine", "lantern", "basket", "ladder", "mirror", "hammer", "wheel",
    "rope", "bell",
];
const VERBS: &[&str] = &[
    "chases", "sees", "likes", "follows", "paints", "watches", "helps", "finds", "carries",
    "builds", "fixes", "visits", "greets", "teaches", "feeds", "draws", "cleans", "opens",
    "closes", "moves", "lifts", "drops", "holds", "shares", "counts",
];
const ADVERBS: &[&str] = &[
    "quickly", "slowly", "quietly", "carefully", "happily", "rarely", "often", "always",
    "gently", "twice",
];
const PREPOSITIONS: &[&str] =
    &["near", "behind", "beside", "under", "over", "across", "inside", "outside", "around", "toward"];

/// Small deterministic text corpus with learnable word-order structure, for
/// demos and tests. Vocabulary stays around 100 distinct words.
pub fn synthetic_corpus(sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Bias toward low indices so token frequencies are uneven.
    let pick = |rng: &mut ChaCha12Rng, words: &[&str]| -> String {
        let r: f64 = rng.gen();
        let idx = ((r * r) * words.len() as f64) as usize;
        words[idx.min(words.len() - 1)].to_string()
    };
    let mut out = String::new();
    for _ in 0..sentences {
        let mut parts: Vec<String> = Vec::new();
        parts.push(pick(&mut rng, DETERMINERS));
        if rng.gen::<f64>() < 0.5 {
            parts.push(pick(&mut rng, ADJECTIVES));
        }
        parts.push(pick(&mut rng, NOUNS));
        parts.push(pick(&mut rng, VERBS));
        parts.push(pick(&mut rng, DETERMINERS));
        if rng.gen::<f64>() < 0.3 {
            parts.push(pick(&mut rng, ADJECTIVES));
        }
        parts.push(pick(&mut rng, NOUNS));
        let tail: f64 = rng.gen();
        if tail < 0.35 {
            parts.push(pick(&mut rng, PREPOSITIONS));
            parts.push(pick(&mut rng, DETERMINERS));
            parts.push(pick(&mut rng, NOUNS));
        } else if tail < 0.55 {
            parts.push(pick(&mut rng, ADVERBS));
        }
        out.push_str(&parts.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = Vocabulary::build("a b a", 10).unwrap();
        assert_eq!(v.id("a"), RESERVED.len());
        assert_eq!(v.id("b"), RESERVED.len() + 1);
        assert_eq!(v.size(), RESERVED.len() + 2);
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let err = Vocabulary::build("a b", RESERVED.len()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn vocab_rebuild_identical() {
        let corpus = synthetic_corpus(50, 3);
        let a = Vocabulary::build(&corpus, 256).unwrap();
        let b = Vocabulary::build(&corpus, 256).unwrap();
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn vocab_truncates_to_most_frequent() {
        let v = Vocabulary::build("x x x y y z", RESERVED.len() + 2).unwrap();
        assert_eq!(v.size(), RESERVED.len() + 2);
        assert_ne!(v.id("x"), UNK);
        assert_ne!(v.id("y"), UNK);
        assert_eq!(v.id("z"), UNK);
    }

    #[test]
    fn detokenize_round_trip() {
        let corpus = "The quick Fox  likes\nthe red owl";
        let v = Vocabulary::build(corpus, 64).unwrap();
        let ids = v.tokenize(corpus);
        let normalized =
            corpus.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ");
        assert_eq!(v.detokenize(&ids), normalized);
    }

    #[test]
    fn single_token_sequence_always_selected() {
        let v = Vocabulary::build("a b c", 16).unwrap();
        let seq = vec![vec![v.id("a"), PAD, PAD]];
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let batch = make_mlm_batch(&seq, &v, 0.15, &mut rng).unwrap();
            assert!(batch.labels[0][0].is_some(), "forced selection missing at seed {}", seed);
            assert!(batch.labels[0][1].is_none());
        }
    }

    #[test]
    fn all_pad_sequence_rejected() {
        let v = Vocabulary::build("a b c", 16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let err = make_mlm_batch(&[vec![PAD, PAD]], &v, 0.15, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn mlm_batch_deterministic() {
        let corpus = synthetic_corpus(40, 1);
        let v = Vocabulary::build(&corpus, 256).unwrap();
        let windows = pack_windows(&corpus, &v, 12).unwrap();
        let one = {
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            make_mlm_batch(&windows, &v, 0.15, &mut rng).unwrap()
        };
        let two = {
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            make_mlm_batch(&windows, &v, 0.15, &mut rng).unwrap()
        };
        assert_eq!(one.token_ids, two.token_ids);
        assert_eq!(one.labels, two.labels);
    }

    #[test]
    fn selection_fraction_concentrates() {
        let corpus = synthetic_corpus(600, 2);
        let v = Vocabulary::build(&corpus, 256).unwrap();
        let windows = pack_windows(&corpus, &v, 16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut selected = 0usize;
        let mut total = 0usize;
        while total < 10_000 {
            let batch = make_mlm_batch(&windows, &v, 0.15, &mut rng).unwrap();
            for (labels, pads) in batch.labels.iter().zip(batch.pad_mask.iter()) {
                selected += labels.iter().filter(|l| l.is_some()).count();
                total += pads.iter().filter(|p| **p).count();
            }
        }
        let frac = selected as f64 / total as f64;
        assert!((0.13..=0.17).contains(&frac), "selected fraction {}", frac);
    }

    #[test]
    fn labels_carry_original_ids() {
        let corpus = synthetic_corpus(30, 9);
        let v = Vocabulary::build(&corpus, 256).unwrap();
        let windows = pack_windows(&corpus, &v, 10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let batch = make_mlm_batch(&windows, &v, 0.3, &mut rng).unwrap();
        for (s, seq) in windows.iter().enumerate() {
            for (p, lab) in batch.labels[s].iter().enumerate() {
                if let Some(orig) = lab {
                    assert_eq!(*orig, seq[p]);
                }
            }
        }
    }

    #[test]
    fn batch_stream_reproducible() {
        let corpus = synthetic_corpus(60, 8);
        let v = Vocabulary::build(&corpus, 256).unwrap();
        let windows = pack_windows(&corpus, &v, 12).unwrap();
        let collect = || {
            let mut s = BatchStream::new(windows.clone(), v.clone(), 4, 0.15, 77);
            (0..10).map(|_| s.next_batch().unwrap().token_ids).collect::<Vec<_>>()
        };
        assert_eq!(collect(), collect());
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let corpus = synthetic_corpus(30, 5);
        let v = Vocabulary::build(&corpus, 128).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.id_to_token, loaded.id_to_token);
    }

    #[test]
    fn synthetic_corpus_vocab_fits() {
        let corpus = synthetic_corpus(2000, 0);
        let v = Vocabulary::build(&corpus, 256).unwrap();
        assert!(v.size() > 60, "vocab unexpectedly small: {}", v.size());
        assert!(v.size() <= 256);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_for_in_vocab_text(idx in proptest::collection::vec(0usize..30, 1..40)) {
                let corpus = synthetic_corpus(200, 42);
                let v = Vocabulary::build(&corpus, 256).unwrap();
                let words: Vec<String> = idx
                    .iter()
                    .map(|i| v.token(v.first_word_id() + (i % (v.size() - v.first_word_id()))).to_string())
                    .collect();
                let text = words.join(" ");
                prop_assert_eq!(v.detokenize(&v.tokenize(&text)), text);
            }
        }
    }
}
