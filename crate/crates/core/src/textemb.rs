//! Word-vector tables and the average-of-word-vectors text embedding.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gaussian;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TableSource {
    LoadedFile { path: String },
    HashedDeterministic { seed: u64 },
}

#[derive(Clone, Debug)]
enum Entries {
    Map(HashMap<String, Vec<f64>>),
    /// Vectors are a pure function of (word, seed), computed on demand.
    Hashed(u64),
}

#[derive(Clone, Debug)]
pub struct WordVectorTable {
    dim: usize,
    entries: Entries,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// Number of tokens found in the table.
    pub token_count: usize,
}

impl WordVectorTable {
    /// Reads a GloVe text file: `word v1 v2 ... vd` per line.
    pub fn load(path: &Path) -> Result<WordVectorTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        WordVectorTable::parse(&text).map_err(|e| match e {
            Error::WordVectors(m) => Error::WordVectors(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<WordVectorTable> {
        let mut dim = None;
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let word = parts.next().unwrap().to_lowercase();
            let vec: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::WordVectors(format!("line {}: bad number {p:?}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if vec.is_empty() {
                return Err(Error::WordVectors(format!("line {}: word {word:?} has no vector", lineno + 1)));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::WordVectors(format!("line {}: non-finite value", lineno + 1)));
            }
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(Error::WordVectors(format!(
                        "line {}: dimension mismatch, expected {d} values, found {}",
                        lineno + 1,
                        vec.len()
                    )))
                }
                _ => {}
            }
            if map.contains_key(&word) {
                log::warn!("duplicate word {word:?} on line {}; keeping the first occurrence", lineno + 1);
                continue;
            }
            map.insert(word, vec);
        }
        let dim = dim.ok_or_else(|| Error::WordVectors("empty file".into()))?;
        Ok(WordVectorTable { dim, entries: Entries::Map(map) })
    }

    /// An in-memory table; keys are lowercased.
    pub fn from_entries(entries: &[(&str, Vec<f64>)]) -> Result<WordVectorTable> {
        let dim = entries.first().map(|e| e.1.len()).ok_or_else(|| Error::WordVectors("no entries".into()))?;
        if dim == 0 || entries.iter().any(|e| e.1.len() != dim) {
            return Err(Error::WordVectors("inconsistent dimensions".into()));
        }
        let mut map = HashMap::new();
        for (w, v) in entries {
            map.entry(w.to_lowercase()).or_insert_with(|| v.clone());
        }
        Ok(WordVectorTable { dim, entries: Entries::Map(map) })
    }

    /// Deterministic stand-in for pretrained vectors: each word maps to a
    /// unit-norm Gaussian direction seeded by hash(word, seed).
    pub fn hashed(dim: usize, seed: u64) -> Result<WordVectorTable> {
        if dim == 0 {
            return Err(Error::WordVectors("dimension must be positive".into()));
        }
        Ok(WordVectorTable { dim, entries: Entries::Hashed(seed) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_is_hashed(&self) -> bool {
        matches!(self.entries, Entries::Hashed(_))
    }

    pub fn len(&self) -> Option<usize> {
        match &self.entries {
            Entries::Map(m) => Some(m.len()),
            Entries::Hashed(_) => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    pub fn lookup(&self, word: &str) -> Option<Vec<f64>> {
        let word = word.to_lowercase();
        match &self.entries {
            Entries::Map(m) => m.get(&word).cloned(),
            Entries::Hashed(seed) => Some(hashed_vector(&word, *seed, self.dim)),
        }
    }

    /// Vectors of the in-vocabulary tokens of `text`, in order.
    pub fn sequence(&self, text: &str) -> Vec<Vec<f64>> {
        tokenize(text).iter().filter_map(|t| self.lookup(t)).collect()
    }

    /// Mean of the in-vocabulary token vectors; zeros when none hit.
    pub fn embed(&self, text: &str) -> TextEmbedding {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0;
        for v in self.sequence(text) {
            for (s, x) in sum.iter_mut().zip(&v) {
                *s += x;
            }
            count += 1;
        }
        if count == 0 {
            log::warn!("no in-vocabulary tokens in {text:?}; using the zero embedding");
            return TextEmbedding { vector: sum, token_count: 0 };
        }
        let inv = 1.0 / count as f64;
        TextEmbedding { vector: sum.into_iter().map(|s| s * inv).collect(), token_count: count }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; used to combine seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hashed_vector(word: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(fnv1a(word.as_bytes()) ^ mix64(seed)));
    let v = gaussian(&mut rng, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_glove_text() {
        let t = WordVectorTable::parse("a 1.0 0.0\nb 0.0 1.0").unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), Some(2));
        assert_eq!(t.lookup("A"), Some(vec![1.0, 0.0]));
    }

    #[test]
    fn rejects_mismatched_dims_and_empty() {
        let e = WordVectorTable::parse("a 1.0\nb 1.0 2.0").unwrap_err();
        assert!(e.to_string().contains("dimension mismatch"));
        assert!(WordVectorTable::parse("").unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn duplicates_keep_first() {
        let t = WordVectorTable::parse("a 1 0\nA 5 5\n").unwrap();
        assert_eq!(t.lookup("a"), Some(vec![1.0, 0.0]));
        assert_eq!(t.len(), Some(1));
    }

    #[test]
    fn hashed_vectors_are_deterministic_unit_norm() {
        let t = WordVectorTable::hashed(50, 7).unwrap();
        let a = t.lookup("dress").unwrap();
        assert_eq!(a, t.lookup("dress").unwrap());
        assert_eq!(a, t.lookup("DRESS").unwrap());
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let b = WordVectorTable::hashed(50, 8).unwrap().lookup("dress").unwrap();
        assert_ne!(a, b);
        assert!(WordVectorTable::hashed(0, 1).is_err());
    }

    #[test]
    fn seeds_give_distinct_vectors_over_many_words() {
        // 200 words x 2 seeds: no collisions and no near-duplicates.
        let t7 = WordVectorTable::hashed(16, 7).unwrap();
        let t8 = WordVectorTable::hashed(16, 8).unwrap();
        for i in 0..200 {
            let w = format!("word{i}");
            let (a, b) = (t7.lookup(&w).unwrap(), t8.lookup(&w).unwrap());
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!(dot < 0.999, "{w}");
        }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Red cotton T-Shirt."), vec!["red", "cotton", "t", "shirt"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  B"), vec!["a", "b"]);
    }

    #[test]
    fn average_embedding() {
        let t = WordVectorTable::from_entries(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        assert_eq!(t.embed("a b"), TextEmbedding { vector: vec![0.5, 0.5], token_count: 2 });
        let t1 = WordVectorTable::from_entries(&[("a", vec![1.0, 0.0])]).unwrap();
        assert_eq!(t1.embed("zzz"), TextEmbedding { vector: vec![0.0, 0.0], token_count: 0 });
        let t3 = WordVectorTable::from_entries(&[("a", vec![2.0, 0.0]), ("b", vec![0.0, 2.0]), ("c", vec![2.0, 2.0])])
            .unwrap();
        let e = t3.embed("a b c");
        assert!((e.vector[0] - 4.0 / 3.0).abs() < 1e-12 && (e.vector[1] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.token_count, 3);
    }

    proptest! {
        #[test]
        fn permutation_invariance(words in proptest::collection::vec("[a-e]{1,3}", 1..8), seed in 0u64..4, rot in 0usize..8) {
            let t = WordVectorTable::hashed(6, seed).unwrap();
            let mut shuffled = words.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let a = t.embed(&words.join(" "));
            let b = t.embed(&shuffled.join(" "));
            prop_assert_eq!(a.token_count, b.token_count);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn scaling_linearity(alpha in -3.0f64..3.0, v in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let base = [("a", v[..3].to_vec()), ("b", v[3..].to_vec())];
            let scaled: Vec<(&str, Vec<f64>)> = base.iter().map(|(w, x)| (*w, x.iter().map(|e| e * alpha).collect())).collect();
            let t = WordVectorTable::from_entries(&base).unwrap();
            let ts = WordVectorTable::from_entries(&scaled).unwrap();
            let e = t.embed("a b a");
            let es = ts.embed("a b a");
            for (x, y) in e.vector.iter().zip(&es.vector) {
                prop_assert!((x * alpha - y).abs() < 1e-12);
            }
        }

        #[test]
        fn single_word_embedding_is_exact(word in "[a-z]{1,8}", seed in 0u64..100) {
            let t = WordVectorTable::hashed(10, seed).unwrap();
            prop_assert_eq!(t.embed(&word).vector, t.lookup(&word).unwrap());
        }
    }
}
