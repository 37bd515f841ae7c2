use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mel::MelConfig;
use crate::error::{Error, Result};

pub type ConceptId = usize;

pub const MIN_FREQ_HZ: f64 = 80.0;
pub const MAX_FREQ_HZ: f64 = 4000.0;

/// A synthetic sound source: its surface words, pitch and timbre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub tokens: Vec<String>,
    pub frequency_hz: f64,
    pub timbre_seed: u64,
    #[serde(default)]
    pub unseen: bool,
}

/// All concepts of one synthetic world, split into train and unseen parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    concepts: Vec<Concept>,
    by_token: HashMap<String, ConceptId>,
}

impl Lexicon {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        let mut by_token = HashMap::new();
        for (i, c) in concepts.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!(
                    "concept ids must be 0..n, found {} at {i}",
                    c.id
                )));
            }
            if !(MIN_FREQ_HZ..=MAX_FREQ_HZ).contains(&c.frequency_hz) {
                return Err(Error::Config(format!(
                    "concept {i} frequency {} outside [{MIN_FREQ_HZ}, {MAX_FREQ_HZ}]",
                    c.frequency_hz
                )));
            }
            if c.tokens.is_empty() {
                return Err(Error::Config(format!("concept {i} has no surface tokens")));
            }
            for t in &c.tokens {
                if by_token.insert(t.clone(), i).is_some() {
                    return Err(Error::Config(format!("surface token {t:?} used twice")));
                }
            }
        }
        Ok(Self { concepts, by_token })
    }

    /// Builds a lexicon whose fundamentals sit on mel filter centers at least
    /// two filters apart. `n_unseen` concepts spread through the interior of
    /// the pitch range are marked unseen.
    pub fn generate<R: Rng>(
        n_concepts: usize,
        n_unseen: usize,
        mel: &MelConfig,
        reserved: &HashSet<String>,
        two_token_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_unseen + 2 > n_concepts {
            return Err(Error::Config(format!(
                "need at least {} concepts for {n_unseen} unseen ones",
                n_unseen + 2
            )));
        }
        let usable: Vec<usize> = (0..mel.n_mels)
            .filter(|&b| (MIN_FREQ_HZ..=MAX_FREQ_HZ).contains(&mel.center_hz(b)))
            .collect();
        let need = 2 * n_concepts - 1;
        if usable.len() < need {
            return Err(Error::Config(format!(
                "{n_concepts} concepts two mel bins apart need {need} usable bins, only {} fit in [{MIN_FREQ_HZ}, {MAX_FREQ_HZ}] Hz",
                usable.len()
            )));
        }
        let mut gaps = vec![0usize; n_concepts + 1];
        for _ in 0..usable.len() - need {
            gaps[rng.random_range(0..=n_concepts)] += 1;
        }
        let mut bins = Vec::with_capacity(n_concepts);
        let mut pos = gaps[0];
        for i in 0..n_concepts {
            bins.push(usable[pos]);
            pos += 2 + gaps[i + 1];
        }

        let unseen: BTreeSet<usize> = (0..n_unseen)
            .map(|i| ((i + 1) as f64 * (n_concepts - 1) as f64 / (n_unseen + 1) as f64).round() as usize)
            .collect();

        let mut used: HashSet<String> = reserved.clone();
        let mut concepts: Vec<Concept> = bins
            .iter()
            .enumerate()
            .map(|(rank, &b)| {
                let n_tok = if rng.random_bool(two_token_prob) { 2 } else { 1 };
                let tokens = (0..n_tok).map(|_| pseudo_word(rng, &mut used)).collect();
                Concept {
                    id: 0,
                    tokens,
                    frequency_hz: mel.center_hz(b),
                    timbre_seed: rng.random(),
                    unseen: unseen.contains(&rank),
                }
            })
            .collect();
        // Ids are assigned in a shuffled order so id carries no pitch information.
        for i in (1..concepts.len()).rev() {
            let j = rng.random_range(0..=i);
            concepts.swap(i, j);
        }
        for (i, c) in concepts.iter_mut().enumerate() {
            c.id = i;
        }
        Self::new(concepts)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts.get(id).ok_or(Error::UnknownConcept(id))
    }

    pub fn train_ids(&self) -> Vec<ConceptId> {
        self.concepts.iter().filter(|c| !c.unseen).map(|c| c.id).collect()
    }

    pub fn unseen_ids(&self) -> Vec<ConceptId> {
        self.concepts.iter().filter(|c| c.unseen).map(|c| c.id).collect()
    }

    pub fn concept_of_token(&self, token: &str) -> Option<ConceptId> {
        self.by_token.get(token).copied()
    }

    /// Concepts named in `words`, deduplicated in first-mention order.
    pub fn resolve<S: AsRef<str>>(&self, words: &[S]) -> Vec<ConceptId> {
        let mut out = Vec::new();
        for w in words {
            if let Some(c) = self.concept_of_token(w.as_ref()) {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.concepts {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut concepts = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            concepts.push(serde_json::from_str(&line)?);
        }
        Self::new(concepts)
    }
}

fn pseudo_word<R: Rng>(rng: &mut R, used: &mut HashSet<String>) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "tr", "pl", "sn", "gl",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "oa", "ei", "ou"];
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if rng.random_bool(0.5) {
            w.push_str(["x", "th", "ng", "sk"][rng.random_range(0..4)]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn generated_lexicon_respects_spacing_and_range() {
        let mel = MelConfig::default();
        for seed in 0..20 {
            let lex = Lexicon::generate(12, 4, &mel, &HashSet::new(), 0.3, &mut stream(seed, &[])).unwrap();
            let mut bins: Vec<usize> = lex.concepts().iter().map(|c| mel.bin_of_hz(c.frequency_hz)).collect();
            bins.sort();
            assert!(bins.windows(2).all(|w| w[1] - w[0] >= 2), "{bins:?}");
            assert_eq!(lex.unseen_ids().len(), 4);
            // unseen concepts are never the lowest or highest pitch
            let mut by_pitch: Vec<&Concept> = lex.concepts().iter().collect();
            by_pitch.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));
            assert!(!by_pitch[0].unseen && !by_pitch[11].unseen);
        }
    }

    #[test]
    fn too_many_concepts_is_config_error() {
        let mel = MelConfig::default();
        assert!(Lexicon::generate(13, 4, &mel, &HashSet::new(), 0.0, &mut stream(0, &[])).is_err());
        assert!(Lexicon::generate(5, 4, &mel, &HashSet::new(), 0.0, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn validation() {
        let c = |id, tok: &str, f| Concept {
            id,
            tokens: vec![tok.into()],
            frequency_hz: f,
            timbre_seed: 0,
            unseen: false,
        };
        assert!(Lexicon::new(vec![c(0, "a", 50.0)]).is_err());
        assert!(Lexicon::new(vec![c(0, "a", 500.0), c(1, "a", 600.0)]).is_err());
        let lex = Lexicon::new(vec![c(0, "a", 500.0), c(1, "b", 600.0)]).unwrap();
        assert_eq!(lex.resolve(&["x", "b", "a", "b"]), vec![1, 0]);

        let mut buf = Vec::new();
        lex.write_jsonl(&mut buf).unwrap();
        assert_eq!(Lexicon::read_jsonl(&buf[..]).unwrap(), lex);
    }
}
