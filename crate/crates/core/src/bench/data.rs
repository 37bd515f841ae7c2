use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{ConceptId, Lexicon, MelConfig};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::spandet::{spans_to_labels, LabeledSeq, Span};
use crate::text::{Vocab, CLS, MASK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Is the first-named source higher or lower than the second?
    #[default]
    Pitch,
    /// Which source is named?
    Recognition,
}

impl Task {
    pub fn n_classes(self, lexicon: &Lexicon) -> usize {
        match self {
            Task::Pitch => 2,
            Task::Recognition => lexicon.len(),
        }
    }
}

pub const HIGHER: usize = 0;
pub const LOWER: usize = 1;

/// One benchmark item as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchExample {
    pub task: Task,
    /// Whitespace tokens, starting with `[CLS]`.
    pub tokens: Vec<String>,
    /// Gold audio-related spans, inclusive.
    pub spans: Vec<Span>,
    pub label: usize,
    /// Concepts named, subject first.
    pub concepts: Vec<ConceptId>,
}

impl BenchExample {
    pub fn labeled(&self, vocab: &Vocab) -> Result<LabeledSeq> {
        Ok(LabeledSeq {
            tokens: vocab.encode(&self.tokens),
            labels: spans_to_labels(&self.spans, self.tokens.len())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchSplits {
    pub train: Vec<BenchExample>,
    pub dev: Vec<BenchExample>,
    pub test: Vec<BenchExample>,
    /// Only concepts never seen in training; empty for recognition.
    pub unseen: Vec<BenchExample>,
}

impl BenchSplits {
    pub fn named(&self) -> [(&'static str, &[BenchExample]); 4] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
            ("unseen", &self.unseen),
        ]
    }

    /// Vocabulary over the training split only; unseen words map to `[UNK]`.
    pub fn vocab(&self) -> Vocab {
        Vocab::build(self.train.iter().map(|e| e.tokens.as_slice()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: Task,
    pub n_concepts: usize,
    pub n_unseen_concepts: usize,
    pub two_token_prob: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_unseen: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Pitch,
            n_concepts: 12,
            n_unseen_concepts: 4,
            two_token_prob: 0.3,
            n_train: 2000,
            n_dev: 300,
            n_test: 300,
            n_unseen: 300,
        }
    }
}

const ADJECTIVES: &[&str] = &[
    "small", "old", "distant", "wooden", "red", "tiny", "heavy", "bright", "quiet", "loud",
];
const FILLERS: &[&str] = &[
    "today",
    "outside",
    "again",
    "here",
    "nearby",
    "tonight",
    "indoors",
    "downstairs",
];
const FUNCTION_WORDS: &[&str] = &[
    "the", "sound", "of", "is", "than", "compared", "with", "sounds", "in", "pitch", ",", "higher", "or", "lower", "?",
    "makes", "a", "relative", "to", "which", "source", "i", "hear", "noise", "came", "from", "what", "thing", "that",
    "produces", "tone", "listen", "for",
];

enum Slot {
    Word(&'static str),
    A,
    B,
    Adjective,
    Filler,
}

use Slot::{Adjective as Adj, Filler as Fil, Word as W, A, B};

fn pitch_templates() -> Vec<Vec<Slot>> {
    vec![
        vec![
            W("the"),
            W("sound"),
            W("of"),
            A,
            W("is"),
            W(MASK),
            W("than"),
            W("the"),
            W("sound"),
            W("of"),
            B,
        ],
        vec![
            W("compared"),
            W("with"),
            W("the"),
            Adj,
            B,
            W(","),
            A,
            W("sounds"),
            W(MASK),
            W("in"),
            W("pitch"),
        ],
        vec![
            W("is"),
            W("the"),
            Adj,
            A,
            W("higher"),
            W("or"),
            W("lower"),
            W("than"),
            W("the"),
            B,
            W("?"),
        ],
        vec![
            W("the"),
            A,
            Fil,
            W("makes"),
            W("a"),
            W(MASK),
            W("sound"),
            W("than"),
            W("the"),
            Adj,
            B,
        ],
        vec![
            W("relative"),
            W("to"),
            W("the"),
            B,
            Fil,
            W(","),
            W("the"),
            W("pitch"),
            W("of"),
            A,
            W("is"),
            W(MASK),
        ],
    ]
}

fn recognition_templates() -> Vec<Vec<Slot>> {
    vec![
        vec![
            W("which"),
            W("source"),
            W("makes"),
            W("the"),
            W("sound"),
            W("of"),
            W("the"),
            A,
            W("?"),
        ],
        vec![W("i"), W("hear"), W("a"), Adj, A, Fil],
        vec![W("the"), W("noise"), W("came"), W("from"), W("the"), A, Fil],
        vec![
            W("what"),
            W("thing"),
            W("produces"),
            W("the"),
            W("tone"),
            W("of"),
            W("a"),
            Adj,
            A,
            W("?"),
        ],
        vec![W("listen"), W("for"), W("the"), A, W(MASK)],
    ]
}

fn render(
    template: &[Slot],
    lex: &Lexicon,
    a: ConceptId,
    b: Option<ConceptId>,
    rng: &mut SeededRng,
) -> Result<(Vec<String>, Vec<Span>, Vec<ConceptId>)> {
    let mut tokens = vec![CLS.to_string()];
    let mut spans = Vec::new();
    for slot in template {
        match slot {
            W(w) => tokens.push(w.to_string()),
            Adj => {
                if rng.random_bool(0.5) {
                    tokens.push(ADJECTIVES[rng.random_range(0..ADJECTIVES.len())].to_string());
                }
            }
            Fil => {
                if rng.random_bool(0.5) {
                    tokens.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
                }
            }
            A | B => {
                let id = match slot {
                    A => a,
                    _ => b.ok_or_else(|| Error::Contract("template needs a second concept".into()))?,
                };
                let start = tokens.len();
                tokens.extend(lex.get(id)?.tokens.iter().cloned());
                spans.push(Span::new(start, tokens.len() - 1)?);
            }
        }
    }
    let concepts = std::iter::once(a).chain(b).collect();
    Ok((tokens, spans, concepts))
}

fn reserved_words() -> HashSet<String> {
    ADJECTIVES
        .iter()
        .chain(FILLERS)
        .chain(FUNCTION_WORDS)
        .map(|s| s.to_string())
        .collect()
}

/// Pitch items over `pool`, with exactly balanced labels (odd counts give
/// one extra `HIGHER`).
fn pitch_split(n: usize, pool: &[ConceptId], lex: &Lexicon, rng: &mut SeededRng) -> Result<Vec<BenchExample>> {
    let templates = pitch_templates();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { HIGHER } else { LOWER };
        let mut pair: Vec<ConceptId> = pool.choose_multiple(rng, 2).copied().collect();
        let (fa, fb) = (lex.get(pair[0])?.frequency_hz, lex.get(pair[1])?.frequency_hz);
        if (fa > fb) != (label == HIGHER) {
            pair.swap(0, 1);
        }
        let t = &templates[rng.random_range(0..templates.len())];
        let (tokens, spans, concepts) = render(t, lex, pair[0], Some(pair[1]), rng)?;
        out.push(BenchExample {
            task: Task::Pitch,
            tokens,
            spans,
            label,
            concepts,
        });
    }
    out.shuffle(rng);
    Ok(out)
}

/// Recognition items cycling through `pool` so classes are balanced.
fn recognition_split(n: usize, pool: &[ConceptId], lex: &Lexicon, rng: &mut SeededRng) -> Result<Vec<BenchExample>> {
    let templates = recognition_templates();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = pool[i % pool.len()];
        let t = &templates[rng.random_range(0..templates.len())];
        let (tokens, spans, concepts) = render(t, lex, a, None, rng)?;
        out.push(BenchExample {
            task: Task::Recognition,
            tokens,
            spans,
            label: a,
            concepts,
        });
    }
    out.shuffle(rng);
    Ok(out)
}

/// Lexicon plus train/dev/test splits over seen concepts and an unseen-concept
/// split (pitch only).
pub fn gen_benchmark(cfg: &DataConfig, mel: &MelConfig, rng: &mut SeededRng) -> Result<(BenchSplits, Lexicon)> {
    if cfg.n_concepts < 8 {
        return Err(Error::Config(format!(
            "need at least 8 concepts, got {}",
            cfg.n_concepts
        )));
    }
    if cfg.n_concepts < cfg.n_unseen_concepts + 2
        || (cfg.task == Task::Pitch && cfg.n_unseen_concepts < 2 && cfg.n_unseen > 0)
    {
        return Err(Error::Config(format!(
            "{} concepts cannot hold {} unseen ones and a seen pair",
            cfg.n_concepts, cfg.n_unseen_concepts
        )));
    }
    if cfg.n_train == 0 || cfg.n_dev == 0 || cfg.n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let lex = Lexicon::generate(
        cfg.n_concepts,
        cfg.n_unseen_concepts,
        mel,
        &reserved_words(),
        cfg.two_token_prob,
        rng,
    )?;
    let seen = lex.train_ids();
    let unseen = lex.unseen_ids();
    let splits = match cfg.task {
        Task::Pitch => BenchSplits {
            train: pitch_split(cfg.n_train, &seen, &lex, rng)?,
            dev: pitch_split(cfg.n_dev, &seen, &lex, rng)?,
            test: pitch_split(cfg.n_test, &seen, &lex, rng)?,
            unseen: pitch_split(cfg.n_unseen, &unseen, &lex, rng)?,
        },
        Task::Recognition => BenchSplits {
            train: recognition_split(cfg.n_train, &seen, &lex, rng)?,
            dev: recognition_split(cfg.n_dev, &seen, &lex, rng)?,
            test: recognition_split(cfg.n_test, &seen, &lex, rng)?,
            unseen: Vec::new(),
        },
    };
    Ok((splits, lex))
}

pub fn write_examples<W: Write>(mut w: W, examples: &[BenchExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<BenchExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: BenchExample = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if e.tokens.is_empty() || e.spans.iter().any(|s| s.start > s.end || s.end >= e.tokens.len()) {
            return Err(Error::Parse(format!("line {}: span outside tokens", i + 1)));
        }
        out.push(e);
    }
    Ok(out)
}
