mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use ith::alignment::{RejectionConfig, SpanScorer};
use ith::audio::{mel_argmax, AudioGenerator, GeneratorMode, Waveform};
use ith::bench::pipeline::{prepare, Frozen, Prepared};
use ith::bench::{BenchConfig, BenchExample, Task};
use ith::encoder::IthModel;
use ith::imagination::{Imagination, Imaginer, SpanStatus};
use ith::rng::SeededRng;
use ith::spandet::Span;

fn prep(task: Task) -> Prepared {
    prepare(&BenchConfig {
        task,
        seed: 21,
        n_train: 600,
        n_dev: 50,
        n_test: 50,
        n_unseen: 50,
        ..BenchConfig::default()
    })
    .unwrap()
}

fn bin_of(p: &Prepared, concept: usize) -> usize {
    p.cfg
        .mel_config()
        .bin_of_hz(p.lexicon.get(concept).unwrap().frequency_hz)
}

/// Local maxima of a clip's time-averaged mel energy, strongest first.
fn peaks(im: &Imagination, span: usize) -> Vec<usize> {
    let e = im.spans[span].clip.as_ref().unwrap().mel.mean_energy();
    let mut p: Vec<usize> = (0..e.len())
        .filter(|&i| (i == 0 || e[i] > e[i - 1]) && (i + 1 == e.len() || e[i] > e[i + 1]))
        .collect();
    p.sort_by(|&a, &b| e[b].total_cmp(&e[a]));
    p
}

fn two_span_example(p: &Prepared) -> &BenchExample {
    p.splits.test.iter().find(|e| e.spans.len() == 2).unwrap()
}

#[test]
fn two_spans_get_distinct_dominant_bins() {
    let p = prep(Task::Pitch);
    let frozen = Frozen::new(&p.cfg, &p.lexicon).unwrap();
    let im = frozen.imaginer(&p.detector, RejectionConfig::disabled()).unwrap();
    let e = two_span_example(&p);
    let out = im.imagine(&e.tokens, &p.vocab.encode(&e.tokens), 3).unwrap();
    assert_eq!(out.spans.iter().map(|s| s.span).collect::<Vec<_>>(), e.spans);
    assert!(out
        .spans
        .iter()
        .all(|s| s.status == SpanStatus::Accepted && s.trial_scores.len() == 1));
    // gold spans are in text order while concepts are subject first
    let mut bins: Vec<usize> = out
        .spans
        .iter()
        .map(|s| s.clip.as_ref().unwrap().mel.dominant_bin())
        .collect();
    let mut want: Vec<usize> = e.concepts.iter().map(|&c| bin_of(&p, c)).collect();
    assert_ne!(bins[0], bins[1]);
    bins.sort();
    want.sort();
    assert_eq!(bins, want);
    assert_eq!(out, im.imagine(&e.tokens, &p.vocab.encode(&e.tokens), 3).unwrap());
}

#[test]
fn no_spans_means_text_only_forward() {
    let p = prep(Task::Pitch);
    let frozen = Frozen::new(&p.cfg, &p.lexicon).unwrap();
    let im = frozen.imaginer(&p.detector, p.cfg.rejection_config()).unwrap();
    let words: Vec<String> = ["[CLS]", "is", "the", "sound", "higher", "or", "lower", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let tokens = p.vocab.encode(&words);
    let out = im.imagine(&words, &tokens, 0).unwrap();
    assert!(
        out.spans.is_empty(),
        "{:?}",
        out.spans.iter().map(|s| s.span).collect::<Vec<_>>()
    );
    let model = IthModel::new(p.cfg.model_config(p.vocab.len(), 2), 1).unwrap();
    let a = model.forward(&tokens, &out).unwrap();
    let b = model.forward(&tokens, &Imagination::default()).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

struct Never;

impl SpanScorer for Never {
    fn score(&self, _: &[String], _: &Waveform) -> ith::Result<f64> {
        Ok(-0.5)
    }
}

struct Counting<'a>(&'a dyn AudioGenerator, AtomicUsize);

impl AudioGenerator for Counting<'_> {
    fn generate(&self, words: &[String], rng: &mut SeededRng) -> ith::Result<Waveform> {
        self.1.fetch_add(1, Ordering::Relaxed);
        self.0.generate(words, rng)
    }
}

#[test]
fn never_accepting_scorer_ignores_every_span() {
    let p = prep(Task::Pitch);
    let frozen = Frozen::new(&p.cfg, &p.lexicon).unwrap();
    let gen = Counting(&frozen.generator, AtomicUsize::new(0));
    let rej = RejectionConfig {
        tau: 0.6,
        max_trials: 3,
    };
    let im = Imaginer::new(&p.detector, &gen, &Never, &frozen.front, rej).unwrap();
    let e = two_span_example(&p);
    let out = im.imagine_spans(&e.tokens, &e.spans, 5).unwrap();
    assert_eq!(out.spans.len(), 2);
    for s in &out.spans {
        assert_eq!(s.status, SpanStatus::Ignored);
        assert_eq!(s.trial_scores, vec![-0.5; 3]);
        assert!(s.clip.is_none());
    }
    assert_eq!(out.generator_calls(), 6);
    assert_eq!(gen.1.load(Ordering::Relaxed), 6);
}

#[test]
fn sentence_level_clip_mixes_both_tones() {
    let p = prep(Task::Pitch);
    let frozen = Frozen::new(&p.cfg, &p.lexicon).unwrap();
    let sentence = frozen.generator.with_mode(GeneratorMode::SentenceLevel);
    let im = Imaginer::new(
        &p.detector,
        &sentence,
        &frozen.scorer,
        &frozen.front,
        RejectionConfig::disabled(),
    )
    .unwrap();
    let e = two_span_example(&p);
    let out = im.imagine_sentence_level(&e.tokens, 2).unwrap();
    assert_eq!(out.spans.len(), 1);
    assert_eq!(out.spans[0].span, Span::new(0, e.tokens.len() - 1).unwrap());
    let mut top: Vec<usize> = peaks(&out, 0)[..2].to_vec();
    let mut want: Vec<usize> = e.concepts.iter().map(|&c| bin_of(&p, c)).collect();
    top.sort();
    want.sort();
    assert_eq!(top, want);
}

#[test]
fn sentence_level_recognition_matches_span_level_source() {
    let p = prep(Task::Recognition);
    let frozen = Frozen::new(&p.cfg, &p.lexicon).unwrap();
    let sentence = frozen.generator.with_mode(GeneratorMode::SentenceLevel);
    let rej = RejectionConfig::disabled();
    let whole = Imaginer::new(&p.detector, &sentence, &frozen.scorer, &frozen.front, rej).unwrap();
    let spans = frozen.imaginer(&p.detector, rej).unwrap();
    let e = &p.splits.test[0];
    assert_eq!(e.spans.len(), 1);
    let a = whole.imagine_sentence_level(&e.tokens, 4).unwrap();
    let b = spans.imagine_spans(&e.tokens, &e.spans, 4).unwrap();
    let bin = |im: &Imagination| mel_argmax(&im.spans[0].clip.as_ref().unwrap().mel.mean_energy());
    assert_eq!(bin(&a), bin_of(&p, e.concepts[0]));
    assert_eq!(bin(&a), bin(&b));
}
