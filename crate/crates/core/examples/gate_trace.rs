//! Train a model, then print the mean fusion gate per token for one sentence.

use ith::bench::pipeline::Frozen;
use ith::bench::{prepare, train_and_evaluate, BenchConfig};

fn main() -> ith::Result<()> {
    let cfg = BenchConfig {
        epochs: 6,
        ..BenchConfig::default()
    };
    let prep = prepare(&cfg)?;
    let model = train_and_evaluate(&prep, &cfg)?.model;
    let frozen = Frozen::new(&cfg, &prep.lexicon)?;
    let imaginer = frozen.imaginer(&prep.detector, cfg.rejection_config())?;
    let words = &prep.splits.test[0].tokens;
    let tokens = prep.vocab.encode(words);
    let imagination = imaginer.imagine(words, &tokens, 0)?;
    let trace = model.gate_trace(&tokens, &imagination)?;
    for (w, g) in words.iter().zip(&trace.0) {
        println!("{w:>12} {g:.4} {}", "#".repeat((g * 40.0).round() as usize));
    }
    Ok(())
}
