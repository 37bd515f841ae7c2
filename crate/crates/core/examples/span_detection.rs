//! Train the span detector on the synthetic pitch data and tag a few sentences.

use ith::bench::{prepare, BenchConfig};

fn main() -> ith::Result<()> {
    let cfg = BenchConfig {
        n_train: 800,
        ..BenchConfig::default()
    };
    let prep = prepare(&cfg)?;
    println!("dev token F1 {:.4}", prep.detector_dev_f1);
    for e in prep.splits.unseen.iter().take(4) {
        let spans = prep.detector.detect_spans(&prep.vocab.encode(&e.tokens))?;
        let tagged: Vec<String> = e
            .tokens
            .iter()
            .enumerate()
            .map(|(i, w)| {
                if spans.iter().any(|s| s.contains(i)) {
                    format!("[{w}]")
                } else {
                    w.clone()
                }
            })
            .collect();
        println!("{}", tagged.join(" "));
    }
    Ok(())
}
