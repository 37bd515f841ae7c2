//! Retention and clip quality of a noisy generator under different thresholds.

use std::collections::HashSet;

use ith::alignment::{sample_with_rejection, RejectionConfig, SpectralScorer};
use ith::audio::{GeneratorConfig, GeneratorMode, Lexicon, MelConfig, MelFrontEnd, MockGenerator};
use ith::rng::stream;

fn main() -> ith::Result<()> {
    let mel = MelConfig::default();
    let lexicon = Lexicon::generate(8, 0, &mel, &HashSet::new(), 0.0, &mut stream(1, &[]))?;
    let generator = MockGenerator::new(
        &lexicon,
        GeneratorConfig {
            mode: GeneratorMode::Noisy,
            wrong_concept_prob: 0.3,
            additive_noise_std: 0.05,
            ..GeneratorConfig::default()
        },
    )?;
    let scorer = SpectralScorer::new(&lexicon, mel.clone(), 1.0)?;
    let front = MelFrontEnd::new(mel.clone())?;
    println!("  tau  n  retention  correct-among-accepted");
    for (tau, n) in [(-1.0, 1), (0.6, 1), (0.6, 2), (0.6, 3), (0.9, 3)] {
        let cfg = RejectionConfig { tau, max_trials: n };
        let (mut kept, mut right, total) = (0, 0, 400);
        for i in 0..total {
            let c = &lexicon.concepts()[i % lexicon.len()];
            let out = sample_with_rejection(&c.tokens, &generator, &scorer, &cfg, &mut stream(2, &[i as u64]))?;
            if let ith::alignment::RejectionOutcome::Accepted { clip, .. } = out {
                kept += 1;
                right += (front.compute(&clip)?.dominant_bin() == mel.bin_of_hz(c.frequency_hz)) as usize;
            }
        }
        println!(
            "{tau:5.1} {n:2}  {:9.3}  {:.3}",
            kept as f64 / total as f64,
            right as f64 / kept.max(1) as f64
        );
    }
    Ok(())
}
