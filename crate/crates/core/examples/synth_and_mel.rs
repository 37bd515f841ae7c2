//! Synthesize a tone per concept, write it as WAV and locate its mel peak.

use ith::audio::{write_wav, AudioGenerator, Concept, GeneratorConfig, Lexicon, MelConfig, MelFrontEnd, MockGenerator};
use ith::rng::stream;

fn main() -> ith::Result<()> {
    let concept = |id, tok: &str, hz| Concept {
        id,
        tokens: vec![tok.to_string()],
        frequency_hz: hz,
        timbre_seed: 100 + id as u64,
        unseen: false,
    };
    let lexicon = Lexicon::new(vec![
        concept(0, "kettle", 440.0),
        concept(1, "drum", 120.0),
        concept(2, "whistle", 2500.0),
    ])?;
    let generator = MockGenerator::new(&lexicon, GeneratorConfig::default())?;
    let mel = MelConfig::default();
    let front = MelFrontEnd::new(mel.clone())?;
    let dir = std::env::temp_dir();
    for c in lexicon.concepts() {
        let wave = generator.generate(&c.tokens, &mut stream(0, &[c.id as u64]))?;
        let spec = front.compute(&wave)?;
        let path = dir.join(format!("{}.wav", c.tokens[0]));
        write_wav(&path, &wave)?;
        println!(
            "{:8} {:6.0} Hz -> mel bin {:2} (expected {:2}), {} frames, {}",
            c.tokens[0],
            c.frequency_hz,
            spec.dominant_bin(),
            mel.bin_of_hz(c.frequency_hz),
            spec.values.rows(),
            path.display()
        );
    }
    Ok(())
}
