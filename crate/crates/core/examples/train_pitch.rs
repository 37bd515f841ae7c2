//! One end-to-end training run on the pitch task, with and without imagination.
//! Takes about a minute per model on one core.

use ith::bench::{run, BenchConfig};

fn main() -> ith::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    for imagination in [false, true] {
        let cfg = BenchConfig {
            seed,
            imagination,
            ..BenchConfig::default()
        };
        let out = run(&cfg)?;
        let accs: Vec<String> = out.accuracy.iter().map(|(s, a)| format!("{s} {a:.3}")).collect();
        println!("imagination={imagination}: {}", accs.join(", "));
    }
    Ok(())
}
