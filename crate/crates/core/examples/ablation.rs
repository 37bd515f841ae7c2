//! Ablation grid and threshold sweep over three seeds with a noisy generator.
//! Uses the full-size benchmark, so expect 10-15 minutes on one core. Set
//! ITH_THREADS to cap parallel seeds.

use ith::audio::{GeneratorConfig, GeneratorMode};
use ith::bench::ablation::{run_ablation, Variant};
use ith::bench::BenchConfig;

fn main() -> ith::Result<()> {
    let cfg = BenchConfig {
        generator: GeneratorConfig {
            mode: GeneratorMode::Noisy,
            wrong_concept_prob: 0.3,
            ..GeneratorConfig::default()
        },
        ..BenchConfig::default()
    };
    let report = run_ablation(&cfg, &[0, 1, 2])?;
    for v in Variant::ALL {
        if let Some(c) = report.cell(v, "unseen") {
            println!("{:16} unseen {:.3} +- {:.3}", v.name(), c.mean, c.std);
        }
    }
    println!("tau  n  unseen-accuracy  retention");
    for r in report.sweep.iter().filter(|r| r.seed.is_none() && r.split == "unseen") {
        println!("{:4} {} {:.3} {:.3}", r.tau, r.max_trials, r.accuracy, r.retention);
    }
    println!("dev-tuned tau: {:?}", report.tuned_tau);
    Ok(())
}
