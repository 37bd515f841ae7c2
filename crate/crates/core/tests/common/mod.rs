#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ith::audio::MelSpectrogram;
use ith::imagination::{Imagination, ImaginedClip, SpanImagination, SpanStatus};
use ith::spandet::Span;
use ith::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients and central
/// differences of `f` with respect to every element of every input. `f` maps
/// leaf variables to a scalar.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    gradcheck_with(inputs, FD_STEP, f)
}

pub fn gradcheck_with<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same check against parameters held in a store: every coordinate of each
/// parameter in `ids` is perturbed. `loss` builds a fresh graph from the store.
pub fn param_gradcheck<F>(store: &mut ParamStore, ids: &[ParamId], loss: F) -> f64
where
    F: Fn(&ParamStore) -> (Graph, Var),
{
    let (g, l) = loss(store);
    let grads = g.backward(l).unwrap().params();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = &grads
            .iter()
            .find(|(p, _)| *p == id)
            .expect("parameter used by the loss")
            .1;
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let (g, l) = loss(store);
            let up = g.value(l).item();
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let (g, l) = loss(store);
            let down = g.value(l).item();
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Scalar probe `sum(y ⊙ r)` with a fixed random `r`, so every output element
/// contributes a distinct weight.
pub fn probe(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let rv = g.leaf(r.clone());
    let p = g.mul(y, rv).unwrap();
    g.sum(p)
}

pub fn random_mel(rng: &mut impl Rng, frames: usize, n_mels: usize) -> MelSpectrogram {
    MelSpectrogram {
        values: random_tensor(rng, frames, n_mels, 3.0),
        frame_hop_samples: 160,
        mel_low_hz: 0.0,
        mel_high_hz: 8000.0,
    }
}

static NEXT_KEY: AtomicU64 = AtomicU64::new(1 << 40);

/// Imagination with one accepted clip per span; every clip gets a fresh key.
pub fn accepted(spans: &[(Span, MelSpectrogram)]) -> Imagination {
    Imagination {
        spans: spans
            .iter()
            .enumerate()
            .map(|(i, (s, mel))| SpanImagination {
                span: *s,
                words: vec![format!("w{i}")],
                status: SpanStatus::Accepted,
                trial_scores: vec![1.0],
                clip: Some(Arc::new(ImaginedClip {
                    key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
                    mel: mel.clone(),
                    waveform: None,
                })),
            })
            .collect(),
    }
}

pub fn span(a: usize, b: usize) -> Span {
    Span::new(a, b).unwrap()
}
