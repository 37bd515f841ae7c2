mod common;

use common::*;
use ith::fusion::FusionWeights;
use ith::imagination::{AudioEncoderConfig, AudioProjector, ToyAudioEncoder};
use ith::tensor::{Graph, ParamStore, Tensor};

#[test]
fn three_layer_mlp_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let inputs = vec![
            random_tensor(&mut r, 4, 3, 1.0),
            random_tensor(&mut r, 3, 5, 1.0),
            Tensor::new(vec![5], random_tensor(&mut r, 1, 5, 0.5).into_data()).unwrap(),
            random_tensor(&mut r, 5, 4, 1.0),
            Tensor::new(vec![4], random_tensor(&mut r, 1, 4, 0.5).into_data()).unwrap(),
            random_tensor(&mut r, 4, 2, 1.0),
        ];
        let err = gradcheck_with(&inputs, 1e-4, |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let h = g.tanh(h);
            let h = g.matmul(h, v[3]).unwrap();
            let h = g.add_row(h, v[4]).unwrap();
            let h = g.sigmoid(h);
            let o = g.matmul(h, v[5]).unwrap();
            g.cross_entropy(o, &[0, 1, 1, 0]).unwrap()
        });
        assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn fusion_ffn_matches_finite_differences() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let w = FusionWeights::new(&mut store, 4, 2, 6, true, &mut rng(seed));
        let mut r = rng(50 + seed);
        let z = random_tensor(&mut r, 3, 4, 1.0);
        let probe_w = random_tensor(&mut r, 3, 4, 1.0);
        let ids = [w.ffn.up.w, w.ffn.up.b, w.ffn.down.w, w.ffn.down.b];
        let err = param_gradcheck(&mut store, &ids, |s| {
            let mut g = Graph::new();
            let zv = g.leaf(z.clone());
            let y = w.ffn.forward(&mut g, s, zv).unwrap();
            let l = probe(&mut g, y, &probe_w);
            (g, l)
        });
        assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn audio_projector_matches_finite_differences() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cfg = AudioEncoderConfig {
            patch_frames: 2,
            d_audio: 6,
            n_heads: 2,
            ffn_hidden: 8,
            t_audio: 3,
            ..AudioEncoderConfig::default()
        };
        let enc = ToyAudioEncoder::new(&mut store, cfg, 5, &mut r).unwrap();
        let proj = AudioProjector::new(&mut store, 6, 4, &mut r);
        let mel = random_mel(&mut r, 12, 5);
        let probe_w = random_tensor(&mut r, 3, 4, 1.0);
        let ids = [proj.l1.w, proj.l1.b, proj.l2.w, proj.l2.b];
        let err = param_gradcheck(&mut store, &ids, |s| {
            let mut g = Graph::new();
            let h = enc.forward(&mut g, s, &[&mel]).unwrap();
            let y = proj.forward(&mut g, s, h).unwrap();
            let l = probe(&mut g, y, &probe_w);
            (g, l)
        });
        assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
    }
}
