//! The language model (embeddings, fusion, transformer stack, classifier on
//! position 0) and its end-to-end training loop.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusedSpan, FusionWeights, GateTrace};
use crate::imagination::{AudioEncoderConfig, AudioProjector, Imagination, ImaginedClip, ToyAudioEncoder};
use crate::nn::{Linear, TransformerStack};
use crate::rng::{stream, SeededRng};
use crate::spandet::unk_dropout;
use crate::tensor::{AdamW, Checkpoint, Graph, ParamId, ParamStore, ParamTag, Tensor, Var};
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub n_mels: usize,
    pub fusion_heads: usize,
    pub fusion_hidden: usize,
    /// `false` replaces the gate by `z_fused = z_ffn`.
    pub fusion_gate: bool,
    pub audio: AudioEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            n_classes: 2,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
            max_len: 32,
            n_mels: 32,
            fusion_heads: 4,
            fusion_hidden: 128,
            fusion_gate: true,
            audio: AudioEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_classes < 2 || self.max_len == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        for h in [self.n_heads, self.fusion_heads] {
            if h == 0 || !self.d_model.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {h} heads",
                    self.d_model
                )));
            }
        }
        self.audio.validate()
    }
}

/// One training or evaluation item: token ids, class label and the frozen
/// imagination output for the text.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: TokenSeq,
    pub label: usize,
    pub imagination: Imagination,
}

/// Language model with fusion and the trainable audio tower.
#[derive(Clone, Debug)]
pub struct IthModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    pub fusion: FusionWeights,
    stack: TransformerStack,
    classifier: Linear,
    pub audio: ToyAudioEncoder,
    pub projector: AudioProjector,
}

/// Result of a batched forward pass.
pub struct BatchForward {
    /// `B × n_classes`.
    pub logits: Var,
    pub traces: Vec<GateTrace>,
}

impl IthModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lm = ParamTag::LanguageEncoder;
        let d = cfg.d_model;
        let tok = store.add_normal("lm.tok", lm, cfg.vocab_size, d, 0.1, &mut rng);
        let pos = store.add_normal("lm.pos", lm, cfg.max_len, d, 0.1, &mut rng);
        let fusion = FusionWeights::new(
            &mut store,
            d,
            cfg.fusion_heads,
            cfg.fusion_hidden,
            cfg.fusion_gate,
            &mut rng,
        );
        let stack = TransformerStack::new(
            &mut store,
            "lm.enc",
            lm,
            d,
            cfg.n_heads,
            cfg.ffn_hidden,
            cfg.n_layers,
            &mut rng,
        );
        let classifier = Linear::new(&mut store, "lm.cls", lm, d, cfg.n_classes, &mut rng);
        let audio = ToyAudioEncoder::new(&mut store, cfg.audio.clone(), cfg.n_mels, &mut rng)?;
        let projector = AudioProjector::new(&mut store, cfg.audio.d_audio, d, &mut rng);
        Ok(Self {
            cfg,
            store,
            tok,
            pos,
            fusion,
            stack,
            classifier,
            audio,
            projector,
        })
    }

    pub fn from_checkpoint(cfg: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.store.load(ckpt)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint(None)
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens outside 1..={}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                len: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Packed forward over a batch. Each distinct clip is encoded once.
    pub fn forward_batch(&self, g: &mut Graph, batch: &[(&[usize], &Imagination)]) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        let mut offsets = Vec::with_capacity(batch.len());
        let mut clips: Vec<&ImaginedClip> = Vec::new();
        let mut clip_index: HashMap<u64, usize> = HashMap::new();
        let mut spans = Vec::new();
        let t_a = self.cfg.audio.t_audio;
        for (seq, im) in batch {
            self.check(seq)?;
            let off = ids.len();
            offsets.push(off);
            lengths.push(seq.len());
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
            for (span, clip) in im.accepted() {
                if span.end >= seq.len() {
                    return Err(Error::Contract(format!("span {span:?} outside {} tokens", seq.len())));
                }
                let k = *clip_index.entry(clip.key).or_insert_with(|| {
                    clips.push(clip);
                    clips.len() - 1
                });
                spans.push(FusedSpan {
                    rows: span.indices().map(|i| off + i).collect(),
                    audio_start: k * t_a,
                    audio_len: t_a,
                });
            }
        }
        let tok = g.param(&self.store, self.tok);
        let pos = g.param(&self.store, self.pos);
        let te = g.gather_rows(tok, &ids)?;
        let pe = g.gather_rows(pos, &positions)?;
        let x = g.add(te, pe)?;
        let audio = if clips.is_empty() {
            None
        } else {
            let mels: Vec<_> = clips.iter().map(|c| &c.mel).collect();
            let h = self.audio.forward(g, &self.store, &mels)?;
            Some(self.projector.forward(g, &self.store, h)?)
        };
        let fused = self.fusion.forward(g, &self.store, x, audio, &spans)?;
        let traces = offsets
            .iter()
            .zip(&lengths)
            .map(|(&o, &l)| fused.trace(g, o, l))
            .collect();
        let h = self.stack.forward(g, &self.store, fused.out, &lengths)?;
        let cls = g.gather_rows(h, &offsets)?;
        let logits = self.classifier.forward(g, &self.store, cls)?;
        Ok(BatchForward { logits, traces })
    }

    /// Class logits for one text.
    pub fn forward(&self, x: &TokenSeq, imagination: &Imagination) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, &[(x.ids(), imagination)])?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn gate_trace(&self, x: &TokenSeq, imagination: &Imagination) -> Result<GateTrace> {
        let mut g = Graph::new();
        let mut out = self.forward_batch(&mut g, &[(x.ids(), imagination)])?;
        Ok(out.traces.pop().expect("one example"))
    }
}

/// Loss and accuracy of one split at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_loss_curve<W: Write>(mut w: W, records: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,split,loss,accuracy")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|r| crate::audio::mel_argmax(t.row(r))).collect()
}

/// Mean cross-entropy, accuracy and argmax predictions over `data`.
pub fn evaluate_model(model: &IthModel, data: &[Example]) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for chunk in data.chunks(64) {
        let mut g = Graph::new();
        let batch: Vec<_> = chunk.iter().map(|e| (e.tokens.ids(), &e.imagination)).collect();
        let out = model.forward_batch(&mut g, &batch)?;
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let l = g.cross_entropy(out.logits, &labels)?;
        loss += g.value(l).item() * chunk.len() as f64;
        predictions.extend(argmax_rows(g.value(out.logits)));
    }
    let correct = predictions.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(EvalSummary {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
    })
}

/// Trains every trainable parameter of `model` on `train`; records the mean
/// training loss and accuracy per epoch, plus dev metrics when given.
pub fn train_end_to_end(
    model: &mut IthModel,
    train: &[Example],
    dev: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.adamw(), &model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, &[0xe2e, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let ids: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| unk_dropout(train[i].tokens.ids(), cfg.unk_prob, &mut rng))
                .collect();
            let shifted: Vec<Option<Imagination>> = batch
                .iter()
                .map(|&i| {
                    (cfg.freq_shift > 0).then(|| {
                        let k = cfg.freq_shift as i64;
                        train[i].imagination.shift_mels(rng.random_range(-k..=k) as isize)
                    })
                })
                .collect();
            let inputs: Vec<_> = batch
                .iter()
                .zip(&ids)
                .zip(&shifted)
                .map(|((&i, t), s)| (&t[..], s.as_ref().unwrap_or(&train[i].imagination)))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let out = model.forward_batch(&mut g, &inputs)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            loss_sum += g.value(loss).item() * batch.len() as f64;
            correct += argmax_rows(g.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads.params());
        }
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
        if let Some(dev) = dev.filter(|d| !d.is_empty()) {
            let s = evaluate_model(model, dev)?;
            records.push(EpochRecord {
                epoch,
                split: "dev".into(),
                loss: s.loss,
                accuracy: s.accuracy,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn logits_shape_and_errors() {
        let m = IthModel::new(cfg(), 0).unwrap();
        let x = TokenSeq(vec![1, 5, 6, 7]);
        assert_eq!(m.forward(&x, &Imagination::default()).unwrap().len(), 2);
        let long = TokenSeq(vec![4; 33]);
        assert!(matches!(
            m.forward(&long, &Imagination::default()),
            Err(Error::Contract(_))
        ));
        let trace = m.gate_trace(&x, &Imagination::default()).unwrap();
        assert_eq!(trace.0, vec![1.0; 4]);
    }

    #[test]
    fn all_params_trainable() {
        let m = IthModel::new(cfg(), 0).unwrap();
        assert!(m.store.ids().all(|id| m.store.tag(id).trainable()));
    }
}
