//! Token-level audio-relatedness classifier and span grouping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerStack};
use crate::rng::{stream, SeededRng};
use crate::tensor::{sigmoid_scalar, AdamW, Checkpoint, Graph, ParamId, ParamStore, ParamTag, Var};
use crate::text::{TokenSeq, Vocab, UNK_ID};

/// Inclusive token range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Contract(format!("span start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Maximal runs of `true`, in order.
pub fn group_spans(labels: &[bool]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push(Span { start: s, end: i - 1 });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push(Span {
            start: s,
            end: labels.len() - 1,
        });
    }
    out
}

/// Inverse of [`group_spans`] for sorted, disjoint, non-adjacent spans.
pub fn spans_to_labels(spans: &[Span], len: usize) -> Result<Vec<bool>> {
    let mut labels = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Contract(format!("span {s:?} outside length {len}")));
        }
        for l in &mut labels[s.start..=s.end] {
            *l = true;
        }
    }
    Ok(labels)
}

/// Micro-averaged F1 over positive tokens. Two empty label sets agree
/// perfectly.
pub fn token_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape {
            op: "token_f1",
            lhs: vec![pred.len()],
            rhs: vec![gold.len()],
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Shape {
                op: "token_f1",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Token ids with gold per-token labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeq {
    pub tokens: TokenSeq,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 64,
            max_len: 32,
            threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || self.max_len == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("invalid detector shape {self:?}")));
        }
        Ok(())
    }
}

/// Embeddings, transformer stack and a per-token logistic head. All
/// parameters are tagged [`ParamTag::SpanDetector`].
#[derive(Clone, Debug)]
pub struct DetectorModel {
    cfg: DetectorConfig,
    vocab_size: usize,
    store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    stack: TransformerStack,
    head: Linear,
}

impl DetectorModel {
    pub fn new(vocab_size: usize, cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tag = ParamTag::SpanDetector;
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let tok = store.add_normal("det.tok", tag, vocab_size, d, 0.1, &mut rng);
        let pos = store.add_normal("det.pos", tag, cfg.max_len, d, 0.1, &mut rng);
        let stack = TransformerStack::new(
            &mut store,
            "det.enc",
            tag,
            d,
            cfg.n_heads,
            cfg.ffn_hidden,
            cfg.n_layers,
            &mut rng,
        );
        let head = Linear::new(&mut store, "det.head", tag, d, 1, &mut rng);
        // Small head so an untrained detector sits near 0.5.
        store.get_mut(head.w).data_mut().iter_mut().for_each(|w| *w *= 0.1);
        Ok(Self {
            cfg,
            vocab_size,
            store,
            tok,
            pos,
            stack,
            head,
        })
    }

    /// Rebuilds a detector and loads weights from `ckpt`.
    pub fn from_checkpoint(vocab_size: usize, cfg: DetectorConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(vocab_size, cfg, 0)?;
        m.store.load(ckpt)?;
        Ok(m)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint(None)
    }

    pub fn digest(&self) -> String {
        self.checkpoint().digest()
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                len: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Packed per-token logits, one row per token of every sequence.
    fn logits(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check(s)?;
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            lengths.push(s.len());
        }
        let tok = g.param(&self.store, self.tok);
        let pos = g.param(&self.store, self.pos);
        let te = g.gather_rows(tok, &ids)?;
        let pe = g.gather_rows(pos, &positions)?;
        let x = g.add(te, pe)?;
        let h = self.stack.forward(g, &self.store, x, &lengths)?;
        self.head.forward(g, &self.store, h)
    }

    /// Per-token probabilities of being audio-related.
    pub fn predict_labels(&self, x: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[x])?.pop().expect("one sequence"))
    }

    pub fn predict_batch(&self, xs: &[&TokenSeq]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let seqs: Vec<&[usize]> = xs.iter().map(|x| x.ids()).collect();
        let z = self.logits(&mut g, &seqs)?;
        let z = g.value(z).data();
        let mut out = Vec::with_capacity(xs.len());
        let mut at = 0;
        for s in &seqs {
            out.push(z[at..at + s.len()].iter().map(|&v| sigmoid_scalar(v)).collect());
            at += s.len();
        }
        Ok(out)
    }

    /// Labels at the model's threshold.
    pub fn classify(&self, x: &TokenSeq) -> Result<Vec<bool>> {
        Ok(self
            .predict_labels(x)?
            .into_iter()
            .map(|p| p >= self.cfg.threshold)
            .collect())
    }

    pub fn detect_spans(&self, x: &TokenSeq) -> Result<Vec<Span>> {
        Ok(group_spans(&self.classify(x)?))
    }

    /// Mean per-token binary cross-entropy over `data`.
    pub fn mean_loss(&self, data: &[LabeledSeq]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in data.chunks(64) {
            let mut g = Graph::new();
            let loss = self.batch_loss(&mut g, chunk.iter().map(|e| (e.tokens.ids(), &e.labels[..])))?;
            let n: usize = chunk.iter().map(|e| e.labels.len()).sum();
            total += g.value(loss).item() * n as f64;
            tokens += n;
        }
        Ok(total / tokens.max(1) as f64)
    }

    fn batch_loss<'a>(&self, g: &mut Graph, batch: impl Iterator<Item = (&'a [usize], &'a [bool])>) -> Result<Var> {
        let mut seqs = Vec::new();
        let mut targets = Vec::new();
        for (ids, labels) in batch {
            if ids.len() != labels.len() {
                return Err(Error::Shape {
                    op: "detector labels",
                    lhs: vec![ids.len()],
                    rhs: vec![labels.len()],
                });
            }
            seqs.push(ids);
            targets.extend(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
        }
        let z = self.logits(g, &seqs)?;
        g.bce_with_logits(z, &targets)
    }
}

/// Replaces each non-special token by `[UNK]` with probability `p`.
pub(crate) fn unk_dropout(ids: &[usize], p: f64, rng: &mut SeededRng) -> Vec<usize> {
    ids.iter()
        .map(|&i| {
            if p > 0.0 && !Vocab::is_special(i) && rng.random_bool(p) {
                UNK_ID
            } else {
                i
            }
        })
        .collect()
}

/// Per-token BCE training from scratch. Returns the model and the mean
/// training loss of each epoch.
pub fn train_detector(
    data: &[LabeledSeq],
    vocab_size: usize,
    model_cfg: DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Contract("detector training set is empty".into()));
    }
    cfg.validate()?;
    let mut model = DetectorModel::new(vocab_size, model_cfg, cfg.seed)?;
    let mut opt = AdamW::for_tags(cfg.adamw(), &model.store, &[ParamTag::SpanDetector]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, &[0xde7, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| unk_dropout(data[i].tokens.ids(), cfg.unk_prob, &mut rng))
                .collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(
                &mut g,
                batch
                    .iter()
                    .zip(&inputs)
                    .map(|(&i, ids)| (&ids[..], &data[i].labels[..])),
            )?;
            let n: usize = batch.iter().map(|&i| data[i].labels.len()).sum();
            total += g.value(loss).item() * n as f64;
            tokens += n;
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads.params());
        }
        curve.push(total / tokens as f64);
    }
    Ok((model, curve))
}

/// Token F1 of `model` against the gold labels of `data`.
pub fn evaluate_detector(model: &DetectorModel, data: &[LabeledSeq]) -> Result<f64> {
    let mut pred = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let xs: Vec<&TokenSeq> = chunk.iter().map(|e| &e.tokens).collect();
        for probs in model.predict_batch(&xs)? {
            pred.push(probs.into_iter().map(|p| p >= model.cfg.threshold).collect());
        }
    }
    let gold: Vec<Vec<bool>> = data.iter().map(|e| e.labels.clone()).collect();
    token_f1(&pred, &gold)
}

/// Converts a probability vector to hard labels.
pub fn threshold_labels(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(a: usize, b: usize) -> Span {
        Span::new(a, b).unwrap()
    }

    #[test]
    fn grouping_examples() {
        assert_eq!(group_spans(&[false, true, true, false, true]), vec![s(1, 2), s(4, 4)]);
        assert!(group_spans(&[false; 5]).is_empty());
        assert_eq!(group_spans(&[true; 5]), vec![s(0, 4)]);
        assert!(group_spans(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn flatten_then_group_is_identity(labels in prop::collection::vec(any::<bool>(), 0..64)) {
            let spans = group_spans(&labels);
            prop_assert_eq!(spans_to_labels(&spans, labels.len()).unwrap(), labels);
            for w in spans.windows(2) {
                prop_assert!(w[0].end + 1 < w[1].start);
            }
        }
    }

    #[test]
    fn f1_counts() {
        let g = vec![vec![true, true, false, false]];
        assert_eq!(token_f1(&g, &g).unwrap(), 1.0);
        let p = vec![vec![true, false, true, false]];
        assert!((token_f1(&p, &g).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(token_f1(&[vec![false]], &[vec![false]]).unwrap(), 1.0);
    }

    fn toy_data(n: usize) -> Vec<LabeledSeq> {
        // Ids 4..8 are sound words, 8..16 filler.
        let mut rng = SeededRng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let len = rng.random_range(4..10);
                let mut ids = vec![1];
                let mut labels = vec![false];
                for _ in 1..len {
                    let sound = rng.random_bool(0.3);
                    ids.push(if sound {
                        rng.random_range(4..8)
                    } else {
                        rng.random_range(8..16)
                    });
                    labels.push(sound);
                }
                LabeledSeq {
                    tokens: TokenSeq(ids),
                    labels,
                }
            })
            .collect()
    }

    #[test]
    fn untrained_near_half_and_deterministic() {
        let m = DetectorModel::new(16, DetectorConfig::default(), 1).unwrap();
        let x = TokenSeq(vec![1, 4, 9, 10, 5]);
        let p = m.predict_labels(&x).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((0.3..=0.7).contains(&mean), "{mean}");
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, m.predict_labels(&x).unwrap());
    }

    #[test]
    fn contract_errors() {
        let m = DetectorModel::new(16, DetectorConfig::default(), 1).unwrap();
        assert!(matches!(m.predict_labels(&TokenSeq(vec![])), Err(Error::Contract(_))));
        assert!(matches!(
            m.predict_labels(&TokenSeq(vec![99])),
            Err(Error::Index { .. })
        ));
        assert!(train_detector(&[], 16, DetectorConfig::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn overfits_sixteen_examples() {
        let data = toy_data(16);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let init = DetectorModel::new(16, DetectorConfig::default(), cfg.seed)
            .unwrap()
            .mean_loss(&data)
            .unwrap();
        let one = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        let (m1, _) = train_detector(&data, 16, DetectorConfig::default(), &one).unwrap();
        assert!(m1.mean_loss(&data).unwrap() < init);
        let (m, curve) = train_detector(&data, 16, DetectorConfig::default(), &cfg).unwrap();
        assert_eq!(evaluate_detector(&m, &data).unwrap(), 1.0);
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
