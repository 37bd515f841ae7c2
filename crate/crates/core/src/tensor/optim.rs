use super::{ParamId, ParamStore, ParamTag, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. By default only parameters whose tag is
/// trainable end to end are touched; [`AdamW::for_tags`] picks the set.
pub struct AdamW {
    cfg: AdamWConfig,
    tags: Option<Vec<ParamTag>>,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            tags: None,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Optimizer that updates exactly the parameters carrying one of `tags`,
    /// e.g. the frozen detector during its own pre-training.
    pub fn for_tags(cfg: AdamWConfig, store: &ParamStore, tags: &[ParamTag]) -> Self {
        Self {
            tags: Some(tags.to_vec()),
            ..Self::new(cfg, store)
        }
    }

    fn updates(&self, tag: ParamTag) -> bool {
        match &self.tags {
            Some(t) => t.contains(&tag),
            None => tag.trainable(),
        }
    }

    /// Applies one update from (already averaged) gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !self.updates(store.tag(*id)) {
                continue;
            }
            let m = self.m[*id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[*id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_and_skips_frozen() {
        let mut s = ParamStore::new();
        let w = s.add_const("w", ParamTag::Fusion, &[1], 5.0);
        let f = s.add_const("f", ParamTag::SpanDetector, &[1], 5.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..500 {
            let gw = Tensor::scalar(2.0 * s.get(w).item());
            let gf = Tensor::scalar(2.0 * s.get(f).item());
            opt.step(&mut s, &[(w, gw), (f, gf)]);
        }
        assert!(s.get(w).item().abs() < 1e-2);
        assert_eq!(s.get(f).item(), 5.0);
    }
}
