//! AdamW with parameter groups and the reduce-on-plateau scheduler.

use ndarray::ArrayD;

use super::layers::ParamStore;
use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, betas: (0.9, 0.99), eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Decoupled-weight-decay Adam. Decay applies only to entries flagged
/// `decay`; each entry's learning rate is `lr * lr_mult`.
pub struct AdamW<F: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<Option<ArrayD<F>>>,
    v: Vec<Option<ArrayD<F>>>,
    step_count: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Result<Self, NnError> {
        if cfg.lr <= 0.0 {
            return Err(NnError::BadLearningRate(cfg.lr));
        }
        Ok(Self { cfg, m: Vec::new(), v: Vec::new(), step_count: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step. `grads` is indexed by parameter id; `None` means
    /// zero gradient (the entry still sees decay and moment dynamics).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<ArrayD<F>>], lr: f64) {
        assert!(lr > 0.0, "learning rate must stay positive");
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step_count += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let lr_p = F::from_f64(lr * entry.lr_mult);
            if entry.decay && self.cfg.weight_decay > 0.0 {
                let shrink = F::one() - lr_p * F::from_f64(self.cfg.weight_decay);
                entry.value.mapv_inplace(|p| p * shrink);
            }
            let zero;
            let g = match grads.get(idx).and_then(|g| g.as_ref()) {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(entry.value.raw_dim());
                    &zero
                }
            };
            let m = self.m[idx].get_or_insert_with(|| ArrayD::zeros(entry.value.raw_dim()));
            let v = self.v[idx].get_or_insert_with(|| ArrayD::zeros(entry.value.raw_dim()));
            let fb1 = F::from_f64(b1);
            let fb2 = F::from_f64(b2);
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &gv| {
                    *m = fb1 * *m + (F::one() - fb1) * gv;
                    *v = fb2 * *v + (F::one() - fb2) * gv * gv;
                    let mhat = m.to_f64() / bc1;
                    let vhat = v.to_f64() / bc2;
                    *p = *p - lr_p * F::from_f64(mhat / (vhat.sqrt() + self.cfg.eps));
                });
        }
    }
}

/// Reduce-on-plateau: halve the learning rate after `patience` consecutive
/// updates without improvement of a minimized metric, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: Option<f64>,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self { lr, factor, patience, min_lr, best: None, bad: 0 }
    }

    pub fn update(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric >= best => {
                self.bad += 1;
                if self.bad >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.bad = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::layers::{Mode, Session};
    use crate::nnkit::ops;
    use ndarray::IxDyn;

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", ArrayD::from_elem(IxDyn(&[3]), 2.0), false, 1.0);
        let mut opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut store, &[None], 0.1);
        assert_eq!(store.value(id).as_slice().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_grad_with_decay_shrinks() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", ArrayD::from_elem(IxDyn(&[1]), 2.0), true, 1.0);
        let mut opt =
            AdamW::new(AdamWConfig { weight_decay: 1e-2, ..Default::default() }).unwrap();
        opt.step(&mut store, &[None], 0.1);
        let expect = 2.0 * (1.0 - 0.1 * 1e-2);
        assert!((store.value(id)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn quadratic_descends() {
        // One step on f(w) = w^2 from w = 1 with lr = 0.1 decreases w.
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", ArrayD::from_elem(IxDyn(&[1]), 1.0), false, 1.0);
        let grads = {
            let mut s = Session::new(&mut store, Mode::Train, None);
            let w = s.param(crate::nnkit::layers::ParamId(0));
            let sq = ops::unary(&mut s.tape, w, ops::Unary::Square);
            let loss = ops::sum_all(&mut s.tape, sq);
            s.grads(loss)
        };
        let mut opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut store, &grads, 0.1);
        let w = store.value(id)[[0]];
        assert!(w < 1.0, "w = {w}");
        // Hand-executed first Adam step: update = lr * g/ (|g| ) ~ lr.
        assert!((w - 0.9).abs() < 1e-6, "first-step magnitude lr: {w}");
    }

    #[test]
    fn bad_learning_rate_rejected() {
        assert!(AdamW::<f64>::new(AdamWConfig { lr: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn plateau_rules() {
        // Strictly decreasing metric: lr never changes.
        let mut s = PlateauScheduler::new(0.01, 0.5, 5, 1e-5);
        for i in 0..10 {
            assert_eq!(s.update(1.0 / (i + 1) as f64), 0.01);
        }
        // Constant metric for 6 updates, patience 5: exactly one halving.
        let mut s = PlateauScheduler::new(0.01, 0.5, 5, 1e-5);
        let mut lrs = Vec::new();
        for _ in 0..6 {
            lrs.push(s.update(1.0));
        }
        assert_eq!(lrs, vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.005]);
        // Floor at min_lr.
        let mut s = PlateauScheduler::new(1e-5, 0.5, 1, 1e-5);
        s.update(1.0);
        for _ in 0..5 {
            assert_eq!(s.update(1.0), 1e-5);
        }
    }
}
