//! Parameter storage, forward sessions, and the layer set.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::tape::{Tape, Var};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Weight decay applies to this entry.
    pub decay: bool,
    /// Per-group learning-rate multiplier.
    pub lr_mult: f64,
    /// Buffers (running stats) are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: &str, value: ArrayD<F>, decay: bool, lr_mult: f64) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            decay,
            lr_mult,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            decay: false,
            lr_mult: 1.0,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    /// Total number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// One forward pass: a tape plus lazy parameter leaves.
pub struct Session<'a, F: Scalar> {
    pub tape: Tape<F>,
    pub mode: Mode,
    store: &'a mut ParamStore<F>,
    leaf_of: Vec<Option<Var>>,
    rng: Option<&'a mut ChaCha12Rng>,
    grad_enabled: bool,
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, mode: Mode, rng: Option<&'a mut ChaCha12Rng>) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            mode,
            store,
            leaf_of: vec![None; n],
            rng,
            grad_enabled: mode == Mode::Train,
        }
    }

    /// Force gradient tracking regardless of mode (used by gradient checks
    /// that need eval-mode semantics with gradients).
    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    /// Tape leaf for a parameter, inserted on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaf_of[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let requires = e.trainable && self.grad_enabled;
        let v = self.tape.leaf(e.value.clone(), requires);
        self.leaf_of[id.0] = Some(v);
        v
    }

    /// Insert an input tensor (no gradient).
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.tape.leaf(value, false)
    }

    pub fn buffer(&self, id: ParamId) -> &ArrayD<F> {
        self.store.value(id)
    }

    pub fn update_buffer(&mut self, id: ParamId, value: ArrayD<F>) {
        self.store.set_value(id, value);
    }

    pub fn scalar(&self, v: Var) -> F {
        self.tape.value(v)[[0]]
    }

    /// Backward from a scalar loss; gradients indexed by parameter id.
    pub fn grads(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        let tape_grads = self.tape.backward(loss);
        self.leaf_of
            .iter()
            .map(|slot| slot.and_then(|v| tape_grads[v.0].clone()))
            .collect()
    }

    /// Dropout: active in train mode only; draws the keep mask from the
    /// session RNG in a single deterministic stream.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let rng = self
            .rng
            .as_deref_mut()
            .expect("dropout with p > 0 in train mode requires a session rng");
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        let shape = self.tape.value(x).raw_dim();
        let mask_vals: Vec<F> = (0..shape.size())
            .map(|_| if rng.random_range(0.0..1.0) < keep { scale } else { F::zero() })
            .collect();
        let mask = ArrayD::from_shape_vec(shape, mask_vals).unwrap();
        ops::dropout_with_mask(&mut self.tape, x, &mask)
    }
}

// ---------------------------------------------------------------------------
// Layer specs (used for validation and checkpoints)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv1d { c_in: usize, c_out: usize, k: usize, stride: usize },
    BatchNorm1d { c: usize },
    Gelu,
    MaxPool1d { k: usize, stride: usize },
    AdaptiveAvgPool1d { out_len: usize },
    Linear { in_f: usize, out_f: usize },
    LayerNorm { d: usize },
    Dropout { p: f64 },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            LayerSpec::Conv1d { c_in, c_out, k, stride } => {
                if c_in < 1 || c_out < 1 || k < 1 || stride < 1 {
                    return Err(format!("invalid conv1d spec {self:?}"));
                }
            }
            LayerSpec::MaxPool1d { k, stride } => {
                if k < 1 || stride < 1 {
                    return Err(format!("invalid maxpool spec {self:?}"));
                }
            }
            LayerSpec::AdaptiveAvgPool1d { out_len } => {
                if out_len < 1 {
                    return Err("adaptive pool output length must be >= 1".into());
                }
            }
            LayerSpec::Linear { in_f, out_f } => {
                if in_f < 1 || out_f < 1 {
                    return Err(format!("invalid linear spec {self:?}"));
                }
            }
            LayerSpec::BatchNorm1d { c } | LayerSpec::LayerNorm { d: c } => {
                if c < 1 {
                    return Err("norm width must be >= 1".into());
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("dropout p {p} outside [0, 1)"));
                }
            }
            LayerSpec::Gelu => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Instantiated layers
// ---------------------------------------------------------------------------

/// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let vals: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = c_in * k;
        let w = store.add_param(
            &format!("{name}.weight"),
            uniform_init(&[c_out, c_in, k], fan_in, rng),
            true,
            1.0,
        );
        let b = store.add_param(
            &format!("{name}.bias"),
            uniform_init(&[c_out], fan_in, rng),
            false,
            1.0,
        );
        Self { w, b, stride }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        ops::conv1d(&mut s.tape, x, w, b, self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self::init_grouped(store, name, in_f, out_f, rng, true, 1.0)
    }

    pub fn init_grouped<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha12Rng,
        decay: bool,
        lr_mult: f64,
    ) -> Self {
        let w = store.add_param(
            &format!("{name}.weight"),
            uniform_init(&[out_f, in_f], in_f, rng),
            decay,
            lr_mult,
        );
        let b = store.add_param(
            &format!("{name}.bias"),
            uniform_init(&[out_f], in_f, rng),
            false,
            lr_mult,
        );
        Self { w, b }
    }

    /// Input (n, in_f) -> (n, out_f).
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        ops::linear(&mut s.tape, x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, c: usize) -> Self {
        let gamma = store.add_param(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[c]), F::one()),
            false,
            1.0,
        );
        let beta =
            store.add_param(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), false, 1.0);
        let run_mean = store.add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])));
        let run_var = store.add_buffer(
            &format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[c]), F::one()),
        );
        Self { gamma, beta, run_mean, run_var, momentum: 0.1, eps: 1e-5 }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let n = {
                    let sh = s.tape.value(x).shape();
                    sh[0] * sh[2]
                };
                let (y, mean, var) = ops::batchnorm1d_train(
                    &mut s.tape,
                    x,
                    gamma,
                    beta,
                    F::from_f64(self.eps),
                );
                // Running stats use the unbiased variance.
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let mom = F::from_f64(self.momentum);
                let keep = F::one() - mom;
                let rm = s.buffer(self.run_mean) * keep + &mean.into_dyn() * mom;
                let rv = s.buffer(self.run_var) * keep
                    + &(var.mapv(|v| v * F::from_f64(unbias))).into_dyn() * mom;
                s.update_buffer(self.run_mean, rm);
                s.update_buffer(self.run_var, rv);
                y
            }
            Mode::Eval => {
                let rm: Array1<F> =
                    s.buffer(self.run_mean).clone().into_dimensionality().unwrap();
                let rv: Array1<F> =
                    s.buffer(self.run_var).clone().into_dimensionality().unwrap();
                ops::batchnorm1d_eval(&mut s.tape, x, gamma, beta, &rm, &rv, F::from_f64(self.eps))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        let gamma = store.add_param(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[d]), F::one()),
            false,
            1.0,
        );
        let beta =
            store.add_param(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[d])), false, 1.0);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        ops::layernorm_lastdim(&mut s.tape, x, gamma, beta, F::from_f64(self.eps))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaxPool1d {
    pub k: usize,
    pub stride: usize,
}

impl MaxPool1d {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        ops::maxpool1d(&mut s.tape, x, self.k, self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveAvgPool1d {
    pub out_len: usize,
}

impl AdaptiveAvgPool1d {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        ops::adaptive_avgpool1d(&mut s.tape, x, self.out_len)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        s.dropout(x, self.p)
    }
}

/// One layer of a sequential stack.
#[derive(Debug, Clone, Copy)]
pub enum Layer {
    Conv(Conv1d),
    Bn(BatchNorm1d),
    Gelu,
    Max(MaxPool1d),
    Avg(AdaptiveAvgPool1d),
    Lin(Linear),
    Ln(LayerNorm),
    Drop(Dropout),
}

impl Layer {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        match self {
            Layer::Conv(l) => l.forward(s, x),
            Layer::Bn(l) => l.forward(s, x),
            Layer::Gelu => ops::unary(&mut s.tape, x, ops::Unary::Gelu),
            Layer::Max(l) => l.forward(s, x),
            Layer::Avg(l) => l.forward(s, x),
            Layer::Lin(l) => l.forward(s, x),
            Layer::Ln(l) => l.forward(s, x),
            Layer::Drop(l) => l.forward(s, x),
        }
    }
}
