//! Multi-head attention with key-padding masks.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

use super::layers::{Linear, ParamStore, Session};
use super::ops;
use super::tape::Var;
use super::{NnError, Scalar};

/// Projection weights of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MhaParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, rng),
            o: Linear::init(store, &format!("{name}.o"), d, d, rng),
        }
    }
}

/// Split (B, T, d) into heads: (B*h, T, d/h).
fn split_heads<F: Scalar>(s: &mut Session<F>, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Var {
    let x = ops::reshape(&mut s.tape, x, &[b, t, h, dh]);
    let x = ops::permute(&mut s.tape, x, &[0, 2, 1, 3]);
    ops::reshape(&mut s.tape, x, &[b * h, t, dh])
}

/// Scaled dot-product multi-head attention.
///
/// `q_in` is (B, Tq, d); `kv_in` is (B, Tk, d). `key_mask`, when given, is
/// (B, Tk) with `false` marking padded keys, which receive exactly zero
/// attention weight. Returns (B, Tq, d). A batch element whose keys are all
/// masked is an error.
pub fn multi_head_attention<F: Scalar>(
    s: &mut Session<F>,
    q_in: Var,
    kv_in: Var,
    p: &MhaParams,
    h: usize,
    key_mask: Option<&Array2<bool>>,
) -> Result<Var, NnError> {
    let (b, tq, d) = {
        let sh = s.tape.value(q_in).shape();
        (sh[0], sh[1], sh[2])
    };
    let tk = s.tape.value(kv_in).shape()[1];
    if d % h != 0 {
        return Err(NnError::Shape(format!("model width {d} not divisible by {h} heads")));
    }
    let dh = d / h;

    let q2 = ops::reshape(&mut s.tape, q_in, &[b * tq, d]);
    let k2 = ops::reshape(&mut s.tape, kv_in, &[b * tk, d]);
    let q = p.q.forward(s, q2);
    let k = p.k.forward(s, k2);
    let v = p.v.forward(s, k2);

    let q = ops::reshape(&mut s.tape, q, &[b, tq, d]);
    let k = ops::reshape(&mut s.tape, k, &[b, tk, d]);
    let v = ops::reshape(&mut s.tape, v, &[b, tk, d]);
    let qh = split_heads(s, q, b, tq, h, dh);
    let kh = split_heads(s, k, b, tk, h, dh);
    let vh = split_heads(s, v, b, tk, h, dh);

    let scores = ops::bmm_nt(&mut s.tape, qh, kh);
    let scores = ops::scale(&mut s.tape, scores, F::from_f64(1.0 / (dh as f64).sqrt()));

    let mask = key_mask.map(|m| {
        let mut full = ArrayD::from_elem(IxDyn(&[b * h, tq, tk]), true);
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..tq {
                    for ki in 0..tk {
                        full[[bi * h + hi, ti, ki]] = m[[bi, ki]];
                    }
                }
            }
        }
        full
    });
    let attn = ops::softmax_lastdim(&mut s.tape, scores, mask.as_ref())?;

    let ctx = ops::bmm(&mut s.tape, attn, vh);
    let ctx = ops::reshape(&mut s.tape, ctx, &[b, h, tq, dh]);
    let ctx = ops::permute(&mut s.tape, ctx, &[0, 2, 1, 3]);
    let ctx = ops::reshape(&mut s.tape, ctx, &[b * tq, d]);
    let out = p.o.forward(s, ctx);
    Ok(ops::reshape(&mut s.tape, out, &[b, tq, d]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::layers::Mode;
    use crate::SeedStream;
    use ndarray::IxDyn;
    use rand::Rng;

    fn random_tokens(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        let vals: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedStream::new(3).derive("attn");
        let p = MhaParams::init(&mut store, "mha", 8, &mut rng);
        let q_tokens = random_tokens(&[1, 3, 8], &mut rng);
        let kv = random_tokens(&[1, 1, 8], &mut rng);
        let mut s = Session::new(&mut store, Mode::Eval, None);
        let q = s.input(q_tokens);
        let k = s.input(kv);
        let out = multi_head_attention(&mut s, q, k, &p, 2, None).unwrap();
        let o = s.tape.value(out);
        // With one key the attention weight is 1 regardless of the query, so
        // every output row equals W_o(V of that key).
        for ti in 1..3 {
            for di in 0..8 {
                assert!((o[[0, ti, di]] - o[[0, 0, di]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_duplicates_do_not_change_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedStream::new(4).derive("attn");
        let p = MhaParams::init(&mut store, "mha", 8, &mut rng);
        let q_tokens = random_tokens(&[1, 2, 8], &mut rng);
        let kv = random_tokens(&[1, 4, 8], &mut rng);

        let base = {
            let mut s = Session::new(&mut store, Mode::Eval, None);
            let q = s.input(q_tokens.clone());
            let k = s.input(kv.clone());
            let mask = Array2::from_elem((1, 4), true);
            let out = multi_head_attention(&mut s, q, k, &p, 2, Some(&mask)).unwrap();
            s.tape.value(out).clone()
        };
        // Duplicate all keys and mask the duplicates.
        let kv_dup = ndarray::concatenate(
            ndarray::Axis(1),
            &[kv.view(), kv.view()],
        )
        .unwrap();
        let mut mask = Array2::from_elem((1, 8), true);
        for i in 4..8 {
            mask[[0, i]] = false;
        }
        let out2 = {
            let mut s = Session::new(&mut store, Mode::Eval, None);
            let q = s.input(q_tokens);
            let k = s.input(kv_dup.into_dyn());
            let out = multi_head_attention(&mut s, q, k, &p, 2, Some(&mask)).unwrap();
            s.tape.value(out).clone()
        };
        for (a, b) in base.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn key_permutation_equivariance() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedStream::new(5).derive("attn");
        let p = MhaParams::init(&mut store, "mha", 8, &mut rng);
        let q_tokens = random_tokens(&[1, 2, 8], &mut rng);
        let kv = random_tokens(&[1, 5, 8], &mut rng);
        let run = |store: &mut ParamStore<f64>, kv: ArrayD<f64>| {
            let mut s = Session::new(store, Mode::Eval, None);
            let q = s.input(q_tokens.clone());
            let k = s.input(kv);
            let out = multi_head_attention(&mut s, q, k, &p, 2, None).unwrap();
            s.tape.value(out).clone()
        };
        let base = run(&mut store, kv.clone());
        // Reverse key order.
        let mut rev = kv.clone();
        for i in 0..5 {
            for d in 0..8 {
                rev[[0, i, d]] = kv[[0, 4 - i, d]];
            }
        }
        let permuted = run(&mut store, rev);
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
