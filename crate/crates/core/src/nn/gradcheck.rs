//! Central-difference checks of every tape operation in f64.

use rand::Rng as _;

use super::*;
use crate::error::Result;
use crate::exec::ExecMode;
use crate::rng::{self, Domain};

/// Scalar probe loss `Σ r ⊙ y` with fixed random weights `r`.
fn probe(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng::stream(seed, Domain::Init, 99);
    Tensor4::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng::stream(seed, Domain::Init, 7);
    Tensor4::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

type Build = dyn Fn(&mut Tape<'_, f64>, Var) -> Result<Var>;

/// Compare analytic gradients of `Σ r ⊙ f(x)` against central differences
/// for both the input and every parameter.
fn check(params: &ParamStore<f64>, input: &Tensor4<f64>, f: &Build, tol: f64) {
    let eval = |params: &ParamStore<f64>, input: &Tensor4<f64>| -> f64 {
        let mut tape = Tape::new(params, ExecMode::Sequential);
        let x = tape.leaf(input.clone());
        let y = f(&mut tape, x).unwrap();
        let r = probe(tape.value(y).shape(), 3);
        tape.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new(params, ExecMode::Parallel);
    let x = tape.leaf(input.clone());
    let y = f(&mut tape, x).unwrap();
    let r = probe(tape.value(y).shape(), 3);
    let back = tape.backward(&[(y, &r)]).unwrap();
    let h = 1e-6;
    let dx = back.of(x).cloned().unwrap_or_else(|| Tensor4::zeros(input.shape()));
    for i in 0..input.len() {
        let mut p = input.clone();
        p.data_mut()[i] += h;
        let mut m = input.clone();
        m.data_mut()[i] -= h;
        let num = (eval(params, &p) - eval(params, &m)) / (2.0 * h);
        let ana = dx.data()[i];
        assert!(
            (num - ana).abs() <= tol * num.abs().max(ana.abs()).max(1e-3),
            "input[{i}]: numeric {num} analytic {ana}"
        );
    }
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += h;
            let mut m = params.clone();
            m.get_mut(id).data_mut()[i] -= h;
            let num = (eval(&p, input) - eval(&m, input)) / (2.0 * h);
            let ana = back.params.get(id).data()[i];
            assert!(
                (num - ana).abs() <= tol * num.abs().max(ana.abs()).max(1e-3),
                "{}[{i}]: numeric {num} analytic {ana}",
                params.name(id)
            );
        }
    }
}

fn build<R>(store: &mut ParamStore<f64>, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> R) -> R {
    let mut rng = rng::stream(1, Domain::Init, 0);
    f(&mut ParamBuilder::new(store, &mut rng))
}

#[test]
fn conv2d_stride_and_padding() {
    for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
        let mut store = ParamStore::new();
        let conv = build(&mut store, |pb| Conv2d::new(pb, "c", 2, 3, k, stride, 1.0));
        // non-zero bias so the bias gradient is exercised with a real value
        let b = conv.b.unwrap();
        store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.1);
        let f = move |t: &mut Tape<'_, f64>, x: Var| conv.forward(t, x);
        check(&store, &random([2, 2, 5, 4], 11), &f, 1e-6);
    }
}

#[test]
fn transposed_conv() {
    let mut store = ParamStore::new();
    let ct = build(&mut store, |pb| ConvTranspose2x2::new(pb, "ct", 3, 2, 1.0));
    let f = move |t: &mut Tape<'_, f64>, x: Var| ct.forward(t, x);
    check(&store, &random([2, 3, 3, 2], 12), &f, 1e-6);
}

#[test]
fn pointwise_ops() {
    let store = ParamStore::new();
    let f = |t: &mut Tape<'_, f64>, x: Var| {
        let a = t.silu(x);
        let b = t.sigmoid(x);
        let c = t.add(a, b)?;
        let u = t.upsample2(c);
        let d = t.concat(u, u)?;
        Ok(t.global_avg_pool(d))
    };
    check(&store, &random([2, 2, 3, 3], 13), &f, 1e-6);
    let g = |t: &mut Tape<'_, f64>, x: Var| {
        let u = t.upsample2(x);
        let s = t.silu(u);
        t.concat(s, u)
    };
    check(&store, &random([1, 2, 2, 3], 14), &g, 1e-6);
}

#[test]
fn film_and_embedding() {
    let mut store = ParamStore::new();
    let (table, lin) = build(&mut store, |pb| {
        let table = pb.param("table", [4, 3, 1, 1], Init::Normal { std: 0.5 });
        (table, Linear::new(pb, "lin", 3, 2, 1.0))
    });
    let f = move |t: &mut Tape<'_, f64>, x: Var| {
        let e = t.embed(table, &[2, 0])?;
        let s = lin.forward(t, e)?;
        let sh = t.silu(s);
        t.film(x, s, sh)
    };
    check(&store, &random([2, 2, 3, 3], 15), &f, 1e-6);
}

#[test]
fn attention_block() {
    let mut store = ParamStore::new();
    let attn = build(&mut store, |pb| AttnBlock::new(pb, "attn", 3));
    let f = move |t: &mut Tape<'_, f64>, x: Var| attn.forward(t, x);
    check(&store, &random([2, 3, 2, 3], 16), &f, 1e-6);
}

#[test]
fn residual_block_with_embedding() {
    let mut store = ParamStore::new();
    let (rb, table) = build(&mut store, |pb| {
        let rb = ResBlock::new(pb, "rb", 2, 3, 4);
        (rb, pb.param("table", [3, 4, 1, 1], Init::Normal { std: 1.0 }))
    });
    let f = move |t: &mut Tape<'_, f64>, x: Var| {
        let e = t.embed(table, &[1, 2])?;
        rb.forward(t, x, e)
    };
    check(&store, &random([2, 2, 4, 4], 17), &f, 1e-6);
}

#[test]
fn timestep_embedding_is_bounded_and_distinct() {
    let e: Tensor4<f64> = timestep_embedding(&[1, 2, 100], 16);
    assert_eq!(e.shape(), [3, 16, 1, 1]);
    assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    assert_ne!(e.item(0), e.item(1));
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::<f32>::new();
    let p = store.add("p", Tensor4::full([1, 1, 1, 3], 2.0));
    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        &store,
    );
    for _ in 0..500 {
        let mut g = store.zeros_like();
        // d/dp of Σ p²
        let grad = store.get(p).map(|v| 2.0 * v);
        *g.get_mut(p) = grad;
        opt.step(&mut store, &g);
    }
    assert!(store.get(p).data().iter().all(|v| v.abs() < 0.05));
}
