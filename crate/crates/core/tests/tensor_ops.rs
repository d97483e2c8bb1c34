use gemtrans_core::tensor::params::Bound;
use gemtrans_core::tensor::{grad_check, ParameterStore, Tape, Tensor, Var};
use gemtrans_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    t64(shape, &(0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>())
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// Weighted sum with fixed pseudo-random weights, so gradients are not all equal.
fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let shape = t.shape(y).to_vec();
    let w = t.constant(t64(&shape, &w));
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

fn check<L>(params: ParameterStore<f64>, f: L)
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let r = grad_check(f, &params, 1e-5, 1e-4).unwrap();
    assert!(r.passed, "{:#?}", r);
}

fn store(items: &[(&str, Tensor<f64>)]) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    for (k, v) in items {
        s.insert(*k, v.clone()).unwrap();
    }
    s
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = t.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(t64(&[1, 2], &[1.0, 0.0]));
    let b = t.constant(t64(&[2, 1], &[0.0, 5.0]));
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).data(), &[0.0]);

    let err = t.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let y = t.matmul(va, vb).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    let ga = g.get(va).unwrap();
    // ones(3x2) · bᵀ: every row equals the row sums of b
    for i in 0..3 {
        for k in 0..4 {
            let want = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((ga.data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    // independent central differences on a
    let f = |a: &Tensor<f64>| -> f64 {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.matmul(va, vb).unwrap();
        t.value(y).data().iter().sum()
    };
    for i in 0..12 {
        let (mut p, mut m) = (a.clone(), a.clone());
        p.data_mut()[i] += 1e-5;
        m.data_mut()[i] -= 1e-5;
        let num = (f(&p) - f(&m)) / 2e-5;
        assert!((num - ga.data()[i]).abs() < 1e-8);
    }
    check(store(&[("a", a), ("b", b)]), |t, p| {
        let y = t.matmul(p.var("a")?, p.var("b")?)?;
        probe(t, y)
    });
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2], &[0.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(t64(&[2], &[1000.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    assert!(t.check_finite().is_ok());
    close(t.value(y).data(), &[1.0, 0.0], 1e-12);

    let x = t.constant(t64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = t.softmax(x, 0).unwrap();
    close(t.value(y).data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-12);
}

#[test]
fn softmax_along_inner_axis() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = t.softmax(x, 0).unwrap();
    close(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5], 1e-12);
}

#[test]
fn layernorm_examples() {
    let mut t = Tape::<f64>::new();
    let ones = t.constant(Tensor::ones(&[3]));
    let zeros = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(t64(&[1, 3], &[5.0, 5.0, 5.0]));
    let y = t.layernorm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(Tensor::ones(&[2]));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(t64(&[2], &[1.0, -1.0]));
    let y = t.layernorm(x, g2, b2, 1e-5).unwrap();
    // mean 0, variance 1: (x - 0) / sqrt(1 + 1e-5)
    let want = 1.0 / (1.0f64 + 1e-5).sqrt();
    close(t.value(y).data(), &[want, -want], 1e-12);

    let gz = t.constant(Tensor::zeros(&[3]));
    let bc = t.constant(Tensor::full(&[3], 2.5));
    let x = t.constant(t64(&[3], &[0.3, -7.0, 2.0]));
    let y = t.layernorm(x, gz, bc, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[2.5, 2.5, 2.5]);

    assert!(t.layernorm(x, ones, zeros, 0.0).is_err());
}

#[test]
fn shared_subexpression_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[1], &[3.0]));
    let y = t.mul(x, x).unwrap(); // x used twice
    let z = t.add(y, x).unwrap(); // and a third time
    let s = t.sum(z);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn nonfinite_is_surfaced() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[2], &[-1.0, 1.0]));
    let y = t.ln(x);
    let s = t.sum(y);
    assert!(t.check_finite().unwrap_err().is_numeric());
    assert!(t.backward(s).is_err());
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f32>::new();
        let a = t.leaf(random(&[4, 6], &mut rng).cast());
        let b = t.leaf(random(&[6, 3], &mut rng).cast());
        let y = t.matmul(a, b).unwrap();
        let y = t.softmax(y, 1).unwrap();
        let y = t.gelu(y);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let bits: Vec<u32> = g.get(a).unwrap().data().iter().map(|v| v.to_bits()).collect();
        (t.value(s).item().to_bits(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn cross_entropy_matches_closed_form() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(t64(&[1, 4], &[0.0; 4]));
    let ce = t.cross_entropy(l, &[2]).unwrap();
    assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
}

// Finite-difference checks for every differentiable op on random small shapes.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_and_unary_grads(seed in 0u64..1000, rows in 1usize..4, cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[rows, cols], &mut rng);
        let b = random(&[cols], &mut rng);
        let mut pos = random(&[rows, cols], &mut rng);
        pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        check(store(&[("a", a), ("b", b), ("p", pos)]), |t, p| {
            let (a, b, q) = (p.var("a")?, p.var("b")?, p.var("p")?);
            let s = t.add(a, b)?;
            let d = t.sub(s, b)?;
            let m = t.mul(d, b)?;
            let v = t.div(m, q)?;
            let e = t.exp(v);
            let l = t.ln(q);
            let r = t.sqrt(q);
            let g = t.gelu(a);
            let sg = t.sigmoid(a);
            let th = t.tanh(a);
            let sq = t.square(a);
            let n = t.neg(sq);
            let sc = t.scale(n, 0.3);
            let sc = t.add_scalar(sc, 1.0);
            let mut acc = e;
            for x in [l, r, g, sg, th, sc] {
                acc = t.add(acc, x)?;
            }
            probe(t, acc)
        });
    }

    #[test]
    fn shape_op_grads(seed in 0u64..1000, b in 1usize..3, n in 1usize..4, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[b, n, d], &mut rng);
        let y = random(&[b, 1, d], &mut rng);
        let table = random(&[4, d], &mut rng);
        check(store(&[("x", x), ("y", y), ("table", table)]), |t, p| {
            let (x, y, tab) = (p.var("x")?, p.var("y")?, p.var("table")?);
            let c = t.concat(&[y, x], 1)?;
            let pm = t.permute(c, &[2, 0, 1])?;
            let r = t.reshape(pm, &[d, b * (n + 1)])?;
            let tr = t.transpose(r)?;
            let sl = t.slice(tr, 0, 0, b)?;
            let bc = t.broadcast_to(y, &[b, n + 1, d])?;
            let sel = t.select(bc, 1, n)?;
            let rows = t.gather_rows(tab, &[3, 0, 3])?;
            let s1 = probe(t, sl)?;
            let s2 = probe(t, sel)?;
            let s3 = probe(t, rows)?;
            let s = t.add(s1, s2)?;
            t.add(s, s3)
        });
    }

    #[test]
    fn reduction_and_nn_grads(seed in 0u64..1000, rows in 1usize..4, cols in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let gain = random(&[cols], &mut rng);
        let bias = random(&[cols], &mut rng);
        let targets: Vec<usize> = (0..rows).map(|i| (i * 3 + seed as usize) % cols).collect();
        check(store(&[("x", x), ("g", gain), ("b", bias)]), |t, p| {
            let (x, g, b) = (p.var("x")?, p.var("g")?, p.var("b")?);
            let ln = t.layernorm(x, g, b, 1e-5)?;
            let sm0 = t.softmax(x, 0)?;
            let sm1 = t.softmax(ln, 1)?;
            let sa = t.sum_axis(sm1, 1, true)?;
            let ma = t.mean_axis(x, 0, false)?;
            let mx = t.max_axis(x, 1, false)?;
            let ce = t.cross_entropy(ln, &targets)?;
            let mut parts = vec![ce];
            for v in [sm0, sm1, sa, ma, mx] {
                parts.push(probe(t, v)?);
            }
            let mean = t.mean(x);
            parts.push(mean);
            let mut acc = parts[0];
            for &v in &parts[1..] {
                acc = t.add(acc, v)?;
            }
            Ok(acc)
        });
    }

    #[test]
    fn batched_matmul_grads(seed in 0u64..1000, bsz in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[bsz, m, k], &mut rng);
        let b = random(&[bsz, k, n], &mut rng);
        let bt = random(&[bsz, n, k], &mut rng);
        let w = random(&[k, n], &mut rng);
        let bias = random(&[n], &mut rng);
        check(store(&[("a", a), ("b", b), ("bt", bt), ("w", w), ("bias", bias)]), |t, p| {
            let y1 = t.bmm(p.var("a")?, p.var("b")?, false)?;
            let y2 = t.bmm(p.var("a")?, p.var("bt")?, true)?;
            let y3 = t.linear(p.var("a")?, p.var("w")?, Some(p.var("bias")?))?;
            let s = t.add(y1, y2)?;
            let s = t.add(s, y3)?;
            probe(t, s)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t64(&[vals.len()], &vals));
        let y = t.softmax(x, 0).unwrap();
        let s: f64 = t.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(t.value(y).data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn dropout_mask_is_seeded() {
    let run = |seed| {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::ones(&[64]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = t.dropout(x, 0.5, &mut rng);
        t.value(y).data().to_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert!(run(1).iter().all(|&v| v == 0.0 || v == 2.0));
}
