use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces an op output to a scalar with fixed pseudo-random weights so that
/// every output entry contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape, out: Var) -> Var {
    let n = tape.values(out).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant_from(&shape, w).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod).unwrap()
}

fn scalar_of(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = weighted_sum(&mut tape, out);
    tape.item(s)
}

/// Central finite differences against the tape gradient; returns the largest
/// relative error over all input entries.
fn max_rel_err(build: &Build, inputs: &[Tensor], h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = weighted_sum(&mut tape, out);
    tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= h;
            let numeric = (scalar_of(build, &plus) - scalar_of(build, &minus)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_value() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.values(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.values(c), &[11.0]);

    assert!(tape.matmul(a, a).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[4, 2])];
    let build: Box<Build> = Box::new(|tp, v| tp.matmul(v[0], v[1]));
    assert!(max_rel_err(&*build, &inputs, 1e-5) < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0, 0.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        (&[1000.0, 1000.0], &[0.5, 0.5]),
        (&[0.0, 3f64.ln()], &[0.25, 0.75]),
    ];
    for (x, want) in cases {
        let v = tape.constant(t(&[x.len()], x)).unwrap();
        let s = tape.softmax(v, 0).unwrap();
        for (a, b) in tape.values(s).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn softmax_jacobian_closed_form() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, 0.0])).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    let first = tape.gather_flat(s, &[0]).unwrap();
    let loss = tape.sum(first).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert!((g[0] - 0.25).abs() < 1e-12 && (g[1] + 0.25).abs() < 1e-12);
}

#[test]
fn softmax_along_leading_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0])).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.values(s).iter().all(|v| (v - 0.5).abs() < 1e-12));
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let m1 = tape.constant(Tensor::scalar(-1.0)).unwrap();
    let r = tape.relu(m1).unwrap();
    assert_eq!(tape.item(r), 0.0);
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    let e = tape.exp(z).unwrap();
    assert_eq!(tape.item(e), 1.0);

    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let xx = tape.mul(x, x).unwrap();
    tape.backward(xx).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn broadcast_rules() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let row = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let s = tape.add(a, row).unwrap();
    assert_eq!(tape.values(s), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let bad = tape.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.add(a, bad), Err(NumericsError::Dimension { .. })));
    let sc = tape.scalar(2.0).unwrap();
    assert!(tape.mul(a, sc).is_ok());
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(tape.log(z), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let x = tape.constant(t(&[2], &[1.0, 3.0])).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    let v = tape.values(y);
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

    let g3 = tape.constant(Tensor::full(&[3], 2.0)).unwrap();
    let b3 = tape.constant(Tensor::zeros(&[3])).unwrap();
    let c = tape.constant(Tensor::full(&[3], 7.0)).unwrap();
    let y = tape.layer_norm(c, g3, b3).unwrap();
    assert!(tape.values(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 5]),
        random_tensor(&mut rng, &[5]),
        random_tensor(&mut rng, &[5]),
    ];
    let build: Box<Build> = Box::new(|tp, v| tp.layer_norm(v[0], v[1], v[2]));
    assert!(max_rel_err(&*build, &inputs, 1e-5) < 1e-5);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let y = tape.conv2d(x, w, None, 1, Padding::same(0)).unwrap();
    assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0]);

    let ones = tape.constant(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = tape.conv2d(ones, k, None, 1, Padding::same(1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3]);
    assert_eq!(tape.values(y)[4], 9.0);
    assert_eq!(tape.values(y)[0], 4.0);

    // (4 + 2 - 3) is odd: stride 2 does not tile it.
    let x4 = tape.constant(Tensor::zeros(&[1, 4, 4])).unwrap();
    assert!(tape.conv2d(x4, k, None, 2, Padding::same(1)).is_err());
    let y = tape.conv2d(x4, k, None, 2, Padding { before: 1, after: 0 }).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random_tensor(&mut rng, &[2, 4, 4]),
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
    ];
    let same: Box<Build> = Box::new(|tp, v| tp.conv2d(v[0], v[1], Some(v[2]), 1, Padding::same(1)));
    assert!(max_rel_err(&*same, &inputs, 1e-5) < 1e-5);
    let strided: Box<Build> =
        Box::new(|tp, v| tp.conv2d(v[0], v[1], Some(v[2]), 2, Padding { before: 1, after: 0 }));
    assert!(max_rel_err(&*strided, &inputs, 1e-5) < 1e-5);
}

#[test]
fn resampling_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let same = tape.upsample_nearest(x, 1).unwrap();
    assert_eq!(tape.values(same), tape.values(x));
    let up = tape.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        tape.values(up),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let down = tape.downsample_nearest(up, 2).unwrap();
    assert_eq!(tape.values(down), tape.values(x));

    let c = tape.constant(Tensor::full(&[2, 4, 4], 0.7)).unwrap();
    let d = tape.downsample_nearest(c, 2).unwrap();
    let u = tape.upsample_nearest(d, 2).unwrap();
    assert_eq!(tape.values(u), tape.values(c));
    assert!(tape.upsample_nearest(x, 3).is_err());
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0])).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ops: Vec<(&str, Vec<Vec<usize>>, Box<Build>)> = vec![
        ("transpose", vec![vec![3, 2]], Box::new(|tp, v| tp.transpose(v[0]))),
        ("add_bcast", vec![vec![3, 4], vec![4]], Box::new(|tp, v| tp.add(v[0], v[1]))),
        ("sub_bcast", vec![vec![3, 4], vec![4]], Box::new(|tp, v| tp.sub(v[0], v[1]))),
        ("mul_bcast", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        (
            "div",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|tp, v| {
                let d = tp.square(v[1])?;
                let d = tp.add_scalar(d, 0.5)?;
                tp.div(v[0], d)
            }),
        ),
        ("scale", vec![vec![5]], Box::new(|tp, v| tp.scale(v[0], -1.7))),
        ("relu", vec![vec![7]], Box::new(|tp, v| tp.relu(v[0]))),
        ("exp", vec![vec![5]], Box::new(|tp, v| tp.exp(v[0]))),
        (
            "log",
            vec![vec![5]],
            Box::new(|tp, v| {
                let e = tp.exp(v[0])?;
                tp.log(e)
            }),
        ),
        ("sigmoid", vec![vec![5]], Box::new(|tp, v| tp.sigmoid(v[0]))),
        ("abs", vec![vec![5]], Box::new(|tp, v| tp.abs(v[0]))),
        ("softplus", vec![vec![5]], Box::new(|tp, v| tp.softplus(v[0]))),
        ("clamp", vec![vec![8]], Box::new(|tp, v| tp.clamp(v[0], -1.0, 1.0))),
        ("sum_last", vec![vec![3, 4]], Box::new(|tp, v| tp.sum_last(v[0]))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|tp, v| tp.slice_cols(v[0], 1, 3))),
        (
            "concat",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|tp, v| tp.concat(&[v[0], v[1], v[0]])),
        ),
        (
            "concat_cols",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|tp, v| tp.concat_cols(&[v[0], v[1]])),
        ),
        ("gather_rows", vec![vec![4, 3]], Box::new(|tp, v| tp.gather_rows(v[0], &[2, 0, 2]))),
        ("gather_flat", vec![vec![6]], Box::new(|tp, v| tp.gather_flat(v[0], &[5, 1, 1]))),
        ("softmax0", vec![vec![4, 3]], Box::new(|tp, v| tp.softmax(v[0], 0))),
        ("softmax1", vec![vec![4, 3]], Box::new(|tp, v| tp.softmax(v[0], 1))),
        ("log_softmax", vec![vec![3, 4]], Box::new(|tp, v| tp.log_softmax(v[0], 1))),
        ("upsample", vec![vec![2, 2, 3]], Box::new(|tp, v| tp.upsample_nearest(v[0], 2))),
        ("downsample", vec![vec![2, 4, 4]], Box::new(|tp, v| tp.downsample_nearest(v[0], 2))),
        (
            "sample_bilinear",
            vec![vec![3, 4], vec![5, 2]],
            Box::new(|tp, v| {
                let p = tp.sigmoid(v[1])?;
                tp.sample_bilinear(v[0], p)
            }),
        ),
        (
            "interp_rows",
            vec![vec![6, 3], vec![4]],
            Box::new(|tp, v| {
                let p = tp.sigmoid(v[1])?;
                let p = tp.scale(p, 5.0)?;
                tp.interp_rows(v[0], p)
            }),
        ),
    ];
    for (name, shapes, build) in ops {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let err = max_rel_err(&*build, &inputs, 1e-5);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn interp_rows_hits_exact_rows() {
    let mut tape = Tape::new();
    let table = tape.constant(t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0])).unwrap();
    let pos = tape.constant(t(&[4], &[1.0, 1.5, 7.0, -3.0])).unwrap();
    let out = tape.interp_rows(table, pos).unwrap();
    assert_eq!(tape.values(out), &[10.0, 11.0, 15.0, 16.0, 20.0, 21.0, 0.0, 1.0]);
}

#[test]
fn bilinear_at_cell_centre_reads_cell() {
    let mut tape = Tape::new();
    let map = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let pts = tape.constant(t(&[2, 2], &[1.5 / 3.0, 1.5 / 2.0, 0.5 / 3.0, 0.5 / 2.0])).unwrap();
    let out = tape.sample_bilinear(map, pts).unwrap();
    let v = tape.values(out);
    assert!((v[0] - 5.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[3, 8, 8])).unwrap();
        let w = tape.leaf(random_tensor(&mut rng, &[4, 3, 3, 3])).unwrap();
        let y = tape.conv2d(x, w, None, 1, Padding::same(1)).unwrap();
        let y = tape.reshape(y, &[4, 64]).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        tape.values(s).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn fault_injection_corrupts_gradient() {
    let mut tape = Tape::new();
    tape.inject_fault(OpKind::Exp, 2.0);
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let e = tape.exp(x).unwrap();
    tape.backward(e).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalised_and_shift_invariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        c in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let n = xs.len();
        let x = tape.constant(Tensor::new(&[n], xs.clone()).unwrap()).unwrap();
        let shifted = tape.add_scalar(x, c).unwrap();
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(shifted, 0).unwrap();
        let total: f64 = tape.values(a).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (p, q) in tape.values(a).iter().zip(tape.values(b)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
