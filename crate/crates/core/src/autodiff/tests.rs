use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    // inputs are representable f32 values in [-1, 1]
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
    Tensor::new(dims.to_vec(), v).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of `f` around `x`, one coordinate at a time.
fn finite_diff(x: &[f64], step: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Random linear functional of an op's output, so every output element
/// contributes to the scalar that gets differentiated.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let dims = tape.value(out).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &dims);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(rel_err(*a, *n) <= tol, "coord {i}: analytic {a} vs numeric {n}");
    }
}

#[test]
fn conv_all_ones_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(t.value(y).dims(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), &[9.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, &[2, 1, 4, 5]);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), input.data());
}

#[test]
fn conv_output_size_and_shape_errors() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 7, 6]));
    let k = t.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.conv2d(x, k, b, 2, 1).unwrap();
    // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 3) / 2) + 1 = 3
    assert_eq!(t.value(y).dims(), &[1, 4, 4, 3]);

    let bad_k = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let err = t.conv2d(x, bad_k, b, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    let bad_b = t.constant(Tensor::zeros(&[3]));
    assert!(t.conv2d(x, k, bad_b, 1, 1).is_err());
}

fn conv_loss(x: &[f64], k: &[f64], b: &[f64], stride: usize, pad: usize, seed: u64) -> f64 {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(vec![1, 2, 5, 5], x.to_vec()).unwrap());
    let kv = t.constant(Tensor::new(vec![3, 2, 3, 3], k.to_vec()).unwrap());
    let bv = t.constant(Tensor::new(vec![3], b.to_vec()).unwrap());
    let y = t.conv2d(xv, kv, bv, stride, pad).unwrap();
    let l = project(&mut t, y, seed);
    t.value(l).data()[0]
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.param(x.clone()), t.param(k.clone()), t.param(b.clone()));
        let y = t.conv2d(xv, kv, bv, stride, pad).unwrap();
        let l = project(&mut t, y, 99);
        let g = t.backward(l).unwrap();

        let (xd, kd, bd) = (x.data(), k.data(), b.data());
        let num_x = finite_diff(xd, 1e-3, &|p| conv_loss(p, kd, bd, stride, pad, 99));
        let num_k = finite_diff(kd, 1e-3, &|p| conv_loss(xd, p, bd, stride, pad, 99));
        let num_b = finite_diff(bd, 1e-3, &|p| conv_loss(xd, kd, p, stride, pad, 99));
        assert_close(g.get(xv).unwrap().data(), &num_x, 1e-4);
        assert_close(g.get(kv).unwrap().data(), &num_k, 1e-4);
        assert_close(g.get(bv).unwrap().data(), &num_b, 1e-4);
    }
}

#[test]
fn maxpool_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.maxpool2x2(x).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);

    let c = t.constant(Tensor::full(&[1, 2, 6, 4], 0.25));
    let y = t.maxpool2x2(c).unwrap();
    assert_eq!(t.value(y).dims(), &[1, 2, 3, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.25));

    let odd = t.constant(Tensor::zeros(&[1, 1, 5, 7]));
    let y = t.maxpool2x2(odd).unwrap();
    assert_eq!(t.value(y).dims(), &[1, 1, 3, 4]);
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    // well-separated distinct values so no window has a near tie within the step
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vals: Vec<f64> = (0..36).map(|i| -1.0 + 2.0 * i as f64 / 35.0).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 6, 6], p.to_vec()).unwrap());
        let y = t.maxpool2x2(x).unwrap();
        let l = project(&mut t, y, 5);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![1, 1, 6, 6], vals.clone()).unwrap());
    let y = t.maxpool2x2(x).unwrap();
    let l = project(&mut t, y, 5);
    let g = t.backward(l).unwrap();
    assert_close(g.get(x).unwrap().data(), &finite_diff(&vals, 1e-3, &f), 1e-4);
}

#[test]
fn relu_and_sigmoid_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![4], vec![0.0, 1.5, -2.0, -0.1]).unwrap());
    let s = t.sigmoid(x);
    assert_eq!(t.value(s).data()[0], 0.5);
    assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 1.5, 0.0, 0.0]);

    let big = t.constant(Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap());
    let s = t.sigmoid(big);
    assert!(t.value(s).is_finite());
}

#[test]
fn sigmoid_gradient_is_s_one_minus_s() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let s = t.sigmoid(xv);
    let sv = t.value(s).data().to_vec();
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    let analytic: Vec<f64> = sv.iter().map(|s| s * (1.0 - s)).collect();
    assert_close(g.get(xv).unwrap().data(), &analytic, 1e-12);
    let f = |p: &[f64]| p.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).sum::<f64>();
    assert_close(g.get(xv).unwrap().data(), &finite_diff(x.data(), 1e-3, &f), 1e-5);
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // keep away from the kink
    let x: Vec<f64> = (0..16)
        .map(|_| {
            let v: f64 = rng.gen_range(0.01..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    let mut t = Tape::new();
    let xv = t.param(Tensor::new(vec![16], x.clone()).unwrap());
    let r = t.relu(xv);
    let l = project(&mut t, r, 4);
    let g = t.backward(l).unwrap();
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(vec![16], p.to_vec()).unwrap());
        let r = t.relu(xv);
        let l = project(&mut t, r, 4);
        t.value(l).data()[0]
    };
    let num = finite_diff(&x, 1e-3, &f);
    for (a, n) in g.get(xv).unwrap().data().iter().zip(&num) {
        assert!((a - n).abs() <= 1e-9, "{a} vs {n}");
    }
}

#[test]
fn upsample_constant_and_align_corners_example() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Tensor::full(&[1, 1, 3, 5], 0.7));
    let u = t.upsample_bilinear(c, 9, 11).unwrap();
    assert_eq!(t.value(u).dims(), &[1, 1, 9, 11]);
    assert!(t.value(u).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let m = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let u = t.upsample_bilinear(m, 2, 4).unwrap();
    let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for row in t.value(u).data().chunks(4) {
        for (a, b) in row.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    assert!(t.upsample_bilinear(m, 1, 4).is_err());
    let same = t.upsample_bilinear(m, 2, 2).unwrap();
    assert_eq!(t.value(same).data(), t.value(m).data());
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 4]);
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(vec![1, 2, 3, 4], p.to_vec()).unwrap());
        let u = t.upsample_bilinear(xv, 7, 10).unwrap();
        let l = project(&mut t, u, 8);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let u = t.upsample_bilinear(xv, 7, 10).unwrap();
    let l = project(&mut t, u, 8);
    let g = t.backward(l).unwrap();
    assert_close(g.get(xv).unwrap().data(), &finite_diff(x.data(), 1e-3, &f), 1e-4);
}

#[test]
fn backward_simple_analytic_cases() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
    let mut t = Tape::<f64>::new();
    let xv = t.param(x.clone());
    let l = t.sum(xv);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[1.0; 6]);
    assert!(t.is_empty());

    let xv = t.param(x.clone());
    let sq = t.mul(xv, xv).unwrap();
    let l = t.sum(sq);
    let g = t.backward(l).unwrap();
    let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(xv).unwrap().data(), twice.as_slice());
}

#[test]
fn backward_rejects_non_scalar_and_empty() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
    let mut empty = Tape::<f32>::new();
    assert!(empty.backward(Var(0)).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::full(&[3], 2.0));
    let c = t.constant(Tensor::full(&[3], 5.0));
    let p = t.mul(a, c).unwrap();
    let l = t.sum(p);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[5.0; 3]);
    assert!(g.get(c).is_none());
}

fn chain_loss(x: &[f64], k: &[f64], b: &[f64]) -> f64 {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(vec![1, 2, 6, 6], x.to_vec()).unwrap());
    let kv = t.constant(Tensor::new(vec![2, 2, 3, 3], k.to_vec()).unwrap());
    let bv = t.constant(Tensor::new(vec![2], b.to_vec()).unwrap());
    let c = t.conv2d(xv, kv, bv, 1, 1).unwrap();
    let p = t.maxpool2x2(c).unwrap();
    let s = t.sigmoid(p);
    let l = project(&mut t, s, 17);
    t.value(l).data()[0]
}

#[test]
fn composed_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    let mut t = Tape::new();
    let (xv, kv, bv) = (t.param(x.clone()), t.param(k.clone()), t.param(b.clone()));
    let c = t.conv2d(xv, kv, bv, 1, 1).unwrap();
    let p = t.maxpool2x2(c).unwrap();
    let s = t.sigmoid(p);
    let l = project(&mut t, s, 17);
    let g = t.backward(l).unwrap();
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    assert_close(g.get(kv).unwrap().data(), &finite_diff(kd, 1e-3, &|p| chain_loss(xd, p, bd)), 1e-3);
    assert_close(g.get(bv).unwrap().data(), &finite_diff(bd, 1e-3, &|p| chain_loss(xd, kd, p)), 1e-3);
    // input coordinates: only compare those whose gradient is not a pooling tie artefact
    let gx = g.get(xv).unwrap().data();
    let num = finite_diff(xd, 1e-3, &|p| chain_loss(p, kd, bd));
    let agree = gx.iter().zip(&num).filter(|(a, n)| rel_err(**a, **n) <= 1e-3).count();
    assert_eq!(agree, gx.len());
}

#[test]
fn pooling_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let probs: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
    let groups = Arc::new(RegionGroups::new(vec![0, 0, 1, 1, 1, 2, 2, 0, 1, 2, 2, 2], 3).unwrap());
    let build = |t: &mut Tape<f64>, x: Var| {
        let inst = t.region_mean(x, groups.clone()).unwrap();
        let gm = t.gm_pool(inst, 4.0).unwrap();
        let v = t.positiveness(x).unwrap();
        let a = t.bce(gm, 1).unwrap();
        let b = t.sq_diff(v, 0.3).unwrap();
        t.weighted_sum(&[(a, 1.0), (b, 2.5)]).unwrap()
    };
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![12], p.to_vec()).unwrap());
        let l = build(&mut t, x);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![12], probs.clone()).unwrap());
    let l = build(&mut t, x);
    let g = t.backward(l).unwrap();
    assert_close(g.get(x).unwrap().data(), &finite_diff(&probs, 1e-5, &f), 1e-5);
}

#[test]
fn replay_is_deterministic_and_inputs_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6]).cast::<f32>();
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3]).cast::<f32>();
    let run = || {
        let mut t = Tape::<f32>::new();
        let (xv, kv) = (t.param(x.clone()), t.param(k.clone()));
        let b = t.constant(Tensor::zeros(&[2]));
        let c = t.conv2d(xv, kv, b, 1, 1).unwrap();
        let p = t.maxpool2x2(c).unwrap();
        let u = t.upsample_bilinear(p, 6, 6).unwrap();
        let s = t.sigmoid(u);
        assert_eq!(t.value(xv), &{
            let mut e = x.clone();
            e.set_requires_grad(true);
            e
        });
        let l = t.sum(s);
        let mut g = t.backward(l).unwrap();
        (g.take(xv).unwrap(), g.take(kv).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn region_groups_validate_labels() {
    assert!(RegionGroups::new(vec![0, 2], 2).is_err());
    assert!(RegionGroups::new(vec![0, 0], 2).is_err());
    let g = RegionGroups::new(vec![1, 0, 1], 2).unwrap();
    assert_eq!(g.sizes(), &[1, 2]);
    assert_eq!(g.means(&[0.5, 0.2, 0.7]), vec![0.2, 0.6]);
}
