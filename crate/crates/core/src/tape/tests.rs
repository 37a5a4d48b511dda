use super::*;
use rand::Rng;

use crate::rng::seeded;

/// Builds the graph from scratch for the given leaf values and returns the
/// scalar output. Used for both the analytic and the finite-difference pass.
fn check_grad<F>(shapes: &[Vec<usize>], seed: u64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = seeded(seed);
    let values: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..numel(s)).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut t = Tape::new();
        let leaves: Vec<Var> = vals.iter().zip(shapes).map(|(v, s)| t.leaf(v.clone(), s)).collect();
        let out = build(&mut t, &leaves);
        t.scalar(out)
    };

    let mut t = Tape::new();
    let leaves: Vec<Var> = values.iter().zip(shapes).map(|(v, s)| t.leaf(v.clone(), s)).collect();
    let out = build(&mut t, &leaves);
    let grads = t.backward(out);

    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values[li].len()]);
        for i in 0..values[li].len() {
            let mut plus = values.clone();
            plus[li][i] += h;
            let mut minus = values.clone();
            minus[li][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "leaf {li} index {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }
}

/// Weighted sum with fixed irregular weights so every output element matters.
fn probe(t: &mut Tape, v: Var) -> Var {
    let n = t.value(v).len();
    let shape = t.shape(v).to_vec();
    let w = t.leaf((0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect(), &shape);
    let prod = t.mul(v, w);
    t.sum_all(prod)
}

#[test]
fn elementwise_ops() {
    check_grad(&[vec![3, 4], vec![3, 4]], 1, |t, l| {
        let a = t.add(l[0], l[1]);
        let b = t.mul(a, l[1]);
        let c = t.sub(b, l[0]);
        let d = t.exp(c);
        let e = t.elu(d);
        let f = t.scale(e, -0.7);
        let g = t.offset(f, 2.0);
        let h = t.elu(l[0]);
        let i = t.mul(g, h);
        probe(t, i)
    });
}

#[test]
fn clamp_passes_interior_gradient() {
    check_grad(&[vec![10]], 2, |t, l| {
        let c = t.clamp(l[0], -0.5, 0.5);
        probe(t, c)
    });
}

#[test]
fn concat_gather_reshape() {
    check_grad(&[vec![4, 2, 3], vec![4, 1, 3]], 3, |t, l| {
        let c = t.concat(&[l[0], l[1]]);
        let g = t.gather(c, &[3, 0, 0, 2]);
        let r = t.reshape(g, &[4, 9]);
        probe(t, r)
    });
}

#[test]
fn group_ops() {
    check_grad(&[vec![6, 4], vec![2, 4]], 4, |t, l| {
        let s = t.group_sum(l[0], 3);
        let m = t.group_mean(l[0], 3);
        let x = t.group_max(l[0], 3);
        let b = t.group_broadcast(l[1], 3);
        let sm = t.group_softmax(l[0], 3);
        let a = t.add(s, m);
        let a = t.add(a, x);
        let a = t.mul(a, l[1]);
        let pb = probe(t, b);
        let psm = probe(t, sm);
        let pa = probe(t, a);
        let tot = t.add(pa, pb);
        t.add(tot, psm)
    });
}

#[test]
fn head_ops() {
    check_grad(&[vec![3, 4, 2], vec![3, 2]], 5, |t, l| {
        let hs = t.head_sum(l[0], 2);
        let he = t.head_expand(l[1], &[3, 4, 2]);
        let p1 = probe(t, hs);
        let p2 = probe(t, he);
        let prod = t.mul(l[0], he);
        let p3 = probe(t, prod);
        let a = t.add(p1, p2);
        t.add(a, p3)
    });
}

#[test]
fn spatial_ops() {
    check_grad(&[vec![2, 3, 2, 2], vec![2, 3, 1, 1]], 6, |t, l| {
        let m = t.spatial_mean(l[0]);
        let b = t.spatial_broadcast(l[1], 2, 2);
        let x = t.mul(l[0], b);
        let pm = probe(t, m);
        let px = probe(t, x);
        t.add(pm, px)
    });
}

#[test]
fn convolution() {
    check_grad(&[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], 7, |t, l| {
        let y = t.conv2d(l[0], l[1], l[2], 2, 1);
        assert_eq!(t.shape(y), &[2, 3, 3, 3]);
        probe(t, y)
    });
    check_grad(&[vec![2, 3, 2, 2], vec![4, 3, 1, 1], vec![4]], 8, |t, l| {
        let y = t.conv2d(l[0], l[1], l[2], 1, 0);
        probe(t, y)
    });
}

#[test]
fn transposed_convolution() {
    check_grad(&[vec![2, 3, 3, 3], vec![3, 2, 3, 3], vec![2]], 9, |t, l| {
        let y = t.conv_transpose2d(l[0], l[1], l[2], 2, 1, 1);
        assert_eq!(t.shape(y), &[2, 2, 6, 6]);
        probe(t, y)
    });
}

#[test]
fn transposed_convolution_is_adjoint_of_convolution() {
    let mut t = Tape::new();
    let mut rng = seeded(10);
    let mut rand_vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = t.leaf(rand_vec(2 * 7 * 7), &[1, 2, 7, 7]);
    let w = t.leaf(rand_vec(3 * 2 * 9), &[3, 2, 3, 3]);
    let y_probe = t.leaf(rand_vec(3 * 4 * 4), &[1, 3, 4, 4]);
    let zb3 = t.zeros(&[3]);
    let zb2 = t.zeros(&[2]);
    let y = t.conv2d(x, w, zb3, 2, 1);
    let back = t.conv_transpose2d(y_probe, w, zb2, 2, 1, 0);
    assert_eq!(t.shape(back), &[1, 2, 7, 7]);
    let lhs: f64 = t.value(y).iter().zip(t.value(y_probe)).map(|(a, b)| a * b).sum();
    let rhs: f64 = t.value(back).iter().zip(t.value(x)).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn batch_norm_training_and_eval() {
    check_grad(&[vec![3, 2, 2, 2], vec![2], vec![2]], 11, |t, l| {
        let y = t.batch_norm(l[0], l[1], l[2], None);
        probe(t, y)
    });
    check_grad(&[vec![3, 2, 2, 2], vec![2], vec![2]], 12, |t, l| {
        let y = t.batch_norm(l[0], l[1], l[2], Some((&[0.1, -0.2], &[0.5, 2.0])));
        probe(t, y)
    });
}

#[test]
fn batch_stats_match_definition() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2, 1]);
    let g = t.leaf(vec![1.0, 1.0], &[2]);
    let b = t.zeros(&[2]);
    let y = t.batch_norm(x, g, b, None);
    let stats = t.batch_stats(y).unwrap();
    // channel 0 holds {1,2,5,6}, channel 1 holds {3,4,7,8}
    assert!((stats.mean[0] - 3.5).abs() < 1e-12);
    assert!((stats.mean[1] - 5.5).abs() < 1e-12);
    assert!((stats.var[0] - 4.25).abs() < 1e-9);
}

#[test]
fn kl_and_bernoulli() {
    check_grad(&[vec![2, 3], vec![2, 3], vec![2, 3], vec![2, 3]], 13, |t, l| {
        let k = t.kl_diag(l[0], l[1], l[2], l[3]);
        probe(t, k)
    });
    check_grad(&[vec![2, 5]], 14, |t, l| {
        let target = vec![1.0, 0.0, 1.0, 0.25, 0.0, 0.0, 1.0, 1.0, 0.5, 0.0];
        let lp = t.bernoulli_log_prob(l[0], target);
        probe(t, lp)
    });
}

#[test]
fn group_max_routes_ties_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.leaf(vec![2.0, 2.0, 1.0], &[3, 1]);
    let m = t.group_max(x, 3);
    let s = t.sum_all(m);
    let g = t.backward(s);
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn unrelated_leaves_have_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0], &[1]);
    let b = t.leaf(vec![2.0], &[1]);
    let s = t.sum_all(a);
    let g = t.backward(s);
    assert!(g.get(b).is_none());
    assert_eq!(g.get(a).unwrap(), &[1.0]);
}
