mod common;

use common::{max_abs_diff, naive_home, random_vec, randomize, HomeWeights};
use mamba_home::gradcheck::{check_params, projection_loss, GradcheckConfig};
use mamba_home::home::{
    combine, group_and_pad, home_forward, level1_route, level2_route, slot_assign, HomeLayer, HomeStageConfig,
};
use mamba_home::nn::Activation;
use mamba_home::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn layer(seed: u64, k: usize, e: usize, e2: usize, s: usize, d: usize) -> (ParamStore, HomeLayer) {
    let mut store = ParamStore::new(seed);
    let layer = HomeLayer::new(&mut store, "h", HomeStageConfig::new(1, k, e, e2, s, d));
    randomize(&mut store, seed, 1.0);
    (store, layer)
}

fn run(store: &ParamStore, layer: &HomeLayer, x: &[f64], b: usize, n: usize, mask: Option<&[bool]>) -> (Tensor, Tensor) {
    let d = layer.cfg.dim;
    let tape = Tape::new();
    let xv = tape.constant(Tensor::new([b, n, d], x.to_vec()).unwrap());
    let g = group_and_pad(xv, mask, layer.cfg.group).unwrap();
    let a = slot_assign(&tape, store, layer, &g).unwrap();
    let dispatch = a.dispatch.value().as_ref().clone();
    let out = home_forward(&tape, store, layer, xv, mask).unwrap().value().as_ref().clone();
    (out, dispatch)
}

#[test]
fn hand_sized_case_matches_loop_oracle() {
    // B=1, N=4, K=2, E=2, S=1, d=2 with small integer slot embeddings
    let (mut store, layer) = layer(3, 2, 2, 4, 1, 2);
    store
        .set(layer.slots, Tensor::new([2, 1, 2], vec![1.0, 0.0, -1.0, 2.0]).unwrap())
        .unwrap();
    let x = vec![1.0, 2.0, 0.0, -1.0, 3.0, 1.0, -2.0, 0.5];
    let (out, dispatch) = run(&store, &layer, &x, 1, 4, None);
    let w = HomeWeights::load(&store, "h", 2, 4, 1, 2, true);
    let oracle = naive_home(&x, 1, 4, None, 2, &w);
    assert!(max_abs_diff(dispatch.data(), &oracle.dispatch) < 1e-12);
    assert!(max_abs_diff(out.data(), &oracle.out) < 1e-12);
    // first token: logits (1, 3) → softmax
    let e = (-2.0f64).exp();
    assert!((dispatch.data()[0] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn staged_forward_matches_loop_oracle_on_random_configs() {
    let mut worst = 0.0f64;
    for case in 0..60u64 {
        let b = 1 + (case % 2) as usize;
        let n = 1 + (case * 7 % 8) as usize;
        let k = 1 + (case * 5 % 4) as usize;
        let e = 1 + (case % 3) as usize;
        let s = 1 + (case / 3 % 2) as usize;
        let d = 1 + (case * 3 % 4) as usize;
        let (store, layer) = layer(case, k, e, 2 * e, s, d);
        let x = random_vec(b * n * d, 1000 + case);
        let mask: Vec<bool> = (0..b * n).map(|i| (i + case as usize) % 5 != 0).collect();
        let mask = (case % 3 == 0).then_some(mask.as_slice());
        let (out, dispatch) = run(&store, &layer, &x, b, n, mask);
        let w = HomeWeights::load(&store, "h", e, 2 * e, s, d, true);
        let oracle = naive_home(&x, b, n, mask, k, &w);
        worst = worst
            .max(max_abs_diff(out.data(), &oracle.out))
            .max(max_abs_diff(dispatch.data(), &oracle.dispatch));
    }
    assert!(worst < 1e-12, "max abs diff {worst:e}");
}

/// FFN computing `scale·x` through a `2d`-wide hidden layer.
fn set_scaled_identity(store: &mut ParamStore, layer: &HomeLayer, expert: usize, scale: f64) {
    let d = layer.cfg.dim;
    let f = &layer.experts1[expert];
    let mut up = Tensor::zeros([d, 2 * d]);
    let mut down = Tensor::zeros([2 * d, d]);
    for i in 0..d {
        up.set(&[i, i], 1.0);
        down.set(&[i, i], scale);
    }
    store.set(f.up.weight, up).unwrap();
    store.set(f.down.weight, down).unwrap();
    store.set(f.up.bias, Tensor::zeros([2 * d])).unwrap();
    store.set(f.down.bias, Tensor::zeros([d])).unwrap();
}

#[test]
fn two_scaled_identity_experts_mix_by_router_softmax() {
    let mut store = ParamStore::new(1);
    let mut cfg = HomeStageConfig::new(1, 4, 2, 4, 2, 3);
    cfg.activation = Activation::Linear;
    let layer = HomeLayer::new(&mut store, "h", cfg);
    set_scaled_identity(&mut store, &layer, 0, 1.0);
    set_scaled_identity(&mut store, &layer, 1, 2.0);
    let (l1, l2) = (0.3, -1.1);
    store.set(layer.router1.proj.weight, Tensor::zeros([3, 2])).unwrap();
    store.set(layer.router1.proj.bias, Tensor::new([2], vec![l1, l2]).unwrap()).unwrap();
    let tape = Tape::new();
    let slots = Tensor::new([1, 2, 4, 3], random_vec(24, 5)).unwrap();
    let y1 = level1_route(&tape, &store, &layer, tape.constant(slots.clone())).unwrap().value();
    let p = common::softmax(&[l1, l2]);
    let expected = slots.map(|v| (p[0] + 2.0 * p[1]) * v);
    assert!(y1.max_abs_diff(&expected) < 1e-14);
}

#[test]
fn single_expert_levels_reduce_to_that_expert() {
    let (store, layer) = layer(4, 2, 1, 1, 3, 2);
    let tape = Tape::new();
    let slots = tape.constant(Tensor::new([1, 2, 3, 2], random_vec(12, 8)).unwrap());
    let y1 = level1_route(&tape, &store, &layer, slots).unwrap().value();
    let direct = layer.experts1[0].forward(&tape, &store, slots).unwrap().value();
    assert!(y1.max_abs_diff(&direct) < 1e-15);
    let flat = tape.constant(Tensor::new([1, 6, 2], random_vec(12, 9)).unwrap());
    let y2 = level2_route(&tape, &store, &layer, flat).unwrap().value();
    let direct = layer.experts2[0].forward(&tape, &store, flat).unwrap().value();
    assert!(y2.max_abs_diff(&direct) < 1e-15);
}

#[test]
fn level2_matches_per_position_loop() {
    let (store, layer) = layer(6, 2, 1, 2, 4, 2);
    let tape = Tape::new();
    let y = random_vec(8, 4);
    let out = level2_route(&tape, &store, &layer, tape.constant(Tensor::new([1, 4, 2], y.clone()).unwrap()))
        .unwrap()
        .value();
    let w = HomeWeights::load(&store, "h", 1, 2, 4, 2, true);
    for pos in 0..4 {
        let yt = &y[pos * 2..pos * 2 + 2];
        let p = common::softmax(&w.router2.apply(yt));
        for j in 0..2 {
            let expected: f64 = w.experts2.iter().zip(&p).map(|(f, pe)| pe * f.apply(yt)[j]).sum();
            assert!((out.data()[pos * 2 + j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn single_slot_combine_broadcasts_the_slot() {
    let (store, layer) = layer(2, 4, 1, 2, 1, 3);
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([1, 7, 3], random_vec(21, 3)).unwrap());
    let g = group_and_pad(x, None, 4).unwrap();
    let a = slot_assign(&tape, &store, &layer, &g).unwrap();
    let y2 = Tensor::new([1, 2, 1, 3], vec![1.0, 2.0, 3.0, -4.0, -5.0, -6.0]).unwrap();
    let out = combine(tape.constant(y2), a.dispatch, 7).unwrap().value();
    for pos in 0..7 {
        let src = if pos < 4 { [1.0, 2.0, 3.0] } else { [-4.0, -5.0, -6.0] };
        assert_eq!(&out.data()[pos * 3..pos * 3 + 3], &src);
    }
}

#[test]
fn combine_rejects_inconsistent_length() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([1, 2, 4, 3]));
    let y = tape.constant(Tensor::zeros([1, 2, 3, 2]));
    assert!(combine(y, a, 9).is_err());
    assert!(combine(y, a, 4).is_err());
    assert!(combine(y, a, 5).is_ok());
}

#[test]
fn padded_sequence_equals_masked_embedding() {
    // N=5 grouped by K=4 versus the same 5 tokens inside an N=8 masked sequence
    let (store, layer) = layer(11, 4, 2, 4, 2, 3);
    let x5 = random_vec(15, 1);
    let (short, _) = run(&store, &layer, &x5, 1, 5, None);
    let mut x8 = x5.clone();
    x8.extend(random_vec(9, 2));
    let mask: Vec<bool> = (0..8).map(|i| i < 5).collect();
    let (long, _) = run(&store, &layer, &x8, 1, 8, Some(&mask));
    assert!(max_abs_diff(short.data(), &long.data()[..15]) < 1e-12);
}

#[test]
fn home_gradients_match_finite_differences() {
    let (mut store, layer) = layer(21, 4, 2, 4, 2, 4);
    let x = Tensor::new([1, 6, 4], random_vec(24, 77)).unwrap();
    let report = check_params(&mut store, &[], &GradcheckConfig::default(), |tape, store| {
        let y = home_forward(tape, store, &layer, tape.constant(x.clone()), None)?;
        projection_loss(y, 1)
    })
    .unwrap();
    assert_eq!(report.probes.len(), store.total_numel());
    assert!(report.passed(), "worst {:?}", report.worst());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dispatch_rows_are_normalized_and_padding_is_inert(
        n in 1usize..20, k in 1usize..7, e in 1usize..4, s in 1usize..3, d in 1usize..5, seed in 0u64..1000,
    ) {
        let (store, layer) = layer(seed, k, e, 2 * e, s, d);
        let x = random_vec(n * d, seed + 1);
        let mask: Vec<bool> = (0..n).map(|i| (i as u64 + seed) % 4 != 1).collect();
        let (out, dispatch) = run(&store, &layer, &x, 1, n, Some(&mask));
        let m = e * s;
        let g = n.div_ceil(k);
        for row in 0..g * k {
            let sum: f64 = dispatch.data()[row * m..(row + 1) * m].iter().sum();
            let valid = row < n && mask[row];
            if valid {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
        let mut perturbed = x.clone();
        for (i, v) in perturbed.iter_mut().enumerate() {
            if !mask[i / d] {
                *v += 123.456;
            }
        }
        let (out2, _) = run(&store, &layer, &perturbed, 1, n, Some(&mask));
        for t in 0..n {
            if mask[t] {
                prop_assert_eq!(&out.data()[t * d..(t + 1) * d], &out2.data()[t * d..(t + 1) * d]);
            }
        }
    }

    #[test]
    fn permuting_a_group_permutes_its_outputs(
        groups in 1usize..4, k in 2usize..6, e in 1usize..4, s in 1usize..3, d in 1usize..5,
        seed in 0u64..1000, which in 0usize..4,
    ) {
        let n = groups * k;
        let (store, layer) = layer(seed, k, e, 2 * e, s, d);
        let x = random_vec(n * d, seed + 7);
        let gi = which % groups;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left(1 + (seed as usize % (k - 1)));
        perm.swap(0, k - 1);
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let (a, b) = ((gi * k + dst) * d, (gi * k + src) * d);
            xp[a..a + d].copy_from_slice(&x[b..b + d]);
        }
        let (out, _) = run(&store, &layer, &x, 1, n, None);
        let (outp, _) = run(&store, &layer, &xp, 1, n, None);
        for t in 0..n {
            let src = if t / k == gi { gi * k + perm[t % k] } else { t };
            for j in 0..d {
                prop_assert!((outp.data()[t * d + j] - out.data()[src * d + j]).abs() < 1e-12);
            }
        }
    }
}
