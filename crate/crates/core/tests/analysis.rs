use drmc_core::analysis::{
    delta_loss, interference, lesion_bias, network_interference, psnr, routing_histogram, DeltaLoss,
    InterferenceMatrix, LossLandscape, NetworkLandscape, QuadraticTasks, RoutingHistogram,
};
use drmc_core::data::{build_dataset, default_centers, Mask};
use drmc_core::model::apply_gate;
use drmc_core::{Error, GateKind, ModelConfig, Network, RouteRecord, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vol(v: Vec<f32>) -> Tensor {
    Tensor::new(&[v.len()], v).unwrap()
}

proptest! {
    #[test]
    fn psnr_is_symmetric_and_shift_invariant(
        a in prop::collection::vec(-2.0f32..2.0, 16),
        b in prop::collection::vec(-2.0f32..2.0, 16),
        c in -1.0f32..1.0,
    ) {
        let (ta, tb) = (vol(a.clone()), vol(b.clone()));
        let p = psnr(&ta, &tb, 2.0).unwrap();
        prop_assert_eq!(p.to_bits(), psnr(&tb, &ta, 2.0).unwrap().to_bits());
        // f32 rounding of the shifted values perturbs the differences slightly
        let sa = vol(a.iter().map(|x| x + c).collect());
        let sb = vol(b.iter().map(|x| x + c).collect());
        let ps = psnr(&sa, &sb, 2.0).unwrap();
        if p.is_finite() {
            prop_assert!((ps - p).abs() < 1e-3 * p.abs().max(1.0), "{} vs {}", ps, p);
        }
    }

    #[test]
    fn lesion_bias_matches_a_two_pass_oracle(
        full in prop::collection::vec(0.1f32..2.0, 32),
        noise in prop::collection::vec(-0.2f32..0.2, 32),
        bits in prop::collection::vec(any::<bool>(), 32),
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let est: Vec<f32> = full.iter().zip(&noise).map(|(f, n)| f + n).collect();
        let mask = Mask { dims: [1, 1, 32], bits: bits.clone() };
        let (bm, bx) = lesion_bias(&vol(est.clone()), &vol(full.clone()), &mask).unwrap();
        let sel = |v: &[f32]| -> Vec<f64> { v.iter().zip(&bits).filter(|(_, &b)| b).map(|(&x, _)| x as f64).collect() };
        let (e, f) = (sel(&est), sel(&full));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!((bm - (mean(&e) - mean(&f)).abs() / mean(&f)).abs() < 1e-12);
        prop_assert!((bx - (max(&e) - max(&f)).abs() / max(&f)).abs() < 1e-12);
        prop_assert!(bm >= 0.0 && bx >= 0.0);
    }
}

#[test]
fn lesion_free_mask_signals_no_lesion() {
    let m = Mask {
        dims: [1, 1, 3],
        bits: vec![false; 3],
    };
    let t = vol(vec![1.0, 2.0, 3.0]);
    assert!(matches!(lesion_bias(&t, &t, &m), Err(Error::NoLesion)));
}

fn two_tasks(second: [f64; 2]) -> QuadraticTasks {
    QuadraticTasks {
        theta: vec![0.0, 0.0],
        curvature: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        targets: vec![vec![vec![1.0, 0.0]], vec![second.to_vec()]],
    }
}

#[test]
fn orthogonal_tasks_do_not_interfere() {
    let q = two_tasks([0.0, 1.0]);
    let d = delta_loss(&q, 0, 1, 1e-4).unwrap();
    assert!(d.first_order.abs() < 1e-6 && d.exact.abs() < 1e-6, "{d:?}");
    let m = interference(&q, &[1, 2], "toy", 1e-4).unwrap();
    assert!(m.values[0][1].abs() < 1e-6);
}

#[test]
fn opposed_tasks_conflict() {
    let q = two_tasks([-1.0, 0.0]);
    let m = interference(&q, &[1, 2], "toy", 1e-4).unwrap();
    assert!(m.values[0][1] < 0.0 && m.values[1][0] < 0.0);
    assert_eq!(m.values[0][0], 1.0);
    assert_eq!(m.values[1][1], 1.0);
    assert!(m.has_negative_off_diagonal());
}

fn random_quadratic(seed: u64, tasks: usize, batches: usize, dim: usize) -> QuadraticTasks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QuadraticTasks {
        theta: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        curvature: (0..tasks).map(|_| (0..dim).map(|_| rng.random_range(0.5..2.0)).collect()).collect(),
        targets: (0..tasks)
            .map(|_| (0..batches).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect(),
    }
}

#[test]
fn self_step_gains_lambda_times_gradient_norm() {
    let q = random_quadratic(1, 1, 1, 5);
    let lambda = 1e-4;
    let g = q.gradient(0, 0).unwrap();
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let DeltaLoss { first_order, .. } = delta_loss(&q, 0, 0, lambda).unwrap();
    assert!((first_order - lambda * n).abs() < 1e-15, "{first_order} vs {}", lambda * n);
}

#[test]
fn first_order_and_exact_forms_agree_on_quadratics() {
    let q = random_quadratic(2, 3, 4, 6);
    for i in 0..3 {
        for j in 0..3 {
            let d = delta_loss(&q, i, j, 1e-4).unwrap();
            if d.first_order.abs() > 1e-8 {
                let rel = (d.first_order - d.exact).abs() / d.first_order.abs();
                assert!(rel < 0.05, "({i},{j}) {d:?}");
            }
        }
    }
    let m = interference(&q, &[1, 2, 3], "toy", 1e-4).unwrap();
    for i in 0..3 {
        assert_eq!(m.values[i][i], 1.0);
    }
}

#[test]
fn zero_gradients_are_skipped_then_rejected() {
    let mut q = two_tasks([0.0, 1.0]);
    q.targets[1] = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
    q.targets[0].push(vec![1.0, 0.0]);
    assert_eq!(delta_loss(&q, 0, 1, 1e-4).unwrap().batches, 1);
    q.targets[1] = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    assert!(matches!(delta_loss(&q, 0, 1, 1e-4), Err(Error::Numeric(_))));
    assert!(matches!(delta_loss(&q, 0, 0, 0.0), Err(Error::Usage(_))));
}

fn small_model(experts: usize) -> ModelConfig {
    ModelConfig {
        channels: 4,
        experts,
        blocks: 2,
        router_hidden: 4,
        gate: GateKind::Relu,
    }
}

fn live_network(cfg: ModelConfig, seed: u64) -> Network {
    let mut net = Network::new(cfg, seed).unwrap();
    let (tw, _) = net.tail();
    let shape = net.params().get(tw).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    *net.params_mut().get_mut(tw) = Tensor::uniform(&shape, -0.05, 0.05, &mut rng);
    net
}

fn center_batches(centers: usize, batches: usize, p: usize) -> (Vec<u32>, Vec<Vec<Vec<(Tensor, Tensor)>>>) {
    let cs: Vec<_> = default_centers().into_iter().filter(|c| !c.unknown).take(centers).collect();
    let recs = build_dataset(&cs, batches, 0, [16, 16, 16], 5).unwrap();
    let ids = cs.iter().map(|c| c.id).collect();
    let b = cs
        .iter()
        .map(|c| {
            recs.iter()
                .filter(|r| r.center_id == c.id)
                .map(|r| {
                    let o = [4, 4, 4];
                    vec![(
                        drmc_core::train::extract_patch(&r.low, o, p).unwrap(),
                        drmc_core::train::extract_patch(&r.full, o, p).unwrap(),
                    )]
                })
                .collect()
        })
        .collect();
    (ids, b)
}

#[test]
fn network_interference_has_unit_diagonal() {
    // a relu gate may switch the lone expert off, leaving no gradient
    let net = live_network(ModelConfig { gate: GateKind::Softmax, ..small_model(1) }, 3);
    let (ids, batches) = center_batches(3, 2, 6);
    let groups = net.param_groups();
    let ms: Vec<InterferenceMatrix> = network_interference(&net, &batches, &ids, &groups, 1e-4, 1e-3).unwrap();
    assert_eq!(ms.len(), 4);
    for m in &ms {
        assert_eq!(m.n_batches, 2);
        for i in 0..3 {
            assert_eq!(m.values[i][i], 1.0, "{}", m.parameter_group);
        }
        assert!(m.values.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn network_first_order_matches_exact_step() {
    let net = live_network(small_model(2), 4);
    let (_, batches) = center_batches(2, 2, 6);
    let groups = net.param_groups();
    let land = NetworkLandscape {
        net: &net,
        group: &groups[1],
        batches: &batches,
        charbonnier_eps: 1e-3,
    };
    for (i, j) in [(0, 0), (1, 1)] {
        let d = delta_loss(&land, i, j, 1e-4).unwrap();
        let rel = (d.first_order - d.exact).abs() / d.first_order.abs();
        assert!(rel < 0.1, "({i},{j}) {d:?}");
    }
}

#[test]
fn single_expert_histogram_uses_expert_zero() {
    let cs: Vec<_> = default_centers().into_iter().take(3).collect();
    let recs = build_dataset(&cs, 2, 1, [16, 16, 16], 8).unwrap();
    let net = Network::new(small_model(1), 2).unwrap();
    let h = routing_histogram(&net, &recs).unwrap();
    for ((_, _, c), counts) in &h.counts {
        assert_eq!(counts.len(), 1);
        assert_eq!(counts[0], recs.iter().filter(|r| r.center_id == *c).count() as u64);
    }
    assert_eq!(h.counts.len(), 2 * 2 * 3);
}

#[test]
fn histogram_counts_sum_to_records_and_ignore_logit_scale() {
    let cs: Vec<_> = default_centers().into_iter().take(2).collect();
    let recs = build_dataset(&cs, 3, 0, [16, 16, 16], 9).unwrap();
    for gate in [GateKind::Relu, GateKind::Softmax] {
        let net = live_network(ModelConfig { gate, ..small_model(3) }, 6);
        let h = routing_histogram(&net, &recs).unwrap();
        for ((_, _, c), counts) in &h.counts {
            let n = recs.iter().filter(|r| r.center_id == *c).count() as u64;
            assert_eq!(counts.iter().sum::<u64>(), n);
        }
        let mut scaled = RoutingHistogram::new(3);
        for r in &recs {
            let (_, routes) = net.infer(&r.low).unwrap();
            let rescaled: Vec<RouteRecord> = routes
                .iter()
                .map(|rt| {
                    let mut tape = Tape::new();
                    let logits: Vec<f32> = rt.logits.iter().map(|l| 2.0 * l).collect();
                    let v = tape.constant(Tensor::new(&[logits.len()], logits.clone()).unwrap());
                    let w = apply_gate(&mut tape, v, gate).unwrap();
                    RouteRecord {
                        block: rt.block,
                        bank: rt.bank,
                        logits,
                        weights: tape.value(w).data().to_vec(),
                    }
                })
                .collect();
            scaled.record(r.center_id, &rescaled);
        }
        assert_eq!(scaled, h);
    }
}
