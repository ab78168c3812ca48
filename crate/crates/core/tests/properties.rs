use dessilbi::checkpoint::{self, Checkpoint};
use dessilbi::config::{emit_config, parse_config};
use dessilbi::path::{project_model, sparsity, support_mask};
use dessilbi::{prox_oracle, Activation, GroupScheme, Grouping, Penalty, Tensor};
use proptest::prelude::*;

mod common;

/// Shapes that exercise both group schemes: `[c_out, c_in, k, k]`.
fn conv_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..3, 1usize..3).prop_flat_map(|(o, i, k)| {
        prop::collection::vec(-3.0f64..3.0, o * i * k * k).prop_map(move |d| Tensor::new(vec![o, i, k, k], d).unwrap())
    })
}

fn scheme() -> impl Strategy<Value = GroupScheme> {
    prop_oneof![Just(GroupScheme::PerElement), Just(GroupScheme::PerFilter)]
}

fn penalty_for(t: &Tensor, scheme: GroupScheme, lambda: f64) -> Penalty {
    Penalty::new(Grouping::new(scheme, t.shape()).unwrap(), lambda).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prox_agrees_with_numeric_oracle(v in conv_tensor(), s in scheme(), lambda in 0.0f64..2.0) {
        let p = penalty_for(&v, s, lambda);
        let fast = p.prox(&v, 1.0).unwrap();
        let slow = prox_oracle(&v, &p).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) < 1e-8);
    }

    #[test]
    fn prox_zeroes_exactly_the_small_groups(v in conv_tensor(), s in scheme(), lambda in 0.0f64..3.0, kappa in 0.1f64..5.0) {
        let p = penalty_for(&v, s, lambda);
        let out = p.prox(&v, kappa).unwrap();
        let vin = p.grouping.group_norms(&v);
        let vout = p.grouping.group_norms(&out);
        for (a, b) in vin.iter().zip(&vout) {
            prop_assert_eq!(*a <= lambda, *b == 0.0);
        }
    }

    #[test]
    fn prox_is_kappa_homogeneous(v in conv_tensor(), s in scheme(), lambda in 0.0f64..2.0, kappa in 0.1f64..5.0) {
        let p = penalty_for(&v, s, lambda);
        let scaled = p.prox(&v, kappa).unwrap();
        let unit = p.prox(&v, 1.0).unwrap().scale(kappa);
        prop_assert!(scaled.max_abs_diff(&unit) <= 1e-12 * (1.0 + unit.max_abs()));
    }

    #[test]
    fn prox_is_nonexpansive(
        (a, b) in conv_tensor().prop_flat_map(|a| {
            let shape = a.shape().to_vec();
            let n = a.len();
            (Just(a), prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap()))
        }),
        s in scheme(),
        lambda in 0.0f64..2.0,
    ) {
        let p = penalty_for(&a, s, lambda);
        let pa = p.prox(&a, 1.0).unwrap();
        let pb = p.prox(&b, 1.0).unwrap();
        prop_assert!(pa.sub(&pb).norm() <= a.sub(&b).norm() + 1e-12);
    }

    #[test]
    fn prox_residual_is_a_subgradient(v in conv_tensor(), s in scheme(), lambda in 0.0f64..2.0, kappa in 0.1f64..5.0) {
        // With Gamma = kappa Prox(V), g = V - Gamma/kappa lies in the subdifferential at Gamma.
        let p = penalty_for(&v, s, lambda);
        let gamma = p.prox(&v, kappa).unwrap();
        let g = v.zip_map(&gamma, |a, b| a - b / kappa);
        prop_assert!(p.dual_feasible(&g, 1e-9));
        prop_assert!(p.subgradient_violation(&g, &gamma) <= 1e-9);
    }

    #[test]
    fn bregman_is_nonnegative_on_feasible_triples(
        v in conv_tensor(),
        other in prop::collection::vec(-3.0f64..3.0, 64),
        s in scheme(),
        lambda in 0.01f64..2.0,
    ) {
        let p = penalty_for(&v, s, lambda);
        let gamma_ref = p.prox(&v, 1.0).unwrap();
        let g_ref = v.sub(&gamma_ref);
        let gamma = Tensor::new(v.shape().to_vec(), other[..v.len()].to_vec()).unwrap();
        prop_assert!(p.bregman_div(&gamma, &gamma_ref, &g_ref).unwrap() >= -1e-12);
    }

    #[test]
    fn sparsity_ignores_order_and_scale(
        data in prop::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 1..40),
        c in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let t = Tensor::from_vec(data.clone());
        let mut perm = data;
        let n = perm.len();
        for i in (1..n).rev() {
            perm.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let base = sparsity(&t);
        prop_assert_eq!(base, sparsity(&Tensor::from_vec(perm)));
        prop_assert_eq!(base, sparsity(&t.scale(c)));
    }

    #[test]
    fn support_mask_scale_invariant_and_projection_idempotent(v in conv_tensor(), s in scheme(), c in 1e-3f64..1e3) {
        let p = penalty_for(&v, s, 1.0);
        let gamma = p.prox(&v, 1.0).unwrap();
        let m = support_mask(&gamma, &p.grouping).unwrap();
        prop_assert_eq!(&m, &support_mask(&gamma.scale(c), &p.grouping).unwrap());
        let once = project_model(&v, &m).unwrap();
        prop_assert_eq!(&once, &project_model(&once, &m).unwrap());
    }

    #[test]
    fn config_round_trips_through_text(seed in any::<u64>(), lambda in 0.0f64..10.0, epochs in 0usize..500) {
        let cfg = common::blobs_mlp(seed, lambda, epochs);
        let text = emit_config(&cfg).unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20), 0..5),
    ) {
        let mut ckpt = Checkpoint { meta: "probe".into(), entries: Vec::new() };
        for (i, d) in tensors.into_iter().enumerate() {
            ckpt.push(i as u32, "w", Tensor::from_vec(d));
        }
        let back = checkpoint::decode(&checkpoint::encode(&ckpt).unwrap()).unwrap();
        for (a, b) in ckpt.entries.iter().zip(&back.entries) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn softplus_sits_above_relu_within_ln2_over_c(x in -50.0f64..50.0, c in 0.5f64..50.0) {
        let s = Activation::Softplus { c }.apply(x);
        let r = x.max(0.0);
        prop_assert!(s >= r - 1e-12);
        prop_assert!(s - r <= std::f64::consts::LN_2 / c + 1e-12);
    }
}
