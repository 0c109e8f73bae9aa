use aal_core::attack::{apply_attack, fgsm_ascent_delta, kernel, pgd_observed, selective_perturbation};
use aal_core::attention::{
    attention_map, backtrack, coupling_gain, rank_normalize, AssociationParams, AttentionState,
    CouplingHistory, SpatialAttentionParams,
};
use aal_core::data::pgm::encode_pgm;
use aal_core::rng::{stream_rng, Stream};
use aal_core::{AttackConfig, KernelKind, Mode, SmallCnn, SmallCnnConfig, Tensor};
use proptest::prelude::*;

fn maps(n: usize, h: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n * h * h)
}

fn map(n: usize, h: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([n, 1, h, h], v.to_vec()).unwrap()
}

/// Random inputs for [`backtrack`]: `(h, m, m_hat, gamma, grad_delta)`.
fn backtrack_inputs() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|h| {
        (
            Just(h),
            maps(2, h, 0.0, 1.0),
            maps(2, h, -2.0, 3.0),
            proptest::collection::vec(-50.0..50.0f64, 2 * h),
            maps(2, h, -1.0, 1.0),
        )
    })
}

fn clamp01(t: &Tensor<f64>) -> Vec<f64> {
    t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn associative_attention_stays_in_unit_interval(
        (h, m, m_hat, gamma, gd) in backtrack_inputs(),
        xi2 in 0.0..10.0f64,
        zeta in 0.0..=1.0f64,
    ) {
        let out = backtrack(
            &map(2, h, &m_hat), &map(2, h, &m),
            &Tensor::from_vec([2, h], gamma).unwrap(), &map(2, h, &gd), xi2, zeta,
        ).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_xi2_or_unit_zeta_is_a_pure_clamp(
        (h, m, m_hat, gamma, gd) in backtrack_inputs(),
        xi2 in 0.0..10.0f64,
        zeta in 0.0..=1.0f64,
    ) {
        let gamma = Tensor::from_vec([2, h], gamma).unwrap();
        let (m, m_hat, gd) = (map(2, h, &m), map(2, h, &m_hat), map(2, h, &gd));
        let expect = clamp01(&m_hat);
        prop_assert_eq!(backtrack(&m_hat, &m, &gamma, &gd, 0.0, zeta).unwrap().data().to_vec(), expect.clone());
        prop_assert_eq!(backtrack(&m_hat, &m, &gamma, &gd, xi2, 1.0).unwrap().data().to_vec(), expect);
    }

    #[test]
    fn raising_zeta_only_shrinks_the_projected_set(
        (h, m, m_hat, gamma, gd) in backtrack_inputs(),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let gamma = Tensor::from_vec([2, h], gamma).unwrap();
        let (m, m_hat, gd) = (map(2, h, &m), map(2, h, &m_hat), map(2, h, &gd));
        let out_lo = backtrack(&m_hat, &m, &gamma, &gd, 0.1, lo).unwrap();
        let out_hi = backtrack(&m_hat, &m, &gamma, &gd, 0.1, hi).unwrap();
        let plain = clamp01(&m_hat);
        for i in 0..plain.len() {
            if out_hi.data()[i] != plain[i] {
                prop_assert_eq!(out_lo.data()[i], out_hi.data()[i]);
            }
        }
    }

    #[test]
    fn association_without_history_never_backtracks(
        h in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> {
            use rand::Rng;
            (0..2 * h * h).map(|_| rng.random_range(lo..hi)).collect()
        };
        let (m, gm, gd, d) = (draw(0.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-0.1, 0.1));
        let state = AttentionState::associate(
            map(2, h, &m), &map(2, h, &gm), map(2, h, &gd), &map(2, h, &d), None,
            &AssociationParams::default(),
        ).unwrap();
        prop_assert!(state.gamma.data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(state.m_assoc.data().to_vec(), clamp01(&state.m_hat));
    }

    #[test]
    fn rank_is_scale_invariant_and_permutation_equivariant(
        g in proptest::collection::vec(-4i32..4, 16),
        scale in prop_oneof![-100.0..-0.01f64, 0.01..100.0f64],
        rot in 0usize..16,
    ) {
        // Integer-valued inputs keep `c·g` exactly ordered, ties included.
        let g: Vec<f64> = g.into_iter().map(f64::from).collect();
        let base = rank_normalize(&map(1, 4, &g)).unwrap();
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        prop_assert_eq!(rank_normalize(&map(1, 4, &scaled)).unwrap().data().to_vec(), base.data().to_vec());

        let mut rotated = g.clone();
        rotated.rotate_left(rot);
        let mut expect = base.data().to_vec();
        expect.rotate_left(rot);
        prop_assert_eq!(rank_normalize(&map(1, 4, &rotated)).unwrap().data().to_vec(), expect);
        prop_assert!(base.data().iter().all(|&r| (0.0..1.0).contains(&r)));
    }

    #[test]
    fn attention_ignores_channel_order(
        feats in maps(3, 5, 0.0, 2.0),
        weights in proptest::collection::vec(-0.5..0.5f64, 18),
        rot in 0usize..3,
    ) {
        // `feats` is read as one sample with three channels.
        let params = SpatialAttentionParams {
            weight: Tensor::from_vec([1, 2, 3, 3], weights).unwrap(),
            bias: Tensor::from_vec([1], vec![0.1]).unwrap(),
        };
        let plane = 25;
        let mut permuted = feats.clone();
        permuted.rotate_left(rot * plane);
        let a = attention_map(&Tensor::from_vec([1, 3, 5, 5], feats).unwrap(), &params).unwrap();
        let b = attention_map(&Tensor::from_vec([1, 3, 5, 5], permuted).unwrap(), &params).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn coupling_is_zero_without_history_and_finite_with_it(
        h in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::Init, 1);
        let mut draw = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..n * h * h).map(|_| rng.random_range(lo..hi)).collect()
        };
        let (gd, m, d) = (draw(-1.0, 1.0, 2), draw(0.0, 1.0, 2), draw(-0.1, 0.1, 2));
        let c = coupling_gain(&map(2, h, &gd), &map(2, h, &m), &map(2, h, &d), None, 1e-6).unwrap();
        prop_assert!(c.gamma.data().iter().all(|&v| v == 0.0));
        let hist = CouplingHistory { prev_m: map(1, h, &draw(0.0, 1.0, 1)), prev_delta: map(1, h, &draw(-0.1, 0.1, 1)) };
        let c = coupling_gain(&map(2, h, &gd), &map(2, h, &m), &map(2, h, &d), Some(&hist), 1e-6).unwrap();
        prop_assert!(c.gamma.all_finite());
    }

    #[test]
    fn selective_perturbation_is_bounded_by_epsilon(
        m in maps(2, 4, 0.0, 1.0),
        g in proptest::collection::vec(-1.0..1.0f32, 2 * 3 * 16),
        x in proptest::collection::vec(0.0..=1.0f32, 2 * 3 * 16),
        eps in 0.0..0.5f32,
        kind in prop::sample::select(KernelKind::ALL.to_vec()),
    ) {
        let m: Vec<f32> = m.into_iter().map(|v| v as f32).collect();
        let m = Tensor::from_vec([2, 1, 4, 4], m).unwrap();
        let delta = fgsm_ascent_delta(&Tensor::from_vec([2, 3, 4, 4], g).unwrap(), eps).unwrap();
        let k = kernel(&m, kind).unwrap();
        prop_assert!(k.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let eta = selective_perturbation(&k, &delta).unwrap();
        prop_assert!(eta.max_abs() <= eps);
        let adv = apply_attack(&Tensor::from_vec([2, 3, 4, 4], x).unwrap(), &eta).unwrap();
        prop_assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_finite_agrees_with_elementwise_scan(
        mut v in proptest::collection::vec(-1e30..1e30f32, 0..40),
        poison in proptest::option::of((0usize..40, prop::sample::select(vec![f32::NAN, f32::INFINITY, f32::NEG_INFINITY]))),
    ) {
        if let Some((at, bad)) = poison {
            if !v.is_empty() {
                let at = at % v.len();
                v[at] = bad;
            }
        }
        let expect = v.iter().all(|x| x.is_finite());
        let n = v.len();
        prop_assert_eq!(Tensor::from_vec([n], v).unwrap().all_finite(), expect);
    }

    #[test]
    fn pgm_bytes_saturate_and_round(v in proptest::collection::vec(-1.0..2.0f64, 1..32)) {
        let n = v.len();
        let bytes = encode_pgm(&v, n, 1).unwrap();
        let header = format!("P5\n{n} 1\n255\n");
        prop_assert_eq!(&bytes[..header.len()], header.as_bytes());
        for (b, x) in bytes[header.len()..].iter().zip(&v) {
            prop_assert_eq!(*b as f64, (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pgd_iterates_stay_in_ball_and_box(
        seed in any::<u64>(),
        eps in 0.0..0.3f64,
        shaped in any::<bool>(),
    ) {
        let config = SmallCnnConfig { widths: [2, 2, 2], ..Default::default() };
        let mut model = SmallCnn::<f32>::new(config, &mut stream_rng(seed, Stream::Init, 0)).unwrap();
        model.set_mode(Mode::Inference);
        let mut rng = stream_rng(seed, Stream::EvalAttack, 0);
        use rand::Rng;
        let x: Vec<f32> = (0..2 * 28 * 28).map(|_| rng.random_range(0.0..=1.0)).collect();
        let x = Tensor::from_vec([2, 1, 28, 28], x).unwrap();
        let k_map = shaped.then(|| Tensor::<f32>::full([2, 1, 28, 28], 0.7));
        let attack = AttackConfig::pgd(eps, eps / 4.0, 4);
        let eps32 = eps as f32;
        let mut worst = 0.0f32;
        let mut outside = 0;
        pgd_observed(&model, &x, &[3, 7], &attack, k_map.as_ref(), &mut rng, |_, it| {
            for (a, b) in it.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
                outside += usize::from(!(0.0..=1.0).contains(a));
            }
        }).unwrap();
        prop_assert!(worst <= eps32, "{} > {}", worst, eps32);
        prop_assert_eq!(outside, 0);
    }
}
