use std::sync::Arc;

use ndarray::{Array3, Array4};
use num_complex::Complex;
use proptest::prelude::*;
use qmri::acquisition::{acceleration_factor, make_mask, EncodingOperator, MaskPattern};
use qmri::eval::nrmse;
use qmri::neural_fields::{coordinate_grid, FieldConfig, HashEncodingConfig, Head, NeuralField};
use qmri::phantom::{make_coil_maps, make_phantom};
use qmri::signal::{build_dictionary, default_dictionary_grid, FrameConsts, SequenceKind, SequenceProtocol, TissueParams, WeightedImages};
use qmri::subspace::{compose_weighted, project_to_subspace, relative_error, temporal_basis, SpatialBases};
use qmri::MapKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = Complex<f64>;

fn random_array4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<C> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || C::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

fn short_protocol(frames: usize) -> SequenceProtocol {
    SequenceProtocol {
        flip_deg: vec![8.0, 25.0],
        te_ms: (0..frames / 2).map(|e| 2.0 + 3.0 * e as f64).collect(),
        ..SequenceProtocol::vfa_megre_default()
    }
}

fn patterns() -> impl Strategy<Value = MaskPattern> {
    prop_oneof![
        Just(MaskPattern::Full),
        Just(MaskPattern::UniformRandom),
        Just(MaskPattern::VariableDensity),
        Just(MaskPattern::ComplementaryShift),
    ]
}

fn tissue() -> impl Strategy<Value = TissueParams<f64>> {
    (0.1..2.0f64, 300.0..4000.0f64, 20.0..300.0f64, 5.0..200.0f64, -3.0..3.0f64, -20.0..20.0f64).prop_map(|(a, t1, t2, t2s, phi0, freq)| TissueParams {
        a,
        b: 1.0,
        t1,
        t2,
        t2s,
        phi0,
        freq,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phantom_is_deterministic_and_physical(h in 8usize..20, w in 8usize..20, d in 8usize..12, seed in 0u64..1000) {
        let a = make_phantom::<f64>([h, w, d], seed).unwrap();
        let b = make_phantom::<f64>([h, w, d], seed).unwrap();
        for kind in MapKind::ALL {
            prop_assert_eq!(a.map(kind), b.map(kind));
        }
        prop_assert_eq!(&a.brain_mask, &b.brain_mask);
        for (idx, &m) in a.brain_mask.indexed_iter() {
            if m {
                let (t1, t2, t2s) = (a.map(MapKind::T1)[idx], a.map(MapKind::T2)[idx], a.map(MapKind::T2s)[idx]);
                prop_assert!(t1 > t2 && t2 >= t2s, "{t1} {t2} {t2s}");
            }
        }
    }

    #[test]
    fn coil_maps_have_unit_rss(h in 8usize..16, w in 8usize..16, d in 2usize..6, coils in 2usize..6, seed in 0u64..1000) {
        let c = make_coil_maps::<f64>([h, w, d], coils, seed).unwrap();
        let n = h * w * d;
        for v in 0..n {
            let rss: f64 = (0..coils).map(|k| c.coil(k)[v].norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((rss - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inversion_model_reduces_to_vfa(p in tissue(), tau in 0.0..100.0f64, flip in 2.0..60.0f64, te in 1.0..40.0f64, seg in 0usize..8) {
        // b * exp(-tau / T2) = 1 removes the preparation term
        let prepared = TissueParams { b: (tau / p.t2).exp(), ..p };
        let ir = SequenceProtocol { kind: SequenceKind::T2irGre, tr_ms: 8.0, te_ms: vec![te], flip_deg: vec![flip], tau_ms: vec![tau], n_segments: seg + 1 };
        let vfa = SequenceProtocol { kind: SequenceKind::VfaMegre, tr_ms: 8.0, te_ms: vec![te], flip_deg: vec![flip], tau_ms: vec![], n_segments: 0 };
        let reference = FrameConsts::<f64>::for_protocol(&vfa)[0].signal(&p);
        for f in FrameConsts::<f64>::for_protocol(&ir) {
            let s = f.signal(&prepared);
            prop_assert!((s - reference).norm() <= 1e-12 * reference.norm().max(1e-300));
        }
    }

    #[test]
    fn signal_decays_with_te_and_is_linear_in_a(p in tissue(), c in 0.1..10.0f64) {
        let proto = SequenceProtocol::vfa_megre_default();
        let frames = FrameConsts::<f64>::for_protocol(&proto);
        let specs = proto.frames();
        let scaled = TissueParams { a: c * p.a, ..p };
        for t in 0..frames.len() {
            let s = frames[t].signal(&p);
            prop_assert!((frames[t].signal(&scaled) - s * c).norm() <= 1e-12 * (c * s.norm()).max(1e-300));
            let expected = p.phi0 + std::f64::consts::TAU * p.freq * specs[t].te_ms * 1e-3;
            let dphi = (s.arg() - expected).rem_euclid(std::f64::consts::TAU);
            prop_assert!(dphi.min(std::f64::consts::TAU - dphi) < 1e-9);
            if t + 1 < frames.len() && specs[t + 1].preparation == specs[t].preparation {
                prop_assert!(frames[t + 1].signal(&p).norm() < s.norm());
            }
        }
    }

    #[test]
    fn encoding_adjoint_and_linearity(pattern in patterns(), seed in 0u64..10_000, r in 2.0..4.0f64) {
        let shape = [10, 8, 4];
        let frames = 4;
        let protocol = short_protocol(frames);
        let coils = make_coil_maps::<f64>(shape, 3, seed).unwrap();
        let r = if pattern == MaskPattern::Full { 1.0 } else { r };
        let mask = Arc::new(make_mask([10, 8, 4, frames], pattern, r, [0, 0, 0], seed).unwrap());
        let op = EncodingOperator::new(&mask);
        let x = random_array4((frames, 10, 8, 4), seed);
        let z = random_array4((frames, 10, 8, 4), seed + 1);
        let mut y = op.forward_images(&z, &coils, &protocol).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for v in y.values_mut() {
            *v = C::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        let ax = op.forward_images(&x, &coils, &protocol).unwrap();
        let aty = op.adjoint_images(&y, &coils).unwrap();
        let lhs: C = ax.values().iter().zip(y.values()).map(|(a, b)| a.conj() * b).sum();
        let rhs: C = x.iter().zip(aty.iter()).map(|(a, b)| a.conj() * b).sum();
        prop_assert!((lhs - rhs).norm() < 1e-6 * lhs.norm().max(1.0));

        let (a, b) = (0.7, -1.3);
        let combo = &x * a + &z * b;
        let lin = op.forward_images(&combo, &coils, &protocol).unwrap();
        let az = op.forward_images(&z, &coils, &protocol).unwrap();
        for ((l, p), q) in lin.values().iter().zip(ax.values()).zip(az.values()) {
            prop_assert!((l - (p * a + q * b)).norm() < 1e-6);
        }
    }

    #[test]
    fn masks_hit_the_requested_acceleration(pattern in patterns(), r in 2.0..12.0f64, seed in 0u64..10_000) {
        let r = if pattern == MaskPattern::Full { 1.0 } else { r };
        let mask = make_mask([32, 32, 4, 6], pattern, r, [0, 0, 0], seed).unwrap();
        let got = acceleration_factor(&mask).unwrap();
        prop_assert!((got - r).abs() <= 0.02 * r, "{got} vs {r}");
    }

    #[test]
    fn subspace_projection_is_idempotent_and_compose_linear(seed in 0u64..10_000, k in 2usize..8) {
        let protocol = short_protocol(8);
        let dict = build_dictionary::<f64>(&protocol, &default_dictionary_grid(&protocol)).unwrap();
        let phi = temporal_basis(&dict, k).unwrap();
        let iw = WeightedImages::new(random_array4((8, 6, 5, 3), seed), protocol.clone()).unwrap();
        let once = compose_weighted(&project_to_subspace(&iw, &phi).unwrap(), &phi, &protocol).unwrap();
        let twice = compose_weighted(&project_to_subspace(&once, &phi).unwrap(), &phi, &protocol).unwrap();
        prop_assert!(relative_error(&twice.data, &once.data) < 1e-10);

        let u1 = SpatialBases { u: random_array4((k, 6, 5, 3), seed + 1) };
        let u2 = SpatialBases { u: random_array4((k, 6, 5, 3), seed + 2) };
        let sum = SpatialBases { u: &u1.u * 2.0 + &u2.u };
        let lhs = compose_weighted(&sum, &phi, &protocol).unwrap();
        let rhs = &compose_weighted(&u1, &phi, &protocol).unwrap().data * 2.0 + &compose_weighted(&u2, &phi, &protocol).unwrap().data;
        prop_assert!(relative_error(&lhs.data, &rhs) < 1e-12);
    }

    #[test]
    fn captured_energy_grows_with_rank(k in 1usize..14) {
        let protocol = SequenceProtocol::vfa_megre_default();
        let dict = build_dictionary::<f64>(&protocol, &default_dictionary_grid(&protocol)).unwrap();
        let lo = temporal_basis(&dict, k).unwrap().captured_energy();
        let hi = temporal_basis(&dict, k + 1).unwrap().captured_energy();
        prop_assert!(hi >= lo);
    }

    #[test]
    fn fields_are_deterministic(seed in 0u64..10_000) {
        let shape = [6, 5, 4];
        let cfg = FieldConfig::new(HashEncodingConfig::for_coils(shape), Head::ComplexTwoHead, 2);
        let coords = coordinate_grid::<f64>(shape).unwrap();
        let a = NeuralField::<f64>::new(cfg, seed).unwrap().forward(&coords).unwrap();
        let b = NeuralField::<f64>::new(cfg, seed).unwrap().forward(&coords).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nrmse_is_scale_homogeneous(seed in 0u64..10_000, c in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Array3::from_shape_simple_fn((4, 4, 3), || rng.random_range(0.5..2.0));
        let pred = Array3::from_shape_simple_fn((4, 4, 3), || rng.random_range(0.5..2.0));
        let mask = Array3::from_shape_simple_fn((4, 4, 3), || rng.random_bool(0.7));
        prop_assume!(mask.iter().any(|&m| m));
        let base = nrmse(&pred, &gt, None, &mask).unwrap();
        let scaled = nrmse(&pred.mapv(|v| c * v), &gt.mapv(|v| c * v), None, &mask).unwrap();
        prop_assert!((base - scaled).abs() < 1e-12 * base.max(1.0));
    }
}
