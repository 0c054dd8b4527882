//! Property-based invariants: broadcasting algebra, schedule monotonicity,
//! RNG stream stability, CFG linearity, fixed-point closed forms, and
//! bit-exact checkpoint round trips.

use std::sync::Arc;

use proptest::prelude::*;

use lodslab_core::denoiser::Cond;
use lodslab_core::harness::{load_checkpoint, save_checkpoint};
use lodslab_core::oracle::{cfg_fixed_point, GaussianSandbox};
use lodslab_core::priors::{cfg_combine, sds_grad};
use lodslab_core::rng::{lane, stream};
use lodslab_core::schedule::NoiseSchedule;
use lodslab_core::Tensor;

fn sched() -> Arc<NoiseSchedule> {
    Arc::new(NoiseSchedule::default_linear())
}

proptest! {
    #[test]
    fn reshape_preserves_data(v in prop::collection::vec(-1e6_f64..1e6, 1..64)) {
        let n = v.len();
        let t = Tensor::from_vec(v.clone(), &[n]).unwrap();
        let r = t.reshape(&[1, n]).unwrap().reshape(&[n, 1]).unwrap();
        prop_assert_eq!(r.data(), &v[..]);
        prop_assert_eq!(r.shape(), &[n, 1]);
    }

    #[test]
    fn add_commutes_and_sub_inverts(
        a in prop::collection::vec(-1e3_f64..1e3, 8),
        b in prop::collection::vec(-1e3_f64..1e3, 8),
    ) {
        let ta = Tensor::from_vec(a, &[2, 4]).unwrap();
        let tb = Tensor::from_vec(b, &[2, 4]).unwrap();
        let ab = ta.add(&tb).unwrap();
        let ba = tb.add(&ta).unwrap();
        prop_assert_eq!(ab.data(), ba.data());
        let back = ta.add(&tb).unwrap().sub(&tb).unwrap();
        for (x, y) in back.data().iter().zip(ta.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn schedule_is_monotone_and_pythagorean(t in 0_usize..1000) {
        let s = sched();
        let a: f64 = s.alpha(t).unwrap();
        let g: f64 = s.sigma(t).unwrap();
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!((0.0..1.0).contains(&g));
        prop_assert!((a * a + g * g - 1.0).abs() < 1e-12);
        if t + 1 < 1000 {
            let a2: f64 = s.alpha(t + 1).unwrap();
            let g2: f64 = s.sigma(t + 1).unwrap();
            prop_assert!(a2 < a);
            prop_assert!(g2 > g);
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_lane_separated(seed in any::<u64>(), a in 0_u64..32, b in 0_u64..32) {
        let draw = |seed, path: &[u64]| Tensor::<f64>::randn(&[4], &mut stream(seed, path)).data().to_vec();
        prop_assert_eq!(draw(seed, &[lane::NOISE, a]), draw(seed, &[lane::NOISE, a]));
        if a != b {
            prop_assert_ne!(draw(seed, &[lane::NOISE, a]), draw(seed, &[lane::NOISE, b]));
            prop_assert_ne!(draw(seed, &[a]), draw(seed, &[a, b]));
        }
    }

    #[test]
    fn cfg_is_affine_in_w(w in -50.0_f64..200.0) {
        let ey = Tensor::from_vec(vec![0.3, -1.2, 0.7], &[3]).unwrap();
        let en = Tensor::from_vec(vec![-0.5, 0.4, 2.0], &[3]).unwrap();
        let got = cfg_combine(&ey, &en, w).unwrap();
        for i in 0..3 {
            let want = en.data()[i] + w * (ey.data()[i] - en.data()[i]);
            prop_assert!((got.data()[i] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn sds_grad_is_affine_in_w(w in -5.0_f64..50.0, t in 1_usize..999, x in -3.0_f64..3.0) {
        let sb = GaussianSandbox::unit_1d(sched());
        let d = sb.denoiser::<f64>();
        let xt = Tensor::from_vec(vec![x], &[1]).unwrap();
        let eps = Tensor::<f64>::randn(&[1], &mut stream(7, &[lane::NOISE, t as u64]));
        let g = |w| sds_grad(&d, &xt, Cond::Class(0), w, t, &eps).unwrap().data()[0];
        let (g0, g1, gw) = (g(0.0), g(1.0), g(w));
        let want = g0 + w * (g1 - g0);
        prop_assert!((gw - want).abs() < 1e-9 * want.abs().max(1.0), "{gw} vs {want}");
    }

    #[test]
    fn equal_variance_fixed_point_is_the_w_line(w in 0.0_f64..500.0) {
        // unit_1d: mu_null = 0, mu_y = 1, shared variances.
        let sb = GaussianSandbox::unit_1d(sched());
        let x = cfg_fixed_point(&sb, w, None).unwrap();
        prop_assert!((x.data()[0] - w).abs() < 1e-9 * w.abs().max(1.0));
        prop_assert!(cfg_fixed_point(&sb, -1.0 - w, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_for_any_floats(
        bits in prop::collection::vec(any::<u64>(), 1..32),
        cols in 1_usize..5,
    ) {
        // Raw bit patterns: exercises NaN payloads and infinities too.
        let vals: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
        let n = vals.len();
        let shape = if n.is_multiple_of(cols) { vec![n / cols, cols] } else { vec![n] };
        let t = Tensor::from_vec(vals, &shape).unwrap();
        let dir = std::env::temp_dir().join(format!("lodslab-props-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("rt-{}.ckpt", bits.first().unwrap()));
        save_checkpoint(&path, &[("x".to_string(), t.clone())]).unwrap();
        let entries = load_checkpoint::<f64>(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(entries.len(), 1);
        prop_assert_eq!(entries[0].1.shape(), t.shape());
        for (a, b) in entries[0].1.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
