use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roisep_core::cruse::checkpoint::{decode_checkpoint, encode_checkpoint};
use roisep_core::cruse::{CruseConfig, CruseParams};
use roisep_core::dsp::{channel_average, AudioBuffer, MultichannelBuffer};
use roisep_core::eval::power_reduction_db;
use roisep_core::roomsim::ArraySpec;
use roisep_core::scenegen::{classify_position, source_angle_deg, Region};
use roisep_core::train::si_sdr;

fn signal(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_reduction_ignores_common_gain(y in signal(256), t in signal(256), g in 0.01f32..10.0) {
        prop_assume!(y.iter().any(|v| v.abs() > 1e-3) && t.iter().any(|v| v.abs() > 1e-3));
        let base = power_reduction_db(&AudioBuffer::new(y.clone()).unwrap(), &AudioBuffer::new(t.clone()).unwrap()).unwrap();
        let scale = |x: &[f32]| AudioBuffer::new(x.iter().map(|v| v * g).collect()).unwrap();
        let scaled = power_reduction_db(&scale(&y), &scale(&t)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-3, "{base} vs {scaled}");
    }

    #[test]
    fn si_sdr_ignores_estimate_gain(est in signal(300), reference in signal(300), g in 0.05f32..20.0) {
        prop_assume!(reference.iter().any(|v| v.abs() > 1e-2));
        let r = AudioBuffer::new(reference).unwrap();
        let a = si_sdr(&AudioBuffer::new(est.clone()).unwrap(), &r).unwrap();
        let b = si_sdr(&AudioBuffer::new(est.iter().map(|v| v * g).collect()).unwrap(), &r).unwrap();
        prop_assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn regions_are_symmetric_about_broadside(
        x in -5.0f64..5.0,
        y in -5.0f64..5.0,
        orientation in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(x.hypot(y) > 0.1);
        let array = ArraySpec::horizontal([0.0, 0.0, 1.0], orientation);
        let (ax, bs) = (array.axis, array.broadside);
        let p = [x, y, 1.0];
        // Reflect across the broadside line: negate the along-axis component.
        let along = x * ax[0] + y * ax[1];
        let q = [x - 2.0 * along * ax[0], y - 2.0 * along * ax[1], 1.0];
        let (ap, aq) = (source_angle_deg(&array, &p).unwrap(), source_angle_deg(&array, &q).unwrap());
        prop_assert!((ap - aq).abs() < 1e-9);
        prop_assert_eq!(classify_position(&array, 60.0, &p).unwrap(), classify_position(&array, 60.0, &q).unwrap());
        // Points straight ahead are inside, straight behind are in the mirror region.
        let r = x.hypot(y);
        let ahead = [r * bs[0], r * bs[1], 1.0];
        let behind = [-r * bs[0], -r * bs[1], 1.0];
        prop_assert_eq!(classify_position(&array, 60.0, &ahead).unwrap(), Region::InsideRoi);
        prop_assert_eq!(classify_position(&array, 60.0, &behind).unwrap(), Region::MirrorForbidden);
    }

    #[test]
    fn channel_average_of_equal_channels(x in signal(128)) {
        let buf = MultichannelBuffer::new(vec![x.clone(), x.clone()]).unwrap();
        let avg = channel_average(&buf);
        prop_assert_eq!(avg.samples(), &x[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>()) {
        let p = CruseParams::init(&CruseConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&q).unwrap(), bytes);
        prop_assert_eq!(q, p);
    }
}
