mod common;

use common::{naive_defects, random_instance, to_library, NaiveFunction, NaiveInstance, NaiveMask};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slowavg::averaging::{deviation_measure, deviation_measure_enumerated};
use slowavg::cylinder::DigitPos;
use slowavg::lattice::SystemSpec;
use slowavg::observables::Mode;
use slowavg::scalar::rat;
use slowavg::towers::RokhlinTower;
use slowavg::Rational;

fn random_threshold<R: Rng>(rng: &mut R) -> Rational {
    Rational::new(BigInt::from(rng.gen_range(0..=12)), BigInt::from(rng.gen_range(1..=16)))
}

#[test]
fn exact_deviation_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = 1 + case % 2;
        let inst = random_instance(&mut rng, n, 12);
        let window = rng.gen_range(1..=16);
        let t = random_threshold(&mut rng);
        let spec = SystemSpec::odometer(n).unwrap();
        let f = to_library(&inst);
        let got = deviation_measure(&spec, &f, window, &t, Mode::Exact).unwrap();
        assert_eq!(got.measure.exact.unwrap(), inst.deviation(window, &t), "case {case}: {inst:?} N={window}");
        assert_eq!(got.integral.exact.unwrap(), inst.integral());
    }
}

#[test]
fn literal_enumerator_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 1, 8);
        let window = rng.gen_range(1..=8);
        let t = random_threshold(&mut rng);
        let got = deviation_measure_enumerated(&to_library(&inst), window, &t, 1 << 24).unwrap();
        assert_eq!(got, inst.deviation(window, &t));
    }
}

#[test]
fn defects_match_enumeration() {
    for (n, m, digits, thr, window) in [
        (1usize, 3u32, vec![(0usize, 4u32), (0, 5)], 1u64, 3u64),
        (1, 4, vec![(0, 6), (0, 5)], 3, 7),
        (1, 2, vec![(0, 3)], 1, 3),
        (2, 2, vec![(0, 3), (1, 3)], 1, 2),
        (2, 3, vec![(1, 4)], 1, 5),
        (2, 2, vec![(0, 4), (1, 3), (0, 5)], 5, 3),
    ] {
        let positions = digits.iter().map(|&(s, p)| DigitPos::new(s, p)).collect();
        let t = RokhlinTower::with_refinement(n, m, positions, thr).unwrap();
        let (outer, inner) = t.measured_defects(window).unwrap();
        let naive = naive_defects(n, NaiveMask { level_depth: m, digits, threshold: thr }, window);
        assert_eq!((outer, inner), naive, "n={n} h=2^{m} N={window}");
        let b = t.defect_bounds(window).unwrap();
        assert!(naive_le(&t.measured_defects(window).unwrap(), &(b.outer, b.inner)));
    }
}

fn naive_le(a: &(Rational, Rational), b: &(Rational, Rational)) -> bool {
    a.0 <= b.0 && a.1 <= b.1
}

#[test]
fn first_flagship_step_against_enumeration() {
    // f_1 = 2 * 1_{X \ U_1}, U_1 of height 2^11 on digits 12 and 13.
    let inst = NaiveInstance {
        f: NaiveFunction { n: 1, depth: 0, table: vec![2], den: 1 },
        masks: vec![NaiveMask { level_depth: 11, digits: vec![(0, 12), (0, 13)], threshold: 1 }],
    };
    assert_eq!(inst.integral(), rat(3, 2));
    let exact = inst.deviation(5, &rat(1, 8));
    assert_eq!(exact, rat(4095, 4096));

    let spec = SystemSpec::odometer(1).unwrap();
    let f = to_library(&inst);
    let got = deviation_measure(&spec, &f, 5, &rat(1, 8), Mode::Exact).unwrap();
    assert_eq!(got.measure.exact.unwrap(), exact);

    let mc = deviation_measure(&spec, &f, 5, &rat(1, 8), Mode::monte_carlo(100_000, 5)).unwrap();
    let gap = (mc.measure.value - 4095.0 / 4096.0).abs();
    assert!(gap <= mc.measure.error_bound, "gap {gap} radius {}", mc.measure.error_bound);
}

#[test]
fn monte_carlo_within_hoeffding_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut inside = 0;
    let trials = 40;
    for seed in 0..trials {
        let n = 1 + seed as usize % 2;
        let inst = random_instance(&mut rng, n, 10);
        let window = rng.gen_range(1..=8);
        let t = random_threshold(&mut rng);
        let exact = inst.deviation(window, &t);
        let spec = SystemSpec::odometer(n).unwrap();
        let mc = deviation_measure(&spec, &to_library(&inst), window, &t, Mode::monte_carlo(20_000, seed)).unwrap();
        let e = num_traits::ToPrimitive::to_f64(&exact).unwrap();
        if (mc.measure.value - e).abs() <= mc.measure.error_bound {
            inside += 1;
        }
    }
    assert!(inside >= trials - 1, "{inside}/{trials}");
}
