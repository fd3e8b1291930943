mod common;

use common::{ctc_instance, ctc_oracle};
use multires_core::ctc::{ctc_brute_force, ctc_forward_backward, ctc_loss_value, LabelSeq};
use multires_core::{SplitMix, Tensor};
use proptest::prelude::*;

#[test]
fn forward_recursion_matches_enumeration() {
    assert!(ctc_oracle(300, 11) < 1e-9);
}

#[test]
fn inadmissible_targets_agree_on_infinity() {
    let lp = Tensor::full(&[2, 3], (1.0f64 / 3.0).ln());
    let labels = LabelSeq::new(vec![1, 1]).unwrap();
    assert_eq!(ctc_loss_value(&lp, &labels).unwrap(), f64::INFINITY);
    assert_eq!(ctc_brute_force(&lp, &labels).unwrap(), f64::INFINITY);
}

#[test]
fn gradient_rows_are_negative_occupancies() {
    let mut rng = SplitMix::new(5);
    for _ in 0..50 {
        let (lp, labels) = ctc_instance(&mut rng);
        let (_, grad) = ctc_forward_backward(&lp, &labels).unwrap();
        for t in 0..grad.rows() {
            let s: f64 = grad.row(t).iter().sum();
            assert!((s + 1.0).abs() < 1e-9, "frame {t} occupancy {s}");
            assert!(grad.row(t).iter().all(|&v| v <= 0.0));
        }
    }
}

fn normalize(rows: &mut [Vec<f64>]) -> Tensor {
    for r in rows.iter_mut() {
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative(seed in any::<u64>()) {
        let (lp, labels) = ctc_instance(&mut SplitMix::new(seed));
        prop_assert!(ctc_loss_value(&lp, &labels).unwrap() >= 0.0);
    }

    /// Token 3 lies on no admissible path; shifting its mass onto any other
    /// token never raises the loss.
    #[test]
    fn moving_mass_onto_target_paths_lowers_loss(
        seed in any::<u64>(),
        frames in 2usize..7,
        frame in 0usize..7,
        dest in 0usize..3,
    ) {
        let frame = frame % frames;
        let mut rng = SplitMix::new(seed);
        let labels = LabelSeq::new(vec![1, 2]).unwrap();
        let base: Vec<Vec<f64>> = (0..frames).map(|_| (0..4).map(|_| 0.05 + rng.next_f64()).collect()).collect();
        let mut prev = f64::INFINITY;
        for step in 0..=4 {
            let mut rows = base.clone();
            let z: f64 = rows[frame].iter().sum();
            let moved = rows[frame][3] * step as f64 / 4.0;
            rows[frame][3] -= moved;
            rows[frame][dest] += moved;
            rows[frame][3] += 1e-12 * z;
            let loss = ctc_loss_value(&normalize(&mut rows), &labels).unwrap();
            prop_assert!(loss <= prev + 1e-12, "step {step}: {loss} > {prev}");
            prev = loss;
        }
    }
}
