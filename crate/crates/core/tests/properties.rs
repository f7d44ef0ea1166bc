use autosign::augment::{apply_pipeline, AugConfig};
use autosign::ctc::{ctc_loss_value, min_steps};
use autosign::metrics::{corpus_wer, edit_alignment, wer, EditOp};
use autosign::pose::{KeypointLayout, PoseSequence, FULL_JOINTS};
use autosign::rng::RngStream;
use autosign::tensor::cosine_warm_restart_lr;
use proptest::collection::vec;
use proptest::prelude::*;

fn log_softmax_rows(raw: &[f64], classes: usize) -> Vec<f64> {
    raw.chunks_exact(classes)
        .flat_map(|r| {
            let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
            r.iter().map(move |x| x - lse)
        })
        .collect()
}

/// Every label sequence over `1..classes` of length at most `max_len`.
fn all_targets(classes: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for c in 1..classes {
                let mut t = t.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn pose(t: usize, coords: &[f64]) -> PoseSequence {
    let frames: Vec<f64> = (0..t * FULL_JOINTS * 2).map(|i| coords[i % coords.len()]).collect();
    PoseSequence::new(frames, t, KeypointLayout::full()).unwrap()
}

proptest! {
    #[test]
    fn edit_counts_account_for_both_sequences(
        r in vec(0u8..4, 1..9),
        h in vec(0u8..4, 0..9),
    ) {
        let a = edit_alignment(&r, &h).unwrap();
        let matches = a.alignment.iter().filter(|op| matches!(op, EditOp::Match(_))).count();
        prop_assert_eq!(a.ref_len, r.len());
        prop_assert_eq!(matches + a.sub + a.del, r.len());
        prop_assert_eq!(matches + a.sub + a.ins, h.len());
        prop_assert_eq!(a.flagged(), a.errors());
        prop_assert!(a.errors() <= r.len().max(h.len()));
    }

    #[test]
    fn edit_distance_is_symmetric_and_zero_on_identity(
        r in vec(0u8..4, 1..9),
        h in vec(0u8..4, 1..9),
    ) {
        prop_assert_eq!(edit_alignment(&r, &h).unwrap().errors(), edit_alignment(&h, &r).unwrap().errors());
        prop_assert_eq!(wer(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn pooled_wer_lies_between_sentence_extremes(
        pairs in vec((vec(0u8..4, 1..7), vec(0u8..4, 0..7)), 1..6),
    ) {
        let each: Vec<f64> = pairs.iter().map(|(r, h)| wer(r, h).unwrap()).collect();
        let pooled = corpus_wer(&pairs).unwrap();
        let lo = each.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = each.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= pooled && pooled <= hi + 1e-12);
    }

    #[test]
    fn ctc_loss_is_nonnegative_and_finite_iff_alignable(
        raw in vec(-3.0f64..3.0, 12),
        steps in 1usize..=4,
        target in vec(1usize..3, 0..4),
    ) {
        let lp = log_softmax_rows(&raw[..steps * 3], 3);
        let loss = ctc_loss_value(&lp, 3, &target).unwrap();
        prop_assert_eq!(loss.is_finite(), steps >= min_steps(&target));
        if loss.is_finite() {
            prop_assert!(loss >= -1e-12);
        }
    }

    #[test]
    fn ctc_probabilities_over_all_targets_sum_to_one(
        raw in vec(-3.0f64..3.0, 12),
        steps in 1usize..=4,
    ) {
        let lp = log_softmax_rows(&raw[..steps * 3], 3);
        let total: f64 = all_targets(3, steps)
            .iter()
            .map(|t| (-ctc_loss_value(&lp, 3, t).unwrap()).exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }

    #[test]
    fn scheduler_stays_in_range_and_restarts_at_max(
        epoch in 0usize..400,
        t0 in 1usize..20,
        t_mult in 1usize..4,
    ) {
        let (hi, lo) = (1e-3, 1e-6);
        let lr = cosine_warm_restart_lr(epoch, hi, lo, t0, t_mult);
        prop_assert!(lo <= lr && lr <= hi);
        let mut start = 0;
        let mut cycle = t0;
        while start + cycle <= epoch {
            start += cycle;
            cycle *= t_mult;
        }
        if epoch == start {
            prop_assert_eq!(lr, hi);
        } else {
            prop_assert!(lr < hi);
        }
    }

    #[test]
    fn augmentation_keeps_layout_and_finite_coordinates(
        t in 2usize..12,
        coords in vec(-1.0f64..1.0, 1..40),
        seed in any::<u64>(),
        epoch in 0u64..5,
    ) {
        let seq = pose(t, &coords);
        let cfg = AugConfig { per_aug_apply_p: 1.0, ..AugConfig::default() };
        let mut rng = RngStream::for_sample(seed, epoch, "s00001");
        let out = apply_pipeline(&seq, &cfg, &mut rng);
        prop_assert_eq!(out.joints(), FULL_JOINTS);
        prop_assert!(out.n_frames() >= 1);
        prop_assert!(out.frames().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn disabled_augmentation_is_identity(
        t in 1usize..8,
        coords in vec(-1.0f64..1.0, 1..40),
        seed in any::<u64>(),
    ) {
        let seq = pose(t, &coords);
        let mut rng = RngStream::for_sample(seed, 0, "s00001");
        prop_assert_eq!(apply_pipeline(&seq, &AugConfig::none(), &mut rng), seq);
    }
}
