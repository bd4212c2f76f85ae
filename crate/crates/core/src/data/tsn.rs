use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Segment-based frame selection: the video is cut into `t` segments with
/// boundaries `floor(frame_count * i / t)`; training draws one frame
/// uniformly per segment, evaluation takes each segment's centre.
pub fn tsn_sample<R: Rng + ?Sized>(
    frame_count: usize,
    t: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if t == 0 || frame_count < t {
        return Err(Error::Input(format!(
            "cannot sample {t} frames from a {frame_count}-frame video"
        )));
    }
    Ok((0..t)
        .map(|i| {
            let start = frame_count * i / t;
            let end = frame_count * (i + 1) / t;
            match mode {
                SampleMode::Eval => start + (end - start) / 2,
                SampleMode::Train => rng.random_range(start..end),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn eval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            tsn_sample(8, 8, SampleMode::Eval, &mut rng).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        assert_eq!(
            tsn_sample(16, 4, SampleMode::Eval, &mut rng).unwrap(),
            vec![2, 6, 10, 14]
        );
    }

    #[test]
    fn too_few_frames_is_an_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            tsn_sample(3, 4, SampleMode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn train_draws_are_uniform_within_segments() {
        // Chi-square over the 4 in-segment offsets for each segment.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut counts = [[0usize; 4]; 4];
        for _ in 0..draws {
            let idx = tsn_sample(16, 4, SampleMode::Train, &mut rng).unwrap();
            for (i, &f) in idx.iter().enumerate() {
                assert!((4 * i..4 * i + 4).contains(&f));
                counts[i][f - 4 * i] += 1;
            }
        }
        let expected = draws as f64 / 4.0;
        for seg in counts {
            let chi2: f64 = seg
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            // 3 dof; mean 3, sd sqrt(6): stay within mean + 3 sd.
            assert!(chi2 < 3.0 + 3.0 * 6f64.sqrt(), "chi2 {chi2}");
        }
    }

    proptest! {
        #[test]
        fn indices_are_increasing_and_segment_confined(
            t in 1usize..12, extra in 0usize..40, seed in any::<u64>(), train in any::<bool>()
        ) {
            let frame_count = t + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if train { SampleMode::Train } else { SampleMode::Eval };
            let idx = tsn_sample(frame_count, t, mode, &mut rng).unwrap();
            prop_assert_eq!(idx.len(), t);
            for (i, &f) in idx.iter().enumerate() {
                prop_assert!(f >= frame_count * i / t && f < frame_count * (i + 1) / t);
                if i > 0 {
                    prop_assert!(f > idx[i - 1]);
                }
            }
        }
    }
}
