//! Fixed-duration crops for training.
//!
//! Clips longer than the window contribute a uniformly placed excerpt;
//! shorter ones are zero-padded at the tail. The generator is only consumed
//! when there is an actual choice to make, so toggling padding behavior for
//! short clips never shifts the draw sequence of the long ones.

use rand::RngExt;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// A window of `duration_secs` from `w`, uniformly placed over every valid
/// start offset (both endpoints included).
pub fn random_crop<R: RngExt>(w: &Waveform, duration_secs: f64, rng: &mut R) -> Result<Waveform> {
    let target = crop_samples(w.sample_rate(), duration_secs)?;
    if w.len() <= target {
        return Ok(w.padded_to(target));
    }
    let start = rng.random_range(0..=w.len() - target);
    Ok(w.slice(start, target))
}

/// Window length in samples for `duration_secs` at `sample_rate`.
pub fn crop_samples(sample_rate: u32, duration_secs: f64) -> Result<usize> {
    if !(duration_secs > 0.0 && duration_secs.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "crop duration {duration_secs} must be a positive finite number of seconds"
        )));
    }
    let target = (duration_secs * sample_rate as f64).round() as usize;
    if target == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop duration {duration_secs}s is under one sample at {sample_rate} Hz"
        )));
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(len: usize, rate: u32) -> Waveform {
        Waveform::new((0..len).map(|i| i as f32).collect(), rate).unwrap()
    }

    #[test]
    fn crop_is_a_verbatim_excerpt_of_the_right_length() {
        let w = ramp(160_000, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let c = random_crop(&w, 1.0, &mut rng).unwrap();
            assert_eq!(c.len(), 16_000);
            let start = c.samples()[0] as usize;
            assert!(start <= 160_000 - 16_000);
            for (i, &s) in c.samples().iter().enumerate() {
                assert_eq!(s as usize, start + i);
            }
        }
    }

    #[test]
    fn short_clips_are_zero_padded_without_consuming_randomness() {
        let w = ramp(5_000, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_crop(&w, 1.0, &mut rng).unwrap();
        assert_eq!(c.len(), 16_000);
        assert_eq!(&c.samples()[..5_000], w.samples());
        assert!(c.samples()[5_000..].iter().all(|&s| s == 0.0));
        let mut fresh = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(rng.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn exact_length_clip_returns_itself() {
        let w = ramp(16_000, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_crop(&w, 1.0, &mut rng).unwrap();
        assert_eq!(c.samples(), w.samples());
    }

    #[test]
    fn fractional_durations_round_to_samples() {
        assert_eq!(crop_samples(16_000, 0.97).unwrap(), 15_520);
        assert_eq!(crop_samples(22_050, 1.0).unwrap(), 22_050);
        assert!(matches!(crop_samples(16_000, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(crop_samples(16_000, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(crop_samples(16_000, 1e-6), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn start_offsets_cover_the_valid_range_uniformly() {
        // 10 s clip, 1 s window: starts live in [0, 144000]. Bucket 10000
        // draws into 16 cells and check chi-squared against the 1% critical
        // value for 15 degrees of freedom.
        let w = ramp(160_000, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let span = 144_000usize;
        let buckets = 16usize;
        let draws = 10_000usize;
        let mut counts = vec![0usize; buckets];
        for _ in 0..draws {
            let c = random_crop(&w, 1.0, &mut rng).unwrap();
            let start = c.samples()[0] as usize;
            assert!(start <= span);
            counts[(start * buckets / (span + 1)).min(buckets - 1)] += 1;
        }
        let expected = draws as f64 / buckets as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 30.578, "chi-squared {chi2} exceeds the 1% critical value; counts {counts:?}");
    }

    #[test]
    fn both_endpoint_offsets_are_reachable() {
        // Four valid starts {0, 1, 2, 3}; a few hundred draws must hit every
        // one, in particular the last (an exclusive upper bound would not).
        let w = ramp(16_003, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 4];
        for _ in 0..400 {
            let c = random_crop(&w, 1.0, &mut rng).unwrap();
            seen[c.samples()[0] as usize] = true;
        }
        assert_eq!(seen, [true; 4]);
    }
}
