use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// A contiguous window at a random offset (training).
    RandomContiguous,
    /// `floor(i * (n - 1) / (k - 1))` for `i in 0..k` (evaluation).
    EvenlySpaced,
}

/// Frame indices for a `seq_len` window of an `n`-frame tracklet.
pub fn frame_indices(n: usize, seq_len: usize, sampling: Sampling, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if seq_len == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    if n < seq_len {
        return Err(Error::invalid(format!(
            "tracklet has {n} frames, fewer than the requested {seq_len}"
        )));
    }
    Ok(match sampling {
        Sampling::RandomContiguous => {
            let start = rng.gen_range(0..=n - seq_len);
            (start..start + seq_len).collect()
        }
        Sampling::EvenlySpaced if seq_len == 1 => vec![0],
        Sampling::EvenlySpaced => (0..seq_len).map(|i| i * (n - 1) / (seq_len - 1)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evenly_spaced_four_of_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            frame_indices(16, 4, Sampling::EvenlySpaced, &mut rng).unwrap(),
            vec![0, 5, 10, 15]
        );
    }

    #[test]
    fn full_length_window_is_whole_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [Sampling::EvenlySpaced, Sampling::RandomContiguous] {
            assert_eq!(frame_indices(6, 6, s, &mut rng).unwrap(), (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn random_window_is_reproducible() {
        let a = frame_indices(16, 4, Sampling::RandomContiguous, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = frame_indices(16, 4, Sampling::RandomContiguous, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn too_short_tracklet_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(frame_indices(3, 4, Sampling::EvenlySpaced, &mut rng).is_err());
        assert!(frame_indices(3, 0, Sampling::EvenlySpaced, &mut rng).is_err());
    }
}
