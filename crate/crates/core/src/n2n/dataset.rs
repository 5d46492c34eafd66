//! Ordered-pair slice dataset from co-registered repeats.

use crate::error::{CoreError, Result};
use crate::volume::{Slice2D, SliceProvenance, Volume3D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PairedSliceDataset {
    /// (input, target) pairs sharing (subject, z) and differing in repeat id.
    pub pairs: Vec<(Slice2D, Slice2D)>,
    pub crop: usize,
    pub seed: u64,
}

/// Ordered repeat pairs over the whole dataset: m * n*(n-1) * z.
pub fn pair_count(subjects: u64, repeats: u64, slices: u64) -> Result<u64> {
    if repeats < 2 {
        return Err(CoreError::InvalidParam(format!(
            "pairing needs >= 2 repeats, got {repeats}"
        )));
    }
    Ok(subjects * repeats * (repeats - 1) * slices)
}

/// Enumerate all ordered repeat pairs per z-slice per subject, center-crop,
/// and shuffle with the given seed.
pub fn build_pairs(subjects: &[Vec<Volume3D>], crop: usize, seed: u64) -> Result<PairedSliceDataset> {
    let mut pairs = Vec::new();
    for (sid, repeats) in subjects.iter().enumerate() {
        if repeats.len() < 2 {
            return Err(CoreError::InvalidParam(format!(
                "subject {sid} has {} repeats, need >= 2",
                repeats.len()
            )));
        }
        let dims = repeats[0].dims;
        for r in repeats {
            if r.dims != dims {
                return Err(CoreError::DimMismatch {
                    context: "build_pairs",
                    expected: dims,
                    got: r.dims,
                });
            }
        }
        if crop > dims.0 || crop > dims.1 {
            return Err(CoreError::InvalidParam(format!(
                "crop {crop} exceeds slice dims {}x{}",
                dims.0, dims.1
            )));
        }
        for z in 0..dims.2 {
            for (a, ra) in repeats.iter().enumerate() {
                for (b, rb) in repeats.iter().enumerate() {
                    if a == b {
                        continue;
                    }
                    let mut input = ra.slice_xy(z).center_crop(crop)?;
                    input.provenance = Some(SliceProvenance {
                        subject: sid,
                        repeat: a,
                        z,
                    });
                    let mut target = rb.slice_xy(z).center_crop(crop)?;
                    target.provenance = Some(SliceProvenance {
                        subject: sid,
                        repeat: b,
                        z,
                    });
                    pairs.push((input, target));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(PairedSliceDataset { pairs, crop, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_scale_pair_count() {
        assert_eq!(pair_count(24, 6, 600).unwrap(), 432_000);
        assert_eq!(pair_count(1, 2, 1).unwrap(), 2);
        assert_eq!(pair_count(2, 3, 4).unwrap(), 48);
        assert!(pair_count(5, 1, 10).is_err());
    }

    proptest! {
        #[test]
        fn formula_matches_enumeration(m in 1u64..8, n in 2u64..7, z in 1u64..12) {
            // oracle: explicit enumeration of ordered pairs
            let mut count = 0u64;
            for _subject in 0..m {
                for _z in 0..z {
                    for a in 0..n {
                        for b in 0..n {
                            if a != b {
                                count += 1;
                            }
                        }
                    }
                }
            }
            prop_assert_eq!(pair_count(m, n, z).unwrap(), count);
        }
    }

    fn subject(seed: f32, repeats: usize, dims: (usize, usize, usize)) -> Vec<Volume3D> {
        (0..repeats)
            .map(|r| {
                let data = (0..dims.0 * dims.1 * dims.2)
                    .map(|i| seed + r as f32 * 100.0 + i as f32)
                    .collect();
                Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn two_repeats_three_slices_yield_six_pairs() {
        let subjects = vec![subject(0.0, 2, (6, 6, 3))];
        let ds = build_pairs(&subjects, 4, 1).unwrap();
        assert_eq!(ds.pairs.len(), 6);
        for (i, t) in &ds.pairs {
            let pi = i.provenance.unwrap();
            let pt = t.provenance.unwrap();
            assert_eq!(pi.subject, pt.subject);
            assert_eq!(pi.z, pt.z);
            assert_ne!(pi.repeat, pt.repeat);
            assert_eq!(i.dims, (4, 4));
        }
    }

    #[test]
    fn same_seed_gives_identical_dataset() {
        let subjects = vec![subject(0.0, 3, (6, 6, 2)), subject(7.0, 2, (6, 6, 2))];
        let a = build_pairs(&subjects, 4, 42).unwrap();
        let b = build_pairs(&subjects, 4, 42).unwrap();
        assert_eq!(a.pairs.len(), b.pairs.len());
        for ((ia, ta), (ib, tb)) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(ia.data, ib.data);
            assert_eq!(ta.data, tb.data);
            assert_eq!(ia.provenance, ib.provenance);
            assert_eq!(ta.provenance, tb.provenance);
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let subjects = vec![subject(0.0, 2, (6, 6, 1))];
        assert!(build_pairs(&subjects, 8, 0).is_err());
    }
}
