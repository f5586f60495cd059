//! Inter-annotator agreement: per-key standard deviation, consensus labels
//! and the std-dev histogram.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::{latest_per_key, AnnotationRecord};
use super::DatasetError;
use crate::rating::TraversabilityRating;

/// Largest possible population std dev for values bounded in [1, 4].
pub const MAX_STD_DEV: f64 = 1.5;

/// Population standard deviation (divide by n) of the ratings.
///
/// Moments are accumulated in integers, so values that land exactly on a
/// dyadic bin edge (0.5, 1.0, 1.5, ...) come out exact.
pub fn annotation_stddev(ratings: &[TraversabilityRating]) -> Result<f64, DatasetError> {
    if ratings.is_empty() {
        return Err(DatasetError::EmptyRatings);
    }
    let n = ratings.len() as u64;
    let (sum, sum_sq) = ratings.iter().fold((0u64, 0u64), |(s, sq), r| {
        let v = r.value() as u64;
        (s + v, sq + v * v)
    });
    // n^2 * variance
    let scaled = n * sum_sq - sum * sum;
    Ok((scaled as f64).sqrt() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusPolicy {
    /// Median; a half-integer median rounds up toward "less traversable".
    #[default]
    Median,
    /// Arithmetic mean rounded half-up.
    Mean,
}

impl std::str::FromStr for ConsensusPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(ConsensusPolicy::Median),
            "mean" => Ok(ConsensusPolicy::Mean),
            other => Err(format!("unknown consensus policy `{other}` (expected median or mean)")),
        }
    }
}

pub fn consensus_label(
    ratings: &[TraversabilityRating],
    policy: ConsensusPolicy,
) -> Result<TraversabilityRating, DatasetError> {
    if ratings.is_empty() {
        return Err(DatasetError::EmptyRatings);
    }
    let value = match policy {
        ConsensusPolicy::Median => {
            let mut v: Vec<u8> = ratings.iter().map(|r| r.value()).collect();
            v.sort_unstable();
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2] as i64
            } else {
                // ceil((a + b) / 2)
                (v[n / 2 - 1] as i64 + v[n / 2] as i64 + 1) / 2
            }
        }
        ConsensusPolicy::Mean => {
            let n = ratings.len() as i64;
            let sum: i64 = ratings.iter().map(|r| r.value() as i64).sum();
            // round half up: floor(sum / n + 1/2)
            (2 * sum + n) / (2 * n)
        }
    };
    Ok(TraversabilityRating::new(value).expect("consensus stays within the input range"))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceRobotKey {
    pub instance_id: String,
    pub robot_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStdDev {
    pub instance_id: String,
    pub robot_id: String,
    pub n_ratings: usize,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub bin_width: f64,
    /// Sorted by (instance_id, robot_id).
    pub per_key: Vec<KeyStdDev>,
    pub histogram: Vec<HistogramBin>,
}

impl AgreementStats {
    /// Zero-count bins and no keys: what the service reports for an empty store.
    pub fn empty(bin_width: f64) -> Result<Self, DatasetError> {
        Ok(AgreementStats {
            bin_width,
            per_key: Vec::new(),
            histogram: empty_bins(bin_width)?,
        })
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().map(|b| b.count).sum()
    }

    /// Share of keys whose std dev is strictly below `threshold`.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        if self.per_key.is_empty() {
            return 0.0;
        }
        let below = self.per_key.iter().filter(|k| k.std_dev < threshold).count();
        below as f64 / self.per_key.len() as f64
    }
}

fn empty_bins(bin_width: f64) -> Result<Vec<HistogramBin>, DatasetError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(DatasetError::InvalidBinWidth(bin_width));
    }
    let n_bins = ((MAX_STD_DEV / bin_width) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..n_bins)
        .map(|i| HistogramBin {
            lo: i as f64 * bin_width,
            hi: ((i + 1) as f64 * bin_width).min(MAX_STD_DEV),
            count: 0,
        })
        .collect())
}

/// Bin index for a std dev: half-open `[lo, hi)` bins, the final bin closed.
pub fn bin_index(std_dev: f64, bin_width: f64, n_bins: usize) -> usize {
    ((std_dev / bin_width).floor() as usize).min(n_bins - 1)
}

/// Ratings grouped by (instance, robot) after last-write-wins deduplication.
pub fn ratings_by_key(
    records: &[AnnotationRecord],
) -> BTreeMap<InstanceRobotKey, Vec<TraversabilityRating>> {
    let mut grouped: BTreeMap<InstanceRobotKey, Vec<TraversabilityRating>> = BTreeMap::new();
    for r in latest_per_key(records) {
        grouped
            .entry(InstanceRobotKey {
                instance_id: r.instance_id,
                robot_id: r.robot_id,
            })
            .or_default()
            .push(r.rating);
    }
    grouped
}

/// Histogram of per-(instance, robot) std devs over `[0, 1.5]`.
pub fn agreement_histogram(
    records: &[AnnotationRecord],
    bin_width: f64,
) -> Result<AgreementStats, DatasetError> {
    let mut histogram = empty_bins(bin_width)?;
    if records.is_empty() {
        return Err(DatasetError::NoAnnotations);
    }
    let n_bins = histogram.len();
    let mut per_key = Vec::new();
    for (key, ratings) in ratings_by_key(records) {
        let std_dev = annotation_stddev(&ratings)?;
        histogram[bin_index(std_dev, bin_width, n_bins)].count += 1;
        per_key.push(KeyStdDev {
            instance_id: key.instance_id,
            robot_id: key.robot_id,
            n_ratings: ratings.len(),
            std_dev,
        });
    }
    Ok(AgreementStats {
        bin_width,
        per_key,
        histogram,
    })
}

/// Gold labels per (instance, robot) derived from the annotation snapshot.
pub fn consensus_labels(
    records: &[AnnotationRecord],
    policy: ConsensusPolicy,
) -> BTreeMap<InstanceRobotKey, TraversabilityRating> {
    ratings_by_key(records)
        .into_iter()
        .map(|(k, ratings)| {
            let label = consensus_label(&ratings, policy).expect("groups are non-empty");
            (k, label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::TraversabilityRating::{self, *};
    use proptest::prelude::*;

    fn r(values: &[i64]) -> Vec<TraversabilityRating> {
        values.iter().map(|&v| TraversabilityRating::new(v).unwrap()).collect()
    }

    #[test]
    fn stddev_examples() {
        assert_eq!(annotation_stddev(&r(&[2, 2, 2, 2, 2, 2, 2])).unwrap(), 0.0);
        assert_eq!(annotation_stddev(&r(&[1, 4, 1, 4])).unwrap(), 1.5);
        // variance 1.25 by hand: mean 2.5, squared deviations 2.25+0.25+0.25+2.25 = 5, /4
        let sd = annotation_stddev(&r(&[1, 2, 3, 4])).unwrap();
        assert!((sd - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((sd - 1.1180).abs() < 1e-4);
        assert!(matches!(annotation_stddev(&[]), Err(DatasetError::EmptyRatings)));
    }

    #[test]
    fn single_rating_has_zero_spread() {
        assert_eq!(annotation_stddev(&[Bumpy]).unwrap(), 0.0);
    }

    #[test]
    fn consensus_examples() {
        let m = ConsensusPolicy::Median;
        assert_eq!(consensus_label(&r(&[2, 2, 3]), m).unwrap(), Rough);
        assert_eq!(consensus_label(&r(&[1, 4]), m).unwrap(), Bumpy);
        assert_eq!(consensus_label(&r(&[3, 3, 3, 3]), m).unwrap(), Bumpy);
        assert_eq!(consensus_label(&r(&[4, 1, 2, 2]), m).unwrap(), Rough);
        assert_eq!(consensus_label(&r(&[1, 2]), ConsensusPolicy::Mean).unwrap(), Rough);
        assert_eq!(consensus_label(&r(&[1, 1, 2]), ConsensusPolicy::Mean).unwrap(), Smooth);
        assert!(consensus_label(&[], m).is_err());
    }

    #[test]
    fn histogram_edge_assignment() {
        // std devs {0.0, 0.49, 0.5, 1.5} with width 0.25
        let n = empty_bins(0.25).unwrap().len();
        assert_eq!(n, 6);
        let idx: Vec<usize> = [0.0, 0.49, 0.5, 1.5]
            .iter()
            .map(|&s| bin_index(s, 0.25, n))
            .collect();
        assert_eq!(idx, vec![0, 1, 2, 5]);
    }

    #[test]
    fn bins_cover_full_range() {
        for w in [0.1, 0.25, 0.4, 0.5, 1.5, 2.0] {
            let bins = empty_bins(w).unwrap();
            assert_eq!(bins[0].lo, 0.0);
            assert_eq!(bins.last().unwrap().hi, MAX_STD_DEV);
            for pair in bins.windows(2) {
                assert_eq!(pair[0].hi, pair[1].lo);
            }
        }
        assert!(empty_bins(0.0).is_err());
        assert!(empty_bins(f64::NAN).is_err());
    }

    #[test]
    fn histogram_requires_annotations() {
        assert!(matches!(
            agreement_histogram(&[], 0.25),
            Err(DatasetError::NoAnnotations)
        ));
    }

    fn ratings_strategy() -> impl Strategy<Value = Vec<TraversabilityRating>> {
        prop::collection::vec(1i64..=4, 1..12).prop_map(|v| r(&v))
    }

    proptest! {
        #[test]
        fn stddev_bounded_and_permutation_invariant(mut ratings in ratings_strategy(), seed in any::<u64>()) {
            let sd = annotation_stddev(&ratings).unwrap();
            prop_assert!((0.0..=MAX_STD_DEV).contains(&sd));
            let all_equal = ratings.iter().all(|x| *x == ratings[0]);
            prop_assert_eq!(sd == 0.0, all_equal);
            let len = ratings.len();
            ratings.rotate_left((seed as usize) % len);
            ratings.reverse();
            prop_assert_eq!(annotation_stddev(&ratings).unwrap(), sd);
        }

        #[test]
        fn consensus_within_range(ratings in ratings_strategy()) {
            for policy in [ConsensusPolicy::Median, ConsensusPolicy::Mean] {
                let c = consensus_label(&ratings, policy).unwrap();
                prop_assert!(c >= *ratings.iter().min().unwrap());
                prop_assert!(c <= *ratings.iter().max().unwrap());
            }
        }

        #[test]
        fn merging_adjacent_bins_matches_double_width(
            sets in prop::collection::vec(ratings_strategy(), 1..30),
            width_choice in 0usize..3,
        ) {
            let width = [0.125, 0.25, 0.375][width_choice];
            let records: Vec<AnnotationRecord> = sets
                .iter()
                .enumerate()
                .flat_map(|(k, ratings)| {
                    ratings.iter().enumerate().map(move |(a, &rating)| AnnotationRecord {
                        annotator_id: format!("a{a}"),
                        instance_id: format!("w{k}"),
                        robot_id: "r".into(),
                        rating,
                        timestamp: 0,
                    })
                })
                .collect();
            let fine = agreement_histogram(&records, width).unwrap();
            let coarse = agreement_histogram(&records, 2.0 * width).unwrap();
            prop_assert_eq!(fine.total(), sets.len() as u64);
            let merged: Vec<u64> = fine.histogram.chunks(2).map(|c| c.iter().map(|b| b.count).sum()).collect();
            let coarse_counts: Vec<u64> = coarse.histogram.iter().map(|b| b.count).collect();
            prop_assert_eq!(merged, coarse_counts);
        }
    }
}
