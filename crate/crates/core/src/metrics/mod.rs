//! Conditional-diversity and two-sample diagnostics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    #[default]
    Identity,
    /// `F(y) = W y + c` with `W` given row-major as `out x in`.
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

impl FeatureMap {
    /// Seeded Gaussian projection `R^d_in -> R^d_out` with `N(0, 1/d_in)` entries.
    pub fn random_affine(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::invalid("feature dimensions must be positive"));
        }
        let mut rng = NoiseStream::new(seed, 0);
        let scale = (d_in as f64).sqrt().recip();
        let matrix = (0..d_out)
            .map(|_| {
                rng.normal_vec(d_in)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect();
        Ok(FeatureMap::Affine {
            matrix,
            offset: vec![0.0; d_out],
        })
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(y.to_vec()),
            FeatureMap::Affine { matrix, offset } => {
                if matrix.len() != offset.len() {
                    return Err(Error::DimensionMismatch {
                        expected: matrix.len(),
                        got: offset.len(),
                    });
                }
                matrix
                    .iter()
                    .zip(offset)
                    .map(|(row, c)| {
                        if row.len() != y.len() {
                            return Err(Error::DimensionMismatch {
                                expected: row.len(),
                                got: y.len(),
                            });
                        }
                        Ok(row.iter().zip(y).map(|(w, v)| w * v).sum::<f64>() + c)
                    })
                    .collect()
            }
        }
    }
}

/// Replicate outputs grouped by condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedSamples {
    pub groups: Vec<Vec<Vec<f64>>>,
    pub feature_map: FeatureMap,
}

impl ConditionedSamples {
    pub fn new(groups: Vec<Vec<Vec<f64>>>, feature_map: FeatureMap) -> Self {
        Self {
            groups,
            feature_map,
        }
    }

    /// Groups rows by `row_ids`, keeping first-seen order.
    pub fn from_rows(
        rows: &[Vec<f64>],
        row_ids: &[usize],
        feature_map: FeatureMap,
    ) -> Result<Self> {
        if rows.len() != row_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: row_ids.len(),
            });
        }
        let mut order: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<Vec<f64>>> = Vec::new();
        for (row, &id) in rows.iter().zip(row_ids) {
            match order.iter().position(|&g| g == id) {
                Some(k) => groups[k].push(row.clone()),
                None => {
                    order.push(id);
                    groups.push(vec![row.clone()]);
                }
            }
        }
        Ok(Self {
            groups,
            feature_map,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AfdReport {
    pub afd: f64,
    pub per_group: Vec<f64>,
}

/// Average feature distance: per group, the mean distance over ordered pairs
/// `k != l` (normalised by `L^2 - L`); `afd` is the mean over groups.
pub fn afd(cs: &ConditionedSamples) -> Result<AfdReport> {
    if cs.groups.is_empty() {
        return Err(Error::invalid("afd needs at least one group"));
    }
    let mut dim = None;
    let per_group = cs
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let l = group.len();
            if l < 2 {
                return Err(Error::InsufficientReplicates { group: g, got: l });
            }
            let feats = group
                .iter()
                .map(|y| cs.feature_map.apply(y))
                .collect::<Result<Vec<_>>>()?;
            for f in &feats {
                let d = *dim.get_or_insert(f.len());
                if f.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: f.len(),
                    });
                }
            }
            let mut sum = 0.0;
            for k in 0..l {
                for m in 0..l {
                    if k != m {
                        sum += dist(&feats[k], &feats[m]);
                    }
                }
            }
            Ok(sum / (l * l - l) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let afd = per_group.iter().sum::<f64>() / per_group.len() as f64;
    Ok(AfdReport { afd, per_group })
}

fn check_shape(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    match rows.iter().find(|r| r.len() != d) {
        Some(r) => Err(Error::DimensionMismatch {
            expected: d,
            got: r.len(),
        }),
        None => Ok(d),
    }
}

/// Mean over all entries of the squared difference.
pub fn mse(batch: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if batch.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: batch.len(),
        });
    }
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in batch.iter().zip(reference) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len(),
                got: a.len(),
            });
        }
        sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += a.len();
    }
    Ok(sum / count as f64)
}

/// Mean pairwise distance over all `n * m` pairs; rows are summed in order.
fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let row_sums: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>())
        .collect();
    row_sums.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// Energy distance `2 E|A - B| - E|A - A'| - E|B - B'|`, with every term
/// averaged over all ordered pairs (V-statistic), so `ED(a, a) = 0`.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: s.len(),
            });
        }
    }
    let (da, db) = (check_shape(a)?, check_shape(b)?);
    if da != db {
        return Err(Error::DimensionMismatch {
            expected: da,
            got: db,
        });
    }
    let ab = mean_cross_distance(a, b);
    let ba = mean_cross_distance(b, a);
    Ok(ab + ba - mean_cross_distance(a, a) - mean_cross_distance(b, b))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the statistic under random relabelling.
    pub null_q95: f64,
    pub permutations: usize,
}

/// Permutation null for [`energy_distance`]: pools the two samples, reshuffles
/// with a seeded stream and recomputes the statistic `permutations` times.
pub fn energy_permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    let statistic = energy_distance(a, b)?;
    if permutations == 0 {
        return Err(Error::invalid("permutations must be positive"));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut null: Vec<f64> = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = NoiseStream::new(seed, k as u64);
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.index(i + 1));
            }
            let pa: Vec<Vec<f64>> = idx[..a.len()].iter().map(|&i| pooled[i].clone()).collect();
            let pb: Vec<Vec<f64>> = idx[a.len()..].iter().map(|&i| pooled[i].clone()).collect();
            energy_distance(&pa, &pb)
        })
        .collect::<Result<_>>()?;
    null.sort_by(f64::total_cmp);
    let pos = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(PermutationTest {
        statistic,
        null_q95: null[pos],
        permutations,
    })
}

/// Least-squares slope of `ln error` against `ln dt`.
pub fn convergence_slope(dts: &[f64], errors: &[f64]) -> Result<f64> {
    if dts.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: dts.len(),
            got: errors.len(),
        });
    }
    if dts.len() < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            got: dts.len(),
        });
    }
    for (i, &v) in dts.iter().chain(errors).enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveInput {
                index: i % dts.len(),
                value: v,
            });
        }
    }
    let n = dts.len();
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { dts[i].ln() });
    let y = nalgebra::DVector::from_iterator(n, errors.iter().map(|e| e.ln()));
    let fit = design
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::invalid(format!("slope fit failed: {e}")))?;
    Ok(fit[1])
}

/// One JSON metric record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub params: Value,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64, params: Value, seed: u64) -> Self {
        Self {
            metric: metric.into(),
            value,
            params,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rows(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn afd_examples() {
        let cs = ConditionedSamples::new(
            vec![rows(&[&[0.0, 0.0], &[3.0, 4.0]])],
            FeatureMap::Identity,
        );
        assert_eq!(afd(&cs).unwrap().afd, 5.0);

        let same =
            ConditionedSamples::new(vec![rows(&[&[1.0], &[1.0], &[1.0]])], FeatureMap::Identity);
        assert_eq!(afd(&same).unwrap().afd, 0.0);

        // Three points on a line: ordered-pair distances 1, 2, 1 twice each.
        let line = ConditionedSamples::new(
            vec![rows(&[&[0.0], &[1.0], &[2.0]]), rows(&[&[0.0], &[3.0]])],
            FeatureMap::Identity,
        );
        let r = afd(&line).unwrap();
        assert_abs_diff_eq!(r.per_group[0], 8.0 / 6.0, epsilon = 1e-15);
        assert_eq!(r.per_group[1], 3.0);
        assert_abs_diff_eq!(r.afd, (8.0 / 6.0 + 3.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn afd_errors_and_grouping() {
        let cs = ConditionedSamples::new(
            vec![rows(&[&[0.0], &[1.0]]), rows(&[&[2.0]])],
            FeatureMap::Identity,
        );
        assert!(matches!(
            afd(&cs),
            Err(Error::InsufficientReplicates { group: 1, got: 1 })
        ));

        let cs = ConditionedSamples::from_rows(
            &rows(&[&[0.0], &[5.0], &[1.0], &[7.0]]),
            &[3, 9, 3, 9],
            FeatureMap::Identity,
        )
        .unwrap();
        assert_eq!(
            cs.groups,
            vec![rows(&[&[0.0], &[1.0]]), rows(&[&[5.0], &[7.0]])]
        );
        assert_eq!(afd(&cs).unwrap().per_group, vec![1.0, 2.0]);
    }

    #[test]
    fn affine_features() {
        let f = FeatureMap::Affine {
            matrix: vec![vec![2.0, 0.0]],
            offset: vec![1.0],
        };
        assert_eq!(f.apply(&[3.0, 9.0]).unwrap(), vec![7.0]);
        assert!(f.apply(&[3.0]).is_err());
        let r = FeatureMap::random_affine(4, 3, 7).unwrap();
        assert_eq!(r, FeatureMap::random_affine(4, 3, 7).unwrap());
        assert_eq!(r.apply(&[0.0; 4]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(
            mse(&rows(&[&[1.0, 2.0]]), &rows(&[&[1.0, 2.0]])).unwrap(),
            0.0
        );
        assert_eq!(mse(&rows(&[&[1.0]]), &rows(&[&[0.0]])).unwrap(), 1.0);
        assert_eq!(
            mse(&rows(&[&[1.0], &[3.0]]), &rows(&[&[0.0], &[0.0]])).unwrap(),
            5.0
        );
        assert!(mse(&rows(&[&[1.0]]), &rows(&[&[1.0], &[2.0]])).is_err());
        assert!(mse(&rows(&[&[1.0, 2.0]]), &rows(&[&[1.0]])).is_err());
    }

    #[test]
    fn energy_distance_examples() {
        let a = rows(&[&[0.0], &[0.0]]);
        let b = rows(&[&[10.0], &[10.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 20.0);
        assert_eq!(energy_distance(&b, &a).unwrap(), 20.0);
        let c = rows(&[&[0.3, 1.0], &[-2.0, 0.5], &[1.1, 1.1]]);
        assert!(energy_distance(&c, &c).unwrap().abs() <= 1e-12);
        assert!(matches!(
            energy_distance(&a, &rows(&[&[1.0]])),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn permutation_null_is_reproducible() {
        let mut rng = NoiseStream::new(5, 0);
        let a: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(2)).collect();
        let b: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(2)).collect();
        let p = energy_permutation_test(&a, &b, 200, 11).unwrap();
        assert_eq!(p, energy_permutation_test(&a, &b, 200, 11).unwrap());
        assert!(p.null_q95 > 0.0);
        // A shifted sample is far outside the null.
        let shifted: Vec<Vec<f64>> = b.iter().map(|r| vec![r[0] + 3.0, r[1]]).collect();
        let q = energy_permutation_test(&a, &shifted, 200, 11).unwrap();
        assert!(q.statistic > 3.0 * q.null_q95);
    }

    #[test]
    fn slope_examples() {
        let dts = [0.1, 0.05, 0.025];
        assert_abs_diff_eq!(convergence_slope(&dts, &dts).unwrap(), 1.0, epsilon = 1e-12);
        let sq: Vec<f64> = dts.iter().map(|d| d * d).collect();
        assert_abs_diff_eq!(convergence_slope(&dts, &sq).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            convergence_slope(&dts, &[1e-2, 2.5e-3, 6.25e-4]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            convergence_slope(&dts, &[1e-2, 0.0, 1e-3]),
            Err(Error::NonPositiveInput { index: 1, .. })
        ));
        assert!(convergence_slope(&dts[..2], &dts[..2]).is_err());
    }

    #[test]
    fn report_json() {
        let r = MetricReport::new("afd", 1.5, serde_json::json!({"b": 0.25}), 3);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["metric"], "afd");
        assert_eq!(v["params"]["b"], 0.25);
    }

    fn group_strategy() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 2), 2..6),
            1..4,
        )
    }

    proptest! {
        #[test]
        fn afd_is_order_invariant(groups in group_strategy(), rot in 0usize..5) {
            let base = afd(&ConditionedSamples::new(groups.clone(), FeatureMap::Identity)).unwrap().afd;
            let mut shuffled = groups;
            shuffled.reverse();
            for g in &mut shuffled {
                let k = rot % g.len();
                g.rotate_left(k);
            }
            let other = afd(&ConditionedSamples::new(shuffled, FeatureMap::Identity)).unwrap().afd;
            prop_assert!((base - other).abs() <= 1e-12 * (1.0 + base));
        }

        #[test]
        fn afd_scales_with_features(groups in group_strategy(), c in -5.0..5.0f64) {
            let base = afd(&ConditionedSamples::new(groups.clone(), FeatureMap::Identity)).unwrap().afd;
            let scaled = FeatureMap::Affine { matrix: vec![vec![c, 0.0], vec![0.0, c]], offset: vec![0.5, -1.0] };
            let other = afd(&ConditionedSamples::new(groups, scaled)).unwrap().afd;
            prop_assert!((other - c.abs() * base).abs() <= 1e-10 * (1.0 + base));
        }

        #[test]
        fn energy_distance_symmetric_and_zero_on_self(
            a in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..12),
            b in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..12),
        ) {
            prop_assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
            prop_assert!(ab >= -1e-12);
        }

        #[test]
        fn slope_exact_for_power_laws(p in -3.0..4.0f64, c in 1e-3..1e3f64) {
            let dts = [0.04, 0.02, 0.01, 0.005];
            let errs: Vec<f64> = dts.iter().map(|d: &f64| c * d.powf(p)).collect();
            prop_assert!((convergence_slope(&dts, &errs).unwrap() - p).abs() <= 1e-9);
        }
    }
}
