//! Per-trajectory displacement and velocity, K-means clustering of whole
//! trajectories, and Wasserstein-1 fidelity between point clouds.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::TrajectoryBundle;
use crate::{Error, Point, Result};

/// Default histogram bin count for displacement distributions.
pub const HISTOGRAM_BINS: usize = 30;

/// Total path length travelled by each sample across its recorded states.
#[derive(Debug, Clone)]
pub struct DisplacementResult {
    pub per_sample: Vec<f64>,
    /// Bin count for downstream histogram rendering.
    pub histogram_bins: usize,
}

/// Mean per-transition displacement, one entry per reverse transition.
#[derive(Debug, Clone)]
pub struct VelocityCurve {
    pub per_step: Vec<f64>,
}

/// K-means result over flattened trajectories.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// K x 2(T+1) centroids in the flattened trajectory space.
    pub centroids: Array2<f64>,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after each assignment pass, for convergence diagnostics.
    pub iteration_inertia: Vec<f64>,
}

/// Per-coordinate Wasserstein-1 distances and their mean. Lower is better.
#[derive(Debug, Clone, Copy)]
pub struct FidelityScore {
    pub w1_x: f64,
    pub w1_y: f64,
    pub combined: f64,
}

fn require_steps(bundle: &TrajectoryBundle) -> Result<()> {
    if bundle.n_steps() < 2 {
        return Err(Error::InvalidArgument(
            "trajectory bundle must record at least two states per sample".into(),
        ));
    }
    Ok(())
}

/// Sum of Euclidean distances over consecutive states, per sample.
pub fn displacement(bundle: &TrajectoryBundle) -> Result<DisplacementResult> {
    require_steps(bundle)?;
    let per_sample = bundle
        .positions
        .iter()
        .map(|traj| traj.windows(2).map(|w| w[0].dist(&w[1])).sum())
        .collect();
    Ok(DisplacementResult { per_sample, histogram_bins: HISTOGRAM_BINS })
}

/// Mean over samples of the per-transition displacement.
pub fn velocity(bundle: &TrajectoryBundle) -> Result<VelocityCurve> {
    require_steps(bundle)?;
    let steps = bundle.n_steps() - 1;
    let s = bundle.n_samples() as f64;
    let per_step = (0..steps)
        .map(|j| {
            bundle.positions.iter().map(|traj| traj[j].dist(&traj[j + 1])).sum::<f64>() / s
        })
        .collect();
    Ok(VelocityCurve { per_step })
}

fn flatten_trajectories(bundle: &TrajectoryBundle) -> Array2<f64> {
    let s = bundle.n_samples();
    let dim = 2 * bundle.n_steps();
    let mut flat = Array2::zeros((s, dim));
    for (i, traj) in bundle.positions.iter().enumerate() {
        for (j, p) in traj.iter().enumerate() {
            flat[(i, 2 * j)] = p.x;
            flat[(i, 2 * j + 1)] = p.y;
        }
    }
    flat
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Restarts per clustering call; the lowest-inertia run wins. A single
/// k-means++ run can settle in a local optimum even on six points.
pub const KMEANS_RESTARTS: usize = 10;

/// K-means over flattened trajectories (x then y per step, step-major order),
/// with k-means++ seeding and Lloyd iterations. The best of several seeded
/// restarts is kept (first run wins ties), so the result is deterministic in
/// `seed` and tiny instances reliably reach the global optimum.
pub fn cluster_trajectories(bundle: &TrajectoryBundle, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let s = bundle.n_samples();
    if k == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    if s < k {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {s} trajectories"
        )));
    }
    let flat = flatten_trajectories(bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_once(&flat, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One k-means++ seeding plus Lloyd iterations. Nearest-centroid ties break
/// toward the lowest centroid index; an emptied cluster keeps its centroid.
fn kmeans_once(flat: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> ClusterAssignment {
    let s = flat.nrows();
    let dim = flat.ncols();

    // k-means++: first center uniform, then proportional to squared distance
    // from the nearest chosen center.
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..s);
    centroids.row_mut(0).assign(&flat.row(first));
    let mut nearest_sq: Vec<f64> = (0..s)
        .map(|i| sq_dist(flat.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = s - 1;
            for (i, &d) in nearest_sq.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..s)
        };
        centroids.row_mut(c).assign(&flat.row(pick));
        for (i, nearest) in nearest_sq.iter_mut().enumerate() {
            let d = sq_dist(flat.row(i).as_slice().unwrap(), centroids.row(c).as_slice().unwrap());
            if d < *nearest {
                *nearest = d;
            }
        }
    }

    let mut labels = vec![0usize; s];
    let mut iteration_inertia = Vec::new();
    for _ in 0..100 {
        iteration_inertia.push(assign_labels(flat, &centroids, &mut labels));

        // Update pass.
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..s {
            let mut row = sums.row_mut(labels[i]);
            row += &flat.row(i);
            counts[labels[i]] += 1;
        }
        let mut movement: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let new = &sums.row(c) / count as f64;
            let moved = sq_dist(new.as_slice().unwrap(), centroids.row(c).as_slice().unwrap()).sqrt();
            movement = movement.max(moved);
            centroids.row_mut(c).assign(&new);
        }
        if movement < 1e-6 {
            break;
        }
    }
    // Final assignment against the settled centroids.
    let inertia = assign_labels(flat, &centroids, &mut labels);
    iteration_inertia.push(inertia);
    ClusterAssignment { labels, centroids, k, inertia, iteration_inertia }
}

/// One assignment pass; returns the resulting inertia. Ties break toward the
/// lowest centroid index because only a strictly smaller distance wins.
fn assign_labels(flat: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let row = flat.row(i);
        let row = row.as_slice().unwrap();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.nrows() {
            let d = sq_dist(row, centroids.row(c).as_slice().unwrap());
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *label = best;
        inertia += best_d;
    }
    inertia
}

/// Exact empirical Wasserstein-1 distance between two 1D samples of any
/// sizes, via the area between the empirical CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "both samples must be non-empty");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut pooled: Vec<f64> = Vec::with_capacity(sa.len() + sb.len());
    pooled.extend_from_slice(&sa);
    pooled.extend_from_slice(&sb);
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let na = sa.len() as f64;
    let nb = sb.len() as f64;
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut total = 0.0;
    for w in pooled.windows(2) {
        let (v, next) = (w[0], w[1]);
        while ia < sa.len() && sa[ia] <= v {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= v {
            ib += 1;
        }
        let gap = ia as f64 / na - ib as f64 / nb;
        total += gap.abs() * (next - v);
    }
    total
}

/// Per-coordinate Wasserstein-1 between two 2D clouds, plus their mean.
pub fn wasserstein_fidelity(original: &[Point], generated: &[Point]) -> Result<FidelityScore> {
    if original.is_empty() || generated.is_empty() {
        return Err(Error::DegenerateData("fidelity needs two non-empty clouds".into()));
    }
    let ax: Vec<f64> = original.iter().map(|p| p.x).collect();
    let ay: Vec<f64> = original.iter().map(|p| p.y).collect();
    let bx: Vec<f64> = generated.iter().map(|p| p.x).collect();
    let by: Vec<f64> = generated.iter().map(|p| p.y).collect();
    let w1_x = wasserstein_1d(&ax, &bx);
    let w1_y = wasserstein_1d(&ay, &by);
    Ok(FidelityScore { w1_x, w1_y, combined: 0.5 * (w1_x + w1_y) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn bundle_from(positions: Vec<Vec<Point>>) -> TrajectoryBundle {
        let t_max = positions[0].len() - 1;
        TrajectoryBundle { positions, t_max, config_tag: String::new() }
    }

    fn random_bundle(s: usize, steps: usize, seed: u64) -> TrajectoryBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bundle_from(
            (0..s)
                .map(|_| {
                    (0..steps)
                        .map(|_| Point::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn displacement_of_constant_trajectory_is_zero() {
        let b = bundle_from(vec![vec![Point::new(1.0, 2.0); 6]]);
        let d = displacement(&b).unwrap();
        assert_eq!(d.per_sample, vec![0.0]);
    }

    #[test]
    fn displacement_three_four_five() {
        let b = bundle_from(vec![vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0), Point::new(3.0, 4.0)]]);
        let d = displacement(&b).unwrap();
        assert!((d.per_sample[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn displacement_matches_brute_force_resummation() {
        let b = random_bundle(7, 11, 50);
        let d = displacement(&b).unwrap();
        for (i, traj) in b.positions.iter().enumerate() {
            let mut total = 0.0;
            for j in 1..traj.len() {
                let dx = traj[j].x - traj[j - 1].x;
                let dy = traj[j].y - traj[j - 1].y;
                total += dx.hypot(dy);
            }
            assert!((d.per_sample[i] - total).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_requires_two_states() {
        let b = bundle_from(vec![vec![Point::new(0.0, 0.0)]]);
        assert!(displacement(&b).is_err());
        assert!(velocity(&b).is_err());
    }

    #[test]
    fn velocity_of_two_movers_averages() {
        let b = bundle_from(vec![
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)],
            vec![Point::new(0.0, 0.0), Point::new(0.0, 3.0)],
        ]);
        let v = velocity(&b).unwrap();
        assert_eq!(v.per_step.len(), 1);
        assert!((v.per_step[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn velocity_sums_to_displacement() {
        let b = random_bundle(9, 13, 51);
        let v = velocity(&b).unwrap();
        let d = displacement(&b).unwrap();
        let lhs: f64 = v.per_step.iter().sum::<f64>() * b.n_samples() as f64;
        let rhs: f64 = d.per_sample.iter().sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn two_group_bundle() -> TrajectoryBundle {
        let near = vec![Point::new(0.0, 0.0), Point::new(0.1, 0.0)];
        let far = vec![Point::new(10.0, 10.0), Point::new(10.0, 10.1)];
        bundle_from(vec![near.clone(), near.clone(), near, far.clone(), far.clone(), far])
    }

    #[test]
    fn clustering_separates_identical_groups_with_zero_inertia() {
        let b = two_group_bundle();
        let c = cluster_trajectories(&b, 2, 1).unwrap();
        assert_eq!(c.labels[0], c.labels[1]);
        assert_eq!(c.labels[1], c.labels[2]);
        assert_eq!(c.labels[3], c.labels[4]);
        assert_eq!(c.labels[4], c.labels[5]);
        assert_ne!(c.labels[0], c.labels[3]);
        assert!(c.inertia < 1e-20);
    }

    /// Best inertia over every assignment of samples to K clusters, with
    /// centroids recomputed per assignment.
    fn brute_force_inertia(flat: &Array2<f64>, k: usize) -> f64 {
        let s = flat.nrows();
        let dim = flat.ncols();
        let mut best = f64::INFINITY;
        for mask in 0..k.pow(s as u32) {
            let mut labels = Vec::with_capacity(s);
            let mut m = mask;
            for _ in 0..s {
                labels.push(m % k);
                m /= k;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for i in 0..s {
                counts[labels[i]] += 1;
                for d in 0..dim {
                    sums[labels[i]][d] += flat[(i, d)];
                }
            }
            if counts.contains(&0) {
                continue;
            }
            let mut inertia = 0.0;
            for i in 0..s {
                let c = labels[i];
                for d in 0..dim {
                    let diff = flat[(i, d)] - sums[c][d] / counts[c] as f64;
                    inertia += diff * diff;
                }
            }
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn clustering_matches_exhaustive_optimum_on_tiny_instance() {
        let b = random_bundle(6, 2, 77);
        let c = cluster_trajectories(&b, 2, 9).unwrap();
        let best = brute_force_inertia(&flatten_trajectories(&b), 2);
        assert!(
            c.inertia <= best + 1e-9,
            "lloyd inertia {} vs exhaustive {}",
            c.inertia,
            best
        );
    }

    #[test]
    fn clustering_is_deterministic_and_rejects_small_bundles() {
        let b = random_bundle(10, 3, 5);
        let a = cluster_trajectories(&b, 3, 42).unwrap();
        let c = cluster_trajectories(&b, 3, 42).unwrap();
        assert_eq!(a.labels, c.labels);
        assert!(cluster_trajectories(&b, 11, 42).is_err());
        assert!(cluster_trajectories(&b, 0, 42).is_err());
    }

    #[test]
    fn clustering_inertia_never_increases_across_iterations() {
        for seed in 0..5 {
            let b = random_bundle(40, 6, 100 + seed);
            let c = cluster_trajectories(&b, 4, seed).unwrap();
            for w in c.iteration_inertia.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "inertia rose: {:?}", c.iteration_inertia);
            }
        }
    }

    #[test]
    fn clustering_is_translation_invariant() {
        let b = random_bundle(20, 4, 8);
        let shifted = bundle_from(
            b.positions
                .iter()
                .map(|traj| traj.iter().map(|p| Point::new(p.x + 5.5, p.y - 2.5)).collect())
                .collect(),
        );
        let base = cluster_trajectories(&b, 3, 17).unwrap();
        let moved = cluster_trajectories(&shifted, 3, 17).unwrap();
        assert_eq!(base.labels, moved.labels);
        for c in 0..3 {
            for j in 0..base.centroids.ncols() {
                let delta = if j % 2 == 0 { 5.5 } else { -2.5 };
                assert!((moved.centroids[(c, j)] - base.centroids[(c, j)] - delta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wasserstein_identical_clouds_is_zero() {
        let pts: Vec<Point> = (0..20).map(|i| Point::new(i as f64, -(i as f64))).collect();
        let f = wasserstein_fidelity(&pts, &pts).unwrap();
        assert_eq!(f.w1_x, 0.0);
        assert_eq!(f.w1_y, 0.0);
        assert_eq!(f.combined, 0.0);
    }

    #[test]
    fn wasserstein_single_point_transport() {
        let a = vec![Point::new(0.0, 0.0)];
        let b = vec![Point::new(1.0, 2.0)];
        let f = wasserstein_fidelity(&a, &b).unwrap();
        assert!((f.w1_x - 1.0).abs() < 1e-15);
        assert!((f.w1_y - 2.0).abs() < 1e-15);
        assert!((f.combined - 1.5).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_unequal_sizes_by_hand() {
        // Two atoms of mass 1/2 vs three of mass 1/3: area between the CDFs
        // is 1/6 on each half of [0, 1].
        let a = vec![0.0, 1.0];
        let b = vec![0.0, 0.5, 1.0];
        assert!((wasserstein_1d(&a, &b) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_equal_sizes_matches_sorted_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a: Vec<f64> = (0..64).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 0.3).collect();
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let oracle: f64 =
                sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
            assert!((wasserstein_1d(&a, &b) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_fidelity_rejects_empty_clouds() {
        let pts = vec![Point::new(0.0, 0.0)];
        assert!(wasserstein_fidelity(&[], &pts).is_err());
        assert!(wasserstein_fidelity(&pts, &[]).is_err());
    }

    proptest! {
        #[test]
        fn wasserstein_is_symmetric_and_triangular(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12 + (seed % 7) as usize;
            let m = 9 + (seed % 5) as usize;
            let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) - 0.5).collect();
            let ab = wasserstein_1d(&a, &b);
            let ba = wasserstein_1d(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            let ac = wasserstein_1d(&a, &c);
            let cb = wasserstein_1d(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-12);
            prop_assert!(wasserstein_1d(&a, &a) == 0.0);
        }
    }
}
