//! Chamfer distance, Earth Mover's distance and the overlap ratio, both as
//! plain metrics on [`PointCloud`]s and as differentiable tensor losses.
//!
//! Both distances use the per-point-mean convention: Chamfer is
//! `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2` and EMD is
//! `min_pi mean_i |a_i - b_pi(i)|`. Loss gradients treat the nearest
//! neighbours / matching as fixed at the current point positions.

mod assignment;

pub use assignment::{auction, hungarian, AuctionConfig, Matching};

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{dist2, farthest_point_sample, norm, sub, Point3, PointCloud, SpatialIndex};
use crate::tensor::Tensor;

/// Largest cloud size accepted by [`emd_exact`].
pub const EMD_EXACT_MAX: usize = 512;

/// Nearest neighbour of every point of `from` inside `to`.
fn nearest_all(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    let index = SpatialIndex::new(to);
    from.iter().map(|p| index.nearest(p).unwrap()).collect()
}

/// Per-point-mean Chamfer distance with squared Euclidean terms.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

fn chamfer_points(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer of an empty cloud"));
    }
    let ab: f64 = nearest_all(a, b).iter().map(|x| x.1).sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest_all(b, a).iter().map(|x| x.1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

fn check_equal_sizes(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "EMD needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("EMD of empty clouds"));
    }
    Ok(())
}

/// Optimal matching via the Hungarian method. Returns the per-point mean
/// cost and the matching.
pub fn emd_exact(a: &PointCloud, b: &PointCloud) -> Result<(f64, Matching)> {
    check_equal_sizes(a, b)?;
    if a.len() > EMD_EXACT_MAX {
        return Err(Error::InvalidArgument(format!(
            "exact EMD limited to {EMD_EXACT_MAX} points, got {}",
            a.len()
        )));
    }
    let perm = hungarian(a.len(), |i, j| dist2(&a.points[i], &b.points[j]).sqrt());
    let m = Matching::from_perm(&a.points, &b.points, perm);
    Ok((m.cost / a.len() as f64, m))
}

/// Near-optimal matching via the epsilon-scaling auction; the cost is
/// within `(1 + cfg.delta)` of [`emd_exact`].
pub fn emd_approx(a: &PointCloud, b: &PointCloud, cfg: &AuctionConfig) -> Result<(f64, Matching)> {
    check_equal_sizes(a, b)?;
    let perm = auction(&a.points, &b.points, cfg)?;
    let m = Matching::from_perm(&a.points, &b.points, perm);
    Ok((m.cost / a.len() as f64, m))
}

/// Which assignment solver an EMD evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmdSolver {
    Exact,
    Auction(AuctionConfig),
    /// Exact up to the given size, auction above it.
    Auto { exact_max: usize },
}

impl EmdSolver {
    pub fn solve(&self, a: &PointCloud, b: &PointCloud) -> Result<(f64, Matching)> {
        match *self {
            EmdSolver::Exact => emd_exact(a, b),
            EmdSolver::Auction(cfg) => emd_approx(a, b, &cfg),
            EmdSolver::Auto { exact_max } if a.len() <= exact_max.min(EMD_EXACT_MAX) => emd_exact(a, b),
            EmdSolver::Auto { .. } => emd_approx(a, b, &AuctionConfig::default()),
        }
    }
}

fn tensor_points(t: &Tensor, op: &'static str) -> Result<Vec<Point3>> {
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(Error::Shape {
            op,
            detail: format!("expected n x 3, got {:?}", t.shape()),
        });
    }
    Ok(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Differentiable Chamfer distance between two `n x 3` / `m x 3` tensors.
pub fn chamfer_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let pa = tensor_points(a, "chamfer_loss")?;
    let pb = tensor_points(b, "chamfer_loss")?;
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Empty("chamfer of an empty cloud"));
    }
    let nn_ab = nearest_all(&pa, &pb);
    let nn_ba = nearest_all(&pb, &pa);
    let (na, nb) = (pa.len() as f64, pb.len() as f64);
    let value = nn_ab.iter().map(|x| x.1).sum::<f64>() / na + nn_ba.iter().map(|x| x.1).sum::<f64>() / nb;
    let backward = Box::new(move |g: &[f64]| {
        let g = g[0];
        let mut ga = vec![0.0; pa.len() * 3];
        let mut gb = vec![0.0; pb.len() * 3];
        for (i, &(j, _)) in nn_ab.iter().enumerate() {
            let d = sub(&pa[i], &pb[j]);
            for k in 0..3 {
                let v = 2.0 * d[k] / na * g;
                ga[i * 3 + k] += v;
                gb[j * 3 + k] -= v;
            }
        }
        for (j, &(i, _)) in nn_ba.iter().enumerate() {
            let d = sub(&pb[j], &pa[i]);
            for k in 0..3 {
                let v = 2.0 * d[k] / nb * g;
                gb[j * 3 + k] += v;
                ga[i * 3 + k] -= v;
            }
        }
        vec![ga, gb]
    });
    Tensor::custom("chamfer_loss", vec![1], vec![value], vec![a.clone(), b.clone()], backward)
}

/// Differentiable mean matched distance `mean_i |a_i - b_perm(i)|` for a
/// fixed matching.
pub fn matched_distance_loss(a: &Tensor, b: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let pa = tensor_points(a, "matched_distance_loss")?;
    let pb = tensor_points(b, "matched_distance_loss")?;
    if pa.len() != pb.len() || perm.len() != pa.len() || pa.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "matching of {} onto {} with {} pairs",
            pa.len(),
            pb.len(),
            perm.len()
        )));
    }
    let n = pa.len() as f64;
    let perm = perm.to_vec();
    let value = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| dist2(&pa[i], &pb[j]).sqrt())
        .sum::<f64>()
        / n;
    let backward = Box::new(move |g: &[f64]| {
        let g = g[0];
        let mut ga = vec![0.0; pa.len() * 3];
        let mut gb = vec![0.0; pb.len() * 3];
        for (i, &j) in perm.iter().enumerate() {
            let d = sub(&pa[i], &pb[j]);
            let len = norm(&d);
            if len == 0.0 {
                continue;
            }
            for k in 0..3 {
                let v = d[k] / len / n * g;
                ga[i * 3 + k] += v;
                gb[j * 3 + k] -= v;
            }
        }
        vec![ga, gb]
    });
    Tensor::custom("matched_distance_loss", vec![1], vec![value], vec![a.clone(), b.clone()], backward)
}

/// Differentiable EMD: solves the matching on current values, then returns
/// [`matched_distance_loss`] under that matching.
pub fn emd_loss(a: &Tensor, b: &Tensor, solver: EmdSolver) -> Result<(Tensor, Matching)> {
    let ca = PointCloud::new(tensor_points(a, "emd_loss")?);
    let cb = PointCloud::new(tensor_points(b, "emd_loss")?);
    let (_, matching) = solver.solve(&ca, &cb)?;
    let loss = matched_distance_loss(a, b, &matching.perm)?;
    Ok((loss, matching))
}

/// Default voxel edge for [`overlap_ratio`]: the complete cloud's
/// bounding-box diagonal over 32.
pub fn default_voxel(complete: &PointCloud) -> Result<f64> {
    let (lo, hi) = complete.bounds().ok_or(Error::Empty("overlap reference"))?;
    Ok(norm(&sub(&hi, &lo)) / 32.0)
}

fn occupied(pc: &PointCloud, origin: &Point3, voxel: f64) -> HashSet<[i64; 3]> {
    pc.points
        .iter()
        .map(|p| {
            [
                ((p[0] - origin[0]) / voxel).floor() as i64,
                ((p[1] - origin[1]) / voxel).floor() as i64,
                ((p[2] - origin[2]) / voxel).floor() as i64,
            ]
        })
        .collect()
}

/// Surface-area proxy: occupied voxel count times voxel face area.
pub fn voxel_surface_area(pc: &PointCloud, origin: &Point3, voxel: f64) -> f64 {
    occupied(pc, origin, voxel).len() as f64 * voxel * voxel
}

/// Completeness ratio `S_p / S_c`, with both areas estimated by voxel
/// occupancy on one grid anchored at the complete cloud's bounding-box
/// minimum. `voxel = None` uses [`default_voxel`].
pub fn overlap_ratio(partial: &PointCloud, complete: &PointCloud, voxel: Option<f64>) -> Result<f64> {
    if partial.is_empty() || complete.is_empty() {
        return Err(Error::Empty("overlap ratio of an empty cloud"));
    }
    let voxel = match voxel {
        Some(v) => v,
        None => default_voxel(complete)?,
    };
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::InvalidArgument(format!("voxel size {voxel}")));
    }
    let origin = complete.bounds().unwrap().0;
    // the voxel face area cancels in the ratio
    let sp = occupied(partial, &origin, voxel).len() as f64;
    let sc = occupied(complete, &origin, voxel).len() as f64;
    Ok(sp / sc)
}

/// Per-instance evaluation summary, one CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub instance_id: String,
    pub cd: f64,
    pub emd: f64,
    pub overlap_ratio: f64,
    pub rot_err_deg: Option<f64>,
    pub trans_err: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "instance_id,cd,emd,overlap_ratio,rot_err_deg,trans_err";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            self.instance_id,
            self.cd,
            self.emd,
            self.overlap_ratio,
            opt(self.rot_err_deg),
            opt(self.trans_err)
        );
        s
    }
}

/// Largest cloud size used for EMD during evaluation; bigger clouds are
/// reduced by farthest point sampling first.
pub const EVAL_EMD_MAX_POINTS: usize = 2048;

/// CD, EMD and overlap for one prediction. EMD needs equal sizes, so both
/// clouds are reduced with farthest point sampling to the smaller size
/// (capped at `emd_max_points`) before matching.
pub fn evaluate(
    instance_id: &str,
    pred: &PointCloud,
    gt: &PointCloud,
    partial: Option<&PointCloud>,
    emd_max_points: usize,
) -> Result<MetricReport> {
    let cd = chamfer(pred, gt)?;
    let m = pred.len().min(gt.len()).min(emd_max_points.max(1));
    let pa = if pred.len() > m { farthest_point_sample(pred, m)? } else { pred.clone() };
    let pb = if gt.len() > m { farthest_point_sample(gt, m)? } else { gt.clone() };
    let (emd, _) = EmdSolver::Auto { exact_max: EMD_EXACT_MAX }.solve(&pa, &pb)?;
    // completeness of the input against the completion when an input is
    // given, otherwise of the prediction against the ground truth
    let overlap = match partial {
        Some(p) => overlap_ratio(p, pred, None)?,
        None => overlap_ratio(pred, gt, None)?,
    };
    Ok(MetricReport {
        instance_id: instance_id.to_string(),
        cd,
        emd,
        overlap_ratio: overlap,
        rot_err_deg: None,
        trans_err: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
    }

    fn chamfer_brute(a: &PointCloud, b: &PointCloud) -> f64 {
        let dir = |x: &PointCloud, y: &PointCloud| {
            x.points
                .iter()
                .map(|p| y.points.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cloud(&mut rng, 30);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let p = PointCloud::new(vec![[0.0; 3]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&p, &q).unwrap(), 2.0);
        assert!(chamfer(&p, &PointCloud::default()).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_cloud(&mut rng, 64);
        let b = random_cloud(&mut rng, 80);
        let fast = chamfer(&a, &b).unwrap();
        assert!((fast - chamfer_brute(&a, &b)).abs() < 1e-12);
        assert!((fast - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn emd_permuted_copy_is_zero() {
        let a = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0; 3]]);
        let (cost, m) = emd_exact(&a, &b).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(m.perm, vec![1, 0]);
        assert!(emd_exact(&a, &PointCloud::new(vec![[0.0; 3]])).is_err());
    }

    #[test]
    fn emd_exact_matches_all_permutations() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for k in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(k, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let perms = permutations(6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = random_cloud(&mut rng, 6);
            let b = random_cloud(&mut rng, 6);
            let best = perms
                .iter()
                .map(|p| Matching::from_perm(&a.points, &b.points, p.clone()).cost)
                .fold(f64::INFINITY, f64::min);
            let (cost, m) = emd_exact(&a, &b).unwrap();
            assert!(m.is_permutation());
            assert!((cost * 6.0 - best).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_approx_is_close_and_never_below_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_cloud(&mut rng, 64);
        let b = random_cloud(&mut rng, 64);
        let (exact, _) = emd_exact(&a, &b).unwrap();
        let (approx, m) = emd_approx(&a, &b, &AuctionConfig::default()).unwrap();
        assert!(m.is_permutation());
        assert!(approx >= exact - 1e-12);
        assert!(approx <= exact * 1.01);
        let (same, _) = emd_approx(&a, &a, &AuctionConfig::default()).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn overlap_examples() {
        // 20 x 20 grid of points, one per voxel of size 0.1
        let grid: Vec<Point3> = (0..400)
            .map(|k| [(k % 20) as f64 * 0.1 + 0.05, (k / 20) as f64 * 0.1 + 0.05, 0.0])
            .collect();
        let full = PointCloud::new(grid.clone());
        assert_eq!(overlap_ratio(&full, &full, Some(0.1)).unwrap(), 1.0);
        let half = PointCloud::new(grid.iter().copied().filter(|p| p[0] < 1.0).collect());
        let r = overlap_ratio(&half, &full, Some(0.1)).unwrap();
        assert!((r - 0.5).abs() <= 1.0 / 20.0, "{r}");
        let one = PointCloud::new(vec![grid[0]]);
        assert_eq!(overlap_ratio(&one, &full, Some(0.1)).unwrap(), 1.0 / 400.0);
        assert!(overlap_ratio(&one, &full, Some(0.0)).is_err());
    }

    #[test]
    fn chamfer_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cloud(&mut rng, 12);
        let b = random_cloud(&mut rng, 15);
        let at = Tensor::leaf(&[12, 3], a.to_tensor().unwrap().data().to_vec(), true).unwrap();
        let bt = b.to_tensor().unwrap();
        let loss = chamfer_loss(&at, &bt).unwrap();
        assert!((loss.item() - chamfer(&a, &b).unwrap()).abs() < 1e-12);
        loss.backward().unwrap();
        let g = at.grad().unwrap();
        let h = 1e-5;
        for k in 0..36 {
            // frozen-correspondence objective
            let eval = |delta: f64| {
                let mut pts = a.points.clone();
                pts[k / 3][k % 3] += delta;
                chamfer(&PointCloud::new(pts), &b).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn report_csv_row() {
        let r = MetricReport {
            instance_id: "car_01".into(),
            cd: 0.5,
            emd: 0.25,
            overlap_ratio: 1.0,
            rot_err_deg: None,
            trans_err: Some(2.0),
        };
        assert_eq!(r.to_csv_row(), "car_01,0.5,0.25,1,,2");
    }
}
