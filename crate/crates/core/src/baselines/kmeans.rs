use rand::Rng as _;

use crate::diffcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 25;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

/// Lloyd's algorithm result.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `K×w` centroids.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Inertia after seeding and after every iteration.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the rows of
/// `points`; stops after [`MAX_ITERATIONS`] or when inertia improves by
/// less than [`RELATIVE_TOLERANCE`]. Empty clusters keep their centroid.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<KMeans> {
    let n = points.row_count();
    if points.rank() != 2 {
        return Err(Error::invalid("k-means needs a matrix of points"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot place {k} centroids on {n} points")));
    }
    let w = points.row_len();
    let mut centroids = Tensor::zeros(vec![k, w]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = points.rows().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.rows().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, points.row(pick)));
        }
    }

    let assign_all = |centroids: &Tensor| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = points
            .rows()
            .map(|p| {
                let (c, d) = nearest(p, centroids);
                total += d;
                c
            })
            .collect();
        (a, total)
    };
    let (mut assignments, mut current) = assign_all(&centroids);
    let mut inertia = vec![current];
    for _ in 0..MAX_ITERATIONS {
        let mut sums = Tensor::zeros(vec![k, w]);
        let mut counts = vec![0usize; k];
        for (p, &c) in points.rows().zip(&assignments) {
            counts[c] += 1;
            sums.row_mut(c).iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let mean: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
                centroids.row_mut(c).copy_from_slice(&mean);
            }
        }
        let (next, value) = assign_all(&centroids);
        assignments = next;
        inertia.push(value);
        let improved = current - value;
        current = value;
        if current == 0.0 || improved <= RELATIVE_TOLERANCE * inertia[inertia.len() - 2] {
            break;
        }
    }
    Ok(KMeans { centroids, assignments, inertia })
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn inertia_never_increases() {
        for seed in 0..10 {
            let mut rng = seeded(seed);
            let pts = Tensor::new(vec![200, 3], (0..600).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let km = kmeans(&pts, 7, &mut rng).unwrap();
            for w in km.inertia.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.inertia);
            }
        }
    }

    #[test]
    fn one_centroid_per_point_is_exact() {
        let mut rng = seeded(1);
        let pts = Tensor::new(vec![12, 2], (0..24).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let km = kmeans(&pts, 12, &mut rng).unwrap();
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
        assert!(kmeans(&pts, 13, &mut rng).is_err());
    }
}
