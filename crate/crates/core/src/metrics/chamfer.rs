//! Symmetric Chamfer distance with squared nearest-neighbor distances.

use std::collections::HashMap;

use super::MetricsError;
use crate::geom::Vec3;

fn d2(a: &Vec3, b: &Vec3) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

fn check(p: &[Vec3], q: &[Vec3]) -> Result<(), MetricsError> {
    if p.is_empty() || q.is_empty() {
        Err(MetricsError::EmptyCloud)
    } else {
        Ok(())
    }
}

/// O(|P|·|Q|) reference.
pub fn chamfer_distance_brute(p: &[Vec3], q: &[Vec3]) -> Result<f64, MetricsError> {
    check(p, q)?;
    let one = |a: &[Vec3], b: &[Vec3]| {
        a.iter().map(|x| b.iter().map(|y| d2(x, y)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    Ok(one(p, q) + one(q, p))
}

/// Uniform hash grid over one cloud for exact nearest-neighbor queries.
struct Grid<'a> {
    pts: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(pts: &'a [Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let per_axis = (pts.len() as f64).cbrt().ceil().max(1.0);
        let cell = if ext > 0.0 { ext / per_axis } else { 1.0 };
        let mut g = Grid { pts, lo, cell, dims: [1; 3], cells: HashMap::new() };
        for k in 0..3 {
            g.dims[k] = ((hi[k] - lo[k]) / cell).floor() as i64 + 1;
        }
        for (i, p) in pts.iter().enumerate() {
            g.cells.entry(g.key(p)).or_default().push(i);
        }
        g
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.lo[k]) / self.cell).floor() as i64)
    }

    /// Visits shells of cells around the query's cell (clamped into the
    /// grid) until no unvisited cell can hold a closer point.
    fn nearest_d2(&self, x: &Vec3) -> f64 {
        let k = self.key(x);
        let c = [0, 1, 2].map(|a| k[a].clamp(0, self.dims[a] - 1));
        let mut best = f64::INFINITY;
        let reach = *self.dims.iter().max().unwrap();
        for r in 0..=reach {
            for i in -r..=r {
                for j in -r..=r {
                    for k in -r..=r {
                        if i.abs().max(j.abs()).max(k.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + i, c[1] + j, c[2] + k]) {
                            for &id in ids {
                                best = best.min(d2(x, &self.pts[id]));
                            }
                        }
                    }
                }
            }
            // Unvisited cells lie more than r cells away along some axis.
            let bound = r as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best
    }
}

/// Grid-accelerated path; returns the same nearest distances as the
/// brute-force reference and sums them in the same order.
pub fn chamfer_distance(p: &[Vec3], q: &[Vec3]) -> Result<f64, MetricsError> {
    check(p, q)?;
    let one = |a: &[Vec3], b: &[Vec3]| {
        let g = Grid::new(b);
        a.iter().map(|x| g.nearest_d2(x)).sum::<f64>() / a.len() as f64
    };
    Ok(one(p, q) + one(q, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vec3> {
        (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-spread..spread))).collect()
    }

    #[test]
    fn definition_values() {
        let p = vec![[0.0, 0.0, 0.0]];
        let q = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_distance(&p, &q).unwrap(), 2.0);
        assert_eq!(chamfer_distance_brute(&p, &q).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&q, &q).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[], &q), Err(MetricsError::EmptyCloud));
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..100 {
            let (n, m) = (rng.random_range(1..300), rng.random_range(1..300));
            let p = cloud(&mut rng, n, 1.0);
            // Offset and differently scaled second cloud, including queries
            // far outside the grid.
            let s = if i % 3 == 0 { 0.05 } else { 1.5 };
            let q: Vec<Vec3> = cloud(&mut rng, m, s).iter().map(|v| [v[0] + 0.3, v[1], v[2] - 0.2]).collect();
            let (a, b) = (chamfer_distance(&p, &q).unwrap(), chamfer_distance_brute(&p, &q).unwrap());
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_scales_quadratically(seed in 0u64..1000, a in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 40, 1.0);
            let q = cloud(&mut rng, 30, 1.0);
            let d = chamfer_distance(&p, &q).unwrap();
            prop_assert!((d - chamfer_distance(&q, &p).unwrap()).abs() < 1e-12);
            let sp: Vec<Vec3> = p.iter().map(|v| v.map(|x| a * x)).collect();
            let sq: Vec<Vec3> = q.iter().map(|v| v.map(|x| a * x)).collect();
            prop_assert!((chamfer_distance(&sp, &sq).unwrap() - a * a * d).abs() < 1e-9 * (1.0 + a * a * d));
            prop_assert!(d >= 0.0);
        }
    }
}
