//! Ear clipping for polygons with holes.
//!
//! Holes are spliced into the outer ring through bridge edges to a visible
//! vertex, then the resulting weakly simple ring is clipped ear by ear.

use crate::geom::{orient2, sub2, dot2, Vec2};

use super::sketch::segments_touch;

const AREA_EPS: f64 = 1e-14;

/// Triangulates `outer` (counterclockwise) minus `holes` (clockwise).
/// Returns the merged vertex list and triangles indexing into it.
pub fn triangulate(outer: &[Vec2], holes: &[&[Vec2]]) -> (Vec<Vec2>, Vec<[usize; 3]>) {
    let mut ring: Vec<Vec2> = outer.to_vec();
    let mut pending: Vec<&[Vec2]> = holes.to_vec();
    // Rightmost holes first so bridges never cross later holes.
    pending.sort_by(|a, b| max_x(b).total_cmp(&max_x(a)));
    for (k, hole) in pending.iter().enumerate() {
        let rest = &pending[k + 1..];
        ring = bridge(&ring, hole, rest);
    }
    let tris = clip_ears(&ring);
    (ring, tris)
}

fn max_x(ring: &[Vec2]) -> f64 {
    ring.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max)
}

fn bridge(ring: &[Vec2], hole: &[Vec2], others: &[&[Vec2]]) -> Vec<Vec2> {
    let (hi, m) = hole
        .iter()
        .enumerate()
        .max_by(|a, b| a.1[0].total_cmp(&b.1[0]).then(b.0.cmp(&a.0)))
        .map(|(i, p)| (i, *p))
        .expect("hole has vertices");
    let mut candidates: Vec<usize> = (0..ring.len()).collect();
    let d2 = |p: Vec2| {
        let d = sub2(p, m);
        dot2(d, d)
    };
    candidates.sort_by(|&a, &b| d2(ring[a]).total_cmp(&d2(ring[b])).then(a.cmp(&b)));
    let visible = |vi: usize| {
        let v = ring[vi];
        let n = ring.len();
        for i in 0..n {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            if a == v || b == v {
                continue;
            }
            if segments_touch(m, v, a, b) {
                return false;
            }
        }
        let hn = hole.len();
        for i in 0..hn {
            let (a, b) = (hole[i], hole[(i + 1) % hn]);
            if a == m || b == m {
                continue;
            }
            if segments_touch(m, v, a, b) {
                return false;
            }
        }
        others.iter().all(|o| {
            let on = o.len();
            (0..on).all(|i| !segments_touch(m, v, o[i], o[(i + 1) % on]))
        })
    };
    // A reflex-safe choice: prefer the nearest visible vertex whose wedge
    // contains the bridge direction.
    let in_wedge = |vi: usize| {
        let n = ring.len();
        let (p, v, q) = (ring[(vi + n - 1) % n], ring[vi], ring[(vi + 1) % n]);
        let convex = orient2(p, v, q) >= 0.0;
        let l = orient2(p, v, m) > 0.0;
        let r = orient2(v, q, m) > 0.0;
        if convex {
            l && r
        } else {
            l || r
        }
    };
    let vi = candidates
        .iter()
        .copied()
        .find(|&vi| in_wedge(vi) && visible(vi))
        .or_else(|| candidates.iter().copied().find(|&vi| visible(vi)))
        .unwrap_or(candidates[0]);

    let mut out = Vec::with_capacity(ring.len() + hole.len() + 2);
    out.extend_from_slice(&ring[..=vi]);
    for k in 0..=hole.len() {
        out.push(hole[(hi + k) % hole.len()]);
    }
    out.push(ring[vi]);
    out.extend_from_slice(&ring[vi + 1..]);
    out
}

fn clip_ears(ring: &[Vec2]) -> Vec<[usize; 3]> {
    let mut idx: Vec<usize> = (0..ring.len()).collect();
    let mut tris = Vec::with_capacity(ring.len().saturating_sub(2));
    let mut guard = 0usize;
    while idx.len() > 3 {
        let n = idx.len();
        let mut clipped = false;
        // Drop straight or doubled-back vertices without emitting a triangle.
        for i in 0..n {
            let (a, b, c) = (ring[idx[(i + n - 1) % n]], ring[idx[i]], ring[idx[(i + 1) % n]]);
            if orient2(a, b, c).abs() <= AREA_EPS && dot2(sub2(b, a), sub2(c, b)) >= 0.0 {
                idx.remove(i);
                clipped = true;
                break;
            }
            if a == c || a == b || b == c {
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        if clipped {
            continue;
        }
        for i in 0..n {
            let (ia, ib, ic) = (idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]);
            if is_ear(ring, &idx, ia, ib, ic) {
                tris.push([ia, ib, ic]);
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            // Numerical dead end: clip the most convex vertex.
            let i = (0..n)
                .max_by(|&x, &y| {
                    let o = |i: usize| orient2(ring[idx[(i + n - 1) % n]], ring[idx[i]], ring[idx[(i + 1) % n]]);
                    o(x).total_cmp(&o(y))
                })
                .unwrap();
            let t = [idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]];
            if orient2(ring[t[0]], ring[t[1]], ring[t[2]]) > AREA_EPS {
                tris.push(t);
            }
            idx.remove(i);
        }
        guard += 1;
        if guard > 4 * ring.len() + 16 {
            break;
        }
    }
    if idx.len() == 3 && orient2(ring[idx[0]], ring[idx[1]], ring[idx[2]]) > AREA_EPS {
        tris.push([idx[0], idx[1], idx[2]]);
    }
    tris
}

fn is_ear(ring: &[Vec2], idx: &[usize], ia: usize, ib: usize, ic: usize) -> bool {
    let (a, b, c) = (ring[ia], ring[ib], ring[ic]);
    if orient2(a, b, c) <= AREA_EPS {
        return false;
    }
    idx.iter().all(|&j| {
        let p = ring[j];
        if p == a || p == b || p == c {
            return true;
        }
        !(orient2(a, b, p) >= 0.0 && orient2(b, c, p) >= 0.0 && orient2(c, a, p) >= 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ring_area;

    fn tri_area(v: &[Vec2], t: &[[usize; 3]]) -> f64 {
        t.iter().map(|t| orient2(v[t[0]], v[t[1]], v[t[2]]) / 2.0).sum()
    }

    fn circle(c: Vec2, r: f64, n: usize, ccw: bool) -> Vec<Vec2> {
        let mut v: Vec<Vec2> = (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        if !ccw {
            v.reverse();
        }
        v
    }

    #[test]
    fn square() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let (v, t) = triangulate(&sq, &[]);
        assert_eq!(t.len(), 2);
        assert!((tri_area(&v, &t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concave_l_shape() {
        let l = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        let (v, t) = triangulate(&l, &[]);
        assert_eq!(t.len(), 4);
        assert!((tri_area(&v, &t) - 3.0).abs() < 1e-12);
        assert!(t.iter().all(|t| orient2(v[t[0]], v[t[1]], v[t[2]]) > 0.0));
    }

    #[test]
    fn square_with_two_holes() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let h1 = circle([0.3, 0.5], 0.1, 32, false);
        let h2 = circle([0.7, 0.5], 0.15, 32, false);
        let (v, t) = triangulate(&sq, &[&h1, &h2]);
        let expect = 1.0 + ring_area(&h1) + ring_area(&h2);
        assert!((tri_area(&v, &t) - expect).abs() < 1e-9, "{} vs {}", tri_area(&v, &t), expect);
        assert!(t.iter().all(|t| orient2(v[t[0]], v[t[1]], v[t[2]]) > 0.0));
    }

    #[test]
    fn collinear_vertices_skipped() {
        let sq = [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let (v, t) = triangulate(&sq, &[]);
        assert!((tri_area(&v, &t) - 1.0).abs() < 1e-12);
        assert!(t.iter().all(|t| orient2(v[t[0]], v[t[1]], v[t[2]]) > 1e-14));
    }
}
