//! Expansion of the single annotated query point into the set of tracking points.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Point;
use crate::par::Exec;
use crate::segment::{Mask, SegmentError, SegmenterBackend};
use crate::videoio::{Frame, QueryAnnotation};

pub const DEFAULT_OFFSET_PX: f64 = 8.0;
pub const DEFAULT_PER_ARM: usize = 1;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("crosshair offset must be > 0, got {0}")]
    InvalidOffset(f64),
    #[error("crosshair span {span} px must stay below half the smaller frame side ({limit} px)")]
    SpanTooLarge { span: f64, limit: f64 },
    #[error("per_arm and k must be at least 1")]
    InvalidCount,
    #[error("mask has {area} px, fewer than the {k} requested points")]
    MaskTooSmall { area: usize, k: usize },
    #[error("segmentation found no plate at the query point")]
    EmptyMask,
    #[error("unknown selection strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Segment(SegmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Single,
    Crosshairs,
    Random,
    KMedoids,
}

impl Strategy {
    pub fn needs_mask(self) -> bool {
        matches!(self, Strategy::Random | Strategy::KMedoids)
    }
}

impl FromStr for Strategy {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Strategy::Single),
            "crosshairs" => Ok(Strategy::Crosshairs),
            "random" => Ok(Strategy::Random),
            "kmedoids" => Ok(Strategy::KMedoids),
            other => Err(SelectError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::Crosshairs => "crosshairs",
            Strategy::Random => "random",
            Strategy::KMedoids => "kmedoids",
        })
    }
}

/// Frame-0 tracking points for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub instance_id: u32,
    pub strategy: Strategy,
    pub points: Vec<Point>,
}

pub fn select_single(q: &QueryAnnotation) -> PointSet {
    PointSet {
        instance_id: q.instance_id,
        strategy: Strategy::Single,
        points: vec![q.point()],
    }
}

/// The query point plus `per_arm` points on each of the four axis directions,
/// spaced `offset_px` apart. Each arm point is clamped into the frame along
/// its own axis only; the other coordinate stays the query's.
pub fn select_crosshairs(
    q: &QueryAnnotation,
    offset_px: f64,
    per_arm: usize,
    frame_dims: (usize, usize),
) -> Result<PointSet, SelectError> {
    if !(offset_px > 0.0) {
        return Err(SelectError::InvalidOffset(offset_px));
    }
    if per_arm == 0 {
        return Err(SelectError::InvalidCount);
    }
    let (w, h) = frame_dims;
    let span = offset_px * per_arm as f64;
    let limit = w.min(h) as f64 / 2.0;
    if span >= limit {
        return Err(SelectError::SpanTooLarge { span, limit });
    }
    let cx = |x: f64| x.clamp(0.0, (w - 1) as f64);
    let cy = |y: f64| y.clamp(0.0, (h - 1) as f64);
    let c = q.point();
    let mut points = vec![c];
    for (dx, dy) in [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)] {
        for k in 1..=per_arm {
            let d = k as f64 * offset_px;
            let p = if dy == 0.0 {
                Point::new(cx(c.x + dx * d), c.y)
            } else {
                Point::new(c.x, cy(c.y + dy * d))
            };
            points.push(p);
        }
    }
    Ok(PointSet {
        instance_id: q.instance_id,
        strategy: Strategy::Crosshairs,
        points,
    })
}

/// Frame-0 plate mask prompted by the query point alone.
pub fn bootstrap_mask(
    frame0: &Frame,
    q: &QueryAnnotation,
    segmenter: &dyn SegmenterBackend,
) -> Result<Mask, SelectError> {
    match segmenter.segment(frame0, &[q.point()]) {
        Ok(m) if m.area() > 0 => Ok(m),
        Ok(_) | Err(SegmentError::EmptyMask) | Err(SegmentError::AreaCapExceeded { .. }) => {
            Err(SelectError::EmptyMask)
        }
        Err(e) => Err(SelectError::Segment(e)),
    }
}

/// `k` points in total: the query point plus `k - 1` distinct mask pixels drawn
/// uniformly without replacement.
pub fn select_random(
    q: &QueryAnnotation,
    mask: &Mask,
    k: usize,
    seed: u64,
) -> Result<PointSet, SelectError> {
    if k == 0 {
        return Err(SelectError::InvalidCount);
    }
    let q_px = q
        .point()
        .in_bounds(mask.width(), mask.height())
        .then(|| q.point().to_pixel(mask.width(), mask.height()));
    let pool: Vec<(usize, usize)> = mask
        .pixels()
        .into_iter()
        .filter(|&p| Some(p) != q_px)
        .collect();
    let area = mask.area();
    if area < k || pool.len() < k - 1 {
        return Err(SelectError::MaskTooSmall { area, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![q.point()];
    let mut picks = index::sample(&mut rng, pool.len(), k - 1).into_vec();
    picks.sort_unstable();
    points.extend(
        picks
            .into_iter()
            .map(|i| Point::new(pool[i].0 as f64, pool[i].1 as f64)),
    );
    Ok(PointSet {
        instance_id: q.instance_id,
        strategy: Strategy::Random,
        points,
    })
}

/// `k` medoids of the mask pixels under Euclidean distance.
pub fn select_kmedoids(
    q: &QueryAnnotation,
    mask: &Mask,
    k: usize,
    exec: Exec,
) -> Result<PointSet, SelectError> {
    if k == 0 {
        return Err(SelectError::InvalidCount);
    }
    let coords: Vec<Point> = mask
        .pixels()
        .into_iter()
        .map(|(x, y)| Point::new(x as f64, y as f64))
        .collect();
    if coords.len() < k {
        return Err(SelectError::MaskTooSmall {
            area: coords.len(),
            k,
        });
    }
    let medoids = kmedoids(&coords, k, exec);
    Ok(PointSet {
        instance_id: q.instance_id,
        strategy: Strategy::KMedoids,
        points: medoids.into_iter().map(|i| coords[i]).collect(),
    })
}

/// Sum over points of the distance to their nearest medoid.
pub fn medoid_cost(points: &[Point], medoids: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            medoids
                .iter()
                .map(|&m| p.distance(points[m]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Work limit (subsets times points times k) under which `kmedoids` searches
/// every subset instead of running swaps.
pub const EXACT_KMEDOIDS_BUDGET: u64 = 4_000_000;

/// C(n, k), saturating at `u64::MAX`.
fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k) as u64;
    let mut c: u64 = 1;
    for i in 0..k {
        c = match c.checked_mul(n as u64 - i) {
            Some(v) => v / (i + 1),
            None => return u64::MAX,
        };
    }
    c
}

/// Global minimum by enumerating every k-subset in lexicographic order.
fn kmedoids_exact(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut combo: Vec<usize> = (0..k).collect();
    let mut best = combo.clone();
    let mut best_cost = medoid_cost(points, &combo);
    loop {
        // advance to the next combination
        let mut i = k;
        while i > 0 && combo[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..k {
            combo[j] = combo[j - 1] + 1;
        }
        let cost = medoid_cost(points, &combo);
        if cost < best_cost - 1e-12 {
            best_cost = cost;
            best.clone_from(&combo);
        }
    }
    best
}

/// K-Medoids. Small instances are solved exactly by enumeration; larger ones
/// use Park-Jun seeding followed by best-improvement medoid swaps until no
/// swap lowers the cost. Returns sorted indices into `points`.
pub fn kmedoids(points: &[Point], k: usize, exec: Exec) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    if k == n {
        return (0..n).collect();
    }
    if binomial(n, k).saturating_mul((n * k) as u64) <= EXACT_KMEDOIDS_BUDGET {
        return kmedoids_exact(points, k);
    }
    let d = |i: usize, j: usize| points[i].distance(points[j]);
    let idx: Vec<usize> = (0..n).collect();

    // Park-Jun: v_j = Σ_i d_ij / Σ_l d_il, take the k smallest
    let row_sums = exec.map(&idx, |&i| (0..n).map(|l| d(i, l)).sum::<f64>());
    let v = exec.map(&idx, |&j| {
        (0..n)
            .filter(|&i| row_sums[i] > 0.0)
            .map(|i| d(i, j) / row_sums[i])
            .sum::<f64>()
    });
    let mut order = idx.clone();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut medoids: Vec<usize> = order[..k].to_vec();

    const EPS: f64 = 1e-9;
    loop {
        // nearest and second-nearest medoid distance per point
        let mut nearest = vec![(0usize, f64::INFINITY); n];
        let mut second = vec![f64::INFINITY; n];
        for i in 0..n {
            for (slot, &m) in medoids.iter().enumerate() {
                let dist = d(i, m);
                if dist < nearest[i].1 {
                    second[i] = nearest[i].1;
                    nearest[i] = (slot, dist);
                } else if dist < second[i] {
                    second[i] = dist;
                }
            }
        }
        let is_medoid = {
            let mut v = vec![false; n];
            for &m in &medoids {
                v[m] = true;
            }
            v
        };
        // For each candidate o, the cost change of swapping it with each medoid slot.
        let deltas = exec.map(&idx, |&o| {
            if is_medoid[o] {
                return None;
            }
            let mut delta = vec![0.0f64; k];
            let mut shared = 0.0;
            for i in 0..n {
                let doi = d(o, i);
                let (slot, dn) = nearest[i];
                if doi < dn {
                    // o becomes i's nearest whichever medoid leaves
                    shared += doi - dn;
                } else {
                    // only removing i's nearest medoid changes its distance
                    delta[slot] += doi.min(second[i]) - dn;
                }
            }
            let (best_slot, best) = delta
                .iter()
                .enumerate()
                .map(|(s, v)| (s, v + shared))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            Some((best, best_slot))
        });
        let mut best: Option<(f64, usize, usize)> = None;
        for (o, entry) in deltas.into_iter().enumerate() {
            if let Some((delta, slot)) = entry {
                if delta < -EPS && best.is_none_or(|b| delta < b.0) {
                    best = Some((delta, o, slot));
                }
            }
        }
        match best {
            Some((_, o, slot)) => medoids[slot] = o,
            None => break,
        }
    }
    medoids.sort_unstable();
    medoids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbImage;
    use crate::segment::BuiltinSegmenter;

    fn q(x: f64, y: f64) -> QueryAnnotation {
        QueryAnnotation::new(0, x, y)
    }

    #[test]
    fn single_is_identity() {
        for (x, y) in [(100.0, 50.0), (0.0, 0.0)] {
            let s = select_single(&q(x, y));
            assert_eq!(s.points, vec![Point::new(x, y)]);
            assert_eq!(s.strategy, Strategy::Single);
        }
    }

    #[test]
    fn crosshairs_layout() {
        let s = select_crosshairs(&q(100.0, 50.0), 8.0, 1, (640, 360)).unwrap();
        let expect = [
            (100.0, 50.0),
            (92.0, 50.0),
            (108.0, 50.0),
            (100.0, 42.0),
            (100.0, 58.0),
        ];
        assert_eq!(s.points, expect.map(|(x, y)| Point::new(x, y)).to_vec());
        assert_eq!(s.points.len(), 5);

        let s = select_crosshairs(&q(3.0, 3.0), 8.0, 1, (20, 20)).unwrap();
        assert_eq!(s.points[1], Point::new(0.0, 3.0));
        assert_eq!(s.points[3], Point::new(3.0, 0.0));

        assert_eq!(
            select_crosshairs(&q(50.0, 50.0), 4.0, 3, (200, 200))
                .unwrap()
                .points
                .len(),
            13
        );
        assert!(matches!(
            select_crosshairs(&q(1.0, 1.0), 0.0, 1, (20, 20)),
            Err(SelectError::InvalidOffset(_))
        ));
        assert!(matches!(
            select_crosshairs(&q(1.0, 1.0), 8.0, 2, (20, 20)),
            Err(SelectError::SpanTooLarge { .. })
        ));
    }

    #[test]
    fn bootstrap_follows_segmenter() {
        let mut img = RgbImage::filled(60, 40, [50, 60, 70]);
        img.fill_rect(10, 10, 20, 8, [230, 230, 230]);
        let frame = Frame::new(0, img);
        let seg = BuiltinSegmenter::default();
        let m = bootstrap_mask(&frame, &q(15.0, 12.0), &seg).unwrap();
        assert_eq!(m.area(), 160);
        assert!(matches!(
            bootstrap_mask(&frame, &q(50.0, 35.0), &seg),
            Err(SelectError::EmptyMask)
        ));
    }

    #[test]
    fn random_is_seeded_and_on_mask() {
        let px: Vec<_> = (0..6)
            .flat_map(|y| (0..10).map(move |x| (x + 3, y + 2)))
            .collect();
        let mask = Mask::from_pixels(20, 12, &px);
        let a = select_random(&q(5.0, 4.0), &mask, 5, 42).unwrap();
        let b = select_random(&q(5.0, 4.0), &mask, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 5);
        assert_eq!(a.points[0], Point::new(5.0, 4.0));
        assert!(a.points.iter().all(|p| mask.contains_point(*p)));
        let mut uniq: Vec<_> = a.points.iter().map(|p| (p.x as i64, p.y as i64)).collect();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 5);

        let one = Mask::from_pixels(8, 8, &[(4, 4)]);
        assert_eq!(
            select_random(&q(4.0, 4.0), &one, 1, 7).unwrap().points,
            vec![Point::new(4.0, 4.0)]
        );
        assert!(matches!(
            select_random(&q(4.0, 4.0), &one, 2, 7),
            Err(SelectError::MaskTooSmall { .. })
        ));
    }

    #[test]
    fn kmedoids_with_k_equal_area_returns_every_pixel() {
        let px = [(1, 1), (2, 5), (7, 3)];
        let mask = Mask::from_pixels(10, 10, &px);
        let s = select_kmedoids(&q(1.0, 1.0), &mask, 3, Exec::Sequential).unwrap();
        let mut got: Vec<_> = s
            .points
            .iter()
            .map(|p| (p.x as usize, p.y as usize))
            .collect();
        got.sort();
        let mut want = px.to_vec();
        want.sort();
        assert_eq!(got, want);
        assert!(matches!(
            select_kmedoids(&q(1.0, 1.0), &mask, 4, Exec::Sequential),
            Err(SelectError::MaskTooSmall { .. })
        ));
    }

    #[test]
    fn kmedoids_splits_separated_blobs() {
        let px = [(1, 1), (2, 1), (1, 2), (15, 14), (16, 14), (16, 15)];
        let pts: Vec<Point> = px
            .iter()
            .map(|&(x, y)| Point::new(x as f64, y as f64))
            .collect();
        let m = kmedoids(&pts, 2, Exec::Sequential);
        assert!(m[0] < 3 && m[1] >= 3);
        // exhaustive oracle over all pairs
        let mut best = f64::INFINITY;
        for a in 0..6 {
            for b in a + 1..6 {
                best = best.min(medoid_cost(&pts, &[a, b]));
            }
        }
        assert!((medoid_cost(&pts, &m) - best).abs() < 1e-9);
    }

    #[test]
    fn kmedoids_k1_is_the_exhaustive_minimizer() {
        let pts: Vec<Point> = [(0, 0), (1, 0), (5, 0), (6, 1), (2, 3), (9, 9)]
            .iter()
            .map(|&(x, y)| Point::new(x as f64, y as f64))
            .collect();
        let m = kmedoids(&pts, 1, Exec::Sequential);
        let best = (0..pts.len())
            .map(|i| medoid_cost(&pts, &[i]))
            .fold(f64::INFINITY, f64::min);
        assert!((medoid_cost(&pts, &m) - best).abs() < 1e-9);
    }
}
