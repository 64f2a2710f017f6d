//! Points, simulation boxes, finite configurations and cell lists.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative collision tolerance: points closer than `R_DISTINCT_REL * L` collide.
pub const R_DISTINCT_REL: f64 = 1e-9;

/// Upper bound on the number of cells a [`CellList`] allocates.
const MAX_CELLS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryMode {
    Free,
    Periodic,
}

/// The box `[-L/2, L/2]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimBox {
    dim: usize,
    side: f64,
    mode: BoundaryMode,
}

impl SimBox {
    pub fn new(dim: usize, side: f64, mode: BoundaryMode) -> Result<Self> {
        if dim == 0 {
            return invalid("box dimension must be at least 1");
        }
        if !(side.is_finite() && side > 0.0) {
            return invalid(format!("box side must be positive and finite, got {side}"));
        }
        Ok(Self { dim, side, mode })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn half(&self) -> f64 {
        0.5 * self.side
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    pub fn r_distinct(&self) -> f64 {
        R_DISTINCT_REL * self.side
    }

    /// Whether `p` lies in the box. Periodic boxes are half-open.
    pub fn contains(&self, p: &[f64]) -> bool {
        let h = self.half();
        p.len() == self.dim
            && p.iter().all(|&c| match self.mode {
                BoundaryMode::Free => (-h..=h).contains(&c),
                BoundaryMode::Periodic => (-h..h).contains(&c),
            })
    }

    /// Wraps `p` into the box in periodic mode; no-op in free mode.
    pub fn wrap(&self, p: &mut [f64]) {
        if self.mode == BoundaryMode::Periodic {
            let l = self.side;
            let h = self.half();
            for c in p.iter_mut() {
                *c -= l * ((*c + h) / l).floor();
                if *c >= h {
                    *c -= l;
                }
            }
        }
    }

    /// Writes `p - q` (minimum image in periodic mode) into `out`.
    #[inline]
    pub fn displacement(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        for k in 0..self.dim {
            let mut d = p[k] - q[k];
            if self.mode == BoundaryMode::Periodic {
                d -= self.side * (d / self.side).round();
            }
            out[k] = d;
        }
    }

    #[inline]
    pub fn distance_sq(&self, p: &[f64], q: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.dim {
            let mut d = p[k] - q[k];
            if self.mode == BoundaryMode::Periodic {
                d -= self.side * (d / self.side).round();
            }
            s += d * d;
        }
        s
    }
}

/// A point of `R^d` with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return invalid("point must have at least one coordinate");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return invalid("point coordinates must be finite");
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Distance between two points of `b`, minimum image in periodic mode.
pub fn distance(b: &SimBox, p: &Point, q: &Point) -> Result<f64> {
    if p.dim() != b.dim() || q.dim() != b.dim() {
        return invalid(format!(
            "dimension mismatch: box {}, points {} and {}",
            b.dim(),
            p.dim(),
            q.dim()
        ));
    }
    Ok(b.distance_sq(p.coords(), q.coords()).sqrt())
}

/// An ordered list of distinct points inside a box.
///
/// Coordinates are stored flat, point `i` occupying `coords[i*d..(i+1)*d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    sim_box: SimBox,
    coords: Vec<f64>,
}

impl Configuration {
    pub fn empty(sim_box: SimBox) -> Self {
        Self { sim_box, coords: Vec::new() }
    }

    pub fn new(sim_box: SimBox, points: &[Point]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * sim_box.dim());
        for p in points {
            if p.dim() != sim_box.dim() {
                return invalid("point dimension does not match box");
            }
            coords.extend_from_slice(p.coords());
        }
        Self::from_flat(sim_box, coords)
    }

    /// Builds a configuration from flat coordinates, validating all invariants.
    pub fn from_flat(sim_box: SimBox, coords: Vec<f64>) -> Result<Self> {
        let d = sim_box.dim();
        if coords.len() % d != 0 {
            return invalid("flat coordinate length is not a multiple of the dimension");
        }
        let cfg = Self { sim_box, coords };
        for i in 0..cfg.len() {
            let p = cfg.point(i);
            if p.iter().any(|c| !c.is_finite()) {
                return invalid(format!("point {i} has non-finite coordinates"));
            }
            if !sim_box.contains(p) {
                return invalid(format!("point {i} lies outside the box"));
            }
        }
        let r2 = sim_box.r_distinct().powi(2);
        for i in 0..cfg.len() {
            for j in (i + 1)..cfg.len() {
                if sim_box.distance_sq(cfg.point(i), cfg.point(j)) < r2 {
                    return invalid(format!("points {i} and {j} collide"));
                }
            }
        }
        Ok(cfg)
    }

    pub fn sim_box(&self) -> &SimBox {
        &self.sim_box
    }

    pub fn dim(&self) -> usize {
        self.sim_box.dim()
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.sim_box.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.sim_box.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.sim_box.dim())
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn to_points(&self) -> Vec<Point> {
        self.points().map(|p| Point(p.to_vec())).collect()
    }

    /// Whether `p` could be added without leaving the box or colliding.
    pub fn admits(&self, p: &[f64], skip: Option<usize>) -> bool {
        if p.len() != self.dim() || p.iter().any(|c| !c.is_finite()) || !self.sim_box.contains(p) {
            return false;
        }
        let r2 = self.sim_box.r_distinct().powi(2);
        self.points()
            .enumerate()
            .all(|(j, q)| Some(j) == skip || self.sim_box.distance_sq(p, q) >= r2)
    }

    pub fn with_inserted(&self, p: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.insert(p)?;
        Ok(next)
    }

    pub fn with_removed(&self, i: usize) -> Result<Self> {
        let mut next = self.clone();
        next.remove(i)?;
        Ok(next)
    }

    pub fn with_moved(&self, i: usize, p: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.move_point(i, p)?;
        Ok(next)
    }

    /// Appends `p`; on error `self` is unchanged.
    pub fn insert(&mut self, p: &[f64]) -> Result<()> {
        if !self.admits(p, None) {
            return invalid("inserted point is outside the box or collides");
        }
        self.coords.extend_from_slice(p);
        Ok(())
    }

    /// Removes point `i`, moving the last point into its slot.
    pub fn remove(&mut self, i: usize) -> Result<()> {
        let n = self.len();
        if i >= n {
            return invalid(format!("index {i} out of range for {n} points"));
        }
        let d = self.dim();
        let last = n - 1;
        if i != last {
            let (head, tail) = self.coords.split_at_mut(last * d);
            head[i * d..(i + 1) * d].copy_from_slice(&tail[..d]);
        }
        self.coords.truncate(last * d);
        Ok(())
    }

    pub fn move_point(&mut self, i: usize, p: &[f64]) -> Result<()> {
        if i >= self.len() {
            return invalid(format!("index {i} out of range"));
        }
        if !self.admits(p, Some(i)) {
            return invalid("moved point is outside the box or collides");
        }
        let d = self.dim();
        self.coords[i * d..(i + 1) * d].copy_from_slice(p);
        Ok(())
    }

    /// Smallest pairwise distance, `+inf` for fewer than two points.
    pub fn min_pair_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.min(self.sim_box.distance_sq(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }

    /// Hash of the box and exact coordinate bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sim_box.dim.hash(&mut h);
        self.sim_box.side.to_bits().hash(&mut h);
        self.sim_box.mode.hash(&mut h);
        for c in &self.coords {
            c.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Uniform grid of point-index buckets with side at least `cutoff`.
#[derive(Debug, Clone)]
pub struct CellList {
    cutoff: f64,
    per_dim: usize,
    cell_side: f64,
    sim_box: SimBox,
    buckets: Vec<Vec<usize>>,
    source_hash: u64,
}

pub fn build_cell_list(config: &Configuration, cutoff: f64) -> Result<CellList> {
    let b = *config.sim_box();
    if !(cutoff > 0.0) {
        return invalid("cutoff must be positive");
    }
    if cutoff > b.side() {
        return invalid(format!("cutoff {cutoff} exceeds box side {}", b.side()));
    }
    let mut per_dim = ((b.side() / cutoff).floor() as usize).max(1);
    while per_dim > 1 && per_dim.checked_pow(b.dim() as u32).map_or(true, |n| n > MAX_CELLS) {
        per_dim -= 1;
    }
    let total = per_dim.pow(b.dim() as u32);
    let mut cl = CellList {
        cutoff,
        per_dim,
        cell_side: b.side() / per_dim as f64,
        sim_box: b,
        buckets: vec![Vec::new(); total],
        source_hash: config.content_hash(),
    };
    for (i, p) in config.points().enumerate() {
        let c = cl.cell_of(p);
        cl.buckets[c].push(i);
    }
    Ok(cl)
}

impl CellList {
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn occupied_buckets(&self) -> usize {
        self.buckets.iter().filter(|b| !b.is_empty()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(|b| b.is_empty())
    }

    fn axis_index(&self, c: f64) -> usize {
        let idx = ((c + self.sim_box.half()) / self.cell_side).floor();
        idx.clamp(0.0, (self.per_dim - 1) as f64) as usize
    }

    fn cell_of(&self, p: &[f64]) -> usize {
        p.iter().fold(0, |acc, &c| acc * self.per_dim + self.axis_index(c))
    }

    /// Indices of points within distance `r` of `center`, excluding `exclude`.
    pub fn neighbors(
        &self,
        config: &Configuration,
        center: &[f64],
        r: f64,
        exclude: Option<usize>,
    ) -> Result<Vec<usize>> {
        if r > self.cutoff {
            return invalid(format!("radius {r} exceeds cutoff {}", self.cutoff));
        }
        if center.len() != self.sim_box.dim() {
            return invalid("center dimension does not match box");
        }
        if config.content_hash() != self.source_hash {
            return Err(Error::StaleStructure);
        }
        let d = self.sim_box.dim();
        let n = self.per_dim as isize;
        let periodic = self.sim_box.mode() == BoundaryMode::Periodic;
        let base: Vec<isize> = center.iter().map(|&c| self.axis_index(c) as isize).collect();

        let mut cells = Vec::with_capacity(3usize.pow(d as u32));
        let mut offset = vec![-1isize; d];
        'outer: loop {
            let mut flat = 0usize;
            let mut valid = true;
            for k in 0..d {
                let mut a = base[k] + offset[k];
                if periodic {
                    a = a.rem_euclid(n);
                } else if a < 0 || a >= n {
                    valid = false;
                }
                flat = flat * self.per_dim + a.max(0) as usize;
            }
            if valid {
                cells.push(flat);
            }
            for k in (0..d).rev() {
                offset[k] += 1;
                if offset[k] <= 1 {
                    continue 'outer;
                }
                offset[k] = -1;
            }
            break;
        }
        cells.sort_unstable();
        cells.dedup();

        let r2 = r * r;
        let mut out = Vec::new();
        for c in cells {
            for &i in &self.buckets[c] {
                if Some(i) != exclude && self.sim_box.distance_sq(center, config.point(i)) <= r2 {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// O(n^2) reference for [`CellList::neighbors`].
pub fn neighbors_brute_force(
    config: &Configuration,
    center: &[f64],
    r: f64,
    exclude: Option<usize>,
) -> Vec<usize> {
    let b = config.sim_box();
    config
        .points()
        .enumerate()
        .filter(|&(i, p)| Some(i) != exclude && b.distance_sq(center, p) <= r * r)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut ChaCha8Rng, b: SimBox, n: usize) -> Configuration {
        let h = b.half();
        let mut cfg = Configuration::empty(b);
        while cfg.len() < n {
            let p: Vec<f64> = (0..b.dim()).map(|_| rng.gen_range(-h..h)).collect();
            let _ = cfg.insert(&p);
        }
        cfg
    }

    #[test]
    fn distance_examples() {
        let free2 = SimBox::new(2, 10.0, BoundaryMode::Free).unwrap();
        let p = Point::new(vec![0.0, 0.0]).unwrap();
        let q = Point::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(distance(&free2, &p, &q).unwrap(), 5.0);
        assert_eq!(distance(&free2, &p, &p).unwrap(), 0.0);

        let per1 = SimBox::new(1, 10.0, BoundaryMode::Periodic).unwrap();
        let a = Point::new(vec![4.9]).unwrap();
        let b = Point::new(vec![-4.9]).unwrap();
        assert!((distance(&per1, &a, &b).unwrap() - 0.2).abs() < 1e-12);

        let bad = Point::new(vec![1.0]).unwrap();
        assert!(matches!(distance(&free2, &p, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn distance_metric_axioms_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for mode in [BoundaryMode::Free, BoundaryMode::Periodic] {
            let b = SimBox::new(2, 6.0, mode).unwrap();
            for _ in 0..2000 {
                let pts: Vec<Point> = (0..3)
                    .map(|_| Point::new(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).unwrap())
                    .collect();
                let dab = distance(&b, &pts[0], &pts[1]).unwrap();
                let dba = distance(&b, &pts[1], &pts[0]).unwrap();
                let dbc = distance(&b, &pts[1], &pts[2]).unwrap();
                let dac = distance(&b, &pts[0], &pts[2]).unwrap();
                assert_eq!(dab, dba);
                assert!(dac <= dab + dbc + 1e-12);
            }
        }
    }

    #[test]
    fn configuration_rejects_invalid_points() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Free).unwrap();
        assert!(Configuration::from_flat(b, vec![6.0]).is_err());
        assert!(Configuration::from_flat(b, vec![1.0, 1.0]).is_err());
        assert!(Configuration::from_flat(b, vec![f64::NAN]).is_err());
        let mut c = Configuration::from_flat(b, vec![1.0, 2.0]).unwrap();
        assert!(c.insert(&[1.0]).is_err());
        assert_eq!(c.len(), 2);
        c.remove(0).unwrap();
        assert_eq!(c.coords(), &[2.0]);
        assert!(SimBox::new(0, 1.0, BoundaryMode::Free).is_err());
        assert!(SimBox::new(1, -1.0, BoundaryMode::Free).is_err());
    }

    #[test]
    fn wrap_lands_in_half_open_box() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Periodic).unwrap();
        for x in [5.0, -5.0, 14.9, -15.1, 123.4] {
            let mut p = [x];
            b.wrap(&mut p);
            assert!(b.contains(&p), "{x} -> {}", p[0]);
        }
    }

    #[test]
    fn cell_list_small_cases() {
        let b = SimBox::new(2, 10.0, BoundaryMode::Free).unwrap();
        let empty = Configuration::empty(b);
        let cl = build_cell_list(&empty, 2.0).unwrap();
        assert!(cl.is_empty());
        let one = Configuration::from_flat(b, vec![0.5, 0.5]).unwrap();
        let cl = build_cell_list(&one, 2.0).unwrap();
        assert_eq!(cl.occupied_buckets(), 1);
        assert!(build_cell_list(&one, 11.0).is_err());

        let two = Configuration::from_flat(b, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let cl = build_cell_list(&two, 2.0).unwrap();
        assert_eq!(cl.neighbors(&two, two.point(0), 1.0, Some(0)).unwrap(), vec![1]);
        assert!(cl.neighbors(&two, two.point(0), 0.0, Some(0)).unwrap().is_empty());
        assert!(cl.neighbors(&two, two.point(0), 3.0, None).is_err());

        let moved = two.with_moved(1, &[2.0, 0.0]).unwrap();
        assert_eq!(cl.neighbors(&moved, moved.point(0), 1.0, None), Err(Error::StaleStructure));
    }

    #[test]
    fn cell_list_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (d, mode) in [
            (1, BoundaryMode::Free),
            (2, BoundaryMode::Free),
            (2, BoundaryMode::Periodic),
            (3, BoundaryMode::Periodic),
            (1, BoundaryMode::Periodic),
        ] {
            let b = SimBox::new(d, 10.0, mode).unwrap();
            for n in [0, 1, 50, 200] {
                let cfg = random_config(&mut rng, b, n);
                for cutoff in [0.7, 2.5, 4.0, 10.0] {
                    let cl = build_cell_list(&cfg, cutoff).unwrap();
                    for _ in 0..20 {
                        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
                        let r = rng.gen_range(0.0..cutoff);
                        assert_eq!(
                            cl.neighbors(&cfg, &c, r, None).unwrap(),
                            neighbors_brute_force(&cfg, &c, r, None)
                        );
                    }
                }
            }
        }
    }
}
