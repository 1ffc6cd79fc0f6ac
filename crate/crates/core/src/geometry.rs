//! Cylindrical domain, its multiply connected cross-section and the
//! structured staircase grid used by every other module.
//!
//! The cross-section is stored as closed polylines. The outer loop is kept
//! counterclockwise and every hole clockwise, so walking any loop keeps the
//! fluid on the left and the outward normal of the fluid region on the right.
//!
//! The grid is node based with the nodes placed at cell centres of a lattice
//! whose lines pass through the bounding box edges. Nodes inside the fluid are
//! *interior*, nodes outside the fluid but adjacent (8-neighbourhood) to an
//! interior node are *boundary* nodes and carry the index of the loop whose
//! exterior region they sit in. Each interior node stores its four links; a
//! link that leaves the fluid records the fraction `theta` of the grid spacing
//! at which it crosses the boundary curve.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use crate::error::{QgError, Result};

pub type Point = [f64; 2];

/// Default number of polyline vertices used to sample a circle.
pub const CIRCLE_SAMPLES: usize = 4096;

/// A simple closed polyline. The closing edge from the last vertex back to the
/// first is implicit.
#[derive(Clone, Debug)]
pub struct Loop {
    vertices: Vec<Point>,
}

impl Loop {
    pub fn new(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(QgError::Topology(
                "a loop needs at least three distinct vertices".into(),
            ));
        }
        Ok(Self { vertices })
    }

    pub fn circle(center: Point, radius: f64, samples: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(QgError::Topology(format!(
                "circle radius {radius} must be positive"
            )));
        }
        let vertices = (0..samples)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / samples as f64;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        Self::new(vertices)
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) {
            return Err(QgError::Topology(format!(
                "degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn segment(&self, k: usize) -> (Point, Point) {
        let n = self.vertices.len();
        (self.vertices[k], self.vertices[(k + 1) % n])
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        (0..self.len()).map(move |k| self.segment(k))
    }

    /// Shoelace area, positive for counterclockwise loops.
    pub fn signed_area(&self) -> f64 {
        0.5 * self
            .segments()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum::<f64>()
    }

    pub fn perimeter(&self) -> f64 {
        self.segments().map(|(a, b)| dist(a, b)).sum()
    }

    /// Outward normal of the fluid on segment `k`: the right-hand normal of
    /// the traversal direction.
    pub fn segment_normal(&self, k: usize) -> [f64; 2] {
        let (a, b) = self.segment(k);
        let len = dist(a, b);
        [(b[1] - a[1]) / len, -(b[0] - a[0]) / len]
    }

    /// Arclength coordinate and outward normal of a point on segment `k`.
    /// Normals are blended linearly towards the vertices when the turning
    /// angle there is small, so sampled smooth curves get a smooth normal
    /// while genuine corners keep the segment normal.
    pub fn locate(&self, k: usize, p: Point) -> (f64, [f64; 2]) {
        let n = self.len();
        let s0: f64 = (0..k)
            .map(|m| {
                let (a, b) = self.segment(m);
                dist(a, b)
            })
            .sum();
        let (a, b) = self.segment(k);
        let len = dist(a, b);
        let u = (dist(a, p) / len).clamp(0.0, 1.0);
        let nk = self.segment_normal(k);
        let blend = |other: [f64; 2]| {
            if nk[0] * other[0] + nk[1] * other[1] > SMOOTH_COS {
                let m = [0.5 * (nk[0] + other[0]), 0.5 * (nk[1] + other[1])];
                let l = m[0].hypot(m[1]);
                [m[0] / l, m[1] / l]
            } else {
                nk
            }
        };
        let na = blend(self.segment_normal((k + n - 1) % n));
        let nb = blend(self.segment_normal((k + 1) % n));
        let (wa, wb) = if u < 0.5 {
            (1.0 - 2.0 * u, 2.0 * u)
        } else {
            (0.0, 2.0 * u - 1.0)
        };
        let m = if u < 0.5 {
            [wa * na[0] + wb * nk[0], wa * na[1] + wb * nk[1]]
        } else {
            let wk = 1.0 - wb;
            [wk * nk[0] + wb * nb[0], wk * nk[1] + wb * nb[1]]
        };
        let l = m[0].hypot(m[1]);
        (s0 + u * len, [m[0] / l, m[1] / l])
    }

    fn reversed(&self) -> Self {
        let mut v = self.vertices.clone();
        v.reverse();
        Self { vertices: v }
    }

    /// Even-odd crossing test; points exactly on an edge may land either way.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.segments() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if x > p[0] {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn bbox(&self) -> [f64; 4] {
        let mut bb = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for v in &self.vertices {
            bb[0] = bb[0].min(v[0]);
            bb[1] = bb[1].min(v[1]);
            bb[2] = bb[2].max(v[0]);
            bb[3] = bb[3].max(v[1]);
        }
        bb
    }

    /// Largest turning angle between consecutive edges, in radians. Reported as
    /// a corner-sharpness diagnostic only.
    pub fn max_turning_angle(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|k| {
                let (a, b) = self.segment((k + n - 1) % n);
                let (_, c) = self.segment(k);
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - b[0], c[1] - b[1]];
                (u[0] * v[1] - u[1] * v[0])
                    .atan2(u[0] * v[0] + u[1] * v[1])
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    fn is_simple(&self) -> bool {
        let n = self.len();
        for i in 0..n {
            let (a, b) = self.segment(i);
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = self.segment(j);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    fn intersects(&self, other: &Loop) -> bool {
        let bb = other.bbox();
        for (a, b) in self.segments() {
            if a[0].max(b[0]) < bb[0]
                || a[0].min(b[0]) > bb[2]
                || a[1].max(b[1]) < bb[1]
                || a[1].min(b[1]) > bb[3]
            {
                continue;
            }
            if other
                .segments()
                .any(|(c, d)| segments_intersect(a, b, c, d))
            {
                return true;
            }
        }
        false
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Parameter `t` in [0, 1] along `a -> b` where it meets segment `c -> d`.
fn segment_hit(a: Point, b: Point, c: Point, d: Point) -> Option<f64> {
    let r = [b[0] - a[0], b[1] - a[1]];
    let s = [d[0] - c[0], d[1] - c[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-300 {
        return None;
    }
    let qp = [c[0] - a[0], c[1] - a[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

fn closest_on_segment(p: Point, a: Point, b: Point) -> Point {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return a;
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * ab[0], a[1] + t * ab[1]]
}

/// Horizontal cross-section: outer loop Γ₀ and holes Γ₁..Γ_L.
#[derive(Clone, Debug)]
pub struct CrossSection {
    loops: Vec<Loop>,
    bbox: [f64; 4],
}

impl CrossSection {
    /// Loop 0 is the outer boundary, loops 1.. are the holes.
    pub fn loops(&self) -> &[Loop] {
        &self.loops
    }

    pub fn outer(&self) -> &Loop {
        &self.loops[0]
    }

    pub fn holes(&self) -> &[Loop] {
        &self.loops[1..]
    }

    /// Number of holes, `L`.
    pub fn num_holes(&self) -> usize {
        self.loops.len() - 1
    }

    pub fn bbox(&self) -> [f64; 4] {
        self.bbox
    }

    pub fn area(&self) -> f64 {
        self.loops.iter().map(Loop::signed_area).sum()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.loops[0].contains(p) && !self.holes().iter().any(|h| h.contains(p))
    }

    /// Loop whose exterior region holds `p`: the hole containing it, else 0.
    pub fn region_loop(&self, p: Point) -> usize {
        self.holes()
            .iter()
            .position(|h| h.contains(p))
            .map_or(0, |k| k + 1)
    }

    /// Nearest point on any boundary loop, with that loop's index.
    pub fn nearest_boundary_point(&self, p: Point) -> (Point, usize) {
        let mut best = (p, 0, f64::INFINITY);
        for (l, lp) in self.loops.iter().enumerate() {
            for (a, b) in lp.segments() {
                let c = closest_on_segment(p, a, b);
                let d = dist(c, p);
                if d < best.2 {
                    best = (c, l, d);
                }
            }
        }
        (best.0, best.1)
    }

    pub fn diameter(&self) -> f64 {
        let bb = self.bbox;
        ((bb[2] - bb[0]).powi(2) + (bb[3] - bb[1]).powi(2)).sqrt()
    }
}

/// The cylinder Ω = M × (0, 1).
#[derive(Clone, Debug)]
pub struct Cylinder {
    pub cross_section: CrossSection,
}

impl Cylinder {
    pub const Z_RANGE: (f64, f64) = (0.0, 1.0);

    pub fn volume(&self) -> f64 {
        self.cross_section.area()
    }
}

/// Declarative description of a cross-section.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSpec {
    /// Concentric annulus about the origin.
    Annulus { inner: f64, outer: f64 },
    /// Axis-aligned rectangle `[x0, y0, x1, y1]` with rectangular holes.
    Rectangle {
        outer: [f64; 4],
        #[serde(default)]
        holes: Vec<[f64; 4]>,
    },
    /// Arbitrary polygons.
    Polygons {
        outer: Vec<Point>,
        #[serde(default)]
        holes: Vec<Vec<Point>>,
    },
}

impl DomainSpec {
    pub fn annulus(inner: f64, outer: f64) -> Self {
        DomainSpec::Annulus { inner, outer }
    }

    pub fn unit_square() -> Self {
        DomainSpec::Rectangle {
            outer: [0.0, 0.0, 1.0, 1.0],
            holes: vec![],
        }
    }

    pub fn square_with_hole() -> Self {
        DomainSpec::Rectangle {
            outer: [0.0, 0.0, 3.0, 3.0],
            holes: vec![[1.0, 1.0, 2.0, 2.0]],
        }
    }
}

pub fn build_domain(spec: &DomainSpec) -> Result<Cylinder> {
    let (outer, holes) = match spec {
        DomainSpec::Annulus { inner, outer } => {
            if !(inner < outer) {
                return Err(QgError::Topology(format!(
                    "annulus inner radius {inner} must be below outer radius {outer}"
                )));
            }
            let samples = |r: f64| ((CIRCLE_SAMPLES as f64 * (r / outer).sqrt()) as usize).max(64);
            (
                Loop::circle([0.0, 0.0], *outer, CIRCLE_SAMPLES)?,
                vec![Loop::circle([0.0, 0.0], *inner, samples(*inner))?],
            )
        }
        DomainSpec::Rectangle { outer, holes } => (
            Loop::rectangle(outer[0], outer[1], outer[2], outer[3])?,
            holes
                .iter()
                .map(|r| Loop::rectangle(r[0], r[1], r[2], r[3]))
                .collect::<Result<Vec<_>>>()?,
        ),
        DomainSpec::Polygons { outer, holes } => (
            Loop::new(outer.clone())?,
            holes
                .iter()
                .map(|h| Loop::new(h.clone()))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    cross_section(outer, holes).map(|cross_section| Cylinder { cross_section })
}

fn cross_section(outer: Loop, holes: Vec<Loop>) -> Result<CrossSection> {
    let orient = |l: Loop, ccw: bool| {
        if (l.signed_area() > 0.0) == ccw {
            l
        } else {
            l.reversed()
        }
    };
    let mut loops = vec![orient(outer, true)];
    loops.extend(holes.into_iter().map(|h| orient(h, false)));

    for (k, l) in loops.iter().enumerate() {
        if !l.is_simple() {
            return Err(QgError::Topology(format!("loop {k} self-intersects")));
        }
    }
    for i in 0..loops.len() {
        for j in (i + 1)..loops.len() {
            if loops[i].intersects(&loops[j]) {
                return Err(QgError::Topology(format!("loops {i} and {j} intersect")));
            }
        }
    }
    for (k, hole) in loops.iter().enumerate().skip(1) {
        if !hole.vertices().iter().all(|&v| loops[0].contains(v)) {
            return Err(QgError::Topology(format!(
                "hole {k} is not inside the outer loop"
            )));
        }
        for (m, other) in loops.iter().enumerate().skip(1) {
            if m != k && other.contains(hole.vertices()[0]) {
                return Err(QgError::Topology(format!("hole {k} lies inside hole {m}")));
            }
        }
    }
    let bbox = loops[0].bbox();
    Ok(CrossSection { loops, bbox })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTag {
    Interior,
    Boundary,
    Exterior,
}

/// One of the four horizontal links out of an interior node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Link {
    /// Neighbour is interior; holds its compact index.
    Interior(usize),
    /// The link crosses loop `loop_id` at `theta * h` from the node.
    Boundary { loop_id: usize, theta: f64 },
}

impl Link {
    /// Conductance of the link in units of 1/h.
    pub fn weight(&self) -> f64 {
        match *self {
            Link::Interior(_) => 1.0,
            Link::Boundary { theta, .. } => 1.0 / theta,
        }
    }

    pub fn distance(&self) -> f64 {
        match *self {
            Link::Interior(_) => 1.0,
            Link::Boundary { theta, .. } => theta,
        }
    }
}

/// Link directions in the order stored by [`Grid::links`].
pub const DIRS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// A boundary link seen from its loop.
#[derive(Clone, Copy, Debug)]
pub struct LoopLink {
    /// Compact index of the interior node.
    pub node: usize,
    /// Index into [`DIRS`].
    pub dir: usize,
    pub theta: f64,
    /// Crossing point on the loop.
    pub point: Point,
    /// Arclength coordinate of the crossing along the loop.
    pub s: f64,
    /// Outward unit normal of M at the crossing.
    pub normal: [f64; 2],
}

const MIN_THETA: f64 = 1e-6;

/// Vertices turning by less than about ten degrees count as smooth.
const SMOOTH_COS: f64 = 0.985;

/// Structured discretisation of a cylinder.
#[derive(Debug)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub h: f64,
    pub origin: Point,
    pub tags: Vec<NodeTag>,
    pub loop_id: Vec<Option<usize>>,
    interior: Vec<usize>,
    compact: Vec<usize>,
    links: Vec<[Link; 4]>,
    loop_links: Vec<Vec<LoopLink>>,
    clean_cell: Vec<bool>,
    buckets: Vec<Vec<(usize, usize)>>,
    halo: Vec<bool>,
    cylinder: Arc<Cylinder>,
}

impl Grid {
    pub fn cylinder(&self) -> &Cylinder {
        &self.cylinder
    }

    pub fn cross_section(&self) -> &CrossSection {
        &self.cylinder.cross_section
    }

    pub fn num_loops(&self) -> usize {
        self.loop_links.len()
    }

    /// Flat index of node (i, j) in a horizontal slice.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node_xy(&self, idx: usize) -> Point {
        let (i, j) = self.ij(idx);
        [
            self.origin[0] + i as f64 * self.h,
            self.origin[1] + j as f64 * self.h,
        ]
    }

    pub fn z(&self, k: usize) -> f64 {
        k as f64 / (self.nz - 1) as f64
    }

    pub fn dz(&self) -> f64 {
        1.0 / (self.nz - 1) as f64
    }

    /// Flat indices of the interior nodes, in compact order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    /// Compact index of an interior node, if `idx` is interior.
    #[inline]
    pub fn compact(&self, idx: usize) -> Option<usize> {
        let c = self.compact[idx];
        (c != usize::MAX).then_some(c)
    }

    /// Links of the interior node with compact index `c`.
    #[inline]
    pub fn links(&self, c: usize) -> &[Link; 4] {
        &self.links[c]
    }

    pub fn loop_links(&self, l: usize) -> &[LoopLink] {
        &self.loop_links[l]
    }

    pub fn boundary_nodes(&self, l: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.plane_len())
            .filter(move |&n| self.tags[n] == NodeTag::Boundary && self.loop_id[n] == Some(l))
    }

    /// Quadrature weight of each interior node.
    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Discrete area of M: interior nodes times h².
    pub fn discrete_area(&self) -> f64 {
        self.interior.len() as f64 * self.cell_area()
    }

    /// Neighbour of `idx` in direction `(di, dj)`, if inside the lattice.
    #[inline]
    pub fn neighbor(&self, idx: usize, di: isize, dj: isize) -> Option<usize> {
        let (i, j) = self.ij(idx);
        let ni = i as isize + di;
        let nj = j as isize + dj;
        (ni >= 0 && nj >= 0 && (ni as usize) < self.nx && (nj as usize) < self.ny)
            .then(|| self.idx(ni as usize, nj as usize))
    }

    /// Lattice cell `(i, j)` holding `p`, i.e. `p` lies between nodes
    /// `(i, j)` and `(i + 1, j + 1)`.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize, f64, f64)> {
        let fx = (p[0] - self.origin[0]) / self.h;
        let fy = (p[1] - self.origin[1]) / self.h;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let i = fx.floor() as usize;
        let j = fy.floor() as usize;
        if i + 1 >= self.nx || j + 1 >= self.ny {
            return None;
        }
        Some((i, j, fx - i as f64, fy - j as f64))
    }

    /// Non-interior node with an interior node among its eight neighbours.
    /// Fields carry extrapolated values there.
    pub fn in_halo(&self, n: usize) -> bool {
        self.halo[n]
    }

    /// Whether `p` lies in the fluid region M.
    pub fn contains(&self, p: Point) -> bool {
        let Some((i, j, _, _)) = self.cell_of(p) else {
            return false;
        };
        let cell = j * self.nx + i;
        if self.clean_cell[cell] {
            return true;
        }
        // parity of crossings between p and a corner node of known status;
        // a corner giving a degenerate crossing is swapped for the next one
        let cs = self.cross_section();
        'corners: for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let corner = self.idx(i + di, j + dj);
            let a = self.node_xy(corner);
            let mut inside = self.tags[corner] == NodeTag::Interior;
            if a == p {
                return inside;
            }
            for &(l, k) in &self.buckets[cell] {
                let (c, d) = cs.loops()[l].segment(k);
                let (d1, d2, d3, d4) = (
                    cross(c, d, a),
                    cross(c, d, p),
                    cross(a, p, c),
                    cross(a, p, d),
                );
                if d1 == 0.0 || d2 == 0.0 || d3 == 0.0 || d4 == 0.0 {
                    continue 'corners;
                }
                if (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) {
                    inside = !inside;
                }
            }
            return inside;
        }
        cs.contains(p)
    }

    /// Nearest point on `∂M` and its loop, searching nearby cells first.
    pub fn nearest_boundary_point(&self, p: Point) -> (Point, usize) {
        if let Some((i, j, _, _)) = self.cell_of(p) {
            let cs = self.cross_section();
            let mut best: Option<(Point, usize, f64)> = None;
            for jj in j.saturating_sub(2)..=(j + 2).min(self.ny - 1) {
                for ii in i.saturating_sub(2)..=(i + 2).min(self.nx - 1) {
                    for &(l, k) in &self.buckets[jj * self.nx + ii] {
                        let (a, b) = cs.loops()[l].segment(k);
                        let c = closest_on_segment(p, a, b);
                        let d = dist(c, p);
                        if best.is_none_or(|bb| d < bb.2) {
                            best = Some((c, l, d));
                        }
                    }
                }
            }
            if let Some((c, l, d)) = best {
                if d <= self.h {
                    return (c, l);
                }
            }
        }
        self.cross_section().nearest_boundary_point(p)
    }

    /// Write the node mask as CSV `x,y,tag,loop_id`.
    pub fn write_mask_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,tag,loop_id")?;
        for n in 0..self.plane_len() {
            let [x, y] = self.node_xy(n);
            let tag = match self.tags[n] {
                NodeTag::Interior => "interior",
                NodeTag::Boundary => "boundary",
                NodeTag::Exterior => "exterior",
            };
            let lid = self.loop_id[n].map_or(String::new(), |l| l.to_string());
            writeln!(w, "{x},{y},{tag},{lid}")?;
        }
        Ok(())
    }
}

/// Discretise `domain` on an `nx × ny` horizontal lattice with `nz` levels.
pub fn discretize(domain: &Cylinder, nx: usize, ny: usize, nz: usize) -> Result<Grid> {
    if nx < 8 || ny < 8 {
        return Err(QgError::Resolution(format!(
            "horizontal resolution {nx}x{ny} is below the minimum of 8"
        )));
    }
    if nz < 2 {
        return Err(QgError::Resolution(format!("nz = {nz} must be at least 2")));
    }
    let cs = &domain.cross_section;
    let bb = cs.bbox();
    let (w, hgt) = (bb[2] - bb[0], bb[3] - bb[1]);
    let h = (w / (nx - 2) as f64).max(hgt / (ny - 2) as f64);
    let origin = [
        0.5 * (bb[0] + bb[2]) - 0.5 * (nx - 1) as f64 * h,
        0.5 * (bb[1] + bb[3]) - 0.5 * (ny - 1) as f64 * h,
    ];
    let plane = nx * ny;
    let xy = |n: usize| {
        [
            origin[0] + (n % nx) as f64 * h,
            origin[1] + (n / nx) as f64 * h,
        ]
    };

    let inside: Vec<bool> = (0..plane).map(|n| cs.contains(xy(n))).collect();

    // Segment buckets per lattice cell.
    let ncells = nx * ny;
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ncells];
    for (l, lp) in cs.loops().iter().enumerate() {
        for (k, (a, b)) in lp.segments().enumerate() {
            let i0 = (((a[0].min(b[0]) - origin[0]) / h).floor() as isize - 1).max(0) as usize;
            let i1 = ((((a[0].max(b[0]) - origin[0]) / h).floor() as isize + 1).max(0) as usize)
                .min(nx - 1);
            let j0 = (((a[1].min(b[1]) - origin[1]) / h).floor() as isize - 1).max(0) as usize;
            let j1 = ((((a[1].max(b[1]) - origin[1]) / h).floor() as isize + 1).max(0) as usize)
                .min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push((l, k));
                }
            }
        }
    }
    let first_hit = |a: Point, b: Point, cell: usize| -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for &(l, k) in &buckets[cell] {
            let (c, d) = cs.loops()[l].segment(k);
            if let Some(t) = segment_hit(a, b, c, d) {
                if best.is_none_or(|(_, _, bt)| t < bt) {
                    best = Some((l, k, t));
                }
            }
        }
        best
    };

    let mut compact = vec![usize::MAX; plane];
    let mut interior = Vec::new();
    for n in 0..plane {
        if inside[n] {
            let (i, j) = (n % nx, n / nx);
            if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                return Err(QgError::Resolution("fluid node on the lattice edge".into()));
            }
            compact[n] = interior.len();
            interior.push(n);
        }
    }
    if interior.is_empty() {
        return Err(QgError::Resolution("no interior nodes".into()));
    }

    let mut tags = vec![NodeTag::Exterior; plane];
    let mut loop_id = vec![None; plane];
    for &n in &interior {
        tags[n] = NodeTag::Interior;
    }
    for &n in &interior {
        let (i, j) = (n % nx, n / nx);
        for dj in -1isize..=1 {
            for di in -1isize..=1 {
                let m = (j as isize + dj) as usize * nx + (i as isize + di) as usize;
                if !inside[m] && tags[m] == NodeTag::Exterior {
                    tags[m] = NodeTag::Boundary;
                    loop_id[m] = Some(cs.region_loop(xy(m)));
                }
            }
        }
    }

    let nloops = cs.loops().len();
    let mut links = Vec::with_capacity(interior.len());
    let mut loop_links = vec![Vec::new(); nloops];
    for (c, &n) in interior.iter().enumerate() {
        let (i, j) = (n % nx, n / nx);
        let mut row = [Link::Interior(0); 4];
        for (d, &(di, dj)) in DIRS.iter().enumerate() {
            let m = (j as isize + dj) as usize * nx + (i as isize + di) as usize;
            // cells adjacent to the edge n-m
            let cells = if dj == 0 {
                let ci = i.min(m % nx);
                [j * nx + ci, j.saturating_sub(1) * nx + ci]
            } else {
                let cj = j.min(m / nx);
                [cj * nx + i, cj * nx + i.saturating_sub(1)]
            };
            let (a, b) = (xy(n), xy(m));
            let hit = cells
                .iter()
                .filter_map(|&cell| first_hit(a, b, cell))
                .min_by(|x, y| x.2.total_cmp(&y.2));
            if inside[m] {
                // Tangential grazes at round-off depth are not crossings.
                let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for &cell in &cells {
                    for &(l, k) in &buckets[cell] {
                        let (c, d) = cs.loops()[l].segment(k);
                        if segments_intersect(a, b, c, d) {
                            let t = segment_hit(a, b, c, d).unwrap_or(0.0);
                            tmin = tmin.min(t);
                            tmax = tmax.max(t);
                        }
                    }
                }
                if tmax - tmin > 1e-6 {
                    return Err(QgError::Resolution(format!(
                        "link between interior nodes at {:?} and {:?} crosses a boundary loop",
                        a, b
                    )));
                }
                row[d] = Link::Interior(compact[m]);
            } else {
                let (l, seg, t) = hit.ok_or_else(|| {
                    QgError::Resolution(format!("no boundary crossing found near {a:?}"))
                })?;
                if loop_id[m] != Some(l) {
                    return Err(QgError::Resolution(format!(
                        "boundary node at {:?} is reached across loop {l} but lies beyond loop {:?}",
                        b, loop_id[m]
                    )));
                }
                let theta = t.max(MIN_THETA);
                row[d] = Link::Boundary { loop_id: l, theta };
                let point = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let lp = &cs.loops()[l];
                let (s, normal) = lp.locate(seg, point);
                loop_links[l].push(LoopLink {
                    node: c,
                    dir: d,
                    theta,
                    point,
                    s,
                    normal,
                });
            }
        }
        links.push(row);
    }
    for (l, ll) in loop_links.iter().enumerate() {
        if ll.is_empty() {
            return Err(QgError::Resolution(format!(
                "loop {l} is not resolved: no interior node is adjacent to it at h = {h:.4}"
            )));
        }
    }
    // Any lattice line crossing a hole must be caught above; a hole containing
    // no node at all would have produced no loop links.

    let mut clean_cell = vec![false; ncells];
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let cell = j * nx + i;
            let corners = [cell, cell + 1, cell + nx, cell + nx + 1];
            clean_cell[cell] = buckets[cell].is_empty() && corners.iter().all(|&m| inside[m]);
        }
    }

    let halo = (0..nx * ny)
        .map(|n| {
            let (i, j) = (n % nx, n / nx);
            tags[n] != NodeTag::Interior
                && (-1isize..=1).any(|dj| {
                    (-1isize..=1).any(|di| {
                        let (a, b) = (i as isize + di, j as isize + dj);
                        a >= 0
                            && b >= 0
                            && (a as usize) < nx
                            && (b as usize) < ny
                            && tags[b as usize * nx + a as usize] == NodeTag::Interior
                    })
                })
        })
        .collect();
    Ok(Grid {
        nx,
        ny,
        nz,
        h,
        origin,
        tags,
        loop_id,
        interior,
        compact,
        links,
        loop_links,
        clean_cell,
        buckets,
        halo,
        cylinder: Arc::new(domain.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annulus_has_one_hole_and_orientations() {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        let cs = &cyl.cross_section;
        assert_eq!(cs.num_holes(), 1);
        assert!(cs.outer().signed_area() > 0.0);
        assert!(cs.holes()[0].signed_area() < 0.0);
        assert!((cs.area() - 3.0 * PI).abs() < 1e-5);
    }

    #[test]
    fn unit_square_is_simply_connected() {
        let cyl = build_domain(&DomainSpec::unit_square()).unwrap();
        assert_eq!(cyl.cross_section.num_holes(), 0);
        assert_eq!(cyl.cross_section.loops().len(), 1);
    }

    #[test]
    fn square_with_hole_area() {
        let cyl = build_domain(&DomainSpec::square_with_hole()).unwrap();
        assert_eq!(cyl.cross_section.num_holes(), 1);
        assert!((cyl.volume() - 8.0).abs() < 1e-14);
    }

    #[test]
    fn intersecting_loops_rejected() {
        let spec = DomainSpec::Rectangle {
            outer: [0.0, 0.0, 3.0, 3.0],
            holes: vec![[2.0, 1.0, 4.0, 2.0]],
        };
        assert!(matches!(build_domain(&spec), Err(QgError::Topology(_))));
        let spec = DomainSpec::Rectangle {
            outer: [0.0, 0.0, 3.0, 3.0],
            holes: vec![[0.5, 0.5, 1.5, 1.5], [1.0, 1.0, 2.0, 2.0]],
        };
        assert!(matches!(build_domain(&spec), Err(QgError::Topology(_))));
    }

    #[test]
    fn hole_outside_rejected() {
        let spec = DomainSpec::Rectangle {
            outer: [0.0, 0.0, 3.0, 3.0],
            holes: vec![[4.0, 4.0, 5.0, 5.0]],
        };
        assert!(matches!(build_domain(&spec), Err(QgError::Topology(_))));
    }

    #[test]
    fn self_intersecting_polygon_rejected() {
        let spec = DomainSpec::Polygons {
            outer: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
            holes: vec![],
        };
        assert!(matches!(build_domain(&spec), Err(QgError::Topology(_))));
    }

    #[test]
    fn annulus_mask_matches_radius() {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        let g = discretize(&cyl, 64, 64, 3).unwrap();
        for n in 0..g.plane_len() {
            let [x, y] = g.node_xy(n);
            let r = x.hypot(y);
            if r > 1.0 + 1e-4 && r < 2.0 - 1e-4 {
                assert_eq!(g.tags[n], NodeTag::Interior, "r = {r}");
            }
            if g.tags[n] == NodeTag::Interior {
                assert!(r > 1.0 - 1e-4 && r < 2.0 + 1e-4);
            }
        }
    }

    #[test]
    fn hole_boundary_nodes_tagged_with_loop_one() {
        let cyl = build_domain(&DomainSpec::square_with_hole()).unwrap();
        let g = discretize(&cyl, 16, 16, 2).unwrap();
        let mut seen = 0;
        for n in 0..g.plane_len() {
            let [x, y] = g.node_xy(n);
            if g.tags[n] == NodeTag::Boundary
                && (1.0..=2.0).contains(&x)
                && (1.0..=2.0).contains(&y)
            {
                assert_eq!(g.loop_id[n], Some(1));
                seen += 1;
            }
        }
        assert!(seen > 0);
        assert!(g.boundary_nodes(1).count() == seen);
    }

    #[test]
    fn tiny_hole_is_a_resolution_error() {
        let cyl = build_domain(&DomainSpec::annulus(0.05, 2.0)).unwrap();
        assert!(matches!(
            discretize(&cyl, 8, 8, 2),
            Err(QgError::Resolution(_))
        ));
    }

    #[test]
    fn every_interior_node_has_valid_neighbours() {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        let g = discretize(&cyl, 24, 24, 2).unwrap();
        for &n in g.interior() {
            for &(di, dj) in &DIRS {
                let m = g.neighbor(n, di, dj).unwrap();
                assert_ne!(g.tags[m], NodeTag::Exterior);
            }
        }
    }

    #[test]
    fn aligned_grid_has_half_cell_links_and_exact_area() {
        let cyl = build_domain(&DomainSpec::square_with_hole()).unwrap();
        let g = discretize(&cyl, 20, 20, 2).unwrap();
        assert!((g.discrete_area() - 8.0).abs() < 1e-12);
        for l in 0..2 {
            for ll in g.loop_links(l) {
                assert!((ll.theta - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_area_converges() {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        let exact = cyl.volume();
        let mut prev = f64::INFINITY;
        for n in [16, 32, 64] {
            let g = discretize(&cyl, n, n, 2).unwrap();
            let err = (g.discrete_area() - exact).abs();
            assert!(err <= 4.0 * g.h, "n = {n}: {err}");
            prev = prev.min(err);
        }
        assert!(prev < 0.1);
    }

    #[test]
    fn contains_agrees_with_exact_test() {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        let g = discretize(&cyl, 32, 32, 2).unwrap();
        for k in 0..2000 {
            let x = -2.1 + 4.2 * ((k * 37 % 2000) as f64 / 2000.0);
            let y = -2.1 + 4.2 * ((k * 91 % 2000) as f64 / 2000.0);
            assert_eq!(g.contains([x, y]), cyl.cross_section.contains([x, y]));
        }
    }

    #[test]
    fn grid_queries_agree_with_polygons() {
        use rand::{Rng, SeedableRng};
        for spec in [
            DomainSpec::annulus(1.0, 2.0),
            DomainSpec::square_with_hole(),
        ] {
            let cyl = build_domain(&spec).unwrap();
            let g = discretize(&cyl, 30, 30, 2).unwrap();
            let cs = g.cross_section();
            let bb = cs.bbox();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
            for _ in 0..20000 {
                let p = [rng.gen_range(bb[0]..bb[2]), rng.gen_range(bb[1]..bb[3])];
                assert_eq!(g.contains(p), cs.contains(p), "{p:?}");
                let (a, la) = g.nearest_boundary_point(p);
                let (b, lb) = cs.nearest_boundary_point(p);
                assert!(dist(a, p) <= dist(b, p) + 1e-15);
                assert!(dist(a, p) < dist(b, p) + 1e-12 && (la == lb || dist(a, b) < 1e-12));
            }
        }
    }
}
