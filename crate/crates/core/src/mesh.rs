//! Subdomain partition, element quadrature, interface collocation and
//! criterion-driven h-refinement.
//!
//! Points are stored as `[f64; 2]`; in one dimension the second coordinate
//! is unused and boxes carry a zero-height `y` range.

use std::collections::HashSet;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};

const GEOM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoundingBox {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn interval(a: f64, b: f64) -> Self {
        Self::new([a, 0.0], [b, 0.0])
    }

    pub fn extent(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    pub fn measure(&self, dim: usize) -> f64 {
        (0..dim).map(|k| self.extent(k)).product()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn contains(&self, x: &[f64], dim: usize) -> bool {
        (0..dim).all(|k| x[k] >= self.min[k] - GEOM_TOL && x[k] <= self.max[k] + GEOM_TOL)
    }

    pub fn contains_box(&self, other: &BoundingBox, dim: usize) -> bool {
        (0..dim).all(|k| {
            other.min[k] >= self.min[k] - GEOM_TOL && other.max[k] <= self.max[k] + GEOM_TOL
        })
    }

    /// Measure of the open intersection.
    fn overlap(&self, other: &BoundingBox, dim: usize) -> f64 {
        (0..dim)
            .map(|k| (self.max[k].min(other.max[k]) - self.min[k].max(other.min[k])).max(0.0))
            .product()
    }

    /// Equal-size children, `2^dim` of them.
    pub fn split(&self, dim: usize) -> Vec<BoundingBox> {
        let c = self.center();
        if dim == 1 {
            return vec![
                BoundingBox::interval(self.min[0], c[0]),
                BoundingBox::interval(c[0], self.max[0]),
            ];
        }
        let mut out = Vec::with_capacity(4);
        for j in 0..2 {
            for i in 0..2 {
                let (x0, x1) = if i == 0 { (self.min[0], c[0]) } else { (c[0], self.max[0]) };
                let (y0, y1) = if j == 0 { (self.min[1], c[1]) } else { (c[1], self.max[1]) };
                out.push(BoundingBox::new([x0, y0], [x1, y1]));
            }
        }
        out
    }

    /// Shared boundary piece of two boxes with disjoint interiors, if it has
    /// positive length (2D) or is a point (1D).
    pub fn shared_face(&self, other: &BoundingBox, dim: usize) -> Option<([f64; 2], [f64; 2])> {
        if dim == 1 {
            if (self.max[0] - other.min[0]).abs() < GEOM_TOL {
                return Some(([self.max[0], 0.0], [self.max[0], 0.0]));
            }
            if (other.max[0] - self.min[0]).abs() < GEOM_TOL {
                return Some(([self.min[0], 0.0], [self.min[0], 0.0]));
            }
            return None;
        }
        for k in 0..2 {
            let t = 1 - k;
            let touching = if (self.max[k] - other.min[k]).abs() < GEOM_TOL {
                Some(self.max[k])
            } else if (other.max[k] - self.min[k]).abs() < GEOM_TOL {
                Some(self.min[k])
            } else {
                None
            };
            if let Some(c) = touching {
                let lo = self.min[t].max(other.min[t]);
                let hi = self.max[t].min(other.max[t]);
                if hi - lo > GEOM_TOL {
                    let mut a = [0.0; 2];
                    let mut b = [0.0; 2];
                    a[k] = c;
                    b[k] = c;
                    a[t] = lo;
                    b[t] = hi;
                    return Some((a, b));
                }
            }
        }
        None
    }
}

/// Circular exclusion inside the domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hole {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Hole {
    pub fn contains(&self, x: &[f64]) -> bool {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        dx * dx + dy * dy < self.radius * self.radius
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }

    /// Exact area of the intersection of the disc with a box.
    pub fn area_in_box(&self, b: &BoundingBox) -> f64 {
        let r = self.radius;
        let f = |x: f64, y: f64| corner_area(x - self.center[0], y - self.center[1], r);
        (f(b.max[0], b.max[1]) - f(b.min[0], b.max[1]) - f(b.max[0], b.min[1])
            + f(b.min[0], b.min[1]))
        .max(0.0)
    }

    fn covers_box(&self, b: &BoundingBox) -> bool {
        [
            [b.min[0], b.min[1]],
            [b.max[0], b.min[1]],
            [b.min[0], b.max[1]],
            [b.max[0], b.max[1]],
        ]
        .iter()
        .all(|c| self.contains(c))
    }
}

/// Area of `{X <= x, Y <= y} ∩ disc(0, r)`.
fn corner_area(x: f64, y: f64, r: f64) -> f64 {
    let xc = x.clamp(-r, r);
    // antiderivative of sqrt(r^2 - X^2)
    let s_int = |t: f64| {
        let t = t.clamp(-r, r);
        0.5 * (t * (r * r - t * t).max(0.0).sqrt() + r * r * (t / r).asin())
    };
    let lower = s_int(xc) - s_int(-r);
    // integral of clamp(y, -s(X), s(X)) over [-r, xc]
    let upper = if y.abs() >= r {
        y.signum() * lower
    } else {
        let q = (r * r - y * y).sqrt();
        let sign = if y >= 0.0 { 1.0 } else { -1.0 };
        // |X| >= q: clamp = sign * s; |X| < q: clamp = y
        let a = xc.min(-q);
        let mut v = sign * (s_int(a) - s_int(-r));
        if xc > -q {
            let b = xc.min(q);
            v += y * (b - (-q));
            if xc > q {
                v += sign * (s_int(xc) - s_int(q));
            }
        }
        v
    };
    lower + upper
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraturePoint {
    pub x: [f64; 2],
    pub w: f64,
    /// Strain-history value, kN/mm^2.
    pub history: f64,
    pub inside_domain: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub id: usize,
    pub bbox: BoundingBox,
    pub level: u32,
    pub parent: Option<usize>,
    pub n_gauss: usize,
    pub points: Vec<QuadraturePoint>,
    pub active: bool,
}

impl Element {
    pub fn weight_sum(&self) -> f64 {
        self.points.iter().map(|p| p.w).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subdomain {
    pub id: usize,
    pub bbox: BoundingBox,
    pub elements: Vec<Element>,
    /// Indices into [`Mesh::interfaces`].
    pub interfaces: Vec<usize>,
    pub network: usize,
}

impl Subdomain {
    pub fn point_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| e.active)
            .map(|e| e.points.len())
            .sum()
    }

    pub fn quadrature_points(&self) -> impl Iterator<Item = &QuadraturePoint> {
        self.elements
            .iter()
            .filter(|e| e.active)
            .flat_map(|e| e.points.iter())
            .filter(|p| p.inside_domain)
    }
}

/// Shared boundary piece between two subdomains with its collocation points.
#[derive(Clone, Debug, PartialEq)]
pub struct Interface {
    pub a: usize,
    pub b: usize,
    pub segment: ([f64; 2], [f64; 2]),
    pub points: Vec<[f64; 2]>,
}

/// Straight segment whose interface points are left uncoupled (a slit).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slit {
    pub start: [f64; 2],
    pub end: [f64; 2],
}

impl Slit {
    fn contains(&self, x: &[f64; 2]) -> bool {
        distance_to_segment(x, &self.start, &self.end) < 1e-9
    }
}

pub fn distance_to_segment(x: &[f64], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let p = [a[0] + t * d[0], a[1] + t * d[1]];
    ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt()
}

/// Per-subdomain discretization request.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub dim: usize,
    pub boxes: Vec<BoundingBox>,
    /// Elements per axis in each subdomain.
    pub elements: Vec<usize>,
    /// Gauss points per axis per element.
    pub gauss: Vec<usize>,
    /// Interface collocation points per subdomain, split over its interfaces.
    pub interface_points: Vec<usize>,
    pub hole: Option<Hole>,
    pub slit: Option<Slit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub subdomains: Vec<Subdomain>,
    pub interfaces: Vec<Interface>,
    pub hole: Option<Hole>,
    next_id: usize,
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor-product Gauss points of a box. Points inside `hole` are masked
/// (zero weight, `inside_domain = false`); in boxes cut by the hole the
/// remaining weights are rescaled to the exact uncovered area.
pub fn gauss_points(
    bbox: &BoundingBox,
    n_per_axis: usize,
    dim: usize,
    hole: Option<&Hole>,
) -> Vec<QuadraturePoint> {
    let (nodes, weights) = gauss_legendre(n_per_axis);
    let map = |k: usize, t: f64| bbox.min[k] + 0.5 * (t + 1.0) * bbox.extent(k);
    let mut pts = Vec::with_capacity(n_per_axis.pow(dim as u32));
    if dim == 1 {
        let jac = 0.5 * bbox.extent(0);
        for (t, w) in nodes.iter().zip(&weights) {
            pts.push(QuadraturePoint {
                x: [map(0, *t), 0.0],
                w: w * jac,
                history: 0.0,
                inside_domain: true,
            });
        }
        return pts;
    }
    let jac = 0.25 * bbox.extent(0) * bbox.extent(1);
    for (ty, wy) in nodes.iter().zip(&weights) {
        for (tx, wx) in nodes.iter().zip(&weights) {
            pts.push(QuadraturePoint {
                x: [map(0, *tx), map(1, *ty)],
                w: wx * wy * jac,
                history: 0.0,
                inside_domain: true,
            });
        }
    }
    if let Some(h) = hole {
        let cut = h.area_in_box(bbox);
        if cut > 0.0 {
            for p in &mut pts {
                if h.contains(&p.x) {
                    p.inside_domain = false;
                    p.w = 0.0;
                }
            }
            let raw: f64 = pts.iter().map(|p| p.w).sum();
            let target = (bbox.measure(2) - cut).max(0.0);
            if raw > 0.0 {
                let s = target / raw;
                pts.iter_mut().for_each(|p| p.w *= s);
            }
        }
    }
    pts
}

/// Gauss points of an element; a cut box whose Gauss points all fall in the
/// hole gets one extra point carrying its sliver of material.
fn element_points(
    bbox: &BoundingBox,
    n_gauss: usize,
    dim: usize,
    hole: Option<&Hole>,
    active: bool,
) -> Vec<QuadraturePoint> {
    let mut points = gauss_points(bbox, n_gauss, dim, hole);
    if let Some(h) = hole.filter(|_| active && dim == 2) {
        let area = bbox.measure(2) - h.area_in_box(bbox);
        if area > 0.0 && points.iter().all(|p| !p.inside_domain) {
            let corners = [
                [bbox.min[0], bbox.min[1]],
                [bbox.max[0], bbox.min[1]],
                [bbox.min[0], bbox.max[1]],
                [bbox.max[0], bbox.max[1]],
            ];
            let dist = |c: &[f64; 2]| (c[0] - h.center[0]).hypot(c[1] - h.center[1]);
            let far = corners
                .iter()
                .max_by(|a, b| dist(a).total_cmp(&dist(b)))
                .copied()
                .unwrap();
            let t = 0.5 * (1.0 + h.radius / dist(&far));
            points.push(QuadraturePoint {
                x: [
                    h.center[0] + t * (far[0] - h.center[0]),
                    h.center[1] + t * (far[1] - h.center[1]),
                ],
                w: area,
                history: 0.0,
                inside_domain: true,
            });
        }
    }
    points
}

impl Mesh {
    /// Builds subdomains, elements and interfaces. The boxes must tile their
    /// common bounding box without overlap.
    pub fn partition(spec: &PartitionSpec) -> Result<Mesh> {
        let dim = spec.dim;
        let n = spec.boxes.len();
        if n == 0 {
            return Err(Error::Geometry("no subdomains given".into()));
        }
        for (name, len) in [
            ("elements", spec.elements.len()),
            ("gauss", spec.gauss.len()),
            ("interface_points", spec.interface_points.len()),
        ] {
            if len != n {
                return Err(Error::Configuration(format!(
                    "`{name}` has {len} entries for {n} subdomains"
                )));
            }
        }
        if spec.elements.iter().chain(&spec.gauss).any(|&v| v == 0) {
            return Err(Error::Configuration(
                "element and Gauss point counts must be positive".into(),
            ));
        }
        for b in &spec.boxes {
            if (0..dim).any(|k| b.extent(k) <= 0.0) {
                return Err(Error::Geometry(format!("degenerate subdomain box {b:?}")));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if spec.boxes[i].overlap(&spec.boxes[j], dim) > GEOM_TOL {
                    return Err(Error::Geometry(format!("subdomains {i} and {j} overlap")));
                }
            }
        }
        let hull = hull(&spec.boxes);
        let covered: f64 = spec.boxes.iter().map(|b| b.measure(dim)).sum();
        if (covered - hull.measure(dim)).abs() > 1e-9 * hull.measure(dim) {
            return Err(Error::Geometry(
                "subdomain boxes leave gaps in the domain".into(),
            ));
        }

        let mut mesh = Mesh {
            dim,
            subdomains: Vec::with_capacity(n),
            interfaces: Vec::new(),
            hole: spec.hole,
            next_id: 0,
        };
        for (s, b) in spec.boxes.iter().enumerate() {
            let ne = spec.elements[s];
            let mut elements = Vec::new();
            let hx = b.extent(0) / ne as f64;
            let ny = if dim == 2 { ne } else { 1 };
            let hy = if dim == 2 { b.extent(1) / ne as f64 } else { 0.0 };
            for j in 0..ny {
                for i in 0..ne {
                    let eb = BoundingBox::new(
                        [b.min[0] + i as f64 * hx, b.min[1] + j as f64 * hy],
                        [b.min[0] + (i + 1) as f64 * hx, b.min[1] + (j + 1) as f64 * hy],
                    );
                    let el = mesh.make_element(eb, 0, None, spec.gauss[s]);
                    elements.push(el);
                }
            }
            mesh.subdomains.push(Subdomain {
                id: s,
                bbox: *b,
                elements,
                interfaces: Vec::new(),
                network: s,
            });
        }

        let mut faces = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if let Some(seg) = spec.boxes[i].shared_face(&spec.boxes[j], dim) {
                    faces.push((i, j, seg));
                }
            }
        }
        let mut count = vec![0usize; n];
        for &(i, j, _) in &faces {
            count[i] += 1;
            count[j] += 1;
        }
        for (i, j, seg) in faces {
            let pts = if dim == 1 {
                vec![seg.0]
            } else {
                let ni = spec.interface_points[i] / count[i];
                let nj = spec.interface_points[j] / count[j];
                let m = ni.min(nj).max(1);
                (0..m)
                    .map(|k| {
                        let t = (k as f64 + 0.5) / m as f64;
                        [
                            seg.0[0] + t * (seg.1[0] - seg.0[0]),
                            seg.0[1] + t * (seg.1[1] - seg.0[1]),
                        ]
                    })
                    .filter(|p| !spec.slit.is_some_and(|s| s.contains(p)))
                    .collect()
            };
            if pts.is_empty() {
                continue;
            }
            let id = mesh.interfaces.len();
            mesh.subdomains[i].interfaces.push(id);
            mesh.subdomains[j].interfaces.push(id);
            mesh.interfaces.push(Interface {
                a: i,
                b: j,
                segment: seg,
                points: pts,
            });
        }
        Ok(mesh)
    }

    fn make_element(
        &mut self,
        bbox: BoundingBox,
        level: u32,
        parent: Option<usize>,
        n_gauss: usize,
    ) -> Element {
        let id = self.next_id;
        self.next_id += 1;
        let hole = self.hole;
        let active = !hole.is_some_and(|h| self.dim == 2 && h.covers_box(&bbox));
        let points = element_points(&bbox, n_gauss, self.dim, hole.as_ref(), active);
        Element {
            id,
            bbox,
            level,
            parent,
            n_gauss,
            points,
            active,
        }
    }

    pub fn domain(&self) -> BoundingBox {
        hull(&self.subdomains.iter().map(|s| s.bbox).collect::<Vec<_>>())
    }

    pub fn point_counts(&self) -> Vec<usize> {
        self.subdomains.iter().map(|s| s.point_count()).collect()
    }

    pub fn total_points(&self) -> usize {
        self.point_counts().iter().sum()
    }

    pub fn element_count(&self) -> usize {
        self.subdomains
            .iter()
            .map(|s| s.elements.iter().filter(|e| e.active).count())
            .sum()
    }

    /// Sum of all quadrature weights of active elements.
    pub fn weight_total(&self) -> f64 {
        self.subdomains
            .iter()
            .flat_map(|s| s.elements.iter().filter(|e| e.active))
            .map(|e| e.weight_sum())
            .sum()
    }

    /// Index of the subdomain owning `x`: boxes are half-open on their upper
    /// sides except at the domain's upper boundary.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let dom = self.domain();
        self.subdomains
            .iter()
            .position(|s| {
                (0..self.dim).all(|k| {
                    let lo = x[k] >= s.bbox.min[k] - GEOM_TOL;
                    let hi = if (s.bbox.max[k] - dom.max[k]).abs() < GEOM_TOL {
                        x[k] <= s.bbox.max[k] + GEOM_TOL
                    } else {
                        x[k] < s.bbox.max[k] - GEOM_TOL
                    };
                    lo && hi
                })
            })
    }

    /// Changes the per-axis Gauss order of every element in `subdomain`.
    /// Histories of the new points are taken from `history`.
    pub fn set_gauss_order(
        &mut self,
        subdomain: usize,
        n_gauss: usize,
        history: &dyn Fn(usize, &[f64]) -> f64,
    ) {
        let (dim, hole) = (self.dim, self.hole);
        for el in &mut self.subdomains[subdomain].elements {
            if el.n_gauss == n_gauss {
                continue;
            }
            el.n_gauss = n_gauss;
            el.points = element_points(&el.bbox, n_gauss, dim, hole.as_ref(), el.active);
            for p in &mut el.points {
                p.history = history(subdomain, &p.x);
            }
        }
    }

    /// History of the nearest in-domain point of the active element of
    /// `subdomain` that covers `x`.
    pub fn covering_history(&self, subdomain: usize, x: &[f64]) -> Option<f64> {
        let dim = self.dim;
        let el = self.subdomains[subdomain].elements.iter().find(|e| {
            e.active && (0..dim).all(|k| x[k] >= e.bbox.min[k] - GEOM_TOL && x[k] <= e.bbox.max[k] + GEOM_TOL)
        })?;
        let dist = |p: &QuadraturePoint| (0..dim).map(|k| (p.x[k] - x[k]).powi(2)).sum::<f64>();
        el.points
            .iter()
            .filter(|p| p.inside_domain)
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            .map(|p| p.history)
    }

    /// Active elements as `(subdomain, element index)` in storage order.
    pub fn active_elements(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, sub) in self.subdomains.iter().enumerate() {
            for (e, el) in sub.elements.iter().enumerate() {
                if el.active {
                    out.push((s, e));
                }
            }
        }
        out
    }

    pub fn element(&self, at: (usize, usize)) -> &Element {
        &self.subdomains[at.0].elements[at.1]
    }

    /// Face-neighbour lists over all active elements (across subdomains).
    pub fn face_neighbours(&self, active: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let boxes: Vec<BoundingBox> = active.iter().map(|&a| self.element(a).bbox).collect();
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| boxes[a].min[0].total_cmp(&boxes[b].min[0]));
        let mut out = vec![Vec::new(); boxes.len()];
        // sweep on x so only boxes with overlapping x ranges are compared
        for (oi, &i) in order.iter().enumerate() {
            for &j in &order[oi + 1..] {
                if boxes[j].min[0] > boxes[i].max[0] + GEOM_TOL {
                    break;
                }
                if boxes[i].shared_face(&boxes[j], self.dim).is_some() {
                    out[i].push(j);
                    out[j].push(i);
                }
            }
        }
        for n in &mut out {
            n.sort_unstable();
        }
        out
    }

    /// Rows of the mesh snapshot CSV.
    pub fn snapshot(&self) -> Vec<MeshRow> {
        let mut rows = Vec::new();
        for s in &self.subdomains {
            for e in s.elements.iter().filter(|e| e.active) {
                rows.push(MeshRow {
                    element_id: e.id,
                    subdomain_id: s.id,
                    level: e.level,
                    bbox: e.bbox,
                    n_points: e.points.len(),
                });
            }
        }
        rows
    }
}

fn hull(boxes: &[BoundingBox]) -> BoundingBox {
    let mut h = boxes[0];
    for b in &boxes[1..] {
        for k in 0..2 {
            h.min[k] = h.min[k].min(b.min[k]);
            h.max[k] = h.max[k].max(b.max[k]);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshRow {
    pub element_id: usize,
    pub subdomain_id: usize,
    pub level: u32,
    pub bbox: BoundingBox,
    pub n_points: usize,
}

/// Symmetric 2x2 tensor (upper-left 1x1 block used in 1D).
pub type Tensor2 = [[f64; 2]; 2];

/// Zienkiewicz–Zhu style indicator: for every active element, a linear
/// least-squares fit of each stress component over the quadrature points of
/// the element and its face neighbours is compared with the raw stress at
/// the element's own points, `sum_q w_q |s*(x_q) - s(x_q)|^2`.
///
/// Elements without neighbours get 0. Returned in [`Mesh::active_elements`] order.
pub fn recovery_error_indicator(
    mesh: &Mesh,
    stress: &dyn Fn(usize, &[f64]) -> Tensor2,
) -> Vec<f64> {
    let active = mesh.active_elements();
    let neighbours = mesh.face_neighbours(&active);
    let dim = mesh.dim;
    // raw stresses at every in-domain point, per active element
    let sampled: Vec<Vec<([f64; 2], f64, [f64; 3])>> = active
        .iter()
        .map(|&(s, e)| {
            mesh.subdomains[s].elements[e]
                .points
                .iter()
                .filter(|p| p.inside_domain)
                .map(|p| {
                    let t = stress(s, &p.x);
                    (p.x, p.w, [t[0][0], t[0][1], t[1][1]])
                })
                .collect()
        })
        .collect();
    let n_comp = if dim == 1 { 1 } else { 3 };

    let mut eta = vec![0.0; active.len()];
    for (i, nb) in neighbours.iter().enumerate() {
        if nb.is_empty() || sampled[i].is_empty() {
            continue;
        }
        let own = mesh.element(active[i]).bbox;
        let c = own.center();
        let scale = [own.extent(0).max(1e-300), own.extent(1).max(1e-300)];
        let n_basis = dim + 1;
        let basis = |x: &[f64; 2]| -> [f64; 3] {
            let mut b = [1.0, (x[0] - c[0]) / scale[0], 0.0];
            if dim == 2 {
                b[2] = (x[1] - c[1]) / scale[1];
            }
            b
        };
        let mut ata = [[0.0; 3]; 3];
        let mut atb = [[0.0; 3]; 3];
        let mut n_pts = 0;
        for &k in std::iter::once(&i).chain(nb) {
            for (x, _, sv) in &sampled[k] {
                let b = basis(x);
                for r in 0..n_basis {
                    for q in 0..n_basis {
                        ata[r][q] += b[r] * b[q];
                    }
                    for comp in 0..n_comp {
                        atb[comp][r] += b[r] * sv[comp];
                    }
                }
                n_pts += 1;
            }
        }
        let coeffs: Vec<[f64; 3]> = (0..n_comp)
            .map(|comp| {
                solve_small(&ata, &atb[comp], n_basis).unwrap_or_else(|| {
                    let mut m = [0.0; 3];
                    m[0] = atb[comp][0] / n_pts as f64;
                    m
                })
            })
            .collect();
        let mut acc = 0.0;
        for (x, w, sv) in &sampled[i] {
            let b = basis(x);
            for comp in 0..n_comp {
                let rec: f64 = (0..n_basis).map(|r| coeffs[comp][r] * b[r]).sum();
                let diff = rec - sv[comp];
                // off-diagonal appears twice in the Frobenius norm
                let mult = if comp == 1 { 2.0 } else { 1.0 };
                acc += w * mult * diff * diff;
            }
        }
        eta[i] = acc;
    }
    eta
}

/// Gaussian elimination with partial pivoting on an `n x n` system, `n <= 3`.
fn solve_small(a: &[[f64; 3]; 3], b: &[f64; 3], n: usize) -> Option<[f64; 3]> {
    let mut m = *a;
    let mut r = *b;
    let norm = (0..n).map(|i| m[i][i].abs()).fold(0.0, f64::max);
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))?;
        if m[piv][col].abs() <= 1e-12 * norm.max(1e-300) {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (r[row] - s) / m[row][row];
    }
    Some(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineSettings {
    pub phi_threshold: f64,
    /// Fraction of the total estimated error whose largest contributors are marked, in (0, 1].
    pub rho: f64,
    pub max_level: u32,
    /// Optional cap on the number of quadrature points per subdomain.
    pub point_budget: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineReport {
    /// Element ids marked by the phase-field threshold.
    pub marked_phi: Vec<usize>,
    /// Element ids marked by the recovery error indicator.
    pub marked_error: Vec<usize>,
    /// Element ids actually subdivided.
    pub refined: Vec<usize>,
    /// Subdomain of every refined element, aligned with `refined`.
    pub refined_subdomains: Vec<usize>,
    pub points_before: usize,
    pub points_after: usize,
}

impl RefineReport {
    pub fn any_refined(&self) -> bool {
        !self.refined.is_empty()
    }
}

/// Elements whose error indicators are the largest contributors summing to
/// at least `rho` of the total.
pub fn mark_by_error_fraction(eta: &[f64], rho: f64) -> Vec<usize> {
    let total: f64 = eta.iter().sum();
    if !(total > 0.0) {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..eta.len()).collect();
    order.sort_by(|&a, &b| eta[b].total_cmp(&eta[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut out = Vec::new();
    for i in order {
        if acc >= rho * total {
            break;
        }
        acc += eta[i];
        out.push(i);
    }
    out
}

impl Mesh {
    /// One pass of h-refinement.
    ///
    /// An active element is marked when the clipped phase field exceeds
    /// `phi_threshold` at one of its points, or when it belongs to the
    /// largest error contributors covering `rho` of the total recovery
    /// error. Marked elements below `max_level` are split into `2^dim`
    /// children; phase-field marks go first, then error marks by decreasing
    /// indicator, and a subdomain stops refining once the next split would
    /// exceed its point budget. New points take `history(subdomain, x)`.
    pub fn refine(
        &mut self,
        phi: &dyn Fn(usize, &[f64]) -> f64,
        stress: &dyn Fn(usize, &[f64]) -> Tensor2,
        history: &dyn Fn(usize, &[f64]) -> f64,
        settings: &RefineSettings,
    ) -> RefineReport {
        let active = self.active_elements();
        let mut report = RefineReport {
            points_before: self.total_points(),
            ..RefineReport::default()
        };

        let mut phi_max: Vec<(usize, f64)> = Vec::new();
        for (i, &(s, e)) in active.iter().enumerate() {
            let el = &self.subdomains[s].elements[e];
            let m = el
                .points
                .iter()
                .filter(|p| p.inside_domain)
                .map(|p| phi(s, &p.x).clamp(0.0, 1.0))
                .fold(0.0, f64::max);
            if m > settings.phi_threshold {
                phi_max.push((i, m));
            }
        }
        phi_max.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        report.marked_phi = phi_max.iter().map(|&(i, _)| self.element(active[i]).id).collect();

        let eta = recovery_error_indicator(self, stress);
        let err_marked = mark_by_error_fraction(&eta, settings.rho);
        report.marked_error = err_marked.iter().map(|&i| self.element(active[i]).id).collect();

        let mut seen = HashSet::new();
        let queue: Vec<usize> = phi_max
            .iter()
            .map(|&(i, _)| i)
            .chain(err_marked.iter().copied())
            .filter(|i| seen.insert(*i))
            .collect();

        let mut counts = self.point_counts();
        let mut split: Vec<(usize, usize)> = Vec::new();
        for i in queue {
            let (s, e) = active[i];
            let el = &self.subdomains[s].elements[e];
            if el.level >= settings.max_level {
                continue;
            }
            let children = 1usize << self.dim;
            let added = el.points.len() * (children - 1);
            if let Some(b) = &settings.point_budget {
                if counts[s] + added > b[s] {
                    continue;
                }
            }
            counts[s] += added;
            split.push((s, e));
        }
        split.sort_unstable();

        // rebuild element lists subdomain by subdomain, children in place of parents
        for s in 0..self.subdomains.len() {
            let targets: HashSet<usize> =
                split.iter().filter(|(ss, _)| *ss == s).map(|&(_, e)| e).collect();
            if targets.is_empty() {
                continue;
            }
            let old = std::mem::take(&mut self.subdomains[s].elements);
            let mut fresh = Vec::with_capacity(old.len() + targets.len() * 4);
            for (e, el) in old.into_iter().enumerate() {
                if !targets.contains(&e) {
                    fresh.push(el);
                    continue;
                }
                report.refined.push(el.id);
                report.refined_subdomains.push(s);
                for cb in el.bbox.split(self.dim) {
                    let mut child = self.make_element(cb, el.level + 1, Some(el.id), el.n_gauss);
                    for p in &mut child.points {
                        p.history = history(s, &p.x);
                    }
                    fresh.push(child);
                }
            }
            self.subdomains[s].elements = fresh;
        }
        report.points_after = self.total_points();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square_spec(n: usize, elements: usize, hole: Option<Hole>) -> PartitionSpec {
        let boxes = match n {
            1 => vec![BoundingBox::new([0.0, 0.0], [1.0, 1.0])],
            4 => vec![
                BoundingBox::new([0.0, 0.0], [0.5, 0.5]),
                BoundingBox::new([0.5, 0.0], [1.0, 0.5]),
                BoundingBox::new([0.0, 0.5], [0.5, 1.0]),
                BoundingBox::new([0.5, 0.5], [1.0, 1.0]),
            ],
            _ => unreachable!(),
        };
        PartitionSpec {
            dim: 2,
            elements: vec![elements; n],
            gauss: vec![2; n],
            interface_points: vec![40; n],
            boxes,
            hole,
            slit: None,
        }
    }

    #[test]
    fn two_point_rule_closed_form() {
        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cubic_is_integrated_exactly_by_two_points() {
        let b = BoundingBox::interval(-0.3, 1.7);
        let pts = gauss_points(&b, 2, 1, None);
        let q: f64 = pts.iter().map(|p| p.w * p.x[0].powi(3)).sum();
        let exact = (1.7f64.powi(4) - 0.3f64.powi(4)) / 4.0;
        assert!((q - exact).abs() < 1e-13);
    }

    #[test]
    fn unit_element_weights_sum_to_one() {
        let b = BoundingBox::new([0.0, 0.0], [1.0, 1.0]);
        let s: f64 = gauss_points(&b, 3, 2, None).iter().map(|p| p.w).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_subdomain_bar_has_single_interface_at_origin() {
        let spec = PartitionSpec {
            dim: 1,
            boxes: vec![BoundingBox::interval(-1.0, 0.0), BoundingBox::interval(0.0, 1.0)],
            elements: vec![10, 10],
            gauss: vec![2, 2],
            interface_points: vec![1, 1],
            hole: None,
            slit: None,
        };
        let mesh = Mesh::partition(&spec).unwrap();
        assert_eq!(mesh.interfaces.len(), 1);
        assert_eq!(mesh.interfaces[0].points, vec![[0.0, 0.0]]);
        assert_eq!(mesh.total_points(), 40);
    }

    #[test]
    fn quadrants_have_four_interfaces_meeting_at_centre() {
        let mesh = Mesh::partition(&unit_square_spec(4, 3, None)).unwrap();
        assert_eq!(mesh.interfaces.len(), 4);
        for i in &mesh.interfaces {
            let (a, b) = i.segment;
            assert!(a == [0.5, 0.5] || b == [0.5, 0.5], "{:?}", i.segment);
            // 40 points split over two interfaces per subdomain
            assert_eq!(i.points.len(), 20);
        }
    }

    #[test]
    fn slit_removes_coupling_on_the_crack() {
        let mut spec = unit_square_spec(4, 3, None);
        spec.slit = Some(Slit {
            start: [0.0, 0.5],
            end: [0.5, 0.5],
        });
        let mesh = Mesh::partition(&spec).unwrap();
        assert_eq!(mesh.interfaces.len(), 3);
        assert!(mesh.interfaces.iter().all(|i| !(i.a == 0 && i.b == 2)));
    }

    #[test]
    fn overlapping_or_gapped_boxes_are_rejected() {
        let mut spec = unit_square_spec(4, 2, None);
        spec.boxes[1] = BoundingBox::new([0.4, 0.0], [1.0, 0.5]);
        assert!(matches!(Mesh::partition(&spec), Err(Error::Geometry(_))));
        let mut spec = unit_square_spec(4, 2, None);
        spec.boxes[1] = BoundingBox::new([0.6, 0.0], [1.0, 0.5]);
        assert!(matches!(Mesh::partition(&spec), Err(Error::Geometry(_))));
    }

    #[test]
    fn disc_box_area_is_exact() {
        let h = Hole {
            center: [0.6, 0.7],
            radius: 0.15,
        };
        let full = BoundingBox::new([0.0, 0.0], [1.0, 1.0]);
        assert!((h.area_in_box(&full) - h.area()).abs() < 1e-14);
        // quarter disc
        let q = BoundingBox::new([0.6, 0.7], [1.0, 1.0]);
        assert!((h.area_in_box(&q) - 0.25 * h.area()).abs() < 1e-14);
        // box off the disc
        let off = BoundingBox::new([0.0, 0.0], [0.2, 0.2]);
        assert_eq!(h.area_in_box(&off), 0.0);
        // strip through the centre: 2 * integral_0^0.05 sqrt(r^2 - t^2) dt * 2
        let strip = BoundingBox::new([0.55, 0.0], [0.65, 1.0]);
        let r: f64 = 0.15;
        let a = 0.05f64;
        let half = 0.5 * (a * (r * r - a * a).sqrt() + r * r * (a / r).asin());
        assert!((h.area_in_box(&strip) - 4.0 * half).abs() < 1e-14);
    }

    #[test]
    fn masked_weights_cover_material_area() {
        let hole = Hole {
            center: [0.6, 0.7],
            radius: 0.15,
        };
        let mesh = Mesh::partition(&unit_square_spec(4, 12, Some(hole))).unwrap();
        let expect = 1.0 - hole.area();
        assert!((mesh.weight_total() - expect).abs() < 1e-10 * expect, "{} vs {expect}", mesh.weight_total());
        for sub in &mesh.subdomains {
            for el in &sub.elements {
                for p in &el.points {
                    assert_eq!(p.inside_domain, !hole.contains(&p.x));
                    if !p.inside_domain {
                        assert_eq!(p.w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn locate_uses_half_open_boxes() {
        let spec = PartitionSpec {
            dim: 1,
            boxes: vec![BoundingBox::interval(-1.0, 0.0), BoundingBox::interval(0.0, 1.0)],
            elements: vec![2, 2],
            gauss: vec![1, 1],
            interface_points: vec![1, 1],
            hole: None,
            slit: None,
        };
        let mesh = Mesh::partition(&spec).unwrap();
        assert_eq!(mesh.locate(&[-1.0, 0.0]), Some(0));
        assert_eq!(mesh.locate(&[0.0, 0.0]), Some(1));
        assert_eq!(mesh.locate(&[1.0, 0.0]), Some(1));
        assert_eq!(mesh.locate(&[1.5, 0.0]), None);
    }

    fn const_stress(v: f64) -> Tensor2 {
        [[v, 0.0], [0.0, v]]
    }

    #[test]
    fn recovery_reproduces_uniform_and_linear_fields() {
        let mesh = Mesh::partition(&unit_square_spec(4, 4, None)).unwrap();
        let eta = recovery_error_indicator(&mesh, &|_, _| const_stress(2.5));
        assert!(eta.iter().all(|&e| e.abs() < 1e-20));
        let eta = recovery_error_indicator(&mesh, &|_, x| {
            [[1.0 + 3.0 * x[0] - x[1], 0.5 * x[1]], [0.5 * x[1], -2.0 * x[0]]]
        });
        assert!(eta.iter().all(|&e| e <= 1e-10), "{eta:?}");
    }

    #[test]
    fn stress_jump_inside_one_element_maximizes_its_indicator() {
        let spec = PartitionSpec {
            dim: 1,
            boxes: vec![BoundingBox::interval(0.0, 1.0)],
            elements: vec![10],
            gauss: vec![2],
            interface_points: vec![1],
            hole: None,
            slit: None,
        };
        let mesh = Mesh::partition(&spec).unwrap();
        // jump at x = 0.45, the middle of element 4
        let eta = recovery_error_indicator(&mesh, &|_, x| {
            const_stress(if x[0] < 0.45 { 1.0 } else { 3.0 })
        });
        let best = (0..eta.len()).max_by(|&a, &b| eta[a].total_cmp(&eta[b])).unwrap();
        assert_eq!(best, 4, "{eta:?}");
    }

    #[test]
    fn error_fraction_marking() {
        let eta = [1.0, 5.0, 2.0, 2.0];
        assert_eq!(mark_by_error_fraction(&eta, 0.25), vec![1]);
        assert_eq!(mark_by_error_fraction(&eta, 0.6), vec![1, 2]);
        assert!(mark_by_error_fraction(&[0.0, 0.0], 0.5).is_empty());
    }

    #[test]
    fn refinement_nests_and_respects_max_level() {
        let mut mesh = Mesh::partition(&unit_square_spec(1, 2, None)).unwrap();
        let parent_boxes: Vec<BoundingBox> =
            mesh.subdomains[0].elements.iter().map(|e| e.bbox).collect();
        let settings = RefineSettings {
            phi_threshold: 0.2,
            rho: 0.0001,
            max_level: 1,
            point_budget: None,
        };
        let phi = |_: usize, x: &[f64]| if x[0] < 0.5 && x[1] < 0.5 { 0.9 } else { 0.0 };
        let r = mesh.refine(&phi, &|_, _| const_stress(1.0), &|_, _| 0.0, &settings);
        assert_eq!(r.refined.len(), 1);
        assert_eq!(r.points_after, r.points_before + 12);
        for el in &mesh.subdomains[0].elements {
            if el.level == 1 {
                assert!(parent_boxes[0].contains_box(&el.bbox, 2));
                assert_eq!(el.parent, Some(0));
            }
        }
        // second pass: level-1 elements are at max level
        let r2 = mesh.refine(&phi, &|_, _| const_stress(1.0), &|_, _| 0.0, &settings);
        assert!(r2.refined.is_empty());
        assert!(!r2.marked_phi.is_empty());
    }

    #[test]
    fn zero_phase_field_triggers_nothing() {
        let mut mesh = Mesh::partition(&unit_square_spec(4, 3, None)).unwrap();
        let settings = RefineSettings {
            phi_threshold: 0.2,
            rho: 0.25,
            max_level: 3,
            point_budget: None,
        };
        let r = mesh.refine(&|_, _| 0.0, &|_, _| const_stress(1.0), &|_, _| 0.0, &settings);
        assert!(r.marked_phi.is_empty());
        assert!(r.refined.is_empty());
    }
}
