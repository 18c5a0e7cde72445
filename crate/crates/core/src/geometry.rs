//! Perspective placement of fronto-parallel text.
//!
//! A region is mapped through a random homography `H`, text is laid out
//! fronto-parallel along the longest straight border of the warped region,
//! and the result is mapped back to the background through `H⁻¹`.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Mask, RasterImage};
use crate::segmentation::{trace_boundary, Region};
use crate::text::{TextMask, MIN_PX_HEIGHT};

pub type Point = Vector2<f64>;

#[inline]
pub fn pt(x: f64, y: f64) -> Point {
    Vector2::new(x, y)
}

/// A projective map of the plane, normalized so `m[(2,2)] == 1` when nonzero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

const MIN_DET: f64 = 1e-9;

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let m = normalize(m);
        if !(m.determinant().abs() > MIN_DET) {
            return Err(Error::Degenerate("homography is singular".into()));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries, for serialization.
    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.m;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    /// Map a point; `None` if it lands on (or numerically near) the line at infinity.
    #[inline]
    pub fn try_apply(&self, p: Point) -> Option<Point> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < 1e-12 {
            return None;
        }
        let q = pt(v.x / v.z, v.y / v.z);
        (q.x.is_finite() && q.y.is_finite()).then_some(q)
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        self.try_apply(p).unwrap_or(pt(f64::NAN, f64::NAN))
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_after(&self, inner: &Homography) -> Homography {
        Homography { m: normalize(self.m * inner.m) }
    }

    pub fn inverse(&self) -> Result<Homography> {
        invert(self)
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let s = m[(2, 2)];
    if s.abs() > 1e-300 {
        m / s
    } else {
        m / m.norm()
    }
}

/// Inverse map, normalized.
pub fn invert(h: &Homography) -> Result<Homography> {
    let inv = h
        .m
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("homography is singular".into()))?;
    Homography::from_matrix(inv)
}

/// Similarity that moves the centroid to the origin with mean distance √2.
fn hartley(points: &[Point; 4]) -> Matrix3<f64> {
    let c = points.iter().sum::<Point>() / 4.0;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / 4.0;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn transform_all(t: &Matrix3<f64>, pts: &[Point; 4]) -> [Point; 4] {
    pts.map(|p| {
        let v = t * Vector3::new(p.x, p.y, 1.0);
        pt(v.x / v.z, v.y / v.z)
    })
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn has_collinear_triple(pts: &[Point; 4]) -> bool {
    // Points are Hartley-normalized, so a fixed area tolerance is scale free.
    (0..4).any(|skip| {
        let t: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        cross(t[0], t[1], t[2]).abs() < 1e-6
    })
}

/// Direct linear transform from four correspondences (Hartley-normalized).
pub fn homography_from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    if src.iter().chain(dst).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Degenerate("non-finite correspondence".into()));
    }
    let ts = hartley(src);
    let td = hartley(dst);
    let ns = transform_all(&ts, src);
    let nd = transform_all(&td, dst);
    if has_collinear_triple(&ns) || has_collinear_triple(&nd) {
        return Err(Error::Degenerate("three correspondence points are collinear".into()));
    }
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let (x, y) = (ns[i].x, ns[i].y);
        let (u, v) = (nd[i].x, nd[i].y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity is invertible");
    Homography::from_matrix(td_inv * hn * ts)
}

/// An axis-aligned rectangle in continuous coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn corners(&self) -> [Point; 4] {
        [pt(self.x0, self.y0), pt(self.x1, self.y0), pt(self.x1, self.y1), pt(self.x0, self.y1)]
    }

    pub fn diagonal(&self) -> f64 {
        ((self.x1 - self.x0).powi(2) + (self.y1 - self.y0).powi(2)).sqrt()
    }
}

const RANDOM_TRIES: usize = 100;
const MAX_CONDITION: f64 = 1e6;

/// Condition number of `h` expressed in coordinates where `frame` spans `[-1,1]²`.
pub fn condition_number(h: &Homography, frame: &Rect) -> f64 {
    let cx = (frame.x0 + frame.x1) / 2.0;
    let cy = (frame.y0 + frame.y1) / 2.0;
    let s = 2.0 / frame.diagonal().max(1e-12);
    let n = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let n_inv = n.try_inverse().expect("scaling");
    let m = n * h.m * n_inv;
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Random perspective: each bbox corner moves by at most
/// `max_perturb × diagonal`; draws are rejected until the target quad is
/// convex and the map is well conditioned.
pub fn random_homography<R: Rng + ?Sized>(rng: &mut R, bbox: &Rect, max_perturb: f64) -> Result<Homography> {
    if !(0.0..=0.3).contains(&max_perturb) {
        return Err(Error::invalid(format!("max_perturb {max_perturb} outside [0, 0.3]")));
    }
    if max_perturb == 0.0 {
        return Ok(Homography::identity());
    }
    let src = bbox.corners();
    let radius = max_perturb * bbox.diagonal();
    for _ in 0..RANDOM_TRIES {
        let dst = src.map(|c| {
            let r = radius * rng.random::<f64>().sqrt();
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            c + pt(r * theta.cos(), r * theta.sin())
        });
        if !Quad(dst).is_convex() {
            continue;
        }
        let Ok(h) = homography_from_correspondences(&src, &dst) else {
            continue;
        };
        if condition_number(&h, bbox) < MAX_CONDITION {
            return Ok(h);
        }
    }
    Err(Error::Degenerate(format!(
        "no well-conditioned homography after {RANDOM_TRIES} draws"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Inverse-mapping warp: output pixel `q` samples the input at `h⁻¹(q)`;
/// samples falling outside the source are 0.
pub fn warp_raster(
    raster: &RasterImage,
    h: &Homography,
    out_width: usize,
    out_height: usize,
    interp: Interp,
) -> Result<RasterImage> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::invalid("warp output must be at least 1x1"));
    }
    let inv = invert(h)?;
    let c = raster.channels();
    let mut data = vec![0.0f32; out_width * out_height * c];
    let mut px = vec![0.0f32; c];
    for y in 0..out_height {
        for x in 0..out_width {
            let Some(s) = inv.try_apply(pt(x as f64, y as f64)) else {
                continue;
            };
            let i = (y * out_width + x) * c;
            match interp {
                Interp::Bilinear => {
                    if raster.sample_into(s.x, s.y, &mut px) {
                        data[i..i + c].copy_from_slice(&px);
                    }
                }
                Interp::Nearest => {
                    let (rx, ry) = (s.x.round(), s.y.round());
                    if rx >= 0.0 && ry >= 0.0 && (rx as usize) < raster.width() && (ry as usize) < raster.height() {
                        data[i..i + c].copy_from_slice(raster.pixel(rx as usize, ry as usize));
                    }
                }
            }
        }
    }
    RasterImage::new(out_width, out_height, c, data)
}

/// Binary warp: bilinear sampling followed by a 0.5 threshold.
pub fn warp_mask(mask: &Mask, h: &Homography, out_width: usize, out_height: usize) -> Result<Mask> {
    let img = warp_raster(&mask.to_image(), h, out_width, out_height, Interp::Bilinear)?;
    Ok(Mask::from_image(&img))
}

/// Sample `mask` at `dst_to_src(q)` for every pixel `q` of the window
/// `[x0, x0+w) × [y0, y0+h)`, keeping only samples for which `keep` holds.
fn sample_mask_window(
    mask: &Mask,
    dst_to_src: &Homography,
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    keep: impl Fn(Point) -> bool,
) -> Mask {
    let src = mask.to_image();
    let mut out = Mask::new(w, h);
    let mut v = [0.0f32];
    for j in 0..h {
        for i in 0..w {
            let q = pt((x0 + i as i64) as f64, (y0 + j as i64) as f64);
            let Some(s) = dst_to_src.try_apply(q) else {
                continue;
            };
            if keep(s) && src.sample_into(s.x, s.y, &mut v) && v[0] >= 0.5 {
                out.set(i, j, true);
            }
        }
    }
    out
}

/// An oriented straight segment. Text placed on it reads from `p0` to `p1`
/// with its up direction along [`Segment::normal`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub p0: Point,
    pub p1: Point,
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }

    pub fn direction(&self) -> Point {
        (self.p1 - self.p0) / self.length()
    }

    /// Unit normal pointing to the text's "up" side (screen coordinates).
    pub fn normal(&self) -> Point {
        let d = self.direction();
        pt(d.y, -d.x)
    }

    pub fn midpoint(&self) -> Point {
        (self.p0 + self.p1) / 2.0
    }

    /// Angle of the direction in degrees, `(-180, 180]`.
    pub fn angle_deg(&self) -> f64 {
        let d = self.direction();
        d.y.atan2(d.x).to_degrees()
    }
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn douglas_peucker(points: &[Point], eps: f64, out: &mut Vec<Point>) {
    // Appends the simplified chain excluding its last point.
    let (a, b) = (points[0], points[points.len() - 1]);
    let mut best = (0.0, 0);
    for (i, &p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = point_segment_distance(p, a, b);
        if d > best.0 {
            best = (d, i);
        }
    }
    if best.0 > eps {
        douglas_peucker(&points[..=best.1], eps, out);
        douglas_peucker(&points[best.1..], eps, out);
    } else {
        out.push(a);
    }
}

/// Douglas–Peucker simplification of a closed polygon.
pub fn simplify_closed(points: &[Point], eps: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let first = points[0];
    let far = (1..points.len())
        .max_by(|&i, &j| (points[i] - first).norm().total_cmp(&(points[j] - first).norm()))
        .expect("at least 3 points");
    let mut out = Vec::new();
    douglas_peucker(&points[..=far], eps, &mut out);
    let mut tail: Vec<Point> = points[far..].to_vec();
    tail.push(first);
    douglas_peucker(&tail, eps, &mut out);
    out.dedup();
    out
}

fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const SIMPLIFY_EPS: f64 = 2.0;
const MIN_EDGE_LEN: f64 = 10.0;
const UPRIGHT_MIN_FRAC: f64 = 0.5;
const UPRIGHT_MIN_COS: f64 = 0.5;

/// A long straight stretch of a region border, oriented so the region lies
/// on the text's up side. Among stretches at least half as long as the
/// longest, the longest one reading within 60° of left-to-right wins; without
/// one, the longest overall. Falls back to the principal axis when no stretch
/// reaches 10 px.
pub fn fit_placement_edge(boundary: &[(i32, i32)]) -> Result<Segment> {
    if boundary.len() < 3 {
        return Err(Error::Degenerate(format!(
            "boundary has {} vertices, need at least 3",
            boundary.len()
        )));
    }
    let pts: Vec<Point> = boundary.iter().map(|&(x, y)| pt(x as f64, y as f64)).collect();
    let centroid = pts.iter().sum::<Point>() / pts.len() as f64;
    let simple = simplify_closed(&pts, SIMPLIFY_EPS);
    let n = simple.len();
    let segments: Vec<Segment> = if n >= 2 {
        (0..n)
            .map(|i| Segment {
                p0: simple[i],
                p1: simple[(i + 1) % n],
            })
            .filter(|s| s.length() > 0.0)
            .collect()
    } else {
        Vec::new()
    };
    let longest = segments.iter().map(Segment::length).fold(0.0, f64::max);
    if longest < MIN_EDGE_LEN {
        return principal_axis(&pts, centroid);
    }

    let orient = |s: &Segment| -> Segment {
        let probe = s.midpoint() + s.normal() * 1.5;
        let inward = if simple.len() >= 3 && point_in_polygon(probe, &simple) {
            true
        } else if simple.len() >= 3 && point_in_polygon(s.midpoint() - s.normal() * 1.5, &simple) {
            false
        } else {
            (centroid - s.midpoint()).dot(&s.normal()) >= 0.0
        };
        if inward {
            *s
        } else {
            Segment { p0: s.p1, p1: s.p0 }
        }
    };
    let by_length = |a: &Segment, b: &Segment| {
        a.length()
            .total_cmp(&b.length())
            .then(a.direction().x.total_cmp(&b.direction().x))
    };
    let oriented: Vec<Segment> = segments.iter().map(orient).collect();
    let upright = oriented
        .iter()
        .filter(|s| s.length() >= UPRIGHT_MIN_FRAC * longest && s.direction().x >= UPRIGHT_MIN_COS)
        .max_by(|a, b| by_length(a, b));
    Ok(*upright.unwrap_or_else(|| oriented.iter().max_by(|a, b| by_length(a, b)).expect("non-empty")))
}

fn principal_axis(pts: &[Point], centroid: Point) -> Result<Segment> {
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p - centroid;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    // Major eigenvector of [[sxx, sxy], [sxy, syy]].
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut d = pt(angle.cos(), angle.sin());
    if d.x < 0.0 || (d.x == 0.0 && d.y > 0.0) {
        d = -d;
    }
    let proj: Vec<f64> = pts.iter().map(|p| (p - centroid).dot(&d)).collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Err(Error::Degenerate("boundary has no extent".into()));
    }
    Ok(Segment {
        p0: centroid + d * lo,
        p1: centroid + d * hi,
    })
}

/// Four vertices, clockwise on screen starting at the text's top-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quad(pub [Point; 4]);

impl Quad {
    pub fn vertices(&self) -> &[Point; 4] {
        &self.0
    }

    /// Signed shoelace area; positive when clockwise on screen (y down).
    pub fn signed_area(&self) -> f64 {
        polygon_signed_area(&self.0)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn is_convex(&self) -> bool {
        let v = &self.0;
        let signs: Vec<f64> = (0..4).map(|i| cross(v[i], v[(i + 1) % 4], v[(i + 2) % 4])).collect();
        signs.iter().all(|&s| s > 0.0) || signs.iter().all(|&s| s < 0.0)
    }

    /// No two non-adjacent edges intersect and the area is positive.
    pub fn is_simple(&self) -> bool {
        let v = &self.0;
        let proper = |a: Point, b: Point, c: Point, d: Point| {
            let d1 = cross(a, b, c);
            let d2 = cross(a, b, d);
            let d3 = cross(c, d, a);
            let d4 = cross(c, d, b);
            (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0)
        };
        !proper(v[0], v[1], v[2], v[3]) && !proper(v[1], v[2], v[3], v[0]) && self.area() > 0.0
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, &self.0)
    }

    /// Distance from `p` to the quad (0 inside).
    pub fn distance(&self, p: Point) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        (0..4)
            .map(|i| point_segment_distance(p, self.0[i], self.0[(i + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self) -> Rect {
        let xs = self.0.iter().map(|p| p.x);
        let ys = self.0.iter().map(|p| p.y);
        Rect {
            x0: xs.clone().fold(f64::INFINITY, f64::min),
            x1: xs.fold(f64::NEG_INFINITY, f64::max),
            y0: ys.clone().fold(f64::INFINITY, f64::min),
            y1: ys.fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Intersection area of two convex quads.
    pub fn intersection_area(&self, other: &Quad) -> f64 {
        let clip = ensure_ccw_math(&other.0);
        let mut poly: Vec<Point> = ensure_ccw_math(&self.0);
        for i in 0..clip.len() {
            if poly.is_empty() {
                break;
            }
            let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
            let input = std::mem::take(&mut poly);
            for j in 0..input.len() {
                let (p, q) = (input[j], input[(j + 1) % input.len()]);
                let pin = cross(a, b, p) >= 0.0;
                let qin = cross(a, b, q) >= 0.0;
                if pin {
                    poly.push(p);
                }
                if pin != qin {
                    let (dp, dq) = (cross(a, b, p), cross(a, b, q));
                    poly.push(p + (q - p) * (dp / (dp - dq)));
                }
            }
        }
        if poly.len() < 3 {
            0.0
        } else {
            polygon_signed_area(&poly).abs()
        }
    }

    pub fn iou(&self, other: &Quad) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

fn polygon_signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i].x * v[(i + 1) % n].y - v[(i + 1) % n].x * v[i].y).sum::<f64>()
}

// Order vertices so that `cross(a, b, p) >= 0` means "inside".
fn ensure_ccw_math(v: &[Point; 4]) -> Vec<Point> {
    let mut out = v.to_vec();
    if polygon_signed_area(&out) < 0.0 {
        out.reverse();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementParams {
    pub max_perturb: f64,
    /// Side margin as a fraction of the placement edge length.
    pub margins: f64,
    /// Ink height cap as a fraction of the inscribed region height.
    pub max_height_frac: f64,
    /// Baseline offset above the placement edge, fraction of inscribed height.
    pub baseline_offset_frac: f64,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            max_perturb: 0.15,
            margins: 0.05,
            max_height_frac: 0.6,
            baseline_offset_frac: 0.1,
        }
    }
}

/// A text mask placed into background coordinates.
#[derive(Clone, Debug)]
pub struct PlacedText {
    /// Set pixels of the placed text inside the window at `origin`.
    pub mask: Mask,
    pub origin: (usize, usize),
    pub quad: Quad,
    /// Per-character quads in background coordinates.
    pub char_quads: Vec<Quad>,
    pub transcript: String,
    /// Scale applied to the source mask.
    pub scale: f64,
    /// Text-mask coordinates to background coordinates.
    pub text_to_background: Homography,
    pub source: TextMask,
}

impl PlacedText {
    /// Effective glyph height in pixels after scaling.
    pub fn px_height(&self) -> f64 {
        self.scale * self.source.px_height as f64
    }
}

/// Region mask in the frame of `h`, translated so the warped region starts
/// at a small positive offset. Returns the mask and the full map from
/// background coordinates to that frame.
fn warp_region(region: &Region, h: &Homography) -> Result<(Mask, Homography)> {
    const PAD: f64 = 2.0;
    let b = region.bbox;
    let frame = Rect {
        x0: b.x0 as f64 - 0.5,
        y0: b.y0 as f64 - 0.5,
        x1: b.x1 as f64 - 0.5,
        y1: b.y1 as f64 - 0.5,
    };
    let corners = frame.corners().map(|c| h.try_apply(c));
    if corners.iter().any(Option::is_none) {
        return Err(Error::Degenerate("region maps to infinity".into()));
    }
    let corners = Quad(corners.map(Option::unwrap));
    let wb = corners.bounds();
    let w = (wb.x1 - wb.x0 + 2.0 * PAD).ceil();
    let hgt = (wb.y1 - wb.y0 + 2.0 * PAD).ceil();
    let limit = 16.0 * (frame.x1 - frame.x0 + 1.0) * (frame.y1 - frame.y0 + 1.0) + 64.0;
    if !(w * hgt <= limit) {
        return Err(Error::Degenerate("warped region is unreasonably large".into()));
    }
    let to_frame = Homography::translation(PAD - wb.x0, PAD - wb.y0).then_after(h);
    // Frame pixel -> region-local mask coordinates.
    let frame_to_local = Homography::translation(-(b.x0 as f64), -(b.y0 as f64)).then_after(&invert(&to_frame)?);
    let warped = sample_mask_window(&region.mask, &frame_to_local, 0, 0, w as usize, hgt as usize, |_| true);
    Ok((largest_component(&warped), to_frame))
}

fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut comp = vec![u32::MAX; w * h];
    let mut best = (0usize, u32::MAX);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data()[start] == 0 || comp[start] != u32::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let nbrs = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nbrs.into_iter().flatten() {
                if mask.data()[j] != 0 && comp[j] == u32::MAX {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    Mask::from_fn(w, h, |x, y| comp[y * w + x] == best.1)
}

/// Length of the run inside `mask` starting at `p` and marching along `dir`.
fn run_length(mask: &Mask, p: Point, dir: Point) -> f64 {
    let inside = |q: Point| {
        let (x, y) = (q.x.round(), q.y.round());
        x >= 0.0 && y >= 0.0 && (x as usize) < mask.width() && (y as usize) < mask.height() && mask.get(x as usize, y as usize)
    };
    let step = 0.5;
    let mut t = 0.0;
    while inside(p + dir * (t + step)) {
        t += step;
        if t > (mask.width() + mask.height()) as f64 {
            break;
        }
    }
    t
}

/// Lay `text` out fronto-parallel along the placement edge of `region` as
/// seen through `h`, then map it back to background coordinates.
pub fn place_text(
    region: &Region,
    h: &Homography,
    text: &TextMask,
    params: &PlacementParams,
    image_size: (usize, usize),
) -> Result<PlacedText> {
    if text.char_boxes.is_empty() {
        return Err(Error::invalid("text mask has no characters"));
    }
    let (warped, to_frame) = warp_region(region, h)?;
    let boundary = trace_boundary(&warped);
    let edge = fit_placement_edge(&boundary)?;
    let (d, n) = (edge.direction(), edge.normal());
    let len = edge.length();

    let m = params.margins.clamp(0.0, 0.45);
    let samples = 11;
    let inscribed = (0..samples)
        .map(|i| {
            let t = m + (1.0 - 2.0 * m) * i as f64 / (samples - 1) as f64;
            run_length(&warped, edge.p0 + (edge.p1 - edge.p0) * t, n)
        })
        .fold(f64::INFINITY, f64::min);
    if !(inscribed > 0.0) {
        return Err(Error::DoesNotFit("region has no height above its placement edge".into()));
    }

    let (u0, v0, u1, v1) = text.ink_box();
    let (u0, v0, u1, v1) = (u0 as f64, v0 as f64, u1 as f64, v1 as f64);
    let (ink_w, ink_h) = (u1 - u0, v1 - v0);
    if !(ink_w > 0.0 && ink_h > 0.0) {
        return Err(Error::invalid("text has no ink"));
    }
    let scale = (params.max_height_frac * inscribed / ink_h).min((1.0 - 2.0 * m) * len / ink_w);
    let px = scale * text.px_height as f64;
    if px < MIN_PX_HEIGHT as f64 {
        return Err(Error::DoesNotFit(format!(
            "text would render {px:.1} px high, below {MIN_PX_HEIGHT}"
        )));
    }
    let baseline = text.baseline_y as f64;
    let descent = (v1 - baseline).max(0.0) * scale;
    let offset = (params.baseline_offset_frac * inscribed).max(descent + 0.5);
    if offset + (baseline - v0) * scale > inscribed {
        return Err(Error::DoesNotFit("text taller than the region above its edge".into()));
    }
    let uc = (u0 + u1) / 2.0;
    let origin = edge.midpoint() + n * offset;
    // text (u, v) -> frame: origin + (u - uc)·s·d + (baseline - v)·s·n
    let layout = Matrix3::new(
        scale * d.x,
        -scale * n.x,
        origin.x - scale * d.x * uc + scale * n.x * baseline,
        scale * d.y,
        -scale * n.y,
        origin.y - scale * d.y * uc + scale * n.y * baseline,
        0.0,
        0.0,
        1.0,
    );
    let layout = Homography::from_matrix(layout)?;
    let text_to_bg = invert(&to_frame)?.then_after(&layout);

    let map_rect = |x0: f64, y0: f64, x1: f64, y1: f64| -> Result<Quad> {
        let c = [pt(x0, y0), pt(x1, y0), pt(x1, y1), pt(x0, y1)].map(|p| text_to_bg.try_apply(p));
        if c.iter().any(Option::is_none) {
            return Err(Error::Degenerate("text maps to infinity".into()));
        }
        Ok(Quad(c.map(Option::unwrap)))
    };
    let quad = map_rect(u0, v0, u1, v1)?;
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    if quad.0.iter().any(|p| p.x < 0.0 || p.y < 0.0 || p.x > iw || p.y > ih) {
        return Err(Error::DoesNotFit("text quad leaves the image".into()));
    }
    if !quad.is_simple() {
        return Err(Error::Degenerate("text quad is not simple".into()));
    }
    let char_quads = text
        .char_boxes
        .iter()
        .map(|b| map_rect(b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64))
        .collect::<Result<Vec<_>>>()?;

    let qb = quad.bounds();
    let wx0 = (qb.x0.floor() as i64 - 2).max(0);
    let wy0 = (qb.y0.floor() as i64 - 2).max(0);
    let wx1 = (qb.x1.ceil() as i64 + 3).min(image_size.0 as i64);
    let wy1 = (qb.y1.ceil() as i64 + 3).min(image_size.1 as i64);
    let bg_to_text = invert(&text_to_bg)?;
    let mask = sample_mask_window(
        &text.mask,
        &bg_to_text,
        wx0,
        wy0,
        (wx1 - wx0) as usize,
        (wy1 - wy0) as usize,
        |s| s.x >= u0 && s.x <= u1 && s.y >= v0 && s.y <= v1,
    );
    if mask.count() == 0 {
        return Err(Error::DoesNotFit("placed text has no pixels".into()));
    }
    Ok(PlacedText {
        mask,
        origin: (wx0 as usize, wy0 as usize),
        quad,
        char_quads,
        transcript: text.transcript.clone(),
        scale,
        text_to_background: text_to_bg,
        source: text.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_and_translation_from_correspondences() {
        let src = [pt(0.0, 0.0), pt(10.0, 0.0), pt(10.0, 8.0), pt(0.0, 8.0)];
        let h = homography_from_correspondences(&src, &src).unwrap();
        assert_close(h.matrix(), &Matrix3::identity(), 1e-12);
        let dst = src.map(|p| p + pt(5.0, 3.0));
        let t = homography_from_correspondences(&src, &dst).unwrap();
        assert_close(t.matrix(), Homography::translation(5.0, 3.0).matrix(), 1e-12);
        let inv = invert(&t).unwrap();
        assert_close(inv.matrix(), Homography::translation(-5.0, -3.0).matrix(), 1e-12);
    }

    #[test]
    fn collinear_correspondences_rejected() {
        let src = [pt(0.0, 0.0), pt(1.0, 1.0), pt(2.0, 2.0), pt(0.0, 5.0)];
        let dst = [pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0), pt(0.0, 1.0)];
        assert!(matches!(homography_from_correspondences(&src, &dst), Err(Error::Degenerate(_))));
        assert!(matches!(homography_from_correspondences(&dst, &src), Err(Error::Degenerate(_))));
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(Homography::from_matrix(Matrix3::zeros()).is_err());
        let rank2 = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(Homography::from_matrix(rank2).is_err());
    }

    #[test]
    fn random_homography_contract() {
        let bbox = Rect { x0: 10.0, y0: 20.0, x1: 110.0, y1: 70.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(random_homography(&mut rng, &bbox, 0.0).unwrap(), Homography::identity());
        assert!(random_homography(&mut rng, &bbox, 0.31).is_err());
        for _ in 0..50 {
            let h = random_homography(&mut rng, &bbox, 0.15).unwrap();
            for c in bbox.corners() {
                assert!((h.apply(c) - c).norm() <= 0.15 * bbox.diagonal() + 1e-9);
            }
        }
        let a = random_homography(&mut ChaCha8Rng::seed_from_u64(8), &bbox, 0.2).unwrap();
        let b = random_homography(&mut ChaCha8Rng::seed_from_u64(8), &bbox, 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let img = RasterImage::from_fn(9, 7, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0);
        for interp in [Interp::Bilinear, Interp::Nearest] {
            let out = warp_raster(&img, &Homography::identity(), 9, 7, interp).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn integer_translation_shifts_mask() {
        let m = Mask::from_fn(20, 20, |x, y| (5..10).contains(&x) && (6..12).contains(&y));
        let out = warp_mask(&m, &Homography::translation(3.0, -2.0), 20, 20).unwrap();
        assert_eq!(out.count(), m.count());
        assert!(out.get(8, 4) && out.get(12, 9) && !out.get(7, 4));
    }

    #[test]
    fn rectangle_edge_is_bottom_left_to_right() {
        let (w, h) = (40i32, 12i32);
        let mut b = Vec::new();
        for x in 0..w {
            b.push((x, 0));
        }
        for y in 1..h {
            b.push((w - 1, y));
        }
        for x in (0..w - 1).rev() {
            b.push((x, h - 1));
        }
        for y in (1..h - 1).rev() {
            b.push((0, y));
        }
        let e = fit_placement_edge(&b).unwrap();
        assert!(e.angle_deg().abs() < 1e-9, "{e:?}");
        assert!((e.length() - w as f64).abs() <= 2.0);
        assert_eq!(e.p0.y, (h - 1) as f64);
    }

    #[test]
    fn tiny_boundary_rejected() {
        assert!(fit_placement_edge(&[(0, 0), (1, 0)]).is_err());
    }

    #[test]
    fn quad_overlap() {
        let a = Quad([pt(0.0, 0.0), pt(10.0, 0.0), pt(10.0, 10.0), pt(0.0, 10.0)]);
        let b = Quad([pt(5.0, 0.0), pt(15.0, 0.0), pt(15.0, 10.0), pt(5.0, 10.0)]);
        assert!((a.intersection_area(&b) - 50.0).abs() < 1e-9);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        let far = Quad(b.0.map(|p| p + pt(100.0, 0.0)));
        assert_eq!(a.iou(&far), 0.0);
        assert!(a.is_simple() && a.is_convex());
        let bow = Quad([pt(0.0, 0.0), pt(10.0, 10.0), pt(10.0, 0.0), pt(0.0, 10.0)]);
        assert!(!bow.is_simple());
    }
}
