//! Four-point polygons in pixel and quantized form, with area and
//! convex-clipping IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{dequantize_coord, quantize_coord, QuantBin};

const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area. Positive for clockwise order in image
/// coordinates (y pointing down).
fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc / 2.0
}

/// A quadrilateral in pixel coordinates, stored in canonical order:
/// top-left first, then clockwise in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point; 4]", into = "[Point; 4]")]
pub struct PixelPolygon {
    points: [Point; 4],
}

impl TryFrom<[Point; 4]> for PixelPolygon {
    type Error = Error;

    fn try_from(points: [Point; 4]) -> Result<Self> {
        PixelPolygon::canonicalize(points)
    }
}

impl From<PixelPolygon> for [Point; 4] {
    fn from(p: PixelPolygon) -> Self {
        p.points
    }
}

impl PixelPolygon {
    /// Reorders four points into canonical order. Fails on non-finite or
    /// zero-area input.
    pub fn canonicalize(points: [Point; 4]) -> Result<Self> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegeneratePolygon("non-finite coordinate".into()));
        }
        let cx = points.iter().map(|p| p.x).sum::<f64>() / 4.0;
        let cy = points.iter().map(|p| p.y).sum::<f64>() / 4.0;
        let mut sorted = points;
        // atan2 with y down increases clockwise on screen
        sorted.sort_by(|a, b| {
            let ta = (a.y - cy).atan2(a.x - cx);
            let tb = (b.y - cy).atan2(b.x - cx);
            ta.total_cmp(&tb)
        });
        let start = (0..4)
            .min_by(|&i, &j| {
                let (a, b) = (sorted[i], sorted[j]);
                (a.x + a.y)
                    .total_cmp(&(b.x + b.y))
                    .then(a.y.total_cmp(&b.y))
                    .then(a.x.total_cmp(&b.x))
            })
            .expect("four points");
        sorted.rotate_left(start);
        let area = signed_area(&sorted);
        if area.abs() <= AREA_EPS {
            return Err(Error::DegeneratePolygon(format!("area {area}")));
        }
        Ok(PixelPolygon { points: sorted })
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::canonicalize([
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn points(&self) -> &[Point; 4] {
        &self.points
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn is_convex(&self) -> bool {
        is_convex(&self.points)
    }

    pub fn centroid(&self) -> Point {
        Point::new(
            self.points.iter().map(|p| p.x).sum::<f64>() / 4.0,
            self.points.iter().map(|p| p.y).sum::<f64>() / 4.0,
        )
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Applies `f` to every corner and re-canonicalizes.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::canonicalize(self.points.map(f))
    }
}

/// Absolute shoelace area.
pub fn polygon_area(poly: &PixelPolygon) -> f64 {
    signed_area(&poly.points).abs()
}

fn is_convex(points: &[Point]) -> bool {
    let n = points.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let c = cross(points[i], points[(i + 1) % n], points[(i + 2) % n]);
        if c.abs() <= AREA_EPS {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

/// Sutherland–Hodgman: clips `subject` against a convex `clip` polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let orient = signed_area(clip).signum();
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let inside = |p: Point| cross(a, b, p) * orient >= 0.0;
        let intersect = |p: Point, q: Point| {
            let cp = cross(a, b, p);
            let cq = cross(a, b, q);
            let t = cp / (cp - cq);
            Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
        };
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(intersect(prev, cur)),
                (false, true) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

/// Area of the intersection of two convex polygons.
pub fn intersection_area(a: &PixelPolygon, b: &PixelPolygon) -> Result<f64> {
    if !a.is_convex() || !b.is_convex() {
        return Err(Error::NonConvex);
    }
    let clipped = clip_convex(&a.points, &b.points);
    if clipped.len() < 3 {
        return Ok(0.0);
    }
    Ok(signed_area(&clipped).abs())
}

/// Intersection over union of two convex polygons.
pub fn polygon_iou(a: &PixelPolygon, b: &PixelPolygon) -> Result<f64> {
    let inter = intersection_area(a, b)?;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU for evaluation: degenerate or non-convex predictions score 0.
pub fn iou_or_zero(pred: [Point; 4], gold: &PixelPolygon) -> f64 {
    PixelPolygon::canonicalize(pred)
        .and_then(|p| polygon_iou(&p, gold))
        .unwrap_or(0.0)
}

/// Eight coordinate bins `[x1, y1, x2, y2, x3, y3, x4, y4]` in canonical
/// point order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct QuantPolygon {
    bins: [QuantBin; 8],
}

impl Serialize for QuantPolygon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.values().serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantPolygon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = <[usize; 8]>::deserialize(d)?;
        QuantPolygon::from_values(values).map_err(serde::de::Error::custom)
    }
}

impl QuantPolygon {
    pub fn new(bins: [QuantBin; 8]) -> Self {
        QuantPolygon { bins }
    }

    pub fn from_values(values: [usize; 8]) -> Result<Self> {
        let mut bins = [QuantBin::default(); 8];
        for (b, v) in bins.iter_mut().zip(values) {
            *b = QuantBin::new(v)?;
        }
        Ok(QuantPolygon { bins })
    }

    /// Quantizes x against `width` and y against `height`.
    pub fn from_pixel(poly: &PixelPolygon, width: usize, height: usize) -> Result<Self> {
        let mut bins = [QuantBin::default(); 8];
        for (k, p) in poly.points.iter().enumerate() {
            bins[2 * k] = quantize_coord(p.x.max(0.0), width)?;
            bins[2 * k + 1] = quantize_coord(p.y.max(0.0), height)?;
        }
        Ok(QuantPolygon { bins })
    }

    pub fn bins(&self) -> [QuantBin; 8] {
        self.bins
    }

    pub fn values(&self) -> [usize; 8] {
        self.bins.map(QuantBin::value)
    }

    /// Bin-center pixel corners, in stored order.
    pub fn to_points(&self, width: usize, height: usize) -> [Point; 4] {
        std::array::from_fn(|k| {
            Point::new(
                dequantize_coord(self.bins[2 * k], width),
                dequantize_coord(self.bins[2 * k + 1], height),
            )
        })
    }
}
