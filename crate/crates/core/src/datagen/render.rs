use image::{GrayImage, Luma};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{table_to_html, CellRecord, DocumentSample, TableSpec};
use crate::error::{Error, Result};
use crate::geometry::{PixelPolygon, Point};

const GLYPH: usize = 8;
const INK: Luma<u8> = Luma([0]);
const PAPER: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 256,
            height: 256,
        }
    }
}

/// A projective map of the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// The map sending each `src[i]` to `dst[i]` (direct linear transform
    /// with the bottom-right entry fixed to 1).
    pub fn from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let (x, y) = (src[i].x, src[i].y);
            let (u, v) = (dst[i].x, dst[i].y);
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Layout("degenerate warp correspondences".into()))?;
        Ok(Homography(Matrix3::new(
            h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
        )))
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        Point::new(v.x / v.z, v.y / v.z)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.0
            .try_inverse()
            .map(Homography)
            .ok_or_else(|| Error::Layout("warp is not invertible".into()))
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

fn glyph(c: char) -> [u8; 8] {
    let idx = c as usize;
    if idx < 128 {
        font8x8::legacy::BASIC_LEGACY[idx]
    } else {
        font8x8::legacy::BASIC_LEGACY['?' as usize]
    }
}

fn draw_text(img: &mut GrayImage, x: usize, y: usize, text: &str, scale: usize) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let ox = x + i * GLYPH * scale;
        for (gy, bits) in rows.iter().enumerate() {
            for gx in 0..GLYPH {
                if bits >> gx & 1 == 1 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            img.put_pixel(
                                (ox + gx * scale + sx) as u32,
                                (y + gy * scale + sy) as u32,
                                INK,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Cell border coordinates for a spec: `(xs, ys)` with `cols + 1` and
/// `rows + 1` entries relative to the table origin.
fn grid_lines(spec: &TableSpec) -> (Vec<usize>, Vec<usize>) {
    let s = spec.style.glyph_scale.max(1);
    let pad = spec.style.padding;
    let row_h = GLYPH * s + 2 * pad + 1;
    let mut xs = vec![0];
    for c in 1..=spec.cols {
        let chars = (2..=spec.rows)
            .chain([1])
            .map(|r| spec.cell(r, c).chars().count())
            .max()
            .unwrap_or(1);
        xs.push(xs[c - 1] + chars * GLYPH * s + 2 * pad + 1);
    }
    let ys = (0..=spec.rows).map(|r| r * row_h).collect();
    (xs, ys)
}

/// Renders `spec` on a white page. Deterministic in `(spec, seed)`; the
/// seed picks the table position and, when the style asks for it, the
/// perspective warp. Cell polygons are the cell border rectangles, mapped
/// through the same warp as the image.
pub fn render_document(spec: &TableSpec, seed: u64, page: RenderConfig) -> Result<DocumentSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.style.glyph_scale.max(1);
    let (xs, ys) = grid_lines(spec);
    let tw = xs[spec.cols] + 1;
    let th = ys[spec.rows] + 1;
    if tw > page.width || th > page.height {
        return Err(Error::Layout(format!(
            "{}x{} table needs {tw}x{th} px, page is {}x{}",
            spec.rows, spec.cols, page.width, page.height
        )));
    }
    let ox = rng.gen_range(0..=page.width - tw);
    let oy = rng.gen_range(0..=page.height - th);

    let mut img = GrayImage::from_pixel(page.width as u32, page.height as u32, Luma([PAPER]));
    for &x in &xs {
        for y in 0..th {
            img.put_pixel((ox + x) as u32, (oy + y) as u32, INK);
        }
    }
    for &y in &ys {
        for x in 0..tw {
            img.put_pixel((ox + x) as u32, (oy + y) as u32, INK);
        }
    }
    let mut cells = Vec::with_capacity(spec.rows * spec.cols);
    for (r, c) in spec.positions() {
        let (x0, x1) = (ox + xs[c - 1], ox + xs[c]);
        let (y0, y1) = (oy + ys[r - 1], oy + ys[r]);
        draw_text(
            &mut img,
            x0 + 1 + spec.style.padding,
            y0 + 1 + spec.style.padding,
            spec.cell(r, c),
            s,
        );
        cells.push(CellRecord {
            text: spec.cell(r, c).to_string(),
            polygon: PixelPolygon::rect(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?,
            row: r,
            col: c,
        });
    }

    let warped = spec.style.warp > 0.0;
    if warped {
        let (w, h) = (page.width as f64, page.height as f64);
        let m = spec.style.warp.min(0.25);
        let mut jitter = |extent: f64| rng.gen_range(0.0..=m * extent);
        let src = [
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ];
        let dst = [
            Point::new(jitter(w), jitter(h)),
            Point::new(w - jitter(w), jitter(h)),
            Point::new(w - jitter(w), h - jitter(h)),
            Point::new(jitter(w), h - jitter(h)),
        ];
        let hom = Homography::from_correspondences(&src, &dst)?;
        img = warp_image(&img, &hom)?;
        for cell in &mut cells {
            cell.polygon = cell.polygon.map_points(|p| hom.apply(p))?;
        }
    }

    Ok(DocumentSample {
        image: img,
        cells,
        html: table_to_html(spec),
        warped,
    })
}

/// Inverse-maps every destination pixel center and samples the nearest
/// source pixel; points falling outside the source are paper.
fn warp_image(src: &GrayImage, hom: &Homography) -> Result<GrayImage> {
    let inv = hom.inverse()?;
    let (w, h) = src.dimensions();
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let p = inv.apply(Point::new(x as f64 + 0.5, y as f64 + 0.5));
        let (sx, sy) = (p.x.floor(), p.y.floor());
        if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
            *src.get_pixel(sx as u32, sy as u32)
        } else {
            Luma([PAPER])
        }
    }))
}
