use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Geometry, ShapeClass, Texture};
use crate::boxes::BoxXYXY;
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return invalid(format!("{width}×{height} RGB image needs {} bytes", width * height * 3));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::of(px[c] as f64 / 255.0);
            }
        }
        Tensor::new([3, self.height, self.width], data).expect("image extents are positive")
    }

    /// Crop of side `side` centred at `(cx, cy)`; outside pixels take `fill`.
    pub fn crop_square(&self, cx: f64, cy: f64, side: f64, fill: [u8; 3]) -> Image {
        let n = side.round().max(1.0) as usize;
        let x0 = (cx - side / 2.0).round() as i64;
        let y0 = (cy - side / 2.0).round() as i64;
        let mut out = Image::filled(n, n, fill);
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = (x0 + x as i64, y0 + y as i64);
                if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    out.set(x, y, self.get(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Image {
        let mut out = Image::filled(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    /// One-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, b: &BoxXYXY, rgb: [u8; 3]) {
        let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
        let (x1, x2) = (clamp(b.x1, self.width), clamp(b.x2 - 1.0, self.width));
        let (y1, y2) = (clamp(b.y1, self.height), clamp(b.y2 - 1.0, self.height));
        for x in x1..=x2 {
            self.set(x, y1, rgb);
            self.set(x, y2, rgb);
        }
        for y in y1..=y2 {
            self.set(x1, y, rgb);
            self.set(x2, y, rgb);
        }
    }
}

/// HSV with all components in `[0, 1]` to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Orientation of a bar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarAxis {
    Horizontal,
    Vertical,
}

/// Object footprint: `(x0, y0)` top-left of a `w × h` frame the shape fills.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl Placement {
    pub fn for_geometry(geometry: Geometry, size: f64, axis: BarAxis, x0: f64, y0: f64) -> Self {
        let thin = (size / 3.0).max(4.0);
        let (w, h) = match (geometry, axis) {
            (Geometry::Bar, BarAxis::Horizontal) => (size, thin),
            (Geometry::Bar, BarAxis::Vertical) => (thin, size),
            _ => (size, size),
        };
        Self { x0, y0, w, h }
    }

    pub fn frame(&self) -> BoxXYXY {
        BoxXYXY {
            x1: self.x0,
            y1: self.y0,
            x2: self.x0 + self.w,
            y2: self.y0 + self.h,
        }
    }
}

/// Whether the pixel with centre `(px, py)` lies inside the shape.
pub fn covers(geometry: Geometry, p: &Placement, px: f64, py: f64) -> bool {
    let u = (px - p.x0) / p.w;
    let v = (py - p.y0) / p.h;
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    match geometry {
        Geometry::Circle => r2 <= 0.25,
        Geometry::Square | Geometry::Bar => true,
        Geometry::Triangle => du.abs() <= v / 2.0,
        Geometry::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        Geometry::Ring => (0.09..=0.25).contains(&r2),
    }
}

fn texture_shade(texture: Texture, px: f64, py: f64, x0: f64, y0: f64) -> f64 {
    let (lx, ly) = (px - x0, py - y0);
    match texture {
        Texture::Solid => 1.0,
        Texture::Striped => {
            if ((lx + ly) / 3.0).floor() as i64 % 2 == 0 {
                1.0
            } else {
                0.35
            }
        }
        Texture::Dotted => {
            let (fx, fy) = (lx.rem_euclid(5.0) - 2.5, ly.rem_euclid(5.0) - 2.5);
            if fx * fx + fy * fy <= 2.0 {
                1.0
            } else {
                0.35
            }
        }
    }
}

fn covered_pixels(
    geometry: Geometry,
    p: &Placement,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize)> + '_ {
    let xs = (p.x0.floor().max(0.0) as usize)..((p.x0 + p.w).ceil().min(width as f64) as usize);
    let ys = (p.y0.floor().max(0.0) as usize)..((p.y0 + p.h).ceil().min(height as f64) as usize);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
        .filter(move |&(x, y)| covers(geometry, p, x as f64 + 0.5, y as f64 + 0.5))
}

/// Tight box of the pixels a shape covers inside a `width × height` image.
pub fn footprint(geometry: Geometry, p: &Placement, width: usize, height: usize) -> Option<BoxXYXY> {
    let mut tight: Option<(usize, usize, usize, usize)> = None;
    for (x, y) in covered_pixels(geometry, p, width, height) {
        tight = Some(match tight {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    tight.map(|(x1, y1, x2, y2)| BoxXYXY {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: x2 as f64 + 1.0,
        y2: y2 as f64 + 1.0,
    })
}

/// Paints one object over whatever lies below it.
pub fn paint_object(img: &mut Image, class: &ShapeClass, p: &Placement, rgb: [u8; 3]) {
    let pixels: Vec<(usize, usize)> = covered_pixels(class.geometry, p, img.width, img.height).collect();
    for (x, y) in pixels {
        let s = texture_shade(class.texture, x as f64 + 0.5, y as f64 + 0.5, p.x0, p.y0);
        let c = [0, 1, 2].map(|i| (rgb[i] as f64 * s).round() as u8);
        img.set(x, y, c);
    }
}
/// Grey background with per-pixel noise and a few faint rectangles.
pub fn paint_background(img: &mut Image, rng: &mut ChaCha8Rng) {
    let base: f64 = rng.gen_range(0.25..0.45);
    for y in 0..img.height {
        for x in 0..img.width {
            let n: f64 = rng.gen_range(-0.04..0.04);
            let v = ((base + n) * 255.0).round().clamp(0.0, 255.0) as u8;
            img.set(x, y, [v, v, v]);
        }
    }
    let blobs = rng.gen_range(2..6);
    for _ in 0..blobs {
        let w = rng.gen_range(8..48usize).min(img.width);
        let h = rng.gen_range(8..48usize).min(img.height);
        let x0 = rng.gen_range(0..=img.width - w);
        let y0 = rng.gen_range(0..=img.height - h);
        let tint = hsv_to_rgb(rng.gen(), 0.3, 0.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let old = img.get(x, y);
                let mix = |a: u8, b: u8| ((a as f64 * 0.75) + (b as f64 * 0.25)).round() as u8;
                img.set(x, y, [mix(old[0], tint[0]), mix(old[1], tint[1]), mix(old[2], tint[2])]);
            }
        }
    }
}
