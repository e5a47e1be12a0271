//! Rasterization of genotypes into filled color photos and thin-stroke
//! grayscale sketches.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::genotype::{Genotype, Palette};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pt {
    pub x: f64,
    pub y: f64,
}

impl Pt {
    fn new(x: f64, y: f64) -> Self {
        Pt { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Body,
    Accent,
    /// A cut-out that shows the background in photos.
    Hole,
}

#[derive(Clone, Debug)]
pub struct Shape {
    pub pts: Vec<Pt>,
    pub closed: bool,
    pub role: Role,
}

const BODY_CY: f64 = 0.52;

fn subdivide(corners: &[Pt], per_side: usize) -> Vec<Pt> {
    let n = corners.len();
    (0..n)
        .flat_map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % n]);
            (0..per_side).map(move |k| {
                let t = k as f64 / per_side as f64;
                Pt::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
            })
        })
        .collect()
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<Pt> {
    (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            Pt::new(cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Vector outline of a genotype on the unit canvas (y grows downward).
pub fn figure(g: &Genotype) -> Vec<Shape> {
    let (cx, cy) = (0.5 + g.body_dx, BODY_CY);
    let (hw, hh) = (g.body_w / 2.0, g.body_h / 2.0);
    let mut shapes = Vec::new();

    if let Some(scale) = g.base_w {
        let bw = hw * scale;
        let (top, bottom) = (cy + hh - 0.01, cy + hh + 0.09);
        let corners = [
            Pt::new(cx - bw, top),
            Pt::new(cx + bw, top),
            Pt::new(cx + bw, bottom),
            Pt::new(cx - bw, bottom),
        ];
        shapes.push(Shape {
            pts: subdivide(&corners, 4),
            closed: true,
            role: Role::Accent,
        });
    }

    let body = if g.angular {
        let corners = [
            Pt::new(cx - hw, cy - hh),
            Pt::new(cx + hw, cy - hh),
            Pt::new(cx + hw, cy + hh),
            Pt::new(cx - hw, cy + hh),
        ];
        subdivide(&corners, 5)
    } else {
        ellipse(cx, cy, hw, hh, 28)
    };
    shapes.push(Shape {
        pts: body,
        closed: true,
        role: Role::Body,
    });

    if let Some((height, width_frac, skew)) = g.hat {
        let top = cy - hh + 0.01;
        let half = hw * width_frac;
        let corners = [
            Pt::new(cx - half, top),
            Pt::new(cx + half, top),
            Pt::new(cx + skew, top - height),
        ];
        shapes.push(Shape {
            pts: subdivide(&corners, 3),
            closed: true,
            role: Role::Accent,
        });
    }

    if let Some((dx, dy, r)) = g.hole {
        shapes.push(Shape {
            pts: ellipse(cx + dx * g.body_w, cy + dy * g.body_h, r, r, 14),
            closed: true,
            role: Role::Hole,
        });
    }

    let boundary = |a: f64| {
        let (c, s) = (a.cos(), a.sin());
        if g.angular {
            let m = c.abs().max(s.abs()).max(1e-9);
            Pt::new(cx + hw * c / m, cy + hh * s / m)
        } else {
            Pt::new(cx + hw * c, cy + hh * s)
        }
    };
    for limb in &g.limbs {
        let start = boundary(limb.angle);
        let half = limb.length / 2.0;
        let mid = Pt::new(start.x + half * limb.angle.cos(), start.y + half * limb.angle.sin());
        let a2 = limb.angle + limb.bend;
        let end = Pt::new(mid.x + half * a2.cos(), mid.y + half * a2.sin());
        shapes.push(Shape {
            pts: vec![start, mid, end],
            closed: false,
            role: Role::Accent,
        });
    }

    if let Some((curl, len)) = g.tail {
        let mut p = boundary(PI / 2.0 + 0.35);
        let mut heading = PI / 2.0 + 0.2;
        let steps = 6;
        let mut pts = vec![p];
        for _ in 0..steps {
            p = Pt::new(p.x + len / steps as f64 * heading.cos(), p.y + len / steps as f64 * heading.sin());
            pts.push(p);
            heading += curl / steps as f64;
        }
        shapes.push(Shape {
            pts,
            closed: false,
            role: Role::Accent,
        });
    }
    shapes
}

/// Rigid jitter applied to a whole figure: scale and rotation about the
/// canvas center, then translation.
#[derive(Clone, Copy, Debug)]
struct Pose {
    scale: f64,
    angle: f64,
    tx: f64,
    ty: f64,
}

impl Pose {
    fn sample<R: Rng + ?Sized>(rng: &mut R, amount: f64) -> Self {
        Pose {
            scale: 1.0 + rng.gen_range(-0.08..0.08) * amount,
            angle: rng.gen_range(-0.08..0.08) * amount,
            tx: rng.gen_range(-0.05..0.05) * amount,
            ty: rng.gen_range(-0.04..0.04) * amount,
        }
    }

    fn apply(&self, p: Pt) -> Pt {
        let (x, y) = (p.x - 0.5, p.y - 0.5);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        Pt::new(
            0.5 + self.scale * (c * x - s * y) + self.tx,
            0.5 + self.scale * (s * x + c * y) + self.ty,
        )
    }
}

fn inside(poly: &[Pt], p: Pt) -> bool {
    let mut c = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            c = !c;
        }
        j = i;
    }
    c
}

fn seg_dist2(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
    qx * qx + qy * qy
}

fn near_polyline(pts: &[Pt], closed: bool, p: Pt, half_width: f64) -> bool {
    let hw2 = half_width * half_width;
    let n = pts.len();
    let segs = if closed { n } else { n - 1 };
    (0..segs).any(|i| seg_dist2(p, pts[i], pts[(i + 1) % n]) <= hw2)
}

struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

fn bounds(pts: &[Pt], pad: f64) -> Bounds {
    pts.iter().fold(
        Bounds {
            x0: f64::MAX,
            x1: f64::MIN,
            y0: f64::MAX,
            y1: f64::MIN,
        },
        |b, p| Bounds {
            x0: b.x0.min(p.x - pad),
            x1: b.x1.max(p.x + pad),
            y0: b.y0.min(p.y - pad),
            y1: b.y1.max(p.y + pad),
        },
    )
}

const SUPERSAMPLE: usize = 2;

/// Paints coverage of a shape into a CHW float canvas with a per-sample
/// color function.
fn paint(
    canvas: &mut [f64],
    size: usize,
    channels: usize,
    shape_bounds: Bounds,
    covered: impl Fn(Pt) -> bool,
    color: impl Fn(Pt) -> [f64; 3],
) {
    let plane = size * size;
    let inv = 1.0 / size as f64;
    let px0 = ((shape_bounds.x0 * size as f64).floor().max(0.0)) as usize;
    let px1 = ((shape_bounds.x1 * size as f64).ceil().min(size as f64)) as usize;
    let py0 = ((shape_bounds.y0 * size as f64).floor().max(0.0)) as usize;
    let py1 = ((shape_bounds.y1 * size as f64).ceil().min(size as f64)) as usize;
    let w = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in py0..py1 {
        for px in px0..px1 {
            let mut acc = [0.0; 3];
            let mut cov = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = Pt::new(
                        (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * inv,
                        (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * inv,
                    );
                    if covered(p) {
                        let c = color(p);
                        for k in 0..3 {
                            acc[k] += c[k] * w;
                        }
                        cov += w;
                    }
                }
            }
            if cov > 0.0 {
                for (k, a) in acc.iter().enumerate().take(channels) {
                    let v = &mut canvas[k * plane + py * size + px];
                    *v = *v * (1.0 - cov) + a;
                }
            }
        }
    }
}

/// Appearance settings of one photo domain (a dataset "camera").
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoStyle {
    pub background: [f64; 3],
    pub illumination: (f64, f64),
    pub noise: f64,
    /// Apply a 3x3 box blur (lower effective resolution).
    pub blur: bool,
    pub pose_jitter: f64,
    /// Light rectangles scattered over the background behind the figure.
    pub clutter: usize,
}

impl PhotoStyle {
    pub fn source() -> Self {
        PhotoStyle {
            background: [0.86, 0.87, 0.9],
            illumination: (0.8, 1.15),
            noise: 0.04,
            blur: false,
            pose_jitter: 1.0,
            clutter: 4,
        }
    }

    pub fn target() -> Self {
        PhotoStyle {
            background: [0.8, 0.76, 0.7],
            illumination: (0.6, 0.95),
            noise: 0.03,
            blur: false,
            pose_jitter: 1.0,
            clutter: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchStyle {
    /// Scales vertex wobble and stroke dropout; 0 is a clean tracing.
    pub distortion: f64,
    pub stroke_width: f64,
    pub pose_jitter: f64,
}

impl Default for SketchStyle {
    fn default() -> Self {
        SketchStyle {
            distortion: 1.0,
            stroke_width: 0.05,
            pose_jitter: 1.0,
        }
    }
}

fn box_blur(img: &mut [f64], size: usize, channels: usize) {
    let plane = size * size;
    for c in 0..channels {
        let src: Vec<f64> = img[c * plane..(c + 1) * plane].to_vec();
        for y in 0..size {
            for x in 0..size {
                let mut s = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            s += src[yy as usize * size + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                img[c * plane + y * size + x] = s / n;
            }
        }
    }
}

fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Renders a filled color photo, CHW `u8` with 3 channels.
pub fn render_photo<R: Rng + ?Sized>(
    g: &Genotype,
    palette: &Palette,
    style: &PhotoStyle,
    size: usize,
    rng: &mut R,
) -> Vec<u8> {
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for c in 0..3 {
        img[c * plane..(c + 1) * plane].fill(style.background[c]);
    }
    for _ in 0..style.clutter {
        let (cx, cy) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (w, h) = (rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35));
        let tone: f64 = rng.gen_range(0.55..1.0);
        let tint = [0, 1, 2].map(|_| tone * rng.gen_range(0.9..1.0));
        let px = |v: f64| ((v * size as f64).max(0.0) as usize).min(size);
        for y in px(cy - h)..px(cy + h) {
            for x in px(cx - w)..px(cx + w) {
                for (c, t) in tint.iter().enumerate() {
                    img[c * plane + y * size + x] = *t;
                }
            }
        }
    }
    let pose = Pose::sample(rng, style.pose_jitter);
    let stripe_period = g.stripes;
    for shape in figure(g) {
        let pts: Vec<Pt> = shape.pts.iter().map(|&p| pose.apply(p)).collect();
        if shape.closed {
            let b = bounds(&pts, 0.0);
            let base = match shape.role {
                Role::Body => palette.body,
                Role::Accent => palette.accent,
                Role::Hole => style.background,
            };
            let striped = shape.role == Role::Body && stripe_period.is_some();
            let period = stripe_period.unwrap_or(1.0);
            paint(&mut img, size, 3, b, |p| inside(&pts, p), |p| {
                if striped && ((p.y / (period / 2.0)).floor() as i64).rem_euclid(2) == 1 {
                    base.map(|v| v * 0.4)
                } else {
                    base
                }
            });
        } else {
            let hw = 0.04 * pose.scale;
            paint(&mut img, size, 3, bounds(&pts, hw), |p| near_polyline(&pts, false, p, hw), |_| {
                palette.accent
            });
        }
    }
    let gain = rng.gen_range(style.illumination.0..style.illumination.1);
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let shade = 1.0 + gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
                img[c * plane + y * size + x] *= gain * shade;
            }
        }
    }
    if style.blur {
        box_blur(&mut img, size, 3);
    }
    let noise = Normal::new(0.0, style.noise.max(1e-12)).expect("positive sigma");
    for v in img.iter_mut() {
        *v += noise.sample(rng);
    }
    quantize(&img)
}

fn wobble<R: Rng + ?Sized>(pts: &[Pt], closed: bool, sigma: f64, rng: &mut R) -> Vec<Pt> {
    if sigma <= 0.0 {
        return pts.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let raw: Vec<(f64, f64)> = pts.iter().map(|_| (normal.sample(rng), normal.sample(rng))).collect();
    let n = pts.len();
    (0..n)
        .map(|i| {
            // neighbor smoothing keeps strokes continuous
            let prev = if i > 0 { i - 1 } else if closed { n - 1 } else { i };
            let next = if i + 1 < n { i + 1 } else if closed { 0 } else { i };
            let dx = 0.5 * raw[i].0 + 0.25 * (raw[prev].0 + raw[next].0);
            let dy = 0.5 * raw[i].1 + 0.25 * (raw[prev].1 + raw[next].1);
            Pt::new(pts[i].x + dx, pts[i].y + dy)
        })
        .collect()
}

/// Renders a thin-stroke grayscale edge drawing, `u8` single channel.
/// Texture and color are never drawn.
pub fn render_sketch<R: Rng + ?Sized>(g: &Genotype, style: &SketchStyle, size: usize, rng: &mut R) -> Vec<u8> {
    let paper = rng.gen_range(0.92..1.0);
    let ink = rng.gen_range(0.05..0.2);
    let mut img = vec![paper; size * size];
    let pose = Pose::sample(rng, style.pose_jitter);
    let sigma = 0.007 * style.distortion;
    let dropout = (0.04 * style.distortion).min(0.5);
    for shape in figure(g) {
        let drop = rng.gen_bool(dropout);
        let pts: Vec<Pt> = shape.pts.iter().map(|&p| pose.apply(p)).collect();
        let pts = wobble(&pts, shape.closed, sigma, rng);
        if drop && shape.role != Role::Body {
            continue;
        }
        let hw = style.stroke_width / 2.0 * pose.scale;
        let closed = shape.closed;
        paint(&mut img, size, 1, bounds(&pts, hw), |p| near_polyline(&pts, closed, p, hw), |_| [ink; 3]);
    }
    quantize(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean(v: &[u8]) -> f64 {
        v.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn sketches_are_light_gray_and_photos_carry_the_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let g = Genotype::sample(&mut rng);
            let pal = Palette::sample(&mut rng);
            let photo = render_photo(&g, &pal, &PhotoStyle::source(), 32, &mut rng);
            let sketch = render_sketch(&g, &SketchStyle::default(), 32, &mut rng);
            assert_eq!(photo.len(), 3 * 32 * 32);
            assert_eq!(sketch.len(), 32 * 32);
            assert!(mean(&sketch) > 0.7);
            let chroma = (0..32 * 32)
                .map(|i| (photo[i] as i32 - photo[2048 + i] as i32).abs())
                .max()
                .unwrap();
            // red and blue bits differ: the body must show it
            if pal.color_bits()[0] != pal.color_bits()[2] {
                assert!(chroma > 60, "{chroma}");
            }
        }
    }

    #[test]
    fn sketches_ignore_palette_and_stripes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Genotype::sample(&mut rng);
        g.stripes = Some(0.1);
        let mut plain = g.clone();
        plain.stripes = None;
        let a = render_sketch(&g, &SketchStyle::default(), 32, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_sketch(&plain, &SketchStyle::default(), 32, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn point_in_polygon() {
        let sq = vec![Pt::new(0.0, 0.0), Pt::new(1.0, 0.0), Pt::new(1.0, 1.0), Pt::new(0.0, 1.0)];
        assert!(inside(&sq, Pt::new(0.5, 0.5)));
        assert!(!inside(&sq, Pt::new(1.5, 0.5)));
    }
}
