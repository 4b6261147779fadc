//! Synthetic road scenes seen through an equidistant fisheye lens.
//!
//! A scene is first rasterised on a rectilinear (pinhole) source canvas at
//! twice the output size, then warped: an output pixel at radius `r` from the
//! centre looks along incidence angle `θ = r / f`, which the pinhole canvas
//! shows at radius `f_src · tan θ`. Images are resampled bilinearly, masks by
//! nearest neighbour. Pixels beyond `max_theta` are black background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Class, SegmentationSample, ViewTag};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisheyeCameraModel {
    /// Pixels per radian.
    pub focal: f64,
    /// `(cy, cx)` in pixel coordinates (pixel centres are integers).
    pub center: (f64, f64),
    pub max_theta: f64,
}

impl FisheyeCameraModel {
    pub const DEFAULT_MAX_THETA: f64 = 1.2;

    /// Image circle inscribed in a `size × size` frame.
    pub fn for_size(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        let max_theta = Self::DEFAULT_MAX_THETA;
        Self { focal: size as f64 / 2.0 / max_theta, center: (c, c), max_theta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::config(format!("fisheye focal must be positive, got {}", self.focal)));
        }
        if !(self.max_theta > 0.0 && self.max_theta < std::f64::consts::FRAC_PI_2) {
            return Err(Error::config(format!("max_theta must lie in (0, π/2), got {}", self.max_theta)));
        }
        Ok(())
    }

    /// Image position of the ray at incidence `theta` and azimuth `phi`.
    pub fn project(&self, theta: f64, phi: f64) -> (f64, f64) {
        let r = self.focal * theta;
        (self.center.0 + r * phi.sin(), self.center.1 + r * phi.cos())
    }

    /// `(theta, phi)` of the ray through `(y, x)`; `None` outside the image circle.
    pub fn unproject(&self, y: f64, x: f64) -> Option<(f64, f64)> {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let theta = dy.hypot(dx) / self.focal;
        (theta <= self.max_theta).then(|| (theta, dy.atan2(dx)))
    }
}

/// Object rates for the scene generator. Expected counts per scene for the
/// `*_rate` fields, probabilities for the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub vehicle_rate: f64,
    pub person_rate: f64,
    pub bicycle_prob: f64,
    pub motorcycle_prob: f64,
    /// Chance that a two-wheeler carries a rider.
    pub rider_prob: f64,
    pub sign_prob: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            vehicle_rate: 1.5,
            person_rate: 1.2,
            bicycle_prob: 0.45,
            motorcycle_prob: 0.4,
            rider_prob: 0.6,
            sign_prob: 0.3,
            noise: 0.03,
        }
    }
}

/// The pinhole canvas behind a generated sample, kept for inspection.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub size: usize,
    /// `size²` RGB triples.
    pub image: Vec<[f32; 3]>,
    pub mask: Vec<u8>,
    /// Pinhole focal length in canvas pixels.
    pub focal: f64,
}

impl RenderedScene {
    /// Canvas position seen by fisheye pixel `(y, x)`; `None` outside the circle.
    pub fn source_point(&self, cam: &FisheyeCameraModel, y: f64, x: f64) -> Option<(f64, f64)> {
        let (theta, phi) = cam.unproject(y, x)?;
        let c = (self.size as f64 - 1.0) / 2.0;
        let r = self.focal * theta.tan();
        Some((c + r * phi.sin(), c + r * phi.cos()))
    }

    /// Class at the canvas pixel nearest to `(sy, sx)`; background off-canvas.
    pub fn nearest_class(&self, sy: f64, sx: f64) -> u8 {
        let (iy, ix) = (sy.round(), sx.round());
        if iy < 0.0 || ix < 0.0 || iy >= self.size as f64 || ix >= self.size as f64 {
            return Class::Background.id();
        }
        self.mask[iy as usize * self.size + ix as usize]
    }

    fn bilinear(&self, sy: f64, sx: f64) -> [f32; 3] {
        let n = self.size;
        let max = (n - 1) as f64;
        let (sy, sx) = (sy.clamp(0.0, max), sx.clamp(0.0, max));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let p = |y: usize, x: usize| self.image[y * n + x];
        let (a, b, c, d) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bot = c[k] + (d[k] - c[k]) * fx;
            top + (bot - top) * fy
        })
    }
}

struct Canvas {
    n: usize,
    image: Vec<[f32; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, class: Class, color: [f32; 3]) {
        let i = y * self.n + x;
        self.mask[i] = class.id();
        self.image[i] = color;
    }

    /// Pixel index range covering `[lo, hi)`.
    fn span(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = lo.ceil().max(0.0) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(self.n);
        a..b.max(a)
    }

    fn rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, class: Class, color: [f32; 3]) {
        for y in self.span(y0, y1) {
            for x in self.span(x0, x1) {
                self.put(y, x, class, color);
            }
        }
    }

    /// Annulus `r_in ≤ d ≤ r`; a disc when `r_in = 0`.
    fn ring(&mut self, cy: f64, cx: f64, r: f64, r_in: f64, class: Class, color: [f32; 3]) {
        for y in self.span(cy - r, cy + r + 1e-9) {
            for x in self.span(cx - r, cx + r + 1e-9) {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                if d <= r && d >= r_in {
                    self.put(y, x, class, color);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    // Knuth; means here are tiny
    let limit = (-mean).exp();
    let mut p = 1.0;
    let mut k = 0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit || k > 20 {
            return k;
        }
        k += 1;
    }
}

#[derive(Clone, Copy)]
enum Thing {
    Vehicle,
    Person,
    Bicycle { rider: bool },
    Motorcycle { rider: bool },
    Sign,
}

/// Road geometry on the canvas.
struct Road {
    horizon: f64,
    vanish_x: f64,
    half_bottom: f64,
    n: f64,
}

impl Road {
    /// Depth fraction: 0 at the horizon, 1 at the bottom edge.
    fn t(&self, y: f64) -> f64 {
        (y - self.horizon) / (self.n - 1.0 - self.horizon)
    }

    fn half_width(&self, y: f64) -> f64 {
        self.t(y) * self.half_bottom
    }

    /// Lateral road coordinate: 0 on the centre line, ±1 on the edges.
    fn u(&self, y: f64, x: f64) -> f64 {
        (x - self.vanish_x) / self.half_width(y).max(1e-9)
    }
}

fn draw_person(c: &mut Canvas, rng: &mut ChaCha8Rng, gx: f64, gy: f64, s: f64, class: Class) {
    let h = 0.26 * s;
    let w = 0.07 * s;
    let clothes = jitter(rng, [0.25, 0.3, 0.55], 0.2);
    let legs = jitter(rng, [0.15, 0.15, 0.2], 0.08);
    let skin = jitter(rng, [0.85, 0.65, 0.5], 0.08);
    c.rect(gy - 0.45 * h, gy, gx - 0.4 * w, gx + 0.4 * w, class, legs);
    c.rect(gy - 0.85 * h, gy - 0.45 * h, gx - w / 2.0, gx + w / 2.0, class, clothes);
    c.ring(gy - 0.85 * h - 0.07 * s * 0.5, gx, 0.04 * s, 0.0, class, skin);
}

fn draw_two_wheeler(c: &mut Canvas, rng: &mut ChaCha8Rng, gx: f64, gy: f64, s: f64, motor: bool, rider: bool) {
    let class = if motor { Class::Motorcycle } else { Class::Bicycle };
    let r = if motor { 0.055 } else { 0.05 } * s;
    let gap = 0.13 * s;
    let tyre = jitter(rng, [0.12, 0.12, 0.12], 0.05);
    let frame = if motor { jitter(rng, [0.7, 0.1, 0.1], 0.2) } else { jitter(rng, [0.2, 0.6, 0.3], 0.2) };
    let inner = if motor { 0.0 } else { 0.55 * r };
    for wx in [gx - gap / 2.0, gx + gap / 2.0] {
        c.ring(gy - r, wx, r, inner, class, tyre);
    }
    let body_h = if motor { 0.09 * s } else { 0.03 * s };
    c.rect(gy - r - body_h, gy - r + 0.2 * r, gx - gap / 2.0, gx + gap / 2.0, class, frame);
    if rider {
        let seat = gy - r - body_h * 0.8;
        draw_person(c, rng, gx, seat, 0.8 * s, Class::Rider);
    }
}

fn draw_vehicle(c: &mut Canvas, rng: &mut ChaCha8Rng, gx: f64, gy: f64, s: f64) {
    let w = rng.random_range(0.28..0.36) * s;
    let h = rng.random_range(0.13..0.17) * s;
    let body: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let glass = jitter(rng, [0.35, 0.45, 0.55], 0.08);
    let tyre = [0.05, 0.05, 0.05];
    c.rect(gy - h, gy - 0.15 * h, gx - w / 2.0, gx + w / 2.0, Class::Vehicles, body);
    c.rect(gy - 1.6 * h, gy - h, gx - 0.32 * w, gx + 0.32 * w, Class::Vehicles, glass);
    for wx in [gx - 0.32 * w, gx + 0.32 * w] {
        c.ring(gy - 0.2 * h, wx, 0.2 * h, 0.0, Class::Vehicles, tyre);
    }
}

fn draw_sign(c: &mut Canvas, rng: &mut ChaCha8Rng, gx: f64, gy: f64, s: f64) {
    let pole = [0.45, 0.45, 0.45];
    let r = 0.04 * s;
    let top = gy - 0.34 * s;
    c.rect(top, gy, gx - 0.006 * s, gx + 0.006 * s, Class::Background, pole);
    let face = jitter(rng, [0.85, 0.1, 0.1], 0.08);
    c.ring(top, gx, r, 0.0, Class::TrafficSign, face);
    c.ring(top, gx, 0.55 * r, 0.0, Class::TrafficSign, [0.95, 0.95, 0.95]);
}

fn render_canvas(n: usize, rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Canvas {
    let nf = n as f64;
    let road = Road {
        horizon: nf * rng.random_range(0.38..0.46),
        vanish_x: nf * rng.random_range(0.42..0.58),
        half_bottom: nf * rng.random_range(0.35..0.5),
        n: nf,
    };
    let light = rng.random_range(0.75f32..1.1);
    let sky = jitter(rng, [0.55, 0.7, 0.9], 0.08);
    let ground = jitter(rng, [0.45, 0.5, 0.35], 0.08);
    let asphalt = jitter(rng, [0.3, 0.3, 0.32], 0.05);
    let curb = jitter(rng, [0.72, 0.7, 0.62], 0.05);
    let paint = jitter(rng, [0.95, 0.92, 0.75], 0.04);
    let dash_period = rng.random_range(1.2..2.0);
    let dash_phase: f64 = rng.random();

    let mut c = Canvas { n, image: vec![[0.0; 3]; n * n], mask: vec![0; n * n] };
    for y in 0..n {
        let yf = y as f64;
        let below = yf > road.horizon;
        let t = road.t(yf);
        for x in 0..n {
            let xf = x as f64;
            let (class, color) = if !below {
                let fade = (yf / road.horizon.max(1.0)) as f32 * 0.15;
                (Class::Background, sky.map(|v| v - fade))
            } else {
                let u = road.u(yf, xf).abs();
                let lane_w = 0.05;
                let dashed = ((1.0 / t.max(1e-3)) / dash_period + dash_phase).fract() < 0.5;
                if t > 0.08 && ((u < lane_w && dashed) || (u - 0.88).abs() < lane_w * 0.7) {
                    (Class::Lanemark, paint)
                } else if u <= 1.0 {
                    (Class::Road, asphalt)
                } else if u <= 1.1 {
                    (Class::Curb, curb)
                } else {
                    (Class::Background, ground)
                }
            };
            c.put(y, x, class, color);
        }
    }
    // a few building blocks on the skyline
    for _ in 0..rng.random_range(2..6) {
        let x0 = rng.random_range(0.0..nf);
        let w = rng.random_range(0.05..0.2) * nf;
        let h = rng.random_range(0.05..0.2) * nf;
        let col = jitter(rng, [0.5, 0.45, 0.42], 0.15);
        c.rect(road.horizon - h, road.horizon + 1.0, x0, x0 + w, Class::Background, col);
    }

    let mut things = Vec::new();
    for _ in 0..poisson(rng, cfg.vehicle_rate) {
        things.push(Thing::Vehicle);
    }
    for _ in 0..poisson(rng, cfg.person_rate) {
        things.push(Thing::Person);
    }
    if rng.random_bool(cfg.bicycle_prob) {
        things.push(Thing::Bicycle { rider: rng.random_bool(cfg.rider_prob) });
    }
    if rng.random_bool(cfg.motorcycle_prob) {
        things.push(Thing::Motorcycle { rider: rng.random_bool(cfg.rider_prob) });
    }
    if rng.random_bool(cfg.sign_prob) {
        things.push(Thing::Sign);
    }
    // ground contact points; far objects are drawn first
    let mut placed: Vec<(f64, f64, Thing)> = things
        .into_iter()
        .map(|thing| {
            let t: f64 = rng.random_range(0.25..0.95);
            let gy = road.horizon + t * (nf - 1.0 - road.horizon);
            let u: f64 = match thing {
                Thing::Vehicle => rng.random_range(-0.6..0.6),
                Thing::Sign => {
                    if rng.random_bool(0.5) {
                        rng.random_range(1.2..1.5)
                    } else {
                        -rng.random_range(1.2..1.5)
                    }
                }
                _ => {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    side * rng.random_range(0.5..1.4)
                }
            };
            (gy, road.vanish_x + u * road.half_width(gy), thing)
        })
        .collect();
    placed.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (gy, gx, thing) in placed {
        let s = road.t(gy) * nf;
        match thing {
            Thing::Vehicle => draw_vehicle(&mut c, rng, gx, gy, s),
            Thing::Person => draw_person(&mut c, rng, gx, gy, s, Class::Person),
            Thing::Bicycle { rider } => draw_two_wheeler(&mut c, rng, gx, gy, s, false, rider),
            Thing::Motorcycle { rider } => draw_two_wheeler(&mut c, rng, gx, gy, s, true, rider),
            Thing::Sign => draw_sign(&mut c, rng, gx, gy, s),
        }
    }

    let noise = cfg.noise;
    for px in &mut c.image {
        for v in px.iter_mut() {
            let e = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            *v = (*v * light + e).clamp(0.0, 1.0);
        }
    }
    c
}

/// Renders one scene and its fisheye view. Deterministic in `seed`.
pub fn render_scene(
    cam: &FisheyeCameraModel,
    seed: u64,
    size: usize,
    cfg: &SceneConfig,
) -> Result<(SegmentationSample, RenderedScene)> {
    cam.validate()?;
    if size < 8 {
        return Err(Error::config(format!("scene size must be at least 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * size;
    let canvas = render_canvas(n, &mut rng, cfg);
    let scene = RenderedScene {
        size: n,
        image: canvas.image,
        mask: canvas.mask,
        focal: n as f64 / 2.0 / cam.max_theta.tan(),
    };
    let plane = size * size;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![Class::Background.id(); plane];
    for y in 0..size {
        for x in 0..size {
            let Some((sy, sx)) = scene.source_point(cam, y as f64, x as f64) else {
                continue;
            };
            let p = y * size + x;
            mask[p] = scene.nearest_class(sy, sx);
            let rgb = scene.bilinear(sy, sx);
            for (k, v) in rgb.into_iter().enumerate() {
                image[k * plane + p] = v;
            }
        }
    }
    let sample =
        SegmentationSample::new(Tensor::new(vec![3, size, size], image)?, mask, ViewTag::Syn, format!("{seed:016x}"))?;
    Ok((sample, scene))
}

/// One synthetic fisheye sample with the default scene mix.
pub fn generate_scene(cam: &FisheyeCameraModel, seed: u64, size: usize) -> Result<SegmentationSample> {
    Ok(render_scene(cam, seed, size, &SceneConfig::default())?.0)
}

/// `n` independent scenes with ids `00000…`, all tagged `SYN`.
pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    let cam = FisheyeCameraModel::for_size(size);
    (0..n)
        .map(|i| {
            let mut s = generate_scene(&cam, derive_seed(seed, i as u64), size)?;
            s.id = format!("{i:05}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_CLASSES;

    #[test]
    fn axis_ray_hits_centre() {
        let cam = FisheyeCameraModel::for_size(64);
        for phi in [0.0, 1.0, -2.5] {
            assert_eq!(cam.project(0.0, phi), cam.center);
        }
        let (y, x) = cam.project(0.4, 0.7);
        let (t, p) = cam.unproject(y, x).unwrap();
        assert!((t - 0.4).abs() < 1e-12 && (p - 0.7).abs() < 1e-12);
        assert!(cam.unproject(0.0, 0.0).is_none());
    }

    #[test]
    fn contract_and_determinism() {
        let cam = FisheyeCameraModel::for_size(32);
        let a = generate_scene(&cam, 9, 32).unwrap();
        let b = generate_scene(&cam, 9, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.shape(), &[3, 32, 32]);
        assert_eq!(a.mask.len(), 32 * 32);
        assert!(a.mask.iter().all(|&m| (m as usize) < NUM_CLASSES));
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // corners lie outside the image circle
        assert_eq!(a.mask[0], 0);
        assert_eq!(a.image.data()[0], 0.0);
        assert_ne!(generate_scene(&cam, 10, 32).unwrap(), a);
    }

    #[test]
    fn warp_matches_nearest_source_pixel() {
        let cam = FisheyeCameraModel::for_size(48);
        let (sample, scene) = render_scene(&cam, 4, 48, &SceneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (y, x) = (rng.random_range(0..48), rng.random_range(0..48));
            let expect = scene
                .source_point(&cam, y as f64, x as f64)
                .map_or(0, |(sy, sx)| scene.nearest_class(sy, sx));
            assert_eq!(sample.mask[y * 48 + x], expect);
        }
    }

    #[test]
    fn rejects_bad_camera() {
        let mut cam = FisheyeCameraModel::for_size(16);
        cam.focal = -1.0;
        assert!(generate_scene(&cam, 0, 16).is_err());
    }
}
