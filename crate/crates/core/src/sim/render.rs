//! Column raycaster: one ray per image column, textured walls, floor and ceiling casting.

use serde::{Deserialize, Serialize};

use super::dynamics::CarState;
use super::world::{Point, Segment, WorldSpec};
use crate::error::{Error, Result};

/// Wall height in meters; the camera sits halfway up.
pub const WALL_HEIGHT: f64 = 1.0;
pub const CAMERA_HEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            width: 32,
            height: 18,
            fov: 80f64.to_radians(),
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > 64 || self.height > 36 {
            return Err(Error::Config(format!(
                "image dims {}x{} outside 1..=64 x 1..=36",
                self.width, self.height
            )));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::Config(format!("fov {} must be in (0, pi)", self.fov)));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        self.width as f64 / 2.0 / (self.fov / 2.0).tan()
    }

    /// Camera-plane offset of column `x`: the ray direction is `forward + k·right`.
    pub fn column_offset(&self, x: usize) -> f64 {
        ((x as f64 + 0.5) - self.width as f64 / 2.0) / self.focal()
    }
}

/// RGB image stored channel-major `[3, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Observation {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != Self::CHANNELS * width * height {
            return Err(Error::Dimension(format!(
                "{} pixel bytes for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Observation {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.pixels[i], self.pixels[plane + i], self.pixels[2 * plane + i]]
    }

    /// Pixels scaled to `[0, 1]`, channel-major.
    pub fn to_floats(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn from_floats(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        let px = data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Observation::new(width, height, px)
    }
}

/// Nearest wall hit along one column's ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    /// Distance along the forward axis (no fisheye).
    pub depth: f64,
    pub segment: usize,
    /// Distance from the segment's first endpoint, meters.
    pub along: f64,
}

/// Ray `origin + t·dir` against segment `ab`; returns `(t, s)` with `s` the
/// fraction along the segment.
pub fn ray_segment(origin: Point, dir: Point, a: Point, b: Point) -> Option<(f64, f64)> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = dir[0] * e[1] - dir[1] * e[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = [a[0] - origin[0], a[1] - origin[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let s = (w[0] * dir[1] - w[1] * dir[0]) / denom;
    if t > 1e-9 && (0.0..=1.0).contains(&s) {
        Some((t, s))
    } else {
        None
    }
}

fn basis(car: &CarState) -> (Point, Point) {
    let (s, c) = car.heading.sin_cos();
    ([c, s], [-s, c])
}

/// Nearest hit per column; `None` only for rays that escape (impossible in a closed world).
pub fn cast_columns(segments: &[Segment], car: &CarState, camera: &Camera) -> Vec<Option<Hit>> {
    let (fwd, right) = basis(car);
    (0..camera.width)
        .map(|x| {
            // Image x grows to the right, which is clockwise: negate the left normal.
            let k = camera.column_offset(x);
            let dir = [fwd[0] - k * right[0], fwd[1] - k * right[1]];
            let mut best: Option<Hit> = None;
            for (i, seg) in segments.iter().enumerate() {
                if let Some((t, s)) = ray_segment(car.position, dir, seg.a, seg.b) {
                    if best.as_ref().map_or(true, |h| t < h.depth) {
                        let len = ((seg.b[0] - seg.a[0]).powi(2) + (seg.b[1] - seg.a[1]).powi(2)).sqrt();
                        best = Some(Hit {
                            depth: t,
                            segment: i,
                            along: s * len,
                        });
                    }
                }
            }
            best
        })
        .collect()
}

/// Renders the car's front camera view.
pub fn render_observation(world: &WorldSpec, car: &CarState, camera: &Camera) -> Result<Observation> {
    camera.validate()?;
    if !world.is_free(car.position, 0.0) {
        return Err(Error::Placement(format!(
            "camera at ({:.3}, {:.3}) is outside free space of world {}",
            car.position[0], car.position[1], world.id
        )));
    }
    let segments = world.segments();
    let hits = cast_columns(&segments, car, camera);
    let (w, h) = (camera.width, camera.height);
    let plane = w * h;
    let mut px = vec![0u8; 3 * plane];
    let f = camera.focal();
    let (fwd, right) = basis(car);
    let floor = world.texture(&world.floor);
    let ceiling = world.texture(&world.ceiling);
    for (x, hit) in hits.iter().enumerate() {
        let hit = hit.as_ref().ok_or_else(|| {
            Error::Placement(format!("ray escaped world {} (boundary not closed)", world.id))
        })?;
        let seg = &segments[hit.segment];
        let tex = world.texture(&seg.texture);
        let k = camera.column_offset(x);
        let dir = [fwd[0] - k * right[0], fwd[1] - k * right[1]];
        for y in 0..h {
            // Positive v is below the horizon.
            let v = (y as f64 + 0.5) - h as f64 / 2.0;
            let z = CAMERA_HEIGHT - v * hit.depth / f;
            let rgb = if (0.0..=WALL_HEIGHT).contains(&z) {
                tex.color_at(hit.along, z)
            } else if v > 0.0 {
                let d = CAMERA_HEIGHT * f / v;
                let p = [car.position[0] + d * dir[0], car.position[1] + d * dir[1]];
                floor.color_at(p[0], p[1])
            } else {
                let d = (WALL_HEIGHT - CAMERA_HEIGHT) * f / -v;
                let p = [car.position[0] + d * dir[0], car.position[1] + d * dir[1]];
                ceiling.color_at(p[0], p[1])
            };
            let i = y * w + x;
            px[i] = rgb[0];
            px[plane + i] = rgb[1];
            px[2 * plane + i] = rgb[2];
        }
    }
    Observation::new(w, h, px)
}
