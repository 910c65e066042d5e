//! Planar world geometry and textures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];
pub type Rgb = [u8; 3];

/// Texture pattern evaluated at surface coordinates `(u, v)` in meters.
/// Walls use `u` along the segment and `v` as height; floors and ceilings use
/// world `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "kebab-case")]
pub enum Pattern {
    Solid { color: Rgb },
    /// Alternating bands along `u`.
    Stripes { a: Rgb, b: Rgb, period: f64 },
    /// Alternating bands along `v`.
    Bands { a: Rgb, b: Rgb, period: f64 },
    Checker { a: Rgb, b: Rgb, period: f64 },
}

impl Pattern {
    pub fn color_at(&self, u: f64, v: f64) -> Rgb {
        let phase = |x: f64, period: f64| ((x / period).floor() as i64).rem_euclid(2) == 0;
        match *self {
            Pattern::Solid { color } => color,
            Pattern::Stripes { a, b, period } => {
                if phase(u, period) {
                    a
                } else {
                    b
                }
            }
            Pattern::Bands { a, b, period } => {
                if phase(v, period) {
                    a
                } else {
                    b
                }
            }
            Pattern::Checker { a, b, period } => {
                if phase(u, period) == phase(v, period) {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Pattern::Solid { .. } => Ok(()),
            Pattern::Stripes { period, .. }
            | Pattern::Bands { period, .. }
            | Pattern::Checker { period, .. } => {
                if period > 0.0 && period.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("pattern period {period} must be positive")))
                }
            }
        }
    }
}

pub type Palette = BTreeMap<String, Pattern>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
    pub texture: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Oriented rectangle.
    Box {
        center: Point,
        half: [f64; 2],
        #[serde(default)]
        angle: f64,
    },
    /// Traffic cone footprint: an equilateral triangle inscribed in `radius`.
    Cone { center: Point, radius: f64 },
}

impl Shape {
    pub fn center(&self) -> Point {
        match *self {
            Shape::Box { center, .. } | Shape::Cone { center, .. } => center,
        }
    }

    pub fn with_center(&self, center: Point) -> Shape {
        let mut s = self.clone();
        match &mut s {
            Shape::Box { center: c, .. } | Shape::Cone { center: c, .. } => *c = center,
        }
        s
    }

    /// Polygon vertices in counter-clockwise order.
    pub fn vertices(&self) -> Vec<Point> {
        match *self {
            Shape::Box { center, half, angle } => {
                let (s, c) = angle.sin_cos();
                [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                    .iter()
                    .map(|&(sx, sy)| {
                        let (dx, dy) = (sx * half[0], sy * half[1]);
                        [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
                    })
                    .collect()
            }
            Shape::Cone { center, radius } => (0..3)
                .map(|k| {
                    let t = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    #[serde(flatten)]
    pub shape: Shape,
    pub texture: String,
}

/// A closed planar world with textured vertical surfaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub id: String,
    /// Outer boundary polygon; its edges are walls.
    pub boundary: Vec<Point>,
    pub boundary_texture: String,
    #[serde(default)]
    pub walls: Vec<Segment>,
    #[serde(default)]
    pub objects: Vec<Object>,
    pub floor: String,
    pub ceiling: String,
    pub palette: Palette,
    /// Candidate positions for inserted obstacles.
    #[serde(default)]
    pub cone_sites: Vec<Point>,
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let w: WorldSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("world spec: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("world spec: {e}")))
    }

    /// Every vertical surface as a segment: boundary edges, interior walls, object edges.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let n = self.boundary.len();
        for i in 0..n {
            out.push(Segment {
                a: self.boundary[i],
                b: self.boundary[(i + 1) % n],
                texture: self.boundary_texture.clone(),
            });
        }
        out.extend(self.walls.iter().cloned());
        for o in &self.objects {
            let v = o.shape.vertices();
            for i in 0..v.len() {
                out.push(Segment {
                    a: v[i],
                    b: v[(i + 1) % v.len()],
                    texture: o.texture.clone(),
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundary.len() < 3 {
            return Err(Error::Config(format!(
                "world {}: boundary needs at least 3 vertices",
                self.id
            )));
        }
        if polygon_area(&self.boundary).abs() < 1e-9 {
            return Err(Error::Config(format!("world {}: degenerate boundary", self.id)));
        }
        let mut ids = vec![&self.boundary_texture, &self.floor, &self.ceiling];
        ids.extend(self.walls.iter().map(|w| &w.texture));
        ids.extend(self.objects.iter().map(|o| &o.texture));
        for id in ids {
            let p = self.palette.get(id).ok_or_else(|| {
                Error::Config(format!("world {}: texture {id} not in palette", self.id))
            })?;
            p.validate()?;
        }
        Ok(())
    }

    pub fn texture(&self, id: &str) -> &Pattern {
        &self.palette[id]
    }

    /// True when a disc of `radius` at `p` lies inside the boundary, outside
    /// every object, and clear of every segment.
    pub fn is_free(&self, p: Point, radius: f64) -> bool {
        if !point_in_polygon(p, &self.boundary) {
            return false;
        }
        if self
            .objects
            .iter()
            .any(|o| point_in_polygon(p, &o.shape.vertices()))
        {
            return false;
        }
        self.segments()
            .iter()
            .all(|s| point_segment_distance(p, s.a, s.b) > radius)
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.boundary {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Free-space area (square meters) by grid counting at `cell` resolution.
    pub fn free_area(&self, cell: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let segs = self.segments();
        let polys: Vec<Vec<Point>> = self.objects.iter().map(|o| o.shape.vertices()).collect();
        let mut count = 0usize;
        let nx = ((hi[0] - lo[0]) / cell).ceil() as usize;
        let ny = ((hi[1] - lo[1]) / cell).ceil() as usize;
        for i in 0..nx {
            for j in 0..ny {
                let p = [lo[0] + (i as f64 + 0.5) * cell, lo[1] + (j as f64 + 0.5) * cell];
                if point_in_polygon(p, &self.boundary)
                    && !polys.iter().any(|v| point_in_polygon(p, v))
                    && segs.iter().all(|s| point_segment_distance(p, s.a, s.b) > 0.0)
                {
                    count += 1;
                }
            }
        }
        count as f64 * cell * cell
    }
}

pub fn polygon_area(v: &[Point]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

pub fn point_in_polygon(p: Point, v: &[Point]) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Minimum distance between segments `p1p2` and `q1q2`.
pub fn segment_segment_distance(p1: Point, p2: Point, q1: Point, q2: Point) -> f64 {
    if segments_intersect(p1, p2, q1, q2) {
        return 0.0;
    }
    point_segment_distance(p1, q1, q2)
        .min(point_segment_distance(p2, q1, q2))
        .min(point_segment_distance(q1, p1, p2))
        .min(point_segment_distance(q2, p1, p2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_alternate() {
        let s = Pattern::Stripes {
            a: [1, 1, 1],
            b: [2, 2, 2],
            period: 0.5,
        };
        assert_eq!(s.color_at(0.1, 9.0), [1, 1, 1]);
        assert_eq!(s.color_at(0.6, 9.0), [2, 2, 2]);
        assert_eq!(s.color_at(-0.1, 0.0), [2, 2, 2]);
        let c = Pattern::Checker {
            a: [1, 1, 1],
            b: [2, 2, 2],
            period: 1.0,
        };
        assert_eq!(c.color_at(0.5, 0.5), [1, 1, 1]);
        assert_eq!(c.color_at(1.5, 0.5), [2, 2, 2]);
        assert_eq!(c.color_at(1.5, 1.5), [1, 1, 1]);
    }

    #[test]
    fn distances() {
        assert!((point_segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((point_segment_distance([3.0, 0.0], [-1.0, 0.0], [1.0, 0.0]) - 2.0).abs() < 1e-12);
        assert_eq!(
            segment_segment_distance([0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]),
            0.0
        );
        let d = segment_segment_distance([0.0, 0.5], [0.0, 2.0], [-1.0, 0.0], [1.0, 0.0]);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cone_is_triangle_inside_radius() {
        let s = Shape::Cone {
            center: [1.0, 2.0],
            radius: 0.3,
        };
        let v = s.vertices();
        assert_eq!(v.len(), 3);
        for p in v {
            let r = ((p[0] - 1.0).powi(2) + (p[1] - 2.0).powi(2)).sqrt();
            assert!((r - 0.3).abs() < 1e-12);
        }
    }
}
