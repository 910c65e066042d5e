//! Corridor simulator: worlds, rendering, dynamics, datasets and shifts.

mod dataset;
mod dynamics;
mod render;
mod shift;
mod world;

pub use dataset::{collect_dataset, Controller, Dataset, Motion, DATASET_MAGIC, DATASET_VERSION};
pub use dynamics::{
    roll_motion, step_dynamics, swept_collision, true_ttc, ActionSequence, CarState, Dynamics, Labels,
    HORIZON, MAX_STEER_DEG,
};
pub use render::{cast_columns, ray_segment, render_observation, Camera, Hit, Observation, CAMERA_HEIGHT, WALL_HEIGHT};
pub use shift::{make_shifted_world, ShiftKind, CONE_RADIUS, CONE_TEXTURE};
pub use world::{
    point_in_polygon, point_segment_distance, polygon_area, segment_segment_distance, Object, Palette,
    Pattern, Point, Rgb, Segment, Shape, WorldSpec,
};

use crate::error::{Error, Result};

fn stripes(a: Rgb, b: Rgb, period: f64) -> Pattern {
    Pattern::Stripes { a, b, period }
}

fn checker(a: Rgb, b: Rgb, period: f64) -> Pattern {
    Pattern::Checker { a, b, period }
}

fn solid(color: Rgb) -> Pattern {
    Pattern::Solid { color }
}

/// Named palettes for the built-in corridor. `train-a/b/c` are the training
/// looks; `heldout` is never seen in training.
pub fn builtin_palette(name: &str) -> Result<Palette> {
    let entries: Vec<(&str, Pattern)> = match name {
        "train-a" => vec![
            ("wall", stripes([190, 190, 180], [150, 150, 140], 0.5)),
            ("block", stripes([120, 130, 160], [90, 100, 130], 0.5)),
            ("crate", checker([150, 100, 50], [110, 70, 30], 0.25)),
            ("floor", checker([90, 80, 70], [70, 60, 50], 1.0)),
            ("ceiling", solid([210, 220, 235])),
        ],
        "train-b" => vec![
            ("wall", stripes([200, 180, 150], [170, 150, 120], 0.4)),
            ("block", stripes([110, 150, 120], [80, 120, 90], 0.4)),
            ("crate", checker([160, 110, 60], [120, 80, 40], 0.3)),
            ("floor", checker([80, 90, 80], [60, 70, 60], 0.8)),
            ("ceiling", solid([225, 225, 215])),
        ],
        "train-c" => vec![
            ("wall", stripes([170, 185, 200], [140, 155, 170], 0.6)),
            ("block", stripes([150, 120, 140], [120, 90, 110], 0.6)),
            ("crate", checker([140, 95, 55], [100, 65, 35], 0.2)),
            ("floor", checker([85, 85, 95], [65, 65, 75], 1.2)),
            ("ceiling", solid([205, 215, 220])),
        ],
        "heldout" => vec![
            ("wall", checker([200, 150, 150], [160, 110, 110], 0.5)),
            ("block", checker([150, 150, 100], [120, 120, 70], 0.5)),
            ("crate", stripes([90, 120, 160], [60, 90, 130], 0.15)),
            ("floor", checker([100, 75, 95], [75, 55, 70], 0.6)),
            ("ceiling", solid([235, 225, 190])),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown palette {other:?} (expected train-a, train-b, train-c or heldout)"
            )))
        }
    };
    Ok(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// A 20 m × 13 m room with a central block, forming a loop corridor, plus crates.
pub fn corridor_world(id: &str, palette: Palette) -> Result<WorldSpec> {
    let crate_box = |center: Point, angle: f64| Object {
        shape: Shape::Box {
            center,
            half: [0.4, 0.4],
            angle,
        },
        texture: "crate".into(),
    };
    let w = WorldSpec {
        id: id.into(),
        boundary: vec![[0.0, 0.0], [20.0, 0.0], [20.0, 13.0], [0.0, 13.0]],
        boundary_texture: "wall".into(),
        walls: vec![],
        objects: vec![
            Object {
                shape: Shape::Box {
                    center: [10.0, 6.5],
                    half: [5.5, 2.2],
                    angle: 0.0,
                },
                texture: "block".into(),
            },
            crate_box([2.5, 2.5], 0.3),
            crate_box([10.0, 2.2], 0.0),
            crate_box([17.7, 3.0], 0.7),
            crate_box([17.8, 11.0], 0.1),
            crate_box([10.0, 11.1], 0.5),
            crate_box([2.5, 10.5], 0.9),
        ],
        floor: "floor".into(),
        ceiling: "ceiling".into(),
        palette,
        cone_sites: vec![
            [6.0, 2.4],
            [14.5, 11.0],
            [2.5, 6.5],
            [17.8, 6.5],
            [6.8, 10.5],
            [14.0, 3.0],
        ],
    };
    w.validate()?;
    Ok(w)
}

/// Built-in world ids: `train-1..3`, `test-texture`, `test-cones`, `test-rearranged`.
pub fn builtin_world(id: &str) -> Result<WorldSpec> {
    let base = |p: &str| corridor_world(id, builtin_palette(p)?);
    match id {
        "train-1" => base("train-a"),
        "train-2" => base("train-b"),
        "train-3" => base("train-c"),
        "test-texture" => make_shifted_world(
            &base("train-a")?,
            ShiftKind::TextureSwap,
            &builtin_palette("heldout")?,
            0,
            id,
        ),
        "test-cones" => make_shifted_world(&base("train-a")?, ShiftKind::AddCones, &Palette::new(), 0, id),
        "test-rearranged" => make_shifted_world(&base("train-a")?, ShiftKind::Rearrange, &Palette::new(), 1, id),
        other => Err(Error::Config(format!("unknown world id {other:?}"))),
    }
}
