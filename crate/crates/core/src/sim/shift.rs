//! Distribution shifts applied to a base world.

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::world::{Object, Palette, Pattern, Shape, WorldSpec};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const CONE_TEXTURE: &str = "cone";
pub const CONE_RADIUS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    TextureSwap,
    Rearrange,
    AddCones,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texture-swap" => Ok(ShiftKind::TextureSwap),
            "rearrange" => Ok(ShiftKind::Rearrange),
            "add-cones" => Ok(ShiftKind::AddCones),
            other => Err(Error::Config(format!(
                "unknown shift kind {other:?} (expected texture-swap, rearrange or add-cones)"
            ))),
        }
    }
}

fn default_cone() -> Pattern {
    Pattern::Bands {
        a: [255, 120, 0],
        b: [245, 245, 245],
        period: 0.2,
    }
}

/// Derives a shifted world.
///
/// * texture-swap keeps geometry and replaces every palette entry that `heldout` defines;
/// * rearrange permutes object positions with a seeded shuffle;
/// * add-cones inserts a cone at each of the base world's cone sites.
pub fn make_shifted_world(
    base: &WorldSpec,
    shift: ShiftKind,
    heldout: &Palette,
    seed: u64,
    id: &str,
) -> Result<WorldSpec> {
    let mut w = base.clone();
    w.id = id.to_string();
    match shift {
        ShiftKind::TextureSwap => {
            for (k, v) in w.palette.iter_mut() {
                if let Some(p) = heldout.get(k) {
                    *v = p.clone();
                }
            }
        }
        ShiftKind::Rearrange => {
            let mut centers: Vec<_> = w.objects.iter().map(|o| o.shape.center()).collect();
            centers.shuffle(&mut rng_for(seed, "rearrange", &[]));
            for (o, c) in w.objects.iter_mut().zip(centers) {
                o.shape = o.shape.with_center(c);
            }
        }
        ShiftKind::AddCones => {
            if w.cone_sites.is_empty() {
                return Err(Error::Config(format!("world {} defines no cone sites", base.id)));
            }
            for &site in &w.cone_sites {
                w.objects.push(Object {
                    shape: Shape::Cone {
                        center: site,
                        radius: CONE_RADIUS,
                    },
                    texture: CONE_TEXTURE.into(),
                });
            }
            let cone = heldout.get(CONE_TEXTURE).cloned().unwrap_or_else(default_cone);
            w.palette.insert(CONE_TEXTURE.into(), cone);
        }
    }
    w.validate()?;
    Ok(w)
}
