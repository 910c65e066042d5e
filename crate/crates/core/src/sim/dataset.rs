//! Motion datasets: random-controller collection and the OODS file format.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{roll_motion, ActionSequence, CarState, Dynamics, Labels, HORIZON, MAX_STEER_DEG};
use super::render::{render_observation, Camera, Observation};
use super::world::WorldSpec;
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const DATASET_MAGIC: &[u8; 4] = b"OODS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub observation: Observation,
    /// Steering angles in degrees.
    pub actions: ActionSequence,
    pub labels: Labels,
    pub episode: u32,
    pub step: u32,
}

impl Motion {
    pub fn would_crash(&self) -> bool {
        self.labels.iter().any(|&l| l == 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub motions: Vec<Motion>,
}

impl Dataset {
    pub fn empty(camera: &Camera) -> Self {
        Dataset {
            width: camera.width,
            height: camera.height,
            motions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    /// Fraction of motions containing a collision.
    pub fn base_rate(&self) -> f64 {
        if self.motions.is_empty() {
            return 0.0;
        }
        self.motions.iter().filter(|m| m.would_crash()).count() as f64 / self.len() as f64
    }

    /// Concatenates datasets, renumbering episodes so they stay unique.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::Contract("concat of zero datasets".into()))?;
        for d in iter {
            if (d.width, d.height) != (out.width, out.height) {
                return Err(Error::Dimension("datasets with different image dims".into()));
            }
            let offset = out.motions.iter().map(|m| m.episode + 1).max().unwrap_or(0);
            out.motions.extend(d.motions.into_iter().map(|mut m| {
                m.episode += offset;
                m
            }));
        }
        Ok(out)
    }

    /// Splits off every `k`-th episode (episode % k == k-1) as a held-out part.
    pub fn split_by_episode(&self, k: u32) -> (Dataset, Dataset) {
        let mut a = Dataset {
            width: self.width,
            height: self.height,
            motions: Vec::new(),
        };
        let mut b = a.clone();
        for m in &self.motions {
            if k > 0 && m.episode % k == k - 1 {
                b.motions.push(m.clone());
            } else {
                a.motions.push(m.clone());
            }
        }
        (a, b)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        let header = [
            DATASET_VERSION,
            self.motions.len() as u32,
            Observation::CHANNELS as u32,
            self.height as u32,
            self.width as u32,
            HORIZON as u32,
        ];
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for m in &self.motions {
            w.write_all(&m.observation.pixels)?;
            for a in m.actions {
                w.write_all(&a.to_le_bytes())?;
            }
            w.write_all(&m.labels)?;
            w.write_all(&m.episode.to_le_bytes())?;
            w.write_all(&m.step.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let mut u32s = [0u32; 6];
        for v in u32s.iter_mut() {
            *v = read_u32(&mut r)?;
        }
        let [version, count, c, h, w, horizon] = u32s;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        if c as usize != Observation::CHANNELS || horizon as usize != HORIZON {
            return Err(Error::Format(format!(
                "dataset has {c} channels and horizon {horizon}; expected 3 and {HORIZON}"
            )));
        }
        let (w, h) = (w as usize, h as usize);
        let mut motions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut px = vec![0u8; 3 * w * h];
            r.read_exact(&mut px)?;
            let mut actions = [0f32; HORIZON];
            for a in actions.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *a = f32::from_le_bytes(b);
            }
            let mut labels = [0u8; HORIZON];
            r.read_exact(&mut labels)?;
            let episode = read_u32(&mut r)?;
            let step = read_u32(&mut r)?;
            motions.push(Motion {
                observation: Observation::new(w, h, px)?,
                actions,
                labels,
                episode,
                step,
            });
        }
        Ok(Dataset {
            width: w,
            height: h,
            motions,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::MissingArtifact(format!("dataset {}: {e}", path.display()))
        })?;
        Dataset::read(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Controller {
    /// Steps each sampled steering angle is held for.
    pub hold: usize,
    /// Motions per episode before a timeout reset.
    pub max_motions: usize,
    /// Extra clearance beyond the car radius when sampling start poses.
    pub start_clearance: f64,
}

impl Default for Controller {
    fn default() -> Self {
        Controller {
            hold: 4,
            max_motions: 8,
            start_clearance: 0.25,
        }
    }
}

const START_ATTEMPTS: usize = 10_000;

fn sample_start<R: Rng>(world: &WorldSpec, rng: &mut R, clearance: f64, speed: f64) -> Result<CarState> {
    let (lo, hi) = world.bounds();
    for _ in 0..START_ATTEMPTS {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        if world.is_free(p, clearance) {
            return Ok(CarState {
                position: p,
                heading,
                speed,
            });
        }
    }
    Err(Error::Placement(format!(
        "no free start pose found in world {} after {START_ATTEMPTS} attempts",
        world.id
    )))
}

fn sample_actions<R: Rng>(rng: &mut R, hold: usize) -> ActionSequence {
    let mut a = [0f32; HORIZON];
    let hold = hold.max(1);
    let mut current = 0.0f32;
    for (t, slot) in a.iter_mut().enumerate() {
        if t % hold == 0 {
            current = rng.gen_range(-MAX_STEER_DEG as f32..=MAX_STEER_DEG as f32);
        }
        *slot = current;
    }
    a
}

/// Collects `n_motions` consecutive, non-overlapping 16-step windows driven by
/// the random controller. Episodes restart after a collision or timeout.
pub fn collect_dataset(
    world: &WorldSpec,
    n_motions: usize,
    camera: &Camera,
    dynamics: &Dynamics,
    controller: &Controller,
    seed: u64,
) -> Result<Dataset> {
    world.validate()?;
    camera.validate()?;
    dynamics.validate()?;
    let mut out = Dataset::empty(camera);
    if n_motions == 0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, "collect", &[]);
    let segments = world.segments();
    let clearance = dynamics.radius + controller.start_clearance;
    let mut episode = 0u32;
    let mut car = sample_start(world, &mut rng, clearance, dynamics.speed)?;
    let mut step = 0u32;
    while out.motions.len() < n_motions {
        let observation = render_observation(world, &car, camera)?;
        let actions = sample_actions(&mut rng, controller.hold);
        let (labels, next) = roll_motion(&segments, &car, &actions, dynamics)?;
        let crashed = labels[HORIZON - 1] == 1;
        out.motions.push(Motion {
            observation,
            actions,
            labels,
            episode,
            step,
        });
        step += 1;
        if crashed || step as usize >= controller.max_motions || !world.is_free(next.position, dynamics.radius) {
            episode += 1;
            step = 0;
            car = sample_start(world, &mut rng, clearance, dynamics.speed)?;
        } else {
            car = next;
        }
    }
    log::info!(
        "collected {} motions in world {} (collision rate {:.3})",
        out.len(),
        world.id,
        out.base_rate()
    );
    Ok(out)
}
