//! Fixed-speed unicycle dynamics and motion rollouts.

use serde::{Deserialize, Serialize};

use super::world::{segment_segment_distance, Point, Segment};
use crate::error::{Error, Result};

pub const HORIZON: usize = 16;
pub const MAX_STEER_DEG: f64 = 30.0;

pub type ActionSequence = [f32; HORIZON];
pub type Labels = [u8; HORIZON];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dynamics {
    pub dt: f64,
    pub speed: f64,
    /// Heading rate per radian of steering.
    pub turn_gain: f64,
    /// Collision disc radius, meters.
    pub radius: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            dt: 0.125,
            speed: 1.0,
            turn_gain: 2.0,
            radius: 0.15,
        }
    }
}

impl Dynamics {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.dt) && ok(self.speed) && ok(self.turn_gain))
            || !(self.radius.is_finite() && self.radius >= 0.0)
        {
            return Err(Error::Config(format!("invalid dynamics {self:?}")));
        }
        Ok(())
    }
}

/// One unicycle step: the heading turns first, then the car advances along it.
pub fn step_dynamics(car: &CarState, steering_deg: f64, dt: f64, turn_gain: f64) -> Result<CarState> {
    if !steering_deg.is_finite() || !dt.is_finite() || !car.heading.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite dynamics input: steering {steering_deg}, dt {dt}, heading {}",
            car.heading
        )));
    }
    let steer = if steering_deg.abs() > MAX_STEER_DEG {
        log::warn!("steering {steering_deg} deg clamped to +-{MAX_STEER_DEG}");
        steering_deg.clamp(-MAX_STEER_DEG, MAX_STEER_DEG)
    } else {
        steering_deg
    };
    let heading = car.heading + steer.to_radians() * dt * turn_gain;
    let (s, c) = heading.sin_cos();
    Ok(CarState {
        position: [
            car.position[0] + car.speed * dt * c,
            car.position[1] + car.speed * dt * s,
        ],
        heading,
        speed: car.speed,
    })
}

/// True when the disc swept from `from` to `to` touches any segment.
pub fn swept_collision(segments: &[Segment], from: Point, to: Point, radius: f64) -> bool {
    segments
        .iter()
        .any(|s| segment_segment_distance(from, to, s.a, s.b) <= radius)
}

/// Simulates one horizon of actions. Labels are absorbing: once the car's disc
/// has touched a surface, every later label is 1.
pub fn roll_motion(
    segments: &[Segment],
    car: &CarState,
    actions: &ActionSequence,
    dyn_cfg: &Dynamics,
) -> Result<(Labels, CarState)> {
    let mut labels = [0u8; HORIZON];
    let mut state = *car;
    let mut hit = false;
    for (t, &a) in actions.iter().enumerate() {
        let next = step_dynamics(&state, a as f64, dyn_cfg.dt, dyn_cfg.turn_gain)?;
        if !hit && swept_collision(segments, state.position, next.position, dyn_cfg.radius) {
            hit = true;
        }
        labels[t] = hit as u8;
        state = next;
    }
    Ok((labels, state))
}

/// Time to the first labelled collision, or `horizon + dt` when none occurs.
pub fn true_ttc(labels: &Labels, dt: f64) -> f64 {
    match labels.iter().position(|&l| l == 1) {
        Some(i) => dt * (i + 1) as f64,
        None => dt * (HORIZON + 1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car() -> CarState {
        CarState {
            position: [0.0, 0.0],
            heading: 0.3,
            speed: 1.0,
        }
    }

    #[test]
    fn straight_step() {
        let n = step_dynamics(&car(), 0.0, 0.125, 2.0).unwrap();
        let d = (n.position[0].powi(2) + n.position[1].powi(2)).sqrt();
        assert!((d - 0.125).abs() < 1e-12);
        assert_eq!(n.heading, 0.3);
    }

    #[test]
    fn oversteer_is_clamped() {
        let a = step_dynamics(&car(), 90.0, 0.125, 2.0).unwrap();
        let b = step_dynamics(&car(), 30.0, 0.125, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(step_dynamics(&car(), f64::NAN, 0.125, 2.0).is_err());
    }

    #[test]
    fn ttc_of_labels() {
        let mut l = [0u8; HORIZON];
        assert_eq!(true_ttc(&l, 0.125), 2.125);
        l[4..].fill(1);
        assert_eq!(true_ttc(&l, 0.125), 0.625);
    }
}
