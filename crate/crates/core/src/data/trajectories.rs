//! Synthetic agent tracks around a crossing.
//!
//! Agents start on a circle of radius `arena`, head for the centre and move
//! at constant velocity. On entering the crossing disc an agent turns left
//! or right by a quarter turn with a city-specific probability; on leaving
//! the arena it turns back toward the centre. Between events positions are
//! exactly linear in time.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::city_name;
use super::CitySeries;
use crate::error::{Error, Result};
use crate::params::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub cities: usize,
    pub agents: usize,
    pub steps: usize,
    /// Mean speed in world units per step.
    pub speed: f64,
    /// Per-city speeds are `speed * (1 + s * U(-1, 1))`.
    pub speed_heterogeneity: f64,
    /// Probability of turning on entering the crossing.
    pub turn_prob: f64,
    pub crossing_radius: f64,
    pub arena: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            cities: 2,
            agents: 16,
            steps: 200,
            speed: 1.0,
            speed_heterogeneity: 0.3,
            turn_prob: 0.5,
            crossing_radius: 5.0,
            arena: 30.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.cities == 0 || self.agents == 0 || self.steps < 2 {
            return Err(Error::config(
                "trajectory spec needs cities, agents >= 1 and steps >= 2",
            ));
        }
        if !(self.speed > 0.0) || !(0.0..1.0).contains(&self.speed_heterogeneity) {
            return Err(Error::config(
                "speed must be positive and speed_heterogeneity in [0, 1)",
            ));
        }
        if !(0.0..=1.0).contains(&self.turn_prob) {
            return Err(Error::config("turn_prob must lie in [0, 1]"));
        }
        if !(self.crossing_radius > 0.0 && self.arena > self.crossing_radius) {
            return Err(Error::config("need 0 < crossing_radius < arena"));
        }
        Ok(())
    }
}

fn norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

/// Returns one series per city with values `[steps, agents, 2]`.
pub fn generate_synthetic_trajectories(spec: &TrajectorySpec) -> Result<Vec<CitySeries>> {
    spec.validate()?;
    let (a, t_len) = (spec.agents, spec.steps);
    (0..spec.cities)
        .map(|c| {
            let mut rng = stream(spec.seed, &format!("trajectories/city/{c}"));
            let city_speed =
                spec.speed * (1.0 + spec.speed_heterogeneity * rng.random_range(-1.0..=1.0));
            let left_prob: f64 = rng.random_range(0.0..=1.0);
            let mut values = vec![0.0; t_len * a * 2];
            for agent in 0..a {
                let angle = rng.random_range(0.0..TAU);
                let speed = city_speed * (1.0 + 0.1 * rng.random_range(-1.0..=1.0));
                let mut anchor = [spec.arena * angle.cos(), spec.arena * angle.sin()];
                let mut anchor_t = 0usize;
                let mut heading = angle + std::f64::consts::PI;
                let mut inside = false;
                for t in 0..t_len {
                    let dt = (t - anchor_t) as f64;
                    let mut p = [
                        anchor[0] + dt * speed * heading.cos(),
                        anchor[1] + dt * speed * heading.sin(),
                    ];
                    let r = norm(p);
                    let entering = r < spec.crossing_radius && !inside;
                    inside = r < spec.crossing_radius;
                    if entering && rng.random_bool(spec.turn_prob) {
                        let sign = if rng.random_bool(left_prob) {
                            1.0
                        } else {
                            -1.0
                        };
                        heading += sign * FRAC_PI_2;
                        anchor = p;
                        anchor_t = t;
                    } else if r > spec.arena && t > anchor_t {
                        // turn back toward the centre with a small offset
                        heading =
                            p[1].atan2(p[0]) + std::f64::consts::PI + rng.random_range(-0.3..0.3);
                        anchor = p;
                        anchor_t = t;
                    }
                    p = [
                        anchor[0] + (t - anchor_t) as f64 * speed * heading.cos(),
                        anchor[1] + (t - anchor_t) as f64 * speed * heading.sin(),
                    ];
                    let k = (t * a + agent) * 2;
                    values[k] = p[0];
                    values[k + 1] = p[1];
                }
            }
            let mut s = CitySeries::new(c, &city_name(c), Tensor::new(vec![t_len, a, 2], values)?)?;
            s.node_ids = (0..a).map(|i| format!("agent{i}")).collect();
            Ok(s)
        })
        .collect()
}
