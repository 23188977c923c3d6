//! Seeded synthetic street scenes with ground-truth trajectories.
//!
//! The world is a corridor following the sensor path: a sparse ground plane, two
//! facades, parked boxes, poles and uniform clutter. Optional movers are boxes that
//! translate every frame. Each frame keeps the points inside a forward-looking radar
//! field of view, draws at most [`POINTS_PER_FRAME`] of them and adds Gaussian noise.

use super::preprocess::{preprocess, POINTS_PER_FRAME};
use super::PointCloud;
use crate::lie::{Pose, Rotation, Vec3};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Frame rate used to turn per-frame motion into Doppler velocities.
const FRAME_RATE_HZ: f64 = 10.0;
const SENSOR_HEIGHT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub frames: usize,
    /// Forward motion per frame (meters).
    pub step: f64,
    /// Heading change per frame (radians).
    pub yaw_rate: f64,
}

impl TrajectorySpec {
    pub fn straight(frames: usize, step: f64) -> Self {
        TrajectorySpec {
            frames,
            step,
            yaw_rate: 0.0,
        }
    }

    /// Sensor centers and headings in the world frame, one per frame.
    fn centers(&self, extra_before: usize, extra_after: usize) -> Vec<(Vec3, f64)> {
        let mut out = Vec::new();
        // Extend backwards along the initial heading so the scene behind frame 0 exists.
        for k in (1..=extra_before).rev() {
            out.push((Vec3::new(-(k as f64) * self.step.max(0.5), 0.0, SENSOR_HEIGHT), 0.0));
        }
        let mut c = Vec3::new(0.0, 0.0, SENSOR_HEIGHT);
        let mut heading = 0.0f64;
        for _ in 0..self.frames + extra_after {
            out.push((c, heading));
            let step = if out.len() > extra_before + self.frames {
                self.step.max(0.5)
            } else {
                self.step
            };
            c += Vec3::new(heading.cos(), heading.sin(), 0.0) * step;
            heading += self.yaw_rate;
        }
        out
    }

    /// World-to-sensor ground-truth poses.
    pub fn poses(&self) -> Vec<Pose> {
        self.centers(0, 0)
            .into_iter()
            .map(|(c, heading)| sensor_pose(&c, heading))
            .collect()
    }
}

fn sensor_pose(center: &Vec3, heading: f64) -> Pose {
    let world_from_sensor = Pose::new(
        Rotation::exp(&Vec3::new(0.0, 0.0, heading)),
        *center,
    );
    world_from_sensor.inverse()
}

/// Parameters of the generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub dynamic_fraction: f64,
    pub noise_sigma: f64,
    /// Lateral distance of the facades from the path (meters).
    pub street_half_width: f64,
    /// Facade points per meter of path, per side.
    pub facade_density: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Probability of a parked box every `box_spacing` meters on each side.
    pub box_probability: f64,
    pub box_spacing: f64,
    pub clutter_fraction: f64,
    pub max_range: f64,
    /// Half field of view in azimuth (radians).
    pub half_fov: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            dynamic_fraction: 0.0,
            noise_sigma: 0.0,
            street_half_width: 9.0,
            facade_density: 3.0,
            ground_density: 0.08,
            box_probability: 0.6,
            box_spacing: 4.0,
            clutter_fraction: 0.05,
            max_range: 40.0,
            half_fov: 60f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldPoint {
    pub position: [f64; 3],
    pub intensity: f64,
    /// Index into the scene's movers for dynamic points.
    pub mover: Option<usize>,
}

/// A generated world plus the trajectory observed inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub world_points: Vec<WorldPoint>,
    /// Per-frame world displacement of each mover.
    pub movers: Vec<[f64; 3]>,
    pub trajectory: Vec<Pose>,
    sensor_centers: Vec<Vec3>,
    pub dynamic_fraction: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    max_range: f64,
    half_fov: f64,
}

/// One synthetic observation with its world-to-sensor ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub pose: Pose,
}

fn add_box<R: Rng>(
    rng: &mut R,
    out: &mut Vec<WorldPoint>,
    center: Vec3,
    heading: f64,
    size: [f64; 3],
    points: usize,
    mover: Option<usize>,
) {
    let rot = Rotation::exp(&Vec3::new(0.0, 0.0, heading));
    let intensity = rng.random_range(5.0..30.0);
    for _ in 0..points {
        // Pick a vertical face or the roof, then a point on it.
        let face = rng.random_range(0..5);
        let u = rng.random_range(-0.5..0.5);
        let v = rng.random_range(-0.5..0.5);
        let local = match face {
            0 => Vec3::new(0.5 * size[0], u * size[1], (v + 0.5) * size[2]),
            1 => Vec3::new(-0.5 * size[0], u * size[1], (v + 0.5) * size[2]),
            2 => Vec3::new(u * size[0], 0.5 * size[1], (v + 0.5) * size[2]),
            3 => Vec3::new(u * size[0], -0.5 * size[1], (v + 0.5) * size[2]),
            _ => Vec3::new(u * size[0], v * size[1], size[2]),
        };
        let p = center + &rot * local;
        out.push(WorldPoint {
            position: [p.x, p.y, p.z],
            intensity: intensity + rng.random_range(-2.0..2.0),
            mover,
        });
    }
}

impl SyntheticScene {
    pub fn generate(spec: &SceneSpec, traj: &TrajectorySpec) -> SyntheticScene {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let look_ahead = (spec.max_range / spec.step_hint(traj)).ceil() as usize + 2;
        let behind = 6;
        let path = traj.centers(behind, look_ahead);
        let mut world = Vec::new();

        // Walk the path in ~1 m increments so density does not depend on the frame step.
        let mut samples: Vec<(Vec3, f64)> = Vec::new();
        for w in path.windows(2) {
            let (a, ha) = w[0];
            let (b, _) = w[1];
            let len = (b - a).norm();
            let n = len.ceil().max(1.0) as usize;
            for s in 0..n {
                let t = s as f64 / n as f64;
                samples.push((a + (b - a) * t, ha));
            }
        }
        if samples.is_empty() {
            // Stationary sensor: build a street around the origin.
            samples = (-10..(spec.max_range as i64 + 10))
                .map(|x| (Vec3::new(x as f64, 0.0, SENSOR_HEIGHT), 0.0))
                .collect();
        }

        let mut meters_since_box = [0.0f64; 2];
        for (c, heading) in &samples {
            let fwd = Vec3::new(heading.cos(), heading.sin(), 0.0);
            let left = Vec3::new(-heading.sin(), heading.cos(), 0.0);
            let ground = Vec3::new(c.x, c.y, 0.0);
            // Facades, slightly irregular.
            for (side, sign) in [1.0f64, -1.0].iter().enumerate() {
                let count = poisson_like(&mut rng, spec.facade_density);
                for _ in 0..count {
                    let along = rng.random_range(0.0..1.0);
                    let offset = spec.street_half_width + rng.random_range(-0.15..0.15);
                    let p = ground + fwd * along + left * (sign * offset)
                        + Vec3::new(0.0, 0.0, rng.random_range(0.2..6.0));
                    world.push(WorldPoint {
                        position: [p.x, p.y, p.z],
                        intensity: rng.random_range(10.0..20.0),
                        mover: None,
                    });
                }
                meters_since_box[side] += 1.0;
                if meters_since_box[side] >= spec.box_spacing {
                    meters_since_box[side] = 0.0;
                    if rng.random_bool(spec.box_probability) {
                        let lateral = sign * rng.random_range(2.5..spec.street_half_width - 1.5);
                        let center = ground + left * lateral + fwd * rng.random_range(0.0..2.0);
                        let size = [
                            rng.random_range(1.0..4.5),
                            rng.random_range(0.8..2.0),
                            rng.random_range(0.8..2.5),
                        ];
                        let yaw = heading + rng.random_range(-0.6..0.6);
                        let n = rng.random_range(15..40);
                        add_box(&mut rng, &mut world, center, yaw, size, n, None);
                    }
                    if rng.random_bool(0.3) {
                        // Pole.
                        let base = ground + left * (sign * (spec.street_half_width - 1.0));
                        for _ in 0..8 {
                            let z = rng.random_range(0.0..5.0);
                            world.push(WorldPoint {
                                position: [base.x, base.y, z],
                                intensity: 25.0,
                                mover: None,
                            });
                        }
                    }
                }
            }
            // Ground.
            let area = 2.0 * spec.street_half_width;
            for _ in 0..poisson_like(&mut rng, spec.ground_density * area) {
                let p = ground
                    + fwd * rng.random_range(0.0..1.0)
                    + left * rng.random_range(-spec.street_half_width..spec.street_half_width);
                world.push(WorldPoint {
                    position: [p.x, p.y, rng.random_range(-0.05..0.05)],
                    intensity: rng.random_range(1.0..5.0),
                    mover: None,
                });
            }
        }

        // Uniform clutter around the corridor.
        let structured = world.len();
        let clutter = (spec.clutter_fraction / (1.0 - spec.clutter_fraction) * structured as f64)
            .round() as usize;
        for _ in 0..clutter {
            let (c, heading) = samples[rng.random_range(0..samples.len())];
            let left = Vec3::new(-heading.sin(), heading.cos(), 0.0);
            let p = Vec3::new(c.x, c.y, 0.0)
                + left * rng.random_range(-15.0..15.0)
                + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)
                + Vec3::new(0.0, 0.0, rng.random_range(0.0..5.0));
            world.push(WorldPoint {
                position: [p.x, p.y, p.z],
                intensity: rng.random_range(0.0..40.0),
                mover: None,
            });
        }

        // Movers drive along the street ahead of the sensor.
        let mut movers = Vec::new();
        if spec.dynamic_fraction > 0.0 {
            let n_movers = 4;
            let span = samples.len().max(2);
            for m in 0..n_movers {
                let (c, heading) = samples[(span * (m + 1)) / (n_movers + 2)];
                let fwd = Vec3::new(heading.cos(), heading.sin(), 0.0);
                let left = Vec3::new(-heading.sin(), heading.cos(), 0.0);
                let lateral = if m % 2 == 0 { -2.5 } else { 2.5 };
                let speed = rng.random_range(0.3..0.9) * if m % 2 == 0 { -1.0 } else { 1.0 };
                let v = fwd * speed;
                movers.push([v.x, v.y, v.z]);
                let center = Vec3::new(c.x, c.y, 0.0) + left * lateral;
                add_box(&mut rng, &mut world, center, heading, [4.0, 1.8, 1.6], 150, Some(m));
            }
        }

        SyntheticScene {
            world_points: world,
            movers,
            trajectory: traj.poses(),
            sensor_centers: traj.centers(0, 0).into_iter().map(|c| c.0).collect(),
            dynamic_fraction: spec.dynamic_fraction,
            noise_sigma: spec.noise_sigma,
            rng_seed: spec.seed,
            max_range: spec.max_range,
            half_fov: spec.half_fov,
        }
    }

    fn world_position(&self, p: &WorldPoint, frame: usize) -> Vec3 {
        let base = Vec3::new(p.position[0], p.position[1], p.position[2]);
        match p.mover {
            Some(m) => base + Vec3::from(self.movers[m]) * frame as f64,
            None => base,
        }
    }

    fn sensor_velocity(&self, frame: usize) -> Vec3 {
        let n = self.sensor_centers.len();
        if n < 2 {
            return Vec3::zeros();
        }
        let (a, b) = if frame + 1 < n {
            (frame, frame + 1)
        } else {
            (n - 2, n - 1)
        };
        (self.sensor_centers[b] - self.sensor_centers[a]) * FRAME_RATE_HZ
    }

    /// Observation of frame `k` before the fixed-size preprocessing.
    fn observe(&self, k: usize) -> PointCloud {
        let pose = &self.trajectory[k];
        let center = self.sensor_centers[k];
        let v_sensor = self.sensor_velocity(k);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0x5eed_f4a3_0000_0000);
        rng.set_stream(k as u64 + 1);

        let mut static_vis = Vec::new();
        let mut dynamic_vis = Vec::new();
        for (i, wp) in self.world_points.iter().enumerate() {
            let pw = self.world_position(wp, k);
            let ps = pose.act_point(&pw);
            let range = ps.norm();
            let azimuth = ps.y.atan2(ps.x);
            if range > self.max_range || range < 0.5 || azimuth.abs() > self.half_fov {
                continue;
            }
            if !(super::HEIGHT_MIN..=super::HEIGHT_MAX).contains(&ps.z) {
                continue;
            }
            if wp.mover.is_some() {
                dynamic_vis.push(i);
            } else {
                static_vis.push(i);
            }
        }

        let want_dyn = (self.dynamic_fraction * POINTS_PER_FRAME as f64).round() as usize;
        let n_dyn = want_dyn.min(dynamic_vis.len());
        let n_static = (POINTS_PER_FRAME - n_dyn).min(static_vis.len());
        let mut chosen: Vec<usize> = sample(&mut rng, static_vis.len(), n_static)
            .into_iter()
            .map(|i| static_vis[i])
            .collect();
        chosen.extend(
            sample(&mut rng, dynamic_vis.len(), n_dyn)
                .into_iter()
                .map(|i| dynamic_vis[i]),
        );
        chosen.shuffle(&mut rng);

        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("valid sigma");
        let mut points = Vec::with_capacity(chosen.len());
        let mut intensity = Vec::with_capacity(chosen.len());
        let mut radial = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let wp = &self.world_points[i];
            let pw = self.world_position(wp, k);
            let mut ps = pose.act_point(&pw);
            if self.noise_sigma > 0.0 {
                ps += Vec3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
            }
            let v_point = wp
                .mover
                .map_or(Vec3::zeros(), |m| Vec3::from(self.movers[m]) * FRAME_RATE_HZ);
            let los = (pw - center).normalize();
            // Stored at the single precision of the on-disk frame format.
            points.push([ps.x, ps.y, ps.z].map(|v| v as f32 as f64));
            intensity.push(wp.intensity as f32 as f64);
            radial.push((v_point - v_sensor).dot(&los) as f32 as f64);
        }
        PointCloud {
            points,
            intensity: Some(intensity),
            radial_velocity: Some(radial),
            frame_id: k as u64,
        }
    }
}

impl SceneSpec {
    fn step_hint(&self, traj: &TrajectorySpec) -> f64 {
        traj.step.abs().max(0.5)
    }
}

fn poisson_like<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let whole = mean.floor();
    whole as usize + usize::from(rng.random_bool((mean - whole).clamp(0.0, 1.0)))
}

/// Renders `frames` observations of the scene, each preprocessed to exactly
/// [`POINTS_PER_FRAME`] points.
pub fn synth_sequence(scene: &SyntheticScene, frames: usize) -> Vec<Frame> {
    assert!(frames >= 2 && frames <= scene.trajectory.len());
    (0..frames)
        .map(|k| {
            let raw = scene.observe(k);
            let cloud = preprocess(&raw, scene.rng_seed.wrapping_add(k as u64))
                .expect("synthetic frames always contain in-range points")
                .with_frame_id(k as u64);
            Frame {
                cloud,
                pose: scene.trajectory[k],
            }
        })
        .collect()
}
