//! Synthetic world: shaded disks bouncing under gravity, with analytic
//! optical-flow, semantic and spatial oracle features.
//!
//! Coordinates are pixels with `x` to the right and `y` down; gravity pulls
//! toward `+y`. Disk centres are snapped to the pixel lattice for rendering,
//! so the displacement between rendered frames is an integer vector and the
//! analytic flow is exactly consistent with the pixels.

pub mod prompt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::rng::substream;

/// Named colours; objects in one episode get distinct entries.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
];

pub const MAX_OBJECTS: usize = 4;
/// Background plus one identity channel per palette entry, then (dx, dy) offset.
pub const SEMANTIC_RAW_DIM: usize = PALETTE.len() + 1 + 2;
/// Occupancy, signed distance, depth index, depth-layer one-hot, (x, y).
pub const SPATIAL_RAW_DIM: usize = 3 + (MAX_OBJECTS + 1) + 2;
const PLACEMENT_ATTEMPTS: usize = 100;
const SHADE_RIM: f32 = 0.55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    /// px / frame^2 along +y.
    pub gravity: f64,
    pub restitution: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Initial speed bound per axis, px / frame.
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            n_objects: 2,
            gravity: 0.25,
            restitution: 1.0,
            radius_min: 3.0,
            radius_max: 5.0,
            max_speed: 2.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.frames < 2 {
            return fail("frames must be at least 2");
        }
        if self.height < 16 || self.width < 16 {
            return fail("height and width must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return fail("restitution must lie in [0, 1]");
        }
        if self.n_objects > MAX_OBJECTS {
            return fail("at most 4 objects");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return fail("radii must satisfy 0 < radius_min <= radius_max");
        }
        if 2.0 * self.radius_max + 2.0 > self.height.min(self.width) as f64 {
            return fail("objects do not fit inside the frame");
        }
        if !self.gravity.is_finite() || self.gravity < 0.0 || !self.max_speed.is_finite() || self.max_speed < 0.0 {
            return fail("gravity and max_speed must be finite and non-negative");
        }
        Ok(())
    }

    pub fn has_gravity(&self) -> bool {
        self.gravity > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
    /// Palette index.
    pub color: usize,
}

impl Disk {
    /// Centre snapped to the pixel lattice.
    pub fn pixel_center(&self) -> [i64; 2] {
        [self.pos[0].round() as i64, self.pos[1].round() as i64]
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        let [cx, cy] = self.pixel_center();
        let dx = (x as i64 - cx) as f64;
        let dy = (y as i64 - cy) as f64;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Disks in fixed depth order: later entries are drawn on top.
pub type WorldState = Vec<Disk>;

/// One explicit step: advance positions, apply gravity, resolve walls, then
/// resolve equal-mass disk contacts along the contact normal.
pub fn step_dynamics(state: &WorldState, config: &WorldConfig) -> WorldState {
    let e = config.restitution;
    let bounds = [config.width as f64, config.height as f64];
    let mut next = state.clone();
    for d in &mut next {
        d.pos[0] += d.vel[0];
        d.pos[1] += d.vel[1];
        d.vel[1] += config.gravity;
        for axis in 0..2 {
            let (lo, hi) = (d.radius, bounds[axis] - 1.0 - d.radius);
            if d.pos[axis] < lo {
                d.pos[axis] = (2.0 * lo - d.pos[axis]).min(hi);
                if d.vel[axis] < 0.0 {
                    d.vel[axis] = -e * d.vel[axis];
                }
            } else if d.pos[axis] > hi {
                d.pos[axis] = (2.0 * hi - d.pos[axis]).max(lo);
                if d.vel[axis] > 0.0 {
                    d.vel[axis] = -e * d.vel[axis];
                }
            }
        }
    }
    for i in 0..next.len() {
        for j in i + 1..next.len() {
            let (a, b) = (next[i], next[j]);
            let delta = [b.pos[0] - a.pos[0], b.pos[1] - a.pos[1]];
            let dist = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
            if dist >= a.radius + b.radius || dist == 0.0 {
                continue;
            }
            let n = [delta[0] / dist, delta[1] / dist];
            let closing = (a.vel[0] - b.vel[0]) * n[0] + (a.vel[1] - b.vel[1]) * n[1];
            if closing > 0.0 {
                let impulse = 0.5 * (1.0 + e) * closing;
                for k in 0..2 {
                    next[i].vel[k] -= impulse * n[k];
                    next[j].vel[k] += impulse * n[k];
                }
            }
            let push = 0.5 * (a.radius + b.radius - dist);
            for k in 0..2 {
                next[i].pos[k] -= push * n[k];
                next[j].pos[k] += push * n[k];
            }
        }
    }
    next
}

pub fn kinetic_energy(state: &WorldState) -> f64 {
    state
        .iter()
        .map(|d| 0.5 * (d.vel[0] * d.vel[0] + d.vel[1] * d.vel[1]))
        .sum()
}

/// Index of the topmost disk covering pixel (x, y).
fn topmost(state: &WorldState, x: usize, y: usize) -> Option<usize> {
    (0..state.len()).rev().find(|&i| state[i].covers(x, y))
}

/// Displacement field `H x W x 2` (u, v) between consecutive states: each
/// pixel covered at `t` moves with its topmost disk; everything else is 0.
pub fn analytic_flow(state_t: &WorldState, state_next: &WorldState, height: usize, width: usize) -> NdArray<f32> {
    let mut out = NdArray::zeros(&[height, width, 2]);
    let shift: Vec<[f32; 2]> = state_t
        .iter()
        .zip(state_next)
        .map(|(a, b)| {
            let (ca, cb) = (a.pixel_center(), b.pixel_center());
            [(cb[0] - ca[0]) as f32, (cb[1] - ca[1]) as f32]
        })
        .collect();
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            if let Some(i) = topmost(state_t, x, y) {
                let o = (y * width + x) * 2;
                data[o] = shift[i][0];
                data[o + 1] = shift[i][1];
            }
        }
    }
    out
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Radially shaded disk colour, quantized to 8-bit levels.
fn shade(d: &Disk, x: usize, y: usize) -> [f32; 3] {
    let [cx, cy] = d.pixel_center();
    let rho2 = ((x as i64 - cx).pow(2) + (y as i64 - cy).pow(2)) as f64 / (d.radius * d.radius);
    let s = SHADE_RIM + (1.0 - SHADE_RIM) * (1.0 - rho2).max(0.0).sqrt() as f32;
    let base = PALETTE[d.color].1;
    [quantize(base[0] * s), quantize(base[1] * s), quantize(base[2] * s)]
}

pub fn render_frame(state: &WorldState, height: usize, width: usize) -> NdArray<f32> {
    let mut out = NdArray::zeros(&[height, width, 3]);
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            if let Some(i) = topmost(state, x, y) {
                let c = shade(&state[i], x, y);
                data[(y * width + x) * 3..][..3].copy_from_slice(&c);
            }
        }
    }
    out
}

/// Per-pixel identity one-hot (background first) and centre offset / radius.
pub fn semantic_features(state: &WorldState, height: usize, width: usize) -> NdArray<f32> {
    let dim = SEMANTIC_RAW_DIM;
    let mut out = NdArray::zeros(&[height, width, dim]);
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            let px = &mut data[(y * width + x) * dim..][..dim];
            match topmost(state, x, y) {
                None => px[0] = 1.0,
                Some(i) => {
                    let d = &state[i];
                    let [cx, cy] = d.pixel_center();
                    px[1 + d.color] = 1.0;
                    px[dim - 2] = ((x as i64 - cx) as f64 / d.radius) as f32;
                    px[dim - 1] = ((y as i64 - cy) as f64 / d.radius) as f32;
                }
            }
        }
    }
    out
}

/// Occupancy, signed distance to the nearest disk boundary (negative inside,
/// in units of the frame size), depth index, depth-layer one-hot and the
/// normalized pixel coordinates.
pub fn spatial_features(state: &WorldState, height: usize, width: usize) -> NdArray<f32> {
    let dim = SPATIAL_RAW_DIM;
    let scale = height.max(width) as f64;
    let mut out = NdArray::zeros(&[height, width, dim]);
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            let px = &mut data[(y * width + x) * dim..][..dim];
            let top = topmost(state, x, y);
            let sd = state
                .iter()
                .map(|d| {
                    let [cx, cy] = d.pixel_center();
                    let dist = (((x as i64 - cx).pow(2) + (y as i64 - cy).pow(2)) as f64).sqrt();
                    dist - d.radius
                })
                .fold(scale, f64::min);
            px[0] = top.is_some() as u8 as f32;
            px[1] = (sd / scale) as f32;
            let layer = top.map_or(0, |i| i + 1);
            px[2] = layer as f32 / MAX_OBJECTS as f32;
            px[3 + layer] = 1.0;
            px[dim - 2] = (x as f64 + 0.5) as f32 / width as f32;
            px[dim - 1] = (y as f64 + 0.5) as f32 / height as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `F x H x W x 3` in [0, 1].
    pub video: NdArray<f32>,
    /// `(F-1) x H x W x 2`, px / frame.
    pub flow: NdArray<f32>,
    pub semantic_raw: NdArray<f32>,
    pub spatial_raw: NdArray<f32>,
    pub prompt: Vec<u32>,
}

fn place(config: &WorldConfig, attempt: u64) -> Option<WorldState> {
    let mut rng = substream(config.seed, "placement", attempt);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    let mut disks: WorldState = Vec::with_capacity(config.n_objects);
    for k in 0..config.n_objects {
        let pick = rng.random_range(k..colors.len());
        colors.swap(k, pick);
        let radius = if config.radius_max > config.radius_min {
            rng.random_range(config.radius_min..=config.radius_max).round()
        } else {
            config.radius_min
        };
        let pos = [
            rng.random_range(radius..=config.width as f64 - 1.0 - radius).round(),
            rng.random_range(radius..=config.height as f64 - 1.0 - radius).round(),
        ];
        let vel = if config.max_speed > 0.0 {
            [
                rng.random_range(-config.max_speed..=config.max_speed),
                rng.random_range(-config.max_speed..=config.max_speed),
            ]
        } else {
            [0.0, 0.0]
        };
        let candidate = Disk {
            pos,
            vel,
            radius,
            color: colors[k],
        };
        let overlaps = disks.iter().any(|d| {
            let dx = d.pos[0] - pos[0];
            let dy = d.pos[1] - pos[1];
            (dx * dx + dy * dy).sqrt() < d.radius + radius + 1.0
        });
        if overlaps {
            return None;
        }
        disks.push(candidate);
    }
    Some(disks)
}

/// Initial placement followed by `frames - 1` dynamics steps.
pub fn simulate(config: &WorldConfig) -> Result<Vec<WorldState>> {
    config.validate()?;
    let initial = (0..PLACEMENT_ATTEMPTS as u64)
        .find_map(|a| place(config, a))
        .ok_or(Error::Placement {
            objects: config.n_objects,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
    let mut states = vec![initial];
    for _ in 1..config.frames {
        let next = step_dynamics(states.last().unwrap(), config);
        states.push(next);
    }
    Ok(states)
}

fn stack(frames: &[NdArray<f32>]) -> NdArray<f32> {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    NdArray::new(shape, data).expect("frames share a shape")
}

pub fn generate_episode(config: &WorldConfig) -> Result<Episode> {
    let states = simulate(config)?;
    let (h, w) = (config.height, config.width);
    let video = stack(&states.iter().map(|s| render_frame(s, h, w)).collect::<Vec<_>>());
    let flow = stack(
        &states
            .windows(2)
            .map(|p| analytic_flow(&p[0], &p[1], h, w))
            .collect::<Vec<_>>(),
    );
    let semantic_raw = stack(&states.iter().map(|s| semantic_features(s, h, w)).collect::<Vec<_>>());
    let spatial_raw = stack(&states.iter().map(|s| spatial_features(s, h, w)).collect::<Vec<_>>());
    let colors: Vec<usize> = states[0].iter().map(|d| d.color).collect();
    Ok(Episode {
        video,
        flow,
        semantic_raw,
        spatial_raw,
        prompt: prompt::encode(&colors, config.has_gravity()),
    })
}

/// Per-episode variation of a base config for dataset generation: object
/// count in `1..=max_objects`, gravity on or off, and a derived seed.
pub fn episode_config(base: &WorldConfig, max_objects: usize, master_seed: u64, index: u64) -> WorldConfig {
    let mut rng = substream(master_seed, crate::rng::DATA, index);
    let mut cfg = base.clone();
    cfg.n_objects = rng.random_range(1..=max_objects.clamp(1, MAX_OBJECTS));
    cfg.gravity = if rng.random_bool(0.5) { base.gravity } else { 0.0 };
    cfg.seed = rng.random();
    cfg
}
