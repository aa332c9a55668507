//! Synthetic sequences with exact ground-truth motion.
//!
//! Frames sample a procedural value-noise texture translated by an integer
//! velocity per frame, so the ground-truth forward flow is the constant
//! `(vx, vy)` and every backward warp at integer offsets is bit-exact. That
//! makes these scenes a desk-scale oracle: propagation output can be compared
//! pixel-for-pixel against the texture.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Scene description. Velocities are integer pixels per frame so warps along
/// ground-truth flow land on grid points.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// (vx, vy) displacement of scene content per frame, in pixels.
    pub velocity: (i32, i32),
    /// Value-noise octaves; more octaves, finer texture.
    pub octaves: u32,
}

impl SceneSpec {
    pub fn new(seed: u64, frames: usize, height: usize, width: usize, velocity: (i32, i32)) -> SceneSpec {
        SceneSpec { seed, frames, height, width, velocity, octaves: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("scene dims must be positive".into()));
        }
        let (vx, vy) = self.velocity;
        if vx.unsigned_abs() as usize * self.frames >= self.width / 2
            || vy.unsigned_abs() as usize * self.frames >= self.height / 2
        {
            return Err(Error::InvalidArgument(format!(
                "velocity ({vx},{vy}) over {} frames drifts more than half the {}x{} frame",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Procedural multi-octave value noise over the whole integer plane.
/// Sampling is a pure function of (seed, octaves, x, y, c).
#[derive(Debug, Clone, Copy)]
pub struct CanonicalTexture {
    seed: u64,
    octaves: u32,
}

impl CanonicalTexture {
    pub fn new(seed: u64, octaves: u32) -> CanonicalTexture {
        CanonicalTexture { seed, octaves: octaves.max(1) }
    }

    /// Texture value in [0,1] at integer plane coordinates.
    pub fn sample(&self, x: i64, y: i64, c: usize) -> f32 {
        let mut value = 0.0f32;
        let mut amplitude = 1.0f32;
        let mut total = 0.0f32;
        let mut cell = 16i64;
        for octave in 0..self.octaves {
            value += amplitude * lattice_bilinear(self.seed, octave, c, x, y, cell.max(1));
            total += amplitude;
            amplitude *= 0.5;
            cell /= 2;
        }
        value / total
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, octave: u32, c: usize, lx: i64, ly: i64) -> f32 {
    let mut h = splitmix(seed ^ ((octave as u64) << 32) ^ (c as u64));
    h = splitmix(h ^ (lx as u64));
    h = splitmix(h ^ (ly as u64));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn lattice_bilinear(seed: u64, octave: u32, c: usize, x: i64, y: i64, cell: i64) -> f32 {
    let lx = x.div_euclid(cell);
    let ly = y.div_euclid(cell);
    let fx = x.rem_euclid(cell) as f32 / cell as f32;
    let fy = y.rem_euclid(cell) as f32 / cell as f32;
    let v00 = lattice_value(seed, octave, c, lx, ly);
    let v01 = lattice_value(seed, octave, c, lx + 1, ly);
    let v10 = lattice_value(seed, octave, c, lx, ly + 1);
    let v11 = lattice_value(seed, octave, c, lx + 1, ly + 1);
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    top + (bot - top) * fy
}

/// A generated scene: ground-truth frames, exact flows, and the texture the
/// frames were sampled from.
#[derive(Debug, Clone)]
pub struct Scene {
    pub frames: Vec<Grid>,
    pub flows_fwd: Vec<Grid>,
    pub flows_bwd: Vec<Grid>,
    pub texture: CanonicalTexture,
}

/// Generate `spec.frames` frames of the translating texture plus the exact
/// forward/backward flow fields.
pub fn gen_sequence(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let tex = CanonicalTexture::new(spec.seed, spec.octaves);
    let (vx, vy) = spec.velocity;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames as i64 {
        frames.push(Grid::from_fn(spec.height, spec.width, 3, |y, x, c| {
            tex.sample(x as i64 - t * vx as i64, y as i64 - t * vy as i64, c)
        }));
    }
    let fwd = Grid::from_fn(spec.height, spec.width, 2, |_, _, c| {
        if c == 0 {
            vx as f32
        } else {
            vy as f32
        }
    });
    let bwd = fwd.map(|v| -v);
    Ok(Scene {
        frames,
        flows_fwd: vec![fwd; spec.frames.saturating_sub(1)],
        flows_bwd: vec![bwd; spec.frames.saturating_sub(1)],
        texture: tex,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// One rectangle or blob fixed across all frames.
    Stationary,
    /// A blob translating with its own velocity, distinct from the scene's.
    Object,
}

/// Generate a mask sequence with the requested pixel coverage ratio.
/// The generator adjusts the shape size until realized coverage is within
/// about 0.015 of the target.
pub fn gen_masks(spec: &SceneSpec, kind: MaskKind, seed: u64, coverage: f64) -> Result<Vec<Grid>> {
    spec.validate()?;
    if !(0.0..=0.9).contains(&coverage) {
        return Err(Error::InvalidArgument(format!("mask coverage {coverage} outside [0, 0.9]")));
    }
    if coverage == 0.0 {
        return Ok(vec![Grid::new(spec.height, spec.width, 1); spec.frames]);
    }
    let h = spec.height as f64;
    let w = spec.width as f64;
    let rng = splitmix(seed ^ spec.seed.rotate_left(17));

    match kind {
        MaskKind::Stationary => {
            let use_rect = rng & 1 == 0;
            let cx = w * (0.35 + 0.3 * unit(rng, 1));
            let cy = h * (0.35 + 0.3 * unit(rng, 2));
            let mask = if use_rect {
                fit_rect(spec, cx, cy, rng, coverage)
            } else {
                fit_blob(spec, cx, cy, rng, coverage)
            };
            Ok(vec![mask; spec.frames])
        }
        MaskKind::Object => {
            let (ux, uy) = object_velocity(rng, spec.velocity);
            // Keep the moving blob inside the frame across all frames.
            let span_x = ux.abs() as f64 * (spec.frames - 1) as f64;
            let span_y = uy.abs() as f64 * (spec.frames - 1) as f64;
            let cx0 = w * 0.5 - span_x * 0.5 + (unit(rng, 3) - 0.5) * (w * 0.2);
            let cy0 = h * 0.5 - span_y * 0.5 + (unit(rng, 4) - 0.5) * (h * 0.2);
            let base = fit_blob(spec, cx0, cy0, rng, coverage);
            let mut out = Vec::with_capacity(spec.frames);
            for t in 0..spec.frames {
                let dx = (ux * t as i32) as isize;
                let dy = (uy * t as i32) as isize;
                out.push(shift_mask(&base, dx, dy));
            }
            Ok(out)
        }
    }
}

fn unit(rng: u64, salt: u64) -> f64 {
    (splitmix(rng ^ salt) >> 40) as f64 / (1u64 << 24) as f64
}

fn object_velocity(rng: u64, scene_v: (i32, i32)) -> (i32, i32) {
    let mut salt = 10;
    loop {
        let ux = (unit(rng, salt) * 7.0).floor() as i32 - 3;
        let uy = (unit(rng, salt + 1) * 7.0).floor() as i32 - 3;
        if (ux, uy) != (0, 0) && (ux, uy) != scene_v {
            return (ux, uy);
        }
        salt += 2;
    }
}

fn coverage_of(m: &Grid) -> f64 {
    m.data().iter().filter(|&&v| v != 0.0).count() as f64 / m.data().len() as f64
}

/// Binary-search a size parameter until coverage lands near the target.
fn fit_shape<F: Fn(f64) -> Grid>(target: f64, max_size: f64, build: F) -> Grid {
    let mut lo = 0.0f64;
    let mut hi = max_size;
    let mut best = build(max_size * 0.5);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let m = build(mid);
        let cov = coverage_of(&m);
        if (cov - target).abs() < (coverage_of(&best) - target).abs() {
            best = m;
        }
        if cov < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

fn fit_rect(spec: &SceneSpec, cx: f64, cy: f64, rng: u64, coverage: f64) -> Grid {
    let (h, w) = (spec.height, spec.width);
    let aspect = 0.6 + 0.8 * unit(rng, 5);
    fit_shape(coverage, (h * w) as f64, |area| {
        let rh = (area * aspect).sqrt();
        let rw = area / rh.max(1.0);
        Grid::from_fn(h, w, 1, |y, x, _| {
            let inside = (x as f64 - cx).abs() < rw * 0.5 && (y as f64 - cy).abs() < rh * 0.5;
            if inside {
                1.0
            } else {
                0.0
            }
        })
    })
}

fn fit_blob(spec: &SceneSpec, cx: f64, cy: f64, rng: u64, coverage: f64) -> Grid {
    let (h, w) = (spec.height, spec.width);
    let ax = 0.75 + 0.5 * unit(rng, 6);
    let ay = 0.75 + 0.5 * unit(rng, 7);
    let phase = unit(rng, 8) * std::f64::consts::TAU;
    fit_shape(coverage, h.min(w) as f64, |r| {
        Grid::from_fn(h, w, 1, |y, x, _| {
            let dx = (x as f64 - cx) / ax;
            let dy = (y as f64 - cy) / ay;
            let dist = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let wobble = 1.0 + 0.22 * (3.0 * theta + phase).sin();
            if dist < r * wobble {
                1.0
            } else {
                0.0
            }
        })
    })
}

fn shift_mask(m: &Grid, dx: isize, dy: isize) -> Grid {
    Grid::from_fn(m.height(), m.width(), 1, |y, x, _| {
        let sx = x as isize - dx;
        let sy = y as isize - dy;
        if sx >= 0 && sy >= 0 && (sx as usize) < m.width() && (sy as usize) < m.height() {
            m.at(sy as usize, sx as usize, 0)
        } else {
            0.0
        }
    })
}

/// Corrupted copies of a scene: frame pixels and flow vectors zeroed inside
/// the masks. Forward flow `t` is zeroed by mask `t`; backward flow `t`
/// (which lives on frame `t+1`'s pixel grid) by mask `t+1`.
#[derive(Debug, Clone)]
pub struct Corrupted {
    pub frames: Vec<Grid>,
    pub flows_fwd: Vec<Grid>,
    pub flows_bwd: Vec<Grid>,
}

pub fn corrupt(
    frames: &[Grid],
    masks: &[Grid],
    flows_fwd: &[Grid],
    flows_bwd: &[Grid],
) -> Result<Corrupted> {
    if masks.len() != frames.len() {
        return Err(Error::DimensionMismatch(format!(
            "corrupt: {} masks for {} frames",
            masks.len(),
            frames.len()
        )));
    }
    if flows_fwd.len() + 1 != frames.len() || flows_bwd.len() + 1 != frames.len() {
        return Err(Error::DimensionMismatch("corrupt: flow counts must be frames-1".into()));
    }
    let zero_where = |g: &Grid, m: &Grid| -> Grid {
        Grid::from_fn(g.height(), g.width(), g.channels(), |y, x, c| {
            if m.at(y, x, 0) != 0.0 {
                0.0
            } else {
                g.at(y, x, c)
            }
        })
    };
    Ok(Corrupted {
        frames: frames.iter().zip(masks).map(|(f, m)| zero_where(f, m)).collect(),
        flows_fwd: flows_fwd.iter().enumerate().map(|(t, f)| zero_where(f, &masks[t])).collect(),
        flows_bwd: flows_bwd.iter().enumerate().map(|(t, f)| zero_where(f, &masks[t + 1])).collect(),
    })
}
