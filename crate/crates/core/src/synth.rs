//! Synthetic video with known motion: a static textured background with
//! sharp-edged textured rectangles moving by whole pixels per frame, plus
//! deformed frame pairs for the coordinate-count ablation.
//!
//! Flows are backward flows in the warp convention: frame `t` at `(x, y)`
//! equals frame `t − 1` at `(x + u, y + v)` wherever nothing was revealed.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataseq::write_sequence;
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::metrics::{flow_file_name, write_flow_file};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    /// HR frame side
    pub size: usize,
    pub frames: usize,
    /// maximum number of moving rectangles per clip
    pub objects: usize,
    /// maximum speed in HR pixels per frame; 0 renders a static clip
    pub max_speed: i32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 128,
            frames: 10,
            objects: 3,
            max_speed: 3,
        }
    }
}

/// Sum of oriented gratings plus hard-edged blocks, per channel.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64, [f64; 3])>,
    block: usize,
    block_amp: f64,
    block_seed: u64,
    base: [f64; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let period = rng.random_range(6.0..16.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.03..0.08);
                let tint = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
                (angle, period, phase, amp, tint)
            })
            .collect();
        Texture {
            waves,
            block: rng.random_range(4..12),
            block_amp: rng.random_range(0.2..0.4),
            block_seed: rng.random(),
            base: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
        }
    }

    fn value(&self, c: usize, y: f64, x: f64) -> f64 {
        let mut v = self.base[c];
        for &(angle, period, phase, amp, tint) in &self.waves {
            let t = (x * angle.cos() + y * angle.sin()) * 2.0 * PI / period + phase;
            v += amp * tint[c] * t.sin();
        }
        let bx = (x / self.block as f64).floor() as i64;
        let by = (y / self.block as f64).floor() as i64;
        let h = hash(self.block_seed ^ (bx as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (by as u64).wrapping_mul(0xc2b2ae3d27d4eb4f) ^ c as u64);
        v + self.block_amp * ((h >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
    }
}

fn hash(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
struct Object {
    x0: i32,
    y0: i32,
    w: i32,
    h: i32,
    vx: i32,
    vy: i32,
    texture: Texture,
}

impl Object {
    fn origin(&self, t: usize) -> (i32, i32) {
        (self.x0 + self.vx * t as i32, self.y0 + self.vy * t as i32)
    }

    fn covers(&self, t: usize, y: i32, x: i32) -> bool {
        let (ox, oy) = self.origin(t);
        x >= ox && x < ox + self.w && y >= oy && y < oy + self.h
    }
}

/// One synthetic clip with per-pair ground-truth flows.
#[derive(Clone, Debug)]
pub struct ToyClip {
    pub hr: FrameSequence,
    /// `(u, v)` planes for pairs `(t − 1, t)`, `t = 1..frames`
    pub flows: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Renders clip `seed` of a toy dataset.
pub fn toy_clip(cfg: &ToyConfig, seed: u64) -> Result<ToyClip> {
    if cfg.size < 8 || cfg.frames < 1 || cfg.max_speed < 0 {
        return Err(Error::invalid("toy_clip", "size must be ≥ 8, frames ≥ 1 and max_speed ≥ 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Texture::random(&mut rng);
    let s = cfg.size as i32;
    let count = rng.random_range(1..=cfg.objects.max(1));
    let objects: Vec<Object> = (0..count)
        .map(|_| {
            let w = rng.random_range(s / 6..=s / 3);
            let h = rng.random_range(s / 6..=s / 3);
            let (mut vx, mut vy) = (0, 0);
            // a zero speed limit gives a fully static clip
            while vx == 0 && vy == 0 && cfg.max_speed > 0 {
                vx = rng.random_range(-cfg.max_speed..=cfg.max_speed);
                vy = rng.random_range(-cfg.max_speed..=cfg.max_speed);
            }
            Object {
                x0: rng.random_range(0..s - w),
                y0: rng.random_range(0..s - h),
                w,
                h,
                vx,
                vy,
                texture: Texture::random(&mut rng),
            }
        })
        .collect();
    let n = cfg.size;
    // topmost object at (t, y, x), later objects drawn over earlier ones
    let top = |t: usize, y: i32, x: i32| objects.iter().rposition(|o| o.covers(t, y, x));
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut flows = Vec::with_capacity(cfg.frames.saturating_sub(1));
    for t in 0..cfg.frames {
        frames.push(Frame::from_fn(n, n, |c, y, x| {
            let (yi, xi) = (y as i32, x as i32);
            let v = match top(t, yi, xi) {
                Some(k) => {
                    let o = &objects[k];
                    let (ox, oy) = o.origin(t);
                    o.texture.value(c, (yi - oy) as f64, (xi - ox) as f64)
                }
                None => background.value(c, y as f64, x as f64),
            };
            v.clamp(0.02, 0.98) as f32
        }));
        if t > 0 {
            let mut u = vec![0f32; n * n];
            let mut v = vec![0f32; n * n];
            for y in 0..n {
                for x in 0..n {
                    if let Some(k) = top(t, y as i32, x as i32) {
                        u[y * n + x] = -objects[k].vx as f32;
                        v[y * n + x] = -objects[k].vy as f32;
                    }
                }
            }
            flows.push((u, v));
        }
    }
    Ok(ToyClip {
        hr: FrameSequence::new(frames)?,
        flows,
    })
}

/// Paths written by [`write_toy_dataset`].
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub manifest: PathBuf,
    pub flows: PathBuf,
    pub names: Vec<String>,
}

/// Writes `clips` clips under `root`: HR frames in `hr/<name>/`, flows in
/// `flows/<name>/`, and a manifest listing the HR directories.
pub fn write_toy_dataset(root: &Path, cfg: &ToyConfig, clips: usize, seed: u64) -> Result<ToyDataset> {
    let mut manifest = String::from("# synthetic clips: HR directory per line, LR synthesized\n");
    let mut names = Vec::with_capacity(clips);
    let flows_root = root.join("flows");
    for i in 0..clips {
        let name = format!("clip{i:03}");
        let clip = toy_clip(cfg, seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        write_sequence(&clip.hr, &root.join("hr").join(&name))?;
        let fdir = flows_root.join(&name);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (t, (u, v)) in clip.flows.iter().enumerate() {
            write_flow_file(&fdir.join(flow_file_name(t + 1)), u, v, cfg.size, cfg.size)?;
        }
        manifest.push_str(&format!("hr/{name}\n"));
        names.push(name);
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(ToyDataset {
        manifest: path,
        flows: flows_root,
        names,
    })
}

/// A textured frame and a translated copy shifted by whole pixels.
pub fn translation_pair(size: usize, dx: i32, dy: i32, seed: u64) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::random(&mut rng);
    let a = Frame::from_fn(size, size, |c, y, x| tex.value(c, y as f64, x as f64).clamp(0.0, 1.0) as f32);
    let b = Frame::from_fn(size, size, |c, y, x| {
        tex.value(c, y as f64 - dy as f64, x as f64 - dx as f64).clamp(0.0, 1.0) as f32
    });
    FrameSequence::new(vec![a, b])
}

/// A textured frame and a smoothly deformed, translated rendering of the same
/// texture. The second frame integrates the texture over each pixel's
/// deformed footprint (4×4 supersampling), so it is not a pointwise
/// resampling of the first.
pub fn deformation_pair(size: usize, seed: u64) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::random(&mut rng);
    let (tx, ty) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let amp = rng.random_range(1.0..2.0);
    let period = size as f64 / rng.random_range(1.0..2.0);
    // local magnification up to 1 + 2π·amp/period
    let map = |y: f64, x: f64| {
        let dx = tx + amp * (2.0 * PI * y / period).sin();
        let dy = ty + amp * (2.0 * PI * x / period).cos();
        (y + dy + 0.25 * (x - size as f64 / 2.0) * 0.1, x + dx + 0.1 * (x - size as f64 / 2.0))
    };
    let a = Frame::from_fn(size, size, |c, y, x| tex.value(c, y as f64, x as f64).clamp(0.0, 1.0) as f32);
    let ss = 4;
    let b = Frame::from_fn(size, size, |c, y, x| {
        let mut acc = 0.0;
        for i in 0..ss {
            for j in 0..ss {
                let py = y as f64 + (i as f64 + 0.5) / ss as f64 - 0.5;
                let px = x as f64 + (j as f64 + 0.5) / ss as f64 - 0.5;
                let (sy, sx) = map(py, px);
                acc += tex.value(c, sy, sx);
            }
        }
        (acc / (ss * ss) as f64).clamp(0.0, 1.0) as f32
    });
    FrameSequence::new(vec![a, b])
}
