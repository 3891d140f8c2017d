//! Frame-sequence loading, LR synthesis and training clip sampling.
//!
//! On disk a video is a directory of numbered 8-bit PNG frames
//! (`000000.png`, `000001.png`, ...). A dataset manifest lists one video per
//! line as `hr_dir[<TAB>lr_dir]`; missing LR directories are synthesized
//! with [`make_lr`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::tensor::{Shape, Tensor};

/// Reads every `.png` in `dir`, in lexicographic filename order.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Frame {
            path: dir.to_path_buf(),
            msg: "no frames found".into(),
        });
    }
    let mut frames = Vec::with_capacity(files.len());
    for path in &files {
        let frame = read_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if first.dims() != frame.dims() {
                return Err(Error::Frame {
                    path: path.clone(),
                    msg: format!(
                        "frame is {}×{} but the sequence is {}×{}",
                        frame.height(),
                        frame.width(),
                        first.height(),
                        first.width()
                    ),
                });
            }
        }
        frames.push(frame);
    }
    FrameSequence::new(frames)
}

/// Sorted paths of the PNG frames in `dir`.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Frame {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Frame::new(h, w, data)
}

/// Writes a frame as 8-bit PNG, rounding to the nearest level.
pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = frame.dims();
    let mut raw = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            raw[3 * i + c] = quantize(frame.plane(c)[i]);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
    img.save(path).map_err(|e| Error::Frame {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `seq` as `%06d.png` into `dir`, creating it if needed.
pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(seq.len());
    for (i, f) in seq.iter().enumerate() {
        let p = dir.join(format!("{i:06}.png"));
        write_frame(f, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Reconstruction filter used for LR synthesis and the bicubic baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResampleKernel {
    #[default]
    Bicubic,
    Bilinear,
    Area,
}

impl ResampleKernel {
    fn support(self) -> f64 {
        match self {
            ResampleKernel::Bicubic => 2.0,
            ResampleKernel::Bilinear => 1.0,
            ResampleKernel::Area => 0.5,
        }
    }

    /// Kernel weight at distance `x` (in units of the filter scale).
    pub fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            ResampleKernel::Bicubic => {
                // Keys cubic with a = -0.5
                const A: f64 = -0.5;
                if x < 1.0 {
                    ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * A
                } else {
                    0.0
                }
            }
            ResampleKernel::Bilinear => (1.0 - x).max(0.0),
            ResampleKernel::Area => {
                if x < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for ResampleKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bicubic" => Ok(ResampleKernel::Bicubic),
            "bilinear" => Ok(ResampleKernel::Bilinear),
            "area" | "box" => Ok(ResampleKernel::Area),
            other => Err(Error::invalid("kernel", format!("unknown resampling kernel `{other}`"))),
        }
    }
}

impl fmt::Display for ResampleKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleKernel::Bicubic => "bicubic",
            ResampleKernel::Bilinear => "bilinear",
            ResampleKernel::Area => "area",
        })
    }
}

/// Normalized taps of one output sample along one axis.
struct AxisTaps {
    /// index of the source sample nearest the centre
    anchor: usize,
    taps: Vec<(usize, f64)>,
}

fn axis_taps(kernel: ResampleKernel, in_len: usize, out_len: usize, antialias: bool) -> Vec<AxisTaps> {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = if antialias && scale > 1.0 { scale } else { 1.0 };
    let support = kernel.support() * filter_scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support - 0.5).floor() as isize;
            let hi = (center + support + 0.5).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wgt = kernel.weight((j as f64 + 0.5 - center) / filter_scale);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                total += wgt;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            let anchor = ((center - 0.5).round().max(0.0) as usize).min(in_len - 1);
            AxisTaps { anchor, taps }
        })
        .collect()
}

/// Separable resize of one plane. Each output is computed as
/// `x[anchor] + Σ wⱼ (x[j] − x[anchor])`, which equals the normalized
/// weighted sum and reproduces constant regions exactly.
fn resize_plane(
    src: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    tx: &[AxisTaps],
    ty: &[AxisTaps],
) -> Vec<f32> {
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, t) in tx.iter().enumerate() {
            let a = row[t.anchor] as f64;
            tmp[y * ow + x] = a + t.taps.iter().map(|&(j, wt)| wt * (row[j] as f64 - a)).sum::<f64>();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..ow {
            let a = tmp[t.anchor * ow + x];
            let v = a + t.taps.iter().map(|&(j, wt)| wt * (tmp[j * ow + x] - a)).sum::<f64>();
            out[y * ow + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Resizes a frame to `oh×ow`; `antialias` widens the kernel when shrinking.
pub fn resize(frame: &Frame, oh: usize, ow: usize, kernel: ResampleKernel, antialias: bool) -> Result<Frame> {
    let (h, w) = frame.dims();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("resize", "empty frame"));
    }
    let tx = axis_taps(kernel, w, ow, antialias);
    let ty = axis_taps(kernel, h, oh, antialias);
    let mut data = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        data.extend(resize_plane(frame.plane(c), h, w, oh, ow, &tx, &ty));
    }
    Frame::new(oh, ow, data)
}

/// Downsamples every frame by `s` with an anti-aliased `kernel`.
pub fn make_lr_with(hr: &FrameSequence, s: usize, kernel: ResampleKernel) -> Result<FrameSequence> {
    let Some((h, w)) = hr.dims() else {
        return FrameSequence::new(Vec::new());
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(
            "make_lr",
            format!("{h}×{w} frames are not divisible by scale {s}"),
        ));
    }
    let frames = hr
        .iter()
        .map(|f| resize(f, h / s, w / s, kernel, true))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// [`make_lr_with`] using the default bicubic kernel.
pub fn make_lr(hr: &FrameSequence, s: usize) -> Result<FrameSequence> {
    make_lr_with(hr, s, ResampleKernel::Bicubic)
}

/// Upscales every frame by `s` with bicubic interpolation (evaluation baseline).
pub fn bicubic_upscale(lr: &FrameSequence, s: usize) -> Result<FrameSequence> {
    let frames = lr
        .iter()
        .map(|f| resize(f, f.height() * s, f.width() * s, ResampleKernel::Bicubic, false))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Temporally aligned HR/LR versions of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub name: String,
    pub hr: FrameSequence,
    pub lr: FrameSequence,
}

impl SequencePair {
    pub fn new(name: impl Into<String>, hr: FrameSequence, lr: FrameSequence) -> Result<Self> {
        let name = name.into();
        if hr.len() != lr.len() {
            return Err(Error::invalid(
                "sequence pair",
                format!("`{name}`: {} HR frames but {} LR frames", hr.len(), lr.len()),
            ));
        }
        Ok(SequencePair { name, hr, lr })
    }

    /// Builds the pair by synthesizing the LR side.
    pub fn from_hr(name: impl Into<String>, hr: FrameSequence, s: usize, kernel: ResampleKernel) -> Result<Self> {
        let lr = make_lr_with(&hr, s, kernel)?;
        Self::new(name, hr, lr)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// Integer HR/LR ratio, if the dims agree on one.
    pub fn scale(&self) -> Option<usize> {
        let (hh, hw) = self.hr.dims()?;
        let (lh, lw) = self.lr.dims()?;
        (lh > 0 && hh % lh == 0 && hw % lw.max(1) == 0 && hh / lh == hw / lw).then_some(hh / lh)
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let hr = cols.next().unwrap_or("").trim();
        if hr.is_empty() {
            return Err(Error::format("manifest", format!("line {}: empty HR path", lineno + 1)));
        }
        let lr = cols.next().map(str::trim).filter(|s| !s.is_empty());
        if cols.next().is_some() {
            return Err(Error::format("manifest", format!("line {}: more than two columns", lineno + 1)));
        }
        out.push(ManifestEntry {
            hr: base.join(hr),
            lr: lr.map(|l| base.join(l)),
        });
    }
    Ok(out)
}

/// Loads every manifest entry, synthesizing missing LR sequences.
pub fn load_dataset(manifest: &Path, s: usize, kernel: ResampleKernel) -> Result<Vec<SequencePair>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let name = e
            .hr
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.hr.display().to_string());
        let hr = load_sequence(&e.hr)?;
        let pair = match &e.lr {
            Some(lr) => SequencePair::new(name, hr, load_sequence(lr)?)?,
            None => SequencePair::from_hr(name, hr, s, kernel)?,
        };
        if pair.scale() != Some(s) {
            return Err(Error::Frame {
                path: e.hr.clone(),
                msg: format!("HR/LR dims do not match scale {s}"),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

/// Fixed-length HR/LR clips, stored per time step as `[batch, 3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub hr: Vec<Tensor<f32>>,
    pub lr: Vec<Tensor<f32>>,
    pub scale: usize,
}

impl ClipBatch {
    /// Assembles a batch from aligned HR/LR clips (all of length `T`).
    pub fn from_clips(clips: &[(Vec<Frame>, Vec<Frame>)], scale: usize) -> Result<Self> {
        let t_len = clips.first().map(|c| c.0.len()).unwrap_or(0);
        if t_len == 0 {
            return Err(Error::invalid("clip batch", "empty batch"));
        }
        let mut hr = Vec::with_capacity(t_len);
        let mut lr = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut hs = Vec::with_capacity(clips.len());
            let mut ls = Vec::with_capacity(clips.len());
            for (h, l) in clips {
                if h.len() != t_len || l.len() != t_len {
                    return Err(Error::invalid("clip batch", "clips of unequal length"));
                }
                hs.push(h[t].to_tensor());
                ls.push(l[t].to_tensor());
            }
            hr.push(Tensor::stack_batch(&hs)?);
            lr.push(Tensor::stack_batch(&ls)?);
        }
        let b = ClipBatch { hr, lr, scale };
        b.validate()?;
        Ok(b)
    }

    pub fn steps(&self) -> usize {
        self.hr.len()
    }

    pub fn batch(&self) -> usize {
        self.hr.first().map(|t| t.shape().n).unwrap_or(0)
    }

    /// Total number of HR frames in the batch.
    pub fn frame_count(&self) -> usize {
        self.steps() * self.batch()
    }

    /// HR clip `b` as a frame sequence.
    pub fn hr_sequence(&self, b: usize) -> Result<FrameSequence> {
        FrameSequence::new(self.hr.iter().map(|t| Frame::from_tensor(t, b)).collect::<Result<_>>()?)
    }

    pub fn lr_sequence(&self, b: usize) -> Result<FrameSequence> {
        FrameSequence::new(self.lr.iter().map(|t| Frame::from_tensor(t, b)).collect::<Result<_>>()?)
    }

    /// Structural invariants: equal lengths, consistent shapes, HR = s × LR.
    pub fn validate(&self) -> Result<()> {
        if self.hr.len() != self.lr.len() || self.hr.is_empty() {
            return Err(Error::invalid("clip batch", "HR and LR lengths differ"));
        }
        let hs = self.hr[0].shape();
        let ls = self.lr[0].shape();
        let s = self.scale;
        if hs.n != ls.n || hs.c != 3 || ls.c != 3 || hs.h != ls.h * s || hs.w != ls.w * s {
            return Err(Error::invalid(
                "clip batch",
                format!("HR {hs} is not {s}× LR {ls}"),
            ));
        }
        if self.hr.iter().any(|t| t.shape() != hs) || self.lr.iter().any(|t| t.shape() != ls) {
            return Err(Error::invalid("clip batch", "shapes vary over time"));
        }
        Ok(())
    }
}

/// Where a sampled clip came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSource {
    pub sequence: usize,
    pub start: usize,
    /// LR-space crop offset; the HR offset is `scale ×` this.
    pub top: usize,
    pub left: usize,
}

/// Draws `batch` independent clips of `t_len` frames with an HR crop of
/// `crop×crop`. Crop offsets are uniform over LR-aligned positions so that
/// the LR crop corresponds exactly to the HR crop.
pub fn sample_clip_batch(
    dataset: &[SequencePair],
    batch: usize,
    t_len: usize,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ClipBatch, Vec<ClipSource>)> {
    let scale = check_clip_constraints(dataset, batch, t_len, crop)?;
    let lc = crop / scale;
    let mut sources = Vec::with_capacity(batch);
    let mut hr = vec![Tensor::zeros(Shape::new(batch, 3, crop, crop)); t_len];
    let mut lr = vec![Tensor::zeros(Shape::new(batch, 3, lc, lc)); t_len];
    for b in 0..batch {
        let si = rng.random_range(0..dataset.len());
        let pair = &dataset[si];
        let start = rng.random_range(0..=pair.len() - t_len);
        let (lh, lw) = pair.lr.dims().expect("validated non-empty");
        let top = rng.random_range(0..=lh - lc);
        let left = rng.random_range(0..=lw - lc);
        sources.push(ClipSource {
            sequence: si,
            start,
            top,
            left,
        });
        for t in 0..t_len {
            copy_crop(&pair.hr.frames()[start + t], top * scale, left * scale, crop, &mut hr[t], b);
            copy_crop(&pair.lr.frames()[start + t], top, left, lc, &mut lr[t], b);
        }
    }
    let clip = ClipBatch { hr, lr, scale };
    clip.validate()?;
    Ok((clip, sources))
}

/// Validates dataset/clip parameters and returns the common scale factor.
pub fn check_clip_constraints(dataset: &[SequencePair], batch: usize, t_len: usize, crop: usize) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::invalid("sample_clip_batch", "empty dataset"));
    }
    if batch == 0 || t_len == 0 {
        return Err(Error::invalid("sample_clip_batch", "batch and T must be at least 1"));
    }
    let scale = dataset[0]
        .scale()
        .ok_or_else(|| Error::invalid("sample_clip_batch", format!("`{}` has no integer scale", dataset[0].name)))?;
    if crop == 0 || crop % scale != 0 {
        return Err(Error::invalid(
            "sample_clip_batch",
            format!("crop {crop} is not a positive multiple of scale {scale}"),
        ));
    }
    for p in dataset {
        if p.scale() != Some(scale) {
            return Err(Error::invalid("sample_clip_batch", format!("`{}` has a different scale", p.name)));
        }
        if p.len() < t_len {
            return Err(Error::invalid(
                "sample_clip_batch",
                format!("`{}` has {} frames, fewer than T = {t_len}", p.name, p.len()),
            ));
        }
        let (h, w) = p.hr.dims().expect("non-empty");
        if crop > h || crop > w {
            return Err(Error::invalid(
                "sample_clip_batch",
                format!("crop {crop} exceeds `{}` frames of {h}×{w}", p.name),
            ));
        }
    }
    Ok(scale)
}

fn copy_crop(frame: &Frame, top: usize, left: usize, size: usize, dst: &mut Tensor<f32>, b: usize) {
    for c in 0..3 {
        let src = frame.plane(c);
        let w = frame.width();
        let plane = dst.plane_mut(b, c);
        for y in 0..size {
            let row = &src[(top + y) * w + left..(top + y) * w + left + size];
            plane[y * size..(y + 1) * size].copy_from_slice(row);
        }
    }
}
