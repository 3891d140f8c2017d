//! RGB frames and frame sequences.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    /// channel-major: all of R, then G, then B
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::invalid(
                "frame",
                format!("{} values for a {height}×{width} RGB frame", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("frame", format!("value {v} outside [0, 1]")));
        }
        Ok(Frame { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * Self::CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Frame { height, width, data }
    }

    /// Batch item `n` of a 3-channel tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != Self::CHANNELS || n >= s.n {
            return Err(Error::invalid("frame", format!("cannot take item {n} of {s} as a frame")));
        }
        Ok(Frame {
            height: s.h,
            width: s.w,
            data: t.item(n).iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.data.clone())
            .expect("frame length matches its shape")
    }

    /// Crop of `h×w` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid(
                "crop",
                format!(
                    "{h}×{w} at ({top}, {left}) exceeds {}×{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(Frame::from_fn(h, w, |c, y, x| self.at(c, top + y, left + x)))
    }
}

/// Frames of one clip, all with identical dimensions.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    pub frame_rate_hint: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != first.dims()) {
                return Err(Error::invalid(
                    "frame sequence",
                    format!(
                        "frame {i} is {}×{}, frame 0 is {}×{}",
                        f.height, f.width, first.height, first.width
                    ),
                ));
            }
        }
        Ok(FrameSequence {
            frames,
            frame_rate_hint: None,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&Frame> {
        self.frames.get(t)
    }

    /// `(height, width)` of the frames, if any.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Frame::dims)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }
}

impl<'a> IntoIterator for &'a FrameSequence {
    type Item = &'a Frame;
    type IntoIter = std::slice::Iter<'a, Frame>;

    fn into_iter(self) -> Self::IntoIter {
        self.frames.iter()
    }
}
