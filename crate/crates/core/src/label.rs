//! Class-id masks and conversions to and from per-class tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const NUM_CLASSES: usize = 4;

/// Class names in id order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "sclera", "iris", "pupil"];

pub const BACKGROUND: u8 = 0;
pub const SCLERA: u8 = 1;
pub const IRIS: u8 = 2;
pub const PUPIL: u8 = 3;

/// Row-major `height × width` grid of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a map, rejecting ids outside `0..NUM_CLASSES` with the offending coordinate.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMsg(format!(
                "{} labels cannot fill a {height}x{width} map",
                data.len()
            )));
        }
        let map = LabelMap {
            height,
            width,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "label {} at (row {}, col {}) is outside 0..{NUM_CLASSES}",
                self.data[i],
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Sorted distinct labels present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Stacks label maps into a `[n, NUM_CLASSES, h, w]` one-hot tensor.
pub fn one_hot<T: Real>(maps: &[LabelMap]) -> Result<Tensor4<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::ShapeMsg("one_hot of an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(m) = maps.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::ShapeMsg(format!(
            "label maps disagree on size: {h}x{w} vs {}x{}",
            m.height, m.width
        )));
    }
    for m in maps {
        m.validate()?;
    }
    Ok(Tensor4::from_fn(
        [maps.len(), NUM_CLASSES, h, w],
        |n, c, y, x| {
            if maps[n].get(y, x) as usize == c {
                T::one()
            } else {
                T::zero()
            }
        },
    ))
}

/// Per-pixel argmax over channels for each batch item; ties go to the lowest class index.
pub fn argmax_channels<T: Real>(t: &Tensor4<T>) -> Vec<LabelMap> {
    let d = t.dims();
    (0..d.n)
        .map(|n| {
            LabelMap::from_fn(d.h, d.w, |y, x| {
                let mut best = 0;
                let mut best_v = t.get(n, 0, y, x);
                for c in 1..d.c {
                    let v = t.get(n, c, y, x);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u8
            })
        })
        .collect()
}
