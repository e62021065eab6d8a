//! Mask clean-up: 8-connected component filtering and hole filling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND, IRIS, NUM_CLASSES, PUPIL};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x);
            }
        }
        m
    }

    /// Pixels of `labels` that satisfy `pred`.
    pub fn from_labels(labels: &LabelMap, pred: impl Fn(u8) -> bool) -> Self {
        BinaryMask {
            height: labels.height(),
            width: labels.width(),
            data: labels.data().iter().map(|&v| pred(v)).collect(),
        }
    }

    /// Parses rows of `#`/`1` (set) and anything else (clear).
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Self::from_fn(height, width, |y, x| {
            matches!(rows[y].as_bytes()[x], b'#' | b'1')
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// 1-based rank after sorting (1 = largest).
    pub label: usize,
    pub area: usize,
    /// `(row, col)` coordinates in discovery order; the first one is the
    /// component's first pixel in raster order.
    pub pixels: Vec<(usize, usize)>,
}

const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

fn flood(
    seed: (usize, usize),
    h: usize,
    w: usize,
    neighbours: &[(isize, isize)],
    member: impl Fn(usize) -> bool,
    seen: &mut [bool],
) -> Vec<(usize, usize)> {
    let mut pixels = vec![seed];
    let mut queue = VecDeque::from([seed]);
    seen[seed.0 * w + seed.1] = true;
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in neighbours {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let i = ny as usize * w + nx as usize;
            if !seen[i] && member(i) {
                seen[i] = true;
                pixels.push((ny as usize, nx as usize));
                queue.push_back((ny as usize, nx as usize));
            }
        }
    }
    pixels
}

/// Maximal 8-connected foreground components, largest first; equal areas
/// are ordered by their first pixel in raster order.
pub fn connected_components_8(m: &BinaryMask) -> Vec<Component> {
    let (h, w) = (m.height, m.width);
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for i in 0..h * w {
        if m.data[i] && !seen[i] {
            let pixels = flood((i / w, i % w), h, w, &N8, |j| m.data[j], &mut seen);
            comps.push(Component {
                label: 0,
                area: pixels.len(),
                pixels,
            });
        }
    }
    // stable sort keeps raster order of seeds among equal areas
    comps.sort_by_key(|c| std::cmp::Reverse(c.area));
    for (i, c) in comps.iter_mut().enumerate() {
        c.label = i + 1;
    }
    comps
}

/// Restricts the foreground to its `k` largest components.
pub fn keep_largest(m: &BinaryMask, k: usize) -> BinaryMask {
    let mut out = BinaryMask::new(m.height, m.width);
    for c in connected_components_8(m).iter().take(k) {
        for &(y, x) in &c.pixels {
            out.set(y, x, true);
        }
    }
    out
}

/// Sets every 4-connected background region that does not touch the
/// image border.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.height, m.width);
    let mut outside = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let i = y * w + x;
            if border && !m.data[i] && !outside[i] {
                flood((y, x), h, w, &N4, |j| !m.data[j], &mut outside);
            }
        }
    }
    BinaryMask {
        height: h,
        width: w,
        data: (0..h * w).map(|i| m.data[i] || !outside[i]).collect(),
    }
}

/// Upper bound on clean-up passes; real masks settle in one or two.
const MAX_PASSES: usize = 8;

/// Removes speckle and fills iris and pupil holes.
///
/// 1. The union of eye classes is reduced to its largest 8-connected
///    component; everything else becomes background.
/// 2. The iris alone is reduced to its largest component; removed iris
///    pixels become background.
/// 3. Holes of the iris and of the pupil are filled, with pupil taking
///    precedence over iris, iris over sclera.
///
/// The three stages repeat until the mask stops changing, so the result
/// is a fixed point.
pub fn clean_mask(pred: &LabelMap) -> Result<LabelMap> {
    pred.validate()?;
    let mut cur = pred.clone();
    for _ in 0..MAX_PASSES {
        let next = clean_pass(&cur);
        if next == cur {
            return Ok(cur);
        }
        cur = next;
    }
    Err(Error::Data(format!(
        "mask clean-up did not settle within {MAX_PASSES} passes"
    )))
}

fn clean_pass(input: &LabelMap) -> LabelMap {
    let mut out = input.clone();
    let (h, w) = (out.height(), out.width());

    let eye = keep_largest(&BinaryMask::from_labels(&out, |v| v != BACKGROUND), 1);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !eye.data[i] {
            *v = BACKGROUND;
        }
    }

    let iris = keep_largest(&BinaryMask::from_labels(&out, |v| v == IRIS), 1);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if *v == IRIS && !iris.data[i] {
            *v = BACKGROUND;
        }
    }

    let iris = fill_holes(&BinaryMask::from_labels(&out, |v| v == IRIS));
    let pupil = fill_holes(&BinaryMask::from_labels(&out, |v| v == PUPIL));
    for i in 0..h * w {
        if pupil.data[i] {
            out.data_mut()[i] = PUPIL;
        } else if iris.data[i] {
            out.data_mut()[i] = IRIS;
        }
    }
    debug_assert!(out.data().iter().all(|&v| (v as usize) < NUM_CLASSES));
    out
}
