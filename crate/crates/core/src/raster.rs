//! Row-major pixel grids shared by every image-shaped product of the
//! pipeline: RGB images, depth, flow, confidence and masks.

/// Dense row-major grid. `(x, y)` indexes column `x` of row `y`; the origin
/// is the top-left pixel and pixel centers sit on integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i % w, i / w, v))
    }
}

/// RGB image with channels in [0, 1].
pub type Image = Grid<[f64; 3]>;

/// Validity mask; `true` marks usable pixels.
pub type Mask = Grid<bool>;

/// Bilinear sample of a scalar grid at continuous coordinates. Returns
/// `None` when the 2x2 footprint falls outside the image or touches an
/// invalid pixel.
pub fn bilinear<T, F>(grid: &Grid<T>, valid: Option<&Mask>, u: f64, v: f64, fetch: F) -> Option<T>
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    F: Fn(T) -> T,
{
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    if u < 0.0 || v < 0.0 {
        return None;
    }
    if u > (grid.width() - 1) as f64 || v > (grid.height() - 1) as f64 {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    // zero-weight corners must not veto validity
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    if let Some(mask) = valid {
        if !(mask.get(x0, y0) && mask.get(x1, y0) && mask.get(x0, y1) && mask.get(x1, y1)) {
            return None;
        }
    }
    let top = fetch(grid.get(x0, y0)) * (1.0 - fx) + fetch(grid.get(x1, y0)) * fx;
    let bot = fetch(grid.get(x0, y1)) * (1.0 - fx) + fetch(grid.get(x1, y1)) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Bilinear RGB sample; same validity rules as [`bilinear`].
pub fn bilinear_rgb(img: &Image, valid: Option<&Mask>, u: f64, v: f64) -> Option<[f64; 3]> {
    if !u.is_finite() || !v.is_finite() || u < 0.0 || v < 0.0 {
        return None;
    }
    if u > (img.width() - 1) as f64 || v > (img.height() - 1) as f64 {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    if let Some(mask) = valid {
        if !(mask.get(x0, y0) && mask.get(x1, y0) && mask.get(x0, y1) && mask.get(x1, y1)) {
            return None;
        }
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = img.get(x0, y0)[c] * (1.0 - fx) + img.get(x1, y0)[c] * fx;
        let bot = img.get(x0, y1)[c] * (1.0 - fx) + img.get(x1, y1)[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    Some(out)
}

/// Rec. 601 luma.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}
