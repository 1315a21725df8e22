/// Precomputed bilinear interpolation stencils into a `height × width` grid.
///
/// Each query stores the four neighbouring row indices (`y * width + x`) and
/// their weights. Query coordinates are clamped to the grid before the
/// stencil is built, so queries outside the grid repeat the border values.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearTaps {
    height: usize,
    width: usize,
    index: Vec<[u32; 4]>,
    weight: Vec<[f64; 4]>,
}

fn axis_stencil(coord: f64, size: usize) -> (usize, usize, f64) {
    if size == 1 {
        return (0, 0, 0.0);
    }
    let max = (size - 1) as f64;
    let c = if coord.is_nan() {
        0.0
    } else {
        coord.clamp(0.0, max)
    };
    let lo = (c.floor() as usize).min(size - 2);
    (lo, lo + 1, c - lo as f64)
}

impl BilinearTaps {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self {
            height,
            width,
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn with_capacity(height: usize, width: usize, n: usize) -> Self {
        let mut taps = Self::new(height, width);
        taps.index.reserve(n);
        taps.weight.reserve(n);
        taps
    }

    /// Adds a query at continuous grid coordinates (`x` along the width).
    pub fn push(&mut self, x: f64, y: f64) {
        let (x0, x1, fx) = axis_stencil(x, self.width);
        let (y0, y1, fy) = axis_stencil(y, self.height);
        let w = self.width;
        self.index.push([
            (y0 * w + x0) as u32,
            (y0 * w + x1) as u32,
            (y1 * w + x0) as u32,
            (y1 * w + x1) as u32,
        ]);
        self.weight.push([
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]);
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub(crate) fn stencils(&self) -> impl Iterator<Item = (&[u32; 4], &[f64; 4])> {
        self.index.iter().zip(&self.weight)
    }
}
