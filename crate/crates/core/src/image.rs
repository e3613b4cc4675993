/// Row-major 2-D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Image {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "image buffer length");
        Image { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Gradient magnitude `√(gx² + gy²)` with central differences and
    /// replicated borders.
    pub fn gradient_magnitude(&self) -> Image {
        let (h, w) = (self.rows, self.cols);
        let mut out = Image::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let l = self.get(i, j.saturating_sub(1));
                let r = self.get(i, (j + 1).min(w - 1));
                let u = self.get(i.saturating_sub(1), j);
                let d = self.get((i + 1).min(h - 1), j);
                let (gx, gy) = (0.5 * (r - l), 0.5 * (d - u));
                out.set(i, j, (gx * gx + gy * gy).sqrt());
            }
        }
        out
    }
}
