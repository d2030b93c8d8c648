/// Dense displacement field `(u, v)` = (column, row) displacement per pixel,
/// with a validity mask. Invalid pixels store zero displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    uv: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            uv: vec![[0.0; 2]; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, uv: [f64; 2]) -> Self {
        Self {
            width,
            height,
            uv: vec![uv; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    pub fn same_extent(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        self.get_index(y * self.width + x)
    }

    pub fn get_index(&self, px: usize) -> Option<[f64; 2]> {
        self.valid[px].then(|| self.uv[px])
    }

    /// Marks the pixel valid; non-finite displacements invalidate it instead.
    pub fn set(&mut self, x: usize, y: usize, uv: [f64; 2]) {
        self.set_index(y * self.width + x, uv)
    }

    pub fn set_index(&mut self, px: usize, uv: [f64; 2]) {
        if uv[0].is_finite() && uv[1].is_finite() {
            self.uv[px] = uv;
            self.valid[px] = true;
        } else {
            self.invalidate_index(px);
        }
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.invalidate_index(y * self.width + x)
    }

    pub fn invalidate_index(&mut self, px: usize) {
        self.uv[px] = [0.0; 2];
        self.valid[px] = false;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }
}
