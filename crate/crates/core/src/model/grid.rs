use nalgebra::Vector2;

use super::ModelError;

/// Micro image centers of the MLA, as measured on the sensor.
///
/// The lens id of a center is its index in `centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroLensGrid {
    pub centers: Vec<Vector2<f64>>,
    /// Visibility radius of a micro image, pixels.
    pub micro_image_radius: f64,
    pub sensor_width: f64,
    pub sensor_height: f64,
}

impl MicroLensGrid {
    pub fn new(
        centers: Vec<Vector2<f64>>,
        micro_image_radius: f64,
        sensor_width: f64,
        sensor_height: f64,
    ) -> Result<Self, ModelError> {
        let grid = Self {
            centers,
            micro_image_radius,
            sensor_width,
            sensor_height,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid whose radius is derived from the center spacing.
    pub fn with_default_radius(
        centers: Vec<Vector2<f64>>,
        sensor_width: f64,
        sensor_height: f64,
    ) -> Result<Self, ModelError> {
        let radius = default_micro_image_radius(&centers)
            .ok_or_else(|| ModelError::InvalidGrid("need at least two centers to derive a radius".into()))?;
        Self::new(centers, radius, sensor_width, sensor_height)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.micro_image_radius > 0.0) {
            return Err(ModelError::InvalidGrid(format!(
                "micro_image_radius must be positive, got {}",
                self.micro_image_radius
            )));
        }
        if !(self.sensor_width > 0.0 && self.sensor_height > 0.0) {
            return Err(ModelError::InvalidGrid("sensor dimensions must be positive".into()));
        }
        for (id, c) in self.centers.iter().enumerate() {
            if !(c.x >= 0.0 && c.x <= self.sensor_width && c.y >= 0.0 && c.y <= self.sensor_height) {
                return Err(ModelError::InvalidGrid(format!(
                    "center of lens {id} ({}, {}) lies outside the sensor",
                    c.x, c.y
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn in_sensor(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.sensor_width && p.y <= self.sensor_height
    }
}

/// Half the smallest nearest-neighbor distance minus a one pixel margin.
pub fn default_micro_image_radius(centers: &[Vector2<f64>]) -> Option<f64> {
    if centers.len() < 2 {
        return None;
    }
    let index = PointIndex::new(centers, estimate_spacing(centers));
    let mut best = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        if let Some((_, d)) = index.nearest_excluding(c, i) {
            best = best.min(d);
        }
    }
    Some(0.5 * best - 1.0).filter(|r| *r > 0.0)
}

fn estimate_spacing(points: &[Vector2<f64>]) -> f64 {
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let area = ((hi.x - lo.x).max(1.0)) * ((hi.y - lo.y).max(1.0));
    (area / points.len() as f64).sqrt().max(1.0)
}

/// Uniform bucket grid over 2D points for radius queries.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vector2<f64>>,
    origin: Vector2<f64>,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointIndex {
    pub fn new(points: &[Vector2<f64>], cell: f64) -> Self {
        let cell = cell.max(1e-6);
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector2::zeros();
            hi = Vector2::zeros();
        }
        let cols = ((hi.x - lo.x) / cell).floor() as usize + 1;
        let rows = ((hi.y - lo.y) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let cx = ((p.x - lo.x) / cell).floor() as usize;
            let cy = ((p.y - lo.y) / cell).floor() as usize;
            buckets[cy.min(rows - 1) * cols + cx.min(cols - 1)].push(i);
        }
        Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            cols,
            rows,
            buckets,
        }
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    /// Indices of all points within `radius` of `q`, in ascending index order.
    pub fn within(&self, q: &Vector2<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        let to_cell = |v: f64, o: f64, n: usize| -> (usize, usize) {
            let lo = ((v - radius - o) / self.cell).floor();
            let hi = ((v + radius - o) / self.cell).floor();
            let clamp = |x: f64| x.max(0.0).min((n - 1) as f64) as usize;
            (clamp(lo), clamp(hi))
        };
        if q.x + radius < self.origin.x || q.y + radius < self.origin.y {
            return out;
        }
        let (x0, x1) = to_cell(q.x, self.origin.x, self.cols);
        let (y0, y1) = to_cell(q.y, self.origin.y, self.rows);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &i in &self.buckets[cy * self.cols + cx] {
                    if (self.points[i] - q).norm_squared() <= r2 {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn nearest_excluding(&self, q: &Vector2<f64>, exclude: usize) -> Option<(usize, f64)> {
        let mut radius = self.cell;
        let limit = self.cell * (self.cols.max(self.rows) as f64 + 2.0);
        while radius <= 2.0 * limit {
            let best = self
                .within(q, radius)
                .into_iter()
                .filter(|&i| i != exclude)
                .map(|i| (i, (self.points[i] - q).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if best.is_some() {
                return best;
            }
            radius *= 2.0;
        }
        None
    }
}
