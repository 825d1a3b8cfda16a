//! Map-unit bounding boxes and the north-up pixel grid shared by every
//! tile in a store.
//!
//! All tiles use the same pixel size and are aligned to a global grid whose
//! column index is `floor(x / pixel_size)` and whose row index is
//! `floor(-y / pixel_size)` (rows grow southward). A tile's origin is its
//! top-left corner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance, in pixels, for treating a coordinate as lying on a grid line.
const SNAP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    /// x of the top-left corner.
    pub origin_x: f64,
    /// y of the top-left corner.
    pub origin_y: f64,
    pub pixel_size: f64,
    /// EPSG code.
    pub crs: u32,
}

impl GeoTransform {
    /// Global grid index of this tile's top-left pixel as `(row, col)`.
    pub fn grid_origin(&self) -> (i64, i64) {
        (
            (-self.origin_y / self.pixel_size).round() as i64,
            (self.origin_x / self.pixel_size).round() as i64,
        )
    }

    pub fn window(&self, height: usize, width: usize) -> GridWindow {
        let (row0, col0) = self.grid_origin();
        GridWindow {
            row0,
            col0,
            height,
            width,
        }
    }
}

/// Axis-aligned box in map units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let b = Self {
            min_x,
            min_y,
            max_x,
            max_y,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidRegion("non-finite coordinate".into()));
        }
        if !(self.min_x < self.max_x && self.min_y < self.max_y) {
            return Err(Error::InvalidRegion(format!(
                "min must be below max on both axes: {self:?}"
            )));
        }
        Ok(())
    }

    /// Parses `x0,y0,x1,y1`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidRegion(format!("{text:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c, d] => Self::new(*a, *b, *c, *d),
            _ => Err(Error::InvalidRegion(format!("{text:?}: expected 4 numbers"))),
        }
    }

    /// Smallest grid window containing the box: edges are snapped outward
    /// to pixel boundaries.
    pub fn snap(&self, pixel_size: f64) -> GridWindow {
        let col0 = (self.min_x / pixel_size + SNAP_EPS).floor() as i64;
        let col1 = (self.max_x / pixel_size - SNAP_EPS).ceil() as i64;
        let row0 = (-self.max_y / pixel_size + SNAP_EPS).floor() as i64;
        let row1 = (-self.min_y / pixel_size - SNAP_EPS).ceil() as i64;
        GridWindow {
            row0,
            col0,
            height: (row1 - row0).max(1) as usize,
            width: (col1 - col0).max(1) as usize,
        }
    }
}

/// Rectangle of global grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWindow {
    pub row0: i64,
    pub col0: i64,
    pub height: usize,
    pub width: usize,
}

impl GridWindow {
    pub fn row1(&self) -> i64 {
        self.row0 + self.height as i64
    }

    pub fn col1(&self) -> i64 {
        self.col0 + self.width as i64
    }

    pub fn intersect(&self, other: &GridWindow) -> Option<GridWindow> {
        let r0 = self.row0.max(other.row0);
        let r1 = self.row1().min(other.row1());
        let c0 = self.col0.max(other.col0);
        let c1 = self.col1().min(other.col1());
        (r0 < r1 && c0 < c1).then(|| GridWindow {
            row0: r0,
            col0: c0,
            height: (r1 - r0) as usize,
            width: (c1 - c0) as usize,
        })
    }

    pub fn bbox(&self, pixel_size: f64) -> BBox {
        BBox {
            min_x: self.col0 as f64 * pixel_size,
            max_x: self.col1() as f64 * pixel_size,
            max_y: -(self.row0 as f64) * pixel_size,
            min_y: -(self.row1() as f64) * pixel_size,
        }
    }

    /// Local `(row, col)` of the cell containing map point `(x, y)`, if inside.
    pub fn locate(&self, x: f64, y: f64, pixel_size: f64) -> Option<(usize, usize)> {
        let col = (x / pixel_size).floor() as i64;
        let row = (-y / pixel_size).floor() as i64;
        (row >= self.row0 && row < self.row1() && col >= self.col0 && col < self.col1())
            .then(|| ((row - self.row0) as usize, (col - self.col0) as usize))
    }

    /// Map coordinates of the centre of local cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize, pixel_size: f64) -> (f64, f64) {
        (
            (self.col0 as f64 + col as f64 + 0.5) * pixel_size,
            -((self.row0 as f64 + row as f64 + 0.5) * pixel_size),
        )
    }
}
