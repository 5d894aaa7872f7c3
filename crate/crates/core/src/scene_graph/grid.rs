use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::SceneGraphError;

/// One cell of the uniform 3×3 image partition. Ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GridCell {
    TopLeft,
    TopCenter,
    TopRight,
    MiddleLeft,
    Center,
    MiddleRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

impl GridCell {
    pub const ALL: [GridCell; 9] = [
        GridCell::TopLeft,
        GridCell::TopCenter,
        GridCell::TopRight,
        GridCell::MiddleLeft,
        GridCell::Center,
        GridCell::MiddleRight,
        GridCell::BottomLeft,
        GridCell::BottomCenter,
        GridCell::BottomRight,
    ];

    /// Returns `None` unless `row, col < 3`.
    pub fn from_row_col(row: usize, col: usize) -> Option<GridCell> {
        if row < 3 && col < 3 {
            Some(Self::ALL[row * 3 + col])
        } else {
            None
        }
    }

    pub fn row_col(self) -> (usize, usize) {
        let idx = self as usize;
        (idx / 3, idx % 3)
    }

    pub fn name(self) -> &'static str {
        match self {
            GridCell::TopLeft => "top-left",
            GridCell::TopCenter => "top-center",
            GridCell::TopRight => "top-right",
            GridCell::MiddleLeft => "middle-left",
            GridCell::Center => "center",
            GridCell::MiddleRight => "middle-right",
            GridCell::BottomLeft => "bottom-left",
            GridCell::BottomCenter => "bottom-center",
            GridCell::BottomRight => "bottom-right",
        }
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown grid cell name `{0}`")]
pub struct ParseGridCellError(pub String);

impl FromStr for GridCell {
    type Err = ParseGridCellError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GridCell::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ParseGridCellError(s.to_string()))
    }
}

impl Serialize for GridCell {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for GridCell {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps a point to its grid cell. A point on an internal gridline belongs to
/// the higher-index cell; the right and bottom image edges clamp to index 2.
pub fn grid_cell(
    point: (f64, f64),
    image_width: u32,
    image_height: u32,
) -> Result<GridCell, SceneGraphError> {
    let (x, y) = point;
    let (w, h) = (image_width as f64, image_height as f64);
    let inside = |v: f64, max: f64| v.is_finite() && (0.0..=max).contains(&v);
    if image_width == 0 || image_height == 0 || !inside(x, w) || !inside(y, h) {
        return Err(SceneGraphError::OutOfRange {
            x,
            y,
            width: image_width,
            height: image_height,
        });
    }
    let col = ((3.0 * x / w).floor() as usize).min(2);
    let row = ((3.0 * y / h).floor() as usize).min(2);
    Ok(GridCell::from_row_col(row, col).expect("indices clamped"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(grid_cell((0.0, 0.0), 300, 300).unwrap(), GridCell::TopLeft);
        assert_eq!(
            grid_cell((150.0, 150.0), 300, 300).unwrap(),
            GridCell::Center
        );
        assert_eq!(
            grid_cell((299.9, 299.9), 300, 300).unwrap(),
            GridCell::BottomRight
        );
        assert_eq!(
            grid_cell((100.0, 0.0), 300, 300).unwrap(),
            GridCell::TopCenter
        );
        assert_eq!(
            grid_cell((300.0, 300.0), 300, 300).unwrap(),
            GridCell::BottomRight
        );
    }

    #[test]
    fn outside_points_rejected() {
        assert!(grid_cell((-0.1, 5.0), 300, 300).is_err());
        assert!(grid_cell((5.0, 300.5), 300, 300).is_err());
        assert!(grid_cell((f64::NAN, 5.0), 300, 300).is_err());
    }

    #[test]
    fn row_col_bijection() {
        for (i, cell) in GridCell::ALL.into_iter().enumerate() {
            let (r, c) = cell.row_col();
            assert_eq!(r * 3 + c, i);
            assert_eq!(GridCell::from_row_col(r, c), Some(cell));
            assert_eq!(cell.name().parse::<GridCell>().unwrap(), cell);
        }
        assert_eq!(GridCell::from_row_col(3, 0), None);
    }
}
