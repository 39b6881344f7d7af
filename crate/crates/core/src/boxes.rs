use std::fmt;

use crate::error::{invalid, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return invalid(format!("degenerate box {self}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Box spanned by distances `(l, t, r, b)` around a point.
    pub fn from_distances(x: f64, y: f64, d: [f64; 4]) -> Self {
        Self {
            x1: x - d[0],
            y1: y - d[1],
            x2: x + d[2],
            y2: y + d[3],
        }
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }
}

impl fmt::Display for BoxXYXY {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A scored box. `class_id` is the episode's target class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxXYXY,
}

impl Detection {
    /// `class_id score x1 y1 x2 y2`
    pub fn to_line(&self) -> String {
        format!(
            "{} {:.6} {:.3} {:.3} {:.3} {:.3}",
            self.class_id, self.score, self.bbox.x1, self.bbox.y1, self.bbox.x2, self.bbox.y2
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return invalid(format!("detection line needs 6 fields: {line:?}"));
        }
        let class_id = fields[0]
            .parse()
            .map_err(|_| crate::Error::Invalid(format!("bad class id in {line:?}")))?;
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| crate::Error::Invalid(format!("bad number in {line:?}")))?;
        }
        Ok(Self {
            class_id,
            score: v[0],
            bbox: BoxXYXY::new(v[1], v[2], v[3], v[4])?,
        })
    }
}
