//! Point cloud scenes: multi-frame points, groundtruth boxes, and the
//! plain-text file formats used by the CLI.
//!
//! Points file: a header line `frames,<n>,<t_0>,...,<t_{n-1}>` with the
//! per-frame time offsets in seconds (oldest first, newest must be 0),
//! then one point per line as `x,y,z,intensity,elongation,frame_index`.
//!
//! Groundtruth file: one box per line, `cx,cy,cz,l,w,h,heading,class`.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::Box3D;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["vehicle", "pedestrian"];

pub fn class_id(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| Error::Parse(format!("unknown class {name}")))
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub elongation: f64,
    /// Seconds relative to the newest frame (non-positive).
    pub time_offset: f64,
}

/// Groundtruth box with its class label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub b: Box3D,
    pub class: usize,
}

/// Square-ish world extent covered by the BEV grid. The grid origin sits
/// at the minimum corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub width: f64,
    pub height: f64,
}

impl Extent {
    pub fn square(min_x: f64, min_y: f64, side: f64) -> Self {
        Extent { min_x, min_y, width: side, height: side }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x
            && x < self.min_x + self.width
            && y >= self.min_y
            && y < self.min_y + self.height
    }
}

/// One to three frames of points in a common world frame, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScene {
    pub extent: Extent,
    /// Oldest first; the newest frame has time offset 0.
    pub frames: Vec<Vec<Point>>,
    pub boxes: Vec<GtBox>,
}

impl PointCloudScene {
    pub fn new(extent: Extent, frames: Vec<Vec<Point>>, boxes: Vec<GtBox>) -> Result<Self> {
        if frames.is_empty() || frames.len() > 3 {
            return Err(Error::Contract(format!("expected 1-3 frames, got {}", frames.len())));
        }
        let offsets: Vec<f64> = frames
            .iter()
            .map(|f| f.first().map_or(0.0, |p| p.time_offset))
            .collect();
        if offsets.last().copied().unwrap_or(0.0) != 0.0 {
            return Err(Error::Contract("newest frame must have time offset 0".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract("frames must be ordered oldest to newest".into()));
        }
        Ok(PointCloudScene { extent, frames, boxes })
    }

    pub fn all_points(&self) -> impl Iterator<Item = &Point> {
        self.frames.iter().flatten()
    }

    pub fn num_points(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Count of points inside a box across all frames.
    pub fn points_inside(&self, b: &Box3D) -> usize {
        self.all_points().filter(|p| b.contains(p.x, p.y, p.z)).count()
    }

    pub fn points_to_string(&self) -> String {
        let mut s = String::new();
        let offsets: Vec<String> = self
            .frames
            .iter()
            .map(|f| format!("{}", f.first().map_or(0.0, |p| p.time_offset)))
            .collect();
        let _ = writeln!(s, "frames,{},{}", self.frames.len(), offsets.join(","));
        for (fi, frame) in self.frames.iter().enumerate() {
            for p in frame {
                let _ = writeln!(s, "{},{},{},{},{},{}", p.x, p.y, p.z, p.intensity, p.elongation, fi);
            }
        }
        s
    }

    pub fn boxes_to_string(&self) -> String {
        let mut s = String::new();
        for gt in &self.boxes {
            let b = &gt.b;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, CLASS_NAMES[gt.class]
            );
        }
        s
    }

    pub fn save(&self, points_path: &Path, boxes_path: &Path) -> Result<()> {
        std::fs::write(points_path, self.points_to_string())?;
        std::fs::write(boxes_path, self.boxes_to_string())?;
        Ok(())
    }

    pub fn load(points_path: &Path, boxes_path: &Path, extent: Extent) -> Result<Self> {
        let points_text = std::fs::read_to_string(points_path)?;
        let boxes_text = std::fs::read_to_string(boxes_path)?;
        Self::parse(&points_text, &boxes_text, extent)
    }

    pub fn parse(points_text: &str, boxes_text: &str, extent: Extent) -> Result<Self> {
        let mut lines = points_text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty points file".into()))?;
        let mut parts = header.split(',');
        if parts.next() != Some("frames") {
            return Err(Error::Parse("points file must start with a frames header".into()));
        }
        let n_frames: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("bad frame count in header".into()))?;
        let offsets: Vec<f64> = parts
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse("bad timestamp".into())))
            .collect::<Result<_>>()?;
        if offsets.len() != n_frames {
            return Err(Error::Parse(format!(
                "header lists {} timestamps for {} frames",
                offsets.len(),
                n_frames
            )));
        }

        let mut frames: Vec<Vec<Point>> = vec![Vec::new(); n_frames];
        for line in lines {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != 6 {
                return Err(Error::Parse(format!("expected 6 fields per point, got: {line}")));
            }
            let num = |i: usize| -> Result<f64> {
                vals[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number in point line: {line}")))
            };
            let fi: usize = vals[5]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad frame index: {line}")))?;
            if fi >= n_frames {
                return Err(Error::Parse(format!("frame index {fi} out of range")));
            }
            let p = Point {
                x: num(0)?,
                y: num(1)?,
                z: num(2)?,
                intensity: num(3)?,
                elongation: num(4)?,
                time_offset: offsets[fi],
            };
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Parse(format!("non-finite coordinate: {line}")));
            }
            frames[fi].push(p);
        }

        let mut boxes = Vec::new();
        for line in boxes_text.lines().filter(|l| !l.trim().is_empty()) {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != 8 {
                return Err(Error::Parse(format!("expected 8 fields per box, got: {line}")));
            }
            let num = |i: usize| -> Result<f64> {
                vals[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number in box line: {line}")))
            };
            boxes.push(GtBox {
                b: Box3D::new(num(0)?, num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?),
                class: class_id(vals[7].trim())?,
            });
        }
        Self::new(extent, frames, boxes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> PointCloudScene {
        let extent = Extent::square(0.0, 0.0, 10.0);
        let frames = vec![
            vec![Point { x: 1.0, y: 2.0, z: 0.5, intensity: 0.3, elongation: 0.1, time_offset: -0.1 }],
            vec![Point { x: 3.0, y: 4.0, z: 1.0, intensity: 0.7, elongation: 0.2, time_offset: 0.0 }],
        ];
        let boxes = vec![GtBox { b: Box3D::new(2.0, 2.0, 0.5, 2.0, 1.0, 1.0, 0.4), class: 0 }];
        PointCloudScene::new(extent, frames, boxes).unwrap()
    }

    #[test]
    fn text_roundtrip() {
        let scene = tiny_scene();
        let parsed = PointCloudScene::parse(
            &scene.points_to_string(),
            &scene.boxes_to_string(),
            scene.extent,
        )
        .unwrap();
        assert_eq!(parsed, scene);
    }

    #[test]
    fn newest_frame_must_be_time_zero() {
        let extent = Extent::square(0.0, 0.0, 10.0);
        let frames = vec![vec![Point {
            x: 1.0,
            y: 2.0,
            z: 0.5,
            intensity: 0.0,
            elongation: 0.0,
            time_offset: -0.1,
        }]];
        assert!(PointCloudScene::new(extent, frames, vec![]).is_err());
    }

    #[test]
    fn rejects_unknown_class() {
        assert!(class_id("bicycle").is_err());
        assert_eq!(class_id("vehicle").unwrap(), 0);
        assert_eq!(class_id("pedestrian").unwrap(), 1);
    }
}
