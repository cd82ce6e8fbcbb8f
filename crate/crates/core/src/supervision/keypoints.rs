//! COCO-ordered pedestrian keypoints and their mapping onto heatmap cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;

/// COCO joint names in canonical order. "Left"/"right" are the person's own.
pub const COCO_JOINTS: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Left/right joint pairs exchanged by a horizontal mirror.
pub const FLIP_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];

/// Index of a joint by COCO name. Also accepts the plural group names used
/// in assignment files ("eyes", "ears", "shoulders", "elbows", "wrists",
/// "hands", "hips", "knees", "ankles", "feet"), which expand to both sides.
pub fn joint_ids(name: &str) -> Option<Vec<usize>> {
    if let Some(i) = COCO_JOINTS.iter().position(|&j| j == name) {
        return Some(vec![i]);
    }
    let pair = |l: usize| Some(vec![l, l + 1]);
    match name {
        "eyes" => pair(1),
        "ears" => pair(3),
        "shoulders" => pair(5),
        "elbows" => pair(7),
        "wrists" | "hands" => pair(9),
        "hips" => pair(11),
        "knees" => pair(13),
        "ankles" | "feet" => pair(15),
        _ => None,
    }
}

pub fn mirror_joint(j: usize) -> usize {
    for &(l, r) in &FLIP_PAIRS {
        if j == l {
            return r;
        }
        if j == r {
            return l;
        }
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub const INVISIBLE: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };
}

/// 17 joints in input-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub joints: [Keypoint; NUM_JOINTS],
}

impl Default for KeypointSet {
    fn default() -> Self {
        Self::invisible()
    }
}

impl KeypointSet {
    pub fn invisible() -> Self {
        KeypointSet {
            joints: [Keypoint::INVISIBLE; NUM_JOINTS],
        }
    }

    /// Marks joints outside `[0, width) × [0, height)` invisible.
    pub fn clip_to(&mut self, width: usize, height: usize) {
        for j in &mut self.joints {
            if j.visible && !in_bounds(j.x, j.y, width, height) {
                j.visible = false;
            }
        }
    }

    pub fn all_visible_in_bounds(&self, width: usize, height: usize) -> bool {
        self.joints
            .iter()
            .all(|j| !j.visible || in_bounds(j.x, j.y, width, height))
    }

    pub fn visible_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visible).count()
    }
}

fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64
}

/// Heatmap cell `(col, row) = (floor(x / r), floor(y / r))` of an image point.
pub fn map_keypoint(x: f64, y: f64, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidArgument("map_keypoint: stride must be >= 1".into()));
    }
    if !(x >= 0.0 && y >= 0.0) || !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "map_keypoint: ({x}, {y}) is outside the image"
        )));
    }
    let r = stride as f64;
    Ok(((x / r).floor() as usize, (y / r).floor() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_division_mapping() {
        assert_eq!(map_keypoint(33.0, 17.0, 16).unwrap(), (2, 1));
        assert_eq!(map_keypoint(0.0, 0.0, 7).unwrap(), (0, 0));
        assert_eq!(map_keypoint(15.99, 16.0, 16).unwrap(), (0, 1));
        assert!(map_keypoint(-1.0, 0.0, 8).is_err());
    }

    #[test]
    fn last_pixel_maps_inside_heatmap() {
        for r in 1..=9usize {
            for h in (r..=40).step_by(r) {
                for w in (r..=40).step_by(r) {
                    let (c, row) = map_keypoint((w - 1) as f64, (h - 1) as f64, r).unwrap();
                    assert_eq!((c, row), ((w - 1) / r, (h - 1) / r));
                    assert!(c < w / r && row < h / r);
                }
            }
        }
    }

    #[test]
    fn mirror_pairs_are_involutive() {
        for j in 0..NUM_JOINTS {
            assert_eq!(mirror_joint(mirror_joint(j)), j);
            let a = COCO_JOINTS[j];
            let b = COCO_JOINTS[mirror_joint(j)];
            let swapped = if let Some(rest) = a.strip_prefix("left_") {
                format!("right_{rest}")
            } else if let Some(rest) = a.strip_prefix("right_") {
                format!("left_{rest}")
            } else {
                a.to_string()
            };
            assert_eq!(b, swapped);
        }
    }

    #[test]
    fn group_names_expand() {
        assert_eq!(joint_ids("hands"), Some(vec![9, 10]));
        assert_eq!(joint_ids("feet"), Some(vec![15, 16]));
        assert_eq!(joint_ids("nose"), Some(vec![0]));
        assert_eq!(joint_ids("tail"), None);
    }
}
