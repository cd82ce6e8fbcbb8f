use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::{Image, Sample};
use crate::error::{Error, Result};
use crate::supervision::keypoints::mirror_joint;
use crate::supervision::KeypointSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    /// Replicate-border padding before the random crop, pixels.
    pub pad: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            pad: 10,
        }
    }
}

/// Horizontal flip. Pixel column x moves to w-1-x, visible keypoints follow,
/// and left/right joints trade places so "left wrist" stays the person's left.
pub fn mirror(sample: &Sample) -> Sample {
    let img = &sample.image;
    let (h, w) = (img.height(), img.width());
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(data.len(), 3 * h * w);
    let mut kps = KeypointSet::invisible();
    for (j, &kp) in sample.keypoints.joints.iter().enumerate() {
        let mut kp = kp;
        if kp.visible {
            kp.x = (w - 1) as f64 - kp.x;
        }
        kps.joints[mirror_joint(j)] = kp;
    }
    Sample {
        id: sample.id.clone(),
        image: Image::new(h, w, data).expect("same size"),
        labels: sample.labels.clone(),
        keypoints: kps,
    }
}

/// Pads by `pad` pixels (replicating the border) and crops the original size
/// back out with its top-left corner at `(off_y, off_x)` of the padded image.
/// Offsets run over `0..=2·pad`; `(pad, pad)` is the identity.
pub fn crop(sample: &Sample, pad: usize, off_y: usize, off_x: usize) -> Result<Sample> {
    if off_y > 2 * pad || off_x > 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "crop offset ({off_y}, {off_x}) exceeds 2*pad = {}",
            2 * pad
        )));
    }
    let img = &sample.image;
    let (h, w) = (img.height(), img.width());
    let dy = off_y as i64 - pad as i64;
    let dx = off_x as i64 - pad as i64;
    let src = img.data();
    let mut data = vec![0u8; src.len()];
    for c in 0..3 {
        for y in 0..h {
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let (srow, drow) = ((c * h + sy) * w, (c * h + y) * w);
            for x in 0..w {
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                data[drow + x] = src[srow + sx];
            }
        }
    }
    let mut kps = sample.keypoints;
    for kp in kps.joints.iter_mut().filter(|k| k.visible) {
        kp.x -= dx as f64;
        kp.y -= dy as f64;
    }
    kps.clip_to(w, h);
    Ok(Sample {
        id: sample.id.clone(),
        image: Image::new(h, w, data)?,
        labels: sample.labels.clone(),
        keypoints: kps,
    })
}

/// Random mirror followed by a random pad-and-crop. Labels never change.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let flipped = rng.gen_bool(cfg.mirror_prob.clamp(0.0, 1.0));
    let oy = rng.gen_range(0..=2 * cfg.pad);
    let ox = rng.gen_range(0..=2 * cfg.pad);
    let base = if flipped {
        mirror(sample)
    } else {
        sample.clone()
    };
    crop(&base, cfg.pad, oy, ox).expect("offsets drawn within range")
}
