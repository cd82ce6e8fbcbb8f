//! Keypoint-grounded synthetic pedestrians.
//!
//! Each image shows a jittered stick figure on a noisy gray background.
//! Global attributes tint the whole background (one color channel each).
//! A positive local attribute paints a saturated disk of its own color
//! centered on one of its visible assigned joints, so its evidence sits
//! exactly where the keypoint supervision points.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::{Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::model::{AttributeSchema, IMAGE_CHANNELS};
use crate::supervision::{Keypoint, KeypointSet, NUM_JOINTS};

/// Blob colors, one per local attribute in schema order. All have at least
/// one saturated channel, which the gray background and skeleton never reach.
pub const PALETTE: [[u8; 3]; 12] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
    [0, 255, 128],
    [0, 128, 255],
    [255, 0, 128],
    [128, 255, 0],
];

// Joint layout on a 96×128 canvas, x relative to the body's center line.
// The person faces the camera, so their left is image right.
const TEMPLATE: [(f64, f64); NUM_JOINTS] = [
    (0.0, 16.0),
    (4.0, 13.0),
    (-4.0, 13.0),
    (8.0, 15.0),
    (-8.0, 15.0),
    (16.0, 32.0),
    (-16.0, 32.0),
    (21.0, 52.0),
    (-21.0, 52.0),
    (24.0, 72.0),
    (-24.0, 72.0),
    (10.0, 68.0),
    (-10.0, 68.0),
    (11.0, 92.0),
    (-11.0, 92.0),
    (12.0, 116.0),
    (-12.0, 116.0),
];

const BONES: [(usize, usize); 12] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

const BACKGROUND: f64 = 0.5;
const SKELETON: f64 = 0.2;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub schema: AttributeSchema,
    /// Per-attribute probability of a positive label, in schema order.
    pub positive_rates: Vec<f64>,
    pub blob_radius: usize,
    /// Uniform per-joint displacement bound, pixels.
    pub skeleton_jitter: f64,
    /// Uniform per-pixel noise amplitude, in [0, 1] intensity units.
    pub noise: f64,
    /// Background shift applied by a positive global attribute.
    pub tint: f64,
    /// Probability that a joint is unannotated (invisible).
    pub occlusion_prob: f64,
    /// The model's down stride; image dims must be multiples of it.
    pub down_stride: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 128,
            width: 96,
            schema: AttributeSchema::synthetic_default(),
            positive_rates: vec![
                0.5, 0.35, 0.4, 0.3, 0.45, 0.3, 0.25, 0.4, 0.3, 0.35, 0.45, 0.3,
            ],
            blob_radius: 4,
            skeleton_jitter: 3.0,
            noise: 0.08,
            tint: 0.15,
            occlusion_prob: 0.1,
            down_stride: 8,
            n_train: 4000,
            n_val: 500,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.down_stride;
        if r == 0 || self.height % r != 0 || self.width % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic image {}x{} is not divisible by down stride {r}",
                self.height, self.width
            )));
        }
        if self.height < 32 || self.width < 24 {
            return Err(Error::InvalidArgument(format!(
                "synthetic image {}x{} is smaller than 32x24",
                self.height, self.width
            )));
        }
        if self.positive_rates.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} positive rates for {} attributes",
                self.positive_rates.len(),
                self.schema.len()
            )));
        }
        if let Some(p) = self.positive_rates.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "positive rate {p} outside (0, 1)"
            )));
        }
        if self.schema.num_global() > IMAGE_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "the generator encodes at most {IMAGE_CHANNELS} global attributes, schema has {}",
                self.schema.num_global()
            )));
        }
        if self.schema.num_local() > PALETTE.len() {
            return Err(Error::InvalidArgument(format!(
                "the generator has {} blob colors, schema has {} local attributes",
                PALETTE.len(),
                self.schema.num_local()
            )));
        }
        if self.blob_radius == 0 {
            return Err(Error::InvalidArgument("blob_radius must be >= 1".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.noise) && unit(self.tint) && unit(self.occlusion_prob))
            || !(self.skeleton_jitter >= 0.0)
        {
            return Err(Error::InvalidArgument(
                "noise, tint and occlusion_prob must lie in [0, 1] and jitter >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Blob color of attribute `j`, `None` for globals.
    pub fn blob_color(&self, j: usize) -> Option<[u8; 3]> {
        let k = self.schema.local_indices().iter().position(|&l| l == j)?;
        Some(PALETTE[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Dataset {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    let make = |split: Split, n: usize| -> Result<Dataset> {
        let samples = (0..n)
            .into_par_iter()
            .map(|i| gen_sample(cfg, split, i))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(cfg.schema.clone(), cfg.height, cfg.width);
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    };
    Ok(Splits {
        train: make(Split::Train, cfg.n_train)?,
        val: make(Split::Val, cfg.n_val)?,
        test: make(Split::Test, cfg.n_test)?,
    })
}

/// Every sample draws from its own ChaCha stream, so generation order
/// (and thread count) cannot change the output.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

fn gen_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, split, index);
    let labels: Vec<u8> = cfg
        .positive_rates
        .iter()
        .map(|&p| u8::from(rng.gen_bool(p)))
        .collect();
    let id = format!("{}_{index:05}", split.name());
    for _ in 0..MAX_ATTEMPTS {
        let keypoints = gen_skeleton(cfg, &mut rng);
        if let Some(blobs) = place_blobs(cfg, &labels, &keypoints, &mut rng) {
            let image = render(cfg, &labels, &keypoints, &blobs, &mut rng)?;
            return Ok(Sample {
                id,
                image,
                labels,
                keypoints,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "{id}: could not place attribute blobs in {MAX_ATTEMPTS} attempts; \
         the image may be too small for the blob radius"
    )))
}

fn gen_skeleton(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> KeypointSet {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (sx, sy) = (w / 96.0, h / 128.0);
    let scale = rng.gen_range(0.85..=1.0);
    let cx = w / 2.0 + rng.gen_range(-0.1..=0.1) * w;
    let top = rng.gen_range(0.0..=(1.0 - scale) * h * 0.9);
    let arm = [rng.gen_range(-6.0..=6.0), rng.gen_range(-8.0..=8.0)];
    let jit = cfg.skeleton_jitter;
    let mut set = KeypointSet::invisible();
    for (j, &(dx, y)) in TEMPLATE.iter().enumerate() {
        let (mut dx, mut y) = (dx, y);
        // elbows and wrists swing together, wrists twice as far
        if (7..=10).contains(&j) {
            let reach = if j >= 9 { 2.0 } else { 1.0 };
            dx += dx.signum() * arm[0] * reach;
            y += arm[1] * reach;
        }
        let (jx, jy) = if jit > 0.0 {
            (rng.gen_range(-jit..=jit), rng.gen_range(-jit..=jit))
        } else {
            (0.0, 0.0)
        };
        let x = (cx + scale * dx * sx + jx).round();
        let y = (top + scale * y * sy + jy).round();
        let occluded = rng.gen_bool(cfg.occlusion_prob);
        if !occluded && x >= 0.0 && y >= 0.0 && x < w && y < h {
            set.joints[j] = Keypoint {
                x,
                y,
                visible: true,
            };
        } else {
            // unannotated joints still exist in the picture
            set.joints[j] = Keypoint {
                x,
                y,
                visible: false,
            };
        }
    }
    set
}

/// Chooses one visible assigned joint per positive local attribute, keeping
/// disks disjoint. Returns (attribute, joint) pairs.
fn place_blobs(
    cfg: &SynthConfig,
    labels: &[u8],
    kps: &KeypointSet,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = cfg
        .schema
        .local_indices()
        .into_iter()
        .filter(|&j| labels[j] == 1)
        .collect();
    order.shuffle(rng);
    let min_dist = (2 * cfg.blob_radius + 1) as f64;
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for j in order {
        let free: Vec<usize> = cfg
            .schema
            .get(j)
            .keypoint_ids
            .iter()
            .copied()
            .filter(|&k| {
                let p = kps.joints[k];
                p.visible
                    && placed.iter().all(|&(_, q)| {
                        let o = kps.joints[q];
                        (p.x - o.x).hypot(p.y - o.y) >= min_dist
                    })
            })
            .collect();
        let &k = free.choose(rng)?;
        placed.push((j, k));
    }
    Some(placed)
}

fn render(
    cfg: &SynthConfig,
    labels: &[u8],
    kps: &KeypointSet,
    blobs: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut px = vec![BACKGROUND; IMAGE_CHANNELS * plane];
    for (c, j) in cfg.schema.global_indices().into_iter().enumerate() {
        if labels[j] == 1 {
            px[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += cfg.tint);
        }
    }
    let mut ink = vec![false; plane];
    let scale = (w as f64 / 96.0).min(h as f64 / 128.0);
    for &(a, b) in &BONES {
        let (p, q) = (kps.joints[a], kps.joints[b]);
        let steps = ((q.x - p.x).abs().max((q.y - p.y).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = p.x + t * (q.x - p.x);
            let y = p.y + t * (q.y - p.y);
            stamp(&mut ink, h, w, x, y, 1.0);
        }
    }
    let nose = kps.joints[0];
    let head_r = 7.0 * scale;
    for s in 0..64 {
        let a = s as f64 * std::f64::consts::TAU / 64.0;
        stamp(&mut ink, h, w, nose.x + head_r * a.cos(), nose.y + head_r * a.sin(), 0.5);
    }
    for (p, &on) in ink.iter().enumerate() {
        if on {
            for c in 0..IMAGE_CHANNELS {
                px[c * plane + p] = SKELETON;
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut px {
            *v += rng.gen_range(-cfg.noise..=cfg.noise);
        }
    }
    let mut image = Image::from_unit(h, w, &px)?;
    let r = cfg.blob_radius as i64;
    for &(j, k) in blobs {
        let color = cfg.blob_color(j).expect("blobs are placed for local attributes");
        let (cx, cy) = (kps.joints[k].x as i64, kps.joints[k].y as i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    image.set_pixel(y as usize, x as usize, color);
                }
            }
        }
    }
    Ok(image)
}

fn stamp(ink: &mut [bool], h: usize, w: usize, x: f64, y: f64, radius: f64) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for yy in cy - r..=cy + r {
        for xx in cx - r..=cx + r {
            let inside = ((xx - cx).pow(2) + (yy - cy).pow(2)) as f64 <= radius * radius;
            if inside && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                ink[yy as usize * w + xx as usize] = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 20,
            n_val: 5,
            n_test: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_validates() {
        SynthConfig::default().validate().unwrap();
        let cfg = SynthConfig {
            height: 100,
            ..small()
        };
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn ids_are_split_prefixed() {
        let s = gen_synthetic(&small()).unwrap();
        assert_eq!(s.train.samples[3].id, "train_00003");
        assert_eq!(s.test.samples[0].id, "test_00000");
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
