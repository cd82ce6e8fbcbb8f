//! Dataset files under a root directory:
//!
//! - `annotations.csv`: a header of attribute names, then `id,bit,...,bit`
//! - `keypoints.csv`: `id` followed by 17 `x,y,v` triples, no header
//! - `manifest.csv`: `id,split` rows assigning samples to train/val/test
//! - `assignment.toml`: `[assignment]` table of attribute → joint names;
//!   attributes not listed are global
//! - `images/{id}.ppm`: binary RGB pixmaps

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{Dataset, Image, Sample};
use super::synth::{Split, Splits};
use crate::error::{Error, Result};
use crate::model::AttributeSchema;
use crate::supervision::{Keypoint, KeypointSet, NUM_JOINTS};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const KEYPOINTS_FILE: &str = "keypoints.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.toml";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<u8>)>,
}

/// Problems tolerated while joining files; each skipped id is listed with
/// the reason.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub missing_keypoints: usize,
    pub skipped: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    #[serde(default)]
    assignment: BTreeMap<String, Vec<String>>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

/// Non-blank lines of a comma-separated file with 1-based line numbers and
/// trimmed fields. The formats never quote, so commas always separate.
fn records(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i as u64 + 1, l.split(',').map(|f| f.trim().to_string()).collect()))
        .collect())
}

/// Reads `annotations.csv`. An empty file is an empty annotation set.
pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let mut out = Annotations::default();
    let mut seen = HashSet::new();
    for (i, (line, rec)) in records(path)?.into_iter().enumerate() {
        if i == 0 {
            let mut names = rec;
            if names.first().is_some_and(|n| n == "id") {
                names.remove(0);
            }
            out.names = names;
            continue;
        }
        if rec.len() != out.names.len() + 1 {
            return Err(parse_err(
                path,
                line,
                format!(
                    "expected id plus {} labels, found {} fields",
                    out.names.len(),
                    rec.len()
                ),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("empty or duplicate id {id:?}")));
        }
        let bits = rec
            .iter()
            .skip(1)
            .map(|f| match f.as_str() {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(parse_err(path, line, format!("label {f:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        out.rows.push((id, bits));
    }
    Ok(out)
}

/// Reads `keypoints.csv`. A visibility of 0 marks an unannotated joint; any
/// positive value (COCO uses 1 and 2) marks it visible.
pub fn load_keypoints(path: &Path) -> Result<BTreeMap<String, KeypointSet>> {
    let mut out = BTreeMap::new();
    for (line, rec) in records(path)? {
        if rec.len() != 1 + 3 * NUM_JOINTS {
            return Err(parse_err(
                path,
                line,
                format!("expected id plus {} values, found {} fields", 3 * NUM_JOINTS, rec.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("field {k}: bad number {:?}", &rec[k])))
        };
        let mut set = KeypointSet::invisible();
        for j in 0..NUM_JOINTS {
            let v = num(3 + 3 * j)?;
            if v < 0.0 {
                return Err(parse_err(path, line, format!("joint {j}: negative visibility")));
            }
            set.joints[j] = Keypoint {
                x: num(1 + 3 * j)?,
                y: num(2 + 3 * j)?,
                visible: v > 0.0,
            };
        }
        if out.insert(rec[0].to_string(), set).is_some() {
            return Err(parse_err(path, line, format!("duplicate id {:?}", &rec[0])));
        }
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let mut out = Vec::new();
    for (line, rec) in records(path)? {
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected `id,split`"));
        }
        let split = rec[1]
            .parse::<Split>()
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push((rec[0].to_string(), split));
    }
    Ok(out)
}

pub fn load_assignment(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AssignmentFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(file.assignment)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Image::from_interleaved(h as usize, w as usize, img.as_raw())
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            &img.to_interleaved(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes all three splits under `root` in the documented formats.
pub fn write_dataset(root: &Path, splits: &Splits) -> Result<()> {
    use std::fmt::Write;

    create_dir(&root.join(IMAGE_DIR))?;
    let schema = &splits.train.schema;
    let assignment = toml::to_string(&AssignmentFile {
        assignment: schema.assignment(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    write_text(&root.join(ASSIGNMENT_FILE), &assignment)?;

    let mut ann = schema.names().join(",") + "\n";
    let mut kps = String::new();
    let mut man = String::new();
    for split in Split::ALL {
        let ds = splits.get(split);
        if ds.schema != *schema {
            return Err(Error::SchemaMismatch(format!(
                "{} split schema differs from train",
                split.name()
            )));
        }
        for s in &ds.samples {
            if s.id.is_empty() || s.id.contains([',', '\n', '\r', '/']) {
                return Err(Error::InvalidArgument(format!("unusable sample id {:?}", s.id)));
            }
            ann.push_str(&s.id);
            for b in &s.labels {
                let _ = write!(ann, ",{b}");
            }
            ann.push('\n');
            kps.push_str(&s.id);
            for k in &s.keypoints.joints {
                let _ = write!(kps, ",{},{},{}", k.x, k.y, u8::from(k.visible));
            }
            kps.push('\n');
            let _ = writeln!(man, "{},{}", s.id, split.name());
            write_ppm(&image_path(root, &s.id), &s.image)?;
        }
    }
    write_text(&root.join(ANNOTATIONS_FILE), &ann)?;
    write_text(&root.join(KEYPOINTS_FILE), &kps)?;
    write_text(&root.join(MANIFEST_FILE), &man)
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join(IMAGE_DIR).join(format!("{id}.ppm"))
}

/// Reads the schema declared by a dataset root: attribute order from the
/// annotation header, keypoint assignment from `assignment.toml`.
pub fn load_schema(root: &Path) -> Result<AttributeSchema> {
    let ann = load_annotations(&root.join(ANNOTATIONS_FILE))?;
    let assignment = load_assignment(&root.join(ASSIGNMENT_FILE))?;
    AttributeSchema::from_assignment(&ann.names, &assignment)
}

/// Loads and joins a dataset root. When `expected` is given, the file
/// schema must match it exactly.
///
/// Manifest ids lacking an annotation row or image are skipped and listed in
/// the report, as are annotation ids the manifest never mentions. Samples
/// without a keypoint row get an all-invisible set.
pub fn load_dataset(root: &Path, expected: Option<&AttributeSchema>) -> Result<(Splits, LoadReport)> {
    let ann = load_annotations(&root.join(ANNOTATIONS_FILE))?;
    let assignment = load_assignment(&root.join(ASSIGNMENT_FILE))?;
    let schema = AttributeSchema::from_assignment(&ann.names, &assignment)?;
    if let Some(exp) = expected {
        if exp.len() != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} has {} attributes, expected {}",
                root.join(ANNOTATIONS_FILE).display(),
                schema.len(),
                exp.len()
            )));
        }
        let diff = exp.diff(&schema);
        if !diff.is_empty() {
            return Err(Error::SchemaMismatch(diff.join("; ")));
        }
    }
    let kp_path = root.join(KEYPOINTS_FILE);
    let mut keypoints = if kp_path.exists() {
        load_keypoints(&kp_path)?
    } else {
        BTreeMap::new()
    };
    let manifest = load_manifest(&root.join(MANIFEST_FILE))?;
    let mut labels: HashMap<String, Vec<u8>> = ann.rows.into_iter().collect();

    let mut report = LoadReport::default();
    let mut dims: Option<(usize, usize)> = None;
    let mut per_split: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for (id, split) in manifest {
        let Some(bits) = labels.remove(&id) else {
            report.skipped.push(format!("{id}: no annotation row"));
            continue;
        };
        let path = image_path(root, &id);
        if !path.exists() {
            report.skipped.push(format!("{id}: missing image {}", path.display()));
            continue;
        }
        let image = read_ppm(&path)?;
        let d = (image.height(), image.width());
        if *dims.get_or_insert(d) != d {
            return Err(Error::InvalidArgument(format!(
                "{}: image is {}x{}, earlier images are {}x{}",
                path.display(),
                d.0,
                d.1,
                dims.unwrap().0,
                dims.unwrap().1
            )));
        }
        let kps = keypoints.remove(&id).unwrap_or_else(|| {
            report.missing_keypoints += 1;
            KeypointSet::invisible()
        });
        per_split.entry(split).or_default().push(Sample {
            id,
            image,
            labels: bits,
            keypoints: kps,
        });
    }
    let mut orphans: Vec<String> = labels.into_keys().collect();
    orphans.sort();
    report
        .skipped
        .extend(orphans.into_iter().map(|id| format!("{id}: not in manifest")));
    if !keypoints.is_empty() {
        log::warn!("{} keypoint rows match no sample", keypoints.len());
    }
    if report.missing_keypoints > 0 {
        log::warn!(
            "{} samples have no keypoint row; their joints are marked invisible",
            report.missing_keypoints
        );
    }
    for s in &report.skipped {
        log::warn!("skipped {s}");
    }

    let (h, w) = dims.unwrap_or((0, 0));
    let mut build = |split: Split| -> Result<Dataset> {
        let mut ds = Dataset::new(schema.clone(), h, w);
        for s in per_split.remove(&split).unwrap_or_default() {
            ds.push(s)?;
        }
        Ok(ds)
    };
    let splits = Splits {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
    };
    Ok((splits, report))
}
