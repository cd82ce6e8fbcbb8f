use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{images_tensor, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::DtmModel;
use crate::supervision::awk_targets;
use crate::tensor::{BnMode, Graph};

use super::eval::{argmax_cell, check_schema};

/// Min-max normalization to 8 bits. A constant plane maps to 128.
pub fn normalize_plane(plane: &[f64]) -> Vec<u8> {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|&v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExportReport {
    pub written: Vec<PathBuf>,
    /// Requested ids that are not in the dataset.
    pub unknown: Vec<String>,
}

/// Writes `{id}_{attribute}.pgm` for every attribute of every requested
/// sample, plus `{id}.txt` with one line per attribute:
/// `attribute min max argmax_row argmax_col targets`, where targets are
/// `row:col` cells separated by `;` (or `-` when there are none).
pub fn export_heatmaps(model: &DtmModel, ds: &Dataset, ids: &[String], out_dir: &Path) -> Result<ExportReport> {
    check_schema(model, ds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = ExportReport::default();
    let mut samples: Vec<&Sample> = Vec::new();
    for id in ids {
        match ds.find(id) {
            Some(s) => samples.push(s),
            None => report.unknown.push(id.clone()),
        }
    }
    let mut m = model.clone();
    m.set_mode(BnMode::Eval);
    let locals = m.schema.local_indices();
    let (hh, hw) = m.heatmap_dims(ds.height, ds.width);
    for s in samples {
        let mut g = Graph::new();
        let x = g.constant(images_tensor(std::iter::once(s))?);
        let out = m.forward(&mut g, x)?;
        let targets = awk_targets(&m.schema, &s.keypoints, m.down_stride(), (hh, hw))?;
        let mut sidecar = String::new();
        for j in 0..m.schema.len() {
            let (var, ch) = m.heatmap_of(&out, j).ok_or_else(|| {
                Error::InvalidArgument("heatmap export needs a template-matching head".into())
            })?;
            let t = g.value(var);
            let plane = &t.data()[ch * hh * hw..(ch + 1) * hh * hw];
            let name = &m.schema.get(j).name;
            let path = out_dir.join(format!("{}_{name}.pgm", s.id));
            write_pgm(&path, &normalize_plane(plane), hw, hh)?;
            report.written.push(path);

            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (r, c) = argmax_cell(plane, hw);
            let cells = locals
                .iter()
                .position(|&l| l == j)
                .map(|k| &targets[k][..])
                .unwrap_or(&[]);
            let cells = if cells.is_empty() {
                "-".to_string()
            } else {
                cells
                    .iter()
                    .map(|t| format!("{}:{}", t / hw, t % hw))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            let _ = writeln!(sidecar, "{name} {lo} {hi} {r} {c} {cells}");
        }
        let path = out_dir.join(format!("{}.txt", s.id));
        fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_is_mid_gray() {
        assert_eq!(normalize_plane(&[3.5; 6]), vec![128; 6]);
        assert_eq!(normalize_plane(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }
}
