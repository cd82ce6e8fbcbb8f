use crate::error::{Error, Result};
use crate::model::{AttributeSchema, IMAGE_CHANNELS};
use crate::supervision::KeypointSet;
use crate::tensor::Tensor;

/// 8-bit RGB image in channel-major (3, h, w) order. Pixel value `v` stands
/// for `v / 255` in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != IMAGE_CHANNELS * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} needs {} bytes, got {}",
                IMAGE_CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(IMAGE_CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(height * width));
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Quantizes values in [0, 1] (clamped) to 8 bits.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    /// Interleaved (h, w, 3) bytes, as image files store them.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..plane {
            out.extend([self.data[p], self.data[plane + p], self.data[2 * plane + p]]);
        }
        out
    }

    pub fn from_interleaved(height: usize, width: usize, hwc: &[u8]) -> Result<Self> {
        let plane = height * width;
        if hwc.len() != IMAGE_CHANNELS * plane {
            return Err(Error::InvalidArgument(format!(
                "interleaved image {height}x{width} needs {} bytes, got {}",
                IMAGE_CHANNELS * plane,
                hwc.len()
            )));
        }
        let mut data = vec![0u8; hwc.len()];
        for (p, px) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c];
            }
        }
        Self::new(height, width, data)
    }

    pub fn write_unit(&self, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(&self.data) {
            *o = f64::from(v) / 255.0;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(&[IMAGE_CHANNELS, self.height, self.width]);
        self.write_unit(t.data_mut());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// One 0/1 entry per schema attribute.
    pub labels: Vec<u8>,
    pub keypoints: KeypointSet,
}

/// Samples sharing a schema and image size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: AttributeSchema, height: usize, width: usize) -> Self {
        Dataset {
            schema,
            height,
            width,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.labels.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "sample {}: {} labels for {} attributes",
                sample.id,
                sample.labels.len(),
                self.schema.len()
            )));
        }
        if (sample.image.height(), sample.image.width()) != (self.height, self.width) {
            return Err(Error::InvalidArgument(format!(
                "sample {}: image is {}x{}, dataset is {}x{}",
                sample.id,
                sample.image.height(),
                sample.image.width(),
                self.height,
                self.width
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// (N, J) label matrix of all samples.
    pub fn label_matrix(&self) -> Tensor {
        labels_tensor(self.samples.iter(), self.schema.len())
    }
}

/// Stacks images into an (N, 3, h, w) tensor.
pub fn images_tensor<'a>(samples: impl ExactSizeIterator<Item = &'a Sample>) -> Result<Tensor> {
    let n = samples.len();
    let mut out: Option<Tensor> = None;
    for (i, s) in samples.enumerate() {
        let (h, w) = (s.image.height(), s.image.width());
        let t = out.get_or_insert_with(|| Tensor::zeros(&[n, IMAGE_CHANNELS, h, w]));
        let size = IMAGE_CHANNELS * h * w;
        if t.shape()[2..] != [h, w] {
            return Err(Error::InvalidArgument(format!(
                "images_tensor: sample {} is {h}x{w}, expected {}x{}",
                s.id,
                t.shape()[2],
                t.shape()[3]
            )));
        }
        s.image.write_unit(&mut t.data_mut()[i * size..(i + 1) * size]);
    }
    out.ok_or_else(|| Error::InvalidArgument("images_tensor: empty batch".into()))
}

pub fn labels_tensor<'a>(samples: impl ExactSizeIterator<Item = &'a Sample>, j: usize) -> Tensor {
    let n = samples.len();
    let mut data = Vec::with_capacity(n * j);
    for s in samples {
        data.extend(s.labels.iter().map(|&b| f64::from(b)));
    }
    Tensor::new(&[n, j], data).expect("label rows checked on insertion")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_round_trip() {
        let data: Vec<u8> = (0..3 * 4 * 5).map(|v| v as u8).collect();
        let img = Image::new(4, 5, data).unwrap();
        let hwc = img.to_interleaved();
        assert_eq!(&hwc[..3], &[0, 20, 40]);
        assert_eq!(Image::from_interleaved(4, 5, &hwc).unwrap(), img);
    }

    #[test]
    fn unit_quantization() {
        let img = Image::from_unit(1, 2, &[0.0, 1.0, 0.5, 2.0, -1.0, 0.2]).unwrap();
        assert_eq!(img.data(), &[0, 255, 128, 255, 0, 51]);
        assert_eq!(img.to_tensor().data()[1], 1.0);
    }
}
