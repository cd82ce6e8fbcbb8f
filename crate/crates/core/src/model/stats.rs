//! Parameter and FLOP accounting.
//!
//! Counting convention (per image, inference):
//! - conv: `2·k²·C_in·C_out·H_out·W_out` FLOPs, `k²·C_in·C_out` params (no bias)
//! - batch norm: 2 FLOPs per element (scale and shift), `2·C` params when affine
//! - ReLU: 1 FLOP per element
//! - GAP / GMP: 1 FLOP per input element (add / compare)
//! - linear: `2·C_in·C_out` FLOPs, `C_in·C_out` params

use serde::Serialize;

use super::network::{DtmModel, Head, IMAGE_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        k: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
    },
    BatchNorm {
        channels: usize,
        elements: usize,
        affine: bool,
    },
    Relu {
        elements: usize,
    },
    Pool {
        elements: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
    },
}

impl Layer {
    pub fn params(&self) -> u64 {
        match *self {
            Layer::Conv { k, c_in, c_out, .. } => (k * k * c_in * c_out) as u64,
            Layer::BatchNorm {
                channels, affine, ..
            } => {
                if affine {
                    2 * channels as u64
                } else {
                    0
                }
            }
            Layer::Relu { .. } | Layer::Pool { .. } => 0,
            Layer::Linear { c_in, c_out } => (c_in * c_out) as u64,
        }
    }

    pub fn flops(&self) -> u64 {
        match *self {
            Layer::Conv {
                k,
                c_in,
                c_out,
                h_out,
                w_out,
            } => 2 * (k * k * c_in * c_out * h_out * w_out) as u64,
            Layer::BatchNorm { elements, .. } => 2 * elements as u64,
            Layer::Relu { elements } | Layer::Pool { elements } => elements as u64,
            Layer::Linear { c_in, c_out } => 2 * (c_in * c_out) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub params: u64,
    pub flops: u64,
}

impl ModelStats {
    pub fn of_layers(layers: &[Layer]) -> Self {
        ModelStats {
            params: layers.iter().map(Layer::params).sum(),
            flops: layers.iter().map(Layer::flops).sum(),
        }
    }
}

impl DtmModel {
    /// Layer list of one forward pass on a `height × width` image.
    pub fn layers(&self, height: usize, width: usize) -> Vec<Layer> {
        let mut out = Vec::new();
        let (mut h, mut w, mut c) = (height, width, IMAGE_CHANNELS);
        for st in &self.backbone.stages {
            let oc = st.kernel.shape()[0];
            h = (h + 2 - 3) / st.stride + 1;
            w = (w + 2 - 3) / st.stride + 1;
            out.push(Layer::Conv {
                k: 3,
                c_in: c,
                c_out: oc,
                h_out: h,
                w_out: w,
            });
            out.push(Layer::BatchNorm {
                channels: oc,
                elements: oc * h * w,
                affine: st.bn.affine,
            });
            out.push(Layer::Relu {
                elements: oc * h * w,
            });
            c = oc;
        }
        match &self.head {
            Head::Dtm(head) => {
                for bank in [head.gap.as_ref(), head.gmp.as_ref()].into_iter().flatten() {
                    let k = bank.attrs.len();
                    out.push(Layer::Conv {
                        k: 1,
                        c_in: c,
                        c_out: k,
                        h_out: h,
                        w_out: w,
                    });
                    if let Some(bn) = &bank.bn {
                        out.push(Layer::BatchNorm {
                            channels: k,
                            elements: k * h * w,
                            affine: bn.affine,
                        });
                    }
                    out.push(Layer::Pool { elements: k * h * w });
                }
            }
            Head::Fc(fc) => {
                let j = fc.w_fc.shape()[0];
                out.push(Layer::Pool { elements: c * h * w });
                out.push(Layer::Linear { c_in: c, c_out: j });
                if let Some(bn) = &fc.bn {
                    out.push(Layer::BatchNorm {
                        channels: j,
                        elements: j,
                        affine: bn.affine,
                    });
                }
            }
        }
        out
    }

    pub fn stats(&self, height: usize, width: usize) -> ModelStats {
        ModelStats::of_layers(&self.layers(height, width))
    }
}
