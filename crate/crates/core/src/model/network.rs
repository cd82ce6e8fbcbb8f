use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::AttributeSchema;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, BnMode, BnVariant, Graph, Tensor, Var};

/// Classifier head variants; one per row of the head ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// GAP → FC → vector BN.
    FcBaseline,
    /// Templates for every attribute, GAP pooling.
    DtmGap,
    /// Templates for every attribute, GMP pooling.
    DtmGmp,
    /// GAP for global attributes, GMP for local ones.
    DtmMixed,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [
        HeadMode::FcBaseline,
        HeadMode::DtmGmp,
        HeadMode::DtmGap,
        HeadMode::DtmMixed,
    ];

    pub fn is_dtm(self) -> bool {
        self != HeadMode::FcBaseline
    }

    pub fn label(self) -> &'static str {
        match self {
            HeadMode::FcBaseline => "FC + BN",
            HeadMode::DtmGap => "DTM (GAP)",
            HeadMode::DtmGmp => "DTM (GMP)",
            HeadMode::DtmMixed => "DTM (GAP+GMP)",
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc_baseline" => Ok(HeadMode::FcBaseline),
            "dtm_gap" => Ok(HeadMode::DtmGap),
            "dtm_gmp" => Ok(HeadMode::DtmGmp),
            "dtm_mixed" => Ok(HeadMode::DtmMixed),
            other => Err(Error::Config(format!("unknown head mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each 3×3 conv-BN-ReLU stage.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub head: HeadMode,
    /// BN after the templates (DTM) or after the FC layer (baseline).
    pub head_bn: bool,
    /// Learnable gamma/beta in every BN layer.
    pub bn_affine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![8, 16, 32, 64],
            strides: vec![2, 2, 2, 1],
            head: HeadMode::DtmMixed,
            head_bn: true,
            bn_affine: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("widths and strides must be >= 1".into()));
        }
        Ok(())
    }

    pub fn down_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(IMAGE_CHANNELS)
    }
}

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub kernel: Tensor,
    pub stride: usize,
    pub bn: BatchNormState,
}

/// Stack of 3×3 conv (padding 1, no bias) → spatial BN → ReLU stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<ConvStage>,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut in_ch = IMAGE_CHANNELS;
        let mut stages = Vec::new();
        for (&w, &s) in cfg.widths.iter().zip(&cfg.strides) {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let mut bn = BatchNormState::new(w, BnVariant::Spatial);
            bn.affine = cfg.bn_affine;
            stages.push(ConvStage {
                kernel: Tensor::randn(&[w, in_ch, 3, 3], std, rng),
                stride: s,
                bn,
            });
            in_ch = w;
        }
        Ok(Backbone { stages })
    }

    pub fn down_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.kernel.shape()[0])
            .unwrap_or(IMAGE_CHANNELS)
    }

    /// Feature map F of shape (N, C, h/r, w/r).
    pub fn forward(&mut self, g: &mut Graph, images: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(images).dims4("backbone")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::dim(
                "backbone",
                format!("input axis 1 must be {IMAGE_CHANNELS} (RGB), got {c}"),
            ));
        }
        let r = self.down_stride();
        if h % r != 0 || w % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone: input {h}x{w} not divisible by down stride {r}"
            )));
        }
        let mut x = images;
        for st in &mut self.stages {
            let k = g.param(&st.kernel);
            x = g.conv2d(x, k, st.stride, 1)?;
            x = st.bn.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            out.push(&mut st.kernel);
            out.extend(st.bn.params_mut());
        }
        out
    }
}

/// One bank of 1×1 templates with its (optional) spatial BN.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    /// Shape (K, C, 1, 1).
    pub templates: Tensor,
    pub bn: Option<BatchNormState>,
    /// Schema indices of the attributes this bank scores, in channel order.
    pub attrs: Vec<usize>,
}

impl TemplateBank {
    fn new(attrs: Vec<usize>, channels: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let bn = cfg.head_bn.then(|| {
            let mut bn = BatchNormState::new(attrs.len(), BnVariant::Spatial);
            bn.affine = cfg.bn_affine;
            bn
        });
        TemplateBank {
            templates: Tensor::randn(&[attrs.len(), channels, 1, 1], std, rng),
            bn,
            attrs,
        }
    }

    /// Heatmaps `BN(T ∗ F)`, shape (N, K, H, W).
    fn heatmaps(&mut self, g: &mut Graph, features: Var) -> Result<Var> {
        let t = g.param(&self.templates);
        let h = g.conv2d(features, t, 1, 0)?;
        match self.bn.as_mut() {
            Some(bn) => bn.forward(g, h),
            None => Ok(h),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.templates];
        if let Some(bn) = self.bn.as_mut() {
            out.extend(bn.params_mut());
        }
        out
    }
}

/// Template-matching head: GAP over one bank, GMP over the other, logits
/// concatenated and restored to schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct DtmHead {
    pub gap: Option<TemplateBank>,
    pub gmp: Option<TemplateBank>,
    /// `order[j]` is the column of schema attribute `j` in the concatenated
    /// (gap ++ gmp) logits.
    order: Vec<usize>,
}

impl DtmHead {
    pub fn new(
        schema: &AttributeSchema,
        mode: HeadMode,
        channels: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let all: Vec<usize> = (0..schema.len()).collect();
        let (gap_attrs, gmp_attrs) = match mode {
            HeadMode::DtmGap => (all, Vec::new()),
            HeadMode::DtmGmp => (Vec::new(), all),
            HeadMode::DtmMixed => (schema.global_indices(), schema.local_indices()),
            HeadMode::FcBaseline => {
                return Err(Error::Config("DtmHead cannot be built in fc_baseline mode".into()))
            }
        };
        let mut order = vec![0; schema.len()];
        for (pos, &j) in gap_attrs.iter().chain(&gmp_attrs).enumerate() {
            order[j] = pos;
        }
        let bank = |attrs: Vec<usize>, rng: &mut ChaCha8Rng| {
            (!attrs.is_empty()).then(|| TemplateBank::new(attrs, channels, cfg, rng))
        };
        let gap = bank(gap_attrs, rng);
        let gmp = bank(gmp_attrs, rng);
        Ok(DtmHead { gap, gmp, order })
    }

    pub fn forward(&mut self, g: &mut Graph, features: Var) -> Result<DtmOutput> {
        let channels = self
            .gap
            .as_ref()
            .or(self.gmp.as_ref())
            .map(|b| b.templates.shape()[1])
            .unwrap_or(0);
        let (_, fc, _, _) = g.value(features).dims4("forward_dtm")?;
        if fc != channels {
            return Err(Error::dim(
                "forward_dtm",
                format!("feature axis 1 has {fc} channels, templates expect {channels}"),
            ));
        }
        let mut parts = Vec::new();
        let mut heatmaps_gap = None;
        let mut heatmaps_gmp = None;
        let mut gmp_argmax = Vec::new();
        if let Some(bank) = self.gap.as_mut() {
            let h = bank.heatmaps(g, features)?;
            parts.push(g.gap(h)?);
            heatmaps_gap = Some(h);
        }
        if let Some(bank) = self.gmp.as_mut() {
            let h = bank.heatmaps(g, features)?;
            let (pooled, argmax) = g.gmp(h)?;
            parts.push(pooled);
            heatmaps_gmp = Some(h);
            gmp_argmax = argmax;
        }
        let joined = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let identity = self.order.iter().enumerate().all(|(i, &o)| i == o);
        let logits = if identity {
            joined
        } else {
            g.select_channels(joined, &self.order)?
        };
        Ok(DtmOutput {
            logits,
            heatmaps_gap,
            heatmaps_gmp,
            gmp_argmax,
        })
    }

    /// Bank and channel holding the heatmap of schema attribute `j`.
    pub fn locate(&self, j: usize) -> Option<(Pooling, usize)> {
        let find = |b: &Option<TemplateBank>| {
            b.as_ref()
                .and_then(|b| b.attrs.iter().position(|&a| a == j))
        };
        find(&self.gap)
            .map(|c| (Pooling::Gap, c))
            .or_else(|| find(&self.gmp).map(|c| (Pooling::Gmp, c)))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(b) = self.gap.as_mut() {
            out.extend(b.params_mut());
        }
        if let Some(b) = self.gmp.as_mut() {
            out.extend(b.params_mut());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Gap,
    Gmp,
}

#[derive(Debug, Clone)]
pub struct DtmOutput {
    /// (N, J) pre-sigmoid scores in schema order.
    pub logits: Var,
    /// (N, J_g, H, W) post-BN, pre-sigmoid.
    pub heatmaps_gap: Option<Var>,
    /// (N, J_l, H, W) post-BN, pre-sigmoid.
    pub heatmaps_gmp: Option<Var>,
    /// Flat spatial argmax of every GMP plane, (n, k) row-major.
    pub gmp_argmax: Vec<usize>,
}

/// Conventional classifier: `BN(W_fc · GAP(F))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcBaseline {
    /// Shape (J, C).
    pub w_fc: Tensor,
    pub bn: Option<BatchNormState>,
}

impl FcBaseline {
    pub fn new(attrs: usize, channels: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let bn = cfg.head_bn.then(|| {
            let mut bn = BatchNormState::new(attrs, BnVariant::Vector);
            bn.affine = cfg.bn_affine;
            bn
        });
        FcBaseline {
            w_fc: Tensor::randn(&[attrs, channels], std, rng),
            bn,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, features: Var) -> Result<Var> {
        let (_, fc, _, _) = g.value(features).dims4("forward_fc_baseline")?;
        let c = self.w_fc.shape()[1];
        if fc != c {
            return Err(Error::dim(
                "forward_fc_baseline",
                format!("feature axis 1 has {fc} channels, W_fc axis 1 has {c}"),
            ));
        }
        let pooled = g.gap(features)?;
        let w = g.param(&self.w_fc);
        let z = g.linear(pooled, w)?;
        match self.bn.as_mut() {
            Some(bn) => bn.forward(g, z),
            None => Ok(z),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_fc];
        if let Some(bn) = self.bn.as_mut() {
            out.extend(bn.params_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Dtm(DtmHead),
    Fc(FcBaseline),
}

/// Everything a forward pass exposes to losses and exporters.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Var,
    /// `None` for the FC baseline.
    pub dtm: Option<DtmOutput>,
}

/// Backbone plus classifier head over an attribute schema.
#[derive(Debug, Clone, PartialEq)]
pub struct DtmModel {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub backbone: Backbone,
    pub head: Head,
}

impl DtmModel {
    pub fn new(schema: AttributeSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if schema.is_empty() {
            return Err(Error::SchemaMismatch("schema has no attributes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config, &mut rng)?;
        let c = backbone.out_channels();
        let head = match config.head {
            HeadMode::FcBaseline => Head::Fc(FcBaseline::new(schema.len(), c, &config, &mut rng)),
            mode => Head::Dtm(DtmHead::new(&schema, mode, c, &config, &mut rng)?),
        };
        Ok(DtmModel {
            config,
            schema,
            backbone,
            head,
        })
    }

    pub fn down_stride(&self) -> usize {
        self.backbone.down_stride()
    }

    pub fn heatmap_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let r = self.down_stride();
        (height / r, width / r)
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for st in &mut self.backbone.stages {
            st.bn.mode = mode;
        }
        match &mut self.head {
            Head::Dtm(h) => {
                for b in [h.gap.as_mut(), h.gmp.as_mut()].into_iter().flatten() {
                    if let Some(bn) = b.bn.as_mut() {
                        bn.mode = mode;
                    }
                }
            }
            Head::Fc(f) => {
                if let Some(bn) = f.bn.as_mut() {
                    bn.mode = mode;
                }
            }
        }
    }

    pub fn forward(&mut self, g: &mut Graph, images: Var) -> Result<ForwardOutput> {
        let features = self.backbone.forward(g, images)?;
        match &mut self.head {
            Head::Dtm(h) => {
                let out = h.forward(g, features)?;
                Ok(ForwardOutput {
                    features,
                    logits: out.logits,
                    dtm: Some(out),
                })
            }
            Head::Fc(f) => {
                let logits = f.forward(g, features)?;
                Ok(ForwardOutput {
                    features,
                    logits,
                    dtm: None,
                })
            }
        }
    }

    /// Heatmap of schema attribute `j` as (tensor, channel).
    pub fn heatmap_of(&self, out: &ForwardOutput, j: usize) -> Option<(Var, usize)> {
        let (Head::Dtm(h), Some(d)) = (&self.head, out.dtm.as_ref()) else {
            return None;
        };
        match h.locate(j)? {
            (Pooling::Gap, c) => d.heatmaps_gap.map(|v| (v, c)),
            (Pooling::Gmp, c) => d.heatmaps_gmp.map(|v| (v, c)),
        }
    }

    /// (N, J_l, H, W) heatmaps of the keypoint-assigned attributes, in
    /// schema local order.
    pub fn local_heatmaps(&self, g: &mut Graph, out: &ForwardOutput) -> Result<Option<Var>> {
        let (Head::Dtm(h), Some(d)) = (&self.head, out.dtm.as_ref()) else {
            return Ok(None);
        };
        let locals = self.schema.local_indices();
        if locals.is_empty() {
            return Ok(None);
        }
        if let (Some(bank), Some(hm)) = (h.gmp.as_ref(), d.heatmaps_gmp) {
            if bank.attrs == locals {
                return Ok(Some(hm));
            }
        }
        let mut sources = Vec::new();
        let mut offset = 0;
        let mut index = Vec::new();
        for (bank, hm) in [(&h.gap, d.heatmaps_gap), (&h.gmp, d.heatmaps_gmp)] {
            if let (Some(bank), Some(hm)) = (bank, hm) {
                sources.push((hm, offset, bank.attrs.clone()));
                offset += bank.attrs.len();
            }
        }
        for &j in &locals {
            let pos = sources
                .iter()
                .find_map(|(_, off, attrs)| attrs.iter().position(|&a| a == j).map(|p| off + p))
                .expect("every attribute has a bank");
            index.push(pos);
        }
        let vars: Vec<Var> = sources.iter().map(|s| s.0).collect();
        let joined = if vars.len() == 1 {
            vars[0]
        } else {
            g.concat(&vars, 1)?
        };
        Ok(Some(g.select_channels(joined, &index)?))
    }

    /// Trainable tensors in exactly the order [`DtmModel::forward`]
    /// registers them with [`Graph::param`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        match &mut self.head {
            Head::Dtm(h) => out.extend(h.params_mut()),
            Head::Fc(f) => out.extend(f.params_mut()),
        }
        out
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Copies gradients from a finished backward pass onto the parameters.
    pub fn collect_grads(&mut self, g: &Graph) -> Result<()> {
        let vars = g.params().to_vec();
        let mut params = self.params_mut();
        if vars.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "graph registered {} parameters, model has {}",
                vars.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(vars) {
            let grad = g
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()]);
            p.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for st in &self.backbone.stages {
            total += st.kernel.len() + st.bn.param_count();
        }
        match &self.head {
            Head::Dtm(h) => {
                for b in [h.gap.as_ref(), h.gmp.as_ref()].into_iter().flatten() {
                    total += b.templates.len() + b.bn.as_ref().map_or(0, |bn| bn.param_count());
                }
            }
            Head::Fc(f) => {
                total += f.w_fc.len() + f.bn.as_ref().map_or(0, |bn| bn.param_count());
            }
        }
        total
    }
}
