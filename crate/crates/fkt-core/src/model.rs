//! Learnable pieces: a convolutional encoder, an MLP projection head for the
//! contrastive branch, and a linear classifier head on encoder features.
//!
//! Both heads read the same feature tensor, so joint training backpropagates
//! through a single shared encoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::ViewPair;
use crate::data::ImageBatch;
use crate::error::{FktError, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, init_params, BatchNorm2d, BufferFn, Conv2d,
    Linear, MaxPool2d, ParamFn, Params, Relu,
};
use crate::rng::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet50,
    Resnet18,
    SmallCnn,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::SmallCnn => "small_cnn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Encoder feature width m. 0 means "derive": 2048 for resnet50, 512 for
    /// resnet18, 64 for small_cnn.
    #[serde(default)]
    pub encoder_dim: usize,
    /// Projector hidden width; 0 means "same as encoder_dim".
    #[serde(default)]
    pub projector_hidden_dim: usize,
    #[serde(default = "default_projector_out")]
    pub projector_out_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub small_input_stem: bool,
}

fn default_projector_out() -> usize {
    128
}

impl ModelConfig {
    pub fn resolved_encoder_dim(&self) -> Result<usize> {
        let derived = match self.backbone {
            BackboneKind::Resnet50 => 2048,
            BackboneKind::Resnet18 => 512,
            BackboneKind::SmallCnn => {
                if self.encoder_dim == 0 {
                    64
                } else {
                    self.encoder_dim
                }
            }
        };
        if self.encoder_dim != 0 && self.encoder_dim != derived {
            return Err(FktError::InvalidConfig(format!(
                "model.encoder_dim: {} backbone produces {} features, got {}",
                self.backbone, derived, self.encoder_dim
            )));
        }
        Ok(derived)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FktError::InvalidConfig(format!(
                "model.num_classes: must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.projector_out_dim < 2 {
            return Err(FktError::InvalidConfig(format!(
                "model.projector_out_dim: must be >= 2, got {}",
                self.projector_out_dim
            )));
        }
        self.resolved_encoder_dim()?;
        Ok(())
    }

    /// Copy with every derived field made explicit.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        cfg.encoder_dim = self.resolved_encoder_dim()?;
        if cfg.projector_hidden_dim == 0 {
            cfg.projector_hidden_dim = cfg.encoder_dim;
        }
        Ok(cfg)
    }
}

/// Encoder outputs for both views plus both heads, row-aligned with the pair.
#[derive(Debug)]
pub struct EmbeddingBatch {
    pub features_a: Array2<f64>,
    pub features_b: Array2<f64>,
    pub projections_a: Array2<f64>,
    pub projections_b: Array2<f64>,
    pub logits_a: Array2<f64>,
    pub logits_b: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Backbone building blocks
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, kernel, stride, padding, false),
            bn: BatchNorm2d::new(cout),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = self.relu.backward(grad);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

impl Params for ConvBnRelu {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

#[derive(Debug)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<Shortcut>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(cin: usize, planes: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || cin != planes).then(|| Shortcut {
            conv: Conv2d::new(cin, planes, 1, stride, 0, false),
            bn: BatchNorm2d::new(planes),
        });
        BasicBlock {
            conv1: Conv2d::new(cin, planes, 3, stride, 1, false),
            bn1: BatchNorm2d::new(planes),
            relu1: Relu::new(),
            conv2: Conv2d::new(planes, planes, 3, 1, 1, false),
            bn2: BatchNorm2d::new(planes),
            downsample,
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut out = self.conv1.forward(x, train);
        out = self.bn1.forward(&out, train);
        out = self.relu1.forward(&out, train);
        out = self.conv2.forward(&out, train);
        out = self.bn2.forward(&out, train);
        let short = match &mut self.downsample {
            Some(s) => {
                let y = s.conv.forward(x, train);
                s.bn.forward(&y, train)
            }
            None => x.clone(),
        };
        out += &short;
        self.relu_out.forward(&out, train)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let d_sum = self.relu_out.backward(grad);
        let d_short = match &mut self.downsample {
            Some(s) => {
                let g = s.bn.backward(&d_sum);
                s.conv.backward(&g)
            }
            None => d_sum.clone(),
        };
        let mut g = self.bn2.backward(&d_sum);
        g = self.conv2.backward(&g);
        g = self.relu1.backward(&g);
        g = self.bn1.backward(&g);
        g = self.conv1.backward(&g);
        g + d_short
    }
}

impl Params for BasicBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        if let Some(s) = &mut self.downsample {
            s.conv.visit_params(&format!("{prefix}.downsample.conv"), f);
            s.bn.visit_params(&format!("{prefix}.downsample.bn"), f);
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some(s) = &mut self.downsample {
            s.bn.visit_buffers(&format!("{prefix}.downsample.bn"), f);
        }
    }
}

#[derive(Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<Shortcut>,
    relu_out: Relu,
}

impl Bottleneck {
    const EXPANSION: usize = 4;

    fn new(cin: usize, planes: usize, stride: usize) -> Self {
        let cout = planes * Self::EXPANSION;
        let downsample = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv2d::new(cin, cout, 1, stride, 0, false),
            bn: BatchNorm2d::new(cout),
        });
        Bottleneck {
            conv1: Conv2d::new(cin, planes, 1, 1, 0, false),
            bn1: BatchNorm2d::new(planes),
            relu1: Relu::new(),
            conv2: Conv2d::new(planes, planes, 3, stride, 1, false),
            bn2: BatchNorm2d::new(planes),
            relu2: Relu::new(),
            conv3: Conv2d::new(planes, cout, 1, 1, 0, false),
            bn3: BatchNorm2d::new(cout),
            downsample,
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut out = self.conv1.forward(x, train);
        out = self.bn1.forward(&out, train);
        out = self.relu1.forward(&out, train);
        out = self.conv2.forward(&out, train);
        out = self.bn2.forward(&out, train);
        out = self.relu2.forward(&out, train);
        out = self.conv3.forward(&out, train);
        out = self.bn3.forward(&out, train);
        let short = match &mut self.downsample {
            Some(s) => {
                let y = s.conv.forward(x, train);
                s.bn.forward(&y, train)
            }
            None => x.clone(),
        };
        out += &short;
        self.relu_out.forward(&out, train)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let d_sum = self.relu_out.backward(grad);
        let d_short = match &mut self.downsample {
            Some(s) => {
                let g = s.bn.backward(&d_sum);
                s.conv.backward(&g)
            }
            None => d_sum.clone(),
        };
        let mut g = self.bn3.backward(&d_sum);
        g = self.conv3.backward(&g);
        g = self.relu2.backward(&g);
        g = self.bn2.backward(&g);
        g = self.conv2.backward(&g);
        g = self.relu1.backward(&g);
        g = self.bn1.backward(&g);
        g = self.conv1.backward(&g);
        g + d_short
    }
}

impl Params for Bottleneck {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
        self.bn3.visit_params(&format!("{prefix}.bn3"), f);
        if let Some(s) = &mut self.downsample {
            s.conv.visit_params(&format!("{prefix}.downsample.conv"), f);
            s.bn.visit_params(&format!("{prefix}.downsample.bn"), f);
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        self.bn3.visit_buffers(&format!("{prefix}.bn3"), f);
        if let Some(s) = &mut self.downsample {
            s.bn.visit_buffers(&format!("{prefix}.downsample.bn"), f);
        }
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Basic(BasicBlock),
    Bottle(Bottleneck),
}

impl Block {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        match self {
            Block::Basic(b) => b.forward(x, train),
            Block::Bottle(b) => b.forward(x, train),
        }
    }
    fn backward(&mut self, g: &Array4<f64>) -> Array4<f64> {
        match self {
            Block::Basic(b) => b.backward(g),
            Block::Bottle(b) => b.backward(g),
        }
    }
}

impl Params for Block {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        match self {
            Block::Basic(b) => b.visit_params(prefix, f),
            Block::Bottle(b) => b.visit_params(prefix, f),
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        match self {
            Block::Basic(b) => b.visit_buffers(prefix, f),
            Block::Bottle(b) => b.visit_buffers(prefix, f),
        }
    }
}

#[derive(Debug)]
struct ResNet {
    stem: ConvBnRelu,
    stem_pool: Option<MaxPool2d>,
    stages: Vec<Vec<Block>>,
}

impl ResNet {
    fn new(block_counts: [usize; 4], bottleneck: bool, small_input_stem: bool) -> Self {
        let stem = if small_input_stem {
            ConvBnRelu::new(3, 64, 3, 1, 1)
        } else {
            ConvBnRelu::new(3, 64, 7, 2, 3)
        };
        let stem_pool = (!small_input_stem).then(|| MaxPool2d::new(3, 2, 1));
        let expansion = if bottleneck { Bottleneck::EXPANSION } else { 1 };
        let widths = [64usize, 128, 256, 512];
        let mut stages = Vec::new();
        let mut cin = 64;
        for (i, (&planes, &count)) in widths.iter().zip(block_counts.iter()).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..count {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let block = if bottleneck {
                    Block::Bottle(Bottleneck::new(cin, planes, stride))
                } else {
                    Block::Basic(BasicBlock::new(cin, planes, stride))
                };
                cin = planes * expansion;
                blocks.push(block);
            }
            stages.push(blocks);
        }
        ResNet { stem, stem_pool, stages }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut y = self.stem.forward(x, train);
        if let Some(pool) = &mut self.stem_pool {
            y = pool.forward(&y, train);
        }
        for stage in &mut self.stages {
            for block in stage {
                y = block.forward(&y, train);
            }
        }
        y
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = grad.clone();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
        }
        if let Some(pool) = &mut self.stem_pool {
            g = pool.backward(&g);
        }
        self.stem.backward(&g)
    }
}

impl Params for ResNet {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.stage{}.{b}", i + 1), f);
            }
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        self.stem.visit_buffers(&format!("{prefix}.stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&format!("{prefix}.stage{}.{b}", i + 1), f);
            }
        }
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum EncoderNet {
    SmallCnn(Vec<ConvBnRelu>),
    ResNet(ResNet),
}

impl EncoderNet {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        match self {
            EncoderNet::SmallCnn(blocks) => {
                let mut y = blocks[0].forward(x, train);
                for b in &mut blocks[1..] {
                    y = b.forward(&y, train);
                }
                y
            }
            EncoderNet::ResNet(net) => net.forward(x, train),
        }
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        match self {
            EncoderNet::SmallCnn(blocks) => {
                let mut g = grad.clone();
                for b in blocks.iter_mut().rev() {
                    g = b.backward(&g);
                }
                g
            }
            EncoderNet::ResNet(net) => net.backward(grad),
        }
    }
}

impl Params for EncoderNet {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        match self {
            EncoderNet::SmallCnn(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_params(&format!("{prefix}.block{i}"), f);
                }
            }
            EncoderNet::ResNet(net) => net.visit_params(prefix, f),
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        match self {
            EncoderNet::SmallCnn(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_buffers(&format!("{prefix}.block{i}"), f);
                }
            }
            EncoderNet::ResNet(net) => net.visit_buffers(prefix, f),
        }
    }
}

/// Two-layer MLP projection head: linear -> ReLU -> linear.
#[derive(Debug)]
struct Projector {
    fc1: Linear,
    fc2: Linear,
    mask: Option<Vec<bool>>,
}

impl Projector {
    fn new(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Projector {
            fc1: Linear::new(in_dim, hidden, true),
            fc2: Linear::new(hidden, out_dim, true),
            mask: None,
        }
    }

    fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let mut h = self.fc1.forward(x, train);
        if train {
            self.mask = Some(h.iter().map(|&v| v > 0.0).collect());
        }
        h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        self.fc2.forward(&h, train)
    }

    fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = self.fc2.backward(grad);
        let mask = self.mask.take().expect("backward before forward");
        for (v, &m) in g.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            }
        }
        self.fc1.backward(&g)
    }
}

impl Params for Projector {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    encoder: EncoderNet,
    projector: Projector,
    classifier: Linear,
    last_conv_spatial: Option<(usize, usize)>,
}

/// Deterministically initialized model per the config and seed.
pub fn build_model(cfg: &ModelConfig, rng_seed: u64) -> Result<Model> {
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    let dim = cfg.encoder_dim;
    let encoder = match cfg.backbone {
        BackboneKind::Resnet18 => {
            EncoderNet::ResNet(ResNet::new([2, 2, 2, 2], false, cfg.small_input_stem))
        }
        BackboneKind::Resnet50 => {
            EncoderNet::ResNet(ResNet::new([3, 4, 6, 3], true, cfg.small_input_stem))
        }
        BackboneKind::SmallCnn => {
            let w1 = (dim / 4).max(8);
            let w2 = (dim / 2).max(8);
            let widths = [w1, w2, dim, dim];
            let strides = [1usize, 2, 2, 2];
            let mut blocks = Vec::new();
            let mut cin = 3;
            for (w, s) in widths.iter().zip(strides.iter()) {
                blocks.push(ConvBnRelu::new(cin, *w, 3, *s, 1));
                cin = *w;
            }
            EncoderNet::SmallCnn(blocks)
        }
    };
    let mut model = Model {
        projector: Projector::new(dim, cfg.projector_hidden_dim, cfg.projector_out_dim),
        classifier: Linear::new(dim, cfg.num_classes, true),
        encoder,
        cfg,
        last_conv_spatial: None,
    };
    init_params(&mut model, rng_seed);
    Ok(model)
}

impl Model {
    /// Encoder plus global average pooling: images -> (N, m) features.
    pub fn encode(&mut self, x: &Array4<f64>, train: bool) -> Array2<f64> {
        self.encode_with_map(x, train).0
    }

    /// Like [`encode`](Model::encode) but also returns the final convolutional
    /// activation map feeding the pooling layer.
    pub fn encode_with_map(&mut self, x: &Array4<f64>, train: bool) -> (Array2<f64>, Array4<f64>) {
        let conv_map = self.encoder.forward(x, train);
        let (_, _, h, w) = conv_map.dim();
        self.last_conv_spatial = Some((h, w));
        (global_avg_pool(&conv_map), conv_map)
    }

    pub fn project(&mut self, features: &Array2<f64>, train: bool) -> Array2<f64> {
        self.projector.forward(features, train)
    }

    pub fn classify_features(&mut self, features: &Array2<f64>, train: bool) -> Array2<f64> {
        self.classifier.forward(features, train)
    }

    /// Backpropagate head gradients (either may be absent) through the shared
    /// encoder. Must follow a train-mode forward.
    pub fn backward_heads(
        &mut self,
        d_projections: Option<&Array2<f64>>,
        d_logits: Option<&Array2<f64>>,
    ) {
        let mut d_features: Option<Array2<f64>> = None;
        if let Some(dp) = d_projections {
            d_features = Some(self.projector.backward(dp));
        }
        if let Some(dl) = d_logits {
            let d = self.classifier.backward(dl);
            d_features = Some(match d_features {
                Some(acc) => acc + &d,
                None => d,
            });
        }
        let d_features = d_features.expect("no head gradients supplied");
        let spatial = self.last_conv_spatial.expect("backward before forward");
        let d_conv = global_avg_pool_backward(&d_features, spatial);
        self.encoder.backward(&d_conv);
    }

    /// One shared-encoder pass over both views; projector and classifier both
    /// consume the same features.
    pub fn forward_joint(&mut self, pair: &ViewPair, train: bool) -> Result<EmbeddingBatch> {
        let n = pair.view_a.dim().0;
        if pair.view_a.dim() != pair.view_b.dim() {
            return Err(FktError::InvalidInput(format!(
                "view shapes differ: {:?} vs {:?}",
                pair.view_a.dim(),
                pair.view_b.dim()
            )));
        }
        let stacked = concatenate(Axis(0), &[pair.view_a.view(), pair.view_b.view()])
            .map_err(|e| FktError::InvalidInput(e.to_string()))?;
        let features = self.encode(&stacked, train);
        let projections = self.project(&features, train);
        let logits = self.classify_features(&features, train);
        let split2 = |m: &Array2<f64>| {
            (
                m.slice(ndarray::s![..n, ..]).to_owned(),
                m.slice(ndarray::s![n.., ..]).to_owned(),
            )
        };
        let (features_a, features_b) = split2(&features);
        let (projections_a, projections_b) = split2(&projections);
        let (logits_a, logits_b) = split2(&logits);
        Ok(EmbeddingBatch {
            features_a,
            features_b,
            projections_a,
            projections_b,
            logits_a,
            logits_b,
        })
    }

    /// Classification path only: encoder -> classifier, projector untouched.
    pub fn forward_classify(&mut self, images: &ImageBatch, train: bool) -> Result<Array2<f64>> {
        if images.pixels.dim().0 == 0 {
            return Err(FktError::InvalidInput("empty image batch".into()));
        }
        let features = self.encode(&images.pixels, train);
        Ok(self.classify_features(&features, train))
    }

    /// Activation map of the last conv block plus the gradient of the target
    /// logit with respect to it. Runs in evaluation mode and leaves parameter
    /// gradients untouched.
    pub fn cam_activations(
        &mut self,
        pixels: &Array4<f64>,
        target_class: usize,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        if target_class >= self.cfg.num_classes {
            return Err(FktError::InvalidInput(format!(
                "target class {} out of range for {} classes",
                target_class, self.cfg.num_classes
            )));
        }
        let (features, conv_map) = self.encode_with_map(pixels, false);
        let (n, _) = features.dim();
        let mut d_logits = Array2::<f64>::zeros((n, self.cfg.num_classes));
        for i in 0..n {
            d_logits[[i, target_class]] = 1.0;
        }
        let d_features = self.classifier.input_grad(&d_logits);
        let (_, _, h, w) = conv_map.dim();
        let d_conv = global_avg_pool_backward(&d_features, (h, w));
        Ok((conv_map, d_conv))
    }
}

impl Params for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.encoder.visit_params(&format!("{prefix}encoder"), f);
        self.projector.visit_params(&format!("{prefix}projector"), f);
        self.classifier.visit_params(&format!("{prefix}classifier"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        self.encoder.visit_buffers(&format!("{prefix}encoder"), f);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub is_buffer: bool,
}

/// Serialized model state: every parameter and buffer keyed by name, plus the
/// creating config and its hash. Round-trips are bit-exact.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub tensors: BTreeMap<String, TensorData>,
}

const CKPT_MAGIC: &[u8; 8] = b"FKTCKPT1";

pub fn config_hash(cfg: &ModelConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    format!("{:016x}", fnv1a(&canonical))
}

/// Snapshot every parameter and buffer of the model.
pub fn export_parameters(model: &mut Model) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    model.visit_params("", &mut |p: crate::nn::ParamRef<'_>| {
        tensors.insert(
            p.name.clone(),
            TensorData {
                shape: p.shape.clone(),
                values: p.data.to_vec(),
                is_buffer: false,
            },
        );
    });
    model.visit_buffers("", &mut |b: crate::nn::BufferRef<'_>| {
        tensors.insert(
            b.name.clone(),
            TensorData {
                shape: b.shape.clone(),
                values: b.data.to_vec(),
                is_buffer: true,
            },
        );
    });
    let resolved = model.cfg.clone();
    Checkpoint {
        config_hash: config_hash(&resolved),
        model_config: resolved,
        tensors,
    }
}

fn encoder_compatible(model: &Model, ckpt: &Checkpoint) -> Result<()> {
    let m = &model.cfg;
    let c = &ckpt.model_config;
    if m.backbone != c.backbone
        || m.encoder_dim != c.encoder_dim
        || m.small_input_stem != c.small_input_stem
    {
        return Err(FktError::IncompatibleCheckpoint(format!(
            "encoder mismatch: model is {}/dim {}/small_stem {}, checkpoint is {}/dim {}/small_stem {}",
            m.backbone, m.encoder_dim, m.small_input_stem,
            c.backbone, c.encoder_dim, c.small_input_stem
        )));
    }
    Ok(())
}

/// Copy only the encoder tensors from the checkpoint; projector and
/// classifier keep the receiving model's fresh initialization.
pub fn load_encoder(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    encoder_compatible(model, ckpt)?;
    copy_tensors(model, ckpt, "encoder")
}

/// Copy every tensor; requires the full configs to match.
pub fn load_all(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    if model.cfg != ckpt.model_config {
        return Err(FktError::IncompatibleCheckpoint(format!(
            "model config differs from checkpoint config ({} vs {})",
            config_hash(&model.cfg),
            ckpt.config_hash
        )));
    }
    copy_tensors(model, ckpt, "")
}

fn copy_tensors(model: &mut Model, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let mut failure: Option<FktError> = None;
    let mut copy = |name: &str, shape: &[usize], data: &mut [f64]| {
        if !name.starts_with(prefix) || failure.is_some() {
            return;
        }
        match ckpt.tensors.get(name) {
            None => {
                failure = Some(FktError::CorruptCheckpoint(format!(
                    "missing tensor {name}"
                )));
            }
            Some(t) if t.shape != shape => {
                failure = Some(FktError::IncompatibleCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            Some(t) => data.copy_from_slice(&t.values),
        }
    };
    model.visit_params("", &mut |p: crate::nn::ParamRef<'_>| {
        copy(&p.name, &p.shape, p.data);
    });
    model.visit_buffers("", &mut |b: crate::nn::BufferRef<'_>| {
        copy(&b.name, &b.shape, b.data);
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let header = serde_json::json!({
            "model_config": self.model_config,
            "config_hash": self.config_hash,
        });
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| FktError::Persistence(e.to_string()))?;
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.push(u8::from(t.is_buffer));
            buf.extend_from_slice(&(t.values.len() as u64).to_le_bytes());
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| {
                FktError::Persistence(format!("{}: {e}", dir.display()))
            })?;
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| FktError::Persistence(format!("{}: {e}", path.display())))?;
        file.write_all(&buf)
            .map_err(|e| FktError::Persistence(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| FktError::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        let corrupt =
            |what: &str| FktError::CorruptCheckpoint(format!("{}: {what}", path.display()));
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(corrupt("truncated"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(take(&mut pos, header_len)?)
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let model_config: ModelConfig =
            serde_json::from_value(header["model_config"].clone())
                .map_err(|e| corrupt(&format!("bad model config: {e}")))?;
        let config_hash = header["config_hash"]
            .as_str()
            .ok_or_else(|| corrupt("missing config hash"))?
            .to_string();
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| corrupt("non-utf8 tensor name"))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let is_buffer = take(&mut pos, 1)?[0] != 0;
            let value_count =
                u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            if value_count != shape.iter().product::<usize>() {
                return Err(corrupt(&format!("tensor {name} size/shape mismatch")));
            }
            let raw = take(&mut pos, value_count * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name,
                TensorData {
                    shape,
                    values,
                    is_buffer,
                },
            );
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            model_config,
            config_hash,
            tensors,
        })
    }
}
