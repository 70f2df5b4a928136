//! Model zoo: the image processing network (P), the shape-preserving
//! transformer (T), three small recognizer families (R), and checkpoint
//! serialization.
//!
//! P and T share one residual-CNN template (input conv, residual blocks
//! with batch norm and PReLU, global skip, optional sub-pixel upsampling
//! head). Recognizers are CIFAR-style classifiers carrying their own
//! fixed input normalization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, AvgPool2, BatchNorm2d, Conv2d, GlobalAvgPool, HasParams, InputNorm, Linear, MaxPool2,
    PRelu, Param, Pass, PixelShuffle, Relu,
};
use crate::rng;
use crate::tensor::{Mat, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorSpec {
    /// 4 for super-resolution, 1 for the same-size restoration tasks.
    pub upscale: u32,
    pub n_resblocks: usize,
    pub base_channels: usize,
}

impl Default for ProcessorSpec {
    fn default() -> Self {
        ProcessorSpec {
            upscale: 1,
            n_resblocks: 5,
            base_channels: 32,
        }
    }
}

impl ProcessorSpec {
    pub fn for_task(task: &crate::degrade::DegradationSpec) -> Self {
        ProcessorSpec {
            upscale: task.input_scale() as u32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upscale != 1 && self.upscale != 4 {
            return Err(Error::InvalidSpec(format!(
                "processor upscale must be 1 or 4, got {}",
                self.upscale
            )));
        }
        if self.n_resblocks == 0 || self.base_channels == 0 {
            return Err(Error::InvalidSpec(
                "processor needs at least one residual block and one channel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub n_resblocks: usize,
    pub base_channels: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        TransformerSpec {
            n_resblocks: 6,
            base_channels: 32,
        }
    }
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks == 0 || self.base_channels == 0 {
            return Err(Error::InvalidSpec(
                "transformer needs at least one residual block and one channel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerFamily {
    ResnetSmall,
    VggSmall,
    DensenetSmall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizerSpec {
    pub family: RecognizerFamily,
    pub depth: usize,
    pub num_classes: usize,
}

impl RecognizerSpec {
    pub fn resnet(num_classes: usize) -> Self {
        RecognizerSpec {
            family: RecognizerFamily::ResnetSmall,
            depth: 8,
            num_classes,
        }
    }

    pub fn vgg(num_classes: usize) -> Self {
        RecognizerSpec {
            family: RecognizerFamily::VggSmall,
            depth: 6,
            num_classes,
        }
    }

    pub fn densenet(num_classes: usize) -> Self {
        RecognizerSpec {
            family: RecognizerFamily::DensenetSmall,
            depth: 8,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "recognizer needs >= 2 classes, got {}",
                self.num_classes
            )));
        }
        let ok = match self.family {
            RecognizerFamily::ResnetSmall => self.depth >= 8 && (self.depth - 2) % 6 == 0,
            RecognizerFamily::VggSmall => self.depth >= 3 && self.depth % 3 == 0,
            RecognizerFamily::DensenetSmall => self.depth >= 6 && (self.depth - 4) % 2 == 0,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "depth {} invalid for family {:?}",
                self.depth, self.family
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Residual image-to-image network (P and T)
// ---------------------------------------------------------------------------

pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn new<R: Rng>(name: &str, c: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c),
            act: PRelu::new(&format!("{name}.act"), c),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c),
        }
    }

    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut y = self.conv1.forward(x, pass);
        y = self.bn1.forward(&y, pass);
        y = self.act.forward(&y, pass);
        y = self.conv2.forward(&y, pass);
        y = self.bn2.forward(&y, pass);
        y.add_assign(x);
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = self.bn2.backward(dy);
        g = self.conv2.backward(&g);
        g = self.act.backward(&g);
        g = self.bn1.backward(&g);
        g = self.conv1.backward(&g);
        g.add_assign(dy);
        g
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.act.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }
}

struct UpStage {
    conv: Conv2d,
    shuffle: PixelShuffle,
    act: PRelu,
}

/// SRResNet-style restoration network: 9x9 input conv + PReLU, residual
/// blocks, a post conv + BN joined to the input features by a global
/// skip, then either a plain head (upscale 1) or two sub-pixel x2 stages
/// (upscale 4), and a 9x9 output conv. Outputs are not clipped — the
/// harness clips at evaluation time.
pub struct SrResNet {
    pub upscale: u32,
    pub base_channels: usize,
    head: Conv2d,
    head_act: PRelu,
    blocks: Vec<ResBlock>,
    post: Conv2d,
    post_bn: BatchNorm2d,
    ups: Vec<UpStage>,
    tail: Conv2d,
}

impl SrResNet {
    fn build<R: Rng>(upscale: u32, n_resblocks: usize, c: usize, rng: &mut R) -> Self {
        let head = Conv2d::new("head", 3, c, 9, 1, 4, rng);
        let head_act = PRelu::new("head_act", c);
        let blocks = (0..n_resblocks)
            .map(|i| ResBlock::new(&format!("blocks.{i}"), c, rng))
            .collect();
        let post = Conv2d::new("post", c, c, 3, 1, 1, rng);
        let post_bn = BatchNorm2d::new("post_bn", c);
        let n_up = if upscale == 4 { 2 } else { 0 };
        let ups = (0..n_up)
            .map(|i| UpStage {
                conv: Conv2d::new(&format!("ups.{i}.conv"), c, 4 * c, 3, 1, 1, rng),
                shuffle: PixelShuffle::new(2),
                act: PRelu::new(&format!("ups.{i}.act"), c),
            })
            .collect();
        let tail = Conv2d::new("tail", c, 3, 9, 1, 4, rng);
        SrResNet {
            upscale,
            base_channels: c,
            head,
            head_act,
            blocks,
            post,
            post_bn,
            ups,
            tail,
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let h0 = self.head_act.forward(&self.head.forward(x, pass), pass);
        let mut y = h0.clone();
        for b in self.blocks.iter_mut() {
            y = b.forward(&y, pass);
        }
        y = self.post_bn.forward(&self.post.forward(&y, pass), pass);
        y.add_assign(&h0);
        for up in self.ups.iter_mut() {
            y = up.conv.forward(&y, pass);
            y = up.shuffle.forward(&y, pass);
            y = up.act.forward(&y, pass);
        }
        self.tail.forward(&y, pass)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = self.tail.backward(dy);
        for up in self.ups.iter_mut().rev() {
            g = up.act.backward(&g);
            g = up.shuffle.backward(&g);
            g = up.conv.backward(&g);
        }
        // g is the gradient at the global-skip sum; both branches get it.
        let mut gb = self.post.backward(&self.post_bn.backward(&g));
        for b in self.blocks.iter_mut().rev() {
            gb = b.backward(&gb);
        }
        gb.add_assign(&g);
        self.head.backward(&self.head_act.backward(&gb))
    }
}

impl HasParams for SrResNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head.visit_params(f);
        self.head_act.visit_params(f);
        for b in self.blocks.iter_mut() {
            b.visit(f);
        }
        self.post.visit_params(f);
        self.post_bn.visit_params(f);
        for up in self.ups.iter_mut() {
            up.conv.visit_params(f);
            up.act.visit_params(f);
        }
        self.tail.visit_params(f);
    }
}

pub fn build_processor(spec: &ProcessorSpec, seed: u64) -> Result<SrResNet> {
    spec.validate()?;
    let mut r = rng::stream(rng::derive(seed, "init_processor"), 0);
    Ok(SrResNet::build(
        spec.upscale,
        spec.n_resblocks,
        spec.base_channels,
        &mut r,
    ))
}

pub fn build_transformer(spec: &TransformerSpec, seed: u64) -> Result<SrResNet> {
    spec.validate()?;
    let mut r = rng::stream(rng::derive(seed, "init_transformer"), 0);
    Ok(SrResNet::build(1, spec.n_resblocks, spec.base_channels, &mut r))
}

// ---------------------------------------------------------------------------
// Recognizers
// ---------------------------------------------------------------------------

pub trait Recognizer: HasParams + Send {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Mat;
    fn backward(&mut self, dlogits: &Mat) -> Tensor;
    fn num_classes(&self) -> usize;
    fn normalization(&self) -> ([f64; 3], [f64; 3]);
}

pub const RECOG_INPUT_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const RECOG_INPUT_STD: [f64; 3] = [0.25, 0.25, 0.25];

struct ClassifierBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl ClassifierBlock {
    fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let proj = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&format!("{name}.proj"), cin, cout, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), cout),
            ))
        } else {
            None
        };
        ClassifierBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            relu1: Relu::new(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            proj,
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut y = self.bn1.forward(&self.conv1.forward(x, pass), pass);
        y = self.relu1.forward(&y, pass);
        y = self.bn2.forward(&self.conv2.forward(&y, pass), pass);
        let shortcut = match self.proj.as_mut() {
            Some((conv, bn)) => bn.forward(&conv.forward(x, pass), pass),
            None => x.clone(),
        };
        y.add_assign(&shortcut);
        self.relu_out.forward(&y, pass)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.relu_out.backward(dy);
        let mut main = self.conv2.backward(&self.bn2.backward(&g));
        main = self.relu1.backward(&main);
        main = self.conv1.backward(&self.bn1.backward(&main));
        let skip = match self.proj.as_mut() {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)),
            None => g,
        };
        main.add_assign(&skip);
        main
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = self.proj.as_mut() {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }
}

/// CIFAR-style ResNet: stem conv, three stages (stride 1/2/2) of basic
/// blocks, global average pooling, linear head. depth = 6n + 2.
pub struct SmallResNet {
    norm: InputNorm,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    blocks: Vec<ClassifierBlock>,
    gap: GlobalAvgPool,
    fc: Linear,
    classes: usize,
}

const RESNET_BASE: usize = 8;

impl SmallResNet {
    fn build<R: Rng>(depth: usize, classes: usize, rng: &mut R) -> Self {
        let n = (depth - 2) / 6;
        let c0 = RESNET_BASE;
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (stage, mult) in [1usize, 2, 4].iter().enumerate() {
            let cout = c0 * mult;
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ClassifierBlock::new(
                    &format!("stage{stage}.block{b}"),
                    cin,
                    cout,
                    stride,
                    rng,
                ));
                cin = cout;
            }
        }
        SmallResNet {
            norm: InputNorm {
                mean: RECOG_INPUT_MEAN,
                std: RECOG_INPUT_STD,
            },
            stem: Conv2d::new("stem", 3, c0, 3, 1, 1, rng),
            stem_bn: BatchNorm2d::new("stem_bn", c0),
            stem_relu: Relu::new(),
            blocks,
            gap: GlobalAvgPool::new(),
            fc: Linear::new("fc", 4 * c0, classes, rng),
            classes,
        }
    }
}

impl Recognizer for SmallResNet {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Mat {
        let mut y = self.norm.forward(x);
        y = self.stem_bn.forward(&self.stem.forward(&y, pass), pass);
        y = self.stem_relu.forward(&y, pass);
        for b in self.blocks.iter_mut() {
            y = b.forward(&y, pass);
        }
        let pooled = self.gap.forward(&y, pass);
        self.fc.forward(&pooled, pass)
    }

    fn backward(&mut self, dlogits: &Mat) -> Tensor {
        let g = self.fc.backward(dlogits);
        let mut g = self.gap.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g = self.stem_relu.backward(&g);
        g = self.stem.backward(&self.stem_bn.backward(&g));
        self.norm.backward(&g)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn normalization(&self) -> ([f64; 3], [f64; 3]) {
        (self.norm.mean, self.norm.std)
    }
}

impl HasParams for SmallResNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        for b in self.blocks.iter_mut() {
            b.visit(f);
        }
        self.fc.visit_params(f);
    }
}

/// VGG-style stack: per stage `depth/3` conv-bn-relu units then a 2x2
/// max pool; channel widths 8/16/32; global average pool + linear.
pub struct SmallVgg {
    norm: InputNorm,
    units: Vec<(Conv2d, BatchNorm2d, Relu)>,
    /// Pool after each stage; `stage_ends[i]` is the unit index closing
    /// stage i.
    stage_ends: Vec<usize>,
    pools: Vec<MaxPool2>,
    gap: GlobalAvgPool,
    fc: Linear,
    classes: usize,
}

const VGG_BASE: usize = 8;

impl SmallVgg {
    fn build<R: Rng>(depth: usize, classes: usize, rng: &mut R) -> Self {
        let per_stage = depth / 3;
        let mut units = Vec::new();
        let mut stage_ends = Vec::new();
        let mut cin = 3;
        for stage in 0..3usize {
            let cout = VGG_BASE << stage;
            for u in 0..per_stage {
                units.push((
                    Conv2d::new(&format!("stage{stage}.conv{u}"), cin, cout, 3, 1, 1, rng),
                    BatchNorm2d::new(&format!("stage{stage}.bn{u}"), cout),
                    Relu::new(),
                ));
                cin = cout;
            }
            stage_ends.push(units.len() - 1);
        }
        SmallVgg {
            norm: InputNorm {
                mean: RECOG_INPUT_MEAN,
                std: RECOG_INPUT_STD,
            },
            units,
            stage_ends,
            pools: (0..3).map(|_| MaxPool2::new()).collect(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new("fc", 4 * VGG_BASE, classes, rng),
            classes,
        }
    }
}

impl Recognizer for SmallVgg {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Mat {
        let mut y = self.norm.forward(x);
        let mut stage = 0usize;
        for (i, (conv, bn, relu)) in self.units.iter_mut().enumerate() {
            y = relu.forward(&bn.forward(&conv.forward(&y, pass), pass), pass);
            if self.stage_ends[stage] == i {
                y = self.pools[stage].forward(&y, pass);
                stage += 1;
            }
        }
        let pooled = self.gap.forward(&y, pass);
        self.fc.forward(&pooled, pass)
    }

    fn backward(&mut self, dlogits: &Mat) -> Tensor {
        let g = self.fc.backward(dlogits);
        let mut g = self.gap.backward(&g);
        let mut stage = 2usize;
        for (i, (conv, bn, relu)) in self.units.iter_mut().enumerate().rev() {
            if self.stage_ends[stage] == i {
                g = self.pools[stage].backward(&g);
                stage = stage.saturating_sub(1);
            }
            g = conv.backward(&bn.backward(&relu.backward(&g)));
        }
        self.norm.backward(&g)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn normalization(&self) -> ([f64; 3], [f64; 3]) {
        (self.norm.mean, self.norm.std)
    }
}

impl HasParams for SmallVgg {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (conv, bn, _) in self.units.iter_mut() {
            conv.visit_params(f);
            bn.visit_params(f);
        }
        self.fc.visit_params(f);
    }
}

/// One pre-activation dense layer: BN -> ReLU -> 3x3 conv producing
/// `growth` channels from everything concatenated so far.
struct DenseLayer {
    bn: BatchNorm2d,
    relu: Relu,
    conv: Conv2d,
}

/// Densely connected classifier: stem, two dense blocks joined by a
/// 1x1-conv + avg-pool transition, then BN-ReLU-GAP-linear.
/// depth = 4 + 2 * layers_per_block.
pub struct SmallDenseNet {
    norm: InputNorm,
    stem: Conv2d,
    block1: Vec<DenseLayer>,
    trans_bn: BatchNorm2d,
    trans_relu: Relu,
    trans_conv: Conv2d,
    trans_pool: AvgPool2,
    block2: Vec<DenseLayer>,
    final_bn: BatchNorm2d,
    final_relu: Relu,
    gap: GlobalAvgPool,
    fc: Linear,
    classes: usize,
    /// Forward caches for the concat bookkeeping, one entry per block.
    features: [Vec<Tensor>; 2],
    pass: Pass,
}

const DENSE_GROWTH: usize = 6;

impl SmallDenseNet {
    fn build<R: Rng>(depth: usize, classes: usize, rng: &mut R) -> Self {
        let layers = (depth - 4) / 2;
        let g = DENSE_GROWTH;
        let stem_c = 2 * g;
        let make_block = |name: &str, cin: usize, rng: &mut R| -> Vec<DenseLayer> {
            (0..layers)
                .map(|i| {
                    let c = cin + i * g;
                    DenseLayer {
                        bn: BatchNorm2d::new(&format!("{name}.{i}.bn"), c),
                        relu: Relu::new(),
                        conv: Conv2d::new(&format!("{name}.{i}.conv"), c, g, 3, 1, 1, rng),
                    }
                })
                .collect()
        };
        let b1_out = stem_c + layers * g;
        let trans_out = b1_out / 2;
        let b2_out = trans_out + layers * g;
        SmallDenseNet {
            norm: InputNorm {
                mean: RECOG_INPUT_MEAN,
                std: RECOG_INPUT_STD,
            },
            stem: Conv2d::new("stem", 3, stem_c, 3, 1, 1, rng),
            block1: make_block("block1", stem_c, rng),
            trans_bn: BatchNorm2d::new("trans_bn", b1_out),
            trans_relu: Relu::new(),
            trans_conv: Conv2d::new("trans_conv", b1_out, trans_out, 1, 1, 0, rng),
            trans_pool: AvgPool2::new(),
            block2: make_block("block2", trans_out, rng),
            final_bn: BatchNorm2d::new("final_bn", b2_out),
            final_relu: Relu::new(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new("fc", b2_out, classes, rng),
            classes,
            features: [Vec::new(), Vec::new()],
            pass: Pass::Infer,
        }
    }

    fn block_forward(
        layers: &mut [DenseLayer],
        x: &Tensor,
        pass: Pass,
        cache: &mut Vec<Tensor>,
    ) -> Tensor {
        let mut feats: Vec<Tensor> = vec![x.clone()];
        for layer in layers.iter_mut() {
            let input = Tensor::concat_channels(&feats.iter().collect::<Vec<_>>());
            let mut y = layer.bn.forward(&input, pass);
            y = layer.relu.forward(&y, pass);
            feats.push(layer.conv.forward(&y, pass));
        }
        let out = Tensor::concat_channels(&feats.iter().collect::<Vec<_>>());
        if pass.caches() {
            *cache = feats;
        }
        out
    }

    fn block_backward(layers: &mut [DenseLayer], dy: &Tensor, feats: &[Tensor]) -> Tensor {
        // Split the block-output gradient into per-feature accumulators.
        let mut grads: Vec<Tensor> = Vec::with_capacity(feats.len());
        let mut c0 = 0;
        for f in feats {
            grads.push(dy.slice_channels(c0, f.c));
            c0 += f.c;
        }
        for (i, layer) in layers.iter_mut().enumerate().rev() {
            let g_out = grads[i + 1].clone();
            let g = layer.conv.backward(&g_out);
            let g = layer.relu.backward(&g);
            let g = layer.bn.backward(&g);
            // g is the gradient of the concat of feats[0..=i].
            let mut c0 = 0;
            for (j, f) in feats.iter().take(i + 1).enumerate() {
                grads[j].add_assign(&g.slice_channels(c0, f.c));
                c0 += f.c;
            }
        }
        grads.swap_remove(0)
    }
}

impl Recognizer for SmallDenseNet {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Mat {
        self.pass = pass;
        let y = self.norm.forward(x);
        let y = self.stem.forward(&y, pass);
        let mut caches = [Vec::new(), Vec::new()];
        let y = Self::block_forward(&mut self.block1, &y, pass, &mut caches[0]);
        let y = self.trans_bn.forward(&y, pass);
        let y = self.trans_relu.forward(&y, pass);
        let y = self.trans_conv.forward(&y, pass);
        let y = self.trans_pool.forward(&y, pass);
        let y = Self::block_forward(&mut self.block2, &y, pass, &mut caches[1]);
        let y = self.final_bn.forward(&y, pass);
        let y = self.final_relu.forward(&y, pass);
        self.features = caches;
        let pooled = self.gap.forward(&y, pass);
        self.fc.forward(&pooled, pass)
    }

    fn backward(&mut self, dlogits: &Mat) -> Tensor {
        let g = self.fc.backward(dlogits);
        let g = self.gap.backward(&g);
        let g = self.final_relu.backward(&g);
        let g = self.final_bn.backward(&g);
        let g = Self::block_backward(&mut self.block2, &g, &self.features[1]);
        let g = self.trans_pool.backward(&g);
        let g = self.trans_conv.backward(&g);
        let g = self.trans_relu.backward(&g);
        let g = self.trans_bn.backward(&g);
        let g = Self::block_backward(&mut self.block1, &g, &self.features[0]);
        let g = self.stem.backward(&g);
        self.norm.backward(&g)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn normalization(&self) -> ([f64; 3], [f64; 3]) {
        (self.norm.mean, self.norm.std)
    }
}

impl HasParams for SmallDenseNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params(f);
        for l in self.block1.iter_mut() {
            l.bn.visit_params(f);
            l.conv.visit_params(f);
        }
        self.trans_bn.visit_params(f);
        self.trans_conv.visit_params(f);
        for l in self.block2.iter_mut() {
            l.bn.visit_params(f);
            l.conv.visit_params(f);
        }
        self.final_bn.visit_params(f);
        self.fc.visit_params(f);
    }
}

pub fn build_recognizer(spec: &RecognizerSpec, seed: u64) -> Result<Box<dyn Recognizer>> {
    spec.validate()?;
    let mut r = rng::stream(rng::derive(seed, "init_recognizer"), 0);
    Ok(match spec.family {
        RecognizerFamily::ResnetSmall => {
            Box::new(SmallResNet::build(spec.depth, spec.num_classes, &mut r))
        }
        RecognizerFamily::VggSmall => {
            Box::new(SmallVgg::build(spec.depth, spec.num_classes, &mut r))
        }
        RecognizerFamily::DensenetSmall => {
            Box::new(SmallDenseNet::build(spec.depth, spec.num_classes, &mut r))
        }
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    P,
    T,
    R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Processor(ProcessorSpec),
    Transformer(TransformerSpec),
    Recognizer(RecognizerSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub role: Role,
    pub spec: ModelSpec,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub census: Vec<(String, Vec<usize>)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalization: Option<Normalization>,
}

impl Manifest {
    pub fn new(role: Role, spec: ModelSpec, seed: u64, config_hash: String) -> Self {
        Manifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            role,
            spec,
            seed,
            config_hash,
            metrics: BTreeMap::new(),
            census: Vec::new(),
            normalization: None,
        }
    }
}

/// Write `{manifest.json, weights.bin}`. The manifest census is filled
/// from the model being saved.
pub fn save_checkpoint(dir: &Path, net: &mut dyn HasParams, mut manifest: Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    manifest.census = nn::param_census(net);
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), body + "\n")?;
    fs::write(dir.join("weights.bin"), nn::params_to_bytes(net))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "schema version {} unsupported",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

fn load_weights_into(dir: &Path, net: &mut dyn HasParams, manifest: &Manifest) -> Result<()> {
    let census = nn::param_census(net);
    if census != manifest.census {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest census does not match the architecture built from its spec ({} vs {} params)",
            manifest.census.len(),
            census.len()
        )));
    }
    let path = dir.join("weights.bin");
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let bytes = fs::read(&path)?;
    nn::params_from_bytes(net, &bytes).map_err(Error::CorruptCheckpoint)
}

pub fn load_processor(dir: &Path) -> Result<(SrResNet, Manifest)> {
    let manifest = load_manifest(dir)?;
    if manifest.role != Role::P {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds a {:?} checkpoint, not a processor",
            dir.display(),
            manifest.role
        )));
    }
    let spec = match &manifest.spec {
        ModelSpec::Processor(s) => s.clone(),
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "role P with non-processor spec {other:?}"
            )))
        }
    };
    let mut net = build_processor(&spec, manifest.seed)?;
    load_weights_into(dir, &mut net, &manifest)?;
    Ok((net, manifest))
}

pub fn load_transformer(dir: &Path) -> Result<(SrResNet, Manifest)> {
    let manifest = load_manifest(dir)?;
    if manifest.role != Role::T {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds a {:?} checkpoint, not a transformer",
            dir.display(),
            manifest.role
        )));
    }
    let spec = match &manifest.spec {
        ModelSpec::Transformer(s) => s.clone(),
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "role T with non-transformer spec {other:?}"
            )))
        }
    };
    let mut net = build_transformer(&spec, manifest.seed)?;
    load_weights_into(dir, &mut net, &manifest)?;
    Ok((net, manifest))
}

pub fn load_recognizer(dir: &Path) -> Result<(Box<dyn Recognizer>, Manifest)> {
    let manifest = load_manifest(dir)?;
    if manifest.role != Role::R {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds a {:?} checkpoint, not a recognizer",
            dir.display(),
            manifest.role
        )));
    }
    let spec = match &manifest.spec {
        ModelSpec::Recognizer(s) => s.clone(),
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "role R with non-recognizer spec {other:?}"
            )))
        }
    };
    let mut net = build_recognizer(&spec, manifest.seed)?;
    load_weights_into(dir, net.as_mut(), &manifest)?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;
    use tempfile::TempDir;

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(n, 3, h, w);
        let mut r = rng::stream(seed, 0);
        for v in t.data.iter_mut() {
            *v = r.random_range(0.0..1.0);
        }
        t
    }

    #[test]
    fn processor_shapes() {
        let spec = ProcessorSpec {
            upscale: 4,
            n_resblocks: 2,
            base_channels: 8,
        };
        let mut p = build_processor(&spec, 1).unwrap();
        let x = random_batch(2, 8, 8, 1);
        let y = p.forward(&x, Pass::Infer);
        assert_eq!((y.n, y.c, y.h, y.w), (2, 3, 32, 32));

        let spec1 = ProcessorSpec {
            upscale: 1,
            n_resblocks: 2,
            base_channels: 8,
        };
        let mut p1 = build_processor(&spec1, 1).unwrap();
        let y = p1.forward(&random_batch(1, 12, 16, 2), Pass::Infer);
        assert_eq!((y.c, y.h, y.w), (3, 12, 16));
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(build_processor(
            &ProcessorSpec {
                upscale: 2,
                n_resblocks: 2,
                base_channels: 8
            },
            0
        )
        .is_err());
        assert!(build_recognizer(
            &RecognizerSpec {
                family: RecognizerFamily::ResnetSmall,
                depth: 9,
                num_classes: 4
            },
            0
        )
        .is_err());
        assert!(build_recognizer(
            &RecognizerSpec {
                family: RecognizerFamily::ResnetSmall,
                depth: 8,
                num_classes: 1
            },
            0
        )
        .is_err());
    }

    #[test]
    fn deterministic_init_and_census() {
        let spec = ProcessorSpec {
            upscale: 1,
            n_resblocks: 2,
            base_channels: 8,
        };
        let mut a = build_processor(&spec, 7).unwrap();
        let mut b = build_processor(&spec, 7).unwrap();
        assert_eq!(nn::params_to_bytes(&mut a), nn::params_to_bytes(&mut b));
        let mut c = build_processor(&spec, 8).unwrap();
        assert_ne!(nn::params_to_bytes(&mut a), nn::params_to_bytes(&mut c));

        // Census spot checks: order and shapes are frozen.
        let census = nn::param_census(&mut a);
        assert_eq!(census[0].0, "head.weight");
        assert_eq!(census[0].1, vec![8, 3, 9, 9]);
        assert_eq!(census[1].0, "head.bias");
        assert_eq!(census[2].0, "head_act.alpha");
        assert_eq!(census[3].0, "blocks.0.conv1.weight");
        let last = census.last().unwrap();
        assert_eq!(last.0, "tail.bias");
        assert_eq!(last.1, vec![3]);
    }

    #[test]
    fn transformer_preserves_shape_and_param_formula() {
        let spec = TransformerSpec {
            n_resblocks: 6,
            base_channels: 8,
        };
        let mut t = build_transformer(&spec, 3).unwrap();
        let x = random_batch(1, 16, 16, 4);
        let y = t.forward(&x, Pass::Infer);
        assert_eq!((y.c, y.h, y.w), (3, 16, 16));

        // Closed-form parameter count from the layer dimensions.
        let c = 8usize;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let bn = |ch: usize| 4 * ch; // gamma, beta, running mean/var
        let block = conv(c, c, 3) + bn(c) + c + conv(c, c, 3) + bn(c);
        let expected = conv(3, c, 9) + c            // head + prelu
            + 6 * block
            + conv(c, c, 3) + bn(c)                 // post
            + conv(c, 3, 9); // tail
        assert_eq!(param_count(&mut t), expected);
    }

    #[test]
    fn recognizer_families_differ_and_are_deterministic() {
        let x = random_batch(2, 32, 32, 9);
        let specs = [
            RecognizerSpec::resnet(10),
            RecognizerSpec::vgg(10),
            RecognizerSpec::densenet(10),
        ];
        let mut logits = Vec::new();
        for spec in &specs {
            let mut r1 = build_recognizer(spec, 5).unwrap();
            let mut r2 = build_recognizer(spec, 5).unwrap();
            let l1 = r1.forward(&x, Pass::Infer);
            let l2 = r2.forward(&x, Pass::Infer);
            assert_eq!((l1.rows, l1.cols), (2, 10));
            assert_eq!(l1.data, l2.data, "same seed must reproduce init");
            assert!(l1.data.iter().all(|v| v.is_finite()));
            logits.push(l1);
        }
        assert_ne!(logits[0].data, logits[1].data);
        assert_ne!(logits[0].data, logits[2].data);
        assert_ne!(logits[1].data, logits[2].data);
    }

    #[test]
    fn recognizer_softmax_normalizes() {
        let mut r = build_recognizer(&RecognizerSpec::resnet(10), 2).unwrap();
        let x = random_batch(3, 32, 32, 5);
        let logits = r.forward(&x, Pass::Infer);
        for row in 0..3 {
            let p = crate::tensor::softmax_row(logits.row(row));
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn recognizer_gradients_flow_to_input() {
        // Finite-difference spot check straight through each family.
        for spec in [
            RecognizerSpec::resnet(4),
            RecognizerSpec::vgg(4),
            RecognizerSpec::densenet(4),
        ] {
            let mut model = build_recognizer(&spec, 3).unwrap();
            let x = random_batch(2, 16, 16, 6);
            let labels = [1usize, 3];
            let logits = model.forward(&x, Pass::Loss);
            let (_, dlogits) = crate::losses::recog_loss_supervised(&logits, &labels).unwrap();
            let dx = model.backward(&dlogits);
            assert_eq!(dx.numel(), x.numel());

            let mut loss_at = |x: &Tensor| -> f64 {
                let l = model.forward(x, Pass::Infer);
                crate::losses::recog_loss_supervised(&l, &labels).unwrap().0
            };
            let eps = 1e-5;
            for idx in [0usize, 101, 399] {
                let mut xp = x.clone();
                xp.data[idx] += eps;
                let mut xm = x.clone();
                xm.data[idx] -= eps;
                let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * eps);
                let an = dx.data[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 2e-3,
                    "{:?} dx[{idx}]: fd {fd} vs an {an}",
                    spec.family
                );
            }
        }
    }

    #[test]
    fn processor_gradcheck_through_whole_net() {
        let spec = ProcessorSpec {
            upscale: 4,
            n_resblocks: 1,
            base_channels: 4,
        };
        let mut p = build_processor(&spec, 11).unwrap();
        let x = random_batch(2, 4, 4, 12);
        let target = random_batch(2, 16, 16, 13);
        let y = p.forward(&x, Pass::Train);
        let (_, dy) = crate::losses::proc_loss(&y, &target).unwrap();
        let dx = p.backward(&dy);

        let mut loss_at = |x: &Tensor| -> f64 {
            let y = p.forward(x, Pass::Train);
            crate::losses::proc_loss(&y, &target).unwrap().0
        };
        let eps = 1e-5;
        for idx in [0usize, 33, 95] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * eps);
            let an = dx.data[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 2e-3, "dx[{idx}]: {fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = TempDir::new().unwrap();
        let spec = ProcessorSpec {
            upscale: 1,
            n_resblocks: 2,
            base_channels: 8,
        };
        let mut p = build_processor(&spec, 21).unwrap();
        let probe = random_batch(1, 12, 12, 22);
        let before = p.forward(&probe, Pass::Infer);

        let manifest = Manifest::new(
            Role::P,
            ModelSpec::Processor(spec.clone()),
            21,
            "testhash".into(),
        );
        save_checkpoint(dir.path(), &mut p, manifest).unwrap();
        let (mut loaded, manifest) = load_processor(dir.path()).unwrap();
        assert_eq!(manifest.seed, 21);
        let after = loaded.forward(&probe, Pass::Infer);
        assert_eq!(before.data, after.data);
    }

    #[test]
    fn checkpoint_role_and_blob_checks() {
        let dir = TempDir::new().unwrap();
        let spec = RecognizerSpec::resnet(4);
        let mut r = build_recognizer(&spec, 1).unwrap();
        let mut manifest = Manifest::new(
            Role::R,
            ModelSpec::Recognizer(spec.clone()),
            1,
            String::new(),
        );
        manifest.normalization = Some(Normalization {
            mean: RECOG_INPUT_MEAN,
            std: RECOG_INPUT_STD,
        });
        save_checkpoint(dir.path(), r.as_mut(), manifest).unwrap();

        // A recognizer checkpoint refuses to load as a processor.
        assert!(matches!(
            load_processor(dir.path()),
            Err(Error::CorruptCheckpoint(_))
        ));
        // Truncated weights are caught.
        let blob = fs::read(dir.path().join("weights.bin")).unwrap();
        fs::write(dir.path().join("weights.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_recognizer(dir.path()),
            Err(Error::CorruptCheckpoint(_))
        ));
        // Missing checkpoint directory surfaces as NotFound.
        assert!(matches!(
            load_processor(&dir.path().join("nope")),
            Err(Error::NotFound(_))
        ));
    }
}
