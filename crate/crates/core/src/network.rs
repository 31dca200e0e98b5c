//! Feature extractor producing patch-wise local features and per-class global
//! features from one shared trunk.
//!
//! ```text
//! image ─ Block A ─┬─ Block C ──────────────────── L  (B, P, M/d, N/d)
//!                  └─ Block B ─ Block C ─ Block D ─ H  (B, K, P)
//! ```
//!
//! * Block A: four 3x3 conv + batch-norm + ReLU stages, strides 1,2,2,1 (d = 4).
//! * Block B: stride-2 3x3 conv stages followed by global average pooling.
//! * Block C: residual pair of 1x1 convs, then a 1x1 projection to P.
//! * Block D: K independent P -> P linear maps, one per class.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{ChannelStats, ImageBatch};
use crate::error::{Error, Result};

pub const BLOCK_A_STRIDES: [usize; 4] = [1, 2, 2, 1];
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// P, the dimension shared by local and global features.
    pub feature_dim: usize,
    /// K, the number of global features.
    pub num_classes: usize,
    pub block_a_widths: [usize; 4],
    pub block_b_stages: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            feature_dim: 1024,
            num_classes: 3,
            block_a_widths: [64, 128, 256, 512],
            block_b_stages: 2,
            init_seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Kernel size and stride of one layer along the local path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
}

/// Receptive field in input pixels of one output unit of a conv stack.
pub fn receptive_field(layers: &[ConvGeometry]) -> usize {
    let mut field = 1;
    let mut jump = 1;
    for layer in layers {
        field += (layer.kernel - 1) * jump;
        jump *= layer.stride;
    }
    field
}

impl NetworkConfig {
    /// Downsampling rate d between the input and the local feature grid.
    pub fn downsampling(&self) -> usize {
        BLOCK_A_STRIDES.iter().product()
    }

    /// Layer geometry between an input pixel and one local feature.
    pub fn local_path(&self) -> Vec<ConvGeometry> {
        let mut layers: Vec<ConvGeometry> = BLOCK_A_STRIDES
            .iter()
            .map(|&stride| ConvGeometry { kernel: 3, stride })
            .collect();
        layers.extend([ConvGeometry { kernel: 1, stride: 1 }; 3]);
        layers
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.local_path())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("network needs at least one class".into()));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::Config(format!(
                "feature dim P={} must be at least K={}",
                self.feature_dim, self.num_classes
            )));
        }
        if self.in_channels == 0 || self.block_a_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Rejects inputs whose shape the network cannot process.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let d = self.downsampling();
        match *dims {
            [b, c, h, w] if b > 0 && c == self.in_channels && h % d == 0 && w % d == 0 && h > 0 && w > 0 => Ok(()),
            [_, c, h, w] => Err(Error::Shape(format!(
                "input {c}x{h}x{w}: need {} channels and spatial dims divisible by d={d}",
                self.in_channels
            ))),
            _ => Err(Error::Shape(format!("expected a (B, C, M, N) batch, got {dims:?}"))),
        }
    }

    /// Learnable scalar count, from layer shapes.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.in_channels;
        for &w in &self.block_a_widths {
            total += w * c_in * 9 + 2 * w;
            c_in = w;
        }
        let w = self.block_a_widths[3];
        total += self.block_b_stages * (w * w * 9 + 2 * w);
        let head = 2 * (w * w + w) + (self.feature_dim * w + self.feature_dim);
        total += 2 * head;
        total += self.num_classes * (self.feature_dim * self.feature_dim + self.feature_dim);
        total
    }
}

/// Patch-wise local features, `(B, P, U, V)`.
#[derive(Debug, Clone)]
pub struct LocalFeatureMap(Tensor);

impl LocalFeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// (B, P, U, V)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, _, u, v) = self.dims();
        (u, v)
    }

    /// Features laid out per position, `(B, U*V, P)`.
    pub fn positions(&self) -> Result<Tensor> {
        let (b, p, u, v) = self.dims();
        Ok(self.0.reshape((b, p, u * v))?.transpose(1, 2)?.contiguous()?)
    }
}

/// Per-class image-level features, `(B, K, P)`.
#[derive(Debug, Clone)]
pub struct GlobalFeatureSet(Tensor);

impl GlobalFeatureSet {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// (B, K, P)
    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3().expect("rank checked at construction")
    }
}

struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Var::from_tensor(
            &Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?,
        )?)
    }

    fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        Ok(Var::from_tensor(
            &Tensor::full(value, shape, &Device::Cpu)?.to_dtype(self.dtype)?,
        )?)
    }
}

struct Conv {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        Ok(Self {
            weight: init.normal(&[c_out, c_in, kernel, kernel], (gain / fan_in).sqrt())?,
            bias: if bias {
                Some(init.constant(&[c_out], 0.0)?)
            } else {
                None
            },
            stride,
            padding: kernel / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Tensor,
    running_var: Tensor,
}

/// Batch statistics to fold into the running estimates after a training pass.
struct StatsUpdate {
    mean: Tensor,
    var: Tensor,
    count: usize,
}

impl BatchNorm {
    fn new(init: &Init, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&[c], 1.0)?,
            beta: init.constant(&[c], 0.0)?,
            running_mean: Tensor::zeros(c, init.dtype, &Device::Cpu)?,
            running_var: Tensor::ones(c, init.dtype, &Device::Cpu)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Option<StatsUpdate>)> {
        let (b, _, h, w) = x.dims4()?;
        let (mean, var, update) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let update = StatsUpdate {
                mean: mean.detach().flatten_all()?,
                var: var.detach().flatten_all()?,
                count: b * h * w,
            };
            (mean, var, Some(update))
        } else {
            (
                self.running_mean.reshape((1, (), 1, 1))?,
                self.running_var.reshape((1, (), 1, 1))?,
                None,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let y = xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, (), 1, 1))?)?;
        Ok((y, update))
    }

    fn absorb(&mut self, update: StatsUpdate) -> Result<()> {
        let n = update.count as f64;
        let unbiased = if n > 1.0 {
            (update.var * (n / (n - 1.0)))?
        } else {
            update.var
        };
        self.running_mean = ((&self.running_mean * (1.0 - BN_MOMENTUM))? + (update.mean * BN_MOMENTUM)?)?;
        self.running_var = ((&self.running_var * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
        Ok(())
    }
}

struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn forward(&self, x: &Tensor, train: bool, updates: &mut Vec<StatsUpdate>) -> Result<Tensor> {
        let (y, update) = self.bn.forward(&self.conv.forward(x)?, train)?;
        updates.extend(update);
        Ok(y.relu()?)
    }
}

/// Block C.
struct ResidualHead {
    first: Conv,
    second: Conv,
    project: Conv,
}

impl ResidualHead {
    fn new(init: &mut Init, width: usize, out: usize) -> Result<Self> {
        Ok(Self {
            first: Conv::new(init, width, width, 1, 1, true, 2.0)?,
            second: Conv::new(init, width, width, 1, 1, true, 1.0)?,
            project: Conv::new(init, width, out, 1, 1, true, 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let inner = self.second.forward(&self.first.forward(x)?.relu()?)?;
        self.project.forward(&(x + inner)?)
    }
}

/// Block D entry.
struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub struct Network {
    config: NetworkConfig,
    block_a: Vec<ConvBnRelu>,
    block_b: Vec<ConvBnRelu>,
    local_head: ResidualHead,
    global_head: ResidualHead,
    class_heads: Vec<Linear>,
}

impl Network {
    /// Fresh random parameters, deterministic in `config.init_seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            dtype: config.precision.dtype(),
        };
        let mut block_a = Vec::with_capacity(4);
        let mut c_in = config.in_channels;
        for (&width, &stride) in config.block_a_widths.iter().zip(&BLOCK_A_STRIDES) {
            block_a.push(ConvBnRelu {
                conv: Conv::new(&mut init, c_in, width, 3, stride, false, 2.0)?,
                bn: BatchNorm::new(&init, width)?,
            });
            c_in = width;
        }
        let mut block_b = Vec::with_capacity(config.block_b_stages);
        for _ in 0..config.block_b_stages {
            block_b.push(ConvBnRelu {
                conv: Conv::new(&mut init, c_in, c_in, 3, 2, false, 2.0)?,
                bn: BatchNorm::new(&init, c_in)?,
            });
        }
        let p = config.feature_dim;
        let local_head = ResidualHead::new(&mut init, c_in, p)?;
        let global_head = ResidualHead::new(&mut init, c_in, p)?;
        let class_heads = (0..config.num_classes)
            .map(|_| {
                Ok(Linear {
                    weight: init.normal(&[p, p], (1.0 / p as f64).sqrt())?,
                    bias: init.constant(&[p], 0.0)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            block_a,
            block_b,
            local_head,
            global_head,
            class_heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    fn run(&self, x: &Tensor, train: bool) -> Result<(LocalFeatureMap, GlobalFeatureSet, Vec<StatsUpdate>)> {
        self.config.check_input(x.dims())?;
        let x = x.to_dtype(self.dtype())?;
        let mut updates = Vec::new();
        let mut trunk = x;
        for stage in &self.block_a {
            trunk = stage.forward(&trunk, train, &mut updates)?;
        }
        let local = self.local_head.forward(&trunk)?;

        let mut g = trunk;
        for stage in &self.block_b {
            g = stage.forward(&g, train, &mut updates)?;
        }
        let pooled = g.mean_keepdim((2, 3))?;
        let (b, p) = (pooled.dim(0)?, self.config.feature_dim);
        let g = self.global_head.forward(&pooled)?.reshape((b, p))?;
        let heads = self
            .class_heads
            .iter()
            .map(|head| head.forward(&g))
            .collect::<Result<Vec<_>>>()?;
        let global = Tensor::stack(&heads, 1)?;
        Ok((LocalFeatureMap(local), GlobalFeatureSet(global), updates))
    }

    /// Inference pass using running batch-norm statistics. Pure.
    pub fn forward(&self, x: &Tensor) -> Result<(LocalFeatureMap, GlobalFeatureSet)> {
        let (l, h, _) = self.run(x, false)?;
        Ok((l, h))
    }

    /// Training pass using batch statistics; folds them into the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(LocalFeatureMap, GlobalFeatureSet)> {
        let (l, h, updates) = self.run(x, true)?;
        let mut updates = updates.into_iter();
        for stage in self.block_a.iter_mut().chain(self.block_b.iter_mut()) {
            if let Some(update) = updates.next() {
                stage.bn.absorb(update)?;
            }
        }
        Ok((l, h))
    }

    /// Learnable parameters in a fixed order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (block, stages) in [("block_a", &self.block_a), ("block_b", &self.block_b)] {
            for (i, s) in stages.iter().enumerate() {
                out.push((format!("{block}.{i}.conv.weight"), s.conv.weight.clone()));
                out.push((format!("{block}.{i}.bn.gamma"), s.bn.gamma.clone()));
                out.push((format!("{block}.{i}.bn.beta"), s.bn.beta.clone()));
            }
        }
        for (name, head) in [
            ("block_c.local", &self.local_head),
            ("block_c.global", &self.global_head),
        ] {
            for (part, conv) in [
                ("first", &head.first),
                ("second", &head.second),
                ("project", &head.project),
            ] {
                out.push((format!("{name}.{part}.weight"), conv.weight.clone()));
                if let Some(b) = &conv.bias {
                    out.push((format!("{name}.{part}.bias"), b.clone()));
                }
            }
        }
        for (k, head) in self.class_heads.iter().enumerate() {
            out.push((format!("block_d.{k}.weight"), head.weight.clone()));
            out.push((format!("block_d.{k}.bias"), head.bias.clone()));
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Batch-norm running statistics in a fixed order.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (block, stages) in [("block_a", &self.block_a), ("block_b", &self.block_b)] {
            for (i, s) in stages.iter().enumerate() {
                out.push((format!("{block}.{i}.bn.running_mean"), s.bn.running_mean.clone()));
                out.push((format!("{block}.{i}.bn.running_var"), s.bn.running_var.clone()));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites parameters and buffers; names and shapes must match exactly.
    pub fn load_state(&mut self, params: &[(String, Tensor)], buffers: &[(String, Tensor)]) -> Result<()> {
        let vars = self.named_vars();
        if vars.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                vars.len(),
                params.len()
            )));
        }
        for ((name, var), (saved_name, value)) in vars.iter().zip(params) {
            if name != saved_name || var.dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {saved_name} {:?} does not fit {name} {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype())?)?;
        }
        let expected: Vec<String> = self.named_buffers().into_iter().map(|(n, _)| n).collect();
        let got: Vec<&String> = buffers.iter().map(|(n, _)| n).collect();
        if expected.iter().collect::<Vec<_>>() != got {
            return Err(Error::Checkpoint("batch-norm buffer names differ".into()));
        }
        let mut it = buffers.iter();
        let dtype = self.dtype();
        for stage in self.block_a.iter_mut().chain(self.block_b.iter_mut()) {
            let (_, mean) = it.next().expect("length checked");
            let (_, var) = it.next().expect("length checked");
            if mean.dims() != stage.bn.running_mean.dims() || var.dims() != stage.bn.running_var.dims() {
                return Err(Error::Checkpoint("batch-norm buffer shape differs".into()));
            }
            stage.bn.running_mean = mean.to_dtype(dtype)?;
            stage.bn.running_var = var.to_dtype(dtype)?;
        }
        Ok(())
    }
}

/// Standardizes a batch and moves it into a `(B, C, M, N)` tensor.
pub fn batch_tensor(batch: &ImageBatch, stats: &ChannelStats, precision: Precision) -> Result<Tensor> {
    pixels_tensor(&stats.standardize(&batch.pixels)?, precision)
}

pub(crate) fn pixels_tensor(pixels: &Array4<f32>, precision: Precision) -> Result<Tensor> {
    let dims = pixels.dim();
    let data: Vec<f32> = pixels.iter().copied().collect();
    Ok(Tensor::from_vec(data, (dims.0, dims.1, dims.2, dims.3), &Device::Cpu)?.to_dtype(precision.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            feature_dim: 8,
            num_classes: 2,
            block_a_widths: [4, 6, 8, 8],
            block_b_stages: 1,
            init_seed: seed,
            precision: Precision::F64,
        }
    }

    fn input(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, (b, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn receptive_field_recurrence() {
        let k3 = ConvGeometry { kernel: 3, stride: 1 };
        assert_eq!(receptive_field(&[k3]), 3);
        assert_eq!(receptive_field(&[k3, k3]), 5);
        // 1 + 2*1 + 2*1 + 2*2 + 2*4, 1x1 layers add nothing.
        assert_eq!(NetworkConfig::default().receptive_field(), 17);
    }

    #[test]
    fn default_shapes_match_full_size_model() {
        // Full-width trunk is slow on CPU; shapes do not depend on widths.
        let cfg = NetworkConfig {
            block_a_widths: [8, 8, 8, 8],
            precision: Precision::F32,
            ..NetworkConfig::default()
        };
        let net = Network::init(&cfg).unwrap();
        let (l, h) = net
            .forward(&input(1, 3, 128, 128, 0).to_dtype(DType::F32).unwrap())
            .unwrap();
        assert_eq!(l.dims(), (1, 1024, 32, 32));
        assert_eq!(h.dims(), (1, 3, 1024));

        let potsdam = NetworkConfig {
            in_channels: 4,
            feature_dim: 16,
            num_classes: 6,
            ..cfg
        };
        let net = Network::init(&potsdam).unwrap();
        let (l, h) = net
            .forward(&input(1, 4, 200, 200, 0).to_dtype(DType::F32).unwrap())
            .unwrap();
        assert_eq!(l.dims(), (1, 16, 50, 50));
        assert_eq!(h.dims(), (1, 6, 16));
    }

    #[test]
    fn bad_input_is_structural_error() {
        let net = Network::init(&tiny(0)).unwrap();
        for x in [input(1, 3, 18, 16, 0), input(1, 4, 16, 16, 0)] {
            assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
        }
    }

    #[test]
    fn init_is_seeded() {
        let x = input(2, 3, 16, 16, 1);
        let a = Network::init(&tiny(1)).unwrap();
        let b = Network::init(&tiny(1)).unwrap();
        let c = Network::init(&tiny(2)).unwrap();
        for ((_, va), (_, vb)) in a.named_vars().iter().zip(b.named_vars()) {
            let diff = (va.as_tensor() - vb.as_tensor())
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap();
            assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        }
        let la = a
            .forward(&x)
            .unwrap()
            .0
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let lc = c
            .forward(&x)
            .unwrap()
            .0
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn parameter_count_matches_layer_shapes() {
        for cfg in [
            tiny(0),
            NetworkConfig {
                num_classes: 1,
                ..tiny(0)
            },
            NetworkConfig::default(),
        ] {
            let net = Network::init(&cfg).unwrap();
            assert_eq!(net.parameter_count(), cfg.parameter_count());
        }
        // tiny: A = (108+8) + (216+12) + (432+16) + (576+16) = 1384, B = 576+16 = 592,
        // C = 2 * 3 * (64+8) = 432, D = 2 * (64+8) = 144
        assert_eq!(tiny(0).parameter_count(), 1384 + 592 + 432 + 144);
    }

    #[test]
    fn single_class_network_is_valid() {
        let net = Network::init(&NetworkConfig {
            num_classes: 1,
            ..tiny(0)
        })
        .unwrap();
        let (_, h) = net.forward(&input(1, 3, 16, 16, 0)).unwrap();
        assert_eq!(h.dims(), (1, 1, 8));
    }

    // Zeroing pixels outside the receptive field of L[i,j] cannot change it.
    #[test]
    fn local_features_depend_only_on_receptive_field() {
        let net = Network::init(&tiny(3)).unwrap();
        let x = input(1, 3, 32, 32, 4);
        let (l, _) = net.forward(&x).unwrap();
        let (i, j) = (3usize, 4usize);
        // Strides 1,2,2,1 with same padding: output i sees input rows [4i - 8, 4i + 8].
        let rf = tiny(3).receptive_field() as i64;
        let lo_r = 4 * i as i64 - 8;
        let lo_c = 4 * j as i64 - 8;
        let mut data = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..3 {
            for r in 0..32i64 {
                for col in 0..32i64 {
                    let inside = (lo_r..lo_r + rf).contains(&r) && (lo_c..lo_c + rf).contains(&col);
                    if !inside {
                        data[(c * 32 + r as usize) * 32 + col as usize] = 0.0;
                    }
                }
            }
        }
        let xm = Tensor::from_vec(data, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let (lm, _) = net.forward(&xm).unwrap();
        let a = l
            .tensor()
            .narrow(2, i, 1)
            .unwrap()
            .narrow(3, j, 1)
            .unwrap()
            .flatten_all()
            .unwrap();
        let b = lm
            .tensor()
            .narrow(2, i, 1)
            .unwrap()
            .narrow(3, j, 1)
            .unwrap()
            .flatten_all()
            .unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        // A neighbour whose field extends past the kept window must change.
        let c = l
            .tensor()
            .narrow(2, i + 2, 1)
            .unwrap()
            .narrow(3, j, 1)
            .unwrap()
            .flatten_all()
            .unwrap();
        let d = lm
            .tensor()
            .narrow(2, i + 2, 1)
            .unwrap()
            .narrow(3, j, 1)
            .unwrap()
            .flatten_all()
            .unwrap();
        assert_ne!(c.to_vec1::<f64>().unwrap(), d.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn every_pixel_reaches_every_global_feature() {
        let mut net = Network::init(&tiny(5)).unwrap();
        let x = Var::from_tensor(&input(2, 3, 16, 16, 6)).unwrap();
        let (_, h) = net.forward_train(x.as_tensor()).unwrap();
        for k in 0..2 {
            let probe = input(1, 1, 1, 8, 10 + k as u64).reshape(8).unwrap();
            let hk = h.tensor().narrow(1, k, 1).unwrap().squeeze(1).unwrap();
            let s = hk.broadcast_mul(&probe).unwrap().sum_all().unwrap();
            let grads = s.backward().unwrap();
            let gx = grads.get(x.as_tensor()).unwrap().abs().unwrap().sum(1).unwrap();
            let per_pixel = gx.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(per_pixel.iter().all(|&g| g > 0.0), "class {k} misses a pixel");
        }
    }

    #[test]
    fn train_mode_updates_running_stats_only() {
        let mut net = Network::init(&tiny(0)).unwrap();
        let before = net.named_buffers();
        net.forward_train(&input(2, 3, 16, 16, 0)).unwrap();
        let after = net.named_buffers();
        let moved = before.iter().zip(&after).any(|((_, a), (_, b))| {
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap() != b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        });
        assert!(moved);
        let mut other = Network::init(&tiny(9)).unwrap();
        let params: Vec<(String, Tensor)> = net
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().copy().unwrap()))
            .collect();
        other.load_state(&params, &after).unwrap();
        let x = input(1, 3, 16, 16, 2);
        let a = net
            .forward(&x)
            .unwrap()
            .0
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = other
            .forward(&x)
            .unwrap()
            .0
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(a, b);
    }
}
