use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layout::{blocks, tensor_layout, BlockNames, ParamMeta, TensorRole, FC_BIAS, FC_WEIGHT};
use crate::error::{Error, Result};
use crate::nn::{self, BnCache, BnStats, Conv2dCache, DownsampleCache, LinearCache, Mode, PoolCache, ReluCache};
use crate::tensor::Tensor;

/// A staged CNN: `stages x [conv3x3 -> BN -> ReLU] -> 2x2 avg` then global
/// average pool and a linear head.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    meta: IndexMap<String, ParamMeta>,
    bn: IndexMap<String, BnStats>,
    blocks: Vec<BlockNames>,
    revision: u64,
}

#[derive(Debug)]
struct BlockCache {
    conv: Conv2dCache,
    bn: BnCache,
    relu: ReluCache,
    down: Option<DownsampleCache>,
}

/// Intermediate state of one forward pass, consumed by [`Model::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    revision: u64,
    mode: Mode,
    batch: usize,
    blocks: Vec<BlockCache>,
    pool: PoolCache,
    fc: LinearCache,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Concatenated ReLU activity of every block, shallow to deep. Two
    /// forwards with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.relu.active_mask().iter().copied())
            .collect()
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}

fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (fan_out, fan_in) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}

impl Model {
    /// Deterministic initialization from `config.init_seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = IndexMap::new();
        let mut meta = IndexMap::new();
        let mut bn = IndexMap::new();
        for slot in tensor_layout(&config) {
            match slot.role {
                TensorRole::Param(m) => {
                    use super::layout::ParamKind::*;
                    let t = match m.kind {
                        ConvWeight => he_normal(&mut rng, &slot.shape),
                        FcWeight => xavier_uniform(&mut rng, &slot.shape),
                        BnGamma => Tensor::full(&slot.shape, 1.0),
                        ConvBias | BnBeta | FcBias => Tensor::zeros(&slot.shape),
                    };
                    params.insert(slot.name.clone(), t);
                    meta.insert(slot.name, m);
                }
                TensorRole::RunningMean => {
                    let layer = slot.name.trim_end_matches(".running_mean").to_string();
                    bn.insert(layer, config.new_bn_stats(slot.shape[0]));
                }
                TensorRole::RunningVar => {}
            }
        }
        Ok(Self {
            blocks: blocks(&config),
            config,
            params,
            meta,
            bn,
            revision: 0,
        })
    }

    /// Assembles a model from stored tensors, in layout order.
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Tensor>,
        bn: IndexMap<String, BnStats>,
    ) -> Result<Self> {
        let mut model = Self::build(config)?;
        if params.keys().ne(model.params.keys()) || bn.keys().ne(model.bn.keys()) {
            return Err(Error::Contract("tensor names do not match the model layout".into()));
        }
        for (name, t) in &params {
            if t.shape() != model.params[name].shape() {
                return Err(Error::Contract(format!("shape mismatch for `{name}`")));
            }
        }
        model.params = params;
        model.bn = bn;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learnable tensors in definition order.
    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param_meta(&self) -> &IndexMap<String, ParamMeta> {
        &self.meta
    }

    /// Running statistics keyed by BN layer name (e.g. `s2.b0.bn`).
    pub fn bn_stats(&self) -> &IndexMap<String, BnStats> {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut IndexMap<String, BnStats> {
        self.revision += 1;
        &mut self.bn
    }

    /// Mutable access to one parameter. Invalidates outstanding forward caches.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.revision += 1;
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// BN layer name owning a gamma/beta parameter.
    pub fn bn_layer_of(param: &str) -> Option<&str> {
        param
            .strip_suffix(".gamma")
            .or_else(|| param.strip_suffix(".beta"))
            .filter(|l| l.ends_with(".bn"))
    }

    /// Replaces the classifier head with a freshly initialized one for
    /// `num_classes` outputs.
    pub fn reinit_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.config.stage_channels(self.config.stages);
        self.params[FC_WEIGHT] = xavier_uniform(&mut rng, &[num_classes, last]);
        self.params[FC_BIAS] = Tensor::zeros(&[num_classes]);
        self.config.num_classes = num_classes;
        self.revision += 1;
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<usize> {
        const OP: &str = "model.forward";
        let [n, c, h, w] = batch.dims4(OP)?;
        if c != self.config.in_channels {
            return Err(Error::dim(OP, "channels", self.config.in_channels, c));
        }
        if h != self.config.input_size {
            return Err(Error::dim(OP, "height", self.config.input_size, h));
        }
        if w != self.config.input_size {
            return Err(Error::dim(OP, "width", self.config.input_size, w));
        }
        Ok(n)
    }

    /// Train mode with every BN layer normalizing by batch statistics and
    /// updating its running statistics; Eval mode uses running statistics only.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        self.forward_with(batch, mode, &|_| true)
    }

    /// Like [`Model::forward`], but in Train mode BN layers for which
    /// `bn_update_running(layer)` is false are held fixed: they normalize by
    /// their running statistics, which stay untouched.
    pub fn forward_with(
        &mut self,
        batch: &Tensor,
        mode: Mode,
        bn_update_running: &dyn Fn(&str) -> bool,
    ) -> Result<(Tensor, ForwardCache)> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(batch, mode, bn_update_running, &mut bn);
        self.bn = bn;
        out
    }

    fn run(
        &self,
        batch: &Tensor,
        mode: Mode,
        bn_update_running: &dyn Fn(&str) -> bool,
        bn_stats: &mut IndexMap<String, BnStats>,
    ) -> Result<(Tensor, ForwardCache)> {
        let n = self.check_input(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, conv) = nn::conv2d_forward(
                &x,
                &self.params[&blk.conv_weight],
                Some(&self.params[&blk.conv_bias]),
                1,
                1,
            )?;
            let layer_mode = match mode {
                Mode::Train if bn_update_running(&blk.bn_layer) => Mode::Train,
                _ => Mode::Eval,
            };
            let stats = bn_stats.get_mut(&blk.bn_layer).expect("layout");
            let (y, bn) = nn::batchnorm_forward(
                &y,
                &self.params[&blk.bn_gamma],
                &self.params[&blk.bn_beta],
                stats,
                layer_mode,
                layer_mode == Mode::Train,
            )?;
            let (y, relu) = nn::relu_forward(&y);
            let (y, down) = if blk.last_in_stage {
                let (y, d) = nn::avg_downsample_forward(&y)?;
                (y, Some(d))
            } else {
                (y, None)
            };
            caches.push(BlockCache { conv, bn, relu, down });
            x = y;
        }
        let (pooled, pool) = nn::global_avg_pool_forward(&x)?;
        let (logits, fc) = nn::linear_forward(&pooled, &self.params[FC_WEIGHT], &self.params[FC_BIAS])?;
        if !logits.all_finite() {
            return Err(Error::Numeric {
                context: "model.forward".into(),
                reason: "non-finite logits".into(),
            });
        }
        let cache = ForwardCache {
            revision: self.revision,
            mode,
            batch: n,
            blocks: caches,
            pool,
            fc,
        };
        Ok((logits, cache))
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut stats = self.bn.clone();
        Ok(self.run(batch, Mode::Eval, &|_| false, &mut stats)?.0)
    }

    /// Gradients of the loss with respect to every parameter, keyed and
    /// ordered like [`Model::params`].
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<IndexMap<String, Tensor>> {
        if cache.revision != self.revision {
            return Err(Error::Contract("forward cache is stale: parameters changed since forward".into()));
        }
        if cache.mode != Mode::Train {
            return Err(Error::Contract("backward requires a train-mode forward cache".into()));
        }
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::Contract("forward cache does not match model".into()));
        }
        let dims = grad_logits.dims2("model.backward")?;
        if dims != [cache.batch, self.config.num_classes] {
            return Err(Error::dim(
                "model.backward",
                "grad_logits",
                format!("{:?}", [cache.batch, self.config.num_classes]),
                format!("{dims:?}"),
            ));
        }

        let mut grads: IndexMap<String, Tensor> = IndexMap::new();
        let fc = nn::linear_backward(&cache.fc, grad_logits)?;
        let mut g = nn::global_avg_pool_backward(&cache.pool, &fc.input)?;
        let mut rev = Vec::with_capacity(4 * self.blocks.len());
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            if let Some(d) = &bc.down {
                g = nn::avg_downsample_backward(d, &g)?;
            }
            g = nn::relu_backward(&bc.relu, &g)?;
            let bg = match bc.bn.mode() {
                Mode::Train => nn::batchnorm_backward(&bc.bn, &g)?,
                Mode::Eval => nn::batchnorm_eval_backward(&bc.bn, &g)?,
            };
            let cg = nn::conv2d_backward(&bc.conv, &bg.input)?;
            rev.push((blk.bn_beta.clone(), bg.beta));
            rev.push((blk.bn_gamma.clone(), bg.gamma));
            rev.push((blk.conv_bias.clone(), cg.bias.expect("conv has bias")));
            rev.push((blk.conv_weight.clone(), cg.kernel));
            g = cg.input;
        }
        for name in self.params.keys() {
            let t = match name.as_str() {
                FC_WEIGHT => fc.weight.clone(),
                FC_BIAS => fc.bias.clone(),
                _ => {
                    let pos = rev.iter().position(|(n, _)| n == name).expect("every block param has a gradient");
                    rev.swap_remove(pos).1
                }
            };
            grads.insert(name.clone(), t);
        }
        Ok(grads)
    }
}
