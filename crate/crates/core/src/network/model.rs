use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{BnParams, Eval, Ops};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::NetworkConfig;
use crate::error::{Error, Result};

/// conv -> batch norm -> ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: ParamId,
    bn: BnParams,
    dilation: usize,
}

impl ConvUnit {
    fn forward<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::H) -> O::H {
        let c = ops.conv3d(x, self.weight, None, self.dilation);
        let n = ops.batch_norm(&c, self.bn);
        ops.relu(&n)
    }
}

/// Per-voxel gate from a 3x3x3 convolution over channel mean and max maps.
#[derive(Debug, Clone)]
pub struct SpatialGate {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SpatialGate {
    pub fn forward<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::H) -> O::H {
        let pooled = ops.channel_mean_max(x);
        let logits = ops.conv3d(&pooled, self.weight, Some(self.bias), 1);
        let gate = ops.sigmoid(&logits);
        ops.spatial_gate(x, &gate)
    }
}

/// Squeeze-and-excitation style per-channel gate with reduction ratio 2.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ChannelGate {
    pub fn forward<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::H) -> O::H {
        let squeezed = ops.global_avg_pool(x);
        let hidden = ops.linear(&squeezed, self.w1, self.b1);
        let hidden = ops.relu(&hidden);
        let logits = ops.linear(&hidden, self.w2, self.b2);
        let gate = ops.sigmoid(&logits);
        ops.channel_gate(x, &gate)
    }
}

#[derive(Debug, Clone)]
struct SubBlock {
    bottleneck: ConvUnit,
    conv: ConvUnit,
}

/// Dense block followed by the optional gates.
#[derive(Debug, Clone)]
struct AttentionBlock {
    subs: Vec<SubBlock>,
    compress: ConvUnit,
    spa: Option<SpatialGate>,
    cha1: Option<ChannelGate>,
}

impl AttentionBlock {
    fn forward<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::H) -> O::H {
        let mut outs: Vec<O::H> = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            let b = if outs.is_empty() {
                sub.bottleneck.forward(ops, x)
            } else {
                let mut all: Vec<&O::H> = vec![x];
                all.extend(outs.iter());
                let cat = ops.concat(&all);
                sub.bottleneck.forward(ops, &cat)
            };
            outs.push(sub.conv.forward(ops, &b));
        }
        let mut all: Vec<&O::H> = vec![x];
        all.extend(outs.iter());
        let cat = ops.concat(&all);
        drop(outs);
        let mut y = self.compress.forward(ops, &cat);
        if let Some(spa) = &self.spa {
            y = spa.forward(ops, &y);
        }
        if let Some(cha) = &self.cha1 {
            y = cha.forward(ops, &y);
        }
        y
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    block: AttentionBlock,
    transition: ConvUnit,
}

#[derive(Debug, Clone)]
struct UpLevel {
    skip_gate: Option<ChannelGate>,
    block: AttentionBlock,
    conv: ConvUnit,
}

#[derive(Debug, Clone)]
struct Topology {
    stem: [ConvUnit; 2],
    down: Vec<DownLevel>,
    bottom: UpLevel,
    /// Ordered from the deepest up-level to the full-resolution one.
    up: Vec<UpLevel>,
    head_weight: ParamId,
    head_bias: ParamId,
}

struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    cfg: &'a NetworkConfig,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn conv_unit(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize) -> ConvUnit {
        let weight = self.store.add_he(
            format!("{name}.weight"),
            &[cout, cin, k, k, k],
            cin * k * k * k,
            self.rng,
        );
        let bn = BnParams {
            gamma: self.store.add_const(format!("{name}.bn.gamma"), &[cout], 1.0, false),
            beta: self.store.add_const(format!("{name}.bn.beta"), &[cout], 0.0, false),
            running_mean: self
                .store
                .add_const(format!("{name}.bn.running_mean"), &[cout], 0.0, true),
            running_var: self
                .store
                .add_const(format!("{name}.bn.running_var"), &[cout], 1.0, true),
        };
        ConvUnit { weight, bn, dilation }
    }

    fn spatial_gate(&mut self, name: &str) -> SpatialGate {
        SpatialGate {
            weight: self
                .store
                .add_he(format!("{name}.weight"), &[1, 2, 3, 3, 3], 54, self.rng),
            bias: self.store.add_const(format!("{name}.bias"), &[1], 0.0, false),
        }
    }

    fn channel_gate(&mut self, name: &str, c: usize) -> ChannelGate {
        let hidden = (c / 2).max(1);
        ChannelGate {
            w1: self
                .store
                .add_he(format!("{name}.fc1.weight"), &[hidden, c], c, self.rng),
            b1: self.store.add_const(format!("{name}.fc1.bias"), &[hidden], 0.0, false),
            w2: self
                .store
                .add_he(format!("{name}.fc2.weight"), &[c, hidden], hidden, self.rng),
            b2: self.store.add_const(format!("{name}.fc2.bias"), &[c], 0.0, false),
        }
    }

    /// Returns the block and its output channel count.
    fn attention_block(&mut self, name: &str, cin: usize) -> (AttentionBlock, usize) {
        let cfg = self.cfg;
        let mut subs = Vec::with_capacity(cfg.sub_ddbs);
        for i in 0..cfg.sub_ddbs {
            let c = cin + i * cfg.growth;
            subs.push(SubBlock {
                bottleneck: self.conv_unit(&format!("{name}.ddb.sub{i}.bottleneck"), c, cfg.bottleneck, 1, 1),
                conv: self.conv_unit(
                    &format!("{name}.ddb.sub{i}.conv"),
                    cfg.bottleneck,
                    cfg.growth,
                    3,
                    cfg.dilation_ddb,
                ),
            });
        }
        let total = cin + cfg.sub_ddbs * cfg.growth;
        let cout = (cfg.theta * total as f64).ceil() as usize;
        let compress = self.conv_unit(&format!("{name}.ddb.compress"), total, cout, 1, 1);
        let spa = cfg.use_spa.then(|| self.spatial_gate(&format!("{name}.spa")));
        let cha1 = cfg.use_cha1.then(|| self.channel_gate(&format!("{name}.cha1"), cout));
        (
            AttentionBlock {
                subs,
                compress,
                spa,
                cha1,
            },
            cout,
        )
    }

    fn topology(&mut self) -> Topology {
        let cfg = self.cfg;
        let s = cfg.stem_channels;
        let stem = [
            self.conv_unit("stem.0", 1, s, 3, 1),
            self.conv_unit("stem.1", s, s, 3, 1),
        ];
        let mut cin = s;
        let mut down = Vec::new();
        let mut skip_channels = Vec::new();
        for l in 1..cfg.levels {
            let (block, c) = self.attention_block(&format!("down{l}"), cin);
            let width = s << (l - 1);
            let transition = self.conv_unit(&format!("down{l}.transition"), c, width, 1, 1);
            down.push(DownLevel { block, transition });
            skip_channels.push(width);
            cin = width;
        }
        let (block, c) = self.attention_block("bottom", cin);
        let conv = self.conv_unit("bottom.conv", c, s, 3, 1);
        let bottom = UpLevel {
            skip_gate: None,
            block,
            conv,
        };
        let mut up = Vec::new();
        for l in (1..cfg.levels).rev() {
            let skip = skip_channels[l - 1];
            let skip_gate = cfg.use_cha2.then(|| self.channel_gate(&format!("up{l}.cha2"), skip));
            let (block, c) = self.attention_block(&format!("up{l}"), s + skip);
            let conv = self.conv_unit(&format!("up{l}.conv"), c, s, 3, 1);
            up.push(UpLevel { skip_gate, block, conv });
        }
        let head_weight = self.store.add_he("head.weight", &[2, s, 1, 1, 1], s, self.rng);
        let head_bias = self.store.add_const("head.bias", &[2], 0.0, false);
        Topology {
            stem,
            down,
            bottom,
            up,
            head_weight,
            head_bias,
        }
    }
}

/// A built network: configuration, parameters and topology.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    topo: Topology,
}

impl<T: Real> Network<T> {
    /// Build and initialise a network. Initialisation is a pure function of
    /// `(config, seed)`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let topo = Builder {
            store: &mut params,
            rng: &mut rng,
            cfg: config,
        }
        .topology();
        Ok(Network {
            config: config.clone(),
            params,
            topo,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Same network with parameters converted to another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            topo: self.topo.clone(),
        }
    }

    /// Spatial gates in network order (empty when SpA is disabled).
    pub fn spatial_gates(&self) -> Vec<&SpatialGate> {
        self.blocks().filter_map(|b| b.spa.as_ref()).collect()
    }

    /// ChA1 gates inside the dense blocks followed by the ChA2 skip gates.
    pub fn channel_gates(&self) -> Vec<&ChannelGate> {
        let inner = self.blocks().filter_map(|b| b.cha1.as_ref());
        let skips = self.topo.up.iter().filter_map(|u| u.skip_gate.as_ref());
        inner.chain(skips).collect()
    }

    fn blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.topo
            .down
            .iter()
            .map(|d| &d.block)
            .chain(std::iter::once(&self.topo.bottom.block))
            .chain(self.topo.up.iter().map(|u| &u.block))
    }

    /// Check that an input tensor is `[n, 1, d, h, w]` with admissible dims.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != 1 || shape[0] == 0 {
            return Err(Error::Shape(format!("expected [n, 1, d, h, w], got {shape:?}")));
        }
        let m = self.config.size_multiple();
        if shape[2..].iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be positive multiples of {m}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// The network graph on an arbitrary backend. Output is the two-channel
    /// softmax; channel 1 is the tumor probability.
    pub fn forward<O: Ops<T>>(&self, ops: &mut O, x: &O::H) -> O::H {
        let t = &self.topo;
        let s0 = t.stem[0].forward(ops, x);
        let mut cur = t.stem[1].forward(ops, &s0);
        drop(s0);
        let mut skips = Vec::with_capacity(t.down.len());
        for level in &t.down {
            let b = level.block.forward(ops, &cur);
            let skip = level.transition.forward(ops, &b);
            drop(b);
            cur = ops.max_pool2(&skip);
            skips.push(skip);
        }
        let b = t.bottom.block.forward(ops, &cur);
        cur = t.bottom.conv.forward(ops, &b);
        drop(b);
        for level in &t.up {
            let skip = skips.pop().expect("one skip per up level");
            let upsampled = ops.upsample2(&cur);
            let skip = match &level.skip_gate {
                Some(g) => g.forward(ops, &skip),
                None => skip,
            };
            let cat = ops.concat(&[&upsampled, &skip]);
            drop((upsampled, skip));
            let b = level.block.forward(ops, &cat);
            drop(cat);
            cur = level.conv.forward(ops, &b);
        }
        let logits = ops.conv3d(&cur, t.head_weight, Some(t.head_bias), 1);
        ops.softmax(&logits)
    }

    /// Inference-mode forward pass: `[n, 1, d, h, w] -> [n, 2, d, h, w]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input.shape())?;
        let mut eval = Eval::new(&self.params);
        Ok(self.forward(&mut eval, input))
    }

    /// Exponential moving update of batch-norm running statistics.
    pub fn update_running_stats(&mut self, observations: &[super::ops::BnObservation], momentum: f64) {
        for obs in observations {
            for (id, values) in [(obs.running_mean, &obs.mean), (obs.running_var, &obs.var)] {
                for (r, &v) in self.params.get_mut(id).data.iter_mut().zip(values.iter()) {
                    *r = T::of((1.0 - momentum) * r.as_f64() + momentum * v);
                }
            }
        }
    }
}
