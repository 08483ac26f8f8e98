use super::NetworkConfig;

/// One step along a feed-forward path, for receptive-field bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// Stride-1 cubic convolution with kernel `k` and dilation `d`.
    Conv { k: usize, d: usize },
    /// 2x2x2 max-pool with stride 2.
    Pool,
    /// Linear x2 upsampling.
    Upsample,
}

/// Receptive field (voxels per axis) of a path of layers.
///
/// Walks `(rf, jump)`: a convolution grows the field by `d·(k−1)·jump`, a
/// stride-2 pool by `jump` before doubling it, and linear upsampling by one
/// coarse step before halving it.
pub fn path_receptive_field(layers: &[Layer]) -> usize {
    let mut rf = 1.0f64;
    let mut jump = 1.0f64;
    for layer in layers {
        match *layer {
            Layer::Conv { k, d } => rf += (d * (k - 1)) as f64 * jump,
            Layer::Pool => {
                rf += jump;
                jump *= 2.0;
            }
            Layer::Upsample => {
                rf += jump;
                jump /= 2.0;
            }
        }
    }
    rf.round() as usize
}

/// Longest input-to-output path of the network. Channel gates are global
/// pools and are left out; with them every output depends on every input.
pub fn network_path(cfg: &NetworkConfig) -> Vec<Layer> {
    let conv3 = Layer::Conv { k: 3, d: 1 };
    let block = |path: &mut Vec<Layer>| {
        for _ in 0..cfg.sub_ddbs {
            path.push(Layer::Conv { k: 1, d: 1 });
            path.push(Layer::Conv {
                k: 3,
                d: cfg.dilation_ddb,
            });
        }
        path.push(Layer::Conv { k: 1, d: 1 });
        if cfg.use_spa {
            path.push(conv3);
        }
    };
    let mut path = vec![conv3, conv3];
    for _ in 1..cfg.levels {
        block(&mut path);
        path.push(Layer::Conv { k: 1, d: 1 });
        path.push(Layer::Pool);
    }
    block(&mut path);
    path.push(conv3);
    for _ in 1..cfg.levels {
        path.push(Layer::Upsample);
        block(&mut path);
        path.push(conv3);
    }
    path.push(Layer::Conv { k: 1, d: 1 });
    path
}

/// Analytic receptive field `(rx, ry, rz)` in voxels. All kernels are
/// cubic, so the three extents are equal.
pub fn receptive_field(cfg: &NetworkConfig) -> (usize, usize, usize) {
    let r = path_receptive_field(&network_path(cfg));
    (r, r, r)
}
