//! The operation set the network is written against, with two backends:
//! [`Eval`] (owned tensors, no history, running BN statistics) and [`Tape`]
//! (records every op for reverse-mode differentiation, batch BN statistics).

use super::kernels::{self, ConvShape, BN_EPS};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Mat, Real, Tensor};

/// Operations over `[n, c, d, h, w]` feature maps (or `[n, c]` vectors).
pub trait Ops<T: Real> {
    type H;

    fn params(&self) -> &ParamStore<T>;
    fn value<'a>(&'a self, h: &'a Self::H) -> &'a Tensor<T>;

    /// "Same"-padded cubic convolution; kernel size is read from the weight.
    fn conv3d(&mut self, x: &Self::H, weight: ParamId, bias: Option<ParamId>, dilation: usize) -> Self::H;
    fn batch_norm(&mut self, x: &Self::H, bn: BnParams) -> Self::H;
    fn relu(&mut self, x: &Self::H) -> Self::H;
    fn sigmoid(&mut self, x: &Self::H) -> Self::H;
    fn max_pool2(&mut self, x: &Self::H) -> Self::H;
    fn upsample2(&mut self, x: &Self::H) -> Self::H;
    fn concat(&mut self, xs: &[&Self::H]) -> Self::H;
    /// `[n, c, S] -> [n, 2, S]`: channel mean and channel max.
    fn channel_mean_max(&mut self, x: &Self::H) -> Self::H;
    /// Multiply `[n, c, S]` by a `[n, 1, S]` gate.
    fn spatial_gate(&mut self, x: &Self::H, gate: &Self::H) -> Self::H;
    /// `[n, c, S] -> [n, c]`.
    fn global_avg_pool(&mut self, x: &Self::H) -> Self::H;
    /// `[n, cin] -> [n, cout]`.
    fn linear(&mut self, x: &Self::H, weight: ParamId, bias: ParamId) -> Self::H;
    /// Multiply `[n, c, S]` by a `[n, c]` gate.
    fn channel_gate(&mut self, x: &Self::H, gate: &Self::H) -> Self::H;
    /// Softmax over the channel axis.
    fn softmax(&mut self, x: &Self::H) -> Self::H;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

fn conv_shape<T: Real>(params: &ParamStore<T>, x: &Tensor<T>, weight: ParamId, dilation: usize) -> ConvShape {
    let ws = &params.get(weight).shape;
    assert_eq!(ws.len(), 5, "conv weight must be [cout, cin, k, k, k]");
    assert_eq!(
        ws[1],
        x.channels(),
        "conv {}: channel mismatch",
        params.get(weight).name
    );
    ConvShape {
        cin: ws[1],
        cout: ws[0],
        k: ws[2],
        dil: dilation,
        dhw: x.dhw(),
    }
}

fn conv_fwd<T: Real>(
    params: &ParamStore<T>,
    x: &Tensor<T>,
    w: ParamId,
    b: Option<ParamId>,
    dil: usize,
) -> (Tensor<T>, ConvShape) {
    let s = conv_shape(params, x, w, dil);
    let out = kernels::conv3d_forward(x.data(), x.batch(), &s, params.data(w), b.map(|b| params.data(b)));
    let [d, h, wd] = s.dhw;
    (Tensor::from_vec(&[x.batch(), s.cout, d, h, wd], out), s)
}

fn relu_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data)
}

fn sigmoid_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
    Tensor::from_vec(x.shape(), data)
}

fn pool_fwd<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [d, h, w] = x.dhw();
    assert!(
        d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
        "max_pool2 needs even dims, got {:?}",
        x.shape()
    );
    let (out, arg) = kernels::max_pool2(x.data(), x.batch() * x.channels(), [d, h, w]);
    (
        Tensor::from_vec(&[x.batch(), x.channels(), d / 2, h / 2, w / 2], out),
        arg,
    )
}

fn upsample_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = x.dhw();
    let out = kernels::upsample2(x.data(), x.batch() * x.channels(), [d, h, w]);
    Tensor::from_vec(&[x.batch(), x.channels(), 2 * d, 2 * h, 2 * w], out)
}

fn concat_fwd<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!xs.is_empty());
    let n = xs[0].batch();
    let sp = xs[0].spatial();
    for x in xs {
        assert_eq!(x.batch(), n);
        assert_eq!(&x.shape()[2..], &xs[0].shape()[2..], "concat: spatial mismatch");
    }
    let c: usize = xs.iter().map(|x| x.channels()).sum();
    let mut data = Vec::with_capacity(n * c * sp);
    for b in 0..n {
        for x in xs {
            let cs = x.channels() * sp;
            data.extend_from_slice(&x.data()[b * cs..(b + 1) * cs]);
        }
    }
    let mut shape = xs[0].shape().to_vec();
    shape[1] = c;
    Tensor::from_vec(&shape, data)
}

fn mean_max_fwd<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, sp) = (x.batch(), x.channels(), x.spatial());
    let inv_c = T::of(1.0 / c as f64);
    let mut out = vec![T::zero(); n * 2 * sp];
    let mut arg = vec![0u32; n * sp];
    for b in 0..n {
        let xb = &x.data()[b * c * sp..(b + 1) * c * sp];
        let (mean, max) = out[b * 2 * sp..(b + 1) * 2 * sp].split_at_mut(sp);
        max.copy_from_slice(&xb[..sp]);
        mean.copy_from_slice(&xb[..sp]);
        let ab = &mut arg[b * sp..(b + 1) * sp];
        for ch in 1..c {
            let xc = &xb[ch * sp..(ch + 1) * sp];
            for i in 0..sp {
                mean[i] += xc[i];
                if xc[i] > max[i] {
                    max[i] = xc[i];
                    ab[i] = ch as u32;
                }
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_c;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = 2;
    (Tensor::from_vec(&shape, out), arg)
}

fn spatial_gate_fwd<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = (x.batch(), x.channels(), x.spatial());
    assert_eq!(g.shape()[1], 1);
    assert_eq!(g.numel(), n * sp);
    let mut out = x.clone();
    for b in 0..n {
        let gb = &g.data()[b * sp..(b + 1) * sp];
        for ch in 0..c {
            let start = (b * c + ch) * sp;
            for (o, &gv) in out.data_mut()[start..start + sp].iter_mut().zip(gb) {
                *o *= gv;
            }
        }
    }
    out
}

fn gap_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = (x.batch(), x.channels(), x.spatial());
    let inv = 1.0 / sp as f64;
    let data = (0..n * c)
        .map(|i| T::of(x.data()[i * sp..(i + 1) * sp].iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::from_vec(&[n, c], data)
}

fn linear_fwd<T: Real>(params: &ParamStore<T>, x: &Tensor<T>, w: ParamId, b: ParamId) -> Tensor<T> {
    let ws = &params.get(w).shape;
    let (cout, cin) = (ws[0], ws[1]);
    assert_eq!(x.shape(), &[x.batch(), cin]);
    let n = x.batch();
    let mut out = vec![T::zero(); n * cout];
    for row in out.chunks_mut(cout) {
        row.copy_from_slice(params.data(b));
    }
    gemm(
        n,
        cout,
        cin,
        T::one(),
        Mat::new(x.data(), cin),
        Mat::t(params.data(w), cin),
        T::one(),
        &mut out,
        cout,
    );
    Tensor::from_vec(&[n, cout], out)
}

fn channel_gate_fwd<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = (x.batch(), x.channels(), x.spatial());
    assert_eq!(g.shape(), &[n, c]);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(sp).enumerate() {
        let gv = g.data()[i];
        for v in chunk {
            *v *= gv;
        }
    }
    out
}

fn softmax_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = (x.batch(), x.channels(), x.spatial());
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        let xb = &x.data()[b * c * sp..(b + 1) * c * sp];
        let ob = &mut out[b * c * sp..(b + 1) * c * sp];
        for i in 0..sp {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xb[ch * sp + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xb[ch * sp + i] - m).exp();
                ob[ch * sp + i] = e;
                z += e;
            }
            for ch in 0..c {
                ob[ch * sp + i] = ob[ch * sp + i] / z;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Inference backend: values only, batch norm uses running statistics.
pub struct Eval<'p, T> {
    params: &'p ParamStore<T>,
}

impl<'p, T: Real> Eval<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Eval { params }
    }
}

impl<T: Real> Ops<T> for Eval<'_, T> {
    type H = Tensor<T>;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn value<'a>(&'a self, h: &'a Tensor<T>) -> &'a Tensor<T> {
        h
    }

    fn conv3d(&mut self, x: &Tensor<T>, weight: ParamId, bias: Option<ParamId>, dilation: usize) -> Tensor<T> {
        conv_fwd(self.params, x, weight, bias, dilation).0
    }

    fn batch_norm(&mut self, x: &Tensor<T>, bn: BnParams) -> Tensor<T> {
        let p = self.params;
        let mean: Vec<f64> = p.data(bn.running_mean).iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = p
            .data(bn.running_var)
            .iter()
            .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
            .collect();
        let y = kernels::affine_channels(
            x.data(),
            x.batch(),
            x.channels(),
            x.spatial(),
            &mean,
            &inv_std,
            p.data(bn.gamma),
            p.data(bn.beta),
        );
        Tensor::from_vec(x.shape(), y)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        relu_fwd(x)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        sigmoid_fwd(x)
    }

    fn max_pool2(&mut self, x: &Tensor<T>) -> Tensor<T> {
        pool_fwd(x).0
    }

    fn upsample2(&mut self, x: &Tensor<T>) -> Tensor<T> {
        upsample_fwd(x)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Tensor<T> {
        concat_fwd(xs)
    }

    fn channel_mean_max(&mut self, x: &Tensor<T>) -> Tensor<T> {
        mean_max_fwd(x).0
    }

    fn spatial_gate(&mut self, x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
        spatial_gate_fwd(x, gate)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Tensor<T> {
        gap_fwd(x)
    }

    fn linear(&mut self, x: &Tensor<T>, weight: ParamId, bias: ParamId) -> Tensor<T> {
        linear_fwd(self.params, x, weight, bias)
    }

    fn channel_gate(&mut self, x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
        channel_gate_fwd(x, gate)
    }

    fn softmax(&mut self, x: &Tensor<T>) -> Tensor<T> {
        softmax_fwd(x)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Rec {
    Input,
    Conv {
        x: usize,
        w: ParamId,
        b: Option<ParamId>,
        shape: ConvShape,
    },
    BatchNorm {
        x: usize,
        bn: BnParams,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    MaxPool {
        x: usize,
        arg: Vec<u32>,
    },
    Upsample {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    ChannelMeanMax {
        x: usize,
        arg: Vec<u32>,
    },
    SpatialGate {
        x: usize,
        g: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: ParamId,
        b: ParamId,
    },
    ChannelGate {
        x: usize,
        g: usize,
    },
    Softmax {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    rec: Rec,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

/// Training backend: records the computation for [`Tape::backward`].
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    observations: Vec<BnObservation>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Rec::Input)
    }

    fn push(&mut self, value: Tensor<T>, rec: Rec) -> Var {
        self.nodes.push(Node { value, rec });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: &Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.observations
    }

    /// Reverse-mode pass from `root`, seeded with `seed = dL/droot`.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        self.backward_with_inputs(root, seed, &[]).0
    }

    /// Like [`Tape::backward`], also returning `dL/dinput` for each of `inputs`.
    pub fn backward_with_inputs(&self, root: Var, seed: Tensor<T>, inputs: &[Var]) -> (Gradients<T>, Vec<Tensor<T>>) {
        let mut input_grads: Vec<Tensor<T>> = inputs.iter().map(|v| Tensor::zeros(self.val(v).shape())).collect();
        assert_eq!(seed.shape(), self.nodes[root.0].value.shape());
        let params = self.params;
        let mut grads = Gradients::new(params.len());
        let mut node_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        node_grads.resize_with(root.0 + 1, || None);
        node_grads[root.0] = Some(seed);

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.rec {
                Rec::Input => {
                    if let Some(k) = inputs.iter().position(|v| v.0 == i) {
                        input_grads[k] = dy;
                    }
                }
                Rec::Conv { x, w, b, shape } => {
                    let xv = &self.nodes[*x].value;
                    let wlen = params.get(*w).numel();
                    let dx = kernels::conv3d_backward(
                        xv.data(),
                        xv.batch(),
                        shape,
                        params.data(*w),
                        dy.data(),
                        grads.slot(*w, wlen),
                        None,
                    );
                    if let Some(b) = b {
                        let db = grads.slot(*b, shape.cout);
                        kernels::bias_grad(dy.data(), xv.batch(), shape.cout, dy.spatial(), db);
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::BatchNorm { x, bn, mean, inv_std } => {
                    let xv = &self.nodes[*x].value;
                    let c = xv.channels();
                    let mut dgamma = grads.slot(bn.gamma, c).to_vec();
                    let mut dbeta = grads.slot(bn.beta, c).to_vec();
                    let dx = kernels::batch_norm_backward(
                        xv.data(),
                        dy.data(),
                        xv.batch(),
                        c,
                        xv.spatial(),
                        mean,
                        inv_std,
                        params.data(bn.gamma),
                        &mut dgamma,
                        &mut dbeta,
                    );
                    grads.slot(bn.gamma, c).copy_from_slice(&dgamma);
                    grads.slot(bn.beta, c).copy_from_slice(&dbeta);
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::Relu { x } => {
                    let y = &node.value;
                    let dx = dy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut node_grads[*x], Tensor::from_vec(y.shape(), dx));
                }
                Rec::Sigmoid { x } => {
                    let y = &node.value;
                    let dx = dy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &v)| g * v * (T::one() - v))
                        .collect();
                    accumulate(&mut node_grads[*x], Tensor::from_vec(y.shape(), dx));
                }
                Rec::MaxPool { x, arg } => {
                    let xv = &self.nodes[*x].value;
                    let dx = kernels::max_pool2_backward(dy.data(), arg, xv.numel());
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::Upsample { x } => {
                    let xv = &self.nodes[*x].value;
                    let dx = kernels::upsample2_backward(dy.data(), xv.batch() * xv.channels(), xv.dhw());
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::Concat { xs } => {
                    let n = dy.batch();
                    let sp = dy.spatial();
                    let ctot = dy.channels();
                    let mut offset = 0;
                    for &xi in xs {
                        let xv = &self.nodes[xi].value;
                        let c = xv.channels();
                        let mut part = Vec::with_capacity(n * c * sp);
                        for b in 0..n {
                            let start = (b * ctot + offset) * sp;
                            part.extend_from_slice(&dy.data()[start..start + c * sp]);
                        }
                        offset += c;
                        accumulate(&mut node_grads[xi], Tensor::from_vec(xv.shape(), part));
                    }
                }
                Rec::ChannelMeanMax { x, arg } => {
                    let xv = &self.nodes[*x].value;
                    let (n, c, sp) = (xv.batch(), xv.channels(), xv.spatial());
                    let inv_c = T::of(1.0 / c as f64);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for b in 0..n {
                        let dmean = &dy.data()[b * 2 * sp..b * 2 * sp + sp];
                        let dmax = &dy.data()[b * 2 * sp + sp..(b + 1) * 2 * sp];
                        let dxb = &mut dx[b * c * sp..(b + 1) * c * sp];
                        for ch in 0..c {
                            for (o, &g) in dxb[ch * sp..(ch + 1) * sp].iter_mut().zip(dmean) {
                                *o = g * inv_c;
                            }
                        }
                        for i in 0..sp {
                            dxb[arg[b * sp + i] as usize * sp + i] += dmax[i];
                        }
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::SpatialGate { x, g } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*g].value;
                    let (n, c, sp) = (xv.batch(), xv.channels(), xv.spatial());
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dg = vec![T::zero(); gv.numel()];
                    for b in 0..n {
                        let gb = &gv.data()[b * sp..(b + 1) * sp];
                        let dgb = &mut dg[b * sp..(b + 1) * sp];
                        for ch in 0..c {
                            let start = (b * c + ch) * sp;
                            for i in 0..sp {
                                let gy = dy.data()[start + i];
                                dx[start + i] = gy * gb[i];
                                dgb[i] += gy * xv.data()[start + i];
                            }
                        }
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                    accumulate(&mut node_grads[*g], Tensor::from_vec(gv.shape(), dg));
                }
                Rec::GlobalAvgPool { x } => {
                    let xv = &self.nodes[*x].value;
                    let sp = xv.spatial();
                    let inv = T::of(1.0 / sp as f64);
                    let mut dx = Vec::with_capacity(xv.numel());
                    for &g in dy.data() {
                        dx.extend(std::iter::repeat_n(g * inv, sp));
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let ws = &params.get(*w).shape;
                    let (cout, cin) = (ws[0], ws[1]);
                    let n = xv.batch();
                    let mut dw = grads.slot(*w, cout * cin).to_vec();
                    gemm(
                        cout,
                        cin,
                        n,
                        T::one(),
                        Mat::t(dy.data(), cout),
                        Mat::new(xv.data(), cin),
                        T::one(),
                        &mut dw,
                        cin,
                    );
                    grads.slot(*w, cout * cin).copy_from_slice(&dw);
                    let db = grads.slot(*b, cout);
                    for row in dy.data().chunks(cout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let mut dx = vec![T::zero(); n * cin];
                    gemm(
                        n,
                        cin,
                        cout,
                        T::one(),
                        Mat::new(dy.data(), cout),
                        Mat::new(params.data(*w), cin),
                        T::zero(),
                        &mut dx,
                        cin,
                    );
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                }
                Rec::ChannelGate { x, g } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*g].value;
                    let sp = xv.spatial();
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dg = vec![T::zero(); gv.numel()];
                    for (i, gval) in gv.data().iter().enumerate() {
                        let range = i * sp..(i + 1) * sp;
                        let mut acc = T::zero();
                        for ((o, &gy), &xval) in dx[range.clone()]
                            .iter_mut()
                            .zip(&dy.data()[range.clone()])
                            .zip(&xv.data()[range])
                        {
                            *o = gy * *gval;
                            acc += gy * xval;
                        }
                        dg[i] = acc;
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(xv.shape(), dx));
                    accumulate(&mut node_grads[*g], Tensor::from_vec(gv.shape(), dg));
                }
                Rec::Softmax { x } => {
                    let y = &node.value;
                    let (n, c, sp) = (y.batch(), y.channels(), y.spatial());
                    let mut dx = vec![T::zero(); y.numel()];
                    for b in 0..n {
                        let base = b * c * sp;
                        for i in 0..sp {
                            let mut dot = T::zero();
                            for ch in 0..c {
                                dot += dy.data()[base + ch * sp + i] * y.data()[base + ch * sp + i];
                            }
                            for ch in 0..c {
                                let k = base + ch * sp + i;
                                dx[k] = y.data()[k] * (dy.data()[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut node_grads[*x], Tensor::from_vec(y.shape(), dx));
                }
            }
        }
        (grads, input_grads)
    }
}

impl<T: Real> Ops<T> for Tape<'_, T> {
    type H = Var;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn value<'a>(&'a self, h: &'a Var) -> &'a Tensor<T> {
        self.val(h)
    }

    fn conv3d(&mut self, x: &Var, weight: ParamId, bias: Option<ParamId>, dilation: usize) -> Var {
        let (out, shape) = conv_fwd(self.params, self.val(x), weight, bias, dilation);
        self.push(
            out,
            Rec::Conv {
                x: x.0,
                w: weight,
                b: bias,
                shape,
            },
        )
    }

    fn batch_norm(&mut self, x: &Var, bn: BnParams) -> Var {
        let xv = self.val(x);
        let (n, c, sp) = (xv.batch(), xv.channels(), xv.spatial());
        let (mean, var) = kernels::channel_moments(xv.data(), n, c, sp);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = kernels::affine_channels(
            xv.data(),
            n,
            c,
            sp,
            &mean,
            &inv_std,
            self.params.data(bn.gamma),
            self.params.data(bn.beta),
        );
        let shape = xv.shape().to_vec();
        let m = (n * sp) as f64;
        let unbiased = var
            .iter()
            .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
            .collect();
        self.observations.push(BnObservation {
            running_mean: bn.running_mean,
            running_var: bn.running_var,
            mean: mean.clone(),
            var: unbiased,
            count: n * sp,
        });
        self.push(
            Tensor::from_vec(&shape, y),
            Rec::BatchNorm {
                x: x.0,
                bn,
                mean,
                inv_std,
            },
        )
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = relu_fwd(self.val(x));
        self.push(y, Rec::Relu { x: x.0 })
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = sigmoid_fwd(self.val(x));
        self.push(y, Rec::Sigmoid { x: x.0 })
    }

    fn max_pool2(&mut self, x: &Var) -> Var {
        let (y, arg) = pool_fwd(self.val(x));
        self.push(y, Rec::MaxPool { x: x.0, arg })
    }

    fn upsample2(&mut self, x: &Var) -> Var {
        let y = upsample_fwd(self.val(x));
        self.push(y, Rec::Upsample { x: x.0 })
    }

    fn concat(&mut self, xs: &[&Var]) -> Var {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|v| self.val(v)).collect();
        let y = concat_fwd(&vals);
        self.push(
            y,
            Rec::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    fn channel_mean_max(&mut self, x: &Var) -> Var {
        let (y, arg) = mean_max_fwd(self.val(x));
        self.push(y, Rec::ChannelMeanMax { x: x.0, arg })
    }

    fn spatial_gate(&mut self, x: &Var, gate: &Var) -> Var {
        let y = spatial_gate_fwd(self.val(x), self.val(gate));
        self.push(y, Rec::SpatialGate { x: x.0, g: gate.0 })
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let y = gap_fwd(self.val(x));
        self.push(y, Rec::GlobalAvgPool { x: x.0 })
    }

    fn linear(&mut self, x: &Var, weight: ParamId, bias: ParamId) -> Var {
        let y = linear_fwd(self.params, self.val(x), weight, bias);
        self.push(
            y,
            Rec::Linear {
                x: x.0,
                w: weight,
                b: bias,
            },
        )
    }

    fn channel_gate(&mut self, x: &Var, gate: &Var) -> Var {
        let y = channel_gate_fwd(self.val(x), self.val(gate));
        self.push(y, Rec::ChannelGate { x: x.0, g: gate.0 })
    }

    fn softmax(&mut self, x: &Var) -> Var {
        let y = softmax_fwd(self.val(x));
        self.push(y, Rec::Softmax { x: x.0 })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Directional-derivative check of `sum(r * f(x))` w.r.t. input and parameters.
    fn check<F>(name: &str, params: &ParamStore<f64>, x: Tensor<f64>, f: F)
    where
        F: Fn(&mut Tape<'_, f64>, &Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eval = |p: &ParamStore<f64>, x: &Tensor<f64>, r: &[f64]| -> f64 {
            let mut tape = Tape::new(p);
            let v = tape.input(x.clone());
            let out = f(&mut tape, &v);
            tape.value(&out).data().iter().zip(r).map(|(a, b)| a * b).sum()
        };
        let (r, grads, dx) = {
            let mut tape = Tape::new(params);
            let v = tape.input(x.clone());
            let out = f(&mut tape, &v);
            let r = random(&mut rng, tape.value(&out).numel());
            let seed = Tensor::from_vec(tape.value(&out).shape(), r.clone());
            let (g, dx) = tape.backward_with_inputs(out, seed, &[v]);
            (r, g, dx.into_iter().next().unwrap())
        };
        let h = 1e-6;
        let dir_x = random(&mut rng, x.numel());
        let analytic: f64 = dx.data().iter().zip(&dir_x).map(|(a, b)| a * b).sum();
        let shift_x = |sign: f64| {
            let data = x.data().iter().zip(&dir_x).map(|(v, d)| v + sign * h * d).collect();
            eval(params, &Tensor::from_vec(x.shape(), data), &r)
        };
        let numeric = (shift_x(1.0) - shift_x(-1.0)) / (2.0 * h);
        assert!(
            (analytic - numeric).abs() <= 1e-6 * numeric.abs().max(1.0),
            "{name} input: analytic {analytic} numeric {numeric}"
        );
        for id in params.ids() {
            if params.get(id).buffer {
                continue;
            }
            let dir = random(&mut rng, params.get(id).numel());
            let analytic: f64 = grads
                .get(id)
                .map_or(0.0, |g| g.iter().zip(&dir).map(|(a, b)| a * b).sum());
            let shift = |sign: f64| {
                let mut p = params.clone();
                for (v, d) in p.get_mut(id).data.iter_mut().zip(&dir) {
                    *v += sign * h * d;
                }
                eval(&p, &x, &r)
            };
            let numeric = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * numeric.abs().max(1.0),
                "{name} {}: analytic {analytic} numeric {numeric}",
                params.get(id).name
            );
        }
    }

    fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(shape, random(rng, shape.iter().product()))
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, dil) in [(3, 1), (3, 2), (1, 1)] {
            let mut p = ParamStore::new();
            let w = p.add("w", &[3, 2, k, k, k], random(&mut rng, 6 * k * k * k), false);
            let b = p.add("b", &[3], random(&mut rng, 3), false);
            let x = input(&mut rng, &[2, 2, 4, 6, 5]);
            check(&format!("conv k{k} d{dil}"), &p, x, |t, v| t.conv3d(v, w, Some(b), dil));
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let bn = BnParams {
            gamma: p.add("g", &[3], random(&mut rng, 3), false),
            beta: p.add("b", &[3], random(&mut rng, 3), false),
            running_mean: p.add_const("rm", &[3], 0.0, true),
            running_var: p.add_const("rv", &[3], 1.0, true),
        };
        let x = input(&mut rng, &[2, 3, 2, 3, 4]);
        check("batch norm", &p, x, |t, v| t.batch_norm(v, bn));
    }

    #[test]
    fn pointwise_and_resampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamStore::new();
        let x = input(&mut rng, &[2, 3, 4, 4, 6]);
        check("relu", &p, x.clone(), |t, v| t.relu(v));
        check("sigmoid", &p, x.clone(), |t, v| t.sigmoid(v));
        check("max pool", &p, x.clone(), |t, v| t.max_pool2(v));
        check("upsample", &p, x.clone(), |t, v| t.upsample2(v));
        check("softmax", &p, x.clone(), |t, v| t.softmax(v));
        check("mean max", &p, x.clone(), |t, v| t.channel_mean_max(v));
        check("gap", &p, x.clone(), |t, v| t.global_avg_pool(v));
        check("concat", &p, x, |t, v| {
            let s = t.sigmoid(v);
            t.concat(&[v, &s, v])
        });
    }

    #[test]
    fn gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamStore::new();
        let w = p.add("w", &[1, 3, 1, 1, 1], random(&mut rng, 3), false);
        let w1 = p.add("w1", &[2, 3], random(&mut rng, 6), false);
        let b1 = p.add("b1", &[2], random(&mut rng, 2), false);
        let w2 = p.add("w2", &[3, 2], random(&mut rng, 6), false);
        let b2 = p.add("b2", &[3], random(&mut rng, 3), false);
        let x = input(&mut rng, &[2, 3, 2, 4, 4]);
        check("spatial gate", &p, x.clone(), |t, v| {
            let g = t.conv3d(v, w, None, 1);
            let g = t.sigmoid(&g);
            t.spatial_gate(v, &g)
        });
        check("channel gate", &p, x, |t, v| {
            let s = t.global_avg_pool(v);
            let hdn = t.linear(&s, w1, b1);
            let hdn = t.sigmoid(&hdn);
            let g = t.linear(&hdn, w2, b2);
            t.channel_gate(v, &g)
        });
    }
}
