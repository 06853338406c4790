//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every forward op; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients. The graph is rebuilt each step
//! (define-by-run), so weight sharing falls out of registering the same
//! parameter id twice: both uses return the same node and their gradients
//! sum. Shape mismatches are programming errors and panic; data-dependent
//! failures (degenerate TPS systems and the like) return `Result`.

use std::collections::HashMap;

use crate::error::Result;
use crate::geometry::{self, TransformMatrix};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Conv3 { x: Var, w: Var, stride: usize },
    Conv1 { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    PixelShuffle2 { x: Var },
    ConcatC { xs: Vec<Var> },
    SliceC { x: Var, from: usize },
    GridSample { img: Var, grid: Var, padding: T },
    TpsGrid { dst: Var, fits: Vec<geometry::TpsFit> },
    HomogReg { curr: Var, dcurr: Tensor<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulBcastC { img: Var, mask: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Abs { x: Var },
    Clamp01 { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    MeanBatch { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
}

/// Reverse-mode gradients for one backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

/// Define-by-run autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<u64, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var { id: self.nodes.len() - 1 }
    }

    /// Constant/input node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a trainable tensor under a stable id. Re-registering the
    /// same id returns the existing node, which is what shares weights
    /// between the two cycle passes.
    pub fn param(&mut self, uid: u64, fetch: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.param_nodes.get(&uid) {
            return v;
        }
        let v = self.push(fetch(), Op::Leaf);
        self.param_nodes.insert(uid, v);
        v
    }

    /// The var a parameter was bound to in this graph, if it was used.
    pub fn param_var(&self, uid: u64) -> Option<Var> {
        self.param_nodes.get(&uid).copied()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy of a node's value as a fresh leaf: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.id].value.clone();
        self.leaf(t)
    }

    // ── Convolution and friends ─────────────────────────────────────

    /// 3x3, padding-1 convolution; `w` is (out_c, in_c, 3, 3).
    pub fn conv3(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let wt = self.nodes[w.id].value.clone();
        let w2 = wt.reshaped(&[wt.dim(0), wt.dim(1) * 9]);
        let y = kernels::conv3_forward(&self.nodes[x.id].value, &w2, stride);
        self.push(y, Op::Conv3 { x, w, stride })
    }

    /// 1x1 convolution; `w` is (out_c, in_c).
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Var {
        let y = kernels::conv1_forward(&self.nodes[x.id].value, &self.nodes[w.id].value);
        self.push(y, Op::Conv1 { x, w })
    }

    /// Add a per-channel bias `b` of shape (C,) to an NCHW tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let bv = &self.nodes[b.id].value;
        let (n, c, h, w) = kernels::nchw(xv);
        assert_eq!(bv.len(), c, "bias length must equal channel count");
        let mut y = xv.clone();
        {
            let yd = y.data_mut();
            for i in 0..n {
                for ci in 0..c {
                    let bias = bv.data()[ci];
                    for v in &mut yd[(i * c + ci) * h * w..(i * c + ci + 1) * h * w] {
                        *v += bias;
                    }
                }
            }
        }
        self.push(y, Op::AddBias { x, b })
    }

    /// Fully connected layer: x (N, F) * w^T (F, O) + b (O,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let bv = &self.nodes[b.id].value;
        let (n, f) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(0);
        assert_eq!(wv.dim(1), f);
        assert_eq!(bv.len(), o);
        let mut y = vec![T::ZERO; n * o];
        crate::tensor::gemm(n, f, o, T::ONE, xv.data(), f as isize, 1, wv.data(), 1, f as isize, T::ZERO, &mut y, o as isize, 1);
        for row in 0..n {
            for j in 0..o {
                y[row * o + j] += bv.data()[j];
            }
        }
        let y = Tensor::from_vec(&[n, o], y);
        self.push(y, Op::Linear { x, w, b })
    }

    /// Instance normalization with affine parameters, eps = 1e-5.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = 1e-5;
        let xv = &self.nodes[x.id].value;
        let gv = &self.nodes[gamma.id].value;
        let bv = &self.nodes[beta.id].value;
        let (n, c, h, w) = kernels::nchw(xv);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let hw = (h * w) as f64;
        let mut mean = vec![0.0f64; n * c];
        let mut inv_std = vec![0.0f64; n * c];
        let mut y = vec![T::ZERO; xv.len()];
        for i in 0..n {
            for ci in 0..c {
                let sl = &xv.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                let m: f64 = sl.iter().map(|v| v.to_f64()).sum::<f64>() / hw;
                let var: f64 = sl.iter().map(|v| (v.to_f64() - m) * (v.to_f64() - m)).sum::<f64>() / hw;
                let is = 1.0 / (var + eps).sqrt();
                mean[i * c + ci] = m;
                inv_std[i * c + ci] = is;
                let (g, b) = (gv.data()[ci].to_f64(), bv.data()[ci].to_f64());
                let out = &mut y[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                for (o, v) in out.iter_mut().zip(sl) {
                    *o = T::from_f64((v.to_f64() - m) * is * g + b);
                }
            }
        }
        let y = Tensor::from_vec(xv.shape(), y);
        self.push(y, Op::InstanceNorm { x, gamma, beta, mean, inv_std })
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(y, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let y = self.nodes[x.id].value.map(|v| if v > T::ZERO { v } else { v * s });
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| {
            let vf = v.to_f64();
            T::from_f64(if vf >= 0.0 { 1.0 / (1.0 + (-vf).exp()) } else { vf.exp() / (1.0 + vf.exp()) })
        });
        self.push(y, Op::Sigmoid { x })
    }

    pub fn tanh_op(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| v.tanh());
        self.push(y, Op::Tanh { x })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| {
            if v > T::ZERO {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        });
        self.push(y, Op::Softplus { x })
    }

    // ── Shape and sampling ops ──────────────────────────────────────

    /// 2x2 stride-2 max pooling with ceil-mode borders.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (y, arg) = kernels::maxpool2_forward(&self.nodes[x.id].value);
        self.push(y, Op::MaxPool2 { x, arg })
    }

    /// Nearest-neighbour resize to an explicit output extent.
    pub fn upsample_to(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = kernels::upsample_nearest_forward(&self.nodes[x.id].value, oh, ow);
        self.push(y, Op::Upsample { x })
    }

    /// Depth-to-space by 2: (N, 4C, H, W) -> (N, C, oh, ow), oh <= 2H.
    pub fn pixel_shuffle2(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = kernels::pixel_shuffle2_forward(&self.nodes[x.id].value, oh, ow);
        self.push(y, Op::PixelShuffle2 { x })
    }

    /// Concatenate NCHW tensors along channels.
    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (n, _, h, w) = kernels::nchw(&self.nodes[xs[0].id].value);
        let c_total: usize = xs.iter().map(|v| self.nodes[v.id].value.dim(1)).sum();
        let mut y = vec![T::ZERO; n * c_total * h * w];
        for i in 0..n {
            let mut c_off = 0;
            for v in xs {
                let xv = &self.nodes[v.id].value;
                let (xn, xc, xh, xw) = kernels::nchw(xv);
                assert_eq!((xn, xh, xw), (n, h, w), "concat_c spatial/batch mismatch");
                let src = &xv.data()[i * xc * h * w..(i + 1) * xc * h * w];
                y[(i * c_total + c_off) * h * w..(i * c_total + c_off + xc) * h * w]
                    .copy_from_slice(src);
                c_off += xc;
            }
        }
        let y = Tensor::from_vec(&[n, c_total, h, w], y);
        self.push(y, Op::ConcatC { xs: xs.to_vec() })
    }

    /// Channel slice `[from, to)` of an NCHW tensor.
    pub fn slice_c(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = &self.nodes[x.id].value;
        let (n, c, h, w) = kernels::nchw(xv);
        assert!(from < to && to <= c);
        let cs = to - from;
        let mut y = vec![T::ZERO; n * cs * h * w];
        for i in 0..n {
            y[i * cs * h * w..(i + 1) * cs * h * w].copy_from_slice(
                &xv.data()[(i * c + from) * h * w..(i * c + to) * h * w],
            );
        }
        let y = Tensor::from_vec(&[n, cs, h, w], y);
        self.push(y, Op::SliceC { x, from })
    }

    /// Bilinear sampling of `img` (N,C,H,W) at `grid` (N,Ho,Wo,2).
    pub fn grid_sample(&mut self, img: Var, grid: Var, padding: f64) -> Var {
        let p = T::from_f64(padding);
        let y = kernels::grid_sample_forward(&self.nodes[img.id].value, &self.nodes[grid.id].value, p);
        self.push(y, Op::GridSample { img, grid, padding: p })
    }

    /// Dense TPS warp fields from predicted destination control points.
    /// `dst` is (N, K, 2); `src` are the fixed source points; the result is
    /// (N, H, W, 2). Fails if any per-sample system is degenerate.
    pub fn tps_grid(&mut self, dst: Var, src: &[[f64; 2]], h: usize, w: usize) -> Result<Var> {
        let dv = &self.nodes[dst.id].value;
        assert_eq!(dv.shape().len(), 3);
        let (n, k) = (dv.dim(0), dv.dim(1));
        assert_eq!(dv.dim(2), 2);
        assert_eq!(k, src.len());
        let mut fits = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * h * w * 2);
        for i in 0..n {
            let sites: Vec<[f64; 2]> = (0..k)
                .map(|j| {
                    [dv.data()[(i * k + j) * 2].to_f64(), dv.data()[(i * k + j) * 2 + 1].to_f64()]
                })
                .collect();
            let fit = geometry::tps_fit(&sites, src)?;
            data.extend(fit.eval_grid(h, w).into_iter().map(T::from_f64));
            fits.push(fit);
        }
        let y = Tensor::from_vec(&[n, h, w, 2], data);
        Ok(self.push(y, Op::TpsGrid { dst, fits }))
    }

    /// Homography regularizer between a detached previous stack and the
    /// current control points (K, 2): scalar `||H* prev - curr||_F^2` with
    /// the argmin-H envelope gradient.
    pub fn homog_reg(&mut self, prev: &TransformMatrix, curr: Var) -> Result<Var> {
        let cv = &self.nodes[curr.id].value;
        assert_eq!(cv.shape().len(), 2);
        assert_eq!(cv.dim(1), 2);
        let k = cv.dim(0);
        let points: Vec<[f64; 2]> = (0..k)
            .map(|j| [cv.data()[j * 2].to_f64(), cv.data()[j * 2 + 1].to_f64()])
            .collect();
        let curr_t = TransformMatrix::from_points(&points);
        let (rb, resid) = geometry::regularization_parts(prev, &curr_t)?;
        let mut dcurr = vec![T::ZERO; k * 2];
        for j in 0..k {
            dcurr[j * 2] = T::from_f64(-2.0 * resid[(0, j)]);
            dcurr[j * 2 + 1] = T::from_f64(-2.0 * resid[(1, j)]);
        }
        let dcurr = Tensor::from_vec(&[k, 2], dcurr);
        Ok(self.push(Tensor::scalar(T::from_f64(rb)), Op::HomogReg { curr, dcurr }))
    }

    // ── Pointwise and reductions ────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.nodes[a.id].value.zip_map(&self.nodes[b.id].value, |x, z| x + z);
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.nodes[a.id].value.zip_map(&self.nodes[b.id].value, |x, z| x - z);
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.nodes[a.id].value.zip_map(&self.nodes[b.id].value, |x, z| x * z);
        self.push(y, Op::Mul { a, b })
    }

    /// Multiply an NCHW image by a single-channel (N,1,H,W) mask.
    pub fn mul_bcast_c(&mut self, img: Var, mask: Var) -> Var {
        let iv = &self.nodes[img.id].value;
        let mv = &self.nodes[mask.id].value;
        let (n, c, h, w) = kernels::nchw(iv);
        assert_eq!(mv.shape(), &[n, 1, h, w], "mask must be (N,1,H,W)");
        let mut y = iv.clone();
        {
            let yd = y.data_mut();
            for i in 0..n {
                let m = &mv.data()[i * h * w..(i + 1) * h * w];
                for ci in 0..c {
                    let sl = &mut yd[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    for (v, &mk) in sl.iter_mut().zip(m) {
                        *v = *v * mk;
                    }
                }
            }
        }
        self.push(y, Op::MulBcastC { img, mask })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = T::from_f64(c);
        let y = self.nodes[x.id].value.map(|v| v * s);
        self.push(y, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let s = T::from_f64(c);
        let y = self.nodes[x.id].value.map(|v| v + s);
        self.push(y, Op::AddConst { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| v.abs());
        self.push(y, Op::Abs { x })
    }

    /// Clamp to [0, 1].
    pub fn clamp01(&mut self, x: Var) -> Var {
        let y = self.nodes[x.id].value.map(|v| {
            if v < T::ZERO {
                T::ZERO
            } else if v > T::ONE {
                T::ONE
            } else {
                v
            }
        });
        self.push(y, Op::Clamp01 { x })
    }

    /// Mean over all elements; result has shape (1,).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let m = xv.data().iter().map(|v| v.to_f64()).sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(T::from_f64(m)), Op::MeanAll { x })
    }

    /// Sum over all elements; result has shape (1,).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let s = xv.data().iter().map(|v| v.to_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll { x })
    }

    /// Mean over the leading (batch) axis: (N, ...) -> (...).
    pub fn mean_batch(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let n = xv.dim(0);
        let rest: usize = xv.len() / n;
        let mut out = vec![0.0f64; rest];
        for i in 0..n {
            for j in 0..rest {
                out[j] += xv.data()[i * rest + j].to_f64();
            }
        }
        let data: Vec<T> = out.into_iter().map(|v| T::from_f64(v / n as f64)).collect();
        let y = Tensor::from_vec(&xv.shape()[1..], data);
        self.push(y, Op::MeanBatch { x })
    }

    /// Spatial mean of an NCHW tensor: (N, C, H, W) -> (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let (n, c, h, w) = kernels::nchw(xv);
        let hw = (h * w) as f64;
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n * c {
            let s: f64 = xv.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f64()).sum();
            out[i] = T::from_f64(s / hw);
        }
        let y = Tensor::from_vec(&[n, c], out);
        self.push(y, Op::GlobalAvgPool { x })
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.nodes[x.id].value.reshaped(shape);
        self.push(y, Op::Reshape { x })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar node with respect to everything
    /// that feeds it.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            self.accumulate(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        fn add_into<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, inc: Tensor<T>) {
            match &mut grads[v.id] {
                Some(acc) => acc.add_assign(&inc),
                slot => *slot = Some(inc),
            }
        }
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3 { x, w, stride } => {
                let wt = &self.nodes[w.id].value;
                let w2 = wt.reshaped(&[wt.dim(0), wt.dim(1) * 9]);
                let (dx, dw) = kernels::conv3_backward(&self.nodes[x.id].value, &w2, *stride, g);
                add_into(grads, *x, dx);
                add_into(grads, *w, dw.reshaped(wt.shape()));
            }
            Op::Conv1 { x, w } => {
                let (dx, dw) =
                    kernels::conv1_backward(&self.nodes[x.id].value, &self.nodes[w.id].value, g);
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
            }
            Op::AddBias { x, b } => {
                let (n, c, h, w) = kernels::nchw(&node.value);
                let mut db = vec![T::ZERO; c];
                for i in 0..n {
                    for ci in 0..c {
                        for &v in &g.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w] {
                            db[ci] += v;
                        }
                    }
                }
                add_into(grads, *x, g.clone());
                add_into(grads, *b, Tensor::from_vec(&[c], db));
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.id].value;
                let wv = &self.nodes[w.id].value;
                let (n, f) = (xv.dim(0), xv.dim(1));
                let o = wv.dim(0);
                let mut dw = vec![T::ZERO; o * f];
                crate::tensor::gemm(o, n, f, T::ONE, g.data(), 1, o as isize, xv.data(), f as isize, 1, T::ZERO, &mut dw, f as isize, 1);
                let mut dx = vec![T::ZERO; n * f];
                crate::tensor::gemm(n, o, f, T::ONE, g.data(), o as isize, 1, wv.data(), f as isize, 1, T::ZERO, &mut dx, f as isize, 1);
                let mut db = vec![T::ZERO; o];
                for row in 0..n {
                    for j in 0..o {
                        db[j] += g.data()[row * o + j];
                    }
                }
                add_into(grads, *x, Tensor::from_vec(&[n, f], dx));
                add_into(grads, *w, Tensor::from_vec(&[o, f], dw));
                add_into(grads, *b, Tensor::from_vec(&[o], db));
            }
            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                let xv = &self.nodes[x.id].value;
                let gv = &self.nodes[gamma.id].value;
                let (n, c, h, w) = kernels::nchw(xv);
                let hw = (h * w) as f64;
                let mut dx = vec![T::ZERO; xv.len()];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for i in 0..n {
                    for ci in 0..c {
                        let base = (i * c + ci) * h * w;
                        let (m, is) = (mean[i * c + ci], inv_std[i * c + ci]);
                        let gsc = gv.data()[ci].to_f64();
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..h * w {
                            let xh = (xv.data()[base + j].to_f64() - m) * is;
                            let dy = g.data()[base + j].to_f64();
                            dgamma[ci] += dy * xh;
                            dbeta[ci] += dy;
                            s1 += dy;
                            s2 += dy * xh;
                        }
                        s1 /= hw;
                        s2 /= hw;
                        for j in 0..h * w {
                            let xh = (xv.data()[base + j].to_f64() - m) * is;
                            let dy = g.data()[base + j].to_f64();
                            dx[base + j] = T::from_f64(gsc * is * (dy - s1 - xh * s2));
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx));
                add_into(grads, *gamma, Tensor::from_vec(&[c], dgamma.into_iter().map(T::from_f64).collect()));
                add_into(grads, *beta, Tensor::from_vec(&[c], dbeta.into_iter().map(T::from_f64).collect()));
            }
            Op::Relu { x } => {
                let dx = node.value.zip_map(g, |y, dy| if y > T::ZERO { dy } else { T::ZERO });
                add_into(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64(*slope);
                let dx = node.value.zip_map(g, |y, dy| if y > T::ZERO { dy } else { dy * s });
                add_into(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.zip_map(g, |y, dy| dy * y * (T::ONE - y));
                add_into(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = node.value.zip_map(g, |y, dy| dy * (T::ONE - y * y));
                add_into(grads, *x, dx);
            }
            Op::Softplus { x } => {
                // sigmoid(x) recovered from y: 1 - exp(-y).
                let dx = node.value.zip_map(g, |y, dy| dy * (T::ONE - (-y).exp()));
                add_into(grads, *x, dx);
            }
            Op::MaxPool2 { x, arg } => {
                let xv = &self.nodes[x.id].value;
                let (n, c, h, w) = kernels::nchw(xv);
                let (ho, wo) = (node.value.dim(2), node.value.dim(3));
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let dxd = dx.data_mut();
                    for i in 0..n * c {
                        for j in 0..ho * wo {
                            let src = arg[i * ho * wo + j] as usize;
                            dxd[i * h * w + src] += g.data()[i * ho * wo + j];
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::Upsample { x } => {
                let dx = kernels::upsample_nearest_backward(self.nodes[x.id].value.shape(), g);
                add_into(grads, *x, dx);
            }
            Op::PixelShuffle2 { x } => {
                let dx = kernels::pixel_shuffle2_backward(self.nodes[x.id].value.shape(), g);
                add_into(grads, *x, dx);
            }
            Op::ConcatC { xs } => {
                let (n, c_total, h, w) = kernels::nchw(&node.value);
                let mut c_off = 0;
                for v in xs {
                    let xc = self.nodes[v.id].value.dim(1);
                    let mut dx = vec![T::ZERO; n * xc * h * w];
                    for i in 0..n {
                        dx[i * xc * h * w..(i + 1) * xc * h * w].copy_from_slice(
                            &g.data()[(i * c_total + c_off) * h * w..(i * c_total + c_off + xc) * h * w],
                        );
                    }
                    add_into(grads, *v, Tensor::from_vec(&[n, xc, h, w], dx));
                    c_off += xc;
                }
            }
            Op::SliceC { x, from } => {
                let xv = &self.nodes[x.id].value;
                let (n, c, h, w) = kernels::nchw(xv);
                let cs = node.value.dim(1);
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let dxd = dx.data_mut();
                    for i in 0..n {
                        dxd[(i * c + from) * h * w..(i * c + from + cs) * h * w]
                            .copy_from_slice(&g.data()[i * cs * h * w..(i + 1) * cs * h * w]);
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::GridSample { img, grid, padding } => {
                let (dimg, dgrid) = kernels::grid_sample_backward(
                    &self.nodes[img.id].value,
                    &self.nodes[grid.id].value,
                    *padding,
                    g,
                );
                add_into(grads, *img, dimg);
                add_into(grads, *grid, dgrid);
            }
            Op::TpsGrid { dst, fits } => {
                let dv = &self.nodes[dst.id].value;
                let (n, k) = (dv.dim(0), dv.dim(1));
                let (h, w) = (node.value.dim(1), node.value.dim(2));
                let mut ddst = vec![T::ZERO; n * k * 2];
                for (i, fit) in fits.iter().enumerate() {
                    let dfield: Vec<f64> = g.data()[i * h * w * 2..(i + 1) * h * w * 2]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect();
                    let ds = fit.backward_sites(h, w, &dfield);
                    for (dst_slot, src_val) in
                        ddst[i * k * 2..(i + 1) * k * 2].iter_mut().zip(ds)
                    {
                        *dst_slot = T::from_f64(src_val);
                    }
                }
                add_into(grads, *dst, Tensor::from_vec(&[n, k, 2], ddst));
            }
            Op::HomogReg { curr, dcurr } => {
                let s = g.item();
                add_into(grads, *curr, dcurr.map(|v| v * s));
            }
            Op::Add { a, b } => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                add_into(grads, *a, g.zip_map(&self.nodes[b.id].value, |dy, bv| dy * bv));
                add_into(grads, *b, g.zip_map(&self.nodes[a.id].value, |dy, av| dy * av));
            }
            Op::MulBcastC { img, mask } => {
                let iv = &self.nodes[img.id].value;
                let mv = &self.nodes[mask.id].value;
                let (n, c, h, w) = kernels::nchw(iv);
                let mut dimg = vec![T::ZERO; iv.len()];
                let mut dmask = vec![T::ZERO; mv.len()];
                for i in 0..n {
                    let m = &mv.data()[i * h * w..(i + 1) * h * w];
                    for ci in 0..c {
                        let base = (i * c + ci) * h * w;
                        for j in 0..h * w {
                            dimg[base + j] = g.data()[base + j] * m[j];
                            dmask[i * h * w + j] += g.data()[base + j] * iv.data()[base + j];
                        }
                    }
                }
                add_into(grads, *img, Tensor::from_vec(iv.shape(), dimg));
                add_into(grads, *mask, Tensor::from_vec(mv.shape(), dmask));
            }
            Op::Scale { x, c } => {
                let s = T::from_f64(*c);
                add_into(grads, *x, g.map(|v| v * s));
            }
            Op::AddConst { x } => {
                add_into(grads, *x, g.clone());
            }
            Op::Abs { x } => {
                let dx = self.nodes[x.id].value.zip_map(g, |xv, dy| {
                    if xv > T::ZERO {
                        dy
                    } else if xv < T::ZERO {
                        -dy
                    } else {
                        T::ZERO
                    }
                });
                add_into(grads, *x, dx);
            }
            Op::Clamp01 { x } => {
                let dx = self.nodes[x.id].value.zip_map(g, |xv, dy| {
                    if xv > T::ZERO && xv < T::ONE {
                        dy
                    } else {
                        T::ZERO
                    }
                });
                add_into(grads, *x, dx);
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[x.id].value;
                let s = g.item() * T::from_f64(1.0 / xv.len() as f64);
                add_into(grads, *x, Tensor::full(xv.shape(), s));
            }
            Op::SumAll { x } => {
                let xv = &self.nodes[x.id].value;
                add_into(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanBatch { x } => {
                let xv = &self.nodes[x.id].value;
                let n = xv.dim(0);
                let rest = xv.len() / n;
                let inv = T::from_f64(1.0 / n as f64);
                let mut dx = vec![T::ZERO; xv.len()];
                for i in 0..n {
                    for j in 0..rest {
                        dx[i * rest + j] = g.data()[j] * inv;
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::GlobalAvgPool { x } => {
                let xv = &self.nodes[x.id].value;
                let (n, c, h, w) = kernels::nchw(xv);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![T::ZERO; xv.len()];
                for i in 0..n * c {
                    let dv = g.data()[i] * inv;
                    for slot in &mut dx[i * h * w..(i + 1) * h * w] {
                        *slot = dv;
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Reshape { x } => {
                add_into(grads, *x, g.reshaped(self.nodes[x.id].value.shape()));
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::fd_check;
    use super::*;
    use crate::geometry::ControlGrid;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let data = (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 32) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn grad_conv3_both_strides() {
        for &stride in &[1usize, 2] {
            fd_check(
                &[pseudo(&[2, 2, 4, 5], 1), pseudo(&[3, 2, 3, 3], 2)],
                |g, v| {
                    let y = g.conv3(v[0], v[1], stride);
                    g.mean_all(y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn grad_conv1x1_and_bias() {
        fd_check(
            &[pseudo(&[2, 3, 3, 3], 3), pseudo(&[4, 3], 4), pseudo(&[4], 5)],
            |g, v| {
                let y = g.conv1x1(v[0], v[1]);
                let y = g.add_bias(y, v[2]);
                let y = g.abs(y);
                g.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_linear() {
        fd_check(
            &[pseudo(&[3, 4], 6), pseudo(&[2, 4], 7), pseudo(&[2], 8)],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let y = g.tanh_op(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_instance_norm() {
        fd_check(
            &[pseudo(&[2, 3, 4, 4], 9), pseudo(&[3], 10), pseudo(&[3], 11)],
            |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2]);
                let w = g.tanh_op(y);
                let y = g.mul(y, w);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_activations() {
        // Inputs scaled away from the relu/abs kinks.
        let x = pseudo(&[2, 2, 3, 3], 12).map(|v| v * 2.0 + 0.11);
        fd_check(
            &[x],
            |g, v| {
                let a = g.relu(v[0]);
                let b = g.leaky_relu(v[0], 0.2);
                let c = g.sigmoid(v[0]);
                let d = g.softplus(v[0]);
                let e = g.add(a, b);
                let f = g.add(c, d);
                let s = g.mul(e, f);
                g.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_pool_upsample_shuffle() {
        fd_check(
            &[pseudo(&[1, 4, 3, 5], 13)],
            |g, v| {
                let p = g.maxpool2(v[0]);
                let u = g.upsample_to(p, 3, 5);
                let d = g.sub(u, v[0]);
                let s = g.pixel_shuffle2(v[0], 5, 9);
                let sm = g.mean_all(s);
                let dm = g.mean_all(d);
                g.add(sm, dm)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_concat_slice() {
        fd_check(
            &[pseudo(&[2, 2, 2, 2], 14), pseudo(&[2, 3, 2, 2], 15)],
            |g, v| {
                let c = g.concat_c(&[v[0], v[1]]);
                let s = g.slice_c(c, 1, 4);
                let s = g.abs(s);
                g.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_grid_sample_image_and_grid() {
        let img = pseudo(&[1, 2, 5, 6], 16);
        // Grid positions well inside the image and away from tap boundaries.
        let grid = pseudo(&[1, 3, 4, 2], 17).map(|v| v * 0.43 + 0.021);
        fd_check(
            &[img, grid],
            |g, v| {
                let y = g.grid_sample(v[0], v[1], 0.0);
                let y = g.abs(y);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_tps_grid_through_sampling() {
        let src = ControlGrid::regular(3, 3).unwrap();
        let mut dst = pseudo(&[1, 9, 2], 18).map(|v| v * 0.05);
        {
            let d = dst.data_mut();
            for (j, p) in src.points().iter().enumerate() {
                d[j * 2] += p[0];
                d[j * 2 + 1] += p[1];
            }
        }
        let img = pseudo(&[1, 1, 6, 6], 19);
        let src_pts = src.points().to_vec();
        fd_check(
            &[dst, img],
            move |g, v| {
                let field = g.tps_grid(v[0], &src_pts, 6, 6).unwrap();
                let warped = g.grid_sample(v[1], field, 0.0);
                let warped = g.abs(warped);
                g.mean_all(warped)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_homog_reg_envelope() {
        let prev_grid = ControlGrid::regular(3, 3).unwrap();
        let prev = TransformMatrix::from_grid(&prev_grid);
        let curr = pseudo(&[9, 2], 20).map(|v| v * 0.1);
        let curr = {
            let mut c = curr;
            let d = c.data_mut();
            for (j, p) in prev_grid.points().iter().enumerate() {
                d[j * 2] += p[0];
                d[j * 2 + 1] += p[1];
            }
            c
        };
        fd_check(
            &[curr],
            move |g, v| g.homog_reg(&prev, v[0]).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn grad_reductions_and_masking() {
        fd_check(
            &[pseudo(&[2, 3, 2, 2], 21), pseudo(&[2, 1, 2, 2], 22)],
            |g, v| {
                let m = g.mul_bcast_c(v[0], v[1]);
                let gap = g.global_avg_pool(m);
                let r = g.reshape(gap, &[2, 3]);
                let mb = g.mean_batch(r);
                let s = g.abs(mb);
                g.sum_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_clamp_interior() {
        let x = pseudo(&[3, 3], 23).map(|v| v * 0.3 + 0.45);
        fd_check(
            &[x],
            |g, v| {
                let y = g.clamp01(v[0]);
                g.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn param_reuse_shares_node_and_sums_grads() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::from_vec(&[1], vec![3.0]);
        let a = g.param(7, || w.clone());
        let b = g.param(7, || panic!("must not refetch"));
        assert_eq!(a, b);
        // loss = w * w -> dw = 2w = 6
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().item(), 6.0);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(d, d);
        let grads = g.backward(y);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(d).unwrap().item(), 4.0);
    }

    #[test]
    fn weight_sharing_two_passes_accumulates() {
        // Same "layer" applied twice; gradient doubles compared to once.
        let x1 = pseudo(&[1, 2, 3, 3], 24);
        let x2 = x1.clone();
        let w = pseudo(&[2, 2, 3, 3], 25);
        let mut g = Graph::<f64>::new();
        let wv = g.param(0, || w.clone());
        let a = g.leaf(x1.clone());
        let b = g.leaf(x2);
        let y1 = g.conv3(a, wv, 1);
        let y2 = g.conv3(b, wv, 1);
        let m1 = g.mean_all(y1);
        let m2 = g.mean_all(y2);
        let tot = g.add(m1, m2);
        let grads = g.backward(tot);
        let shared = grads.get(wv).unwrap().clone();

        let mut g1 = Graph::<f64>::new();
        let wv1 = g1.param(0, || w.clone());
        let a1 = g1.leaf(x1);
        let y = g1.conv3(a1, wv1, 1);
        let m = g1.mean_all(y);
        let grads1 = g1.backward(m);
        let single = grads1.get(wv1).unwrap();
        for (s, d) in single.data().iter().zip(shared.data()) {
            assert!((2.0 * s - d).abs() < 1e-12);
        }
    }
}
