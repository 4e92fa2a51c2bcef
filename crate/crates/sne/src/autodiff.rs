//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every executed operation together with a backward
//! closure. [`Tape::backward`] replays the record in reverse, visiting each
//! operation exactly once and accumulating gradients into per-node buffers.
//! Tapes are single-threaded by design; batch-level parallelism happens
//! inside individual ops over disjoint output chunks.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-spike semantics for the spiking nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside forward, sigmoid-surrogate backward.
    Hard,
    /// Sigmoid forward and backward (gradcheck-friendly).
    Soft,
}

type BackwardFn = Box<dyn Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)>>;

struct OpRecord {
    out: usize,
    backward: BackwardFn,
}

/// Ordered record of executed operations and their tensors.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    ops: Vec<OpRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Insert a tensor as a tracked leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    fn push_op(&mut self, out_value: Tensor, backward: BackwardFn) -> Var {
        let out = self.leaf(out_value);
        self.ops.push(OpRecord {
            out: out.0,
            backward,
        });
        out
    }

    /// Populate gradients of `loss` w.r.t. every tracked tensor. Repeated
    /// calls without `reset_grads` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape),
            ));
        }
        let mut pass: Vec<Option<Tensor>> = vec![None; self.values.len()];
        pass[loss.0] = Some(Tensor::scalar(1.0));
        for op in self.ops.iter().rev() {
            let Some(out_grad) = pass[op.out].take() else {
                continue;
            };
            let contributions = (op.backward)(&self.values, &out_grad);
            for (id, contrib) in contributions {
                match &mut pass[id] {
                    Some(existing) => {
                        for (a, b) in existing.data.iter_mut().zip(contrib.data.iter()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            // out_grad no longer needed for the pass itself, but fold it into
            // the persistent accumulator below via re-insertion.
            pass[op.out] = Some(out_grad);
        }
        for (slot, g) in self.grads.iter_mut().zip(pass.into_iter()) {
            if let Some(g) = g {
                match slot {
                    Some(existing) => {
                        for (a, b) in existing.data.iter_mut().zip(g.data.iter()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    // ---- elementwise and reduction ops ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape, self.values[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
        };
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
        };
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                vec![(a.0, g.clone()), (b.0, neg)]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
        };
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&vals[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect(),
                };
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&vals[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect(),
                };
                vec![(a.0, da), (b.0, db)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0].data.iter().map(|v| v * c).collect(),
        };
        self.push_op(
            out,
            Box::new(move |_, g| {
                vec![(
                    a.0,
                    Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|v| v * c).collect(),
                    },
                )]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0].data.iter().map(|v| v + c).collect(),
        };
        self.push_op(out, Box::new(move |_, g| vec![(a.0, g.clone())]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.values[a.0].data.iter().sum();
        let shape = self.values[a.0].shape.clone();
        self.push_op(
            Tensor::scalar(total),
            Box::new(move |_, g| {
                let gi = g.item();
                vec![(
                    a.0,
                    Tensor {
                        shape: shape.clone(),
                        data: vec![gi; shape.iter().product()],
                    },
                )]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0].data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push_op(
            out,
            Box::new(move |vals, g| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&vals[a.0].data)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                };
                vec![(a.0, da)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0]
                .data
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        };
        let out_id_holder = self.values.len(); // id the output will get
        let v = self.push_op(
            out,
            Box::new(move |vals, g| {
                let s = &vals[out_id_holder];
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&s.data)
                        .map(|(gi, si)| gi * si * (1.0 - si))
                        .collect(),
                };
                vec![(a.0, da)]
            }),
        );
        debug_assert_eq!(v.0, out_id_holder);
        v
    }

    /// Spiking nonlinearity on the pre-activation `x` (already shifted by the
    /// threshold). Hard mode emits Θ(x) forward and substitutes the sigmoid
    /// surrogate derivative `σ'(slope·x)·slope` backward; soft mode is the
    /// plain sigmoid `σ(slope·x)` both ways.
    pub fn spike(&mut self, x: Var, slope: f64, mode: SpikeMode) -> Var {
        let out = Tensor {
            shape: self.values[x.0].shape.clone(),
            data: self.values[x.0]
                .data
                .iter()
                .map(|&v| match mode {
                    SpikeMode::Hard => {
                        if v > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    SpikeMode::Soft => 1.0 / (1.0 + (-slope * v).exp()),
                })
                .collect(),
        };
        self.push_op(
            out,
            Box::new(move |vals, g| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&vals[x.0].data)
                        .map(|(gi, &xi)| {
                            let s = 1.0 / (1.0 + (-slope * xi).exp());
                            gi * s * (1.0 - s) * slope
                        })
                        .collect(),
                };
                vec![(x.0, da)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.values[a.0].len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} values as {:?}",
                    self.values[a.0].len(),
                    shape
                ),
            ));
        }
        let in_shape = self.values[a.0].shape.clone();
        let out = Tensor {
            shape,
            data: self.values[a.0].data.clone(),
        };
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                vec![(
                    a.0,
                    Tensor {
                        shape: in_shape.clone(),
                        data: g.data.clone(),
                    },
                )]
            }),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.values[a.0].shape, &self.values[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}: inner dimensions must match", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        {
            let av = &self.values[a.0].data;
            let bv = &self.values[b.0].data;
            for_each_chunk_mut(&mut out.data, n, |i, row| {
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += aik * brow[j];
                    }
                }
            });
        }
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                // da = g · bᵀ
                let mut da = Tensor::zeros(&[m, k]);
                for_each_chunk_mut(&mut da.data, k, |i, row| {
                    for j in 0..n {
                        let gij = g.data[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for (kk, o) in row.iter_mut().enumerate() {
                            *o += gij * bv[kk * n + j];
                        }
                    }
                });
                // db = aᵀ · g
                let mut db = Tensor::zeros(&[k, n]);
                for_each_chunk_mut(&mut db.data, n, |kk, row| {
                    for i in 0..m {
                        let aik = av[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += aik * g.data[i * n + j];
                        }
                    }
                });
                vec![(a.0, da), (b.0, db)]
            }),
        ))
    }

    /// `x: [B, D] + row: [D]`, broadcast over the batch.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (&self.values[x.0].shape, &self.values[row.0].shape);
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", sx, sr)));
        }
        let (b, d) = (sx[0], sx[1]);
        let mut out = self.values[x.0].clone();
        for bi in 0..b {
            for j in 0..d {
                out.data[bi * d + j] += self.values[row.0].data[j];
            }
        }
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dr = Tensor::zeros(&[d]);
                for bi in 0..b {
                    for j in 0..d {
                        dr.data[j] += g.data[bi * d + j];
                    }
                }
                vec![(x.0, g.clone()), (row.0, dr)]
            }),
        ))
    }

    // ---- convolution / pooling / normalization ----

    /// Cross-correlation convolution. `input: [B,C,H,W]`, `kernel: [O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.values[input.0].shape.clone();
        let sk = self.values[kernel.0].shape.clone();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}: expected 4-d tensors", si, sk),
            ));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != kernel channels {}", si[1], sk[1]),
            ));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if kh > hp || kw > wp {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "spatial dims {}x{} (pad {}) smaller than kernel {}x{}",
                    h, w, padding, kh, kw
                ),
            ));
        }
        // floor semantics: a trailing partial window is dropped
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;
        let out_chunk = o * oh * ow;
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        {
            let xv = &self.values[input.0].data;
            let kv = &self.values[kernel.0].data;
            let p = padding as isize;
            for_each_chunk_mut(&mut out.data, out_chunk, |bi, chunk| {
                let xb = &xv[bi * c * h * w..(bi + 1) * c * h * w];
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - p;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += xb[(ic * h + iy as usize) * w + ix as usize]
                                            * kv[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                            chunk[(oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            });
        }
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let xv = &vals[input.0].data;
                let kv = &vals[kernel.0].data;
                let p = padding as isize;
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                for_each_chunk_mut(&mut dx.data, c * h * w, |bi, chunk| {
                    let gb = &g.data[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gb[(oc * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - p;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - p;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            chunk[(ic * h + iy as usize) * w + ix as usize] +=
                                                gv * kv[((oc * c + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                let mut dk = Tensor::zeros(&[o, c, kh, kw]);
                for_each_chunk_mut(&mut dk.data, c * kh * kw, |oc, chunk| {
                    for bi in 0..b {
                        let xb = &xv[bi * c * h * w..(bi + 1) * c * h * w];
                        let gb = &g.data[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gb[(oc * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - p;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - p;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            chunk[(ic * kh + ky) * kw + kx] += gv
                                                * xb[(ic * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                vec![(input.0, dx), (kernel.0, dk)]
            }),
        ))
    }

    /// `x: [B,C,H,W] + bias: [C]`, broadcast over batch and spatial dims.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        let sb = &self.values[bias.0].shape;
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", sx, sb),
            ));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let mut out = self.values[x.0].clone();
        for bi in 0..b {
            for ci in 0..c {
                let bv = self.values[bias.0].data[ci];
                for i in 0..hw {
                    out.data[(bi * c + ci) * hw + i] += bv;
                }
            }
        }
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut db = Tensor::zeros(&[c]);
                for bi in 0..b {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += g.data[(bi * c + ci) * hw + i];
                        }
                        db.data[ci] += acc;
                    }
                }
                vec![(x.0, g.clone()), (bias.0, db)]
            }),
        ))
    }

    /// Max pooling over each spatial window; gradient routed to the argmax
    /// position, first index in scan order on ties.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("{:?}: expected 4-d", sx)));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {} stride {} on {}x{} input", window, stride, h, w),
            ));
        }
        if (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {} stride {} does not tile {}x{}", window, stride, h, w),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        {
            let xv = &self.values[x.0].data;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let oidx = ((bi * c + ci) * oh + oy) * ow + ox;
                            out.data[oidx] = best;
                            argmax[oidx] = best_idx;
                        }
                    }
                }
            }
        }
        let total = b * c * h * w;
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dx = Tensor {
                    shape: vec![b, c, h, w],
                    data: vec![0.0; total],
                };
                for (oidx, &src) in argmax.iter().enumerate() {
                    dx.data[src] += g.data[oidx];
                }
                vec![(x.0, dx)]
            }),
        ))
    }

    /// Batch normalization over the leading (batch) axis per channel.
    /// 2-d input `[B,D]` treats each column as a channel; 4-d input
    /// `[B,C,H,W]` normalizes per channel over B·H·W. In train mode batch
    /// statistics are used and returned so the caller can update running
    /// stats; in eval mode the supplied running stats are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor, &Tensor)>,
        eps: f64,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let sx = self.values[x.0].shape.clone();
        let (b, c, hw) = match sx.len() {
            2 => (sx[0], sx[1], 1usize),
            4 => (sx[0], sx[1], sx[2] * sx[3]),
            _ => {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{:?}: expected 2-d or 4-d", sx),
                ))
            }
        };
        if self.values[gamma.0].len() != c || self.values[beta.0].len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must have {} channels", c),
            ));
        }
        let m = (b * hw) as f64;
        let four_d = sx.len() == 4;
        let idx = move |bi: usize, ci: usize, i: usize| {
            if four_d {
                (bi * c + ci) * hw + i
            } else {
                bi * c + ci
            }
        };
        let (mean, var, train) = match running {
            Some((rm, rv)) => (rm.data.clone(), rv.data.clone(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let xv = &self.values[x.0].data;
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        for i in 0..hw {
                            acc += xv[idx(bi, ci, i)];
                        }
                    }
                    mean[ci] = acc / m;
                    let mut vacc = 0.0;
                    for bi in 0..b {
                        for i in 0..hw {
                            let d = xv[idx(bi, ci, i)] - mean[ci];
                            vacc += d * d;
                        }
                    }
                    var[ci] = vacc / m;
                }
                (mean, var, true)
            }
        };
        let mut out = Tensor::zeros(&sx);
        let mut xhat = vec![0.0; self.values[x.0].len()];
        {
            let xv = &self.values[x.0].data;
            let gv = &self.values[gamma.0].data;
            let betav = &self.values[beta.0].data;
            for ci in 0..c {
                let inv_std = 1.0 / (var[ci] + eps).sqrt();
                for bi in 0..b {
                    for i in 0..hw {
                        let j = idx(bi, ci, i);
                        let xh = (xv[j] - mean[ci]) * inv_std;
                        xhat[j] = xh;
                        out.data[j] = gv[ci] * xh + betav[ci];
                    }
                }
            }
        }
        let stats = if train {
            Some((
                Tensor::from_vec(mean.clone()),
                Tensor::from_vec(var.clone()),
            ))
        } else {
            None
        };
        let sx2 = sx.clone();
        let out_var = self.push_op(
            Tensor {
                shape: sx.clone(),
                data: out.data,
            },
            Box::new(move |vals, g| {
                let gv = &vals[gamma.0].data;
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(&sx2);
                for ci in 0..c {
                    let inv_std = 1.0 / (var[ci] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        for i in 0..hw {
                            let j = idx(bi, ci, i);
                            sum_g += g.data[j];
                            sum_gx += g.data[j] * xhat[j];
                        }
                    }
                    dbeta.data[ci] = sum_g;
                    dgamma.data[ci] = sum_gx;
                    for bi in 0..b {
                        for i in 0..hw {
                            let j = idx(bi, ci, i);
                            dx.data[j] = if train {
                                gv[ci] * inv_std
                                    * (g.data[j] - sum_g / m - xhat[j] * sum_gx / m)
                            } else {
                                gv[ci] * inv_std * g.data[j]
                            };
                        }
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            }),
        );
        Ok((out_var, stats))
    }

    /// Global average over the spatial dims: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("{:?}: expected 4-d", sx),
            ));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                out.data[bi * c + ci] =
                    self.values[x.0].data[base..base + hw].iter().sum::<f64>() / hw as f64;
            }
        }
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dx = Tensor::zeros(&sx);
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g.data[bi * c + ci] / hw as f64;
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            dx.data[base + i] = gv;
                        }
                    }
                }
                vec![(x.0, dx)]
            }),
        ))
    }

    // ---- structural ops ----

    /// Column-wise concatenation of `[B, d_i]` parts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts"));
        }
        let b = self.values[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.values[p.0].shape;
            if s.len() != 2 || s[0] != b {
                return Err(Error::shape(
                    "concat_cols",
                    format!("part shape {:?}, expected [{}, _]", s, b),
                ));
            }
            widths.push(s[1]);
        }
        let d_total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[b, d_total]);
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &self.values[p.0].data;
            for bi in 0..b {
                out.data[bi * d_total + offset..bi * d_total + offset + w]
                    .copy_from_slice(&pv[bi * w..(bi + 1) * w]);
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut offset = 0;
                let mut res = Vec::with_capacity(ids.len());
                for (&id, &w) in ids.iter().zip(&widths) {
                    let mut dp = Tensor::zeros(&[b, w]);
                    for bi in 0..b {
                        dp.data[bi * w..(bi + 1) * w].copy_from_slice(
                            &g.data[bi * d_total + offset..bi * d_total + offset + w],
                        );
                    }
                    res.push((id, dp));
                    offset += w;
                }
                res
            }),
        ))
    }

    /// Gather columns `indices` of `x: [B, D]` into `[B, |indices|]`.
    pub fn gather_cols(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = &self.values[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::shape("gather_cols", format!("{:?}: expected 2-d", sx)));
        }
        let (b, d) = (sx[0], sx[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::invalid(
                "gather_cols",
                format!("index {} out of range for width {}", bad, d),
            ));
        }
        let m = indices.len();
        let mut out = Tensor::zeros(&[b, m]);
        for bi in 0..b {
            for (j, &col) in indices.iter().enumerate() {
                out.data[bi * m + j] = self.values[x.0].data[bi * d + col];
            }
        }
        let idx = indices.to_vec();
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dx = Tensor::zeros(&[b, d]);
                for bi in 0..b {
                    for (j, &col) in idx.iter().enumerate() {
                        dx.data[bi * d + col] += g.data[bi * m + j];
                    }
                }
                vec![(x.0, dx)]
            }),
        ))
    }

    /// Scatter parts into a `[B, d_total]` tensor at their assigned column
    /// positions; unassigned columns stay zero.
    pub fn scatter_cols(&mut self, parts: &[(Var, Vec<usize>)], d_total: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("scatter_cols", "no parts"));
        }
        let b = self.values[parts[0].0 .0].shape[0];
        for (p, idx) in parts {
            let s = &self.values[p.0].shape;
            if s.len() != 2 || s[0] != b || s[1] != idx.len() {
                return Err(Error::shape(
                    "scatter_cols",
                    format!("part shape {:?} vs {} indices", s, idx.len()),
                ));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= d_total) {
                return Err(Error::invalid(
                    "scatter_cols",
                    format!("index {} out of range for width {}", bad, d_total),
                ));
            }
        }
        let mut out = Tensor::zeros(&[b, d_total]);
        for (p, idx) in parts {
            let w = idx.len();
            let pv = &self.values[p.0].data;
            for bi in 0..b {
                for (j, &col) in idx.iter().enumerate() {
                    out.data[bi * d_total + col] = pv[bi * w + j];
                }
            }
        }
        let spec: Vec<(usize, Vec<usize>)> =
            parts.iter().map(|(p, idx)| (p.0, idx.clone())).collect();
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut res = Vec::with_capacity(spec.len());
                for (id, idx) in &spec {
                    let w = idx.len();
                    let mut dp = Tensor::zeros(&[b, w]);
                    for bi in 0..b {
                        for (j, &col) in idx.iter().enumerate() {
                            dp.data[bi * w + j] = g.data[bi * d_total + col];
                        }
                    }
                    res.push((*id, dp));
                }
                res
            }),
        ))
    }

    /// Slice `n_rows` rows starting at `start` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, n_rows: usize) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        if sx.is_empty() || start + n_rows > sx[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + n_rows, sx),
            ));
        }
        let rest: usize = sx[1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[0] = n_rows;
        let out = Tensor {
            shape: out_shape,
            data: self.values[x.0].data[start * rest..(start + n_rows) * rest].to_vec(),
        };
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dx = Tensor::zeros(&sx);
                dx.data[start * rest..(start + n_rows) * rest].copy_from_slice(&g.data);
                vec![(x.0, dx)]
            }),
        ))
    }

    /// Stack parts along axis 0 (all non-leading dims must match).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let tail: Vec<usize> = self.values[parts[0].0].shape[1..].to_vec();
        let rest: usize = tail.iter().product();
        let mut rows = 0;
        for p in parts {
            let s = &self.values[p.0].shape;
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("part shape {:?}, expected [_, {:?}]", s, tail),
                ));
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(rows * rest);
        for p in parts {
            data.extend_from_slice(&self.values[p.0].data);
        }
        let spec: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| (p.0, self.values[p.0].shape[0]))
            .collect();
        Ok(self.push_op(
            Tensor { shape, data },
            Box::new(move |_, g| {
                let mut res = Vec::with_capacity(spec.len());
                let mut offset = 0;
                for &(id, r) in &spec {
                    let mut shape = vec![r];
                    shape.extend_from_slice(&tail);
                    let dp = Tensor {
                        shape,
                        data: g.data[offset * rest..(offset + r) * rest].to_vec(),
                    };
                    res.push((id, dp));
                    offset += r;
                }
                res
            }),
        ))
    }

    /// Mean over the time axis of a time-major flattened tensor:
    /// `[T·B, rest] -> [B, rest]` where row `t·B + b` holds timestep t.
    pub fn mean_over_time(&mut self, x: Var, t_steps: usize) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        if t_steps == 0 || sx.is_empty() || sx[0] % t_steps != 0 {
            return Err(Error::shape(
                "mean_over_time",
                format!("{:?} not divisible into {} timesteps", sx, t_steps),
            ));
        }
        let b = sx[0] / t_steps;
        let rest: usize = sx[1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[0] = b;
        let mut out = Tensor::zeros(&out_shape);
        {
            let xv = &self.values[x.0].data;
            for t in 0..t_steps {
                for bi in 0..b {
                    let src = (t * b + bi) * rest;
                    let dst = bi * rest;
                    for i in 0..rest {
                        out.data[dst + i] += xv[src + i];
                    }
                }
            }
            for v in out.data.iter_mut() {
                *v /= t_steps as f64;
            }
        }
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut dx = Tensor::zeros(&sx);
                let scale = 1.0 / t_steps as f64;
                for t in 0..t_steps {
                    for bi in 0..b {
                        let dst = (t * b + bi) * rest;
                        let src = bi * rest;
                        for i in 0..rest {
                            dx.data[dst + i] = g.data[src + i] * scale;
                        }
                    }
                }
                vec![(x.0, dx)]
            }),
        ))
    }

    /// L2-normalize each row of `x: [B,D]`, with an epsilon guard on
    /// (near-)zero rows.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sx = &self.values[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::shape(
                "normalize_rows",
                format!("{:?}: expected 2-d", sx),
            ));
        }
        let (b, d) = (sx[0], sx[1]);
        let mut out = Tensor::zeros(&[b, d]);
        let mut norms = vec![0.0; b];
        {
            let xv = &self.values[x.0].data;
            for bi in 0..b {
                let row = &xv[bi * d..(bi + 1) * d];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                norms[bi] = n;
                for j in 0..d {
                    out.data[bi * d + j] = row[j] / n;
                }
            }
        }
        let out_id = self.values.len();
        let v = self.push_op(
            out,
            Box::new(move |vals, g| {
                let y = &vals[out_id].data;
                let mut dx = Tensor::zeros(&[b, d]);
                for bi in 0..b {
                    let n = norms[bi];
                    let yr = &y[bi * d..(bi + 1) * d];
                    let gr = &g.data[bi * d..(bi + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data[bi * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![(x.0, dx)]
            }),
        );
        debug_assert_eq!(v.0, out_id);
        Ok(v)
    }

    /// Mean over the batch of −log softmax at the true class.
    pub fn ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = &self.values[logits.0].shape;
        if sl.len() != 2 {
            return Err(Error::shape("ce_loss", format!("{:?}: expected 2-d", sl)));
        }
        let (b, k) = (sl[0], sl[1]);
        if b == 0 {
            return Err(Error::invalid("ce_loss", "empty batch"));
        }
        if labels.len() != b {
            return Err(Error::shape(
                "ce_loss",
                format!("{} labels for batch {}", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "ce_loss",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        {
            let lv = &self.values[logits.0].data;
            for bi in 0..b {
                let row = &lv[bi * k..(bi + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..k {
                    let e = (row[j] - mx).exp();
                    probs[bi * k + j] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[bi * k + j] /= z;
                }
                total -= probs[bi * k + labels[bi]].ln();
            }
        }
        let labels = labels.to_vec();
        Ok(self.push_op(
            Tensor::scalar(total / b as f64),
            Box::new(move |_, g| {
                let gs = g.item() / b as f64;
                let mut dl = Tensor::zeros(&[b, k]);
                for bi in 0..b {
                    for j in 0..k {
                        let onehot = if labels[bi] == j { 1.0 } else { 0.0 };
                        dl.data[bi * k + j] = gs * (probs[bi * k + j] - onehot);
                    }
                }
                vec![(logits.0, dl)]
            }),
        ))
    }
}

/// Central finite-difference gradient check of a scalar-valued tensor
/// function at the given points. Returns the worst-case relative error
/// between the autodiff gradient and `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).expect("grad_check loss must be scalar");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();

    let eval = |pts: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let mut worst = 0.0f64;
    for (pi, point) in points.iter().enumerate() {
        for j in 0..point.len() {
            let mut plus = points.to_vec();
            plus[pi].data[j] += h;
            let mut minus = points.to_vec();
            minus[pi].data[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = analytic[pi].data[j];
            let denom = ad.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("inner dimensions"), "{}", err);
    }

    #[test]
    fn matmul_gradcheck() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let c = t.matmul(vs[0], vs[1]).unwrap();
                // nonlinear reduction so the gradient is input-dependent
                let sq = t.mul(c, c).unwrap();
                t.sum(sq)
            },
            &[a, b],
            1e-4,
        );
        assert!(err < 1e-4, "max rel error {}", err);
    }

    #[test]
    fn conv2d_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data, vec![9.0]);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut t = Tape::new();
        let mut r = rng(2);
        let x = t.leaf(Tensor::uniform(&[2, 3, 5, 5], 1.0, &mut r));
        let k = t.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        let y = t.conv2d(x, k, 1, 1).unwrap();
        assert!(t.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_partial_window_dropped() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let k = t.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let y = t.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        let k3 = t.leaf(Tensor::zeros(&[1, 1, 7, 7]));
        assert!(t.conv2d(x, k3, 1, 0).is_err());
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut r);
        let k = Tensor::uniform(&[4, 3, 3, 3], 0.5, &mut r);
        let err = grad_check(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], 1, 1).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[x, k],
            1e-4,
        );
        assert!(err < 1e-4, "max rel error {}", err);
    }

    #[test]
    fn maxpool_basic_and_tiebreak() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(t.value(y).data, vec![4.0]);

        // constant input: gradient goes to the first tied index
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = t.maxpool2d(x, 2, 2).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_too_large_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        let mut t = Tape::new();
        // per-channel mean 0, var 1
        let x = t.leaf(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        let g = t.leaf(Tensor::from_vec(vec![1.0]));
        let b = t.leaf(Tensor::from_vec(vec![0.0]));
        let (y, stats) = t.batch_norm(x, g, b, None, 1e-5).unwrap();
        assert!(stats.is_some());
        for (a, e) in t.value(y).data.iter().zip([1.0, -1.0]) {
            assert!((a - e).abs() < 1e-4, "{} vs {}", a, e);
        }
    }

    #[test]
    fn batch_norm_constant_channel_zeroed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3, 2], 5.0));
        let g = t.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let b = t.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let (y, _) = t.batch_norm(x, g, b, None, 1e-5).unwrap();
        assert!(t.value(y).data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_gradcheck() {
        let mut r = rng(4);
        let x = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r);
        let g = Tensor::uniform(&[3], 1.0, &mut r);
        let b = Tensor::uniform(&[3], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let (y, _) = t.batch_norm(vs[0], vs[1], vs[2], None, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[x, g, b],
            1e-4,
        );
        assert!(err < 1e-4, "max rel error {}", err);
    }

    #[test]
    fn concat_cols_order_and_grad() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(
            t.value(c).data,
            vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data, vec![1.0; 4]);
        assert_eq!(t.grad(b).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn concat_cols_single_part_identity() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.value(c).data, t.value(a).data);
    }

    #[test]
    fn concat_cols_batch_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.concat_cols(&[a, b]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 4]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![1.0; 12]);
    }

    #[test]
    fn backward_dot_product() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = t.leaf(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![4.0, 5.0, 6.0]);
        assert_eq!(t.grad(y).unwrap().data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![2.0, 2.0]);
    }

    #[test]
    fn backward_is_linear_in_loss() {
        let run = |a: f64, b: f64| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(vec![0.5, -0.3, 0.9]));
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq);
            let sig = t.sigmoid(x);
            let l2 = t.sum(sig);
            let l1s = t.scale(l1, a);
            let l2s = t.scale(l2, b);
            let l = t.add(l1s, l2s).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().data.clone()
        };
        let g10 = run(1.0, 0.0);
        let g01 = run(0.0, 1.0);
        let g23 = run(2.0, 3.0);
        for i in 0..3 {
            assert!((g23[i] - (2.0 * g10[i] + 3.0 * g01[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || {
            let mut t = Tape::new();
            let mut r = rng(9);
            let x = t.leaf(Tensor::uniform(&[4, 6], 1.0, &mut r));
            let w = t.leaf(Tensor::uniform(&[6, 3], 1.0, &mut r));
            let y = t.matmul(x, w).unwrap();
            let s = t.sigmoid(y);
            let l = t.sum(s);
            t.backward(l).unwrap();
            (t.grad(x).unwrap().data.clone(), t.grad(w).unwrap().data.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn composite_graph_gradcheck() {
        let mut r = rng(5);
        let x = Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut r);
        let k = Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut r);
        let g = Tensor::uniform(&[3], 1.0, &mut r);
        let b = Tensor::uniform(&[3], 1.0, &mut r);
        let w = Tensor::uniform(&[3 * 3 * 3, 4], 0.5, &mut r);
        let err = grad_check(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], 1, 1).unwrap();
                let (y, _) = t.batch_norm(y, vs[2], vs[3], None, 1e-5).unwrap();
                let y = t.sigmoid(y);
                let y = t.maxpool2d(y, 2, 2).unwrap();
                let y = t.reshape(y, vec![2, 3 * 3 * 3]).unwrap();
                let y = t.matmul(y, vs[4]).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[x, k, g, b, w],
            1e-4,
        );
        assert!(err < 1e-4, "max rel error {}", err);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
        let err = grad_check(
            |t, vs| {
                let y = t.scale(vs[0], 3.0);
                t.sum(y)
            },
            &[x],
            1e-3,
        );
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn grad_check_quadratic_at_zero() {
        let x = Tensor::zeros(&[3]);
        let err = grad_check(
            |t, vs| {
                let sq = t.mul(vs[0], vs[0]).unwrap();
                t.sum(sq)
            },
            &[x],
            1e-3,
        );
        assert!(err < 1e-10, "{}", err);
    }

    #[test]
    fn grad_check_sigmoid_chain() {
        let x = Tensor::from_vec(vec![0.2, -0.4, 0.6, 1.2]);
        let err = grad_check(
            |t, vs| {
                let a = t.sigmoid(vs[0]);
                let b = t.sigmoid(a);
                t.sum(b)
            },
            &[x],
            1e-3,
        );
        assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let mut r = rng(6);
        let x = Tensor::uniform(&[3, 6], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let a = t.gather_cols(vs[0], &[0, 2, 4]).unwrap();
                let b = t.gather_cols(vs[0], &[1, 3, 5]).unwrap();
                let y = t
                    .scatter_cols(&[(a, vec![0, 2, 4]), (b, vec![1, 3, 5])], 6)
                    .unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[x],
            1e-4,
        );
        assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn normalize_rows_unit_norm_and_gradcheck() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = t.normalize_rows(x, 1e-8).unwrap();
        assert!((t.value(y).data[0] - 0.6).abs() < 1e-12);
        assert!((t.value(y).data[1] - 0.8).abs() < 1e-12);

        let mut r = rng(7);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let y = t.normalize_rows(vs[0], 1e-8).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &[x],
            1e-4,
        );
        assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn ce_loss_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::zeros(&[4, 10]));
        let l = t.ce_loss(logits, &[0, 3, 5, 9]).unwrap();
        assert!((t.value(l).item() - (10.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn ce_loss_confident_correct_near_zero() {
        let mut t = Tape::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data[3] = 100.0;
        let v = t.leaf(logits);
        let l = t.ce_loss(v, &[3]).unwrap();
        assert!(t.value(l).item() < 1e-6);
    }

    #[test]
    fn ce_loss_permutation_invariant() {
        let mut t = Tape::new();
        let logits = Tensor::new(vec![1, 3], vec![0.3, 1.2, -0.5]).unwrap();
        let v = t.leaf(logits);
        let l = t.ce_loss(v, &[1]).unwrap();
        let base = t.value(l).item();

        let mut t2 = Tape::new();
        let permuted = Tensor::new(vec![1, 3], vec![1.2, -0.5, 0.3]).unwrap();
        let v2 = t2.leaf(permuted);
        let l2 = t2.ce_loss(v2, &[0]).unwrap();
        assert!((base - t2.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_empty_batch_rejected() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::zeros(&[0, 10]));
        assert!(t.ce_loss(v, &[]).is_err());
    }

    #[test]
    fn ce_loss_gradcheck() {
        let mut r = rng(8);
        let logits = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let err = grad_check(
            |t, vs| t.ce_loss(vs[0], &[1, 0, 4]).unwrap(),
            &[logits],
            1e-4,
        );
        assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn mean_over_time_spreads_gradient() {
        let mut r = rng(10);
        let x = Tensor::uniform(&[4 * 2, 3], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let y = t.mean_over_time(vs[0], 4).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[x],
            1e-4,
        );
        assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn slice_concat_rows_gradcheck() {
        let mut r = rng(11);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut r);
        let err = grad_check(
            |t, vs| {
                let a = t.slice_rows(vs[0], 0, 2).unwrap();
                let b = t.slice_rows(vs[0], 2, 4).unwrap();
                let y = t.concat_rows(&[b, a]).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &[x],
            1e-4,
        );
        assert!(err < 1e-4, "{}", err);
    }
}
