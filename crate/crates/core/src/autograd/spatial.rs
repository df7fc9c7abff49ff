use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Corner-aligned source position of output index `i`.
fn source(i: usize, out: usize, size: usize) -> f64 {
    if out == 1 {
        0.0
    } else {
        i as f64 * (size - 1) as f64 / (out - 1) as f64
    }
}

/// Interpolation taps `(lo, hi, frac)` along one axis.
fn taps(out: usize, size: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let s = source(i, out, size);
            match mode {
                ResizeMode::Nearest => {
                    let k = (s + 0.5).floor() as usize;
                    let k = k.min(size - 1);
                    (k, k, 0.0)
                }
                ResizeMode::Bilinear => {
                    let lo = (s.floor() as usize).min(size - 1);
                    let hi = (lo + 1).min(size - 1);
                    (lo, hi, s - lo as f64)
                }
            }
        })
        .collect()
}

struct Resize {
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
    nc: usize,
    h: usize,
    w: usize,
}

impl Backward for Resize {
    fn name(&self) -> &'static str {
        "resize"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let g = grad.data();
        let mut gi = vec![0.0; inputs[0].numel()];
        for p in 0..self.nc {
            let src = p * self.h * self.w;
            let dst = p * oh * ow;
            for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let go = g[dst + oy * ow + ox];
                    gi[src + y0 * self.w + x0] += go * (1.0 - fy) * (1.0 - fx);
                    gi[src + y0 * self.w + x1] += go * (1.0 - fy) * fx;
                    gi[src + y1 * self.w + x0] += go * fy * (1.0 - fx);
                    gi[src + y1 * self.w + x1] += go * fy * fx;
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gi))]
    }
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let mut gi = vec![0.0; inputs[0].numel()];
        for (&src, g) in self.argmax.iter().zip(grad.data()) {
            gi[src] += g;
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gi))]
    }
}

fn dims(tape: &Tape, v: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(v);
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected N×C×H×W, got {s:?}"),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl Tape {
    /// Resizes the spatial dims with a corner-aligned grid, so resizing to
    /// the same size is the identity.
    pub fn resize(&self, t: Var, target: (usize, usize), mode: ResizeMode) -> Result<Var> {
        self.check(t)?;
        let [n, c, h, w] = dims(self, t, "resize")?;
        let (oh, ow) = target;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "resize",
                msg: format!("cannot resize {h}x{w} to {oh}x{ow}"),
            });
        }
        let ty = taps(oh, h, mode);
        let tx = taps(ow, w, mode);
        let x = self.value(t);
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    dst[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
        self.record(
            &[t],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Resize {
                ty,
                tx,
                nc: n * c,
                h,
                w,
            },
        )
    }

    /// Max pooling without padding. Gradient goes to the first maximal
    /// element in row-major order.
    pub fn maxpool(&self, t: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(t)?;
        let [n, c, h, w] = dims(self, t, "maxpool")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::InvalidShape {
                op: "maxpool",
                msg: format!("kernel {kernel} stride {stride} on {h}x{w}"),
            });
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let x = self.value(t);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.record(
            &[t],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            MaxPool { argmax },
        )
    }
}
