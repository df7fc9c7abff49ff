use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear tap for one coordinate on an axis of length `size`.
///
/// Coordinates are clamped to `[0, size - 1]`; a clamped coordinate has
/// zero derivative.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    live: bool,
}

fn tap(coord: f64, size: usize) -> Tap {
    let max = (size - 1) as f64;
    let (c, live) = if coord < 0.0 {
        (0.0, false)
    } else if coord > max {
        (max, false)
    } else {
        (coord, true)
    };
    if size == 1 {
        return Tap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            live,
        };
    }
    let lo = (c.floor() as usize).min(size - 2);
    Tap {
        lo,
        hi: lo + 1,
        frac: c - lo as f64,
        live,
    }
}

struct BilinearSample {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Backward for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (f, coords, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let (n, c, h, w, oh, ow) = (self.n, self.c, self.h, self.w, self.oh, self.ow);
        let plane = oh * ow;
        let mut gf = vec![0.0; f.len()];
        let mut gc = vec![0.0; coords.len()];
        for b in 0..n {
            for p in 0..plane {
                let ty = tap(coords[(b * 2) * plane + p], h);
                let tx = tap(coords[(b * 2 + 1) * plane + p], w);
                let (wy1, wx1) = (ty.frac, tx.frac);
                let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                let mut dy = 0.0;
                let mut dx = 0.0;
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let go = g[(b * c + ch) * plane + p];
                    if go == 0.0 {
                        continue;
                    }
                    let i00 = base + ty.lo * w + tx.lo;
                    let i01 = base + ty.lo * w + tx.hi;
                    let i10 = base + ty.hi * w + tx.lo;
                    let i11 = base + ty.hi * w + tx.hi;
                    gf[i00] += go * wy0 * wx0;
                    gf[i01] += go * wy0 * wx1;
                    gf[i10] += go * wy1 * wx0;
                    gf[i11] += go * wy1 * wx1;
                    dy += go * (wx0 * (f[i10] - f[i00]) + wx1 * (f[i11] - f[i01]));
                    dx += go * (wy0 * (f[i01] - f[i00]) + wy1 * (f[i11] - f[i10]));
                }
                if ty.live {
                    gc[(b * 2) * plane + p] = dy;
                }
                if tx.live {
                    gc[(b * 2 + 1) * plane + p] = dx;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gf)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gc)),
        ]
    }
}

impl Tape {
    /// Samples an N×C×H×W `feature` at the absolute pixel positions in
    /// `coords` (N×2×Ho×Wo, channel 0 = row, channel 1 = column).
    /// Differentiable w.r.t. both arguments.
    pub fn bilinear_sample(&self, feature: Var, coords: Var) -> Result<Var> {
        let f = self.value(feature);
        let cd = self.value(coords);
        let fs = f.shape();
        let cs = cd.shape();
        if fs.len() != 4 || cs.len() != 4 || cs[0] != fs[0] || cs[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: fs.to_vec(),
                rhs: cs.to_vec(),
            });
        }
        if !cd.is_finite() {
            return Err(Error::NonFinite {
                op: "bilinear_sample",
            });
        }
        let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let (oh, ow) = (cs[2], cs[3]);
        if h == 0 || w == 0 {
            return Err(Error::invalid("bilinear_sample: empty feature map"));
        }
        let plane = oh * ow;
        let (fd, cdd) = (f.data(), cd.data());
        let mut out = vec![0.0; n * c * plane];
        for b in 0..n {
            for p in 0..plane {
                let ty = tap(cdd[(b * 2) * plane + p], h);
                let tx = tap(cdd[(b * 2 + 1) * plane + p], w);
                let (wy1, wx1) = (ty.frac, tx.frac);
                let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let v = wy0 * (wx0 * fd[base + ty.lo * w + tx.lo] + wx1 * fd[base + ty.lo * w + tx.hi])
                        + wy1 * (wx0 * fd[base + ty.hi * w + tx.lo] + wx1 * fd[base + ty.hi * w + tx.hi]);
                    out[(b * c + ch) * plane + p] = v;
                }
            }
        }
        self.record(
            &[feature, coords],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            BilinearSample { n, c, h, w, oh, ow },
        )
    }
}
