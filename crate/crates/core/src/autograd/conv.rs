use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvOptions {
    /// Zero padding that keeps the spatial size at stride 1 for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: ConvOptions,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], opts: ConvOptions) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let g = opts.groups;
        if g == 0 || opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::invalid("conv2d: stride, dilation and groups must be positive"));
        }
        if cin % g != 0 || cout % g != 0 || cg * g != cin {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!(
                    "input channels {cin} / weight {weight:?} incompatible with {g} groups"
                ),
            });
        }
        let span = |size: usize, k: usize| -> Option<usize> {
            let padded = size + 2 * opts.padding;
            let reach = opts.dilation * (k - 1) + 1;
            (padded >= reach).then(|| (padded - reach) / opts.stride + 1)
        };
        let (Some(oh), Some(ow)) = (span(h, kh), span(w, kw)) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("zero-size output for input {input:?} and kernel {kh}x{kw}"),
            });
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            opts,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + offset` lies in
    /// `0..w`, where `offset = kx*dilation - padding`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize, isize) {
        let off = (k * self.opts.dilation) as isize - self.opts.padding as isize;
        let s = self.opts.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((size as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, out as isize);
        (lo as usize, (hi.max(lo as isize)) as usize, off)
    }
}

struct Conv2d {
    geo: Geometry,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let g = &self.geo;
        let (x, wt, go) = (inputs[0].data(), inputs[1].data(), grad.data());
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        let groups = g.opts.groups;
        let cin_g = g.cin / groups;
        let cout_g = g.cout / groups;
        let s = g.opts.stride;
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                let go_plane = &go[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    let x_base = (n * g.cin + ic) * g.h * g.w;
                    for ky in 0..g.kh {
                        let (oy_lo, oy_hi, offy) = g.valid_range(ky, g.h, g.oh);
                        for kx in 0..g.kw {
                            let (ox_lo, ox_hi, offx) = g.valid_range(kx, g.w, g.ow);
                            let widx = ((oc * cin_g + icg) * g.kh + ky) * g.kw + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = (oy * s) as isize + offy;
                                let row = x_base + iy as usize * g.w;
                                let grow = &go_plane[oy * g.ow..(oy + 1) * g.ow];
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    let gv = grow[ox];
                                    acc += gv * x[row + ix];
                                    gx[row + ix] += gv * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        let mut out = vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
        ];
        if self.has_bias {
            let mut gb = vec![0.0; g.cout];
            for n in 0..g.n {
                for (oc, b) in gb.iter_mut().enumerate() {
                    let start = (n * g.cout + oc) * g.oh * g.ow;
                    *b += go[start..start + g.oh * g.ow].iter().sum::<f64>();
                }
            }
            out.push(Some(Tensor::from_parts(vec![g.cout], gb)));
        }
        out
    }
}

fn conv_forward(geo: &Geometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let g = geo;
    let groups = g.opts.groups;
    let cin_g = g.cin / groups;
    let cout_g = g.cout / groups;
    let s = g.opts.stride;
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o_plane = &mut out[(n * g.cout + oc) * plane..][..plane];
            if let Some(b) = bias {
                o_plane.fill(b[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let x_base = (n * g.cin + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi, offy) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi, offx) = g.valid_range(kx, g.w, g.ow);
                        let wv = wt[((oc * cin_g + icg) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + offy) as usize;
                            let row = &x[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                            let orow = &mut o_plane[oy * g.ow..(oy + 1) * g.ow];
                            if s == 1 {
                                let start = (ox_lo as isize + offx) as usize;
                                let len = ox_hi - ox_lo;
                                for (o, &v) in orow[ox_lo..ox_hi].iter_mut().zip(&row[start..start + len]) {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    orow[ox] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Tape {
    /// 2-D cross-correlation of an N×Cin×H×W input with a
    /// Cout×(Cin/groups)×kh×kw weight and optional Cout bias.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geo = Geometry::new(x.shape(), w.shape(), opts)?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geo.cout] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![geo.cout],
                        rhs: bt.shape().to_vec(),
                    });
                }
                Some(bt)
            }
            None => None,
        };
        let out = conv_forward(&geo, x.data(), w.data(), b.as_ref().map(|t| t.data()));
        let shape = vec![geo.n, geo.cout, geo.oh, geo.ow];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            &inputs,
            Tensor::from_parts(shape, out),
            Conv2d {
                geo,
                has_bias: bias.is_some(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop summation with explicit bounds checks.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, o: ConvOptions) -> Tensor {
        let [n, _, h, wd] = x.dims4().unwrap();
        let [cout, cg, kh, kw] = w.dims4().unwrap();
        let p = o.padding as isize;
        let oh = (h + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
        let ow = (wd + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
        let cout_g = cout / o.groups;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b_ in 0..n {
            for oc in 0..cout {
                let grp = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cg {
                            let ic = grp * cg + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * o.stride + ky * o.dilation) as isize - p;
                                    let ix = (ox * o.stride + kx * o.dilation) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at4(oc, icg, ky, kx) * x.at4(b_, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out[((b_ * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w));
        let y = tape.conv2d(xv, wv, None, ConvOptions::default()).unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 5, 5]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.value(tape.conv2d(x, w, None, ConvOptions::same(3, 1)).unwrap());
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.at4(0, 0, 2, 2), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn strided_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let opts = ConvOptions::same(3, 1).with_stride(2);
        let tape = Tape::new();
        let y = tape
            .conv2d(tape.leaf(x.clone()), tape.leaf(w.clone()), None, opts)
            .unwrap();
        let want = conv_oracle(&x, &w, None, opts);
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn all_option_combinations_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            for dilation in [1, 2] {
                for groups in [1, 2] {
                    for (k, size) in [(3usize, 8usize), (1, 7), (3, 5)] {
                        let x = Tensor::uniform(&[2, 4, size, size], -1.0, 1.0, &mut rng);
                        let w = Tensor::uniform(&[4, 4 / groups, k, k], -1.0, 1.0, &mut rng);
                        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
                        let opts = ConvOptions::same(k, dilation)
                            .with_stride(stride)
                            .with_groups(groups);
                        let tape = Tape::new();
                        let y = tape
                            .conv2d(
                                tape.leaf(x.clone()),
                                tape.leaf(w.clone()),
                                Some(tape.leaf(b.clone())),
                                opts,
                            )
                            .unwrap();
                        let want = conv_oracle(&x, &w, Some(&b), opts);
                        assert_eq!(tape.shape(y), want.shape());
                        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12, "{opts:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, dilation, groups) in [(1, 1, 1), (2, 1, 2), (1, 2, 1), (2, 2, 2)] {
            let x = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[2, 4 / groups, 3, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
            let opts = ConvOptions::same(3, dilation)
                .with_stride(stride)
                .with_groups(groups);
            let probe = Tensor::uniform(&[1, 2, 6 / stride, 6 / stride], -1.0, 1.0, &mut rng);
            let report = gradcheck(
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], Some(v[2]), opts)?;
                    tape.weighted_sum(y, &probe)
                },
                &[x, w, b],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "{opts:?} {report:?}");
        }
    }

    #[test]
    fn channel_group_mismatch() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 3, 3, 3]));
        let err = tape
            .conv2d(x, w, None, ConvOptions::same(3, 1).with_groups(2))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn zero_size_output() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, ConvOptions::default()).is_err());
    }
}
