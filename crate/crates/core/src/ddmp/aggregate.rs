//! Depth-weighted aggregation of sampled nodes for one scale:
//!
//! `out[n,c,y,x] = Σ_k A[n,k,y,x] · S[n,c,k,y,x] · W[n,k·G + c/(C/G),y,x]`

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    k: usize,
    g: usize,
    plane: usize,
}

impl Dims {
    fn group(&self, ch: usize) -> usize {
        ch / (self.c / self.g)
    }
}

struct AggregateSlots {
    dims: Dims,
}

impl Backward for AggregateSlots {
    fn name(&self) -> &'static str {
        "aggregate_slots"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let Dims { n, c, k, g, plane } = self.dims;
        let (s, a, w, go) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), grad.data());
        let mut gs = vec![0.0; s.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gw = vec![0.0; w.len()];
        for b in 0..n {
            for ch in 0..c {
                let grp = self.dims.group(ch);
                let gplane = &go[(b * c + ch) * plane..][..plane];
                for j in 0..k {
                    let s_off = ((b * c + ch) * k + j) * plane;
                    let a_off = (b * k + j) * plane;
                    let w_off = (b * k * g + j * g + grp) * plane;
                    for p in 0..plane {
                        let gv = gplane[p];
                        let (av, sv, wv) = (a[a_off + p], s[s_off + p], w[w_off + p]);
                        gs[s_off + p] = gv * av * wv;
                        ga[a_off + p] += gv * sv * wv;
                        gw[w_off + p] += gv * av * sv;
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gs)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), ga)),
            Some(Tensor::from_parts(inputs[2].shape().to_vec(), gw)),
        ]
    }
}

/// `sampled`: N×C×K×H×W, `affinity`: N×K×H×W, `filter`: N×(K·G)×H×W.
pub fn aggregate_slots(
    tape: &Tape,
    sampled: Var,
    affinity: Var,
    filter: Var,
    groups: usize,
) -> Result<Var> {
    let ss = tape.shape(sampled);
    let sa = tape.shape(affinity);
    let sw = tape.shape(filter);
    if ss.len() != 5 {
        return Err(Error::InvalidShape {
            op: "aggregate_slots",
            msg: format!("sampled nodes must be N×C×K×H×W, got {ss:?}"),
        });
    }
    let (n, c, k, h, w) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidShape {
            op: "aggregate_slots",
            msg: format!("{groups} filter groups do not divide {c} channels"),
        });
    }
    if sa != [n, k, h, w] {
        return Err(Error::ShapeMismatch {
            op: "aggregate_slots affinity",
            lhs: vec![n, k, h, w],
            rhs: sa,
        });
    }
    if sw != [n, k * groups, h, w] {
        return Err(Error::ShapeMismatch {
            op: "aggregate_slots filter",
            lhs: vec![n, k * groups, h, w],
            rhs: sw,
        });
    }
    let dims = Dims {
        n,
        c,
        k,
        g: groups,
        plane: h * w,
    };
    let (st, at, wt) = (tape.value(sampled), tape.value(affinity), tape.value(filter));
    let (s, a, wf) = (st.data(), at.data(), wt.data());
    let plane = h * w;
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let grp = dims.group(ch);
            let oplane = &mut out[(b * c + ch) * plane..][..plane];
            for j in 0..k {
                let s_off = ((b * c + ch) * k + j) * plane;
                let a_off = (b * k + j) * plane;
                let w_off = (b * k * groups + j * groups + grp) * plane;
                for (p, o) in oplane.iter_mut().enumerate() {
                    *o += a[a_off + p] * s[s_off + p] * wf[w_off + p];
                }
            }
        }
    }
    tape.record(
        &[sampled, affinity, filter],
        Tensor::from_parts(vec![n, c, h, w], out),
        AggregateSlots { dims },
    )
}
