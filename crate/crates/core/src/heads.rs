//! Occupancy decoder and per-voxel prediction heads.

use std::rc::Rc;

use crate::encoders::VoxelFeatureGrid;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{init_weight, Ctx, Linear};
use crate::numerics::{ParamStore, Rng, Var};

/// One 3D transposed convolution whose kernel equals its stride, so every
/// input cell writes its own disjoint `sx×sy×sz` output block.
#[derive(Debug, Clone, Copy)]
pub struct TransposedConv3d {
    pub stride: [usize; 3],
    pub din: usize,
    pub dout: usize,
    /// Weight `[din × (sx·sy·sz·dout)]` plus bias `[dout]` applied to every output.
    pub lin: Linear,
}

impl TransposedConv3d {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, stride: [usize; 3], rng: &mut Rng) -> Result<Self> {
        if stride.contains(&0) {
            return Err(invalid("TransposedConv3d::new", "stride must be positive"));
        }
        let sub: usize = stride.iter().product();
        let w = init_weight(rng, din, sub * dout, 1.0);
        let lin = Linear::with_weight(store, &format!("{name}.kernel"), w, false)?;
        let bias = store.add(format!("{name}.bias"), crate::numerics::Tensor::zeros(&[dout]))?;
        Ok(Self {
            stride,
            din,
            dout,
            lin: Linear { bias: Some(bias), ..lin },
        })
    }

    /// `x[H×W×Z×din]` → `[sx·H × sy·W × sz·Z × dout]`.
    pub fn forward<'t>(&self, cx: Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.din {
            return Err(shape_err("transposed_conv3d", &s, &[self.din]));
        }
        let [sx, sy, sz] = self.stride;
        let (h, w, z) = (s[0], s[1], s[2]);
        let sub = sx * sy * sz;
        let n = h * w * z;
        let rows = x.reshape(&[n, self.din])?;
        let blocks = rows.matmul(&cx.p(self.lin.weight))?.reshape(&[n * sub, self.dout])?;
        let (oh, ow, oz) = (h * sx, w * sy, z * sz);
        let mut order = Vec::with_capacity(n * sub);
        for oi in 0..oh {
            for oj in 0..ow {
                for ok in 0..oz {
                    let src = ((oi / sx) * w + oj / sy) * z + ok / sz;
                    let off = ((oi % sx) * sy + oj % sy) * sz + ok % sz;
                    order.push(src * sub + off);
                }
            }
        }
        let out = blocks.gather_rows(&order)?;
        let out = match self.lin.bias {
            Some(b) => out.add_row(&cx.p(b))?,
            None => out,
        };
        out.reshape(&[oh, ow, oz, self.dout])
    }
}

/// Three transposed-convolution stages, ×4 in `H` and `W`, ×2 in `Z`.
#[derive(Debug, Clone)]
pub struct UpsampleDecoder {
    pub stages: Vec<TransposedConv3d>,
}

pub const DECODER_STRIDES: [[usize; 3]; 3] = [[2, 2, 1], [2, 2, 1], [1, 1, 2]];

impl UpsampleDecoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d0: usize, rng: &mut Rng) -> Result<Self> {
        let mut stages = Vec::with_capacity(3);
        let mut din = d_in;
        for (i, stride) in DECODER_STRIDES.into_iter().enumerate() {
            stages.push(TransposedConv3d::new(store, &format!("{name}.stage{i}"), din, d0, stride, rng)?);
            din = d0;
        }
        Ok(Self { stages })
    }

    pub fn factors(&self) -> [usize; 3] {
        let mut f = [1; 3];
        for s in &self.stages {
            (0..3).for_each(|a| f[a] *= s.stride[a]);
        }
        f
    }

    /// ReLU between stages; the last stage is linear.
    pub fn forward<'t>(&self, cx: Ctx<'t>, v: &VoxelFeatureGrid<'t>) -> Result<Var<'t>> {
        let mut x = v.features;
        for (i, s) in self.stages.iter().enumerate() {
            x = s.forward(cx, &x)?;
            if i + 1 < self.stages.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Pointwise `linear → softplus → linear`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SegmentationHead {
    pub fn new(store: &mut ParamStore, name: &str, d0: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d0, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, classes, true, rng)?,
        })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, feats: &Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(cx, &self.fc1.forward(cx, feats)?.softplus())
    }
}

/// Flattens `[... × K]` to `[N × K]`.
pub fn flatten_rows<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let k = *s.last().expect("non-empty");
    x.reshape(&[s.iter().product::<usize>() / k, k])
}

/// Picks `x[r, idx[r]]` for every row of `[N × K]`.
pub fn pick<'t>(x: &Var<'t>, idx: &[usize]) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, k) = (s[0], s[1]);
    if idx.len() != n {
        return Err(shape_err("pick", &s, &[idx.len()]));
    }
    if let Some(&bad) = idx.iter().find(|&&c| c >= k) {
        return Err(invalid("pick", format!("class {bad} out of range for {k} logits")));
    }
    let flat: Vec<usize> = idx.iter().enumerate().map(|(r, &c)| r * k + c).collect();
    x.gather(Rc::new(flat), &[n])
}
