//! Single-head deformable attention.
//!
//! A query predicts `P` offsets (in cells) around a reference point and a
//! softmax weight per offset. The value map `[H×W×d_v]` is bilinearly sampled
//! at `ref + Δp` with `x` running along width and `y` along height, samples
//! are mixed by the weights and projected to `d_out`.

use crate::error::{invalid, shape_err, Result};
use crate::nn::{init_weight, Ctx};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct DeformAttnHead {
    pub num_points: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub d_out: usize,
    pub offset_proj: ParamId,
    pub weight_proj: ParamId,
    pub value_proj: ParamId,
}

/// Initial scales of the three projections.
#[derive(Debug, Clone, Copy)]
pub struct DeformAttnInit {
    pub offset_std: f64,
    pub weight_gain: f64,
    pub value_gain: f64,
}

impl Default for DeformAttnInit {
    fn default() -> Self {
        Self {
            offset_std: 0.1,
            weight_gain: 1.0,
            value_gain: 1.0,
        }
    }
}

impl DeformAttnHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (d_q, d_v, d_out): (usize, usize, usize),
        num_points: usize,
        init: DeformAttnInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_points == 0 || d_q == 0 || d_v == 0 || d_out == 0 {
            return Err(invalid("DeformAttnHead::new", "dimensions and point count must be positive"));
        }
        let offset = rng.normal_tensor(&[d_q, 2 * num_points], init.offset_std);
        let weight = init_weight(rng, d_q, num_points, init.weight_gain);
        let value = init_weight(rng, d_v, d_out, init.value_gain);
        Ok(Self {
            num_points,
            d_q,
            d_v,
            d_out,
            offset_proj: store.add(format!("{name}.offset_proj"), offset)?,
            weight_proj: store.add(format!("{name}.weight_proj"), weight)?,
            value_proj: store.add(format!("{name}.value_proj"), value)?,
        })
    }

    /// Batched attention: `queries[N×d_q]`, `refs[N×2]`, `value_map[H×W×d_v]`
    /// → `[N×d_out]`. Row `i` depends only on row `i` of the inputs.
    pub fn forward_batch<'t>(&self, cx: Ctx<'t>, queries: &Var<'t>, refs: &Var<'t>, value_map: &Var<'t>) -> Result<Var<'t>> {
        let (qs, rs, vs) = (queries.shape(), refs.shape(), value_map.shape());
        if qs.len() != 2 || qs[1] != self.d_q {
            return Err(shape_err("deform_attn.query", &qs, &[self.d_q]));
        }
        if rs != [qs[0], 2] {
            return Err(shape_err("deform_attn.refs", &rs, &qs));
        }
        if vs.len() != 3 || vs[2] != self.d_v {
            return Err(shape_err("deform_attn.value_map", &vs, &[self.d_v]));
        }
        let (n, p) = (qs[0], self.num_points);
        let offsets = queries.matmul(&cx.p(self.offset_proj))?.reshape(&[n * p, 2])?;
        let rep: Vec<usize> = (0..n * p).map(|r| r / p).collect();
        let pts = refs.gather_rows(&rep)?.add(&offsets)?;
        let weights = queries.matmul(&cx.p(self.weight_proj))?.softmax();
        let samples = value_map.bilinear_sample(&pts)?;
        let mixed = samples.mul_rows(&weights)?.sum_row_groups(p)?;
        mixed.matmul(&cx.p(self.value_proj))
    }

    /// Single query at a fixed reference `(x, y)`; returns `[d_out]`.
    pub fn forward<'t>(&self, cx: Ctx<'t>, query: &Var<'t>, reference: [f64; 2], value_map: &Var<'t>) -> Result<Var<'t>> {
        let q = query.reshape(&[1, self.d_q])?;
        let r = cx.constant(Tensor::new(&[1, 2], reference.to_vec())?);
        self.forward_batch(cx, &q, &r, value_map)?.reshape(&[self.d_out])
    }
}

/// Reference coordinates `(x = j, y = i)` for every cell of an `h×w` map in
/// row-major order.
pub fn grid_refs(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            data.push(j as f64);
            data.push(i as f64);
        }
    }
    Tensor::new(&[h * w, 2], data).expect("non-empty grid")
}
