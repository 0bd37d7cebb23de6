//! In-model latent denoising of the current BEV map.
//!
//! The coarse BEV map is corrupted with Gaussian noise under a linear-β
//! schedule, then `l` cross-attention blocks conditioned on local voxel
//! features and the interacted history queue strip the noise in a single
//! pass.

use std::rc::Rc;

use crate::encoders::{TemporalQueue, VoxelFeatureGrid};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{init_weight, Ctx, Linear};
use crate::numerics::{concat_cols, concat_rows, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// `betas[s - 1]` is `β_s`.
    pub betas: Vec<f64>,
    /// `alpha_bars[t] = Π_{s ≤ t} (1 − β_s)`, with `alpha_bars[0] = 1`.
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(
                "NoiseSchedule::linear",
                format!("need t_max ≥ 1 and 0 < β_start ≤ β_end < 1, got {t_max} {beta_start} {beta_end}"),
            ));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|s| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * s as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            alpha_bars.push(alpha_bars.last().expect("seeded") * (1.0 - b));
        }
        Ok(Self {
            t_max,
            betas,
            alpha_bars,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| invalid("NoiseSchedule::alpha_bar", format!("t = {t} exceeds T_max = {}", self.t_max)))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }
}

/// `√ᾱ_t·b + √(1 − ᾱ_t)·ε`, `ε ~ N(0, I)`. `t = 0` returns `b` itself.
pub fn corrupt<'t>(b: &Var<'t>, t: usize, rng: &mut Rng, sched: &NoiseSchedule) -> Result<Var<'t>> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Ok(*b);
    }
    let noise = rng.normal_tensor(&b.shape(), (1.0 - ab).sqrt());
    b.scale(ab.sqrt()).add(&b.tape.constant(noise))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Number of blocks `l`.
    pub steps: usize,
    pub corruption_t: usize,
    pub ffn_hidden: usize,
    pub noise_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            corruption_t: 800,
            ffn_hidden: 32,
            noise_hidden: 32,
        }
    }
}

/// Fixed 2D sinusoidal encoding `[H·W × C]` of cell `(i, j)`; `C` must be a
/// multiple of 4.
pub fn sinusoidal_2d(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(invalid("sinusoidal_2d", format!("channel count {c} is not a multiple of 4")));
    }
    let nf = c / 4;
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for axis in [i as f64, j as f64] {
                for a in 0..nf {
                    let f = 100f64.powf(-(a as f64) / nf as f64);
                    data.push((axis * f).sin());
                    data.push((axis * f).cos());
                }
            }
        }
    }
    Tensor::new(&[h * w, c], data)
}

/// Scale of the positional projections at initialization.
const PE_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
pub struct DenoisingBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub pe_q: Linear,
    pub pe_k: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub noise1: Linear,
    pub noise2: Linear,
}

/// Output of one block.
pub struct BlockOutput<'t> {
    pub x_next: Var<'t>,
    /// Total decrement `x_i − x_next`.
    pub eps: Var<'t>,
}

impl DenoisingBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let lin = |store: &mut ParamStore, n: &str, din, dout, gain, rng: &mut Rng| {
            Linear::with_weight(store, &format!("{name}.{n}"), init_weight(rng, din, dout, gain), true)
        };
        let eye = Tensor::eye(c).map(|v| v * PE_GAIN);
        Ok(Self {
            wq: lin(store, "wq", c, c, 1.0, rng)?,
            wk: lin(store, "wk", c, c, 1.0, rng)?,
            wv: lin(store, "wv", c, c, 1.0, rng)?,
            pe_q: Linear::with_weight(store, &format!("{name}.pe_q"), eye.clone(), false)?,
            pe_k: Linear::with_weight(store, &format!("{name}.pe_k"), eye, false)?,
            ffn1: lin(store, "ffn1", c, cfg.ffn_hidden, 1.0, rng)?,
            ffn2: lin(store, "ffn2", cfg.ffn_hidden, c, 0.5, rng)?,
            noise1: lin(store, "noise1", c, cfg.noise_hidden, 1.0, rng)?,
            noise2: lin(store, "noise2", cfg.noise_hidden, c, 0.5, rng)?,
        })
    }

    /// `x' = x + softmax(q kᵀ/√d) v`, `x'' = x' + FFN(x')`,
    /// `y = x'' − NoisePred(x'')`; returns `ε = x − y` and `x_next = x − ε`.
    pub fn forward<'t>(&self, cx: Ctx<'t>, x: &Var<'t>, cond: &Var<'t>, pe_x: &Var<'t>, pe_c: &Var<'t>) -> Result<BlockOutput<'t>> {
        let (xs, cs) = (x.shape(), cond.shape());
        if xs.len() != 2 || cs.len() != 2 || xs[1] != cs[1] || xs[1] != self.wq.din {
            return Err(shape_err("denoising_block", &xs, &cs));
        }
        let d = self.wq.dout as f64;
        let q = self.wq.forward(cx, x)?.add(&self.pe_q.forward(cx, pe_x)?)?;
        let k = self.wk.forward(cx, cond)?.add(&self.pe_k.forward(cx, pe_c)?)?;
        let v = self.wv.forward(cx, cond)?;
        let attn = q.matmul(&k.transpose()?)?.scale(1.0 / d.sqrt()).softmax().matmul(&v)?;
        let x1 = x.add(&attn)?;
        let x2 = x1.add(&self.ffn2.forward(cx, &self.ffn1.forward(cx, &x1)?.relu())?)?;
        let y = x2.sub(&self.noise2.forward(cx, &self.noise1.forward(cx, &x2)?.relu())?)?;
        let eps = x.sub(&y)?;
        Ok(BlockOutput {
            x_next: x.sub(&eps)?,
            eps,
        })
    }
}

/// Denoising network: condition embedding plus `l` blocks.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub local_proj: Linear,
    pub global_proj: Linear,
    pub blocks: Vec<DenoisingBlock>,
    pub grid_hw: (usize, usize),
    pe: Tensor,
}

/// Result of [`Denoiser::run`].
pub struct DenoiserTrace<'t> {
    pub x0: Var<'t>,
    pub eps: Vec<Var<'t>>,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (h, w): (usize, usize),
        (d_voxel, c): (usize, usize),
        cfg: DenoiserConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(invalid("Denoiser::new", "at least one denoising block is required"));
        }
        let blocks = (0..cfg.steps)
            .map(|b| DenoisingBlock::new(store, &format!("{name}.block{b}"), c, &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            local_proj: Linear::new(store, &format!("{name}.local_proj"), d_voxel, c, true, rng)?,
            global_proj: Linear::new(store, &format!("{name}.global_proj"), c, c, true, rng)?,
            blocks,
            grid_hw: (h, w),
            pe: sinusoidal_2d(h, w, c)?,
        })
    }

    /// Condition tokens `[(1 + |queue|)·H·W × C]`: the Z-pooled local volume
    /// followed by every queue entry, oldest first.
    pub fn build_condition<'t>(&self, cx: Ctx<'t>, local: &VoxelFeatureGrid<'t>, queue: &TemporalQueue<'t>) -> Result<Var<'t>> {
        let [h, w, z] = local.spec.dims;
        if (h, w) != self.grid_hw {
            return Err(shape_err("build_condition", &[h, w], &[self.grid_hw.0, self.grid_hw.1]));
        }
        let pooled = local.rows()?.sum_row_groups(z)?.scale(1.0 / z as f64);
        let mut tokens = vec![self.local_proj.forward(cx, &pooled)?];
        for e in queue.entries() {
            let s = e.features.shape();
            if s[..2] != [h, w] {
                return Err(shape_err("build_condition.queue", &s, &[h, w]));
            }
            tokens.push(self.global_proj.forward(cx, &e.rows()?)?);
        }
        concat_rows(&tokens)
    }

    /// Chains the blocks from `x_I` and records every block's decrement.
    pub fn run<'t>(&self, cx: Ctx<'t>, x_i: &Var<'t>, cond: &Var<'t>) -> Result<DenoiserTrace<'t>> {
        let hw = self.pe.rows();
        if x_i.shape()[0] != hw || cond.shape()[0] % hw != 0 {
            return Err(shape_err("run_denoiser", &x_i.shape(), &cond.shape()));
        }
        let pe_x = cx.constant(self.pe.clone());
        let reps = cond.shape()[0] / hw;
        let pe_c = cx.constant(concat_pe(&self.pe, reps)?);
        let mut x = *x_i;
        let mut eps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.forward(cx, &x, cond, &pe_x, &pe_c)?;
            x = out.x_next;
            eps.push(out.eps);
        }
        Ok(DenoiserTrace { x0: x, eps })
    }
}

fn concat_pe(pe: &Tensor, reps: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(pe.numel() * reps);
    for _ in 0..reps {
        data.extend_from_slice(pe.data());
    }
    Tensor::new(&[pe.rows() * reps, pe.last_dim()], data)
}

/// Broadcasts BEV rows over `Z`, concatenates them to the voxel channels and
/// projects back to `D`.
#[derive(Debug, Clone, Copy)]
pub struct BevMerge {
    pub proj: Linear,
}

impl BevMerge {
    /// Initialized to pass the voxel channels through plus a small BEV term.
    pub fn new(store: &mut ParamStore, name: &str, d_voxel: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        let mut w = init_weight(rng, d_voxel + c, d_voxel, 0.5);
        for r in 0..d_voxel {
            for col in 0..d_voxel {
                w.set(&[r, col], if r == col { 1.0 } else { 0.0 });
            }
        }
        Ok(Self {
            proj: Linear::with_weight(store, name, w, true)?,
        })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, bev: &Var<'t>, v: &VoxelFeatureGrid<'t>) -> Result<VoxelFeatureGrid<'t>> {
        let [h, w, z] = v.spec.dims;
        let bs = bev.shape();
        let rows = bs.iter().product::<usize>() / bs.last().copied().unwrap_or(1);
        if rows != h * w {
            return Err(shape_err("merge_bev_into_voxels", &bs, &[h, w]));
        }
        let c = *bs.last().expect("non-empty");
        let flat = bev.reshape(&[h * w, c])?;
        let spread: Vec<usize> = (0..h * w * z).map(|r| r / z).collect();
        let cat = concat_cols(&[v.rows()?, flat.gather_rows(&spread)?])?;
        let merged = self.proj.forward(cx, &cat)?;
        VoxelFeatureGrid::new(merged.reshape(&[h, w, z, v.dim()])?, v.spec, v.pose)
    }
}

/// Free-standing form of [`BevMerge::forward`] for a caller-built projection.
pub fn merge_bev_into_voxels<'t>(cx: Ctx<'t>, bev: &Var<'t>, v: &VoxelFeatureGrid<'t>, proj: &Linear) -> Result<VoxelFeatureGrid<'t>> {
    BevMerge { proj: *proj }.forward(cx, bev, v)
}

/// `x_I − ε_1 − … − ε_l`, folded left to right.
pub fn telescope(x_i: &Tensor, eps: &[Rc<Tensor>]) -> Tensor {
    let mut acc = x_i.clone();
    for e in eps {
        acc.data_mut().iter_mut().zip(e.data()).for_each(|(a, b)| *a -= b);
    }
    acc
}
