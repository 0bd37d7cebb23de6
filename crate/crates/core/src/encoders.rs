//! Spatial and temporal encoders: spatial cross-attention into camera
//! features, local temporal self-attention against the previous aligned
//! volume, voxel → BEV compression, and the pairwise global interaction over
//! the BEV history queue.

use std::rc::Rc;

use crate::deform_attn::{grid_refs, DeformAttnHead, DeformAttnInit};
use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::{align_voxel_features, CameraModel, EgoPose, VoxelGridSpec};
use crate::nn::{Ctx, Linear};
use crate::numerics::{concat_cols, concat_rows, ParamId, ParamStore, Rng, Tensor, Var, MIN_DEPTH};

/// Voxel features `[H×W×Z×D]` in the ego frame of `pose`.
#[derive(Debug, Clone, Copy)]
pub struct VoxelFeatureGrid<'t> {
    pub features: Var<'t>,
    pub spec: VoxelGridSpec,
    pub pose: EgoPose,
}

impl<'t> VoxelFeatureGrid<'t> {
    pub fn new(features: Var<'t>, spec: VoxelGridSpec, pose: EgoPose) -> Result<Self> {
        let s = features.shape();
        if s.len() != 4 || s[..3] != spec.dims {
            return Err(shape_err("VoxelFeatureGrid", &s, &spec.dims));
        }
        Ok(Self { features, spec, pose })
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[3]
    }

    /// Features as `[H·W·Z × D]`, rows in `(i, j, k)` row-major order.
    pub fn rows(&self) -> Result<Var<'t>> {
        self.features.reshape(&[self.spec.num_cells(), self.dim()])
    }

    fn with_rows(&self, rows: Var<'t>) -> Result<Self> {
        let [h, w, z] = self.spec.dims;
        Self::new(rows.reshape(&[h, w, z, self.dim()])?, self.spec, self.pose)
    }

    /// This volume resampled into the frame of `pose_now`. The capture
    /// timestamp is kept.
    pub fn aligned_to(&self, pose_now: &EgoPose) -> Result<Self> {
        let f = align_voxel_features(&self.features, &self.spec, pose_now, &self.pose)?;
        let pose = EgoPose::new(*pose_now.rotation(), *pose_now.translation(), self.pose.timestamp())?;
        Self::new(f, self.spec, pose)
    }
}

/// Learnable voxel queries plus their learnable 3D positional encoding.
#[derive(Debug, Clone, Copy)]
pub struct VoxelQueries {
    pub query: ParamId,
    pub pos_embed: ParamId,
    pub spec: VoxelGridSpec,
    pub dim: usize,
}

impl VoxelQueries {
    pub fn new(store: &mut ParamStore, name: &str, spec: VoxelGridSpec, dim: usize, rng: &mut Rng) -> Result<Self> {
        let n = spec.num_cells();
        Ok(Self {
            query: store.add(format!("{name}.query"), rng.normal_tensor(&[n, dim], 0.5))?,
            pos_embed: store.add(format!("{name}.pos_embed"), rng.normal_tensor(&[n, dim], 0.5))?,
            spec,
            dim,
        })
    }

    /// Fresh query grid for one frame; the positional encoding is added here
    /// and nowhere else.
    pub fn grid<'t>(&self, cx: Ctx<'t>, pose: EgoPose) -> Result<VoxelFeatureGrid<'t>> {
        let [h, w, z] = self.spec.dims;
        let f = cx.p(self.query).add(&cx.p(self.pos_embed))?.reshape(&[h, w, z, self.dim])?;
        VoxelFeatureGrid::new(f, self.spec, pose)
    }
}

/// Per-voxel attention into multi-camera image features.
#[derive(Debug, Clone, Copy)]
pub struct SpatialCrossAttention {
    /// `[M1×3]` metric offsets of the reference points from the cell center.
    pub ref_offsets: ParamId,
    pub m1: usize,
    pub da: DeformAttnHead,
}

impl SpatialCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (dim, d_img): (usize, usize),
        m1: usize,
        points: usize,
        spec: &VoxelGridSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m1 == 0 {
            return Err(invalid("SpatialCrossAttention::new", "M1 must be at least 1"));
        }
        // spread the pillar of reference points over the cell height
        let dz = spec.cell_size()[2];
        let offsets = Tensor::from_fn(&[m1, 3], |e| {
            let (m, a) = (e / 3, e % 3);
            if a == 2 && m1 > 1 {
                dz * ((m as f64 + 0.5) / m1 as f64 - 0.5)
            } else {
                0.0
            }
        });
        let ref_offsets = store.add(format!("{name}.ref_offsets"), offsets)?;
        let da = DeformAttnHead::new(store, &format!("{name}.da"), (dim, d_img, dim), points, DeformAttnInit::default(), rng)?;
        Ok(Self { ref_offsets, m1, da })
    }

    /// `q + (1/|v|) Σ_{n∈v} Σ_m DA(q, π_n(ref_m), F_n)`, with `v` the cameras
    /// in which at least one reference point of the voxel projects inside the
    /// image. Only valid `(n, m)` projections contribute.
    pub fn forward<'t>(
        &self,
        cx: Ctx<'t>,
        grid: &VoxelFeatureGrid<'t>,
        images: &[Var<'t>],
        cams: &[CameraModel],
    ) -> Result<VoxelFeatureGrid<'t>> {
        if cams.is_empty() {
            return Err(Error::Config("spatial cross-attention needs at least one camera".into()));
        }
        if images.len() != cams.len() {
            return Err(shape_err("spatial_cross_attention", &[images.len()], &[cams.len()]));
        }
        let spec = grid.spec;
        let n = spec.num_cells();
        let q = grid.rows()?;
        let centers = Tensor::from_fn(&[n, 3], |e| spec.center_unchecked(spec.unflatten(e / 3))[e % 3]);
        let centers = cx.constant(centers);
        let offsets = cx.p(self.ref_offsets);
        let ref_pts: Vec<Var<'t>> = (0..self.m1)
            .map(|m| centers.add_row(&offsets.gather_rows(&[m])?))
            .collect::<Result<_>>()?;

        let mut views = vec![0usize; n];
        let mut total: Option<Var<'t>> = None;
        for (cam, image) in cams.iter().zip(images) {
            let s = image.shape();
            if s.len() != 3 || s[0] != cam.height || s[1] != cam.width {
                return Err(shape_err("spatial_cross_attention.image", &s, &[cam.height, cam.width]));
            }
            let rot = cx.constant(Tensor::new(&[3, 3], cam.extrinsics.rotation().iter().copied().collect())?);
            // column-major storage of R read row-major is Rᵀ; rows·R maps ego → camera
            let rot = rot.transpose()?;
            let neg_t = cx.constant(Tensor::new(&[3], cam.extrinsics.translation().iter().map(|v| -v).collect())?);
            let mut hit = vec![false; n];
            let mut rows = Vec::new();
            let mut refs = Vec::new();
            for pts in &ref_pts {
                let cam_pts = pts.add_row(&neg_t)?.matmul(&rot)?;
                let pix = cam_pts.perspective(cam.fx, cam.fy, cam.cx, cam.cy)?;
                let (cv, pv) = (cam_pts.value(), pix.value());
                let valid: Vec<usize> = (0..n)
                    .filter(|&r| cv.at(&[r, 2]) > MIN_DEPTH && cam.contains_pixel(pv.at(&[r, 0]), pv.at(&[r, 1])))
                    .collect();
                if valid.is_empty() {
                    continue;
                }
                valid.iter().for_each(|&r| hit[r] = true);
                refs.push(pix.gather_rows(&valid)?);
                rows.extend(valid);
            }
            hit.iter().zip(views.iter_mut()).for_each(|(&h, v)| *v += h as usize);
            if rows.is_empty() {
                continue;
            }
            let out = self.da.forward_batch(cx, &q.gather_rows(&rows)?, &concat_rows(&refs)?, image)?;
            let summed = out.index_add_rows(Rc::new(rows), n)?;
            total = Some(match total {
                Some(t) => t.add(&summed)?,
                None => summed,
            });
        }
        let Some(total) = total else {
            return Ok(*grid);
        };
        let inv = Tensor::new(&[n], views.iter().map(|&v| if v == 0 { 0.0 } else { 1.0 / v as f64 }).collect())?;
        grid.with_rows(q.add(&total.mul_rows(&cx.constant(inv))?)?)
    }
}

/// Deformable reads of the aligned previous volume on the BEV plane, one
/// depth slice at a time.
#[derive(Debug, Clone, Copy)]
pub struct TemporalSelfAttention {
    /// `[N2×2]` learnable in-plane offsets `(x, y)` of the reference points.
    pub base_offsets: ParamId,
    pub n2: usize,
    pub da: DeformAttnHead,
}

impl TemporalSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n2: usize, points: usize, rng: &mut Rng) -> Result<Self> {
        if n2 == 0 {
            return Err(invalid("TemporalSelfAttention::new", "N2 must be at least 1"));
        }
        let base = rng.normal_tensor(&[n2, 2], 0.25);
        let base_offsets = store.add(format!("{name}.base_offsets"), base)?;
        let da = DeformAttnHead::new(store, &format!("{name}.da"), (dim, dim, dim), points, DeformAttnInit::default(), rng)?;
        Ok(Self { base_offsets, n2, da })
    }

    /// `q + Σ_{n=1}^{N2} DA(q, ref + Δ_n, hist[:, :, k])` for every voxel at
    /// depth `k`.
    pub fn forward<'t>(
        &self,
        cx: Ctx<'t>,
        now: &VoxelFeatureGrid<'t>,
        hist: &VoxelFeatureGrid<'t>,
    ) -> Result<VoxelFeatureGrid<'t>> {
        if now.spec != hist.spec || now.dim() != hist.dim() {
            return Err(shape_err("temporal_self_attention", &now.features.shape(), &hist.features.shape()));
        }
        let [h, w, z] = now.spec.dims;
        let (hw, d, n) = (h * w, now.dim(), now.spec.num_cells());
        let q = now.rows()?;
        let base = cx.p(self.base_offsets);
        let plane = cx.constant(grid_refs(h, w));
        let refs = concat_rows(
            &(0..self.n2)
                .map(|m| plane.add_row(&base.gather_rows(&[m])?))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let mut parts = Vec::with_capacity(z);
        let mut dest = Vec::with_capacity(n);
        for k in 0..z {
            let cells: Vec<usize> = (0..hw).map(|c| c * z + k).collect();
            let slice_idx: Vec<usize> = cells.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
            let value = hist.features.gather(Rc::new(slice_idx), &[h, w, d])?;
            let qk = q.gather_rows(&cells)?;
            let rep: Vec<usize> = (0..self.n2 * hw).map(|r| r % hw).collect();
            let out = self.da.forward_batch(cx, &qk.gather_rows(&rep)?, &refs, &value)?;
            let fold: Vec<usize> = (0..self.n2 * hw).map(|r| r % hw).collect();
            parts.push(out.index_add_rows(Rc::new(fold), hw)?);
            dest.extend(cells);
        }
        let update = concat_rows(&parts)?.index_add_rows(Rc::new(dest), n)?;
        now.with_rows(q.add(&update)?)
    }
}

/// BEV features `[H×W×C]` for one frame.
#[derive(Debug, Clone, Copy)]
pub struct BevFeatureMap<'t> {
    pub features: Var<'t>,
    pub timestamp: usize,
    pub pose: EgoPose,
}

impl<'t> BevFeatureMap<'t> {
    pub fn rows(&self) -> Result<Var<'t>> {
        let s = self.features.shape();
        self.features.reshape(&[s[0] * s[1], s[2]])
    }

    fn with_rows(&self, rows: Var<'t>) -> Result<Self> {
        Ok(Self {
            features: rows.reshape(&self.features.shape())?,
            ..*self
        })
    }
}

/// Horizontal deformable mixing of every depth slice followed by average
/// pooling over `Z`.
#[derive(Debug, Clone, Copy)]
pub struct VoxelToBev {
    pub mixing: Option<DeformAttnHead>,
}

impl VoxelToBev {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, points: usize, rng: &mut Rng) -> Result<Self> {
        let init = DeformAttnInit {
            value_gain: 0.5,
            ..Default::default()
        };
        let da = DeformAttnHead::new(store, &format!("{name}.da"), (dim, dim, dim), points, init, rng)?;
        Ok(Self { mixing: Some(da) })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, v: &VoxelFeatureGrid<'t>) -> Result<BevFeatureMap<'t>> {
        let [h, w, z] = v.spec.dims;
        let (hw, d) = (h * w, v.dim());
        let rows = v.rows()?;
        let mixed = match &self.mixing {
            None => rows,
            Some(da) => {
                let refs = cx.constant(grid_refs(h, w));
                let mut parts = Vec::with_capacity(z);
                let mut dest = Vec::with_capacity(hw * z);
                for k in 0..z {
                    let cells: Vec<usize> = (0..hw).map(|c| c * z + k).collect();
                    let slice = rows.gather_rows(&cells)?;
                    let map = slice.reshape(&[h, w, d])?;
                    parts.push(slice.add(&da.forward_batch(cx, &slice, &refs, &map)?)?);
                    dest.extend(cells);
                }
                concat_rows(&parts)?.index_add_rows(Rc::new(dest), hw * z)?
            }
        };
        let pooled = mixed.sum_row_groups(z)?.scale(1.0 / z as f64);
        Ok(BevFeatureMap {
            features: pooled.reshape(&[h, w, d])?,
            timestamp: v.pose.timestamp(),
            pose: v.pose,
        })
    }
}

/// Oldest-first list of BEV maps sharing one shape.
#[derive(Debug, Clone, Default)]
pub struct TemporalQueue<'t> {
    entries: Vec<BevFeatureMap<'t>>,
}

impl<'t> TemporalQueue<'t> {
    pub fn new(entries: Vec<BevFeatureMap<'t>>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(invalid("TemporalQueue", "timestamps must increase strictly"));
            }
            let (a, b) = (pair[0].features.shape(), pair[1].features.shape());
            if a != b {
                return Err(shape_err("TemporalQueue", &a, &b));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[BevFeatureMap<'t>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Option<&BevFeatureMap<'t>> {
        self.entries.last()
    }
}

/// Decay `ω(Δt)` applied to the interaction gain.
#[derive(Debug, Clone, Copy)]
pub enum DecayWeight {
    /// `ω(Δt) = exp(−softplus(raw)·Δt)`.
    Learned(ParamId),
    Fixed(f64),
}

impl DecayWeight {
    pub fn learned(store: &mut ParamStore, name: &str, initial: f64) -> Result<Self> {
        if !(initial > 0.0 && initial < 1.0) {
            return Err(invalid("DecayWeight::learned", format!("initial ω must be in (0, 1), got {initial}")));
        }
        // softplus(raw) = −ln ω
        let s = -initial.ln();
        let raw = s + (-(-s).exp_m1()).ln();
        Ok(Self::Learned(store.add(format!("{name}.raw"), Tensor::scalar(raw))?))
    }

    pub fn omega<'t>(&self, cx: Ctx<'t>, dt: f64) -> Var<'t> {
        match *self {
            Self::Learned(raw) => cx.p(raw).softplus().scale(-dt).exp(),
            Self::Fixed(w) => cx.constant(Tensor::scalar(w)),
        }
    }
}

/// Pairwise global interaction `b_j + ω·Avg(DA(⟨b_i,b_j⟩, b_i), DA(⟨b_i,b_j⟩, b_j))`.
#[derive(Debug, Clone, Copy)]
pub struct Giam {
    pub da_i: DeformAttnHead,
    pub da_j: DeformAttnHead,
    pub decay: DecayWeight,
}

impl Giam {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, points: usize, decay: DecayWeight, rng: &mut Rng) -> Result<Self> {
        let init = DeformAttnInit::default();
        Ok(Self {
            da_i: DeformAttnHead::new(store, &format!("{name}.da_i"), (2 * dim, dim, dim), points, init, rng)?,
            da_j: DeformAttnHead::new(store, &format!("{name}.da_j"), (2 * dim, dim, dim), points, init, rng)?,
            decay,
        })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, b_i: &BevFeatureMap<'t>, b_j: &BevFeatureMap<'t>) -> Result<BevFeatureMap<'t>> {
        let (si, sj) = (b_i.features.shape(), b_j.features.shape());
        if si != sj {
            return Err(shape_err("giam", &si, &sj));
        }
        if matches!(self.decay, DecayWeight::Fixed(w) if w == 0.0) {
            return Ok(*b_j);
        }
        let (ri, rj) = (b_i.rows()?, b_j.rows()?);
        let q = concat_cols(&[ri, rj])?;
        let refs = cx.constant(grid_refs(sj[0], sj[1]));
        let gi = self.da_i.forward_batch(cx, &q, &refs, &b_i.features)?;
        let gj = self.da_j.forward_batch(cx, &q, &refs, &b_j.features)?;
        let gain = gi.add(&gj)?.scale(0.5);
        let dt = b_i.timestamp.abs_diff(b_j.timestamp) as f64;
        let omega = self.decay.omega(cx, dt);
        b_j.with_rows(rj.add(&gain.mul_scalar(&omega)?)?)
    }
}

/// Backward sweep (newest → oldest) followed by a forward sweep
/// (oldest → newest). Queues shorter than two are returned unchanged.
pub fn global_queue_interaction<'t>(cx: Ctx<'t>, giam: &Giam, queue: &TemporalQueue<'t>) -> Result<TemporalQueue<'t>> {
    let mut e = queue.entries.clone();
    if e.len() < 2 {
        return Ok(queue.clone());
    }
    for j in (0..e.len() - 1).rev() {
        e[j] = giam.forward(cx, &e[j + 1], &e[j])?;
    }
    for j in 1..e.len() {
        e[j] = giam.forward(cx, &e[j - 1], &e[j])?;
    }
    Ok(TemporalQueue { entries: e })
}

/// Channel concatenation of all queue entries projected back to `C`,
/// replacing the newest entry.
#[derive(Debug, Clone, Copy)]
pub struct ConcatFusion {
    pub proj: Linear,
    pub len: usize,
}

impl ConcatFusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, len: usize, rng: &mut Rng) -> Result<Self> {
        let din = dim * len;
        let mut w = rng.normal_tensor(&[din, dim], 0.1 / (din as f64).sqrt());
        for c in 0..dim {
            let r = (len - 1) * dim + c;
            w.set(&[r, c], w.at(&[r, c]) + 1.0);
        }
        Ok(Self {
            proj: Linear::with_weight(store, name, w, true)?,
            len,
        })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, queue: &TemporalQueue<'t>) -> Result<TemporalQueue<'t>> {
        if queue.len() != self.len {
            return Err(shape_err("concat_fusion", &[queue.len()], &[self.len]));
        }
        let rows = queue.entries.iter().map(|b| b.rows()).collect::<Result<Vec<_>>>()?;
        let fused = self.proj.forward(cx, &concat_cols(&rows)?)?;
        let mut e = queue.entries.clone();
        let last = e.len() - 1;
        e[last] = e[last].with_rows(fused)?;
        Ok(TemporalQueue { entries: e })
    }
}

/// Recurrent oldest → newest deformable reads of each entry into its
/// predecessor.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentTsaFusion {
    pub da: DeformAttnHead,
}

impl RecurrentTsaFusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, points: usize, rng: &mut Rng) -> Result<Self> {
        let da = DeformAttnHead::new(store, &format!("{name}.da"), (dim, dim, dim), points, DeformAttnInit::default(), rng)?;
        Ok(Self { da })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, queue: &TemporalQueue<'t>) -> Result<TemporalQueue<'t>> {
        let mut e = queue.entries.clone();
        for j in 1..e.len() {
            let s = e[j].features.shape();
            let refs = cx.constant(grid_refs(s[0], s[1]));
            let q = e[j].rows()?;
            let upd = self.da.forward_batch(cx, &q, &refs, &e[j - 1].features)?;
            e[j] = e[j].with_rows(q.add(&upd)?)?;
        }
        Ok(TemporalQueue { entries: e })
    }
}
