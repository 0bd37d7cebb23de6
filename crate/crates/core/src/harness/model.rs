//! Parameters of the full occupancy model and its forward pass over a window
//! of frames.

use crate::denoiser::{corrupt, BevMerge, Denoiser};
use crate::encoders::{
    global_queue_interaction, BevFeatureMap, ConcatFusion, DecayWeight, Giam, RecurrentTsaFusion, SpatialCrossAttention,
    TemporalQueue, TemporalSelfAttention, VoxelFeatureGrid, VoxelQueries, VoxelToBev,
};
use crate::error::{Error, Result};
use nalgebra::Vector3;

use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::heads::{flatten_rows, SegmentationHead, UpsampleDecoder};
use crate::nn::{Ctx, Linear};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::scenegen::{Frame, DEPTH_BINS, IMAGE_CHANNELS, NUM_CLASSES};

use super::config::{GlobalFusion, PipelineConfig};

#[derive(Debug, Clone, Copy)]
pub enum Fusion {
    None,
    Concat(ConcatFusion),
    Tsa(RecurrentTsaFusion),
    Giam(Giam),
}

/// Module handles plus the parameter store they index into.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub store: ParamStore,
    pub queries: VoxelQueries,
    pub sca: SpatialCrossAttention,
    pub tsa: Option<TemporalSelfAttention>,
    pub to_bev: VoxelToBev,
    pub fusion: Fusion,
    pub denoiser: Option<Denoiser>,
    pub merge: BevMerge,
    pub decoder: UpsampleDecoder,
    pub seg: SegmentationHead,
    pub fg_head: Linear,
}

impl Model {
    /// Every module draws from its own fork of the seed, so modules shared by
    /// two configurations start from identical values.
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let rng = |stream: u64| root.fork(stream);
        let spec = cfg.grid()?;
        let [h, w, _] = spec.dims;
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let queries = VoxelQueries::new(s, "queries", spec, d, &mut rng(1))?;
        let cam = Vector3::new(0.0, 0.0, cfg.scene_config(0).camera_height);
        let pos = range_encoding(s.value(queries.pos_embed), &spec, &cam);
        s.set_value(queries.pos_embed, pos)?;
        let sca = SpatialCrossAttention::new(s, "sca", (d, IMAGE_CHANNELS), cfg.m1, cfg.points, &spec, &mut rng(2))?;
        let tsa = if cfg.use_local_temporal {
            Some(TemporalSelfAttention::new(s, "tsa", d, cfg.n2, cfg.points, &mut rng(3))?)
        } else {
            None
        };
        let to_bev = VoxelToBev::new(s, "to_bev", d, cfg.points, &mut rng(4))?;
        let fusion = match cfg.global_fusion {
            GlobalFusion::None => Fusion::None,
            GlobalFusion::Concat => Fusion::Concat(ConcatFusion::new(s, "fusion.concat", d, cfg.queue_len + 1, &mut rng(5))?),
            GlobalFusion::Tsa => Fusion::Tsa(RecurrentTsaFusion::new(s, "fusion.tsa", d, cfg.points, &mut rng(6))?),
            GlobalFusion::Giam => {
                let decay = DecayWeight::learned(s, "fusion.giam.decay", cfg.decay_init)?;
                Fusion::Giam(Giam::new(s, "fusion.giam", d, cfg.points, decay, &mut rng(7))?)
            }
        };
        let denoiser = if cfg.denoiser_on {
            Some(Denoiser::new(s, "denoiser", (h, w), (d, cfg.c_bev), cfg.denoiser(), &mut rng(8))?)
        } else {
            None
        };
        let merge = BevMerge::new(s, "merge", d, cfg.c_bev, &mut rng(9))?;
        let decoder = UpsampleDecoder::new(s, "decoder", d, cfg.d0, &mut rng(10))?;
        let seg = SegmentationHead::new(s, "seg", cfg.d0, cfg.seg_hidden, NUM_CLASSES + 1, &mut rng(11))?;
        let fg_head = Linear::new(s, "fg_head", cfg.d0, 2, true, &mut rng(12))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            queries,
            sca,
            tsa,
            to_bev,
            fusion,
            denoiser,
            merge,
            decoder,
            seg,
            fg_head,
        })
    }

    /// Replaces every parameter with the one of the same name in `store`.
    /// Both stores must hold exactly the same names and shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                store.len(),
                self.store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = self
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {} not in model", p.name)))?;
            self.store.set_value(id, p.value.clone())?;
        }
        Ok(())
    }
}

/// Overwrites the leading channels of a positional encoding with soft
/// one-meter bins of each cell's distance from the camera center, matching
/// the depth bins of the image features, followed by the normalized cell
/// center.
fn range_encoding(init: &Tensor, spec: &VoxelGridSpec, cam: &Vector3<f64>) -> Tensor {
    let d = init.shape()[1];
    let mut out = init.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let c = spec.center_unchecked(spec.unflatten(r));
        let dist = (c - cam).norm();
        let bins = DEPTH_BINS.min(d);
        for (b, v) in row[..bins].iter_mut().enumerate() {
            *v = (1.0 - (dist - (b as f64 + 0.5)).abs()).max(0.0);
        }
        for (a, v) in row[bins..].iter_mut().take(3).enumerate() {
            let half = (spec.range_max[a] - spec.range_min[a]) / 2.0;
            *v = (c[a] - (spec.range_min[a] + half)) / half;
        }
    }
    out
}

/// Per-fine-voxel predictions for the newest frame of a window.
pub struct PipelineOutput<'t> {
    /// `[N_fine × (C+1)]`.
    pub logits: Var<'t>,
    /// `[N_fine × 2]` foreground logits.
    pub fg_logits: Var<'t>,
    /// Per-block denoiser decrements, empty with the denoiser off.
    pub eps: Vec<Var<'t>>,
    pub x_i: Option<Var<'t>>,
    pub x0: Option<Var<'t>>,
}

/// Runs the model on `window` (oldest first, newest is the frame predicted).
///
/// Spatial cross-attention per frame; each frame's volume attends to its
/// predecessor aligned into its own ego frame when local temporal
/// aggregation is on; every volume is aligned to the newest pose and pooled to
/// BEV; the queue is fused per `global_fusion`; with the denoiser on, the
/// newest pre-fusion BEV is corrupted and denoised under the local and queue
/// condition, otherwise the newest fused BEV is merged directly.
pub fn forward_pipeline<'t>(
    cx: Ctx<'t>,
    model: &Model,
    window: &[Frame],
    cams: &[CameraModel],
    noise: &mut Rng,
) -> Result<PipelineOutput<'t>> {
    let cfg = &model.cfg;
    if window.is_empty() {
        return Err(Error::Config("forward_pipeline needs at least one frame".into()));
    }
    if cfg.global_fusion != GlobalFusion::None && window.len() != cfg.queue_len + 1 {
        return Err(Error::Config(format!(
            "window of {} frames does not match queue-len + 1 = {}",
            window.len(),
            cfg.queue_len + 1
        )));
    }
    for pair in window.windows(2) {
        if pair[1].ego_pose.timestamp() <= pair[0].ego_pose.timestamp() {
            return Err(Error::Config("window must be ordered oldest to newest".into()));
        }
    }
    let newest = window.last().expect("non-empty");
    let now = newest.ego_pose;
    // with neither temporal path the history is never read
    let uses_history = model.tsa.is_some() || !matches!(model.fusion, Fusion::None);
    let frames = if uses_history { window } else { std::slice::from_ref(newest) };

    let mut spatial: Vec<VoxelFeatureGrid<'t>> = Vec::with_capacity(frames.len());
    for f in frames {
        let grid = model.queries.grid(cx, f.ego_pose)?;
        let images: Vec<Var<'t>> = f.images.iter().map(|img| cx.constant(img.clone())).collect();
        spatial.push(model.sca.forward(cx, &grid, &images, cams)?);
    }
    let local: Vec<VoxelFeatureGrid<'t>> = match &model.tsa {
        Some(tsa) => spatial
            .iter()
            .enumerate()
            .map(|(i, s)| match i {
                0 => Ok(*s),
                _ => tsa.forward(cx, s, &spatial[i - 1].aligned_to(&s.pose)?),
            })
            .collect::<Result<_>>()?,
        None => spatial,
    };
    let current = *local.last().expect("non-empty");
    let coarse = model.to_bev.forward(cx, &current)?;

    let fused = match model.fusion {
        Fusion::None => TemporalQueue::default(),
        ref fusion => {
            let mut entries: Vec<BevFeatureMap<'t>> = local[..local.len() - 1]
                .iter()
                .map(|v| model.to_bev.forward(cx, &v.aligned_to(&now)?))
                .collect::<Result<_>>()?;
            entries.push(coarse);
            let queue = TemporalQueue::new(entries)?;
            match fusion {
                Fusion::Concat(c) => c.forward(cx, &queue)?,
                Fusion::Tsa(t) => t.forward(cx, &queue)?,
                Fusion::Giam(g) => global_queue_interaction(cx, g, &queue)?,
                Fusion::None => unreachable!(),
            }
        }
    };

    let (bev, eps, x_i, x0) = match &model.denoiser {
        Some(den) => {
            let sched = cfg.schedule()?;
            let x_i = corrupt(&coarse.rows()?, cfg.corruption_t, noise, &sched)?;
            let cond = den.build_condition(cx, &current, &fused)?;
            let trace = den.run(cx, &x_i, &cond)?;
            (trace.x0, trace.eps, Some(x_i), Some(trace.x0))
        }
        None => {
            let b = fused.newest().copied().unwrap_or(coarse);
            (b.rows()?, Vec::new(), None, None)
        }
    };
    let merged = model.merge.forward(cx, &bev, &current)?;
    let feats = flatten_rows(&model.decoder.forward(cx, &merged)?)?;
    Ok(PipelineOutput {
        logits: model.seg.forward(cx, &feats)?,
        fg_logits: model.fg_head.forward(cx, &feats)?,
        eps,
        x_i,
        x0,
    })
}

/// Forward pass on a fresh tape returning plain logits.
pub fn predict_logits(model: &Model, window: &[Frame], cams: &[CameraModel], noise: &mut Rng) -> Result<Tensor> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &model.store);
    let out = forward_pipeline(cx, model, window, cams, noise)?;
    Ok((*out.logits.value()).clone())
}
