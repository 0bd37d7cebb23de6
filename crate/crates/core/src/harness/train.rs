//! Dataset assembly, the training loop, evaluation and the run report.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::losses::{focal_loss, lovasz_loss, thing_mask_loss, total_seg_loss, LossParts};
use crate::metrics::{IouCounts, MiouResult};
use crate::nn::Ctx;
use crate::numerics::{AdamW, Rng, Tape, Tensor, Var};
use crate::scenegen::{generate_scene_data, Frame, SceneData, CLASS_NAMES, NUM_CLASSES};

use super::config::PipelineConfig;
use super::model::{forward_pipeline, predict_logits, Model};

const TRAIN_SPLIT: u64 = 1;
const EVAL_SPLIT: u64 = 2;

/// Seed of scene `index` of `split`, decorrelated from neighbouring seeds.
pub fn scene_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed ^ split.rotate_left(48) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneData>,
    pub eval: Vec<SceneData>,
}

impl Dataset {
    /// Scenes depend only on the seed and the world knobs of `cfg`, so every
    /// model configuration sharing those sees identical data.
    pub fn generate(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let make = |split, n: usize| {
            (0..n as u64)
                .map(|i| generate_scene_data(&cfg.scene_config(scene_seed(cfg.seed, split, i))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: make(TRAIN_SPLIT, cfg.train_scenes)?,
            eval: make(EVAL_SPLIT, cfg.eval_scenes)?,
        })
    }
}

/// Windows of `k + 1` consecutive frames, by index of the newest frame.
pub fn windows(data: &SceneData, k: usize) -> impl Iterator<Item = (usize, &[Frame])> {
    (k..data.frames.len()).map(move |end| (end, &data.frames[end - k..=end]))
}

fn labels_usize(f: &Frame) -> Vec<usize> {
    f.gt_occupancy.iter().map(|&l| l as usize).collect()
}

/// Total loss and its parts on the newest frame of `window`.
pub fn window_loss<'t>(cx: Ctx<'t>, model: &Model, data: &SceneData, window: &[Frame], noise: &mut Rng) -> Result<(Var<'t>, [f64; 3])> {
    let cfg = &model.cfg;
    let out = forward_pipeline(cx, model, window, &data.scene.cameras, noise)?;
    let target = window.last().expect("non-empty window");
    let labels = labels_usize(target);
    let occupied: Vec<bool> = target.gt_occupancy.iter().map(|&l| l != 0).collect();
    let parts = LossParts {
        focal: focal_loss(&out.logits, &labels, cfg.focal())?,
        lovasz: lovasz_loss(&out.logits, &labels, &occupied)?,
        thing: thing_mask_loss(&out.fg_logits, &target.fg_mask, cfg.focal())?,
    };
    let total = total_seg_loss(&parts, &cfg.loss_weights())?;
    let vals = [parts.focal.value().item(), parts.lovasz.value().item(), parts.thing.value().item()];
    Ok((total, vals))
}

fn train_noise(cfg: &PipelineConfig, step: usize) -> Rng {
    Rng::new(cfg.seed).fork((1 << 40) | step as u64)
}

/// Corruption noise for the `index`-th evaluation window.
pub fn eval_noise(cfg: &PipelineConfig, index: usize) -> Rng {
    Rng::new(cfg.seed).fork((2 << 40) | index as u64)
}

/// Progress callback arguments: global step and that step's loss.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, f64);

/// Trains `model` in place for `cfg.epochs` passes over every training
/// window in a seeded shuffled order. Returns the mean loss of each epoch.
pub fn train_model(model: &mut Model, data: &Dataset, mut hook: Option<StepHook<'_>>) -> Result<Vec<f64>> {
    let cfg = model.cfg.clone();
    let k = cfg.queue_len;
    let mut order: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(s, d)| windows(d, k).map(move |(end, _)| (s, end)))
        .collect();
    if order.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let mut shuffle = Rng::new(cfg.seed).fork(100);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        for &(s, end) in &order {
            let scene = &data.train[s];
            let window = &scene.frames[end - k..=end];
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &model.store);
            let (loss, _) = window_loss(cx, model, scene, window, &mut train_noise(&cfg, step))?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            model.store.set_grads(&grads);
            opt.step(&mut model.store);
            if let Some(h) = hook.as_mut() {
                h(step, value);
            }
            sum += value;
            step += 1;
        }
        epoch_losses.push(sum / order.len() as f64);
    }
    Ok(epoch_losses)
}

/// Row-wise argmax, ties to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Cells within `radius` fine cells of the mask horizontally, at the same
/// height.
pub fn dilate_xy(mask: &[bool], spec: &VoxelGridSpec, radius: usize) -> Vec<bool> {
    let [h, w, z] = spec.dims;
    let mut out = vec![false; mask.len()];
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let [i, j, k] = spec.unflatten(idx);
        for ii in i.saturating_sub(radius)..(i + radius + 1).min(h) {
            for jj in j.saturating_sub(radius)..(j + radius + 1).min(w) {
                out[(ii * w + jj) * z + k] = true;
            }
        }
    }
    out
}

/// Intersection and union of the occluded-probe prediction: cells near the
/// probe predicted as its class against the probe's own cells.
pub fn probe_overlap(pred: &[u8], frame: &Frame, probe_class: u8, spec: &VoxelGridSpec) -> (u64, u64) {
    let region = dilate_xy(&frame.probe_mask, spec, 2);
    let (mut inter, mut union) = (0, 0);
    for ((&p, &g), &r) in pred.iter().zip(&frame.probe_mask).zip(&region) {
        let hit = r && p == probe_class;
        inter += (hit && g) as u64;
        union += (hit || g) as u64;
    }
    (inter, union)
}

/// Cells near the decoy predicted as the phantom's class where nothing of
/// that class is.
pub fn decoy_false_positives(pred: &[u8], frame: &Frame, phantom_class: u8, spec: &VoxelGridSpec) -> u64 {
    let region = dilate_xy(&frame.decoy_mask, spec, 2);
    pred.iter()
        .zip(&frame.gt_occupancy)
        .zip(&region)
        .filter(|((&p, &g), &r)| r && p == phantom_class && g != phantom_class)
        .count() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub counts: IouCounts,
    pub summary: MiouResult,
    /// Pooled IoU on the probe over windows ending while it is hidden, with
    /// predictions around a hidden decoy added to the union; NaN when no such
    /// window exists.
    pub probe_iou: f64,
    /// Windows ending while a probe or a decoy is hidden.
    pub probe_windows: usize,
}

pub fn evaluate(model: &Model, scenes: &[SceneData]) -> Result<EvalResult> {
    let cfg = &model.cfg;
    let k = cfg.queue_len;
    let fine = cfg.fine_grid()?;
    let mut counts = IouCounts::new(NUM_CLASSES + 1);
    let (mut inter, mut union, mut probe_windows) = (0u64, 0u64, 0);
    let mut index = 0;
    for data in scenes {
        for (end, window) in windows(data, k) {
            let logits = predict_logits(model, window, &data.scene.cameras, &mut eval_noise(cfg, index))?;
            index += 1;
            let pred = argmax_labels(&logits);
            let target = window.last().expect("non-empty window");
            counts.add(&pred, &target.gt_occupancy)?;
            if let Some(p) = data.scene.probe {
                if end + p.hidden_frames > p.frame && end <= p.frame {
                    let class = data.scene.objects[p.object].class;
                    let (i, u) = probe_overlap(&pred, target, class, &fine);
                    inter += i;
                    union += u;
                    probe_windows += 1;
                }
            }
            if let Some(d) = &data.scene.decoy {
                if end + d.hidden_frames > d.frame && end <= d.frame {
                    union += decoy_false_positives(&pred, target, d.phantom.class, &fine);
                    probe_windows += 1;
                }
            }
        }
    }
    Ok(EvalResult {
        summary: counts.summary(cfg.ignore_empty),
        counts,
        probe_iou: if union > 0 { inter as f64 / union as f64 } else { f64::NAN },
        probe_windows,
    })
}

/// Everything a run produced except the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub epoch_losses: Vec<f64>,
    pub miou: f64,
    /// mIoU over classes present in prediction or ground truth.
    pub miou_all: f64,
    pub per_class: Vec<Option<f64>>,
    pub probe_iou: f64,
    pub probe_windows: usize,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(config: &PipelineConfig, epoch_losses: Vec<f64>, steps: usize, eval: &EvalResult, wall_clock_secs: f64) -> Self {
        Self {
            config: config.clone(),
            epoch_losses,
            miou: eval.summary.miou,
            miou_all: eval.summary.miou_all,
            per_class: eval.summary.per_class.clone(),
            probe_iou: eval.probe_iou,
            probe_windows: eval.probe_windows,
            steps,
            wall_clock_secs,
        }
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }

    /// The same report with the timing zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn summary(&self) -> MiouResult {
        MiouResult {
            per_class: self.per_class.clone(),
            miou: self.miou,
            miou_all: self.miou_all,
        }
    }

    /// `key,value` rows. Floats use the shortest representation that parses
    /// back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let mut row = |k: &str, v: String| writeln!(out, "{k},{v}").expect("string write");
        row("miou", self.miou.to_string());
        row("miou_all", self.miou_all.to_string());
        row("probe_iou", self.probe_iou.to_string());
        row("probe_windows", self.probe_windows.to_string());
        row("steps", self.steps.to_string());
        row("wall_clock_secs", self.wall_clock_secs.to_string());
        for (e, l) in self.epoch_losses.iter().enumerate() {
            row(&format!("epoch_loss.{}", e + 1), l.to_string());
        }
        for (c, iou) in self.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
            row(&format!("iou.{c}.{name}"), iou.map(|v| v.to_string()).unwrap_or_default());
        }
        for k in PipelineConfig::KEYS {
            row(&format!("config.{k}"), self.config.get(k).expect("known key"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("key,value") {
            return Err(Error::Parse("report must start with key,value".into()));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|e| Error::Parse(format!("{v:?}: {e}")));
        let count = |v: &str| v.parse::<usize>().map_err(|e| Error::Parse(format!("{v:?}: {e}")));
        let mut r = Self {
            config: PipelineConfig::default(),
            epoch_losses: Vec::new(),
            miou: f64::NAN,
            miou_all: f64::NAN,
            per_class: Vec::new(),
            probe_iou: f64::NAN,
            probe_windows: 0,
            steps: 0,
            wall_clock_secs: 0.0,
        };
        for line in lines {
            let (k, v) = line.split_once(',').ok_or_else(|| Error::Parse(format!("bad report row {line:?}")))?;
            match k {
                "miou" => r.miou = num(v)?,
                "miou_all" => r.miou_all = num(v)?,
                "probe_iou" => r.probe_iou = num(v)?,
                "probe_windows" => r.probe_windows = count(v)?,
                "steps" => r.steps = count(v)?,
                "wall_clock_secs" => r.wall_clock_secs = num(v)?,
                _ if k.starts_with("epoch_loss.") => r.epoch_losses.push(num(v)?),
                _ if k.starts_with("iou.") => r.per_class.push(if v.is_empty() { None } else { Some(num(v)?) }),
                _ => match k.strip_prefix("config.") {
                    Some(key) => r.config.set(key, v)?,
                    None => return Err(Error::Parse(format!("unknown report key {k:?}"))),
                },
            }
        }
        Ok(r)
    }
}

/// Model and report of one training run.
pub struct TrainedRun {
    pub model: Model,
    pub report: RunReport,
}

/// Builds a model from `cfg`, trains it on `data.train` and evaluates it on
/// `data.eval`.
pub fn train(cfg: &PipelineConfig, data: &Dataset, hook: Option<StepHook<'_>>) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut model = Model::new(cfg)?;
    let losses = train_model(&mut model, data, hook)?;
    let steps = losses.len() * data.train.iter().map(|d| windows(d, cfg.queue_len).count()).sum::<usize>();
    let eval = evaluate(&model, &data.eval)?;
    let report = RunReport::new(cfg, losses, steps, &eval, start.elapsed().as_secs_f64());
    Ok(TrainedRun { model, report })
}
