//! Procedural desk-scale driving scenes.
//!
//! A scene is a ground plane, static walls and vegetation, moving boxes and an
//! ego vehicle with a ring of pinhole cameras. Each frame yields a fine
//! ground-truth label grid and per-camera semantic feature images obtained by
//! ray casting. Every scene carries an occlusion probe: a parked object that is
//! visible in some history frame and hidden from all cameras at a later frame
//! by a truck crossing in front of it. A decoy on the other side of the ego
//! repeats the crossing truck with nothing parked behind it, so a hidden
//! object can only be told apart from a decoy through the history.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{yaw_matrix, CameraModel, EgoPose, VoxelGridSpec};
use crate::numerics::{Rng, Tensor};

/// Semantic classes excluding empty.
pub const NUM_CLASSES: usize = 6;
pub const EMPTY: u8 = 0;
pub const GROUND: u8 = 1;
pub const WALL: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const CAR: u8 = 4;
pub const TRUCK: u8 = 5;
pub const PEDESTRIAN: u8 = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES + 1] = ["empty", "ground", "wall", "vegetation", "car", "truck", "pedestrian"];

/// Soft bins over the hit distance along the ray, one per meter.
pub const DEPTH_BINS: usize = 8;

/// Image feature channels: class one-hot with index 0 for "no hit", inverse
/// depth, the surface normal in the ego frame, then [`DEPTH_BINS`] triangular
/// bins of the ray distance centered at `0.5, 1.5, ...` meters.
pub const IMAGE_CHANNELS: usize = NUM_CLASSES + 1 + 1 + 3 + DEPTH_BINS;

pub fn is_thing(class: u8) -> bool {
    class >= CAR
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub grid: VoxelGridSpec,
    /// Refinement of `grid` for the ground truth.
    pub fine_factors: [usize; 3],
    pub num_cameras: usize,
    pub image_size: (usize, usize),
    pub hfov: f64,
    pub camera_height: f64,
    pub camera_pitch: f64,
    pub num_frames: usize,
    pub history: usize,
    /// Moving objects besides the probe, the decoy and their occluders.
    pub num_objects: usize,
    pub object_speed: (f64, f64),
    pub ego_speed: f64,
    pub max_yaw_rate: f64,
    pub num_vegetation: usize,
    pub occlusion_probe: bool,
    pub occlusion_decoy: bool,
    /// Inclusive range of consecutive frames the probe stays hidden.
    pub probe_hidden: (usize, usize),
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::desk(),
            fine_factors: [4, 4, 2],
            num_cameras: 2,
            image_size: (32, 32),
            hfov: 100f64.to_radians(),
            camera_height: 1.0,
            camera_pitch: 0.15,
            num_frames: 8,
            history: 4,
            num_objects: 3,
            object_speed: (0.0, 0.4),
            ego_speed: 0.3,
            max_yaw_rate: 0.03,
            num_vegetation: 2,
            occlusion_probe: true,
            occlusion_decoy: true,
            probe_hidden: (1, 3),
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.fine_factors.contains(&0) || self.num_cameras == 0 || self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("counts must be positive".into());
        }
        if self.num_frames < self.history + 1 {
            return bad(format!("num_frames {} < history + 1 = {}", self.num_frames, self.history + 1));
        }
        if !(self.hfov > 0.0 && self.hfov < std::f64::consts::PI) {
            return bad(format!("hfov {} must lie in (0, π)", self.hfov));
        }
        if self.object_speed.0 < 0.0 || self.object_speed.1 < self.object_speed.0 {
            return bad(format!("bad object speed range {:?}", self.object_speed));
        }
        let (lo, hi) = self.probe_hidden;
        if (self.occlusion_probe || self.occlusion_decoy) && (lo == 0 || hi < lo || hi > self.history.saturating_sub(1).max(1)) {
            return bad(format!("probe_hidden {:?} must be within 1..history-1", self.probe_hidden));
        }
        Ok(())
    }

    pub fn fine_grid(&self) -> VoxelGridSpec {
        self.grid.refined(self.fine_factors)
    }

    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        (0..self.num_cameras)
            .map(|n| {
                let yaw = 2.0 * std::f64::consts::PI * n as f64 / self.num_cameras as f64;
                CameraModel::looking(
                    yaw,
                    self.camera_pitch,
                    Vector3::new(0.0, 0.0, self.camera_height),
                    self.hfov,
                    self.image_size,
                )
            })
            .collect()
    }
}

/// Oriented box standing on the ground plane, moving linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    /// World `(x, y)` of the footprint center at frame 0.
    pub start: Vector2<f64>,
    pub yaw: f64,
    /// World displacement per frame.
    pub velocity: Vector2<f64>,
}

impl SceneObject {
    pub fn center(&self, frame: usize) -> Vector2<f64> {
        self.start + self.velocity * frame as f64
    }

    /// Footprint center on the ground plane in world coordinates.
    pub fn position(&self, frame: usize) -> Vector3<f64> {
        let c = self.center(frame);
        Vector3::new(c.x, c.y, 0.0)
    }

    /// Whether a world point lies strictly inside the box at `frame`.
    pub fn contains(&self, frame: usize, p: &Vector3<f64>) -> bool {
        let l = self.to_local(frame, p);
        l.x.abs() < self.size[0] / 2.0 && l.y.abs() < self.size[1] / 2.0 && l.z > 0.0 && l.z < self.size[2]
    }

    fn to_local(&self, frame: usize, p: &Vector3<f64>) -> Vector3<f64> {
        let c = self.center(frame);
        yaw_matrix(self.yaw).transpose() * Vector3::new(p.x - c.x, p.y - c.y, p.z)
    }

    /// Entry distance and outward world normal of a ray against the box.
    pub fn intersect(&self, frame: usize, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let rot = yaw_matrix(self.yaw);
        let o = self.to_local(frame, origin);
        let d = rot.transpose() * dir;
        let lo = [-self.size[0] / 2.0, -self.size[1] / 2.0, 0.0];
        let hi = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2]];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut axis = 0;
        let mut sign = 0.0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] <= lo[a] || o[a] >= hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            let s = if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
                1.0
            } else {
                -1.0
            };
            if ta > t0 {
                t0 = ta;
                axis = a;
                sign = s;
            }
            t1 = t1.min(tb);
        }
        if t0 > t1 || t0 <= 1e-9 {
            return None;
        }
        let mut n = Vector3::zeros();
        n[axis] = sign;
        Some((t0, rot * n))
    }
}

/// The object hidden at `frame` and the number of hidden frames ending there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub object: usize,
    /// The truck that hides it.
    pub occluder: usize,
    pub frame: usize,
    pub hidden_frames: usize,
}

/// Where a hidden object would have stood behind a crossing truck.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoy {
    pub phantom: SceneObject,
    pub frame: usize,
    pub hidden_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cfg: SceneConfig,
    pub objects: Vec<SceneObject>,
    /// Ego → world, one per frame.
    pub ego_poses: Vec<EgoPose>,
    pub cameras: Vec<CameraModel>,
    pub probe: Option<Probe>,
    pub decoy: Option<Decoy>,
}

/// Result of one ray cast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub class: u8,
    /// Index into `Scene::objects`, `None` for the ground plane.
    pub object: Option<usize>,
    pub normal: Vector3<f64>,
}

impl Scene {
    /// Nearest surface along a world-frame ray.
    pub fn ray_cast(&self, frame: usize, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.z < -1e-12 && origin.z > 0.0 {
            best = Some(Hit {
                distance: -origin.z / dir.z,
                class: GROUND,
                object: None,
                normal: Vector3::z(),
            });
        }
        for (i, o) in self.objects.iter().enumerate() {
            if let Some((t, n)) = o.intersect(frame, origin, dir) {
                if best.is_none_or(|b| t < b.distance) {
                    best = Some(Hit {
                        distance: t,
                        class: o.class,
                        object: Some(i),
                        normal: n,
                    });
                }
            }
        }
        best
    }

    /// World-frame ray through pixel `(u, v)` of camera `cam` at `frame`.
    pub fn pixel_ray(&self, frame: usize, cam: usize, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (o, d) = self.cameras[cam].pixel_ray(u, v);
        let pose = &self.ego_poses[frame];
        (pose.apply(&o), pose.rotation() * d)
    }

    /// Object index hit by every pixel of every camera.
    pub fn object_buffer(&self, frame: usize) -> Vec<Vec<Option<usize>>> {
        let (w, h) = self.cfg.image_size;
        (0..self.cameras.len())
            .map(|c| {
                (0..h * w)
                    .map(|p| {
                        let (o, d) = self.pixel_ray(frame, c, (p % w) as f64, (p / w) as f64);
                        self.ray_cast(frame, &o, &d).and_then(|hit| hit.object)
                    })
                    .collect()
            })
            .collect()
    }

    /// Number of pixels, over all cameras, whose nearest surface is `object`.
    pub fn visible_pixels(&self, frame: usize, object: usize) -> usize {
        self.object_buffer(frame).iter().flatten().filter(|&&o| o == Some(object)).count()
    }
}

/// Labels of a label grid plus the owning object per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub labels: Vec<u8>,
    pub fg: Vec<bool>,
    pub owner: Vec<Option<usize>>,
}

/// Labels each cell of `spec` (ego frame of `frame`) by the object containing
/// its center: moving objects first in list order, then static ones, then
/// the ground below `z = 0`.
pub fn rasterize_occupancy(scene: &Scene, frame: usize, spec: &VoxelGridSpec) -> Result<Raster> {
    if frame >= scene.ego_poses.len() {
        return Err(Error::IndexOutOfRange {
            index: vec![frame],
            dims: vec![scene.ego_poses.len()],
        });
    }
    let pose = &scene.ego_poses[frame];
    let n = spec.num_cells();
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by_key(|&i| !is_thing(scene.objects[i].class));
    let mut labels = vec![EMPTY; n];
    let mut owner = vec![None; n];
    for (idx, (label, own)) in labels.iter_mut().zip(owner.iter_mut()).enumerate() {
        let p = pose.apply(&spec.center_unchecked(spec.unflatten(idx)));
        if let Some(&i) = order.iter().find(|&&i| scene.objects[i].contains(frame, &p)) {
            *label = scene.objects[i].class;
            *own = Some(i);
        } else if p.z < 0.0 {
            *label = GROUND;
        }
    }
    let fg = labels.iter().map(|&l| is_thing(l)).collect();
    Ok(Raster { labels, fg, owner })
}

/// Per-camera `[h×w×IMAGE_CHANNELS]` semantic feature images.
pub fn render_views(scene: &Scene, frame: usize) -> Vec<Tensor> {
    let (w, h) = scene.cfg.image_size;
    (0..scene.cameras.len())
        .map(|c| {
            let cam = &scene.cameras[c];
            let mut img = Tensor::zeros(&[h, w, IMAGE_CHANNELS]);
            for v in 0..h {
                for u in 0..w {
                    let (o, d) = scene.pixel_ray(frame, c, u as f64, v as f64);
                    let px = &mut img.data_mut()[(v * w + u) * IMAGE_CHANNELS..][..IMAGE_CHANNELS];
                    match scene.ray_cast(frame, &o, &d) {
                        None => px[0] = 1.0,
                        Some(hit) => {
                            px[hit.class as usize] = 1.0;
                            // depth along the optical axis
                            let (_, axis) = cam.pixel_ray(cam.cx, cam.cy);
                            let axis = scene.ego_poses[frame].rotation() * axis;
                            px[NUM_CLASSES + 1] = 1.0 / (hit.distance * d.dot(&axis)).max(1e-3);
                            let n = scene.ego_poses[frame].rotation().transpose() * hit.normal;
                            px[NUM_CLASSES + 2..NUM_CLASSES + 5].copy_from_slice(n.as_slice());
                            for (b, v) in px[NUM_CLASSES + 5..].iter_mut().enumerate() {
                                *v = (1.0 - (hit.distance - (b as f64 + 0.5)).abs()).max(0.0);
                            }
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn ego_trajectory(cfg: &SceneConfig, rng: &mut Rng) -> Vec<EgoPose> {
    let rate = rng.uniform(-cfg.max_yaw_rate, cfg.max_yaw_rate);
    let mut pos = Vector3::zeros();
    (0..cfg.num_frames)
        .map(|f| {
            let yaw = rate * f as f64;
            let pose = EgoPose::from_yaw(yaw, pos, f);
            pos += cfg.ego_speed * Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            pose
        })
        .collect()
}

fn static_layout(cfg: &SceneConfig, rng: &mut Rng) -> Vec<SceneObject> {
    let travel = cfg.ego_speed * cfg.num_frames as f64;
    let mut out = Vec::new();
    let span = (cfg.grid.range_min[0] - 4.0, cfg.grid.range_max[0] + travel + 4.0);
    for side in [-1.0, 1.0] {
        let y = side * rng.uniform(3.8, 4.6);
        // a wall with one gap
        let gap = rng.uniform(span.0 + 3.0, span.1 - 3.0);
        let height = rng.uniform(1.6, 2.6);
        for (a, b) in [(span.0, gap - 1.0), (gap + 1.0, span.1)] {
            out.push(SceneObject {
                class: WALL,
                size: [b - a, 0.4, height],
                start: Vector2::new((a + b) / 2.0, y),
                yaw: 0.0,
                velocity: Vector2::zeros(),
            });
        }
    }
    for _ in 0..cfg.num_vegetation {
        let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let s = rng.uniform(0.6, 1.0);
        out.push(SceneObject {
            class: VEGETATION,
            size: [s, s, rng.uniform(0.8, 1.8)],
            start: Vector2::new(rng.uniform(span.0 + 2.0, span.1 - 2.0), side * rng.uniform(2.6, 3.3)),
            yaw: rng.uniform(0.0, std::f64::consts::PI),
            velocity: Vector2::zeros(),
        });
    }
    out
}

fn thing_size(class: u8, rng: &mut Rng) -> [f64; 3] {
    match class {
        CAR => [rng.uniform(1.6, 2.1), rng.uniform(0.9, 1.1), rng.uniform(1.2, 1.6)],
        TRUCK => [rng.uniform(3.0, 3.8), rng.uniform(1.1, 1.4), rng.uniform(2.3, 2.8)],
        _ => [0.5, 0.5, rng.uniform(1.6, 1.9)],
    }
}

/// Whether the footprints of `a` and `b`, each grown by `margin`, are
/// disjoint at `frame` (separating axis test on the two rectangles).
fn footprints_apart(a: &SceneObject, b: &SceneObject, frame: usize, margin: f64) -> bool {
    let d = b.center(frame) - a.center(frame);
    let axes = |o: &SceneObject| [Vector2::new(o.yaw.cos(), o.yaw.sin()), Vector2::new(-o.yaw.sin(), o.yaw.cos())];
    let extent = |o: &SceneObject, n: &Vector2<f64>| {
        let [u, v] = axes(o);
        (o.size[0] / 2.0 + margin) * u.dot(n).abs() + (o.size[1] / 2.0 + margin) * v.dot(n).abs()
    };
    axes(a)
        .into_iter()
        .chain(axes(b))
        .any(|n| d.dot(&n).abs() > extent(a, &n) + extent(b, &n))
}

/// Footprints of `cand` and every thing in `objects` stay apart in every
/// frame.
fn things_clear(objects: &[SceneObject], cand: &SceneObject, frames: usize) -> bool {
    (0..frames).all(|f| {
        objects
            .iter()
            .filter(|o| is_thing(o.class))
            .all(|o| footprints_apart(o, cand, f, 0.1))
    })
}

/// Footprint of the camera rig; occluding trucks may pass close to it.
const CAMERA_MAST: [f64; 2] = [0.8, 0.8];

/// Footprint of `cand` stays off an ego box of `extent` (length, width) in
/// every frame.
fn ego_clear(cand: &SceneObject, frames: usize, poses: &[EgoPose], extent: [f64; 2]) -> bool {
    (0..frames).all(|f| {
        let t = poses[f].translation();
        let ego = SceneObject {
            class: EMPTY,
            size: [extent[0], extent[1], 1.5],
            start: Vector2::new(t.x, t.y),
            yaw: poses[f].yaw(),
            velocity: Vector2::zeros(),
        };
        footprints_apart(&ego, cand, f, 0.1)
    })
}

/// [`things_clear`] and additionally clear of the ego vehicle.
fn footprint_clear(objects: &[SceneObject], cand: &SceneObject, frames: usize, poses: &[EgoPose]) -> bool {
    ego_clear(cand, frames, poses, [3.0, 2.4]) && things_clear(objects, cand, frames)
}

fn random_things(cfg: &SceneConfig, poses: &[EgoPose], objects: &mut Vec<SceneObject>, rng: &mut Rng) {
    let mut placed = 0;
    let mut attempts = 0;
    let travel = cfg.ego_speed * cfg.num_frames as f64;
    while placed < cfg.num_objects && attempts < 50 * cfg.num_objects.max(1) {
        attempts += 1;
        let class = [CAR, CAR, TRUCK, PEDESTRIAN][rng.below(0, 4)];
        let heading = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let speed = rng.uniform(cfg.object_speed.0, cfg.object_speed.1) * if class == PEDESTRIAN { 0.4 } else { 1.0 };
        let cand = SceneObject {
            class,
            size: thing_size(class, rng),
            start: Vector2::new(rng.uniform(-4.5, 4.5 + travel), rng.uniform(-3.2, 3.2)),
            yaw: heading,
            velocity: Vector2::new(heading.cos(), heading.sin()) * speed,
        };
        if footprint_clear(objects, &cand, cfg.num_frames, poses) {
            objects.push(cand);
            placed += 1;
        }
    }
}

/// A parked object, a truck crossing between it and the ego, the frame at
/// which the object should be hidden and for how many frames.
struct Occlusion {
    hidden_object: SceneObject,
    truck: SceneObject,
    frame: usize,
    hidden: usize,
}

/// `side` is `1` for an object ahead of the ego and `-1` for one behind.
fn sample_occlusion(scene: &Scene, side: f64, rng: &mut Rng) -> Occlusion {
    let cfg = &scene.cfg;
    let frame = rng.below(cfg.history, cfg.num_frames);
    let hidden = rng.below(cfg.probe_hidden.0, cfg.probe_hidden.1 + 1);
    let pose = scene.ego_poses[frame];
    let class = CAR;
    let local = Vector3::new(side * rng.uniform(2.8, 4.0), rng.uniform(-1.5, 1.5), 0.0);
    let world = pose.apply(&local);
    let hidden_object = SceneObject {
        class,
        size: thing_size(class, rng),
        start: Vector2::new(world.x, world.y),
        yaw: rng.uniform(0.0, std::f64::consts::PI),
        velocity: Vector2::zeros(),
    };
    let dir = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let speed = rng.uniform(0.5, 1.4);
    let heading = pose.yaw() + dir * std::f64::consts::FRAC_PI_2;
    let vel = Vector2::new(heading.cos(), heading.sin()) * speed;
    let size = thing_size(TRUCK, rng);
    // object extent along the ego heading plus the truck's half width
    let rel = hidden_object.yaw - pose.yaw();
    let depth = hidden_object.size[0] / 2.0 * rel.cos().abs() + hidden_object.size[1] / 2.0 * rel.sin().abs();
    let gap = depth + size[1] / 2.0 + rng.uniform(0.3, 0.6);
    let at_frame = pose.apply(&Vector3::new(local.x - side * gap, local.y + rng.uniform(-0.4, 0.4), 0.0));
    let truck = SceneObject {
        class: TRUCK,
        size,
        start: Vector2::new(at_frame.x, at_frame.y) - vel * frame as f64,
        yaw: heading,
        velocity: vel,
    };
    Occlusion {
        hidden_object,
        truck,
        frame,
        hidden,
    }
}

/// Whether object `idx` of `scene` is hidden for the last `hidden` frames up
/// to `frame` and visible just before.
fn occlusion_holds(scene: &Scene, idx: usize, frame: usize, hidden: usize) -> bool {
    (frame + 1 - hidden..=frame).all(|f| scene.visible_pixels(f, idx) == 0) && scene.visible_pixels(frame - hidden, idx) >= 4
}

/// Places a parked probe object and a crossing truck so that the probe is
/// hidden from every camera for exactly `hidden` frames ending at `frame`
/// and visible in the frame before. Random objects in the way are dropped.
fn place_probe(scene: &mut Scene, rng: &mut Rng) -> Result<()> {
    let cfg = scene.cfg.clone();
    for _ in 0..cfg.max_retries {
        let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let occ = sample_occlusion(scene, side, rng);
        let pair = [occ.hidden_object.clone(), occ.truck.clone()];
        let mut objects = scene.objects.clone();
        objects.retain(|o| !is_thing(o.class) || things_clear(&pair, o, cfg.num_frames));
        objects.extend(pair);
        let probe_idx = objects.len() - 2;
        let trial = Scene { objects, ..scene.clone() };
        if things_clear(&trial.objects[probe_idx + 1..], &trial.objects[probe_idx], cfg.num_frames)
            && ego_clear(&occ.truck, cfg.num_frames, &scene.ego_poses, CAMERA_MAST)
            && occlusion_holds(&trial, probe_idx, occ.frame, occ.hidden) {
            *scene = Scene {
                probe: Some(Probe {
                    object: probe_idx,
                    occluder: probe_idx + 1,
                    frame: occ.frame,
                    hidden_frames: occ.hidden,
                }),
                ..trial
            };
            return Ok(());
        }
    }
    Err(Error::SceneGen(format!(
        "could not place an occlusion probe after {} attempts (seed {})",
        cfg.max_retries, cfg.seed
    )))
}

/// Adds a second crossing truck set up exactly like the probe's, but with
/// the parked object removed after checking it would have been hidden. The
/// phantom marks where a prior-only guess would place an object.
fn place_decoy(scene: &mut Scene, rng: &mut Rng) -> Result<()> {
    let cfg = scene.cfg.clone();
    for _ in 0..cfg.max_retries {
        // opposite the probe, so a hidden object is equally likely on either side
        let side = match scene.probe {
            Some(p) => {
                let at = scene.ego_poses[p.frame].apply_inverse(&scene.objects[p.object].position(p.frame));
                -at.x.signum()
            }
            None if rng.bernoulli(0.5) => 1.0,
            None => -1.0,
        };
        let occ = sample_occlusion(scene, side, rng);
        let n = cfg.num_frames;
        let pair = [occ.hidden_object.clone(), occ.truck.clone()];
        if !things_clear(std::slice::from_ref(&occ.truck), &occ.hidden_object, n)
            || !ego_clear(&occ.truck, n, &scene.ego_poses, CAMERA_MAST)
        {
            continue;
        }
        // random things in the way are dropped, the probe pair is kept
        let keep: Vec<bool> = scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let pinned = scene.probe.is_some_and(|p| i == p.object || i == p.occluder);
                pinned || !is_thing(o.class) || things_clear(&pair, o, n)
            })
            .collect();
        if scene.probe.is_some_and(|p| !keep[p.object] || !keep[p.occluder]) {
            continue;
        }
        let remap = |i: usize| keep[..i].iter().filter(|&&k| k).count();
        let mut objects: Vec<SceneObject> = scene.objects.iter().zip(&keep).filter(|(_, &k)| k).map(|(o, _)| o.clone()).collect();
        objects.push(occ.truck.clone());
        let probe = scene.probe.map(|p| Probe {
            object: remap(p.object),
            occluder: remap(p.occluder),
            ..p
        });
        let with_truck = Scene {
            objects,
            probe,
            ..scene.clone()
        };
        let mut check = with_truck.clone();
        check.objects.push(occ.hidden_object.clone());
        let phantom_idx = check.objects.len() - 1;
        let probe_ok = with_truck
            .probe
            .is_none_or(|p| occlusion_holds(&with_truck, p.object, p.frame, p.hidden_frames));
        if probe_ok && occlusion_holds(&check, phantom_idx, occ.frame, occ.hidden) {
            *scene = Scene {
                decoy: Some(Decoy {
                    phantom: occ.hidden_object,
                    frame: occ.frame,
                    hidden_frames: occ.hidden,
                }),
                ..with_truck
            };
            return Ok(());
        }
    }
    Err(Error::SceneGen(format!(
        "could not place an occlusion decoy after {} attempts (seed {})",
        cfg.max_retries, cfg.seed
    )))
}

/// Builds a scene deterministically from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let ego_poses = ego_trajectory(cfg, &mut rng);
    let mut objects = static_layout(cfg, &mut rng);
    random_things(cfg, &ego_poses, &mut objects, &mut rng);
    let mut scene = Scene {
        cfg: cfg.clone(),
        objects,
        ego_poses,
        cameras: cfg.cameras()?,
        probe: None,
        decoy: None,
    };
    if cfg.occlusion_probe {
        place_probe(&mut scene, &mut rng)?;
    }
    if cfg.occlusion_decoy {
        place_decoy(&mut scene, &mut rng)?;
    }
    Ok(scene)
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub gt_occupancy: Vec<u8>,
    pub fg_mask: Vec<bool>,
    /// Fine cells owned by the probe object (all false without a probe).
    pub probe_mask: Vec<bool>,
    /// Fine cells inside the decoy phantom (all false without a decoy).
    pub decoy_mask: Vec<bool>,
    pub ego_pose: EgoPose,
    pub images: Vec<Tensor>,
}

/// A scene with every frame rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub scene: Scene,
    pub frames: Vec<Frame>,
}

pub fn render_scene(scene: &Scene) -> Result<SceneData> {
    let fine = scene.cfg.fine_grid();
    let frames = (0..scene.cfg.num_frames)
        .map(|f| {
            let r = rasterize_occupancy(scene, f, &fine)?;
            let probe_mask = match scene.probe {
                Some(p) => r.owner.iter().map(|&o| o == Some(p.object)).collect(),
                None => vec![false; r.labels.len()],
            };
            let decoy_mask = (0..fine.num_cells())
                .map(|idx| {
                    let p = scene.ego_poses[f].apply(&fine.center_unchecked(fine.unflatten(idx)));
                    scene.decoy.as_ref().is_some_and(|d| d.phantom.contains(f, &p))
                })
                .collect();
            Ok(Frame {
                gt_occupancy: r.labels,
                fg_mask: r.fg,
                probe_mask,
                decoy_mask,
                ego_pose: scene.ego_poses[f],
                images: render_views(scene, f),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SceneData {
        scene: scene.clone(),
        frames,
    })
}

pub fn generate_scene_data(cfg: &SceneConfig) -> Result<SceneData> {
    render_scene(&generate_scene(cfg)?)
}

pub const SCENE_MAGIC: &str = "GTADSCN v1";

fn fmt_f64s(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn parse_f64s(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
        .collect()
}

/// Text header followed by one binary block per frame: fine labels (u8),
/// probe mask (u8) and every camera image (f64, little-endian).
pub fn write_scene<W: Write>(data: &SceneData, mut w: W) -> Result<()> {
    let s = &data.scene;
    let c = &s.cfg;
    writeln!(w, "{SCENE_MAGIC}")?;
    writeln!(w, "grid {:?} {} {}", c.grid.dims, fmt_f64s(&c.grid.range_min), fmt_f64s(&c.grid.range_max))?;
    writeln!(w, "fine_factors {:?}", c.fine_factors)?;
    writeln!(
        w,
        "cameras {} {} {} {}",
        c.num_cameras,
        c.image_size.0,
        c.image_size.1,
        fmt_f64s(&[c.hfov, c.camera_height, c.camera_pitch])
    )?;
    writeln!(w, "frames {} history {}", c.num_frames, c.history)?;
    writeln!(
        w,
        "motion {} {}",
        c.num_objects,
        fmt_f64s(&[c.object_speed.0, c.object_speed.1, c.ego_speed, c.max_yaw_rate])
    )?;
    writeln!(
        w,
        "layout {} {} {} {} {} {}",
        c.num_vegetation, c.occlusion_probe, c.occlusion_decoy, c.probe_hidden.0, c.probe_hidden.1, c.max_retries
    )?;
    writeln!(w, "seed {}", c.seed)?;
    for cam in &s.cameras {
        let e = &cam.extrinsics;
        let mut v = vec![cam.fx, cam.fy, cam.cx, cam.cy];
        v.extend(e.rotation().transpose().iter());
        v.extend(e.translation().iter());
        writeln!(w, "camera {}", fmt_f64s(&v))?;
    }
    for o in &s.objects {
        writeln!(w, "object {}", fmt_object(o))?;
    }
    match s.probe {
        Some(p) => writeln!(w, "probe {} {} {} {}", p.object, p.occluder, p.frame, p.hidden_frames)?,
        None => writeln!(w, "probe none")?,
    }
    match &s.decoy {
        Some(d) => writeln!(w, "decoy {} {} {}", d.frame, d.hidden_frames, fmt_object(&d.phantom))?,
        None => writeln!(w, "decoy none")?,
    }
    for p in &s.ego_poses {
        let mut v: Vec<f64> = p.rotation().transpose().iter().copied().collect();
        v.extend(p.translation().iter());
        writeln!(w, "pose {} {}", p.timestamp(), fmt_f64s(&v))?;
    }
    writeln!(w, "data")?;
    for f in &data.frames {
        w.write_all(&f.gt_occupancy)?;
        for m in [&f.probe_mask, &f.decoy_mask] {
            w.write_all(&m.iter().map(|&b| b as u8).collect::<Vec<u8>>())?;
        }
        for img in &f.images {
            let mut buf = Vec::with_capacity(img.numel() * 8);
            img.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_object(o: &SceneObject) -> String {
    let v = [o.size[0], o.size[1], o.size[2], o.start.x, o.start.y, o.yaw, o.velocity.x, o.velocity.y];
    format!("{} {}", o.class, fmt_f64s(&v))
}

fn parse_object(s: &str) -> Result<SceneObject> {
    let (class, nums) = s.split_once(' ').ok_or_else(|| Error::Parse(format!("bad object {s:?}")))?;
    let v = parse_f64s(nums)?;
    if v.len() != 8 {
        return Err(Error::Parse("object needs 8 numbers".into()));
    }
    Ok(SceneObject {
        class: class.parse().map_err(|e| Error::Parse(format!("{class:?}: {e}")))?,
        size: [v[0], v[1], v[2]],
        start: Vector2::new(v[3], v[4]),
        yaw: v[5],
        velocity: Vector2::new(v[6], v[7]),
    })
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some(r) } else { None }))
        .ok_or_else(|| Error::Parse(format!("expected {key:?}, found {line:?}")))
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    s.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
        .collect()
}

fn parse_pose(v: &[f64], timestamp: usize) -> Result<EgoPose> {
    if v.len() != 12 {
        return Err(Error::Parse(format!("pose needs 12 numbers, got {}", v.len())));
    }
    let r = nalgebra::Matrix3::from_row_slice(&v[..9]);
    EgoPose::new(r, Vector3::new(v[9], v[10], v[11]), timestamp)
}

pub fn read_scene<R: Read>(r: R) -> Result<SceneData> {
    let mut r = BufReader::new(r);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse("scene file ended before data section".into()));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "data" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.iter().map(String::as_str);
    let mut next = |key: &str| -> Result<String> {
        let l = it.next().ok_or_else(|| Error::Parse(format!("missing {key}")))?;
        Ok(field(l, key)?.to_string())
    };
    if next(SCENE_MAGIC)? != "" {
        return Err(Error::Parse("bad scene magic".into()));
    }
    let g = next("grid")?;
    let (dims, rest) = g.split_once("] ").ok_or_else(|| Error::Parse(format!("bad grid line {g:?}")))?;
    let dims = parse_usizes(dims)?;
    let ranges = parse_f64s(rest)?;
    if dims.len() != 3 || ranges.len() != 6 {
        return Err(Error::Parse(format!("bad grid line {g:?}")));
    }
    let grid = VoxelGridSpec::new([dims[0], dims[1], dims[2]], [ranges[0], ranges[1], ranges[2]], [ranges[3], ranges[4], ranges[5]])?;
    let ff = parse_usizes(&next("fine_factors")?)?;
    let cams = next("cameras")?;
    let cv: Vec<&str> = cams.split_whitespace().collect();
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let camf = parse_f64s(&cv[3..].join(" "))?;
    let fr = next("frames")?;
    let frv: Vec<&str> = fr.split_whitespace().collect();
    let mo = parse_f64s(&next("motion")?)?;
    let lay = next("layout")?;
    let lv: Vec<&str> = lay.split_whitespace().collect();
    let seed = next("seed")?.parse::<u64>().map_err(|e| Error::Parse(e.to_string()))?;
    if cv.len() != 6 || frv.len() != 3 || mo.len() != 5 || lv.len() != 6 || ff.len() != 3 {
        return Err(Error::Parse("malformed scene header".into()));
    }
    let cfg = SceneConfig {
        grid,
        fine_factors: [ff[0], ff[1], ff[2]],
        num_cameras: num(cv[0])?,
        image_size: (num(cv[1])?, num(cv[2])?),
        hfov: camf[0],
        camera_height: camf[1],
        camera_pitch: camf[2],
        num_frames: num(frv[0])?,
        history: num(frv[2])?,
        num_objects: mo[0] as usize,
        object_speed: (mo[1], mo[2]),
        ego_speed: mo[3],
        max_yaw_rate: mo[4],
        num_vegetation: num(lv[0])?,
        occlusion_probe: lv[1] == "true",
        occlusion_decoy: lv[2] == "true",
        probe_hidden: (num(lv[3])?, num(lv[4])?),
        max_retries: num(lv[5])?,
        seed,
    };
    let mut cameras = Vec::new();
    for _ in 0..cfg.num_cameras {
        let v = parse_f64s(&next("camera")?)?;
        if v.len() != 16 {
            return Err(Error::Parse("camera needs 16 numbers".into()));
        }
        cameras.push(CameraModel::new((v[0], v[1], v[2], v[3]), parse_pose(&v[4..], 0)?, cfg.image_size)?);
    }
    let mut objects = Vec::new();
    let mut line = next_any(&mut it)?;
    while let Ok(rest) = field(line, "object") {
        objects.push(parse_object(rest)?);
        line = next_any(&mut it)?;
    }
    let pr = field(line, "probe")?;
    let probe = if pr == "none" {
        None
    } else {
        let v = pr.split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("bad probe line {pr:?}")));
        }
        Some(Probe {
            object: v[0],
            occluder: v[1],
            frame: v[2],
            hidden_frames: v[3],
        })
    };
    let dc = field(next_any(&mut it)?, "decoy")?;
    let decoy = if dc == "none" {
        None
    } else {
        let mut parts = dc.splitn(3, ' ');
        let mut take = || parts.next().ok_or_else(|| Error::Parse(format!("bad decoy line {dc:?}")));
        let (frame, hidden) = (num(take()?)?, num(take()?)?);
        Some(Decoy {
            phantom: parse_object(take()?)?,
            frame,
            hidden_frames: hidden,
        })
    };
    let mut ego_poses = Vec::new();
    for _ in 0..cfg.num_frames {
        let p = field(next_any(&mut it)?, "pose")?;
        let (ts, nums) = p.split_once(' ').ok_or_else(|| Error::Parse(format!("bad pose {p:?}")))?;
        ego_poses.push(parse_pose(&parse_f64s(nums)?, num(ts)?)?);
    }
    let fine = cfg.fine_grid().num_cells();
    let (w, h) = cfg.image_size;
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for pose in &ego_poses {
        let mut labels = vec![0u8; fine];
        r.read_exact(&mut labels)?;
        let mut mask = vec![0u8; fine];
        r.read_exact(&mut mask)?;
        let mut decoy_mask = vec![0u8; fine];
        r.read_exact(&mut decoy_mask)?;
        let mut images = Vec::with_capacity(cfg.num_cameras);
        for _ in 0..cfg.num_cameras {
            let mut raw = vec![0u8; h * w * IMAGE_CHANNELS * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            images.push(Tensor::new(&[h, w, IMAGE_CHANNELS], data)?);
        }
        frames.push(Frame {
            fg_mask: labels.iter().map(|&l| is_thing(l)).collect(),
            gt_occupancy: labels,
            probe_mask: mask.iter().map(|&m| m != 0).collect(),
            decoy_mask: decoy_mask.iter().map(|&m| m != 0).collect(),
            ego_pose: *pose,
            images,
        });
    }
    Ok(SceneData {
        scene: Scene {
            cfg,
            objects,
            ego_poses,
            cameras,
            probe,
            decoy,
        },
        frames,
    })
}

fn next_any<'a>(it: &mut impl Iterator<Item = &'a str>) -> Result<&'a str> {
    it.next().ok_or_else(|| Error::Parse("scene header truncated".into()))
}

pub fn save_scene(data: &SceneData, path: &Path) -> Result<()> {
    write_scene(data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_scene(path: &Path) -> Result<SceneData> {
    read_scene(std::fs::File::open(path)?)
}
