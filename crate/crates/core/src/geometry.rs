//! Rigid poses, pinhole cameras, the metric voxel layout and ego-motion
//! alignment of voxel feature volumes.
//!
//! Frames: the ego frame has `x` forward, `y` left, `z` up. Camera frames have
//! `z` along the optical axis, `x` right and `y` down. Pixel coordinates put
//! pixel centers on integers, so `(u, v) = (cx, cy)` is the principal point.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var, MIN_DEPTH};

const ORTHO_TOL: f64 = 1e-9;
const SNAP_TOL: f64 = 1e-12;

/// Rigid transform from a local frame (ego or camera) into its parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    timestamp: usize,
}

impl EgoPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, timestamp: usize) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            timestamp,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(timestamp: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp,
        }
    }

    /// Planar pose: rotation by `yaw` about `z` followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>, timestamp: usize) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
            timestamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("RᵀR deviates from I by {err:e}")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Local → parent.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Parent → local.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `self⁻¹ ∘ other`: maps `other`'s local frame into `self`'s local frame.
    pub fn relative_to(&self, other: &EgoPose) -> (Matrix3<f64>, Vector3<f64>) {
        let rt = self.rotation.transpose();
        (rt * other.rotation, rt * (other.translation - self.translation))
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Result of projecting one point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Pinhole camera with extrinsics expressed as camera → ego.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: EgoPose,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        extrinsics: EgoPose,
        (width, height): (usize, usize),
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            extrinsics,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}×{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        self.extrinsics.validate()
    }

    /// Camera mounted at `position` (ego frame), looking along heading `yaw`
    /// tilted down by `pitch`, with a horizontal field of view `hfov` (rad).
    pub fn looking(yaw: f64, pitch: f64, position: Vector3<f64>, hfov: f64, (width, height): (usize, usize)) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let rot = Matrix3::from_columns(&[right, down, forward]);
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self::new(
            (f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            EgoPose::new(rot, position, 0)?,
            (width, height),
        )
    }

    pub fn ego_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.apply_inverse(p)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Projects an ego-frame point. Points with depth ≤ 1e-6 m or outside
    /// the image are returned with `valid = false`.
    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        let pc = self.ego_to_camera(point);
        let depth = pc.z;
        if depth <= MIN_DEPTH {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            };
        }
        let u = self.fx * pc.x / depth + self.cx;
        let v = self.fy * pc.y / depth + self.cy;
        Projection {
            u,
            v,
            depth,
            valid: self.contains_pixel(u, v),
        }
    }

    /// Inverse of [`project`](Self::project) at a known camera depth.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.extrinsics.apply(&pc)
    }

    /// Unit ray direction (ego frame) through pixel `(u, v)` and the camera
    /// origin.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir = self.extrinsics.rotation() * d;
        (*self.extrinsics.translation(), dir.normalize())
    }
}

/// Metric layout of an ego-centred voxel grid. Axis `i` runs along ego `x`,
/// `j` along `y`, `k` along `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub dims: [usize; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], range_min: [f64; 3], range_max: [f64; 3]) -> Result<Self> {
        let spec = Self {
            dims,
            range_min,
            range_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 10×10×4 cells of 1 m over x, y ∈ [−5, 5], z ∈ [−1, 3].
    pub fn desk() -> Self {
        Self {
            dims: [10, 10, 4],
            range_min: [-5.0, -5.0, -1.0],
            range_max: [5.0, 5.0, 3.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("grid dims must be positive: {:?}", self.dims)));
        }
        for a in 0..3 {
            if !(self.range_max[a] > self.range_min[a]) {
                return Err(Error::Config(format!(
                    "range_max must exceed range_min on axis {a}: {:?} vs {:?}",
                    self.range_max, self.range_min
                )));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.range_max[a] - self.range_min[a]) / self.dims[a] as f64)
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Number of BEV cells, `H·W`.
    pub fn bev_cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Result<Vector3<f64>> {
        if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
            return Err(Error::IndexOutOfRange {
                index: vec![i, j, k],
                dims: self.dims.to_vec(),
            });
        }
        Ok(self.center_unchecked([i, j, k]))
    }

    pub(crate) fn center_unchecked(&self, idx: [usize; 3]) -> Vector3<f64> {
        let cs = self.cell_size();
        Vector3::from_fn(|a, _| self.range_min[a] + (idx[a] as f64 + 0.5) * cs[a])
    }

    /// Continuous cell coordinates of a metric point; cell centers land on
    /// integers.
    pub fn continuous_index(&self, p: &Vector3<f64>) -> [f64; 3] {
        let cs = self.cell_size();
        std::array::from_fn(|a| (p[a] - self.range_min[a]) / cs[a] - 0.5)
    }

    /// Cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let cs = self.cell_size();
        let mut out = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.range_min[a]) / cs[a]).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Same metric extent with each axis refined by `factors`.
    pub fn refined(&self, factors: [usize; 3]) -> Self {
        Self {
            dims: std::array::from_fn(|a| self.dims[a] * factors[a]),
            ..*self
        }
    }
}

fn snap_unit(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < SNAP_TOL {
            return target;
        }
    }
    v
}

fn snap_integer(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Continuous source-grid coordinates, one row per current cell, of where each
/// current cell center was in the source (past) frame.
pub fn alignment_points(spec: &VoxelGridSpec, pose_now: &EgoPose, pose_then: &EgoPose) -> Result<Tensor> {
    pose_now.validate()?;
    pose_then.validate()?;
    let (mut rot, mut trans) = pose_then.relative_to(pose_now);
    rot.iter_mut().for_each(|v| *v = snap_unit(*v));
    trans.iter_mut().for_each(|v| {
        if v.abs() < SNAP_TOL {
            *v = 0.0
        }
    });
    let n = spec.num_cells();
    let mut pts = Vec::with_capacity(3 * n);
    for idx in 0..n {
        let c = spec.center_unchecked(spec.unflatten(idx));
        let p = rot * c + trans;
        pts.extend(spec.continuous_index(&p).map(snap_integer));
    }
    Tensor::new(&[n, 3], pts)
}

/// Resamples a past voxel feature volume `src[H×W×Z×D]` (expressed at
/// `pose_then`) into the frame of `pose_now`. Cells whose past location lies
/// outside the grid read zeros. Differentiable with respect to `src`.
pub fn align_voxel_features<'t>(
    src: &Var<'t>,
    spec: &VoxelGridSpec,
    pose_now: &EgoPose,
    pose_then: &EgoPose,
) -> Result<Var<'t>> {
    let shape = src.shape();
    if shape.len() != 4 || shape[..3] != spec.dims {
        return Err(crate::error::shape_err("align_voxel_features", &shape, &spec.dims));
    }
    let pts = alignment_points(spec, pose_now, pose_then)?;
    let sampled = src.trilinear_sample(&src.tape.constant(pts))?;
    sampled.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;
    use crate::numerics::{Rng, Tape};

    fn unit_spec(dims: [usize; 3], lo: f64, hi: f64) -> VoxelGridSpec {
        VoxelGridSpec::new(dims, [lo; 3], [hi; 3]).unwrap()
    }

    #[test]
    fn voxel_center_examples() {
        let s = unit_spec([2, 2, 2], 0.0, 1.0);
        assert_eq!(s.voxel_center(0, 0, 0).unwrap(), Vector3::new(0.25, 0.25, 0.25));
        let s = unit_spec([3, 5, 7], -1.0, 1.0);
        let c = s.voxel_center(1, 2, 3).unwrap();
        assert!(c.norm() < 1e-15);
        let d = VoxelGridSpec::desk();
        assert_eq!(d.voxel_center(0, 0, 0).unwrap(), Vector3::new(-4.5, -4.5, -0.5));
        assert!(d.voxel_center(10, 0, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(VoxelGridSpec::new([1, 1, 1], [0.0; 3], [0.0, 1.0, 1.0]).is_err());
        assert!(VoxelGridSpec::new([0, 1, 1], [0.0; 3], [1.0; 3]).is_err());
        assert_eq!(VoxelGridSpec::desk().cell_size(), [1.0, 1.0, 1.0]);
    }

    fn forward_cam() -> CameraModel {
        // optical axis along ego +x
        CameraModel::new(
            (100.0, 100.0, 50.0, 50.0),
            EgoPose::new(
                Matrix3::from_columns(&[
                    Vector3::new(0.0, -1.0, 0.0),
                    Vector3::new(0.0, 0.0, -1.0),
                    Vector3::new(1.0, 0.0, 0.0),
                ]),
                Vector3::zeros(),
                0,
            )
            .unwrap(),
            (100, 100),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = forward_cam();
        let p = cam.project(&Vector3::new(1.0, 0.0, 0.0));
        assert!(p.valid && p.u == 50.0 && p.v == 50.0);
        assert!(!cam.project(&Vector3::new(-1.0, 0.0, 0.0)).valid);
        // camera-frame (0.1, 0, 1) is ego (1, -0.1, 0)
        let p = cam.project(&Vector3::new(1.0, -0.1, 0.0));
        assert!((p.u - 60.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12);
        assert!(!cam.project(&Vector3::new(1.0, -5.0, 0.0)).valid);
    }

    #[test]
    fn back_projection_recovers_point() {
        let cam = CameraModel::looking(0.7, 0.2, Vector3::new(0.3, -0.2, 1.1), 1.6, (32, 24)).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let p = cam.back_project(rng.uniform(0.0, 31.0), rng.uniform(0.0, 23.0), rng.uniform(0.5, 9.0));
            let pr = cam.project(&p);
            assert!(pr.valid);
            let q = cam.back_project(pr.u, pr.v, pr.depth);
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn pose_validation_rejects_non_rotations() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(EgoPose::new(m, Vector3::zeros(), 0).is_err());
        m[(0, 0)] = 1.01;
        assert!(EgoPose::new(m, Vector3::zeros(), 0).is_err());
        assert!(EgoPose::new(yaw_matrix(0.3), Vector3::zeros(), 0).is_ok());
    }

    /// Explicit per-cell integer shift.
    fn shifted(src: &Tensor, dims: [usize; 3], di: i64) -> Tensor {
        let d = src.shape()[3];
        let mut out = Tensor::zeros(src.shape());
        for i in 0..dims[0] {
            let si = i as i64 + di;
            if si < 0 || si >= dims[0] as i64 {
                continue;
            }
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for c in 0..d {
                        out.set(&[i, j, k, c], src.at(&[si as usize, j, k, c]));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_integer_translation() {
        let spec = VoxelGridSpec::desk();
        let tape = Tape::new();
        let src = Rng::new(1).normal_tensor(&[10, 10, 4, 3], 1.0);
        let v = tape.constant(src.clone());
        let pose = EgoPose::from_yaw(0.4, Vector3::new(3.0, -1.0, 0.0), 1);
        let out = align_voxel_features(&v, &spec, &pose, &pose).unwrap();
        assert!(out.value().bit_eq(&src));

        let then = EgoPose::identity(0);
        let now = EgoPose::from_yaw(0.0, Vector3::new(1.0, 0.0, 0.0), 1);
        let out = align_voxel_features(&v, &spec, &now, &then).unwrap();
        assert!(out.value().bit_eq(&shifted(&src, spec.dims, 1)));
        let out = align_voxel_features(&v, &spec, &then, &now).unwrap();
        assert!(out.value().bit_eq(&shifted(&src, spec.dims, -1)));
    }

    #[test]
    fn quarter_turn_on_symmetric_volume() {
        let spec = VoxelGridSpec::desk();
        let mut src = Tensor::zeros(&[10, 10, 4, 2]);
        for idx in 0..spec.num_cells() {
            let [i, j, k] = spec.unflatten(idx);
            let c = spec.center_unchecked([i, j, k]);
            let r = (c.x * c.x + c.y * c.y).sqrt();
            src.set(&[i, j, k, 0], (r * 0.7).cos() + c.z);
            src.set(&[i, j, k, 1], r * r);
        }
        let tape = Tape::new();
        let v = tape.constant(src.clone());
        let now = EgoPose::from_yaw(FRAC_PI_2, Vector3::zeros(), 1);
        let out = align_voxel_features(&v, &spec, &now, &EgoPose::identity(0)).unwrap();
        assert!(out.value().max_abs_diff(&src) < 1e-9);
    }

    #[test]
    fn dims_mismatch_is_an_error() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let p = EgoPose::identity(0);
        assert!(align_voxel_features(&v, &VoxelGridSpec::desk(), &p, &p).is_err());
    }
}
