//! Brute-force reference implementations written as plain loops over raw
//! buffers, sharing no code with the library beyond reading tensors.

#![allow(dead_code)]

use gtad_core::deform_attn::DeformAttnHead;
use gtad_core::encoders::{DecayWeight, Giam, TemporalSelfAttention, VoxelToBev};
use gtad_core::{EgoPose, ParamStore, Tensor, VoxelGridSpec};
use nalgebra::Vector3;

/// Row-major `[h × w × c]` buffer.
#[derive(Debug, Clone)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3);
        Self {
            h: s[0],
            w: s[1],
            c: s[2],
            data: t.data().to_vec(),
        }
    }

    fn px(&self, i: i64, j: i64) -> Option<&[f64]> {
        if i < 0 || j < 0 || i >= self.h as i64 || j >= self.w as i64 {
            return None;
        }
        let at = (i as usize * self.w + j as usize) * self.c;
        Some(&self.data[at..at + self.c])
    }
}

/// Bilinear read at `(x, y)` = (column, row), zero outside.
pub fn bilinear(map: &Map, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.c];
    let (j0, i0) = (x.floor(), y.floor());
    let (fx, fy) = (x - j0, y - i0);
    for (di, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dj, wx) in [(0, 1.0 - fx), (1, fx)] {
            if let Some(v) = map.px(i0 as i64 + di, j0 as i64 + dj) {
                for ch in 0..map.c {
                    out[ch] += wy * wx * v[ch];
                }
            }
        }
    }
    out
}

/// Trilinear read of `[d0 × d1 × d2 × c]` at continuous index `p`, zero
/// outside.
pub fn trilinear(vol: &[f64], dims: [usize; 3], c: usize, p: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    let base = p.map(f64::floor);
    for a in 0..2i64 {
        for b in 0..2i64 {
            for e in 0..2i64 {
                let idx = [base[0] as i64 + a, base[1] as i64 + b, base[2] as i64 + e];
                if (0..3).any(|ax| idx[ax] < 0 || idx[ax] >= dims[ax] as i64) {
                    continue;
                }
                let mut wgt = 1.0;
                for (ax, bit) in [a, b, e].into_iter().enumerate() {
                    let f = p[ax] - base[ax];
                    wgt *= if bit == 1 { f } else { 1.0 - f };
                }
                let at = ((idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize) * c;
                for ch in 0..c {
                    out[ch] += wgt * vol[at + ch];
                }
            }
        }
    }
    out
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    assert_eq!(v.len(), r);
    (0..c).map(|o| (0..r).map(|i| v[i] * m.data()[i * c + o]).sum()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Parameters of one deformable attention head copied out of a store.
pub struct Da {
    pub offset: Tensor,
    pub weight: Tensor,
    pub value: Tensor,
    pub points: usize,
}

impl Da {
    pub fn read(store: &ParamStore, h: &DeformAttnHead) -> Self {
        Self {
            offset: store.value(h.offset_proj).clone(),
            weight: store.value(h.weight_proj).clone(),
            value: store.value(h.value_proj).clone(),
            points: h.num_points,
        }
    }

    /// `W_vᵀ Σ_m softmax(q W_w)_m · map(ref + (q W_off)_m)`.
    pub fn apply(&self, q: &[f64], reference: [f64; 2], map: &Map) -> Vec<f64> {
        let off = vec_mat(q, &self.offset);
        let w = softmax(&vec_mat(q, &self.weight));
        let mut mixed = vec![0.0; map.c];
        for m in 0..self.points {
            let s = bilinear(map, reference[0] + off[2 * m], reference[1] + off[2 * m + 1]);
            for ch in 0..map.c {
                mixed[ch] += w[m] * s[ch];
            }
        }
        vec_mat(&mixed, &self.value)
    }
}

/// Depth slice `k` of a `[h × w × z × d]` volume.
pub fn slice(vol: &[f64], dims: [usize; 3], d: usize, k: usize) -> Map {
    let [h, w, z] = dims;
    let mut data = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            let at = ((i * w + j) * z + k) * d;
            data.extend_from_slice(&vol[at..at + d]);
        }
    }
    Map { h, w, c: d, data }
}

/// Local temporal self-attention over `[h × w × z × d]` volumes.
pub fn tsa(store: &ParamStore, t: &TemporalSelfAttention, now: &[f64], hist: &[f64], dims: [usize; 3], d: usize) -> Vec<f64> {
    let da = Da::read(store, &t.da);
    let base = store.value(t.base_offsets);
    let [h, w, z] = dims;
    let slices: Vec<Map> = (0..z).map(|k| slice(hist, dims, d, k)).collect();
    let mut out = now.to_vec();
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                let at = ((i * w + j) * z + k) * d;
                let q = &now[at..at + d];
                for n in 0..t.n2 {
                    let r = [j as f64 + base.at(&[n, 0]), i as f64 + base.at(&[n, 1])];
                    let o = da.apply(q, r, &slices[k]);
                    (0..d).for_each(|c| out[at + c] += o[c]);
                }
            }
        }
    }
    out
}

/// Per-slice deformable self-mixing and mean pooling over depth.
pub fn voxel_to_bev(store: &ParamStore, v2b: &VoxelToBev, vol: &[f64], dims: [usize; 3], d: usize) -> Vec<f64> {
    let [h, w, z] = dims;
    let da = v2b.mixing.as_ref().map(|m| Da::read(store, m));
    let mut out = vec![0.0; h * w * d];
    for k in 0..z {
        let map = slice(vol, dims, d, k);
        for i in 0..h {
            for j in 0..w {
                let at = ((i * w + j) * z + k) * d;
                let q = &vol[at..at + d];
                let mixed = match &da {
                    Some(da) => da.apply(q, [j as f64, i as f64], &map),
                    None => vec![0.0; d],
                };
                for c in 0..d {
                    out[(i * w + j) * d + c] += (q[c] + mixed[c]) / z as f64;
                }
            }
        }
    }
    out
}

pub fn omega(store: &ParamStore, decay: &DecayWeight, dt: f64) -> f64 {
    match *decay {
        DecayWeight::Fixed(w) => w,
        DecayWeight::Learned(id) => {
            let raw = store.value(id).item();
            (-(1.0 + raw.exp()).ln() * dt).exp()
        }
    }
}

/// `b_j + ω(|t_i − t_j|)·½(DA_i(⟨b_i, b_j⟩, b_i) + DA_j(⟨b_i, b_j⟩, b_j))`.
pub fn giam(store: &ParamStore, g: &Giam, bi: &Map, bj: &Map, dt: f64) -> Vec<f64> {
    let (da_i, da_j) = (Da::read(store, &g.da_i), Da::read(store, &g.da_j));
    let w = omega(store, &g.decay, dt);
    let d = bj.c;
    let mut out = bj.data.clone();
    for i in 0..bj.h {
        for j in 0..bj.w {
            let at = (i * bj.w + j) * d;
            let mut q = bi.data[at..at + d].to_vec();
            q.extend_from_slice(&bj.data[at..at + d]);
            let r = [j as f64, i as f64];
            let (a, b) = (da_i.apply(&q, r, bi), da_j.apply(&q, r, bj));
            (0..d).for_each(|c| out[at + c] += w * 0.5 * (a[c] + b[c]));
        }
    }
    out
}

/// Resamples a volume captured at `then` into the frame of `now` by pushing
/// every current cell center through world coordinates.
pub fn align(src: &[f64], spec: &VoxelGridSpec, d: usize, now: &EgoPose, then: &EgoPose) -> Vec<f64> {
    let [h, w, z] = spec.dims;
    let cs = spec.cell_size();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                let idx = [i, j, k];
                let c = Vector3::from_fn(|a, _| spec.range_min[a] + (idx[a] as f64 + 0.5) * cs[a]);
                let world = now.rotation() * c + now.translation();
                let local = then.rotation().transpose() * (world - then.translation());
                let p: [f64; 3] = std::array::from_fn(|a| (local[a] - spec.range_min[a]) / cs[a] - 0.5);
                out.extend(trilinear(src, spec.dims, d, p));
            }
        }
    }
    out
}

/// Confusion-free IoU: `|P∩G| / |P∪G|` per class, averaged over classes
/// present in the ground truth.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize, skip_empty: bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for c in (skip_empty as usize)..classes {
        let c = c as u8;
        if !gt.contains(&c) {
            continue;
        }
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        sum += inter as f64 / union as f64;
        n += 1;
    }
    sum / n as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
