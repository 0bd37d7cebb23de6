//! Interpolation kernels shared by the differentiable sampling ops.
//!
//! Both kernels use zero padding: each interpolation corner that falls outside
//! the grid contributes nothing, so a point more than one cell outside reads
//! an exact zero vector.

#[derive(Clone, Copy)]
struct Corner {
    index: usize,
    weight: f64,
    // d weight / d coordinate, one entry per axis
    dw: [f64; 3],
}

fn corners_2d(h: usize, w: usize, x: f64, y: f64, out: &mut Vec<Corner>) {
    out.clear();
    if !x.is_finite() || !y.is_finite() {
        return;
    }
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let cand = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), [-(1.0 - fy), -(1.0 - fx)]),
        (x0 + 1, y0, fx * (1.0 - fy), [1.0 - fy, -fx]),
        (x0, y0 + 1, (1.0 - fx) * fy, [-fy, 1.0 - fx]),
        (x0 + 1, y0 + 1, fx * fy, [fy, fx]),
    ];
    for (cx, cy, weight, d) in cand {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            out.push(Corner {
                index: cy as usize * w + cx as usize,
                weight,
                dw: [d[0], d[1], 0.0],
            });
        }
    }
}

fn corners_3d(dims: [usize; 3], p: [f64; 3], out: &mut Vec<Corner>) {
    out.clear();
    if p.iter().any(|v| !v.is_finite()) {
        return;
    }
    if (0..3).any(|a| p[a] <= -1.0 || p[a] >= dims[a] as f64) {
        return;
    }
    let base: [f64; 3] = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    for corner in 0..8 {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut idx = [0i64; 3];
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        let mut inside = true;
        for a in 0..3 {
            idx[a] = base[a] as i64 + bits[a] as i64;
            if idx[a] < 0 || idx[a] as usize >= dims[a] {
                inside = false;
            }
            if bits[a] == 1 {
                f[a] = frac[a];
                df[a] = 1.0;
            } else {
                f[a] = 1.0 - frac[a];
                df[a] = -1.0;
            }
        }
        if !inside {
            continue;
        }
        let index = (idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize;
        out.push(Corner {
            index,
            weight: f[0] * f[1] * f[2],
            dw: [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]],
        });
    }
}

/// Samples `map[h×w×c]` at `pts[p×2]` given as continuous `(x, y)` pixel
/// coordinates with `x` along the width axis and `y` along the height axis.
pub(crate) fn bilinear_forward(map: &[f64], h: usize, w: usize, c: usize, pts: &[f64]) -> Vec<f64> {
    let n = pts.len() / 2;
    let mut out = vec![0.0; n * c];
    let mut corners = Vec::with_capacity(4);
    for p in 0..n {
        corners_2d(h, w, pts[2 * p], pts[2 * p + 1], &mut corners);
        let dst = &mut out[p * c..(p + 1) * c];
        for cr in &corners {
            let src = &map[cr.index * c..(cr.index + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += cr.weight * s;
            }
        }
    }
    out
}

/// Returns `(d map, d pts)` for the upstream gradient `dout[p×c]`.
pub(crate) fn bilinear_backward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    pts: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = pts.len() / 2;
    let mut dmap = vec![0.0; map.len()];
    let mut dpts = vec![0.0; pts.len()];
    let mut corners = Vec::with_capacity(4);
    for p in 0..n {
        corners_2d(h, w, pts[2 * p], pts[2 * p + 1], &mut corners);
        let g = &dout[p * c..(p + 1) * c];
        for cr in &corners {
            let src = &map[cr.index * c..(cr.index + 1) * c];
            let mut dot = 0.0;
            for ch in 0..c {
                dmap[cr.index * c + ch] += cr.weight * g[ch];
                dot += src[ch] * g[ch];
            }
            dpts[2 * p] += cr.dw[0] * dot;
            dpts[2 * p + 1] += cr.dw[1] * dot;
        }
    }
    (dmap, dpts)
}

/// Samples `vol[d0×d1×d2×c]` at `pts[p×3]` given as continuous index
/// coordinates `(i, j, k)` along the three grid axes in order.
pub(crate) fn trilinear_forward(vol: &[f64], dims: [usize; 3], c: usize, pts: &[f64]) -> Vec<f64> {
    let n = pts.len() / 3;
    let mut out = vec![0.0; n * c];
    let mut corners = Vec::with_capacity(8);
    for p in 0..n {
        corners_3d(dims, [pts[3 * p], pts[3 * p + 1], pts[3 * p + 2]], &mut corners);
        let dst = &mut out[p * c..(p + 1) * c];
        for cr in &corners {
            let src = &vol[cr.index * c..(cr.index + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += cr.weight * s;
            }
        }
    }
    out
}

pub(crate) fn trilinear_backward(
    vol: &[f64],
    dims: [usize; 3],
    c: usize,
    pts: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = pts.len() / 3;
    let mut dvol = vec![0.0; vol.len()];
    let mut dpts = vec![0.0; pts.len()];
    let mut corners = Vec::with_capacity(8);
    for p in 0..n {
        corners_3d(dims, [pts[3 * p], pts[3 * p + 1], pts[3 * p + 2]], &mut corners);
        let g = &dout[p * c..(p + 1) * c];
        for cr in &corners {
            let src = &vol[cr.index * c..(cr.index + 1) * c];
            let mut dot = 0.0;
            for ch in 0..c {
                dvol[cr.index * c + ch] += cr.weight * g[ch];
                dot += src[ch] * g[ch];
            }
            for a in 0..3 {
                dpts[3 * p + a] += cr.dw[a] * dot;
            }
        }
    }
    (dvol, dpts)
}
