//! Brute-force reference implementations.
//!
//! Everything here is written with explicit loops over plain `f64` buffers and
//! shares no code with the tensor path except parameter values. The oracles
//! back the `oracle` command and the acceptance tests.

use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cdad::{enhance_views, Cda, CdaPass, JointFusion};
use crate::cvwin::{
    exchange_close_to_remote, exchange_remote_to_close, partition_windows, ExchangeProjections,
    WindowGrid,
};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::metrics::{iou, miou, oiou, precision_at, PR_THRESHOLDS};
use crate::nn::{from_f64, to_f64_vec, LayerNorm, Linear, ParamStore};
use crate::rng;

/// One feature map `(h, w, c)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.w + x) * self.c;
        &mut self.data[o..o + self.c]
    }
}

/// Split a `(N, h, w, c)` tensor into maps.
pub fn maps_from_tensor(t: &Tensor) -> Result<Vec<Map>> {
    let (n, h, w, c) = t.dims4()?;
    let v = to_f64_vec(t)?;
    Ok(v.chunks(h * w * c)
        .take(n)
        .map(|d| Map {
            h,
            w,
            c,
            data: d.to_vec(),
        })
        .collect())
}

pub fn maps_to_tensor(maps: &[Map], dtype: DType) -> Result<Tensor> {
    let m = &maps[0];
    let data = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    from_f64(data, &[maps.len(), m.h, m.w, m.c], dtype)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared buffers differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Dense affine map on one token: `x W + b` with `W: (in, out)`.
struct Affine {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    inp: usize,
    out: usize,
}

impl Affine {
    fn of(l: &Linear) -> Result<Self> {
        let (inp, out) = l.weight.dims2()?;
        Ok(Self {
            w: to_f64_vec(&l.weight)?,
            b: l.bias.as_ref().map(to_f64_vec).transpose()?,
            inp,
            out,
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inp);
        let mut y = match &self.b {
            Some(b) => b.clone(),
            None => vec![0.0; self.out],
        };
        for (i, xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * self.w[i * self.out + o];
            }
        }
        y
    }
}

struct Norm {
    g: Vec<f64>,
    b: Vec<f64>,
    eps: f64,
}

impl Norm {
    fn of(ln: &LayerNorm) -> Result<Self> {
        Ok(Self {
            g: to_f64_vec(&ln.gamma)?,
            b: to_f64_vec(&ln.beta)?,
            eps: ln.eps,
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let d = (var + self.eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / d * self.g[i] + self.b[i])
            .collect()
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize(m: &Map, oh: usize, ow: usize) -> Map {
    let sample = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = if lo + 1 < inp { lo + 1 } else { lo };
        (lo, hi, s - lo as f64)
    };
    let mut out = Map::zeros(oh, ow, m.c);
    for oy in 0..oh {
        let (y0, y1, fy) = sample(oy, m.h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = sample(ox, m.w, ow);
            for ch in 0..m.c {
                let v = (1.0 - fy) * ((1.0 - fx) * m.at(y0, x0)[ch] + fx * m.at(y0, x1)[ch])
                    + fy * ((1.0 - fx) * m.at(y1, x0)[ch] + fx * m.at(y1, x1)[ch]);
                out.at_mut(oy, ox)[ch] = v;
            }
        }
    }
    out
}

/// Place `n x n` row-major tiles into one map.
fn assemble(tiles: &[Map], n: usize) -> Map {
    let (h, w, c) = (tiles[0].h, tiles[0].w, tiles[0].c);
    let mut out = Map::zeros(n * h, n * w, c);
    for (t, tile) in tiles.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.at_mut((t / n) * h + y, (t % n) * w + x)
                    .copy_from_slice(tile.at(y, x));
            }
        }
    }
    out
}

fn split(full: &Map, n: usize) -> Vec<Map> {
    let (h, w) = (full.h / n, full.w / n);
    (0..n * n)
        .map(|t| {
            let mut m = Map::zeros(h, w, full.c);
            for y in 0..h {
                for x in 0..w {
                    m.at_mut(y, x)
                        .copy_from_slice(full.at((t / n) * h + y, (t % n) * w + x));
                }
            }
            m
        })
        .collect()
}

fn transpose(m: &Map) -> Map {
    let mut out = Map::zeros(m.w, m.h, m.c);
    for y in 0..m.h {
        for x in 0..m.w {
            out.at_mut(x, y).copy_from_slice(m.at(y, x));
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_k softmax(s)_k v_k` over the listed keys.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys.iter().map(|k| dot(q, k) / scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (wk, v) in e.iter().zip(values) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += wk / z * vi;
        }
    }
    out
}

/// Dense cross-attention from every query pixel to every key pixel, with a
/// block-diagonal mask that keeps only pairs in the same window cell.
pub fn masked_dense_cross_attention(
    query: &Map,
    kv: &Map,
    q_window: usize,
    kv_window: usize,
    proj: Option<&ExchangeProjections>,
) -> Result<Map> {
    let maps = proj
        .map(|p| Ok::<_, Error>((Affine::of(&p.q)?, Affine::of(&p.k)?, Affine::of(&p.v)?)))
        .transpose()?;
    let c = query.c;
    let mut out = Map::zeros(query.h, query.w, c);
    for y in 0..query.h {
        for x in 0..query.w {
            let cell = (y / q_window, x / q_window);
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for ky in 0..kv.h {
                for kx in 0..kv.w {
                    if (ky / kv_window, kx / kv_window) != cell {
                        continue;
                    }
                    let t = kv.at(ky, kx);
                    match &maps {
                        Some((_, k, v)) => {
                            keys.push(k.apply(t));
                            values.push(v.apply(t));
                        }
                        None => {
                            keys.push(t.to_vec());
                            values.push(t.to_vec());
                        }
                    }
                }
            }
            let q = match &maps {
                Some((q, _, _)) => q.apply(query.at(y, x)),
                None => query.at(y, x).to_vec(),
            };
            out.at_mut(y, x)
                .copy_from_slice(&attend(&q, &keys, &values, (c as f64).sqrt()));
        }
    }
    Ok(out)
}

/// Both exchange directions by the masked dense oracle, from stage features
/// `remote (h, h, c)` and the assembled close map `(n h, n h, c)`.
/// Returns `(close -> remote, remote -> close)`.
pub fn oracle_exchange(
    remote: &Map,
    close_full: &Map,
    win: usize,
    n_view: usize,
    proj_remote_query: Option<&ExchangeProjections>,
    proj_close_query: Option<&ExchangeProjections>,
) -> Result<(Map, Map)> {
    let n_win = remote.h.div_ceil(win);
    let rs = n_win * win;
    let cs = n_win * n_view * win;
    let r = resize(remote, rs, rs);
    let c = resize(close_full, cs, cs);
    Ok((
        masked_dense_cross_attention(&r, &c, win, n_view * win, proj_remote_query)?,
        masked_dense_cross_attention(&c, &r, n_view * win, win, proj_close_query)?,
    ))
}

/// Outcome of a batch of oracle trials.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub max_abs_diff: f64,
    pub elapsed: Duration,
    pub tolerance: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < self.tolerance || (self.tolerance == 0.0 && self.max_abs_diff == 0.0)
    }
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Map {
    Map {
        h,
        w,
        c,
        data: (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect(),
    }
}

/// Overwrite every parameter with uniform noise, so that norms and biases are
/// exercised away from their initial values.
pub fn randomize_params(ps: &ParamStore, r: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    for (_, var, _) in ps.all() {
        let t = var.as_tensor();
        let v = (0..t.elem_count())
            .map(|_| r.gen_range(-scale..scale))
            .collect();
        var.set(&from_f64(v, t.dims(), t.dtype())?)?;
    }
    Ok(())
}

/// Window exchange (both directions) against the masked dense oracle.
pub fn run_window_oracle(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let start = Instant::now();
    let mut r = rng::stream(seed, "oracle-window");
    let mut worst = 0f64;
    for trial in 0..trials {
        let h = r.gen_range(1..=6);
        let win = r.gen_range(1..=4);
        let n = r.gen_range(1..=3);
        let c = r.gen_range(1..=5);
        let b = r.gen_range(1..=2);
        let ps = ParamStore::new(DType::F64, seed ^ trial as u64);
        let projections = if trial % 2 == 1 {
            Some((
                ExchangeProjections::new(&ps, "remote", c)?,
                ExchangeProjections::new(&ps, "close", c)?,
            ))
        } else {
            None
        };
        let remotes: Vec<Map> = (0..b).map(|_| random_map(&mut r, h, h, c)).collect();
        let closes: Vec<Map> = (0..b)
            .map(|_| random_map(&mut r, n * h, n * h, c))
            .collect();
        let grid = WindowGrid::new(h, win, n);
        let rt = maps_to_tensor(&remotes, DType::F64)?;
        let ct = maps_to_tensor(&closes, DType::F64)?;
        let rw = partition_windows(&rt, grid.n_win, grid.remote_window)?;
        let cw = partition_windows(&ct, grid.n_win, grid.close_window)?;
        let (pr, pc) = match &projections {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let c2r = maps_from_tensor(&exchange_close_to_remote(&rw, &cw, &grid, pr)?)?;
        let r2c = maps_from_tensor(&exchange_remote_to_close(&cw, &rw, &grid, pc)?)?;
        for i in 0..b {
            let (oc2r, or2c) = oracle_exchange(&remotes[i], &closes[i], win, n, pr, pc)?;
            worst = worst
                .max(max_abs_diff(&oc2r.data, &c2r[i].data))
                .max(max_abs_diff(&or2c.data, &r2c[i].data));
        }
    }
    Ok(OracleOutcome {
        name: "window_attn",
        trials,
        max_abs_diff: worst,
        elapsed: start.elapsed(),
        tolerance: 1e-6,
    })
}

/// Coordinate `i` of `side` normalized to `[-1, 1]`.
fn norm_coord(i: usize, side: usize) -> f64 {
    if side < 2 {
        0.0
    } else {
        2.0 * i as f64 / (side - 1) as f64 - 1.0
    }
}

/// One dilated pass by explicit gathering: for every query pixel the key list
/// is built row by row from the shifted rows of its own slice.
pub fn oracle_cda_pass(
    pass: &CdaPass,
    query: &Map,
    joint: &Map,
    slice: usize,
    offsets: &[usize],
) -> Result<Map> {
    let (pos, q, k, v, ffn) = (
        Affine::of(&pass.pos)?,
        Affine::of(&pass.q)?,
        Affine::of(&pass.k)?,
        Affine::of(&pass.v)?,
        Affine::of(&pass.ffn)?,
    );
    let ln = Norm::of(&pass.ln)?;
    let (ha, c) = (query.h, query.c);
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    let p: Vec<Vec<f64>> = (0..ha * ha)
        .map(|i| pos.apply(&[norm_coord(i % ha, ha), norm_coord(i / ha, ha)]))
        .collect();
    let mut deltas = vec![0isize];
    for &d in offsets {
        deltas.push(d as isize);
        deltas.push(-(d as isize));
    }
    let mut out = Map::zeros(ha, ha, c);
    for y in 0..ha {
        for x in 0..ha {
            let qv = q.apply(&add(query.at(y, x), &p[y * ha + x]));
            let s0 = (x / slice) * slice;
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for &dlt in &deltas {
                let row = y as isize + dlt;
                for col in s0..s0 + slice {
                    if row < 0 || row >= ha as isize {
                        keys.push(vec![0.0; c]);
                        values.push(vec![0.0; c]);
                    } else {
                        let row = row as usize;
                        keys.push(k.apply(&add(joint.at(row, col), &p[row * ha + col])));
                        values.push(v.apply(joint.at(row, col)));
                    }
                }
            }
            let r = attend(&qv, &keys, &values, (c as f64).sqrt());
            let f = ln.apply(&ffn.apply(&r));
            out.at_mut(y, x).copy_from_slice(&add(query.at(y, x), &f));
        }
    }
    Ok(out)
}

/// Vertical pass, then the transposed pass with its own parameters.
pub fn oracle_cda(
    cda: &Cda,
    query: &Map,
    joint: &Map,
    slice: usize,
    offsets: &[usize],
) -> Result<Map> {
    let a = oracle_cda_pass(&cda.vertical, query, joint, slice, offsets)?;
    let b = oracle_cda_pass(
        &cda.transposed,
        &transpose(&a),
        &transpose(joint),
        slice,
        offsets,
    )?;
    Ok(transpose(&b))
}

/// Full two-view dilated enhancement of one sample: resize, joint fusion,
/// strided close queries, both passes, and the way back to `h4`.
pub fn oracle_enhance(
    cda: &Cda,
    joint_fusion: &JointFusion,
    remote: &Map,
    close_patches: &[Map],
    n: usize,
    slice: usize,
    density: usize,
) -> Result<(Map, Vec<Map>)> {
    let h4 = remote.h;
    let ha = h4.div_ceil(slice) * slice;
    let offsets: Vec<usize> = (0..density)
        .map(|j| ha / (1usize << (density - j)))
        .collect();
    let fuse = Affine::of(&joint_fusion.proj)?;
    let close_full = assemble(close_patches, n);
    let ra = resize(remote, ha, ha);
    let cd = resize(&close_full, ha, ha);
    let mut joint = Map::zeros(ha, ha, remote.c);
    for y in 0..ha {
        for x in 0..ha {
            let cat: Vec<f64> = ra.at(y, x).iter().chain(cd.at(y, x)).copied().collect();
            joint.at_mut(y, x).copy_from_slice(&fuse.apply(&cat));
        }
    }
    let remote_out = resize(&oracle_cda(cda, &ra, &joint, slice, &offsets)?, h4, h4);
    let up = resize(&close_full, n * ha, n * ha);
    let mut merged = Map::zeros(n * ha, n * ha, remote.c);
    for n1 in 0..n {
        for n2 in 0..n {
            let mut sub = Map::zeros(ha, ha, remote.c);
            for y in 0..ha {
                for x in 0..ha {
                    sub.at_mut(y, x)
                        .copy_from_slice(up.at(y * n + n1, x * n + n2));
                }
            }
            let e = oracle_cda(cda, &sub, &joint, slice, &offsets)?;
            for y in 0..ha {
                for x in 0..ha {
                    merged
                        .at_mut(y * n + n1, x * n + n2)
                        .copy_from_slice(e.at(y, x));
                }
            }
        }
    }
    let close_out = split(&resize(&merged, n * h4, n * h4), n);
    Ok((remote_out, close_out))
}

/// Two-view dilated enhancement against the gather-based oracle, with
/// non-divisible `h4` and random parameters.
pub fn run_cda_oracle(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let start = Instant::now();
    let mut r = rng::stream(seed, "oracle-cda");
    let mut worst = 0f64;
    for trial in 0..trials {
        let h4 = r.gen_range(2..=7);
        let slice = r.gen_range(2..=4);
        let density = r.gen_range(1..=2);
        let n = r.gen_range(1..=2);
        let c = r.gen_range(2..=4);
        let b = r.gen_range(1..=2);
        let ps = ParamStore::new(DType::F64, seed ^ (trial as u64) << 8);
        let cda = Cda::new(&ps, c)?;
        let joint = JointFusion::new(&ps, c)?;
        randomize_params(&ps, &mut r, 0.8)?;
        let remotes: Vec<Map> = (0..b).map(|_| random_map(&mut r, h4, h4, c)).collect();
        let closes: Vec<Map> = (0..b * n * n)
            .map(|_| random_map(&mut r, h4, h4, c))
            .collect();
        let (ro, co) = enhance_views(
            &cda,
            Some(&joint),
            Some(&maps_to_tensor(&remotes, DType::F64)?),
            Some(&maps_to_tensor(&closes, DType::F64)?),
            n,
            slice,
            density,
        )?;
        let ro = maps_from_tensor(&ro.expect("remote output"))?;
        let co = maps_from_tensor(&co.expect("close output"))?;
        for i in 0..b {
            let patches = &closes[i * n * n..(i + 1) * n * n];
            let (er, ec) = oracle_enhance(&cda, &joint, &remotes[i], patches, n, slice, density)?;
            worst = worst.max(max_abs_diff(&er.data, &ro[i].data));
            for (j, e) in ec.iter().enumerate() {
                worst = worst.max(max_abs_diff(&e.data, &co[i * n * n + j].data));
            }
        }
    }
    Ok(OracleOutcome {
        name: "cda",
        trials,
        max_abs_diff: worst,
        elapsed: start.elapsed(),
        tolerance: 1e-6,
    })
}

/// Intersection and union by a double loop over rows and columns.
pub fn pixel_counts(pred: &Mask, gt: &Mask) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let p = pred.data[pred.idx(y, x, 0)] > 0;
            let g = gt.data[gt.idx(y, x, 0)] > 0;
            if p && g {
                i += 1;
            }
            if p || g {
                u += 1;
            }
        }
    }
    (i, u)
}

/// Metric functions against the pixel-loop oracle on random mask pairs.
/// Counts must match exactly; ratios within 1e-12.
pub fn run_metrics_oracle(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let start = Instant::now();
    let mut r = rng::stream(seed, "oracle-metrics");
    let mut worst = 0f64;
    let mut records = Vec::with_capacity(trials);
    let mut counts = Vec::with_capacity(trials);
    for t in 0..trials {
        let h = r.gen_range(1..=24);
        let w = r.gen_range(1..=24);
        let density_p: f64 = r.gen_range(0.0..1.0);
        let density_g: f64 = r.gen_range(0.0..1.0);
        let mut p = Mask::new(h, w, 1);
        let mut g = Mask::new(h, w, 1);
        for v in p.data.iter_mut() {
            *v = u8::from(r.gen_bool(density_p));
        }
        for v in g.data.iter_mut() {
            *v = u8::from(r.gen_bool(density_g));
        }
        let rec = iou(&t.to_string(), &p, &g)?;
        let (i, u) = pixel_counts(&p, &g);
        if (rec.intersection, rec.union) != (i, u) {
            worst = f64::INFINITY;
        }
        let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        worst = worst.max((rec.iou - want).abs());
        records.push(rec);
        counts.push((i, u, want));
    }
    if trials > 0 {
        let si: u64 = counts.iter().map(|c| c.0).sum();
        let su: u64 = counts.iter().map(|c| c.1).sum();
        let want_o = if su == 0 { 1.0 } else { si as f64 / su as f64 };
        let want_m = counts.iter().map(|c| c.2).sum::<f64>() / trials as f64;
        worst = worst.max((oiou(&records)? - want_o).abs());
        worst = worst.max((miou(&records)? - want_m).abs());
        for x in PR_THRESHOLDS {
            let hits = counts.iter().filter(|c| c.2 > x).count();
            let want = 100.0 * hits as f64 / trials as f64;
            worst = worst.max((precision_at(&records, x)? - want).abs());
        }
    }
    Ok(OracleOutcome {
        name: "metrics",
        trials,
        max_abs_diff: worst,
        elapsed: start.elapsed(),
        tolerance: 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvwin::window_cross_attention;

    #[test]
    fn resize_matches_tensor_resize() {
        let mut r = rng::stream(1, "t");
        let m = random_map(&mut r, 5, 5, 2);
        let t =
            crate::nn::resize_bilinear(&maps_to_tensor(&[m.clone()], DType::F64).unwrap(), 7, 3)
                .unwrap();
        let o = resize(&m, 7, 3);
        assert!(max_abs_diff(&o.data, &to_f64_vec(&t).unwrap()) < 1e-12);
    }

    #[test]
    fn single_window_is_dense_attention() {
        let mut r = rng::stream(2, "t");
        let q = random_map(&mut r, 2, 2, 3);
        let kv = random_map(&mut r, 4, 4, 3);
        let o = masked_dense_cross_attention(&q, &kv, 2, 4, None).unwrap();
        let qt = from_f64(q.data.clone(), &[1, 4, 3], DType::F64).unwrap();
        let kt = from_f64(kv.data.clone(), &[1, 16, 3], DType::F64).unwrap();
        let t = window_cross_attention(&qt, &kt, None).unwrap();
        assert!(max_abs_diff(&o.data, &to_f64_vec(&t).unwrap()) < 1e-12);
    }

    #[test]
    fn small_oracle_runs_pass() {
        assert!(run_window_oracle(6, 3).unwrap().passed());
        assert!(run_cda_oracle(4, 3).unwrap().passed());
        assert!(run_metrics_oracle(20, 3).unwrap().passed());
    }
}
