//! Straightforward reference implementations used as test oracles. Plain
//! loops over row-major matrices, written independently of the library code.

#![allow(dead_code)]

use modality_lens::backbone::ViTConfig;
use modality_lens::lens::{PerceiverConfig, PointEmbedConfig, EMBED_PREFIX, LATENTS};
use modality_lens::numerics::Tensor;
use modality_lens::params::ParamStore;
use modality_lens::pointcloud::PointPatchSet;

pub type Point = [f64; 3];

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Mat {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        match t.shape() {
            [r, c] => Mat {
                r: *r,
                c: *c,
                d: t.data().to_vec(),
            },
            [c] => Mat {
                r: 1,
                c: *c,
                d: t.data().to_vec(),
            },
            s => panic!("not a matrix: {s:?}"),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        assert_eq!(self.d.len(), other.len());
        self.d
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.c, b.r);
    let mut out = Mat::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.r, a.c), (b.r, b.c));
    Mat {
        r: a.r,
        c: a.c,
        d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(),
    }
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn softmax(x: &Mat) -> Mat {
    let mut d = Vec::with_capacity(x.d.len());
    for i in 0..x.r {
        d.extend(softmax_row(x.row(i)));
    }
    Mat { r: x.r, c: x.c, d }
}

/// Two-pass mean/variance layer norm over each row.
pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    let mut out = Mat::zeros(x.r, x.c);
    let n = x.c as f64;
    for i in 0..x.r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..x.c {
            out.set(i, j, (row[j] - mean) * inv * g[j] + b[j]);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat {
        r: x.r,
        c: x.c,
        d: x.d.iter().map(|&v| f(v)).collect(),
    }
}

/// Attention for one head given full-width matrices and a column range.
fn head_attention(q: &Mat, k: &Mat, v: &Mat, lo: usize, hi: usize, out: &mut Mat) {
    let scale = 1.0 / ((hi - lo) as f64).sqrt();
    for i in 0..q.r {
        let logits: Vec<f64> = (0..k.r)
            .map(|j| (lo..hi).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
            .collect();
        let p = softmax_row(&logits);
        for c in lo..hi {
            out.set(i, c, (0..k.r).map(|j| p[j] * v.at(j, c)).sum());
        }
    }
}

/// Multi-head attention with heads taken as contiguous column blocks.
pub fn multi_head(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let dh = q.c / heads;
    let mut out = Mat::zeros(q.r, q.c);
    for h in 0..heads {
        head_attention(q, k, v, h * dh, (h + 1) * dh, &mut out);
    }
    out
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    Mat::from_tensor(store.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

pub fn linear(store: &ParamStore, x: &Mat, prefix: &str) -> Mat {
    let w = param(store, &format!("{prefix}.w"));
    let mut y = matmul(x, &w);
    if let Some(b) = store.get(&format!("{prefix}.b")) {
        for i in 0..y.r {
            for j in 0..y.c {
                y.d[i * y.c + j] += b.data()[j];
            }
        }
    }
    y
}

pub fn ln(store: &ParamStore, x: &Mat, prefix: &str) -> Mat {
    let g = store.get(&format!("{prefix}.g")).unwrap();
    let b = store.get(&format!("{prefix}.b")).unwrap();
    layer_norm(x, g.data(), b.data(), LN_EPS)
}

pub fn attention_sublayer(
    store: &ParamStore,
    queries: &Mat,
    context: &Mat,
    heads: usize,
    prefix: &str,
) -> Mat {
    let q = linear(store, queries, &format!("{prefix}.wq"));
    let k = linear(store, context, &format!("{prefix}.wk"));
    let v = linear(store, context, &format!("{prefix}.wv"));
    let o = multi_head(&q, &k, &v, heads);
    linear(store, &o, &format!("{prefix}.wo"))
}

pub fn mlp(store: &ParamStore, x: &Mat, prefix: &str) -> Mat {
    let h = map(&linear(store, x, &format!("{prefix}.fc1")), gelu);
    linear(store, &h, &format!("{prefix}.fc2"))
}

pub fn perceiver_block(
    store: &ParamStore,
    set: usize,
    latents: &Mat,
    tokens: &Mat,
    cfg: &PerceiverConfig,
) -> Mat {
    let p = format!("lens.perceiver.set{set}");
    let q = ln(store, latents, &format!("{p}.cross.ln_q"));
    let kv = ln(store, tokens, &format!("{p}.cross.ln_kv"));
    let mut x = add(
        latents,
        &attention_sublayer(store, &q, &kv, cfg.n_heads, &format!("{p}.cross")),
    );
    for s in 0..cfg.self_attn_per_block {
        let sp = format!("{p}.self{s}");
        let y = ln(store, &x, &format!("{sp}.ln"));
        x = add(&x, &attention_sublayer(store, &y, &y, cfg.n_heads, &sp));
    }
    let y = ln(store, &x, &format!("{p}.mlp.ln"));
    add(&x, &mlp(store, &y, &format!("{p}.mlp")))
}

/// With sharing, block 0 has its own set and every later block uses set 1.
pub fn perceiver_forward(store: &ParamStore, tokens: &Mat, cfg: &PerceiverConfig) -> Mat {
    let mut x = param(store, LATENTS);
    for b in 0..cfg.depth {
        let set = if cfg.share_weights { b.min(1) } else { b };
        x = perceiver_block(store, set, &x, tokens, cfg);
    }
    x
}

/// Piecewise-linear resampling of the `S` patch rows at `M` evenly spaced
/// positions, CLS row untouched.
pub fn interpolate_positions(pos: &Mat, m: usize) -> Mat {
    let s = pos.r - 1;
    let mut out = Mat::zeros(m + 1, pos.c);
    for j in 0..pos.c {
        out.set(0, j, pos.at(0, j));
    }
    for i in 0..m {
        let x = if m == 1 {
            (s as f64 - 1.0) / 2.0
        } else {
            i as f64 * (s as f64 - 1.0) / (m as f64 - 1.0)
        };
        let lo = (x.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        let t = x - lo as f64;
        for j in 0..pos.c {
            let a = pos.at(1 + lo, j);
            let b = pos.at(1 + hi, j);
            out.set(1 + i, j, a + t * (b - a));
        }
    }
    out
}

pub fn vit_encode(store: &ParamStore, latents: &Mat, cfg: &ViTConfig, use_pos: bool) -> Vec<f64> {
    let cls = param(store, "vit.cls");
    let mut x = Mat {
        r: latents.r + 1,
        c: latents.c,
        d: cls.d.iter().chain(&latents.d).copied().collect(),
    };
    if use_pos {
        let pos = param(store, "vit.pos_embed");
        x = add(&x, &interpolate_positions(&pos, latents.r));
    }
    for b in 0..cfg.n_blocks {
        let p = ViTConfig::block_prefix(b);
        let y = ln(store, &x, &format!("{p}.ln1"));
        x = add(
            &x,
            &attention_sublayer(store, &y, &y, cfg.n_heads, &format!("{p}.attn")),
        );
        let y = ln(store, &x, &format!("{p}.ln2"));
        x = add(&x, &mlp(store, &y, &format!("{p}.mlp")));
    }
    let x = ln(store, &x, "vit.final_norm");
    let cls_row = Mat {
        r: 1,
        c: x.c,
        d: x.row(0).to_vec(),
    };
    matmul(&cls_row, &param(store, "vit.proj")).d
}

fn linear_row(store: &ParamStore, x: &[f64], prefix: &str) -> Vec<f64> {
    linear(
        store,
        &Mat {
            r: 1,
            c: x.len(),
            d: x.to_vec(),
        },
        prefix,
    )
    .d
}

/// Patch-by-patch, point-by-point evaluation of the point embedding.
pub fn point_embed(store: &ParamStore, patches: &PointPatchSet, cfg: &PointEmbedConfig) -> Mat {
    let p = EMBED_PREFIX;
    let h = cfg.hidden_dim;
    let mut out = Mat::zeros(patches.n_groups(), cfg.token_dim);
    for g in 0..patches.n_groups() {
        let stage1: Vec<Vec<f64>> = patches
            .group(g)
            .iter()
            .map(|pt| {
                let a: Vec<f64> = linear_row(store, pt, &format!("{p}.local1"))
                    .into_iter()
                    .map(gelu)
                    .collect();
                linear_row(store, &a, &format!("{p}.local2"))
            })
            .collect();
        let mut pooled = vec![f64::NEG_INFINITY; h];
        for f in &stage1 {
            for c in 0..h {
                pooled[c] = pooled[c].max(f[c]);
            }
        }
        let mut feat = vec![f64::NEG_INFINITY; h];
        for f in &stage1 {
            let joined: Vec<f64> = f.iter().chain(&pooled).copied().collect();
            let a: Vec<f64> = linear_row(store, &joined, &format!("{p}.fuse1"))
                .into_iter()
                .map(gelu)
                .collect();
            let b = linear_row(store, &a, &format!("{p}.fuse2"));
            for c in 0..h {
                feat[c] = feat[c].max(b[c]);
            }
        }
        let c1: Vec<f64> = linear_row(store, &patches.centers[g], &format!("{p}.center1"))
            .into_iter()
            .map(gelu)
            .collect();
        let c2 = linear_row(store, &c1, &format!("{p}.center2"));
        let joined: Vec<f64> = feat.iter().chain(&c2).copied().collect();
        let tok = linear_row(store, &joined, &format!("{p}.out"));
        for (j, v) in tok.into_iter().enumerate() {
            out.set(g, j, v);
        }
    }
    out
}

/// Contrastive loss by explicit double loops. Returns `(total, l_p2i, l_p2t)`.
pub fn contrastive_loss(p: &Mat, i: &Mat, t: &Mat, tau: f64) -> (f64, f64, f64) {
    let b = p.r;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>();
    let term = |a: &Mat| {
        let mut acc = 0.0;
        for k in 0..b {
            let row: Vec<f64> = (0..b).map(|j| dot(p.row(k), a.row(j)) / tau).collect();
            let col: Vec<f64> = (0..b).map(|j| dot(p.row(j), a.row(k)) / tau).collect();
            let lse = |v: &[f64]| {
                let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            };
            acc += (row[k] - lse(&row)) + (col[k] - lse(&col));
        }
        -acc / (4.0 * b as f64)
    };
    let (li, lt) = (term(i), term(t));
    (li + lt, li, lt)
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

fn lex_less(a: &Point, b: &Point) -> bool {
    for k in 0..3 {
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

/// Candidate `i` replaces `best`: larger score, then lexicographically
/// smaller point, then lower index.
fn better(points: &[Point], i: usize, si: f64, best: usize, sb: f64) -> bool {
    if si != sb {
        return si > sb;
    }
    if points[i] != points[best] {
        return lex_less(&points[i], &points[best]);
    }
    i < best
}

/// Greedy maximin with the distance to the chosen set recomputed from scratch
/// at every pick.
pub fn fps(points: &[Point], m: usize, from_centroid: bool) -> Vec<usize> {
    let n = points.len();
    let start = if from_centroid {
        let mut c = [0.0; 3];
        for p in points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let c = [c[0] / n as f64, c[1] / n as f64, c[2] / n as f64];
        let mut best = 0;
        for i in 1..n {
            if better(points, i, d2(&points[i], &c), best, d2(&points[best], &c)) {
                best = i;
            }
        }
        best
    } else {
        0
    };
    let mut chosen = vec![start];
    while chosen.len() < m {
        let score = |i: usize| {
            chosen
                .iter()
                .map(|&c| d2(&points[i], &points[c]))
                .fold(f64::INFINITY, f64::min)
        };
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            best = match best {
                Some(b) if !better(points, i, score(i), b, score(b)) => Some(b),
                _ => Some(i),
            };
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// Full sort of all points by (distance, index), truncated to `k`.
pub fn knn(points: &[Point], center: &Point, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (d2(p, center), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Row-normalized random matrix.
pub fn unit_rows(rng: &mut impl rand::Rng, r: usize, c: usize) -> Mat {
    let mut d = Vec::with_capacity(r * c);
    for _ in 0..r {
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.extend(row.iter().map(|v| v / n));
    }
    Mat { r, c, d }
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::new(vec![m.r, m.c], m.d.clone()).unwrap()
}
