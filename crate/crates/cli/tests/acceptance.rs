//! End-to-end acceptance checks, one `PASS`/`FAIL` line per criterion.
//!
//! Criteria that train desk models share runs, so the first criterion to
//! need a run pays for it. A failing criterion is reported, not raised, so
//! the binary always exits 0. `EQAR_ACCEPT_ONLY=name,name` restricts the set.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use eqar_core::analysis::{attention_pair_count, center_edge_ratio, column_stationarity, mean_improvement, zero_shot_eval};
use eqar_core::data_io::image::decode_png;
use eqar_core::data_io::{CheckpointManifest, Corpus, GeneratorBundleConfig, ModelBundle, Provenance, SyntheticKind, SyntheticSpec};
use eqar_core::generator::{
    flow_matching_loss, windowed_causal_attention, AttentionWindow, Conditioning, FlowHeadConfig, Generator, GeneratorConfig,
    KvWindowCache, Variant,
};
use eqar_core::numerics::{Tape, Tensor, Var};
use eqar_core::sampler::{cfg_velocity, euler_integrate, extrapolate_long, GenerationState, SamplerConfig};
use eqar_core::tokenizer::{
    columnize, rasterize, Codec, FeatureMap, LinearMap, LinearMode, LinearTokenizer, LinearTokenizerConfig, TokenLayout,
};
use eqar_core::training::{LossLog, ProbeSet, TokenCorpus, TrainConfig};
use eqar_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- gradients

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / n(a).max(n(b)).max(1e-12)
}

/// Autodiff of the scalar `build(tape, x)` against central differences.
fn grad_err(x: &Tensor<f64>, build: &dyn Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let ad = tape.backward(loss).unwrap().wrt(xv);
    let h = 1e-5;
    let f = |xp: Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.leaf(xp);
        let l = build(&mut t, v);
        t.value(l).item()
    };
    let fd: Vec<f64> = (0..x.numel())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            (f(up) - f(down)) / (2.0 * h)
        })
        .collect();
    rel_err(ad.data(), &fd)
}

/// Weighted sum with fixed weights so every output entry matters.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = randn(t.shape(y), &mut rng(seed));
    let wv = t.leaf(w);
    let p = t.mul(y, wv).unwrap();
    t.sum(p)
}

fn op_checks() -> Vec<(&'static str, f64)> {
    let x = randn(&[3, 4], &mut rng(1));
    let other = randn(&[3, 4], &mut rng(2));
    let row = randn(&[4], &mut rng(3));
    let img = randn(&[1, 4, 4, 2], &mut rng(4));
    let b2 = randn(&[4, 5], &mut rng(5));
    let clampable = Tensor::from_fn([6], |i| [-2.0, -0.5, 0.3, 0.7, 1.8, -1.2][i]);
    let angles = randn(&[3, 2], &mut rng(6));
    let (cos, sin): (Vec<f64>, Vec<f64>) = angles.data().iter().map(|a| (a.cos(), a.sin())).unzip();
    let seq = randn(&[1, 3, 4], &mut rng(7));

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name, x: &Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> Var| out.push((name, grad_err(x, f)));
    check("matmul", &x, &|t, v| {
        let b = t.leaf(b2.clone());
        let y = t.matmul(v, b).unwrap();
        probe(t, y, 10)
    });
    check("add", &x, &|t, v| {
        let o = t.leaf(other.clone());
        let y = t.add(v, o).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 11)
    });
    check("sub", &x, &|t, v| {
        let r = t.leaf(row.clone());
        let y = t.sub(v, r).unwrap();
        let y = t.mul(y, v).unwrap();
        probe(t, y, 12)
    });
    check("mul", &row, &|t, r| {
        let xv = t.leaf(x.clone());
        let y = t.mul(xv, r).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 13)
    });
    check("scale", &x, &|t, v| {
        let y = t.scale(v, -1.7);
        t.sum_sq(y)
    });
    check("reshape", &x, &|t, v| {
        let y = t.reshape(v, [4, 3]).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 14)
    });
    check("permute", &img, &|t, v| {
        let y = t.permute(v, &[0, 3, 1, 2]).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 15)
    });
    check("transpose_last2", &x, &|t, v| {
        let y = t.transpose_last2(v).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 16)
    });
    check("slice", &x, &|t, v| {
        let y = t.slice(v, 1, 1, 3).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 17)
    });
    check("concat", &x, &|t, v| {
        let sq = t.mul(v, v).unwrap();
        let y = t.concat(&[v, sq], 1).unwrap();
        probe(t, y, 18)
    });
    check("index_select", &x, &|t, v| {
        let y = t.index_select(v, 0, &[2, 0, 2]).unwrap();
        let y = t.mul(y, y).unwrap();
        probe(t, y, 19)
    });
    check("softmax_lastdim", &x, &|t, v| {
        let y = t.softmax_lastdim(v).unwrap();
        probe(t, y, 20)
    });
    check("layer_norm", &x, &|t, v| {
        let y = t.layer_norm(v, 1e-5).unwrap();
        probe(t, y, 21)
    });
    check("gelu", &x, &|t, v| {
        let y = t.gelu(v);
        probe(t, y, 22)
    });
    check("exp", &x, &|t, v| {
        let y = t.exp(v);
        probe(t, y, 23)
    });
    check("clamp", &clampable, &|t, v| {
        let y = t.clamp(v, -1.0, 1.0);
        probe(t, y, 24)
    });
    check("sum", &x, &|t, v| {
        let y = t.mul(v, v).unwrap();
        t.sum(y)
    });
    check("mean", &x, &|t, v| {
        let y = t.mul(v, v).unwrap();
        t.mean(y)
    });
    check("sum_sq", &x, &|t, v| t.sum_sq(v));
    check("mean_lastdim", &x, &|t, v| {
        let y = t.mul(v, v).unwrap();
        let y = t.mean_lastdim(y).unwrap();
        probe(t, y, 25)
    });
    check("rotary", &seq, &|t, v| {
        let y = t.rotary(v, cos.clone(), sin.clone()).unwrap();
        probe(t, y, 26)
    });
    check("reflect_pad", &img, &|t, v| {
        let y = t.reflect_pad(v, 1).unwrap();
        probe(t, y, 27)
    });
    check("im2col", &img, &|t, v| {
        let y = t.im2col(v, 3, 1).unwrap();
        probe(t, y, 28)
    });
    check("upsample2x", &img, &|t, v| {
        let y = t.upsample2x(v).unwrap();
        probe(t, y, 29)
    });
    out
}

/// Loss gradient of a two-layer desk model at sampled parameter entries.
fn full_loss_grad_err() -> f64 {
    let cfg = GeneratorConfig { n_layers: 2, max_len: 6, ..Default::default() };
    let mut g = Generator::<f64>::new(cfg, &mut rng(38)).unwrap();
    let mut r = rng(39);
    for t in g.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * r.random_range(-1.0..1.0));
    }
    let x = randn(&[2, 6, 16], &mut rng(40));
    let (classes, shifts) = ([Some(4), None], [3, 11]);
    let mask = [true, false, true, true, true, true];
    let loss = |g: &Generator<f64>| {
        let mut tape = Tape::new();
        let z = g.forward_targets(&mut tape, &x, &Conditioning::new(&classes, &shifts)).unwrap();
        let out = flow_matching_loss(&mut tape, &g.head, &g.store, &x, z, &mask, &mut rng(41)).unwrap();
        (tape, out.loss)
    };
    let (tape, l) = loss(&g);
    let grads = tape.backward(l).unwrap().param_grads(&g.store);
    let (h, mut ad, mut fd, mut pick) = (1e-5, Vec::new(), Vec::new(), rng(42));
    for id in g.store.ids() {
        let n = g.store.get(id).numel();
        for _ in 0..6 {
            let i = pick.random_range(0..n);
            let orig = g.store.get(id).data()[i];
            g.store.get_mut(id).data_mut()[i] = orig + h;
            let (t, l) = loss(&g);
            let up = t.value(l).item();
            g.store.get_mut(id).data_mut()[i] = orig - h;
            let (t, l) = loss(&g);
            let down = t.value(l).item();
            g.store.get_mut(id).data_mut()[i] = orig;
            fd.push((up - down) / (2.0 * h));
            ad.push(grads[id.index()].data()[i]);
        }
    }
    rel_err(&ad, &fd)
}

fn gradients() -> Check {
    let ops = op_checks();
    let (worst_op, worst) = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let full = full_loss_grad_err();
    let ok = worst < 1e-6 && full < 1e-6;
    Ok((ok, format!("{} ops, worst {worst_op} {worst:.1e}; two-layer loss {full:.1e}", ops.len())))
}

// ------------------------------------------------------------- tokenization

fn tokenization() -> Check {
    let mut r = rng(50);
    let mut failures = Vec::new();
    for trial in 0..64 {
        let (h, w, c) = (r.random_range(1..5), r.random_range(2..7), r.random_range(1..4));
        let x = FeatureMap::new(randn(&[h, w, c], &mut r)).map_err(e)?;
        // identity and a signed permutation, each with its exact inverse
        let n = h * c;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let signs: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let fwd = Tensor::from_fn([n, n], |k| if perm[k / n] == k % n { signs[k / n] } else { 0.0 });
        let inv = Tensor::from_fn([n, n], |k| if perm[k % n] == k / n { signs[k % n] } else { 0.0 });
        for (p, q) in [(LinearMap::identity(n), LinearMap::identity(n)), (LinearMap::new(fwd, None).map_err(e)?, LinearMap::new(inv, None).map_err(e)?)] {
            let back = rasterize(&columnize(&x, &p).map_err(e)?, &q, h).map_err(e)?;
            if back.tensor() != x.tensor() {
                failures.push(format!("round trip {trial}"));
            }
        }
        // column locality under a random projection
        let cp = r.random_range(1..5);
        let proj = LinearMap::new(randn(&[n, cp], &mut r), Some(randn(&[cp], &mut r))).map_err(e)?;
        let base = columnize(&x, &proj).map_err(e)?;
        let j = r.random_range(0..w);
        let mut t = x.tensor().clone();
        for y in 0..h {
            for ch in 0..c {
                t.data_mut()[(y * w + j) * c + ch] += 1.0 + r.random::<f64>();
            }
        }
        let moved = columnize(&FeatureMap::new(t).map_err(e)?, &proj).map_err(e)?;
        if (0..w).any(|k| (base.token(k) == moved.token(k)) == (k == j)) {
            failures.push(format!("locality {trial}"));
        }
    }
    // linear tokenizer: a cyclic shift by whole bands permutes tokens exactly
    let tok = LinearTokenizer::new(LinearTokenizerConfig {
        image_h: 64,
        image_w: 64,
        n_tokens: 16,
        layout: TokenLayout::Columns,
        mode: LinearMode::Pooled { cell_h: 4, cell_w: 4 },
        scale: 2.0,
    })
    .map_err(e)?;
    let c = tok.token_channels();
    for shift in 1..16 {
        let img = randn(&[64, 64, 3], &mut r).cast::<f32>();
        let shifted = Tensor::from_fn([64, 64, 3], |i| {
            let (y, x, ch) = (i / 192, (i / 3) % 64, i % 3);
            img.data()[(y * 64 + (x + 64 - 4 * shift) % 64) * 3 + ch]
        });
        let (a, b) = (tok.encode(&img).map_err(e)?, tok.encode(&shifted).map_err(e)?);
        if (0..16).any(|j| b.data()[j * c..(j + 1) * c] != a.data()[((j + 16 - shift) % 16) * c..][..c]) {
            failures.push(format!("shift {shift}"));
        }
    }
    let ok = failures.is_empty();
    let detail = if ok { "128 round trips bit-exact, 64 locality probes, 15 band shifts exact".to_string() } else { failures.join(", ") };
    Ok((ok, detail))
}

// ---------------------------------------------------------------- attention

fn small(variant: Variant, layers: usize, w: usize) -> GeneratorConfig {
    GeneratorConfig {
        variant,
        n_layers: layers,
        hidden_dim: 16,
        n_heads: 2,
        window_w: w,
        cond_seq_len: 4,
        n_classes: 3,
        mlp_ratio: 2,
        token_channels: 4,
        max_len: 24,
        head: FlowHeadConfig { mlp_layers: 2, mlp_hidden: 16, t_embed_dim: 8 },
        ..Default::default()
    }
}

fn z_of<T: eqar_core::numerics::Float>(g: &Generator<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let z = g.forward(&mut tape, x, false, 0, &Conditioning::new(&[Some(1)], &[0])).unwrap();
    tape.value(z).clone()
}

fn attention() -> Check {
    let mut r = rng(60);
    let mut wide = 0.0f64;
    for n in [2, 5, 9] {
        let (q, k, v) = (randn(&[2, 2, n, 8], &mut r), randn(&[2, 2, n, 8], &mut r), randn(&[2, 2, n, 8], &mut r));
        let full = windowed_causal_attention(&q, &k, &v, AttentionWindow::Full, Some(10000.0)).map_err(e)?;
        for w in [n - 1, n, 3 * n] {
            let win = windowed_causal_attention(&q, &k, &v, AttentionWindow::Window(w), Some(10000.0)).map_err(e)?;
            wide = wide.max(win.max_abs_diff(&full));
        }
    }
    // one layer: output i moves iff input j lies in [i − w, i]
    let n = 10;
    let mut radius_ok = true;
    for w in [1, 2, 4] {
        let g = Generator::<f64>::new(small(Variant::Equivariant, 1, w), &mut rng(61)).map_err(e)?;
        let x = randn(&[1, n, 4], &mut r);
        let base = z_of(&g, &x);
        for j in 0..n {
            let mut xp = x.clone();
            xp.data_mut()[j * 4 + 1] += 0.5;
            let zp = z_of(&g, &xp);
            for i in 0..n {
                let same = base.data()[i * 16..(i + 1) * 16] == zp.data()[i * 16..(i + 1) * 16];
                radius_ok &= same != (j <= i && i <= j + w);
            }
        }
    }
    // L layers: nothing further back than L·w reaches the last output
    let (layers, w, n) = (3, 2, 12);
    let g = Generator::<f64>::new(small(Variant::Equivariant, layers, w), &mut rng(62)).map_err(e)?;
    let x = randn(&[1, n, 4], &mut r);
    let base = z_of(&g, &x);
    let mut reach = 0;
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j * 4] -= 0.5;
        if base.data()[(n - 1) * 16..] != z_of(&g, &xp).data()[(n - 1) * 16..] {
            reach = reach.max(n - 1 - j);
        }
    }
    let ok = wide <= 1e-6 && radius_ok && reach <= layers * w;
    Ok((ok, format!("wide window vs full {wide:.1e}; one-layer radius exact: {radius_ok}; {layers}-layer reach {reach} ≤ {}", layers * w)))
}

// ---------------------------------------------------------- shift equivariance

fn row_dev(a: &Tensor<f32>, b: &Tensor<f32>, k: usize, from: usize) -> f64 {
    let (n, d) = (a.dim(1), a.dim(2));
    (from..n)
        .flat_map(|p| (0..d).map(move |c| (p, c)))
        .map(|(p, c)| (a.data()[p * d + c] as f64 - b.data()[(p + k) * d + c] as f64).abs())
        .fold(0.0, f64::max)
}

fn shift_equivariance() -> Check {
    let (layers, w) = (3, 2);
    let cfg = GeneratorConfig { cross_attn_pe: false, ..small(Variant::Equivariant, layers, w) };
    let g = Generator::<f32>::new(cfg, &mut rng(70)).map_err(e)?;
    let base = Generator::<f32>::new(small(Variant::Baseline2d, layers, w), &mut rng(71)).map_err(e)?;
    let mut r = rng(72);
    let (mut equi, mut breaks) = (0.0f64, f64::INFINITY);
    for k in [1, 2, 5, 9] {
        let x = randn(&[1, 12, 4], &mut r).cast::<f32>();
        let prefix = randn(&[1, k, 4], &mut r).cast::<f32>();
        let xs = Tensor::concat(&[&prefix, &x], 1).map_err(e)?;
        equi = equi.max(row_dev(&z_of(&g, &x), &z_of(&g, &xs), k, layers * w));
        breaks = breaks.min(row_dev(&z_of(&base, &x), &z_of(&base, &xs), k, layers * w));
    }
    let ok = equi <= 1e-5 && breaks > 1e-2;
    Ok((ok, format!("equivariant max deviation {equi:.1e} (≤ 1e-5); baseline_2d smallest deviation {breaks:.2e} (> 1e-2)")))
}

// -------------------------------------------------------------------- FLOPs

fn flops() -> Check {
    let full = attention_pair_count(16, 3, Variant::Baseline2d).map_err(e)?;
    let win = attention_pair_count(16, 3, Variant::Equivariant).map_err(e)?;
    let ratio = win as f64 / full as f64;
    let ok = full == 136 && win == 58 && (ratio - 0.429).abs() <= 0.02 && (ratio - 1.8 / 4.2).abs() <= 0.02;
    Ok((ok, format!("{win}/{full} = {ratio:.4}")))
}

// ------------------------------------------------------------------ sampler

fn sampler() -> Check {
    let y0 = Tensor::new([3], vec![0.5f32, -1.0, 0.0]).map_err(e)?;
    let v = Tensor::new([3], vec![2.0f32, 0.25, -3.0]).map_err(e)?;
    let mut constant = 0.0f64;
    for n in [1, 10, 100] {
        let y = euler_integrate(y0.clone(), n, |_, _| Ok(v.clone())).map_err(e)?;
        for i in 0..3 {
            constant = constant.max((y.data()[i] as f64 - (y0.data()[i] + v.data()[i]) as f64).abs());
        }
    }
    let decay = euler_integrate(Tensor::new([1], vec![1.0f32]).map_err(e)?, 100, |y, _| Ok(y.map(|x| -x))).map_err(e)?;
    let decay_rel = (decay.data()[0] as f64 - (-1.0f64).exp()).abs() / (-1.0f64).exp();

    // cached decoding against a full recompute
    let mut cached = 0.0f64;
    for variant in [Variant::Equivariant, Variant::Baseline2d] {
        let g = Generator::<f32>::new(small(variant, 3, 2), &mut rng(80)).map_err(e)?;
        let tokens = randn(&[2, 10, 4], &mut rng(81)).cast::<f32>();
        let (classes, shifts) = ([Some(1), None], [0, 5]);
        let cond = Conditioning::new(&classes, &shifts);
        let mut tape = Tape::new();
        let zf = g.forward_targets(&mut tape, &tokens, &cond).map_err(e)?;
        let full = tape.value(zf).clone();
        let mut cache = KvWindowCache::new(&g, 2);
        for i in 0..10 {
            let input = if i > 0 { Some(tokens.slice(1, i - 1, i).map_err(e)?.into_reshape([2, 4]).map_err(e)?) } else { None };
            let z = g.step(&mut cache, input.as_ref(), &cond).map_err(e)?;
            for s in 0..2 {
                for c in 0..16 {
                    cached = cached.max((z.data()[s * 16 + c] - full.data()[(s * 10 + i) * 16 + c]).abs() as f64);
                }
            }
        }
    }

    let mut r = rng(82);
    let vc = randn(&[4, 6], &mut r).cast::<f32>();
    let vu = randn(&[4, 6], &mut r).cast::<f32>();
    let endpoints = cfg_velocity(&vc, &vu, 0.0).map_err(e)? == vu && cfg_velocity(&vc, &vu, 1.0).map_err(e)? == vc;

    let ok = constant <= 1e-5 && decay_rel < 0.006 && cached <= 1e-5 && endpoints;
    Ok((
        ok,
        format!(
            "constant field error {constant:.1e}; decay {:.5} vs e⁻¹ ({:.2} %); cached vs recompute {cached:.1e}; ω ∈ {{0, 1}} exact: {endpoints}",
            decay.data()[0],
            100.0 * decay_rel
        ),
    ))
}

// --------------------------------------------------------------- desk runs

const EPOCHS: usize = 30;
const DESK_LR: f64 = 3e-3;
const PROBE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum RunKey {
    /// Positions 0–7, shift-invariant corpus.
    HalfEqui,
    HalfBase,
    /// Every position; doubles as the multi-task reference.
    AllEqui,
    AllEquiCenter,
    /// Three epochs suffice for the epoch-2 reference.
    AllBaseEarly,
    SingleEqui,
    SingleBase,
}

impl RunKey {
    fn spec(self) -> (Variant, &'static str, usize, SyntheticKind) {
        use RunKey::*;
        let shift = SyntheticKind::ShiftInvariantTexture;
        match self {
            HalfEqui => (Variant::Equivariant, "0-7", EPOCHS, shift),
            HalfBase => (Variant::Baseline2d, "0-7", EPOCHS, shift),
            AllEqui => (Variant::Equivariant, "all", EPOCHS, shift),
            AllEquiCenter => (Variant::Equivariant, "all", EPOCHS, SyntheticKind::CenterBiasedBlobs),
            AllBaseEarly => (Variant::Baseline2d, "all", 3, shift),
            SingleEqui => (Variant::Equivariant, "4", EPOCHS, shift),
            SingleBase => (Variant::Baseline2d, "4", EPOCHS, shift),
        }
    }
}

struct Run {
    model: Generator<f32>,
    log: LossLog,
    probe: ProbeSet,
    codec: Codec,
    train: TrainConfig,
}

/// Column bands for the equivariant models, a 4×4 raster of 16×16 patches
/// for the baseline; both give 16 tokens of 16 channels.
fn desk_codec(variant: Variant) -> Codec {
    let layout = if variant == Variant::Baseline2d { TokenLayout::Raster2d { rows: 4, cols: 4 } } else { TokenLayout::Columns };
    let cfg = LinearTokenizerConfig { image_h: 64, image_w: 64, n_tokens: 16, layout, mode: LinearMode::Pooled { cell_h: 4, cell_w: 4 }, scale: 2.0 };
    Codec::Linear(LinearTokenizer::new(cfg).expect("desk codec"))
}

#[derive(Default)]
struct Lab {
    runs: HashMap<RunKey, Run>,
}

impl Lab {
    fn run(&mut self, key: RunKey) -> Result<&Run, String> {
        if !self.runs.contains_key(&key) {
            let started = Instant::now();
            let run = train_desk(key)?;
            println!("       trained {key:?} in {:.0} s", started.elapsed().as_secs_f64());
            self.runs.insert(key, run);
        }
        Ok(&self.runs[&key])
    }
}

fn train_desk(key: RunKey) -> Result<Run, String> {
    let (variant, mask, epochs, kind) = key.spec();
    let codec = desk_codec(variant);
    let spec = SyntheticSpec { kind, ..Default::default() };
    let data = TokenCorpus::new(Corpus::new(spec.clone()).map_err(e)?, codec.clone()).map_err(e)?;
    let held = TokenCorpus::new(Corpus::new(SyntheticSpec { split: 1, size: PROBE, ..spec }).map_err(e)?, codec.clone()).map_err(e)?;
    let probe = ProbeSet::from_corpus(&held, PROBE).map_err(e)?;
    let mut model = Generator::<f32>::new(GeneratorConfig { variant, ..Default::default() }, &mut rng(0)).map_err(e)?;
    let train = TrainConfig { epochs, base_lr: DESK_LR, task_mask: mask.parse().map_err(e)?, probe_size: PROBE, ..Default::default() };
    let out = eqar_core::training::train(&mut model, &data, &probe, &train, |_| {}).map_err(e)?;
    Ok(Run { model, log: out.log, probe, codec, train })
}

fn zero_shot(lab: &mut Lab) -> Check {
    let mut r = Vec::new();
    for key in [RunKey::HalfEqui, RunKey::HalfBase] {
        let run = lab.run(key)?;
        let rep = zero_shot_eval(&run.model, &run.probe, &run.train.task_mask, None, 0).map_err(e)?;
        r.push(rep.ratio);
    }
    let ok = r[0] < r[1] && r[0] < 1.5;
    Ok((ok, format!("r_equi {:.3}, r_base {:.3} (held-out / trained loss)", r[0], r[1])))
}

fn fmt_imp(v: &[Option<f64>]) -> String {
    v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:+.1}"))).collect::<Vec<_>>().join(" ")
}

fn single_task(lab: &mut Lab) -> Check {
    let reference = lab.run(RunKey::AllEqui)?.log.at_epoch(2).ok_or("no epoch 2")?.per_position.clone();
    let equi = mean_improvement(&lab.run(RunKey::SingleEqui)?.log, &reference).map_err(e)?;
    let non_negative = equi.iter().filter(|v| v.is_some_and(|x| x >= 0.0)).count();

    let reference = lab.run(RunKey::AllBaseEarly)?.log.at_epoch(2).ok_or("no epoch 2")?.per_position.clone();
    let base = mean_improvement(&lab.run(RunKey::SingleBase)?.log, &reference).map_err(e)?;
    let held: Vec<f64> = base.iter().enumerate().filter(|(p, _)| *p != 4).filter_map(|(_, v)| *v).collect();
    let base_mean = held.iter().sum::<f64>() / held.len() as f64;

    let ok = non_negative >= 12 && base_mean < 0.0;
    Ok((
        ok,
        format!(
            "equivariant non-negative on {non_negative}/16 [{}]; baseline_2d held-out mean {base_mean:+.2} % [{}]",
            fmt_imp(&equi),
            fmt_imp(&base)
        ),
    ))
}

fn long_extrapolation(lab: &mut Lab) -> Check {
    let run = lab.run(RunKey::AllEqui)?;
    let classes: Vec<usize> = (0..64).map(|i| i % run.model.config().n_classes).collect();
    let cfg = SamplerConfig { target_len: 128, seed: 0, ..Default::default() };
    let tokens = extrapolate_long(&run.model, &classes, &cfg).map_err(e)?;
    let finite = tokens.all_finite() && tokens.dim(1) == 128;
    let report = column_stationarity(&tokens, 16, run.model.config().window_w).map_err(e)?;
    let max_z = report.max_abs_z_from(16);
    let (mut worst_p, mut worst_which) = (0, "mean");
    for p in 16..128 {
        for (which, z) in [("mean", report.z_mean[p]), ("std", report.z_std[p])] {
            let best = if worst_which == "mean" { report.z_mean[worst_p] } else { report.z_std[worst_p] };
            if z.abs() > best.abs() {
                (worst_p, worst_which) = (p, which);
            }
        }
    }
    let base = Generator::<f32>::new(GeneratorConfig { variant: Variant::Baseline2d, ..Default::default() }, &mut rng(0)).map_err(e)?;
    let refused = extrapolate_long(&base, &classes, &cfg).is_err() && GenerationState::new(&base, &classes, cfg.clone()).is_err();
    let ok = finite && max_z <= 3.0 && refused;
    Ok((ok, format!("max |z| beyond 16 = {max_z:.2} (channel {worst_which} at {worst_p}); baseline_2d refused: {refused}")))
}

fn dataset_bias(lab: &mut Lab) -> Check {
    let (center, edges) = ((6..10).collect::<Vec<_>>(), [0, 1, 14, 15]);
    let mut ratios = Vec::new();
    for key in [RunKey::AllEquiCenter, RunKey::AllEqui] {
        let profile = &lab.run(key)?.log.last().ok_or("empty log")?.per_position;
        ratios.push(center_edge_ratio(profile, &center, &edges).map_err(e)?);
    }
    let ok = ratios[0] > ratios[1];
    Ok((ok, format!("center/edge loss ratio: center-biased {:.3}, shift-invariant {:.3}", ratios[0], ratios[1])))
}

// ------------------------------------------------------------------ service

async fn call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Arc<AppState>, uri: &str, body: Option<Value>) -> Result<Value, String> {
    let (s, b) = call(app, Method::POST, uri, body).await;
    if !s.is_success() {
        return Err(format!("{uri}: {s} {}", String::from_utf8_lossy(&b)));
    }
    serde_json::from_slice(&b).map_err(e)
}

fn strip_of(v: &Value) -> Result<(usize, usize, Vec<u8>), String> {
    let b64 = v["image_strip"].as_str().ok_or("no strip")?;
    decode_png(&STANDARD.decode(b64).map_err(e)?).map_err(e)
}

async fn scripted_session(app: Arc<AppState>) -> Check {
    let created = post(&app, "/v1/sessions", Some(json!({"class_id": 3, "target_len": 17, "seed": 7}))).await?;
    let id = created["session_id"].as_str().ok_or("no id")?.to_string();
    let mut strips = Vec::new();
    for _ in 0..16 {
        strips.push(strip_of(&post(&app, &format!("/v1/sessions/{id}/step"), None).await?)?);
    }
    let rejected = post(&app, &format!("/v1/sessions/{id}/reject"), None).await?;
    let replaced_position = rejected["position"] == 15;
    strips[15] = strip_of(&rejected)?;
    strips.push(strip_of(&post(&app, &format!("/v1/sessions/{id}/step"), None).await?)?);
    let (s, png) = call(&app, Method::GET, &format!("/v1/sessions/{id}/image"), None).await;
    if s != StatusCode::OK {
        return Err(format!("image: {s}"));
    }
    let (h, width, rgb) = decode_png(&png).map_err(e)?;
    let bw = strips[0].1;
    let mut mismatched = Vec::new();
    for (p, (sh, sw, px)) in strips.iter().enumerate() {
        let same = *sh == h && *sw == bw && (0..h).all(|y| rgb[(y * width + p * bw) * 3..(y * width + (p + 1) * bw) * 3] == px[y * bw * 3..(y + 1) * bw * 3]);
        if !same {
            mismatched.push(p);
        }
    }
    let ok = replaced_position && width == 17 * bw && mismatched.is_empty();
    Ok((ok, format!("17 strips of {h}×{bw}; image {h}×{width}; mismatched strips {mismatched:?}; reject replaced position 15: {replaced_position}")))
}

fn service(lab: &mut Lab) -> Check {
    let run = lab.run(RunKey::AllEqui)?;
    let gcfg = run.model.config().clone();
    let sampler = SamplerConfig::default();
    let manifest = CheckpointManifest {
        cfg_end: sampler.cfg_end,
        config: Value::Null,
        ema: false,
        ema_params: vec![],
        extra: Value::Null,
        kind: "generator".into(),
        params: vec![],
        provenance: Provenance::default(),
        version: 1,
    };
    let config = GeneratorBundleConfig { generator: gcfg, codec: run.codec.config(), sampler, class_names: vec![] };
    let bundle = ModelBundle { generator: run.model.clone(), codec: run.codec.clone(), config, manifest };
    let app = Arc::new(AppState::new(Some(bundle), ServiceConfig::default()).map_err(e)?);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(e)?;
    rt.block_on(scripted_session(app))
}

// --------------------------------------------------------------------- main

fn main() {
    let only: Option<Vec<String>> = std::env::var("EQAR_ACCEPT_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut lab = Lab::default();
    type Criterion = (&'static str, f64, Box<dyn Fn(&mut Lab) -> Check>);
    let criteria: Vec<Criterion> = vec![
        ("gradient-correctness", 60.0, Box::new(|_| gradients())),
        ("tokenization-algebra", 10.0, Box::new(|_| tokenization())),
        ("attention-contracts", 60.0, Box::new(|_| attention())),
        ("shift-equivariance", 60.0, Box::new(|_| shift_equivariance())),
        ("flop-accounting", 1.0, Box::new(|_| flops())),
        ("sampler-exactness", 60.0, Box::new(|_| sampler())),
        ("zero-shot-transfer", 1800.0, Box::new(zero_shot)),
        ("single-task-transfer", 1800.0, Box::new(single_task)),
        ("long-extrapolation", 600.0, Box::new(long_extrapolation)),
        ("dataset-bias-contrast", 1800.0, Box::new(dataset_bias)),
        ("service-contract", 60.0, Box::new(service)),
    ];
    let mut passed = 0;
    let mut total = 0;
    for (name, budget, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
            continue;
        }
        total += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut lab)));
        let secs = started.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(Ok((ok, d))) => (ok, d),
            Ok(Err(msg)) => (false, format!("error: {msg}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = secs <= *budget;
        let ok = ok && in_time;
        let budget_note = if in_time { String::new() } else { format!(" (over the {budget:.0} s budget)") };
        println!("{} {name} [{secs:.1} s]{budget_note}: {detail}", if ok { "PASS" } else { "FAIL" });
        passed += usize::from(ok);
    }
    println!("acceptance: {passed}/{total} criteria pass");
}
