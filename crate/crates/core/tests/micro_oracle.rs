//! End-to-end micro-oracle: the full two-view objective on a 2-image, 2x2-patch
//! toy model, recomputed from the raw parameters with plain `f64` loops.

mod common;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;

use patchgraph::config::RunConfig;
use patchgraph::gnn::{Activation, GnnLayerKind};
use patchgraph::graph::{DistanceMetric, KnnGraph};
use patchgraph::objective::CenterState;
use patchgraph::params::{ParamSet, ParamSource, Precision};
use patchgraph::train::{compute_losses, init_params, train_step_on_views, Method, Networks, Schedules, SslState};
use patchgraph::vit::{Image, ImageBatch};

use common::{adjacency, dense_layer, knn_oracle, rng, Matrix};

fn toy(method: Method, layer: GnnLayerKind, metric: DistanceMetric) -> RunConfig {
    let mut c = RunConfig::tiny();
    c.encoder.image_size = 4;
    c.encoder.embed_dim = 8;
    c.encoder.depth = 2;
    c.augment.output_size = 4;
    c.graph.k_neighbors = 2;
    c.graph.metric = metric;
    c.gnn.layer = layer;
    c.head.hidden_widths = vec![12];
    c.head.bottleneck_dim = 6;
    c.head.output_dim = 10;
    c.head.graph_output_dim = Some(7);
    c.train.precision = Precision::F64;
    c.train.method = method;
    c.loss.beta = 0.4;
    c
}

struct Params<'a>(&'a ParamSet);

impl Params<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.0
            .tensor(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    fn mat(&self, name: &str) -> Matrix {
        self.0.tensor(name).unwrap().to_vec2().unwrap()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn affine(x: &[f64], w: &Matrix, b: Option<&[f64]>) -> Vec<f64> {
    let mut out: Vec<f64> = b.map_or(vec![0.0; w[0].len()], <[f64]>::to_vec);
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i]) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Final-normed tokens `[cls, patch_0, ..]` of one image.
fn encode(cfg: &RunConfig, p: &Params<'_>, img: &Image) -> Vec<Vec<f64>> {
    let e = &cfg.encoder;
    let (ps, d, heads) = (e.patch_size, e.embed_dim, e.heads);
    let hd = d / heads;
    let grid = e.image_size / ps;
    let w_patch = p.mat("encoder.patch_embed.weight");
    let b_patch = p.vec("encoder.patch_embed.bias");
    let pos = p.mat("encoder.pos_embed");
    let cls = p.vec("encoder.cls_token");
    let mut tokens = vec![cls.iter().zip(&pos[0]).map(|(a, b)| a + b).collect::<Vec<_>>()];
    for pr in 0..grid {
        for pc in 0..grid {
            let mut raw = Vec::new();
            for y in 0..ps {
                for x in 0..ps {
                    for c in 0..e.in_channels {
                        raw.push(img.at(pr * ps + y, pc * ps + x, c) as f64);
                    }
                }
            }
            let idx = 1 + pr * grid + pc;
            let emb = affine(&raw, &w_patch, Some(&b_patch));
            tokens.push(emb.iter().zip(&pos[idx]).map(|(a, b)| a + b).collect());
        }
    }
    let t = tokens.len();
    for blk in 0..e.depth {
        let name = |s: &str| format!("encoder.blocks.{blk}.{s}");
        let h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|x| layer_norm(x, &p.vec(&name("norm1.weight")), &p.vec(&name("norm1.bias")), e.layer_norm_eps))
            .collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|x| affine(x, &p.mat(&name("qkv.weight")), Some(&p.vec(&name("qkv.bias")))))
            .collect();
        let mut att_out = vec![vec![0.0; d]; t];
        for head in 0..heads {
            let q = |i: usize, j: usize| qkv[i][head * hd + j];
            let k = |i: usize, j: usize| qkv[i][d + head * hd + j];
            let v = |i: usize, j: usize| qkv[i][2 * d + head * hd + j];
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|s| (0..hd).map(|j| q(i, j) * k(s, j)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for j in 0..hd {
                    att_out[i][head * hd + j] = (0..t).map(|s| a[s] * v(s, j)).sum();
                }
            }
        }
        for (x, o) in tokens.iter_mut().zip(&att_out) {
            let proj = affine(o, &p.mat(&name("proj.weight")), Some(&p.vec(&name("proj.bias"))));
            for (xi, pi) in x.iter_mut().zip(proj) {
                *xi += pi;
            }
        }
        for x in tokens.iter_mut() {
            let h = layer_norm(x, &p.vec(&name("norm2.weight")), &p.vec(&name("norm2.bias")), e.layer_norm_eps);
            let hidden: Vec<f64> = affine(&h, &p.mat(&name("fc1.weight")), Some(&p.vec(&name("fc1.bias"))))
                .into_iter()
                .map(gelu)
                .collect();
            let out = affine(&hidden, &p.mat(&name("fc2.weight")), Some(&p.vec(&name("fc2.bias"))));
            for (xi, oi) in x.iter_mut().zip(out) {
                *xi += oi;
            }
        }
    }
    tokens
        .iter()
        .map(|x| layer_norm(x, &p.vec("encoder.norm.weight"), &p.vec("encoder.norm.bias"), e.layer_norm_eps))
        .collect()
}

fn head(p: &Params<'_>, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        h = affine(&h, &p.mat(&format!("{prefix}.mlp.{l}.weight")), Some(&p.vec(&format!("{prefix}.mlp.{l}.bias"))));
        if l + 1 < layers {
            h = h.into_iter().map(gelu).collect();
        }
    }
    let norm = (h.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
    let z: Vec<f64> = h.iter().map(|v| v / norm).collect();
    let v = p.mat(&format!("{prefix}.last.weight_v"));
    let cols = v[0].len();
    (0..cols)
        .map(|j| {
            let cn = v.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
            z.iter().zip(&v).map(|(zi, r)| zi * r[j] / cn).sum()
        })
        .collect()
}

/// Per-view logits `[view][image]` for the class and graph branches.
fn logits(cfg: &RunConfig, p: &Params<'_>, views: &[Vec<Image>; 2]) -> ([Vec<Vec<f64>>; 2], Option<[Vec<Vec<f64>>; 2]>) {
    let layers = cfg.head.hidden_widths.len() + 1;
    let mut cls = [Vec::new(), Vec::new()];
    let mut sgc = [Vec::new(), Vec::new()];
    for (v, imgs) in views.iter().enumerate() {
        for img in imgs {
            let tokens = encode(cfg, p, img);
            cls[v].push(head(p, "cls_head", layers, &tokens[0]));
            let patches: Matrix = tokens[1..].to_vec();
            let pooled_in = match cfg.train.method {
                Method::DinoBaseline => continue,
                Method::DinoPatchMean => patches.clone(),
                Method::DinoSgc => {
                    let n = patches.len();
                    let arr = Array2::from_shape_fn((n, patches[0].len()), |(i, j)| patches[i][j]);
                    let g = KnnGraph::from_edges(n, knn_oracle(&arr, cfg.graph.k_neighbors, cfg.graph.metric)).unwrap();
                    let a = adjacency(&g);
                    let mut h = patches.clone();
                    for l in 0..cfg.gnn.num_layers {
                        h = dense_layer(
                            cfg.gnn.layer,
                            &a,
                            &h,
                            &p.mat(&format!("gnn.layers.{l}.weight")),
                            &p.vec(&format!("gnn.layers.{l}.bias")),
                            Activation::Relu,
                        );
                    }
                    h
                }
            };
            let n = pooled_in.len() as f64;
            let pooled: Vec<f64> = (0..pooled_in[0].len())
                .map(|j| pooled_in.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            sgc[v].push(head(p, "sgc_head", layers, &pooled));
        }
    }
    let has_graph = cfg.train.method != Method::DinoBaseline;
    (cls, has_graph.then_some(sgc))
}

fn cross_view(cfg: &RunConfig, s: &[Vec<Vec<f64>>; 2], t: &[Vec<Vec<f64>>; 2], center: &[f64]) -> f64 {
    let (ts, tt) = (cfg.loss.student_temperature, cfg.loss.teacher_temperature);
    let mut total = 0.0;
    for (a, b) in [(0, 1), (1, 0)] {
        let b_rows = &t[b];
        let mut sum = 0.0;
        for (srow, trow) in s[a].iter().zip(b_rows) {
            let p = softmax(&trow.iter().zip(center).map(|(x, c)| (x - c) / tt).collect::<Vec<_>>());
            let q = softmax(&srow.iter().map(|x| x / ts).collect::<Vec<_>>());
            sum -= p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>();
        }
        total += sum / s[a].len() as f64;
    }
    total / 2.0
}

fn oracle(cfg: &RunConfig, student: &ParamSet, teacher: &ParamSet, views: &[Vec<Image>; 2], centers: &[Vec<f64>; 2]) -> (f64, f64, f64) {
    let (s_cls, s_sgc) = logits(cfg, &Params(student), views);
    let (t_cls, t_sgc) = logits(cfg, &Params(teacher), views);
    let cls = cross_view(cfg, &s_cls, &t_cls, &centers[0]);
    let sgc = match (s_sgc, t_sgc) {
        (Some(s), Some(t)) => cross_view(cfg, &s, &t, &centers[1]),
        _ => 0.0,
    };
    (cfg.loss.alpha * cls + cfg.loss.beta * sgc, cls, sgc)
}

fn random_image(r: &mut rand_chacha::ChaCha8Rng, size: usize) -> Image {
    Image::new(size, size, 3, (0..size * size * 3).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn stacked(views: &[Vec<Image>; 2]) -> ImageBatch {
    let all: Vec<Image> = views[0].iter().chain(&views[1]).cloned().collect();
    ImageBatch::from_images(&all, DType::F64).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn check(method: Method, layer: GnnLayerKind, metric: DistanceMetric, seed: u64) {
    let mut cfg = toy(method, layer, metric);
    let mut r = rng(seed);
    let views = [
        vec![random_image(&mut r, 4), random_image(&mut r, 4)],
        vec![random_image(&mut r, 4), random_image(&mut r, 4)],
    ];
    cfg.seed = seed;
    let student = init_params(&cfg).unwrap();
    cfg.seed = seed + 100;
    let teacher = init_params(&cfg).unwrap();
    cfg.seed = seed;
    let cls_center: Vec<f64> = (0..10).map(|_| r.random_range(-0.2..0.2)).collect();
    let sgc_center: Vec<f64> = (0..7).map(|_| r.random_range(-0.2..0.2)).collect();
    let centers = CenterState {
        cls_center: Tensor::new(cls_center.clone(), &Device::Cpu).unwrap(),
        sgc_center: Tensor::new(sgc_center.clone(), &Device::Cpu).unwrap(),
    };
    let got = compute_losses(
        &cfg,
        &Networks::load(&cfg, &student).unwrap(),
        &Networks::load(&cfg, &teacher).unwrap(),
        &centers,
        &stacked(&views),
        None,
    )
    .unwrap();
    let (total, cls, sgc) = oracle(&cfg, &student, &teacher, &views, &[cls_center, sgc_center]);
    let tag = format!("{} {} {}", method.as_str(), layer.as_str(), metric.as_str());
    assert!((scalar(&got.total) - total).abs() < 1e-9, "{tag}: total {} vs {total}", scalar(&got.total));
    assert!((scalar(&got.cls) - cls).abs() < 1e-9, "{tag}: cls {} vs {cls}", scalar(&got.cls));
    let got_sgc = got.sgc.as_ref().map_or(0.0, scalar);
    assert!((got_sgc - sgc).abs() < 1e-9, "{tag}: graph term {got_sgc} vs {sgc}");
}

#[test]
fn objective_matches_unrolled_computation_for_every_layer_kind() {
    for (i, layer) in [GnnLayerKind::Gcn, GnnLayerKind::Sage, GnnLayerKind::Gin].into_iter().enumerate() {
        check(Method::DinoSgc, layer, DistanceMetric::Euclidean, i as u64);
    }
    check(Method::DinoSgc, GnnLayerKind::Gcn, DistanceMetric::Cosine, 7);
}

#[test]
fn baseline_and_patch_mean_match_unrolled_computation() {
    check(Method::DinoBaseline, GnnLayerKind::Gcn, DistanceMetric::Euclidean, 11);
    check(Method::DinoPatchMean, GnnLayerKind::Gcn, DistanceMetric::Euclidean, 12);
}

#[test]
fn train_step_logs_the_unrolled_loss() {
    let cfg = toy(Method::DinoSgc, GnnLayerKind::Gcn, DistanceMetric::Euclidean);
    let mut r = rng(21);
    let views = [
        vec![random_image(&mut r, 4), random_image(&mut r, 4)],
        vec![random_image(&mut r, 4), random_image(&mut r, 4)],
    ];
    let mut state = SslState::new(&cfg).unwrap();
    let before = state.student.snapshot().unwrap();
    let (total, cls, sgc) = oracle(&cfg, &before, &state.teacher.clone(), &views, &[vec![0.0; 10], vec![0.0; 7]]);
    let row = train_step_on_views(&mut state, &stacked(&views), 0, &cfg, &Schedules::constant(1e-3, 0.9)).unwrap();
    assert!((row.loss_total - total).abs() < 1e-9, "{} vs {total}", row.loss_total);
    assert!((row.loss_cls - cls).abs() < 1e-9);
    assert!((row.loss_sgc - sgc).abs() < 1e-9);
    assert_eq!(row.step, 1);
}
