//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use multires_core::audio::AudioBuffer;
use multires_core::ctc::{ctc_brute_force, ctc_loss, ctc_loss_value, LabelSeq};
use multires_core::encoder::{Encoder, EncoderConfig, FeaturePyramid, PyramidVars};
use multires_core::fusion::{FusionInit, HierFusion, ParallelFusion};
use multires_core::gradcheck::{check_gradients, DEFAULT_STEP};
use multires_core::graph::{Graph, Var};
use multires_core::nn::{MultiHeadAttention, TransformerLayer};
use multires_core::params::{Bound, ParamStore};
use multires_core::resolution::{ConvStackSpec, ResolutionSpec};
use multires_core::{SplitMix, Tensor, UpsampleMode};

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> anyhow::Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub make: fn(&mut SplitMix) -> (Vec<Tensor>, Build),
}

pub struct GradOutcome {
    pub name: &'static str,
    pub tol: f64,
    pub worst: f64,
    pub seeds: usize,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

pub fn rand(shape: &[usize], rng: &mut SplitMix) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// `sum(v * W)` with a fixed pseudo-random `W` of `v`'s shape, so every
/// output entry carries a distinct weight.
pub fn project(g: &mut Graph, v: Var) -> anyhow::Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut SplitMix::new(0x5EED + shape.iter().product::<usize>() as u64));
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m)?)
}

macro_rules! case {
    ($name:expr, $tol:expr, |$rng:ident| $body:block) => {
        GradCase {
            name: $name,
            tol: $tol,
            make: {
                fn make($rng: &mut SplitMix) -> (Vec<Tensor>, Build) $body
                make
            },
        }
    };
}

fn unary(x: Tensor, f: fn(&mut Graph, Var) -> anyhow::Result<Var>) -> (Vec<Tensor>, Build) {
    (vec![x], Box::new(move |g, v| {
        let y = f(g, v[0])?;
        project(g, y)
    }))
}

fn binary(a: Tensor, b: Tensor, f: fn(&mut Graph, Var, Var) -> anyhow::Result<Var>) -> (Vec<Tensor>, Build) {
    (vec![a, b], Box::new(move |g, v| {
        let y = f(g, v[0], v[1])?;
        project(g, y)
    }))
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        case!("matmul", PRIMITIVE_TOL, |r| { binary(rand(&[2, 3], r), rand(&[3, 2], r), |g, a, b| Ok(g.matmul(a, b)?)) }),
        case!("add", PRIMITIVE_TOL, |r| { binary(rand(&[3, 4], r), rand(&[3, 4], r), |g, a, b| Ok(g.add(a, b)?)) }),
        case!("sub", PRIMITIVE_TOL, |r| { binary(rand(&[3, 4], r), rand(&[3, 4], r), |g, a, b| Ok(g.sub(a, b)?)) }),
        case!("mul", PRIMITIVE_TOL, |r| { binary(rand(&[3, 4], r), rand(&[3, 4], r), |g, a, b| Ok(g.mul(a, b)?)) }),
        case!("add_row", PRIMITIVE_TOL, |r| { binary(rand(&[3, 4], r), rand(&[4], r), |g, a, b| Ok(g.add_row(a, b)?)) }),
        case!("mul_scalar", PRIMITIVE_TOL, |r| { unary(rand(&[3, 4], r), |g, a| Ok(g.mul_scalar(a, -1.7)?)) }),
        case!("scale_by", PRIMITIVE_TOL, |r| {
            binary(rand(&[3, 4], r), Tensor::scalar(r.uniform_symmetric(2.0)), |g, a, s| Ok(g.scale_by(a, s)?))
        }),
        case!("concat_rows", PRIMITIVE_TOL, |r| { binary(rand(&[2, 3], r), rand(&[4, 3], r), |g, a, b| Ok(g.concat(&[a, b], 0)?)) }),
        case!("concat_cols", PRIMITIVE_TOL, |r| { binary(rand(&[3, 2], r), rand(&[3, 1], r), |g, a, b| Ok(g.concat(&[a, b], 1)?)) }),
        case!("slice_rows", PRIMITIVE_TOL, |r| { unary(rand(&[5, 3], r), |g, a| Ok(g.slice(a, 0, 1, 3)?)) }),
        case!("slice_cols", PRIMITIVE_TOL, |r| { unary(rand(&[3, 5], r), |g, a| Ok(g.slice(a, 1, 2, 2)?)) }),
        case!("transpose", PRIMITIVE_TOL, |r| { unary(rand(&[3, 5], r), |g, a| Ok(g.transpose(a)?)) }),
        case!("layer_norm", PRIMITIVE_TOL, |r| {
            let inputs = vec![rand(&[3, 5], r), rand(&[5], r), rand(&[5], r)];
            (inputs, Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                project(g, y)
            }))
        }),
        case!("gelu", PRIMITIVE_TOL, |r| { unary(Tensor::uniform(&[4, 3], 3.0, r), |g, a| Ok(g.gelu(a)?)) }),
        case!("softmax_rows", PRIMITIVE_TOL, |r| { unary(Tensor::uniform(&[3, 4], 2.0, r), |g, a| Ok(g.softmax(a, 1)?)) }),
        case!("softmax_cols", PRIMITIVE_TOL, |r| { unary(Tensor::uniform(&[3, 4], 2.0, r), |g, a| Ok(g.softmax(a, 0)?)) }),
        case!("log_softmax", PRIMITIVE_TOL, |r| { unary(Tensor::uniform(&[3, 4], 2.0, r), |g, a| Ok(g.log_softmax(a)?)) }),
        case!("embedding_lookup", PRIMITIVE_TOL, |r| {
            unary(rand(&[6, 4], r), |g, a| Ok(g.embedding_lookup(a, &[2, 0, 5, 2])?))
        }),
        case!("conv1d", PRIMITIVE_TOL, |r| { binary(rand(&[8, 2], r), rand(&[3, 2, 3], r), |g, x, w| Ok(g.conv1d(x, w, 2)?)) }),
        case!("conv1d_padded", PRIMITIVE_TOL, |r| {
            binary(rand(&[7, 3], r), rand(&[3, 3, 2], r), |g, x, w| Ok(g.conv1d_padded(x, w, 1, 1)?))
        }),
        case!("conv1d_transpose", PRIMITIVE_TOL, |r| {
            binary(rand(&[4, 2], r), rand(&[3, 2, 3], r), |g, x, w| Ok(g.conv1d_transpose(x, w, 2)?))
        }),
        case!("repeat_rows", PRIMITIVE_TOL, |r| { unary(rand(&[3, 2], r), |g, a| Ok(g.repeat_rows(a, 3)?)) }),
        case!("sum", PRIMITIVE_TOL, |r| { unary(rand(&[3, 4], r), |g, a| Ok(g.sum(a)?)) }),
        case!("mean", PRIMITIVE_TOL, |r| { unary(rand(&[3, 4], r), |g, a| Ok(g.mean(a)?)) }),
        case!("select", PRIMITIVE_TOL, |r| { unary(rand(&[3, 4], r), |g, a| Ok(g.select(a, 7)?)) }),
        case!("mse", PRIMITIVE_TOL, |r| { binary(rand(&[3, 4], r), rand(&[3, 4], r), |g, a, b| Ok(g.mse(a, b)?)) }),
    ]
}

/// Inputs are the store's parameters (in id order) followed by `extra`;
/// `f` receives the rebound parameters and the extra vars.
fn with_params(
    store: &ParamStore,
    extra: Vec<Tensor>,
    f: impl Fn(&mut Graph, &Bound, &[Var]) -> anyhow::Result<Var> + 'static,
) -> (Vec<Tensor>, Build) {
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    inputs.extend(extra);
    (inputs, Box::new(move |g, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let y = f(g, &p, &v[n..])?;
        project(g, y)
    }))
}

/// Moves every parameter off its structured initial value.
fn jitter(store: &mut ParamStore, scale: f64, rng: &mut SplitMix) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.uniform_symmetric(scale);
        }
    }
}

fn toy_pyramid(frames: usize, layers: usize, dim: usize, stride: usize, input_len: usize, rng: &mut SplitMix) -> FeaturePyramid {
    FeaturePyramid {
        layers: (0..layers).map(|_| rand(&[frames, dim], rng)).collect(),
        resolution: ResolutionSpec::new(stride, 16000),
        input_len,
    }
}

/// Frame counts of the toy stacks at 8000 samples: C, B, A.
const TOY_FRAMES: [(usize, usize); 3] = [(4, 1600), (12, 640), (24, 320)];

fn pyramid_inputs(
    pyramids: &[FeaturePyramid],
) -> (Vec<Tensor>, Vec<(usize, ResolutionSpec, usize)>) {
    let mut t = Vec::new();
    let mut meta = Vec::new();
    for p in pyramids {
        meta.push((p.layers.len(), p.resolution, p.input_len));
        t.extend(p.layers.iter().cloned());
    }
    (t, meta)
}

fn rebuild(vars: &[Var], meta: &[(usize, ResolutionSpec, usize)]) -> Vec<PyramidVars> {
    let mut at = 0;
    meta.iter()
        .map(|&(n, resolution, input_len)| {
            let layers = vars[at..at + n].to_vec();
            at += n;
            PyramidVars { layers, resolution, input_len }
        })
        .collect()
}

fn parallel_case(rng: &mut SplitMix, mode: UpsampleMode) -> (Vec<Tensor>, Build) {
    let dim = 3;
    let pyramids: Vec<_> = TOY_FRAMES.iter().map(|&(t, s)| toy_pyramid(t, 2, dim, s, 8000, rng)).collect();
    let res: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let mut store = ParamStore::new();
    let fusion = ParallelFusion::new(&mut store, &res, 1, dim, mode).expect("valid fusion");
    jitter(&mut store, 0.5, rng);
    let (extra, meta) = pyramid_inputs(&pyramids);
    with_params(&store, extra, move |g, p, v| Ok(fusion.forward(g, p, &rebuild(v, &meta))?))
}

fn hier_case(rng: &mut SplitMix, k: usize) -> (Vec<Tensor>, Build) {
    let dim = 3;
    let pyramids: Vec<_> = TOY_FRAMES[3 - k..].iter().map(|&(t, s)| toy_pyramid(t, 1, dim, s, 8000, rng)).collect();
    let res: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let mut store = ParamStore::new();
    let fusion = HierFusion::new(&mut store, &res, dim, FusionInit::NearIdentity { seed: rng.next_u64() }).expect("valid fusion");
    jitter(&mut store, 0.2, rng);
    let (extra, meta) = pyramid_inputs(&pyramids);
    with_params(&store, extra, move |g, p, v| Ok(fusion.forward(g, p, &rebuild(v, &meta))?))
}

pub fn composite_cases() -> Vec<GradCase> {
    vec![
        case!("three_layer_composite", COMPOSITE_TOL, |r| {
            let inputs = vec![rand(&[4, 3], r), rand(&[3, 5], r), rand(&[5], r), rand(&[5], r), rand(&[5, 2], r)];
            (inputs, Box::new(|g: &mut Graph, v: &[Var]| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.gelu(h)?;
                let h = g.layer_norm(h, v[2], v[3])?;
                let h = g.matmul(h, v[4])?;
                let h = g.softmax(h, 1)?;
                project(g, h)
            }))
        }),
        case!("attention", COMPOSITE_TOL, |r| {
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, r);
            jitter(&mut store, 0.1, r);
            with_params(&store, vec![rand(&[4, 8], r)], move |g, p, v| Ok(mha.forward(g, p, v[0])?.output))
        }),
        case!("transformer_layer", COMPOSITE_TOL, |r| {
            let mut store = ParamStore::new();
            let layer = TransformerLayer::new(&mut store, "layer", 4, 6, 2, r);
            jitter(&mut store, 0.1, r);
            with_params(&store, vec![rand(&[3, 4], r)], move |g, p, v| Ok(layer.forward(g, p, v[0])?))
        }),
        case!("encoder", COMPOSITE_TOL, |r| {
            let cfg = EncoderConfig {
                conv_stack: "(10,5)*1 + (3,2)*1".parse::<ConvStackSpec>().expect("stack"),
                model_dim: 4,
                ffn_dim: 6,
                layers: 1,
                heads: 2,
                conv_channels: 3,
                sample_rate: 16000,
                seed: r.next_u64(),
            };
            let mut store = ParamStore::new();
            let enc = Encoder::new(cfg, &mut store, "enc").expect("encoder");
            jitter(&mut store, 0.05, r);
            let samples = (0..200).map(|_| r.uniform_symmetric(0.5)).collect();
            let audio = AudioBuffer::new(samples, 16000).expect("audio");
            with_params(&store, vec![], move |g, p, _| Ok(enc.forward_graph(g, p, &audio)?.last()))
        }),
        case!("ctc_loss", COMPOSITE_TOL, |r| {
            let target = LabelSeq::new(vec![1, 2, 2]).expect("labels");
            (vec![Tensor::uniform(&[7, 4], 2.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let lp = g.log_softmax(v[0])?;
                Ok(ctc_loss(g, lp, &target)?)
            }))
        }),
        case!("fusion_parallel_repeat", COMPOSITE_TOL, |r| { parallel_case(r, UpsampleMode::Repeat) }),
        case!("fusion_parallel_deconv", COMPOSITE_TOL, |r| { parallel_case(r, UpsampleMode::Deconv) }),
        case!("fusion_hier_pair", COMPOSITE_TOL, |r| { hier_case(r, 2) }),
        case!("fusion_hier_triple", COMPOSITE_TOL, |r| { hier_case(r, 3) }),
    ]
}

pub fn run_case(case: &GradCase, seeds: usize) -> GradOutcome {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let mut rng = SplitMix::fork(seed, 0x6C);
        let (inputs, build) = (case.make)(&mut rng);
        let r = check_gradients(|g, v| build(g, v), &inputs, DEFAULT_STEP)
            .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", case.name));
        worst = worst.max(r.rel_error());
    }
    GradOutcome { name: case.name, tol: case.tol, worst, seeds }
}

/// Random admissible CTC instance with `T <= 8`, `V <= 4`, `U <= 3`.
pub fn ctc_instance(rng: &mut SplitMix) -> (Tensor, LabelSeq) {
    loop {
        let frames = 1 + rng.below(8);
        let vocab = 2 + rng.below(3);
        let len = rng.below(4);
        let labels = LabelSeq::new((0..len).map(|_| 1 + rng.below(vocab - 1)).collect()).expect("labels");
        if !labels.admissible(frames) {
            continue;
        }
        let logits = Tensor::uniform(&[frames, vocab], 3.0, rng);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let lp = g.log_softmax(x).expect("finite");
        return (g.value(lp).clone(), labels);
    }
}

/// Largest `|forward - brute force|` over `n` random instances.
pub fn ctc_oracle(n: usize, seed: u64) -> f64 {
    let mut rng = SplitMix::new(seed);
    (0..n)
        .map(|_| {
            let (lp, labels) = ctc_instance(&mut rng);
            let fast = ctc_loss_value(&lp, &labels).expect("admissible");
            let brute = ctc_brute_force(&lp, &labels).expect("small");
            (fast - brute).abs()
        })
        .fold(0.0, f64::max)
}

/// Pyramids of the three toy encoders (C, B, A order) on one 0.5 s chirp.
pub fn toy_pyramids(seed: u64) -> Vec<FeaturePyramid> {
    let audio = multires_core::audio::synth_signal(multires_core::SignalKind::Chirp, 0.5, 16000, seed).expect("audio");
    ['C', 'B', 'A']
        .iter()
        .enumerate()
        .map(|(k, &row)| {
            let cfg = EncoderConfig::toy_row(row, seed.wrapping_mul(31).wrapping_add(k as u64)).expect("row");
            let (enc, store) = multires_core::encoder::build_encoder(cfg).expect("encoder");
            enc.forward_features(&store, &audio).expect("forward")
        })
        .collect()
}

/// Largest `|sum(w) - 1|` after repeated large gradient steps and random
/// jumps on the parallel-fusion logits.
pub fn unit_sum_drift(seed: u64, steps: usize) -> f64 {
    let mut rng = SplitMix::new(seed);
    let pyramids: Vec<_> = TOY_FRAMES.iter().map(|&(t, s)| toy_pyramid(t, 3, 4, s, 8000, &mut rng)).collect();
    let res: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let mut store = ParamStore::new();
    let fusion = ParallelFusion::new(&mut store, &res, 2, 4, UpsampleMode::Repeat).expect("fusion");
    let mut worst = 0.0f64;
    for step in 0..steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let vars: Vec<_> = pyramids.iter().map(|py| PyramidVars::constant(&mut g, py)).collect();
        let out = fusion.forward(&mut g, &p, &vars).expect("forward");
        let loss = project(&mut g, out).expect("loss");
        g.backward(loss).expect("backward");
        let grads = store.gradients(&g, &p);
        store.descend(&grads, 10f64.powi((step % 4) as i32));
        if step % 3 == 2 {
            for v in store.get_mut(fusion.logits).data_mut() {
                *v += rng.uniform_symmetric(50.0);
            }
        }
        let w = fusion.weights(&store).weights();
        worst = worst.max((w.sum() - 1.0).abs());
    }
    worst
}

/// Writes the dump of `cfg` twice into `dir` and reports whether the files
/// are byte-identical.
pub fn dump_twice_identical(cfg: &multires_core::harness::RunConfig, dir: &std::path::Path) -> bool {
    let audio = multires_core::audio::synth_signal(multires_core::SignalKind::Chirp, 0.5, 16000, cfg.seed).expect("audio");
    let mut files = Vec::new();
    for i in 0..2 {
        let sys = multires_core::harness::System::build(cfg).expect("system");
        let path = dir.join(format!("run{i}.mrf"));
        sys.dump(&audio).expect("dump").write(&path).expect("write");
        files.push(std::fs::read(&path).expect("read"));
    }
    files[0] == files[1]
}

/// Largest pointwise gap between two trainings of `cfg`.
pub fn loss_curve_gap(cfg: &multires_core::harness::RunConfig) -> f64 {
    let a = multires_core::harness::train_toy(cfg).expect("train");
    let b = multires_core::harness::train_toy(cfg).expect("train");
    assert_eq!(a.losses.len(), b.losses.len());
    a.losses.iter().zip(&b.losses).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn specs(pyramids: &[FeaturePyramid], mode: UpsampleMode) -> Vec<multires_core::fusion::UpsamplerSpec> {
    let res: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let target = multires_core::resolution::gcd_resolution(&res).unwrap();
    res.iter().map(|r| multires_core::fusion::UpsamplerSpec::between(mode, r, &target).unwrap()).collect()
}

/// Repeats every last layer to the common resolution, trims to the shortest
/// stream (capped at `L // R`) and adds them coarse to fine.
pub fn brute_trimmed_sum(pyramids: &[FeaturePyramid]) -> Tensor {
    let ups: Vec<Tensor> = pyramids
        .iter()
        .zip(specs(pyramids, UpsampleMode::Repeat))
        .map(|(p, s)| {
            let x = p.last();
            let rows: Vec<Vec<f64>> = (0..x.rows() * s.factor).map(|t| x.row(t / s.factor).to_vec()).collect();
            Tensor::from_rows(&rows)
        })
        .collect();
    let res: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let cap = multires_core::resolution::fused_len(pyramids[0].input_len, &multires_core::resolution::gcd_resolution(&res).unwrap());
    let len = ups.iter().map(Tensor::rows).min().unwrap().min(cap);
    let mut acc = ups[0].take_rows(len);
    for u in &ups[1..] {
        let u = u.take_rows(len);
        for (a, b) in acc.data_mut().iter_mut().zip(u.data()) {
            *a += b;
        }
    }
    acc
}

/// Largest gap between one-hot parallel fusion and the lone upsampled stream.
pub fn one_hot_gap(pyramids: &[FeaturePyramid]) -> f64 {
    use multires_core::fusion::{fuse_parallel, upsample, FusionWeights};
    let up = specs(pyramids, UpsampleMode::Repeat);
    let depth = pyramids[0].depth();
    let mut worst = 0.0f64;
    for k in 0..pyramids.len() {
        for i in 0..=depth {
            let w = FusionWeights::one_hot(pyramids.len(), depth, k, i);
            let fused = fuse_parallel(pyramids, &w, &up).expect("fusion");
            let single = upsample(&pyramids[k].layers[i], up[k]).expect("upsample").take_rows(fused.rows());
            worst = worst.max(if fused.shape() == single.shape() { fused.max_abs_diff(&single) } else { f64::INFINITY });
        }
    }
    worst
}
