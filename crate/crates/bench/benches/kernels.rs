use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use multires_core::audio::{synth_signal, SignalKind};
use multires_core::ctc::{ctc_forward_backward, LabelSeq};
use multires_core::kernels::{conv1d_forward, matmul_acc, ConvGeom};
use multires_core::{Encoder, EncoderConfig, ParamStore, SplitMix, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = SplitMix::new(1);
    for n in [32usize, 64, 128] {
        let a = Tensor::uniform(&[n, n], 1.0, &mut rng);
        let b = Tensor::uniform(&[n, n], 1.0, &mut rng);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_acc(black_box(a.data()), black_box(b.data()), &mut out, n, n, n);
            })
        });
    }
    group.finish();
}

fn conv1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d");
    let mut rng = SplitMix::new(2);
    for (kernel, stride) in [(3usize, 2usize), (10, 5)] {
        let g = ConvGeom { kernel, stride, pad: 0, c_in: 32, c_out: 32 };
        let t_in = 800;
        let x = Tensor::uniform(&[t_in, 32], 1.0, &mut rng);
        let w = Tensor::uniform(&[kernel, 32, 32], 0.1, &mut rng);
        let mut out = vec![0.0; g.out_len(t_in) * 32];
        group.bench_function(format!("k{kernel}s{stride}"), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                conv1d_forward(black_box(x.data()), t_in, black_box(w.data()), g, &mut out);
            })
        });
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    let audio = synth_signal(SignalKind::Chirp, 1.0, 16000, 3).expect("audio");
    for row in ['A', 'B', 'C'] {
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::toy_row(row, 3).expect("row"), &mut store, "enc").expect("encoder");
        group.bench_function(format!("{row}-toy"), |bench| {
            bench.iter(|| enc.forward_features(&store, black_box(&audio)).expect("forward"))
        });
    }
    group.finish();
}

fn ctc(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_forward_backward");
    let mut rng = SplitMix::new(4);
    let vocab = 5;
    for frames in [50usize, 200] {
        let logits = Tensor::uniform(&[frames, vocab], 2.0, &mut rng);
        let log_probs = Tensor::from_rows(
            &(0..frames)
                .map(|t| {
                    let row = logits.row(t);
                    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                    row.iter().map(|v| v - lse).collect()
                })
                .collect::<Vec<_>>(),
        );
        let target = LabelSeq::new((0..frames / 5).map(|i| 1 + i % (vocab - 1)).collect()).expect("labels");
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |bench, _| {
            bench.iter(|| ctc_forward_backward(black_box(&log_probs), &target).expect("ctc"))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv1d, encoder_forward, ctc);
criterion_main!(benches);
