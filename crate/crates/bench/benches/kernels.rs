//! Hot-path benchmarks: conv2d forward and backward, a full edge-model
//! forward pass, and encode/decode of an upload message.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gkt_core::models::{build_edge, EdgeVariant, FwdCtx, Model};
use gkt_core::protocol::{decode, encode, ClientUpload, Message, UploadBatch};
use gkt_core::{Mode, Tape, Tensor};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[8, 16, 16, 16], &mut rng);
    let k = rand_tensor(&[16, 16, 3, 3], &mut rng);
    c.bench_function("conv2d_fwd_8x16x16x16_k3", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(black_box(x.clone()), false);
            let kv = tape.leaf(k.clone(), false);
            let y = tape.conv2d(xv, kv, (1, 1), (1, 1)).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
}

fn conv_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[8, 16, 16, 16], &mut rng);
    let k = rand_tensor(&[16, 16, 3, 3], &mut rng);
    c.bench_function("conv2d_fwd_bwd_8x16x16x16_k3", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(black_box(x.clone()), true);
            let kv = tape.leaf(k.clone(), true);
            let y = tape.conv2d(xv, kv, (1, 1), (1, 1)).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(kv).unwrap()[0])
        })
    });
}

fn edge_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[8, 3, 32, 32], &mut rng);
    let mut model = build_edge(EdgeVariant::Resnet8, 10, 7);
    c.bench_function("edge_resnet8_fwd_8x3x32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
            let xv = ctx.tape.leaf(black_box(x.clone()), false);
            let y = model.forward(&mut ctx, xv).unwrap();
            black_box(ctx.tape.value(y).data()[0])
        })
    });
}

fn codec_round_trip(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batches: Vec<UploadBatch> = (0..4)
        .map(|i| UploadBatch {
            b_idx: i,
            features: rand_tensor(&[32, 64, 8, 8], &mut rng),
            logits: rand_tensor(&[32, 10], &mut rng),
            labels: (0..32).map(|_| rng.gen_range(0..10u32)).collect(),
        })
        .collect();
    let msg = Message::Upload(ClientUpload {
        client_id: 0,
        round: 1,
        batches,
    });
    let bytes = encode(&msg);
    c.bench_function("codec_encode_upload_4x32x64x8x8", |b| {
        b.iter(|| black_box(encode(black_box(&msg))).len())
    });
    c.bench_function("codec_decode_upload_4x32x64x8x8", |b| {
        b.iter(|| match decode(black_box(&bytes)).unwrap() {
            Message::Upload(u) => black_box(u.batches.len()),
            _ => unreachable!(),
        })
    });
}

criterion_group!(
    benches,
    conv_forward,
    conv_backward,
    edge_forward,
    codec_round_trip
);
criterion_main!(benches);
