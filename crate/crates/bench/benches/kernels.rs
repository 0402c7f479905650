use calnet_bench::{one_step_setup, random_tensor};
use calnet_core::experiment::{init_model, prepare};
use calnet_core::nn::{ForwardCtx, MultiHeadAttention, ParamStore};
use calnet_core::train::TrainData;
use calnet_core::{train, ModelKind, Padding, Tape, TrainState};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let x = random_tensor::<f32>(&[16, 32, 32, 48], 1);
    let k = random_tensor::<f32>(&[1, 1, 48, 16], 2);
    let dw = random_tensor::<f32>(&[3, 3, 48], 3);
    let mut g = c.benchmark_group("conv");
    g.bench_function("pointwise 16x32x32x48->16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            tape.conv2d(xv, kv, 1, Padding::Same).unwrap()
        })
    });
    g.bench_function("depthwise 3x3 16x32x32x48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(dw.clone()));
            tape.depthwise_conv2d(xv, kv, 1, Padding::Same).unwrap()
        })
    });
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let a = random_tensor::<f32>(&[256, 256], 4);
    let m = random_tensor::<f32>(&[256, 256], 5);
    c.bench_function("matmul 256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (av, mv) = (tape.constant(a.clone()), tape.constant(m.clone()));
            tape.matmul(av, mv).unwrap()
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 16, 2, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let q = random_tensor::<f32>(&[16, 64, 16], 7);
    let kv = random_tensor::<f32>(&[16, 8, 16], 8);
    c.bench_function("cross attention forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::eval(&mut tape, &store);
            let (qv, kvv) = (ctx.tape.constant(q.clone()), ctx.tape.constant(kv.clone()));
            let y = mha.forward(&mut ctx, qv, kvv).unwrap();
            let loss = tape.mean_all(y);
            tape.backward(loss).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let (ds, cfg) = one_step_setup(16, 32);
    let mut g = c.benchmark_group("train step (batch 16, 32px)");
    g.sample_size(10);
    for kind in [ModelKind::Unimodal, ModelKind::Multimodal] {
        let (parts, vectorizer) = prepare(&ds.records, kind, &cfg).unwrap();
        let records = [parts.train, parts.test].concat();
        let fresh = init_model::<f32>(kind, &cfg, &records).unwrap();
        g.bench_function(kind.to_string(), |b| {
            b.iter(|| {
                let mut model = fresh.clone();
                let mut state = TrainState::new(&model.store);
                let data = TrainData {
                    records: &records,
                    images: &ds.images,
                    vectorizer: vectorizer.as_ref(),
                };
                train(&mut model, &mut state, &data, &cfg).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, matmul, attention, train_step);
criterion_main!(benches);
