//! Criterion benchmarks for the hot paths: rotary application, dynamic-kernel
//! attention, and a full pretraining step at desk scale.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpnt_core::attention::{context_attention, ContextAttnLayer, HistoryMode, KernelSource};
use rpnt_core::model::{RpntConfig, RpntModel};
use rpnt_core::nn::ForwardCtx;
use rpnt_core::objectives::{apply_mask, poisson_loss_graph, sample_mask, MaskStrategy};
use rpnt_core::posenc::{apply_mrope, rope_tables, RopeGroupSpec};
use rpnt_core::tape::Tape;
use rpnt_core::tensor::Tensor;

fn bench_mrope(c: &mut Criterion) {
    let spec = RopeGroupSpec::preset_3d(12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Tensor::uniform(&[64, 12], 1.0, &mut rng);
    c.bench_function("apply_mrope_64x12", |b| {
        b.iter(|| apply_mrope(&v, &spec, &[1.0, -2.0, 17.0]).unwrap())
    });
}

fn bench_context_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = ContextAttnLayer::init(48, 4, (5, 5), HistoryMode::FullWindow, &mut rng).unwrap();
    let x = Tensor::uniform(&[8, 50, 48], 1.0, &mut rng);
    let spec = RopeGroupSpec::preset_3d(12).unwrap();
    let positions: Vec<Vec<f64>> = (0..50).map(|t| vec![0.0, 1.0, t as f64]).collect();
    let (cos, sin) = rope_tables(&spec, &positions).unwrap();
    c.bench_function("context_attention_b8_t50_d48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = layer.bind(&mut tape);
            let xid = tape.constant(&x);
            let cid = tape.constant(&cos);
            let sid = tape.constant(&sin);
            context_attention(&mut tape, &bound, xid, Some((cid, sid)), None, KernelSource::Dynamic)
                .unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = RpntModel::new(RpntConfig::desk(20), &mut rng).unwrap();
    let mut spikes = Tensor::zeros(&[16, 50, 20]);
    for v in spikes.data.iter_mut() {
        *v = rng.gen_range(0..3) as f64;
    }
    let coords: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64, 0.0]).collect();
    let spec = sample_mask(16, 50, 20, MaskStrategy::UniformRandom, &mut rng).unwrap();
    let masked = apply_mask(&spikes, &spec).unwrap();
    c.bench_function("pretrain_step_b16_desk", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx::new(true, model.config.dropout, &mut r);
            let out = model.forward_pretrain(&mut tape, &bm, &masked, &coords, &mut ctx).unwrap();
            let loss = poisson_loss_graph(&mut tape, out.rates, &spikes, &spec.mask).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(out.rates).is_some()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_mrope, bench_context_attention, bench_train_step
}
criterion_main!(benches);
