#![allow(dead_code)]

use proxy_align::model::{Model, ModelDims};
use proxy_align::rng::SeedStream;
use proxy_align::synthdata::{MMSample, Span, WordClass};
use proxy_align::Real;

pub mod grad;

pub const BOS: u32 = 1;

pub fn micro_dims() -> ModelDims {
    ModelDims {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        k: 2,
        d_visual: 4,
        d_attr: 21,
        max_seq_len: 16,
    }
}

pub fn micro_model<T: Real>(seed: u64) -> Model<T> {
    let mut m: Model<T> = Model::init(micro_dims(), &SeedStream::new(seed)).unwrap();
    // Initialization is deliberately tiny; widen it so attention and the
    // connector actually shape the output.
    for (_, p) in m.params.iter_mut() {
        let scale = T::lit(12.0);
        if p.tensor.ndim() == 2 {
            for x in p.tensor.data_mut() {
                *x *= scale;
            }
        }
    }
    m
}

/// Caption `tokens` with alternating visual/style labels and a one-hot image.
pub fn sample(tokens: &[u32], image: Option<usize>) -> MMSample {
    let spans = (0..tokens.len())
        .map(|i| Span {
            start: i,
            len: 1,
            label: if i % 2 == 0 {
                WordClass::Visual
            } else {
                WordClass::Style
            },
        })
        .collect();
    MMSample {
        attrs: image.map(|hot| {
            let mut a = vec![0.0f32; 21];
            a[hot % 21] = 1.0;
            a[(hot * 7 + 3) % 21] = 0.5;
            a
        }),
        caption: tokens.to_vec(),
        spans,
        question: None,
        answer: None,
        register: None,
    }
}

/// A run configuration small enough for seconds-long end-to-end tests.
pub fn small_config(seed: u64) -> proxy_align::config::RunConfig {
    let mut cfg = proxy_align::config::RunConfig {
        seed,
        ..Default::default()
    };
    cfg.dims = ModelDims {
        vocab_size: 128,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        k: 2,
        d_visual: 8,
        d_attr: 21,
        max_seq_len: 40,
    };
    cfg.data.n_base = 300;
    cfg.data.n_captions = 200;
    cfg.data.n_instruct = 100;
    cfg.data.n_probe = 60;
    cfg.data.n_analysis = 30;
    cfg.stages.probe_every = 10;
    for (s, steps, lr) in [
        (&mut cfg.stages.base_pretrain, 60, 3e-3),
        (&mut cfg.stages.proxy_train, 30, 3e-3),
        (&mut cfg.stages.mm_pretrain, 30, 3e-3),
        (&mut cfg.stages.instruct_tune, 30, 1e-3),
    ] {
        s.steps = steps;
        s.lr = lr;
        s.batch_size = 8;
    }
    cfg
}
