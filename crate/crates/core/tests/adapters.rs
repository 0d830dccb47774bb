use lnadapt_core::model::SlotPosition;
use lnadapt_core::training::{sgd_step, stream_mse};
use lnadapt_core::{
    build_model, param_count, Adapter, AdapterKind, FullLnAdapter, InsertionPolicy, Layer,
    LrpdAdapter, Matrix, ModelConfig, Streams, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn lrpd_matches_materialized_full_on_all_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 2..=16 {
        for r in 1..k {
            let u = Matrix::uniform(k, r, 1.0, &mut rng);
            let v = Matrix::uniform(r, k, 1.0, &mut rng);
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lrpd = LrpdAdapter::new(u, v, b.clone()).unwrap();
            let full = FullLnAdapter::new(lrpd.materialize(), b).unwrap();
            let x = Matrix::uniform(1 + k % 5, k, 2.0, &mut rng);
            let diff = lrpd
                .forward(&x)
                .unwrap()
                .max_abs_diff(&full.forward(&x).unwrap());
            assert!(diff <= 1e-12, "k={k} r={r}: {diff:e}");
        }
    }
}

#[test]
fn published_accounting() {
    assert_eq!(param_count(AdapterKind::Full, 1024), 1_048_576);
    assert_eq!(param_count(AdapterKind::Lrpd { rank: 10 }, 1024), 21_504);
    let ratio = 21_504.0 / 1_048_576.0;
    assert!(ratio < 0.18, "{ratio}");
    assert_eq!(param_count(AdapterKind::Lrpd { rank: 10 }, 32), 672);
}

#[test]
fn identity_insertion_is_bitwise_on_many_utterances() {
    let cfg = ModelConfig::desk();
    let base = build_model(&cfg, 4).unwrap();
    let all = InsertionPolicy {
        positions: vec![
            SlotPosition::AfterDense,
            SlotPosition::BeforeLastHidden,
            SlotPosition::BeforeOutput,
        ],
    };
    let adapted = base.insert_adapters(&all, AdapterKind::Full, 0).unwrap();
    assert!(adapted.slots().iter().all(Option::is_some));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let frames = rng.random_range(1..=30);
        let x = Matrix::uniform(frames, cfg.input_dim, 1.0, &mut rng);
        assert_eq!(base.forward(&x).unwrap(), adapted.forward(&x).unwrap());
    }
}

#[test]
fn implicit_diagonal_survives_training() {
    let cfg = ModelConfig::desk();
    let mut model = build_model(&cfg, 2)
        .unwrap()
        .insert_adapters(
            &InsertionPolicy::default(),
            AdapterKind::Lrpd { rank: 3 },
            9,
        )
        .unwrap();
    let before = model.clone();
    let mask = model.trainable_mask(TrainMode::OlPlusAdapters).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = cfg.head_dims;
    for _ in 0..20 {
        let x = Matrix::uniform(7, cfg.input_dim, 1.0, &mut rng);
        let (pred, cache) = model.forward_cached(&x).unwrap();
        let target = Streams::new(
            Matrix::uniform(7, dims.mcep, 1.0, &mut rng),
            Matrix::uniform(7, dims.lf0, 1.0, &mut rng),
            Matrix::uniform(7, dims.bap, 1.0, &mut rng),
            Matrix::uniform(7, dims.uv, 1.0, &mut rng),
        )
        .unwrap();
        let (_, d_out) = stream_mse(&pred, &target).unwrap();
        let grads = model.backward(&cache, &d_out, &mask).unwrap();
        sgd_step(&mut model, &grads, &mask, 0.5).unwrap();
    }
    let mut checked = 0;
    for (slot, old) in model
        .slots()
        .iter()
        .zip(before.slots())
        .filter(|(s, _)| s.is_some())
    {
        let (Some(Adapter::Lrpd(a)), Some(Adapter::Lrpd(fresh))) = (slot, old) else {
            panic!("expected lrpd")
        };
        assert_ne!(a.u, fresh.u, "adapter did not train");
        let mut zeroed = a.clone();
        zeroed.u = Matrix::zeros(a.width(), a.rank());
        zeroed.b = vec![0.0; a.width()];
        let h = Matrix::uniform(5, a.width(), 1.0, &mut rng);
        assert_eq!(zeroed.forward(&h).unwrap(), h);
        checked += 1;
    }
    assert_eq!(checked, 2);
}
