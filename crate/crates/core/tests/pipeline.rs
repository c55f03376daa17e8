use ghnq::arch::format::{deserialize_graph, serialize_graph};
use ghnq::arch::{sample_architecture, SpaceConfig};
use ghnq::cli::RunConfig;
use ghnq::hypernet::{Checkpoint, Hypernet, HypernetConfig};
use ghnq::quant::{float_forward, Precision, QuantConfig};
use ghnq::tensor::{ops, Tape};
use ghnq::train::{evaluate, finetune, forward_on_tape, network_accuracy, per_network_robustness, BN_EPS};
use proptest::prelude::*;

fn tiny() -> RunConfig {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    RunConfig::load(&p).unwrap()
}

fn space() -> SpaceConfig {
    tiny().space
}

#[test]
fn evaluation_is_pure_and_matches_single_network_oracle() {
    let cfg = tiny();
    let (train, test) = cfg.load_data().unwrap();
    let mut h = Hypernet::new(cfg.hypernet.clone()).unwrap();
    finetune(&mut h, &cfg.train, &cfg.training_pool().unwrap(), &train).unwrap();
    let before = h.to_checkpoint().to_bytes();
    let splits = cfg.make_splits().unwrap();
    let report = evaluate(&h, &splits, &test, &Precision::defaults(), &cfg.eval_config()).unwrap();
    assert_eq!(h.to_checkpoint().to_bytes(), before);

    let tbs = cfg.eval.test_batch_size;
    for (rec, g) in report.networks.iter().zip(splits.sets.iter().flat_map(|(_, gs)| gs)).take(5) {
        let p = h.predict(g).unwrap();
        // Tape and executor logits agree bit for bit.
        let (x, _) = test.range(0, tbs).unwrap();
        let mut tape = Tape::new();
        let v = h.bind(&mut tape, false);
        let dec = h.predict_on_tape(&mut tape, &v, g).unwrap();
        let xv = tape.constant(x.clone());
        let lt = forward_on_tape(&mut tape, g, &dec.params, xv, BN_EPS).unwrap();
        assert_eq!(tape.value(lt), &float_forward(g, &p, &x, BN_EPS).unwrap());

        let mut hit = 0;
        let mut n = 0;
        for s in (0..test.len()).step_by(tbs) {
            let e = (s + tbs).min(test.len());
            let (x, y) = test.range(s, e).unwrap();
            let pred = ops::argmax_rows(&float_forward(g, &p, &x, BN_EPS).unwrap());
            hit += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
            n += y.len();
        }
        assert_eq!(rec.accuracy_at(Precision::Float32), Some(100.0 * hit as f64 / n as f64));
        assert_eq!(
            network_accuracy(g, &p, &test, &QuantConfig::float(), tbs).unwrap(),
            rec.accuracy_at(Precision::Float32).unwrap()
        );
        let r = per_network_robustness(g, &p, &test, &QuantConfig::bits(8), tbs).unwrap();
        assert_eq!(r.accuracy_delta, r.accuracy_float - r.accuracy_quant);
        assert_eq!(Some(r.accuracy_quant), rec.accuracy_at(Precision::Quant(8)));
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let cfg = tiny();
    let (train, _) = cfg.load_data().unwrap();
    let pool = cfg.training_pool().unwrap();
    let run = || {
        let mut h = Hypernet::new(cfg.hypernet.clone()).unwrap();
        let st = finetune(&mut h, &cfg.train, &pool, &train).unwrap();
        (h.to_checkpoint().to_bytes(), st.history_csv())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graph_files_roundtrip(seed in 0u64..1000, draw in 0u64..1000) {
        let cfg = SpaceConfig { rng_seed: seed, ..space() };
        let g = sample_architecture(&cfg, draw).unwrap();
        let bytes = serialize_graph(&g);
        let back = deserialize_graph(&bytes).unwrap();
        prop_assert_eq!(back.hash(), g.hash());
        prop_assert_eq!(serialize_graph(&back), bytes);
    }

    #[test]
    fn checkpoints_roundtrip(d in 2usize..6, rounds in 1usize..3, co in 1usize..5, seed in 0u64..100) {
        let h = Hypernet::new(HypernetConfig {
            embed_dim: d,
            mp_rounds: rounds,
            canonical_shape: [co, co + 1, 3, 3],
            decoder_hidden: d + 1,
            init_seed: seed,
            ..Default::default()
        }).unwrap();
        let bytes = h.to_checkpoint().to_bytes();
        let back = Hypernet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back, h);
    }

    #[test]
    fn predicted_shapes_always_match(draw in 0u64..500) {
        let cfg = tiny();
        let g = sample_architecture(&cfg.space, draw).unwrap();
        let h = Hypernet::new(cfg.hypernet).unwrap();
        let p = h.predict(&g).unwrap();
        prop_assert!(p.validate(&g).is_ok());
        prop_assert_eq!(p.numel() as u64, g.count_params());
    }
}
