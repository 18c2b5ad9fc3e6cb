use csanet::data::{make_dataset, DatasetSpec, Difficulty, Split};
use csanet::model::{HeadKind, Mode, ModelConfig, Network};
use csanet::tensor::{AdamConfig, ParamStore};
use csanet::train::{evaluate_loss, train_step, Batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_sample() -> csanet::data::SampleRecord {
    make_dataset(&DatasetSpec {
        n: 1,
        seed: 1,
        split: Split::Train,
        difficulty: Difficulty::Easy,
        input_size: (128, 96),
        augment: None,
    })
    .unwrap()
    .samples
    .remove(0)
}

#[test]
fn baseline_head_overfits_one_sample() {
    let cfg = ModelConfig {
        head: HeadKind::Sbn,
        feature_width: 32,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let net = Network::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let sample = one_sample();
    let batch = Batch::from_samples(&[&sample], &net).unwrap();
    let adam = AdamConfig::default();
    let first = train_step(&net, &mut store, &batch, 1e-3, &adam).unwrap();
    let mut last = first;
    for _ in 1..500 {
        last = train_step(&net, &mut store, &batch, 1e-3, &adam).unwrap();
    }
    let after = evaluate_loss(&net, &store, &batch, Mode::Train).unwrap();
    eprintln!(
        "initial {:.3e} final {:.3e} post-step {:.3e}",
        first.l_total, last.l_total, after.l_total
    );
    assert!(
        after.l_total < 0.01 * first.l_total,
        "{first:?} -> {after:?}"
    );
    assert_eq!(
        (after.l_face, after.l_upper, after.l_lower),
        (0.0, 0.0, 0.0)
    );
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::micro();
    let run = || {
        let mut store = ParamStore::new();
        let net = Network::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let data = make_dataset(&DatasetSpec {
            n: 2,
            seed: 3,
            split: Split::Train,
            difficulty: Difficulty::Occluded,
            input_size: (128, 96),
            augment: None,
        })
        .unwrap();
        let refs: Vec<_> = data.samples.iter().collect();
        let batch = Batch::from_samples(&refs, &net).unwrap();
        let losses: Vec<f64> = (0..3)
            .map(|_| {
                train_step(&net, &mut store, &batch, 1e-3, &AdamConfig::default())
                    .unwrap()
                    .l_total
            })
            .collect();
        let values: Vec<_> = store.params().map(|(_, p)| p.value.clone()).collect();
        (losses, values)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0[2] < a.0[0]);
}
