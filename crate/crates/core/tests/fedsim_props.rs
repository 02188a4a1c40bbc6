use fltrace::datasets::{generate_triggers, partition, LabeledImages, PartitionedData, TriggerSet};
use fltrace::evaluation::trigger_accuracy;
use fltrace::fedsim::{run_fl_training, train_independent, watermark_step, wm_schedule, FlConfig, IndependentMode, Strategy, WmArtifacts};
use fltrace::nn::{Architecture, Model, TrainStepSpec, IMAGE_PIXELS};
use fltrace::tardos::{generate_codebook, sample_bias_matrix, CodeBook};
use fltrace::whitebox::{project, OwnerBasis, ProjectionMatrix};
use fltrace::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Architecture {
    Architecture {
        input_side: 28,
        conv_channels: vec![2, 3, 4],
        classes: 10,
    }
}

/// Ten blurry class prototypes plus noise.
fn synthetic(n: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        for px in 0..IMAGE_PIXELS {
            let on = (px / 28) / 3 == class || (px % 28) / 3 == class;
            images.push(if on { 0.8 } else { 0.1 } + 0.1 * rng.random::<f32>());
        }
        labels.push(class);
    }
    LabeledImages::new(images, labels).unwrap()
}

struct Kit {
    data: PartitionedData,
    codebook: CodeBook,
    triggers: Vec<TriggerSet>,
    basis: OwnerBasis,
    projection: ProjectionMatrix,
}

fn kit(n_owners: usize, shared: bool) -> Kit {
    let data = partition(&synthetic(400, 1), n_owners, 0.25, 1.0, 2).unwrap();
    let bias = sample_bias_matrix(20, 10, 100.0, 0.038, 3).unwrap();
    let codebook = generate_codebook(&bias, n_owners, 4).unwrap();
    let triggers = generate_triggers(20, shared, n_owners, 5).unwrap();
    let arch = tiny();
    let carrier = arch.layers()[arch.carrier_layer()].weight_len();
    Kit {
        data,
        codebook,
        triggers,
        basis: OwnerBasis::generate(16, n_owners, 6).unwrap(),
        projection: ProjectionMatrix::generate(carrier, 16, 7).unwrap(),
    }
}

impl Kit {
    fn wm(&self) -> WmArtifacts<'_> {
        WmArtifacts {
            triggers: &self.triggers,
            codebook: &self.codebook,
            basis: &self.basis,
            projection: &self.projection,
        }
    }
}

fn small_config(n_owners: usize, strategy: Strategy) -> FlConfig {
    FlConfig {
        n_owners,
        owners_per_round: 2.min(n_owners),
        strategy,
        learning_rate: 0.01,
        epochs: 1,
        iterations: Some(6),
        log_every: 3,
        eval_subset: 0,
        tracked_copies: 2,
        mav_pairs: 2,
        ..FlConfig::default()
    }
}

#[test]
fn copies_stay_identical_without_watermarking() {
    let k = kit(4, true);
    let config = FlConfig {
        watermarking: false,
        lambda: 0.0,
        ..small_config(4, Strategy::VanillaWm)
    };
    let out = run_fl_training(&config, &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    assert_eq!(out.copies.len(), 4);
    assert!(out.copies.iter().all(|c| c == &out.copies[0]));
    let nowm = run_fl_training(&small_config(4, Strategy::NoWm), &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    assert_eq!(nowm.copies.len(), 1);
    assert_eq!(nowm.copies[0], out.copies[0]);
    assert!(out.logs.iter().all(|l| !l.wm_step_executed));
}

#[test]
fn watermarking_makes_copies_diverge() {
    let k = kit(3, true);
    let out = run_fl_training(&small_config(3, Strategy::DropoutWm), &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    assert_ne!(out.copies[0], out.copies[1]);
    assert!(out.logs.iter().all(|l| l.wm_step_executed));
    assert!(out.logs.iter().all(|l| l.mav_c2.is_some()));
}

#[test]
fn single_owner_single_round_is_one_sgd_step() {
    let k = kit(1, true);
    let config = FlConfig {
        iterations: Some(1),
        watermarking: false,
        lambda: 0.0,
        local_batch: 1000,
        ..small_config(1, Strategy::VanillaWm)
    };
    let out = run_fl_training(&config, &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    // a batch larger than the shard takes the whole shard (in sampled order);
    // the mean gradient does not depend on the order
    let mut expected = Model::new(tiny(), config.seeds.model_init).unwrap();
    let shard = &k.data.owner_shards[0];
    expected
        .train_step(TrainStepSpec {
            learning_rate: config.learning_rate,
            images: &shard.images,
            targets: &shard.labels,
            dropout: None,
            wm_term: None,
        })
        .unwrap();
    let max_diff = out.copies[0].params().iter().zip(expected.params()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max_diff < 1e-6, "{max_diff}");
}

#[test]
fn runs_are_reproducible() {
    let k = kit(3, true);
    let config = small_config(3, Strategy::DropoutLimitedWm);
    let a = run_fl_training(&config, &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    let b = run_fl_training(&config, &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.copies, b.copies);
    let mut streamed = Vec::new();
    run_fl_training(&config, &k.data, &k.wm(), tiny(), |l| streamed.push(l.clone())).unwrap();
    assert_eq!(streamed, a.logs);
}

#[test]
fn dif_strategies_use_per_owner_triggers() {
    let k = kit(3, false);
    assert_eq!(k.triggers.len(), 3);
    let out = run_fl_training(&small_config(3, Strategy::VanillaDifWm), &k.data, &k.wm(), tiny(), |_| {}).unwrap();
    assert_eq!(out.copies.len(), 3);
    assert!(out.logs.iter().all(|l| l.mav_c2.is_none()));
}

#[test]
fn mismatched_artifacts_are_rejected() {
    let k = kit(3, true);
    let short = generate_triggers(5, true, 3, 1).unwrap();
    let wm = WmArtifacts { triggers: &short, ..k.wm() };
    assert!(matches!(run_fl_training(&small_config(3, Strategy::VanillaWm), &k.data, &wm, tiny(), |_| {}), Err(Error::ShapeMismatch(_))));
    let wrong_d = ProjectionMatrix::generate(10, 16, 1).unwrap();
    let wm = WmArtifacts { projection: &wrong_d, ..k.wm() };
    assert!(run_fl_training(&small_config(3, Strategy::VanillaWm), &k.data, &wm, tiny(), |_| {}).is_err());
    assert!(run_fl_training(&small_config(3, Strategy::IndependentWm), &k.data, &k.wm(), tiny(), |_| {}).is_err());
}

#[test]
fn divergence_reports_the_iteration() {
    let k = kit(2, true);
    let config = FlConfig {
        learning_rate: 1e30,
        iterations: Some(20),
        ..small_config(2, Strategy::VanillaWm)
    };
    match run_fl_training(&config, &k.data, &k.wm(), tiny(), |_| {}) {
        Err(Error::NonFiniteLoss { iteration }) => assert!(iteration < 20),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.logs)),
    }
}

#[test]
fn regularizer_steps_raise_the_projection() {
    let k = kit(2, true);
    let mut model = Model::new(tiny(), 3).unwrap();
    let labels = k.codebook.targets(0);
    let mut cursor = 0;
    let mut r = project(&model.carrier_f64(), &k.projection, k.basis.vector(0)).unwrap();
    let mut increases = 0;
    for _ in 0..100 {
        watermark_step(&mut model, &k.triggers[0], &labels, k.basis.vector(0), &k.projection, 1.0, 0.01, 16, None, &mut cursor).unwrap();
        let next = project(&model.carrier_f64(), &k.projection, k.basis.vector(0)).unwrap();
        increases += usize::from(next > r);
        r = next;
    }
    assert!(increases >= 95, "{increases}");
    assert_eq!(cursor, (100 * 16) % 20);
}

#[test]
fn converged_copy_barely_moves_without_regularizer() {
    let k = kit(1, true);
    let mut model = Model::new(tiny(), 4).unwrap();
    // relabel the triggers with the model's own outputs, then train hard on them
    let labels = model.predict(&k.triggers[0].images).unwrap();
    let mut cursor = 0;
    for _ in 0..200 {
        watermark_step(&mut model, &k.triggers[0], &labels, k.basis.vector(0), &k.projection, 0.0, 0.05, 20, None, &mut cursor).unwrap();
    }
    assert_eq!(trigger_accuracy(&model, &k.triggers[0], &labels).unwrap(), 1.0);
    let before = model.clone();
    let loss = watermark_step(&mut model, &k.triggers[0], &labels, k.basis.vector(0), &k.projection, 0.0, 0.001, 20, None, &mut cursor).unwrap();
    assert!(loss < 0.05, "{loss}");
    let moved = model.params().iter().zip(before.params()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(moved < 1e-3, "{moved}");
}

#[test]
fn independent_training_modes() {
    let k = kit(4, true);
    let config = FlConfig {
        iterations: Some(30),
        ..small_config(4, Strategy::IndependentWm)
    };
    let full = train_independent(IndependentMode::FullDataWm, &config, &k.data, &k.wm(), tiny(), 1, |_| {}).unwrap();
    let base = train_independent(IndependentMode::OwnerBaseline, &config, &k.data, &k.wm(), tiny(), 1, |_| {}).unwrap();
    assert!((0.0..=1.0).contains(&full.final_accuracy));
    assert!((0.0..=1.0).contains(&base.final_accuracy));
    assert!(full.logs.iter().all(|l| l.wm_step_executed));
    assert!(base.logs.iter().all(|l| !l.wm_step_executed));
    // the watermarked model is pushed toward owner 1's vector
    assert!(full.logs.last().unwrap().mean_projection > base.logs.last().unwrap().mean_projection);
    assert!(train_independent(IndependentMode::OwnerBaseline, &config, &k.data, &k.wm(), tiny(), 9, |_| {}).is_err());
}

#[test]
fn schedule_firing_counts() {
    let total = |s: Strategy| (0..1640).filter(|&t| wm_schedule(s, t, 328)).count();
    assert_eq!(total(Strategy::DropoutLimitedWm), 328 + 328 + 33 + 33 + 4);
    assert_eq!(total(Strategy::DropoutWm), 1640);
    assert_eq!(total(Strategy::VanillaWm), 1640);
    assert_eq!(total(Strategy::NoWm), 0);
    assert_eq!(total(Strategy::IndependentOwnerBaseline), 0);
}

proptest! {
    #[test]
    fn limited_schedule_rule(epoch_length in 1usize..500, t in 0usize..5000) {
        let epoch = t / epoch_length;
        let k = t % epoch_length;
        let expected = match epoch {
            0 | 1 => true,
            2 | 3 => k % 10 == 0,
            _ => k % 100 == 0,
        };
        prop_assert_eq!(wm_schedule(Strategy::DropoutLimitedWm, t, epoch_length), expected);
    }
}
