use fitnet::datagen::{generate, Corpus, GenConfig};
use fitnet::embedding::EmbeddingDims;
use fitnet::features::build_vocabularies;
use fitnet::model::{Method, Model, ModelConfig};
use fitnet::sampling::SamplingPolicy;
use fitnet::training::{batch_gradients, batch_loss, train_model, Adam, Prepared, TrainConfig};

fn corpus() -> Corpus {
    generate(&GenConfig {
        n_users: 80,
        n_items: 960,
        n_cities: 8,
        seed: 13,
        ..GenConfig::default()
    })
    .unwrap()
}

fn config() -> ModelConfig {
    ModelConfig {
        embedding: EmbeddingDims {
            item_id: 8,
            category_id: 4,
            city_id: 4,
            gender: 2,
            age_level: 2,
        },
        d_model: 8,
        heads: 2,
        intention_hidden: vec![8],
        user_hidden: vec![16],
        item_hidden: vec![16],
        repr_dim: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn one_small_step_lowers_a_singleton_batch_loss() {
    let c = corpus();
    let vocabs = build_vocabularies(&c.train).unwrap();
    let model = Model::new(Method::FitNet.model_config(&config()).unwrap(), &vocabs).unwrap();
    let prepared = Prepared::new(&c.train, &vocabs).unwrap();
    let groups = prepared
        .epoch_groups(&vocabs, &c.pool, &SamplingPolicy::default(), 5, 0)
        .unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        ..TrainConfig::default()
    };
    for g in groups.iter().take(20) {
        let batch = [g];
        let before = batch_loss(&model, &batch).unwrap();
        let (_, n, mut grads) = batch_gradients(&model, &batch).unwrap();
        grads.scale(1.0 / n as f64);
        let mut stepped = model.clone();
        let mut adam = Adam::new(&cfg, stepped.params());
        adam.step(stepped.params_mut(), &grads);
        let after = batch_loss(&stepped, &batch).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }
}

#[test]
fn training_stays_finite_and_repeats_exactly() {
    let c = corpus();
    let vocabs = build_vocabularies(&c.train).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::new(Method::FitNet.model_config(&config()).unwrap(), &vocabs).unwrap();
        let mut seen = Vec::new();
        let history = train_model(&mut model, &vocabs, &c.train, &c.pool, &SamplingPolicy::default(), &cfg, |e, l| {
            seen.push((e, l));
        })
        .unwrap();
        assert_eq!(seen.iter().map(|p| p.1).collect::<Vec<_>>(), history);
        assert!(model.params().all_finite());
        (history, model.fingerprint())
    };
    let (h1, f1) = run();
    let (h2, f2) = run();
    assert_eq!(h1.len(), 3);
    assert!(h1.iter().all(|l| l.is_finite()));
    assert_eq!(h1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), h2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(f1, f2);
}

#[test]
fn parameters_finite_after_every_step() {
    let c = corpus();
    let vocabs = build_vocabularies(&c.train).unwrap();
    let mut model = Model::new(Method::FitNet.model_config(&config()).unwrap(), &vocabs).unwrap();
    let prepared = Prepared::new(&c.train, &vocabs).unwrap();
    let groups = prepared
        .epoch_groups(&vocabs, &c.pool, &SamplingPolicy::default(), 5, 0)
        .unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&cfg, model.params());
    for batch in fitnet::training::pack_batches(&groups, 8) {
        let (_, n, mut grads) = batch_gradients(&model, &batch).unwrap();
        grads.scale(1.0 / n as f64);
        adam.step(model.params_mut(), &grads);
        assert!(model.params().all_finite());
    }
}
