use std::path::Path;

use acelora::config::RunConfig;
use acelora::data::{generate, read_dataset, split, write_dataset, Dataset};
use acelora::eval::{class_text_embeddings, default_templates, evaluate};
use acelora::loss::LossKind;
use acelora::train::{train, TrainOutcome};

#[test]
fn checked_in_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn null_signal_stays_at_chance() {
    let mut run = RunConfig::default();
    run.seed = 5;
    run.data.motif_strength = 0.0;
    run.data.pairs_per_class = 150;
    run.train.epochs = 0;
    let data = generate(&run.synth()).unwrap();
    let model = train(&run, &data).unwrap().state.model;
    let report = evaluate(&model, &data, &default_templates()).unwrap();
    let chance = 1.0 / run.data.num_classes as f64;
    assert!(
        (report.accuracy - chance).abs() <= 0.1,
        "accuracy {} on {} samples without signal",
        report.accuracy,
        data.len()
    );
}

/// Trains the default toy config for 30 epochs on seed 0 and returns the
/// model with its held-out split.
fn trained_toy() -> (TrainOutcome, Dataset) {
    let mut run = RunConfig::default();
    run.seed = 0;
    run.train.epochs = 30;
    let data = generate(&run.synth()).unwrap();
    let (train_set, _, test) = split(&data, run.fractions(), run.seed).unwrap();
    (train(&run, &train_set).unwrap(), test)
}

#[test]
fn toy_training_halves_the_loss_and_matches_nearest_centroid() {
    let (outcome, test) = trained_toy();
    assert!(
        outcome.final_loss <= 0.5 * outcome.initial_loss,
        "loss {} -> {}",
        outcome.initial_loss,
        outcome.final_loss
    );

    let model = &outcome.state.model;
    let report = evaluate(model, &test, &default_templates()).unwrap();
    // Independent nearest-centroid pass: cosine to each class text
    // embedding, first maximum wins.
    let classes: Vec<Vec<usize>> = (0..test.config.num_classes).map(|c| test.config.class_tokens(c)).collect();
    let centroids = class_text_embeddings(model, &classes, &default_templates()).unwrap();
    let mut hits = 0;
    for sample in &test.samples {
        let e = model.embed_image(&sample.image).unwrap();
        let cos = |c: usize| -> f64 {
            let t = centroids.row(c);
            let dot: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
            let norms = e.iter().map(|x| x * x).sum::<f64>().sqrt() * t.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / norms
        };
        let mut best = 0;
        for c in 1..classes.len() {
            if cos(c) > cos(best) {
                best = c;
            }
        }
        hits += usize::from(best == sample.label);
    }
    let expected = hits as f64 / test.len() as f64;
    assert_eq!(report.accuracy, expected);
    assert!(report.accuracy >= 0.9);
}

#[test]
fn label_guided_training_equals_clip_when_labels_never_repeat() {
    let mut run = RunConfig::default();
    run.data.num_classes = 8;
    run.data.pairs_per_class = 2;
    run.train.epochs = 3;
    let full = generate(&run.synth()).unwrap();
    // One sample per class: no batch can hold two samples of the same label.
    let mut seen = std::collections::BTreeSet::new();
    let data = Dataset {
        config: full.config.clone(),
        samples: full.samples.into_iter().filter(|s| seen.insert(s.label)).collect(),
    };
    assert_eq!(data.len(), 8);

    run.train.loss = LossKind::LabelGuided;
    let guided = train(&run, &data).unwrap();
    run.train.loss = LossKind::Clip;
    let clip = train(&run, &data).unwrap();

    assert_eq!(guided.state.log, clip.state.log);
    assert_eq!(guided.state.model.params, clip.state.model.params);
    assert_eq!(guided.final_loss, clip.final_loss);
}

#[test]
fn dataset_file_round_trip_preserves_training() {
    let mut run = RunConfig::default();
    run.data.pairs_per_class = 6;
    run.train.epochs = 2;
    let data = generate(&run.synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    write_dataset(&path, &data).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, data);
    let a = train(&run, &data).unwrap();
    let b = train(&run, &back).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}
