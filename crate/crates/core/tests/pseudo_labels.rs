//! Pseudo-labels live only inside one step. The live counter is process-wide,
//! so this binary holds a single test.

use ecacl_core::augment::SequentialAugmenter;
use ecacl_core::consistency::live_pseudo_batches;
use ecacl_core::data::{BatchShape, SyntheticSpec};
use ecacl_core::train::{build_objective, prepare_data, prepare_views, sampler_for, ModelConfig, TrainConfig, Trainer};

#[test]
fn pseudo_labels_do_not_outlive_a_step() {
    let config = TrainConfig {
        batch: BatchShape {
            classes: 4,
            source_per_class: 2,
            target_per_class: 1,
            unlabeled: 6,
        },
        total_steps: 6,
        sigma: 0.0,
        model: ModelConfig {
            hidden_dims: vec![8],
            embed_dim: 4,
            ..ModelConfig::default()
        },
        data: SyntheticSpec {
            num_classes: 4,
            per_class: 6,
            image_size: 8,
            ..SyntheticSpec::default()
        },
        ..TrainConfig::default()
    };
    let data = prepare_data(&config).unwrap();
    let sampler = sampler_for(&config, &data).unwrap();
    let model = config.init_model(data.input_dim(), data.num_classes()).unwrap();
    assert_eq!(live_pseudo_batches(), 0);

    let views = prepare_views(&config, &data, &sampler.batch(0), 0, &SequentialAugmenter).unwrap();
    let objective = build_objective(&model, &config, &views).unwrap();
    assert_eq!(objective.gate.as_ref().map(|g| g.passed()), Some(6));
    assert_eq!(live_pseudo_batches(), 1);
    drop(objective);
    assert_eq!(live_pseudo_batches(), 0);

    let mut trainer = Trainer::new(config.clone(), model, &SequentialAugmenter).unwrap();
    for step in 0..config.total_steps {
        let out = trainer.step(&data, &sampler.batch(step), step).unwrap();
        assert_eq!(out.record.diagnostics.unwrap().gate_total, 6);
        assert_eq!(live_pseudo_batches(), 0, "after step {step}");
    }
}
