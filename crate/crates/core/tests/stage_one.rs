use puppetry_core::a2e::window_values;
use puppetry_core::checkpoint::Checkpoint;
use puppetry_core::face_model::{map_audio_expression, AudioExpressionCode};
use puppetry_core::oracle::{OracleSpec, OracleWorld};
use puppetry_core::training::{
    adapt_new_target, load_a2e_model, load_mapping, mapping_checkpoint, train_a2e, SequenceDataset,
    TrainingConfig, TrainingSequence,
};

fn spec(person: u64) -> OracleSpec {
    OracleSpec {
        world_seed: 5,
        person,
        vertex_count: 60,
        resolution: 16,
        ..OracleSpec::default()
    }
}

#[test]
fn trained_network_and_fitted_mapping_survive_a_disk_round_trip() {
    let world = OracleWorld::new(&spec(0)).unwrap();
    let sequences = (0..2)
        .map(|p| {
            let s = OracleWorld::new(&spec(p)).unwrap().generate(30).unwrap();
            TrainingSequence {
                person: p,
                windows: s.windows,
                expressions: s.expressions,
                shape: s.person.shape,
            }
        })
        .collect();
    let data = SequenceDataset {
        basis: world.basis.clone(),
        sequences,
    };
    let cfg = TrainingConfig {
        epochs: 3,
        decay_epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let run = train_a2e(&data, &cfg).unwrap();
    assert_eq!(run.history.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a2e.ckpt");
    run.final_checkpoint.save(&path).unwrap();
    let model = load_a2e_model(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model, run.model);

    // an unseen person: the fitted mapping reproduces its own least-squares residual
    let target = OracleWorld::new(&spec(7)).unwrap().generate(40).unwrap();
    let ridge = 0.0;
    let fit = adapt_new_target(&model.net, &target.windows, &target.expressions, ridge).unwrap();
    let mpath = dir.path().join("mapping.ckpt");
    mapping_checkpoint(&fit, target.len(), ridge)
        .save(&mpath)
        .unwrap();
    let mapping = load_mapping(&Checkpoint::load(&mpath).unwrap()).unwrap();

    let inputs: Vec<Vec<f32>> = target.windows.iter().map(window_values).collect();
    let codes = model.net.predict_sequence(&inputs).unwrap();
    let residual: f64 = codes
        .iter()
        .zip(&target.expressions)
        .map(|(z, e)| {
            let code =
                AudioExpressionCode::new(&z.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
            let d = map_audio_expression(&code, &mapping);
            d.0.iter()
                .zip(&e.0)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    // the stored mapping is single precision
    assert!(
        (residual - fit.residual).abs() <= 1e-4 * fit.residual.max(1.0),
        "{residual} vs {}",
        fit.residual
    );
}
