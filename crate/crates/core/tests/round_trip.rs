use spgroup::autodiff::ParamStore;
use spgroup::config::PipelineConfig;
use spgroup::harness::{overfit, partition_for, synth_scenes};
use spgroup::pipeline::{infer, match_scene, prepare};
use spgroup::scene::{load_scene, save_scene};
use spgroup::synth::SynthSpec;

fn small() -> (SynthSpec, PipelineConfig) {
    let spec = SynthSpec {
        objects: (2, 3),
        points_per_object: 150,
        clutter_points: 100,
        seed: 11,
        ..SynthSpec::default()
    };
    let config = PipelineConfig {
        channels: 8,
        widths: vec![8, 8, 8],
        ..PipelineConfig::default()
    };
    (spec, config)
}

#[test]
fn stored_scene_and_weights_reproduce_detections() {
    let (spec, config) = small();
    let scenes = synth_scenes(&spec, 1).unwrap();
    let run = overfit(&scenes, &config, 5, |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let scene_path = dir.path().join("scene.spg3");
    let weights_path = dir.path().join("weights.json");
    save_scene(&scenes[0], &scene_path).unwrap();
    run.params.save(&weights_path).unwrap();

    let scene = load_scene(&scene_path).unwrap();
    assert_eq!(scene, scenes[0]);
    let params = ParamStore::load(&weights_path).unwrap();
    let prepared = prepare(&scene, &partition_for(&scene, &config).unwrap(), &config).unwrap();
    let dets = infer(&params, &prepared, &config).unwrap();

    let fresh = infer(&run.params, &prepared, &config).unwrap();
    assert_eq!(dets.len(), fresh.len());
    for (a, b) in dets.iter().zip(&fresh) {
        assert_eq!(a.class_id, b.class_id);
        assert!((a.score - b.score).abs() < 1e-4);
        for k in 0..3 {
            assert!((a.bbox.center[k] - b.bbox.center[k]).abs() < 1e-4);
            assert!((a.bbox.size[k] - b.bbox.size[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn matching_finds_positives_at_init() {
    let (spec, config) = small();
    for scene in synth_scenes(&spec, 3).unwrap() {
        let params = spgroup::pipeline::init_params(&config, scene.class_count).unwrap();
        let prepared = prepare(&scene, &partition_for(&scene, &config).unwrap(), &config).unwrap();
        let assignment = match_scene(&params, &prepared, &config).unwrap();
        assert!(assignment.positive_count() > 0);
    }
}
