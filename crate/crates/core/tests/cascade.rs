use std::sync::OnceLock;

use ctxforest_core::cascade::{
    feature_frequency, infer_cascade, infer_prepared, prepare_volume, train_cascade, CASCADE_VERSION,
};
use ctxforest_core::eval::label_noise_fraction;
use ctxforest_core::forest::predict_volume;
use ctxforest_core::graphcut::argmax_labels;
use ctxforest_core::phantom::{generate_visit, PhantomSpec};
use ctxforest_core::{CascadeConfig, CascadeModel, Error, FeatureConfig, FeatureKind, ForestConfig, TrainingVolume};

fn volumes() -> &'static Vec<TrainingVolume> {
    static V: OnceLock<Vec<TrainingVolume>> = OnceLock::new();
    V.get_or_init(|| {
        let spec = PhantomSpec::with_dims([32, 32, 32]);
        (0..5u64)
            .map(|s| {
                let p = generate_visit(&spec, s, 0).unwrap();
                TrainingVolume {
                    id: format!("s{s}"),
                    subject: format!("s{s}"),
                    intensity: p.intensity,
                    bone_mask: p.bone_mask,
                    landmarks: p.landmarks,
                    gt: p.gt,
                }
            })
            .collect()
    })
}

fn configs(passes: usize) -> (CascadeConfig, FeatureConfig, ForestConfig) {
    (
        CascadeConfig {
            num_passes: passes,
            samples_per_class_per_volume: 400,
            cross_context: false,
        },
        FeatureConfig {
            pool_size: 30,
            r_max_mm: 15.0,
            ..FeatureConfig::default()
        },
        ForestConfig {
            num_trees: 6,
            max_depth: 10,
            ..ForestConfig::default()
        },
    )
}

fn train(passes: usize) -> CascadeModel {
    let (c, f, r) = configs(passes);
    train_cascade(&volumes()[..4], &c, &f, &r, 21).unwrap()
}

fn two_pass() -> &'static CascadeModel {
    static M: OnceLock<CascadeModel> = OnceLock::new();
    M.get_or_init(|| train(2))
}

fn prob_usage(freq: &ctxforest_core::cascade::FeatureFrequency) -> usize {
    freq.iter()
        .filter(|(k, _)| k.needs_probabilities())
        .map(|(_, n)| n)
        .sum()
}

#[test]
fn pass_legality_and_context_usage() {
    let one = train(1);
    assert_eq!(prob_usage(&feature_frequency(&one)[0]), 0);
    let freq = feature_frequency(two_pass());
    assert_eq!(prob_usage(&freq[0]), 0);
    assert!(prob_usage(&freq[1]) > 0, "pass 2 never split on a probability feature");
    // Serialized model keeps the guarantee.
    let back = CascadeModel::from_bytes(&two_pass().to_bytes()).unwrap();
    assert_eq!(&back, two_pass());
    for tree in back.passes()[0].trees() {
        assert!(tree.split_features().all(|f| !f.kind().needs_probabilities()));
    }
}

#[test]
fn truncation_equals_direct_training() {
    assert_eq!(two_pass().truncated(1).unwrap().to_bytes(), train(1).to_bytes());
}

#[test]
fn frequencies_partition_internal_nodes() {
    for (forest, freq) in two_pass().passes().iter().zip(feature_frequency(two_pass())) {
        let internal: usize = forest.trees().iter().map(|t| t.num_internal()).sum();
        assert_eq!(freq.values().sum::<usize>(), internal);
        assert_eq!(freq.len(), FeatureKind::ALL.len());
    }
}

#[test]
fn single_pass_inference_is_forest_prediction() {
    let model = two_pass().truncated(1).unwrap();
    let test = &volumes()[4];
    let (maps, band) = infer_cascade(&model, &test.intensity, &test.bone_mask, &test.landmarks).unwrap();
    let prepared = prepare_volume(
        &test.intensity,
        &test.bone_mask,
        &test.landmarks,
        model.feature_config(),
    )
    .unwrap();
    let direct = predict_volume(&model.passes()[0], &prepared.context, &prepared.band).unwrap();
    assert_eq!(maps, direct);
    assert_eq!(band, prepared.band);
}

#[test]
fn inference_is_deterministic() {
    let test = &volumes()[4];
    let a = infer_cascade(two_pass(), &test.intensity, &test.bone_mask, &test.landmarks).unwrap();
    let b = infer_cascade(two_pass(), &test.intensity, &test.bone_mask, &test.landmarks).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pass_one_separates_femoral_cartilage() {
    let test = &volumes()[4];
    let model = two_pass();
    let prepared = prepare_volume(
        &test.intensity,
        &test.bone_mask,
        &test.landmarks,
        model.feature_config(),
    )
    .unwrap();
    let maps = infer_prepared(model, &prepared).unwrap();
    let pf = maps[0].map(0);
    let (mut cart, mut nc, mut bg, mut nb) = (0.0, 0, 0.0, 0);
    for &i in prepared.band.voxels() {
        match test.gt.at(i) {
            1 => {
                cart += f64::from(pf.at(i));
                nc += 1;
            }
            0 => {
                bg += f64::from(pf.at(i));
                nb += 1;
            }
            _ => {}
        }
    }
    assert!(cart / nc as f64 > bg / nb as f64);

    let noise: Vec<f64> = maps
        .iter()
        .map(|m| label_noise_fraction(&argmax_labels(m, &prepared.band).unwrap(), &prepared.band).unwrap())
        .collect();
    assert!(noise[1] <= noise[0], "pass-2 labels noisier: {noise:?}");
}

#[test]
fn empty_band_names_the_volume() {
    let (c, f, r) = configs(1);
    let f = FeatureConfig {
        band_tau_in_mm: 0.0,
        band_tau_out_mm: 0.0,
        ..f
    };
    match train_cascade(&volumes()[..1], &c, &f, &r, 0) {
        Err(Error::EmptyBand(id)) => assert_eq!(id, "s0"),
        other => panic!("expected an empty-band error, got {other:?}"),
    }
}

#[test]
fn container_rejects_other_versions() {
    let mut bytes = two_pass().to_bytes();
    bytes[7..11].copy_from_slice(&(CASCADE_VERSION + 1).to_le_bytes());
    assert!(matches!(
        CascadeModel::from_bytes(&bytes),
        Err(Error::UnsupportedVersion { .. })
    ));
    assert!(matches!(CascadeModel::from_bytes(b"SCFMODEL"), Err(Error::BadModel(_))));
}

#[test]
fn cross_context_training_runs() {
    let (c, f, r) = configs(2);
    let c = CascadeConfig {
        cross_context: true,
        ..c
    };
    let model = train_cascade(&volumes()[..4], &c, &f, &r, 21).unwrap();
    assert_eq!(model.num_passes(), 2);
    assert_ne!(model.passes()[1], two_pass().passes()[1]);
    assert_eq!(model.passes()[0], two_pass().passes()[0]);
}
