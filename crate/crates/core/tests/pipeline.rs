use herl_core::clustereval::{kmeans, score, KMeansConfig};
use herl_core::config::RunConfig;
use herl_core::dataio::{synth_dataset, Dataset, MaskSpec, SynthSpec};
use herl_core::impute::{assemble, recover};
use herl_core::netmodel::ModelState;
use herl_core::train::{evaluate, train, write_log, LOG_HEADER};
use herl_core::treebed::TreeSpec;
use proptest::prelude::*;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        tree: TreeSpec::new(3, 2).unwrap(),
        samples_per_class: 5,
        dims: [6, 5],
        center_step: 2.0,
        noise: 0.3,
        cross_view: 2.0,
        seed,
    }
}

fn cfg(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        hidden: vec![10],
        embed_dim: 6,
        warmup: 3,
        kmeans_restarts: 4,
        ..RunConfig::default()
    }
}

#[test]
fn dataset_directory_roundtrip() {
    let data = synth_dataset(&spec(1), &MaskSpec { eta: 0.4, views: 2, seed: 2 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    assert_eq!(Dataset::read(dir.path()).unwrap(), data);
    assert_eq!(data.classes(), 9);
}

#[test]
fn checkpoint_roundtrip_preserves_evaluation() {
    let data = synth_dataset(&spec(4), &MaskSpec { eta: 0.3, views: 2, seed: 5 }).unwrap();
    let c = cfg(5);
    let (state, log) = train(&c, &data, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    state.save(dir.path()).unwrap();
    let back = ModelState::load(dir.path()).unwrap();
    assert_eq!(back, state);
    let a = evaluate(&state, &data, 9, 0, &c).unwrap();
    let b = evaluate(&back, &data, 9, 0, &c).unwrap();
    assert_eq!(a, b);

    let path = dir.path().join("log.csv");
    write_log(&log, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn evaluate_matches_manual_pipeline() {
    let data = synth_dataset(&spec(6), &MaskSpec { eta: 0.2, views: 2, seed: 7 }).unwrap();
    let c = cfg(3);
    let (state, _) = train(&c, &data, |_| Ok(())).unwrap();
    let r = evaluate(&state, &data, 9, 11, &c).unwrap();
    let x = assemble(&recover(&state, &data.data).unwrap()).unwrap();
    let km = kmeans(&x, 9, 11, &KMeansConfig { restarts: 4, max_iter: 300 }).unwrap();
    assert_eq!(r.clusters, km);
    assert_eq!(r.scores, score(&data.labels, &km.assignments).unwrap());
}

#[test]
fn epoch_callback_errors_stop_training() {
    let data = synth_dataset(&spec(8), &MaskSpec { eta: 0.2, views: 2, seed: 9 }).unwrap();
    let mut seen = 0;
    let res = train(&cfg(10), &data, |row| {
        seen += 1;
        if row.epoch == 2 {
            Err(herl_core::HerlError::EmptyInput("stop"))
        } else {
            Ok(())
        }
    });
    assert!(res.is_err());
    assert_eq!(seen, 2);
}

#[test]
fn all_rows_incomplete_cannot_train() {
    let data = synth_dataset(&spec(1), &MaskSpec { eta: 1.0, views: 2, seed: 2 }).unwrap();
    assert!(train(&cfg(1), &data, |_| Ok(())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masks_remove_exactly_eta_n_views(eta in 0.0f64..=1.0, seed in 0u64..1000) {
        let data = synth_dataset(&spec(seed), &MaskSpec { eta, views: 2, seed }).unwrap();
        let n = data.data.len();
        let incomplete = n - data.data.complete_rows().len();
        prop_assert_eq!(incomplete, (eta * n as f64).round() as usize);
        for (i, row) in data.data.mask.rows().into_iter().enumerate() {
            prop_assert!(row.sum() >= 1);
            for v in 0..2 {
                if row[v] == 0 {
                    prop_assert!(data.data.views[v].row(i).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn recovered_features_are_unit_or_translated(seed in 0u64..200) {
        let data = synth_dataset(&spec(seed), &MaskSpec { eta: 0.5, views: 2, seed }).unwrap();
        let (state, _) = train(&cfg(0), &data, |_| Ok(())).unwrap();
        let z = recover(&state, &data.data).unwrap();
        for (v, zv) in z.iter().enumerate() {
            for (i, row) in zv.rows().into_iter().enumerate() {
                if data.data.mask[[i, v]] == 1 {
                    let n = row.dot(&row).sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
