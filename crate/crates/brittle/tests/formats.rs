use brittle::io;
use brittle::model_file::{load_flow, save_flow};
use brittle_core::brittle::RateCell;
use brittle_core::flow::{FlowConfig, FlowModel};
use brittle_core::simulators::{generate_dataset, AnyModel, Balls, BallsConfig};
use brittle_core::smc::StudyRow;
use brittle_core::training::{MetricRecord, TrainingPair};
use brittle_core::StateVec;
use proptest::prelude::*;

#[test]
fn dataset_round_trips_exactly() {
    let model = AnyModel::Balls(Balls::new(BallsConfig::default()).unwrap());
    let data = generate_dataset(&model, 12, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    io::write_dataset(&path, &data).unwrap();
    assert_eq!(io::read_dataset(&path).unwrap(), data);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("t,y0,y1,y2,y3,x0,"), "{text}");
}

proptest! {
    #[test]
    fn pairs_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 6..60)) {
        let pairs: Vec<TrainingPair> = vals
            .chunks_exact(3)
            .map(|c| TrainingPair { x_prev: StateVec(vec![c[0], c[1]]), z: vec![c[2]] })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        io::write_pairs(&path, &pairs).unwrap();
        prop_assert_eq!(io::read_pairs(&path).unwrap(), pairs);
    }
}

#[test]
fn metrics_keep_missing_entries() {
    let log = vec![
        MetricRecord {
            iteration: 1,
            train_objective: -1.5,
            held_out_objective: None,
            rejection_rate: None,
            grad_norm: 0.25,
        },
        MetricRecord {
            iteration: 2,
            train_objective: 0.1,
            held_out_objective: Some(0.2),
            rejection_rate: Some(0.3),
            grad_norm: 1.0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    io::write_metrics(&path, &log).unwrap();
    assert_eq!(io::read_metrics(&path).unwrap(), log);
}

#[test]
fn study_rows_round_trip_with_failures() {
    let rows = vec![StudyRow {
        dataset: 0,
        var_p: 2.0,
        var_q: 0.5,
        mean_p: -10.0,
        mean_q: f64::NEG_INFINITY,
        failed_p: 0,
        failed_q: 3,
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    io::write_study(&path, &rows).unwrap();
    assert_eq!(io::read_study(&path).unwrap(), rows);
}

#[test]
fn rate_map_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    io::write_rate_map(
        &path,
        &[RateCell {
            x: 1.0,
            y: 2.0,
            rate: 0.5,
            n_trials: 10,
        }],
    )
    .unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "grid_x,grid_y,rate,n_trials\n1,2,0.5,10\n"
    );
}

#[test]
fn malformed_csv_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, "x0,z0\n1,2\n3,oops\n").unwrap();
    let e = io::read_pairs(&path).unwrap_err().to_string();
    assert!(e.contains("line 3"), "{e}");
}

fn trained_like_flow() -> FlowModel {
    let mut f = FlowModel::new(FlowConfig::new(2, 3, vec![0.5, 2.0])).unwrap();
    for (k, t) in f.params_mut().tensors_mut().iter_mut().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = 0.01 * ((k * 31 + i * 7) % 13) as f64 - 0.06;
        }
    }
    f
}

#[test]
fn model_file_round_trips_and_checks_fingerprint() {
    let flow = trained_like_flow();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_flow(&path, &flow, "annulus", "abc").unwrap();
    let back = load_flow(&path, "abc").unwrap();
    assert_eq!(back, flow);
    let (z, x) = ([0.3, -0.2], [1.0, 2.0, 3.0]);
    assert_eq!(back.log_density(&z, &x), flow.log_density(&z, &x));
    let e = load_flow(&path, "abd").unwrap_err().to_string();
    assert!(e.contains("trained for simulator abc"), "{e}");
}

#[test]
fn corrupt_model_file_is_rejected() {
    let flow = trained_like_flow();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_flow(&path, &flow, "annulus", "abc").unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"n_blocks\": 5", "\"n_blocks\": 4");
    std::fs::write(&path, text).unwrap();
    assert!(load_flow(&path, "abc").is_err());
}
