//! Hidden target labels must only ever reach evaluation.

use centershift_core::data::{blobs_task, BlobsSpec, DomainDataset, ShiftSpec};
use centershift_core::evaluate::{final_eval, EvalProbe};
use centershift_core::methods::mode_names;
use centershift_core::ndcore::Rng;
use centershift_core::report::write_metrics_csv;
use centershift_core::trainer::{train, TrainConfig, TrainOutcome};

fn task() -> (DomainDataset, DomainDataset) {
    let spec = BlobsSpec {
        class_count: 3,
        n_per_class: 30,
        input_dim: 4,
        spread: 1.0,
    };
    blobs_task(&spec, &ShiftSpec::desk_default(), 11).unwrap()
}

fn garbage_labels(t: &DomainDataset) -> DomainDataset {
    let mut rng = Rng::new(999);
    let junk = (0..t.len()).map(|_| rng.below(t.class_count())).collect();
    t.clone().with_labels(Some(junk)).unwrap()
}

fn run(mode: &str, s: &DomainDataset, t: &DomainDataset) -> TrainOutcome {
    let cfg = TrainConfig {
        mode: mode.into(),
        iterations: 50,
        pseudo_start: 15,
        hidden_dim: 8,
        embedding_dim: 4,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&cfg, s, t.unlabeled(), &mut EvalProbe::new(t)).unwrap()
}

#[test]
fn garbage_target_labels_leave_training_untouched() {
    let (s, t) = task();
    let junk = garbage_labels(&t);
    for mode in mode_names() {
        let a = run(mode, &s, &t);
        let b = run(mode, &s, &junk);
        assert_eq!(a.metrics.trajectory_hash, b.metrics.trajectory_hash, "{mode}");
        assert_eq!(a.model, b.model, "{mode}");
        assert_eq!(a.pseudo, b.pseudo, "{mode}");
        let losses = |o: &TrainOutcome| {
            o.metrics
                .rows
                .iter()
                .map(|r| (r.loss_source, r.loss_target, r.loss_disc, r.loss_gen))
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&a), losses(&b), "{mode}");
    }
}

#[test]
fn garbage_target_labels_only_move_evaluation() {
    let (s, t) = task();
    let junk = garbage_labels(&t);
    let a = run("sda_tcl", &s, &t);
    let b = run("sda_tcl", &s, &junk);
    let ea = final_eval(&a.model, &s, &t, 5).unwrap();
    let eb = final_eval(&b.model, &s, &junk, 5).unwrap();
    assert_eq!(ea.a_distance, eb.a_distance);
    assert_eq!(ea.source_accuracy, eb.source_accuracy);
    assert_ne!(ea.target_accuracy, eb.target_accuracy);
    let acc = |o: &TrainOutcome| o.metrics.rows.iter().map(|r| r.target_accuracy).collect::<Vec<_>>();
    assert_ne!(acc(&a), acc(&b));
}

#[test]
fn unlabeled_target_trains_identically() {
    let (s, t) = task();
    let bare = t.clone().with_labels(None).unwrap();
    let a = run("sda_tcl", &s, &t);
    let b = run("sda_tcl", &s, &bare);
    assert_eq!(a.metrics.trajectory_hash, b.metrics.trajectory_hash);
    assert!(b.metrics.rows.iter().all(|r| r.target_accuracy.is_none()));
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let (s, t) = task();
    let csv = |o: &TrainOutcome| {
        let mut buf = Vec::new();
        write_metrics_csv(&o.metrics.rows, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&run("sda_tcl", &s, &t)), csv(&run("sda_tcl", &s, &t)));
}
