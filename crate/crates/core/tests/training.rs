use std::fs;
use std::path::Path;

use modgrok::checkpoint::{checkpoint_dir_name, load_checkpoint};
use modgrok::training::{read_metrics, resume, train_run, CheckpointSchedule, RegularizerKind, RunDirectory, TrainConfig};
use modgrok::{Error, ModelConfig};

fn config(regularizer: RegularizerKind) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            p: 13,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            n_layers: 1,
            scale_attention: true,
        },
        epochs: 24,
        train_frac: 0.4,
        seed: 3,
        regularizer,
        checkpoints: CheckpointSchedule {
            dense_every: 4,
            dense_until: 12,
            sparse_every: 10,
        },
        ..TrainConfig::default()
    }
}

fn regularizers() -> [RegularizerKind; 3] {
    [
        RegularizerKind::WeightDecay,
        RegularizerKind::Dropout { p: 0.2 },
        RegularizerKind::L1 { lambda: 1e-4 },
    ]
}

/// Simulates a crash just after the checkpoint at `epoch`: later
/// checkpoints vanish and the metrics stream stops a few rows later.
fn crash_after(run: &Path, epoch: u64) {
    let dir = RunDirectory::new(run);
    for (e, path) in dir.list_checkpoints().unwrap() {
        if e > epoch {
            fs::remove_dir_all(path).unwrap();
        }
    }
    let text = fs::read_to_string(dir.metrics()).unwrap();
    let kept: Vec<&str> = text.lines().take(epoch as usize + 4).collect();
    fs::write(dir.metrics(), kept.join("\n") + "\n").unwrap();
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for reg in regularizers() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let cfg = config(reg);
        train_run(&cfg, &a).unwrap();
        train_run(&cfg, &b).unwrap();
        crash_after(&b, 8);
        let summary = resume(&b).unwrap();
        assert_eq!(summary.final_epoch, 24);
        let (ma, mb) = (RunDirectory::new(&a).metrics(), RunDirectory::new(&b).metrics());
        assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap(), "{reg:?}");
        assert_eq!(read_metrics(&mb).unwrap().len(), 25);
        let last = checkpoint_dir_name(24);
        let ca = load_checkpoint(&a.join("checkpoints").join(&last)).unwrap();
        let cb = load_checkpoint(&b.join("checkpoints").join(&last)).unwrap();
        assert_eq!(ca.params.to_flat(), cb.params.to_flat());
    }
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(RegularizerKind::WeightDecay);
    train_run(&cfg, &tmp.path().join("x")).unwrap();
    train_run(&cfg, &tmp.path().join("y")).unwrap();
    let metrics = |name: &str| fs::read(RunDirectory::new(tmp.path().join(name)).metrics()).unwrap();
    assert_eq!(metrics("x"), metrics("y"));
    let other = TrainConfig { seed: 4, ..cfg };
    train_run(&other, &tmp.path().join("z")).unwrap();
    assert_ne!(metrics("x"), metrics("z"));
}

#[test]
fn train_refuses_existing_run_and_resume_refuses_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = config(RegularizerKind::WeightDecay);
    train_run(&cfg, &run).unwrap();
    assert!(matches!(train_run(&cfg, &run), Err(Error::Precondition(_))));
    let changed = TrainConfig { lr: 2e-3, ..cfg };
    modgrok::export::write_json(&RunDirectory::new(&run).config(), &changed).unwrap();
    assert!(matches!(resume(&run), Err(Error::Precondition(_))));
}

#[test]
fn checkpoints_follow_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = config(RegularizerKind::WeightDecay);
    train_run(&cfg, &run).unwrap();
    let epochs: Vec<u64> = RunDirectory::new(&run).list_checkpoints().unwrap().into_iter().map(|(e, _)| e).collect();
    assert_eq!(epochs, cfg.checkpoints.epochs(cfg.epochs));
    assert_eq!(epochs, vec![0, 4, 8, 20, 24]);
}
