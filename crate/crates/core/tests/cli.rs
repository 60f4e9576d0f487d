use std::path::Path;
use std::process::Command;

use ddn::checkpoint::Checkpoint;
use ddn::cli::*;
use ddn::config::RunConfig;
use ddn::dataset::{format_points_text, write_points_text};
use ddn::gradcheck::GradCheckConfig;
use ddn::network::TransformKind;
use ddn::pipeline::{shape_basis, Head};
use ddn::shape::LandmarkSet;
use ddn::trainer::Stage;
use ddn::DdnError;

const TINY: &str = "seed = 11
[trainer]
epochs_frozen = 1
epochs_unfrozen = 1
batch_size = 8
[dataset]
train_count = 24
test_count = 8
";

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn train(cfg: &RunConfig, stage: Stage, data: &Path, out: &Path) -> ddn::Result<TrainOutcome> {
    let opts = TrainOptions {
        stage,
        transform: TransformKind::Tps,
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        resume: None,
        max_epochs: None,
    };
    cmd_train(cfg, &opts, |_| {})
}

fn eval(cfg: &RunConfig, ck: &Path, data: &Path, head: Head, out: &Path, force_truth: bool) -> ddn::Result<EvalOutcome> {
    cmd_eval(
        cfg,
        &EvalOptions {
            checkpoint: ck.to_path_buf(),
            data: data.to_path_buf(),
            head,
            out: out.to_path_buf(),
            force_truth,
        },
    )
}

#[test]
fn gen_data_is_reproducible() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_gen_data(&cfg, &dir.path().join("a")).unwrap();
    let b = cmd_gen_data(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dataset_hash, dataset_hash(&cfg.dataset));
    for f in ["train.csv", "test.csv", "manifest.toml", "images/test_00003.pgm"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.dataset.seed += 1;
    assert_ne!(dataset_hash(&other.dataset), a.dataset_hash);
    let err = load_dataset(&other, &dir.path().join("a")).unwrap_err();
    assert!(matches!(err, DdnError::Contract(_)), "{err:?}");
}

#[test]
fn staged_commands_and_contracts() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    cmd_gen_data(&cfg, &data).unwrap();

    let err = train(&cfg, Stage::Ptn, &data, &out).unwrap_err();
    assert!(matches!(err, DdnError::Dependency { ref stage, .. } if stage == "sbn"), "{err:?}");

    let sbn = train(&cfg, Stage::Sbn, &data, &out).unwrap();
    assert!(sbn.finished);
    let restored = restore(&Checkpoint::load(&sbn.checkpoint).unwrap()).unwrap();
    let ds = load_dataset(&cfg, &data).unwrap();
    assert_eq!(restored.basis, shape_basis(&cfg, &ds.train).unwrap());
    assert_eq!(std::fs::read_to_string(&sbn.curve).unwrap().lines().count(), 3);

    let err = train(&cfg, Stage::Joint, &data, &out).unwrap_err();
    assert!(matches!(err, DdnError::Dependency { ref stage, .. } if stage == "ptn"), "{err:?}");

    let err = eval(&cfg, &sbn.checkpoint, &data, Head::Full, &out, false).unwrap_err();
    assert!(matches!(err, DdnError::Contract(_)), "{err:?}");
    let e = eval(&cfg, &sbn.checkpoint, &data, Head::Sbn, &out, false).unwrap();
    assert!(e.table.ends_with("pck_sbn_sbn.txt"));

    let perfect = eval(&cfg, &sbn.checkpoint, &data, Head::Sbn, &out, true).unwrap();
    assert!(perfect.report.mean.iter().all(|&v| v == 1.0));
    assert_eq!(perfect.mean_error, 0.0);

    train(&cfg, Stage::Ptn, &data, &out).unwrap();
    let joint = train(&cfg, Stage::Joint, &data, &out).unwrap();
    let full = eval(&cfg, &joint.checkpoint, &data, Head::Full, &out, false).unwrap();
    assert!(full.csv.ends_with("pck_joint_full.csv"));
    assert!(full.mean_error.is_finite());
}

#[test]
fn paused_training_resumes_to_the_same_result() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let straight = train(&cfg, Stage::Sbn, &data, &dir.path().join("a")).unwrap();
    let opts = |resume| TrainOptions {
        stage: Stage::Sbn,
        transform: TransformKind::Tps,
        data: data.clone(),
        out: dir.path().join("b"),
        resume,
        max_epochs: Some(1),
    };
    let first = cmd_train(&cfg, &opts(None), |_| {}).unwrap();
    assert!(!first.finished);
    let second = cmd_train(&cfg, &opts(Some(first.checkpoint.clone())), |_| {}).unwrap();
    assert!(second.finished);
    assert_eq!(std::fs::read(&straight.checkpoint).unwrap(), std::fs::read(&second.checkpoint).unwrap());

    let mut other = cfg.clone();
    other.seed += 1;
    let err = cmd_train(&other, &opts(Some(second.checkpoint.clone())), |_| {}).unwrap_err();
    assert!(matches!(err, DdnError::Contract(_)), "{err:?}");
}

fn points(v: &[[f64; 2]]) -> LandmarkSet {
    LandmarkSet::new(v.to_vec()).unwrap()
}

#[test]
fn warp_cases() {
    let src = points(&[[5.0, 5.0], [40.0, 8.0], [20.0, 30.0], [50.0, 50.0], [10.0, 45.0]]);
    let query = points(&[[12.0, 17.0], [33.0, 41.0], [0.0, 63.0]]);

    let same = warp_points(&src, &src, &query, 0.0).unwrap();
    for (a, b) in same.stacked().iter().zip(query.stacked()) {
        assert!((a - b).abs() < 1e-9);
    }

    let shifted = src.map(|p| [p[0] + 3.5, p[1] - 2.0]);
    for gamma in [0.0, 1.0] {
        let out = warp_points(&src, &shifted, &query, gamma).unwrap();
        for i in 0..query.len() {
            assert!((out.point(i)[0] - query.point(i)[0] - 3.5).abs() < 1e-8);
            assert!((out.point(i)[1] - query.point(i)[1] + 2.0).abs() < 1e-8);
        }
    }

    let bent = points(&[[6.0, 4.0], [41.0, 9.5], [18.0, 33.0], [49.0, 52.0], [11.0, 44.0]]);
    let hit = warp_points(&src, &bent, &src, 0.0).unwrap();
    for (a, b) in hit.stacked().iter().zip(bent.stacked()) {
        assert!((a - b).abs() < 1e-8);
    }

    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_points_text(&p("src.pts"), &src).unwrap();
    write_points_text(&p("dst.pts"), &bent).unwrap();
    write_points_text(&p("q.pts"), &src).unwrap();
    let w = cmd_warp(&p("src.pts"), &p("dst.pts"), &p("q.pts"), 0.0, &p("out.pts")).unwrap();
    assert_eq!(std::fs::read_to_string(p("out.pts")).unwrap(), format_points_text(&w));
}

#[test]
fn corrupted_gradient_names_its_block() {
    for block in ["tps_U", "network_conv"] {
        let cfg = GradCheckConfig {
            instances: 2,
            corrupt: Some(block.into()),
            ..Default::default()
        };
        let err = cmd_gradcheck(&cfg).unwrap_err();
        assert!(matches!(err, DdnError::GradientCheck { block: ref b, .. } if b == block), "{err:?}");
        assert_eq!(err.exit_code(), 6);
    }
}

fn ddn(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ddn")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    std::fs::write(p("tiny.toml"), TINY).unwrap();
    std::fs::write(p("bad.toml"), "seed = 1\nunknown_key = 2\n").unwrap();
    std::fs::write(p("wild.toml"), format!("{TINY}\n").replace("[trainer]", "[trainer]\nlr_head = 1e12\nclip_norm = 0.0")).unwrap();

    assert_eq!(ddn(&["gen-data", "--config", &p("bad.toml"), "--out", &p("x")]).0, 2);
    assert_eq!(ddn(&["gen-data", "--config", &p("missing.toml"), "--out", &p("x")]).0, 3);

    let (code, log) = ddn(&["gen-data", "--config", &p("tiny.toml"), "--out", &p("data")]);
    assert_eq!(code, 0, "{log}");
    assert!(log.contains("# resolved configuration"));

    let (code, log) = ddn(&["train", "--config", &p("tiny.toml"), "--stage", "ptn", "--data", &p("data"), "--out", &p("out")]);
    assert_eq!(code, 4, "{log}");

    let (code, log) = ddn(&["gen-data", "--config", &p("wild.toml"), "--out", &p("wild")]);
    assert_eq!(code, 0, "{log}");
    let (code, log) = ddn(&["train", "--config", &p("wild.toml"), "--stage", "sbn", "--data", &p("wild"), "--out", &p("wild_out")]);
    assert_eq!(code, 5, "{log}");

    let (code, log) = ddn(&["gradcheck", "--instances", "1", "--corrupt", "sbn_loss"]);
    assert_eq!(code, 6, "{log}");
    assert!(log.contains("sbn_loss"));
}
