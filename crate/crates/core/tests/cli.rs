use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use plate_restore::cli::{
    cmd_ablate, cmd_degrade, cmd_evaluate, cmd_gen_dataset, cmd_restore, cmd_train, extractor_for, manifest_path,
    read_trace, train_with, Checkpoint, RestoreOptions, RunConfig, CHECKPOINT_FILE,
};
use plate_restore::denoiser::{DenoiserConfig, DenoiserModel, PriorMode};
use plate_restore::diffusion::SamplerMode;
use plate_restore::image::Image;
use plate_restore::numerics::Rng;
use plate_restore::plates::Manifest;
use proptest::prelude::*;

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Desk profile shrunk so a full pipeline runs in seconds.
fn tiny(mode: PriorMode) -> RunConfig {
    let mut c = RunConfig::desk();
    c.plates.count = 20;
    c.plates.split = [6, 2, 2];
    c.schedule.timesteps = 20;
    c.schedule.beta_end = 0.3;
    c.schedule.sampling_steps = 4;
    c.train.steps = 6;
    c.train.batch = 4;
    c.train.checkpoint_every = 4;
    c.model.prior_mode = mode;
    c
}

fn prepared(cfg: &RunConfig, dir: &Path) -> PathBuf {
    let data = dir.join("data");
    cmd_gen_dataset(cfg, &data).unwrap();
    cmd_degrade(cfg, &data).unwrap();
    data
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_profiles_parse_to_the_builtin_ones() {
    let desk = RunConfig::load(&workspace_file("configs/desk.cfg")).unwrap();
    assert_eq!(desk, RunConfig::desk());
    let full = RunConfig::load(&workspace_file("configs/paper.cfg")).unwrap();
    assert_eq!(full, RunConfig::default());
    assert_eq!((full.plates.style.width, full.plates.style.height), (96, 48));
    assert_eq!((full.schedule.timesteps, full.schedule.sampling_steps), (1000, 50));
    assert_eq!(
        (full.train.batch, full.train.steps, full.train.lr),
        (64, 100_000, 3e-4)
    );
    assert_eq!((desk.plates.style.width, desk.plates.style.height), (64, 32));
    assert_eq!((desk.schedule.timesteps, desk.schedule.sampling_steps), (200, 25));
    assert_eq!((desk.train.batch, desk.train.steps), (16, 2000));
    assert_eq!(RunConfig::from_toml(&desk.to_toml()).unwrap(), desk);
}

#[test]
fn config_errors_name_the_key() {
    let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err().to_string();
    assert!(err.contains("stepz"), "{err}");
    let err = RunConfig::from_toml("[train]\nbatch = 0\n").unwrap_err().to_string();
    assert!(err.contains("train.batch"), "{err}");
    let err = RunConfig::from_toml("[model]\ngroups = 3\n").unwrap_err().to_string();
    assert!(err.contains("model.groups"), "{err}");
    let err = RunConfig::from_toml("[schedule]\nsampling_steps = 5000\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("schedule.sampling_steps"), "{err}");
    let err = RunConfig::from_toml("[plates.style]\nwidth = 62\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("model"), "{err}");
}

fn random_model(seed: u64) -> DenoiserModel<f32> {
    let mut r = Rng::new(seed);
    let mode = PriorMode::ALL[r.below(4)];
    let cfg = DenoiserConfig {
        base_width: 4 * r.int_in(1, 3),
        groups: 2,
        time_dim: 8,
        prior_mode: mode,
        ..Default::default()
    };
    let mut m = DenoiserModel::new(cfg, 12, 6, 20, seed).unwrap();
    for t in m.store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = r.normal_tensor(&shape, 1.0);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let m = random_model(seed);
        let mut cfg = RunConfig::desk();
        cfg.model = m.config.clone();
        let ck = Checkpoint { config: cfg.clone(), step: seed % 1000, params: m.store.clone() };
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back.config, &cfg);
        prop_assert_eq!(back.step, seed % 1000);
        prop_assert_eq!(back.params.names(), m.store.names());
        for (a, b) in back.params.tensors().iter().zip(m.store.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let rebuilt = DenoiserModel::from_store(cfg.model.clone(), back.params, 6, 20).unwrap();
        prop_assert_eq!(rebuilt.config.prior_mode, m.config.prior_mode);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = random_model(1);
    let mut cfg = RunConfig::desk();
    cfg.model = m.config.clone();
    let bytes = Checkpoint {
        config: cfg.clone(),
        step: 3,
        params: m.store.clone(),
    }
    .to_bytes();
    assert_eq!(&bytes[..4], b"CHDF");
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    let err = Checkpoint::<f32>::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    assert!(Checkpoint::<f32>::from_bytes(b"NOPE0000").is_err());
    // a store that does not fit its config snapshot
    let mut other = cfg.clone();
    other.model.prior_mode = if m.config.prior_mode == PriorMode::None {
        PriorMode::Charm
    } else {
        PriorMode::None
    };
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert!(DenoiserModel::from_store(other.model, back.params, 6, 20).is_err());
}

#[test]
fn gen_dataset_and_degrade_are_reproducible() {
    let cfg = tiny(PriorMode::None);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let splits = cmd_gen_dataset(&cfg, a.path()).unwrap();
    assert_eq!(splits.train.len() + splits.val.len() + splits.test.len(), 20);
    assert_eq!(fs::read_dir(a.path().join("hq")).unwrap().count(), 20);
    let first = tree_bytes(a.path());
    cmd_gen_dataset(&cfg, a.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), first);

    assert_eq!(cmd_degrade(&cfg, a.path()).unwrap(), 20);
    for split in ["train", "val", "test"] {
        let m = Manifest::read(&manifest_path(a.path(), split)).unwrap();
        assert!(m.records.iter().all(|r| r.lq_path.is_some()));
    }
    let degraded = tree_bytes(a.path());
    cmd_degrade(&cfg, a.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), degraded);

    cmd_gen_dataset(&cfg, b.path()).unwrap();
    cmd_degrade(&cfg, b.path()).unwrap();
    assert_eq!(tree_bytes(b.path()), degraded);
    assert!(cmd_degrade(&cfg, &b.path().join("missing")).is_err());
}

#[test]
fn training_is_reproducible_and_checkpoints_load() {
    let cfg = tiny(PriorMode::Charm);
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&cfg, dir.path());
    let s1 = cmd_train(&cfg, &data, &dir.path().join("r1")).unwrap();
    let s2 = cmd_train(&cfg, &data, &dir.path().join("r2")).unwrap();
    let t1 = read_trace(&s1.trace).unwrap();
    assert_eq!(t1.len(), 6);
    assert_eq!(
        t1.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=6).collect::<Vec<_>>()
    );
    assert_eq!(fs::read(&s1.trace).unwrap(), fs::read(&s2.trace).unwrap());
    assert_eq!(fs::read(&s1.checkpoint).unwrap(), fs::read(&s2.checkpoint).unwrap());
    let ck = Checkpoint::<f32>::load(&s1.checkpoint).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.config, cfg);

    let mut other = cfg.clone();
    other.train.seed = 9;
    let s3 = cmd_train(&other, &data, &dir.path().join("r3")).unwrap();
    assert_ne!(fs::read(&s1.trace).unwrap(), fs::read(&s3.trace).unwrap());
}

#[test]
fn desk_charm_training_lowers_the_loss() {
    let mut cfg = RunConfig::desk();
    cfg.model.prior_mode = PriorMode::Charm;
    cfg.train.steps = 200;
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&cfg, dir.path());
    let s = cmd_train(&cfg, &data, &dir.path().join("run")).unwrap();
    let losses: Vec<f64> = read_trace(&s.trace).unwrap().iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 200);
    let first = losses[..100].iter().sum::<f64>() / 100.0;
    let last = losses[100..].iter().sum::<f64>() / 100.0;
    assert!(last < first, "first 100 steps {first}, last 100 steps {last}");
}

#[test]
fn zero_steps_saves_the_initial_weights() {
    let mut cfg = tiny(PriorMode::String);
    cfg.train.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&cfg, dir.path());
    let s = cmd_train(&cfg, &data, &dir.path().join("run")).unwrap();
    assert_eq!(s.final_loss, None);
    assert!(read_trace(&s.trace).unwrap().is_empty());
    let ck = Checkpoint::<f32>::load(&s.checkpoint).unwrap();
    let a = Checkpoint::<f32>::load(&s.checkpoint).unwrap();
    let again = cmd_train(&cfg, &data, &dir.path().join("run2")).unwrap();
    let b = Checkpoint::<f32>::load(&again.checkpoint).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_eq!(ck.step, 0);
}

#[test]
fn training_without_degraded_data_fails_first() {
    let cfg = tiny(PriorMode::None);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_dataset(&cfg, &data).unwrap();
    let out = dir.path().join("run");
    assert!(cmd_train(&cfg, &data, &out).is_err());
    assert!(!out.join(CHECKPOINT_FILE).exists());
    assert!(cmd_train(&cfg, &dir.path().join("nothing"), &out).is_err());
}

#[test]
fn restore_outputs_and_attention_dumps() {
    let cfg = tiny(PriorMode::Charm);
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&cfg, dir.path());
    let s = cmd_train(&cfg, &data, &dir.path().join("run")).unwrap();
    let test = manifest_path(&data, "test");
    let opts = |out: &str, dump: bool| RestoreOptions {
        checkpoint: s.checkpoint.clone(),
        input: test.clone(),
        out_dir: dir.path().join(out),
        mode: None,
        seed: 5,
        dump_attn: dump,
        prior_mode: None,
    };
    let a = cmd_restore(&opts("a", true)).unwrap();
    let b = cmd_restore(&opts("b", false)).unwrap();
    let m = Manifest::read(&test).unwrap();
    assert_eq!(a.len(), m.len());
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        let img = Image::read(pa).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (64, 32, 1));
    }
    // one heatmap per character prior of each image
    let extractor = extractor_for(&cfg).unwrap();
    for r in &m.records {
        let lq = Image::read(&plate_restore::plates::resolve(&test, r.lq_path.as_ref().unwrap())).unwrap();
        let n = plate_restore::charprior::CharSequence::from_detections(
            &extractor.detect(&lq, Some(&r.boxes)).unwrap(),
            (64, 32),
            cfg.plates.style.max_chars,
        )
        .len();
        let dumped = fs::read_dir(dir.path().join("a/attn"))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with(&format!("{}_", r.id))
            })
            .count();
        assert_eq!(dumped, n, "{}", r.id);
    }

    let mut o = opts("c", false);
    o.mode = Some(SamplerMode::Deterministic);
    cmd_restore(&o).unwrap();
    let mut o = opts("d", false);
    o.prior_mode = Some(PriorMode::None);
    assert!(cmd_restore(&o).is_err());

    // single image in, same shape out
    let single = plate_restore::plates::resolve(&test, m.records[0].lq_path.as_ref().unwrap());
    let mut o = opts("e", false);
    o.input = single;
    let out = cmd_restore(&o).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(Image::read(&out[0]).unwrap().width(), 64);

    let mut bytes = fs::read(&s.checkpoint).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 1;
    let bad = dir.path().join("bad.chdf");
    fs::write(&bad, bytes).unwrap();
    let mut o = opts("f", false);
    o.checkpoint = bad;
    assert!(cmd_restore(&o).unwrap_err().to_string().contains("checksum"));
}

#[test]
fn prior_extraction_state_is_untouched_by_training() {
    let cfg = tiny(PriorMode::Charm);
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&cfg, dir.path());
    let extractor = extractor_for(&cfg).unwrap();
    let before = extractor.state_bytes();
    let s = train_with(&cfg, &data, &dir.path().join("run"), &extractor).unwrap();
    assert_eq!(extractor.state_bytes(), before);
    assert_eq!(extractor_for(&cfg).unwrap().state_bytes(), before);
    let trained = Checkpoint::<f32>::load(&s.checkpoint).unwrap();
    let mut zero = cfg.clone();
    zero.train.steps = 0;
    let init = train_with(&zero, &data, &dir.path().join("init"), &extractor).unwrap();
    let init = Checkpoint::<f32>::load(&init.checkpoint).unwrap();
    for name in trained.params.names().iter().filter(|n| n.starts_with("encoder.")) {
        assert_ne!(trained.params.get(name), init.params.get(name), "{name}");
    }
}

#[test]
fn evaluate_and_untrained_ablation_plumbing() {
    let mut cfg = tiny(PriorMode::None);
    cfg.train.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_ablate(&cfg, &[0], dir.path()).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.means.len(), 4);
    let names: Vec<&str> = report.runs.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["none", "string", "char_global", "charm"]);
    assert!(report.runs.iter().all(|r| r.error.is_none() && r.metrics.is_some()));
    assert!(dir.path().join("ablation.txt").exists());
    let table = fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 9);

    let test = manifest_path(&dir.path().join("data"), "test");
    let restored = dir.path().join("seed0/none/restored");
    let r = cmd_evaluate(&cfg, &test, &restored, &dir.path().join("again.jsonl")).unwrap();
    assert_eq!(Some(&r.aggregate), report.run(PriorMode::None, 0));
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_plate-restore"));
    c.env_remove("PLATE_RESTORE_CONFIG").env("RUST_LOG", "error");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin().arg("frobnicate").output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = bin().args(["--help"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));

    let cfg_path = dir.path().join("bad.cfg");
    fs::write(&cfg_path, "[train]\nbatch = 0\n").unwrap();
    let st = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "degrade"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("train.batch"));

    // the environment variable is honoured when no flag is given
    let st = bin()
        .env("PLATE_RESTORE_CONFIG", &cfg_path)
        .arg("degrade")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));

    let missing = dir.path().join("none");
    let st = bin()
        .args(["degrade", "--data", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    // a huge learning rate overflows the weights and the loss
    let mut cfg = tiny(PriorMode::None);
    cfg.train.lr = 1e38;
    cfg.train.steps = 5;
    let good = dir.path().join("nan.cfg");
    fs::write(&good, cfg.to_toml()).unwrap();
    let data = dir.path().join("data");
    let run = |args: &[&str]| {
        bin()
            .args(["--config", good.to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    };
    assert_eq!(
        run(&["gen-dataset", "--out", data.to_str().unwrap()]).status.code(),
        Some(0)
    );
    assert_eq!(
        run(&["degrade", "--data", data.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
