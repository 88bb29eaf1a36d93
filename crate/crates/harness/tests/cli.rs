use std::path::Path;

use clap::Parser;
use pfljscc_core::data;
use pfljscc_core::federation::FlSchedule;
use pfljscc_core::{Purpose, RngStream, StreamId, Tensor};
use pfljscc_harness::checkpoint::Checkpoint;
use pfljscc_harness::cli::{run_cli, Cli};
use pfljscc_harness::config::{DatasetSource, ExperimentConfig, Mode, Toggles};
use pfljscc_harness::dataset::{load_folder, load_or_synthesize, write_png};
use pfljscc_harness::experiment::{
    self, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SWEEP_FILE, THEORY_FILE,
};
use pfljscc_harness::metrics::MetricsTable;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::paper_defaults();
    c.clients = 2;
    c.dataset = DatasetSource::Synthetic {
        count: 32,
        size: 16,
        classes: 4,
    };
    c.sharding.min_shard = 4;
    c.schedule = FlSchedule::constant(3, 2, 0.1);
    c.batch_size = 4;
    c.eval_snr_db = vec![0.0, 10.0];
    c.eval_every = 2;
    c.instrument = true;
    c.ablation_seeds = vec![1];
    c.parallel = false;
    c.output_dir = out.to_path_buf();
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("input.json");
    cfg.save(&p).unwrap();
    p.to_string_lossy().into_owned()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn paper_defaults_flag() {
    let cli = Cli::try_parse_from(["pfljscc", "train", "--config", "paper-defaults"]).unwrap();
    let cfg = cli.resolve().unwrap();
    assert_eq!(cfg.mode, Mode::Train);
    assert_eq!(
        (
            cfg.schedule.rounds,
            cfg.schedule.local_steps,
            cfg.schedule.eta_u
        ),
        (300, 5, 1e-4)
    );
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny(dir.path()));
    let cli = Cli::try_parse_from([
        "pfljscc",
        "--mode",
        "ablate",
        "--config",
        &path,
        "--seed",
        "9",
        "--snr-mean",
        "-2.5",
        "--snr-std",
        "1",
        "--clients",
        "3",
        "--rounds",
        "4",
        "--local-steps",
        "1",
        "--toggle",
        "pfl=false",
        "--toggle",
        "dual_pipeline=false",
    ])
    .unwrap();
    let c = cli.resolve().unwrap();
    assert_eq!(c.mode, Mode::Ablate);
    assert_eq!(
        (c.seed, c.clients, c.schedule.rounds, c.schedule.local_steps),
        (9, 3, 4, 1)
    );
    assert_eq!((c.snr.mean_db, c.snr.std_db), (-2.5, 1.0));
    assert_eq!(
        c.toggles,
        Toggles {
            dual_pipeline: false,
            decoder_preprocess: true,
            pfl: false
        }
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    assert_eq!(
        run_cli(["pfljscc", "train", "--rounds", "0", "--out", &out]),
        2
    );
    assert_eq!(
        run_cli(["pfljscc", "train", "--toggle", "nope=true", "--out", &out]),
        2
    );
    assert_eq!(run_cli(["pfljscc", "train", "--bogus-flag"]), 2);
    assert_eq!(
        run_cli(["pfljscc", "train", "--config", "/does/not/exist.json"]),
        2
    );
    std::fs::write(dir.path().join("bad.json"), r#"{"rounds": 3}"#).unwrap();
    let bad = dir.path().join("bad.json").to_string_lossy().into_owned();
    assert_eq!(run_cli(["pfljscc", "train", "--config", &bad]), 2);
    let missing = dir.path().join("none").to_string_lossy().into_owned();
    assert_eq!(run_cli(["pfljscc", "channel-sweep", "--out", &missing]), 1);

    let mut diverging = tiny(dir.path());
    diverging.schedule = FlSchedule::constant(3, 2, 1e300);
    let path = write_config(dir.path(), &diverging);
    assert_eq!(run_cli(["pfljscc", "train", "--config", &path]), 3);
}

#[test]
fn verify_theory_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = d.to_string_lossy().into_owned();
        assert_eq!(
            run_cli(["pfljscc", "verify-theory", "--seed", "7", "--out", &out]),
            0
        );
    }
    let ja = read(a.join(THEORY_FILE));
    assert_eq!(ja, read(b.join(THEORY_FILE)));
    let v: serde_json::Value = serde_json::from_str(&ja).unwrap();
    assert_eq!(v["pass"], serde_json::Value::Bool(true));
    assert!(v["theorem"]["coefficients"]["lambda1"].as_f64().unwrap() > 0.0);
    assert_eq!(v["theorem"]["checks"].as_array().unwrap().len(), 5);
}

#[test]
fn train_outputs_reproduce_from_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let cfg_path = write_config(dir.path(), &tiny(&first));
    assert_eq!(run_cli(["pfljscc", "train", "--config", &cfg_path]), 0);
    for f in [
        CONFIG_FILE,
        METRICS_FILE,
        CHECKPOINT_FILE,
        experiment::LOSS_PLOT,
        experiment::PSNR_PLOT,
    ] {
        assert!(first.join(f).exists(), "{f}");
    }
    let m1 = MetricsTable::read(read(first.join(METRICS_FILE)).as_bytes()).unwrap();
    assert_eq!(m1.rows.len(), 3);
    assert!(
        m1.rows[0].psnr[0].is_none()
            && m1.rows[1].psnr[0].is_some()
            && m1.rows[2].psnr[0].is_some()
    );
    assert!(m1.rows.iter().all(|r| r.grad_norm_u_sq.is_some()));

    let second = dir.path().join("second");
    let embedded = first.join(CONFIG_FILE).to_string_lossy().into_owned();
    let out2 = second.to_string_lossy().into_owned();
    assert_eq!(
        run_cli(["pfljscc", "train", "--config", &embedded, "--out", &out2]),
        0
    );
    let m2 = MetricsTable::read(read(second.join(METRICS_FILE)).as_bytes()).unwrap();
    assert_eq!(m1.without_wall_clock(), m2.without_wall_clock());

    let ck = Checkpoint::load(&first.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.state.round, 3);
    assert_eq!(ck.config.output_dir, first);
    assert_eq!(
        ck.state,
        Checkpoint::load(&second.join(CHECKPOINT_FILE))
            .unwrap()
            .state
    );
}

#[test]
fn channel_sweep_contract() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("trained");
    let cfg_path = write_config(dir.path(), &tiny(&trained));
    assert_eq!(run_cli(["pfljscc", "train", "--config", &cfg_path]), 0);
    let ck = trained.join(CHECKPOINT_FILE).to_string_lossy().into_owned();
    let mut outputs = Vec::new();
    for name in ["s1", "s2"] {
        let out = dir.path().join(name).to_string_lossy().into_owned();
        assert_eq!(
            run_cli([
                "pfljscc",
                "channel-sweep",
                "--checkpoint",
                &ck,
                "--out",
                &out
            ]),
            0
        );
        outputs.push(read(dir.path().join(name).join(SWEEP_FILE)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let e = experiment::read_sweep_csv(&outputs[0]).unwrap();
    assert_eq!(e.snr_db.len(), 11);
    assert_eq!(outputs[0].lines().count(), 12);
}

#[test]
fn ablation_emits_one_comparative_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny(dir.path());
    base.schedule.rounds = 1;
    base.mode = Mode::Ablate;
    experiment::run(&base).unwrap();
    let csv = read(dir.path().join(experiment::ABLATION_FILE));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 4);
    assert!(lines[0].starts_with("variant,dual_pipeline,decoder_preprocess,pfl,seed"));

    // The four embedded configs differ only in toggles and output folder.
    let mut configs = Vec::new();
    for (variant, toggles) in Toggles::ablation_rows() {
        let p = dir.path().join(variant).join("seed1").join(CONFIG_FILE);
        let mut c = ExperimentConfig::from_json(&read(p)).unwrap();
        assert_eq!(c.toggles, toggles);
        c.toggles = Toggles::default();
        c.output_dir = Default::default();
        configs.push(c);
    }
    assert!(configs.windows(2).all(|w| w[0] == w[1]));

    // pfl=false leaves no personalized block.
    let ck = Checkpoint::load(&dir.path().join("no_pfl/seed1").join(CHECKPOINT_FILE)).unwrap();
    assert!(ck.state.v.iter().all(|v| v.is_empty()));
    let ck = Checkpoint::load(&dir.path().join("full/seed1").join(CHECKPOINT_FILE)).unwrap();
    assert!(ck.state.v.iter().all(|v| !v.is_empty()));
}

#[test]
fn synthetic_shards_without_skew_are_balanced() {
    let mut c = tiny(Path::new("unused"));
    c.clients = 4;
    c.dataset = DatasetSource::Synthetic {
        count: 64,
        size: 16,
        classes: 4,
    };
    c.sharding.alpha = None;
    c.test_fraction = 0.25;
    let clients = load_or_synthesize(&c).unwrap();
    assert_eq!(clients.len(), 4);
    for cl in &clients {
        assert_eq!(cl.train.len() + cl.test.len(), 16);
        let mut counts = [0; 4];
        for &l in cl
            .train
            .labels
            .iter()
            .chain(cl.test.labels.iter())
            .flatten()
        {
            counts[l] += 1;
        }
        assert_eq!(counts, [4; 4]);
    }
}

#[test]
fn small_alpha_concentrates_classes() {
    let all = data::synthesize(64, 16, 4, 1).unwrap();
    let mut concentrated = false;
    for trial in 0..20 {
        let mut rng = RngStream::new(trial, StreamId::global(), Purpose::Shard);
        let shards = data::shard(
            &all,
            4,
            data::Sharding {
                alpha: Some(0.1),
                min_shard: 1,
            },
            &mut rng,
        )
        .unwrap();
        for s in &shards {
            let counts = s.class_counts(4).unwrap();
            let max = *counts.iter().max().unwrap();
            if max as f64 > 0.6 * s.len() as f64 {
                concentrated = true;
            }
        }
    }
    assert!(concentrated);
}

#[test]
fn full_frame_crops_equal_originals() {
    let dir = tempfile::tempdir().unwrap();
    let mut originals = Vec::new();
    for i in 0..3 {
        let mut rng = RngStream::new(i, StreamId::global(), Purpose::Test);
        let t = Tensor::new(
            &[3, 128, 128],
            (0..3 * 128 * 128)
                .map(|_| (rng.index(256) as f64) / 255.0)
                .collect(),
        )
        .unwrap();
        write_png(&dir.path().join(format!("img{i}.png")), &t).unwrap();
        originals.push(t);
    }
    let ds = load_folder(dir.path(), 128).unwrap().dataset;
    assert_eq!(ds.len(), 3);
    let batch = data::make_batch(
        &ds,
        &[0, 1, 2],
        128,
        &mut RngStream::new(0, StreamId::global(), Purpose::Crop),
    )
    .unwrap();
    for (i, o) in originals.iter().enumerate() {
        let crop = batch.index_outer(i).unwrap();
        for (a, b) in crop.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
