use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osface::experiment::{
    ExperimentConfig, FeatureSource, NetworkConfig, PairingConfig, ProtocolConfig,
};
use osface::recognition::gallery_from_samples;
use osface::{
    generate_synthetic, init_net, load_features, save_net, score_probe, write_features,
    SyntheticSpec, TrainConfig,
};
use tempfile::TempDir;

fn osface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osface"))
        .args(args)
        .output()
        .expect("spawn osface")
}

fn ok(args: &[&str]) -> String {
    let out = osface(args);
    assert!(
        out.status.success(),
        "osface {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &TempDir, name: &str, ids: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let (ids, seed) = (ids.to_string(), seed.to_string());
    ok(&[
        "synth",
        "--identities",
        &ids,
        "--samples-per-id",
        "3",
        "--dim",
        "6",
        "--seed",
        &seed,
        "--out",
        p(&path),
    ]);
    path
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.txt", 4, 9);
    let b = synth(&dir, "b.txt", 4, 9);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let store = load_features(&a).unwrap();
    assert_eq!(
        (store.len(), store.dim(), store.identity_count()),
        (12, 6, 4)
    );
    assert_eq!(store, generate_synthetic(4, 3, 6, 0.1, 9).unwrap());
}

#[test]
fn zero_spread_repeats_the_center() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("z.txt");
    ok(&[
        "synth",
        "--identities",
        "2",
        "--samples-per-id",
        "3",
        "--dim",
        "4",
        "--spread",
        "0",
        "--out",
        p(&path),
    ]);
    let store = load_features(&path).unwrap();
    for id in store.identities() {
        let first = store.vector(id.samples[0]);
        assert!(id.samples.iter().all(|&s| store.vector(s) == first));
    }
}

fn trained_model(dir: &TempDir, gallery: &Path) -> std::path::PathBuf {
    let model = dir.path().join("net.bin");
    let out = osface(&[
        "train",
        "--gallery",
        p(gallery),
        "--out",
        p(&model),
        "--hidden",
        "8,4",
        "--epochs",
        "3",
        "--seed",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    model
}

#[test]
fn score_matches_library_and_self_match_is_zero() {
    let dir = TempDir::new().unwrap();
    let gallery = synth(&dir, "gallery.txt", 3, 1);
    let probes = synth(&dir, "probes.txt", 5, 2);
    let model = trained_model(&dir, &gallery);

    let text = ok(&[
        "score",
        "--model",
        p(&model),
        "--gallery",
        p(&gallery),
        "--probes",
        p(&probes),
    ]);
    let net = osface::load_net(&model).unwrap();
    let g = load_features(&gallery).unwrap();
    let pr = load_features(&probes).unwrap();
    let all: Vec<usize> = (0..g.len()).collect();
    let index = gallery_from_samples(&net, &g, &all).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), pr.len());
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let want = score_probe(&index, &net, pr.vector(i)).unwrap();
        assert_eq!(fields[0], i.to_string());
        assert_eq!(fields[2].parse::<f64>().unwrap(), want.score);
        assert_eq!(fields[3], want.nearest_identity);
        let known = g.find_identity(pr.identity_name(i)).is_some();
        assert_eq!(fields[1], if known { "known" } else { "unknown" });
    }

    // the gallery scored against itself
    let text = ok(&[
        "score",
        "--model",
        p(&model),
        "--gallery",
        p(&gallery),
        "--probes",
        p(&gallery),
    ]);
    for line in text.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2], "0", "{line}");
        assert_eq!(fields[1], "known");
    }
}

#[test]
fn empty_probe_file_gives_empty_output() {
    let dir = TempDir::new().unwrap();
    let gallery = synth(&dir, "gallery.txt", 2, 1);
    let model = dir.path().join("net.bin");
    save_net(&init_net(&[6, 4], 0).unwrap(), &model).unwrap();
    let probes = dir.path().join("empty.txt");
    fs::write(&probes, "\n").unwrap();
    let text = ok(&[
        "score",
        "--model",
        p(&model),
        "--gallery",
        p(&gallery),
        "--probes",
        p(&probes),
    ]);
    assert_eq!(text, "");
}

#[test]
fn score_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let gallery = synth(&dir, "gallery.txt", 2, 1);
    let model = dir.path().join("net.bin");
    save_net(&init_net(&[5, 4], 0).unwrap(), &model).unwrap();
    let out = osface(&[
        "score",
        "--model",
        p(&model),
        "--gallery",
        p(&gallery),
        "--probes",
        p(&gallery),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));
}

#[test]
fn roc_and_calibrate_read_score_files() {
    let dir = TempDir::new().unwrap();
    let scores = dir.path().join("scores.txt");
    fs::write(
        &scores,
        "0,known,0.1,a\n1,known,0.7,a\n2,unknown,0.5,b\n3,unknown,0.9,b\n",
    )
    .unwrap();
    let text = ok(&["roc", "--scores", p(&scores)]);
    assert_eq!(text.lines().next(), Some("# auc 0.75"));
    let eer: f64 = ok(&["calibrate", "--scores", p(&scores)])
        .trim()
        .parse()
        .unwrap();
    assert!(eer.is_finite());
    let t: f64 = ok(&[
        "calibrate",
        "--scores",
        p(&scores),
        "--policy",
        "fpr",
        "--alpha",
        "0",
    ])
    .trim()
    .parse()
    .unwrap();
    assert!(t < 0.5);
}

#[test]
fn missing_and_malformed_inputs_fail() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.txt");
    assert!(!osface(&["roc", "--scores", p(&missing)]).status.success());
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0,maybe,0.1,a\n").unwrap();
    assert!(!osface(&["roc", "--scores", p(&bad)]).status.success());
    assert!(!osface(&["run"]).status.success());
}

fn run_config(dir: &TempDir) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        master_seed: 3,
        repetitions: 2,
        output_dir: None,
        features: FeatureSource::Synthetic(SyntheticSpec {
            identities: 6,
            samples_per_id: 4,
            dim: 6,
            spread: 0.1,
            seed: 2,
        }),
        protocol: ProtocolConfig {
            points: vec![2.0, 4.0],
            ..ProtocolConfig::ep2()
        },
        pairing: PairingConfig::default(),
        network: NetworkConfig { hidden: vec![8, 4] },
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
    };
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn run_is_deterministic_and_writes_report() {
    let dir = TempDir::new().unwrap();
    let cfg = run_config(&dir);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let a = ok(&["run", "--config", p(&cfg), "--output-dir", p(&out_a)]);
    let b = ok(&["run", "--config", p(&cfg), "--output-dir", p(&out_b)]);
    assert_eq!(a, b);
    let rows: Vec<&str> = a.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2, "{a}");
    for f in ["report.json", "config.toml"] {
        assert!(out_a.join(f).exists(), "{f}");
    }
    // everything except the files that record the output directory
    for f in [
        "summary.txt",
        "roc/point0_trial1.txt",
        "scores/point1_trial0.txt",
    ] {
        assert_eq!(
            fs::read(out_a.join(f)).unwrap(),
            fs::read(out_b.join(f)).unwrap(),
            "{f}"
        );
    }
    let other = ok(&["run", "--config", p(&cfg), "--master-seed", "4"]);
    assert_ne!(a, other);
}

#[test]
fn run_with_feature_file_and_overrides() {
    let dir = TempDir::new().unwrap();
    let features = dir.path().join("f.txt");
    write_features(&generate_synthetic(20, 4, 6, 0.1, 5).unwrap(), &features).unwrap();
    let text = ok(&[
        "run",
        "--features",
        p(&features),
        "--protocol",
        "ep1",
        "--repetitions",
        "1",
        "--hidden",
        "8,4",
        "--epochs",
        "2",
        "--pairing",
        "P2",
    ]);
    assert!(text.contains("pairing P2"));
    for label in ["10%", "50%", "90%"] {
        assert!(text.contains(label), "{text}");
    }
}
