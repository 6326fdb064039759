use std::path::Path;
use std::process::Command;

use mgr::bench::{make_benchmark, BenchmarkSpec};
use mgr::cli::checkpoint::FORMAT_VERSION;
use mgr::cli::config::sha256_hex;
use mgr::cli::runner::{GridPoint, MeanStd};
use mgr::cli::{
    export_checkpoint, lambda_grid, load_config, metrics_csv, parse_config, run_experiment, select_lambda, Checkpoint,
    Manifest, RunStatus, Summary, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXPORT_SYNTHETIC, METRICS_HEADER, OUTPUT_DIR_ENV,
};
use mgr::metalearn::{train, MetaConfig, Method};
use proptest::prelude::*;

const TINY: &str = r#"
methods = ["base", "pcr", "mgr"]
seeds = [0]

[benchmark]
n = 60
n-test = 50

[meta]
epochs = 2
hidden = [8]
feature-dim = 4
batch-size = 32
pseudo-batch-size = 8
val-batch-size = 8
frechet-samples = 16
probe-samples = 100
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mgrlab"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_file_gives_defaults() {
    let cfg = parse_config("", "empty.toml").unwrap();
    assert_eq!(cfg.meta.lambda_kl, 0.01);
    assert_eq!(cfg.meta.eps_const, 0.01);
    assert_eq!(cfg.meta, MetaConfig::default());
    assert_eq!(cfg.benchmark, BenchmarkSpec::default());
    assert_eq!(cfg.methods, vec![Method::Base, Method::Gda, Method::Pcr, Method::Mgr]);
    assert_eq!(cfg.output.dir, Path::new("runs/default"));
}

#[test]
fn out_of_domain_lambda_cites_the_domain() {
    let err = parse_config("[meta]\nlambda = 1.5\n", "x.toml").unwrap_err();
    assert!(err.is_config());
    let msg = err.to_string();
    assert!(msg.contains("[0.1, 1.0]") && msg.contains("x.toml: "), "{msg}");
}

#[test]
fn unknown_keys_report_a_line_number() {
    let err = parse_config("seeds = [1]\n\n[meta]\nepochs = 3\nlearning-rate = 0.1\n", "cfg.toml").unwrap_err();
    assert!(err.to_string().contains("cfg.toml:5:"), "{err}");
    let err = parse_config("[meta]\nmethod = \"mgr\"\n", "cfg.toml").unwrap_err();
    assert!(err.to_string().contains("methods"), "{err}");
    let err = parse_config("methods = [\"mgr\", \"mgr\"]\n", "cfg.toml").unwrap_err();
    assert!(err.to_string().contains("twice"), "{err}");
    let err = parse_config("methods = [\"nope\"]\n", "cfg.toml").unwrap_err();
    assert!(err.to_string().contains("cfg.toml:1:"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            load_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n > 0);
}

#[test]
fn experiment_writes_reproducible_artifacts() {
    let cfg = parse_config(TINY, "tiny").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = run_experiment(&cfg, &a, false).unwrap();
    run_experiment(&cfg, &b, false).unwrap();
    assert_eq!(ma.status, RunStatus::Completed);
    assert_eq!(ma.runs.len(), 3);
    for m in ["base", "pcr", "mgr"] {
        let rel = format!("{m}/seed-0/metrics.csv");
        let (x, y) = (
            std::fs::read(a.join(&rel)).unwrap(),
            std::fs::read(b.join(&rel)).unwrap(),
        );
        assert_eq!(x, y, "{rel}");
        let text = String::from_utf8(x).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().count(), 3);
        for ck in ["best", "last"] {
            assert!(a.join(format!("{m}/seed-0/{ck}.ckpt")).exists());
        }
    }

    let manifest = Manifest::load(&a).unwrap();
    let stored = std::fs::read(a.join("config.json")).unwrap();
    assert_eq!(manifest.config_hash, sha256_hex(&stored));
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    for art in &manifest.artifacts {
        assert!(a.join(art).exists(), "{art}");
    }

    let summary: Summary = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.methods.len(), 3);
    for s in &summary.methods {
        assert_eq!(s.runs, 1);
        assert_eq!(s.test_acc.std, 0.0);
    }
}

#[test]
fn grid_search_shares_the_pcr_lambda_with_mgr() {
    let text = TINY
        .replace(r#"methods = ["base", "pcr", "mgr"]"#, r#"methods = ["pcr", "mgr"]"#)
        .replace("epochs = 2", "epochs = 1");
    let cfg = parse_config(&text, "tiny").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&cfg, dir.path(), true).unwrap();
    let pcr = m.lambdas.iter().find(|l| l.method == Method::Pcr).unwrap();
    let mgr = m.lambdas.iter().find(|l| l.method == Method::Mgr).unwrap();
    assert_eq!(pcr.lambda, mgr.lambda);
    assert_eq!(mgr.searched_with, Method::Pcr);
    let grid: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("grid.json")).unwrap()).unwrap();
    let searches = grid.as_array().unwrap();
    assert_eq!(searches.len(), 1);
    assert_eq!(searches[0]["points"].as_array().unwrap().len(), 10);
    // grid runs plus the mgr runs; the pcr runs at the selected lambda are reused
    assert_eq!(m.runs.len(), 10 + 1 + 1);
}

#[test]
fn lambda_grid_and_tie_break() {
    let g = lambda_grid();
    assert_eq!(g.len(), 10);
    assert_eq!((g[0], g[9]), (0.1, 1.0));
    for (i, v) in g.iter().enumerate() {
        assert_eq!(format!("{v:.1}"), format!("{:.1}", 0.1 * (i + 1) as f64));
    }
    let p = |lambda, val_acc| GridPoint {
        lambda,
        runs: 1,
        val_acc,
        test_acc: 0.0,
    };
    assert_eq!(select_lambda(&[p(0.5, 0.8), p(0.2, 0.8), p(0.9, 0.7)]), Some(0.2));
    assert_eq!(select_lambda(&[p(0.3, 0.6), p(0.4, 0.9)]), Some(0.4));
    assert_eq!(select_lambda(&[GridPoint { runs: 0, ..p(0.1, 1.0) }]), None);
}

#[test]
fn mean_std_uses_the_sample_deviation() {
    assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean, 2.5);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let spec = BenchmarkSpec {
        n: 40,
        n_test: 10,
        ..BenchmarkSpec::default()
    };
    let bench = make_benchmark(&spec, 2).unwrap();
    let cfg = MetaConfig {
        epochs: 1,
        hidden: vec![8],
        feature_dim: 4,
        probe_samples: 50,
        frechet_samples: 16,
        ..MetaConfig::default()
    };
    let out = train(&bench, &cfg, 2).unwrap();
    let ck = Checkpoint::new(&out.last, &bench.generator, &spec, &cfg, 2);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"MGRL");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), FORMAT_VERSION);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.model, ck.model);
    assert_eq!(back.finder, ck.finder);
    assert_eq!(back.generator, ck.generator);
    assert_eq!(
        (back.epoch, back.seed, &back.config, &back.benchmark),
        (1, 2, &cfg, &spec)
    );
    assert_eq!(back.to_bytes().unwrap(), bytes);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes;
    version[4] = 99;
    assert!(Checkpoint::from_bytes(&version).is_err());

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("1.csv"), dir.path().join("2.csv"));
    assert_eq!(
        export_checkpoint(&ck, &p1).unwrap(),
        bench.train.len() + EXPORT_SYNTHETIC
    );
    export_checkpoint(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let spec = BenchmarkSpec {
        n: 40,
        n_test: 10,
        ..BenchmarkSpec::default()
    };
    let bench = make_benchmark(&spec, 0).unwrap();
    let cfg = MetaConfig {
        epochs: 3,
        hidden: vec![4],
        feature_dim: 2,
        probe_samples: 10,
        frechet_samples: 8,
        ..MetaConfig::default()
    };
    let csv = metrics_csv(&train(&bench, &cfg, 0).unwrap().record);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 7));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let good = write(
        dir.path(),
        "good.toml",
        &TINY.replace(r#"methods = ["base", "pcr", "mgr"]"#, r#"methods = ["base"]"#),
    );
    let status = bin().arg("run").arg(&good).env(OUTPUT_DIR_ENV, &out).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    assert!(out.join("manifest.json").exists());

    let ck = out.join("base/seed-0/last.ckpt");
    let csv = dir.path().join("emb.csv");
    let o = bin().arg("export-embeddings").arg(&ck).arg(&csv).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows, 54 + EXPORT_SYNTHETIC);

    let bad = write(dir.path(), "bad.toml", "[meta]\nlambda = 3.0\n");
    let o = bin().arg("run").arg(&bad).env(OUTPUT_DIR_ENV, &out).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[0.1, 1.0]"));

    let o = bin().arg("run").arg(dir.path().join("missing.toml")).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));

    let junk = write(dir.path(), "junk.ckpt", "not a checkpoint");
    let o = bin().arg("export-embeddings").arg(&junk).arg(&csv).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_FAILURE));
}

#[test]
fn check_verb_passes() {
    let o = bin().arg("check").output().unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_hash_tracks_content(epochs in 1usize..500, lambda_kl in 0.0f64..1.0) {
        let text = format!("[meta]\nepochs = {epochs}\nlambda-kl = {lambda_kl:?}\n");
        let a = parse_config(&text, "a").unwrap();
        let b = parse_config(&text, "b").unwrap();
        prop_assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = parse_config(&format!("[meta]\nepochs = {}\nlambda-kl = {lambda_kl:?}\n", epochs + 1), "c").unwrap();
        prop_assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn in_domain_lambdas_parse(k in 1u32..=10) {
        let lambda = k as f64 / 10.0;
        let cfg = parse_config(&format!("[meta]\nlambda = {lambda:?}\n"), "l").unwrap();
        prop_assert_eq!(cfg.meta.lambda, lambda);
    }
}
