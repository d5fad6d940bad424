mod common;

use diffusion_influence::eval::{
    detection_rate, random_ranking, run_experiment, storage_report, ExperimentConfig,
    StorageFigures,
};
use diffusion_influence::influence::topk;
use diffusion_influence::store::{sizes, CacheWriter, Manifest};

use common::{Toy, ToySpec};

const KIB: f64 = 1024.0;
const MIB: f64 = 1024.0 * 1024.0;
const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

#[test]
fn random_ranker_matches_cluster_share() {
    // Unbalanced labels: 20% of 500 points carry label 0.
    let labels: Vec<Option<u32>> = (0..500).map(|i| Some((i % 5 != 0) as u32)).collect();
    let queries = 300;
    let k = 10;
    let mean = (0..queries)
        .map(|q| detection_rate(&random_ranking(500, 1000 + q), &labels, 0, k).unwrap())
        .sum::<f64>()
        / queries as f64;
    let p = 0.2;
    let se = (p * (1.0 - p) / (queries as f64 * k as f64)).sqrt();
    assert!((mean - p).abs() <= 3.0 * se, "{mean} vs {p} (se {se})");
}

#[test]
fn detection_falls_as_clusters_merge() {
    let dir = tempfile::tempdir().unwrap();
    let mut rates = Vec::new();
    for (i, separation) in [4.0f32, 1.0, 0.0].into_iter().enumerate() {
        let toy = Toy::build(
            &ToySpec {
                separation,
                ..ToySpec::default()
            },
            &dir.path().join(i.to_string()),
        );
        let labels: Vec<Option<u32>> = toy.data.iter().map(|p| p.label).collect();
        let probes = toy.probes(20, 31);
        let rate = probes
            .iter()
            .map(|p| {
                let scores = toy.cache.score(&toy.query(p), toy.scale).unwrap();
                let top: Vec<u64> = topk(scores, 10).iter().map(|r| r.sample_id).collect();
                detection_rate(&top, &labels, p.label.unwrap(), 10).unwrap()
            })
            .sum::<f64>()
            / probes.len() as f64;
        rates.push(rate);
    }
    assert!(rates[0] >= rates[1] && rates[1] >= rates[2], "{rates:?}");
}

#[test]
fn storage_report_matches_multi_shard_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let toy = Toy::build(&ToySpec::default(), &dir.path().join("one"));
    let records: Vec<_> = toy.cache.records().collect::<Result<_, _>>().unwrap();
    let out = dir.path().join("many");
    let rec = sizes::record(4, 64);
    let mut w = CacheWriter::create(&out, &toy.ctx, 4)
        .unwrap()
        .with_shard_limit(sizes::SHARD_HEADER + 64 * rec);
    w.append(&records).unwrap();
    let m = w.finish(Manifest::describe(&toy.setup(), &toy.ctx, toy.scale)).unwrap();
    let report = storage_report(&m, &out).unwrap();
    // 300 records at 64 per shard.
    assert_eq!(report.shards, 5);
    assert_eq!(report.shard_bytes_expected, 5 * sizes::SHARD_HEADER + 300 * rec);
    assert_eq!(report.shard_bytes_actual, report.shard_bytes_expected);
    assert_eq!(report.samples, 300);
}

#[test]
fn uncompressed_width_has_unit_ratio() {
    let f = StorageFigures::new(4096, 4096, 10);
    assert_eq!(f.ratio, 1.0);
    assert_eq!(f.compressed_per_sample, f.uncompressed_per_sample);
    // Padding adds less than one group.
    let f = StorageFigures::new(50_040, 50_040, 10);
    assert_eq!(f.ratio, 1.0);
    let f = StorageFigures::new(1000, 999, 3);
    assert!((f.ratio - 1.0).abs() < 1e-2);
}

#[test]
fn large_model_storage_figures() {
    let f = StorageFigures::new(2_009_000_000, 4096, 5);
    assert_eq!(f.compressed_per_sample as f64 / KIB, 80.0);
    assert_eq!(format!("{:.2}", f.uncompressed_per_sample as f64 / GIB), "37.42");

    let f = StorageFigures::new(2_009_000_000, 1 << 16, 10);
    assert_eq!(f.compressed_per_sample as f64 / MIB, 2.5);

    let f = StorageFigures::new(2_000_000_000, 4096, 10);
    assert_eq!(f.compressed_per_sample as f64 / KIB, 160.0);
    assert_eq!(format!("{:.0}", f.sign_payload as f64 / MIB), "238");
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        per_cluster: 30,
        heldout_per_cluster: 2,
        generated_per_cluster: 2,
        dim: 4,
        hidden: 8,
        timesteps: 20,
        epochs: 3,
        plan_steps: 3,
        dims: vec![64, 128],
        knn_dim: 128,
        ks: vec![1, 5],
        timing_reps: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn small_experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let a = run_experiment(&cfg, &dir.path().join("a")).unwrap();
    let b = run_experiment(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.text(), b.text());
    assert_eq!(a.summary_json(), b.summary_json());
    for name in ["cache-v64/shard-00000.bin", "cache-v128/manifest.txt", "index-v128.dmix"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(name)).unwrap(),
            std::fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    let s = &a.summary;
    assert_eq!(s.train_samples, 90);
    assert_eq!(s.queries, 12);
    for ranker in ["exact", "compressed-64", "compressed-128", "knn-128", "random"] {
        let r = s.detection(ranker, 5).unwrap();
        assert!((0.0..=1.0).contains(&r), "{ranker}");
    }
    assert!(s.storage.iter().all(|r| r.shard_bytes_actual == r.shard_bytes_expected));
    let json: serde_json::Value = serde_json::from_str(&a.summary_json()).unwrap();
    assert_eq!(json["config_hash"].as_str().unwrap(), s.config_hash);
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let cfg = small_config();
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(ExperimentConfig::parse("clusters = 3\nbogus = 1\n").is_err());
    let bad = ExperimentConfig {
        knn_dim: 999,
        ..small_config()
    };
    assert!(bad.validate().is_err());
}
