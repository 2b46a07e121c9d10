use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advmm::checkpoint::Checkpoint;
use advmm::data::{load_dataset_dir, load_features, load_split, save_dataset_dir, split_paths, write_features, Domain, Sample};
use advmm::eval::{EmbeddingIndex, IndexRow, Metric, MetricsReport, Neighbor};
use serde::Deserialize;
use tempfile::TempDir;

fn config_text(embed_dim: usize, n_categories: usize) -> String {
    format!(
        r#"seed = 5

[synth]
latent_dim = 4
n_categories = {n_categories}
n_pairs = 250
d_image = 6
d_word = 4
min_len = 2
max_len = 5

[model]
image_hidden = 8
embed_dim = {embed_dim}
text_widths = [1, 2]
text_filters = 4
head_hidden = 4
dropout = 0.1

[train]
max_steps = 6
batch_size = 16
eval_every = 2
lr = 1e-3
eval_samples = 100

[train.probe]
hidden = 4
steps = 20
"#
    )
}

fn advmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advmm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Self::with_dims(4, 3)
    }

    fn with_dims(embed_dim: usize, n_categories: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, config_text(embed_dim, n_categories)).unwrap();
        let data = dir.path().join("data");
        ok(advmm(&["gen", "--config", s(&config), "--out", s(&data)]));
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--config", s(&self.config), "--data", s(&self.data), "--out", s(out)];
        args.extend_from_slice(extra);
        advmm(&args)
    }

    fn trained(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        ok(self.train(&out, &[]));
        out.join("checkpoint.json")
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(advmm(&["gen", "--seed", "11", "--out", s(&a)]));
    ok(advmm(&["gen", "--seed", "11", "--out", s(&b)]));
    for name in ["train", "test"] {
        let (ma, ba) = split_paths(&a, name);
        let (mb, bb) = split_paths(&b, name);
        assert_eq!(read(&ma), read(&mb));
        assert!(fs::read(&ba).unwrap() == fs::read(&bb).unwrap());
    }
    let data = load_dataset_dir(&a).unwrap();
    assert_eq!(data.header.n_categories, 8);
    assert_eq!(data.train.len(), 2 * 3200);
    assert_eq!(data.test.len(), 2 * 800);
    assert!(dir.path().join("a/effective_config.toml").exists());
}

#[test]
fn gen_rejects_zero_categories_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, config_text(4, 0)).unwrap();
    let out = advmm(&["gen", "--config", s(&config), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_categories"));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train]\nmax_step = 3\n").unwrap();
    let out = advmm(&["gen", "--config", s(&config), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_one_step_writes_one_record_and_a_checkpoint() {
    let f = Fixture::new();
    let out = f.path("one");
    ok(f.train(&out, &["--max-steps", "1"]));
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let record: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(record["step"], 1);
    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.step, 1);
    assert!(out.join("effective_config.toml").exists());
}

#[test]
fn category_only_checkpoint_has_no_domain_tensors() {
    let f = Fixture::new();
    let out = f.path("cat");
    ok(f.train(&out, &["--mode", "category-only"]));
    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ckpt.model.params.domain.is_none());
    assert!(ckpt.model.params.category.is_some());
    let text = fs::read_to_string(out.join("checkpoint.json")).unwrap();
    assert!(!text.contains("\"domain."), "optimizer state mentions the domain head");
}

#[test]
fn training_is_reproducible_and_resume_is_bit_exact() {
    let f = Fixture::new();
    let out = f.path("run");
    let ckpt = out.join("checkpoint.json");
    let log = out.join("train_log.jsonl");

    ok(f.train(&out, &[]));
    let (full_ckpt, full_log) = (read(&ckpt), read(&log));
    ok(f.train(&out, &[]));
    assert_eq!(read(&ckpt), full_ckpt);
    assert_eq!(read(&log), full_log);

    ok(f.train(&out, &["--stop-at", "3"]));
    let stopped = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(stopped.step, 3);
    assert_eq!(stopped.history.len(), 1);
    let partial = f.path("partial.json");
    fs::copy(&ckpt, &partial).unwrap();
    ok(f.train(&out, &["--resume", s(&partial)]));
    assert_eq!(read(&ckpt), full_ckpt);
    assert_eq!(read(&log), full_log);
}

#[test]
fn missing_data_exits_with_data_code() {
    let f = Fixture::new();
    let out = advmm(&[
        "train", "--config", s(&f.config), "--data", s(&f.path("nowhere")), "--out", s(&f.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergent_training_exits_with_numerical_code() {
    let f = Fixture::new();
    let out = f.path("div");
    let res = f.train(&out, &["--lr", "1e200"]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ckpt.step < 6);
}

#[test]
fn checkpoint_data_mismatch_exits_with_data_code() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let other = Fixture::with_dims(4, 2);
    let out = advmm(&[
        "eval", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--data", s(&other.data), "--out", s(&f.path("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_categories"));
}

fn eval(f: &Fixture, ckpt: &Path, data: &Path, out: &Path) -> String {
    ok(advmm(&[
        "eval", "--config", s(&f.config), "--checkpoint", s(ckpt), "--data", s(data), "--out", s(out),
    ]))
}

#[test]
fn eval_is_deterministic() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let (a, b) = (f.path("ea"), f.path("eb"));
    let ta = eval(&f, &ckpt, &f.data, &a);
    let tb = eval(&f, &ckpt, &f.data, &b);
    assert_eq!(ta, tb);
    assert_eq!(read(&a.join("metrics.json")), read(&b.join("metrics.json")));
    assert_eq!(read(&a.join("metrics.txt")), read(&b.join("metrics.txt")));
}

#[test]
fn eval_without_pair_ids_reports_recall_unavailable() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let stripped = f.path("nopairs");
    save_dataset_dir(&stripped, &load_dataset_dir(&f.data).unwrap().without_pairs()).unwrap();
    let out = f.path("e");
    let table = eval(&f, &ckpt, &stripped, &out);
    assert!(table.contains("unavailable"), "{table}");
    let report: MetricsReport = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert!(report.recall.is_empty());
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[test]
fn eval_recall_matches_exhaustive_scan() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let out = f.path("e");
    eval(&f, &ckpt, &f.data, &out);
    let report: MetricsReport = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();

    let model = Checkpoint::load(&ckpt).unwrap().model;
    let (_, test) = load_split(&f.data, "test").unwrap();
    assert_eq!(test.len(), 100, "fixture holds 50 pairs");
    let refs: Vec<&Sample> = test.iter().collect();
    let emb = model.embed(&refs).unwrap();

    assert_eq!(report.recall.len(), 2);
    for r in &report.recall {
        let source = r.direction.source();
        let mut ranks = Vec::new();
        for (i, q) in test.iter().enumerate().filter(|(_, q)| q.domain == source) {
            let dq = emb.row(i);
            let target = test
                .iter()
                .position(|t| t.domain != source && t.pair_id == q.pair_id)
                .unwrap();
            let dt = cosine(dq, emb.row(target));
            let ahead = test
                .iter()
                .enumerate()
                .filter(|(j, t)| {
                    t.domain != source && *j != target && {
                        let d = cosine(dq, emb.row(*j));
                        d < dt || (d == dt && t.id < test[target].id)
                    }
                })
                .count();
            ranks.push(ahead + 1);
        }
        assert_eq!(r.n_queries, 50);
        for (&k, &got) in r.ks.iter().zip(&r.recall) {
            let want = ranks.iter().filter(|&&rank| rank <= k).count() as f64 / ranks.len() as f64;
            assert_eq!(got, want, "{:?} recall@{k}", r.direction);
        }
    }
}

#[derive(Deserialize)]
struct SearchLine {
    query: String,
    results: Vec<Neighbor>,
}

fn write_queries(f: &Fixture, picks: &[usize]) -> PathBuf {
    let (header, test) = load_split(&f.data, "test").unwrap();
    let queries: Vec<Sample> = picks.iter().map(|&i| test[i].clone()).collect();
    let manifest = f.path("queries.jsonl");
    write_features(&manifest, &f.path("queries.bin"), &header, &queries).unwrap();
    manifest
}

fn search(f: &Fixture, ckpt: &Path, queries: &Path, out: &Path, extra: &[&str]) -> Vec<SearchLine> {
    let mut args = vec![
        "search", "--config", s(&f.config), "--checkpoint", s(ckpt), "--corpus", s(&f.data), "--queries", s(queries),
        "--out", s(out),
    ];
    args.extend_from_slice(extra);
    ok(advmm(&args));
    fs::read_to_string(out.join("search.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn search_ranks_identical_item_first_and_matches_exported_knn() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let queries = write_queries(&f, &[0, 1, 57]);
    let lines = search(&f, &ckpt, &queries, &f.path("s"), &["--k", "100"]);
    assert_eq!(lines.len(), 3);

    let exported = f.path("x");
    ok(advmm(&[
        "export", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&exported),
    ]));
    let (_, rows) = load_features(&exported.join("embeddings.bin"), &exported.join("embeddings.jsonl")).unwrap();
    let index = EmbeddingIndex::new(
        rows.iter()
            .map(|r| IndexRow {
                id: r.id.clone(),
                domain: r.domain,
                pair_id: r.pair_id.clone(),
                embedding: r.feature.data().to_vec(),
            })
            .collect(),
        Metric::Cosine,
    )
    .unwrap();

    for line in &lines {
        assert_eq!(line.results.len(), 100);
        assert_eq!(line.results[0].id, line.query);
        assert!(line.results[0].distance.abs() < 1e-12);
        let q = &index.rows().iter().find(|r| r.id == line.query).unwrap().embedding;
        assert_eq!(index.knn_search(q, 100, None).unwrap(), line.results);
    }
}

#[test]
fn search_can_restrict_to_one_domain() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let queries = write_queries(&f, &[0, 1]);
    let lines = search(&f, &ckpt, &queries, &f.path("s"), &["--k", "50", "--to-domain", "text"]);
    let (_, test) = load_split(&f.data, "test").unwrap();
    for line in &lines {
        assert_eq!(line.results.len(), 50);
        for n in &line.results {
            let item = test.iter().find(|t| t.id == n.id).unwrap();
            assert_eq!(item.domain, Domain::Text);
        }
        assert!(line.results.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
    let too_many = advmm(&[
        "search", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--corpus", s(&f.data), "--queries",
        s(&queries), "--out", s(&f.path("s2")), "--k", "51", "--to-domain", "text",
    ]);
    assert_eq!(too_many.status.code(), Some(3));
}

#[test]
fn export_csv_and_binary_agree_with_the_model() {
    let f = Fixture::new();
    let ckpt = f.trained("m");
    let out = f.path("x");
    let base = ["export", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out)];
    ok(advmm(&base));
    let mut csv_args = base.to_vec();
    csv_args.extend(["--format", "csv"]);
    ok(advmm(&csv_args));

    let model = Checkpoint::load(&ckpt).unwrap().model;
    let (_, test) = load_split(&f.data, "test").unwrap();
    let refs: Vec<&Sample> = test.iter().collect();
    let emb = model.embed(&refs).unwrap();

    let csv = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), test.len() + 1);
    assert_eq!(lines[0], "id,domain,e0,e1,e2,e3");
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], test[i].id);
        let values: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(values, emb.row(i));
    }

    let (header, rows) = load_features(&out.join("embeddings.bin"), &out.join("embeddings.jsonl")).unwrap();
    assert_eq!(header.d_image_in, 4);
    assert_eq!(rows.len(), test.len());
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.id, test[i].id);
        assert_eq!(r.labels, test[i].labels);
        assert_eq!(r.pair_id, test[i].pair_id);
        assert_eq!(r.feature.data(), emb.row(i));
    }
}

#[test]
fn pca_of_two_dimensional_embeddings_keeps_all_variance() {
    let f = Fixture::with_dims(2, 3);
    let ckpt = f.trained("m");
    let out = f.path("x");
    ok(advmm(&[
        "export", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out),
        "--format", "csv", "--pca",
    ]));
    let meta: serde_json::Value = serde_json::from_str(&read(&out.join("pca.json"))).unwrap();
    let ratios: Vec<f64> = meta["explained_variance_ratio"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(ratios.len(), 2);
    assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-10, "{ratios:?}");
    let rows = fs::read_to_string(out.join("pca.csv")).unwrap().lines().count();
    assert_eq!(rows, 101);
}
