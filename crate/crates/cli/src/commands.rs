use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use advmm::checkpoint::Checkpoint;
use advmm::data::{
    domain_counts, generate_synthetic, load_dataset_dir, load_features, load_split,
    save_dataset_dir, write_features, FeatureHeader, Sample,
};
use advmm::eval::{pca_project, EmbeddingIndex, ProbeConfig};
use advmm::model::Model;
use advmm::trainer::{evaluate, initial_state, train_until, LogRecord};
use advmm::{Rng, Tensor, TrainError};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{Cli, Command, ExportFormat};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(config.seed);
    config.set_seed(seed);
    let out = cli.out;
    match cli.command {
        Command::Gen => gen(&config, &out),
        Command::Train {
            data,
            max_steps,
            mode,
            lr,
            batch_size,
            eval_every,
            lambda,
            resume,
            stop_at,
        } => {
            let t = &mut config.train;
            if let Some(v) = max_steps {
                t.max_steps = v;
            }
            if let Some(v) = mode {
                t.mode = v.into();
            }
            if let Some(v) = lr {
                t.lr = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = eval_every {
                t.eval_every = v;
            }
            if lambda.is_some() {
                t.lambda_override = lambda;
            }
            cmd_train(config, &data, &out, resume.as_deref(), stop_at)
        }
        Command::Eval { checkpoint, data } => cmd_eval(&config, &checkpoint, &data, &out),
        Command::Search {
            checkpoint,
            corpus,
            queries,
            k,
            to_domain,
        } => cmd_search(
            &config,
            &checkpoint,
            &corpus,
            &queries,
            k,
            to_domain.map(Into::into),
            &out,
        ),
        Command::Export {
            checkpoint,
            data,
            format,
            pca,
        } => cmd_export(&config, &checkpoint, &data, format, pca, &out),
    }
}

fn gen(config: &RunConfig, out: &Path) -> Result<()> {
    config.synth.validate()?;
    config.echo(out)?;
    let data = generate_synthetic(&config.synth, &mut Rng::new(config.seed))?;
    save_dataset_dir(out, &data)?;
    println!(
        "wrote {} (C = {}, image dim {}, word dim {}, L = {})",
        out.display(),
        data.header.n_categories,
        data.header.d_image_in,
        data.header.d_word,
        data.header.max_len
    );
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        let (images, texts) = domain_counts(split);
        let mut per_class = vec![0usize; data.header.n_categories];
        for s in split {
            for (c, &v) in s.labels.data().iter().enumerate() {
                if v == 1.0 {
                    per_class[c] += 1;
                }
            }
        }
        println!("{name:<5}: {images} image, {texts} text; positives per class {per_class:?}");
    }
    Ok(())
}

fn write_log(path: &Path, history: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn cmd_train(
    mut config: RunConfig,
    data_dir: &Path,
    out: &Path,
    from: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<()> {
    let data = load_dataset_dir(data_dir)?;
    config.adopt_header(&data.header);
    let ckpt_path = out.join("checkpoint.json");
    let log_path = out.join("train_log.jsonl");
    let state = match from {
        Some(path) => {
            let mut state = Checkpoint::load(path)?;
            state.train_config.checkpoint = Some(ckpt_path.clone());
            config.train = state.train_config.clone();
            config.model = state.model.config.clone();
            config.seed = config.train.seed;
            state
        }
        None => {
            config.train.checkpoint = Some(ckpt_path.clone());
            config.train.validate()?;
            config.model = config.train.mode.configure(&config.model);
            config.model.validate()?;
            initial_state(&config.train, &config.model, &data)?
        }
    };
    config.echo(out)?;
    let until = stop_at.unwrap_or(config.train.max_steps);
    let result = train_until(state, &data, until);
    match result {
        Ok(ckpt) => {
            ckpt.save(&ckpt_path)?;
            write_log(&log_path, &ckpt.history)?;
            if let Some(last) = ckpt.history.last() {
                println!("{}", serde_json::to_string(last).expect("record serializes"));
            }
            Ok(())
        }
        Err(TrainError::NonFinite {
            step,
            what,
            checkpoint,
        }) => {
            write_log(&log_path, &checkpoint.history)?;
            Err(CliError::Numerical(format!(
                "non-finite {what} at step {step}; last good checkpoint (step {}) kept at {}",
                checkpoint.step,
                ckpt_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_checkpoint_for(path: &Path, header: &FeatureHeader) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    let c = &ckpt.model.config;
    let checks = [
        ("d_image_in", c.d_image_in, header.d_image_in),
        ("d_word", c.d_word, header.d_word),
        ("max_len", c.max_len, header.max_len),
        ("n_categories", c.n_categories, header.n_categories),
    ];
    for (name, model, data) in checks {
        if model != data {
            return Err(CliError::Data(format!(
                "checkpoint has {name} = {model} but the data has {data}"
            )));
        }
    }
    Ok(ckpt.model)
}

fn probe_config(config: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        seed: config.seed,
        ..config.train.probe.clone()
    }
}

fn cmd_eval(config: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    config.echo(out)?;
    let (header, samples) = load_split(data, &config.eval.split)?;
    let model = load_checkpoint_for(checkpoint, &header)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = evaluate(&model, &refs, &probe_config(config), config.eval.metric)?;
    let json = out.join("metrics.json");
    fs::write(&json, report.to_json()).map_err(|e| CliError::io(&json, e))?;
    let table = out.join("metrics.txt");
    let text = report.to_table();
    fs::write(&table, &text).map_err(|e| CliError::io(&table, e))?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct SearchResult<'a> {
    query: &'a str,
    results: Vec<advmm::eval::Neighbor>,
}

fn manifest_blob(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn cmd_search(
    config: &RunConfig,
    checkpoint: &Path,
    corpus: &Path,
    queries: &Path,
    k: usize,
    to_domain: Option<advmm::data::Domain>,
    out: &Path,
) -> Result<()> {
    config.echo(out)?;
    let (header, corpus) = load_split(corpus, &config.eval.split)?;
    let model = load_checkpoint_for(checkpoint, &header)?;
    let (qheader, queries) = load_features(&manifest_blob(queries), queries)?;
    if qheader.d_image_in != header.d_image_in
        || qheader.d_word != header.d_word
        || qheader.max_len != header.max_len
    {
        return Err(CliError::Data(format!(
            "query features {qheader:?} do not match the corpus {header:?}"
        )));
    }
    let corpus_refs: Vec<&Sample> = corpus.iter().collect();
    let emb = model.embed(&corpus_refs)?;
    let index = EmbeddingIndex::from_embeddings(
        &emb,
        corpus.iter().map(|s| (s.id.clone(), s.domain, s.pair_id.clone())),
        config.eval.metric,
    )?;
    let query_refs: Vec<&Sample> = queries.iter().collect();
    let qemb = model.embed(&query_refs)?;
    let path = out.join("search.jsonl");
    let mut file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    for (i, q) in queries.iter().enumerate() {
        let results = index.knn_search(qemb.row(i), k, to_domain)?;
        println!("{}", q.id);
        for (rank, n) in results.iter().enumerate() {
            println!("  {:>3}  {:<24} {:.6}", rank + 1, n.id, n.distance);
        }
        let line = serde_json::to_string(&SearchResult {
            query: &q.id,
            results,
        })
        .expect("results serialize");
        writeln!(file, "{line}").map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn cmd_export(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    format: ExportFormat,
    pca: bool,
    out: &Path,
) -> Result<()> {
    config.echo(out)?;
    let (header, samples) = load_split(data, &config.eval.split)?;
    let model = load_checkpoint_for(checkpoint, &header)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let emb = model.embed(&refs)?;
    let d = model.config.embed_dim;
    match format {
        ExportFormat::Bin => {
            // Embeddings reuse the feature format with 1 × D rows for both domains.
            let eheader = FeatureHeader::new(header.n_categories, d, 1, d);
            let rows: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let shape: &[usize] = match s.domain {
                        advmm::data::Domain::Image => &[d],
                        advmm::data::Domain::Text => &[1, d],
                    };
                    Sample {
                        feature: Tensor::new(shape, emb.row(i).to_vec()).expect("D values"),
                        ..s.clone()
                    }
                })
                .collect();
            write_features(
                &out.join("embeddings.jsonl"),
                &out.join("embeddings.bin"),
                &eheader,
                &rows,
            )?;
        }
        ExportFormat::Csv => {
            let path = out.join("embeddings.csv");
            write_csv(&path, &samples, &emb, "e")?;
        }
    }
    if pca {
        let p = pca_project(&emb, 2)?;
        write_csv(&out.join("pca.csv"), &samples, &p.coords, "pc")?;
        let path = out.join("pca.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "explained_variance_ratio": p.explained,
            "axes": p.axes,
        }))
        .expect("projection serializes");
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        println!(
            "explained variance: {:.6} + {:.6}",
            p.explained[0], p.explained[1]
        );
    }
    println!("exported {} embeddings of dimension {d}", samples.len());
    Ok(())
}

fn write_csv(path: &Path, samples: &[Sample], values: &Tensor, prefix: &str) -> Result<()> {
    let (_, cols) = values.dims2().map_err(|e| CliError::Data(e.to_string()))?;
    let mut text = String::from("id,domain");
    for j in 0..cols {
        text.push_str(&format!(",{prefix}{j}"));
    }
    text.push('\n');
    for (i, s) in samples.iter().enumerate() {
        text.push_str(&format!("{},{}", s.id, s.domain));
        for v in values.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
