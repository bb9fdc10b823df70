//! One function per subcommand. Reports go to stdout, logs to stderr.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ptmtok_core::datasetops::{cluster_split, default_class_names, synth_longtail, Split, SynthConfig};
use ptmtok_core::geometry::write_feature_dump;
use ptmtok_core::ingest::{parse_backbone, read_dataset, read_proteins, write_dataset};
use ptmtok_core::metrics::evaluate_named;
use ptmtok_core::model::{
    featurize_all, featurize_proteins, train_codebook as stage1, train_predictor as stage2, write_predictions,
    write_stage1_log, write_stage2_log, Model, ModelConfig, PredictionRow,
};
use ptmtok_core::pgraph::checksum;
use ptmtok_core::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;

fn log(cmd: &str, cfg: &RunConfig) {
    eprintln!("ptmtok {cmd} seed={} config_hash={}", cfg.train.seed, cfg.hash());
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn class_names(k: usize) -> Vec<String> {
    let d = default_class_names();
    if d.len() == k {
        d
    } else {
        (0..k).map(|c| format!("class {c}")).collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

pub fn featurize(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    require(input)?;
    log("featurize", cfg);
    let proteins = read_proteins(input)?;
    let graphs = featurize_proteins(&proteins, &cfg.graph, &cfg.features, cfg.threads())?;
    let cols = graphs.first().map(|g| g.x.cols()).unwrap_or(0);
    let mut data = Vec::new();
    let mut index = Vec::new();
    let mut offset = 0;
    for g in &graphs {
        index.push(json!({
            "id": g.id,
            "offset": offset,
            "residues": g.n,
            "pairs": g.recv.len(),
            "node_checksum": checksum(g.x.data()),
            "edge_checksum": checksum(g.e.data()),
        }));
        data.extend_from_slice(g.x.data());
        offset += g.n;
    }
    let mut w = BufWriter::new(File::create(output)?);
    write_feature_dump(&mut w, offset, cols, &data)?;
    w.flush()?;
    let meta = json!({
        "rows": offset,
        "cols": cols,
        "config_hash": cfg.hash(),
        "proteins": index,
    });
    write_text(
        &sidecar(output, ".json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    println!("{} proteins, {offset} residues, {cols} columns", graphs.len());
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratios: cannot parse {s:?}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("ratios: expected three values, found {s:?}")))
}

pub fn split(
    cfg: &RunConfig,
    input: &Path,
    manifest_path: &Path,
    threshold: f64,
    ratios: &str,
    write_splits: Option<&Path>,
) -> Result<()> {
    require(input)?;
    log("split", cfg);
    let ratios = parse_ratios(ratios)?;
    let proteins = read_proteins(input)?;
    let items: Vec<(String, String)> = proteins.iter().map(|p| (p.id.clone(), p.sequence.clone())).collect();
    let manifest = cluster_split(&items, threshold, ratios, cfg.train.seed)?;
    write_text(manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    if let Some(dir) = write_splits {
        std::fs::create_dir_all(dir)?;
        let mut outs = BTreeMap::new();
        for s in Split::ALL {
            outs.insert(
                s,
                BufWriter::new(File::create(dir.join(format!("{}.jsonl", s.name())))?),
            );
        }
        // copy records verbatim so the split files stay byte-identical to the input
        for line in BufReader::new(File::open(input)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)?;
            let id = v.get("id").and_then(|x| x.as_str()).unwrap_or_default();
            let s = manifest
                .split_of(id)
                .ok_or_else(|| Error::Split(format!("protein {id} missing from manifest")))?;
            writeln!(outs.get_mut(&s).expect("all splits opened"), "{line}")?;
        }
        for (_, mut w) in outs {
            w.flush()?;
        }
    }
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{} {}", s.name(), manifest.ids(s).len()))
        .collect();
    println!("{} clusters; {}", manifest.num_clusters, counts.join(", "));
    Ok(())
}

pub fn train_codebook(cfg: &RunConfig, train: &Path, out_dir: &Path) -> Result<()> {
    require(train)?;
    log("train-codebook", cfg);
    let data = read_dataset(train, cfg.num_classes)?;
    let graphs = featurize_all(&data, &cfg.graph, &cfg.features, cfg.threads())?;
    let mcfg = ModelConfig::new(
        &cfg.features,
        cfg.d_h,
        cfg.d,
        cfg.num_classes,
        cfg.sub_size,
        cfg.unconstrained,
    );
    let out = stage1(&graphs, &mcfg, &cfg.train)?;
    let model = Model {
        config: mcfg,
        graph: cfg.graph.clone(),
        features: cfg.features.clone(),
        vq_mode: cfg.vq.mode,
        tau_u: cfg.vq.tau_u,
        class_names: class_names(cfg.num_classes),
        encoder: out.encoder,
        decoder: out.decoder,
        codebook: out.codebook,
        predictor: None,
    };
    model.save(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("stage1_log.csv"))?);
    write_stage1_log(&mut w, &out.log)?;
    write_text(&out_dir.join("run.cfg"), &cfg.render())?;
    if let Some(last) = out.log.last() {
        println!(
            "stage 1: {} steps, final L_recon {:.6}, L_u {:.6}, L_total {:.6}",
            out.log.len(),
            last.l_recon,
            last.l_u,
            last.l_total
        );
    }
    Ok(())
}

pub fn train_predictor(cfg: &RunConfig, train: &Path, stage1_dir: &Path, out_dir: &Path) -> Result<()> {
    require(train)?;
    require(stage1_dir)?;
    log("train-predictor", cfg);
    let mut model = Model::load(stage1_dir)?;
    let data = read_dataset(train, model.config.num_classes)?;
    let graphs = featurize_all(&data, &model.graph, &model.features, cfg.threads())?;
    let out = stage2(&graphs, &model.config, &model.encoder, &model.codebook, &cfg.train)?;
    model.encoder = out.encoder;
    model.codebook = out.codebook;
    model.predictor = Some(out.predictor);
    model.save(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("stage2_log.csv"))?);
    write_stage2_log(&mut w, &out.log)?;
    write_text(&out_dir.join("run.cfg"), &cfg.render())?;
    if let Some(last) = out.log.last() {
        println!("stage 2: {} steps, final L_ce {:.6}", out.log.len(), last.l_ce);
    }
    Ok(())
}

fn read_prediction_rows(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: Some(k + 1),
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

pub fn evaluate(cfg: &RunConfig, test: &Path, source: &Path, report_path: &Path) -> Result<()> {
    require(test)?;
    require(source)?;
    log("evaluate", cfg);
    let report = if source.is_dir() {
        let model = Model::load(source)?;
        let data = read_dataset(test, model.config.num_classes)?;
        let graphs = featurize_all(&data, &model.graph, &model.features, cfg.threads())?;
        model.evaluate(&graphs)?
    } else {
        let rows = read_prediction_rows(source)?;
        let k = rows
            .first()
            .map(|r| r.probabilities.len())
            .ok_or_else(|| Error::Dataset("predictions file is empty".into()))?;
        let data = read_dataset(test, k)?;
        let by_key: BTreeMap<(&str, usize), &PredictionRow> =
            rows.iter().map(|r| ((r.id.as_str(), r.position), r)).collect();
        let (mut y_true, mut y_pred, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for a in &data {
            for (i, &l) in a.labels.iter().enumerate() {
                let r = by_key
                    .get(&(a.protein.id.as_str(), i))
                    .ok_or_else(|| Error::Dataset(format!("no prediction for {} residue {i}", a.protein.id)))?;
                if r.probabilities.len() != k {
                    return Err(Error::Shape(format!(
                        "prediction for {} residue {i} has {} probabilities, expected {k}",
                        a.protein.id,
                        r.probabilities.len()
                    )));
                }
                y_true.push(l);
                y_pred.push(r.predicted_class);
                scores.extend_from_slice(&r.probabilities);
            }
        }
        evaluate_named(&y_true, &y_pred, &scores, k, &class_names(k))?
    };
    write_text(report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn is_pdb(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pdb" | "ent"))
}

pub fn predict(cfg: &RunConfig, input: &Path, model_dir: &Path, output: &Path) -> Result<()> {
    require(input)?;
    require(model_dir)?;
    log("predict", cfg);
    let model = Model::load(model_dir)?;
    let proteins = if is_pdb(input) {
        let chain = (!cfg.chain.is_empty()).then_some(cfg.chain.as_str());
        let parsed = parse_backbone(&std::fs::read_to_string(input)?, chain)?;
        if parsed.incomplete_residues > 0 {
            eprintln!(
                "skipped {} residues with missing backbone atoms",
                parsed.incomplete_residues
            );
        }
        vec![parsed.protein]
    } else {
        read_proteins(input)?
    };
    let graphs = featurize_proteins(&proteins, &model.graph, &model.features, cfg.threads())?;
    let mut rows = Vec::new();
    for g in &graphs {
        rows.extend(model.predict_rows(g)?);
    }
    let mut w = BufWriter::new(File::create(output)?);
    write_predictions(&rows, &mut w)?;
    w.flush()?;
    println!("{} proteins, {} residues", graphs.len(), rows.len());
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn export_embeddings(cfg: &RunConfig, model_dir: &Path, output: &Path) -> Result<()> {
    require(model_dir)?;
    log("export-embeddings", cfg);
    let model = Model::load(model_dir)?;
    let cb = &model.codebook;
    let mut w = BufWriter::new(File::create(output)?);
    let dims: Vec<String> = (0..cb.dim()).map(|k| format!("e{k}")).collect();
    writeln!(w, "token,token_class,class_name,{}", dims.join(","))?;
    for j in 0..cb.size() {
        let c = cb.class_of(j);
        // unconstrained codebooks have a single block that stands for no class
        let name = if cb.num_classes() == model.class_names.len() {
            model.class_names[c].as_str()
        } else {
            "shared"
        };
        let vals: Vec<String> = cb.token(j).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{j},{c},{},{}", csv_field(name), vals.join(","))?;
    }
    w.flush()?;
    println!("{} tokens × {} dims", cb.size(), cb.dim());
    Ok(())
}

pub fn synth(
    cfg: &RunConfig,
    output: &Path,
    n: usize,
    weights: Option<&str>,
    min_len: usize,
    max_len: usize,
) -> Result<()> {
    log("synth", cfg);
    let mut sc = SynthConfig {
        n_proteins: n,
        min_len,
        max_len,
        ..SynthConfig::default()
    };
    if let Some(ws) = weights {
        sc.class_weights = ws
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("weights: cannot parse {ws:?}")))?;
    }
    let (data, rule) = synth_longtail(cfg.train.seed, &sc)?;
    write_dataset(&data, output)?;
    write_text(
        &sidecar(output, ".rule.json"),
        &(serde_json::to_string_pretty(&rule)? + "\n"),
    )?;
    let mut counts = vec![0u64; rule.num_classes];
    for a in &data {
        for &l in &a.labels {
            counts[l] += 1;
        }
    }
    println!("{}", json!({ "proteins": data.len(), "class_counts": counts }));
    Ok(())
}
