use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use kcm_retrieval::cbirnet::{CbirModel, CbirNet, CbirNetConfig, FusionConfig};
use kcm_retrieval::ccnet::{kcm_overlay_rgb, CcNetConfig};
use kcm_retrieval::checkpoint::{self, encode_cbir, encode_ccnet, write_atomic, Checkpoint};
use kcm_retrieval::composition_data::{generate_split, load_kupcp, write_dataset, CompositionSample, Split};
use kcm_retrieval::evaluation::{build_anchor_groups, evaluate_model, evaluate_vectors};
use kcm_retrieval::preprocessing::{
    load_network_input, save_png, save_rgb_png, write_pgm, CropRect, GrayscaleImage, INPUT_SIZE,
};
use kcm_retrieval::retrieval::{self, contact_sheet, QueryResult, RetrievalIndex, CONTACT_TILE};
use kcm_retrieval::shot_miner::{
    build_triplets, central_frame_database, filter_shots, group_shots, load_annotations, read_groups_jsonl,
    split_by_film, write_annotations_csv, write_groups_jsonl, DiskFrames, FrameRef, FrameSource, ShotGroup,
};
use kcm_retrieval::synthetic_film::{FilmCorpus, FilmCorpusConfig};
use kcm_retrieval::trainer::{evaluate_composition, train_cbirnet_from, train_ccnet};
use kcm_retrieval::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{self, existing_dir, existing_file, require};
use crate::Common;

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let origin = path.display().to_string();
    std::fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema { location: format!("{origin}:{}", i + 1), message: e.to_string() })
        })
        .collect()
}

fn json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config values serialize")
}

fn frame_count(groups: &[ShotGroup]) -> usize {
    groups.iter().map(|g| g.frames.len()).sum()
}

fn film_count(groups: &[ShotGroup]) -> usize {
    groups.iter().map(|g| g.film_id.as_str()).collect::<BTreeSet<_>>().len()
}

pub fn prepare(common: &Common, annotations: Option<PathBuf>, frames: Option<PathBuf>, test_fraction: Option<f64>) -> Result<()> {
    let mut cfg: config::PrepareConfig = config::load(common.config.as_deref())?;
    cfg.annotations = annotations.or(cfg.annotations);
    cfg.frames = frames.or(cfg.frames);
    cfg.test_fraction = test_fraction.unwrap_or(cfg.test_fraction);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let ann = require(&cfg.annotations, "annotations")?.clone();
    let root = require(&cfg.frames, "frames")?.clone();
    existing_file(&ann, "annotations")?;
    existing_dir(&root, "frames")?;
    let out = out_dir(common)?;

    let records = load_annotations(&ann)?;
    let usable = filter_shots(&records);
    if usable.is_empty() {
        return Err(Error::Data(format!("no usable shots in {} ({} records, all I/NA)", ann.display(), records.len())));
    }
    let mut groups = group_shots(&usable, &root);
    let mut missing = Vec::new();
    if cfg.verify_frames {
        for g in &mut groups {
            let mut kept = Vec::with_capacity(g.frames.len());
            for f in g.frames.drain(..) {
                match DiskFrames.load(&f) {
                    Ok(_) => kept.push(f),
                    Err(e @ Error::Bounds { .. }) => {
                        return Err(Error::Data(format!("overscan crop of {} does not fit: {e}", f.source_id())))
                    }
                    Err(e) => {
                        log::warn!("dropping {}: {e}", f.source_id());
                        missing.push(f.source_id());
                    }
                }
            }
            g.frames = kept;
        }
        groups.retain(|g| !g.frames.is_empty());
    }
    let (train, test) = split_by_film(&groups, cfg.test_fraction, cfg.seed)?;
    let train_triplets = build_triplets(&train, cfg.seed)?;
    let test_triplets = if test.len() >= 2 { Some(build_triplets(&test, cfg.seed)?) } else { None };
    let central = central_frame_database(&groups);

    write_atomic(&out.join("train_triplets.jsonl"), train_triplets.to_jsonl()?.as_bytes())?;
    if let Some(t) = &test_triplets {
        write_atomic(&out.join("test_triplets.jsonl"), t.to_jsonl()?.as_bytes())?;
    }
    write_atomic(&out.join("train_shots.jsonl"), write_groups_jsonl(&train)?.as_bytes())?;
    write_atomic(&out.join("test_shots.jsonl"), write_groups_jsonl(&test)?.as_bytes())?;
    write_jsonl(&out.join("central_frames.jsonl"), &central)?;
    let summary = serde_json::json!({
        "records": records.len(),
        "discarded_shots": records.len() - usable.len(),
        "films": film_count(&groups),
        "shots": groups.len(),
        "frames": frame_count(&groups),
        "missing_frames": missing,
        "train": { "films": film_count(&train), "shots": train.len(), "frames": frame_count(&train), "triplets": train_triplets.triplets.len() },
        "test": { "films": film_count(&test), "shots": test.len(), "frames": frame_count(&test),
                  "triplets": test_triplets.as_ref().map_or(0, |t| t.triplets.len()) },
        "central_frames": central.len(),
        "config": json(&cfg),
    });
    write_json(&out.join("summary.json"), &summary)?;
    log::info!("{} shots from {} films, {} frames", groups.len(), film_count(&groups), frame_count(&groups));
    Ok(())
}

pub fn train_composition(
    common: &Common,
    data: Option<PathBuf>,
    synthetic_per_class: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg: config::TrainCompositionConfig = config::load(common.config.as_deref())?;
    cfg.data = data.or(cfg.data);
    cfg.synthetic_per_class = synthetic_per_class.or(cfg.synthetic_per_class);
    if let Some(e) = epochs {
        cfg.hyperparams.epochs = e;
    }
    if let Some(s) = common.seed {
        cfg.hyperparams.seed = s;
    }
    cfg.hyperparams.validate()?;
    let (train, test): (Vec<CompositionSample>, Vec<CompositionSample>) = match (&cfg.data, cfg.synthetic_per_class) {
        (Some(root), None) => {
            existing_dir(root, "data")?;
            let report = load_kupcp(root)?;
            report.samples.into_iter().partition(|s| s.split == Split::Train)
        }
        (None, Some(n)) => {
            let seed = cfg.hyperparams.seed;
            let test = if cfg.synthetic_test_per_class > 0 {
                generate_split(cfg.synthetic_test_per_class, seed.wrapping_add(1), Split::Test)?
            } else {
                Vec::new()
            };
            (generate_split(n, seed, Split::Train)?, test)
        }
        _ => return Err(Error::Config("set exactly one of `data` or `synthetic_per_class`".into())),
    };
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let out = out_dir(common)?;
    let (net, mut report) = train_ccnet(CcNetConfig::for_variant(cfg.variant), &train, &cfg.hyperparams)?;
    let ckpt = out.join("ccnet.ckpt");
    report.checkpoint = Some(ckpt.display().to_string());
    report.config = json(&cfg);
    write_atomic(&ckpt, &encode_ccnet(&net, &json(&cfg))?)?;
    if !test.is_empty() {
        let metrics = evaluate_composition(&net, &test)?;
        log::info!("held-out accuracy {:.4}, macro F1 {:.4}", metrics.accuracy, metrics.macro_f1);
        write_json(&out.join("metrics.json"), &serde_json::json!({ "metrics": metrics, "config": json(&cfg) }))?;
    }
    write_json(&out.join("train_report.json"), &report)
}

pub fn train_retrieval(
    common: &Common,
    triplets: Option<PathBuf>,
    ccnet: Option<PathBuf>,
    l_kcm: Option<f64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg: config::TrainRetrievalConfig = config::load(common.config.as_deref())?;
    cfg.triplets = triplets.or(cfg.triplets);
    cfg.ccnet = ccnet.or(cfg.ccnet);
    if let Some(l) = l_kcm {
        cfg.hyperparams.l_kcm = l;
    }
    if let Some(e) = epochs {
        cfg.hyperparams.epochs = e;
    }
    if let Some(s) = common.seed {
        cfg.hyperparams.seed = s;
    }
    cfg.hyperparams.validate()?;
    let triplets = require(&cfg.triplets, "triplets")?;
    let cc_path = require(&cfg.ccnet, "ccnet")?;
    existing_file(triplets, "triplets")?;
    existing_file(cc_path, "ccnet")?;
    if let Some(b) = &cfg.backbone_checkpoint {
        existing_file(b, "backbone_checkpoint")?;
    }
    let manifest = kcm_retrieval::shot_miner::TripletManifest::read(triplets)?;
    let cc = checkpoint::load_ccnet(cc_path)?;
    let net_cfg = CbirNetConfig::for_variant(
        cc.config.backbone.variant,
        cfg.dim,
        FusionConfig::new(cfg.hyperparams.l_kcm)?,
    );
    let mut net = CbirNet::new(net_cfg)?;
    net.init_xavier(cfg.hyperparams.seed);
    let imported = match &cfg.backbone_checkpoint {
        Some(path) => Checkpoint::read(path)?.0.import_backbone(&mut net.backbone),
        None if cfg.hyperparams.import_backbone => Checkpoint::read(cc_path)?.0.import_backbone(&mut net.backbone),
        None => 0,
    };
    log::info!("imported {imported} backbone tensors");
    let out = out_dir(common)?;
    let (net, mut report) = train_cbirnet_from(net, &manifest, &DiskFrames, &cc, &cfg.hyperparams)?;
    let ckpt = out.join("cbirnet.ckpt");
    report.checkpoint = Some(ckpt.display().to_string());
    report.config = json(&cfg);
    write_atomic(&ckpt, &encode_cbir(&cc, &net, &json(&cfg))?)?;
    write_json(&out.join("train_report.json"), &report)
}

pub fn build_index(common: &Common, checkpoint: Option<PathBuf>, frames: Option<PathBuf>) -> Result<()> {
    let mut cfg: config::BuildIndexConfig = config::load(common.config.as_deref())?;
    cfg.checkpoint = checkpoint.or(cfg.checkpoint);
    cfg.frames = frames.or(cfg.frames);
    let ck = require(&cfg.checkpoint, "checkpoint")?;
    let frames_path = require(&cfg.frames, "frames")?;
    existing_file(ck, "checkpoint")?;
    existing_file(frames_path, "frames")?;
    let model = checkpoint::load_cbir_model(ck)?;
    let frames: Vec<FrameRef> = read_jsonl(frames_path)?;
    let out = out_dir(common)?;
    let report = retrieval::build_index(&frames, &DiskFrames, &model)?;
    report.index.save(&out.join("index.kcmi"))?;
    let failures: Vec<_> = report.failures.iter().map(|(id, e)| serde_json::json!({ "source_id": id, "error": e })).collect();
    write_json(
        &out.join("build_report.json"),
        &serde_json::json!({
            "entries": report.index.len(),
            "failures": failures,
            "fingerprint": report.index.fingerprint(),
            "config": json(&cfg),
        }),
    )
}

pub fn query(
    common: &Common,
    index: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    image: Option<PathBuf>,
    k: Option<usize>,
    crop: Option<CropRect>,
) -> Result<()> {
    let mut cfg: config::QueryConfig = config::load(common.config.as_deref())?;
    cfg.index = index.or(cfg.index);
    cfg.checkpoint = checkpoint.or(cfg.checkpoint);
    cfg.image = image.or(cfg.image);
    cfg.k = k.unwrap_or(cfg.k);
    cfg.crop = crop.or(cfg.crop);
    let idx_path = require(&cfg.index, "index")?;
    let ck = require(&cfg.checkpoint, "checkpoint")?;
    let img_path = require(&cfg.image, "image")?;
    for (p, key) in [(idx_path, "index"), (ck, "checkpoint"), (img_path, "image")] {
        existing_file(p, key)?;
    }
    let idx = RetrievalIndex::load(idx_path)?;
    let model: CbirModel = checkpoint::load_cbir_model(ck)?;
    let query_img = load_network_input(img_path, img_path.display().to_string(), cfg.crop)?;
    let hits = idx.query(&model, &query_img, cfg.k)?;
    let out = out_dir(common)?;

    let by_id: HashMap<&str, &retrieval::IndexEntry> = idx.entries().iter().map(|e| (e.meta.source_id.as_str(), e)).collect();
    let tiles: Vec<GrayscaleImage> = hits
        .iter()
        .map(|h| {
            by_id[h.source_id.as_str()]
                .meta
                .frame()
                .and_then(|f| DiskFrames.load(&f).ok())
                .unwrap_or_else(|| GrayscaleImage::filled(INPUT_SIZE, INPUT_SIZE, 0.5, "").expect("valid size"))
        })
        .collect();
    save_png(&contact_sheet(&query_img, &tiles, CONTACT_TILE)?, &out.join("contact_sheet.png"))?;
    let result = QueryResult { query: img_path.display().to_string(), k: cfg.k, fingerprint: idx.fingerprint().clone(), hits };
    write_json(&out.join("results.json"), &serde_json::json!({ "result": result, "config": json(&cfg) }))
}

pub fn evaluate(
    common: &Common,
    shots: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    margin: Option<f64>,
) -> Result<()> {
    let mut cfg: config::EvaluateConfig = config::load(common.config.as_deref())?;
    cfg.shots = shots.or(cfg.shots);
    cfg.checkpoint = checkpoint.or(cfg.checkpoint);
    cfg.index = index.or(cfg.index);
    cfg.margin = margin.unwrap_or(cfg.margin);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let shots_path = require(&cfg.shots, "shots")?;
    existing_file(shots_path, "shots")?;
    if !(0.0..=1.0).contains(&cfg.margin) {
        return Err(Error::Config(format!("margin must be in [0,1], got {}", cfg.margin)));
    }
    let groups = read_groups_jsonl(shots_path)?;
    let mut report = match (&cfg.checkpoint, &cfg.index) {
        (Some(ck), None) => {
            existing_file(ck, "checkpoint")?;
            let model = checkpoint::load_cbir_model(ck)?;
            evaluate_model(&model, &groups, &DiskFrames, cfg.seed, cfg.margin)?
        }
        (None, Some(ip)) => {
            existing_file(ip, "index")?;
            let idx = RetrievalIndex::load(ip)?;
            let vectors: HashMap<String, Vec<f32>> =
                idx.entries().iter().map(|e| (e.meta.source_id.clone(), e.vector.clone())).collect();
            let anchors = build_anchor_groups(&groups, cfg.seed)?;
            let mut r = evaluate_vectors(&anchors, &vectors, cfg.seed, cfg.margin)?;
            r.config = serde_json::json!({ "fingerprint": idx.fingerprint() });
            r
        }
        _ => return Err(Error::Config("set exactly one of `checkpoint` or `index`".into())),
    };
    report.config = serde_json::json!({ "embedder": report.config, "run": json(&cfg) });
    let out = out_dir(common)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&out.join("anchors.csv"), &csv)?;
    log::info!(
        "score {:.4}, avg_pos {:.4}, avg_neg {:.4}, loss {:.4}",
        report.score,
        report.avg_pos_similarity,
        report.avg_neg_similarity,
        report.loss
    );
    write_json(&out.join("eval_report.json"), &report)
}

pub fn export_kcm(common: &Common, ccnet: Option<PathBuf>, image: Option<PathBuf>, crop: Option<CropRect>) -> Result<()> {
    let mut cfg: config::ExportKcmConfig = config::load(common.config.as_deref())?;
    cfg.ccnet = ccnet.or(cfg.ccnet);
    cfg.image = image.or(cfg.image);
    cfg.crop = crop.or(cfg.crop);
    let cc_path = require(&cfg.ccnet, "ccnet")?;
    let img_path = require(&cfg.image, "image")?;
    existing_file(cc_path, "ccnet")?;
    existing_file(img_path, "image")?;
    let net = checkpoint::load_ccnet(cc_path)?;
    let img = load_network_input(img_path, img_path.display().to_string(), cfg.crop)?;
    let output = net.forward(&img)?;
    let kcm = &output.kcm;
    let out = out_dir(common)?;
    write_pgm(kcm.width, kcm.height, &kcm.to_bytes(), &out.join("kcm.pgm"))?;
    let raw: Vec<u8> = kcm.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_atomic(&out.join("kcm.f32"), &raw)?;
    save_rgb_png(img.width(), img.height(), kcm_overlay_rgb(&img, kcm), &out.join("overlay.png"))?;
    let predicted = output.scores.predicted_class().map(|c| c.name());
    write_json(
        &out.join("kcm.json"),
        &serde_json::json!({
            "height": kcm.height,
            "width": kcm.width,
            "dtype": "f32-le",
            "source": kcm.source,
            "predicted_class": predicted,
            "logits": output.scores.logits,
            "weights": output.scores.weights,
            "config": json(&cfg),
        }),
    )
}

pub fn synth_films(common: &Common) -> Result<()> {
    let mut cfg: FilmCorpusConfig = config::load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let corpus = FilmCorpus::generate(cfg.clone())?;
    let out = out_dir(common)?;
    let n = corpus.write_frames(&out.join("frames"))?;
    let mut csv = Vec::new();
    write_annotations_csv(&corpus.records, &mut csv)?;
    write_atomic(&out.join("annotations.csv"), &csv)?;
    write_json(
        &out.join("corpus.json"),
        &serde_json::json!({ "shots": corpus.records.len(), "frames_written": n, "config": json(&cfg) }),
    )
}

pub fn synth_composition(common: &Common, per_class: Option<usize>) -> Result<()> {
    let mut cfg: config::SynthCompositionConfig = config::load(common.config.as_deref())?;
    cfg.per_class = per_class.unwrap_or(cfg.per_class);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let mut samples = generate_split(cfg.per_class, cfg.seed, Split::Train)?;
    if cfg.test_per_class > 0 {
        samples.extend(generate_split(cfg.test_per_class, cfg.seed.wrapping_add(1), Split::Test)?);
    }
    let out = out_dir(common)?;
    write_dataset(&samples, out)?;
    write_json(&out.join("dataset.json"), &serde_json::json!({ "samples": samples.len(), "config": json(&cfg) }))
}
