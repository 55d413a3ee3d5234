use std::path::Path;

use kcm_retrieval::backbone::Variant;
use kcm_retrieval::cbirnet::{CbirModel, CbirNet, CbirNetConfig, FusionConfig};
use kcm_retrieval::ccnet::{CcNet, CcNetConfig};
use kcm_retrieval::checkpoint::{encode_cbir, encode_ccnet, load_cbir_model, load_ccnet, write_atomic, Checkpoint};
use kcm_retrieval::composition_data::{generate_split, load_kupcp, write_dataset, CompositionClass, Split};
use kcm_retrieval::preprocessing::{load_network_input, CropRect};
use kcm_retrieval::retrieval::{build_index, Embedder, RetrievalIndex};
use kcm_retrieval::shot_miner::{
    build_triplets, central_frame_database, load_annotations, read_groups_jsonl, write_annotations_csv,
    write_groups_jsonl, DiskFrames, FrameSource, TripletManifest,
};
use kcm_retrieval::synthetic_film::{FilmCorpus, FilmCorpusConfig};
use kcm_retrieval::trainer::{train_cbirnet, Hyperparams};
use kcm_retrieval::{Error, ErrorClass};

fn nets(seed: u64, l: f64) -> (CcNet, CbirNet) {
    let mut cc = CcNet::new(CcNetConfig::for_variant(Variant::Tiny)).unwrap();
    cc.init_xavier(seed);
    let mut cb = CbirNet::new(CbirNetConfig::for_variant(Variant::Tiny, 32, FusionConfig::new(l).unwrap())).unwrap();
    cb.init_xavier(seed + 1);
    (cc, cb)
}

#[test]
fn composition_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = generate_split(1, 3, Split::Train).unwrap();
    samples.extend(generate_split(1, 4, Split::Test).unwrap());
    write_dataset(&samples, dir.path()).unwrap();
    let report = load_kupcp(dir.path()).unwrap();
    assert_eq!(report.samples.len(), 18);
    assert_eq!(report.split(Split::Train).count(), 9);
    assert_eq!(report.split(Split::Test).count(), 9);
    let pct = report.class_percentages(Split::Test);
    assert!(pct.iter().all(|p| (p - 100.0 / 9.0).abs() < 1e-9));
    for (orig, back) in samples.iter().zip(&report.samples) {
        assert_eq!(orig.label, back.label);
        let worst = orig.image.pixels().iter().zip(back.image.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "png quantization error {worst}");
    }
}

#[test]
fn multi_label_rows_become_multi_hot() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = generate_split(1, 5, Split::Train).unwrap().remove(0);
    s.label = kcm_retrieval::composition_data::CompositionLabel::new([CompositionClass::Center, CompositionClass::Symmetric]).unwrap();
    write_dataset(&[s], dir.path()).unwrap();
    let report = load_kupcp(dir.path()).unwrap();
    let hot = report.samples[0].label.multi_hot();
    assert_eq!(hot.iter().filter(|b| **b).count(), 2);
    assert!(hot[CompositionClass::Center.index()] && hot[CompositionClass::Symmetric.index()]);
    assert_eq!(report.multi_label_fraction(), 1.0);
}

#[test]
fn empty_dataset_directory_warns() {
    let dir = tempfile::tempdir().unwrap();
    let report = load_kupcp(dir.path()).unwrap();
    assert!(report.samples.is_empty());
    assert_eq!(report.warnings.len(), 1);
}

#[test]
fn annotations_and_groups_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = FilmCorpus::generate(FilmCorpusConfig { unusable_fraction: 0.3, ..FilmCorpusConfig::desk(2, 4, 1) }).unwrap();
    let path = dir.path().join("ann.csv");
    let mut buf = Vec::new();
    write_annotations_csv(&corpus.records, &mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    assert_eq!(load_annotations(&path).unwrap(), corpus.records);

    let groups = corpus.groups(dir.path());
    let gpath = dir.path().join("groups.jsonl");
    std::fs::write(&gpath, write_groups_jsonl(&groups).unwrap()).unwrap();
    assert_eq!(read_groups_jsonl(&gpath).unwrap(), groups);

    let m = build_triplets(&groups, 4).unwrap();
    let text = m.to_jsonl().unwrap();
    assert_eq!(TripletManifest::from_jsonl(&text, "mem").unwrap(), m);
}

#[test]
fn malformed_annotation_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "film_id,shot_id,start_frame,end_frame,shot_type\nf,s1,0,9,MS\nf,s2,0,x,MS\n").unwrap();
    let e = load_annotations(&path).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Data);
    assert!(e.to_string().contains("bad.csv:3"), "{e}");
}

#[test]
fn disk_frames_apply_overscan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FilmCorpusConfig { frames_per_shot: 3, ..FilmCorpusConfig::desk(1, 2, 2) };
    let corpus = FilmCorpus::generate(cfg.clone()).unwrap();
    assert_eq!(corpus.write_frames(dir.path()).unwrap(), 6);
    let groups = corpus.groups(dir.path());
    let f = &groups[0].frames[0];
    assert_eq!(f.crop, Some(cfg.overscan()));
    let from_disk = DiskFrames.load(f).unwrap();
    let in_mem = corpus.network_frame(f).unwrap();
    let worst = from_disk.pixels().iter().zip(in_mem.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst < 1.0 / 255.0 + 1e-6);

    let too_wide = CropRect { left: 8, top: 8, width: 4096, height: 8 };
    let e = load_network_input(&f.path, "x", Some(too_wide)).unwrap_err();
    assert!(matches!(e, Error::Bounds { .. }));
}

#[test]
fn checkpoints_round_trip_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let (cc, cb) = nets(3, 0.5);
    let path = dir.path().join("cc.ckpt");
    write_atomic(&path, &encode_ccnet(&cc, &serde_json::json!({"note": "t"})).unwrap()).unwrap();
    assert_eq!(load_ccnet(&path).unwrap(), cc);

    let cpath = dir.path().join("cb.ckpt");
    let bytes = encode_cbir(&cc, &cb, &serde_json::Value::Null).unwrap();
    write_atomic(&cpath, &bytes).unwrap();
    let model = load_cbir_model(&cpath).unwrap();
    assert_eq!(model.cbirnet, cb);
    assert_eq!(model.ccnet, cc);
    let fp = model.fingerprint();
    assert_eq!(fp.checkpoint_sha256, kcm_retrieval::checkpoint::sha256_hex(&bytes));
    assert_eq!((fp.l_kcm, fp.dim), (0.5, 32));

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::decode(&corrupt).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
    assert_eq!(load_ccnet(&cpath).unwrap(), cc);
    assert!(load_cbir_model(&path).is_err());
}

#[test]
fn index_files_round_trip_and_check_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = FilmCorpus::generate(FilmCorpusConfig { frames_per_shot: 12, ..FilmCorpusConfig::desk(2, 3, 6) }).unwrap();
    let groups = corpus.groups(Path::new("mem"));
    let mem = corpus.memory_frames(&groups).unwrap();
    let central = central_frame_database(&groups);
    assert_eq!(central.len(), 6);
    let (cc, cb) = nets(5, 0.5);
    let model = CbirModel::new(cc, cb).unwrap();
    let report = build_index(&central, &mem, &model).unwrap();
    assert!(report.failures.is_empty());
    let path = dir.path().join("i.kcmi");
    report.index.save(&path).unwrap();
    let back = RetrievalIndex::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), report.index.to_bytes().unwrap());

    let (cc2, cb2) = nets(6, 0.5);
    let other = CbirModel::new(cc2, cb2).unwrap();
    let img = corpus.network_frame(&central[0]).unwrap();
    let e = back.query(&other, &img, 3).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);

    let mut dup = central.clone();
    dup.push(central[0].clone());
    assert!(matches!(build_index(&dup, &mem, &model), Err(Error::Duplicate(_))));
}

#[test]
fn retrieval_training_leaves_classifier_untouched() {
    let corpus = FilmCorpus::generate(FilmCorpusConfig { frames_per_shot: 12, ..FilmCorpusConfig::desk(1, 3, 9) }).unwrap();
    let groups = corpus.groups(Path::new("mem"));
    let mem = corpus.memory_frames(&groups).unwrap();
    let mut manifest = build_triplets(&groups, 1).unwrap();
    manifest.triplets.truncate(4);
    let (cc, _) = nets(8, 0.5);
    let snapshot = cc.clone();
    let hp = Hyperparams { epochs: 1, batch_size: 4, ..Hyperparams::default() };
    let cfg = CbirNetConfig::for_variant(Variant::Tiny, 32, FusionConfig::new(0.5).unwrap());
    let (net, report) = train_cbirnet(&manifest, &mem, &cc, cfg, &hp).unwrap();
    assert_eq!(cc, snapshot);
    assert!(net.is_ready());
    assert_eq!(report.epoch_losses.len(), 1);

    let cfg = CbirNetConfig::for_variant(Variant::Tiny, 32, FusionConfig::new(0.2).unwrap());
    assert_eq!(train_cbirnet(&manifest, &mem, &cc, cfg, &hp).unwrap_err().class(), ErrorClass::Config);
}
