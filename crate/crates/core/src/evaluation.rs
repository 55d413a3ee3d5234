//! Anchor-group retrieval metrics: cosine embedding loss, mean positive
//! and negative similarity, and the 0 to 4 comparison score.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::GrayscaleImage;
use crate::retrieval::{cosine_similarity, Embedder};
use crate::shot_miner::{FrameRef, FrameSource, ShotGroup};
use crate::trainer::{cosine_embedding_loss, Target};

/// One point per (positive, negative) pair whose positive similarity is
/// strictly greater.
pub fn score_anchor(pos: [f64; 2], neg: [f64; 2]) -> u8 {
    pos.iter().map(|p| neg.iter().filter(|n| p > n).count() as u8).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorGroup {
    pub anchor: FrameRef,
    pub positives: [FrameRef; 2],
    pub negatives: [FrameRef; 2],
}

/// Every frame followed by at least two frames of its shot is an anchor;
/// those two frames are its positives. Two distinct negatives per anchor are
/// drawn from the frames of all other shots.
pub fn build_anchor_groups(groups: &[ShotGroup], seed: u64) -> Result<Vec<AnchorGroup>> {
    let with_frames: Vec<&ShotGroup> = groups.iter().filter(|g| !g.frames.is_empty()).collect();
    let eligible = with_frames.iter().filter(|g| g.frames.len() >= 3).count();
    if with_frames.len() < 2 || eligible == 0 {
        let counts: Vec<String> = groups.iter().map(|g| format!("{}/{}={}", g.film_id, g.shot_id, g.frames.len())).collect();
        return Err(Error::Data(format!(
            "evaluation needs at least 2 shots and one shot with 3 or more frames; frames per shot: [{}]",
            counts.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (gi, g) in with_frames.iter().enumerate() {
        let others: Vec<&FrameRef> = with_frames
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != gi)
            .flat_map(|(_, o)| &o.frames)
            .collect();
        if g.frames.len() < 3 {
            continue;
        }
        if others.len() < 2 {
            return Err(Error::Data(format!(
                "only {} frame(s) outside shot {}/{} to draw negatives from",
                others.len(),
                g.film_id,
                g.shot_id
            )));
        }
        for w in g.frames.windows(3) {
            let picks = sample(&mut rng, others.len(), 2);
            out.push(AnchorGroup {
                anchor: w[0].clone(),
                positives: [w[1].clone(), w[2].clone()],
                negatives: [others[picks.index(0)].clone(), others[picks.index(1)].clone()],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub anchor_id: String,
    pub film_id: String,
    pub shot_id: String,
    pub positive_ids: [String; 2],
    pub negative_ids: [String; 2],
    pub pos_sims: [f64; 2],
    pub neg_sims: [f64; 2],
    pub points: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over triplets `(anchor, pos_i, neg_i)` of
    /// `loss(a, p, +1) + loss(a, n, -1)`.
    pub loss: f64,
    pub loss_averaging: String,
    pub avg_pos_similarity: f64,
    pub avg_neg_similarity: f64,
    pub score: f64,
    pub anchors: usize,
    pub seed: u64,
    pub margin: f64,
    pub records: Vec<AnchorRecord>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Per-similarity rows `anchor_id,sample_id,relation,similarity,film_id,shot_id`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["anchor_id", "sample_id", "relation", "similarity", "film_id", "shot_id"])?;
        for r in &self.records {
            let rows = [
                (&r.positive_ids[0], "pos1", r.pos_sims[0]),
                (&r.positive_ids[1], "pos2", r.pos_sims[1]),
                (&r.negative_ids[0], "neg1", r.neg_sims[0]),
                (&r.negative_ids[1], "neg2", r.neg_sims[1]),
            ];
            for (id, rel, s) in rows {
                w.write_record([r.anchor_id.as_str(), id.as_str(), rel, &s.to_string(), &r.film_id, &r.shot_id])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores anchor groups given a vector for every referenced frame.
pub fn evaluate_vectors(
    anchors: &[AnchorGroup],
    vectors: &HashMap<String, Vec<f32>>,
    seed: u64,
    margin: f64,
) -> Result<EvalReport> {
    if anchors.is_empty() {
        return Err(Error::Data("no anchor groups to evaluate".into()));
    }
    let get = |f: &FrameRef| -> Result<&Vec<f32>> {
        vectors
            .get(&f.source_id())
            .ok_or_else(|| Error::Data(format!("no embedding for frame {}", f.source_id())))
    };
    let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut records = Vec::with_capacity(anchors.len());
    let (mut loss_sum, mut pos_sum, mut neg_sum, mut points) = (0.0, 0.0, 0.0, 0u64);
    for g in anchors {
        let a = get(&g.anchor)?;
        let mut pos_sims = [0.0; 2];
        let mut neg_sims = [0.0; 2];
        for i in 0..2 {
            let p = get(&g.positives[i])?;
            let n = get(&g.negatives[i])?;
            pos_sims[i] = cosine_similarity(a, p)?;
            neg_sims[i] = cosine_similarity(a, n)?;
            let (a64, p64, n64) = (f64s(a), f64s(p), f64s(n));
            loss_sum += cosine_embedding_loss(&a64, &p64, Target::Similar, margin)?
                + cosine_embedding_loss(&a64, &n64, Target::Dissimilar, margin)?;
        }
        let pts = score_anchor(pos_sims, neg_sims);
        pos_sum += pos_sims[0] + pos_sims[1];
        neg_sum += neg_sims[0] + neg_sims[1];
        points += pts as u64;
        records.push(AnchorRecord {
            anchor_id: g.anchor.source_id(),
            film_id: g.anchor.film_id.clone(),
            shot_id: g.anchor.shot_id.clone(),
            positive_ids: [g.positives[0].source_id(), g.positives[1].source_id()],
            negative_ids: [g.negatives[0].source_id(), g.negatives[1].source_id()],
            pos_sims,
            neg_sims,
            points: pts,
        });
    }
    let n = anchors.len() as f64;
    Ok(EvalReport {
        loss: loss_sum / (2.0 * n),
        loss_averaging: "per-triplet".into(),
        avg_pos_similarity: pos_sum / (2.0 * n),
        avg_neg_similarity: neg_sum / (2.0 * n),
        score: points as f64 / n,
        anchors: anchors.len(),
        seed,
        margin,
        records,
        config: serde_json::Value::Null,
    })
}

/// Embeds every frame referenced by the anchor groups of `groups`, then
/// scores them.
pub fn evaluate_model(
    embedder: &dyn Embedder,
    groups: &[ShotGroup],
    source: &dyn FrameSource,
    seed: u64,
    margin: f64,
) -> Result<EvalReport> {
    let anchors = build_anchor_groups(groups, seed)?;
    let mut refs: Vec<&FrameRef> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for g in &anchors {
        for f in std::iter::once(&g.anchor).chain(&g.positives).chain(&g.negatives) {
            if seen.insert(f.source_id()) {
                refs.push(f);
            }
        }
    }
    let mut vectors = HashMap::with_capacity(refs.len());
    for chunk in refs.chunks(16) {
        let images = chunk.iter().map(|f| source.load(f)).collect::<Result<Vec<_>>>()?;
        let batch: Vec<&GrayscaleImage> = images.iter().collect();
        for (f, v) in chunk.iter().zip(embedder.embed_batch(&batch)?) {
            vectors.insert(f.source_id(), v.values);
        }
    }
    let mut report = evaluate_vectors(&anchors, &vectors, seed, margin)?;
    report.config = serde_json::json!({ "fingerprint": embedder.fingerprint(), "seed": seed, "margin": margin });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shot_miner::{group_shots, ShotRecord, ShotType};
    use std::path::Path;

    fn groups(n_shots: usize, len: u64) -> Vec<ShotGroup> {
        let recs: Vec<_> = (0..n_shots)
            .map(|i| ShotRecord {
                film_id: "f".into(),
                shot_id: format!("s{i}"),
                start_frame: 0,
                end_frame: len - 1,
                shot_type: ShotType::Medium,
                overscan: None,
            })
            .collect();
        group_shots(&recs, Path::new("r"))
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_anchor([0.9, 0.8], [0.1, 0.2]), 4);
        assert_eq!(score_anchor([0.5, 0.1], [0.3, 0.2]), 2);
        assert_eq!(score_anchor([0.3, 0.3], [0.3, 0.3]), 0);
    }

    #[test]
    fn anchors_and_ideal_vectors() {
        let g = groups(3, 30);
        let anchors = build_anchor_groups(&g, 1).unwrap();
        assert_eq!(anchors.len(), 3 * 4);
        for a in &anchors {
            assert!(a.positives.iter().all(|p| p.shot_id == a.anchor.shot_id));
            assert!(a.negatives.iter().all(|n| n.shot_id != a.anchor.shot_id));
            assert_ne!(a.negatives[0], a.negatives[1]);
        }
        let mut ideal = HashMap::new();
        for (i, grp) in g.iter().enumerate() {
            for f in &grp.frames {
                let mut v = vec![0.0f32; 3];
                v[i] = 1.0;
                ideal.insert(f.source_id(), v);
            }
        }
        let r = evaluate_vectors(&anchors, &ideal, 1, 0.0).unwrap();
        assert_eq!((r.score, r.avg_pos_similarity, r.avg_neg_similarity, r.loss), (4.0, 1.0, 0.0, 0.0));

    }

    #[test]
    fn adversarial_vectors_score_zero() {
        let f = |shot: &str, i| FrameRef::new("f", shot, i, Path::new("r"));
        let g = AnchorGroup {
            anchor: f("a", 0),
            positives: [f("a", 1), f("a", 2)],
            negatives: [f("b", 0), f("c", 0)],
        };
        let mut v = HashMap::new();
        for fr in [&g.anchor, &g.negatives[0], &g.negatives[1]] {
            v.insert(fr.source_id(), vec![1.0f32, 0.0]);
        }
        for fr in &g.positives {
            v.insert(fr.source_id(), vec![0.0f32, 1.0]);
        }
        let r = evaluate_vectors(&[g], &v, 0, 0.0).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.loss, 2.0);
    }

    #[test]
    fn too_few_frames() {
        match build_anchor_groups(&groups(3, 10), 0) {
            Err(Error::Data(m)) => assert!(m.contains("f/s0=2")),
            other => panic!("{other:?}"),
        }
        assert!(build_anchor_groups(&groups(1, 30), 0).is_err());
    }
}
