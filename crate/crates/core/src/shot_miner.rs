//! Shot annotations to frame selections, triplet manifests and the
//! central-frame database.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::{load_network_input, CropRect, GrayscaleImage};

/// Frames per selection block.
pub const BLOCK_LEN: u64 = 10;
/// Maximum frames kept per shot.
pub const MAX_FRAMES_PER_SHOT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShotType {
    #[serde(rename = "ELS")]
    ExtremeLong,
    #[serde(rename = "LS")]
    Long,
    #[serde(rename = "MS")]
    Medium,
    #[serde(rename = "CU")]
    CloseUp,
    #[serde(rename = "I")]
    Intertitle,
    #[serde(rename = "NA")]
    NotAvailable,
}

impl ShotType {
    pub fn code(self) -> &'static str {
        match self {
            ShotType::ExtremeLong => "ELS",
            ShotType::Long => "LS",
            ShotType::Medium => "MS",
            ShotType::CloseUp => "CU",
            ShotType::Intertitle => "I",
            ShotType::NotAvailable => "NA",
        }
    }

    pub fn is_usable(self) -> bool {
        !matches!(self, ShotType::Intertitle | ShotType::NotAvailable)
    }
}

impl std::str::FromStr for ShotType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "ELS" => ShotType::ExtremeLong,
            "LS" => ShotType::Long,
            "MS" => ShotType::Medium,
            "CU" => ShotType::CloseUp,
            "I" => ShotType::Intertitle,
            "NA" => ShotType::NotAvailable,
            other => return Err(Error::RejectedInput(format!("unknown shot type {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub film_id: String,
    pub shot_id: String,
    pub start_frame: u64,
    pub end_frame: u64,
    pub shot_type: ShotType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overscan: Option<CropRect>,
}

impl ShotRecord {
    pub fn validate(&self) -> Result<()> {
        if self.film_id.is_empty() || self.shot_id.is_empty() {
            return Err(Error::RejectedInput("film_id and shot_id must be non-empty".into()));
        }
        if self.start_frame > self.end_frame {
            return Err(Error::RejectedInput(format!(
                "start_frame {} > end_frame {}",
                self.start_frame, self.end_frame
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub film_id: String,
    pub shot_id: String,
    pub frame_index: u64,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRect>,
}

impl FrameRef {
    pub fn new(film_id: &str, shot_id: &str, frame_index: u64, frames_root: &Path) -> Self {
        Self {
            film_id: film_id.to_string(),
            shot_id: shot_id.to_string(),
            frame_index,
            path: frame_path(frames_root, film_id, shot_id, frame_index),
            crop: None,
        }
    }

    pub fn source_id(&self) -> String {
        format!("{}/{}/{}", self.film_id, self.shot_id, self.frame_index)
    }

    fn shot_key(&self) -> (&str, &str) {
        (&self.film_id, &self.shot_id)
    }
}

pub fn frame_path(root: &Path, film_id: &str, shot_id: &str, frame_index: u64) -> PathBuf {
    root.join(film_id).join(shot_id).join(format!("{frame_index}.png"))
}

/// Selected frames of one shot, in increasing frame order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotGroup {
    pub film_id: String,
    pub shot_id: String,
    pub shot_type: ShotType,
    pub frames: Vec<FrameRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: FrameRef,
    pub positive: FrameRef,
    pub negative: FrameRef,
}

impl Triplet {
    pub fn check(&self) -> Result<()> {
        if self.anchor.shot_key() != self.positive.shot_key() {
            return Err(Error::Data("positive comes from a different shot".into()));
        }
        if self.anchor.frame_index >= self.positive.frame_index {
            return Err(Error::Data("positive does not follow the anchor".into()));
        }
        if self.negative.shot_key() == self.anchor.shot_key() {
            return Err(Error::Data("negative shares the anchor's shot".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub rng_seed: u64,
    pub tool_version: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletManifest {
    pub rng_seed: u64,
    pub tool_version: String,
    pub triplets: Vec<Triplet>,
}

impl TripletManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            kind: "triplet-manifest".into(),
            rng_seed: self.rng_seed,
            tool_version: self.tool_version.clone(),
            count: self.triplets.len(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::schema(origin, "empty manifest"))?;
        let header: ManifestHeader = serde_json::from_str(first)
            .map_err(|e| Error::schema(format!("{origin}:1"), format!("bad header: {e}")))?;
        let mut triplets = Vec::new();
        for (i, line) in lines {
            let t: Triplet = serde_json::from_str(line)
                .map_err(|e| Error::schema(format!("{origin}:{}", i + 1), e.to_string()))?;
            t.check().map_err(|e| Error::schema(format!("{origin}:{}", i + 1), e.to_string()))?;
            triplets.push(t);
        }
        if triplets.len() != header.count {
            return Err(Error::schema(
                origin,
                format!("header announces {} triplets, found {}", header.count, triplets.len()),
            ));
        }
        Ok(Self { rng_seed: header.rng_seed, tool_version: header.tool_version, triplets })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Frame indices picked from a shot: the first and last frame of each
/// consecutive 10-frame block, deduplicated, truncated to seven.
pub fn select_frame_indices(shot: &ShotRecord) -> Vec<u64> {
    let mut out = Vec::new();
    let mut block_start = shot.start_frame;
    while block_start <= shot.end_frame && out.len() < MAX_FRAMES_PER_SHOT {
        let block_end = (block_start + BLOCK_LEN - 1).min(shot.end_frame);
        out.push(block_start);
        if block_end != block_start {
            out.push(block_end);
        }
        block_start = block_end + 1;
    }
    out.truncate(MAX_FRAMES_PER_SHOT);
    out
}

pub fn select_frames(shot: &ShotRecord, frames_root: &Path) -> Vec<FrameRef> {
    select_frame_indices(shot)
        .into_iter()
        .map(|i| FrameRef { crop: shot.overscan, ..FrameRef::new(&shot.film_id, &shot.shot_id, i, frames_root) })
        .collect()
}

pub fn filter_shots(records: &[ShotRecord]) -> Vec<ShotRecord> {
    records.iter().filter(|r| r.shot_type.is_usable()).cloned().collect()
}

pub fn group_shots(records: &[ShotRecord], frames_root: &Path) -> Vec<ShotGroup> {
    records
        .iter()
        .map(|r| ShotGroup {
            film_id: r.film_id.clone(),
            shot_id: r.shot_id.clone(),
            shot_type: r.shot_type,
            frames: select_frames(r, frames_root),
        })
        .collect()
}

/// One triplet per frame that has a successor in its shot; the negative is
/// drawn uniformly from the frames of all other shots.
pub fn build_triplets(groups: &[ShotGroup], rng_seed: u64) -> Result<TripletManifest> {
    let nonempty: Vec<&ShotGroup> = groups.iter().filter(|g| !g.frames.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 shots with frames to form negatives, got {}",
            nonempty.len()
        )));
    }
    let total: usize = nonempty.iter().map(|g| g.frames.len()).sum();
    let mut offsets = Vec::with_capacity(nonempty.len());
    let mut acc = 0;
    for g in &nonempty {
        offsets.push(acc);
        acc += g.frames.len();
    }
    let frame_at = |flat: usize| -> &FrameRef {
        let gi = offsets.partition_point(|&o| o <= flat) - 1;
        &nonempty[gi].frames[flat - offsets[gi]]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut triplets = Vec::new();
    for (gi, g) in nonempty.iter().enumerate() {
        let own = g.frames.len();
        for pair in g.frames.windows(2) {
            let mut r = rng.gen_range(0..total - own);
            if r >= offsets[gi] {
                r += own;
            }
            triplets.push(Triplet {
                anchor: pair[0].clone(),
                positive: pair[1].clone(),
                negative: frame_at(r).clone(),
            });
        }
    }
    Ok(TripletManifest {
        rng_seed,
        tool_version: crate::checkpoint::TOOL_VERSION.to_string(),
        triplets,
    })
}

/// Lower-median selected frame of each shot.
pub fn central_frame_database(groups: &[ShotGroup]) -> Vec<FrameRef> {
    groups
        .iter()
        .filter(|g| !g.frames.is_empty())
        .map(|g| g.frames[g.frames.len().div_ceil(2) - 1].clone())
        .collect()
}

/// Splits shot groups by film: a seeded shuffle of the distinct film ids
/// sends `ceil(test_fraction * films)` of them to the test side.
pub fn split_by_film(groups: &[ShotGroup], test_fraction: f64, seed: u64) -> Result<(Vec<ShotGroup>, Vec<ShotGroup>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside [0,1]")));
    }
    let mut films: Vec<&str> = groups.iter().map(|g| g.film_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    films.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((films.len() as f64) * test_fraction).ceil() as usize;
    let test_films: BTreeSet<&str> = films.into_iter().take(n_test).collect();
    let (test, train) = groups.iter().cloned().partition(|g| test_films.contains(g.film_id.as_str()));
    Ok((train, test))
}

fn check_unique(records: &[ShotRecord], locations: &[String]) -> Result<()> {
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(prev) = seen.insert((&r.film_id, &r.shot_id), i) {
            return Err(Error::schema(
                locations[i].clone(),
                format!("duplicate shot {}/{} (first seen at {})", r.film_id, r.shot_id, locations[prev]),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    film_id: String,
    shot_id: String,
    start_frame: String,
    end_frame: String,
    shot_type: String,
    #[serde(default)]
    overscan_left: Option<String>,
    #[serde(default)]
    overscan_top: Option<String>,
    #[serde(default)]
    overscan_width: Option<String>,
    #[serde(default)]
    overscan_height: Option<String>,
}

fn parse_u64(s: &str, field: &str) -> std::result::Result<u64, String> {
    s.trim().parse::<u64>().map_err(|_| format!("{field}: expected a non-negative integer, got {s:?}"))
}

fn parse_overscan(row: &CsvRow) -> std::result::Result<Option<CropRect>, String> {
    let fields = [&row.overscan_left, &row.overscan_top, &row.overscan_width, &row.overscan_height];
    let present: Vec<&str> = fields
        .iter()
        .filter_map(|f| f.as_deref().map(str::trim).filter(|s| !s.is_empty()))
        .collect();
    match present.len() {
        0 => Ok(None),
        4 => {
            let v: Vec<u32> = present
                .iter()
                .map(|s| s.parse::<u32>().map_err(|_| format!("overscan: bad integer {s:?}")))
                .collect::<std::result::Result<_, _>>()?;
            Ok(Some(CropRect { left: v[0], top: v[1], width: v[2], height: v[3] }))
        }
        _ => Err("overscan needs all of left, top, width, height or none".into()),
    }
}

/// Parses CSV annotations with header
/// `film_id,shot_id,start_frame,end_frame,shot_type[,overscan_left,overscan_top,overscan_width,overscan_height]`.
pub fn parse_annotations_csv(text: &str, origin: &str) -> Result<Vec<ShotRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut locations = Vec::new();
    let headers = reader.headers()?.clone();
    let mut raw = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut raw) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::schema(format!("{origin}:{line}"), e.to_string()));
            }
        }
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let loc = format!("{origin}:{line}");
        let row: CsvRow = raw.deserialize(Some(&headers)).map_err(|e| Error::schema(loc.clone(), e.to_string()))?;
        let rec = (|| -> std::result::Result<ShotRecord, String> {
            Ok(ShotRecord {
                film_id: row.film_id.clone(),
                shot_id: row.shot_id.clone(),
                start_frame: parse_u64(&row.start_frame, "start_frame")?,
                end_frame: parse_u64(&row.end_frame, "end_frame")?,
                shot_type: row.shot_type.parse::<ShotType>().map_err(|e| e.to_string())?,
                overscan: parse_overscan(&row)?,
            })
        })()
        .map_err(|m| Error::schema(loc.clone(), m))?;
        rec.validate().map_err(|e| Error::schema(loc.clone(), e.to_string()))?;
        records.push(rec);
        locations.push(loc);
    }
    check_unique(&records, &locations)?;
    Ok(records)
}

/// Parses JSON-lines annotations, one [`ShotRecord`] object per line.
pub fn parse_annotations_jsonl(text: &str, origin: &str) -> Result<Vec<ShotRecord>> {
    let mut records = Vec::new();
    let mut locations = Vec::new();
    for (i, line) in text.as_bytes().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{origin}:{}", i + 1);
        let rec: ShotRecord = serde_json::from_str(&line).map_err(|e| Error::schema(loc.clone(), e.to_string()))?;
        rec.validate().map_err(|e| Error::schema(loc.clone(), e.to_string()))?;
        records.push(rec);
        locations.push(loc);
    }
    check_unique(&records, &locations)?;
    Ok(records)
}

pub fn load_annotations(path: &Path) -> Result<Vec<ShotRecord>> {
    let text = std::fs::read_to_string(path)?;
    let origin = path.display().to_string();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_annotations_csv(&text, &origin),
        Some("jsonl") | Some("json") => parse_annotations_jsonl(&text, &origin),
        _ => Err(Error::Config(format!("{origin}: annotations must be .csv or .jsonl"))),
    }
}

pub fn write_annotations_csv(records: &[ShotRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "film_id", "shot_id", "start_frame", "end_frame", "shot_type",
        "overscan_left", "overscan_top", "overscan_width", "overscan_height",
    ])?;
    for r in records {
        let o = r.overscan.map(|c| [c.left, c.top, c.width, c.height].map(|v| v.to_string()));
        let o = o.unwrap_or_else(|| [(); 4].map(|_| String::new()));
        w.write_record([
            r.film_id.clone(), r.shot_id.clone(), r.start_frame.to_string(), r.end_frame.to_string(),
            r.shot_type.code().to_string(), o[0].clone(), o[1].clone(), o[2].clone(), o[3].clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shot groups serialized as JSON lines.
pub fn write_groups_jsonl(groups: &[ShotGroup]) -> Result<String> {
    let mut out = String::new();
    for g in groups {
        out.push_str(&serde_json::to_string(g)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_groups_jsonl(path: &Path) -> Result<Vec<ShotGroup>> {
    let origin = path.display().to_string();
    std::fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::schema(format!("{origin}:{}", i + 1), e.to_string())))
        .collect()
}

/// Resolves frame references to network-ready images.
pub trait FrameSource {
    fn load(&self, frame: &FrameRef) -> Result<GrayscaleImage>;
}

/// Reads frames from their paths, applying the overscan crop.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiskFrames;

impl FrameSource for DiskFrames {
    fn load(&self, frame: &FrameRef) -> Result<GrayscaleImage> {
        load_network_input(&frame.path, frame.source_id(), frame.crop)
    }
}

/// Frames held in memory, keyed by source id.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrames {
    frames: HashMap<String, GrayscaleImage>,
}

impl MemoryFrames {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: &FrameRef, img: GrayscaleImage) {
        let id = frame.source_id();
        self.frames.insert(id.clone(), img.with_source_id(id));
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl FrameSource for MemoryFrames {
    fn load(&self, frame: &FrameRef) -> Result<GrayscaleImage> {
        let id = frame.source_id();
        self.frames
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("frame {id} not in memory source")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shot(film: &str, id: &str, start: u64, end: u64, ty: ShotType) -> ShotRecord {
        ShotRecord {
            film_id: film.into(),
            shot_id: id.into(),
            start_frame: start,
            end_frame: end,
            shot_type: ty,
            overscan: None,
        }
    }

    #[test]
    fn selection_examples() {
        let s = |a, b| select_frame_indices(&shot("f", "s", a, b, ShotType::Medium));
        assert_eq!(s(0, 29), vec![0, 9, 10, 19, 20, 29]);
        assert_eq!(s(0, 99), vec![0, 9, 10, 19, 20, 29, 30]);
        assert_eq!(s(5, 5), vec![5]);
        assert_eq!(s(0, 10), vec![0, 9, 10]);
    }

    #[test]
    fn filtering_and_central_frames() {
        let recs = vec![
            shot("f", "a", 0, 1, ShotType::ExtremeLong),
            shot("f", "b", 0, 1, ShotType::Intertitle),
            shot("f", "c", 0, 1, ShotType::CloseUp),
            shot("f", "d", 0, 1, ShotType::NotAvailable),
        ];
        let kept: Vec<_> = filter_shots(&recs).into_iter().map(|r| r.shot_id).collect();
        assert_eq!(kept, vec!["a", "c"]);

        let groups = group_shots(&[shot("f", "a", 0, 10, ShotType::Long)], Path::new("r"));
        assert_eq!(central_frame_database(&groups)[0].frame_index, 9);
    }

    #[test]
    fn triplets_for_two_small_shots() {
        let groups = group_shots(
            &[shot("f", "a", 0, 9, ShotType::Long), shot("f", "b", 0, 9, ShotType::Long)],
            Path::new("r"),
        );
        let m = build_triplets(&groups, 3).unwrap();
        assert_eq!(m.triplets.len(), 2);
        for t in &m.triplets {
            t.check().unwrap();
        }
        assert_eq!(m, build_triplets(&groups, 3).unwrap());
        let back = TripletManifest::from_jsonl(&m.to_jsonl().unwrap(), "m").unwrap();
        assert_eq!(back, m);
        assert!(build_triplets(&groups[..1], 3).is_err());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "film_id,shot_id,start_frame,end_frame,shot_type\nf,a,0,9,LS\nf,b,9,3,LS\n";
        match parse_annotations_csv(text, "ann.csv") {
            Err(Error::Schema { location, .. }) => assert_eq!(location, "ann.csv:3"),
            other => panic!("{other:?}"),
        }
        let text = "film_id,shot_id,start_frame,end_frame,shot_type\nf,a,0,9,XX\n";
        assert!(matches!(parse_annotations_csv(text, "a"), Err(Error::Schema { .. })));
        let text = "film_id,shot_id,start_frame,end_frame,shot_type,overscan_left,overscan_top,overscan_width,overscan_height\nf,a,0,9,LS,1,2,30,40\n";
        let recs = parse_annotations_csv(text, "a").unwrap();
        assert_eq!(recs[0].overscan, Some(CropRect { left: 1, top: 2, width: 30, height: 40 }));

        let mut buf = Vec::new();
        write_annotations_csv(&recs, &mut buf).unwrap();
        assert_eq!(parse_annotations_csv(std::str::from_utf8(&buf).unwrap(), "b").unwrap(), recs);
    }

    #[test]
    fn jsonl_annotations() {
        let text = "{\"film_id\":\"f\",\"shot_id\":\"a\",\"start_frame\":0,\"end_frame\":3,\"shot_type\":\"CU\"}\n\n{\"film_id\":\"f\",\"shot_id\":\"a\",\"start_frame\":0,\"end_frame\":3,\"shot_type\":\"CU\"}\n";
        match parse_annotations_jsonl(text, "x.jsonl") {
            Err(Error::Schema { location, message }) => {
                assert_eq!(location, "x.jsonl:3");
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn film_level_split_is_disjoint() {
        let recs: Vec<_> = (0..6).map(|i| shot(&format!("film{}", i % 3), &format!("s{i}"), 0, 5, ShotType::Long)).collect();
        let groups = group_shots(&recs, Path::new("r"));
        let (train, test) = split_by_film(&groups, 0.34, 1).unwrap();
        assert_eq!(train.len() + test.len(), 6);
        let tf: BTreeSet<_> = train.iter().map(|g| &g.film_id).collect();
        assert!(test.iter().all(|g| !tf.contains(&g.film_id)));
        assert_eq!(test.len(), 4);
    }
}
