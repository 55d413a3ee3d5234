//! Synthetic shot-annotated film corpora.
//!
//! Every shot is a static scene (a composition archetype plus a few content
//! objects over a shaded background) filmed by a slowly drifting camera with
//! per-frame grain. Frames carry a black over-scan border.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition_data::CompositionClass;
use crate::error::{Error, Result};
use crate::preprocessing::{apply_overscan_crop, resize_normalize, save_png, CropRect, GrayscaleImage, INPUT_SIZE};
use crate::render::{Archetype, Canvas};
use crate::shot_miner::{frame_path, group_shots, FrameRef, MemoryFrames, ShotGroup, ShotRecord, ShotType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilmCorpusConfig {
    pub films: usize,
    pub shots_per_film: usize,
    pub frames_per_shot: usize,
    pub width: usize,
    pub height: usize,
    pub border: usize,
    /// Fraction of extra shots tagged `I` or `NA` (rendered, but mined out).
    pub unusable_fraction: f64,
    pub seed: u64,
}

impl Default for FilmCorpusConfig {
    fn default() -> Self {
        Self::desk(6, 5, 0)
    }
}

impl FilmCorpusConfig {
    pub fn desk(films: usize, shots_per_film: usize, seed: u64) -> Self {
        Self {
            films,
            shots_per_film,
            frames_per_shot: 30,
            width: INPUT_SIZE + 16,
            height: INPUT_SIZE + 16,
            border: 8,
            unusable_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.films == 0 || self.shots_per_film == 0 || self.frames_per_shot == 0 {
            return Err(Error::Config("films, shots_per_film and frames_per_shot must be positive".into()));
        }
        if self.width <= 2 * self.border || self.height <= 2 * self.border {
            return Err(Error::Config("border leaves no picture area".into()));
        }
        if !(0.0..1.0).contains(&self.unusable_fraction) {
            return Err(Error::Config("unusable_fraction must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn overscan(&self) -> CropRect {
        CropRect {
            left: self.border as u32,
            top: self.border as u32,
            width: (self.width - 2 * self.border) as u32,
            height: (self.height - 2 * self.border) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Prop {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Bar { a: (f64, f64), b: (f64, f64), t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    base: f32,
    gradient: (f32, f32),
    archetype: Archetype,
    archetype_value: f32,
    props: Vec<(Prop, f32)>,
    drift: (f64, f64),
    grain_seed: u64,
}

impl Scene {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let class = CompositionClass::ALL[rng.gen_range(0..CompositionClass::ALL.len())];
        let archetype = Archetype::sample(class, rng);
        let n_props = rng.gen_range(2..=4);
        let props = (0..n_props)
            .map(|_| {
                let prop = match rng.gen_range(0..3) {
                    0 => Prop::Disc { cx: rng.gen_range(0.1..0.9), cy: rng.gen_range(0.1..0.9), r: rng.gen_range(0.04..0.12) },
                    1 => {
                        let (x, y) = (rng.gen_range(0.05..0.75), rng.gen_range(0.05..0.75));
                        Prop::Rect { x0: x, y0: y, x1: x + rng.gen_range(0.08..0.25), y1: y + rng.gen_range(0.08..0.25) }
                    }
                    _ => Prop::Bar {
                        a: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                        b: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                        t: rng.gen_range(0.02..0.05),
                    },
                };
                (prop, rng.gen_range(0.35..0.75))
            })
            .collect();
        let speed = rng.gen_range(0.0005..0.0015);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            base: rng.gen_range(0.05..0.3),
            gradient: (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)),
            archetype,
            archetype_value: rng.gen_range(0.8..1.0),
            props,
            drift: (speed * angle.cos(), speed * angle.sin()),
            grain_seed: rng.gen(),
        }
    }

    pub fn class(&self) -> CompositionClass {
        self.archetype.class()
    }

    /// Picture area of frame `t` (frames counted from the shot start).
    pub fn render(&self, t: u64, width: usize, height: usize) -> Result<GrayscaleImage> {
        let mut c = Canvas::new(width, height, self.base);
        c.add_gradient(self.gradient.0, self.gradient.1);
        c.offset = (self.drift.0 * t as f64, self.drift.1 * t as f64);
        for (prop, v) in &self.props {
            match *prop {
                Prop::Disc { cx, cy, r } => c.disc(cx, cy, r, *v),
                Prop::Rect { x0, y0, x1, y1 } => c.rect(x0, y0, x1, y1, *v),
                Prop::Bar { a, b, t } => c.segment(a, b, t, *v),
            }
        }
        self.archetype.draw(&mut c, self.archetype_value);
        let mut grain = ChaCha8Rng::seed_from_u64(self.grain_seed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        c.add_noise(0.02, &mut grain);
        c.into_image("")
    }
}

#[derive(Debug, Clone)]
pub struct FilmCorpus {
    pub config: FilmCorpusConfig,
    pub records: Vec<ShotRecord>,
    scenes: Vec<Scene>,
}

impl FilmCorpus {
    pub fn generate(config: FilmCorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut records = Vec::new();
        let mut scenes = Vec::new();
        for f in 0..config.films {
            let film_id = format!("film{f:02}");
            let mut next = 0u64;
            let mut s = 0;
            while s < config.shots_per_film {
                let shot_type = if rng.gen_bool(config.unusable_fraction) {
                    [ShotType::Intertitle, ShotType::NotAvailable][rng.gen_range(0..2)]
                } else {
                    s += 1;
                    [ShotType::ExtremeLong, ShotType::Long, ShotType::Medium, ShotType::CloseUp][rng.gen_range(0..4)]
                };
                let len = config.frames_per_shot as u64;
                records.push(ShotRecord {
                    film_id: film_id.clone(),
                    shot_id: format!("shot{:03}", records.len()),
                    start_frame: next,
                    end_frame: next + len - 1,
                    shot_type,
                    overscan: Some(config.overscan()),
                });
                scenes.push(Scene::sample(&mut rng));
                next += len;
            }
        }
        Ok(Self { config, records, scenes })
    }

    fn locate(&self, frame: &FrameRef) -> Result<(&ShotRecord, &Scene)> {
        self.records
            .iter()
            .zip(&self.scenes)
            .find(|(r, _)| r.film_id == frame.film_id && r.shot_id == frame.shot_id)
            .filter(|(r, _)| (r.start_frame..=r.end_frame).contains(&frame.frame_index))
            .ok_or_else(|| Error::Data(format!("frame {} is not part of the corpus", frame.source_id())))
    }

    /// Full frame including the over-scan border.
    pub fn render_frame(&self, frame: &FrameRef) -> Result<GrayscaleImage> {
        let (rec, scene) = self.locate(frame)?;
        let cfg = &self.config;
        let b = cfg.border;
        let inner = scene.render(frame.frame_index - rec.start_frame, cfg.width - 2 * b, cfg.height - 2 * b)?;
        let mut pixels = vec![0.0f32; cfg.width * cfg.height];
        for y in 0..inner.height() {
            let row = &inner.pixels()[y * inner.width()..(y + 1) * inner.width()];
            pixels[(y + b) * cfg.width + b..(y + b) * cfg.width + b + inner.width()].copy_from_slice(row);
        }
        GrayscaleImage::new(cfg.width, cfg.height, pixels, frame.source_id())
    }

    /// Cropped and resized frame, as the network sees it.
    pub fn network_frame(&self, frame: &FrameRef) -> Result<GrayscaleImage> {
        let full = self.render_frame(frame)?;
        let cropped = apply_overscan_crop(&full, frame.crop.unwrap_or(self.config.overscan()))?;
        resize_normalize(&cropped, (INPUT_SIZE, INPUT_SIZE))
    }

    pub fn scene_class(&self, film_id: &str, shot_id: &str) -> Option<CompositionClass> {
        self.records
            .iter()
            .zip(&self.scenes)
            .find(|(r, _)| r.film_id == film_id && r.shot_id == shot_id)
            .map(|(_, s)| s.class())
    }

    /// Mined shot groups for the usable shots, with paths under `frames_root`.
    pub fn groups(&self, frames_root: &Path) -> Vec<ShotGroup> {
        group_shots(&crate::shot_miner::filter_shots(&self.records), frames_root)
    }

    /// Network-ready images for every frame in `groups`.
    pub fn memory_frames(&self, groups: &[ShotGroup]) -> Result<MemoryFrames> {
        let mut mem = MemoryFrames::new();
        for f in groups.iter().flat_map(|g| &g.frames) {
            mem.insert(f, self.network_frame(f)?);
        }
        Ok(mem)
    }

    /// Writes `{film}/{shot}/{frame}.png` for every frame of every shot and
    /// returns the number of files written.
    pub fn write_frames(&self, root: &Path) -> Result<usize> {
        let mut n = 0;
        for rec in &self.records {
            for i in rec.start_frame..=rec.end_frame {
                let f = FrameRef::new(&rec.film_id, &rec.shot_id, i, root);
                let path = frame_path(root, &rec.film_id, &rec.shot_id, i);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                save_png(&self.render_frame(&f)?, &path)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FilmCorpusConfig {
        FilmCorpusConfig { frames_per_shot: 12, width: 48, height: 40, border: 4, ..FilmCorpusConfig::desk(2, 3, 11) }
    }

    #[test]
    fn layout_and_determinism() {
        let a = FilmCorpus::generate(small()).unwrap();
        assert_eq!(a.records.len(), 6);
        let f = FrameRef::new("film01", "shot004", 15, Path::new("r"));
        let img = a.render_frame(&f).unwrap();
        assert_eq!((img.width(), img.height()), (48, 40));
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img, FilmCorpus::generate(small()).unwrap().render_frame(&f).unwrap());
        assert!(a.render_frame(&FrameRef::new("film01", "shot004", 3, Path::new("r"))).is_err());
    }

    #[test]
    fn frames_within_shot_are_closer_than_across() {
        let c = FilmCorpus::generate(small()).unwrap();
        let groups = c.groups(Path::new("r"));
        let px = |f: &FrameRef| c.network_frame(f).unwrap().pixels().to_vec();
        let d = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>();
        let a0 = px(&groups[0].frames[0]);
        let a1 = px(&groups[0].frames[1]);
        let b0 = px(&groups[1].frames[0]);
        assert!(d(&a0, &a1) < d(&a0, &b0));
    }

    #[test]
    fn unusable_shots_are_mined_out() {
        let cfg = FilmCorpusConfig { unusable_fraction: 0.5, ..small() };
        let c = FilmCorpus::generate(cfg).unwrap();
        assert!(c.records.len() > 6);
        assert_eq!(c.groups(Path::new("r")).len(), 6);
    }
}
