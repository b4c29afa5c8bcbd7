//! Seeded synthetic corpus with a learnable feature→caption rule.
//!
//! Content words split into an image half and an object half, each word
//! owning a random prototype vector. A segment plants one image prototype
//! in every frame and one object prototype in one object per frame, both
//! under noise. Its caption is `a {w1} with {w2}`, where `w1` is the argmax
//! of the image-half probe over the mean frame feature and `w2` the argmax
//! of the object-half probe over the mean object feature.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_segment, Manifest, SegmentFeatures, MAX_FRAMES, MAX_OBJECTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub segments: usize,
    /// Frames per segment.
    pub frames: usize,
    /// Objects per frame.
    pub objects: usize,
    /// Width of both image and object features.
    pub dim: usize,
    /// Number of content words; at least 2, split evenly between slots.
    pub vocab_words: usize,
    /// Held-out segments. 0 reuses the training split for validation.
    pub val: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            segments: 8,
            frames: 4,
            objects: 3,
            dim: 32,
            vocab_words: 8,
            val: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::validation("segments", "need at least one segment"));
        }
        if !(1..=MAX_FRAMES).contains(&self.frames) {
            return Err(Error::validation(
                "frames",
                format!("{} outside 1..={MAX_FRAMES}", self.frames),
            ));
        }
        if !(1..=MAX_OBJECTS).contains(&self.objects) {
            return Err(Error::validation(
                "objects",
                format!("{} outside 1..={MAX_OBJECTS}", self.objects),
            ));
        }
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be positive"));
        }
        if self.vocab_words < 2 {
            return Err(Error::validation("vocab_words", "need at least 2 content words"));
        }
        Ok(())
    }

    /// Content words answered by the image probe; the rest go to objects.
    pub fn image_words(&self) -> usize {
        self.vocab_words / 2
    }
}

/// Content word `i` as text.
pub fn content_word(i: usize) -> String {
    format!("w{i}")
}

/// Planted generator state: prototypes double as probe weights.
#[derive(Debug, Clone)]
pub struct Planted {
    pub spec: SynthSpec,
    pub image_protos: Vec<Vec<f64>>,
    pub object_protos: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_probe(protos: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, p) in protos.iter().enumerate() {
        let s = dot(p, x);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn column_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

impl Planted {
    pub fn new(spec: SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut proto = |_| (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let image_protos = (0..spec.image_words()).map(&mut proto).collect();
        let object_protos = (spec.image_words()..spec.vocab_words).map(&mut proto).collect();
        Self {
            spec,
            image_protos,
            object_protos,
        }
    }

    /// Mean frame feature of a segment.
    pub fn image_mean(seg: &SegmentFeatures) -> Vec<f64> {
        let rows: Vec<&[f64]> = (0..seg.frames()).map(|t| seg.image.row(t)).collect();
        column_mean(&rows, seg.d_img())
    }

    /// Mean over every object of every frame.
    pub fn object_mean(seg: &SegmentFeatures) -> Vec<f64> {
        let rows: Vec<&[f64]> = seg
            .objects
            .iter()
            .flat_map(|o| (0..o.rows()).map(move |i| o.row(i)))
            .collect();
        column_mean(&rows, seg.d_obj)
    }

    /// Content-word ids (into `content_word`) the rule assigns to a segment.
    pub fn rule(&self, seg: &SegmentFeatures) -> (usize, usize) {
        let a = argmax_probe(&self.image_protos, &Self::image_mean(seg));
        let b = argmax_probe(&self.object_protos, &Self::object_mean(seg));
        (a, self.spec.image_words() + b)
    }

    pub fn segment(&self, id: String, rng: &mut ChaCha8Rng) -> SegmentFeatures {
        let s = self.spec;
        let a = rng.gen_range(0..self.image_protos.len());
        let b = rng.gen_range(0..self.object_protos.len());
        let noise = |rng: &mut ChaCha8Rng| rng.gen_range(-NOISE..NOISE);
        let mut image = Vec::with_capacity(s.frames * s.dim);
        for _ in 0..s.frames {
            for &p in &self.image_protos[a] {
                image.push(p + noise(rng));
            }
        }
        let mut objects = Vec::with_capacity(s.frames);
        for _ in 0..s.frames {
            let carrier = rng.gen_range(0..s.objects);
            let mut data = Vec::with_capacity(s.objects * s.dim);
            for i in 0..s.objects {
                for d in 0..s.dim {
                    let base = if i == carrier { self.object_protos[b][d] } else { 0.0 };
                    data.push(base + noise(rng));
                }
            }
            objects.push(Tensor::new(vec![s.objects, s.dim], data).expect("sized above"));
        }
        let mut seg = SegmentFeatures {
            segment_id: id,
            image: Tensor::new(vec![s.frames, s.dim], image).expect("sized above"),
            objects,
            d_obj: s.dim,
            captions: Vec::new(),
        };
        let (w1, w2) = self.rule(&seg);
        seg.captions = vec![format!("a {} with {}", content_word(w1), content_word(w2))];
        seg
    }
}

/// In-memory corpus: planted state, training and held-out segments.
pub fn generate(seed: u64, spec: SynthSpec) -> Result<(Planted, Vec<SegmentFeatures>, Vec<SegmentFeatures>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = Planted::new(spec, &mut rng);
    let train = (0..spec.segments)
        .map(|i| planted.segment(format!("train{i:04}"), &mut rng))
        .collect();
    let val = (0..spec.val)
        .map(|i| planted.segment(format!("val{i:04}"), &mut rng))
        .collect();
    Ok((planted, train, val))
}

/// Writes segment files and `manifest.json` under `dir`; returns the
/// manifest path.
pub fn synth_dataset(dir: impl AsRef<Path>, seed: u64, spec: SynthSpec) -> Result<std::path::PathBuf> {
    let (_, train, val) = generate(seed, spec)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |segs: &[SegmentFeatures]| -> Result<Vec<String>> {
        segs.iter()
            .map(|s| {
                let name = format!("{}.seg", s.segment_id);
                save_segment(dir.join(&name), s)?;
                Ok(name)
            })
            .collect()
    };
    let train_files = write(&train)?;
    let val_files = if val.is_empty() { train_files.clone() } else { write(&val)? };
    let manifest = Manifest {
        version: 1,
        d_img: spec.dim,
        d_obj: spec.dim,
        train: train_files,
        val: val_files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
