//! Segment features, the on-disk segment container, vocabulary and the
//! dataset manifest.
//!
//! Segment file layout (all integers u32 little-endian, floats f64 LE):
//!
//! ```text
//! magic  "SINETSEG"            8 bytes
//! version                      u32 (= 1)
//! T, D_img, D_obj              u32 × 3
//! n_t for t in 0..T            u32 × T
//! image features               f64 × T·D_img, row-major
//! object features              f64 × Σn_t·D_obj, frame by frame, row-major
//! segment id                   u32 length + UTF-8
//! caption count                u32
//! captions                     (u32 length + UTF-8) × count
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const MAX_FRAMES: usize = 30;
pub const MAX_OBJECTS: usize = 15;
pub const MAX_CAPTION_WORDS: usize = 30;

const MAGIC: &[u8; 8] = b"SINETSEG";
const VERSION: u32 = 1;

/// One video segment: coarse per-frame image features, an unordered set
/// of object features per frame, and reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub segment_id: String,
    /// T × D_img
    pub image: Tensor,
    /// One n_t × D_obj matrix per frame; n_t may be zero.
    pub objects: Vec<Tensor>,
    pub d_obj: usize,
    pub captions: Vec<String>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl SegmentFeatures {
    pub fn frames(&self) -> usize {
        self.image.rows()
    }

    pub fn d_img(&self) -> usize {
        self.image.cols()
    }

    pub fn object_counts(&self) -> Vec<usize> {
        self.objects.iter().map(Tensor::rows).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if self.image.rank() != 2 {
            return Err(Error::validation("image", "must be a T × D matrix"));
        }
        if t == 0 || t > MAX_FRAMES {
            return Err(Error::validation(
                "frames",
                format!("T = {t}, allowed 1..={MAX_FRAMES}"),
            ));
        }
        if self.objects.len() != t {
            return Err(Error::validation(
                "objects",
                format!("{} object frames for {t} image frames", self.objects.len()),
            ));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.rank() != 2 || o.cols() != self.d_obj {
                return Err(Error::validation(
                    format!("objects[{i}]"),
                    format!("shape {:?}, expected n × {}", o.shape(), self.d_obj),
                ));
            }
            if o.rows() > MAX_OBJECTS {
                return Err(Error::validation(
                    format!("objects[{i}]"),
                    format!("{} objects, at most {MAX_OBJECTS}", o.rows()),
                ));
            }
            if !o.is_finite() {
                return Err(Error::validation(format!("objects[{i}]"), "non-finite value"));
            }
        }
        if !self.image.is_finite() {
            return Err(Error::validation("image", "non-finite value"));
        }
        if self.captions.is_empty() {
            return Err(Error::validation("captions", "at least one caption required"));
        }
        for (i, c) in self.captions.iter().enumerate() {
            let words = tokenize(c).len();
            if words > MAX_CAPTION_WORDS {
                return Err(Error::validation(
                    format!("captions[{i}]"),
                    format!("{words} words, at most {MAX_CAPTION_WORDS}"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical byte encoding; see the module docs for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.frames() as u32);
        put_u32(&mut out, self.d_img() as u32);
        put_u32(&mut out, self.d_obj as u32);
        for o in &self.objects {
            put_u32(&mut out, o.rows() as u32);
        }
        for v in self.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for o in &self.objects {
            for v in o.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut out, &self.segment_id);
        put_u32(&mut out, self.captions.len() as u32);
        for c in &self.captions {
            put_str(&mut out, c);
        }
        out
    }

    /// Parses and validates a segment container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(8, format!("unsupported version {version}")));
        }
        let t = r.u32()? as usize;
        let d_img = r.u32()? as usize;
        let d_obj = r.u32()? as usize;
        if t > MAX_FRAMES {
            return Err(Error::validation(
                "frames",
                format!("T = {t}, allowed 1..={MAX_FRAMES}"),
            ));
        }
        let counts = (0..t).map(|_| r.u32().map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
        if let Some((i, n)) = counts.iter().enumerate().find(|(_, &n)| n > MAX_OBJECTS) {
            return Err(Error::validation(
                format!("objects[{i}]"),
                format!("{n} objects, at most {MAX_OBJECTS}"),
            ));
        }
        let image = Tensor::new(vec![t, d_img], r.f64s(t * d_img)?)?;
        let mut objects = Vec::with_capacity(t);
        for &n in &counts {
            objects.push(Tensor::new(vec![n, d_obj], r.f64s(n * d_obj)?)?);
        }
        let segment_id = r.string()?;
        let count = r.u32()? as usize;
        let mut captions = Vec::new();
        for _ in 0..count {
            captions.push(r.string()?);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        let seg = Self {
            segment_id,
            image,
            objects,
            d_obj,
            captions,
        };
        seg.validate()?;
        Ok(seg)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error_at(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.error_at(at, format!("invalid UTF-8: {e}")))
    }
}

pub fn save_segment(path: impl AsRef<Path>, seg: &SegmentFeatures) -> Result<()> {
    seg.validate()?;
    fs::write(path.as_ref(), seg.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_segment(path: impl AsRef<Path>) -> Result<SegmentFeatures> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    SegmentFeatures::from_bytes(&bytes)
}

/// Word ↔ id map. Ids 0 to 3 are PAD, BOS, EOS, UNK; the rest are assigned
/// by descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

pub fn build_vocab<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for w in tokenize(c) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, n)| *n >= min_count && !RESERVED.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect::<Vec<_>>();
    Vocabulary::from(words)
}

/// `[BOS, w₁ … w_m, EOS]` with m ≤ 30; unknown words map to UNK.
pub fn encode_caption(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(
        tokenize(text)
            .iter()
            .take(MAX_CAPTION_WORDS)
            .map(|w| vocab.id(w)),
    );
    ids.push(EOS);
    ids
}

/// Joins the non-sentinel words of `ids` with single spaces. UNK is kept as
/// its placeholder string.
pub fn decode_caption(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .filter_map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Dataset index: segment files relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d_img: usize,
    pub d_obj: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<SegmentFeatures>,
    pub val: Vec<SegmentFeatures>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let load_all = |files: &[String]| -> Result<Vec<SegmentFeatures>> {
            files
                .iter()
                .map(|f| {
                    let p: PathBuf = base.join(f);
                    let seg = load_segment(&p).map_err(|e| match e {
                        Error::Validation { field, message } => Error::Validation {
                            field: format!("{}: {field}", p.display()),
                            message,
                        },
                        Error::Parse { offset, message } => Error::Parse {
                            offset,
                            message: format!("{}: {message}", p.display()),
                        },
                        other => other,
                    })?;
                    if seg.d_img() != manifest.d_img || seg.d_obj != manifest.d_obj {
                        return Err(Error::validation(
                            p.display().to_string(),
                            format!(
                                "feature dims {}×{} disagree with manifest {}×{}",
                                seg.d_img(),
                                seg.d_obj,
                                manifest.d_img,
                                manifest.d_obj
                            ),
                        ));
                    }
                    Ok(seg)
                })
                .collect()
        };
        let train = load_all(&manifest.train)?;
        let val = load_all(&manifest.val)?;
        Ok(Self {
            manifest,
            train,
            val,
        })
    }

    /// Segment by id across both splits.
    pub fn segments(&self) -> impl Iterator<Item = &SegmentFeatures> {
        self.train.iter().chain(&self.val)
    }
}
