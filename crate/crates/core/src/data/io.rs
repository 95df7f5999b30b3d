//! Dataset directory: `index.json`, `labels.jsonl` and `images/NNNNNN.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{DataError, QuadLabel, RgbImage, SampleMeta, SceneConfig, SceneSample};
use crate::geometry::Quad;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.json";
const LABELS_FILE: &str = "labels.jsonl";
const IMAGE_DIR: &str = "images";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses a binary 8-bit PPM (P6), accepting `#` comments in the header.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut num = |what: &str| -> Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("invalid {what} in header"))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    let start = pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or("image dimensions overflow")?;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(format!("truncated pixel data: {have} of {need} bytes"));
    }
    if have > need {
        return Err(format!("{} trailing bytes after pixel data", have - need));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: bytes[start..].to_vec(),
    })
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_ppm(img)).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|reason| DataError::Sample {
        file: path.display().to_string(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub count: usize,
    /// Generator settings, when the dataset is synthetic.
    pub config: Option<SceneConfig>,
    pub labels_sha256: String,
    pub files: Vec<FileEntry>,
    /// Free-form record of how the dataset was produced.
    #[serde(default)]
    pub provenance: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub file: String,
    pub class: usize,
    pub corners: Option<Quad>,
    pub canonical: Option<Quad>,
    pub image_w: usize,
    pub image_h: usize,
    pub meta: SampleMeta,
}

impl LabelRecord {
    pub fn label(&self) -> QuadLabel {
        QuadLabel {
            corners: self.corners,
            class: self.class,
            canonical: self.canonical,
            image_w: self.image_w,
            image_h: self.image_h,
        }
    }
}

/// Writes `samples` into `dir` (created if needed), overwriting any files of
/// the same names.
pub fn write_dataset(
    samples: &[SceneSample],
    dir: &Path,
    config: Option<&SceneConfig>,
    provenance: Value,
) -> Result<DatasetIndex, DataError> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut labels = String::new();
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{IMAGE_DIR}/{i:06}.ppm");
        let bytes = encode_ppm(&s.image);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(FileEntry {
            file: file.clone(),
            sha256: sha256_hex(&bytes),
        });
        let rec = LabelRecord {
            file,
            class: s.label.class,
            corners: s.label.corners,
            canonical: s.label.canonical,
            image_w: s.label.image_w,
            image_h: s.label.image_h,
            meta: s.meta.clone(),
        };
        labels.push_str(&serde_json::to_string(&rec).expect("label serializes"));
        labels.push('\n');
    }
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, labels.as_bytes()).map_err(io_err(&labels_path))?;
    let index = DatasetIndex {
        format_version: DATASET_FORMAT_VERSION,
        count: samples.len(),
        config: config.cloned(),
        labels_sha256: sha256_hex(labels.as_bytes()),
        files,
        provenance,
    };
    let index_path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&index_path, text).map_err(io_err(&index_path))?;
    Ok(index)
}

/// Opened dataset with validated index and labels; images load lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub labels: Vec<LabelRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        let malformed = |what: &str, detail: String| DataError::Malformed {
            what: what.to_string(),
            detail,
        };
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read(&index_path).map_err(io_err(&index_path))?;
        let index: DatasetIndex =
            serde_json::from_slice(&text).map_err(|e| malformed(INDEX_FILE, e.to_string()))?;
        if index.format_version != DATASET_FORMAT_VERSION {
            return Err(malformed(
                INDEX_FILE,
                format!("unsupported format_version {}", index.format_version),
            ));
        }
        if index.files.len() != index.count {
            return Err(malformed(
                INDEX_FILE,
                format!("count {} but {} file entries", index.count, index.files.len()),
            ));
        }
        let labels_path = dir.join(LABELS_FILE);
        let raw = fs::read(&labels_path).map_err(io_err(&labels_path))?;
        if sha256_hex(&raw) != index.labels_sha256 {
            return Err(malformed(LABELS_FILE, "checksum mismatch".into()));
        }
        let text = String::from_utf8(raw).map_err(|e| malformed(LABELS_FILE, e.to_string()))?;
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str::<LabelRecord>(l)
                    .map_err(|e| malformed(&format!("{LABELS_FILE} line {}", n + 1), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if labels.len() != index.count {
            return Err(malformed(
                LABELS_FILE,
                format!("{} records for {} files", labels.len(), index.count),
            ));
        }
        for (rec, entry) in labels.iter().zip(&index.files) {
            if rec.file != entry.file {
                return Err(malformed(
                    LABELS_FILE,
                    format!("record `{}` does not match index entry `{}`", rec.file, entry.file),
                ));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reads and verifies sample `i`; failures name the sample's file.
    pub fn load(&self, i: usize) -> Result<SceneSample, DataError> {
        let rec = &self.labels[i];
        let fail = |reason: String| DataError::Sample {
            file: rec.file.clone(),
            reason,
        };
        let bytes = fs::read(self.dir.join(&rec.file)).map_err(|e| fail(format!("cannot read image: {e}")))?;
        if sha256_hex(&bytes) != self.index.files[i].sha256 {
            return Err(fail("checksum mismatch".into()));
        }
        let image = decode_ppm(&bytes).map_err(fail)?;
        if image.width != rec.image_w || image.height != rec.image_h {
            return Err(fail(format!(
                "image is {}x{} but label says {}x{}",
                image.width, image.height, rec.image_w, rec.image_h
            )));
        }
        Ok(SceneSample {
            image,
            label: rec.label(),
            meta: rec.meta.clone(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample, DataError>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

/// Loads every sample, failing on the first unreadable one.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>, DataError> {
    Dataset::open(dir)?.iter().collect()
}
