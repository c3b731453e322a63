//! Dataset model: samples, ground-truth boxes, and the JSON-lines manifest.
//!
//! A manifest line describes one product: its category, text token ids, and
//! one tensor file per image source. Tensor files are rank-3 dumps shaped
//! `[grid_h, grid_w, input_dim]`; paths are relative to the manifest.

pub mod synth;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::io::{load_tensor, TensorIoError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: malformed manifest record: {source}")]
    Record {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Invalid {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("tensor file {path}: {source}")]
    TensorFile {
        path: String,
        source: TensorIoError,
    },
    #[error("tensor file {path}: expected rank-3 [grid_h, grid_w, input_dim], got shape {shape:?}")]
    TensorShape { path: String, shape: Vec<usize> },
    #[error("sample invalid: {0}")]
    Sample(String),
}

/// Provenance of a product image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    DetailPage,
    Comment,
    VideoFrame,
}

impl SourceTag {
    pub const ALL: [SourceTag; 3] = [SourceTag::DetailPage, SourceTag::Comment, SourceTag::VideoFrame];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::DetailPage => "detail_page",
            SourceTag::Comment => "comment",
            SourceTag::VideoFrame => "video_frame",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned cell rectangle, inclusive-exclusive: covers x in [x1, x2),
/// y in [y1, y2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl GtBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self, DataError> {
        if x2 <= x1 || y2 <= y1 {
            return Err(DataError::Sample(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(GtBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_cell(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn fits_grid(&self, grid_w: usize, grid_h: usize) -> bool {
        self.x2 <= grid_w && self.y2 <= grid_h
    }
}

/// One image as a grid of feature cells.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub grid_h: usize,
    pub grid_w: usize,
    /// N x input_dim with N = grid_h * grid_w, cell (x, y) at row y*grid_w+x.
    pub patch_features: Tensor,
    pub source_tag: SourceTag,
}

impl ImageSample {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        patch_features: Tensor,
        source_tag: SourceTag,
    ) -> Result<Self, DataError> {
        let n = grid_h * grid_w;
        if n == 0 {
            return Err(DataError::Sample("empty grid".into()));
        }
        if patch_features.rank() != 2 || patch_features.rows() != n {
            return Err(DataError::Sample(format!(
                "patch_features shape {:?} does not match {grid_h}x{grid_w} grid",
                patch_features.shape()
            )));
        }
        if !patch_features.is_finite() {
            return Err(DataError::Sample("non-finite patch features".into()));
        }
        Ok(ImageSample {
            grid_h,
            grid_w,
            patch_features,
            source_tag,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn input_dim(&self) -> usize {
        self.patch_features.cols()
    }
}

/// Tokenized text; ids index the model vocabulary, id 0 is reserved for CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub token_ids: Vec<u32>,
    pub vocab_size: u32,
}

impl TextSample {
    pub fn new(token_ids: Vec<u32>, vocab_size: u32) -> Result<Self, DataError> {
        if token_ids.is_empty() {
            return Err(DataError::Sample("empty token sequence".into()));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= vocab_size) {
            return Err(DataError::Sample(format!(
                "token id {bad} out of range for vocab {vocab_size}"
            )));
        }
        Ok(TextSample {
            token_ids,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Raw manifest line as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    product_id: u64,
    category_id: u32,
    text: Vec<u32>,
    sources: Vec<SourceJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceJson {
    path: String,
    tag: SourceTag,
    /// [x1, y1, x2, y2], cell coordinates, inclusive-exclusive.
    r#box: [usize; 4],
}

/// One product entry of a parsed manifest.
#[derive(Debug, Clone)]
pub struct ProductRecord {
    pub product_id: u64,
    pub category_id: u32,
    pub text: Vec<u32>,
    pub sources: Vec<SourceEntry>,
}

#[derive(Debug, Clone)]
pub struct SourceEntry {
    pub path: PathBuf,
    pub tag: SourceTag,
    pub gt_box: GtBox,
}

/// Parsed manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub products: Vec<ProductRecord>,
}

impl Manifest {
    /// Parse a JSON-lines manifest. Blank lines are not permitted; order is
    /// preserved.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let display = path.display().to_string();
        let mut products = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let rec: RecordJson =
                serde_json::from_str(&line).map_err(|source| DataError::Record {
                    path: display.clone(),
                    line: i + 1,
                    source,
                })?;
            let mut sources = Vec::with_capacity(rec.sources.len());
            for s in rec.sources {
                let [x1, y1, x2, y2] = s.r#box;
                let gt_box = GtBox::new(x1, y1, x2, y2).map_err(|_| DataError::Invalid {
                    path: display.clone(),
                    line: i + 1,
                    msg: format!("degenerate box {:?}", s.r#box),
                })?;
                sources.push(SourceEntry {
                    path: PathBuf::from(s.path),
                    tag: s.tag,
                    gt_box,
                });
            }
            if sources.is_empty() {
                return Err(DataError::Invalid {
                    path: display.clone(),
                    line: i + 1,
                    msg: "product has no sources".into(),
                });
            }
            products.push(ProductRecord {
                product_id: rec.product_id,
                category_id: rec.category_id,
                text: rec.text,
                sources,
            });
        }
        Ok(Manifest { root, products })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.products {
            let rec = RecordJson {
                product_id: p.product_id,
                category_id: p.category_id,
                text: p.text.clone(),
                sources: p
                    .sources
                    .iter()
                    .map(|s| SourceJson {
                        path: s.path.to_string_lossy().into_owned(),
                        tag: s.tag,
                        r#box: [s.gt_box.x1, s.gt_box.y1, s.gt_box.x2, s.gt_box.y2],
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|source| DataError::Record {
                path: path.display().to_string(),
                line: 0,
                source,
            })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Number of distinct category ids present.
    pub fn category_count(&self) -> usize {
        let mut cats: Vec<u32> = self.products.iter().map(|p| p.category_id).collect();
        cats.sort_unstable();
        cats.dedup();
        cats.len()
    }

    /// Read one source image from disk.
    pub fn load_image(&self, product: usize, source: usize) -> Result<ImageSample, DataError> {
        let entry = &self.products[product].sources[source];
        let full = self.root.join(&entry.path);
        let t = load_tensor(&full).map_err(|source| DataError::TensorFile {
            path: full.display().to_string(),
            source,
        })?;
        if t.rank() != 3 {
            return Err(DataError::TensorShape {
                path: full.display().to_string(),
                shape: t.shape().to_vec(),
            });
        }
        let (h, w, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let features = Tensor::matrix(h * w, d, t.into_data()).expect("reshape of valid tensor");
        ImageSample::new(h, w, features, entry.tag)
    }

    pub fn text_sample(&self, product: usize, vocab_size: u32) -> Result<TextSample, DataError> {
        TextSample::new(self.products[product].text.clone(), vocab_size)
    }
}

/// Manifest with every source image resident in memory, indexed
/// [product][source]. Desk-scale datasets are a few megabytes.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub images: Vec<Vec<ImageSample>>,
}

impl LoadedDataset {
    pub fn load(manifest: Manifest) -> Result<Self, DataError> {
        let mut images = Vec::with_capacity(manifest.len());
        for p in 0..manifest.len() {
            let mut per_source = Vec::with_capacity(manifest.products[p].sources.len());
            for s in 0..manifest.products[p].sources.len() {
                per_source.push(manifest.load_image(p, s)?);
            }
            images.push(per_source);
        }
        Ok(LoadedDataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_degenerate_coords() {
        assert!(GtBox::new(2, 2, 2, 4).is_err());
        assert!(GtBox::new(2, 2, 4, 2).is_err());
        let b = GtBox::new(1, 2, 4, 5).unwrap();
        assert_eq!(b.area(), 9);
        assert!(b.contains_cell(1, 2));
        assert!(b.contains_cell(3, 4));
        assert!(!b.contains_cell(4, 2)); // x2 is exclusive
        assert!(!b.contains_cell(0, 2));
    }

    #[test]
    fn text_sample_validates_ids() {
        assert!(TextSample::new(vec![], 10).is_err());
        assert!(TextSample::new(vec![1, 10], 10).is_err());
        assert!(TextSample::new(vec![1, 9], 10).is_ok());
    }

    #[test]
    fn image_sample_validates_grid() {
        let t = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        assert!(ImageSample::new(2, 2, t.clone(), SourceTag::Comment).is_ok());
        assert!(ImageSample::new(2, 3, t, SourceTag::Comment).is_err());
        let bad = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(ImageSample::new(1, 1, bad, SourceTag::Comment).is_err());
    }

    #[test]
    fn manifest_roundtrip_preserves_order_and_fields() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            products: vec![
                ProductRecord {
                    product_id: 7,
                    category_id: 2,
                    text: vec![3, 21, 22],
                    sources: vec![SourceEntry {
                        path: PathBuf::from("tensors/p7_s0.etns"),
                        tag: SourceTag::DetailPage,
                        gt_box: GtBox::new(1, 1, 3, 4).unwrap(),
                    }],
                },
                ProductRecord {
                    product_id: 9,
                    category_id: 0,
                    text: vec![1],
                    sources: vec![SourceEntry {
                        path: PathBuf::from("tensors/p9_s0.etns"),
                        tag: SourceTag::VideoFrame,
                        gt_box: GtBox::new(0, 0, 2, 2).unwrap(),
                    }],
                },
            ],
        };
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.products[0].product_id, 7);
        assert_eq!(back.products[0].text, vec![3, 21, 22]);
        assert_eq!(back.products[1].sources[0].tag, SourceTag::VideoFrame);
        assert_eq!(back.products[1].sources[0].gt_box, GtBox::new(0, 0, 2, 2).unwrap());
    }

    #[test]
    fn manifest_reports_line_number_on_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"product_id\":1,\"category_id\":0,\"text\":[1],\"sources\":[{\"path\":\"a\",\"tag\":\"comment\",\"box\":[0,0,1,1]}]}\nnot json\n",
        )
        .unwrap();
        let err = Manifest::load(&path).unwrap_err();
        match err {
            DataError::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        assert!(matches!(
            Manifest::load(Path::new("/does/not/exist.jsonl")),
            Err(DataError::Io(_))
        ));
    }
}
