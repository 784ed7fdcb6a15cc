//! Image ingestion, pairing, and checkpoint persistence.
//!
//! # Checkpoint archive layout (version 1)
//!
//! ```text
//! bytes 0..4    magic "SKCP"
//! bytes 4..8    format version, u32 little-endian
//! bytes 8..16   header length H, u64 little-endian
//! bytes 16..16+H  JSON header (backbone config, alpha, mask seed, step,
//!                 train config snapshot, loss weights, blob directory)
//! remainder     raw f64 little-endian blobs in directory order:
//!               shared kernels, biases, Adam m/v for kernels and biases
//! ```
//!
//! Registered keys are never written: masks and key fills regenerate from
//! `(alpha, mask seed, manifest)` and from the keys supplied at run time.
//! Writes are atomic (temp file + rename).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backbone::{Backbone, BackboneConfig, BiasSet, ImagePlane, ModelState};
use crate::error::{Error, Result};
use crate::keyed_weights::{sample_mask, WeightOrigin, WeightSet};
use crate::rng::SeedStream;
use crate::training::{AdamState, LossWeights, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SKCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which images a [`DatasetSpec`] loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A folder of images plus the target side and pairing seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub side: usize,
    pub pairing_seed: u64,
}

/// Loads and normalizes one image file: 8-bit RGB, bilinear resize to
/// `side` when given, values scaled into `[0, 1]`.
pub fn load_image(path: &Path, side: Option<usize>) -> Result<ImagePlane> {
    let img = image::open(path)?;
    let img = match side {
        Some(s) if img.width() != s as u32 || img.height() != s as u32 => img.resize_exact(
            s as u32,
            s as u32,
            image::imageops::FilterType::Triangle,
        ),
        _ => img,
    };
    let rgb = img.to_rgb8();
    ImagePlane::from_rgb8(rgb.as_raw(), rgb.width() as usize, rgb.height() as usize)
}

/// Writes an image as 8-bit RGB PNG.
pub fn save_image(path: &Path, plane: &ImagePlane) -> Result<()> {
    let (w, h) = (plane.width() as u32, plane.height() as u32);
    let buf = image::RgbImage::from_raw(w, h, plane.to_rgb8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Composes rows of equally-sized images into one grid image with a white
/// 2-pixel separator and writes it as PNG.
pub fn save_png_grid(path: &Path, rows: &[Vec<ImagePlane>]) -> Result<()> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Parameter("grid needs at least one image".into()));
    }
    let (h, w) = (rows[0][0].height(), rows[0][0].width());
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let sep = 2usize;
    let gh = rows.len() * h + (rows.len() - 1) * sep;
    let gw = cols * w + (cols - 1) * sep;
    let mut canvas = ndarray::Array3::<f64>::ones((3, gh, gw));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Shape("grid images must share one size".into()));
            }
            let y0 = ri * (h + sep);
            let x0 = ci * (w + sep);
            canvas
                .slice_mut(ndarray::s![.., y0..y0 + h, x0..x0 + w])
                .assign(img.data());
        }
    }
    save_image(path, &ImagePlane::from_array(canvas)?)
}

/// Loads every decodable image under `root/<split>/`, sorted by file name.
/// Unreadable files are skipped with a warning; an empty result is an error.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<ImagePlane>> {
    let dir = spec.root.join(spec.split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        match load_image(p, Some(spec.side)) {
            Ok(img) => out.push(img),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Disjoint-half pairing for one epoch: a seeded shuffle of `0..n` split in
/// the middle, secrets from the first half and covers from the second, so
/// no pair ever reuses one image.
pub fn make_pairs(n: usize, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let half = n / 2;
    let mut idx: Vec<usize> = (0..n).collect();
    SeedStream::new(seed).substream(epoch).shuffle(&mut idx);
    (0..half).map(|i| (idx[i], idx[half + i])).collect()
}

/// Pair for a global counter that walks epochs back to back.
pub fn pair_for_counter(n: usize, seed: u64, counter: u64) -> (usize, usize) {
    let per_epoch = (n / 2).max(1) as u64;
    let epoch = counter / per_epoch;
    let pos = (counter % per_epoch) as usize;
    make_pairs(n, seed, epoch)[pos]
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct BlobEntry {
    name: String,
    len: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    backbone: BackboneConfig,
    alpha: f64,
    mask_seed: u64,
    step: u64,
    adam_t: u64,
    train: TrainConfig,
    loss_weights: LossWeights,
    blobs: Vec<BlobEntry>,
}

/// Everything needed to reconstruct a model and resume training, minus the
/// keys.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub alpha: f64,
    pub mask_seed: u64,
    pub step: u64,
    /// Train-config snapshot; its key list is empty after a round trip.
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub shared: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            backbone: trainer.model().backbone().config().clone(),
            alpha: trainer.model().mask().alpha(),
            mask_seed: trainer.model().mask().seed(),
            step: trainer.current_step(),
            train: trainer.config().clone(),
            loss_weights: *trainer.loss_weights(),
            shared: trainer.model().shared().tensors().to_vec(),
            biases: trainer.model().biases().tensors().to_vec(),
            adam: trainer.adam_state().clone(),
        }
    }

    /// Rebuilds the model: identical shared weights and biases, mask
    /// regenerated from `(alpha, mask seed, manifest)`.
    pub fn to_model(&self) -> Result<ModelState> {
        let backbone = Backbone::new(self.backbone.clone())?;
        let manifest = Arc::clone(backbone.manifest());
        let shared = WeightSet::from_tensors(&manifest, self.shared.clone(), WeightOrigin::Trained)?;
        let biases = BiasSet::from_tensors(&backbone, self.biases.clone())?;
        let mask = sample_mask(&manifest, self.alpha, self.mask_seed)?;
        ModelState::new(backbone, shared, biases, mask)
    }

    /// Resumes a training session; the keys must be re-supplied since they
    /// are never persisted.
    pub fn to_trainer(&self, keys: Vec<(u64, u64)>) -> Result<Trainer> {
        let model = self.to_model()?;
        let mut config = self.train.clone();
        config.keys = keys;
        Trainer::from_parts(
            model,
            config,
            self.loss_weights,
            Some(self.adam.clone()),
            self.step,
        )
    }

    fn blob_sections(&self) -> Vec<(String, &[Vec<f64>])> {
        vec![
            ("shared".to_string(), self.shared.as_slice()),
            ("bias".to_string(), self.biases.as_slice()),
            ("adam.m_kernels".to_string(), self.adam.m_kernels.as_slice()),
            ("adam.v_kernels".to_string(), self.adam.v_kernels.as_slice()),
            ("adam.m_biases".to_string(), self.adam.m_biases.as_slice()),
            ("adam.v_biases".to_string(), self.adam.v_biases.as_slice()),
        ]
    }
}

/// Serializes a checkpoint atomically (temp file in the same directory,
/// then rename).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        backbone: ck.backbone.clone(),
        alpha: ck.alpha,
        mask_seed: ck.mask_seed,
        step: ck.step,
        adam_t: ck.adam.t,
        train: ck.train.clone(),
        loss_weights: ck.loss_weights,
        blobs: ck
            .blob_sections()
            .iter()
            .flat_map(|(name, tensors)| {
                tensors.iter().enumerate().map(move |(i, t)| BlobEntry {
                    name: format!("{name}.{i}"),
                    len: t.len() as u64,
                })
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for (_, tensors) in ck.blob_sections() {
            for t in tensors {
                for v in t {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, verifying magic, version, and blob directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let backbone = Backbone::new(header.backbone.clone())?;
    let n_tensors = backbone.manifest().len();
    let n_biases = backbone.bias_sizes().len();
    // sections: shared, bias, adam m/v for kernels, adam m/v for biases
    let want = 3 * n_tensors + 3 * n_biases;
    if header.blobs.len() != want {
        return Err(Error::Checkpoint(format!(
            "blob directory has {} entries, expected {want}",
            header.blobs.len()
        )));
    }

    let mut read_tensor = |len: u64| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len as usize * 8];
        f.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut blobs = header.blobs.iter();
    let mut take = |count: usize| -> Result<Vec<Vec<f64>>> {
        (0..count)
            .map(|_| {
                let entry = blobs
                    .next()
                    .ok_or_else(|| Error::Checkpoint("blob directory truncated".into()))?;
                read_tensor(entry.len)
            })
            .collect()
    };

    let shared = take(n_tensors)?;
    let biases = take(n_biases)?;
    let m_kernels = take(n_tensors)?;
    let v_kernels = take(n_tensors)?;
    let m_biases = take(n_biases)?;
    let v_biases = take(n_biases)?;

    for ((spec, tensor), label) in backbone
        .manifest()
        .tensors()
        .iter()
        .zip(&shared)
        .zip(std::iter::repeat("shared"))
    {
        if tensor.len() != spec.len() {
            return Err(Error::Checkpoint(format!(
                "{label} tensor {:?} has {} values, manifest expects {}",
                spec.name,
                tensor.len(),
                spec.len()
            )));
        }
    }

    Ok(Checkpoint {
        backbone: header.backbone,
        alpha: header.alpha,
        mask_seed: header.mask_seed,
        step: header.step,
        train: header.train,
        loss_weights: header.loss_weights,
        shared,
        biases,
        adam: AdamState {
            t: header.adam_t,
            m_kernels,
            v_kernels,
            m_biases,
            v_biases,
        },
    })
}
