//! Dataset ingestion, synthesis and client sharding.

use std::path::{Path, PathBuf};

use pfljscc_core::data::{self, DatasetShard};
use pfljscc_core::trainer::ClientData;
use pfljscc_core::{Purpose, RngStream, StreamId, Tensor};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// Images read from a folder plus the files that were skipped.
#[derive(Debug, Clone)]
pub struct FolderImages {
    pub dataset: DatasetShard,
    pub skipped: Vec<(PathBuf, String)>,
}

/// `[3, H, W]` tensor in `[0, 1]` from an RGB(A) or gray PNG.
pub fn read_png(path: &Path) -> std::result::Result<Tensor, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HarnessError::Usage(format!(
            "expected a [3, H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (t.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .map_err(|e| HarnessError::io(path, std::io::Error::other(e.to_string())))
}

/// Reads every `.png` under `dir` (sorted by name). Unreadable files and
/// images smaller than `min_side` are skipped with a warning; larger images
/// are center-cropped to a common size so the shard has one shape, and
/// random crops are taken per batch later.
pub fn load_folder(dir: &Path, min_side: usize) -> Result<FolderImages> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match read_png(&p) {
            Ok(t) if t.shape()[1] >= min_side && t.shape()[2] >= min_side => images.push(t),
            Ok(t) => skipped.push((
                p,
                format!(
                    "{}x{} is smaller than {min_side}",
                    t.shape()[1],
                    t.shape()[2]
                ),
            )),
            Err(e) => skipped.push((p, e)),
        }
    }
    for (p, why) in &skipped {
        log::warn!("skipping {}: {why}", p.display());
    }
    if images.is_empty() {
        return Err(pfljscc_core::Error::EmptyDataset.into());
    }
    let h = images.iter().map(|t| t.shape()[1]).min().unwrap_or(0);
    let w = images.iter().map(|t| t.shape()[2]).min().unwrap_or(0);
    let images = images.into_iter().map(|t| center_crop(&t, h, w)).collect();
    Ok(FolderImages {
        dataset: DatasetShard::new(images, None)?,
        skipped,
    })
}

fn center_crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    if s[1] == h && s[2] == w {
        return t.clone();
    }
    let (oy, ox) = ((s[1] - h) / 2, (s[2] - w) / 2);
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            let row = (c * s[1] + oy + y) * s[2] + ox;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new(&[3, h, w], out).expect("crop shape")
}

/// Builds every client's train/test shards and channel statistics.
pub fn load_or_synthesize(cfg: &ExperimentConfig) -> Result<Vec<ClientData>> {
    let all = match &cfg.dataset {
        DatasetSource::Synthetic {
            count,
            size,
            classes,
        } => data::synthesize(*count, *size, *classes, cfg.seed)?,
        DatasetSource::ImageFolder { path } => load_folder(path, cfg.image_size)?.dataset,
    };
    let mut rng = RngStream::new(cfg.seed, StreamId::global(), Purpose::Shard);
    let shards = data::shard(&all, cfg.clients, cfg.sharding, &mut rng)?;
    shards
        .iter()
        .zip(cfg.client_snrs())
        .map(|(s, snr)| {
            let (train, test) = data::train_test_split(s, cfg.test_fraction, &mut rng)?;
            Ok(ClientData { train, test, snr })
        })
        .collect()
}
