//! PNG export and on-disk sample sets.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SampleRecord, Split};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, h, w]` image with values in `[-1, 1]`.
pub fn write_rgb_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return shape_err("write_rgb_png", img.shape(), &[3, 0, 0]);
    };
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_byte((d[c * h * w + i].as_f64() + 1.0) / 2.0)))
    });
    out.save(path)?;
    Ok(())
}

/// Write a `[1, h, w]` map with values in `[0, 1]`.
pub fn write_gray_png<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let &[1, h, w] = map.shape() else {
        return shape_err("write_gray_png", map.shape(), &[1, 0, 0]);
    };
    let d = map.data();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_byte(d[y as usize * w + x as usize].as_f64())])
    });
    out.save(path)?;
    Ok(())
}

/// Read a PNG as a `[3, h, w]` tensor in `[-1, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// One entry of a written sample set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub index: usize,
    pub identity: u64,
    pub image_a: String,
    pub image_b: String,
    pub mask_b: String,
    /// Re-renderable description of the pair (identity and both poses).
    pub record: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleIndex {
    pub seed: u64,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<IndexEntry>,
}

/// Write samples `0..n` of `split`: source, target and mask PNGs plus a
/// JSON record per sample and an `index.json` listing them all.
pub fn write_sample_set(dir: &Path, data: &Dataset, split: Split, n: usize) -> Result<SampleIndex> {
    fs::create_dir_all(dir)?;
    let c = data.config();
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let record = data.record(split, index)?;
        let s = record.render()?;
        let stem = format!("{index:05}");
        let entry = IndexEntry {
            index,
            identity: s.identity,
            image_a: format!("{stem}_a.png"),
            image_b: format!("{stem}_b.png"),
            mask_b: format!("{stem}_mask.png"),
            record: format!("{stem}.json"),
        };
        write_rgb_png(&dir.join(&entry.image_a), &s.i_a)?;
        write_rgb_png(&dir.join(&entry.image_b), &s.i_b)?;
        write_gray_png(&dir.join(&entry.mask_b), &s.mask_b)?;
        fs::write(dir.join(&entry.record), serde_json::to_vec_pretty(&record)?)?;
        samples.push(entry);
    }
    let index = SampleIndex {
        seed: c.seed,
        split,
        height: c.height,
        width: c.width,
        samples,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_record(path: &Path) -> Result<SampleRecord> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
