//! On-disk dataset and instance-set layout.
//!
//! A dataset directory holds `images/*.png` (8-bit grayscale or RGB),
//! `labels.csv` (`filename,label`), `boxes.csv`
//! (`filename,row0,col0,row1,col1`), and `noise.csv` (`filename,noise`).
//! An instance directory holds `patches/*.png` plus `manifest.csv`
//! (`instance_file,bag_id,label,rank,center_row,center_col,score`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::mil::{Bag, Dataset, Split};
use crate::patch::Instance;
use crate::synthetic::GeneratedImage;
use crate::tensor::Tensor;

/// Quantizes a `[1, h, w]` or `[3, h, w]` tensor of values in [0, 1] to an
/// 8-bit image.
pub fn tensor_to_image(t: &Tensor) -> Result<DynamicImage> {
    let shape = t.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::dimension(format!(
            "expected [1|3, h, w] tensor, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let mut img = GrayImage::new(w as u32, h as u32);
        for r in 0..h {
            for cc in 0..w {
                img.put_pixel(cc as u32, r as u32, image::Luma([to_byte(t.data()[r * w + cc])]));
            }
        }
        Ok(DynamicImage::ImageLuma8(img))
    } else {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for cc in 0..w {
                let px = [
                    to_byte(t.data()[r * w + cc]),
                    to_byte(t.data()[plane + r * w + cc]),
                    to_byte(t.data()[2 * plane + r * w + cc]),
                ];
                img.put_pixel(cc as u32, r as u32, image::Rgb(px));
            }
        }
        Ok(DynamicImage::ImageRgb8(img))
    }
}

/// Loads a PNG into a `[c, h, w]` tensor of values in [0, 1]; grayscale
/// yields one channel, anything else three.
pub fn image_to_tensor(img: &DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            let data: Vec<f64> = g.pixels().map(|p| p[0] as f64 / 255.0).collect();
            Tensor::new(vec![1, h, w], data)
        }
        other => {
            let rgb = other.to_rgb8();
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + i] = p[ch] as f64 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
    }
}

/// Writes one split of generated images with its label/box/noise manifests.
pub fn save_split(dir: &Path, images: &[GeneratedImage]) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut labels = String::from("filename,label\n");
    let mut boxes = String::from("filename,row0,col0,row1,col1\n");
    let mut noise = String::from("filename,noise\n");
    for img in images {
        let filename = format!("{}.png", img.id);
        tensor_to_image(&img.pixels)?.save(img_dir.join(&filename))?;
        labels.push_str(&format!("{filename},{}\n", img.label));
        noise.push_str(&format!("{filename},{}\n", u8::from(img.noisy)));
        for b in &img.boxes {
            boxes.push_str(&format!(
                "{filename},{},{},{},{}\n",
                b.row0, b.col0, b.row1, b.col1
            ));
        }
    }
    fs::write(dir.join("labels.csv"), labels)?;
    fs::write(dir.join("boxes.csv"), boxes)?;
    fs::write(dir.join("noise.csv"), noise)?;
    Ok(())
}

fn csv_rows(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        other => {
            return Err(Error::validation(format!(
                "{}: expected header {expected_header:?}, got {other:?}",
                path.display()
            )))
        }
    }
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize, what: &str) -> Result<T> {
    row.get(idx)
        .ok_or_else(|| Error::validation(format!("missing {what} column")))?
        .parse::<T>()
        .map_err(|_| Error::validation(format!("bad {what} value {:?}", row.get(idx))))
}

/// Loads a split directory into bags plus its ground-truth boxes keyed by
/// bag id. Bags keep `labels.csv` order.
pub fn load_split(dir: &Path, split: Split) -> Result<(Dataset, HashMap<String, Vec<BBox>>)> {
    let rows = csv_rows(&dir.join("labels.csv"), "filename,label")?;
    let mut bags = Vec::with_capacity(rows.len());
    for row in &rows {
        let filename = &row[0];
        let label: u8 = parse_field(row, 1, "label")?;
        let img = image::open(dir.join("images").join(filename))?;
        let tensor = image_to_tensor(&img)?;
        let id = filename.trim_end_matches(".png").to_string();
        bags.push(Bag::new(id, tensor, label)?);
    }
    let dataset = Dataset::new(bags, split)?;

    let mut boxes: HashMap<String, Vec<BBox>> = HashMap::new();
    let box_path = dir.join("boxes.csv");
    if box_path.exists() {
        for row in csv_rows(&box_path, "filename,row0,col0,row1,col1")? {
            let id = row[0].trim_end_matches(".png").to_string();
            let b = BBox::new(
                parse_field(&row, 1, "row0")?,
                parse_field(&row, 2, "col0")?,
                parse_field(&row, 3, "row1")?,
                parse_field(&row, 4, "col1")?,
            )?;
            boxes.entry(id).or_default().push(b);
        }
    }
    Ok((dataset, boxes))
}

/// Persists instances as patch PNGs plus the manifest CSV.
pub fn save_instances(dir: &Path, instances: &[Instance]) -> Result<()> {
    let patch_dir = dir.join("patches");
    fs::create_dir_all(&patch_dir)?;
    let mut manifest =
        String::from("instance_file,bag_id,label,rank,center_row,center_col,score\n");
    for inst in instances {
        let filename = format!("{}_r{}.png", inst.bag_id, inst.rank);
        tensor_to_image(&inst.pixels)?.save(patch_dir.join(&filename))?;
        manifest.push_str(&format!(
            "{filename},{},{},{},{},{},{}\n",
            inst.bag_id, inst.label, inst.rank, inst.center.0, inst.center.1, inst.score
        ));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Loads an instance directory back, in manifest order.
pub fn load_instances(dir: &Path) -> Result<Vec<Instance>> {
    let rows = csv_rows(
        &dir.join("manifest.csv"),
        "instance_file,bag_id,label,rank,center_row,center_col,score",
    )?;
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        let img = image::open(dir.join("patches").join(&row[0]))?;
        out.push(Instance {
            pixels: image_to_tensor(&img)?,
            bag_id: row[1].clone(),
            label: parse_field(row, 2, "label")?,
            rank: parse_field(row, 3, "rank")?,
            center: (
                parse_field(row, 4, "center_row")?,
                parse_field(row, 5, "center_col")?,
            ),
            score: parse_field(row, 6, "score")?,
        });
    }
    Ok(out)
}
