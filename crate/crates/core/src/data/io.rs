use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Raster, SegSample};
use crate::error::{io_err, Error, Result};

/// Contents of `splits.json`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.display().to_string(),
        source,
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `images/<id>.png` and, when present, `masks/<id>.png`.
pub fn save_sample(dir: &Path, sample: &SegSample) -> Result<()> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
    let im = &sample.image;
    let rgb = RgbImage::from_raw(
        im.width as u32,
        im.height as u32,
        im.data.iter().map(|&v| to_u8(v)).collect(),
    )
    .ok_or_else(|| Error::Invalid(format!("sample `{}` is not a 3-channel image", sample.id)))?;
    let path = img_dir.join(format!("{}.png", sample.id));
    rgb.save_with_format(&path, ImageFormat::Png)
        .map_err(image_err(&path))?;
    if let Some(m) = &sample.mask {
        let gray = GrayImage::from_raw(
            m.width as u32,
            m.height as u32,
            m.data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect(),
        )
        .ok_or_else(|| Error::Invalid(format!("sample `{}` mask is not single-channel", sample.id)))?;
        let path = mask_dir.join(format!("{}.png", sample.id));
        gray.save_with_format(&path, ImageFormat::Png)
            .map_err(image_err(&path))?;
    }
    Ok(())
}

/// Writes a 1-channel raster as gray or a 3-channel raster as RGB PNG,
/// clamping to `[0, 1]`. Missing parent directories are created.
pub fn save_png(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let bytes: Vec<u8> = raster.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (raster.width as u32, raster.height as u32);
    let saved = match raster.channels {
        1 => GrayImage::from_raw(w, h, bytes).map(|i| i.save_with_format(path, ImageFormat::Png)),
        3 => RgbImage::from_raw(w, h, bytes).map(|i| i.save_with_format(path, ImageFormat::Png)),
        c => return Err(Error::Invalid(format!("cannot write a {c}-channel PNG"))),
    };
    saved
        .expect("buffer sized by Raster")
        .map_err(image_err(path))
}

pub fn write_splits(dir: &Path, ids: &SplitIds) -> Result<()> {
    let path = dir.join("splits.json");
    let text = serde_json::to_string_pretty(ids).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Reads `splits.json` if the dataset has one.
pub fn read_splits(dir: &Path) -> Result<Option<SplitIds>> {
    let path = dir.join("splits.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })
}

/// Reads any PNG as RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Raster> {
    let rgb = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Raster::new(
        h as usize,
        w as usize,
        3,
        rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

fn read_mask(path: &Path) -> Result<Raster> {
    let gray = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = gray.dimensions();
    Raster::new(
        h as usize,
        w as usize,
        1,
        gray.into_raw()
            .into_iter()
            .map(|v| if v >= 128 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Loads every `images/*.png` with its mask when one exists, sorted by id.
///
/// Images are scaled to `[0, 1]` and masks binarized at 128. Samples with a
/// mask are marked labeled. An id that `splits.json` lists as labeled, val or
/// test must have a mask.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let img_dir = dir.join("images");
    let mut ids: Vec<String> = fs::read_dir(&img_dir)
        .map_err(io_err(&img_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();

    let needs_mask: HashSet<String> = read_splits(dir)?
        .map(|s| s.labeled.into_iter().chain(s.val).chain(s.test).collect())
        .unwrap_or_default();

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image(&img_dir.join(format!("{id}.png")))?;
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.exists() {
            Some(read_mask(&mask_path)?)
        } else if needs_mask.contains(&id) {
            return Err(Error::Invalid(format!(
                "`{id}` is listed as labeled but {} is missing",
                mask_path.display()
            )));
        } else {
            None
        };
        let sample = SegSample {
            is_labeled: mask.is_some(),
            id,
            image,
            mask,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}
