use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use super::{Dataset, Image, Modality, Sample};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, size: u32) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.into_rgb32f();
    let rgb = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let s = size as usize;
    let mut out = Image::filled(3, s, s, 0.0);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p.0[c].clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Loads `root/<class>/<image>` trees. Classes are the subdirectories in
/// lexicographic order; images are resized to `size x size` RGB in `[0, 1]`.
pub fn load_image_dataset(root: &Path, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut names = Vec::new();
    let mut items = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory '{name}' contains no images"
            )));
        }
        let label = names.len();
        for f in files {
            items.push(Sample {
                image: decode(&f, size as u32)?,
                label,
            });
        }
        names.push(name);
    }
    if names.is_empty() {
        return Err(Error::Data(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    Dataset::new(items, names, Modality::Image)
}

/// Writes an RGB image dataset as `root/<class>/<index>.png`, quantised to
/// 8 bits. Loading the tree back at the same size reproduces the item order.
pub fn save_image_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    if ds.modality() != Modality::Image || ds.item_dims().is_some_and(|(c, _, _)| c != 3) {
        return Err(Error::Data(
            "only 3-channel image datasets can be written as PNG".into(),
        ));
    }
    for name in ds.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for (i, s) in ds.items().iter().enumerate() {
        let im = &s.image;
        let quant =
            |c, y, x| (im.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        let rgb = image::RgbImage::from_fn(im.width() as u32, im.height() as u32, |x, y| {
            image::Rgb([quant(0, y, x), quant(1, y, x), quant(2, y, x)])
        });
        let path = root
            .join(&ds.class_names()[s.label])
            .join(format!("{i:05}.png"));
        rgb.save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
