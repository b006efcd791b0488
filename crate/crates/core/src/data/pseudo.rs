//! Pseudo-image container: 8-byte magic, little-endian `u32` header length,
//! a JSON header, then `count * size * size` little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Modality, Sample};
use crate::error::{Error, Result};

pub const PSEUDO_MAGIC: &[u8; 8] = b"PKDPSEU\x01";

const SYMMETRY_TOL: f32 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    count: usize,
    size: usize,
    /// `"f32"` or `"f64"`; values are widened or narrowed to `f32` on load.
    dtype: String,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

/// Writes a pseudo-image dataset as `f32` values.
pub fn write_pseudo_images(ds: &Dataset, mut out: impl Write) -> Result<()> {
    if ds.modality() != Modality::PseudoImage {
        return Err(Error::Data(
            "only pseudo-image datasets can be written to this container".into(),
        ));
    }
    let size = ds.item_dims().map_or(0, |d| d.1);
    let header = Header {
        count: ds.len(),
        size,
        dtype: "f32".into(),
        labels: ds.labels(),
        class_names: ds.class_names().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(PSEUDO_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(ds.len() * size * size * 4);
    for s in ds.items() {
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a container, checking every matrix for symmetry.
pub fn read_pseudo_images(mut input: impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != PSEUDO_MAGIC {
        return Err(Error::Data(
            "not a pseudo-image container (bad magic)".into(),
        ));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.labels.len() != header.count {
        return Err(Error::Data(format!(
            "header lists {} labels for {} matrices",
            header.labels.len(),
            header.count
        )));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Data(format!("unsupported dtype '{other}'"))),
    };
    let per = header.size * header.size;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != header.count * per * width {
        return Err(Error::Data(format!(
            "ragged container: expected {} bytes of values for {} matrices of size {}, found {}",
            header.count * per * width,
            header.count,
            header.size,
            body.len()
        )));
    }
    let values: Vec<f32> = if width == 4 {
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect()
    };
    let mut items = Vec::with_capacity(header.count);
    for (k, (chunk, &label)) in values.chunks(per.max(1)).zip(&header.labels).enumerate() {
        let image = Image::new(1, header.size, header.size, chunk.to_vec())?;
        if let Some((d, i, j)) = image.asymmetry() {
            if d > SYMMETRY_TOL {
                return Err(Error::Data(format!(
                    "matrix {k} is not symmetric: entries ({i}, {j}) and ({j}, {i}) differ by {d}"
                )));
            }
        }
        items.push(Sample { image, label });
    }
    Dataset::new(items, header.class_names, Modality::PseudoImage)
}

pub fn load_pseudo_images(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_pseudo_images(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
