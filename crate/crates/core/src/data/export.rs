//! Dataset directories (binary PPM images plus a CSV manifest) and IDX ingestion.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    assignment, derive_seed, BiasMode, DataError, Image, Sample, Split, MAX_CLASSES, PALETTE,
};

pub const MANIFEST: &str = "manifest.csv";

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Encodes an image as binary PPM (P6, maxval 255), with an optional
/// single-line header comment.
pub fn encode_ppm(image: &Image, comment: Option<&str>) -> Vec<u8> {
    let comment = comment.map(|c| format!("# {}\n", c.replace('\n', " "))).unwrap_or_default();
    let mut out = format!("P6\n{comment}{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>, comment: Option<&str>) -> Result<(), DataError> {
    fs::write(path, encode_ppm(image, comment))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format_err(path, "not a binary PPM (P6)"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, "only maxval 255 is supported"));
    }
    let body = bytes.get(pos..pos + width * height * 3).ok_or_else(|| format_err(path, "truncated PPM data"))?;
    Ok(Image::new(
        height,
        width,
        body.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

fn image_file(sample: &Sample) -> String {
    format!("images/{}_{:06}.ppm", sample.split, sample.id)
}

/// Writes every sample as a PPM under `dir/images/` and the manifest
/// `dir/manifest.csv` with columns `file,label,bias_color,split`. A comment
/// goes into every image header and as a `#` line atop the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], comment: Option<&str>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = comment.map(|c| format!("# {}\n", c.replace('\n', " "))).unwrap_or_default();
    manifest.push_str("file,label,bias_color,split\n");
    for s in samples {
        let file = image_file(s);
        write_ppm(&s.image, dir.join(&file), comment)?;
        let color = s.bias_color.map(|c| c.to_string()).unwrap_or_default();
        manifest.push_str(&format!("{file},{},{color},{}\n", s.label, s.split));
    }
    fs::File::create(dir.join(MANIFEST))?.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`].
///
/// Grayscale intensities are recovered from the stored colors so samples can
/// be recolored again.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let reader = BufReader::new(fs::File::open(&manifest_path)?);
    let mut samples = Vec::new();
    let mut header_seen = false;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != "file,label,bias_color,split" {
                return Err(format_err(&manifest_path, "unexpected manifest header"));
            }
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(format_err(&manifest_path, format!("line {}: expected 4 columns", line_no + 1)));
        }
        let bad = |what: &str| format_err(&manifest_path, format!("line {}: bad {what}", line_no + 1));
        let label: usize = cols[1].parse().map_err(|_| bad("label"))?;
        let bias_color = match cols[2] {
            "" => None,
            c => Some(c.parse::<usize>().map_err(|_| bad("bias_color"))?),
        };
        if label >= MAX_CLASSES || bias_color.is_some_and(|c| c >= MAX_CLASSES) {
            return Err(bad("class id"));
        }
        let split = Split::parse(cols[3]).ok_or_else(|| bad("split"))?;
        let image = read_ppm(dir.join(cols[0]))?;
        let peak = bias_color
            .map(|c| PALETTE[c].iter().copied().fold(0.0f32, f32::max))
            .unwrap_or(1.0);
        let glyph = image
            .pixels
            .chunks(3)
            .map(|px| (px.iter().copied().fold(0.0f32, f32::max) / peak).min(1.0))
            .collect();
        samples.push(Sample {
            id: samples.len(),
            glyph,
            image,
            label,
            bias_color,
            split,
        });
    }
    Ok(samples)
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(format_err(path, "truncated IDX header"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != expected_magic {
        return Err(format_err(path, format!("IDX magic {magic:#x}, expected {expected_magic:#x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let data = bytes
        .get(header..header + count)
        .ok_or_else(|| format_err(path, "truncated IDX data"))?
        .to_vec();
    Ok((dims, data))
}

/// Loads standard IDX digit files (`*-images-idx3-ubyte`, `*-labels-idx1-ubyte`)
/// and colors them with the same rule as [`super::generate`].
pub fn colorize_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
    mode: BiasMode,
    rho: f64,
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    let (dims, pixels) = read_idx(images_path.as_ref(), 0x0000_0803)?;
    let (ldims, labels) = read_idx(labels_path.as_ref(), 0x0000_0801)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(format_err(labels_path.as_ref(), format!("{} labels for {n} images", ldims[0])));
    }
    let num_classes = MAX_CLASSES;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = labels[i] as usize;
        if label >= num_classes {
            return Err(format_err(labels_path.as_ref(), format!("label {label} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1D8, i as u64));
        let color = match assignment(mode, label, num_classes) {
            None => rng.random_range(0..num_classes),
            Some(a) if rng.random::<f64>() < rho => a,
            Some(a) => {
                let k = rng.random_range(0..num_classes - 1);
                if k >= a {
                    k + 1
                } else {
                    k
                }
            }
        };
        let glyph: Vec<f32> = pixels[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        out.push(Sample {
            id: i,
            image: Image::from_mask(h, w, &glyph, PALETTE[color]),
            glyph,
            label,
            bias_color: Some(color),
            split,
        });
    }
    Ok(out)
}
