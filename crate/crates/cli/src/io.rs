use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use vitseg::container::Container;
use vitseg::imaging::Image;
use vitseg::segmentation::ClassMap;

/// Failure classes that map onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or strategy values (exit 2).
    Config(String),
    /// Unreadable or inconsistent inputs (exit 3).
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<vitseg::Error> for CliError {
    fn from(e: vitseg::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn is_container(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("lhtw")
}

/// Decodes an RGB image to unit range. `.lhtw` files hold a planar `[3, H, W]` tensor named `image`.
pub fn load_image(path: &Path) -> CliResult<Image> {
    if is_container(path) {
        let c = Container::read(path)?;
        let t = c.get("image")?;
        if t.shape().len() != 3 || t.shape()[0] != 3 {
            return Err(data_err(path, format!("image tensor has shape {:?}", t.shape())));
        }
        return Ok(Image::from_planar(t.shape()[1], t.shape()[2], t.data())?);
    }
    let rgb = image::open(path).map_err(|e| data_err(path, e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, data)?)
}

#[cfg(test)]
pub fn save_image_container(path: &Path, img: &Image) -> CliResult<()> {
    use vitseg::{container::ContainerWriter, Tensor};
    let (h, w) = (img.height(), img.width());
    let planar: Vec<f32> = (0..3)
        .flat_map(|c| (0..h * w).map(move |i| (c, i)))
        .map(|(c, i)| img.data()[i * 3 + c])
        .collect();
    ContainerWriter::new()
        .tensor("image", Tensor::new(vec![3, h, w], planar)?)
        .write(path)?;
    Ok(())
}

/// Reads a label map: raw indices from an 8/16-bit grayscale or 8-bit
/// palette PNG, or a `[H, W]` tensor named `labels` in a `.lhtw` file.
pub fn load_labels(path: &Path) -> CliResult<ClassMap> {
    if is_container(path) {
        let c = Container::read(path)?;
        let t = c.get("labels")?;
        let (h, w) = t.dims2()?;
        let labels = t.data().iter().map(|&v| v.max(0.0) as u32).collect();
        return Ok(ClassMap::new(h, w, labels)?);
    }
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| data_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| data_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| data_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let labels: Vec<u32> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => buf
            .chunks(info.line_size)
            .take(h)
            .flat_map(|row| row[..w].iter().map(|&v| v as u32))
            .collect(),
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => buf
            .chunks(info.line_size)
            .take(h)
            .flat_map(|row| row[..2 * w].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]]) as u32))
            .collect(),
        (c, d) => {
            return Err(data_err(
                path,
                format!("label PNG must be 8-bit indexed/grayscale or 16-bit grayscale, found {c:?} {d:?}"),
            ))
        }
    };
    Ok(ClassMap::new(h, w, labels)?)
}

/// Writes a grayscale PNG (8-bit when every label fits, else 16-bit).
pub fn save_labels(path: &Path, map: &ClassMap) -> CliResult<()> {
    let file = File::create(path).map_err(|e| data_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let wide = map.labels.iter().any(|&v| v > 255);
    let bytes: Vec<u8> = if wide {
        enc.set_depth(png::BitDepth::Sixteen);
        map.labels.iter().flat_map(|&v| (v.min(65535) as u16).to_be_bytes()).collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        map.labels.iter().map(|&v| v as u8).collect()
    };
    let mut writer = enc.write_header().map_err(|e| data_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| data_err(path, e))?;
    writer.finish().map_err(|e| data_err(path, e))
}

/// Nearest-neighbour resampling for label maps (pixel centres).
pub fn resize_nearest(map: &ClassMap, height: usize, width: usize) -> ClassMap {
    if (height, width) == (map.height, map.width) {
        return map.clone();
    }
    let pick = |d: usize, out: usize, inp: usize| (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let labels = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| map.get(pick(y, height, map.height), pick(x, width, map.width)))
        .collect();
    ClassMap {
        height,
        width,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Sample {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub dataset: String,
}

/// Parses a sample list: `image [label [dataset]]` per line, whitespace
/// separated, `#` comments; relative paths resolve against the list's directory.
pub fn read_samples(path: &Path) -> CliResult<Vec<Sample>> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| data_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_relative() {
            base.join(p)
        } else {
            p
        }
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() > 3 {
            return Err(CliError::Data(format!("{}:{}: expected `image [label [dataset]]`", path.display(), n + 1)));
        }
        out.push(Sample {
            image: resolve(f[0]),
            label: f.get(1).map(|p| resolve(p)),
            dataset: f.get(2).unwrap_or(&"default").to_string(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", path.display())));
    }
    Ok(out)
}

/// A seeded subset of `limit` samples, kept in list order.
pub fn choose(samples: Vec<Sample>, limit: Option<usize>, seed: u64) -> Vec<Sample> {
    match limit {
        Some(k) if k < samples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, samples.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i].clone()).collect()
        }
        _ => samples,
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| data_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_class_names(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(CliError::Data(format!("{}: no class names", path.display())));
    }
    Ok(names)
}
