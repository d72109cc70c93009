//! Binary PPM (P6) images, PGM (P5) label maps and the dataset manifest.
//!
//! The manifest is plain text, one `image_path<TAB>label_path` per line, with
//! paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Malformed(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("bad header field at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Malformed("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Malformed(format!("maxval {maxval} != 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Malformed("zero image extent".into()));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let body = &bytes[header.data_offset..];
    if body.len() < need {
        return Err(Error::Truncated {
            needed: need,
            available: body.len(),
        });
    }
    Ok(&body[..need])
}

/// Encodes a `[3,H,W]` image in `[0,1]` as P6, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape(format!("PPM expects [3,H,W], got {:?}", image.shape())));
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, b"P6")?;
    let (h, w) = (header.height, header.width);
    let body = payload(bytes, &header, 3)?;
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Encodes an `[H,W]` label map as P5 with pixel value = class id.
pub fn encode_pgm(labels: &Tensor<i64>) -> Result<Vec<u8>> {
    let &[h, w] = labels.shape() else {
        return Err(Error::shape(format!("PGM expects [H,W], got {:?}", labels.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &l in labels.data() {
        out.push(u8::try_from(l).map_err(|_| Error::LabelOutOfRange { label: l, classes: 256 })?);
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<i64>> {
    let header = parse_header(bytes, b"P5")?;
    let body = payload(bytes, &header, 1)?;
    Tensor::new([header.height, header.width], body.iter().map(|&b| b as i64).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_sample(sample: &SceneSample, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    write(image_path.as_ref(), &encode_ppm(&sample.image)?)?;
    write(label_path.as_ref(), &encode_pgm(&sample.labels)?)
}

/// Loads a sample and checks every label is below `classes`.
pub fn load_sample(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, classes: usize) -> Result<SceneSample> {
    let image = decode_ppm(&read(image_path.as_ref())?)?;
    let labels = decode_pgm(&read(label_path.as_ref())?)?;
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    SceneSample::new(image, labels)
}

/// Writes every sample under `dir` and a `manifest.txt` listing them.
/// Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/{i:05}.ppm");
        let lbl = format!("labels/{i:05}.pgm");
        save_sample(s, dir.join(&img), dir.join(&lbl))?;
        manifest.push_str(&format!("{img}\t{lbl}\n"));
    }
    let path = dir.join("manifest.txt");
    write(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Parses a manifest into `(image, label)` paths resolved against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| match line.split_once('\t') {
            Some((img, lbl)) if !img.is_empty() && !lbl.is_empty() => Ok((base.join(img), base.join(lbl.trim_end()))),
            _ => Err(Error::Config {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected `image<TAB>label`".into(),
            }),
        })
        .collect()
}

pub fn load_dataset(manifest: impl AsRef<Path>, classes: usize) -> Result<Vec<SceneSample>> {
    read_manifest(manifest)?
        .iter()
        .map(|(img, lbl)| load_sample(img, lbl, classes))
        .collect()
}
