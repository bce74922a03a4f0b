//! Image files and pair manifests.
//!
//! Supported image formats:
//! * binary PGM (`P5`), 8- or 16-bit big-endian samples;
//! * MFR1 raw floats: `"MFR1"`, u32 height, u32 width, u32 reserved, then
//!   little-endian `f32` pixels in row-major order;
//! * uncompressed single-strip grayscale TIFF, 8 or 16 bits, either byte order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Mfr,
    Tiff,
}

impl ImageFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Mfr => "mfr",
            ImageFormat::Tiff => "tif",
        }
    }

    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(ImageFormat::Pgm),
            "mfr" | "mfr1" => Some(ImageFormat::Mfr),
            "tif" | "tiff" => Some(ImageFormat::Tiff),
            _ => None,
        }
    }

    fn sniff(bytes: &[u8]) -> Option<Self> {
        match bytes.get(..4)? {
            b"MFR1" => Some(ImageFormat::Mfr),
            b"II*\0" | b"MM\0*" => Some(ImageFormat::Tiff),
            [b'P', b'5', ..] => Some(ImageFormat::Pgm),
            _ => None,
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ImageFormat::Pgm),
            "mfr" | "mfr1" => Ok(ImageFormat::Mfr),
            "tif" | "tiff" => Ok(ImageFormat::Tiff),
            other => Err(Error::invalid(format!("unknown image format '{other}'"))),
        }
    }
}

/// Reads an image, trusting the magic bytes over the extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = ImageFormat::sniff(&bytes)
        .or_else(|| ImageFormat::from_extension(path))
        .ok_or_else(|| Error::unsupported(path, "unrecognized image format"))?;
    decode(&bytes, format, path)
}

pub fn decode(bytes: &[u8], format: ImageFormat, path: &Path) -> Result<Image> {
    match format {
        ImageFormat::Pgm => decode_pgm(bytes, path),
        ImageFormat::Mfr => decode_mfr(bytes, path),
        ImageFormat::Tiff => decode_tiff(bytes, path),
    }
}

/// Writes `img`. Integer formats take 8 bits when the image records a depth
/// of at most 8 and 16 bits otherwise; every pixel must already be an integer
/// in range.
pub fn save_image(img: &Image, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img, format, ByteOrder::Little)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

pub fn encode(img: &Image, format: ImageFormat, tiff_order: ByteOrder) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Mfr => Ok(encode_mfr(img)),
        ImageFormat::Pgm => {
            let bits = integer_bits(img)?;
            encode_pgm(img, bits)
        }
        ImageFormat::Tiff => {
            let bits = integer_bits(img)?;
            encode_tiff(img, bits, tiff_order)
        }
    }
}

fn integer_bits(img: &Image) -> Result<u8> {
    Ok(match img.bit_depth() {
        Some(b) if b <= 8 => 8,
        _ => 16,
    })
}

fn check_integer_pixels(img: &Image, maxval: u32) -> Result<()> {
    for &v in img.pixels() {
        if v.fract() != 0.0 || v < 0.0 || v > maxval as f64 {
            return Err(Error::invalid(format!(
                "pixel {v} is not an integer in [0, {maxval}]; quantize before saving"
            )));
        }
    }
    Ok(())
}

fn bits_for_maxval(maxval: u32) -> u8 {
    (32 - maxval.leading_zeros()) as u8
}

fn encode_pgm(img: &Image, bits: u8) -> Result<Vec<u8>> {
    let maxval: u32 = if bits <= 8 { 255 } else { 65535 };
    check_integer_pixels(img, maxval)?;
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &v in img.pixels() {
        if maxval < 256 {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        }
    }
    Ok(out)
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 2;
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::unsupported(path, "PGM variant other than binary P5"));
    }
    let mut fields = [0u32; 3];
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
            .ok_or_else(|| Error::unsupported(path, "malformed PGM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::unsupported(path, "malformed PGM header"));
    }
    pos += 1;
    let [width, height, maxval] = fields.map(|v| v as usize);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::unsupported(path, format!("PGM maxval {maxval}")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let data = bytes
        .get(pos..pos + n * bps)
        .ok_or_else(|| Error::unsupported(path, "truncated PGM payload"))?;
    let pixels = if bps == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    };
    Ok(Image::new(height, width, pixels)?.with_bit_depth(bits_for_maxval(maxval as u32)))
}

fn encode_mfr(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(b"MFR1");
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in img.pixels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_mfr(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != b"MFR1" {
        return Err(Error::unsupported(path, "missing MFR1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    let data = bytes
        .get(16..16 + 4 * h * w)
        .ok_or_else(|| Error::unsupported(path, "truncated MFR1 payload"))?;
    let pixels: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::new(h, w, pixels).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::unsupported(path, m),
        other => other,
    })
}

mod tag {
    pub const IMAGE_WIDTH: u16 = 256;
    pub const IMAGE_LENGTH: u16 = 257;
    pub const BITS_PER_SAMPLE: u16 = 258;
    pub const COMPRESSION: u16 = 259;
    pub const PHOTOMETRIC: u16 = 262;
    pub const STRIP_OFFSETS: u16 = 273;
    pub const SAMPLES_PER_PIXEL: u16 = 277;
    pub const ROWS_PER_STRIP: u16 = 278;
    pub const STRIP_BYTE_COUNTS: u16 = 279;
    pub const PLANAR_CONFIG: u16 = 284;
    pub const TILE_WIDTH: u16 = 322;
    pub const TILE_OFFSETS: u16 = 324;
    pub const SAMPLE_FORMAT: u16 = 339;
}

const SHORT: u16 = 3;
const LONG: u16 = 4;

struct Endian(ByteOrder);

impl Endian {
    fn u16(&self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self.0 {
            ByteOrder::Little => u16::from_le_bytes(a),
            ByteOrder::Big => u16::from_be_bytes(a),
        }
    }

    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self.0 {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }

    fn put_u16(&self, out: &mut Vec<u8>, v: u16) {
        out.extend_from_slice(&match self.0 {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        });
    }

    fn put_u32(&self, out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&match self.0 {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        });
    }
}

fn encode_tiff(img: &Image, bits: u8, order: ByteOrder) -> Result<Vec<u8>> {
    let maxval = if bits <= 8 { 255 } else { 65535 };
    check_integer_pixels(img, maxval)?;
    let e = Endian(order);
    let bps = if bits <= 8 { 1 } else { 2 };
    let data_len = (img.len() * bps) as u32;
    let entries: [(u16, u16, u32); 9] = [
        (tag::IMAGE_WIDTH, LONG, img.width() as u32),
        (tag::IMAGE_LENGTH, LONG, img.height() as u32),
        (tag::BITS_PER_SAMPLE, SHORT, 8 * bps as u32),
        (tag::COMPRESSION, SHORT, 1),
        (tag::PHOTOMETRIC, SHORT, 1),
        (tag::STRIP_OFFSETS, LONG, 0),
        (tag::SAMPLES_PER_PIXEL, SHORT, 1),
        (tag::ROWS_PER_STRIP, LONG, img.height() as u32),
        (tag::STRIP_BYTE_COUNTS, LONG, data_len),
    ];
    let ifd_len = 2 + 12 * entries.len() + 4;
    let data_offset = (8 + ifd_len) as u32;
    let mut out = Vec::with_capacity(data_offset as usize + data_len as usize);
    out.extend_from_slice(match order {
        ByteOrder::Little => b"II",
        ByteOrder::Big => b"MM",
    });
    e.put_u16(&mut out, 42);
    e.put_u32(&mut out, 8);
    e.put_u16(&mut out, entries.len() as u16);
    for (t, ty, v) in entries {
        let v = if t == tag::STRIP_OFFSETS { data_offset } else { v };
        e.put_u16(&mut out, t);
        e.put_u16(&mut out, ty);
        e.put_u32(&mut out, 1);
        if ty == SHORT {
            e.put_u16(&mut out, v as u16);
            e.put_u16(&mut out, 0);
        } else {
            e.put_u32(&mut out, v);
        }
    }
    e.put_u32(&mut out, 0);
    for &v in img.pixels() {
        if bps == 1 {
            out.push(v as u8);
        } else {
            e.put_u16(&mut out, v as u16);
        }
    }
    Ok(out)
}

fn decode_tiff(bytes: &[u8], path: &Path) -> Result<Image> {
    let truncated = || Error::unsupported(path, "truncated TIFF");
    let order = match bytes.get(..2) {
        Some(b"II") => ByteOrder::Little,
        Some(b"MM") => ByteOrder::Big,
        _ => return Err(Error::unsupported(path, "missing TIFF byte-order mark")),
    };
    let e = Endian(order);
    let at = |o: usize, n: usize| bytes.get(o..o + n).ok_or_else(truncated);
    match e.u16(at(2, 2)?) {
        42 => {}
        43 => return Err(Error::unsupported(path, "BigTIFF")),
        m => return Err(Error::unsupported(path, format!("TIFF magic {m}"))),
    }
    let ifd = e.u32(at(4, 4)?) as usize;
    let count = e.u16(at(ifd, 2)?) as usize;
    let mut width = None;
    let mut height = None;
    let mut bits = None;
    let mut compression = 1;
    let mut photometric = None;
    let mut samples = 1;
    let mut strip_offset = None;
    let mut strip_bytes = None;
    let mut planar = 1;
    let mut sample_format = 1;
    for i in 0..count {
        let entry = at(ifd + 2 + 12 * i, 12)?;
        let t = e.u16(&entry[0..2]);
        let ty = e.u16(&entry[2..4]);
        let n = e.u32(&entry[4..8]);
        let scalar = || -> Result<u32> {
            match (ty, n) {
                (SHORT, 1) => Ok(e.u16(&entry[8..10]) as u32),
                (LONG, 1) => Ok(e.u32(&entry[8..12])),
                _ => Err(Error::unsupported(path, format!("TIFF tag {t} with {n} values of type {ty}"))),
            }
        };
        match t {
            tag::IMAGE_WIDTH => width = Some(scalar()?),
            tag::IMAGE_LENGTH => height = Some(scalar()?),
            tag::BITS_PER_SAMPLE => {
                if n != 1 {
                    return Err(Error::unsupported(path, "multi-channel TIFF"));
                }
                bits = Some(scalar()?)
            }
            tag::COMPRESSION => compression = scalar()?,
            tag::PHOTOMETRIC => photometric = Some(scalar()?),
            tag::STRIP_OFFSETS => {
                if n != 1 {
                    return Err(Error::unsupported(path, "multi-strip TIFF"));
                }
                strip_offset = Some(scalar()?)
            }
            tag::SAMPLES_PER_PIXEL => samples = scalar()?,
            tag::STRIP_BYTE_COUNTS => {
                if n != 1 {
                    return Err(Error::unsupported(path, "multi-strip TIFF"));
                }
                strip_bytes = Some(scalar()?)
            }
            tag::PLANAR_CONFIG => planar = scalar()?,
            tag::TILE_WIDTH | tag::TILE_OFFSETS => return Err(Error::unsupported(path, "tiled TIFF")),
            tag::SAMPLE_FORMAT => sample_format = scalar()?,
            _ => {}
        }
    }
    let next_ifd = e.u32(at(ifd + 2 + 12 * count, 4)?);
    if next_ifd != 0 {
        return Err(Error::unsupported(path, "multi-page TIFF"));
    }
    if compression != 1 {
        return Err(Error::unsupported(path, format!("compressed TIFF (scheme {compression})")));
    }
    if samples != 1 || planar != 1 {
        return Err(Error::unsupported(path, "multi-channel TIFF"));
    }
    match photometric {
        Some(1) | None => {}
        Some(0) => return Err(Error::unsupported(path, "WhiteIsZero photometric interpretation")),
        Some(p) => return Err(Error::unsupported(path, format!("photometric interpretation {p}"))),
    }
    if sample_format != 1 {
        return Err(Error::unsupported(path, format!("TIFF sample format {sample_format}")));
    }
    let bits = bits.unwrap_or(1);
    if bits != 8 && bits != 16 {
        return Err(Error::unsupported(path, format!("{bits}-bit TIFF samples")));
    }
    let (w, h) = match (width, height) {
        (Some(w), Some(h)) => (w as usize, h as usize),
        _ => return Err(Error::unsupported(path, "TIFF without image dimensions")),
    };
    let offset = strip_offset.ok_or_else(|| Error::unsupported(path, "TIFF without strip offsets"))? as usize;
    let bps = (bits / 8) as usize;
    let len = w * h * bps;
    if strip_bytes.is_some_and(|b| (b as usize) < len) {
        return Err(truncated());
    }
    let data = at(offset, len)?;
    let pixels = if bps == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2).map(|c| e.u16(c) as f64).collect()
    };
    Ok(Image::new(h, w, pixels)?.with_bit_depth(bits as u8))
}

/// One `(gt, pred)` pair of a manifest with resolved paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub gt: PathBuf,
    pub pred: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: Option<String>,
    gt: Option<PathBuf>,
    pred: Option<PathBuf>,
    root: Option<PathBuf>,
}

/// Reads a JSON-lines manifest: one `{"id", "gt", "pred"}` object per line,
/// optionally preceded by `{"root": DIR}`. Relative paths resolve against the
/// root, which itself resolves against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut manifest = PairManifest::default();
    let mut dir = base.clone();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        match parsed {
            ManifestLine {
                root: Some(root),
                id: None,
                gt: None,
                pred: None,
            } => {
                if manifest.root.is_some() || !manifest.entries.is_empty() {
                    return Err(err(n, "root must be given once, before any entry".into()));
                }
                dir = base.join(&root);
                manifest.root = Some(dir.clone());
            }
            ManifestLine {
                root: None,
                id: Some(id),
                gt: Some(gt),
                pred: Some(pred),
            } => {
                if !ids.insert(id.clone()) {
                    return Err(err(n, format!("duplicate id '{id}'")));
                }
                let (gt, pred) = (dir.join(gt), dir.join(pred));
                for p in [&gt, &pred] {
                    if !p.is_file() {
                        return Err(err(n, format!("missing file {}", p.display())));
                    }
                }
                manifest.entries.push(ManifestEntry { id, gt, pred });
            }
            _ => return Err(err(n, "expected {\"id\", \"gt\", \"pred\"} or {\"root\"}".into())),
        }
    }
    Ok(manifest)
}

/// Writes entries with paths relative to `dir` when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for e in entries {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_path_buf();
        let line = ManifestEntry {
            id: e.id.clone(),
            gt: rel(&e.gt),
            pred: rel(&e.pred),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads every pair of `manifest` in order.
pub fn load_pairs(manifest: &PairManifest) -> Result<(Vec<Image>, Vec<Image>)> {
    let mut gts = Vec::with_capacity(manifest.entries.len());
    let mut preds = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        gts.push(load_image(&e.gt)?);
        preds.push(load_image(&e.pred)?);
    }
    Ok((gts, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn handwritten_pgm() {
        let bytes = b"P5\n# comment\n2 2\n65535\n\x00\x00\x00\x01\x00\x02\x00\x03";
        let img = decode(bytes, ImageFormat::Pgm, p()).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.bit_depth(), Some(16));
        let eight = decode(b"P5 3 1 255 \x01\x02\xff", ImageFormat::Pgm, p()).unwrap();
        assert_eq!(eight.pixels(), &[1.0, 2.0, 255.0]);
        assert_eq!(eight.bit_depth(), Some(8));
        let twelve = decode(b"P5 1 1 4095\n\x0f\xff", ImageFormat::Pgm, p()).unwrap();
        assert_eq!(twelve.bit_depth(), Some(12));
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(
            decode(b"P5\n2 2\n65535\n\x00\x00", ImageFormat::Pgm, p()),
            Err(Error::FormatUnsupported { feature, .. }) if feature.contains("truncated")
        ));
        assert!(decode(b"P2\n1 1\n255\n0", ImageFormat::Pgm, p()).is_err());
        let frac = Image::new(1, 1, vec![0.5]).unwrap();
        assert!(encode(&frac, ImageFormat::Pgm, ByteOrder::Little).is_err());
        let neg = Image::new(1, 1, vec![-1.0]).unwrap();
        assert!(encode(&neg, ImageFormat::Tiff, ByteOrder::Little).is_err());
        let big = Image::new(1, 1, vec![300.0]).unwrap().with_bit_depth(8);
        assert!(encode(&big, ImageFormat::Pgm, ByteOrder::Little).is_err());
    }

    #[test]
    fn pgm_round_trip_respects_maxval() {
        let img = Image::new(2, 3, vec![0.0, 1.0, 255.0, 256.0, 4095.0, 65535.0]).unwrap();
        let bytes = encode(&img, ImageFormat::Pgm, ByteOrder::Little).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        let back = decode(&bytes, ImageFormat::Pgm, p()).unwrap();
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn mfr_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px: Vec<f64> = (0..512 * 512).map(|_| rng.gen_range(-1e4f32..1e4) as f64).collect();
        let img = Image::new(512, 512, px).unwrap();
        let bytes = encode(&img, ImageFormat::Mfr, ByteOrder::Little).unwrap();
        assert_eq!(&bytes[..4], b"MFR1");
        assert_eq!(bytes.len(), 16 + 4 * 512 * 512);
        let back = decode(&bytes, ImageFormat::Mfr, p()).unwrap();
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode(&bytes[..100], ImageFormat::Mfr, p()).is_err());
    }

    #[test]
    fn tiff_header_fields() {
        let img = Image::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&img, ImageFormat::Tiff, ByteOrder::Little).unwrap();
        assert_eq!(&b[..8], &[b'I', b'I', 42, 0, 8, 0, 0, 0]);
        assert_eq!(u16::from_le_bytes([b[8], b[9]]), 9);
        // First entry: ImageWidth, LONG, count 1, value 3.
        assert_eq!(&b[10..22], &[0, 1, 4, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        // Third entry: BitsPerSample, SHORT, count 1, value 16.
        assert_eq!(&b[34..46], &[2, 1, 3, 0, 1, 0, 0, 0, 16, 0, 0, 0]);
        let data_offset = 8 + 2 + 12 * 9 + 4;
        assert_eq!(b.len(), data_offset + 12);
        assert_eq!(&b[data_offset..data_offset + 4], &[1, 0, 2, 0]);
    }

    #[test]
    fn tiff_byte_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(17, 9, (0..153).map(|_| rng.gen_range(0..65536) as f64).collect()).unwrap();
        let le = encode(&img, ImageFormat::Tiff, ByteOrder::Little).unwrap();
        let be = encode(&img, ImageFormat::Tiff, ByteOrder::Big).unwrap();
        assert_eq!(&be[..4], b"MM\0*");
        let a = decode(&le, ImageFormat::Tiff, p()).unwrap();
        let b = decode(&be, ImageFormat::Tiff, p()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels(), img.pixels());
        assert_eq!(a.bit_depth(), Some(16));
        let eight = Image::new(1, 2, vec![7.0, 200.0]).unwrap().with_bit_depth(8);
        let bytes = encode(&eight, ImageFormat::Tiff, ByteOrder::Big).unwrap();
        assert_eq!(decode(&bytes, ImageFormat::Tiff, p()).unwrap(), eight);
    }

    fn patch_tag(bytes: &mut [u8], t: u16, value: u16) {
        let count = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        for i in 0..count {
            let o = 10 + 12 * i;
            if u16::from_le_bytes([bytes[o], bytes[o + 1]]) == t {
                bytes[o + 8..o + 10].copy_from_slice(&value.to_le_bytes());
            }
        }
    }

    #[test]
    fn tiff_rejects_unsupported_features() {
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode(&img, ImageFormat::Tiff, ByteOrder::Little).unwrap();
        let feature = |b: &[u8]| match decode(b, ImageFormat::Tiff, p()) {
            Err(Error::FormatUnsupported { feature, .. }) => feature,
            other => panic!("expected rejection, got {other:?}"),
        };
        let mut b = good.clone();
        patch_tag(&mut b, tag::COMPRESSION, 5);
        assert!(feature(&b).contains("compressed"));
        let mut b = good.clone();
        patch_tag(&mut b, tag::SAMPLES_PER_PIXEL, 3);
        assert!(feature(&b).contains("multi-channel"));
        let mut b = good.clone();
        patch_tag(&mut b, tag::PHOTOMETRIC, 0);
        assert!(feature(&b).contains("WhiteIsZero"));
        let mut b = good.clone();
        let o = 10 + 12 * 5;
        b[o..o + 2].copy_from_slice(&tag::TILE_WIDTH.to_le_bytes());
        assert!(feature(&b).contains("tiled"));
        assert!(feature(&good[..good.len() - 2]).contains("truncated"));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0]).unwrap();
        for f in [ImageFormat::Pgm, ImageFormat::Mfr, ImageFormat::Tiff] {
            let path = dir.path().join(format!("x.{}", f.extension()));
            save_image(&img, &path, f).unwrap();
            assert_eq!(load_image(&path).unwrap().pixels(), img.pixels());
        }
        let unknown = dir.path().join("x.bin");
        fs::write(&unknown, b"hello").unwrap();
        assert!(matches!(load_image(&unknown), Err(Error::FormatUnsupported { .. })));
        assert!(matches!(load_image(dir.path().join("missing.pgm")), Err(Error::Io { .. })));
    }

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::create_dir(d.join("imgs")).unwrap();
        for n in ["a.pgm", "b.pgm", "c.pgm", "d.pgm"] {
            touch(&d.join("imgs"), n);
        }
        let m = d.join("m.jsonl");
        fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().entries.is_empty());

        fs::write(
            &m,
            "{\"root\": \"imgs\"}\n{\"id\": \"p1\", \"gt\": \"a.pgm\", \"pred\": \"b.pgm\"}\n\n{\"id\": \"p0\", \"gt\": \"c.pgm\", \"pred\": \"d.pgm\"}\n",
        )
        .unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.entries.len(), 2);
        assert_eq!(man.entries[0].id, "p1");
        assert_eq!(man.entries[1].gt, d.join("imgs").join("c.pgm"));

        fs::write(&m, "{\"id\": \"p\", \"gt\": \"imgs/a.pgm\", \"pred\": \"imgs/zz.pgm\"}\n").unwrap();
        match load_manifest(&m).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("zz.pgm"));
            }
            e => panic!("{e:?}"),
        }

        fs::write(
            &m,
            "{\"id\": \"p\", \"gt\": \"imgs/a.pgm\", \"pred\": \"imgs/b.pgm\"}\n{\"id\": \"p\", \"gt\": \"imgs/a.pgm\", \"pred\": \"imgs/b.pgm\"}\n",
        )
        .unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Parse { line: 2, .. })));
        fs::write(&m, "{\"id\": \"p\"\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Parse { line: 1, .. })));
        fs::write(&m, "{\"id\": \"p\", \"gt\": \"imgs/a.pgm\"}\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn manifest_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        touch(d, "g.tif");
        touch(d, "p.tif");
        let entries = vec![ManifestEntry {
            id: "only".into(),
            gt: d.join("g.tif"),
            pred: d.join("p.tif"),
        }];
        let m = d.join("manifest.jsonl");
        write_manifest(&m, &entries).unwrap();
        assert!(fs::read_to_string(&m).unwrap().contains("\"gt\":\"g.tif\""));
        assert_eq!(load_manifest(&m).unwrap().entries, entries);
    }
}
