//! Two-file MetaImage layout: a `key = value` text header next to a raw
//! little-endian payload named by `ElementDataFile`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Geometry, LabelVolume, Volume};
use crate::labels::Palette;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Float32,
    UInt8,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "FLOAT32" | "MET_FLOAT" => Ok(ElementType::Float32),
            "UINT8" | "MET_UCHAR" => Ok(ElementType::UInt8),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Float32 => "FLOAT32",
            ElementType::UInt8 => "UINT8",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::UInt8 => 1,
        }
    }
}

struct Header {
    geometry: Geometry,
    element: ElementType,
    data_file: PathBuf,
    palette: Option<Palette>,
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("cannot parse {key} = {value}")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::MalformedHeader(format!("{key} needs exactly 3 values")))
}

fn parse_palette(value: &str) -> Result<Palette> {
    let entries = value
        .split(',')
        .map(|entry| {
            let (label, name) = entry
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::MalformedHeader(format!("bad palette entry `{entry}`")))?;
            let label = label
                .trim()
                .parse::<u8>()
                .map_err(|_| Error::MalformedHeader(format!("bad palette label `{label}`")))?;
            Ok((label, name.trim().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Palette::new(entries))
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fields = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("line {}: expected `key = value`", n + 1)))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedHeader(format!("missing key {key}")))
    };

    let ndims = get("NDims")?;
    if ndims != "3" {
        return Err(Error::MalformedHeader(format!("NDims = {ndims}, only 3 is supported")));
    }
    let dims = parse_triple::<usize>("DimSize", get("DimSize")?)?;
    let spacing = parse_triple::<f64>("ElementSpacing", get("ElementSpacing")?)?;
    let origin = match fields.get("Offset") {
        Some(v) => parse_triple::<f64>("Offset", v)?,
        None => [0.0; 3],
    };
    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let element = ElementType::parse(get("ElementType")?)?;
    let data_file = get("ElementDataFile")?;
    if data_file == "LOCAL" {
        return Err(Error::MalformedHeader(
            "inline (LOCAL) payloads are not supported".into(),
        ));
    }
    let data_file = path.parent().unwrap_or(Path::new(".")).join(data_file);
    let palette = fields.get("LabelPalette").map(|v| parse_palette(v)).transpose()?;
    Ok(Header {
        geometry,
        element,
        data_file,
        palette,
    })
}

fn read_payload(header: &Header) -> Result<Vec<u8>> {
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let size = header.element.size();
    let expected = header.geometry.len();
    if bytes.len() != expected * size {
        return Err(Error::DataLengthMismatch {
            expected,
            found: bytes.len() / size,
        });
    }
    Ok(bytes)
}

fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_header(path: &Path, geometry: &Geometry, element: ElementType, palette: Option<&Palette>) -> Result<PathBuf> {
    let raw = raw_path(path);
    let raw_name = raw
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let [nx, ny, nz] = geometry.dims;
    let [sx, sy, sz] = geometry.spacing;
    let [ox, oy, oz] = geometry.origin;
    let mut text = format!(
        "NDims = 3\nDimSize = {nx} {ny} {nz}\nElementSpacing = {sx:?} {sy:?} {sz:?}\n\
         Offset = {ox:?} {oy:?} {oz:?}\nElementType = {}\n",
        element.name()
    );
    if let Some(p) = palette {
        let entries: Vec<String> = p.iter().map(|(l, n)| format!("{l}:{n}")).collect();
        text.push_str(&format!("LabelPalette = {}\n", entries.join(",")));
    }
    // MetaImage readers expect ElementDataFile last.
    text.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(raw)
}

/// Loads a `FLOAT32` volume from a header path.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let header = read_header(path.as_ref())?;
    if header.element != ElementType::Float32 {
        return Err(Error::UnsupportedElementType(format!(
            "{} (scalar volumes must be FLOAT32)",
            header.element.name()
        )));
    }
    let bytes = read_payload(&header)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.geometry, data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let raw = write_header(path.as_ref(), v.geometry(), ElementType::Float32, None)?;
    let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

/// Loads a `UINT8` label volume. Without a `LabelPalette` key the palette
/// defaults to the cartilage classes.
pub fn load_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let header = read_header(path.as_ref())?;
    if header.element != ElementType::UInt8 {
        return Err(Error::UnsupportedElementType(format!(
            "{} (label volumes must be UINT8)",
            header.element.name()
        )));
    }
    let bytes = read_payload(&header)?;
    let palette = header.palette.clone().unwrap_or_else(Palette::cartilage);
    LabelVolume::new(header.geometry, bytes, palette)
}

pub fn save_label_volume(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let raw = write_header(path.as_ref(), v.geometry(), ElementType::UInt8, Some(v.palette()))?;
    fs::write(&raw, v.labels()).map_err(|e| Error::io(&raw, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelIndex;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled(Geometry::unit([2, 2, 2]).unwrap(), 0.0);
        let p = dir.path().join("z.mhd");
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn anisotropic_spacing_survives_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([3, 4, 5], [0.365, 0.365, 0.7], [-12.25, 0.1, 3.0]).unwrap();
        let v = Volume::from_fn(g, |i| (i.x * 7 + i.y * 3) as f32 * 0.1 - i.z as f32).unwrap();
        let p = dir.path().join("a.mhd");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.geometry(), v.geometry());
        assert_eq!(back.spacing(), [0.365, 0.365, 0.7]);
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn short_payload_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.mhd");
        fs::write(
            &p,
            "NDims = 3\nDimSize = 3 3 3\nElementSpacing = 1 1 1\nOffset = 0 0 0\n\
             ElementType = FLOAT32\nElementDataFile = s.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 26 * 4]).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("data length mismatch"), "{err}");
    }

    #[test]
    fn malformed_and_unsupported_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mhd");
        fs::write(&p, "NDims = 3\nDimSize = 3 3\n").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MalformedHeader(_))));
        fs::write(
            &p,
            "NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\nElementType = INT16\nElementDataFile = m.raw\n",
        )
        .unwrap();
        assert!(matches!(load_volume(&p), Err(Error::UnsupportedElementType(_))));
    }

    #[test]
    fn label_volume_round_trip_keeps_palette() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::unit([3, 2, 2]).unwrap();
        let labels = (0..12).map(|i| (i % 4) as u8).collect();
        let v = LabelVolume::new(g, labels, Palette::bones()).unwrap();
        let p = dir.path().join("l.mhd");
        save_label_volume(&v, &p).unwrap();
        let back = load_label_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get(VoxelIndex::new(1, 0, 0)), 1);
        // A label file is not a scalar volume.
        assert!(matches!(load_volume(&p), Err(Error::UnsupportedElementType(_))));
    }
}
