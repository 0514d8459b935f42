//! Annotation rasters: decoding dataset-native label images, remapping them
//! into the universal label-space and writing universal label PNGs.

use std::collections::HashMap;
use std::fmt;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::{ClassMap, DatasetTaxonomy, Encoding, Lut, Strictness, IGNORE_ID};

/// Which label-space the ids of a raster live in.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SpaceTag {
    Local(String),
    Universal,
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceTag::Local(d) => write!(f, "local({d})"),
            SpaceTag::Universal => f.write_str("universal"),
        }
    }
}

/// Dense row-major grid of 8-bit class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRaster {
    width: u32,
    height: u32,
    ids: Vec<u8>,
    space: SpaceTag,
}

impl AnnotationRaster {
    pub fn new(width: u32, height: u32, ids: Vec<u8>, space: SpaceTag) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!("empty raster {width}x{height}")));
        }
        if ids.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(Error::InvalidRaster(format!(
                "{} ids for a {width}x{height} raster",
                ids.len()
            )));
        }
        Ok(AnnotationRaster { width, height, ids, space })
    }

    pub fn universal(width: u32, height: u32, ids: Vec<u8>) -> Result<Self> {
        Self::new(width, height, ids, SpaceTag::Universal)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn space(&self) -> &SpaceTag {
        &self.space
    }

    pub fn into_ids(self) -> Vec<u8> {
        self.ids
    }

    pub(crate) fn coords(&self, index: usize) -> (u32, u32) {
        let w = self.width as usize;
        ((index % w) as u32, (index / w) as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

/// A decoded label image before interpretation: interleaved samples with a
/// channel count. Palette PNGs keep their raw palette indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub samples: Samples,
}

impl LabelImage {
    pub fn gray8(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        LabelImage { width, height, channels: 1, samples: Samples::U8(pixels) }
    }

    pub fn gray16(width: u32, height: u32, pixels: Vec<u16>) -> Self {
        LabelImage { width, height, channels: 1, samples: Samples::U16(pixels) }
    }

    pub fn rgb8(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        LabelImage { width, height, channels: 3, samples: Samples::U8(pixels) }
    }

    pub fn bit_depth(&self) -> u8 {
        match self.samples {
            Samples::U8(_) => 8,
            Samples::U16(_) => 16,
        }
    }
}

/// Opt-in narrowing of 16-bit label maps to 8 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Narrowing {
    /// 16-bit value to read as the ignore id.
    pub ignore_sentinel: Option<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DecodeOptions {
    pub strictness: Strictness,
    /// `None` rejects 16-bit input.
    pub narrowing: Option<Narrowing>,
}

/// Reads a PNG or BMP label image from disk.
pub fn read_label_image(path: &Path) -> Result<LabelImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_label_bytes(&bytes).map_err(|e| match e {
        Error::Decode { message, .. } => Error::Decode { path: path.to_path_buf(), message },
        other => other,
    })
}

/// Decodes PNG or BMP bytes, sniffing the format from the magic number.
pub fn decode_label_bytes(bytes: &[u8]) -> Result<LabelImage> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"BM") {
        decode_bmp(bytes)
    } else {
        Err(decode_error("not a PNG or BMP file"))
    }
}

fn decode_error(message: impl Into<String>) -> Error {
    Error::Decode { path: Default::default(), message: message.into() }
}

fn decode_png(bytes: &[u8]) -> Result<LabelImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_error(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_error("image too large"))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| decode_error(e.to_string()))?;
    buf.truncate(frame.buffer_size());

    let channels = match frame.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
    };
    let samples = match frame.bit_depth {
        png::BitDepth::Eight => Samples::U8(buf),
        png::BitDepth::Sixteen => Samples::U16(
            buf.chunks_exact(2)
                .map(|pair| u16::from_be_bytes([pair[0], pair[1]]))
                .collect(),
        ),
        other => return Err(Error::BitDepth { depth: other as u8 }),
    };
    Ok(LabelImage { width: frame.width, height: frame.height, channels, samples })
}

fn decode_bmp(bytes: &[u8]) -> Result<LabelImage> {
    let image = image::load_from_memory_with_format(bytes, image::ImageFormat::Bmp)
        .map_err(|e| decode_error(e.to_string()))?;
    let (width, height) = (image.width(), image.height());
    Ok(match image {
        image::DynamicImage::ImageLuma8(buf) => LabelImage::gray8(width, height, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => LabelImage::rgb8(width, height, buf.into_raw()),
        image::DynamicImage::ImageRgba8(buf) => LabelImage {
            width,
            height,
            channels: 4,
            samples: Samples::U8(buf.into_raw()),
        },
        other => return Err(decode_error(format!("unsupported BMP layout {:?}", other.color()))),
    })
}

/// Interprets a single-channel label image as class ids.
pub fn decode_indexed(
    image: &LabelImage,
    dataset: &str,
    narrowing: Option<Narrowing>,
) -> Result<AnnotationRaster> {
    if image.channels != 1 {
        return Err(Error::ExpectedSingleChannel { channels: image.channels });
    }
    let ids = match (&image.samples, narrowing) {
        (Samples::U8(pixels), _) => pixels.clone(),
        (Samples::U16(_), None) => return Err(Error::BitDepth { depth: 16 }),
        (Samples::U16(pixels), Some(narrowing)) => {
            let mut ids = Vec::with_capacity(pixels.len());
            for (i, &value) in pixels.iter().enumerate() {
                let id = if Some(value) == narrowing.ignore_sentinel {
                    IGNORE_ID
                } else if value <= 0xFF {
                    value as u8
                } else {
                    let w = image.width as usize;
                    return Err(Error::NarrowingOverflow {
                        value,
                        x: (i % w) as u32,
                        y: (i / w) as u32,
                    });
                };
                ids.push(id);
            }
            ids
        }
    };
    AnnotationRaster::new(image.width, image.height, ids, SpaceTag::Local(dataset.to_string()))
}

/// Class id of a binary color code: R contributes 4, G 2 and B 1 when the
/// channel is at least 128.
#[inline]
pub fn color_code_id(r: u8, g: u8, b: u8) -> u8 {
    ((r >> 7) << 2) | ((g >> 7) << 1) | (b >> 7)
}

/// Canonical color of a color-coded id in 0..8.
pub fn color_code_color(id: u8) -> [u8; 3] {
    let bit = |mask: u8| if id & mask != 0 { 255 } else { 0 };
    [bit(4), bit(2), bit(1)]
}

#[inline]
fn in_strict_color_range(channel: u8) -> bool {
    channel <= 31 || channel >= 224
}

/// Interprets a 3-channel binary color-coded label image as class ids.
pub fn decode_color_coded(
    image: &LabelImage,
    dataset: &str,
    strictness: Strictness,
) -> Result<AnnotationRaster> {
    if image.channels != 3 {
        return Err(Error::ExpectedThreeChannels { channels: image.channels });
    }
    let Samples::U8(pixels) = &image.samples else {
        return Err(Error::BitDepth { depth: image.bit_depth() });
    };
    let w = image.width as usize;
    let mut ids = Vec::with_capacity(pixels.len() / 3);
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        let (r, g, b) = (px[0], px[1], px[2]);
        if strictness == Strictness::Strict
            && !(in_strict_color_range(r) && in_strict_color_range(g) && in_strict_color_range(b))
        {
            return Err(Error::ColorRange { x: (i % w) as u32, y: (i / w) as u32, r, g, b });
        }
        ids.push(color_code_id(r, g, b));
    }
    AnnotationRaster::new(image.width, image.height, ids, SpaceTag::Local(dataset.to_string()))
}

/// Maps a local raster into the universal label-space through `lut`.
pub fn remap(raster: &AnnotationRaster, lut: &Lut) -> Result<AnnotationRaster> {
    match raster.space() {
        SpaceTag::Local(d) if d == lut.dataset_id() => {}
        other => {
            return Err(Error::SpaceMismatch {
                expected: SpaceTag::Local(lut.dataset_id().to_string()).to_string(),
                found: other.to_string(),
            })
        }
    }
    let table = lut.table();
    let mut seen = 0u16;
    let ids: Vec<u8> = raster
        .ids
        .iter()
        .map(|&v| {
            let mapped = table[usize::from(v)];
            seen |= mapped;
            mapped as u8
        })
        .collect();
    if seen & Lut::POISON != 0 {
        let index = raster
            .ids
            .iter()
            .position(|&v| table[usize::from(v)] & Lut::POISON != 0)
            .expect("poisoned entry was observed");
        let (x, y) = raster.coords(index);
        return Err(Error::UndeclaredId {
            dataset: lut.dataset_id().to_string(),
            id: raster.ids[index],
            x,
            y,
        });
    }
    Ok(AnnotationRaster { width: raster.width, height: raster.height, ids, space: SpaceTag::Universal })
}

/// Encodes a universal raster as an 8-bit grayscale PNG.
pub fn encode_universal(raster: &AnnotationRaster, class_count: usize) -> Result<Vec<u8>> {
    if raster.space != SpaceTag::Universal {
        return Err(Error::SpaceMismatch {
            expected: SpaceTag::Universal.to_string(),
            found: raster.space.to_string(),
        });
    }
    check_universal_ids(raster, class_count)?;
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, raster.width, raster.height);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Fast);
        let mut writer = encoder.write_header().map_err(|e| Error::InvalidRaster(e.to_string()))?;
        writer
            .write_image_data(&raster.ids)
            .map_err(|e| Error::InvalidRaster(e.to_string()))?;
        writer.finish().map_err(|e| Error::InvalidRaster(e.to_string()))?;
    }
    Ok(out)
}

pub(crate) fn check_universal_ids(raster: &AnnotationRaster, class_count: usize) -> Result<()> {
    if let Some(&id) = raster
        .ids
        .iter()
        .find(|&&id| id != IGNORE_ID && usize::from(id) >= class_count)
    {
        return Err(Error::OutOfSpace { id, k: class_count });
    }
    Ok(())
}

/// Reads a universal label PNG written by [`encode_universal`].
pub fn read_universal(path: &Path, class_count: usize) -> Result<AnnotationRaster> {
    let image = read_label_image(path)?;
    let local = decode_indexed(&image, "", None)?;
    let raster = AnnotationRaster { space: SpaceTag::Universal, ..local };
    check_universal_ids(&raster, class_count)?;
    Ok(raster)
}

/// Decodes dataset-native annotations straight into the universal space.
#[derive(Clone, Debug)]
pub struct UniversalLoader {
    datasets: HashMap<String, (Encoding, Lut)>,
    options: DecodeOptions,
}

impl UniversalLoader {
    pub fn new(taxonomies: &[DatasetTaxonomy], map: &ClassMap, options: DecodeOptions) -> Result<Self> {
        let mut datasets = HashMap::new();
        for taxonomy in taxonomies {
            let lut = map.build_lut(&taxonomy.dataset_id, options.strictness)?;
            datasets.insert(taxonomy.dataset_id.clone(), (taxonomy.encoding, lut));
        }
        Ok(UniversalLoader { datasets, options })
    }

    pub fn decode(&self, dataset: &str, image: &LabelImage) -> Result<AnnotationRaster> {
        let (encoding, lut) = self
            .datasets
            .get(dataset)
            .ok_or_else(|| Error::UnknownDataset(dataset.to_string()))?;
        let local = match encoding {
            Encoding::Indexed => decode_indexed(image, dataset, self.options.narrowing)?,
            Encoding::ColorCoded => decode_color_coded(image, dataset, self.options.strictness)?,
        };
        remap(&local, lut)
    }

    pub fn load(&self, dataset: &str, path: &Path) -> Result<AnnotationRaster> {
        let image = read_label_image(path)?;
        self.decode(dataset, &image).map_err(|e| match e {
            Error::UndeclaredId { .. } | Error::ColorRange { .. } | Error::NarrowingOverflow { .. } => {
                Error::Decode { path: path.to_path_buf(), message: e.to_string() }
            }
            other => other,
        })
    }
}
