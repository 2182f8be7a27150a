//! Labeled image datasets: IDX ingestion and a synthetic shapes generator.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Geometry, Image};
use crate::rng::substream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    Unspecified,
}

/// Images stored back to back in height-width-channel order, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    geometry: Geometry,
    classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(
        geometry: Geometry,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let images = if geometry.is_empty() {
            0
        } else {
            pixels.len() / geometry.len()
        };
        if images * geometry.len() != pixels.len() {
            return Err(Error::Shape {
                dimension: "dataset pixels",
                expected: images * geometry.len(),
                actual: pixels.len(),
            });
        }
        if images != labels.len() {
            return Err(Error::Count {
                images,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Bounds {
                what: "label",
                index: bad,
                len: classes,
            });
        }
        Ok(Dataset {
            geometry,
            classes,
            pixels,
            labels,
            split,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self, index: usize) -> &[f64] {
        let n = self.geometry.len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Image {
        Image::from_raw(self.geometry, self.pixels(index).to_vec())
    }

    /// Keeps the first `count` samples.
    pub fn truncated(mut self, count: usize) -> Self {
        let count = count.min(self.len());
        self.pixels.truncate(count * self.geometry.len());
        self.labels.truncate(count);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Idx {
            offset,
            message: "unexpected end of file in header".into(),
        })
}

/// Parses an IDX image file (`N×H×W` or `N×H×W×C` unsigned bytes) and its
/// label file, scaling pixels to `[0, 1]`. The class count is one more than
/// the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let labels = labels.as_ref();
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (geometry, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    let count = pixels.len() / geometry.len().max(1);
    if count != labels.len() {
        return Err(Error::Count {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(geometry, pixels, labels, classes, Split::Unspecified)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(Geometry, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_COLOR_IMAGES_MAGIC => 4,
        other => {
            return Err(Error::Idx {
                offset: 0,
                message: format!("bad magic {other:#010x} for an image file"),
            })
        }
    };
    let count = be_u32(bytes, 4)? as usize;
    let height = be_u32(bytes, 8)? as usize;
    let width = be_u32(bytes, 12)? as usize;
    let channels = if dims == 4 { be_u32(bytes, 16)? as usize } else { 1 };
    let header = 4 + 4 * dims;
    let geometry = Geometry::new(height, width, channels);
    let needed = count * geometry.len();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < needed {
        return Err(Error::Idx {
            offset: header + body.len(),
            message: format!("truncated: expected {needed} pixel bytes, found {}", body.len()),
        });
    }
    if body.len() > needed {
        return Err(Error::Idx {
            offset: header + needed,
            message: "trailing bytes after pixel data".into(),
        });
    }
    Ok((geometry, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            message: format!("bad magic {magic:#010x} for a label file"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8.min(bytes.len())..];
    if body.len() != count {
        return Err(Error::Idx {
            offset: 8 + body.len().min(count),
            message: format!("expected {count} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Writes a dataset as an IDX image/label pair, quantizing pixels to bytes.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let g = data.geometry();
    let mut img = Vec::with_capacity(20 + data.len() * g.len());
    if g.channels == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    } else {
        img.extend_from_slice(&IDX_COLOR_IMAGES_MAGIC.to_be_bytes());
    }
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(g.height as u32).to_be_bytes());
    img.extend_from_slice(&(g.width as u32).to_be_bytes());
    if g.channels != 1 {
        img.extend_from_slice(&(g.channels as u32).to_be_bytes());
    }
    img.extend(data.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));

    let mut lbl = Vec::with_capacity(8 + data.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in data.labels() {
        let byte = u8::try_from(l)
            .map_err(|_| Error::InvalidValue(format!("label {l} does not fit in a byte")))?;
        lbl.push(byte);
    }
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lbl).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// How labels are assigned to generated shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeGrammar {
    /// Everything is class 0.
    Single,
    /// Class 0: shape in the left half; class 1: right half.
    Position,
    /// Class by shape kind: circle, square, triangle.
    Kind,
    /// Class by color: red, green, blue.
    Color,
}

impl ShapeGrammar {
    pub fn classes(self) -> usize {
        match self {
            ShapeGrammar::Single => 1,
            ShapeGrammar::Position => 2,
            ShapeGrammar::Kind | ShapeGrammar::Color => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const PALETTE: [[f64; 3]; 3] = [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.4, 1.0]];

/// Renders `count` images of one colored shape on a dark background. Pixel
/// values are multiples of 1/255, so an IDX round trip is lossless.
pub fn gen_shapes(count: usize, geometry: Geometry, grammar: ShapeGrammar, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidValue("shape count must be positive".into()));
    }
    if geometry.channels != 1 && geometry.channels != 3 {
        return Err(Error::InvalidValue(format!(
            "shapes need 1 or 3 channels, got {}",
            geometry.channels
        )));
    }
    if geometry.height < 8 || geometry.width < 8 {
        return Err(Error::InvalidValue("shape images must be at least 8x8".into()));
    }
    let mut rng = substream(seed, "shapes");
    let mut pixels = Vec::with_capacity(count * geometry.len());
    let mut labels = Vec::with_capacity(count);
    let (h, w) = (geometry.height as f64, geometry.width as f64);
    let kinds = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    for i in 0..count {
        let label = i % grammar.classes();
        let kind = match grammar {
            ShapeGrammar::Kind => kinds[label],
            _ => kinds[rng.gen_range(0..3)],
        };
        let color = match grammar {
            ShapeGrammar::Color => PALETTE[label],
            _ => PALETTE[rng.gen_range(0..3)],
        };
        let radius = rng.gen_range(0.14..0.22) * h.min(w);
        let cy = rng.gen_range(radius..h - radius);
        let cx = match grammar {
            ShapeGrammar::Position if label == 0 => rng.gen_range(radius..w / 2.0 - 1.0),
            ShapeGrammar::Position => rng.gen_range(w / 2.0 + 1.0..w - radius),
            _ => rng.gen_range(radius..w - radius),
        };
        let background = rng.gen_range(0.0..0.1);
        for y in 0..geometry.height {
            for x in 0..geometry.width {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = match kind {
                    ShapeKind::Circle => (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius,
                    ShapeKind::Square => (py - cy).abs() <= radius * 0.85 && (px - cx).abs() <= radius * 0.85,
                    ShapeKind::Triangle => {
                        // apex up; base at cy + r
                        let t = (py - (cy - radius)) / (2.0 * radius);
                        (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * radius
                    }
                };
                let rgb = if inside { color } else { [background; 3] };
                if geometry.channels == 1 {
                    pixels.push(quantize((rgb[0] + rgb[1] + rgb[2]) / 3.0));
                } else {
                    pixels.extend(rgb.iter().map(|&v| quantize(v)));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(geometry, pixels, labels, grammar.classes(), Split::Unspecified)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2×3 images and labels, assembled byte by byte.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        img.extend_from_slice(&[255, 0, 255, 0, 255, 0]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lbl)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lbl).unwrap();
        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.geometry(), Geometry::new(2, 3, 1));
        assert_eq!(data.labels(), &[7, 3]);
        assert_eq!(data.pixels(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(data.pixels(1), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let (mut img, _) = fixture();
        img[3] = 1;
        assert!(matches!(parse_idx_images(&img), Err(Error::Idx { offset: 0, .. })));
        let (img, _) = fixture();
        assert!(matches!(parse_idx_labels(&img), Err(Error::Idx { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let (img, _) = fixture();
        match parse_idx_images(&img[..20]) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(matches!(parse_idx_images(&img[..6]), Err(Error::Idx { offset: 4, .. })));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Count { images: 2, labels: 3 })));
    }

    #[test]
    fn shapes_are_deterministic_and_round_trip() {
        let g = Geometry::new(16, 16, 3);
        let a = gen_shapes(12, g, ShapeGrammar::Kind, 3).unwrap();
        let b = gen_shapes(12, g, ShapeGrammar::Kind, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_shapes(12, g, ShapeGrammar::Kind, 4).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&a, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), a.labels());
        for i in 0..a.len() {
            assert_eq!(back.pixels(i), a.pixels(i));
        }
    }

    #[test]
    fn single_class_grammar() {
        let d = gen_shapes(9, Geometry::new(12, 12, 1), ShapeGrammar::Single, 0).unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
        assert_eq!(d.classes(), 1);
    }

    #[test]
    fn position_grammar_places_mass_on_the_labelled_side() {
        let g = Geometry::new(20, 20, 1);
        let d = gen_shapes(40, g, ShapeGrammar::Position, 1).unwrap();
        for i in 0..d.len() {
            let img = d.image(i);
            let (mut left, mut right) = (0.0, 0.0);
            for y in 0..20 {
                for x in 0..20 {
                    let v = img.pixel(y, x)[0];
                    if x < 10 { left += v } else { right += v }
                }
            }
            assert_eq!(usize::from(right > left), d.labels()[i]);
        }
    }
}
