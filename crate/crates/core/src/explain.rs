//! Receptive-field mapping, highlight rendering and explanation records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Cell, Edit};
use crate::image::{Geometry, Image};
use crate::nn::{LayerSpec, ModelBundle};
use crate::search::{ExplanationResult, SearchConfig, Status, TrajectoryPoint};

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }

    /// Center in pixel coordinates (may be fractional).
    pub fn center(&self) -> (f64, f64) {
        (
            (self.top + self.bottom) as f64 / 2.0,
            (self.left + self.right) as f64 / 2.0,
        )
    }
}

/// Input-pixel rectangle of every feature cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFieldMap {
    grid_height: usize,
    grid_width: usize,
    image: Geometry,
    field: usize,
    stride: usize,
    offset: i64,
    rects: Vec<Rect>,
}

impl ReceptiveFieldMap {
    /// Runs the field/jump recurrence over `extractor` for inputs of
    /// geometry `input`.
    pub fn new(extractor: &[LayerSpec], input: Geometry) -> Result<Self> {
        let mut field = 1usize;
        let mut jump = 1usize;
        let mut offset = 0i64;
        let mut geometry = input;
        for spec in extractor {
            let (kernel, stride, padding) = match *spec {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => (kernel, stride, padding),
                LayerSpec::MaxPool2d { window, stride } => (window, stride, 0),
                LayerSpec::Relu => (1, 1, 0),
                other => {
                    return Err(Error::UnsupportedLayer {
                        kind: other.kind().to_string(),
                        reason: "receptive fields need a purely spatial extractor".into(),
                    })
                }
            };
            geometry = spec.output_geometry(geometry)?;
            offset -= (padding * jump) as i64;
            field += (kernel - 1) * jump;
            jump *= stride;
        }
        let clip = |lo: i64, len: usize| -> (usize, usize) {
            let hi = lo + field as i64 - 1;
            (lo.max(0) as usize, hi.min(len as i64 - 1) as usize)
        };
        let mut rects = Vec::with_capacity(geometry.height * geometry.width);
        for r in 0..geometry.height {
            for c in 0..geometry.width {
                let (top, bottom) = clip(offset + (r * jump) as i64, input.height);
                let (left, right) = clip(offset + (c * jump) as i64, input.width);
                rects.push(Rect {
                    top,
                    left,
                    bottom,
                    right,
                });
            }
        }
        Ok(ReceptiveFieldMap {
            grid_height: geometry.height,
            grid_width: geometry.width,
            image: input,
            field,
            stride: jump,
            offset,
            rects,
        })
    }

    pub fn for_model(model: &ModelBundle) -> Result<Self> {
        Self::new(&model.extractor_specs(), model.input_geometry())
    }

    /// Unclipped side length of every field.
    pub fn field_size(&self) -> usize {
        self.field
    }

    /// Pixel distance between neighbouring cells' fields.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Unclipped top-left coordinate of cell (0, 0); negative under padding.
    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn image_geometry(&self) -> Geometry {
        self.image
    }

    pub fn rect(&self, cell: usize) -> Result<Rect> {
        self.rects.get(cell).copied().ok_or(Error::Bounds {
            what: "feature cell",
            index: cell,
            len: self.rects.len(),
        })
    }

    pub fn rect_at(&self, cell: Cell) -> Result<Rect> {
        if cell.row >= self.grid_height || cell.col >= self.grid_width {
            return Err(Error::Bounds {
                what: "feature cell",
                index: cell.row * self.grid_width + cell.col,
                len: self.rects.len(),
            });
        }
        self.rect(cell.row * self.grid_width + cell.col)
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }
}

/// Pixel rectangle of one feature cell.
pub fn receptive_field(extractor: &[LayerSpec], input: Geometry, cell: Cell) -> Result<Rect> {
    ReceptiveFieldMap::new(extractor, input)?.rect_at(cell)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HighlightMode {
    /// Uniform intensity over the rectangle.
    HardBox,
    /// Intensity falls off quadratically from the rectangle center, reaching
    /// half the weight at the corners.
    SoftBox,
}

/// Per-pixel highlight intensity in `[0, 1]` for weighted cells; overlaps
/// take the maximum.
pub fn highlight_mask(
    cells: &[(usize, f64)],
    rf: &ReceptiveFieldMap,
    mode: HighlightMode,
) -> Result<Vec<f64>> {
    let g = rf.image_geometry();
    let mut mask = vec![0.0f64; g.height * g.width];
    for &(cell, weight) in cells {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidValue(format!(
                "highlight weight {weight} is outside [0, 1]"
            )));
        }
        let rect = rf.rect(cell)?;
        let (cy, cx) = rect.center();
        let (hy, hx) = (rect.height() as f64 / 2.0, rect.width() as f64 / 2.0);
        for y in rect.top..=rect.bottom {
            for x in rect.left..=rect.right {
                let v = match mode {
                    HighlightMode::HardBox => weight,
                    HighlightMode::SoftBox => {
                        let rho2 = ((y as f64 - cy) / hy).powi(2) + ((x as f64 - cx) / hx).powi(2);
                        weight * (1.0 - rho2 / 2.0)
                    }
                };
                let slot = &mut mask[y * g.width + x];
                *slot = slot.max(v);
            }
        }
    }
    Ok(mask)
}

/// Highlight color per channel count: red for color images, white for gray.
fn highlight_color(channels: usize) -> Vec<f64> {
    match channels {
        3 => vec![1.0, 0.0, 0.0],
        c => vec![1.0; c],
    }
}

/// Blends the highlight color over `image` with the mask as opacity.
pub fn render_heatmap(
    image: &Image,
    cells: &[(usize, f64)],
    rf: &ReceptiveFieldMap,
    mode: HighlightMode,
) -> Result<Image> {
    let g = rf.image_geometry();
    for (dimension, expected, actual) in [("height", g.height, image.height()), ("width", g.width, image.width())] {
        if expected != actual {
            return Err(Error::Shape {
                dimension,
                expected,
                actual,
            });
        }
    }
    let mask = highlight_mask(cells, rf, mode)?;
    let color = highlight_color(image.channels());
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let a = mask[y * image.width() + x];
            if a == 0.0 {
                continue;
            }
            for (p, &c) in out.pixel_mut(y, x).iter_mut().zip(&color) {
                *p = (1.0 - a) * *p + a * c;
            }
        }
    }
    Ok(out)
}

/// Pastes each edit's distractor region onto the query, aligning rectangle
/// centers and using the query cell's highlight as per-pixel alpha. Edits are
/// applied in order.
pub fn render_composite(
    query: &Image,
    distractor: &Image,
    edits: &[(usize, usize)],
    rf_query: &ReceptiveFieldMap,
    rf_distractor: &ReceptiveFieldMap,
    mode: HighlightMode,
) -> Result<Image> {
    query.geometry().check(&distractor.geometry())?;
    rf_query.image_geometry().check(&query.geometry())?;
    rf_distractor.image_geometry().check(&distractor.geometry())?;
    let (h, w) = (query.height() as i64, query.width() as i64);
    let mut out = query.clone();
    for &(qi, di) in edits {
        let rq = rf_query.rect(qi)?;
        let rd = rf_distractor.rect(di)?;
        let alpha = highlight_mask(&[(qi, 1.0)], rf_query, mode)?;
        let (qy, qx) = rq.center();
        let (dy, dx) = rd.center();
        let (oy, ox) = ((dy - qy).round() as i64, (dx - qx).round() as i64);
        for y in rq.top..=rq.bottom {
            for x in rq.left..=rq.right {
                let a = alpha[y * query.width() + x];
                let (sy, sx) = (y as i64 + oy, x as i64 + ox);
                if a == 0.0 || sy < 0 || sx < 0 || sy >= h || sx >= w {
                    continue;
                }
                let src = distractor.pixel(sy as usize, sx as usize).to_vec();
                for (p, s) in out.pixel_mut(y, x).iter_mut().zip(src) {
                    *p = (1.0 - a) * *p + a * s;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedExplanation {
    pub query_heatmap: Image,
    pub distractor_heatmap: Image,
    pub composite: Image,
}

/// Renders both highlight maps and the composite for `result`. Gray inputs
/// are promoted to RGB so the highlight shows in red.
pub fn render_explanation(
    result: &ExplanationResult,
    query: &Image,
    distractor: &Image,
    rf: &ReceptiveFieldMap,
    mode: HighlightMode,
) -> Result<RenderedExplanation> {
    let cells = |pick: fn(&Edit) -> Cell| -> Result<Vec<(usize, f64)>> {
        result
            .edits
            .iter()
            .map(|e| {
                let c = pick(e);
                rf.rect_at(c)?;
                Ok((c.row * rf.grid_width() + c.col, 1.0))
            })
            .collect()
    };
    let q_cells = cells(|e| e.query)?;
    let d_cells = cells(|e| e.distractor)?;
    let pairs: Vec<(usize, usize)> = q_cells.iter().zip(&d_cells).map(|(q, d)| (q.0, d.0)).collect();
    Ok(RenderedExplanation {
        query_heatmap: render_heatmap(&query.to_rgb(), &q_cells, rf, mode)?,
        distractor_heatmap: render_heatmap(&distractor.to_rgb(), &d_cells, rf, mode)?,
        composite: render_composite(query, distractor, &pairs, rf, rf, mode)?,
    })
}

/// Binary PGM (one channel) or PPM (three channels), max value 255.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidValue(format!(
                "PNM output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format("pnm header", "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let channels = match token(&mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("pnm magic", format!("unsupported `{other}`"))),
    };
    let number = |pos: &mut usize, field: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse()
            .map_err(|_| Error::format(field, format!("`{t}` is not an integer")))
    };
    let width = number(&mut pos, "pnm width")?;
    let height = number(&mut pos, "pnm height")?;
    let maxval = number(&mut pos, "pnm maxval")?;
    if maxval != 255 {
        return Err(Error::format("pnm maxval", format!("expected 255, got {maxval}")));
    }
    pos += 1; // single whitespace before the raster
    let geometry = Geometry::new(height, width, channels);
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != geometry.len() {
        return Err(Error::format(
            "pnm raster",
            format!("expected {} bytes, found {}", geometry.len(), data.len()),
        ));
    }
    Image::new(geometry, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_pnm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub const RECORD_FORMAT_VERSION: u32 = 1;
const RECORD_TAG: &str = "cfx-explanation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRecord {
    pub query: Cell,
    pub distractor: Cell,
    pub query_rect: Rect,
    pub distractor_rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

/// On-disk explanation: the search result plus pixel rectangles and the
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub format: String,
    pub version: u32,
    pub query_id: Option<String>,
    pub distractor_id: Option<String>,
    pub query_class: usize,
    pub target_class: usize,
    pub distractor_class: usize,
    pub status: Status,
    pub grid: GridShape,
    pub edits: Vec<EditRecord>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub config: SearchConfig,
}

impl ExplanationRecord {
    pub fn new(result: &ExplanationResult, rf: &ReceptiveFieldMap, config: &SearchConfig) -> Result<Self> {
        let edits = result
            .edits
            .iter()
            .map(|e| {
                Ok(EditRecord {
                    query: e.query,
                    distractor: e.distractor,
                    query_rect: rf.rect_at(e.query)?,
                    distractor_rect: rf.rect_at(e.distractor)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExplanationRecord {
            format: RECORD_TAG.into(),
            version: RECORD_FORMAT_VERSION,
            query_id: result.query_id.clone(),
            distractor_id: result.distractor_id.clone(),
            query_class: result.query_class,
            target_class: result.target_class,
            distractor_class: result.distractor_class,
            status: result.status,
            grid: GridShape {
                height: result.grid_height,
                width: result.grid_width,
            },
            edits,
            trajectory: result.trajectory.clone(),
            config: config.clone(),
        })
    }

    pub fn to_result(&self) -> ExplanationResult {
        ExplanationResult {
            query_id: self.query_id.clone(),
            distractor_id: self.distractor_id.clone(),
            query_class: self.query_class,
            target_class: self.target_class,
            distractor_class: self.distractor_class,
            grid_height: self.grid.height,
            grid_width: self.grid.width,
            edits: self
                .edits
                .iter()
                .map(|e| Edit {
                    query: e.query,
                    distractor: e.distractor,
                })
                .collect(),
            trajectory: self.trajectory.clone(),
            status: self.status,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::format("record", e.to_string()))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(RECORD_TAG) => {}
            Some(other) => {
                return Err(Error::format("format", format!("expected `{RECORD_TAG}`, got `{other}`")))
            }
            None => return Err(Error::format("format", "missing or not a string")),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == RECORD_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v as u32,
                    supported: RECORD_FORMAT_VERSION,
                })
            }
            None => return Err(Error::format("version", "missing or not an integer")),
        }
        let record: ExplanationRecord =
            serde_json::from_value(value).map_err(|e| Error::format("record", e.to_string()))?;
        if record.trajectory.len() != record.edits.len() + 1 {
            return Err(Error::format(
                "trajectory",
                format!(
                    "expected {} entries for {} edits, found {}",
                    record.edits.len() + 1,
                    record.edits.len(),
                    record.trajectory.len()
                ),
            ));
        }
        Ok(record)
    }
}

/// Paths written by [`write_explanation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenExplanation {
    pub record: PathBuf,
    pub rasters: Vec<PathBuf>,
}

/// Writes `<stem>.json` and, when given, `<stem>-query.ppm`,
/// `<stem>-distractor.ppm` and `<stem>-composite.p?m` into `dir`.
pub fn write_explanation(
    record: &ExplanationRecord,
    renders: Option<&RenderedExplanation>,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<WrittenExplanation> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record_path = dir.join(format!("{stem}.json"));
    fs::write(&record_path, record.to_json()).map_err(|e| Error::io(&record_path, e))?;
    let mut rasters = Vec::new();
    if let Some(r) = renders {
        for (name, image) in [
            ("query", &r.query_heatmap),
            ("distractor", &r.distractor_heatmap),
            ("composite", &r.composite),
        ] {
            let ext = if image.channels() == 1 { "pgm" } else { "ppm" };
            let path = dir.join(format!("{stem}-{name}.{ext}"));
            write_pnm(image, &path)?;
            rasters.push(path);
        }
    }
    Ok(WrittenExplanation {
        record: record_path,
        rasters,
    })
}

pub fn read_explanation(path: impl AsRef<Path>) -> Result<ExplanationRecord> {
    let path = path.as_ref();
    ExplanationRecord::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
