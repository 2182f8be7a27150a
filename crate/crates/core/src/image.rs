use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height, width and channel count of an image or activation volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Geometry {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, other: &Geometry) -> Result<()> {
        for (dimension, expected, actual) in [
            ("height", self.height, other.height),
            ("width", self.width, other.width),
            ("channels", self.channels, other.channels),
        ] {
            if expected != actual {
                return Err(Error::Shape {
                    dimension,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// A pixel raster in height-width-channel order with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    geometry: Geometry,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(geometry: Geometry, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != geometry.len() {
            return Err(Error::Shape {
                dimension: "pixel count",
                expected: geometry.len(),
                actual: pixels.len(),
            });
        }
        if let Some(pos) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue(format!(
                "pixel {pos} is {}, expected a value in [0, 1]",
                pixels[pos]
            )));
        }
        Ok(Image { geometry, pixels })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        Image {
            geometry,
            pixels: vec![value.clamp(0.0, 1.0); geometry.len()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.geometry.channels;
        let at = (y * self.geometry.width + x) * c;
        &self.pixels[at..at + c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let c = self.geometry.channels;
        let at = (y * self.geometry.width + x) * c;
        &mut self.pixels[at..at + c]
    }

    /// Replicates a single-channel image to three channels; color images are
    /// returned unchanged.
    pub fn to_rgb(&self) -> Image {
        match self.geometry.channels {
            3 => self.clone(),
            _ => {
                let g = Geometry::new(self.height(), self.width(), 3);
                let mut pixels = Vec::with_capacity(g.len());
                for y in 0..self.height() {
                    for x in 0..self.width() {
                        let v = self.pixel(y, x)[0];
                        pixels.extend_from_slice(&[v, v, v]);
                    }
                }
                Image {
                    geometry: g,
                    pixels,
                }
            }
        }
    }

    pub(crate) fn from_raw(geometry: Geometry, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), geometry.len());
        Image { geometry, pixels }
    }
}
