//! Single-channel 2D rasters: intensity images / probability maps, binary
//! masks and 3-class label maps. All are row-major, `width × height`.

use crate::error::{Error, Result};

/// Per-pixel class of a label map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum Label {
    #[default]
    Background = 0,
    Liver = 1,
    Tumor = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Background, Label::Liver, Label::Tumor];

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Liver),
            2 => Some(Label::Tumor),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// Display intensity: tumor 1, liver 0.5, background 0.
    pub fn display_value(self) -> f64 {
        match self {
            Label::Background => 0.0,
            Label::Liver => 0.5,
            Label::Tumor => 1.0,
        }
    }
}

macro_rules! raster {
    ($name:ident, $elem:ty) => {
        impl $name {
            pub fn new(width: usize, height: usize, pixels: Vec<$elem>) -> Result<Self> {
                if width == 0 || height == 0 || width * height != pixels.len() {
                    return Err(Error::ShapeMismatch {
                        context: concat!(stringify!($name), " dimensions vs pixel count"),
                        left: vec![height, width],
                        right: vec![pixels.len()],
                    });
                }
                Ok($name {
                    width,
                    height,
                    pixels,
                })
            }

            pub fn filled(width: usize, height: usize, value: $elem) -> Result<Self> {
                Self::new(width, height, vec![value; width * height])
            }

            pub fn from_fn(
                width: usize,
                height: usize,
                mut f: impl FnMut(usize, usize) -> $elem,
            ) -> Result<Self> {
                let mut pixels = Vec::with_capacity(width * height);
                for y in 0..height {
                    for x in 0..width {
                        pixels.push(f(x, y));
                    }
                }
                Self::new(width, height, pixels)
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            pub fn len(&self) -> usize {
                self.pixels.len()
            }

            pub fn is_empty(&self) -> bool {
                self.pixels.is_empty()
            }

            pub fn pixels(&self) -> &[$elem] {
                &self.pixels
            }

            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.pixels[y * self.width + x]
            }

            pub fn same_dims<O: HasDims>(&self, other: &O, context: &'static str) -> Result<()> {
                if self.dims() != other.dims() {
                    return Err(Error::ShapeMismatch {
                        context,
                        left: vec![self.height, self.width],
                        right: vec![other.dims().1, other.dims().0],
                    });
                }
                Ok(())
            }
        }

        impl HasDims for $name {
            fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }
        }
    };
}

pub trait HasDims {
    /// `(width, height)`
    fn dims(&self) -> (usize, usize);
}

/// Real-valued image. Also used for per-pixel probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

raster!(Image, f64);

pub type ProbabilityMap = Image;

impl Image {
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `{0, 1}` image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

raster!(BinaryMask, bool);

impl BinaryMask {
    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_dims(other, "mask intersection")?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| !p).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(&a, &b)| !a || b)
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| if p { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Per-pixel `{0 background, 1 liver, 2 tumor}` map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    pixels: Vec<Label>,
}

raster!(LabelMap, Label);

impl LabelMap {
    pub fn from_u8(width: usize, height: usize, raw: &[u8]) -> Result<LabelMap> {
        let pixels = raw
            .iter()
            .map(|&v| {
                Label::from_u8(v)
                    .ok_or_else(|| Error::invalid(format!("label value {v} not in {{0,1,2}}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(width, height, pixels)
    }

    pub fn count(&self, label: Label) -> usize {
        self.pixels.iter().filter(|&&p| p == label).count()
    }

    pub fn mask_where(&self, pred: impl Fn(Label) -> bool) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&l| pred(l)).collect(),
        }
    }

    /// Display encoding `{1, 0.5, 0}` for tumor, liver and background.
    pub fn display_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|l| l.display_value()).collect(),
        }
    }
}

/// A segmentation viewed as a partition of pixels into classes. Lets the
/// Rand index treat binary masks and label maps uniformly.
pub trait Segmentation: HasDims {
    fn class_ids(&self) -> Vec<u8>;
}

impl Segmentation for BinaryMask {
    fn class_ids(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| p as u8).collect()
    }
}

impl Segmentation for LabelMap {
    fn class_ids(&self) -> Vec<u8> {
        self.pixels.iter().map(|l| l.as_u8()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_are_validated() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(BinaryMask::new(0, 2, vec![]).is_err());
        assert!(LabelMap::from_u8(2, 1, &[0, 3]).is_err());
    }

    #[test]
    fn display_encoding() {
        let m = LabelMap::from_u8(3, 1, &[2, 1, 0]).unwrap();
        assert_eq!(m.display_image().pixels(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn subset_and_intersection() {
        let a = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(b.is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
        assert_eq!(a.and(&b).unwrap(), b);
        assert_eq!(a.not().count_ones(), 2);
    }
}
