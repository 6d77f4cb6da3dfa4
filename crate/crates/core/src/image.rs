//! In-memory raster types shared by the data, model and metric modules.

/// Label id marking pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// RGB image with channel values in `[0, 1]`, stored height × width × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Image {
            height,
            width,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Multiplies each pixel by the matching entry of `keep` (1 keeps, 0 blacks out).
    pub fn masked(&self, keep: &[u8]) -> Image {
        let mut out = self.clone();
        for (p, &k) in keep.iter().enumerate() {
            if k == 0 {
                out.data[p * 3..p * 3 + 3].fill(0.0);
            }
        }
        out
    }
}

/// A per-pixel map of small integer ids (class labels or instance ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> IdMap<T> {
    pub fn new(height: usize, width: usize) -> Self {
        IdMap {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        IdMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Semantic class ids; [`IGNORE`] marks unlabeled pixels.
pub type LabelMap = IdMap<u8>;

/// Instance ids; 0 is background.
pub type InstanceMap = IdMap<u16>;

/// A binary mask over the image grid.
pub type BinaryMask = Vec<u8>;
