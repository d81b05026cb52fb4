use std::fs;
use std::io::Write;
use std::path::Path;

use super::GeometryError;

/// Binary occupancy raster, row-major, bit-packed.
#[derive(Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for SilhouetteMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SilhouetteMask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl SilhouetteMask {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, words: vec![0; n.div_ceil(64)] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = y as usize * self.width as usize + x as usize;
        self.words[i >> 6] >> (i & 63) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i >> 6] |= 1 << (i & 63);
        } else {
            self.words[i >> 6] &= !(1 << (i & 63));
        }
    }

    /// Sets pixels `[x0, x1)` of row `y`.
    pub(crate) fn fill_span(&mut self, y: u32, x0: u32, x1: u32) {
        let base = y as usize * self.width as usize;
        let (mut i, end) = (base + x0 as usize, base + x1 as usize);
        while i < end {
            let bit = i & 63;
            let take = (64 - bit).min(end - i);
            let bits = if take == 64 { u64::MAX } else { ((1u64 << take) - 1) << bit };
            self.words[i >> 6] |= bits;
            i += take;
        }
    }

    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    fn check_dims(&self, other: &Self) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64, GeometryError> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum())
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some(((i % w) as u32, (i / w) as u32))
            })
        })
    }

    /// Mean foreground pixel center, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0u64);
        for (x, y) in self.pixels() {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Block downsampling: an output pixel is set when more than half of its
    /// `factor × factor` source block is set. Exact ties follow a checkerboard
    /// over output pixels, so edges neither grow nor shrink on average.
    pub fn downsample(&self, factor: u32) -> Result<Self, GeometryError> {
        if factor == 0 || self.width / factor == 0 || self.height / factor == 0 {
            return Err(GeometryError::EmptyRaster);
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Self::empty(w, h);
        let cells = factor * factor;
        for y in 0..h {
            for x in 0..w {
                let mut count = 0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        count += self.get(x * factor + dx, y * factor + dy) as u32;
                    }
                }
                if 2 * count > cells || (2 * count == cells && (x + y) % 2 == 0) {
                    out.set(x, y, true);
                }
            }
        }
        Ok(out)
    }

    /// Builds a mask from 8-bit samples; values ≥ 128 are foreground.
    pub fn from_gray(width: u32, height: u32, data: &[u8]) -> Result<Self, GeometryError> {
        if data.len() != width as usize * height as usize {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} samples for a {}x{} raster",
                data.len(),
                width,
                height
            )));
        }
        let mut m = Self::empty(width, height);
        for (i, &v) in data.iter().enumerate() {
            if v >= 128 {
                m.words[i >> 6] |= 1 << (i & 63);
            }
        }
        Ok(m)
    }

    pub fn to_gray(&self) -> Vec<u8> {
        let n = self.width as usize * self.height as usize;
        (0..n).map(|i| if self.words[i >> 6] >> (i & 63) & 1 == 1 { 255 } else { 0 }).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_gray());
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, GeometryError> {
        let mut pos = 0usize;
        let mut fields = [0u32; 3];
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(GeometryError::Pgm("expected binary PGM magic P5".into()));
        }
        for f in fields.iter_mut() {
            let tok = next_token(bytes, &mut pos)?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| GeometryError::Pgm("malformed header field".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(GeometryError::Pgm(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates header from raster
        pos += 1;
        let n = width as usize * height as usize;
        let data = bytes
            .get(pos..pos + n)
            .ok_or_else(|| GeometryError::Pgm(format!("truncated raster: need {n} bytes")))?;
        Self::from_gray(width, height, data)
    }

    pub fn read_pgm(path: &Path) -> Result<Self, GeometryError> {
        let bytes = fs::read(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
        Self::decode_pgm(&bytes)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), GeometryError> {
        let mut f = fs::File::create(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
        f.write_all(&self.encode_pgm()).map_err(|e| GeometryError::Io(path.display().to_string(), e))
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], GeometryError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(GeometryError::Pgm("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

/// Dice coefficient; two empty masks score 1.
pub fn dice(a: &SilhouetteMask, b: &SilhouetteMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let total = a.area() + b.area();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &SilhouetteMask, b: &SilhouetteMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: u32, h: u32, x0: u32, x1: u32, y0: u32, y1: u32) -> SilhouetteMask {
        let mut m = SilhouetteMask::empty(w, h);
        for y in y0..y1 {
            m.fill_span(y, x0, x1);
        }
        m
    }

    #[test]
    fn self_overlap_is_one() {
        let a = rect(20, 10, 2, 9, 1, 5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let a = rect(20, 10, 0, 5, 0, 5);
        let b = rect(20, 10, 10, 15, 0, 5);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap() {
        // |A| = |B| = 2k, |A ∩ B| = k with k = 8
        let a = rect(16, 4, 0, 4, 0, 4);
        let b = rect(16, 4, 2, 6, 0, 4);
        assert_eq!(a.area(), 16);
        assert_eq!(a.intersection_area(&b).unwrap(), 8);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_pair_agrees() {
        let a = SilhouetteMask::empty(4, 4);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(iou(&SilhouetteMask::empty(4, 4), &SilhouetteMask::empty(4, 5)).is_err());
    }

    #[test]
    fn span_fill_crosses_words() {
        let mut m = SilhouetteMask::empty(200, 3);
        m.fill_span(1, 10, 190);
        assert_eq!(m.area(), 180);
        assert!(!m.get(9, 1) && m.get(10, 1) && m.get(189, 1) && !m.get(190, 1));
    }

    #[test]
    fn pgm_round_trip_and_threshold() {
        let a = rect(13, 7, 3, 11, 2, 6);
        let back = SilhouetteMask::decode_pgm(&a.encode_pgm()).unwrap();
        assert_eq!(a, back);

        let mut raw = b"P5\n# comment\n3 1\n255\n".to_vec();
        raw.extend([127u8, 128, 255]);
        let m = SilhouetteMask::decode_pgm(&raw).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 0), m.get(2, 0)), (false, true, true));
    }

    #[test]
    fn pgm_rejects_truncated() {
        let mut raw = b"P5\n4 4\n255\n".to_vec();
        raw.extend([0u8; 10]);
        assert!(SilhouetteMask::decode_pgm(&raw).is_err());
        assert!(SilhouetteMask::decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn downsample_majority() {
        let a = rect(8, 8, 0, 3, 0, 8);
        let d = a.downsample(2).unwrap();
        assert_eq!((d.width(), d.height()), (4, 4));
        // column 0 full, column 1 half covered, columns 2-3 empty
        for y in 0..4 {
            assert!(d.get(0, y) && !d.get(2, y) && !d.get(3, y));
            assert_eq!(d.get(1, y), y % 2 == 1);
        }
        // a half-covered band keeps half its blocks
        assert_eq!(d.area(), 4 + 2);
        let three = rect(9, 9, 0, 5, 0, 9).downsample(3).unwrap();
        assert_eq!(three.area(), 3 * 2);
    }
}
