//! Per-landmark response maps: storage, ideal rendering, peak decoding and
//! shape-indexed patch extraction.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::shape::Shape;

/// Response-map bandwidth used for ideal maps, in pixels.
pub const DEFAULT_SIGMA: f64 = 6.0;

/// A single `height x width` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ResponseMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                found: values.len(),
            });
        }
        check_values(&values)?;
        Ok(ResponseMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ResponseMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn view(&self) -> MapView<'_> {
        MapView {
            height: self.height,
            width: self.width,
            values: &self.values,
        }
    }
}

/// Borrowed map, either standalone or one slice of a [`ResponseStack`].
#[derive(Clone, Copy, Debug)]
pub struct MapView<'a> {
    height: usize,
    width: usize,
    values: &'a [f32],
}

impl<'a> MapView<'a> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &'a [f32] {
        self.values
    }

    /// Value at column `x`, row `y`; zero outside the map.
    pub fn get(&self, x: i64, y: i64) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.values[y as usize * self.width + x as usize]
        }
    }
}

/// `n` response maps sharing one `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseStack {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ResponseStack {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * height * width {
            return Err(Error::DimensionMismatch {
                expected: n * height * width,
                found: data.len(),
            });
        }
        check_values(&data)?;
        Ok(ResponseStack {
            n,
            height,
            width,
            data,
        })
    }

    pub fn from_maps(maps: Vec<ResponseMap>) -> Result<Self> {
        let first = maps.first().ok_or(Error::EmptyInput("response maps"))?;
        let (height, width) = (first.height, first.width);
        let mut data = Vec::with_capacity(maps.len() * height * width);
        for m in &maps {
            if (m.height, m.width) != (height, width) {
                return Err(Error::DimensionMismatch {
                    expected: height * width,
                    found: m.height * m.width,
                });
            }
            data.extend_from_slice(&m.values);
        }
        Ok(ResponseStack {
            n: maps.len(),
            height,
            width,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn map(&self, i: usize) -> MapView<'_> {
        let len = self.height * self.width;
        MapView {
            height: self.height,
            width: self.width,
            values: &self.data[i * len..(i + 1) * len],
        }
    }

    pub fn maps(&self) -> impl ExactSizeIterator<Item = MapView<'_>> + '_ {
        (0..self.n).map(move |i| self.map(i))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn check_values(values: &[f32]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response map"));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidConfig(
            "response values must be non-negative".into(),
        ));
    }
    Ok(())
}

/// Isotropic bivariate normal density `N(z; x_i, sigma^2 I)` sampled at every pixel.
///
/// The landmark may lie off-canvas; only the visible tail is rendered.
pub fn render_ideal_map(
    truth: &Shape,
    i: usize,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<ResponseMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if i >= truth.n() {
        return Err(Error::DimensionMismatch {
            expected: truth.n(),
            found: i + 1,
        });
    }
    let [cx, cy] = truth.point(i);
    let var = sigma * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var);
    let gx: Vec<f64> = (0..width)
        .map(|x| (-(x as f64 - cx).powi(2) / (2.0 * var)).exp())
        .collect();
    let gy: Vec<f64> = (0..height)
        .map(|y| (-(y as f64 - cy).powi(2) / (2.0 * var)).exp())
        .collect();
    let mut values = Vec::with_capacity(height * width);
    for wy in &gy {
        values.extend(gx.iter().map(|wx| (norm * wy * wx) as f32));
    }
    Ok(ResponseMap {
        height,
        width,
        values,
    })
}

/// Renders every landmark; entries with `visible[i] == false` become all-zero maps.
pub fn render_ideal_stack(
    truth: &Shape,
    visible: Option<&[bool]>,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<ResponseStack> {
    if let Some(v) = visible {
        if v.len() != truth.n() {
            return Err(Error::LandmarkCountMismatch {
                expected: truth.n(),
                found: v.len(),
            });
        }
    }
    let maps = (0..truth.n())
        .map(|i| {
            if visible.is_some_and(|v| !v[i]) {
                Ok(ResponseMap::zeros(height, width))
            } else {
                render_ideal_map(truth, i, height, width, sigma)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ResponseStack::from_maps(maps)
}

/// Arg-max of a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Peak {
    pub x: i64,
    pub y: i64,
    /// The map held no positive value; `(x, y)` is then the map center.
    pub zero_evidence: bool,
}

/// First maximum in row-major order.
pub fn peak_location(map: MapView<'_>) -> Peak {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (k, &v) in map.values.iter().enumerate() {
        if v > best_val {
            best = k;
            best_val = v;
        }
    }
    if !(best_val > 0.0) {
        return Peak {
            x: (map.width / 2) as i64,
            y: (map.height / 2) as i64,
            zero_evidence: true,
        };
    }
    Peak {
        x: (best % map.width) as i64,
        y: (best / map.width) as i64,
        zero_evidence: false,
    }
}

/// An `r x r` window of one response map around an integer center.
///
/// Cells outside the map are zero. Cell `k` (row-major) sits at absolute coordinate
/// [`PatchResponse::coordinate`]`(k)`; the collection of those coordinates is the
/// candidate set for the landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchResponse {
    landmark: usize,
    center: [i64; 2],
    size: usize,
    values: Vec<f64>,
}

impl PatchResponse {
    pub fn new(landmark: usize, center: [i64; 2], size: usize, values: Vec<f64>) -> Result<Self> {
        check_patch_size(size)?;
        if values.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: size * size,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "patch values must be finite and non-negative".into(),
            ));
        }
        Ok(PatchResponse {
            landmark,
            center,
            size,
            values,
        })
    }

    pub fn landmark(&self) -> usize {
        self.landmark
    }

    pub fn center(&self) -> [i64; 2] {
        self.center
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Absolute pixel coordinate of cell `k`.
    pub fn coordinate(&self, k: usize) -> [f64; 2] {
        let half = (self.size / 2) as i64;
        let col = (k % self.size) as i64;
        let row = (k / self.size) as i64;
        [
            (self.center[0] - half + col) as f64,
            (self.center[1] - half + row) as f64,
        ]
    }

    /// All candidate coordinates, row-major.
    pub fn omega(&self) -> impl ExactSizeIterator<Item = [f64; 2]> + '_ {
        (0..self.values.len()).map(move |k| self.coordinate(k))
    }
}

fn check_patch_size(r: usize) -> Result<()> {
    if r < 3 || r.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "patch size must be odd and >= 3, got {r}"
        )));
    }
    Ok(())
}

/// Copies the `r x r` window of map `i` centered at the rounded `center`.
pub fn extract_patch(
    stack: &ResponseStack,
    i: usize,
    center: [f64; 2],
    r: usize,
) -> Result<PatchResponse> {
    check_patch_size(r)?;
    if i >= stack.n {
        return Err(Error::DimensionMismatch {
            expected: stack.n,
            found: i + 1,
        });
    }
    if !(center[0].is_finite() && center[1].is_finite()) {
        return Err(Error::NonFinite("patch center"));
    }
    // f64::round rounds half away from zero.
    let c = [center[0].round() as i64, center[1].round() as i64];
    let half = (r / 2) as i64;
    let map = stack.map(i);
    let mut values = Vec::with_capacity(r * r);
    for dy in -half..=half {
        for dx in -half..=half {
            values.push(map.get(c[0] + dx, c[1] + dy) as f64);
        }
    }
    Ok(PatchResponse {
        landmark: i,
        center: c,
        size: r,
        values,
    })
}

/// Scales a patch to unit total mass.
pub fn normalize_patch(p: &PatchResponse) -> Result<PatchResponse> {
    let mass = p.mass();
    if !(mass > 0.0) {
        return Err(Error::ZeroEvidence);
    }
    let mut values: Vec<f64> = p.values.iter().map(|v| v / mass).collect();
    // Push the rounding residue into the largest cell so the sum is 1 to within an ulp.
    let resid = 1.0 - values.iter().sum::<f64>();
    if resid != 0.0 {
        let (k, _) = values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
            );
        values[k] += resid;
    }
    Ok(PatchResponse {
        values,
        ..p.clone()
    })
}

const RSPM_MAGIC: &[u8; 4] = b"RSPM";
const RSPM_VERSION: u32 = 1;
const RSPM: &str = "response stack";

/// Encodes a stack as `RSPM`, version, `n`, `H`, `W` (u32 LE) followed by f32 LE values.
pub fn write_rspm<W: Write>(stack: &ResponseStack, mut w: W) -> Result<()> {
    w.write_all(RSPM_MAGIC)?;
    for v in [
        RSPM_VERSION,
        stack.n as u32,
        stack.height as u32,
        stack.width as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(stack.data.len() * 4);
    for v in &stack.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_rspm(stack: &ResponseStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + stack.data.len() * 4);
    write_rspm(stack, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_rspm<R: Read>(mut r: R) -> Result<ResponseStack> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(RSPM, "truncated header"))?;
    if &header[..4] != RSPM_MAGIC {
        return Err(Error::format(RSPM, "bad magic bytes"));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let version = word(0);
    if version != RSPM_VERSION {
        return Err(Error::UnsupportedVersion {
            format: RSPM,
            version: version as u64,
        });
    }
    let (n, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let count = n
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(RSPM, "dimensions overflow"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::format(
            RSPM,
            format!(
                "expected {} payload bytes, found {}",
                count * 4,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ResponseStack::new(n, height, width, data).map_err(|e| Error::format(RSPM, e.to_string()))
}

pub fn load_rspm(path: impl AsRef<Path>) -> Result<ResponseStack> {
    let file = std::fs::File::open(path)?;
    read_rspm(std::io::BufReader::new(file))
}
