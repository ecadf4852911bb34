//! Heatmap grids, cross-scan normalization, file export and registration
//! onto optical photographs.
//!
//! Grids are stored row-major with elevation ascending and azimuth
//! ascending. Every exported image puts the highest elevation row at the
//! top and the lowest azimuth column at the left.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::rotor::AngularPose;

#[derive(Debug, thiserror::Error)]
pub enum HeatmapError {
    #[error("grid shape mismatch: map {index} is {got:?}, reference is {want:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("reference index {0} out of range")]
    BadReference(usize),
    #[error("map must be normalized before export")]
    NotNormalized,
    #[error("heatmap extent az [{map_az:?}] el [{map_el:?}] does not intersect camera view az [{cam_az:?}] el [{cam_el:?}]")]
    DisjointFov {
        map_az: [f64; 2],
        map_el: [f64; 2],
        cam_az: [f64; 2],
        cam_el: [f64; 2],
    },
    #[error("invalid overlay: {0}")]
    InvalidOverlay(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HeatmapError {
    let path = path.display().to_string();
    move |source| HeatmapError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Dbm,
    /// Affine-mapped into [0, 1].
    Normalized,
}

impl Scale {
    fn tag(self) -> &'static str {
        match self {
            Scale::Dbm => "dbm",
            Scale::Normalized => "normalized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    az_pixels: usize,
    el_pixels: usize,
    pub az_range: [f64; 2],
    pub el_range: [f64; 2],
    pub band_label: String,
    pub scale: Scale,
    values: Vec<f64>,
    invalid: Vec<bool>,
}

impl Heatmap {
    /// Empty map with every cell masked until written.
    pub fn new(az_pixels: usize, el_pixels: usize, az_range: [f64; 2], el_range: [f64; 2], band_label: impl Into<String>) -> Self {
        assert!(az_pixels > 0 && el_pixels > 0, "heatmap needs at least one pixel per axis");
        let n = az_pixels * el_pixels;
        Self {
            az_pixels,
            el_pixels,
            az_range,
            el_range,
            band_label: band_label.into(),
            scale: Scale::Dbm,
            values: vec![f64::NAN; n],
            invalid: vec![true; n],
        }
    }

    /// Builds a fully valid map from row-major (el ascending) values.
    pub fn from_values(az_pixels: usize, el_pixels: usize, az_range: [f64; 2], el_range: [f64; 2], values: Vec<f64>) -> Self {
        assert_eq!(values.len(), az_pixels * el_pixels);
        let mut m = Self::new(az_pixels, el_pixels, az_range, el_range, "");
        for (k, v) in values.into_iter().enumerate() {
            m.values[k] = v;
            m.invalid[k] = !v.is_finite();
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.az_pixels, self.el_pixels)
    }

    pub fn az_pixels(&self) -> usize {
        self.az_pixels
    }

    pub fn el_pixels(&self) -> usize {
        self.el_pixels
    }

    fn idx(&self, i_az: usize, i_el: usize) -> usize {
        assert!(i_az < self.az_pixels && i_el < self.el_pixels);
        i_el * self.az_pixels + i_az
    }

    pub fn get(&self, i_az: usize, i_el: usize) -> f64 {
        self.values[self.idx(i_az, i_el)]
    }

    pub fn is_valid(&self, i_az: usize, i_el: usize) -> bool {
        !self.invalid[self.idx(i_az, i_el)]
    }

    /// Stores a value; non-finite values mask the cell.
    pub fn set(&mut self, i_az: usize, i_el: usize, value: f64) {
        let k = self.idx(i_az, i_el);
        self.values[k] = value;
        self.invalid[k] = !value.is_finite();
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn invalid_count(&self) -> usize {
        self.invalid.iter().filter(|&&m| m).count()
    }

    pub fn az_step(&self) -> f64 {
        (self.az_range[1] - self.az_range[0]) / self.az_pixels as f64
    }

    pub fn el_step(&self) -> f64 {
        (self.el_range[1] - self.el_range[0]) / self.el_pixels as f64
    }

    /// Direction of a cell center.
    pub fn cell_pose(&self, i_az: usize, i_el: usize) -> AngularPose {
        AngularPose::new(
            self.az_range[0] + (i_az as f64 + 0.5) * self.az_step(),
            self.el_range[0] + (i_el as f64 + 0.5) * self.el_step(),
        )
    }

    /// Cell nearest to a direction, clamped into the grid.
    pub fn nearest_cell(&self, pose: &AngularPose) -> (usize, usize) {
        let pick = |v: f64, lo: f64, step: f64, n: usize| {
            (((v - lo) / step).floor().max(0.0) as usize).min(n - 1)
        };
        (
            pick(pose.az, self.az_range[0], self.az_step(), self.az_pixels),
            pick(pose.el, self.el_range[0], self.el_step(), self.el_pixels),
        )
    }

    /// Largest valid cell; ties go to the left-topmost (highest elevation
    /// row, then lowest azimuth).
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for i_el in (0..self.el_pixels).rev() {
            for i_az in 0..self.az_pixels {
                if !self.is_valid(i_az, i_el) {
                    continue;
                }
                let v = self.get(i_az, i_el);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(((i_az, i_el), v));
                }
            }
        }
        best.map(|(c, _)| c)
    }

    /// `(min, max)` over valid cells.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.invalid)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    fn header_comment(&self) -> String {
        format!(
            "scale={} az_range={},{} el_range={},{} rows=el_descending cols=az_ascending band={}",
            self.scale.tag(),
            self.az_range[0],
            self.az_range[1],
            self.el_range[0],
            self.el_range[1],
            if self.band_label.is_empty() { "-" } else { &self.band_label },
        )
    }
}

/// Maps every map through the reference map's `[min, max]` window into
/// `[0, 1]`, clipping. A flat reference yields all-0.5 maps.
pub fn normalize_clip(maps: &[Heatmap], reference_index: usize) -> Result<Vec<Heatmap>, HeatmapError> {
    let reference = maps.get(reference_index).ok_or(HeatmapError::BadReference(reference_index))?;
    for (index, m) in maps.iter().enumerate() {
        if m.shape() != reference.shape() {
            return Err(HeatmapError::ShapeMismatch {
                index,
                got: m.shape(),
                want: reference.shape(),
            });
        }
    }
    let window = reference.value_range();
    let degenerate = match window {
        Some((lo, hi)) => hi <= lo,
        None => true,
    };
    if degenerate {
        log::warn!("reference map {reference_index} has no dynamic range; emitting flat 0.5 maps");
    }
    Ok(maps
        .iter()
        .map(|m| {
            let mut out = m.clone();
            out.scale = Scale::Normalized;
            for k in 0..out.values.len() {
                if out.invalid[k] {
                    continue;
                }
                out.values[k] = match window {
                    Some((lo, hi)) if !degenerate => ((m.values[k] - lo) / (hi - lo)).clamp(0.0, 1.0),
                    _ => 0.5,
                };
            }
            out
        })
        .collect())
}

// ---- CSV matrix ----

pub fn write_csv(map: &Heatmap, path: &Path) -> Result<(), HeatmapError> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_csv_to(map, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_csv_to(map: &Heatmap, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# {}", map.header_comment())?;
    write!(w, "el_deg\\az_deg")?;
    for i_az in 0..map.az_pixels {
        write!(w, ",{}", map.cell_pose(i_az, 0).az)?;
    }
    writeln!(w)?;
    for i_el in (0..map.el_pixels).rev() {
        write!(w, "{}", map.cell_pose(0, i_el).el)?;
        for i_az in 0..map.az_pixels {
            let v = map.get(i_az, i_el);
            if map.is_valid(i_az, i_el) {
                write!(w, ",{v}")?;
            } else {
                write!(w, ",NaN")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_pair(s: &str) -> Option<[f64; 2]> {
    let (a, b) = s.split_once(',')?;
    Some([a.parse().ok()?, b.parse().ok()?])
}

pub fn read_csv(path: &Path) -> Result<Heatmap, HeatmapError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_csv(&text, &path.display().to_string())
}

pub fn parse_csv(text: &str, origin: &str) -> Result<Heatmap, HeatmapError> {
    let fail = |msg: String| HeatmapError::Format {
        path: origin.to_string(),
        msg,
    };
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| fail("missing metadata comment line".into()))?;
    // the band label runs to the end of the line and may contain spaces
    let (meta, band) = match meta.split_once(" band=") {
        Some((m, "-")) => (m, String::new()),
        Some((m, b)) => (m, b.to_string()),
        None => (meta, String::new()),
    };
    let (mut scale, mut az_range, mut el_range) = (None, None, None);
    for kv in meta.split(' ') {
        match kv.split_once('=') {
            Some(("scale", "dbm")) => scale = Some(Scale::Dbm),
            Some(("scale", "normalized")) => scale = Some(Scale::Normalized),
            Some(("az_range", v)) => az_range = parse_pair(v),
            Some(("el_range", v)) => el_range = parse_pair(v),
            _ => {}
        }
    }
    let (scale, az_range, el_range) = match (scale, az_range, el_range) {
        (Some(s), Some(a), Some(e)) => (s, a, e),
        _ => return Err(fail("metadata needs scale, az_range and el_range".into())),
    };
    let header = lines.next().ok_or_else(|| fail("missing azimuth header".into()))?;
    let az_pixels = header.split(',').count() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != az_pixels + 1 {
            return Err(fail(format!("row {} has {} cells, expected {az_pixels}", k + 1, fields.len() - 1)));
        }
        let row = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(format!("row {}: {e}", k + 1)))?;
        rows.push(row);
    }
    if az_pixels == 0 || rows.is_empty() {
        return Err(fail("empty grid".into()));
    }
    let el_pixels = rows.len();
    let values: Vec<f64> = rows.into_iter().rev().flatten().collect();
    let mut m = Heatmap::from_values(az_pixels, el_pixels, az_range, el_range, values);
    m.scale = scale;
    m.band_label = band;
    Ok(m)
}

// ---- PGM ----

fn to_u16(v: f64) -> u16 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Binary 16-bit graymap bytes for a normalized map.
pub fn encode_pgm(map: &Heatmap) -> Result<Vec<u8>, HeatmapError> {
    if map.scale != Scale::Normalized {
        return Err(HeatmapError::NotNormalized);
    }
    let mut out = format!(
        "P5\n# {}\n{} {}\n65535\n",
        map.header_comment(),
        map.az_pixels,
        map.el_pixels
    )
    .into_bytes();
    for i_el in (0..map.el_pixels).rev() {
        for i_az in 0..map.az_pixels {
            out.extend_from_slice(&to_u16(map.get(i_az, i_el)).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn export_pgm(map: &Heatmap, path: &Path) -> Result<(), HeatmapError> {
    std::fs::write(path, encode_pgm(map)?).map_err(io_err(path))
}

/// Reads a 16-bit P5 file back as `(width, height, samples)` in file order.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>), HeatmapError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let fail = |msg: &str| HeatmapError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header from raster
    pos += 1;
    if tokens[0] != "P5" || tokens[3] != "65535" {
        return Err(fail("not a 16-bit P5 graymap"));
    }
    let w: usize = tokens[1].parse().map_err(|_| fail("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| fail("bad height"))?;
    let raster = &bytes[pos.min(bytes.len())..];
    if raster.len() != w * h * 2 {
        return Err(fail("raster size mismatch"));
    }
    Ok((
        w,
        h,
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
    ))
}

// ---- colormaps and raster output ----

/// 256-entry RGB lookup table, index 0 for the smallest value.
#[derive(Debug, Clone, PartialEq)]
pub struct Colormap {
    table: Vec<[u8; 3]>,
}

const INFERNO: &str = include_str!("../data/inferno.txt");

impl Default for Colormap {
    fn default() -> Self {
        Self::parse(INFERNO).expect("bundled colormap is valid")
    }
}

impl Colormap {
    pub fn inferno() -> Self {
        Self::default()
    }

    pub fn grayscale() -> Self {
        Self {
            table: (0..=255u8).map(|v| [v, v, v]).collect(),
        }
    }

    /// Parses `R G B` rows (exactly 256, `#` comments allowed).
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table = Vec::with_capacity(256);
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rgb: Vec<u8> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", k + 1))?;
            if rgb.len() != 3 {
                return Err(format!("line {}: expected 3 components", k + 1));
            }
            table.push([rgb[0], rgb[1], rgb[2]]);
        }
        if table.len() != 256 {
            return Err(format!("expected 256 entries, found {}", table.len()));
        }
        Ok(Self { table })
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "inferno" => Some(Self::inferno()),
            "gray" | "grayscale" => Some(Self::grayscale()),
            _ => None,
        }
    }

    pub fn entry(&self, index: u8) -> [u8; 3] {
        self.table[usize::from(index)]
    }

    /// Color for a normalized value; NaN (masked) takes entry 0.
    pub fn color(&self, v: f64) -> [u8; 3] {
        if v.is_nan() {
            return self.table[0];
        }
        self.table[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
    }
}

/// Relative luminance of an sRGB color in linear light.
pub fn relative_luminance(rgb: [u8; 3]) -> f64 {
    let lin = |c: u8| {
        let c = f64::from(c) / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    0.2126 * lin(rgb[0]) + 0.7152 * lin(rgb[1]) + 0.0722 * lin(rgb[2])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

/// Bilinear sample at fractional cell coordinates (cell centers at integers),
/// clamped to the grid; masked cells read as 0.
fn sample_bilinear(map: &Heatmap, u: f64, v: f64) -> f64 {
    let cell = |i: usize, j: usize| {
        let x = map.get(i, j);
        if x.is_nan() {
            0.0
        } else {
            x
        }
    };
    let u = u.clamp(0.0, (map.az_pixels - 1) as f64);
    let v = v.clamp(0.0, (map.el_pixels - 1) as f64);
    let (i0, j0) = (u.floor() as usize, v.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(map.az_pixels - 1), (j0 + 1).min(map.el_pixels - 1));
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    let top = cell(i0, j0) * (1.0 - fu) + cell(i1, j0) * fu;
    let bot = cell(i0, j1) * (1.0 - fu) + cell(i1, j1) * fu;
    top * (1.0 - fv) + bot * fv
}

/// Bilinear value of the map in a direction, `None` outside its extent.
fn sample_at(map: &Heatmap, az: f64, el: f64) -> Option<f64> {
    if az < map.az_range[0] || az > map.az_range[1] || el < map.el_range[0] || el > map.el_range[1] {
        return None;
    }
    let u = (az - map.az_range[0]) / map.az_step() - 0.5;
    let v = (el - map.el_range[0]) / map.el_step() - 0.5;
    Some(sample_bilinear(map, u, v))
}

/// Colormapped raster, upscaled by an integer factor.
pub fn render_rgb(map: &Heatmap, colormap: &Colormap, upscale: usize, interp: Interpolation) -> Result<RgbImage, HeatmapError> {
    if map.scale != Scale::Normalized {
        return Err(HeatmapError::NotNormalized);
    }
    let k = upscale.max(1);
    let (w, h) = (map.az_pixels * k, map.el_pixels * k);
    let mut img = RgbImage::new(w, h);
    match interp {
        Interpolation::Nearest => {
            for y in 0..h {
                let i_el = map.el_pixels - 1 - y / k;
                for x in 0..w {
                    img.put(x, y, colormap.color(map.get(x / k, i_el)));
                }
            }
        }
        Interpolation::Bilinear => {
            let spec = OverlaySpec::matching(map, w, h, 1.0);
            for y in 0..h {
                for x in 0..w {
                    let (az, el) = spec.pixel_center_angle(x, y);
                    let v = sample_at(map, az, el).unwrap_or(0.0);
                    img.put(x, y, colormap.color(v));
                }
            }
        }
    }
    Ok(img)
}

pub fn write_png(img: &RgbImage, path: &Path, comment: Option<&str>) -> Result<(), HeatmapError> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let fmt = |e: png::EncodingError| HeatmapError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(c) = comment {
        enc.add_text_chunk("Comment".to_string(), c.to_string()).map_err(fmt)?;
    }
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&img.data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

pub fn export_png(
    map: &Heatmap,
    colormap: &Colormap,
    path: &Path,
    upscale: usize,
    interp: Interpolation,
) -> Result<(), HeatmapError> {
    let img = render_rgb(map, colormap, upscale, interp)?;
    write_png(&img, path, Some(&map.header_comment()))
}

/// Decodes any 8- or 16-bit PNG into 8-bit RGB (alpha dropped).
pub fn read_png(path: &Path) -> Result<RgbImage, HeatmapError> {
    let fail = |msg: String| HeatmapError::Format {
        path: path.display().to_string(),
        msg,
    };
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| fail(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(fail("palette not expanded".into())),
    };
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..x * channels + channels];
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            img.put(x, y, rgb);
        }
    }
    Ok(img)
}

// ---- optical overlay ----

/// Camera view for overlay registration under a linear angle-to-pixel model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlaySpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub cam_az: f64,
    pub cam_el: f64,
    pub alpha: f64,
}

impl OverlaySpec {
    /// View whose field exactly covers the map's angular extent.
    pub fn matching(map: &Heatmap, width: usize, height: usize, alpha: f64) -> Self {
        Self {
            width,
            height,
            hfov_deg: map.az_range[1] - map.az_range[0],
            vfov_deg: map.el_range[1] - map.el_range[0],
            cam_az: 0.5 * (map.az_range[0] + map.az_range[1]),
            cam_el: 0.5 * (map.el_range[0] + map.el_range[1]),
            alpha,
        }
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        if !(self.hfov_deg > 0.0 && self.vfov_deg > 0.0) {
            return Err(HeatmapError::InvalidOverlay("field of view must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HeatmapError::InvalidOverlay(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(HeatmapError::InvalidOverlay("image has no pixels".into()));
        }
        Ok(())
    }

    /// Continuous image coordinates of a direction (0..width, 0..height).
    pub fn angle_to_pixel(&self, az: f64, el: f64) -> (f64, f64) {
        (
            self.width as f64 * (az - self.cam_az + self.hfov_deg / 2.0) / self.hfov_deg,
            self.height as f64 * (self.cam_el + self.vfov_deg / 2.0 - el) / self.vfov_deg,
        )
    }

    fn pixel_center_angle(&self, x: usize, y: usize) -> (f64, f64) {
        let az = self.cam_az - self.hfov_deg / 2.0 + (x as f64 + 0.5) / self.width as f64 * self.hfov_deg;
        let el = self.cam_el + self.vfov_deg / 2.0 - (y as f64 + 0.5) / self.height as f64 * self.vfov_deg;
        (az, el)
    }

    fn az_extent(&self) -> [f64; 2] {
        [self.cam_az - self.hfov_deg / 2.0, self.cam_az + self.hfov_deg / 2.0]
    }

    fn el_extent(&self) -> [f64; 2] {
        [self.cam_el - self.vfov_deg / 2.0, self.cam_el + self.vfov_deg / 2.0]
    }
}

/// Alpha-blends the colormapped map onto the photo where the two views
/// overlap; photo pixels outside the map's extent pass through unchanged.
pub fn overlay(map: &Heatmap, photo: &RgbImage, spec: &OverlaySpec, colormap: &Colormap) -> Result<RgbImage, HeatmapError> {
    spec.validate()?;
    if map.scale != Scale::Normalized {
        return Err(HeatmapError::NotNormalized);
    }
    if (photo.width, photo.height) != (spec.width, spec.height) {
        return Err(HeatmapError::InvalidOverlay(format!(
            "photo is {}x{}, overlay expects {}x{}",
            photo.width, photo.height, spec.width, spec.height
        )));
    }
    let (ca, ce) = (spec.az_extent(), spec.el_extent());
    let overlaps = |a: [f64; 2], b: [f64; 2]| a[0] < b[1] && b[0] < a[1];
    if !overlaps(map.az_range, ca) || !overlaps(map.el_range, ce) {
        return Err(HeatmapError::DisjointFov {
            map_az: map.az_range,
            map_el: map.el_range,
            cam_az: ca,
            cam_el: ce,
        });
    }
    let mut out = photo.clone();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (az, el) = spec.pixel_center_angle(x, y);
            let Some(v) = sample_at(map, az, el) else { continue };
            let heat = colormap.color(v);
            let base = photo.pixel(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let b = spec.alpha * f64::from(heat[c]) + (1.0 - spec.alpha) * f64::from(base[c]);
                px[c] = b.round().clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, px);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(vals: &[f64], az: usize, el: usize) -> Heatmap {
        Heatmap::from_values(az, el, [-45.0, 45.0], [-15.0, 15.0], vals.to_vec())
    }

    #[test]
    fn normalize_single_map() {
        let m = map(&[-90.0, -80.0, -70.0, -60.0], 2, 2);
        let n = normalize_clip(&[m], 0).unwrap();
        assert_eq!(n[0].values(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(n[0].scale, Scale::Normalized);
    }

    #[test]
    fn normalize_clips_hotter_and_cooler_maps() {
        let r = map(&[-80.0, -70.0, -65.0, -60.0], 2, 2);
        let hot = map(&[-80.0, -70.0, -65.0, -55.0], 2, 2);
        let cool = map(&[-90.0, -80.0, -75.0, -70.0], 2, 2);
        let n = normalize_clip(&[r, hot, cool], 0).unwrap();
        assert_eq!(n[1].get(1, 1), 1.0);
        let expect: Vec<f64> = n[0].values().iter().map(|v| (v - 0.5).max(0.0)).collect();
        for (a, b) in n[2].values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_errors_and_degenerate() {
        let a = map(&[1.0, 2.0], 2, 1);
        let b = map(&[1.0, 2.0], 1, 2);
        assert!(matches!(normalize_clip(&[a.clone(), b], 0), Err(HeatmapError::ShapeMismatch { .. })));
        assert!(matches!(normalize_clip(&[a], 3), Err(HeatmapError::BadReference(3))));
        let flat = map(&[-50.0; 4], 2, 2);
        let n = normalize_clip(&[flat], 0).unwrap();
        assert!(n[0].values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn normalize_is_idempotent_and_keeps_masks() {
        let mut m = map(&[-80.0, -72.5, -61.0, -70.0, -66.0, -79.0], 3, 2);
        m.set(2, 1, f64::NAN);
        let once = normalize_clip(&[m], 0).unwrap();
        let twice = normalize_clip(&once, 0).unwrap();
        assert_eq!(once[0].values().len(), twice[0].values().len());
        for (a, b) in once[0].values().iter().zip(twice[0].values()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
        assert!(!twice[0].is_valid(2, 1));
    }

    #[test]
    fn argmax_prefers_left_topmost_on_ties() {
        let m = map(&[1.0, 5.0, 5.0, 5.0, 2.0, 3.0], 3, 2);
        // row el=1 is top: values [5, 2, 3]; row el=0: [1, 5, 5]
        assert_eq!(m.argmax(), Some((0, 1)));
        let mut n = map(&[1.0, 9.0, 2.0, 3.0], 2, 2);
        n.set(1, 0, f64::NAN);
        assert_eq!(n.argmax(), Some((1, 1)));
    }

    #[test]
    fn cell_geometry() {
        let m = Heatmap::new(100, 100, [-90.0, 90.0], [0.0, 80.0], "");
        assert!((m.az_step() - 1.8).abs() < 1e-12);
        assert!((m.el_step() - 0.8).abs() < 1e-12);
        let p = m.cell_pose(0, 0);
        assert!((p.az - -89.1).abs() < 1e-12 && (p.el - 0.4).abs() < 1e-12);
        assert_eq!(m.nearest_cell(&AngularPose::new(30.0, 10.0)), (66, 12));
        assert_eq!(m.nearest_cell(&AngularPose::new(500.0, -3.0)), (99, 0));
    }

    #[test]
    fn pgm_single_pixel() {
        let mut one = normalize_clip(&[map(&[3.0], 1, 1)], 0).unwrap().remove(0);
        one.set(0, 0, 1.0);
        let b = encode_pgm(&one).unwrap();
        assert_eq!(&b[b.len() - 2..], &[0xFF, 0xFF]);
        one.set(0, 0, 0.0);
        let b = encode_pgm(&one).unwrap();
        assert_eq!(&b[b.len() - 2..], &[0x00, 0x00]);
        assert!(matches!(encode_pgm(&map(&[1.0], 1, 1)), Err(HeatmapError::NotNormalized)));
    }

    #[test]
    fn pgm_golden_2x2() {
        // el row 1 (top) = [0.5, 1.0], el row 0 (bottom) = [0.0, 0.25]
        let mut m = Heatmap::from_values(2, 2, [0.0, 2.0], [0.0, 2.0], vec![0.0, 0.25, 0.5, 1.0]);
        m.scale = Scale::Normalized;
        let mut golden = b"P5\n# scale=normalized az_range=0,2 el_range=0,2 rows=el_descending cols=az_ascending band=-\n2 2\n65535\n".to_vec();
        // round(0.5*65535)=32768, 65535, 0, round(0.25*65535)=16384
        golden.extend_from_slice(&[0x80, 0x00, 0xFF, 0xFF, 0x00, 0x00, 0x40, 0x00]);
        assert_eq!(encode_pgm(&m).unwrap(), golden);
    }

    #[test]
    fn pgm_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = map(&[-91.5, -77.25, -63.0, -70.125, -88.0, -65.5], 3, 2);
        let mut n = normalize_clip(&[raw], 0).unwrap().remove(0);
        n.set(1, 0, f64::NAN);
        n.band_label = "1648-1728 MHz".into();
        let pgm = dir.path().join("m.pgm");
        export_pgm(&n, &pgm).unwrap();
        let (w, h, px) = read_pgm(&pgm).unwrap();
        assert_eq!((w, h), (3, 2));
        for y in 0..h {
            for x in 0..w {
                let v = n.get(x, h - 1 - y);
                let v = if v.is_nan() { 0.0 } else { v };
                assert!((f64::from(px[y * w + x]) / 65535.0 - v).abs() <= 1.0 / 65535.0);
            }
        }
        let csv = dir.path().join("m.csv");
        write_csv(&n, &csv).unwrap();
        let back = read_csv(&csv).unwrap();
        assert_eq!(back.shape(), n.shape());
        assert_eq!(back.band_label, n.band_label);
        assert_eq!(back.scale, Scale::Normalized);
        for (a, b) in back.values().iter().zip(n.values()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
        assert!(!back.is_valid(1, 0));
    }

    #[test]
    fn colormap_endpoints_and_luminance() {
        let c = Colormap::default();
        assert_eq!(c.color(0.0), c.entry(0));
        assert_eq!(c.color(1.0), c.entry(255));
        assert_eq!(c.color(f64::NAN), c.entry(0));
        let ramp: Vec<f64> = (0..512).map(|k| k as f64 / 511.0).collect();
        let mut m = Heatmap::from_values(512, 1, [0.0, 1.0], [0.0, 1.0], ramp);
        m.scale = Scale::Normalized;
        let img = render_rgb(&m, &c, 1, Interpolation::Nearest).unwrap();
        let mut prev = -1.0;
        for x in 0..img.width {
            let l = relative_luminance(img.pixel(x, 0));
            assert!(l >= prev, "luminance dropped at column {x}");
            prev = l;
        }
        assert!(Colormap::parse("1 2 3\n").is_err());
    }

    #[test]
    fn nearest_upscale_places_top_row_first() {
        let mut m = Heatmap::from_values(1, 2, [0.0, 1.0], [0.0, 2.0], vec![0.0, 1.0]);
        m.scale = Scale::Normalized;
        let g = Colormap::grayscale();
        let img = render_rgb(&m, &g, 2, Interpolation::Nearest).unwrap();
        assert_eq!((img.width, img.height), (2, 4));
        assert_eq!(img.pixel(1, 0), [255; 3]);
        assert_eq!(img.pixel(0, 3), [0; 3]);
    }

    #[test]
    fn overlay_mapping_geometry() {
        let spec = OverlaySpec {
            width: 900,
            height: 300,
            hfov_deg: 90.0,
            vfov_deg: 30.0,
            cam_az: 0.0,
            cam_el: 0.0,
            alpha: 0.5,
        };
        assert_eq!(spec.angle_to_pixel(45.0, 0.0).0, 900.0);
        let (x, y) = spec.angle_to_pixel(0.0, 0.0);
        assert!((x - 450.0).abs() <= 1.0 && (y - 150.0).abs() <= 1.0);
        // equal angular steps give equal pixel steps
        let xs: Vec<f64> = (0..5).map(|k| spec.angle_to_pixel(-20.0 + 7.5 * k as f64, 3.0).0).collect();
        for w in xs.windows(3) {
            assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn overlay_identity_registration() {
        let vals: Vec<f64> = (0..24).map(|k| ((k * 7) % 24) as f64).collect();
        let m = normalize_clip(&[map(&vals, 6, 4)], 0).unwrap().remove(0);
        let c = Colormap::default();
        let up = render_rgb(&m, &c, 5, Interpolation::Bilinear).unwrap();
        let mut photo = RgbImage::new(30, 20);
        photo.data.iter_mut().enumerate().for_each(|(k, b)| *b = (k % 251) as u8);
        let spec = OverlaySpec {
            width: 30,
            height: 20,
            hfov_deg: 90.0,
            vfov_deg: 30.0,
            cam_az: 0.0,
            cam_el: 0.0,
            alpha: 1.0,
        };
        assert_eq!(overlay(&m, &photo, &spec, &c).unwrap(), up);
        let half = overlay(&m, &photo, &OverlaySpec { alpha: 0.0, ..spec }, &c).unwrap();
        assert_eq!(half, photo);
    }

    #[test]
    fn overlay_partial_and_disjoint() {
        let m = normalize_clip(&[map(&[0.0, 1.0, 2.0, 3.0], 2, 2)], 0).unwrap().remove(0);
        let c = Colormap::default();
        let photo = RgbImage::new(40, 10);
        // camera looks 60° right: only the map's right edge overlaps
        let spec = OverlaySpec {
            width: 40,
            height: 10,
            hfov_deg: 90.0,
            vfov_deg: 30.0,
            cam_az: 60.0,
            cam_el: 0.0,
            alpha: 1.0,
        };
        let out = overlay(&m, &photo, &spec, &c).unwrap();
        assert_ne!(out.pixel(0, 5), [0, 0, 0]);
        assert_eq!(out.pixel(39, 5), [0, 0, 0]);
        let far = OverlaySpec { cam_az: 150.0, ..spec };
        let err = overlay(&m, &photo, &far, &c).unwrap_err();
        assert!(matches!(err, HeatmapError::DisjointFov { .. }));
        assert!(err.to_string().contains("105"));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = normalize_clip(&[map(&[0.0, 1.0, 2.0, 3.0], 2, 2)], 0).unwrap().remove(0);
        let p = dir.path().join("m.png");
        export_png(&m, &Colormap::default(), &p, 3, Interpolation::Nearest).unwrap();
        let img = read_png(&p).unwrap();
        assert_eq!(img, render_rgb(&m, &Colormap::default(), 3, Interpolation::Nearest).unwrap());
    }
}
