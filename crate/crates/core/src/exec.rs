//! Manipulations that run locally without an external model: crop-and-zoom
//! with Keys bicubic resampling, line drawing, box counting and exact
//! arithmetic.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{ImageHandle, NormBox, NormPoint, Num, COORD_MAX};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("crop region has zero area")]
    DegenerateRegion,
    #[error("line needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("syntax error in expression {expr:?} at {pos}")]
    SyntaxError { expr: String, pos: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("zoom ratio must be positive, got {0}")]
    InvalidRatio(String),
    #[error("image {0} not found")]
    ImageNotFound(String),
    #[error("cannot decode image {handle}: {message}")]
    ImageDecode { handle: String, message: String },
    #[error("bad argument: {0}")]
    BadArgument(String),
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        let data = fill.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (width >= 1 && height >= 1 && data.len() == width as usize * height as usize * 3)
            .then_some(Self { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height, [0, 0, 0]);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn crop(&self, rect: PixelRect) -> ImageBuffer {
        let w = rect.x1 - rect.x0 + 1;
        let h = rect.y1 - rect.y0 + 1;
        ImageBuffer::from_fn(w, h, |x, y| self.get(rect.x0 + x, rect.y0 + y))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, String> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| e.to_string())?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw()).ok_or_else(|| "empty image".to_string())
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        let buf = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions");
        buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn load_png(path: &Path) -> Result<Self, ExecError> {
        let handle = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|_| ExecError::ImageNotFound(handle.clone()))?;
        Self::decode_png(&bytes).map_err(|message| ExecError::ImageDecode { handle, message })
    }

    pub fn save_png(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode_png())
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

fn denormalize_coord(c: u16, extent: u32) -> u32 {
    (c as u64 * (extent as u64 - 1) / COORD_MAX as u64) as u32
}

/// Maps a normalized box onto pixel coordinates with
/// `p = floor(c / 999 * (extent - 1))`.
pub fn denormalize_box(b: &NormBox, width: u32, height: u32) -> PixelRect {
    PixelRect {
        x0: denormalize_coord(b.x0(), width),
        y0: denormalize_coord(b.y0(), height),
        x1: denormalize_coord(b.x1(), width),
        y1: denormalize_coord(b.y1(), height),
    }
}

pub fn denormalize_point(p: &NormPoint, width: u32, height: u32) -> (u32, u32) {
    (denormalize_coord(p.x, width), denormalize_coord(p.y, height))
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four clamped source taps and normalized weights for each output position.
fn axis_taps(in_len: u32, out_len: u32) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let offset = k as f64 - 1.0;
                let i = (base + offset).clamp(0.0, in_len as f64 - 1.0);
                idx[k] = i as usize;
                w[k] = keys_kernel(frac - offset);
            }
            let sum: f64 = w.iter().sum();
            for wk in &mut w {
                *wk /= sum;
            }
            (idx, w)
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Separable Keys bicubic resampling with edge-clamped sampling.
pub fn bicubic_resample(image: &ImageBuffer, out_w: u32, out_h: u32) -> ImageBuffer {
    assert!(out_w >= 1 && out_h >= 1, "output size must be at least 1x1");
    let (in_w, in_h) = (image.width, image.height);
    let xs = axis_taps(in_w, out_w);
    let ys = axis_taps(in_h, out_h);

    // Horizontal pass into f64 rows, then vertical pass; rounding happens once.
    let mut tmp = vec![0f64; out_w as usize * in_h as usize * 3];
    for y in 0..in_h as usize {
        let row = &image.data[y * in_w as usize * 3..(y + 1) * in_w as usize * 3];
        for (ox, (idx, w)) in xs.iter().enumerate() {
            for c in 0..3 {
                let acc: f64 = (0..4).map(|k| w[k] * row[idx[k] * 3 + c] as f64).sum();
                tmp[(y * out_w as usize + ox) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; out_w as usize * out_h as usize * 3];
    for (oy, (idx, w)) in ys.iter().enumerate() {
        for ox in 0..out_w as usize {
            for c in 0..3 {
                let acc: f64 = (0..4).map(|k| w[k] * tmp[(idx[k] * out_w as usize + ox) * 3 + c]).sum();
                out[(oy * out_w as usize + ox) * 3 + c] = to_u8(acc);
            }
        }
    }
    ImageBuffer { width: out_w, height: out_h, data: out }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoomSpec {
    pub region: NormBox,
    /// Magnification; `None` selects the default rule.
    pub ratio: Option<Num>,
}

/// Default magnification: bring the crop's longer side up to the source's
/// longer side, capped at 4x and never below 1x.
pub fn default_zoom_ratio(crop_w: u32, crop_h: u32, src_w: u32, src_h: u32) -> Num {
    let r = BigRational::new(BigInt::from(src_w.max(src_h)), BigInt::from(crop_w.max(crop_h)));
    let four = BigRational::from_integer(BigInt::from(4));
    let one = BigRational::one();
    Num(r.min(four).max(one))
}

fn scaled_len(len: u32, ratio: &BigRational) -> u32 {
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let v = (BigRational::from_integer(BigInt::from(len)) * ratio + half).floor();
    v.to_integer().to_u32().unwrap_or(u32::MAX).max(1)
}

/// Crops the region and magnifies it with bicubic resampling.
pub fn exec_crop_zoomin(image: &ImageBuffer, spec: &ZoomSpec) -> Result<ImageBuffer, ExecError> {
    let rect = denormalize_box(&spec.region, image.width, image.height);
    if rect.x1 == rect.x0 || rect.y1 == rect.y0 {
        return Err(ExecError::DegenerateRegion);
    }
    let crop = image.crop(rect);
    let ratio = match &spec.ratio {
        Some(r) if r.0.is_positive() => r.clone(),
        Some(r) => return Err(ExecError::InvalidRatio(r.to_string())),
        None => default_zoom_ratio(crop.width, crop.height, image.width, image.height),
    };
    let out_w = scaled_len(crop.width, &ratio.0);
    let out_h = scaled_len(crop.height, &ratio.0);
    Ok(bicubic_resample(&crop, out_w, out_h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineStyle {
    pub color: [u8; 3],
    pub width: u32,
}

impl Default for LineStyle {
    fn default() -> Self {
        Self { color: [255, 0, 0], width: 2 }
    }
}

fn stamp(img: &mut ImageBuffer, x: i64, y: i64, style: &LineStyle) {
    let w = style.width.max(1) as i64;
    let lo = -(w - 1) / 2;
    for dy in lo..lo + w {
        for dx in lo..lo + w {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && px < img.width as i64 && py < img.height as i64 {
                img.put(px as u32, py as u32, style.color);
            }
        }
    }
}

/// Draws straight segments between consecutive points on a copy of `image`.
pub fn exec_line(image: &ImageBuffer, pts: &[NormPoint], style: &LineStyle) -> Result<ImageBuffer, ExecError> {
    if pts.len() < 2 {
        return Err(ExecError::TooFewPoints(pts.len()));
    }
    let mut out = image.clone();
    for pair in pts.windows(2) {
        let (x0, y0) = denormalize_point(&pair[0], image.width, image.height);
        let (x1, y1) = denormalize_point(&pair[1], image.width, image.height);
        let (mut x, mut y) = (x0 as i64, y0 as i64);
        let (x1, y1) = (x1 as i64, y1 as i64);
        let dx = (x1 - x).abs();
        let dy = -(y1 - y).abs();
        let sx = if x < x1 { 1 } else { -1 };
        let sy = if y < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            stamp(&mut out, x, y, style);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    Ok(out)
}

pub const DEFAULT_DEDUP_IOU: f64 = 0.9;

/// Counts boxes after merging near-duplicates (IoU at or above `dedup_iou`).
/// The input is put in a canonical order first so the count does not depend
/// on annotator ordering.
pub fn exec_counting(boxes: &[NormBox], dedup_iou: f64) -> Num {
    let mut sorted = boxes.to_vec();
    sorted.sort_by_key(|b| b.coords());
    let mut kept: Vec<NormBox> = Vec::new();
    for b in sorted {
        if !kept.iter().any(|k| k.iou(&b) >= dedup_iou) {
            kept.push(b);
        }
    }
    Num::from_int(kept.len() as i64)
}

/// Evaluates `+ - * /` (also `×` and `÷`) with parentheses and unary minus
/// over exact rationals.
pub fn exec_calculate(expr: &str) -> Result<Num, ExecError> {
    let tokens = tokenize(expr)?;
    let mut p = ExprParser { expr, tokens, pos: 0 };
    let v = p.sum()?;
    if p.pos != p.tokens.len() {
        return Err(p.syntax_error());
    }
    Ok(Num(v))
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Op(char),
    Open,
    Close,
}

fn tokenize(expr: &str) -> Result<Vec<(Tok, usize)>, ExecError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = expr.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = pos;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                let end = chars.get(i).map_or(expr.len(), |c| c.0);
                let n = Num::parse(&expr[start..end])
                    .filter(|_| expr[start..end].matches('.').count() <= 1)
                    .ok_or(ExecError::SyntaxError { expr: expr.to_string(), pos: start })?;
                out.push((Tok::Num(n.0), start));
            }
            '+' | '-' => {
                out.push((Tok::Op(c), pos));
                i += 1;
            }
            '*' | '×' => {
                out.push((Tok::Op('*'), pos));
                i += 1;
            }
            '/' | '÷' => {
                out.push((Tok::Op('/'), pos));
                i += 1;
            }
            '(' => {
                out.push((Tok::Open, pos));
                i += 1;
            }
            ')' => {
                out.push((Tok::Close, pos));
                i += 1;
            }
            _ => return Err(ExecError::SyntaxError { expr: expr.to_string(), pos }),
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    expr: &'a str,
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl ExprParser<'_> {
    fn syntax_error(&self) -> ExecError {
        let pos = self.tokens.get(self.pos).map_or(self.expr.len(), |t| t.1);
        ExecError::SyntaxError { expr: self.expr.to_string(), pos }
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.0)
    }

    fn sum(&mut self) -> Result<BigRational, ExecError> {
        let mut acc = self.product()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.product()?;
            acc = if op == '+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn product(&mut self) -> Result<BigRational, ExecError> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            if op == '*' {
                acc *= rhs;
            } else {
                if rhs.is_zero() {
                    return Err(ExecError::DivisionByZero);
                }
                acc /= rhs;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<BigRational, ExecError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<BigRational, ExecError> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            Some(Tok::Open) => {
                self.pos += 1;
                let v = self.sum()?;
                if self.peek() != Some(&Tok::Close) {
                    return Err(self.syntax_error());
                }
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.syntax_error()),
        }
    }
}

/// Images addressed by handle. Source images are read lazily from disk
/// relative to `root`; derived images are inserted by the executors.
#[derive(Debug)]
pub struct ImageStore {
    root: PathBuf,
    images: Mutex<HashMap<ImageHandle, Arc<ImageBuffer>>>,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), images: Mutex::new(HashMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, handle: &ImageHandle) -> Result<Arc<ImageBuffer>, ExecError> {
        if let Some(img) = self.images.lock().expect("image store lock").get(handle) {
            return Ok(img.clone());
        }
        let path = self.root.join(handle.as_str());
        let bytes = std::fs::read(&path).map_err(|_| ExecError::ImageNotFound(handle.to_string()))?;
        let img = ImageBuffer::decode_png(&bytes)
            .map_err(|message| ExecError::ImageDecode { handle: handle.to_string(), message })?;
        let img = Arc::new(img);
        self.images.lock().expect("image store lock").insert(handle.clone(), img.clone());
        Ok(img)
    }

    pub fn insert(&self, handle: ImageHandle, image: ImageBuffer) -> Arc<ImageBuffer> {
        let img = Arc::new(image);
        self.images.lock().expect("image store lock").insert(handle, img.clone());
        img
    }
}
