//! Manipulation argument and result values, plus the canonical text printer
//! shared by the DSL, the executors and the metric.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest normalized coordinate.
pub const COORD_MAX: u16 = 999;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValueError {
    #[error("coordinate {0} outside 0..=999")]
    CoordinateOutOfRange(i64),
    #[error("box corners out of order: ({x0},{y0},{x1},{y1})")]
    InvertedBox { x0: u16, y0: u16, x1: u16, y1: u16 },
    #[error("cannot parse value literal {0:?}")]
    Unparseable(String),
}

/// Axis-aligned box in normalized `[0, 999]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[u16; 4]")]
pub struct NormBox {
    x0: u16,
    y0: u16,
    x1: u16,
    y1: u16,
}

impl NormBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self, ValueError> {
        let c = |v: i64| {
            if (0..=COORD_MAX as i64).contains(&v) {
                Ok(v as u16)
            } else {
                Err(ValueError::CoordinateOutOfRange(v))
            }
        };
        let (x0, y0, x1, y1) = (c(x0)?, c(y0)?, c(x1)?, c(y1)?);
        if x0 > x1 || y0 > y1 {
            return Err(ValueError::InvertedBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self { x0: 0, y0: 0, x1: COORD_MAX, y1: COORD_MAX }
    }

    pub fn x0(&self) -> u16 {
        self.x0
    }
    pub fn y0(&self) -> u16 {
        self.y0
    }
    pub fn x1(&self) -> u16 {
        self.x1
    }
    pub fn y1(&self) -> u16 {
        self.y1
    }

    pub fn coords(&self) -> [u16; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Area in normalized units, treating the box as a continuous rectangle.
    pub fn area(&self) -> u64 {
        (self.x1 - self.x0) as u64 * (self.y1 - self.y0) as u64
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 >= ix1 || iy0 >= iy1 {
            return 0.0;
        }
        let inter = (ix1 - ix0) as u64 * (iy1 - iy0) as u64;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl TryFrom<[i64; 4]> for NormBox {
    type Error = ValueError;
    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [u16; 4] {
    fn from(b: NormBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for NormBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Point in normalized `[0, 999]²` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[u16; 2]")]
pub struct NormPoint {
    pub x: u16,
    pub y: u16,
}

impl NormPoint {
    pub fn new(x: i64, y: i64) -> Result<Self, ValueError> {
        for v in [x, y] {
            if !(0..=COORD_MAX as i64).contains(&v) {
                return Err(ValueError::CoordinateOutOfRange(v));
            }
        }
        Ok(Self { x: x as u16, y: y as u16 })
    }
}

impl TryFrom<[i64; 2]> for NormPoint {
    type Error = ValueError;
    fn try_from(v: [i64; 2]) -> Result<Self, Self::Error> {
        NormPoint::new(v[0], v[1])
    }
}

impl From<NormPoint> for [u16; 2] {
    fn from(p: NormPoint) -> Self {
        [p.x, p.y]
    }
}

/// Exact rational number used for counts and calculations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Num(pub BigRational);

impl Num {
    pub fn from_int(v: i64) -> Self {
        Num(BigRational::from_integer(BigInt::from(v)))
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn to_f64(&self) -> Option<f64> {
        self.0.to_f64()
    }

    /// Parses `12`, `-3`, `2.75`, `.5` or `7/2`.
    pub fn parse(s: &str) -> Option<Num> {
        let s = s.trim();
        if s.is_empty() {
            return None;
        }
        if let Some((n, d)) = s.split_once('/') {
            let n = Num::parse_decimal(n)?;
            let d = Num::parse_decimal(d)?;
            if d.0.is_zero() {
                return None;
            }
            return Some(Num(n.0 / d.0));
        }
        Num::parse_decimal(s)
    }

    fn parse_decimal(s: &str) -> Option<Num> {
        let s = s.trim();
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return None;
        }
        let digits = format!("{int_part}{frac_part}");
        let numer: BigInt = digits.parse().ok()?;
        let denom = num_traits::pow(BigInt::from(10), frac_part.len());
        let mut r = BigRational::new(numer, denom);
        if neg {
            r = -r;
        }
        Some(Num(r))
    }
}

impl fmt::Display for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.denom().is_one() {
            write!(f, "{}", self.0.numer())
        } else {
            let sign = if self.0.is_negative() { "-" } else { "" };
            write!(f, "{}{}/{}", sign, self.0.numer().abs(), self.0.denom())
        }
    }
}

impl Serialize for Num {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Num::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad number {s:?}")))
    }
}

/// Opaque reference to an image held by an [`crate::exec::ImageStore`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageHandle(pub String);

impl ImageHandle {
    pub fn new(s: impl Into<String>) -> Self {
        ImageHandle(s.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Tag of a [`Value`] variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Box,
    BoxList,
    Num,
    Image,
    Points,
}

impl ValueKind {
    /// Kind implied by a conventional variable prefix (`bbx_3` -> Box).
    pub fn from_var_prefix(var: &str) -> Option<ValueKind> {
        let prefix = var.split('_').next()?;
        match prefix {
            "bbx" => Some(ValueKind::Box),
            "txt" => Some(ValueKind::Text),
            "num" => Some(ValueKind::Num),
            "img" => Some(ValueKind::Image),
            "pts" => Some(ValueKind::Points),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Text(String),
    Box(NormBox),
    BoxList(Vec<NormBox>),
    Num(Num),
    Image(ImageHandle),
    Points(Vec<NormPoint>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Text(_) => ValueKind::Text,
            Value::Box(_) => ValueKind::Box,
            Value::BoxList(_) => ValueKind::BoxList,
            Value::Num(_) => ValueKind::Num,
            Value::Image(_) => ValueKind::Image,
            Value::Points(_) => ValueKind::Points,
        }
    }

    /// Text used when this value is the terminal answer of a path.
    pub fn answer_text(&self) -> String {
        match self {
            Value::Text(t) => t.clone(),
            other => other.to_string(),
        }
    }

    /// Parses the output of the `Display` printer. Returns the value and the
    /// number of bytes consumed from the start of `s`.
    pub fn parse_prefix(s: &str) -> Result<(Value, usize), ValueError> {
        let err = || ValueError::Unparseable(s.chars().take(40).collect());
        let bytes = s.as_bytes();
        match bytes.first() {
            Some(b'"') => {
                let mut de = serde_json::Deserializer::from_str(s).into_iter::<String>();
                match de.next() {
                    Some(Ok(text)) => Ok((Value::Text(text), de.byte_offset())),
                    _ => Err(err()),
                }
            }
            Some(b'<') => {
                let rest = &s[1..];
                let body = rest.strip_prefix("image:").ok_or_else(err)?;
                let end = body.find('>').ok_or_else(err)?;
                let handle = &body[..end];
                Ok((
                    Value::Image(ImageHandle::new(handle)),
                    1 + "image:".len() + end + 1,
                ))
            }
            Some(b'(') => {
                let (tuple, used) = parse_tuple(s).ok_or_else(err)?;
                match tuple.as_slice() {
                    [x0, y0, x1, y1] => Ok((Value::Box(NormBox::new(*x0, *y0, *x1, *y1)?), used)),
                    _ => Err(err()),
                }
            }
            Some(b'[') => {
                let mut pos = 1;
                let mut tuples = Vec::new();
                loop {
                    pos += s[pos..].len() - s[pos..].trim_start().len();
                    match s.as_bytes().get(pos) {
                        Some(b']') => {
                            pos += 1;
                            break;
                        }
                        Some(b'(') => {
                            let (t, used) = parse_tuple(&s[pos..]).ok_or_else(err)?;
                            tuples.push(t);
                            pos += used;
                            pos += s[pos..].len() - s[pos..].trim_start().len();
                            match s.as_bytes().get(pos) {
                                Some(b',') => pos += 1,
                                Some(b']') => {}
                                _ => return Err(err()),
                            }
                        }
                        _ => return Err(err()),
                    }
                }
                if tuples.iter().all(|t| t.len() == 4) {
                    let boxes = tuples
                        .iter()
                        .map(|t| NormBox::new(t[0], t[1], t[2], t[3]))
                        .collect::<Result<Vec<_>, _>>()?;
                    if tuples.is_empty() {
                        // An empty list prints the same for both kinds; boxes win.
                        return Ok((Value::BoxList(Vec::new()), pos));
                    }
                    Ok((Value::BoxList(boxes), pos))
                } else if tuples.iter().all(|t| t.len() == 2) {
                    let pts = tuples
                        .iter()
                        .map(|t| NormPoint::new(t[0], t[1]))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok((Value::Points(pts), pos))
                } else {
                    Err(err())
                }
            }
            Some(c) if c.is_ascii_digit() || *c == b'-' => {
                let mut end = 0;
                let num_end = |from: usize| {
                    let mut i = from;
                    if bytes.get(i) == Some(&b'-') {
                        i += 1;
                    }
                    let start = i;
                    while bytes.get(i).is_some_and(|b| b.is_ascii_digit()) {
                        i += 1;
                    }
                    if i == start {
                        return None;
                    }
                    Some(i)
                };
                end = num_end(end).ok_or_else(err)?;
                if bytes.get(end) == Some(&b'/') && bytes.get(end + 1).is_some_and(|b| b.is_ascii_digit()) {
                    end = num_end(end + 1).ok_or_else(err)?;
                }
                let n = Num::parse(&s[..end]).ok_or_else(err)?;
                Ok((Value::Num(n), end))
            }
            _ => Err(err()),
        }
    }
}

fn parse_tuple(s: &str) -> Option<(Vec<i64>, usize)> {
    let close = s.find(')')?;
    let inner = &s[1..close];
    let vals = inner
        .split(',')
        .map(|p| p.trim().parse::<i64>().ok())
        .collect::<Option<Vec<_>>>()?;
    Some((vals, close + 1))
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(t) => write!(f, "{}", serde_json::to_string(t).map_err(|_| fmt::Error)?),
            Value::Box(b) => write!(f, "{b}"),
            Value::BoxList(bs) => {
                f.write_str("[")?;
                for (i, b) in bs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{b}")?;
                }
                f.write_str("]")
            }
            Value::Num(n) => write!(f, "{n}"),
            Value::Image(h) => write!(f, "<image:{h}>"),
            Value::Points(ps) => {
                f.write_str("[")?;
                for (i, p) in ps.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "({},{})", p.x, p.y)?;
                }
                f.write_str("]")
            }
        }
    }
}
