//! Architecture strings such as `C(16)-MP(2,3.4)-C(32)-GMP-FC(10)`.
//!
//! | token          | layer                                         |
//! |----------------|-----------------------------------------------|
//! | `C(x)`         | graph convolution with `x` output features    |
//! | `MP(r,ρ)`      | VoxelGrid max pooling, resolution `ρ`, new graph radius `r` |
//! | `AP(r,ρ)`      | as `MP` with average pooling                  |
//! | `BC(x,r,ρ)`    | bipartite convolution onto the VoxelGrid super-nodes |
//! | `FC(y)`        | fully connected layer                         |
//! | `GMP`          | global max pooling                            |
//! | `D(p)`         | dropout with drop probability `p`             |
//!
//! Numbers are decimal literals or rationals `a/b`. Whitespace is ignored.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reference classifier for 28×28 digit images.
pub const MNIST_ARCH: &str = "C(16)-MP(2,3.4)-C(32)-MP(4,6.8)-C(64)-MP(8,30)-C(128)-D(0.5)-FC(10)";

/// Reference classifier for normalised point clouds.
pub const MODELNET_ARCH: &str =
    "C(16)-C(32)-MP(2.5/32,7.5/32)-C(32)-C(32)-MP(7.5/32,22.5/32)-C(64)-GMP-FC(64)- D(0.2)-FC(10)";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(usize),
    MaxPool { r: f64, rho: f64 },
    AvgPool { r: f64, rho: f64 },
    BConv { features: usize, r: f64, rho: f64 },
    Fc(usize),
    Gmp,
    Dropout(f64),
}

impl LayerSpec {
    pub fn is_pool(&self) -> bool {
        matches!(self, LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. })
    }

    /// The `(r, ρ)` pair of a pooling or bipartite layer.
    pub fn spatial(&self) -> Option<(f64, f64)> {
        match *self {
            LayerSpec::MaxPool { r, rho }
            | LayerSpec::AvgPool { r, rho }
            | LayerSpec::BConv { r, rho, .. } => Some((r, rho)),
            _ => None,
        }
    }

    /// Output width of a layer that produces features.
    pub fn features(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv(x) | LayerSpec::BConv { features: x, .. } | LayerSpec::Fc(x) => Some(x),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv(x) => write!(f, "C({x})"),
            LayerSpec::MaxPool { r, rho } => write!(f, "MP({},{})", num(r), num(rho)),
            LayerSpec::AvgPool { r, rho } => write!(f, "AP({},{})", num(r), num(rho)),
            LayerSpec::BConv { features, r, rho } => {
                write!(f, "BC({features},{},{})", num(r), num(rho))
            }
            LayerSpec::Fc(y) => write!(f, "FC({y})"),
            LayerSpec::Gmp => write!(f, "GMP"),
            LayerSpec::Dropout(p) => write!(f, "D({})", num(p)),
        }
    }
}

// Shortest decimal that parses back to the same f64.
fn num(v: f64) -> String {
    format!("{v}")
}

/// An ordered list of layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Canonical string form; rationals are rendered as decimals.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

fn perr<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        message: message.into(),
    })
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => perr(
                self.pos,
                format!("expected `{}`, found `{}`", c as char, got as char),
            ),
            None => perr(
                self.pos,
                format!("expected `{}`, found end of input", c as char),
            ),
        }
    }

    fn ident(&mut self) -> Result<(usize, String)> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        if start == self.pos {
            return perr(start, "expected a layer name");
        }
        Ok((
            start,
            String::from_utf8_lossy(&self.src[start..self.pos]).into_owned(),
        ))
    }

    // Blanks inside a literal are skipped.
    fn literal(&mut self) -> Result<(usize, String)> {
        self.skip_ws();
        let start = self.pos;
        let mut text = String::new();
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign = (c == b'+' || c == b'-') && text.ends_with(['e', 'E']);
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                text.push(c as char);
            } else if !c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if text.is_empty() {
            return perr(start, "expected a number");
        }
        Ok((start, text))
    }

    fn real(&mut self) -> Result<(usize, f64)> {
        let (start, num) = self.literal()?;
        let a = parse_decimal(start, &num)?;
        if self.peek() == Some(b'/') {
            self.pos += 1;
            let (dstart, den) = self.literal()?;
            let b = parse_decimal(dstart, &den)?;
            if b == 0.0 {
                return perr(dstart, "division by zero");
            }
            return Ok((start, a / b));
        }
        Ok((start, a))
    }

    fn count(&mut self) -> Result<usize> {
        let (start, text) = self.literal()?;
        if self.peek() == Some(b'/') {
            return perr(start, "feature counts must be whole numbers");
        }
        match text.parse::<usize>() {
            Ok(0) => perr(start, "feature count must be at least 1"),
            Ok(v) => Ok(v),
            Err(_) => perr(start, format!("`{text}` is not a whole number")),
        }
    }

    fn positive(&mut self) -> Result<f64> {
        let (start, v) = self.real()?;
        if !(v > 0.0) || !v.is_finite() {
            return perr(start, format!("expected a positive number, got {v}"));
        }
        Ok(v)
    }

    fn layer(&mut self) -> Result<LayerSpec> {
        let (start, name) = self.ident()?;
        if name == "GMP" {
            return Ok(LayerSpec::Gmp);
        }
        self.expect(b'(')?;
        let layer = match name.as_str() {
            "C" => LayerSpec::Conv(self.count()?),
            "FC" => LayerSpec::Fc(self.count()?),
            "MP" | "AP" => {
                let r = self.positive()?;
                self.expect(b',')?;
                let rho = self.positive()?;
                if name == "MP" {
                    LayerSpec::MaxPool { r, rho }
                } else {
                    LayerSpec::AvgPool { r, rho }
                }
            }
            "BC" => {
                let features = self.count()?;
                self.expect(b',')?;
                let r = self.positive()?;
                self.expect(b',')?;
                let rho = self.positive()?;
                LayerSpec::BConv { features, r, rho }
            }
            "D" => {
                let (at, p) = self.real()?;
                if !(0.0..1.0).contains(&p) {
                    return perr(
                        at,
                        format!("dropout probability must be in [0, 1), got {p}"),
                    );
                }
                LayerSpec::Dropout(p)
            }
            _ => return perr(start, format!("unknown layer `{name}`")),
        };
        match self.peek() {
            Some(b')') => {
                self.pos += 1;
                Ok(layer)
            }
            Some(b',') => perr(self.pos, format!("too many arguments for `{name}`")),
            _ => self.expect(b')').map(|_| layer),
        }
    }
}

fn parse_decimal(offset: usize, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => perr(offset, format!("`{s}` is not a valid number")),
    }
}

/// Parses an architecture string.
///
/// At most one `GMP` is allowed and only `FC` and `D` may follow it.
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let mut layers = Vec::new();
    let mut starts = Vec::new();
    loop {
        p.skip_ws();
        starts.push(p.pos);
        layers.push(p.layer()?);
        match p.peek() {
            None => break,
            Some(b'-') => p.pos += 1,
            Some(c) => {
                return perr(
                    p.pos,
                    format!("expected `-` between layers, found `{}`", c as char),
                )
            }
        }
    }
    let mut seen_gmp = false;
    for (l, &at) in layers.iter().zip(&starts) {
        match l {
            LayerSpec::Gmp if seen_gmp => return perr(at, "only one GMP layer is allowed"),
            LayerSpec::Gmp => seen_gmp = true,
            LayerSpec::Fc(_) | LayerSpec::Dropout(_) => {}
            _ if seen_gmp => return perr(at, format!("`{l}` cannot follow GMP")),
            _ => {}
        }
    }
    Ok(ArchSpec { layers })
}

/// Rewrites every `C(x)` directly followed by `MP(r,ρ)` or `AP(r,ρ)` into
/// `BC(x,r,ρ)`. Other layers are kept in order.
pub fn fuse_to_bgn(spec: &ArchSpec) -> Result<ArchSpec> {
    let mut out: Vec<LayerSpec> = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        if let Some((r, rho)) = l.spatial().filter(|_| l.is_pool()) {
            match out.last_mut() {
                Some(last @ LayerSpec::Conv(_)) => {
                    let features = last.features().unwrap();
                    *last = LayerSpec::BConv { features, r, rho };
                }
                _ => {
                    return Err(Error::Rewrite(format!(
                        "pooling layer {i} (`{l}`) is not preceded by a convolution"
                    )))
                }
            }
        } else {
            out.push(*l);
        }
    }
    Ok(ArchSpec { layers: out })
}
