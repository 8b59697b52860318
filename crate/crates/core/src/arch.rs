//! Plain-text architecture descriptors.
//!
//! ```text
//! # comments run to end of line
//! input = 28x28x1
//! conv kernel=3 filters=16 stride=1 padding=1
//! relu
//! maxpool size=2
//! flatten
//! dense units=10
//! ```
//!
//! `input` is either `HxWxC` (image) or a single width. Layer lines start with
//! the layer kind followed by `key=value` fields. Shapes are inferred front to
//! back; the final stage must produce a flat vector of class scores.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageSpec {
    Conv {
        kh: usize,
        kw: usize,
        filters: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl StageSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, StageSpec::Conv { .. } | StageSpec::Dense { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d { stride: usize, padding: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
        }
    }
}

/// Shape information for one prunable layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    /// `[in, out]` for dense, `[kh, kw, c_in, c_out]` for conv.
    pub weight: Vec<usize>,
    pub fan_in: usize,
    pub units: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    input: Vec<usize>,
    stages: Vec<StageSpec>,
    layers: Vec<LayerShape>,
    classes: usize,
}

pub const MNIST_CNN: &str = "\
# mnist-cnn
input = 28x28x1
conv kernel=3 filters=16 stride=1 padding=1
relu
maxpool size=2
conv kernel=3 filters=32 stride=1 padding=1
relu
maxpool size=2
flatten
dense units=64
relu
dense units=10
";

pub const CIFAR_CNN: &str = "\
# cifar-cnn
input = 32x32x3
conv kernel=3 filters=32 stride=1 padding=1
relu
maxpool size=2
conv kernel=3 filters=64 stride=1 padding=1
relu
maxpool size=2
flatten
dense units=128
relu
dense units=10
";

impl Architecture {
    /// Builds and validates an architecture. Errors report the 1-based stage
    /// position as the line.
    pub fn new(input: Vec<usize>, stages: Vec<StageSpec>) -> Result<Self> {
        let lines: Vec<usize> = (1..=stages.len()).collect();
        Self::validated(input, stages, &lines)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mnist-cnn" => Some(Self::parse(MNIST_CNN).expect("preset is valid")),
            "cifar-cnn" => Some(Self::parse(CIFAR_CNN).expect("preset is valid")),
            _ => None,
        }
    }

    /// A preset name, or else a path to a descriptor file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(arch) = Self::preset(name_or_path) {
            return Ok(arch);
        }
        let text = std::fs::read_to_string(Path::new(name_or_path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut stages = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let first = line.split_whitespace().next().unwrap_or("");
            if let Some((key, value)) = header(line, first) {
                match key {
                    "input" => input = Some(parse_dims(value, line_no, "input")?),
                    "name" => {}
                    other => return Err(parse_err(line_no, other, "unknown header key")),
                }
                continue;
            }
            stages.push(parse_stage(line, line_no)?);
            lines.push(line_no);
        }
        let input = input.ok_or_else(|| parse_err(0, "input", "missing `input = ...` line"))?;
        Self::validated(input, stages, &lines)
    }

    fn validated(input: Vec<usize>, stages: Vec<StageSpec>, lines: &[usize]) -> Result<Self> {
        if input.is_empty() || input.contains(&0) || !(input.len() == 1 || input.len() == 3) {
            return Err(parse_err(0, "input", "expected HxWxC or a single positive width"));
        }
        let mut shape = input.clone();
        let mut layers = Vec::new();
        for (stage, &line) in stages.iter().zip(lines) {
            shape = match *stage {
                StageSpec::Conv {
                    kh,
                    kw,
                    filters,
                    stride,
                    padding,
                } => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(parse_err(line, "conv", "needs an HxWxC input"));
                    };
                    if kh == 0 || kw == 0 || filters == 0 || stride == 0 {
                        return Err(parse_err(line, "conv", "kernel, filters and stride must be positive"));
                    }
                    if kh > h + 2 * padding || kw > w + 2 * padding {
                        return Err(parse_err(line, "kernel", "larger than padded input"));
                    }
                    layers.push(LayerShape {
                        kind: LayerKind::Conv2d { stride, padding },
                        weight: vec![kh, kw, c, filters],
                        fan_in: kh * kw * c,
                        units: filters,
                    });
                    vec![
                        (h + 2 * padding - kh) / stride + 1,
                        (w + 2 * padding - kw) / stride + 1,
                        filters,
                    ]
                }
                StageSpec::Dense { units } => {
                    let &[d] = shape.as_slice() else {
                        return Err(parse_err(line, "dense", "needs a flat input; insert `flatten`"));
                    };
                    if units == 0 {
                        return Err(parse_err(line, "units", "must be positive"));
                    }
                    layers.push(LayerShape {
                        kind: LayerKind::Dense,
                        weight: vec![d, units],
                        fan_in: d,
                        units,
                    });
                    vec![units]
                }
                StageSpec::Relu => shape,
                StageSpec::MaxPool { size } => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(parse_err(line, "maxpool", "needs an HxWxC input"));
                    };
                    if size == 0 || size > h || size > w {
                        return Err(parse_err(line, "size", "does not fit the input"));
                    }
                    vec![h / size, w / size, c]
                }
                StageSpec::Flatten => vec![shape.iter().product()],
            };
        }
        let &[classes] = shape.as_slice() else {
            return Err(parse_err(0, "output", "final stage must produce a flat vector"));
        };
        if layers.is_empty() {
            return Err(parse_err(0, "layers", "no conv or dense layer"));
        }
        Ok(Self {
            input,
            stages,
            layers,
            classes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Canonical descriptor text; parses back to an equal architecture.
    pub fn to_descriptor(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.input.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "input = {}", dims.join("x"));
        for stage in &self.stages {
            let _ = match stage {
                StageSpec::Conv {
                    kh,
                    kw,
                    filters,
                    stride,
                    padding,
                } => writeln!(
                    s,
                    "conv kernel={kh}x{kw} filters={filters} stride={stride} padding={padding}"
                ),
                StageSpec::Dense { units } => writeln!(s, "dense units={units}"),
                StageSpec::Relu => writeln!(s, "relu"),
                StageSpec::MaxPool { size } => writeln!(s, "maxpool size={size}"),
                StageSpec::Flatten => writeln!(s, "flatten"),
            };
        }
        s
    }
}

fn parse_err(line: usize, field: &str, message: &str) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

/// `key = value` header lines (the key is a single token and no layer kind).
fn header<'a>(line: &'a str, first: &str) -> Option<(&'a str, &'a str)> {
    if matches!(first, "conv" | "dense" | "relu" | "maxpool" | "flatten") {
        return None;
    }
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn parse_dims(value: &str, line: usize, field: &str) -> Result<Vec<usize>> {
    value
        .split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, field, &format!("`{value}` is not a dimension list")))
        })
        .collect()
}

type Fields<'a> = Vec<(&'a str, &'a str)>;

fn take_raw<'a>(fields: &mut Fields<'a>, key: &str) -> Option<&'a str> {
    let i = fields.iter().position(|(k, _)| *k == key)?;
    Some(fields.remove(i).1)
}

fn take_usize(fields: &mut Fields<'_>, key: &str, default: Option<usize>, line: usize) -> Result<usize> {
    match take_raw(fields, key) {
        Some(v) => v
            .parse()
            .map_err(|_| parse_err(line, key, &format!("`{v}` is not a non-negative integer"))),
        None => default.ok_or_else(|| parse_err(line, key, "required field missing")),
    }
}

fn parse_stage(line: &str, line_no: usize) -> Result<StageSpec> {
    let mut tokens = line.split_whitespace();
    let kind = tokens.next().unwrap_or_default();
    let mut fields = Fields::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, tok, "expected key=value"))?;
        fields.push((k, v));
    }
    let f = &mut fields;
    let stage = match kind {
        "conv" => {
            let kernel = take_raw(f, "kernel")
                .ok_or_else(|| parse_err(line_no, "kernel", "required field missing"))?;
            let (kh, kw) = match parse_dims(kernel, line_no, "kernel")?.as_slice() {
                [k] => (*k, *k),
                [h, w] => (*h, *w),
                _ => return Err(parse_err(line_no, "kernel", "expected K or KHxKW")),
            };
            StageSpec::Conv {
                kh,
                kw,
                filters: take_usize(f, "filters", None, line_no)?,
                stride: take_usize(f, "stride", Some(1), line_no)?,
                padding: take_usize(f, "padding", Some(0), line_no)?,
            }
        }
        "dense" => StageSpec::Dense {
            units: take_usize(f, "units", None, line_no)?,
        },
        "maxpool" => StageSpec::MaxPool {
            size: take_usize(f, "size", Some(2), line_no)?,
        },
        "relu" => StageSpec::Relu,
        "flatten" => StageSpec::Flatten,
        other => return Err(parse_err(line_no, other, "unknown layer kind")),
    };
    if let Some((k, _)) = fields.first() {
        return Err(parse_err(line_no, k, "unknown field"));
    }
    Ok(stage)
}
