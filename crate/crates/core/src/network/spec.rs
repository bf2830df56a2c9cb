use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::valid_output_extent;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    },
    MaxPool {
        k: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        out: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    /// Whether each output element depends only on a bounded spatial window.
    pub fn is_local(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. } | LayerSpec::Relu
        )
    }

    /// `(window, stride)` per spatial dim; pointwise layers report `(1, 1)`.
    pub fn window(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv { k, stride, .. } | LayerSpec::MaxPool { k, stride } => {
                Some((k, stride))
            }
            LayerSpec::Relu => Some((1, 1)),
            LayerSpec::Flatten | LayerSpec::Linear { .. } => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out,
                k,
                stride,
                bias,
            } => {
                write!(f, "conv out={out} k={k} stride={stride}")?;
                if bias {
                    write!(f, " bias")?;
                }
                Ok(())
            }
            LayerSpec::MaxPool { k, stride } => write!(f, "maxpool k={k} stride={stride}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Linear { out } => write!(f, "linear out={out}"),
        }
    }
}

/// A sequential network: `layers[..split]` is the streamed prefix and
/// `layers[split..]` the conventionally executed tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub split: usize,
    pub dtype: DType,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, split: usize, dtype: DType) -> Self {
        Self {
            layers,
            split,
            dtype,
        }
    }

    pub fn prefix(&self) -> &[LayerSpec] {
        &self.layers[..self.split.min(self.layers.len())]
    }

    pub fn tail(&self) -> &[LayerSpec] {
        &self.layers[self.split.min(self.layers.len())..]
    }

    /// Product of the prefix strides.
    pub fn output_stride(&self) -> usize {
        self.prefix()
            .iter()
            .filter_map(|l| l.window())
            .map(|(_, s)| s)
            .product()
    }

    /// Checks the split index and the locality restriction, independent of
    /// any input geometry.
    pub fn check_structure(&self) -> Result<()> {
        if self.split == 0 || self.split > self.layers.len() {
            return Err(Error::Usage(format!(
                "split index {} must satisfy 0 < split <= {} (layer count)",
                self.split,
                self.layers.len()
            )));
        }
        if let Some((index, l)) = self
            .prefix()
            .iter()
            .enumerate()
            .find(|(_, l)| !l.is_local())
        {
            return Err(Error::NonLocalLayerInPrefix {
                index,
                kind: l.kind().into(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&emit_spec(self))
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s)
    }
}

const NORMALIZATION_KINDS: &[&str] = &[
    "batchnorm",
    "batch_norm",
    "bn",
    "layernorm",
    "layer_norm",
    "groupnorm",
    "group_norm",
    "instancenorm",
    "instance_norm",
];

struct Fields<'a> {
    line: usize,
    values: BTreeMap<&'a str, &'a str>,
    flags: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, tokens: &[&'a str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut flags = Vec::new();
        for tok in tokens {
            match tok.split_once('=') {
                Some((k, v)) => {
                    if values.insert(k, v).is_some() {
                        return Err(parse_err(line, format!("duplicate key `{k}`")));
                    }
                }
                None => flags.push(*tok),
            }
        }
        Ok(Self {
            line,
            values,
            flags,
        })
    }

    fn positive(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        let v = match self.values.remove(key) {
            Some(raw) => raw.parse::<usize>().map_err(|_| {
                parse_err(self.line, format!("`{key}` expects a positive integer, got `{raw}`"))
            })?,
            None => default
                .ok_or_else(|| parse_err(self.line, format!("missing required key `{key}`")))?,
        };
        if v == 0 {
            return Err(parse_err(self.line, format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    fn flag(&mut self, name: &str) -> bool {
        let before = self.flags.len();
        self.flags.retain(|f| *f != name);
        self.flags.len() != before
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.values.keys().next() {
            return Err(parse_err(self.line, format!("unknown key `{k}`")));
        }
        if let Some(f) = self.flags.first() {
            return Err(parse_err(self.line, format!("unknown token `{f}`")));
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_layer(line: usize, tokens: &[&str]) -> Result<LayerSpec> {
    let kind = tokens[0];
    let mut fields = Fields::parse(line, &tokens[1..])?;
    let layer = match kind {
        "conv" => {
            let out = fields.positive("out", None)?;
            let k = fields.positive("k", None)?;
            let stride = fields.positive("stride", Some(1))?;
            let bias = fields.flag("bias");
            LayerSpec::Conv {
                out,
                k,
                stride,
                bias,
            }
        }
        "maxpool" => {
            let k = fields.positive("k", None)?;
            let stride = fields.positive("stride", Some(k))?;
            LayerSpec::MaxPool { k, stride }
        }
        "relu" => LayerSpec::Relu,
        "flatten" => LayerSpec::Flatten,
        "linear" => LayerSpec::Linear {
            out: fields.positive("out", None)?,
        },
        k if NORMALIZATION_KINDS.contains(&k.to_ascii_lowercase().as_str()) => {
            return Err(parse_err(
                line,
                format!("normalization layer `{k}` is not supported"),
            ));
        }
        other => return Err(parse_err(line, format!("unknown layer kind `{other}`"))),
    };
    fields.finish()?;
    Ok(layer)
}

fn parse_header(line: usize, tokens: &[&str]) -> Result<(usize, DType)> {
    let mut fields = Fields::parse(line, tokens)?;
    let split = match fields.values.remove("split") {
        Some(raw) => raw
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("`split` expects an integer, got `{raw}`")))?,
        None => return Err(parse_err(line, "header must set `split=<i>`")),
    };
    let dtype = match fields.values.remove("dtype") {
        Some(raw) => raw.parse::<DType>().map_err(|e| parse_err(line, e.to_string()))?,
        None => return Err(parse_err(line, "header must set `dtype=<f32|f64>`")),
    };
    fields.finish()?;
    Ok((split, dtype))
}

/// Parses the line-oriented network format. The first non-comment line is
/// the `split=<i> dtype=<f32|f64>` header; each further line is one layer.
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let mut header = None;
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if header.is_none() {
            if !tokens[0].contains('=') {
                return Err(parse_err(
                    line,
                    "expected header `split=<i> dtype=<f32|f64>` before the first layer",
                ));
            }
            header = Some(parse_header(line, &tokens)?);
        } else {
            layers.push(parse_layer(line, &tokens)?);
        }
    }
    let (split, dtype) =
        header.ok_or_else(|| parse_err(text.lines().count().max(1), "missing header line"))?;
    if layers.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "network has no layers"));
    }
    Ok(NetworkSpec::new(layers, split, dtype))
}

/// Canonical text form: header first, one layer per line, every key spelled out.
pub fn emit_spec(spec: &NetworkSpec) -> String {
    let mut out = format!("split={} dtype={}\n", spec.split, spec.dtype);
    for l in &spec.layers {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

/// Full tensor shapes flowing through a network for one input geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    /// `outputs[l]` is the shape produced by layer `l`.
    pub outputs: Vec<Vec<usize>>,
}

impl ShapeTrace {
    /// Shape entering layer `l` (the network input for `l == 0`).
    pub fn input_of(&self, l: usize) -> &[usize] {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }

    pub fn output(&self) -> &[usize] {
        self.outputs.last().map_or(&self.input, |s| s)
    }
}

/// Output shape of a single layer, given the shape entering it.
pub fn layer_output_shape(index: usize, layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    let spatial_layer = |k: usize, stride: usize, channels: usize| -> Result<Vec<usize>> {
        if shape.len() < 3 {
            return Err(Error::dim(format!(
                "layer {index} ({}) needs spatial input, got shape {shape:?}",
                layer.kind()
            )));
        }
        let spatial = &shape[2..];
        let window = vec![k; spatial.len()];
        let strides = vec![stride; spatial.len()];
        let out = valid_output_extent(spatial, &window, &strides).map_err(|_| {
            Error::ShapeUnderflow {
                index,
                kind: layer.kind().into(),
                detail: format!("window {k} does not fit spatial extent {spatial:?}"),
            }
        })?;
        let mut s = vec![shape[0], channels];
        s.extend(out);
        Ok(s)
    };
    match *layer {
        LayerSpec::Conv { out, k, stride, .. } => spatial_layer(k, stride, out),
        LayerSpec::MaxPool { k, stride } => spatial_layer(k, stride, shape[1]),
        LayerSpec::Relu => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape[0], shape[1..].iter().product()]),
        LayerSpec::Linear { out } => Ok(vec![shape[0], out]),
    }
}

/// Checks structure and composes shapes for `input_shape` = (batch, channels, spatial...).
pub fn validate(spec: &NetworkSpec, input_shape: &[usize]) -> Result<ShapeTrace> {
    spec.check_structure()?;
    if !(3..=4).contains(&input_shape.len()) || input_shape.contains(&0) {
        return Err(Error::dim(format!(
            "input must be (batch, channels, spatial...) with 1 or 2 positive spatial dims, got {input_shape:?}"
        )));
    }
    let mut outputs = Vec::with_capacity(spec.layers.len());
    let mut shape = input_shape.to_vec();
    for (i, l) in spec.layers.iter().enumerate() {
        shape = layer_output_shape(i, l, &shape)?;
        outputs.push(shape.clone());
    }
    Ok(ShapeTrace {
        input: input_shape.to_vec(),
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment line
split=2   dtype=f64
conv out=4 k=3 stride=1 bias  # trailing
maxpool k=2 stride=2
flatten
linear out=3
";

    #[test]
    fn parse_and_canonical_round_trip() {
        let spec = parse_spec(SAMPLE).unwrap();
        assert_eq!(spec.split, 2);
        assert_eq!(spec.dtype, DType::F64);
        assert_eq!(
            spec.layers,
            vec![
                LayerSpec::Conv {
                    out: 4,
                    k: 3,
                    stride: 1,
                    bias: true
                },
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 3 },
            ]
        );
        let canon = emit_spec(&spec);
        assert_eq!(
            canon,
            "split=2 dtype=f64\nconv out=4 k=3 stride=1 bias\nmaxpool k=2 stride=2\nflatten\nlinear out=3\n"
        );
        assert_eq!(emit_spec(&parse_spec(&canon).unwrap()), canon);
    }

    #[test]
    fn unknown_kind_reports_line() {
        let err = parse_spec("split=1 dtype=f32\nconv out=1 k=1\n\nsoftmax\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn normalization_named_in_error() {
        let err = parse_spec("split=1 dtype=f32\nbatchnorm\n").unwrap_err();
        assert!(err.to_string().contains("normalization"), "{err}");
    }

    #[test]
    fn bad_fields() {
        for (text, line) in [
            ("conv out=1 k=1\n", 1),
            ("split=1\nrelu\n", 1),
            ("split=1 dtype=f16\nrelu\n", 1),
            ("split=1 dtype=f32\nconv out=2\n", 2),
            ("split=1 dtype=f32\nconv out=2 k=0\n", 2),
            ("split=1 dtype=f32\nconv out=2 k=3 pad=1\n", 2),
            ("split=1 dtype=f32\nconv out=2 k=3 k=3\n", 2),
            ("split=1 dtype=f32\nrelu extra\n", 2),
        ] {
            match parse_spec(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn linear_in_prefix_rejected() {
        let spec = NetworkSpec::new(vec![LayerSpec::Linear { out: 2 }], 1, DType::F64);
        assert!(matches!(
            validate(&spec, &[1, 1, 4, 4]),
            Err(Error::NonLocalLayerInPrefix { index: 0, .. })
        ));
    }

    #[test]
    fn kernel_larger_than_input_underflows() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Conv {
                out: 1,
                k: 3,
                stride: 1,
                bias: false,
            }],
            1,
            DType::F64,
        );
        assert!(matches!(
            validate(&spec, &[1, 1, 2, 2]),
            Err(Error::ShapeUnderflow { index: 0, .. })
        ));
    }

    #[test]
    fn split_bounds() {
        let spec = NetworkSpec::new(vec![LayerSpec::Relu], 0, DType::F64);
        assert!(matches!(validate(&spec, &[1, 1, 4]), Err(Error::Usage(_))));
        let spec = NetworkSpec::new(vec![LayerSpec::Relu], 2, DType::F64);
        assert!(matches!(validate(&spec, &[1, 1, 4]), Err(Error::Usage(_))));
    }

    #[test]
    fn output_stride_multiplies_prefix_strides() {
        let spec = parse_spec(
            "split=3 dtype=f32\nconv out=1 k=3 stride=2\nrelu\nmaxpool k=2\nmaxpool k=2\n",
        )
        .unwrap();
        assert_eq!(spec.output_stride(), 4);
    }
}
