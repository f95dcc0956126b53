use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{Heads, Network};
use crate::error::{cfg_err, Error, Result};
use crate::layers::{Activation, LayerSpec, Window};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Encoder plus mirrored decoder, reconstruction cost only.
    ClassEncoder,
    /// Shared encoder feeding a one-layer decoder and a softmax head.
    Cec,
    /// Encoder plus softmax head; the softmax-only baseline.
    Classifier,
    /// CNN module cascaded with a CEC that reconstructs `h1` features.
    Dcec,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ClassEncoder => "class_encoder",
            ModelKind::Cec => "cec",
            ModelKind::Classifier => "classifier",
            ModelKind::Dcec => "dcec",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_encoder" => Ok(ModelKind::ClassEncoder),
            "cec" => Ok(ModelKind::Cec),
            "classifier" | "softmax" => Ok(ModelKind::Classifier),
            "dcec" => Ok(ModelKind::Dcec),
            other => Err(cfg_err!("unknown model kind `{other}`")),
        }
    }
}

/// One token of a CNN module description: `conv3x3/1x8`, `local3x3/1x16` or
/// `pool2x2/2` (filter height x width / stride x output channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnLayer {
    Conv(Window),
    Local(Window),
    Pool { window_h: usize, window_w: usize, stride: usize },
}

fn parse_dims(s: &str, token: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| cfg_err!("bad CNN token `{token}`"))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|_| cfg_err!("bad CNN token `{token}`"));
    Ok((parse(a)?, parse(b)?))
}

impl FromStr for CnnLayer {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let (prefix, rest) = ["conv", "local", "pool"]
            .iter()
            .find_map(|p| token.strip_prefix(p).map(|r| (*p, r)))
            .ok_or_else(|| cfg_err!("unknown CNN token `{token}`"))?;
        let (filter, tail) = rest
            .split_once('/')
            .ok_or_else(|| cfg_err!("CNN token `{token}` lacks a stride"))?;
        let (fh, fw) = parse_dims(filter, token)?;
        if prefix == "pool" {
            let stride = tail.parse().map_err(|_| cfg_err!("bad CNN token `{token}`"))?;
            return Ok(CnnLayer::Pool {
                window_h: fh,
                window_w: fw,
                stride,
            });
        }
        let (stride, channels_out) = parse_dims(tail, token)?;
        let w = Window {
            filter_h: fh,
            filter_w: fw,
            stride,
            channels_out,
        };
        Ok(if prefix == "conv" { CnnLayer::Conv(w) } else { CnnLayer::Local(w) })
    }
}

impl fmt::Display for CnnLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CnnLayer::Conv(w) | CnnLayer::Local(w) => {
                let p = if matches!(self, CnnLayer::Conv(_)) { "conv" } else { "local" };
                write!(f, "{p}{}x{}/{}x{}", w.filter_h, w.filter_w, w.stride, w.channels_out)
            }
            CnnLayer::Pool {
                window_h,
                window_w,
                stride,
            } => write!(f, "pool{window_h}x{window_w}/{stride}"),
        }
    }
}

/// Layer specs, head ranges and tied pairs of a network.
pub type Layout = (Vec<LayerSpec>, Heads, Vec<(usize, usize)>);

/// Everything needed to rebuild a network's layer stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    ClassEncoder {
        sizes: Vec<usize>,
        activation: Activation,
        tied: bool,
    },
    Cec {
        sizes: Vec<usize>,
        classes: usize,
        activation: Activation,
        tied: bool,
    },
    Classifier {
        sizes: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
    Dcec {
        input: [usize; 3],
        cnn: Vec<CnnLayer>,
        h1: usize,
        h2: usize,
        classes: usize,
    },
}

fn take(map: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
    map.remove(key).ok_or_else(|| cfg_err!("missing model key `{key}`"))
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| cfg_err!("bad value `{v}` for `{key}`"))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(cfg_err!("bad boolean `{v}` for `{key}`")),
    }
}

fn parse_sizes(v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num("layers", s)).collect()
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::ClassEncoder { .. } => ModelKind::ClassEncoder,
            Architecture::Cec { .. } => ModelKind::Cec,
            Architecture::Classifier { .. } => ModelKind::Classifier,
            Architecture::Dcec { .. } => ModelKind::Dcec,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Architecture::ClassEncoder { .. } => None,
            Architecture::Cec { classes, .. } | Architecture::Classifier { classes, .. } | Architecture::Dcec { classes, .. } => {
                Some(*classes)
            }
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::ClassEncoder { sizes, .. } | Architecture::Cec { sizes, .. } | Architecture::Classifier { sizes, .. } => {
                vec![sizes[0]]
            }
            Architecture::Dcec { input, .. } => input.to_vec(),
        }
    }

    /// Reads the model keys (`kind`, `layers`, `classes`, `activation`, `tied`,
    /// `input`, `cnn`, `h1`, `h2`) and removes them from `map`. Keys that do not
    /// apply to the chosen kind are left in place.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let kind: ModelKind = take(map, "kind")?.parse()?;
        let activation = |map: &mut BTreeMap<String, String>| -> Result<Activation> {
            map.remove("activation").map_or(Ok(Activation::Sigmoid), |v| v.trim().parse())
        };
        let tied = |map: &mut BTreeMap<String, String>| -> Result<bool> {
            map.remove("tied").map_or(Ok(false), |v| parse_bool("tied", &v))
        };
        let arch = match kind {
            ModelKind::ClassEncoder => Architecture::ClassEncoder {
                sizes: parse_sizes(&take(map, "layers")?)?,
                activation: activation(map)?,
                tied: tied(map)?,
            },
            ModelKind::Cec => Architecture::Cec {
                sizes: parse_sizes(&take(map, "layers")?)?,
                classes: parse_num("classes", &take(map, "classes")?)?,
                activation: activation(map)?,
                tied: tied(map)?,
            },
            ModelKind::Classifier => Architecture::Classifier {
                sizes: parse_sizes(&take(map, "layers")?)?,
                classes: parse_num("classes", &take(map, "classes")?)?,
                activation: activation(map)?,
            },
            ModelKind::Dcec => {
                let input = take(map, "input")?;
                let dims: Vec<usize> = input.split('x').map(|s| parse_num("input", s)).collect::<Result<_>>()?;
                let &[h, w, c] = dims.as_slice() else {
                    return Err(cfg_err!("`input` must be HxWxC, got `{input}`"));
                };
                Architecture::Dcec {
                    input: [h, w, c],
                    cnn: take(map, "cnn")?.split_whitespace().map(str::parse).collect::<Result<_>>()?,
                    h1: parse_num("h1", &take(map, "h1")?)?,
                    h2: parse_num("h2", &take(map, "h2")?)?,
                    classes: parse_num("classes", &take(map, "classes")?)?,
                }
            }
        };
        Ok(arch)
    }

    /// Inverse of [`Architecture::from_map`], in a fixed key order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("kind", self.kind().to_string())];
        match self {
            Architecture::ClassEncoder { sizes, activation, tied } => {
                out.push(("layers", join(sizes, ",")));
                out.push(("activation", activation.to_string()));
                out.push(("tied", tied.to_string()));
            }
            Architecture::Cec {
                sizes,
                classes,
                activation,
                tied,
            } => {
                out.push(("layers", join(sizes, ",")));
                out.push(("classes", classes.to_string()));
                out.push(("activation", activation.to_string()));
                out.push(("tied", tied.to_string()));
            }
            Architecture::Classifier {
                sizes,
                classes,
                activation,
            } => {
                out.push(("layers", join(sizes, ",")));
                out.push(("classes", classes.to_string()));
                out.push(("activation", activation.to_string()));
            }
            Architecture::Dcec {
                input,
                cnn,
                h1,
                h2,
                classes,
            } => {
                out.push(("input", join(input, "x")));
                out.push(("cnn", join(cnn, " ")));
                out.push(("h1", h1.to_string()));
                out.push(("h2", h2.to_string()));
                out.push(("classes", classes.to_string()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err!("bad architecture line `{line}`"))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let arch = Self::from_map(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(cfg_err!("unknown architecture key `{k}`"));
        }
        Ok(arch)
    }

    /// Layer specs, heads and tied pairs, without parameters.
    pub fn layout(&self) -> Result<Layout> {
        match self {
            Architecture::ClassEncoder { sizes, activation, tied } => class_encoder_layout(sizes, *activation, *tied),
            Architecture::Cec {
                sizes,
                classes,
                activation,
                tied,
            } => {
                if *classes < 2 {
                    return Err(cfg_err!("a CEC needs at least 2 classes, got {classes}"));
                }
                let (mut specs, encoder_end) = fc_encoder(sizes, *activation)?;
                if *tied && encoder_end != 1 {
                    return Err(cfg_err!(
                        "tied weights need a single encoder layer mirrored by the decoder, got {} encoder layers",
                        encoder_end
                    ));
                }
                let code = [sizes[encoder_end]];
                specs.push(LayerSpec::fc("softmax", &code, *classes, Activation::Identity)?);
                specs.push(LayerSpec::fc("z", &code, sizes[0], Activation::Sigmoid)?);
                let ties = if *tied { vec![(0, encoder_end + 1)] } else { Vec::new() };
                let heads = Heads {
                    encoder_end,
                    softmax: Some(encoder_end),
                    decoder: Some(encoder_end + 1..encoder_end + 2),
                    target: None,
                };
                Ok((specs, heads, ties))
            }
            Architecture::Classifier {
                sizes,
                classes,
                activation,
            } => {
                if *classes < 2 {
                    return Err(cfg_err!("a classifier needs at least 2 classes, got {classes}"));
                }
                let (mut specs, encoder_end) = fc_encoder(sizes, *activation)?;
                specs.push(LayerSpec::fc("softmax", &[sizes[encoder_end]], *classes, Activation::Identity)?);
                let heads = Heads {
                    encoder_end,
                    softmax: Some(encoder_end),
                    decoder: None,
                    target: None,
                };
                Ok((specs, heads, Vec::new()))
            }
            Architecture::Dcec {
                input,
                cnn,
                h1,
                h2,
                classes,
            } => dcec_layout(*input, cnn, *h1, *h2, *classes, *h1),
        }
    }

    /// Builds the network with freshly initialized parameters.
    pub fn build(&self, rng: &mut Rng) -> Result<Network> {
        let (specs, heads, ties) = self.layout()?;
        Network::initialize(self.clone(), specs, heads, ties, rng)
    }
}

fn fc_encoder(sizes: &[usize], activation: Activation) -> Result<(Vec<LayerSpec>, usize)> {
    if sizes.len() < 2 {
        return Err(cfg_err!("need at least 2 layer sizes, got {sizes:?}"));
    }
    if sizes.contains(&0) {
        return Err(cfg_err!("layer sizes must be positive, got {sizes:?}"));
    }
    let specs = sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec::fc(&format!("h{}", i + 1), &[w[0]], w[1], activation))
        .collect::<Result<Vec<_>>>()?;
    let n = specs.len();
    Ok((specs, n))
}

fn class_encoder_layout(sizes: &[usize], activation: Activation, tied: bool) -> Result<Layout> {
    let (mut specs, n) = fc_encoder(sizes, activation)?;
    if tied && n != 1 {
        return Err(cfg_err!(
            "tied weights need a single encoder layer mirrored by the decoder, got {n} encoder layers"
        ));
    }
    for k in 1..=n {
        let from = sizes[n - k + 1];
        let to = sizes[n - k];
        let act = if k == n { Activation::Sigmoid } else { activation };
        specs.push(LayerSpec::fc(&format!("z{k}"), &[from], to, act)?);
    }
    let heads = Heads {
        encoder_end: n,
        softmax: None,
        decoder: Some(n..2 * n),
        target: None,
    };
    let ties = if tied { vec![(0, 1)] } else { Vec::new() };
    Ok((specs, heads, ties))
}

/// DCEC layer stack: CNN module, `h1`, `h2`, then the softmax head and a decoder
/// `z` of width `decoder_width`, which must equal `h1`.
pub fn dcec_layout(
    input: [usize; 3],
    cnn: &[CnnLayer],
    h1: usize,
    h2: usize,
    classes: usize,
    decoder_width: usize,
) -> Result<Layout> {
    if cnn.is_empty() {
        return Err(cfg_err!("a DCEC needs at least one CNN layer"));
    }
    if h1 == 0 || h2 == 0 {
        return Err(cfg_err!("h1 and h2 must be positive"));
    }
    if classes < 2 {
        return Err(cfg_err!("a DCEC needs at least 2 classes, got {classes}"));
    }
    if decoder_width != h1 {
        return Err(cfg_err!("decoder width {decoder_width} must equal h1 width {h1}"));
    }
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut shape = input.to_vec();
    let mut stage = 0;
    for layer in cnn {
        let spec = match *layer {
            CnnLayer::Conv(w) => {
                stage += 1;
                LayerSpec::conv2d(&format!("conv{stage}"), &shape, w, Activation::Relu)?
            }
            CnnLayer::Local(w) => {
                stage += 1;
                LayerSpec::local2d(&format!("local{stage}"), &shape, w, Activation::Relu)?
            }
            CnnLayer::Pool {
                window_h,
                window_w,
                stride,
            } => LayerSpec::maxpool2d(&format!("pool{}", stage.max(1)), &shape, window_h, window_w, stride)?,
        };
        if specs.iter().any(|s| s.name == spec.name) {
            return Err(cfg_err!("CNN layer name `{}` appears twice; pool only after conv or local", spec.name));
        }
        shape = spec.out_shape.clone();
        specs.push(spec);
    }
    let target = specs.len();
    specs.push(LayerSpec::fc("h1", &shape, h1, Activation::Relu)?);
    specs.push(LayerSpec::fc("h2", &[h1], h2, Activation::Relu)?);
    let encoder_end = specs.len();
    specs.push(LayerSpec::fc("softmax", &[h2], classes, Activation::Identity)?);
    specs.push(LayerSpec::fc("z", &[h2], decoder_width, Activation::Relu)?);
    let heads = Heads {
        encoder_end,
        softmax: Some(encoder_end),
        decoder: Some(encoder_end + 1..encoder_end + 2),
        target: Some(target),
    };
    Ok((specs, heads, Vec::new()))
}

pub fn build_class_encoder(sizes: &[usize], activation: Activation, tied: bool, rng: &mut Rng) -> Result<Network> {
    Architecture::ClassEncoder {
        sizes: sizes.to_vec(),
        activation,
        tied,
    }
    .build(rng)
}

pub fn build_cec(sizes: &[usize], classes: usize, activation: Activation, tied: bool, rng: &mut Rng) -> Result<Network> {
    Architecture::Cec {
        sizes: sizes.to_vec(),
        classes,
        activation,
        tied,
    }
    .build(rng)
}

pub fn build_classifier(sizes: &[usize], classes: usize, activation: Activation, rng: &mut Rng) -> Result<Network> {
    Architecture::Classifier {
        sizes: sizes.to_vec(),
        classes,
        activation,
    }
    .build(rng)
}

pub fn build_dcec(input: [usize; 3], cnn: &[CnnLayer], h1: usize, h2: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    Architecture::Dcec {
        input,
        cnn: cnn.to_vec(),
        h1,
        h2,
        classes,
    }
    .build(rng)
}

/// `(layer name, per-sample output shape)` for every layer of a DCEC, computed
/// from the specs alone.
pub fn dcec_shape_audit(input: [usize; 3], cnn: &[CnnLayer], h1: usize, h2: usize, classes: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let (specs, _, _) = dcec_layout(input, cnn, h1, h2, classes, h1)?;
    Ok(specs.into_iter().map(|s| (s.name, s.out_shape)).collect())
}
