//! Network description: layer list plus region head, parsed from and
//! rendered to the sectioned text format.

use std::fmt::Write as _;
use std::path::Path;

use crate::cfgfile::{parse_sections, Section};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Linear,
}

impl Activation {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "leaky" => Ok(Activation::Leaky),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Leaky => "leaky",
            Activation::Linear => "linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Convolutional(ConvSpec),
    MaxPool,
}

impl LayerSpec {
    pub fn stride(&self) -> usize {
        match self {
            LayerSpec::Convolutional(c) => c.stride,
            LayerSpec::MaxPool => 2,
        }
    }
}

/// Parameter-free detection layer: converts the last activations into boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionHeadSpec {
    pub num_classes: usize,
    /// Anchor shapes `(pw, ph)` in grid-cell units.
    pub anchors: Vec<(f32, f32)>,
    pub nms_overlap_threshold: f32,
    pub objectness_ignore_iou: f32,
}

impl RegionHeadSpec {
    pub const DEFAULT_NMS: f32 = 0.45;
    pub const DEFAULT_IGNORE_IOU: f32 = 0.6;

    pub fn new(num_classes: usize, anchors: Vec<(f32, f32)>) -> Self {
        RegionHeadSpec {
            num_classes,
            anchors,
            nms_overlap_threshold: Self::DEFAULT_NMS,
            objectness_ignore_iou: Self::DEFAULT_IGNORE_IOU,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Values per anchor: `tx, ty, tw, th, to` and one logit per class.
    pub fn entries_per_anchor(&self) -> usize {
        self.num_classes + 5
    }

    /// Filters the final convolution must have: `(classes + 5) · anchors`.
    pub fn required_filters(&self) -> usize {
        required_filters(self.num_classes, self.num_anchors())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("region head needs at least one class"));
        }
        if self.anchors.is_empty() {
            return Err(Error::config("region head needs at least one anchor"));
        }
        if self
            .anchors
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::config("anchor sizes must be positive"));
        }
        if !(self.nms_overlap_threshold > 0.0 && self.nms_overlap_threshold < 1.0) {
            return Err(Error::config("nms threshold must lie in (0,1)"));
        }
        if !(self.objectness_ignore_iou > 0.0 && self.objectness_ignore_iou <= 1.0) {
            return Err(Error::config("objectness ignore IoU must lie in (0,1]"));
        }
        Ok(())
    }
}

pub fn required_filters(num_classes: usize, num_anchors: usize) -> usize {
    (num_classes + 5) * num_anchors
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
    pub head: RegionHeadSpec,
}

impl NetworkConfig {
    /// Product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(LayerSpec::stride).product()
    }

    /// Index (into `layers`) of the final convolution.
    pub fn final_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Convolutional(_)))
    }

    pub fn conv_specs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Convolutional(c) => Some(c),
            LayerSpec::MaxPool => None,
        })
    }

    pub fn num_conv_layers(&self) -> usize {
        self.conv_specs().count()
    }

    /// Output grid `(width, height)` for an input of the given size.
    pub fn grid_for(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let (mut w, mut h) = (width, height);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Convolutional(c) => {
                    if w + 2 * c.pad < c.size || h + 2 * c.pad < c.size {
                        return Err(Error::config(format!(
                            "layer {i}: input {w}x{h} smaller than kernel {}",
                            c.size
                        )));
                    }
                    w = (w + 2 * c.pad - c.size) / c.stride + 1;
                    h = (h + 2 * c.pad - c.size) / c.stride + 1;
                }
                LayerSpec::MaxPool => {
                    if w % 2 != 0 || h % 2 != 0 {
                        return Err(Error::config(format!(
                            "layer {i}: maxpool input {w}x{h} is not even"
                        )));
                    }
                    w /= 2;
                    h /= 2;
                }
            }
        }
        Ok((w, h))
    }

    /// Checks every structural rule, including the final filter count.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("input must have at least one channel"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Convolutional(c) = layer {
                if c.filters == 0 {
                    return Err(Error::config(format!("layer {i}: filters must be ≥ 1")));
                }
                if !matches!(c.size, 1 | 3) {
                    return Err(Error::config(format!("layer {i}: size must be 1 or 3")));
                }
                if !matches!(c.stride, 1 | 2) {
                    return Err(Error::config(format!("layer {i}: stride must be 1 or 2")));
                }
                if c.pad > 1 {
                    return Err(Error::config(format!("layer {i}: pad must be 0 or 1")));
                }
            }
        }
        self.head.validate()?;
        let last = self
            .final_conv_index()
            .ok_or_else(|| Error::config("network has no convolutional layer"))?;
        let LayerSpec::Convolutional(final_conv) = self.layers[last] else {
            unreachable!()
        };
        let expected = self.head.required_filters();
        if final_conv.filters != expected {
            return Err(Error::config(format!(
                "final convolutional layer has {} filters, expected (classes + 5) × anchors = ({} + 5) × {} = {expected}",
                final_conv.filters,
                self.head.num_classes,
                self.head.num_anchors()
            )));
        }
        let stride = self.total_stride();
        if self.input_width == 0
            || self.input_height == 0
            || !self.input_width.is_multiple_of(stride)
            || !self.input_height.is_multiple_of(stride)
        {
            return Err(Error::config(format!(
                "input {}x{} is not a multiple of the total stride {stride}",
                self.input_width, self.input_height
            )));
        }
        self.grid_for(self.input_width, self.input_height)?;
        Ok(())
    }

    /// Copy of this description with a new head; the final convolution is
    /// resized to `(classes + 5) · anchors` filters.
    pub fn with_head(&self, head: RegionHeadSpec) -> Self {
        let mut cfg = self.clone();
        if let Some(i) = cfg.final_conv_index() {
            if let LayerSpec::Convolutional(c) = &mut cfg.layers[i] {
                c.filters = head.required_filters();
            }
        }
        cfg.head = head;
        cfg
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the sectioned description (`[net]`, `[convolutional]`,
    /// `[maxpool]`, `[region]`) and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut net: Option<&Section> = None;
        let mut region: Option<&Section> = None;
        let mut layers = Vec::new();
        for s in &sections {
            match s.name.as_str() {
                "net" => {
                    s.check_keys(&["width", "height", "channels"])?;
                    net = Some(s);
                }
                "convolutional" => {
                    s.check_keys(&[
                        "filters",
                        "size",
                        "stride",
                        "pad",
                        "batch_normalize",
                        "activation",
                    ])?;
                    let bn: u8 = s.parse_or("batch_normalize", 0)?;
                    layers.push(LayerSpec::Convolutional(ConvSpec {
                        filters: s.parse_required("filters")?,
                        size: s.parse_or("size", 1)?,
                        stride: s.parse_or("stride", 1)?,
                        pad: s.parse_or("pad", 0)?,
                        batch_normalize: bn != 0,
                        activation: Activation::parse(s.get("activation").unwrap_or("linear"))?,
                    }));
                }
                "maxpool" => {
                    s.check_keys(&["size", "stride"])?;
                    let size: usize = s.parse_or("size", 2)?;
                    let stride: usize = s.parse_or("stride", 2)?;
                    if size != 2 || stride != 2 {
                        return Err(Error::config(format!(
                            "line {}: only 2x2/stride-2 max pooling is supported",
                            s.line
                        )));
                    }
                    layers.push(LayerSpec::MaxPool);
                }
                "region" => {
                    s.check_keys(&["classes", "num", "anchors", "nms", "ignore_thresh"])?;
                    region = Some(s);
                }
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown section [{other}]",
                        s.line
                    )))
                }
            }
        }
        let net = net.ok_or_else(|| Error::config("missing [net] section"))?;
        let region = region.ok_or_else(|| Error::config("missing [region] section"))?;
        let anchors = parse_anchor_list(region.get("anchors").unwrap_or(""))?;
        let num: usize = region.parse_or("num", anchors.len())?;
        if num != anchors.len() {
            return Err(Error::config(format!(
                "[region] num={num} but {} anchor pairs given",
                anchors.len()
            )));
        }
        let head = RegionHeadSpec {
            num_classes: region.parse_required("classes")?,
            anchors,
            nms_overlap_threshold: region.parse_or("nms", RegionHeadSpec::DEFAULT_NMS)?,
            objectness_ignore_iou: region
                .parse_or("ignore_thresh", RegionHeadSpec::DEFAULT_IGNORE_IOU)?,
        };
        let cfg = NetworkConfig {
            input_width: net.parse_required("width")?,
            input_height: net.parse_required("height")?,
            channels: net.parse_or("channels", 3)?,
            layers,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the description in the same format [`NetworkConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "[net]\nwidth={}\nheight={}\nchannels={}\n",
            self.input_width, self.input_height, self.channels
        );
        for layer in &self.layers {
            match layer {
                LayerSpec::Convolutional(c) => {
                    let _ = writeln!(
                        out,
                        "[convolutional]\nbatch_normalize={}\nfilters={}\nsize={}\nstride={}\npad={}\nactivation={}\n",
                        u8::from(c.batch_normalize),
                        c.filters,
                        c.size,
                        c.stride,
                        c.pad,
                        c.activation.name()
                    );
                }
                LayerSpec::MaxPool => out.push_str("[maxpool]\nsize=2\nstride=2\n\n"),
            }
        }
        let _ = writeln!(
            out,
            "[region]\nclasses={}\nnum={}\nanchors={}\nnms={}\nignore_thresh={}",
            self.head.num_classes,
            self.head.num_anchors(),
            format_anchor_list(&self.head.anchors),
            self.head.nms_overlap_threshold,
            self.head.objectness_ignore_iou
        );
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Small detector used by the synthetic experiments: five 3×3
    /// conv+pool stages (stride 32) and a 1×1 prediction layer.
    pub fn compact(input: usize, widths: [usize; 6], head: RegionHeadSpec) -> Self {
        let conv = |filters, size| {
            LayerSpec::Convolutional(ConvSpec {
                filters,
                size,
                stride: 1,
                pad: usize::from(size == 3),
                batch_normalize: true,
                activation: Activation::Leaky,
            })
        };
        let mut layers = Vec::new();
        for &w in &widths[..5] {
            layers.push(conv(w, 3));
            layers.push(LayerSpec::MaxPool);
        }
        layers.push(conv(widths[5], 3));
        layers.push(LayerSpec::Convolutional(ConvSpec {
            filters: head.required_filters(),
            size: 1,
            stride: 1,
            pad: 0,
            batch_normalize: false,
            activation: Activation::Linear,
        }));
        NetworkConfig {
            input_width: input,
            input_height: input,
            channels: 3,
            layers,
            head,
        }
    }
}

/// `"1.0,1.5, 2,3"` → `[(1.0,1.5), (2.0,3.0)]`.
pub fn parse_anchor_list(text: &str) -> Result<Vec<(f32, f32)>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .map_err(|_| Error::config(format!("bad anchor value `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() % 2 != 0 {
        return Err(Error::config("anchors must come in (w,h) pairs"));
    }
    Ok(values.chunks(2).map(|p| (p[0], p[1])).collect())
}

pub fn format_anchor_list(anchors: &[(f32, f32)]) -> String {
    anchors
        .iter()
        .map(|(w, h)| format!("{w},{h}"))
        .collect::<Vec<_>>()
        .join(", ")
}
