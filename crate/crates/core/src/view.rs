//! Frozen per-view encoders, temporal pooling, and the trainable projections
//! that turn pooled encoder features into view embeddings.

use std::fmt;

use crate::error::{CaupsiError, Result};
use crate::nn::{add_linear, linear, Bindings, Init, MlpSpec, ParamStore};
use crate::tensor::{gemm, Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Front,
    Left,
    Right,
    Inside,
    Face,
    Body,
}

impl View {
    pub const ALL: [View; 6] = [View::Front, View::Left, View::Right, View::Inside, View::Face, View::Body];
    pub const SCENE: [View; 3] = [View::Front, View::Left, View::Right];

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Left => "left",
            View::Right => "right",
            View::Inside => "inside",
            View::Face => "face",
            View::Body => "body",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            View::Front | View::Left | View::Right => EncoderKind::Scene,
            View::Inside => EncoderKind::Inside,
            View::Face => EncoderKind::Face,
            View::Body => EncoderKind::Body,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which frozen backbone (and which pooled-feature projection) a view uses.
/// The three scene cameras share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Inside,
    Scene,
    Face,
    Body,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [EncoderKind::Inside, EncoderKind::Scene, EncoderKind::Face, EncoderKind::Body];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Inside => "inside",
            EncoderKind::Scene => "scene",
            EncoderKind::Face => "face",
            EncoderKind::Body => "body",
        }
    }
}

/// Geometry of one clip: `C x T x H x W`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipShape {
    pub fn numel(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn descriptor(&self) -> String {
        format!("{}x{}x{}x{}", self.channels, self.frames, self.height, self.width)
    }

    pub fn parse(s: &str) -> Option<ClipShape> {
        let parts: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match parts.as_slice() {
            [c, t, h, w] if *c > 0 && *t > 0 && *h > 0 && *w > 0 => Some(ClipShape {
                channels: *c,
                frames: *t,
                height: *h,
                width: *w,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewClip {
    pub view: View,
    pub shape: ClipShape,
    pub data: Vec<f32>,
}

impl ViewClip {
    pub fn new(view: View, shape: ClipShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(CaupsiError::Shape(format!(
                "{view} clip: {} values for shape {}",
                data.len(),
                shape.descriptor()
            )));
        }
        Ok(ViewClip { view, shape, data })
    }

    /// Frame `t` as a contiguous `C x H x W` buffer.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        let ClipShape { channels, frames, height, width } = self.shape;
        let hw = height * width;
        let mut out = Vec::with_capacity(channels * hw);
        for c in 0..channels {
            let off = (c * frames + t) * hw;
            out.extend_from_slice(&self.data[off..off + hw]);
        }
        out
    }
}

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;

fn conv_out(n: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1
    (n + 1) / 2
}

/// Output width of the frozen encoder for `height x width` frames.
pub fn encoder_dim(height: usize, width: usize) -> usize {
    CONV2_CHANNELS * conv_out(conv_out(height)) * conv_out(conv_out(width))
}

/// Fixed random backbone: two stride-2 3x3 convolutions with ReLU, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    channels: usize,
    height: usize,
    width: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// im2col for a stride-2, pad-1, 3x3 convolution over a batch of `C x H x W` maps.
/// Rows are `(image, out_y, out_x)`, columns `(channel, ky, kx)`.
fn im2col(input: &[f32], images: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let cols = c * 9;
    let mut out = vec![0.0f32; images * oh * ow * cols];
    for im in 0..images {
        let base = im * c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((im * oh + oy) * ow + ox) * cols;
                for ch in 0..c {
                    for ky in 0..3 {
                        let y = (2 * oy + ky) as isize - 1;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let x = (2 * ox + kx) as isize - 1;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            out[row + ch * 9 + ky * 3 + kx] = input[base + ch * h * w + y as usize * w + x as usize];
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

impl FrozenEncoder {
    pub fn conv_shapes(channels: usize) -> [(&'static str, Vec<usize>); 4] {
        [
            ("conv1.weight", vec![CONV1_CHANNELS, channels, 3, 3]),
            ("conv1.bias", vec![CONV1_CHANNELS]),
            ("conv2.weight", vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3]),
            ("conv2.bias", vec![CONV2_CHANNELS]),
        ]
    }

    /// Registers the frozen kernels of `kind` under `encoder.<kind>`.
    pub fn add_params<F: Scalar>(store: &mut ParamStore<F>, kind: EncoderKind, channels: usize, seed: u64) -> Result<()> {
        for (name, shape) in Self::conv_shapes(channels) {
            let init = if name.ends_with("weight") {
                Init::HeUniform
            } else {
                Init::Constant(0.0)
            };
            store.add(&format!("encoder.{}.{name}", kind.name()), &shape, init, false, seed)?;
        }
        Ok(())
    }

    pub fn from_params<F: Scalar>(store: &ParamStore<F>, kind: EncoderKind, height: usize, width: usize) -> Result<Self> {
        let get = |n: &str| -> Result<Vec<f32>> {
            Ok(store
                .get(&format!("encoder.{}.{n}", kind.name()))?
                .data()
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect())
        };
        let w1 = get("conv1.weight")?;
        let channels = w1.len() / (CONV1_CHANNELS * 9);
        Ok(FrozenEncoder {
            channels,
            height,
            width,
            w1,
            b1: get("conv1.bias")?,
            w2: get("conv2.weight")?,
            b2: get("conv2.bias")?,
        })
    }

    pub fn out_dim(&self) -> usize {
        encoder_dim(self.height, self.width)
    }

    /// Encodes `n` stacked frames (each `C x H x W`), returning `n x out_dim` features.
    pub fn encode_frames(&self, frames: &[f32], n: usize) -> Vec<f32> {
        let (c, h, w) = (self.channels, self.height, self.width);
        assert_eq!(frames.len(), n * c * h * w, "frame buffer size");
        let (col1, h1, w1) = im2col(frames, n, c, h, w);
        let rows1 = n * h1 * w1;
        let mut a1 = vec![0.0f32; rows1 * CONV1_CHANNELS];
        gemm(rows1, c * 9, CONV1_CHANNELS, &col1, false, &self.w1, true, 0.0, &mut a1);
        // bias + relu, then back to channel-major maps for the next stage
        let mut maps1 = vec![0.0f32; n * CONV1_CHANNELS * h1 * w1];
        for im in 0..n {
            for pos in 0..h1 * w1 {
                for ch in 0..CONV1_CHANNELS {
                    let v = (a1[(im * h1 * w1 + pos) * CONV1_CHANNELS + ch] + self.b1[ch]).max(0.0);
                    maps1[(im * CONV1_CHANNELS + ch) * h1 * w1 + pos] = v;
                }
            }
        }
        let (col2, h2, w2) = im2col(&maps1, n, CONV1_CHANNELS, h1, w1);
        let rows2 = n * h2 * w2;
        let mut a2 = vec![0.0f32; rows2 * CONV2_CHANNELS];
        gemm(rows2, CONV1_CHANNELS * 9, CONV2_CHANNELS, &col2, false, &self.w2, true, 0.0, &mut a2);
        let p2 = h2 * w2;
        let mut out = vec![0.0f32; n * CONV2_CHANNELS * p2];
        for im in 0..n {
            for pos in 0..p2 {
                for ch in 0..CONV2_CHANNELS {
                    out[im * CONV2_CHANNELS * p2 + ch * p2 + pos] =
                        (a2[(im * p2 + pos) * CONV2_CHANNELS + ch] + self.b2[ch]).max(0.0);
                }
            }
        }
        out
    }

    /// Encoder features averaged over the clip's frames.
    pub fn pool_clip(&self, clip: &ViewClip) -> Result<Vec<f32>> {
        let s = clip.shape;
        if s.channels != self.channels || s.height != self.height || s.width != self.width {
            return Err(CaupsiError::Shape(format!(
                "{} clip {} does not match encoder {}x{}x{}",
                clip.view,
                s.descriptor(),
                self.channels,
                self.height,
                self.width
            )));
        }
        let mut frames = Vec::with_capacity(s.numel());
        for t in 0..s.frames {
            frames.extend(clip.frame(t));
        }
        let feats = self.encode_frames(&frames, s.frames);
        let d = self.out_dim();
        let mut pooled = vec![0.0f32; d];
        for row in feats.chunks(d) {
            pooled.iter_mut().zip(row).for_each(|(p, &v)| *p += v);
        }
        let inv = 1.0 / s.frames as f32;
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }
}

/// The four frozen backbones of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBank {
    encoders: [FrozenEncoder; 4],
}

impl EncoderBank {
    pub fn from_params<F: Scalar>(store: &ParamStore<F>, height: usize, width: usize) -> Result<Self> {
        let e = |k| FrozenEncoder::from_params(store, k, height, width);
        Ok(EncoderBank {
            encoders: [
                e(EncoderKind::Inside)?,
                e(EncoderKind::Scene)?,
                e(EncoderKind::Face)?,
                e(EncoderKind::Body)?,
            ],
        })
    }

    pub fn get(&self, kind: EncoderKind) -> &FrozenEncoder {
        &self.encoders[kind as usize]
    }

    pub fn pool(&self, clip: &ViewClip) -> Result<Vec<f32>> {
        self.get(clip.view.encoder()).pool_clip(clip)
    }
}

pub fn gap_path(kind: EncoderKind) -> String {
    format!("view.gap.{}", kind.name())
}

pub fn add_gap_params<F: Scalar>(store: &mut ParamStore<F>, enc_dim: usize, d_c: usize, seed: u64) -> Result<()> {
    for kind in EncoderKind::ALL {
        add_linear(store, &gap_path(kind), enc_dim, d_c, true, seed)?;
    }
    Ok(())
}

/// `W_gap · pooled + b_gap`, i.e. the temporal mean of the per-frame projections.
pub fn encode_view<F: Scalar>(g: &mut Graph<F>, p: &Bindings, kind: EncoderKind, pooled: Var) -> Result<Var> {
    linear(g, p, &gap_path(kind), pooled)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSpec {
    pub mlp: MlpSpec,
}

impl ProjectionSpec {
    pub const STREAMS: [&'static str; 4] = ["face", "body", "in", "scene"];

    pub fn new(d_c: usize, d_f: usize) -> Result<Self> {
        Ok(ProjectionSpec {
            mlp: MlpSpec::new(d_c, d_f, d_f, 0.0)?,
        })
    }

    pub fn path(stream: &str) -> String {
        format!("view.{stream}_proj")
    }

    pub fn add_params<F: Scalar>(&self, store: &mut ParamStore<F>, seed: u64) -> Result<()> {
        for s in Self::STREAMS {
            self.mlp.add_params(store, &Self::path(s), seed)?;
        }
        Ok(())
    }

    fn project<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, stream: &str, h: Var) -> Result<Var> {
        self.mlp.forward(g, p, &Self::path(stream), h)
    }

    /// Independent two-layer projections of the face and body embeddings.
    pub fn project_face_body<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, h_face: Var, h_body: Var) -> Result<(Var, Var)> {
        Ok((self.project(g, p, "face", h_face)?, self.project(g, p, "body", h_body)?))
    }

    pub fn project_in_scene<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, h_in: Var, h_scene: Var) -> Result<(Var, Var)> {
        Ok((self.project(g, p, "in", h_in)?, self.project(g, p, "scene", h_scene)?))
    }

    /// Scene projection applied row-wise to arbitrary scene tokens.
    pub fn project_scene_tokens<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, tokens: Var) -> Result<Var> {
        self.project(g, p, "scene", tokens)
    }
}
