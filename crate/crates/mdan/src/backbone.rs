//! The trainable model: a sequence encoder (stacked bidirectional LSTM or
//! strided 1-D CNN), a fully connected predictor head, and a per-position
//! linear reconstruction decoder for the self-supervised stage.
//!
//! Forward passes are recorded on a [`Tape`]; parameters are bound as leaf
//! nodes once per tape and shared across however many encodes the stage loss
//! needs, so gradients accumulate across uses automatically.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tape::{conv_out_len, NodeId, Tape};

/// Encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    BidirectionalRecurrent,
    TemporalConvolutional,
}

/// One strided convolution layer of the temporal-convolutional encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub encoder_kind: EncoderKind,
    /// Stacked biLSTM layers (recurrent encoder only).
    pub num_layers: usize,
    /// Hidden units per direction (recurrent encoder only).
    pub hidden_units: usize,
    /// Fully connected predictor widths, final entry = output dimension.
    pub predictor_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub task: Task,
    pub num_classes: usize,
    /// Sensors per window (M).
    pub input_channels: usize,
    /// Time steps per window (K).
    pub window: usize,
    /// Convolution stack (convolutional encoder only).
    #[serde(default)]
    pub conv_layers: Vec<ConvLayerSpec>,
}

impl BackboneConfig {
    /// Default turbofan regression backbone: 5 biLSTM layers of 32 units
    /// with a 32-16-1 head.
    pub fn cmapss_default() -> Self {
        Self {
            encoder_kind: EncoderKind::BidirectionalRecurrent,
            num_layers: 5,
            hidden_units: 32,
            predictor_widths: vec![32, 16, 1],
            dropout_rate: 0.5,
            task: Task::Regression,
            num_classes: 1,
            input_channels: 14,
            window: 30,
            conv_layers: Vec::new(),
        }
    }

    /// Default bearing classification backbone: 5 strided conv layers with
    /// global average pooling and a 3-class head.
    pub fn mfd_default() -> Self {
        Self {
            encoder_kind: EncoderKind::TemporalConvolutional,
            num_layers: 0,
            hidden_units: 0,
            predictor_widths: vec![32, 16, 3],
            dropout_rate: 0.001,
            task: Task::Classification { num_classes: 3 },
            num_classes: 3,
            input_channels: 1,
            window: 5120,
            conv_layers: vec![
                ConvLayerSpec { out_channels: 16, kernel: 64, stride: 8 },
                ConvLayerSpec { out_channels: 32, kernel: 8, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 8, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 8, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 8, stride: 2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let last = *self
            .predictor_widths
            .last()
            .ok_or_else(|| Error::Config("predictor_widths must be non-empty".into()))?;
        match self.task {
            Task::Regression if last != 1 => {
                return Err(Error::Config(format!(
                    "regression requires final predictor width 1, got {last}"
                )));
            }
            Task::Classification { num_classes } => {
                if last != num_classes || num_classes != self.num_classes {
                    return Err(Error::Config(format!(
                        "classification requires final predictor width = num_classes ({}), got {last}",
                        self.num_classes
                    )));
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        match self.encoder_kind {
            EncoderKind::BidirectionalRecurrent => {
                if self.num_layers == 0 || self.hidden_units == 0 {
                    return Err(Error::Config(
                        "recurrent encoder needs num_layers >= 1 and hidden_units >= 1".into(),
                    ));
                }
            }
            EncoderKind::TemporalConvolutional => {
                if self.conv_layers.is_empty() {
                    return Err(Error::Config("convolutional encoder needs conv_layers".into()));
                }
                let mut l = self.window;
                for (i, c) in self.conv_layers.iter().enumerate() {
                    if l < c.kernel {
                        return Err(Error::Config(format!(
                            "conv layer {i}: length {l} shorter than kernel {}",
                            c.kernel
                        )));
                    }
                    l = conv_out_len(l, c.kernel, c.stride);
                }
            }
        }
        Ok(())
    }

    /// Pooled feature dimension the predictor consumes.
    pub fn feature_dim(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::BidirectionalRecurrent => 2 * self.hidden_units,
            EncoderKind::TemporalConvolutional => {
                self.conv_layers.last().map(|c| c.out_channels).unwrap_or(0)
            }
        }
    }

    /// Positions in the convolutional encoder's final feature sequence.
    pub fn conv_final_len(&self) -> usize {
        let mut l = self.window;
        for c in &self.conv_layers {
            l = conv_out_len(l, c.kernel, c.stride);
        }
        l
    }

    /// Named shapes of every trainable tensor, in binding order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        match self.encoder_kind {
            EncoderKind::BidirectionalRecurrent => {
                let h = self.hidden_units;
                for l in 0..self.num_layers {
                    let in_dim = if l == 0 { self.input_channels } else { 2 * h };
                    for dir in ["fw", "bw"] {
                        out.push((format!("lstm{l}.{dir}.w_ih"), (in_dim, 4 * h)));
                        out.push((format!("lstm{l}.{dir}.w_hh"), (h, 4 * h)));
                        out.push((format!("lstm{l}.{dir}.bias"), (1, 4 * h)));
                    }
                }
            }
            EncoderKind::TemporalConvolutional => {
                let mut c_in = self.input_channels;
                for (i, c) in self.conv_layers.iter().enumerate() {
                    out.push((format!("conv{i}.w"), (c_in * c.kernel, c.out_channels)));
                    out.push((format!("conv{i}.bias"), (1, c.out_channels)));
                    c_in = c.out_channels;
                }
            }
        }
        let mut in_dim = self.feature_dim();
        for (i, &w) in self.predictor_widths.iter().enumerate() {
            out.push((format!("head{i}.w"), (in_dim, w)));
            out.push((format!("head{i}.bias"), (1, w)));
            in_dim = w;
        }
        out.push(("decoder.w".into(), (self.feature_dim(), self.input_channels)));
        out.push(("decoder.bias".into(), (1, self.input_channels)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// All trainable tensors, in the order given by
/// [`BackboneConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl BackboneParams {
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameter leaves bound onto one tape.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// Per-step or packed per-position encodings, for the decoder.
pub enum SeqFeatures {
    /// One node per time step (batch x 2H); recurrent encoder.
    Steps(Vec<NodeId>),
    /// Channel-major packed node (batch, channels * len); conv encoder.
    Packed {
        node: NodeId,
        channels: usize,
        len: usize,
    },
}

/// Output of one encode pass.
pub struct FeatureBatch {
    /// Pooled encoding, batch x feature_dim.
    pub g: NodeId,
    pub seq: SeqFeatures,
}

/// Config plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: BackboneParams,
}

/// Deterministic small-scale uniform initialization; biases start at zero.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = SeededRng::new(seed, Stream::Init);
    let shapes = config.param_shapes();
    let mut names = Vec::with_capacity(shapes.len());
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, (r, c)) in shapes {
        let t = if name.ends_with("bias") {
            Array2::zeros((r, c))
        } else {
            let k = 1.0 / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.random_range(-k..k))
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(BackboneParams { names, tensors })
}

impl Model {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Bind all parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        node: NodeId,
        training: bool,
        rng: &mut Option<&mut SeededRng>,
    ) -> NodeId {
        let rate = self.config.dropout_rate;
        if !training || rate == 0.0 {
            return node;
        }
        let rng = rng
            .as_deref_mut()
            .expect("training-mode forward needs a dropout rng");
        let dim = tape.value(node).dim();
        let keep = 1.0 - rate;
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(node, mask)
    }

    /// Encode a batch of windows (batch x M x K) into pooled and per-step
    /// features. Dropout masks are resampled only when `training` is set.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Array3<f64>,
        training: bool,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<FeatureBatch> {
        let (batch, m, k) = x.dim();
        if m != self.config.input_channels || k != self.config.window {
            return Err(Error::Shape(format!(
                "encode: expected batch x {} x {}, got {batch} x {m} x {k}",
                self.config.input_channels, self.config.window
            )));
        }
        match self.config.encoder_kind {
            EncoderKind::BidirectionalRecurrent => {
                self.encode_recurrent(tape, bound, x, training, &mut dropout_rng)
            }
            EncoderKind::TemporalConvolutional => {
                self.encode_conv(tape, bound, x, training, &mut dropout_rng)
            }
        }
    }

    fn encode_recurrent(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Array3<f64>,
        training: bool,
        dropout_rng: &mut Option<&mut SeededRng>,
    ) -> Result<FeatureBatch> {
        let (batch, m, k) = x.dim();
        let h = self.config.hidden_units;
        // one leaf per time step
        let mut current: Vec<NodeId> = (0..k)
            .map(|t| {
                let step = Array2::from_shape_fn((batch, m), |(b, c)| x[(b, c, t)]);
                tape.leaf(step)
            })
            .collect();

        for l in 0..self.config.num_layers {
            let base = l * 6;
            let fw = self.lstm_direction(tape, bound, &current, base, h, false);
            let bw = self.lstm_direction(tape, bound, &current, base + 3, h, true);
            let mut outputs: Vec<NodeId> = (0..k).map(|t| tape.concat_cols(fw[t], bw[t])).collect();
            if l + 1 < self.config.num_layers {
                outputs = outputs
                    .into_iter()
                    .map(|n| self.dropout(tape, n, training, dropout_rng))
                    .collect();
            }
            current = outputs;
        }
        let g = current[k - 1];
        Ok(FeatureBatch {
            g,
            seq: SeqFeatures::Steps(current),
        })
    }

    /// One LSTM direction over the step nodes; params at
    /// bound.ids[base..base+3] = (w_ih, w_hh, bias).
    fn lstm_direction(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        steps: &[NodeId],
        base: usize,
        h: usize,
        reverse: bool,
    ) -> Vec<NodeId> {
        let batch = tape.value(steps[0]).nrows();
        let w_ih = bound.ids[base];
        let w_hh = bound.ids[base + 1];
        let bias = bound.ids[base + 2];
        let mut h_state = tape.leaf(Array2::zeros((batch, h)));
        let mut c_state = tape.leaf(Array2::zeros((batch, h)));
        let order: Vec<usize> = if reverse {
            (0..steps.len()).rev().collect()
        } else {
            (0..steps.len()).collect()
        };
        let mut out = vec![h_state; steps.len()];
        for &t in &order {
            let gx = tape.matmul(steps[t], w_ih);
            let gh = tape.matmul(h_state, w_hh);
            let pre0 = tape.add(gx, gh);
            let pre = tape.add_row(pre0, bias);
            let i_gate = tape.slice_cols(pre, 0, h);
            let f_gate = tape.slice_cols(pre, h, 2 * h);
            let g_gate = tape.slice_cols(pre, 2 * h, 3 * h);
            let o_gate = tape.slice_cols(pre, 3 * h, 4 * h);
            let i_gate = tape.sigmoid(i_gate);
            let f_gate = tape.sigmoid(f_gate);
            let g_gate = tape.tanh(g_gate);
            let o_gate = tape.sigmoid(o_gate);
            let fc = tape.mul(f_gate, c_state);
            let ig = tape.mul(i_gate, g_gate);
            c_state = tape.add(fc, ig);
            let ct = tape.tanh(c_state);
            h_state = tape.mul(o_gate, ct);
            out[t] = h_state;
        }
        out
    }

    fn encode_conv(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Array3<f64>,
        training: bool,
        dropout_rng: &mut Option<&mut SeededRng>,
    ) -> Result<FeatureBatch> {
        let (batch, m, k) = x.dim();
        // channel-major packing: column c*K + t
        let packed = Array2::from_shape_fn((batch, m * k), |(b, col)| x[(b, col / k, col % k)]);
        let mut node = tape.leaf(packed);
        let mut c_in = m;
        let mut l_in = k;
        let n_layers = self.config.conv_layers.len();
        for (i, spec) in self.config.conv_layers.iter().enumerate() {
            let w = bound.ids[2 * i];
            let b = bound.ids[2 * i + 1];
            let y = tape.conv1d(node, w, b, c_in, l_in, spec.kernel, spec.stride);
            let mut y = tape.relu(y);
            if i + 1 < n_layers {
                y = self.dropout(tape, y, training, dropout_rng);
            }
            node = y;
            c_in = spec.out_channels;
            l_in = conv_out_len(l_in, spec.kernel, spec.stride);
        }
        // global average pooling via a constant matrix
        let mut pool = Array2::zeros((c_in * l_in, c_in));
        for ch in 0..c_in {
            for p in 0..l_in {
                pool[(ch * l_in + p, ch)] = 1.0 / l_in as f64;
            }
        }
        let pool_leaf = tape.leaf(pool);
        let g = tape.matmul(node, pool_leaf);
        Ok(FeatureBatch {
            g,
            seq: SeqFeatures::Packed {
                node,
                channels: c_in,
                len: l_in,
            },
        })
    }

    fn head_base(&self) -> usize {
        match self.config.encoder_kind {
            EncoderKind::BidirectionalRecurrent => self.config.num_layers * 6,
            EncoderKind::TemporalConvolutional => self.config.conv_layers.len() * 2,
        }
    }

    /// Predictor head on pooled features: ReLU between hidden layers, raw
    /// output (RUL scalar or class logits) at the end.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, g: NodeId) -> NodeId {
        let base = self.head_base();
        let mut node = g;
        let n = self.config.predictor_widths.len();
        for i in 0..n {
            let w = bound.ids[base + 2 * i];
            let b = bound.ids[base + 2 * i + 1];
            let y = tape.matmul(node, w);
            node = tape.add_row(y, b);
            if i + 1 < n {
                node = tape.relu(node);
            }
        }
        node
    }

    /// Per-position linear decode back to the input window, packed
    /// position-major: (batch, K * M) with column t*M + channel.
    pub fn reconstruct(&self, tape: &mut Tape, bound: &Bound, seq: &SeqFeatures) -> Result<NodeId> {
        let base = self.head_base() + 2 * self.config.predictor_widths.len();
        let w = bound.ids[base];
        let b = bound.ids[base + 1];
        match seq {
            SeqFeatures::Steps(steps) => {
                let decoded: Vec<NodeId> = steps
                    .iter()
                    .map(|&s| {
                        let y = tape.matmul(s, w);
                        tape.add_row(y, b)
                    })
                    .collect();
                let mut node = decoded[0];
                for &d in &decoded[1..] {
                    node = tape.concat_cols(node, d);
                }
                Ok(node)
            }
            SeqFeatures::Packed {
                node,
                channels,
                len,
            } => {
                let k = self.config.window;
                // nearest-position upsample to the input length
                let mut map = Vec::with_capacity(channels * k);
                for ch in 0..*channels {
                    for t in 0..k {
                        let p = (t * len) / k;
                        map.push(ch * len + p);
                    }
                }
                let up = tape.gather_cols(*node, map);
                let rows = tape.seq_to_rows(up, *channels, k);
                let y = tape.matmul(rows, w);
                let y = tape.add_row(y, b);
                Ok(tape.merge_rows(y, k))
            }
        }
    }

    /// Eval-mode predictions as a plain array (batch x output_dim).
    pub fn predict_array(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let features = self.encode(&mut tape, &bound, x, false, None)?;
        let out = self.predict(&mut tape, &bound, features.g);
        Ok(tape.value(out).clone())
    }

    /// Eval-mode pooled embeddings as a plain array (batch x feature_dim).
    pub fn embed_array(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let features = self.encode(&mut tape, &bound, x, false, None)?;
        Ok(tape.value(features.g).clone())
    }
}

/// Pack a window batch position-major: (batch, K * M), column t*M + channel.
/// Matches the layout of [`Model::reconstruct`] outputs.
pub fn pack_position_major(x: &Array3<f64>) -> Array2<f64> {
    let (batch, m, k) = x.dim();
    Array2::from_shape_fn((batch, k * m), |(b, col)| x[(b, col % m, col / m)])
}

/// Stack windowed samples into a batch array (batch x M x K) plus labels.
pub fn stack_batch(samples: &[&crate::data::WindowedSample]) -> (Array3<f64>, Array1<f64>) {
    let (m, k) = samples.first().map(|s| s.x.dim()).unwrap_or((0, 0));
    let mut x = Array3::zeros((samples.len(), m, k));
    let mut y = Array1::zeros(samples.len());
    for (i, s) in samples.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), i).assign(&s.x);
        y[i] = s.y;
    }
    (x, y)
}
