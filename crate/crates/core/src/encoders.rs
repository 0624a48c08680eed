//! Per-modality encoders mapping raw feature sequences to the shared model
//! width: an LSTM followed by a fully connected layer for audio and video,
//! and a per-timestep affine projection for text.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Mode, Var};
use crate::data_model::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    /// LSTM state width; `None` means `d_model`.
    pub recurrent_hidden: Option<usize>,
    pub recurrent_layers: usize,
    pub bidirectional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            recurrent_hidden: None,
            recurrent_layers: 1,
            bidirectional: false,
        }
    }
}

impl EncoderConfig {
    pub fn hidden(&self) -> usize {
        self.recurrent_hidden.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden() == 0 || self.recurrent_layers == 0 {
            return Err(Error::Config("encoder widths and layer count must be >= 1".into()));
        }
        Ok(())
    }
}

/// `y = x W + b`, `W` is `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(in_dim, out_dim, in_dim),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init.uniform(1, out_dim, in_dim),
                ParamKind::Trainable,
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmLayer {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        hidden: usize,
        reverse: bool,
    ) -> Self {
        // PyTorch-style bound 1/sqrt(hidden) for every recurrent tensor.
        let w_ih = store.add(
            format!("{name}.w_ih"),
            init.uniform(in_dim, 4 * hidden, hidden),
            ParamKind::Trainable,
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            init.uniform(hidden, 4 * hidden, hidden),
            ParamKind::Trainable,
        );
        let bias = store.add(
            format!("{name}.bias"),
            init.uniform(1, 4 * hidden, hidden),
            ParamKind::Trainable,
        );
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
            reverse,
        }
    }

    /// Runs the recurrence over all `T` rows of `x` and returns the full
    /// `T x hidden` state sequence in input order.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let steps = g.shape(x).0;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w_ih);
        let xp = g.add_row(xw, b);
        let mut outputs = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if self.reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let mut gates = g.slice_rows(xp, t, 1);
            if let Some((h, _)) = state {
                let hw = g.matmul(h, w_hh);
                gates = g.add(gates, hw);
            }
            let hc = g.lstm_cell(gates, state.map(|(_, c)| c));
            let h = g.slice_cols(hc, 0, self.hidden);
            let c = g.slice_cols(hc, self.hidden, self.hidden);
            outputs[t] = Some(h);
            state = Some((h, c));
        }
        let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step ran")).collect();
        g.concat_rows(&rows)
    }
}

/// LSTM stack followed by a fully connected projection to `d_model`.
#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub modality: Modality,
    pub input_dim: usize,
    pub layers: Vec<Vec<LstmLayer>>,
    pub fc: Linear,
}

impl RecurrentEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        modality: Modality,
        input_dim: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let hidden = cfg.hidden();
        let dirs = if cfg.bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(cfg.recurrent_layers);
        let mut in_dim = input_dim;
        for l in 0..cfg.recurrent_layers {
            let mut layer = vec![LstmLayer::new(
                store,
                init,
                &format!("{name}.lstm.{l}"),
                in_dim,
                hidden,
                false,
            )];
            if cfg.bidirectional {
                layer.push(LstmLayer::new(
                    store,
                    init,
                    &format!("{name}.lstm.{l}.reverse"),
                    in_dim,
                    hidden,
                    true,
                ));
            }
            layers.push(layer);
            in_dim = hidden * dirs;
        }
        let fc = Linear::new(store, init, &format!("{name}.fc"), in_dim, cfg.d_model, true);
        Self {
            modality,
            input_dim,
            layers,
            fc,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let outs: Vec<Var> = layer.iter().map(|dir| dir.forward(g, h)).collect();
            h = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        }
        self.fc.forward(g, h)
    }
}

/// Per-timestep affine map from contextual token embeddings to `d_model`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, input_dim: usize, cfg: &EncoderConfig) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), input_dim, cfg.d_model, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.proj.forward(g, x)
    }
}

/// Encoder output: `T x d_model`, same `T` as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub modality: Modality,
    pub data: Matrix,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

pub(crate) fn check_input(seq: &FeatureSequence, expected: Modality, input_dim: usize) -> Result<()> {
    if seq.modality() != expected {
        return Err(Error::WrongModality {
            expected,
            found: seq.modality(),
        });
    }
    if seq.is_empty() {
        return Err(Error::EmptySequence(expected));
    }
    if seq.dim() != input_dim {
        return Err(Error::ShapeMismatch(format!(
            "{expected} features have width {}, encoder expects {input_dim}",
            seq.dim()
        )));
    }
    Ok(())
}

fn encode_recurrent(
    enc: &RecurrentEncoder,
    store: &ParamStore,
    seq: &FeatureSequence,
    expected: Modality,
) -> Result<EncodedSequence> {
    check_input(seq, expected, enc.input_dim)?;
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.constant(seq.to_matrix());
    let y = enc.forward(&mut g, x);
    Ok(EncodedSequence {
        modality: expected,
        data: g.value(y).clone(),
    })
}

pub fn encode_audio(enc: &RecurrentEncoder, store: &ParamStore, seq: &FeatureSequence) -> Result<EncodedSequence> {
    encode_recurrent(enc, store, seq, Modality::Audio)
}

pub fn encode_video(enc: &RecurrentEncoder, store: &ParamStore, seq: &FeatureSequence) -> Result<EncodedSequence> {
    encode_recurrent(enc, store, seq, Modality::Video)
}

pub fn encode_text(enc: &TextEncoder, store: &ParamStore, seq: &FeatureSequence) -> Result<EncodedSequence> {
    if seq.modality() != Modality::Text {
        return Err(Error::WrongModality {
            expected: Modality::Text,
            found: seq.modality(),
        });
    }
    if seq.dim() != enc.proj.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "text features have width {}, encoder expects {}",
            seq.dim(),
            enc.proj.in_dim
        )));
    }
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.constant(seq.to_matrix());
    let y = enc.forward(&mut g, x);
    Ok(EncodedSequence {
        modality: Modality::Text,
        data: g.value(y).clone(),
    })
}
