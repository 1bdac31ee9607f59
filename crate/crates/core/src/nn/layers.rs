//! Layers built on the tape: affine layers, MLPs, the LSTM cell, a small
//! strided convolutional encoder and bilinear ROI pooling.

use super::params::{Init, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use std::sync::Arc;

/// Activation applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

/// One affine layer `y = act(x W + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        store.add(
            &format!("{name}.w"),
            in_dim,
            out_dim,
            Init::UniformFanIn,
            rng,
        );
        store.add(&format!("{name}.b"), 1, out_dim, Init::Zero, rng);
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let (b, n) = tape.dims(x);
        if n != self.in_dim {
            return Err(Error::shape(format!(
                "dense {}: input ({b}, {n}), expected {} columns",
                self.name, self.in_dim
            )));
        }
        let w = tape.param(store, &format!("{}.w", self.name), trainable);
        let bias = tape.param(store, &format!("{}.b", self.name), trainable);
        let xw = tape.matmul(x, w);
        let pre = tape.add_row(xw, bias);
        Ok(match self.activation {
            Activation::None => pre,
            Activation::Relu => tape.relu(pre),
            Activation::Softmax => tape.softmax_rows(pre),
        })
    }
}

/// Fully-connected stack: hidden layers use ReLU, the last layer uses the
/// given activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        final_activation: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(Dense::init(
                store,
                rng,
                &format!("{name}.fc{i}"),
                dims[i],
                dims[i + 1],
                if last {
                    final_activation
                } else {
                    Activation::Relu
                },
            ));
        }
        Self { layers }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, trainable)?;
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Standard LSTM cell with separate input/hidden weight blocks per gate
/// (8 weight matrices plus 4 biases). The forget-gate bias starts at 1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmCell {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        for gate in GATES {
            store.add(
                &format!("{name}.w_x{gate}"),
                input_dim,
                hidden_dim,
                Init::UniformFanIn,
                rng,
            );
            store.add(
                &format!("{name}.w_h{gate}"),
                hidden_dim,
                hidden_dim,
                Init::UniformFanIn,
                rng,
            );
            let bias_init = if gate == "f" {
                Init::Const(1.0)
            } else {
                Init::Zero
            };
            store.add(&format!("{name}.b_{gate}"), 1, hidden_dim, bias_init, rng);
        }
        Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    /// One step: returns `(h', c')` for input `x` and previous state `(h, c)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        h: Var,
        c: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let (b, xn) = tape.dims(x);
        if xn != self.input_dim {
            return Err(Error::shape(format!(
                "lstm {}: input has {xn} columns, expected {}",
                self.name, self.input_dim
            )));
        }
        tape.expect_dims(h, b, self.hidden_dim, "lstm hidden state")?;
        tape.expect_dims(c, b, self.hidden_dim, "lstm cell state")?;

        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let wx = tape.param(store, &format!("{}.w_x{gate}", self.name), trainable);
            let wh = tape.param(store, &format!("{}.w_h{gate}", self.name), trainable);
            let bias = tape.param(store, &format!("{}.b_{gate}", self.name), trainable);
            let xw = tape.matmul(x, wx);
            let hw = tape.matmul(h, wh);
            let s = tape.add(xw, hw);
            let pre = tape.add_row(s, bias);
            gates.push(pre);
        }
        let i = tape.sigmoid(gates[0]);
        let f = tape.sigmoid(gates[1]);
        let g = tape.tanh(gates[2]);
        let o = tape.sigmoid(gates[3]);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        Ok((h_next, c_next))
    }
}

/// Three stride-2 3x3 conv+ReLU blocks followed by global average pooling
/// and one dense layer. Turns a (1, H*W) single-channel image into a feature
/// map of shape (C, H/8 * W/8) plus a global feature row.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub global_dim: usize,
    maps: Vec<Arc<Vec<i64>>>,
    global: Dense,
}

impl ConvEncoder {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        height: usize,
        width: usize,
        feature_channels: usize,
        global_dim: usize,
    ) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 {
            return Err(Error::invalid(format!(
                "conv encoder needs H and W divisible by 8, got {height}x{width}"
            )));
        }
        let channels = [
            (feature_channels / 4).max(2),
            (feature_channels / 2).max(4),
            feature_channels,
        ];
        let mut maps = Vec::new();
        let mut c_in = 1;
        let (mut h, mut w) = (height, width);
        for (k, &c_out) in channels.iter().enumerate() {
            store.add(
                &format!("{name}.conv{k}.w"),
                c_in * 9,
                c_out,
                Init::UniformFanIn,
                rng,
            );
            store.add(&format!("{name}.conv{k}.b"), 1, c_out, Init::Zero, rng);
            maps.push(Arc::new(im2col_map(c_in, h, w)));
            c_in = c_out;
            h /= 2;
            w /= 2;
        }
        let global = Dense::init(
            store,
            rng,
            &format!("{name}.global"),
            feature_channels,
            global_dim,
            Activation::Relu,
        );
        Ok(Self {
            name: name.to_string(),
            height,
            width,
            channels,
            global_dim,
            maps,
            global,
        })
    }

    /// Spatial size of the output feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        image: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        tape.expect_dims(image, 1, self.height * self.width, "encoder image")?;
        let mut x = image; // (C_in, H*W)
        let (mut h, mut w) = (self.height, self.width);
        for k in 0..self.channels.len() {
            let (h2, w2) = (h / 2, w / 2);
            let c_in = if k == 0 { 1 } else { self.channels[k - 1] };
            let patches = tape.gather(x, h2 * w2, c_in * 9, Arc::clone(&self.maps[k]));
            let wv = tape.param(store, &format!("{}.conv{k}.w", self.name), trainable);
            let bv = tape.param(store, &format!("{}.conv{k}.b", self.name), trainable);
            let mm = tape.matmul(patches, wv);
            let pre = tape.add_row(mm, bv);
            let act = tape.relu(pre);
            x = tape.transpose(act); // (C_out, H2*W2)
            h = h2;
            w = w2;
        }
        // global average pool over positions, then one dense layer
        let positions = h * w;
        let pool = tape.constant(positions, 1, vec![1.0 / positions as f64; positions]);
        let gap_col = tape.matmul(x, pool); // (C, 1)
        let gap = tape.transpose(gap_col); // (1, C)
        let global = self.global.forward(tape, store, gap, trainable)?;
        Ok((x, global))
    }
}

/// im2col index map for a 3x3 stride-2 pad-1 convolution over a
/// (c_in, h, w) input flattened row-major; `-1` marks zero padding.
/// Output layout: rows = output positions (row-major), cols = (c, ky, kx).
fn im2col_map(c_in: usize, h: usize, w: usize) -> Vec<i64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(h2 * w2 * c_in * 9);
    for oy in 0..h2 {
        for ox in 0..w2 {
            for c in 0..c_in {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as i64 - 1;
                        let ix = (ox * 2 + kx) as i64 - 1;
                        if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                            map.push(-1);
                        } else {
                            map.push((c * h * w) as i64 + iy * w as i64 + ix);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Clamps a normalized (x0, y0, x1, y1) box to the unit square, ordering the
/// coordinates and enforcing a minimum side of 1e-3.
pub fn sanitize_box(b: [f64; 4]) -> Result<[f64; 4]> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("box must be finite, got {b:?}")));
    }
    let fix = |lo: f64, hi: f64| -> (f64, f64) {
        let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        lo = lo.clamp(0.0, 1.0);
        hi = hi.clamp(0.0, 1.0);
        if hi - lo < 1e-3 {
            let c = (lo + hi) / 2.0;
            lo = c - 5e-4;
            hi = c + 5e-4;
            if lo < 0.0 {
                lo = 0.0;
                hi = 1e-3;
            }
            if hi > 1.0 {
                hi = 1.0;
                lo = 1.0 - 1e-3;
            }
        }
        (lo, hi)
    };
    let (x0, x1) = fix(b[0], b[2]);
    let (y0, y1) = fix(b[1], b[3]);
    Ok([x0, y0, x1, y1])
}

/// Bilinear ROI pooling of a (C, Hf*Wf) feature map over a normalized box.
///
/// Samples a k x k grid of cell centers inside the box. Feature value (ix,
/// iy) is anchored at normalized (ix/Wf, iy/Hf); sample positions between
/// anchors interpolate bilinearly and positions outside the anchor range
/// clamp to the border. Output is a (1, C*k*k) row ordered (c, gy, gx);
/// gradients flow to the feature map only.
pub fn roi_align(
    tape: &mut Tape,
    gamma: Var,
    hf: usize,
    wf: usize,
    rect: [f64; 4],
    k: usize,
) -> Result<Var> {
    let (c, n) = tape.dims(gamma);
    if n != hf * wf {
        return Err(Error::shape(format!(
            "feature map is ({c}, {n}), expected {hf}x{wf} positions"
        )));
    }
    let [x0, y0, x1, y1] = sanitize_box(rect)?;
    let mut taps = Vec::with_capacity(c * k * k);
    for ch in 0..c {
        for gy in 0..k {
            for gx in 0..k {
                let sx = x0 + (gx as f64 + 0.5) * (x1 - x0) / k as f64;
                let sy = y0 + (gy as f64 + 0.5) * (y1 - y0) / k as f64;
                let u = (sx * wf as f64).clamp(0.0, (wf - 1) as f64);
                let v = (sy * hf as f64).clamp(0.0, (hf - 1) as f64);
                let ix0 = u.floor() as usize;
                let iy0 = v.floor() as usize;
                let fu = u - ix0 as f64;
                let fv = v - iy0 as f64;
                let ix1 = (ix0 + 1).min(wf - 1);
                let iy1 = (iy0 + 1).min(hf - 1);
                let base = ch * hf * wf;
                taps.push([
                    (base + iy0 * wf + ix0, (1.0 - fu) * (1.0 - fv)),
                    (base + iy0 * wf + ix1, fu * (1.0 - fv)),
                    (base + iy1 * wf + ix0, (1.0 - fu) * fv),
                    (base + iy1 * wf + ix1, fu * fv),
                ]);
            }
        }
    }
    Ok(tape.bilinear(gamma, Arc::new(taps)))
}
