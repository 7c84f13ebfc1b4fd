use rand::Rng as _;

use vqg_tensor::init::{xavier_uniform, Rng};
use vqg_tensor::{BoundParams, Graph, ParamId, ParamKind, ParamStore, Tensor, Var, MASKED};

use super::config::NORM_EPS;
use crate::error::Result;

/// Everything one forward pass needs: the tape, the parameter bindings
/// for that tape, and the train/eval switch.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub bound: &'a mut BoundParams,
    pub store: &'a ParamStore,
    pub train: bool,
    /// Drives dropout masks; dropout is skipped when absent.
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        Ok(self.bound.var(self.g, self.store, id)?)
    }

    /// Inverted dropout with a constant mask; identity in eval mode or
    /// when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut().filter(|_| self.train && p > 0.0) else {
            return Ok(x);
        };
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?)?;
        Ok(self.g.mul(x, m)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Trainable));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight)?;
        let y = cx.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.p(b)?;
                Ok(cx.g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0), ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width]), ParamKind::Trainable),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gain = cx.p(self.gain)?;
        let bias = cx.p(self.bias)?;
        Ok(cx.g.layer_norm(x, gain, bias, NORM_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), width, width, true),
            // no key bias: it adds the same amount to every score of a row
            k: Linear::new(store, rng, &format!("{name}.k"), width, width, false),
            v: Linear::new(store, rng, &format!("{name}.v"), width, width, true),
            out: Linear::new(store, rng, &format!("{name}.out"), width, width, true),
            heads,
        }
    }

    fn split_heads(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let x = cx.g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        Ok(cx.g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Scaled dot-product attention of `query[B,Tq,D]` over
    /// `memory[B,Tk,D]`. `key_keep[b*Tk + k]` false hides key `k` of row
    /// `b`; `causal` additionally hides keys after the query position.
    pub fn forward(&self, cx: &mut Ctx, query: Var, memory: Var, key_keep: &[bool], causal: bool) -> Result<Var> {
        let qs = cx.g.shape(query).to_vec();
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = cx.g.shape(memory)[1];
        let dh = d / self.heads;

        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, memory)?;
        let v = self.v.forward(cx, memory)?;
        let q = self.split_heads(cx, q)?;
        let k = self.split_heads(cx, k)?;
        let v = self.split_heads(cx, v)?;

        let kt = cx.g.transpose_last2(k)?;
        let scores = cx.g.matmul(q, kt)?;
        let scores = cx.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let mut keep = Vec::with_capacity(b * self.heads * tq * tk);
        for row in 0..b {
            for _ in 0..self.heads {
                for i in 0..tq {
                    keep.extend((0..tk).map(|j| key_keep[row * tk + j] && (!causal || j <= i)));
                }
            }
        }
        let scores = cx.g.mask_fill(scores, keep, MASKED)?;
        let weights = cx.g.softmax(scores, 3)?;
        let ctx = cx.g.matmul(weights, v)?;
        let ctx = cx.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = cx.g.reshape(ctx, &[b, tq, d])?;
        self.out.forward(cx, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), width, hidden, true),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, width, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        self.outer.forward(cx, h)
    }
}

/// Pre-norm encoder block: self-attention then feed-forward, each wrapped
/// in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), width, hidden),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, keep: &[bool], dropout: f64) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = self.attn.forward(cx, h, h, keep, false)?;
        let h = cx.dropout(h, dropout)?;
        let x = cx.g.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.ffn.forward(cx, h)?;
        let h = cx.dropout(h, dropout)?;
        Ok(cx.g.add(x, h)?)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// fused memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), width, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), width, heads),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), width, hidden),
        }
    }

    pub fn forward(
        &self,
        cx: &mut Ctx,
        y: Var,
        self_keep: &[bool],
        memory: Var,
        memory_keep: &[bool],
        dropout: f64,
    ) -> Result<Var> {
        let h = self.norm1.forward(cx, y)?;
        let h = self.self_attn.forward(cx, h, h, self_keep, true)?;
        let h = cx.dropout(h, dropout)?;
        let y = cx.g.add(y, h)?;
        let h = self.norm2.forward(cx, y)?;
        let h = self.cross_attn.forward(cx, h, memory, memory_keep, false)?;
        let h = cx.dropout(h, dropout)?;
        let y = cx.g.add(y, h)?;
        let h = self.norm3.forward(cx, y)?;
        let h = self.ffn.forward(cx, h)?;
        let h = cx.dropout(h, dropout)?;
        Ok(cx.g.add(y, h)?)
    }
}

/// Fixed sinusoidal encodings `[len, width]`.
pub fn sinusoidal(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in (0..width).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / width as f64);
            data[t * width + i] = angle.sin();
            if i + 1 < width {
                data[t * width + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, width], data).expect("numel matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqg_tensor::init::{seeded, uniform};

    fn run_attention(causal: bool, keep: &[bool], x: &Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut seeded(1), "a", 4, 2);
        let mut g = Graph::new();
        let mut bound = BoundParams::new(&store);
        let mut cx = Ctx {
            g: &mut g,
            bound: &mut bound,
            store: &store,
            train: false,
            rng: None,
        };
        let xv = cx.g.constant(x.clone()).unwrap();
        let y = attn.forward(&mut cx, xv, xv, keep, causal).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let x = uniform(&mut seeded(2), &[1, 5, 4], -1.0, 1.0);
        let base = run_attention(true, &[true; 5], &x);
        for t in 0..5 {
            let mut x2 = x.clone();
            for c in 0..4 {
                x2.data_mut()[t * 4 + c] += 0.5;
            }
            let out = run_attention(true, &[true; 5], &x2);
            for p in 0..t {
                for c in 0..4 {
                    assert_eq!(out.data()[p * 4 + c], base.data()[p * 4 + c], "pos {p} moved when {t} changed");
                }
            }
        }
    }

    #[test]
    fn masked_keys_have_no_influence() {
        let keep = [true, true, false, true, false];
        let x = uniform(&mut seeded(3), &[1, 5, 4], -1.0, 1.0);
        let base = run_attention(false, &keep, &x);
        let mut x2 = x.clone();
        for c in 0..4 {
            x2.data_mut()[2 * 4 + c] = 9.0;
            x2.data_mut()[4 * 4 + c] = -3.0;
        }
        let out = run_attention(false, &keep, &x2);
        for p in [0, 1, 3] {
            assert_eq!(&out.data()[p * 4..p * 4 + 4], &base.data()[p * 4..p * 4 + 4]);
        }
    }

    #[test]
    fn sinusoid_values() {
        let pe = sinusoidal(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
