use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::windowing::PaddedWindows;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn for_dim(model_dim: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !model_dim.is_multiple_of(head_dim) {
            return Err(Error::InvalidValue(format!(
                "model dimension {model_dim} is not a multiple of head dimension {head_dim}"
            )));
        }
        Ok(AttentionConfig {
            head_dim,
            num_heads: model_dim / head_dim,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.head_dim * self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_weight(&format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng)?;
        let bias = if bias {
            Some(store.add_zeros(&format!("{name}.bias"), &[d_out], false)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).tensor.data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).tensor.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: Option<ParamId>,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_ones(&format!("{name}.gain"), &[dim])?,
            offset: Some(store.add_zeros(&format!("{name}.offset"), &[dim], false)?),
            dim,
        })
    }

    /// Gain without offset, as used on queries and keys.
    pub fn gain_only(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_ones(&format!("{name}.gain"), &[dim])?,
            offset: None,
            dim,
        })
    }

    /// Normalizes every group of `dim` trailing columns.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let o = self.offset.map(|o| tape.param(o));
        tape.layer_norm(x, Some(g), o, self.dim)
    }
}

/// Windowed multi-head self-attention with normalized queries and keys.
#[derive(Clone, Copy, Debug)]
pub struct WindowedAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub query_norm: LayerNorm,
    pub key_norm: LayerNorm,
    pub output: Linear,
}

impl WindowedAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim();
        Ok(WindowedAttention {
            cfg,
            query: Linear::new(store, &format!("{name}.q"), d, d, false, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, false, rng)?,
            query_norm: LayerNorm::gain_only(store, &format!("{name}.q_norm"), cfg.head_dim)?,
            key_norm: LayerNorm::gain_only(store, &format!("{name}.k_norm"), cfg.head_dim)?,
            output: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: &Arc<PaddedWindows>) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let q = self.query_norm.forward(tape, q)?;
        let k = self.key.forward(tape, x)?;
        let k = self.key_norm.forward(tape, k)?;
        let v = self.value.forward(tape, x)?;
        let a = tape.window_attention(q, k, v, self.cfg.num_heads, Arc::clone(layout))?;
        self.output.forward(tape, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.output.forward(tape, h)
    }
}

/// `y = x + MLP(LN(x)) + Attention(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct VitBlock {
    pub norm: LayerNorm,
    pub attention: WindowedAttention,
    pub mlp: Mlp,
}

impl VitBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim();
        Ok(VitBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            attention: WindowedAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: &Arc<PaddedWindows>) -> Result<Var> {
        let y = self.norm.forward(tape, x)?;
        let m = self.mlp.forward(tape, y)?;
        let a = self.attention.forward(tape, y, layout)?;
        let s = tape.add(x, m)?;
        tape.add(s, a)
    }

    /// Zeroes both residual branches' output projections.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.mlp.output.zero(store);
        self.attention.output.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::healpix::MeshLevel;
    use crate::nn::tensor::Tensor;
    use crate::windowing::build_windows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_one_by_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 1, 1, true, &mut rng).unwrap();
        store.get_mut(lin.weight).tensor.data_mut()[0] = 3.0;
        store.get_mut(lin.bias.unwrap()).tensor.data_mut()[0] = 1.0;
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
    }

    #[test]
    fn zeroed_projections_give_identity_block() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig::for_dim(8, 4).unwrap();
        let block = VitBlock::new(&mut store, "b", cfg, &mut rng).unwrap();
        block.zero_output_projections(&mut store);
        let layout = Arc::new(build_windows(MeshLevel::new(1), 1).unwrap().padded());
        let mut tape = Tape::new(&store);
        let xt = random_input(&mut rng, 48, 8);
        let x = tape.input(xt.clone());
        let y = block.forward(&mut tape, x, &layout).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn uniform_window_input_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AttentionConfig::for_dim(8, 4).unwrap();
        let attn = WindowedAttention::new(&mut store, "a", cfg, &mut rng).unwrap();
        let partition = build_windows(MeshLevel::new(1), 1).unwrap();
        let layout = Arc::new(partition.padded());
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..48).flat_map(|_| row.clone()).collect();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(48, 8, data).unwrap());
        let q = attn.query.forward(&mut tape, x).unwrap();
        let k = attn.key.forward(&mut tape, x).unwrap();
        let v = attn.value.forward(&mut tape, x).unwrap();
        let a = tape.window_attention(q, k, v, 2, Arc::clone(&layout)).unwrap();
        let probs = tape.attention_weights(a).unwrap();
        let width = layout.width;
        for w in 0..layout.num_windows() {
            for h in 0..2 {
                for i in 0..width {
                    for j in 0..width {
                        let p = probs[((w * 2 + h) * width + i) * width + j];
                        assert!((p - 0.25).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_member_window_passes_values_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::for_dim(4, 2).unwrap();
        let attn = WindowedAttention::new(&mut store, "a", cfg, &mut rng).unwrap();
        let layout = Arc::new(PaddedWindows {
            width: 1,
            num_nodes: 3,
            members: vec![0, 1, 2],
            mask: vec![true; 3],
        });
        let mut tape = Tape::new(&store);
        let x = tape.input(random_input(&mut rng, 3, 4));
        let y = attn.forward(&mut tape, x, &layout).unwrap();
        let v = attn.value.forward(&mut tape, x).unwrap();
        let expected = attn.output.forward(&mut tape, v).unwrap();
        let (a, b) = (tape.value(y).data(), tape.value(expected).data());
        for (p, q) in a.iter().zip(b) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_window_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let layout = Arc::new(PaddedWindows {
            width: 1,
            num_nodes: 2,
            members: vec![0, 1],
            mask: vec![true, false],
        });
        assert!(matches!(
            tape.window_attention(x, x, x, 1, layout),
            Err(Error::EmptyWindow(1))
        ));
    }
}
