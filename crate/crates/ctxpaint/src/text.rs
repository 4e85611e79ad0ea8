//! Frozen stand-in for the text encoder: one pre-norm transformer layer
//! with learned positions and a final normalisation.

use candle_core::{DType, Tensor};
use ctxpaint_core::adapters::ParamRole;
use ctxpaint_core::prompts::{Embeddings, TextEncoder};
use ctxpaint_core::rng::derive_seed;
use ctxpaint_core::Seed;

use crate::error::{Error, Result};
use crate::nn::{attend, tensor_from, LayerNorm, Linear, ParamStore, Slot};

pub const MAX_TOKENS: usize = 128;

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    store: ParamStore,
    positions: crate::nn::ParamId,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm_out: LayerNorm,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: Seed, dtype: DType) -> Result<Self> {
        let mut p = ParamStore::new(dtype);
        let role = ParamRole::TextEncoder;
        let s = |i| derive_seed(seed, "text-encoder", i);
        let positions = p.add_normal(
            "text.positions",
            Slot::Base(role),
            &[MAX_TOKENS, dim],
            0.1,
            s(0),
        )?;
        let norm1 = LayerNorm::new(&mut p, "text.norm1", dim, role)?;
        let q = Linear::new(&mut p, "text.q", dim, dim, false, role, s(1), 1.0)?;
        let k = Linear::new(&mut p, "text.k", dim, dim, false, role, s(2), 1.0)?;
        let v = Linear::new(&mut p, "text.v", dim, dim, false, role, s(3), 1.0)?;
        let o = Linear::new(&mut p, "text.o", dim, dim, true, role, s(4), 1.0)?;
        let norm2 = LayerNorm::new(&mut p, "text.norm2", dim, role)?;
        let ff1 = Linear::new(&mut p, "text.ff1", dim, 2 * dim, true, role, s(5), 1.0)?;
        let ff2 = Linear::new(&mut p, "text.ff2", 2 * dim, dim, true, role, s(6), 1.0)?;
        let norm_out = LayerNorm::new(&mut p, "text.norm_out", dim, role)?;
        Ok(Self {
            dim,
            store: p,
            positions,
            norm1,
            q,
            k,
            v,
            o,
            norm2,
            ff1,
            ff2,
            norm_out,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Encodes `B×S×D` token sequences; differentiable in the tokens.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, s, d) = tokens.dims3()?;
        if d != self.dim || s > MAX_TOKENS || s == 0 {
            return Err(Error::Config(format!(
                "text encoder takes 1..={MAX_TOKENS} tokens of width {}, got {s}x{d}",
                self.dim
            )));
        }
        let p = &self.store;
        let x = tokens.broadcast_add(&p.get(self.positions).narrow(0, 0, s)?)?;
        let h = self.norm1.forward(p, &x)?;
        let x = (&x
            + self.o.forward(
                p,
                &attend(
                    &self.q.forward(p, &h)?,
                    &self.k.forward(p, &h)?,
                    &self.v.forward(p, &h)?,
                )?,
            )?)?;
        let h = self.norm2.forward(p, &x)?;
        let x = (&x + self.ff2.forward(p, &self.ff1.forward(p, &h)?.silu()?)?)?;
        self.norm_out.forward(p, &x)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &Embeddings) -> ctxpaint_core::Result<Embeddings> {
        let run = || -> Result<Embeddings> {
            let values = tokens.data().iter().map(|&v| f64::from(v)).collect();
            let x = tensor_from(values, &[1, tokens.rows(), tokens.dim()], self.dtype())?;
            let y = self
                .forward(&x)?
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            Ok(Embeddings::new(tokens.rows(), self.dim, y)?)
        };
        run().map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxpaint_core::prompts::{encode_condition, ToyVocabulary};

    #[test]
    fn encodes_sequences_and_depends_on_order() {
        let enc = ToyTextEncoder::new(16, Seed(1), DType::F64).unwrap();
        let tokens = ToyVocabulary::new(16, Seed(2)).embed("red square on a white page");
        let out = enc.encode(&tokens).unwrap();
        assert_eq!((out.rows(), out.dim()), (6, 16));
        let mut rev = Embeddings::zeros(0, 16);
        for r in (0..tokens.rows()).rev() {
            rev.push_row(tokens.row(r)).unwrap();
        }
        assert_ne!(enc.encode(&rev).unwrap().row(0), out.row(5));
    }

    #[test]
    fn null_condition_ignores_prompt_contents() {
        let enc = ToyTextEncoder::new(16, Seed(1), DType::F64).unwrap();
        let vocab = ToyVocabulary::new(16, Seed(2));
        let a = vocab.embed("one two three four");
        let b = vocab.embed("four three two one");
        let null = vec![0.25f32; 16];
        let ea = encode_condition(&enc, &a, None, &null, true).unwrap();
        let eb = encode_condition(&enc, &b, None, &null, true).unwrap();
        assert_eq!(ea, eb);
        assert_ne!(encode_condition(&enc, &a, None, &null, false).unwrap(), ea);
    }

    #[test]
    fn rejects_overlong_sequences() {
        let enc = ToyTextEncoder::new(8, Seed(1), DType::F32).unwrap();
        let x = Tensor::zeros(
            (1, MAX_TOKENS + 1, 8),
            DType::F32,
            &candle_core::Device::Cpu,
        )
        .unwrap();
        assert!(enc.forward(&x).is_err());
    }
}
