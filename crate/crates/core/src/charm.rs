//! Region-masked cross-attention from character embeddings into a feature
//! map.
//!
//! For features `F: [C, H, W]` and embeddings `E: [n, C]`:
//! `Q = Wq F`, `K = E Wk^T`, `V = E Wv^T`, `logits = K Q / sqrt(C)`, then a
//! per-character softmax over the positions inside its mask, and
//! `out = F + V^T A`. Positions outside every mask are returned untouched.

use crate::charprior::SpatialMask;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Shared `C x C` query, key and value projections (slots in a store).
#[derive(Debug, Clone, PartialEq)]
pub struct CharmParams {
    pub dim: usize,
    wq: usize,
    wk: usize,
    wv: usize,
}

impl CharmParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str| store.insert(format!("{prefix}.{name}"), rng.normal_tensor(&[dim, dim], std));
        Ok(CharmParams {
            dim,
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
        })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let slot = |name: &str| {
            store
                .slot(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::invalid("charm", format!("missing parameter {prefix}.{name}")))
        };
        let wq = slot("wq")?;
        Ok(CharmParams {
            dim: store.tensors()[wq].shape()[0],
            wq,
            wk: slot("wk")?,
            wv: slot("wv")?,
        })
    }

    pub fn slots(&self) -> [usize; 3] {
        [self.wq, self.wk, self.wv]
    }
}

/// Result of one [`charm_forward`] call.
pub struct CharmOutput {
    /// Updated feature map, same shape as the input.
    pub out: Var,
    /// Attention maps `[n, H*W]`, absent when there were no priors.
    pub attention: Option<Var>,
    /// Indices of priors whose mask had no active cell.
    pub empty_masks: Vec<usize>,
}

/// Applies masked cross-attention for one sample.
///
/// `features` is `[C, H, W]`, `embeddings` is `[n, C]` with `n == masks.len()`
/// (or `None` when there are no priors). With `literal_mask_product` the
/// logits are multiplied by the mask and a full softmax is taken instead,
/// which leaves non-zero weight outside the region; it exists for comparison
/// runs only.
pub fn charm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &CharmParams,
    vars: &[Var],
    features: Var,
    embeddings: Option<Var>,
    masks: &[SpatialMask],
    literal_mask_product: bool,
) -> Result<CharmOutput> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 || fs[0] != params.dim {
        return Err(Error::shape("charm_forward", &fs, &[params.dim]));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let Some(e) = embeddings else {
        if !masks.is_empty() {
            return Err(Error::invalid("charm_forward", "masks given without embeddings"));
        }
        return Ok(CharmOutput {
            out: features,
            attention: None,
            empty_masks: Vec::new(),
        });
    };
    let es = tape.shape(e).to_vec();
    if es.len() != 2 || es[1] != c || es[0] != masks.len() {
        return Err(Error::shape("charm_forward embeddings", &es, &[masks.len(), c]));
    }
    let n = es[0];
    let mut mask = Vec::with_capacity(n * h * w);
    let mut empty_masks = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::shape("charm_forward mask", &[m.height, m.width], &[h, w]));
        }
        if m.is_empty() {
            log::warn!("character prior {i} has an empty mask and contributes nothing");
            empty_masks.push(i);
        }
        mask.extend(m.cells.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    let mask = Tensor::new(&[n, h * w], mask)?;

    let f2 = tape.reshape(features, &[c, h * w])?;
    let q = tape.matmul(vars[params.wq], f2)?;
    let k = tape.matmul_nt(e, vars[params.wk])?;
    let v = tape.matmul_nt(e, vars[params.wv])?;
    let logits = tape.matmul(k, q)?;
    let logits = tape.scale(logits, T::of(1.0 / (c as f64).sqrt()))?;
    let attn = if literal_mask_product {
        let m = tape.constant(mask);
        let masked = tape.mul(logits, m)?;
        tape.softmax(masked, 1)?
    } else {
        tape.masked_softmax(logits, &mask, 1)?
    };
    let delta = tape.matmul_tn(v, attn)?;
    let delta = tape.reshape(delta, &[c, h, w])?;
    let out = tape.add(features, delta)?;
    Ok(CharmOutput {
        out,
        attention: Some(attn),
        empty_masks,
    })
}

/// Convenience wrapper over [`charm_forward`] on plain tensors, returning
/// the output feature map and the attention maps.
pub fn charm_apply<T: Scalar>(
    store: &ParamStore<T>,
    params: &CharmParams,
    features: &Tensor<T>,
    embeddings: Option<&Tensor<T>>,
    masks: &[SpatialMask],
    literal_mask_product: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut tape = Tape::no_grad();
    let vars = store.bind(&mut tape);
    let f = tape.constant(features.clone());
    let e = embeddings.map(|e| tape.constant(e.clone()));
    let r = charm_forward(&mut tape, params, &vars, f, e, masks, literal_mask_product)?;
    Ok((tape.value(r.out).clone(), r.attention.map(|a| tape.value(a).clone())))
}
