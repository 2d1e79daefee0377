use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Sinusoidal position table `[max_len, dim]`: even columns `sin`, odd
/// columns `cos`, frequency `10000^(-2k/dim)` for column pair `k`.
pub fn position_table(max_len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_len * dim];
    for p in 0..max_len {
        for c in 0..dim {
            let k = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / dim as f64);
            out[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Embedding table plus one single-head self-attention block with a
/// residual connection:
/// `X = table[y] + pos`, `out = X + softmax(Q K^T / sqrt(C)) V Wo^T`.
///
/// The struct holds slot indices into the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct CharEncoder {
    pub vocab: usize,
    pub dim: usize,
    pub max_chars: usize,
    table: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

impl CharEncoder {
    /// Registers `{prefix}.table`, `.wq`, `.wk`, `.wv`, `.wo` in `store`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab: usize,
        dim: usize,
        max_chars: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if vocab == 0 || dim == 0 || max_chars == 0 {
            return Err(Error::invalid(
                "char encoder",
                "vocab, dim and max_chars must be positive",
            ));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let table = store.insert(format!("{prefix}.table"), rng.normal_tensor(&[vocab, dim], 1.0))?;
        let mut proj = |name: &str| store.insert(format!("{prefix}.{name}"), rng.normal_tensor(&[dim, dim], std));
        Ok(CharEncoder {
            vocab,
            dim,
            max_chars,
            table,
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
        })
    }

    /// Rebinds to an existing store (for example one loaded from disk).
    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, max_chars: usize) -> Result<Self> {
        let slot = |name: &str| {
            store
                .slot(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::invalid("char encoder", format!("missing parameter {prefix}.{name}")))
        };
        let table = slot("table")?;
        let ts = store.tensors()[table].shape();
        Ok(CharEncoder {
            vocab: ts[0],
            dim: ts[1],
            max_chars,
            table,
            wq: slot("wq")?,
            wk: slot("wk")?,
            wv: slot("wv")?,
            wo: slot("wo")?,
        })
    }

    pub fn table_slot(&self) -> usize {
        self.table
    }

    pub fn slots(&self) -> [usize; 5] {
        [self.table, self.wq, self.wk, self.wv, self.wo]
    }

    /// Embeddings `[n, dim]` for class ids. `params` are the store's vars in
    /// slot order.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("encode_chars", "no characters to encode"));
        }
        if ids.len() > self.max_chars {
            return Err(Error::invalid(
                "encode_chars",
                format!("{} characters exceed the maximum of {}", ids.len(), self.max_chars),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(
                "encode_chars",
                format!("class id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let n = ids.len();
        let c = self.dim;
        let tok = tape.embed(params[self.table], ids)?;
        let pos = position_table(n, c);
        let pos = tape.constant(Tensor::from_fn(&[n, c], |i| T::of(pos[i])));
        let x = tape.add(tok, pos)?;
        let q = tape.matmul_nt(x, params[self.wq])?;
        let k = tape.matmul_nt(x, params[self.wk])?;
        let v = tape.matmul_nt(x, params[self.wv])?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, T::of(1.0 / (c as f64).sqrt()))?;
        let a = tape.softmax(logits, 1)?;
        let av = tape.matmul(a, v)?;
        let o = tape.matmul_nt(av, params[self.wo])?;
        tape.add(x, o)
    }

    /// Detached embeddings, one row per id.
    pub fn embed_values<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::no_grad();
        let vars = store.bind(&mut tape);
        let e = self.encode(&mut tape, &vars, ids)?;
        Ok(tape.value(e).data().chunks(self.dim).map(|r| r.to_vec()).collect())
    }
}
