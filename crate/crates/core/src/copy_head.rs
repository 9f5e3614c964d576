//! Pointer-generator head: a vocabulary softmax mixed with copy attention
//! over knowledge tokens, gated per decoding position.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use crate::transformer::Init;
use crate::Scalar;

/// Floor applied before the log of the merged distribution.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct CopyHeadParams {
    /// `[d×d]`
    pub wq: ParamId,
    /// `[d×d]`
    pub wk: ParamId,
    /// `[2d×1]`
    pub mlp: ParamId,
}

impl CopyHeadParams {
    /// `W_mlp` starts at zero, so the gate opens at exactly 0.5.
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, d: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wq: init.normal(&format!("{name}.wq"), &[d, d])?,
            wk: init.normal(&format!("{name}.wk"), &[d, d])?,
            mlp: init.zeros(&format!("{name}.mlp"), &[2 * d, 1])?,
        })
    }

    /// Knowledge-side copy keys `H_knowledge · W_K`.
    pub fn keys<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, h_k: Var) -> Result<Var, TensorError> {
        let wk = g.param(store, self.wk);
        g.matmul(h_k, wk)
    }

    /// Row-stochastic `A_copy` `[L_D×L_K]` over kept knowledge positions.
    pub fn attention<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        h_d: Var,
        keys: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let wq = g.param(store, self.wq);
        let q = g.matmul(h_d, wq)?;
        let kt = g.transpose(keys)?;
        let scores = g.matmul(q, kt)?;
        let lq = g.value(h_d).shape()[0];
        let mask = keep
            .filter(|k| k.iter().any(|&b| !b))
            .map(|k| crate::transformer::key_mask(k, lq));
        g.softmax_masked(scores, 1, mask.as_deref())
    }

    /// `p_gen = sigmoid([A_copy·H_knowledge ; H_D] · W_mlp)`, `[L_D×1]`.
    pub fn gate<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        a_copy: Var,
        h_k: Var,
        h_d: Var,
    ) -> Result<Var, TensorError> {
        let ctx = g.matmul(a_copy, h_k)?;
        let cat = g.concat_cols(&[ctx, h_d])?;
        let mlp = g.param(store, self.mlp);
        let z = g.matmul(cat, mlp)?;
        g.sigmoid(z)
    }
}

/// `log(p_gen·P_vocab + (1 − p_gen)·scatter(A_copy, ids))` with the log
/// floored at [`LOG_FLOOR`]. Copy mass of repeated ids accumulates.
pub fn merge<S: Scalar>(
    g: &mut Graph<'_, S>,
    p_vocab: Var,
    a_copy: Var,
    p_gen: Var,
    knowledge_ids: &[usize],
) -> Result<Var, TensorError> {
    let v = g.value(p_vocab).last_dim();
    let generated = g.mul_col(p_vocab, p_gen)?;
    let copied = g.scatter_cols(a_copy, knowledge_ids, v)?;
    let rest = g.affine(p_gen, S::lit(-1.0), S::one())?;
    let copied = g.mul_col(copied, rest)?;
    let mixed = g.add(generated, copied)?;
    g.log_clamped(mixed, LOG_FLOOR)
}
