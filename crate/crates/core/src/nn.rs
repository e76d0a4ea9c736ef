//! Recurrent building blocks: embeddings, GRU cells, the bidirectional
//! encoder pass, additive attention and the output network.
//!
//! Weight matrices are stored `[input, output]` and applied as `x · W`.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Seeded uniform initializer.
pub struct Init {
    rng: ChaCha8Rng,
    dist: Uniform<f64>,
}

impl Init {
    pub fn uniform(seed: u64, scale: f64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Uniform::new_inclusive(-scale, scale),
        }
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("initializer shape")
    }
}

fn add_param(
    store: &mut ParamStore,
    init: &mut Init,
    name: String,
    shape: &[usize],
) -> Result<ParamId> {
    let t = init.tensor(shape);
    store.add(name, t)
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<()> {
    if store.get(id).shape() != shape {
        return Err(Error::shape("parameter", &[store.get(id).shape(), shape]));
    }
    Ok(())
}

fn lookup(store: &ParamStore, name: String) -> Result<ParamId> {
    store
        .id(&name)
        .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_update: ParamId,
    pub w_reset: ParamId,
    pub w_cand: ParamId,
    pub u_update: ParamId,
    pub u_reset: ParamId,
    pub u_cand: ParamId,
    pub b_update: ParamId,
    pub b_reset: ParamId,
    pub b_cand: ParamId,
    pub input: usize,
    pub hidden: usize,
}

const GRU_NAMES: [&str; 9] = [
    "w_update", "w_reset", "w_cand", "u_update", "u_reset", "u_cand", "b_update", "b_reset",
    "b_cand",
];

impl GruParams {
    fn shapes(input: usize, hidden: usize) -> [Vec<usize>; 9] {
        let w = vec![input, hidden];
        let u = vec![hidden, hidden];
        let b = vec![hidden];
        [
            w.clone(),
            w.clone(),
            w,
            u.clone(),
            u.clone(),
            u,
            b.clone(),
            b.clone(),
            b,
        ]
    }

    fn from_ids(ids: [ParamId; 9], input: usize, hidden: usize) -> Self {
        let [w_update, w_reset, w_cand, u_update, u_reset, u_cand, b_update, b_reset, b_cand] = ids;
        GruParams {
            w_update,
            w_reset,
            w_cand,
            u_update,
            u_reset,
            u_cand,
            b_update,
            b_reset,
            b_cand,
            input,
            hidden,
        }
    }

    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let shapes = Self::shapes(input, hidden);
        let mut ids = Vec::with_capacity(9);
        for (name, shape) in GRU_NAMES.iter().zip(&shapes) {
            ids.push(add_param(store, init, format!("{prefix}/{name}"), shape)?);
        }
        Ok(Self::from_ids(ids.try_into().unwrap(), input, hidden))
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let shapes = Self::shapes(input, hidden);
        let mut ids = Vec::with_capacity(9);
        for (name, shape) in GRU_NAMES.iter().zip(&shapes) {
            let id = lookup(store, format!("{prefix}/{name}"))?;
            expect_shape(store, id, shape)?;
            ids.push(id);
        }
        Ok(Self::from_ids(ids.try_into().unwrap(), input, hidden))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.w_update,
            self.w_reset,
            self.w_cand,
            self.u_update,
            self.u_reset,
            self.u_cand,
            self.b_update,
            self.b_reset,
            self.b_cand,
        ]
    }
}

/// Input-side gate pre-activations `x · W + b`, for one step or a whole
/// sequence (one row per step).
pub struct GateInputs {
    pub update: Var,
    pub reset: Var,
    pub cand: Var,
}

pub fn gru_project(g: &mut Graph<'_>, x: Var, p: &GruParams) -> Result<GateInputs> {
    let mut proj = |w: ParamId, b: ParamId| -> Result<Var> {
        let wv = g.param(w);
        let bv = g.param(b);
        let xw = g.matmul(x, wv)?;
        g.add(xw, bv)
    };
    Ok(GateInputs {
        update: proj(p.w_update, p.b_update)?,
        reset: proj(p.w_reset, p.b_reset)?,
        cand: proj(p.w_cand, p.b_cand)?,
    })
}

/// One recurrence step given precomputed input projections.
pub fn gru_step(
    g: &mut Graph<'_>,
    update_in: Var,
    reset_in: Var,
    cand_in: Var,
    h_prev: Var,
    p: &GruParams,
) -> Result<Var> {
    let uz = g.param(p.u_update);
    let ur = g.param(p.u_reset);
    let uc = g.param(p.u_cand);

    let hz = g.matmul(h_prev, uz)?;
    let za = g.add(update_in, hz)?;
    let z = g.sigmoid(za);

    let hr = g.matmul(h_prev, ur)?;
    let ra = g.add(reset_in, hr)?;
    let r = g.sigmoid(ra);

    let rh = g.mul(r, h_prev)?;
    let hc = g.matmul(rh, uc)?;
    let ca = g.add(cand_in, hc)?;
    let cand = g.tanh(ca);

    // (1 - z) * h + z * cand
    let diff = g.sub(cand, h_prev)?;
    let step = g.mul(z, diff)?;
    g.add(h_prev, step)
}

pub fn gru_cell(g: &mut Graph<'_>, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    if g.shape(x) != [p.input] || g.shape(h_prev) != [p.hidden] {
        return Err(Error::shape(
            "gru_cell",
            &[g.shape(x), g.shape(h_prev), &[p.input, p.hidden]],
        ));
    }
    let gi = gru_project(g, x, p)?;
    gru_step(g, gi.update, gi.reset, gi.cand, h_prev, p)
}

/// Runs a GRU over the rows of `xs` (`[T, input]`); returns one state per row
/// in input order.
pub fn gru_sequence(
    g: &mut Graph<'_>,
    xs: Var,
    p: &GruParams,
    reverse: bool,
) -> Result<Vec<Var>> {
    let t = g.shape(xs)[0];
    let gi = gru_project(g, xs, p)?;
    let mut h = g.constant(Tensor::zeros(&[p.hidden]));
    let mut states = vec![h; t];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t).rev())
    } else {
        Box::new(0..t)
    };
    for j in order {
        let zi = g.row(gi.update, j)?;
        let ri = g.row(gi.reset, j)?;
        let ci = g.row(gi.cand, j)?;
        h = gru_step(g, zi, ri, ci, h, p)?;
        states[j] = h;
    }
    Ok(states)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = add_param(store, init, name.to_string(), &[vocab, dim])?;
        Ok(EmbeddingParams { table, vocab, dim })
    }

    pub fn bind(store: &ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        let table = lookup(store, name.to_string())?;
        expect_shape(store, table, &[vocab, dim])?;
        Ok(EmbeddingParams { table, vocab, dim })
    }

    pub fn lookup(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }

    pub fn lookup_one(&self, g: &mut Graph<'_>, id: usize) -> Result<Var> {
        let m = self.lookup(g, &[id])?;
        g.row(m, 0)
    }
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let w = add_param(store, init, format!("{prefix}/w"), &[input, output])?;
        let b = add_param(store, init, format!("{prefix}/b"), &[output])?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let w = lookup(store, format!("{prefix}/w"))?;
        let b = lookup(store, format!("{prefix}/b"))?;
        expect_shape(store, w, &[input, output])?;
        expect_shape(store, b, &[output])?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_a: ParamId,
    pub u_a: ParamId,
    pub v_a: ParamId,
    pub memory_width: usize,
    pub state_width: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        memory_width: usize,
        state_width: usize,
        dim: usize,
    ) -> Result<Self> {
        let w_a = add_param(store, init, format!("{prefix}/w_a"), &[memory_width, dim])?;
        let u_a = add_param(store, init, format!("{prefix}/u_a"), &[state_width, dim])?;
        let v_a = add_param(store, init, format!("{prefix}/v_a"), &[dim])?;
        Ok(AttentionParams {
            w_a,
            u_a,
            v_a,
            memory_width,
            state_width,
            dim,
        })
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        memory_width: usize,
        state_width: usize,
        dim: usize,
    ) -> Result<Self> {
        let w_a = lookup(store, format!("{prefix}/w_a"))?;
        let u_a = lookup(store, format!("{prefix}/u_a"))?;
        let v_a = lookup(store, format!("{prefix}/v_a"))?;
        expect_shape(store, w_a, &[memory_width, dim])?;
        expect_shape(store, u_a, &[state_width, dim])?;
        expect_shape(store, v_a, &[dim])?;
        Ok(AttentionParams {
            w_a,
            u_a,
            v_a,
            memory_width,
            state_width,
            dim,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_a, self.u_a, self.v_a]
    }
}

/// Encoder states `[T, width]` with their attention projection `H · W_a`
/// computed once per input.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMemory {
    pub states: Var,
    pub projected: Var,
}

impl AttentionMemory {
    pub fn new(g: &mut Graph<'_>, states: Var, a: &AttentionParams) -> Result<Self> {
        let w = g.param(a.w_a);
        let projected = g.matmul(states, w)?;
        Ok(AttentionMemory { states, projected })
    }

    pub fn from_rows(g: &mut Graph<'_>, rows: &[Var], a: &AttentionParams) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("attention over an empty sequence".into()));
        }
        let states = g.stack_rows(rows)?;
        Self::new(g, states, a)
    }
}

/// Additive attention: `q_j = v · tanh(W_a h_j + U_a s)`, `alpha = softmax(q)`,
/// `c = Σ_j alpha_j h_j`. Returns `(alpha, c)`.
pub fn attend(
    g: &mut Graph<'_>,
    memory: &AttentionMemory,
    state: Var,
    a: &AttentionParams,
) -> Result<(Var, Var)> {
    let u = g.param(a.u_a);
    let v = g.param(a.v_a);
    let su = g.matmul(state, u)?;
    let pre = g.add(memory.projected, su)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, v)?;
    let alpha = g.softmax(scores)?;
    let context = g.matmul(alpha, memory.states)?;
    Ok((alpha, context))
}

/// The output network: one tanh hidden layer whose width equals the
/// embedding width, followed by the transposed embedding table and a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputNetParams {
    pub hidden: Linear,
    pub bias: ParamId,
}

impl OutputNetParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        input: usize,
        emb: &EmbeddingParams,
    ) -> Result<Self> {
        let hidden = Linear::register(store, init, &format!("{prefix}/hidden"), input, emb.dim)?;
        let bias = add_param(store, init, format!("{prefix}/bias"), &[emb.vocab])?;
        Ok(OutputNetParams { hidden, bias })
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        input: usize,
        emb: &EmbeddingParams,
    ) -> Result<Self> {
        let hidden = Linear::bind(store, &format!("{prefix}/hidden"), input, emb.dim)?;
        let bias = lookup(store, format!("{prefix}/bias"))?;
        expect_shape(store, bias, &[emb.vocab])?;
        Ok(OutputNetParams { hidden, bias })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.ids();
        ids.push(self.bias);
        ids
    }
}

/// Vocabulary logits `E · tanh([c, s] · W + b) + bias`.
pub fn output_logits(
    g: &mut Graph<'_>,
    context: Var,
    state: Var,
    out: &OutputNetParams,
    emb: &EmbeddingParams,
) -> Result<Var> {
    let cs = g.concat(&[context, state])?;
    if g.shape(cs) != [out.hidden.input] {
        return Err(Error::shape(
            "output_logits",
            &[g.shape(context), g.shape(state), &[out.hidden.input]],
        ));
    }
    let pre = out.hidden.apply(g, cs)?;
    let h = g.tanh(pre);
    let table = g.param(emb.table);
    let logits = g.matmul(table, h)?;
    let bias = g.param(out.bias);
    g.add(logits, bias)
}

/// Result of a (possibly multi-layer) bidirectional encoder pass.
#[derive(Clone, Debug)]
pub struct BidirEncoding {
    /// Top-layer states `[T, 2 * hidden]`; row j is `[forward_j, backward_j]`.
    pub states: Var,
    /// Per layer, `[forward_{T-1}, backward_0]`.
    pub finals: Vec<Var>,
}

pub fn encode_bidir(
    g: &mut Graph<'_>,
    ids: &[usize],
    layers: &[(GruParams, GruParams)],
    emb: &EmbeddingParams,
) -> Result<BidirEncoding> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
    }
    let mut x = emb.lookup(g, ids)?;
    let mut finals = Vec::with_capacity(layers.len());
    for (fwd, bwd) in layers {
        let f = gru_sequence(g, x, fwd, false)?;
        let b = gru_sequence(g, x, bwd, true)?;
        let rows = f
            .iter()
            .zip(&b)
            .map(|(&fj, &bj)| g.concat(&[fj, bj]))
            .collect::<Result<Vec<_>>>()?;
        finals.push(g.concat(&[*f.last().unwrap(), b[0]])?);
        x = g.stack_rows(&rows)?;
    }
    Ok(BidirEncoding { states: x, finals })
}
