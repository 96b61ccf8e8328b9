//! Pre-norm transformer encoder over `[observation, history..., candidates...]`
//! tokens with a per-candidate policy head and a value head on the
//! observation token. Candidates carry no positional signal, so the logits
//! are equivariant to candidate order. Masked candidates are excluded as
//! attention keys and receive a logit of `-inf`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::PolicyInput;
use super::PolicyError;
use crate::edit::NUM_ACTION_KINDS;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub cand_dim: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub history_capacity: usize,
}

impl NetConfig {
    /// Three layers, three heads, 48 latent dimensions.
    pub fn new(obs_dim: usize, cand_dim: usize, history_capacity: usize) -> Self {
        Self {
            obs_dim,
            cand_dim,
            latent_dim: 48,
            heads: 3,
            layers: 3,
            ffn_dim: 4 * 48,
            history_capacity,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(PolicyError::ShapeError(format!(
                "latent dim {} not divisible into {} heads",
                self.latent_dim, self.heads
            )));
        }
        if self.obs_dim == 0 || self.cand_dim == 0 || self.ffn_dim == 0 {
            return Err(PolicyError::ShapeError("zero-sized network dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    obs_w: usize,
    obs_b: usize,
    cand_w: usize,
    cand_b: usize,
    family: usize,
    history: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    policy: HeadIdx,
    value: HeadIdx,
    shapes: Vec<(String, usize, usize)>,
}

impl Layout {
    fn new(c: &NetConfig) -> Self {
        let mut shapes = Vec::new();
        let mut add = |name: String, r: usize, cols: usize| {
            shapes.push((name, r, cols));
            shapes.len() - 1
        };
        let d = c.latent_dim;
        let obs_w = add("obs.w".into(), c.obs_dim, d);
        let obs_b = add("obs.b".into(), 1, d);
        let cand_w = add("cand.w".into(), c.cand_dim, d);
        let cand_b = add("cand.b".into(), 1, d);
        let family = add("family_embedding".into(), NUM_ACTION_KINDS, d);
        let history = add("history_embedding".into(), c.history_capacity.max(1), d);
        let layers = (0..c.layers)
            .map(|l| {
                let mut p = |n: &str, r, cols| add(format!("layer{l}.{n}"), r, cols);
                LayerIdx {
                    ln1_g: p("ln1.g", 1, d),
                    ln1_b: p("ln1.b", 1, d),
                    wq: p("attn.wq", d, d),
                    bq: p("attn.bq", 1, d),
                    wk: p("attn.wk", d, d),
                    bk: p("attn.bk", 1, d),
                    wv: p("attn.wv", d, d),
                    bv: p("attn.bv", 1, d),
                    wo: p("attn.wo", d, d),
                    bo: p("attn.bo", 1, d),
                    ln2_g: p("ln2.g", 1, d),
                    ln2_b: p("ln2.b", 1, d),
                    w1: p("ffn.w1", d, c.ffn_dim),
                    b1: p("ffn.b1", 1, c.ffn_dim),
                    w2: p("ffn.w2", c.ffn_dim, d),
                    b2: p("ffn.b2", 1, d),
                }
            })
            .collect();
        let lnf_g = add("final_ln.g".into(), 1, d);
        let lnf_b = add("final_ln.b".into(), 1, d);
        let mut head = |prefix: &str| HeadIdx {
            w1: add(format!("{prefix}.w1"), d, d),
            b1: add(format!("{prefix}.b1"), 1, d),
            w2: add(format!("{prefix}.w2"), d, 1),
            b2: add(format!("{prefix}.b2"), 1, 1),
        };
        let policy = head("policy_head");
        let value = head("value_head");
        Self {
            obs_w,
            obs_b,
            cand_w,
            cand_b,
            family,
            history,
            layers,
            lnf_g,
            lnf_b,
            policy,
            value,
            shapes,
        }
    }
}

/// All network weights, stored as a list of named 2-D tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: NetConfig,
    layout: Layout,
    tensors: Vec<Array2<f64>>,
}

/// Gradients with the same tensor layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl PolicyParams {
    /// Uniform fan-in scaled initialization; output layers of both heads are
    /// scaled down so the initial policy is close to uniform.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: Vec<Array2<f64>> = layout
            .shapes
            .iter()
            .map(|(name, r, c)| {
                if name.ends_with(".g") {
                    Array2::ones((*r, *c))
                } else if name.contains(".b") {
                    Array2::zeros((*r, *c))
                } else {
                    let bound = if name.contains("embedding") {
                        0.1
                    } else {
                        1.0 / (*r as f64).sqrt()
                    };
                    Array2::from_shape_fn((*r, *c), |_| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        for idx in [layout.policy.w2, layout.value.w2] {
            tensors[idx].mapv_inplace(|v| v * 0.01);
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors in layout order.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Array2<f64>>) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.shapes.len() {
            return Err(PolicyError::ShapeError(format!(
                "{} tensors for a layout of {}",
                tensors.len(),
                layout.shapes.len()
            )));
        }
        for (t, (name, r, c)) in tensors.iter().zip(&layout.shapes) {
            if t.dim() != (*r, *c) {
                return Err(PolicyError::ShapeError(format!(
                    "tensor {name} has shape {:?}, expected ({r}, {c})",
                    t.dim()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.shapes.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    fn t(&self, idx: usize) -> &Array2<f64> {
        &self.tensors[idx]
    }

    fn row(&self, idx: usize) -> ArrayView2<'_, f64> {
        self.tensors[idx].view()
    }

    fn check_input(&self, input: &PolicyInput) -> Result<(), PolicyError> {
        let c = &self.config;
        let shape = |m: String| Err(PolicyError::ShapeError(m));
        if input.num_candidates() == 0 {
            return Err(PolicyError::NoActions);
        }
        if input.observation.len() != c.obs_dim {
            return shape(format!(
                "observation has {} dims, network expects {}",
                input.observation.len(),
                c.obs_dim
            ));
        }
        if input.candidates.ncols() != c.cand_dim {
            return shape(format!(
                "candidate features have {} dims, network expects {}",
                input.candidates.ncols(),
                c.cand_dim
            ));
        }
        let k = input.num_candidates();
        if input.kinds.len() != k || input.mask.len() != k {
            return shape(format!(
                "{k} candidates with {} kinds and {} mask entries",
                input.kinds.len(),
                input.mask.len()
            ));
        }
        if input.history.len() > c.history_capacity {
            return shape(format!(
                "history of {} exceeds capacity {}",
                input.history.len(),
                c.history_capacity
            ));
        }
        let bad_kind = input
            .kinds
            .iter()
            .chain(input.history.entries().iter().map(|e| &e.kind))
            .any(|&k| k >= NUM_ACTION_KINDS);
        if bad_kind {
            return shape("action kind out of range".into());
        }
        if input
            .history
            .entries()
            .iter()
            .any(|e| e.features.len() != c.cand_dim)
        {
            return shape("history entry feature dimension mismatch".into());
        }
        if !input.mask.iter().any(|&m| m) {
            return Err(PolicyError::NoActions);
        }
        Ok(())
    }

    /// Logits (masked entries are `-inf`) and the value estimate.
    pub fn forward(&self, input: &PolicyInput) -> Result<ForwardOutput, PolicyError> {
        self.check_input(input)?;
        Ok(self.run(input).0)
    }

    /// Like [`forward`](Self::forward), also recording activations for
    /// [`backward`](Self::backward).
    pub fn forward_recorded(
        &self,
        input: &PolicyInput,
        tape: &mut Tape,
    ) -> Result<ForwardOutput, PolicyError> {
        self.check_input(input)?;
        let (out, data) = self.run(input);
        tape.data = Some(Box::new(data));
        Ok(out)
    }

    fn run(&self, input: &PolicyInput) -> (ForwardOutput, TapeData) {
        let c = &self.config;
        let lay = &self.layout;
        let d = c.latent_dim;
        let hist = input.history.entries();
        let h = hist.len();
        let k = input.num_candidates();
        let seq = 1 + h + k;

        // token features for history and candidates, in sequence order
        let mut feats = Array2::<f64>::zeros((h + k, c.cand_dim));
        let mut kinds = Vec::with_capacity(h + k);
        for (i, e) in hist.iter().enumerate() {
            feats.row_mut(i).assign(&Array1::from(e.features.clone()));
            kinds.push(e.kind);
        }
        feats.slice_mut(s![h.., ..]).assign(&input.candidates);
        kinds.extend_from_slice(&input.kinds);

        let mut x = Array2::<f64>::zeros((seq, d));
        let obs = Array1::from(input.observation.clone());
        let obs_tok = obs.dot(self.t(lay.obs_w)) + self.t(lay.obs_b).row(0);
        x.row_mut(0).assign(&obs_tok);
        let proj = feats.dot(self.t(lay.cand_w)) + &self.row(lay.cand_b);
        x.slice_mut(s![1.., ..]).assign(&proj);
        for (i, &kind) in kinds.iter().enumerate() {
            let mut r = x.row_mut(1 + i);
            r += &self.t(lay.family).row(kind);
            if i < h {
                r += &self.t(lay.history).row(i);
            }
        }

        let mut key_valid = vec![true; seq];
        key_valid[1 + h..].copy_from_slice(&input.mask);

        let mut layers = Vec::with_capacity(c.layers);
        for li in &lay.layers {
            let (a, ln1) = ln_forward(&x, self.t(li.ln1_g), self.t(li.ln1_b));
            let q = a.dot(self.t(li.wq)) + &self.row(li.bq);
            let kk = a.dot(self.t(li.wk)) + &self.row(li.bk);
            let v = a.dot(self.t(li.wv)) + &self.row(li.bv);
            let (o, probs) = attention(&q, &kk, &v, &key_valid, c.heads);
            let y = o.dot(self.t(li.wo)) + &self.row(li.bo);
            let x2 = &x + &y;
            let (b, ln2) = ln_forward(&x2, self.t(li.ln2_g), self.t(li.ln2_b));
            let hpre = b.dot(self.t(li.w1)) + &self.row(li.b1);
            let hact = hpre.mapv(gelu);
            let z = hact.dot(self.t(li.w2)) + &self.row(li.b2);
            x = &x2 + &z;
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k: kk,
                v,
                probs,
                o,
                ln2,
                b,
                hpre,
                hact,
            });
        }
        let (f, lnf) = ln_forward(&x, self.t(lay.lnf_g), self.t(lay.lnf_b));

        let cand_f = f.slice(s![1 + h.., ..]);
        let pol = &lay.policy;
        let pol_t = (cand_f.dot(self.t(pol.w1)) + &self.row(pol.b1)).mapv(f64::tanh);
        let raw_logits = pol_t.dot(self.t(pol.w2)).column(0).to_owned() + self.t(pol.b2)[[0, 0]];
        let logits = raw_logits
            .iter()
            .zip(&input.mask)
            .map(|(&z, &valid)| if valid { z } else { f64::NEG_INFINITY })
            .collect();

        let val = &lay.value;
        let obs_f = f.row(0);
        let val_t = (obs_f.dot(self.t(val.w1)) + self.t(val.b1).row(0)).mapv(f64::tanh);
        let value = val_t.dot(&self.t(val.w2).column(0)) + self.t(val.b2)[[0, 0]];

        let data = TapeData {
            obs,
            feats,
            kinds,
            hist_len: h,
            key_valid,
            mask: input.mask.clone(),
            layers,
            lnf,
            f,
            pol_t,
            val_t,
        };
        (ForwardOutput { logits, value }, data)
    }

    /// Back-propagates `d_logits` (one entry per candidate; masked entries
    /// are ignored) and `d_value` through the recorded pass.
    pub fn backward(
        &self,
        tape: &Tape,
        d_logits: &[f64],
        d_value: f64,
    ) -> Result<Gradients, PolicyError> {
        let data = tape.data.as_deref().ok_or(PolicyError::NoTape)?;
        let c = &self.config;
        let lay = &self.layout;
        let h = data.hist_len;
        let k = data.mask.len();
        let seq = 1 + h + k;
        if d_logits.len() != k {
            return Err(PolicyError::ShapeError(format!(
                "{} logit gradients for {k} candidates",
                d_logits.len()
            )));
        }
        let mut g = self.zero_gradients();
        let mut df = Array2::<f64>::zeros((seq, c.latent_dim));

        // policy head
        let dz = Array1::from_iter(
            d_logits
                .iter()
                .zip(&data.mask)
                .map(|(&v, &valid)| if valid { v } else { 0.0 }),
        );
        let pol = &lay.policy;
        let dz_col = dz.view().insert_axis(Axis(1));
        g.tensors[pol.w2] += &data.pol_t.t().dot(&dz_col);
        g.tensors[pol.b2][[0, 0]] += dz.sum();
        let dt = dz_col.dot(&self.t(pol.w2).t());
        let du = &dt * &data.pol_t.mapv(|t| 1.0 - t * t);
        let cand_f = data.f.slice(s![1 + h.., ..]);
        g.tensors[pol.w1] += &cand_f.t().dot(&du);
        g.tensors[pol.b1] += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
        df.slice_mut(s![1 + h.., ..]).assign(&du.dot(&self.t(pol.w1).t()));

        // value head
        let val = &lay.value;
        let obs_f = data.f.row(0);
        g.tensors[val.w2]
            .column_mut(0)
            .scaled_add(d_value, &data.val_t);
        g.tensors[val.b2][[0, 0]] += d_value;
        let dvu = self.t(val.w2).column(0).mapv(|w| w * d_value) * data.val_t.mapv(|t| 1.0 - t * t);
        let outer = obs_f
            .insert_axis(Axis(1))
            .dot(&dvu.view().insert_axis(Axis(0)));
        g.tensors[val.w1] += &outer;
        g.tensors[val.b1].row_mut(0).scaled_add(1.0, &dvu);
        let dobs_f = self.t(val.w1).dot(&dvu);
        df.row_mut(0).scaled_add(1.0, &dobs_f);

        let mut dx = ln_backward(&df, &data.lnf, self.t(lay.lnf_g), &mut g, lay.lnf_g, lay.lnf_b);

        for (li, cache) in lay.layers.iter().zip(&data.layers).rev() {
            // feed-forward block
            let dzf = &dx;
            g.tensors[li.w2] += &cache.hact.t().dot(dzf);
            g.tensors[li.b2] += &dzf.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dhact = dzf.dot(&self.t(li.w2).t());
            let dhpre = &dhact * &cache.hpre.mapv(gelu_grad);
            g.tensors[li.w1] += &cache.b.t().dot(&dhpre);
            g.tensors[li.b1] += &dhpre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let db = dhpre.dot(&self.t(li.w1).t());
            let dx2 = &dx + &ln_backward(&db, &cache.ln2, self.t(li.ln2_g), &mut g, li.ln2_g, li.ln2_b);

            // attention block
            g.tensors[li.wo] += &cache.o.t().dot(&dx2);
            g.tensors[li.bo] += &dx2.sum_axis(Axis(0)).insert_axis(Axis(0));
            let do_ = dx2.dot(&self.t(li.wo).t());
            let (dq, dk, dv) = attention_backward(&do_, cache, c.heads);
            g.tensors[li.wq] += &cache.a.t().dot(&dq);
            g.tensors[li.bq] += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
            g.tensors[li.wk] += &cache.a.t().dot(&dk);
            g.tensors[li.bk] += &dk.sum_axis(Axis(0)).insert_axis(Axis(0));
            g.tensors[li.wv] += &cache.a.t().dot(&dv);
            g.tensors[li.bv] += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
            let da = dq.dot(&self.t(li.wq).t()) + dk.dot(&self.t(li.wk).t()) + dv.dot(&self.t(li.wv).t());
            dx = &dx2 + &ln_backward(&da, &cache.ln1, self.t(li.ln1_g), &mut g, li.ln1_g, li.ln1_b);
        }

        // embeddings
        let dobs_tok = dx.row(0);
        g.tensors[lay.obs_w] += &data
            .obs
            .view()
            .insert_axis(Axis(1))
            .dot(&dobs_tok.insert_axis(Axis(0)));
        g.tensors[lay.obs_b].row_mut(0).scaled_add(1.0, &dobs_tok);
        let dtok = dx.slice(s![1.., ..]);
        g.tensors[lay.cand_w] += &data.feats.t().dot(&dtok);
        g.tensors[lay.cand_b] += &dtok.sum_axis(Axis(0)).insert_axis(Axis(0));
        for (i, &kind) in data.kinds.iter().enumerate() {
            g.tensors[lay.family].row_mut(kind).scaled_add(1.0, &dtok.row(i));
            if i < h {
                g.tensors[lay.history].row_mut(i).scaled_add(1.0, &dtok.row(i));
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    hpre: Array2<f64>,
    hact: Array2<f64>,
}

#[derive(Debug, Clone)]
struct TapeData {
    obs: Array1<f64>,
    feats: Array2<f64>,
    kinds: Vec<usize>,
    hist_len: usize,
    #[allow(dead_code)]
    key_valid: Vec<bool>,
    mask: Vec<bool>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Array2<f64>,
    pol_t: Array2<f64>,
    val_t: Array1<f64>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    data: Option<Box<TapeData>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.data.is_some()
    }
}

fn ln_forward(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array2<f64>,
    grads: &mut Gradients,
    gain_idx: usize,
    bias_idx: usize,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    grads.tensors[gain_idx] += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.tensors[bias_idx] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let mean_d = dxhat.sum_axis(Axis(1)) / d;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_d.view().insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
    dx * &cache.rstd.view().insert_axis(Axis(1))
}

fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    key_valid: &[bool],
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (seq, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((seq, d));
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for mut row in p.rows_mut() {
            let max = row
                .iter()
                .zip(key_valid)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &ok) in row.iter_mut().zip(key_valid) {
                *v = if ok { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row /= sum;
        }
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(
    d_out: &Array2<f64>,
    cache: &LayerCache,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (seq, d) = d_out.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((seq, d));
    let mut dk = Array2::zeros((seq, d));
    let mut dv = Array2::zeros((seq, d));
    for (head, p) in cache.probs.iter().enumerate() {
        let cols = s![.., head * dh..(head + 1) * dh];
        let doh = d_out.slice(cols);
        let dp = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let ds = (dp - &row_dot.view().insert_axis(Axis(1))) * p * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    (dq, dk, dv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::input::{ActionHistory, HistoryEntry};

    pub(crate) fn tiny_config() -> NetConfig {
        NetConfig {
            obs_dim: 5,
            cand_dim: 4,
            latent_dim: 8,
            heads: 2,
            layers: 3,
            ffn_dim: 16,
            history_capacity: 3,
        }
    }

    fn input(seed: u64, k: usize, masked: &[usize], hist: usize) -> PolicyInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = tiny_config();
        let mut history = ActionHistory::new(c.history_capacity);
        for i in 0..hist {
            history.push(HistoryEntry {
                kind: i % NUM_ACTION_KINDS,
                features: (0..c.cand_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            });
        }
        PolicyInput {
            observation: (0..c.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            candidates: Array2::from_shape_fn((k, c.cand_dim), |_| rng.gen_range(-1.0..1.0)),
            kinds: (0..k).map(|i| (i * 2) % NUM_ACTION_KINDS).collect(),
            history,
            mask: (0..k).map(|i| !masked.contains(&i)).collect(),
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_logits_are_negative_infinity() {
        let p = PolicyParams::init(tiny_config(), 1).unwrap();
        let out = p.forward(&input(2, 5, &[1, 3], 2)).unwrap();
        assert_eq!(out.logits[1], f64::NEG_INFINITY);
        assert_eq!(out.logits[3], f64::NEG_INFINITY);
        assert!(out.logits[0].is_finite() && out.value.is_finite());
    }

    #[test]
    fn empty_or_fully_masked_catalog() {
        let p = PolicyParams::init(tiny_config(), 1).unwrap();
        let mut inp = input(2, 2, &[], 0);
        inp.candidates = Array2::zeros((0, 4));
        inp.kinds.clear();
        inp.mask.clear();
        assert_eq!(p.forward(&inp), Err(PolicyError::NoActions));
        assert_eq!(p.forward(&input(2, 2, &[0, 1], 0)), Err(PolicyError::NoActions));
    }

    #[test]
    fn shape_errors() {
        let p = PolicyParams::init(tiny_config(), 1).unwrap();
        let mut inp = input(2, 3, &[], 0);
        inp.observation.pop();
        assert!(matches!(p.forward(&inp), Err(PolicyError::ShapeError(_))));
        let mut inp = input(2, 3, &[], 0);
        inp.kinds[0] = NUM_ACTION_KINDS;
        assert!(matches!(p.forward(&inp), Err(PolicyError::ShapeError(_))));
    }

    #[test]
    fn backward_requires_tape() {
        let p = PolicyParams::init(tiny_config(), 1).unwrap();
        assert_eq!(p.backward(&Tape::new(), &[0.0], 0.0), Err(PolicyError::NoTape));
    }

    #[test]
    fn candidate_permutation_permutes_logits() {
        let p = PolicyParams::init(tiny_config(), 7).unwrap();
        let inp = input(3, 6, &[4], 2);
        let base = p.forward(&inp).unwrap();
        let mut swapped = inp.clone();
        let perm = [5, 2, 1, 0, 4, 3];
        for (new, &old) in perm.iter().enumerate() {
            swapped.candidates.row_mut(new).assign(&inp.candidates.row(old));
            swapped.kinds[new] = inp.kinds[old];
            swapped.mask[new] = inp.mask[old];
        }
        let out = p.forward(&swapped).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let (a, b) = (out.logits[new], base.logits[old]);
            assert!(a == b || (a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((out.value - base.value).abs() < 1e-12);
    }

    #[test]
    fn value_ignores_masked_candidates() {
        let p = PolicyParams::init(tiny_config(), 7).unwrap();
        let inp = input(4, 5, &[1, 2], 1);
        let base = p.forward(&inp).unwrap();
        let mut changed = inp.clone();
        changed.candidates.row_mut(1).fill(9.0);
        changed.candidates.row_mut(2).fill(-3.0);
        let out = p.forward(&changed).unwrap();
        assert_eq!(out.value, base.value);
        for i in [0, 3, 4] {
            assert_eq!(out.logits[i], base.logits[i]);
        }
    }

    #[test]
    fn initial_policy_is_near_uniform_on_identical_candidates() {
        let p = PolicyParams::init(NetConfig::new(5, 4, 8), 11).unwrap();
        let mut inp = input(5, 20, &[], 0);
        for mut r in inp.candidates.rows_mut() {
            r.assign(&ndarray::arr1(&[0.3, -0.2, 0.5, 0.1]));
        }
        inp.kinds = vec![3; 20];
        let out = p.forward(&inp).unwrap();
        let first = out.logits[0];
        assert!(out.logits.iter().all(|&z| (z - first).abs() < 1e-12));
        // distinct candidates: still close to uniform at initialization
        let out = p.forward(&input(5, 20, &[], 0)).unwrap();
        let spread = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - out.logits.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.1, "logit spread {spread}");
    }

    #[test]
    fn zero_and_scaled_upstream_gradients() {
        let p = PolicyParams::init(tiny_config(), 3).unwrap();
        let inp = input(9, 4, &[2], 2);
        let mut tape = Tape::new();
        p.forward_recorded(&inp, &mut tape).unwrap();
        let zero = p.backward(&tape, &[0.0; 4], 0.0).unwrap();
        assert_eq!(zero.l2_norm(), 0.0);
        let g1 = p.backward(&tape, &[0.3, -0.2, 0.0, 0.7], 0.4).unwrap();
        let g2 = p.backward(&tape, &[0.6, -0.4, 0.0, 1.4], 0.8).unwrap();
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = PolicyParams::init(tiny_config(), 3).unwrap();
        // one history entry: history rows 1.. unused; kinds 0 and 2 only
        let mut inp = input(9, 2, &[], 1);
        inp.kinds = vec![0, 2];
        let mut tape = Tape::new();
        p.forward_recorded(&inp, &mut tape).unwrap();
        let g = p.backward(&tape, &[0.5, -0.5], 1.0).unwrap();
        let hist = &g.tensors[p.layout.history];
        assert!(hist.row(0).iter().any(|&v| v != 0.0));
        assert!(hist.slice(s![1.., ..]).iter().all(|&v| v == 0.0));
        let fam = &g.tensors[p.layout.family];
        for kind in [1, 3, 4] {
            assert!(fam.row(kind).iter().all(|&v| v == 0.0));
        }
    }
}
