//! The tiny multimodal model: a frozen linear vision stub, a two-layer GeLU
//! connector, and a pre-norm decoder-only transformer with tied output head.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::graph::{log_softmax_rows, softmax_rows};
use crate::gradcore::{Grads, Graph, Tensor, Var};
use crate::lora::AdapterSet;
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::synthdata::{MMSample, WordClass};

/// Name of the frozen vision stub weight (`k·d_visual × d_attr`).
pub const VISION_STUB: &str = "vision_stub";
pub const CONNECTOR_PREFIX: &str = "connector.";

/// Finite stand-in for −∞ in attention masks; `exp` of it underflows to exactly 0.
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of visual slots.
    pub k: usize,
    pub d_visual: usize,
    pub d_attr: usize,
    pub max_seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            k: 4,
            d_visual: 16,
            d_attr: 21,
            max_seq_len: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("k", self.k),
            ("d_visual", self.d_visual),
            ("d_attr", self.d_attr),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dims.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len <= self.k {
            return Err(Error::Config("max_seq_len must exceed the visual slot count".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named tensor with its trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered named parameters. Insertion order fixes checkpoint layout and the
/// order of gradient reductions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if name == VISION_STUB && trainable {
            return Err(Error::Invalid("the vision stub is never trainable".into()));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter `{name}` already exists")));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets every trainable flag from `pred`. The vision stub stays frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = name != VISION_STUB && pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }
}

pub fn is_connector(name: &str) -> bool {
    name.starts_with(CONNECTOR_PREFIX)
}

pub fn is_lora(name: &str) -> bool {
    name.starts_with(crate::lora::LORA_PREFIX)
}

/// Language-model weights: everything except the connector, the stub, and adapters.
pub fn is_llm(name: &str) -> bool {
    !is_connector(name) && !is_lora(name) && name != VISION_STUB
}

#[derive(Clone, Debug)]
struct LayerNames {
    ln1_g: String,
    ln1_b: String,
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    ln2_g: String,
    ln2_b: String,
    fc1_w: String,
    fc1_b: String,
    fc2_w: String,
    fc2_b: String,
}

impl LayerNames {
    fn new(l: usize) -> Self {
        let p = |s: &str| format!("layers.{l}.{s}");
        Self {
            ln1_g: p("ln1.gamma"),
            ln1_b: p("ln1.beta"),
            wq: p("attn.wq"),
            wk: p("attn.wk"),
            wv: p("attn.wv"),
            wo: p("attn.wo"),
            ln2_g: p("ln2.gamma"),
            ln2_b: p("ln2.beta"),
            fc1_w: p("mlp.fc1.weight"),
            fc1_b: p("mlp.fc1.bias"),
            fc2_w: p("mlp.fc2.weight"),
            fc2_b: p("mlp.fc2.bias"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    Multimodal,
    TextOnly,
    /// Text preceded by unpositioned slots holding the embeddings of the
    /// caption's visual words.
    TextWithContext,
}

/// Token-level input for one forward pass. Visual slots (if any) come first;
/// text positions always carry position ids `0..m`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput<T> {
    pub attrs: Option<Vec<T>>,
    /// Token ids embedded into the leading slots when there is no image.
    pub context_ids: Vec<usize>,
    pub n_visual: usize,
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl<T> AssembledInput<T> {
    pub fn seq_len(&self) -> usize {
        self.n_visual + self.token_ids.len()
    }

    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOpts {
    /// Prevent text positions from attending to visual slots.
    pub block_visual: bool,
}

/// Next-token logits and probabilities at each text position (`m × vocab`).
#[derive(Clone, Debug)]
pub struct LmOutput<T: Real> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Binds named parameters as graph leaves on first use.
pub struct Binder {
    vars: IndexMap<String, Var>,
    track: bool,
}

impl Binder {
    /// `track = false` binds everything as constants (no gradients anywhere).
    pub fn new(track: bool) -> Self {
        Self {
            vars: IndexMap::new(),
            track,
        }
    }

    pub fn bind<'a, T: Real>(&mut self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = store.param(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = g.param(&p.tensor, self.track && p.trainable)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every trainable parameter in `store`; unbound ones are zero.
    pub fn collect_grads<T: Real>(&self, grads: &mut Grads<T>, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Model parameters, dimensions, and attached adapters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub dims: ModelDims,
    pub params: ParamStore<T>,
    pub adapters: AdapterSet,
    layer_names: Vec<LayerNames>,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.params == other.params && self.adapters == other.adapters
    }
}

impl<T: Real> Model<T> {
    /// Seeded initialization. The LM, connector, and stub draw from separate
    /// child streams, so resizing one never changes another.
    pub fn init(dims: ModelDims, stream: &SeedStream) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let mut params = ParamStore::new();
        let mut lm = stream.child("lm").rng();
        params.insert("tok_emb", Tensor::randn(&[dims.vocab_size, d], 0.02, &mut lm), true)?;
        params.insert("pos_emb", Tensor::randn(&[dims.max_seq_len, d], 0.02, &mut lm), true)?;
        let proj_std = 0.02 / ((2 * dims.n_layers) as f64).sqrt();
        for l in 0..dims.n_layers {
            let n = LayerNames::new(l);
            params.insert(n.ln1_g, Tensor::full(&[d], T::one()), true)?;
            params.insert(n.ln1_b, Tensor::zeros(&[d]), true)?;
            params.insert(n.wq, Tensor::randn(&[d, d], 0.02, &mut lm), true)?;
            params.insert(n.wk, Tensor::randn(&[d, d], 0.02, &mut lm), true)?;
            params.insert(n.wv, Tensor::randn(&[d, d], 0.02, &mut lm), true)?;
            params.insert(n.wo, Tensor::randn(&[d, d], proj_std, &mut lm), true)?;
            params.insert(n.ln2_g, Tensor::full(&[d], T::one()), true)?;
            params.insert(n.ln2_b, Tensor::zeros(&[d]), true)?;
            params.insert(n.fc1_w, Tensor::randn(&[dims.d_ff, d], 0.02, &mut lm), true)?;
            params.insert(n.fc1_b, Tensor::zeros(&[dims.d_ff]), true)?;
            params.insert(n.fc2_w, Tensor::randn(&[d, dims.d_ff], proj_std, &mut lm), true)?;
            params.insert(n.fc2_b, Tensor::zeros(&[d]), true)?;
        }
        params.insert("final_ln.gamma", Tensor::full(&[d], T::one()), true)?;
        params.insert("final_ln.beta", Tensor::zeros(&[d]), true)?;

        let mut conn = stream.child("connector").rng();
        let fc1_std = 1.0 / (dims.d_visual as f64).sqrt();
        params.insert(
            "connector.fc1.weight",
            Tensor::randn(&[d, dims.d_visual], fc1_std, &mut conn),
            true,
        )?;
        params.insert("connector.fc1.bias", Tensor::zeros(&[d]), true)?;
        params.insert("connector.fc2.weight", Tensor::randn(&[d, d], 0.02, &mut conn), true)?;
        params.insert("connector.fc2.bias", Tensor::zeros(&[d]), true)?;

        let mut stub = stream.child("vision_stub").rng();
        params.insert(
            VISION_STUB,
            Tensor::randn(&[dims.k * dims.d_visual, dims.d_attr], 1.0, &mut stub),
            false,
        )?;
        Ok(Self::from_parts(dims, params, AdapterSet::default()))
    }

    pub fn from_parts(dims: ModelDims, params: ParamStore<T>, adapters: AdapterSet) -> Self {
        Self {
            layer_names: (0..dims.n_layers).map(LayerNames::new).collect(),
            dims,
            params,
            adapters,
        }
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, p) in self.params.iter() {
            params
                .insert(name, p.tensor.cast(), p.trainable)
                .expect("names are unique");
        }
        Model::from_parts(self.dims, params, self.adapters.clone())
    }

    /// Names of the 2-D weights in the given attention/MLP family
    /// (`wq`, `wk`, `wv`, `wo`, `fc1`, `fc2`) across all layers.
    pub fn weight_family(&self, family: &str) -> Result<Vec<String>> {
        self.layer_names
            .iter()
            .map(|n| match family {
                "wq" => Ok(n.wq.clone()),
                "wk" => Ok(n.wk.clone()),
                "wv" => Ok(n.wv.clone()),
                "wo" => Ok(n.wo.clone()),
                "fc1" => Ok(n.fc1_w.clone()),
                "fc2" => Ok(n.fc2_w.clone()),
                other => Err(Error::Invalid(format!("unknown weight family `{other}`"))),
            })
            .collect()
    }

    /// Frozen stub: `attrs (d_attr)` → `k × d_visual`.
    pub fn encode_image(&self, attrs: &[T]) -> Result<Tensor<T>> {
        let d = self.dims;
        if attrs.len() != d.d_attr {
            return Err(Error::shape(
                "encode_image",
                format!("attrs of length {}, expected {}", attrs.len(), d.d_attr),
            ));
        }
        if attrs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "encode_image".into(),
            });
        }
        let stub = self.params.get(VISION_STUB)?;
        let out = crate::gradcore::kernels::matmul_bt(attrs, stub.data(), 1, d.d_attr, d.k * d.d_visual);
        Tensor::new(vec![d.k, d.d_visual], out)
    }

    fn connect_graph<'a>(&'a self, g: &mut Graph<'a, T>, b: &mut Binder, visual: Var) -> Result<Var> {
        let w1 = b.bind(g, &self.params, "connector.fc1.weight")?;
        let b1 = b.bind(g, &self.params, "connector.fc1.bias")?;
        let w2 = b.bind(g, &self.params, "connector.fc2.weight")?;
        let b2 = b.bind(g, &self.params, "connector.fc2.bias")?;
        let h = g.matmul_bt(visual, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul_bt(h, w2)?;
        g.add_row(h, b2)
    }

    /// Connector applied per slot: affine → GeLU → affine.
    pub fn connect(&self, visual: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.dims;
        if visual.shape() != [d.k, d.d_visual] {
            return Err(Error::shape(
                "connect",
                format!("expected [{}, {}], got {:?}", d.k, d.d_visual, visual.shape()),
            ));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(false);
        let v = g.constant(visual.clone())?;
        let out = self.connect_graph(&mut g, &mut b, v)?;
        Ok(g.value(out).clone())
    }

    /// Builds the sequence for `sample`. Text inputs are `[BOS, s₁ … s_{m-1}]`
    /// with targets `s₁ … s_m`; instruction samples mask the question targets.
    pub fn assemble(&self, sample: &MMSample, mode: AssemblyMode, bos: u32) -> Result<AssembledInput<T>> {
        let text: Vec<u32> = match (&sample.question, &sample.answer) {
            (Some(q), Some(a)) => q.iter().chain(a).copied().collect(),
            _ => sample.caption.clone(),
        };
        if text.is_empty() {
            return Err(Error::Invalid("cannot assemble an empty text sequence".into()));
        }
        let m = text.len();
        let question_len = if sample.is_instruction() {
            sample.question.as_ref().map_or(0, Vec::len)
        } else {
            0
        };
        let mut context_ids = Vec::new();
        let (attrs, n_visual) = match mode {
            AssemblyMode::Multimodal => {
                let a = sample
                    .attrs
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("multimodal assembly needs image attrs".into()))?;
                (Some(a.iter().map(|&x| T::lit(f64::from(x))).collect()), self.dims.k)
            }
            AssemblyMode::TextOnly => (None, 0),
            AssemblyMode::TextWithContext => {
                context_ids = sample
                    .words()
                    .filter(|(_, s)| s.label == WordClass::Visual)
                    .flat_map(|(ids, _)| ids.iter().map(|&t| t as usize))
                    .collect();
                (None, context_ids.len())
            }
        };
        if n_visual + m > self.dims.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} positions exceeds max_seq_len {}",
                n_visual + m,
                self.dims.max_seq_len
            )));
        }
        let token_ids: Vec<usize> = std::iter::once(bos)
            .chain(text[..m - 1].iter().copied())
            .map(|t| t as usize)
            .collect();
        if let Some(bad) = text.iter().chain([&bos]).find(|&&t| t as usize >= self.dims.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        if let Some(&bad) = context_ids.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        Ok(AssembledInput {
            attrs,
            context_ids,
            n_visual,
            token_ids,
            position_ids: (0..m).collect(),
            targets: text.iter().map(|&t| t as usize).collect(),
            loss_mask: (0..m).map(|j| j >= question_len).collect(),
        })
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a, T>, b: &mut Binder, x: Var, weight: &str) -> Result<Var> {
        let w = b.bind(g, &self.params, weight)?;
        let y = g.matmul_bt(x, w)?;
        match self.adapters.get(weight) {
            Some(adapter) => {
                let a = b.bind(g, &self.params, &adapter.a_name())?;
                let bb = b.bind(g, &self.params, &adapter.b_name())?;
                let t = g.matmul_bt(x, a)?;
                let u = g.matmul_bt(t, bb)?;
                let u = g.scale(u, T::lit(adapter.scale()))?;
                g.add(y, u)
            }
            None => Ok(y),
        }
    }

    /// Blocked (true) entries of the `n × n` attention pattern.
    pub fn attention_mask(n_visual: usize, n_text: usize, opts: ForwardOpts) -> Vec<bool> {
        let n = n_visual + n_text;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let future = j > i;
                let hidden_image = opts.block_visual && i >= n_visual && j < n_visual;
                mask[i * n + j] = future || hidden_image;
            }
        }
        mask
    }

    /// Records the forward pass; returns the text-position logits (`m × vocab`).
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        b: &mut Binder,
        input: &AssembledInput<T>,
        opts: ForwardOpts,
    ) -> Result<Var> {
        let d = self.dims;
        let m = input.text_len();
        if m == 0 || input.position_ids.len() != m || input.targets.len() != m {
            return Err(Error::Invalid("malformed assembled input".into()));
        }
        if input.position_ids.iter().any(|&p| p >= d.max_seq_len) || input.seq_len() > d.max_seq_len {
            return Err(Error::Invalid("sequence exceeds max_seq_len".into()));
        }
        let tok = b.bind(g, &self.params, "tok_emb")?;
        let pos = b.bind(g, &self.params, "pos_emb")?;
        let te = g.gather(tok, &input.token_ids)?;
        let pe = g.gather(pos, &input.position_ids)?;
        let text = g.add(te, pe)?;
        let mut x = match &input.attrs {
            Some(attrs) => {
                let visual = self.encode_image(attrs)?;
                let v = g.constant(visual)?;
                let c = self.connect_graph(g, b, v)?;
                g.concat(c, text, 0)?
            }
            None if !input.context_ids.is_empty() => {
                let c = g.gather(tok, &input.context_ids)?;
                g.concat(c, text, 0)?
            }
            None => text,
        };
        let n_visual = match &input.attrs {
            Some(_) => d.k,
            None => input.context_ids.len(),
        };
        if n_visual != input.n_visual {
            return Err(Error::Invalid("malformed assembled input".into()));
        }
        let mask = Self::attention_mask(n_visual, m, opts);
        let fill = T::lit(MASK_FILL);
        let dh = d.head_dim();
        let inv_sqrt = T::one() / T::from_usize(dh).expect("head dim").sqrt();

        for names in &self.layer_names {
            let g1 = b.bind(g, &self.params, &names.ln1_g)?;
            let b1 = b.bind(g, &self.params, &names.ln1_b)?;
            let h = g.layernorm(x, g1, b1)?;
            let q = self.linear(g, b, h, &names.wq)?;
            let k = self.linear(g, b, h, &names.wk)?;
            let v = self.linear(g, b, h, &names.wv)?;
            let mut heads: Option<Var> = None;
            for hd in 0..d.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_bt(qh, kh)?;
                let s = g.scale(s, inv_sqrt)?;
                let s = g.masked_fill(s, &mask, fill)?;
                let p = g.softmax(s)?;
                let o = g.matmul(p, vh)?;
                heads = Some(match heads {
                    Some(prev) => g.concat(prev, o, 1)?,
                    None => o,
                });
            }
            let attn = self.linear(g, b, heads.expect("n_heads ≥ 1"), &names.wo)?;
            x = g.add(x, attn)?;

            let g2 = b.bind(g, &self.params, &names.ln2_g)?;
            let b2 = b.bind(g, &self.params, &names.ln2_b)?;
            let h = g.layernorm(x, g2, b2)?;
            let h = self.linear(g, b, h, &names.fc1_w)?;
            let fb1 = b.bind(g, &self.params, &names.fc1_b)?;
            let h = g.add_row(h, fb1)?;
            let h = g.gelu(h)?;
            let h = self.linear(g, b, h, &names.fc2_w)?;
            let fb2 = b.bind(g, &self.params, &names.fc2_b)?;
            let h = g.add_row(h, fb2)?;
            x = g.add(x, h)?;
        }
        let text_rows = if n_visual > 0 { g.slice_rows(x, n_visual, m)? } else { x };
        let fg = b.bind(g, &self.params, "final_ln.gamma")?;
        let fb = b.bind(g, &self.params, "final_ln.beta")?;
        let h = g.layernorm(text_rows, fg, fb)?;
        g.matmul_bt(h, tok)
    }

    /// Untraced forward: logits and probabilities at each text position.
    pub fn forward_lm(&self, input: &AssembledInput<T>, opts: ForwardOpts) -> Result<LmOutput<T>> {
        let mut g = Graph::new();
        let mut b = Binder::new(false);
        let logits = self.forward_graph(&mut g, &mut b, input, opts)?;
        let logits = g.value(logits).clone();
        let probs = Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), logits.cols()))?;
        probs.ensure_finite("forward_lm")?;
        Ok(LmOutput { logits, probs })
    }

    /// Per-position log-probabilities of the targets (untraced).
    pub fn target_log_probs(&self, input: &AssembledInput<T>, opts: ForwardOpts) -> Result<Vec<T>> {
        let out = self.forward_lm(input, opts)?;
        let logp = log_softmax_rows(out.logits.data(), out.logits.cols());
        let v = out.logits.cols();
        Ok(input
            .targets
            .iter()
            .enumerate()
            .map(|(j, &t)| logp[j * v + t])
            .collect())
    }
}

/// Mean negative log-likelihood of `targets` over unmasked positions.
pub fn nll<T: Real>(probs: &Tensor<T>, targets: &[usize], loss_mask: &[bool]) -> Result<T> {
    if probs.ndim() != 2 || targets.len() != probs.rows() || loss_mask.len() != targets.len() {
        return Err(Error::shape(
            "nll",
            format!(
                "probs {:?}, {} targets, {} mask",
                probs.shape(),
                targets.len(),
                loss_mask.len()
            ),
        ));
    }
    let mut total = T::zero();
    let mut n = 0usize;
    for (j, (&t, &keep)) in targets.iter().zip(loss_mask).enumerate() {
        if !keep {
            continue;
        }
        if t >= probs.cols() {
            return Err(Error::Invalid(format!(
                "target {t} outside vocabulary {}",
                probs.cols()
            )));
        }
        total -= probs.at(j, t).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("nll: every position is masked".into()));
    }
    let out = total / T::from_usize(n).expect("count");
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "nll".into() });
    }
    Ok(out)
}
