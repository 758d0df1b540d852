//! The transduction network: Transformer audio encoder with a CTC head, an
//! autoregressive Transformer decoder, and (in copy mode) an LSTM entity
//! encoder with a scaled dot-product copy-attention head whose mixture
//! feeds the token prediction head.
//!
//! All forward passes are built on the autodiff [`Graph`], so the same code
//! path serves training (with gradients) and decoding (values only).

use crate::autodiff::{Graph, NodeId, ParamSet, Tensor, NEG_HUGE};
use crate::corpus::AcousticFrames;
use crate::dict::EntityDict;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::vocab::{Vocab, BLANK, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    CopyNe,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::CopyNe => "copyne",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "copyne" => Ok(Mode::CopyNe),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Width of the copy-attention projections; the dot product is scaled by
    /// 1/sqrt of this.
    pub d_attn: usize,
    pub ne_hidden: usize,
    pub ne_lstm_layers: usize,
    pub frame_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// Sinusoidal positional encodings on encoder and decoder inputs; only
    /// ever disabled for unit tests of attention equivariance.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_attn: 64,
            ne_hidden: 64,
            ne_lstm_layers: 1,
            frame_dim: 16,
            max_frames: 512,
            max_tokens: 64,
            positional: true,
        }
    }
}

impl ModelConfig {
    /// The documented full-scale preset (not the default; training it is far
    /// beyond desk scale).
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_attn: 512,
            ne_hidden: 512,
            ne_lstm_layers: 3,
            frame_dim: 80,
            max_frames: 4096,
            max_tokens: 256,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_attn", self.d_attn),
            ("ne_hidden", self.ne_hidden),
            ("ne_lstm_layers", self.ne_lstm_layers),
            ("frame_dim", self.frame_dim),
            ("max_frames", self.max_frames),
            ("max_tokens", self.max_tokens),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub mode: Mode,
    pub params: ParamSet,
}

fn xavier(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (rng.uniform() * 2.0 - 1.0) * limit).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn normal_row(rng: &mut StreamRng, n: usize, std: f64) -> Tensor {
    Tensor::row((0..n).map(|_| rng.normal() * std).collect())
}

impl Model {
    /// Build a model with freshly initialized parameters. Parameter creation
    /// order is fixed; it doubles as the checkpoint serialization order.
    pub fn new(config: ModelConfig, vocab: Vocab, mode: Mode, rng: &StreamRng) -> Result<Model> {
        config.validate()?;
        let mut r = rng.stream("init");
        let d = config.d_model;
        let v = vocab.size();
        let h = config.ne_hidden;
        let mut p = ParamSet::new();

        p.insert("frame_proj.w", xavier(&mut r, d, config.frame_dim));
        p.insert("frame_proj.b", Tensor::zeros(vec![d]));
        for i in 0..config.n_enc_layers {
            insert_attn_block(&mut p, &mut r, &format!("enc{i}"), d, false);
        }
        p.insert("enc.ln.g", Tensor::row(vec![1.0; d]));
        p.insert("enc.ln.b", Tensor::zeros(vec![d]));

        let emb_std = 1.0 / (d as f64).sqrt();
        p.insert("embed.tok", {
            let mut t = Tensor::zeros(vec![v, d]);
            for x in t.data_mut() {
                *x = r.normal() * emb_std;
            }
            t
        });
        for i in 0..config.n_dec_layers {
            insert_attn_block(&mut p, &mut r, &format!("dec{i}"), d, true);
        }
        p.insert("dec.ln.g", Tensor::row(vec![1.0; d]));
        p.insert("dec.ln.b", Tensor::zeros(vec![d]));

        p.insert("ctc.w", xavier(&mut r, v, d));
        p.insert("ctc.b", Tensor::zeros(vec![v]));

        match mode {
            Mode::Baseline => {
                p.insert("out.w", xavier(&mut r, v, d));
                p.insert("out.b", Tensor::zeros(vec![v]));
            }
            Mode::CopyNe => {
                p.insert("ne.embed", {
                    let mut t = Tensor::zeros(vec![v, d]);
                    for x in t.data_mut() {
                        *x = r.normal() * emb_std;
                    }
                    t
                });
                for l in 0..config.ne_lstm_layers {
                    let input = if l == 0 { d } else { h };
                    p.insert(&format!("ne.lstm{l}.w_ih"), xavier(&mut r, 4 * h, input));
                    p.insert(&format!("ne.lstm{l}.w_hh"), xavier(&mut r, 4 * h, h));
                    // Forget-gate bias starts at 1 so cell state survives
                    // early training.
                    let mut b = vec![0.0; 4 * h];
                    for x in b.iter_mut().skip(h).take(h) {
                        *x = 1.0;
                    }
                    p.insert(&format!("ne.lstm{l}.b"), Tensor::row(b));
                }
                p.insert("ne.z0", normal_row(&mut r, h, 1.0 / (h as f64).sqrt()));
                // The copy projections start at twice the Xavier scale so the
                // attention reaches its sharp regime within a short run.
                let mut wq = xavier(&mut r, config.d_attn, d);
                let mut wk = xavier(&mut r, config.d_attn, h);
                for v in wq.data_mut() {
                    *v *= 2.0;
                }
                for v in wk.data_mut() {
                    *v *= 2.0;
                }
                p.insert("copy.wq", wq);
                p.insert("copy.wk", wk);
                p.insert("out.w", xavier(&mut r, v, d + h));
                p.insert("out.b", Tensor::zeros(vec![v]));
            }
        }

        Ok(Model { config, vocab, mode, params: p })
    }

    pub fn frames_to_tensor(&self, frames: &AcousticFrames) -> Result<Tensor> {
        if frames.dim != self.config.frame_dim {
            return Err(Error::shape(
                "encode_audio",
                format!("frame dim {} does not match config frame_dim {}", frames.dim, self.config.frame_dim),
            ));
        }
        Tensor::matrix(frames.rows, frames.dim, frames.data.iter().map(|&x| x as f64).collect())
    }

    /// Encode T x D acoustic frames into T x d_model hidden states.
    pub fn encode_audio(&self, g: &mut Graph, frames: &Tensor) -> Result<NodeId> {
        let (t_len, dim) = frames.dims2();
        if dim != self.config.frame_dim {
            return Err(Error::shape(
                "encode_audio",
                format!("expected {} frame features, got {dim}", self.config.frame_dim),
            ));
        }
        let x = g.constant(frames.clone());
        let w = g.param("frame_proj.w")?;
        let b = g.param("frame_proj.b")?;
        let mut h = g.matmul_t(x, w, false, true)?;
        h = g.add(h, b)?;
        // Scale like the token embeddings so the frame signal is not drowned
        // by the positional encoding.
        h = g.scale(h, (self.config.d_model as f64).sqrt())?;
        if self.config.positional {
            let pe = g.constant(positional_encoding(t_len, self.config.d_model));
            h = g.add(h, pe)?;
        }
        for i in 0..self.config.n_enc_layers {
            h = self.attn_block(g, &format!("enc{i}"), h, None)?;
        }
        self.layer_norm(g, h, "enc.ln")
    }

    /// Per-frame log-distributions over the full vocabulary (blank included).
    pub fn ctc_log_probs(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let w = g.param("ctc.w")?;
        let b = g.param("ctc.b")?;
        let logits = g.matmul_t(h, w, false, true)?;
        let logits = g.add(logits, b)?;
        let lse = g.logsumexp_last(logits)?;
        let neg = g.scale(lse, -1.0)?;
        g.add(logits, neg)
    }

    /// Decoder states for a bos-prefixed history under a causal mask; one
    /// d_model-wide state per history position.
    pub fn decoder_states(&self, g: &mut Graph, history: &[u32], h_enc: NodeId) -> Result<NodeId> {
        if history.first() != Some(&BOS) {
            return Err(Error::Vocab("decoder history must begin with bos".into()));
        }
        if history.iter().any(|&t| t == BLANK) {
            return Err(Error::Vocab("decoder history must not contain blank".into()));
        }
        let ids: Vec<usize> = history.iter().map(|&t| t as usize).collect();
        let table = g.param("embed.tok")?;
        let emb = g.lookup(table, &ids)?;
        let mut x = g.scale(emb, (self.config.d_model as f64).sqrt())?;
        if self.config.positional {
            let pe = g.constant(positional_encoding(history.len(), self.config.d_model));
            x = g.add(x, pe)?;
        }
        for i in 0..self.config.n_dec_layers {
            x = self.attn_block(g, &format!("dec{i}"), x, Some(h_enc))?;
        }
        self.layer_norm(g, x, "dec.ln")
    }

    /// Encode the dictionary into entity representations: row 0 is the
    /// learned no-copy vector, row i >= 1 the final LSTM hidden state over
    /// entity i's token embeddings. Entities of equal length run through the
    /// LSTM together (the math per entity is unchanged); a final row gather
    /// restores dictionary order.
    pub fn encode_entities(&self, g: &mut Graph, dict: &EntityDict) -> Result<NodeId> {
        if self.mode != Mode::CopyNe {
            return Err(Error::Decode("entity encoder requires copy mode".into()));
        }
        let v = self.vocab.size();
        let h = self.config.ne_hidden;
        let z0 = g.param("ne.z0")?;
        if dict.len() == 1 {
            return g.concat(&[z0], 0);
        }
        let table = g.param("ne.embed")?;

        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for idx in 1..dict.len() {
            let entry = dict.entry(idx);
            if let Some(&bad) = entry.iter().find(|&&t| t as usize >= v) {
                return Err(Error::Dict(format!("entity token id {bad} outside vocabulary")));
            }
            groups.entry(entry.len()).or_default().push(idx);
        }

        let mut parts: Vec<NodeId> = vec![z0];
        let mut row_of = vec![0usize; dict.len()];
        let mut next_row = 1;
        for (len, idxs) in &groups {
            let mut seq = Vec::with_capacity(*len);
            for t in 0..*len {
                let ids: Vec<usize> =
                    idxs.iter().map(|&i| dict.entry(i)[t] as usize).collect();
                seq.push(g.lookup(table, &ids)?);
            }
            let mut final_h = None;
            for l in 0..self.config.ne_lstm_layers {
                let (next_seq, last) = self.lstm_layer(g, l, &seq, idxs.len(), h)?;
                seq = next_seq;
                final_h = Some(last);
            }
            parts.push(final_h.expect("at least one lstm layer"));
            for (pos, &i) in idxs.iter().enumerate() {
                row_of[i] = next_row + pos;
            }
            next_row += idxs.len();
        }
        let stacked = g.concat(&parts, 0)?;
        g.lookup(stacked, &row_of)
    }

    /// One LSTM layer over a sequence of per-timestep batches (`rows`
    /// sequences in lockstep); returns the per-timestep hidden states and
    /// the final one.
    fn lstm_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        inputs: &[NodeId],
        rows: usize,
        hidden: usize,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let w_ih = g.param(&format!("ne.lstm{layer}.w_ih"))?;
        let w_hh = g.param(&format!("ne.lstm{layer}.w_hh"))?;
        let b = g.param(&format!("ne.lstm{layer}.b"))?;
        let mut h_prev = g.constant(Tensor::zeros(vec![rows, hidden]));
        let mut c_prev = g.constant(Tensor::zeros(vec![rows, hidden]));
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x_t in inputs {
            let gi = g.matmul_t(x_t, w_ih, false, true)?;
            let gh = g.matmul_t(h_prev, w_hh, false, true)?;
            let gates = g.add(gi, gh)?;
            let gates = g.add(gates, b)?;
            let i_g = g.slice(gates, 1, 0, hidden)?;
            let f_g = g.slice(gates, 1, hidden, 2 * hidden)?;
            let g_g = g.slice(gates, 1, 2 * hidden, 3 * hidden)?;
            let o_g = g.slice(gates, 1, 3 * hidden, 4 * hidden)?;
            let i_s = g.sigmoid(i_g)?;
            let f_s = g.sigmoid(f_g)?;
            let g_t = g.tanh(g_g)?;
            let o_s = g.sigmoid(o_g)?;
            let fc = g.mul(f_s, c_prev)?;
            let ig = g.mul(i_s, g_t)?;
            c_prev = g.add(fc, ig)?;
            let ct = g.tanh(c_prev)?;
            h_prev = g.mul(o_s, ct)?;
            outputs.push(h_prev);
        }
        Ok((outputs, h_prev))
    }

    /// Scaled dot-product copy attention. Returns (scores, probabilities),
    /// each one row per decoder state, one column per dictionary entry
    /// (no-copy marker included).
    pub fn copy_attention(&self, g: &mut Graph, d_states: NodeId, z: NodeId) -> Result<(NodeId, NodeId)> {
        let wq = g.param("copy.wq")?;
        let wk = g.param("copy.wk")?;
        let q = g.matmul_t(d_states, wq, false, true)?; // L x d_attn
        let k = g.matmul_t(z, wk, false, true)?; // (N+1) x d_attn
        let raw = g.matmul_t(q, k, false, true)?; // L x (N+1)
        let scores = g.scale(raw, 1.0 / (self.config.d_attn as f64).sqrt())?;
        let probs = g.softmax(scores)?;
        Ok((scores, probs))
    }

    /// Mix entity representations by the raw copy probabilities and predict
    /// the next token from [state, mixture]. Blank is masked out of the
    /// token distribution; it is a CTC alignment device only.
    pub fn dict_enhanced_step(
        &self,
        g: &mut Graph,
        d_states: NodeId,
        z: NodeId,
        copy_probs: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mix = g.matmul(copy_probs, z)?; // L x ne_hidden
        let cat = g.concat(&[d_states, mix], 1)?;
        let w = g.param("out.w")?;
        let b = g.param("out.b")?;
        let logits = g.matmul_t(cat, w, false, true)?;
        let logits = g.add(logits, b)?;
        let masked = self.mask_blank(g, logits)?;
        let probs = g.softmax(masked)?;
        Ok((mix, probs))
    }

    /// Baseline token prediction from the decoder state alone.
    pub fn baseline_step(&self, g: &mut Graph, d_states: NodeId) -> Result<NodeId> {
        let w = g.param("out.w")?;
        let b = g.param("out.b")?;
        let logits = g.matmul_t(d_states, w, false, true)?;
        let logits = g.add(logits, b)?;
        let masked = self.mask_blank(g, logits)?;
        g.softmax(masked)
    }

    fn mask_blank(&self, g: &mut Graph, logits: NodeId) -> Result<NodeId> {
        let v = self.vocab.size();
        let mut mask = vec![0.0; v];
        mask[BLANK as usize] = NEG_HUGE;
        let mask = g.constant(Tensor::row(mask));
        g.add(logits, mask)
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = g.param(&format!("{prefix}.g"))?;
        let bias = g.param(&format!("{prefix}.b"))?;
        let n = g.layer_norm(x)?;
        let n = g.mul(n, gain)?;
        g.add(n, bias)
    }

    /// Pre-norm Transformer block: self-attention (causally masked when the
    /// block has a cross-attention stage, i.e. in the decoder), optional
    /// cross-attention over the encoder output, then the feed-forward.
    fn attn_block(&self, g: &mut Graph, prefix: &str, x: NodeId, cross: Option<NodeId>) -> Result<NodeId> {
        let causal = cross.is_some();
        let normed = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let attn = self.multi_head(g, &format!("{prefix}.self"), normed, normed, causal)?;
        let mut x = g.add(x, attn)?;
        if let Some(h_enc) = cross {
            let normed = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
            let attn = self.multi_head(g, &format!("{prefix}.cross"), normed, h_enc, false)?;
            x = g.add(x, attn)?;
        }
        let ln_ffn = if causal { "ln3" } else { "ln2" };
        let normed = self.layer_norm(g, x, &format!("{prefix}.{ln_ffn}"))?;
        let w1 = g.param(&format!("{prefix}.ffn.w1"))?;
        let b1 = g.param(&format!("{prefix}.ffn.b1"))?;
        let w2 = g.param(&format!("{prefix}.ffn.w2"))?;
        let b2 = g.param(&format!("{prefix}.ffn.b2"))?;
        let f = g.matmul_t(normed, w1, false, true)?;
        let f = g.add(f, b1)?;
        let f = g.relu(f)?;
        let f = g.matmul_t(f, w2, false, true)?;
        let f = g.add(f, b2)?;
        g.add(x, f)
    }

    fn multi_head(
        &self,
        g: &mut Graph,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let (lq, _) = g.value(q_in).dims2();
        let (lk, _) = g.value(kv_in).dims2();

        let wq = g.param(&format!("{prefix}.wq"))?;
        let bq = g.param(&format!("{prefix}.bq"))?;
        let wk = g.param(&format!("{prefix}.wk"))?;
        let wv = g.param(&format!("{prefix}.wv"))?;
        let bv = g.param(&format!("{prefix}.bv"))?;
        let wo = g.param(&format!("{prefix}.wo"))?;
        let bo = g.param(&format!("{prefix}.bo"))?;

        let q = g.matmul_t(q_in, wq, false, true)?;
        let q = g.add(q, bq)?;
        // No key bias: softmax is invariant to the row-constant score shift
        // it would induce, leaving it with an identically zero gradient.
        let k = g.matmul_t(kv_in, wk, false, true)?;
        let v = g.matmul_t(kv_in, wv, false, true)?;
        let v = g.add(v, bv)?;

        let mask = if causal {
            debug_assert_eq!(lq, lk);
            let mut m = vec![0.0; lq * lk];
            for i in 0..lq {
                for j in (i + 1)..lk {
                    m[i * lk + j] = NEG_HUGE;
                }
            }
            Some(g.constant(Tensor::matrix(lq, lk, m)?))
        } else {
            None
        };

        let mut ctx = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qs = g.slice(q, 1, hd * dh, (hd + 1) * dh)?;
            let ks = g.slice(k, 1, hd * dh, (hd + 1) * dh)?;
            let vs = g.slice(v, 1, hd * dh, (hd + 1) * dh)?;
            let scores = g.matmul_t(qs, ks, false, true)?;
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            ctx.push(g.matmul(attn, vs)?);
        }
        let merged = g.concat(&ctx, 1)?;
        let out = g.matmul_t(merged, wo, false, true)?;
        g.add(out, bo)
    }
}

fn insert_attn_block(p: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d: usize, decoder: bool) {
    let ln = |p: &mut ParamSet, name: &str| {
        p.insert(&format!("{prefix}.{name}.g"), Tensor::row(vec![1.0; d]));
        p.insert(&format!("{prefix}.{name}.b"), Tensor::zeros(vec![d]));
    };
    let attn = |p: &mut ParamSet, rng: &mut StreamRng, name: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("{prefix}.{name}.{w}"), xavier(rng, d, d));
            if w != "wk" {
                p.insert(&format!("{prefix}.{name}.b{}", &w[1..]), Tensor::zeros(vec![d]));
            }
        }
    };
    ln(p, "ln1");
    attn(p, rng, "self");
    ln(p, "ln2");
    if decoder {
        attn(p, rng, "cross");
        ln(p, "ln3");
    }
    p.insert(&format!("{prefix}.ffn.w1"), xavier(rng, 4 * d, d));
    p.insert(&format!("{prefix}.ffn.b1"), Tensor::zeros(vec![4 * d]));
    p.insert(&format!("{prefix}.ffn.w2"), xavier(rng, d, 4 * d));
    p.insert(&format!("{prefix}.ffn.b2"), Tensor::zeros(vec![d]));
}

fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * rate).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
    }
    Tensor::matrix(len, d, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict::Provenance;
    use crate::vocab::EOS;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_attn: 8,
            ne_hidden: 8,
            ne_lstm_layers: 1,
            frame_dim: 4,
            max_frames: 64,
            max_tokens: 16,
            positional: true,
        }
    }

    fn tiny_vocab() -> Vocab {
        Vocab::new("abcde".chars().collect()).unwrap()
    }

    fn tiny_model(mode: Mode) -> Model {
        Model::new(tiny_config(), tiny_vocab(), mode, &StreamRng::new(42)).unwrap()
    }

    fn random_frames(rng: &mut StreamRng, t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn encode_audio_shape_contract() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(1).stream("noise");
        let frames = random_frames(&mut rng, 1, 4);
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 8]);
        let frames5 = random_frames(&mut rng, 5, 4);
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames5).unwrap();
        assert_eq!(g.value(h).shape(), &[5, 8]);
        assert!(g.value(h).is_finite());
    }

    #[test]
    fn encode_audio_rejects_wrong_frame_dim() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(1).stream("noise");
        let frames = random_frames(&mut rng, 3, 5);
        let mut g = Graph::new(&m.params);
        assert!(m.encode_audio(&mut g, &frames).is_err());
    }

    #[test]
    fn duplicated_rows_without_positions_encode_identically() {
        let config = ModelConfig { positional: false, ..tiny_config() };
        let m = Model::new(config, tiny_vocab(), Mode::Baseline, &StreamRng::new(7)).unwrap();
        let mut rng = StreamRng::new(2).stream("noise");
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&row);
        }
        let frames = Tensor::matrix(3, 4, data).unwrap();
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames).unwrap();
        let out = g.value(h);
        for r in 1..3 {
            assert_eq!(out.row_slice(0), out.row_slice(r));
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(3).stream("noise");
        let frames = random_frames(&mut rng, 5, 4);
        let params = m.params.clone();
        let err = crate::autodiff::grad_check(&params, 1e-5, move |g| {
            let h = m.encode_audio(g, &frames)?;
            let t = g.tanh(h)?;
            g.sum_all(t)
        })
        .unwrap();
        assert!(err < 1e-4, "encoder grad check: {err:.3e}");
    }

    #[test]
    fn ctc_head_zero_weights_give_uniform_rows() {
        let mut m = tiny_model(Mode::Baseline);
        for name in ["ctc.w", "ctc.b"] {
            let idx = m.params.index_of(name).unwrap();
            for v in m.params.value_mut(idx).data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = StreamRng::new(4).stream("noise");
        let frames = random_frames(&mut rng, 3, 4);
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames).unwrap();
        let lp = m.ctc_log_probs(&mut g, h).unwrap();
        let v = m.vocab.size() as f64;
        for &x in g.value(lp).data() {
            assert!((x - (1.0 / v).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ctc_rows_normalize_for_random_params() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(5).stream("noise");
        let frames = random_frames(&mut rng, 4, 4);
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames).unwrap();
        let lp = m.ctc_log_probs(&mut g, h).unwrap();
        let t = g.value(lp);
        for r in 0..4 {
            let s: f64 = t.row_slice(r).iter().map(|&x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_history_must_start_with_bos_and_avoid_blank() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(6).stream("noise");
        let frames = random_frames(&mut rng, 3, 4);
        let mut g = Graph::new(&m.params);
        let h = m.encode_audio(&mut g, &frames).unwrap();
        assert!(m.decoder_states(&mut g, &[4, 5], h).is_err());
        assert!(m.decoder_states(&mut g, &[BOS, BLANK], h).is_err());
        let d = m.decoder_states(&mut g, &[BOS], h).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 8]);
    }

    #[test]
    fn decoder_states_are_causal_bit_for_bit() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(7).stream("noise");
        let frames = random_frames(&mut rng, 4, 4);
        let history = vec![BOS, 4, 5, 6];
        let states_for = |hist: &[u32]| -> Vec<Vec<f64>> {
            let mut g = Graph::new(&m.params);
            let h = m.encode_audio(&mut g, &frames).unwrap();
            let d = m.decoder_states(&mut g, hist, h).unwrap();
            (0..hist.len()).map(|r| g.value(d).row_slice(r).to_vec()).collect()
        };
        let full = states_for(&history);
        for prefix_len in 1..=history.len() {
            let partial = states_for(&history[..prefix_len]);
            for (a, b) in partial.iter().zip(full.iter()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn marker_only_dictionary_encodes_to_z0() {
        let m = tiny_model(Mode::CopyNe);
        let dict = EntityDict::new();
        let mut g = Graph::new(&m.params);
        let z = m.encode_entities(&mut g, &dict).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 8]);
        assert_eq!(g.value(z).data(), m.params.get("ne.z0").unwrap().data());
    }

    #[test]
    fn entity_encoding_is_deterministic_and_separating() {
        let m = tiny_model(Mode::CopyNe);
        let mut dict = EntityDict::new();
        dict.push(vec![4, 5], Provenance::Gold).unwrap();
        dict.push(vec![4, 6], Provenance::Gold).unwrap();
        let run = || {
            let mut g = Graph::new(&m.params);
            let z = m.encode_entities(&mut g, &dict).unwrap();
            g.value(z).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let h = m.config.ne_hidden;
        assert_ne!(a[h..2 * h], a[2 * h..3 * h], "single-token difference must separate rows");
    }

    #[test]
    fn entity_order_equivariance() {
        let m = tiny_model(Mode::CopyNe);
        let (e1, e2) = (vec![4u32, 5], vec![6u32, 7, 8]);
        let mut d12 = EntityDict::new();
        d12.push(e1.clone(), Provenance::Gold).unwrap();
        d12.push(e2.clone(), Provenance::Gold).unwrap();
        let mut d21 = EntityDict::new();
        d21.push(e2, Provenance::Gold).unwrap();
        d21.push(e1, Provenance::Gold).unwrap();
        let rows = |dict: &EntityDict| {
            let mut g = Graph::new(&m.params);
            let z = m.encode_entities(&mut g, dict).unwrap();
            let v = g.value(z);
            (v.row_slice(1).to_vec(), v.row_slice(2).to_vec())
        };
        let (a1, a2) = rows(&d12);
        let (b2, b1) = rows(&d21);
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn copy_attention_uniform_when_all_rows_equal() {
        let m = tiny_model(Mode::CopyNe);
        let mut g = Graph::new(&m.params);
        let d_state = g.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let z = g.constant(Tensor::matrix(3, 8, vec![0.25; 24]).unwrap());
        let (_, probs) = m.copy_attention(&mut g, d_state, z).unwrap();
        for &p in g.value(probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_attention_hand_example_at_width_one() {
        // Projected query [2], keys [1] and [3]: scores [2, 6], softmax
        // ~ [0.0180, 0.9820].
        let config = ModelConfig {
            d_model: 1,
            n_heads: 1,
            d_attn: 1,
            ne_hidden: 1,
            ..tiny_config()
        };
        let mut m = Model::new(config, tiny_vocab(), Mode::CopyNe, &StreamRng::new(0)).unwrap();
        for name in ["copy.wq", "copy.wk"] {
            let idx = m.params.index_of(name).unwrap();
            m.params.value_mut(idx).data_mut()[0] = 1.0;
        }
        let mut g = Graph::new(&m.params);
        let d_state = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let z = g.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let (scores, probs) = m.copy_attention(&mut g, d_state, z).unwrap();
        assert_eq!(g.value(scores).data(), &[2.0, 6.0]);
        let p = g.value(probs).data();
        assert!((p[0] - 0.017986209962091555).abs() < 1e-12);
        assert!((p[1] - 0.9820137900379085).abs() < 1e-12);
    }

    #[test]
    fn copy_attention_shift_invariance() {
        let m = tiny_model(Mode::CopyNe);
        let mut rng = StreamRng::new(9).stream("noise");
        let mut g = Graph::new(&m.params);
        let d_state = g.constant(random_frames(&mut rng, 1, 8));
        let z = g.constant(random_frames(&mut rng, 4, 8));
        let (scores, probs) = m.copy_attention(&mut g, d_state, z).unwrap();
        let shifted = g.scalar(3.5);
        let shifted = g.add(scores, shifted).unwrap();
        let probs2 = g.softmax(shifted).unwrap();
        for (a, b) in g.value(probs).data().iter().zip(g.value(probs2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dict_mixture_degenerate_and_uniform_cases() {
        let m = tiny_model(Mode::CopyNe);
        let mut dict = EntityDict::new();
        dict.push(vec![4, 5], Provenance::Gold).unwrap();
        dict.push(vec![6, 7], Provenance::Gold).unwrap();
        let mut g = Graph::new(&m.params);
        let z = m.encode_entities(&mut g, &dict).unwrap();
        let d_state = g.constant(Tensor::matrix(1, 8, vec![0.1; 8]).unwrap());
        // One-hot on the marker row: mixture equals z0.
        let onehot = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        let (mix, probs) = m.dict_enhanced_step(&mut g, d_state, z, onehot).unwrap();
        assert_eq!(g.value(mix).data(), m.params.get("ne.z0").unwrap().data());
        let psum: f64 = g.value(probs).data().iter().sum();
        assert!((psum - 1.0).abs() < 1e-9);
        assert_eq!(g.value(probs).data()[BLANK as usize], 0.0);
        // Uniform mixture equals the row mean.
        let third = 1.0 / 3.0;
        let uniform = g.constant(Tensor::matrix(1, 3, vec![third; 3]).unwrap());
        let (mix, _) = m.dict_enhanced_step(&mut g, d_state, z, uniform).unwrap();
        let zv = g.value(z).clone();
        let mean: Vec<f64> =
            (0..8).map(|c| (zv.at(0, c) + zv.at(1, c) + zv.at(2, c)) / 3.0).collect();
        for (a, b) in g.value(mix).data().iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_head_zero_weights_uniform_over_unblanked_vocab() {
        let mut m = tiny_model(Mode::Baseline);
        for name in ["out.w", "out.b"] {
            let idx = m.params.index_of(name).unwrap();
            for v in m.params.value_mut(idx).data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new(&m.params);
        let d_state = g.constant(Tensor::matrix(1, 8, vec![0.3; 8]).unwrap());
        let p = m.baseline_step(&mut g, d_state).unwrap();
        let v = m.vocab.size();
        let probs = g.value(p).data();
        assert_eq!(probs[BLANK as usize], 0.0);
        for &x in &probs[1..] {
            assert!((x - 1.0 / (v - 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_distribution_sums_to_one() {
        let m = tiny_model(Mode::Baseline);
        let mut rng = StreamRng::new(11).stream("noise");
        let mut g = Graph::new(&m.params);
        let d_state = g.constant(random_frames(&mut rng, 3, 8));
        let p = m.baseline_step(&mut g, d_state).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(p).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_copy_pipeline_gradcheck_micro() {
        // End-to-end through encoder, decoder, entity encoder, copy
        // attention, mixture head, and all three losses.
        let m = tiny_model(Mode::CopyNe);
        let mut rng = StreamRng::new(12).stream("noise");
        let frames = random_frames(&mut rng, 4, 4);
        let y = vec![4u32, 5];
        let mut dict = EntityDict::new();
        dict.push(vec![4, 5], Provenance::Gold).unwrap();
        let sigma = vec![1usize, 0];
        let params = m.params.clone();
        let err = crate::autodiff::grad_check(&params, 1e-5, move |g| {
            let h = m.encode_audio(g, &frames)?;
            let lp = m.ctc_log_probs(g, h)?;
            let l_ctc = crate::loss::graph_ctc_loss(g, lp, &y)?;
            let mut history = vec![BOS];
            history.extend_from_slice(&y);
            let d = m.decoder_states(g, &history, h)?;
            let z = m.encode_entities(g, &dict)?;
            let (_, pc) = m.copy_attention(g, d, z)?;
            let (_, pt) = m.dict_enhanced_step(g, d, z, pc)?;
            let mut targets: Vec<usize> = y.iter().map(|&t| t as usize).collect();
            targets.push(EOS as usize);
            let l_trans = crate::loss::graph_nll(g, pt, &targets)?;
            let pc_steps = g.slice(pc, 0, 0, y.len())?;
            let l_copy = crate::loss::graph_nll(g, pc_steps, &sigma)?;
            crate::loss::graph_total_loss(g, l_trans, l_ctc, Some(l_copy), 0.7)
        })
        .unwrap();
        assert!(err < 1e-3, "full pipeline grad check: {err:.3e}");
    }
}
