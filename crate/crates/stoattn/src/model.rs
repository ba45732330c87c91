//! Transformer text classifier: embeddings, pre-layer-norm blocks with one
//! of the three attention modes, masked mean pooling, and a linear head.
//!
//! Block layout per layer: `x += dropout(attn(ln1(x)))` then
//! `x += dropout(ffn(ln2(x)))` with a ReLU feed-forward. Token and
//! position embeddings are learned tables; their sum passes through
//! dropout before the first block. Class probabilities are
//! `softmax(logits)` and always form a valid categorical distribution.
//!
//! Checkpoints: an ASCII header of `key = value` lines (format version
//! first, then the full config), an `end_header` line, then named
//! parameter blocks of `{name, shape, little-endian f64 data}`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{
    deterministic_mhsa, hierarchical_mhsa, stochastic_mhsa, AttentionParams, CentroidSet,
    MhsaOutput, StochasticConfig,
};
use crate::error::{Error, Result};
use crate::sampling::{NoiseSource, RngStream};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const CHECKPOINT_VERSION: u32 = 1;
const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub emb_dim: usize,
    pub ffn_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub attention: StochasticConfig,
    pub centroid_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Validate every field, listing all offenders at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_layers == 0 {
            bad.push("num_layers must be >= 1".to_string());
        }
        if self.num_heads == 0 || self.emb_dim == 0 || self.emb_dim % self.num_heads != 0 {
            bad.push(format!(
                "emb_dim {} must be a positive multiple of num_heads {}",
                self.emb_dim, self.num_heads
            ));
        }
        if self.ffn_hidden_dim == 0 {
            bad.push("ffn_hidden_dim must be >= 1".to_string());
        }
        if self.vocab_size < 2 {
            bad.push("vocab_size must be >= 2".to_string());
        }
        if self.max_seq_len == 0 {
            bad.push("max_seq_len must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            bad.push("num_classes must be >= 2".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.attention.uses_centroids() && self.centroid_count == 0 {
            bad.push("centroid_count must be >= 1 in hierarchical mode".to_string());
        }
        if let Err(e) = self.attention.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn: AttentionParams<T>,
    pub centroids: Option<CentroidSet<T>>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

/// The classifier. Immutable during inference; training mutates weights
/// through [`TransformerClassifier::visit_params_mut`].
#[derive(Debug, Clone)]
pub struct TransformerClassifier<T> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
}

/// One padded input: token ids plus a padding flag per position
/// (true = padding).
#[derive(Debug, Clone)]
pub struct PaddedExample {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

/// Pad a batch of id sequences to their common maximum length.
pub fn pad_batch(seqs: &[&[usize]], pad_id: usize) -> Vec<PaddedExample> {
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    seqs.iter()
        .map(|s| {
            let mut ids = s.to_vec();
            let mut pad = vec![false; s.len()];
            ids.resize(max_len, pad_id);
            pad.resize(max_len, true);
            PaddedExample { ids, pad }
        })
        .collect()
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Training mode enables dropout at the configured rate.
    pub train_mode: bool,
    /// Draw fresh attention noise (stochastic/hierarchical modes).
    pub stochastic: bool,
    /// MC-dropout: keep dropout active at inference with this rate.
    pub mc_dropout_rate: Option<f64>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            train_mode: true,
            stochastic: true,
            mc_dropout_rate: None,
        }
    }

    /// Plain evaluation: dropout off, attention noise per `stochastic`.
    pub fn eval(stochastic: bool) -> Self {
        ForwardOptions {
            train_mode: false,
            stochastic,
            mc_dropout_rate: None,
        }
    }
}

/// Ids of all registered parameters for one forward pass, in the fixed
/// parameter order used by the optimizer and the checkpoint format.
pub struct ParamBindings {
    pub named: Vec<(String, TensorId)>,
}

impl ParamBindings {
    pub fn id(&self, name: &str) -> TensorId {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .expect("unknown parameter name")
    }
}

/// Per-layer attention matrices captured during a forward pass.
pub struct AttentionTrace {
    /// `[layer][head]` value-attention matrices (l x l).
    pub value_attention: Vec<Vec<Tensor<f64>>>,
    /// `[layer][head]` centroid-attention matrices (hierarchical only).
    pub centroid_attention: Vec<Vec<Tensor<f64>>>,
}

impl<T: Scalar> TransformerClassifier<T> {
    /// Deterministic initialization from the config's seed: embeddings and
    /// projections normal(0, 0.02), biases and layer-norm shifts zero,
    /// layer-norm gains one, centroids normal(0, 1/sqrt(head_dim)).
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.emb_dim;
        let normal_tensor = |shape: Vec<usize>, std: f64, rng: &mut RngStream| -> Tensor<T> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
            Tensor::new(shape, data).expect("finite init")
        };
        let mut emb_rng = rng.child_named("embeddings");
        let token_emb = normal_tensor(vec![config.vocab_size, d], INIT_STD, &mut emb_rng);
        let pos_emb = normal_tensor(vec![config.max_seq_len, d], INIT_STD, &mut emb_rng);

        let mut layers = Vec::with_capacity(config.num_layers);
        for li in 0..config.num_layers {
            let mut lr = rng.child_named(&format!("layer{li}"));
            let attn = AttentionParams::init(d, config.num_heads, INIT_STD, &mut lr)?;
            let centroids = if config.attention.uses_centroids() {
                Some(CentroidSet::init(
                    d / config.num_heads,
                    config.centroid_count,
                    &mut lr,
                )?)
            } else {
                None
            };
            layers.push(LayerParams {
                attn,
                centroids,
                ln1_gamma: Tensor::filled(vec![d], T::one()),
                ln1_beta: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::filled(vec![d], T::one()),
                ln2_beta: Tensor::zeros(vec![d]),
                ffn_w1: normal_tensor(vec![d, config.ffn_hidden_dim], INIT_STD, &mut lr),
                ffn_b1: Tensor::zeros(vec![config.ffn_hidden_dim]),
                ffn_w2: normal_tensor(vec![config.ffn_hidden_dim, d], INIT_STD, &mut lr),
                ffn_b2: Tensor::zeros(vec![d]),
            });
        }
        let mut head_rng = rng.child_named("classifier");
        Ok(TransformerClassifier {
            config: config.clone(),
            token_emb,
            pos_emb,
            layers,
            cls_w: normal_tensor(vec![d, config.num_classes], INIT_STD, &mut head_rng),
            cls_b: Tensor::zeros(vec![config.num_classes]),
        })
    }

    /// Visit every parameter as `(name, tensor)` in the fixed order shared
    /// by the optimizer, checkpoints, and tape registration.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("token_emb", &self.token_emb);
        f("pos_emb", &self.pos_emb);
        for (li, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{li}.w_q"), &layer.attn.w_q);
            f(&format!("layer{li}.w_k"), &layer.attn.w_k);
            f(&format!("layer{li}.w_v"), &layer.attn.w_v);
            if let Some(cs) = &layer.centroids {
                f(&format!("layer{li}.centroids"), &cs.c);
            }
            f(&format!("layer{li}.ln1_gamma"), &layer.ln1_gamma);
            f(&format!("layer{li}.ln1_beta"), &layer.ln1_beta);
            f(&format!("layer{li}.ln2_gamma"), &layer.ln2_gamma);
            f(&format!("layer{li}.ln2_beta"), &layer.ln2_beta);
            f(&format!("layer{li}.ffn_w1"), &layer.ffn_w1);
            f(&format!("layer{li}.ffn_b1"), &layer.ffn_b1);
            f(&format!("layer{li}.ffn_w2"), &layer.ffn_w2);
            f(&format!("layer{li}.ffn_b2"), &layer.ffn_b2);
        }
        f("cls_w", &self.cls_w);
        f("cls_b", &self.cls_b);
    }

    /// Mutable variant of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("token_emb", &mut self.token_emb);
        f("pos_emb", &mut self.pos_emb);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{li}.w_q"), &mut layer.attn.w_q);
            f(&format!("layer{li}.w_k"), &mut layer.attn.w_k);
            f(&format!("layer{li}.w_v"), &mut layer.attn.w_v);
            if let Some(cs) = &mut layer.centroids {
                f(&format!("layer{li}.centroids"), &mut cs.c);
            }
            f(&format!("layer{li}.ln1_gamma"), &mut layer.ln1_gamma);
            f(&format!("layer{li}.ln1_beta"), &mut layer.ln1_beta);
            f(&format!("layer{li}.ln2_gamma"), &mut layer.ln2_gamma);
            f(&format!("layer{li}.ln2_beta"), &mut layer.ln2_beta);
            f(&format!("layer{li}.ffn_w1"), &mut layer.ffn_w1);
            f(&format!("layer{li}.ffn_b1"), &mut layer.ffn_b1);
            f(&format!("layer{li}.ffn_w2"), &mut layer.ffn_w2);
            f(&format!("layer{li}.ffn_b2"), &mut layer.ffn_b2);
        }
        f("cls_w", &mut self.cls_w);
        f("cls_b", &mut self.cls_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Register every parameter on a tape as gradient-tracked leaves.
    pub fn register_params(&self, tape: &mut Tape<T>) -> ParamBindings {
        let mut named = Vec::new();
        self.visit_params(|name, t| named.push((name.to_string(), tape.leaf(t.clone()))));
        ParamBindings { named }
    }

    /// Forward pass over a padded batch; returns `batch x num_classes`
    /// logits. Dropout is active iff `train_mode` or `mc_dropout_rate` is
    /// set; attention noise is drawn iff `stochastic` and the configured
    /// mode is a stochastic one.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bindings: &ParamBindings,
        batch: &[PaddedExample],
        opts: ForwardOptions,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        self.forward_traced(tape, bindings, batch, opts, rng, &mut None)
    }

    /// Forward pass that optionally captures per-layer attention matrices
    /// of the FIRST example in the batch (diagnostics).
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        bindings: &ParamBindings,
        batch: &[PaddedExample],
        opts: ForwardOptions,
        rng: &mut RngStream,
        trace: &mut Option<AttentionTrace>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::contract("forward", "empty batch"));
        }
        let dropout_rate = if opts.train_mode {
            self.config.dropout_rate
        } else {
            opts.mc_dropout_rate.unwrap_or(0.0)
        };
        let dropout_on = dropout_rate > 0.0;
        let stochastic = opts.stochastic && self.config.attention.is_stochastic();

        let token_emb = bindings.id("token_emb");
        let pos_emb = bindings.id("pos_emb");
        let cls_w = bindings.id("cls_w");
        let cls_b = bindings.id("cls_b");

        let mut per_example_logits = Vec::with_capacity(batch.len());
        for (bi, example) in batch.iter().enumerate() {
            let l = example.ids.len();
            if l == 0 || l > self.config.max_seq_len {
                return Err(Error::contract(
                    "forward",
                    format!("sequence length {l} outside 1..={}", self.config.max_seq_len),
                ));
            }
            if example.pad.len() != l {
                return Err(Error::contract("forward", "pad mask length mismatch"));
            }
            if example.pad.iter().all(|&p| p) {
                return Err(Error::contract("forward", "all positions masked"));
            }
            // Per-example child streams keyed by position in the batch so
            // that batch composition, not draw order, defines the noise.
            let mut ex_rng = rng.child(bi as u64);
            let keep: Vec<bool> = example.pad.iter().map(|&p| !p).collect();

            let tok = tape.embedding(token_emb, &example.ids)?;
            let positions: Vec<usize> = (0..l).collect();
            let pos = tape.embedding(pos_emb, &positions)?;
            let mut x = tape.add(tok, pos)?;
            if dropout_on {
                let mut drng = ex_rng.child_named("dropout-emb");
                x = tape.dropout(x, dropout_rate, true, &mut drng)?;
            }

            for (li, _) in self.layers.iter().enumerate() {
                let ln1_g = bindings.id(&format!("layer{li}.ln1_gamma"));
                let ln1_b = bindings.id(&format!("layer{li}.ln1_beta"));
                let ln2_g = bindings.id(&format!("layer{li}.ln2_gamma"));
                let ln2_b = bindings.id(&format!("layer{li}.ln2_beta"));
                let handles = crate::attention::AttentionHandles {
                    w_q: bindings.id(&format!("layer{li}.w_q")),
                    w_k: bindings.id(&format!("layer{li}.w_k")),
                    w_v: bindings.id(&format!("layer{li}.w_v")),
                    heads: self.config.num_heads,
                    scale: self.layers[li].attn.scale,
                };

                let normed = tape.layer_norm(x, ln1_g, ln1_b, T::from_f64_c(LAYER_NORM_EPS))?;
                let mask: Option<&[bool]> = if example.pad.iter().any(|&p| p) {
                    Some(&example.pad)
                } else {
                    None
                };
                let mut attn_rng = ex_rng.child_named(&format!("attn-layer{li}"));
                let mut noise = if stochastic {
                    NoiseSource::Rng(&mut attn_rng)
                } else {
                    NoiseSource::Zero
                };
                let mhsa: MhsaOutput = match self.config.attention {
                    StochasticConfig::Deterministic => {
                        deterministic_mhsa(tape, normed, &handles, mask)?
                    }
                    StochasticConfig::Stochastic { tau } => stochastic_mhsa(
                        tape,
                        normed,
                        &handles,
                        T::from_f64_c(tau),
                        &mut noise,
                        mask,
                    )?,
                    StochasticConfig::Hierarchical { tau1, tau2 } => {
                        let cid = bindings.id(&format!("layer{li}.centroids"));
                        hierarchical_mhsa(
                            tape,
                            normed,
                            &handles,
                            cid,
                            T::from_f64_c(tau1),
                            T::from_f64_c(tau2),
                            &mut noise,
                            mask,
                        )?
                    }
                };
                if bi == 0 {
                    if let Some(tr) = trace.as_mut() {
                        let to_f64 = |id: TensorId| {
                            let t = tape.value(id);
                            Tensor::<f64>::new(
                                t.shape().to_vec(),
                                t.data().iter().map(|v| v.to_f64_c()).collect(),
                            )
                            .expect("finite attention")
                        };
                        tr.value_attention
                            .push(mhsa.attention.iter().map(|&a| to_f64(a)).collect());
                        tr.centroid_attention
                            .push(mhsa.centroid_attention.iter().map(|&a| to_f64(a)).collect());
                    }
                }
                let mut attn_out = mhsa.output;
                if dropout_on {
                    let mut drng = ex_rng.child_named(&format!("dropout-attn{li}"));
                    attn_out = tape.dropout(attn_out, dropout_rate, true, &mut drng)?;
                }
                x = tape.add(x, attn_out)?;

                let normed2 = tape.layer_norm(x, ln2_g, ln2_b, T::from_f64_c(LAYER_NORM_EPS))?;
                let w1 = bindings.id(&format!("layer{li}.ffn_w1"));
                let b1 = bindings.id(&format!("layer{li}.ffn_b1"));
                let w2 = bindings.id(&format!("layer{li}.ffn_w2"));
                let b2 = bindings.id(&format!("layer{li}.ffn_b2"));
                let h = tape.matmul(normed2, w1)?;
                let h = tape.add_row_vec(h, b1)?;
                let h = tape.relu(h)?;
                let mut ffn = tape.matmul(h, w2)?;
                ffn = tape.add_row_vec(ffn, b2)?;
                if dropout_on {
                    let mut drng = ex_rng.child_named(&format!("dropout-ffn{li}"));
                    ffn = tape.dropout(ffn, dropout_rate, true, &mut drng)?;
                }
                x = tape.add(x, ffn)?;
            }

            let pooled = tape.mean_pool_rows(x, &keep)?;
            let logits = tape.matmul(pooled, cls_w)?;
            let logits = tape.add_row_vec(logits, cls_b)?;
            per_example_logits.push(logits);
        }
        tape.concat_rows(&per_example_logits)
    }

    /// Convenience inference: class probabilities (Eq.-style softmax of
    /// the logits) as plain `f64` rows, one per example.
    pub fn predict_probs(
        &self,
        examples: &[&[usize]],
        opts: ForwardOptions,
        rng: &mut RngStream,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bindings = self.register_params(&mut tape);
        let batch = pad_batch(examples, 0);
        let logits = self.forward(&mut tape, &bindings, &batch, opts, rng)?;
        let probs = tape.value(logits).softmax(1, T::one())?;
        let m = self.config.num_classes;
        Ok((0..examples.len())
            .map(|i| {
                (0..m)
                    .map(|j| probs.data()[i * m + j].to_f64_c())
                    .collect()
            })
            .collect())
    }

    // ── Checkpoints ─────────────────────────────────────────────────

    /// Write the model to `path`; round-trips every parameter bit-exactly
    /// together with the full config.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "format_version = {CHECKPOINT_VERSION}")?;
        for (key, value) in self.config_entries() {
            writeln!(w, "{key} = {value}")?;
        }
        writeln!(w, "end_header")?;
        let mut io_err: Option<std::io::Error> = None;
        self.visit_params(|name, t| {
            if io_err.is_some() {
                return;
            }
            let res = (|| -> std::io::Result<()> {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(t.ndim() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_f64_c().to_le_bytes())?;
                }
                Ok(())
            })();
            if let Err(e) = res {
                io_err = Some(e);
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.flush()?;
        Ok(())
    }

    fn config_entries(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let mut out = vec![
            ("num_layers".into(), c.num_layers.to_string()),
            ("num_heads".into(), c.num_heads.to_string()),
            ("emb_dim".into(), c.emb_dim.to_string()),
            ("ffn_hidden_dim".into(), c.ffn_hidden_dim.to_string()),
            ("vocab_size".into(), c.vocab_size.to_string()),
            ("max_seq_len".into(), c.max_seq_len.to_string()),
            ("num_classes".into(), c.num_classes.to_string()),
            ("dropout_rate".into(), format!("{:?}", c.dropout_rate)),
            ("centroid_count".into(), c.centroid_count.to_string()),
            ("seed".into(), c.seed.to_string()),
            ("mode".into(), c.attention.mode_name().to_string()),
        ];
        match c.attention {
            StochasticConfig::Deterministic => {}
            StochasticConfig::Stochastic { tau } => out.push(("tau".into(), format!("{tau:?}"))),
            StochasticConfig::Hierarchical { tau1, tau2 } => {
                out.push(("tau1".into(), format!("{tau1:?}")));
                out.push(("tau2".into(), format!("{tau2:?}")));
            }
        }
        out
    }

    /// Load a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);

        // Header: key = value lines until end_header.
        let mut header = Vec::new();
        let mut line = Vec::new();
        loop {
            line.clear();
            let mut byte = [0u8; 1];
            loop {
                match r.read_exact(&mut byte) {
                    Ok(()) if byte[0] == b'\n' => break,
                    Ok(()) => line.push(byte[0]),
                    Err(_) => {
                        return Err(Error::Checkpoint("truncated header".into()));
                    }
                }
            }
            let text = String::from_utf8(line.clone())
                .map_err(|_| Error::Checkpoint("non-UTF8 header".into()))?;
            if text.trim() == "end_header" {
                break;
            }
            let (k, v) = text
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line: {text}")))?;
            header.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| -> Result<String> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
        };
        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        };
        let attention = match get("mode")?.as_str() {
            "deterministic" => StochasticConfig::Deterministic,
            "stochastic" => StochasticConfig::Stochastic {
                tau: parse_f64("tau")?,
            },
            "hierarchical" => StochasticConfig::Hierarchical {
                tau1: parse_f64("tau1")?,
                tau2: parse_f64("tau2")?,
            },
            other => return Err(Error::Checkpoint(format!("unknown mode {other}"))),
        };
        let config = ModelConfig {
            num_layers: parse_usize("num_layers")?,
            num_heads: parse_usize("num_heads")?,
            emb_dim: parse_usize("emb_dim")?,
            ffn_hidden_dim: parse_usize("ffn_hidden_dim")?,
            vocab_size: parse_usize("vocab_size")?,
            max_seq_len: parse_usize("max_seq_len")?,
            num_classes: parse_usize("num_classes")?,
            dropout_rate: parse_f64("dropout_rate")?,
            attention,
            centroid_count: parse_usize("centroid_count")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad seed".into()))?,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

        // Build the skeleton, then overwrite every parameter from blocks.
        let mut rng = RngStream::named(config.seed, "model-init");
        let mut model = TransformerClassifier::<T>::init(&config, &mut rng)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut blocks: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint("corrupt block name length".into()));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Checkpoint("truncated block name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("non-UTF8 block name".into()))?;
            r.read_exact(&mut len4)
                .map_err(|_| Error::Checkpoint("truncated block rank".into()))?;
            let ndim = u32::from_le_bytes(len4) as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint("corrupt block rank".into()));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut d8 = [0u8; 8];
                r.read_exact(&mut d8)
                    .map_err(|_| Error::Checkpoint("truncated block shape".into()))?;
                shape.push(u64::from_le_bytes(d8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut v8 = [0u8; 8];
                r.read_exact(&mut v8)
                    .map_err(|_| Error::Checkpoint("truncated block data".into()))?;
                let v = f64::from_le_bytes(v8);
                if !v.is_finite() {
                    return Err(Error::Checkpoint(format!("non-finite value in {name}")));
                }
                data.push(T::from_f64_c(v));
            }
            blocks.push((name, shape, data));
        }

        let mut remaining: Vec<&(String, Vec<usize>, Vec<T>)> = blocks.iter().collect();
        let mut load_err: Option<Error> = None;
        model.visit_params_mut(|name, t| {
            if load_err.is_some() {
                return;
            }
            match remaining.iter().position(|(n, _, _)| n == name) {
                Some(pos) => {
                    let (_, shape, data) = remaining.remove(pos);
                    if shape != t.shape() {
                        load_err = Some(Error::Checkpoint(format!(
                            "shape mismatch for {name}: file {shape:?} vs model {:?}",
                            t.shape()
                        )));
                        return;
                    }
                    t.data_mut().copy_from_slice(data);
                }
                None => {
                    load_err = Some(Error::Checkpoint(format!("missing parameter block {name}")));
                }
            }
        });
        if let Some(e) = load_err {
            return Err(e);
        }
        if let Some((name, _, _)) = remaining.first() {
            return Err(Error::Checkpoint(format!("unexpected parameter block {name}")));
        }
        Ok(model)
    }
}
