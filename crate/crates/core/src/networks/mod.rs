//! Representation, action embedding, transformer dynamics and prediction
//! heads, plus the attention masks that tie them to unrolls and trees.
//!
//! Every forward has two forms: a tape form (`*_on`) used for training and
//! gradient checks, and a plain form that builds a throwaway tape and returns
//! values. Both run the same code, so planning and training agree bit for bit.

mod encoding;
mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{masked_softmax, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use encoding::sinusoidal_table;
pub use mask::mask_from_parents;
pub use mask::{build_causal_mask, build_tree_mask, AttentionMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attention mask: {0}")]
    Mask(String),
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("token depth {depth} outside 1..={max_depth}")]
    Depth { depth: usize, max_depth: usize },
    #[error("invalid network config: {0}")]
    Config(String),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Width of every latent and token.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub repr_hidden: usize,
    pub head_hidden: usize,
    /// Deepest token depth the positional table covers.
    pub max_depth: usize,
    /// Min-max rescale each dynamics output to `[0, 1]`.
    pub scale_latents: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            layers: 2,
            ffn_hidden: 128,
            repr_hidden: 128,
            head_hidden: 64,
            max_depth: 64,
            scale_latents: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.d_model < 2 {
            return fail(format!("d_model must be >= 2, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "heads ({}) must be >= 1 and divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.ffn_hidden == 0 || self.repr_hidden == 0 || self.head_hidden == 0 {
            return fail("hidden widths must be >= 1".into());
        }
        if self.max_depth == 0 {
            return fail("max_depth must be >= 1".into());
        }
        Ok(())
    }
}

/// Latent state vector of width `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent(Vec<f64>);

impl Latent {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub reward: f64,
    pub prior: Vec<f64>,
}

/// Embedded action tokens (root excluded) with their depths.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub depths: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// A contiguous block of rows that attend only among themselves under `mask`.
#[derive(Clone, Debug)]
pub struct Segment {
    pub start: usize,
    pub mask: AttentionMask,
}

/// Head outputs on a tape: `value` and `reward` are `n × 1`, `logits` `n × |A|`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub value: Var,
    pub reward: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    repr: Mlp,
    embedding: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    value: Mlp,
    reward: Mlp,
    policy: Mlp,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                if zero {
                    0.0
                } else {
                    self.rng.random_range(-limit..limit)
                }
            })
            .collect();
        Linear {
            w: self.store.add(
                format!("{name}.w"),
                Tensor::new(vec![fan_in, fan_out], w).expect("dims"),
            ),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, out: usize, zero_out: bool) -> Mlp {
        Mlp {
            hidden: self.linear(&format!("{name}.hidden"), input, hidden, false),
            out: self.linear(&format!("{name}.out"), hidden, out, zero_out),
        }
    }

    fn constant(&mut self, name: String, d: usize, value: f64) -> ParamId {
        self.store
            .add(name, Tensor::new(vec![d], vec![value; d]).expect("dims"))
    }
}

/// All learned weights plus the fixed positional table.
#[derive(Clone, Debug)]
pub struct NetworkBundle {
    config: NetworkConfig,
    obs_dim: usize,
    num_actions: usize,
    params: ParamStore,
    layout: Layout,
    depth_table: Tensor,
}

impl NetworkBundle {
    /// Fresh weights drawn from `seed`. Prediction output layers start at
    /// zero, so an untrained bundle predicts value 0, reward 0 and a uniform
    /// prior.
    pub fn new(
        config: NetworkConfig,
        obs_dim: usize,
        num_actions: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || num_actions == 0 {
            return Err(NetworkError::Config(
                "observation width and action count must be >= 1".into(),
            ));
        }
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let repr = init.mlp("repr", obs_dim, config.repr_hidden, d, false);
        let table: Vec<f64> = (0..num_actions * d)
            .map(|_| init.rng.random_range(-1.0..1.0))
            .collect();
        let embedding = init.store.add(
            "action_embedding",
            Tensor::new(vec![num_actions, d], table).expect("dims"),
        );
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("dynamics.{l}");
                Block {
                    ln1_g: init.constant(format!("{p}.ln1.gain"), d, 1.0),
                    ln1_b: init.constant(format!("{p}.ln1.bias"), d, 0.0),
                    q: init.linear(&format!("{p}.attn.q"), d, d, false),
                    k: init.linear(&format!("{p}.attn.k"), d, d, false),
                    v: init.linear(&format!("{p}.attn.v"), d, d, false),
                    o: init.linear(&format!("{p}.attn.o"), d, d, false),
                    ln2_g: init.constant(format!("{p}.ln2.gain"), d, 1.0),
                    ln2_b: init.constant(format!("{p}.ln2.bias"), d, 0.0),
                    ff: init.mlp(&format!("{p}.ffn"), d, config.ffn_hidden, d, false),
                }
            })
            .collect();
        let lnf_g = init.constant("dynamics.ln_final.gain".into(), d, 1.0);
        let lnf_b = init.constant("dynamics.ln_final.bias".into(), d, 0.0);
        let value = init.mlp("head.value", d, config.head_hidden, 1, true);
        let reward = init.mlp("head.reward", d, config.head_hidden, 1, true);
        let policy = init.mlp("head.policy", d, config.head_hidden, num_actions, true);
        let depth_table = sinusoidal_table(config.max_depth, d);
        Ok(Self {
            config,
            obs_dim,
            num_actions,
            params,
            layout: Layout {
                repr,
                embedding,
                blocks,
                lnf_g,
                lnf_b,
                value,
                reward,
                policy,
            },
            depth_table,
        })
    }

    /// Bundle with the given weights, which must match the layout `config`
    /// implies.
    pub fn with_params(
        config: NetworkConfig,
        obs_dim: usize,
        num_actions: usize,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut bundle = Self::new(config, obs_dim, num_actions, 0)?;
        bundle.params.load_from(params)?;
        Ok(bundle)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear_on(&self, tape: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn mlp_on(&self, tape: &mut Tape, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear_on(tape, x, m.hidden)?;
        let h = tape.gelu(h);
        self.linear_on(tape, h, m.out)
    }

    /// Observations (`B × obs_dim`) to root latents (`B × d_model`).
    pub fn represent_on(&self, tape: &mut Tape, obs: Var) -> Result<Var> {
        let cols = tape.value(obs).cols();
        if cols != self.obs_dim {
            return Err(NetworkError::Shape {
                what: "observation width",
                expected: self.obs_dim,
                actual: cols,
            });
        }
        self.mlp_on(tape, obs, self.layout.repr)
    }

    /// Action tokens: embedding row plus the depth encoding.
    pub fn action_tokens_on(
        &self,
        tape: &mut Tape,
        actions: &[usize],
        depths: &[usize],
    ) -> Result<Var> {
        let pe = self.depth_rows(actions, depths)?;
        let table = tape.param(&self.params, self.layout.embedding);
        let emb = tape.gather_rows(table, actions)?;
        let pe = tape.input(pe);
        Ok(tape.add(emb, pe)?)
    }

    fn depth_rows(&self, actions: &[usize], depths: &[usize]) -> Result<Tensor> {
        if actions.len() != depths.len() {
            return Err(NetworkError::Shape {
                what: "depths per action",
                expected: actions.len(),
                actual: depths.len(),
            });
        }
        if actions.is_empty() {
            return Err(NetworkError::Shape {
                what: "action count",
                expected: 1,
                actual: 0,
            });
        }
        if let Some(&action) = actions.iter().find(|&&a| a >= self.num_actions) {
            return Err(NetworkError::ActionOutOfRange {
                action,
                num_actions: self.num_actions,
            });
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(depths.len() * d);
        for &depth in depths {
            if depth == 0 || depth > self.config.max_depth {
                return Err(NetworkError::Depth {
                    depth,
                    max_depth: self.config.max_depth,
                });
            }
            data.extend_from_slice(self.depth_table.row(depth));
        }
        Ok(Tensor::new(vec![depths.len(), d], data)?)
    }

    /// Runs the transformer stack over `x` (`n × d_model`). `segments` tile the
    /// rows in order; attention never crosses a segment boundary.
    pub fn dynamics_on(&self, tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<Var> {
        let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
        if d != self.config.d_model {
            return Err(NetworkError::Shape {
                what: "token width",
                expected: self.config.d_model,
                actual: d,
            });
        }
        let mut next = 0;
        for seg in segments {
            if seg.start != next {
                return Err(NetworkError::Mask(format!(
                    "segment starts at row {} but row {next} is uncovered",
                    seg.start
                )));
            }
            next += seg.mask.len();
        }
        if next != n {
            return Err(NetworkError::Shape {
                what: "rows covered by attention masks",
                expected: n,
                actual: next,
            });
        }

        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        for block in &self.layout.blocks {
            let g1 = tape.param(&self.params, block.ln1_g);
            let b1 = tape.param(&self.params, block.ln1_b);
            let normed = tape.layer_norm(h, g1, b1)?;
            let q = self.linear_on(tape, normed, block.q)?;
            let k = self.linear_on(tape, normed, block.k)?;
            let v = self.linear_on(tape, normed, block.v)?;
            let mut seg_out = Vec::with_capacity(segments.len());
            for seg in segments {
                let (qs, ks, vs) = if segments.len() == 1 {
                    (q, k, v)
                } else {
                    let len = seg.mask.len();
                    (
                        tape.slice_rows(q, seg.start, len)?,
                        tape.slice_rows(k, seg.start, len)?,
                        tape.slice_rows(v, seg.start, len)?,
                    )
                };
                let mut head_out = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let (qh, kh, vh) = if heads == 1 {
                        (qs, ks, vs)
                    } else {
                        (
                            tape.slice_cols(qs, hd * dh, dh)?,
                            tape.slice_cols(ks, hd * dh, dh)?,
                            tape.slice_cols(vs, hd * dh, dh)?,
                        )
                    };
                    let scores = tape.matmul_nt(qh, kh)?;
                    let scores = tape.scale(scores, scale);
                    let weights = tape.masked_softmax(scores, seg.mask.shared())?;
                    head_out.push(tape.matmul(weights, vh)?);
                }
                seg_out.push(if heads == 1 {
                    head_out[0]
                } else {
                    tape.concat_cols(&head_out)?
                });
            }
            let attn = if segments.len() == 1 {
                seg_out[0]
            } else {
                tape.concat_rows(&seg_out)?
            };
            let attn = self.linear_on(tape, attn, block.o)?;
            h = tape.add(h, attn)?;

            let g2 = tape.param(&self.params, block.ln2_g);
            let b2 = tape.param(&self.params, block.ln2_b);
            let normed = tape.layer_norm(h, g2, b2)?;
            let ff = self.mlp_on(tape, normed, block.ff)?;
            h = tape.add(h, ff)?;
        }
        let gf = tape.param(&self.params, self.layout.lnf_g);
        let bf = tape.param(&self.params, self.layout.lnf_b);
        let out = tape.layer_norm(h, gf, bf)?;
        if self.config.scale_latents {
            Ok(tape.min_max_scale(out)?)
        } else {
            Ok(out)
        }
    }

    pub fn predict_on(&self, tape: &mut Tape, latents: Var) -> Result<HeadOutputs> {
        let cols = tape.value(latents).cols();
        if cols != self.config.d_model {
            return Err(NetworkError::Shape {
                what: "latent width",
                expected: self.config.d_model,
                actual: cols,
            });
        }
        Ok(HeadOutputs {
            value: self.mlp_on(tape, latents, self.layout.value)?,
            reward: self.mlp_on(tape, latents, self.layout.reward)?,
            logits: self.mlp_on(tape, latents, self.layout.policy)?,
        })
    }

    pub fn represent(&self, observation: &[f64]) -> Result<Latent> {
        let mut tape = Tape::new();
        let obs = tape.input(Tensor::new(
            vec![1, observation.len()],
            observation.to_vec(),
        )?);
        let z = self.represent_on(&mut tape, obs)?;
        Ok(Latent(tape.value(z).to_vec()))
    }

    pub fn embed_actions(&self, actions: &[usize], depths: &[usize]) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let t = self.action_tokens_on(&mut tape, actions, depths)?;
        Ok(TokenSequence {
            tokens: tape.value(t).clone(),
            depths: depths.to_vec(),
        })
    }

    /// One latent per token, root first. `mask` covers the root plus every
    /// action token.
    pub fn dynamics_forward(
        &self,
        root: &Latent,
        tokens: &TokenSequence,
        mask: &AttentionMask,
    ) -> Result<Vec<Latent>> {
        let d = self.config.d_model;
        if root.len() != d {
            return Err(NetworkError::Shape {
                what: "root latent width",
                expected: d,
                actual: root.len(),
            });
        }
        if mask.len() != tokens.len() + 1 {
            return Err(NetworkError::Shape {
                what: "mask size (tokens + root)",
                expected: tokens.len() + 1,
                actual: mask.len(),
            });
        }
        let mut tape = Tape::new();
        let r = tape.input(Tensor::new(vec![1, d], root.0.clone())?);
        let x = if tokens.is_empty() {
            r
        } else {
            let t = tape.input(tokens.tokens.clone());
            tape.concat_rows(&[r, t])?
        };
        let out = self.dynamics_on(
            &mut tape,
            x,
            &[Segment {
                start: 0,
                mask: mask.clone(),
            }],
        )?;
        let out = tape.value(out);
        Ok((0..out.rows())
            .map(|i| Latent(out.row(i).to_vec()))
            .collect())
    }

    pub fn predict(&self, latent: &Latent) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(latent))?.remove(0))
    }

    pub fn predict_batch(&self, latents: &[Latent]) -> Result<Vec<Prediction>> {
        let d = self.config.d_model;
        if let Some(bad) = latents.iter().find(|l| l.len() != d) {
            return Err(NetworkError::Shape {
                what: "latent width",
                expected: d,
                actual: bad.len(),
            });
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let data = latents.iter().flat_map(|l| l.0.iter().copied()).collect();
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(vec![latents.len(), d], data)?);
        let heads = self.predict_on(&mut tape, z)?;
        let priors = masked_softmax(tape.value(heads.logits), None)?;
        let (value, reward) = (tape.value(heads.value), tape.value(heads.reward));
        Ok((0..latents.len())
            .map(|i| Prediction {
                value: value.data()[i],
                reward: reward.data()[i],
                prior: priors.row(i).to_vec(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, finite_diff_check_params};

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 12,
            repr_hidden: 10,
            head_hidden: 6,
            max_depth: 16,
            scale_latents: false,
        }
    }

    /// Perturbs every parameter so zero-initialized heads produce signal.
    fn randomized(seed: u64) -> NetworkBundle {
        let mut net = NetworkBundle::new(small_config(), 5, 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let t = net.params().get(id);
            let vals = t
                .data()
                .iter()
                .map(|v| v + rng.random_range(-0.3..0.3))
                .collect();
            let shape = t.shape().to_vec();
            net.params_mut()
                .set(id, Tensor::new(shape, vals).unwrap())
                .unwrap();
        }
        net
    }

    fn obs(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn represent_is_deterministic_and_checks_width() {
        let net = randomized(1);
        assert_eq!(
            net.represent(&obs(2)).unwrap(),
            net.represent(&obs(2)).unwrap()
        );
        assert!(net
            .represent(&[0.0; 5])
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| v.is_finite()));
        assert!(matches!(
            net.represent(&[0.0; 4]),
            Err(NetworkError::Shape { .. })
        ));
    }

    #[test]
    fn fresh_heads_predict_uniform_zero() {
        let net = NetworkBundle::new(small_config(), 5, 3, 9).unwrap();
        let p = net.predict(&Latent::new(vec![0.0; 8])).unwrap();
        assert_eq!(p.value, 0.0);
        assert_eq!(p.reward, 0.0);
        for &q in &p.prior {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_predict_matches_single_predicts_exactly() {
        let net = randomized(3);
        let latents: Vec<Latent> = (0..6).map(|s| net.represent(&obs(s)).unwrap()).collect();
        let batch = net.predict_batch(&latents).unwrap();
        for (l, b) in latents.iter().zip(&batch) {
            let single = net.predict(l).unwrap();
            assert_eq!(&single, b);
            assert!((b.prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(b.prior.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn embedding_is_additive_in_depth() {
        let net = randomized(4);
        let seq = net.embed_actions(&[1, 1, 1], &[1, 4, 1]).unwrap();
        assert_eq!(seq.tokens.row(0), seq.tokens.row(2));
        let pe = sinusoidal_table(16, 8);
        for c in 0..8 {
            let diff = seq.tokens.row(0)[c] - seq.tokens.row(1)[c];
            let want = pe.row(1)[c] - pe.row(4)[c];
            assert!((diff - want).abs() < 1e-12);
        }
        assert!(matches!(
            net.embed_actions(&[3], &[1]),
            Err(NetworkError::ActionOutOfRange { action: 3, .. })
        ));
        assert!(matches!(
            net.embed_actions(&[0], &[0]),
            Err(NetworkError::Depth { .. })
        ));
    }

    #[test]
    fn root_only_forward_returns_one_latent() {
        let net = randomized(5);
        let root = net.represent(&obs(1)).unwrap();
        let empty = TokenSequence {
            tokens: Tensor::zeros(vec![0, 8]),
            depths: vec![],
        };
        let out = net
            .dynamics_forward(&root, &empty, &build_causal_mask(1).unwrap())
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 8);
    }

    #[test]
    fn swapping_independent_siblings_swaps_outputs() {
        let net = randomized(6);
        let root = net.represent(&obs(3)).unwrap();
        let mask = mask_from_parents(&[None, Some(0), Some(0)]).unwrap();
        let a = net
            .dynamics_forward(&root, &net.embed_actions(&[0, 2], &[1, 1]).unwrap(), &mask)
            .unwrap();
        let b = net
            .dynamics_forward(&root, &net.embed_actions(&[2, 0], &[1, 1]).unwrap(), &mask)
            .unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[2]);
        assert_eq!(a[2], b[1]);
    }

    #[test]
    fn non_ancestor_tokens_do_not_affect_outputs() {
        let net = randomized(7);
        let root = net.represent(&obs(4)).unwrap();
        // 0 -> 1 -> 3, 0 -> 2
        let mask = mask_from_parents(&[None, Some(0), Some(0), Some(1)]).unwrap();
        let seq = net.embed_actions(&[0, 1, 2], &[1, 1, 2]).unwrap();
        let base = net.dynamics_forward(&root, &seq, &mask).unwrap();
        let mut zeroed = seq.tokens.to_vec();
        zeroed[8..16].iter_mut().for_each(|v| *v = 0.0);
        let seq2 = TokenSequence {
            tokens: Tensor::new(vec![3, 8], zeroed).unwrap(),
            depths: seq.depths.clone(),
        };
        let out = net.dynamics_forward(&root, &seq2, &mask).unwrap();
        assert_eq!(out[0], base[0]);
        assert_eq!(out[1], base[1]);
        assert_eq!(out[3], base[3]);
        assert_ne!(out[2], base[2]);
    }

    #[test]
    fn causal_unroll_matches_per_prefix_forwards() {
        let net = randomized(8);
        let root = net.represent(&obs(5)).unwrap();
        let actions = [2, 0, 1, 1, 2];
        let depths: Vec<usize> = (1..=actions.len()).collect();
        let full = net
            .dynamics_forward(
                &root,
                &net.embed_actions(&actions, &depths).unwrap(),
                &build_causal_mask(actions.len() + 1).unwrap(),
            )
            .unwrap();
        for k in 1..=actions.len() {
            let prefix = net
                .dynamics_forward(
                    &root,
                    &net.embed_actions(&actions[..k], &depths[..k]).unwrap(),
                    &build_causal_mask(k + 1).unwrap(),
                )
                .unwrap();
            assert_eq!(prefix[k], full[k], "position {k}");
        }
    }

    #[test]
    fn segmented_forward_matches_separate_forwards() {
        let net = randomized(9);
        let roots: Vec<Latent> = (0..2).map(|s| net.represent(&obs(s)).unwrap()).collect();
        let seqs = [
            net.embed_actions(&[0, 1], &[1, 2]).unwrap(),
            net.embed_actions(&[2, 2], &[1, 2]).unwrap(),
        ];
        let mask = build_causal_mask(3).unwrap();
        let mut tape = Tape::new();
        let mut rows = Vec::new();
        for (r, s) in roots.iter().zip(&seqs) {
            rows.push(tape.input(Tensor::new(vec![1, 8], r.as_slice().to_vec()).unwrap()));
            rows.push(tape.input(s.tokens.clone()));
        }
        let x = tape.concat_rows(&rows).unwrap();
        let segs = [
            Segment {
                start: 0,
                mask: mask.clone(),
            },
            Segment {
                start: 3,
                mask: mask.clone(),
            },
        ];
        let out = net.dynamics_on(&mut tape, x, &segs).unwrap();
        let out = tape.value(out).clone();
        for b in 0..2 {
            let single = net.dynamics_forward(&roots[b], &seqs[b], &mask).unwrap();
            for k in 0..3 {
                assert_eq!(out.row(3 * b + k), single[k].as_slice());
            }
        }
        // gaps in the tiling are rejected
        let bad = [Segment {
            start: 0,
            mask: mask.clone(),
        }];
        assert!(net.dynamics_on(&mut tape, x, &bad).is_err());
    }

    #[test]
    fn representation_gradient_wrt_observation() {
        let net = randomized(10);
        let x = Tensor::new(vec![1, 5], obs(11)).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let z = net.represent_on(t, v).map_err(into_tensor)?;
                let z2 = t.mul(z, z)?;
                Ok(t.sum(z2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn full_forward_gradient_wrt_parameters() {
        let net = randomized(12);
        let o = Tensor::new(vec![1, 5], obs(13)).unwrap();
        let mask = mask_from_parents(&[None, Some(0), Some(0), Some(1)]).unwrap();
        let f = |t: &mut Tape, store: &ParamStore| {
            let mut n = net.clone();
            n.params_mut().load_from(store)?;
            let ov = t.input(o.clone());
            let root = n.represent_on(t, ov).map_err(into_tensor)?;
            let toks = n
                .action_tokens_on(t, &[0, 2, 1], &[1, 1, 2])
                .map_err(into_tensor)?;
            let x = t.concat_rows(&[root, toks])?;
            let seg = [Segment {
                start: 0,
                mask: mask.clone(),
            }];
            let z = n.dynamics_on(t, x, &seg).map_err(into_tensor)?;
            let h = n.predict_on(t, z).map_err(into_tensor)?;
            let target = Tensor::new(vec![4, 1], vec![0.3, -0.2, 0.5, 1.0]).unwrap();
            let a = t.mse(h.value, target.clone(), &[1.0; 4])?;
            let b = t.mse(h.reward, target, &[1.0; 4])?;
            let pt = Tensor::new(vec![4, 3], [0.2, 0.3, 0.5].repeat(4)).unwrap();
            let c = t.soft_cross_entropy(h.logits, pt, &[1.0; 4])?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        };
        let err = finite_diff_check_params(f, net.params(), 1e-5, 6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn into_tensor(e: NetworkError) -> TensorError {
        match e {
            NetworkError::Tensor(t) => t,
            other => TensorError::Invalid(other.to_string()),
        }
    }

    #[test]
    fn with_params_rejects_foreign_layouts() {
        let a = NetworkBundle::new(small_config(), 5, 3, 1).unwrap();
        assert!(NetworkBundle::with_params(small_config(), 5, 3, a.params()).is_ok());
        assert!(NetworkBundle::with_params(small_config(), 5, 4, a.params()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = NetworkConfig {
            heads: 3,
            ..small_config()
        };
        assert!(matches!(
            NetworkBundle::new(bad, 5, 3, 0),
            Err(NetworkError::Config(_))
        ));
    }
}
