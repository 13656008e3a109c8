use crate::networks::{
    AttentionMask, Latent, NetworkBundle, NetworkError, Prediction, TokenSequence,
};
use crate::tensor::Tensor;

/// What the planner needs from a learned (or exact) model.
pub trait LatentModel {
    fn num_actions(&self) -> usize;

    /// Deepest token depth `expand` accepts.
    fn max_depth(&self) -> usize;

    /// Root token latent for `observation`, and the prediction for the
    /// root state.
    fn root(&self, observation: &[f64]) -> Result<(Latent, Prediction), NetworkError>;

    /// Latents for the root token followed by one per action token.
    /// `mask` spans the root and all tokens.
    fn expand(
        &self,
        root: &Latent,
        actions: &[usize],
        depths: &[usize],
        mask: &AttentionMask,
    ) -> Result<Vec<Latent>, NetworkError>;

    fn predict_batch(&self, latents: &[Latent]) -> Result<Vec<Prediction>, NetworkError>;
}

impl LatentModel for NetworkBundle {
    fn num_actions(&self) -> usize {
        NetworkBundle::num_actions(self)
    }

    fn max_depth(&self) -> usize {
        self.config().max_depth
    }

    /// The root prediction reads the dynamics output at position 0, the same
    /// latent the training unroll predicts from.
    fn root(&self, observation: &[f64]) -> Result<(Latent, Prediction), NetworkError> {
        let token = self.represent(observation)?;
        let mask = crate::networks::build_causal_mask(1)?;
        let s0 = self.expand(&token, &[], &[], &mask)?.remove(0);
        let pred = self.predict(&s0)?;
        Ok((token, pred))
    }

    fn expand(
        &self,
        root: &Latent,
        actions: &[usize],
        depths: &[usize],
        mask: &AttentionMask,
    ) -> Result<Vec<Latent>, NetworkError> {
        let tokens = if actions.is_empty() {
            TokenSequence {
                tokens: Tensor::zeros(vec![0, self.d_model()]),
                depths: Vec::new(),
            }
        } else {
            self.embed_actions(actions, depths)?
        };
        self.dynamics_forward(root, &tokens, mask)
    }

    fn predict_batch(&self, latents: &[Latent]) -> Result<Vec<Prediction>, NetworkError> {
        NetworkBundle::predict_batch(self, latents)
    }
}

/// Exact model of a chain: latent `[position, done, reward on arrival]`.
/// Values are 0 everywhere and priors uniform, so only search can find the
/// reward.
#[derive(Clone, Debug)]
pub struct ChainModel {
    pub length: usize,
    pub max_depth: usize,
}

impl ChainModel {
    fn step(&self, latent: &[f64], action: usize) -> Latent {
        let (pos, done) = (latent[0], latent[1]);
        if done > 0.5 {
            return Latent::new(vec![pos, 1.0, 0.0]);
        }
        let last = (self.length - 1) as f64;
        match action {
            crate::envs::ADVANCE if pos >= last => Latent::new(vec![pos, 1.0, 1.0]),
            crate::envs::ADVANCE => Latent::new(vec![pos + 1.0, 0.0, 0.0]),
            _ => Latent::new(vec![(pos - 1.0).max(0.0), 0.0, 0.0]),
        }
    }
}

impl LatentModel for ChainModel {
    fn num_actions(&self) -> usize {
        2
    }

    fn max_depth(&self) -> usize {
        self.max_depth
    }

    fn root(&self, observation: &[f64]) -> Result<(Latent, Prediction), NetworkError> {
        let pos = observation
            .iter()
            .position(|&x| x > 0.5)
            .ok_or_else(|| NetworkError::Config("chain observation has no position".into()))?;
        let latent = Latent::new(vec![pos as f64, 0.0, 0.0]);
        let pred = self.predict_batch(std::slice::from_ref(&latent))?.remove(0);
        Ok((latent, pred))
    }

    fn expand(
        &self,
        root: &Latent,
        actions: &[usize],
        _depths: &[usize],
        mask: &AttentionMask,
    ) -> Result<Vec<Latent>, NetworkError> {
        let mut out = vec![root.clone()];
        for (i, parent) in mask.parents().into_iter().enumerate().skip(1) {
            let parent = parent.expect("non-root tokens have parents");
            let next = self.step(out[parent].as_slice(), actions[i - 1]);
            out.push(next);
        }
        Ok(out)
    }

    fn predict_batch(&self, latents: &[Latent]) -> Result<Vec<Prediction>, NetworkError> {
        Ok(latents
            .iter()
            .map(|l| Prediction {
                value: 0.0,
                reward: l.as_slice()[2],
                prior: vec![0.5, 0.5],
            })
            .collect())
    }
}
