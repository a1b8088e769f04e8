//! The text-only caption model for zero-shot captioning: a bare toy LM
//! with a learned input projection from the aligner embedding space. At
//! training time the prefix is the caption's own text-branch embedding;
//! at inference the audio branch (after projection decoding) replaces it.

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::lm::{self, LmCfg, LmSession};
use crate::params::{rng_for, ParamStore};
use crate::tensor::Matrix;
use crate::trainer::Adam;
use crate::vocab::Tokenizer;

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub cfg: LmCfg,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
}

impl CaptionModel {
    /// `prefix_dim` is the aligner embedding width the input projection
    /// maps into the LM space.
    pub fn new(prefix_dim: usize, embed_dim: usize, blocks: usize, heads: usize, seed: u64) -> Self {
        let tokenizer = Tokenizer::tone_char_v1();
        let cfg = LmCfg {
            vocab_size: tokenizer.vocab_size(),
            embed_dim,
            blocks,
            heads,
            prefix_in: Some(prefix_dim),
        };
        let mut store = ParamStore::new();
        lm::add_lm_params(&mut store, seed, &cfg);
        CaptionModel {
            cfg,
            store,
            tokenizer,
        }
    }

    pub fn decode_greedy(&self, prefix_raw: &Matrix, prompt: &[usize], max_len: usize) -> String {
        let mut sess = LmSession::new(&self.store, &self.cfg, None);
        let mut tokens_in = prompt.to_vec();
        tokens_in.push(self.tokenizer.bos());
        let mut logits = sess.prefill(Some(prefix_raw), &tokens_in);
        let mut tokens = Vec::new();
        for _ in 0..max_len {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best == self.tokenizer.eos() {
                break;
            }
            tokens.push(best);
            logits = sess.feed_token(best);
        }
        self.tokenizer.detokenize(&tokens)
    }
}

/// One caption-reconstruction example: the conditioning embedding (text
/// branch at train time), the rendered retrieval prompt, and the caption.
#[derive(Clone, Debug)]
pub struct CaptionExample {
    pub prefix: Matrix,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Teacher-forced training of the caption model. Everything is trainable,
/// including the prefix projection.
pub fn train_caption_lm(
    model: &mut CaptionModel,
    examples: &[CaptionExample],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Contract("caption training set is empty".into()));
    }
    model.store.mark_trainable_all();
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng_for(seed, "caption-shuffle");
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut total_loss = 0.0;
        let mut total_count = 0usize;
        let mut grads: std::collections::BTreeMap<String, Matrix> = Default::default();
        for _ in 0..batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let prefix = g.constant(ex.prefix.clone());
            let (loss, count) = lm::lm_loss_graph(
                &mut g,
                &model.store,
                &model.cfg,
                Some(prefix),
                &ex.prompt,
                &ex.target,
                (model.tokenizer.bos(), model.tokenizer.eos()),
                &mut None,
            )?;
            total_loss += g.value(loss).item() * count as f64;
            total_count += count;
            for (name, grad) in g.backward(loss) {
                let scaled = grad.scale(count as f64);
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&scaled),
                    None => {
                        grads.insert(name, scaled);
                    }
                }
            }
        }
        let batch_loss = total_loss / total_count as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v /= total_count as f64;
            }
        }
        adam.step(&mut model.store, &grads);
        losses.push(batch_loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn caption_model_memorizes_one_caption() {
        let mut model = CaptionModel::new(8, 24, 1, 2, 3);
        let mut rng = rng_for(1, "prefix");
        let prefix = Matrix::from_fn(1, 8, |_, _| rng.gen_range(-0.5..0.5));
        let target = model.tokenizer.tokenize("cat sat").unwrap();
        let ex = CaptionExample {
            prefix: prefix.clone(),
            prompt: vec![],
            target,
        };
        let losses = train_caption_lm(&mut model, &[ex], 220, 3e-3, 1, 5).unwrap();
        assert!(losses[losses.len() - 1] < 0.05, "{:?}", &losses[losses.len() - 5..]);
        let out = model.decode_greedy(&prefix, &[], 20);
        assert_eq!(out, "cat sat");
    }
}
