use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Layout, ModelParams};
use super::HyperParams;
use crate::diffcore::{Graph, Real, Target, Tensor, Var};
use crate::error::{Error, Result};
use crate::simenv::InteractionHistory;

/// One token of the interleaved input stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    Rating { value: f64, step: usize },
    Item { id: usize, step: usize },
}

/// Interleaved `r_0, v_0, r_1, v_1, ...` sequence. Ratings lead, so there
/// are either as many ratings as items or exactly one more (the target).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    ratings: Vec<f64>,
    items: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ratings: Vec<f64>, items: Vec<usize>) -> Result<Self> {
        if ratings.len() != items.len() && ratings.len() != items.len() + 1 {
            return Err(Error::invalid(format!(
                "{} ratings cannot interleave with {} items",
                ratings.len(),
                items.len()
            )));
        }
        if let Some(r) = ratings.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("non-finite rating {r}")));
        }
        Ok(Self { ratings, items })
    }

    /// Teacher-forcing sequence of a full history (no trailing target).
    pub fn from_history(h: &InteractionHistory) -> Self {
        Self {
            ratings: h.ratings().collect(),
            items: h.items().collect(),
        }
    }

    pub fn ratings(&self) -> &[f64] {
        &self.ratings
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.ratings.len() + self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn token(&self, pos: usize) -> Token {
        let step = pos / 2;
        if pos % 2 == 0 {
            Token::Rating {
                value: self.ratings[step],
                step,
            }
        } else {
            Token::Item {
                id: self.items[step],
                step,
            }
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.len()).map(|p| self.token(p))
    }
}

/// Builds the inference prompt: the observed history followed by the
/// target rating the next item should earn.
pub fn tokenize(history: &InteractionHistory, target: f64, hp: &HyperParams) -> Result<TokenSeq> {
    if history.len() >= hp.max_timesteps {
        return Err(Error::invalid(format!(
            "history of {} steps exceeds max_timesteps {}",
            history.len(),
            hp.max_timesteps
        )));
    }
    if let Some(v) = history.items().find(|&v| v >= hp.n_items) {
        return Err(Error::invalid(format!("item {v} outside catalogue of {}", hp.n_items)));
    }
    let mut ratings: Vec<f64> = history.ratings().collect();
    ratings.push(target);
    TokenSeq::new(ratings, history.items().collect())
}

/// Model outputs for a batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut<T> {
    /// `[batch, n_rating_tokens, n_items]` next-item logits read at every
    /// rating token.
    pub item_logits: Tensor<T>,
    /// `[batch, n_item_tokens, d]` bottleneck representation after each item.
    pub user_embeddings: Tensor<T>,
    /// `[batch, n_item_tokens - 1]` predicted rating of the following item.
    pub rating_preds: Tensor<T>,
}

/// Graph handles produced by [`build`].
pub(crate) struct Built {
    pub logits: Var,
    pub s_hat: Var,
    pub rating_pred: Option<Var>,
    pub n_ratings: usize,
    pub n_items: usize,
}

fn check_batch(hp: &HyperParams, seqs: &[TokenSeq]) -> Result<(usize, usize)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let (nr, ni) = (first.ratings.len(), first.items.len());
    if nr == 0 {
        return Err(Error::invalid("sequence without tokens"));
    }
    if nr > hp.max_timesteps {
        return Err(Error::invalid(format!(
            "sequence of {nr} steps exceeds max_timesteps {}",
            hp.max_timesteps
        )));
    }
    for s in seqs {
        if s.ratings.len() != nr || s.items.len() != ni {
            return Err(Error::invalid("sequences in a batch must share one length"));
        }
        if let Some(&v) = s.items.iter().find(|&&v| v >= hp.n_items) {
            return Err(Error::invalid(format!("item {v} outside catalogue of {}", hp.n_items)));
        }
    }
    Ok((nr, ni))
}

fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::new(vec![len, len], data).expect("square mask")
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Records the full forward pass on `g`. `rng` enables dropout.
pub(crate) fn build<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    hp: &HyperParams,
    lay: &Layout,
    seqs: &[TokenSeq],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Built> {
    let (nr, ni) = check_batch(hp, seqs)?;
    let b = seqs.len();
    let len = nr + ni;
    let (d, h, dh) = (hp.d, hp.n_heads, hp.head_dim());

    let rating_col: Vec<f64> = seqs.iter().flat_map(|s| s.ratings.iter().copied()).collect();
    let rating_col = g.constant(Tensor::from_f64(&[b * nr, 1], &rating_col)?);
    let r_emb = linear(g, rating_col, p[lay.rating_weight], p[lay.rating_bias])?;
    let parts = if ni > 0 {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
        let i_emb = g.gather(p[lay.item_embedding], &ids)?;
        g.concat(&[r_emb, i_emb])?
    } else {
        r_emb
    };
    let mut order = Vec::with_capacity(b * len);
    let mut steps = Vec::with_capacity(b * len);
    for s in 0..b {
        for pos in 0..len {
            let k = pos / 2;
            order.push(if pos % 2 == 0 { s * nr + k } else { b * nr + s * ni + k });
            steps.push(k);
        }
    }
    let tok = g.gather(parts, &order)?;
    let pos_emb = g.gather(p[lay.position_embedding], &steps)?;
    let mut x = g.add(tok, pos_emb)?;
    x = dropout(g, x, hp.dropout, rng.as_deref_mut())?;

    let mask = causal_mask::<T>(len);
    let heads = |g: &mut Graph<T>, y: Var| -> Result<Var> {
        let y = g.reshape(y, &[b, len, h, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * h, len, dh])
    };
    for (bi, blk) in lay.blocks.iter().enumerate() {
        let xin = match blk.ln {
            Some(ln) => g.layer_norm(x, p[ln[0]], p[ln[1]])?,
            None => x,
        };
        let q = linear(g, xin, p[blk.q.0], p[blk.q.1])?;
        let k = linear(g, xin, p[blk.k.0], p[blk.k.1])?;
        let v = linear(g, xin, p[blk.v.0], p[blk.v.1])?;
        let (q, k, v) = (heads(g, q)?, heads(g, k)?, heads(g, v)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add_mask(scores, &mask)?;
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, h, len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * len, d])?;
        let mut y = linear(g, ctx, p[blk.o.0], p[blk.o.1])?;
        y = dropout(g, y, hp.dropout, rng.as_deref_mut())?;
        if let Some(ln) = blk.ln {
            y = g.layer_norm(y, p[ln[2]], p[ln[3]])?;
        }
        let f = linear(g, y, p[blk.ffn_in.0], p[blk.ffn_in.1])?;
        let f = g.gelu(f);
        x = linear(g, f, p[blk.ffn_out.0], p[blk.ffn_out.1])?;
        x = dropout(g, x, hp.dropout, rng.as_deref_mut())?;
        if !g.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("activation after block {bi}")));
        }
    }

    let rating_rows: Vec<usize> = (0..b)
        .flat_map(|s| (0..nr).map(move |k| s * len + 2 * k))
        .collect();
    let hr = g.gather(x, &rating_rows)?;
    let dec_t = g.transpose(p[lay.decoder])?;
    let logits = g.matmul(hr, dec_t)?;

    let (s_hat, rating_pred) = if ni > 0 {
        let item_rows: Vec<usize> = (0..b)
            .flat_map(|s| (0..ni).map(move |k| s * len + 2 * k + 1))
            .collect();
        let hi = g.gather(x, &item_rows)?;
        let proj = g.matmul(hi, p[lay.bottleneck])?;
        let s_hat = g.tanh(proj);
        let rating_pred = if ni > 1 {
            let rows: Vec<usize> = (0..b)
                .flat_map(|s| (0..ni - 1).map(move |k| s * ni + k))
                .collect();
            let next: Vec<usize> = seqs.iter().flat_map(|s| s.items[1..].iter().copied()).collect();
            let sr = g.gather(s_hat, &rows)?;
            let e = g.gather(p[lay.item_embedding], &next)?;
            let prod = g.mul(sr, e)?;
            let ones = g.constant(Tensor::full(&[d, 1], T::one()));
            Some(g.matmul(prod, ones)?)
        } else {
            None
        };
        (s_hat, rating_pred)
    } else {
        (g.constant(Tensor::zeros(&[0, d])), None)
    };
    Ok(Built {
        logits,
        s_hat,
        rating_pred,
        n_ratings: nr,
        n_items: ni,
    })
}

/// Teacher-forcing objective: mean next-item cross-entropy at every rating
/// token that has a following item, plus (with the bottleneck) the mean
/// squared error of each predicted next rating.
pub(crate) fn loss<T: Real>(
    g: &mut Graph<T>,
    built: &Built,
    seqs: &[TokenSeq],
    bottleneck: bool,
) -> Result<Var> {
    let (nr, ni) = (built.n_ratings, built.n_items);
    if ni == 0 {
        return Err(Error::invalid("loss needs at least one item per sequence"));
    }
    let logits = if nr == ni {
        built.logits
    } else {
        let rows: Vec<usize> = (0..seqs.len())
            .flat_map(|s| (0..ni).map(move |k| s * nr + k))
            .collect();
        g.gather(built.logits, &rows)?
    };
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
    let ce = g.cross_entropy(logits, Target::Hard(targets))?;
    match (bottleneck, built.rating_pred) {
        (true, Some(pred)) => {
            let t: Vec<T> = seqs
                .iter()
                .flat_map(|s| s.ratings[1..ni].iter().map(|&r| T::from_f(r)))
                .collect();
            let mse = g.squared_error(pred, &t)?;
            g.add(ce, mse)
        }
        _ => Ok(ce),
    }
}

/// Inference forward pass (no dropout, no gradients).
pub fn forward<T: Real>(params: &ModelParams<T>, seqs: &[TokenSeq]) -> Result<ForwardOut<T>> {
    let mut g = Graph::new();
    let mut frozen = params.tensors.clone();
    for t in frozen.tensors_mut() {
        t.set_requires_grad(false);
    }
    let p = g.params(&frozen);
    let built = build(&mut g, &p, &params.hp, &params.layout(), seqs, None)?;
    let b = seqs.len();
    let (nr, ni, d) = (built.n_ratings, built.n_items, params.hp.d);
    let item_logits = Tensor::new(vec![b, nr, params.hp.n_items], g.value(built.logits).to_vec())?;
    let user_embeddings = Tensor::new(vec![b, ni, d], g.value(built.s_hat).to_vec())?;
    let rating_preds = match built.rating_pred {
        Some(r) => Tensor::new(vec![b, ni - 1], g.value(r).to_vec())?,
        None => Tensor::zeros(&[b, 0]),
    };
    Ok(ForwardOut {
        item_logits,
        user_embeddings,
        rating_preds,
    })
}

/// Batch loss computed from precomputed outputs; matches the training
/// objective exactly.
pub fn sequence_loss<T: Real>(out: &ForwardOut<T>, seqs: &[TokenSeq], bottleneck: bool) -> Result<f64> {
    let s = out.item_logits.shape();
    let (b, nr, n) = (s[0], s[1], s[2]);
    let ni = out.user_embeddings.shape()[1];
    if b != seqs.len() || ni == 0 {
        return Err(Error::invalid("outputs do not match the sequences"));
    }
    let mut ce = 0.0;
    for (si, seq) in seqs.iter().enumerate() {
        for k in 0..ni {
            let row = &out.item_logits.data()[(si * nr + k) * n..(si * nr + k + 1) * n];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64()));
            let lse = m + row.iter().map(|&x| (x.as_f64() - m).exp()).sum::<f64>().ln();
            ce += lse - row[seq.items[k]].as_f64();
        }
    }
    let mut total = ce / (b * ni) as f64;
    if bottleneck && ni > 1 {
        let preds = out.rating_preds.data();
        let mut se = 0.0;
        for (si, seq) in seqs.iter().enumerate() {
            for k in 0..ni - 1 {
                let diff = preds[si * (ni - 1) + k].as_f64() - seq.ratings[k + 1];
                se += diff * diff;
            }
        }
        total += se / (b * (ni - 1)) as f64;
    }
    Ok(total)
}

/// Softmax over the logits read at each prompt's final (target) token.
pub fn next_item_dist<T: Real>(params: &ModelParams<T>, prompts: &[TokenSeq]) -> Result<Vec<Vec<f64>>> {
    let out = forward(params, prompts)?;
    let s = out.item_logits.shape();
    let (nr, n) = (s[1], s[2]);
    Ok((0..prompts.len())
        .map(|i| {
            let row = &out.item_logits.data()[(i * nr + nr - 1) * n..(i * nr + nr) * n];
            softmax(row)
        })
        .collect())
}

pub(crate) fn softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64()));
    let e: Vec<f64> = row.iter().map(|&x| (x.as_f64() - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
