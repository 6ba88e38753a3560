//! Cross-stream channel interaction through two feature memories.
//!
//! Each stream keeps a fixed-capacity FIFO of flattened bottleneck channels.
//! A selected channel of one stream looks up its most similar stored vector in
//! its own memory; the *other* stream then attends to those retrievals, so
//! labeled features are perturbed by unlabeled memories and vice versa.
//! Tokens are channels: `K` tokens of length `L = d·h·w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::router::ChannelMask;
use crate::tensor::{Op, SeededRng, Tape, Tensor, Var};

pub const W_Q: &str = "bci.w_q";
pub const W_K: &str = "bci.w_k";
pub const W_V: &str = "bci.w_v";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    None,
    /// Labeled memories perturb the unlabeled stream only.
    L2u,
    /// Unlabeled memories perturb the labeled stream only.
    U2l,
    Both,
}

impl Direction {
    pub fn perturbs_labeled(self) -> bool {
        matches!(self, Direction::U2l | Direction::Both)
    }

    pub fn perturbs_unlabeled(self) -> bool {
        matches!(self, Direction::L2u | Direction::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BciViews {
    Weak,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BciConfig {
    pub direction: Direction,
    pub d_proj: usize,
    pub queue_capacity: usize,
    pub views: BciViews,
}

impl Default for BciConfig {
    fn default() -> Self {
        BciConfig { direction: Direction::Both, d_proj: 32, queue_capacity: 2560, views: BciViews::All }
    }
}

impl BciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_proj == 0 {
            return Err(Error::Config("bci.d_proj must be ≥ 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("bci.queue_capacity must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Adds the attention projections for token length `l`.
pub fn init_attention(params: &mut ParamSet, l: usize, d_proj: usize, rng: &mut SeededRng) {
    params.insert(W_Q, fan_in_uniform(&[l, d_proj], l, rng));
    params.insert(W_K, fan_in_uniform(&[l, d_proj], l, rng));
    params.insert(W_V, fan_in_uniform(&[l, l], l, rng));
}

/// Ring buffer of equal-length vectors with first-in-first-out eviction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    entry_len: usize,
    data: Vec<f64>,
    write_cursor: usize,
    fill_count: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, entry_len: usize) -> Result<Self> {
        if capacity == 0 || entry_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "queue needs positive capacity and entry length, got {capacity} × {entry_len}"
            )));
        }
        Ok(FeatureQueue { capacity, entry_len, data: vec![0.0; capacity * entry_len], write_cursor: 0, fill_count: 0 })
    }

    /// Full queue of standard-normal vectors.
    pub fn random(capacity: usize, entry_len: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut q = Self::new(capacity, entry_len)?;
        for x in q.data.iter_mut() {
            *x = rng.normal();
        }
        q.fill_count = capacity;
        Ok(q)
    }

    /// Rebuilds a queue from its raw parts (checkpoint restore).
    pub fn from_parts(data: Tensor, write_cursor: usize, fill_count: usize) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::Format(format!("queue storage must be 2-D, got {:?}", data.shape())));
        }
        let (capacity, entry_len) = (data.shape()[0], data.shape()[1]);
        if capacity == 0 || entry_len == 0 || write_cursor >= capacity || fill_count > capacity {
            return Err(Error::Format(format!(
                "queue state cursor={write_cursor} fill={fill_count} inconsistent with {capacity} × {entry_len}"
            )));
        }
        Ok(FeatureQueue { capacity, entry_len, data: data.into_data(), write_cursor, fill_count })
    }

    pub fn storage(&self) -> Tensor {
        Tensor::new(vec![self.capacity, self.entry_len], self.data.clone()).expect("queue shape")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entry_len(&self) -> usize {
        self.entry_len
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn entry(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.entry_len..(slot + 1) * self.entry_len]
    }

    /// Physical slots of live entries, oldest first.
    pub fn live_slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = (self.write_cursor + self.capacity - self.fill_count) % self.capacity;
        (0..self.fill_count).map(move |i| (start + i) % self.capacity)
    }

    /// Appends a copy of `v`, evicting the oldest entry when full.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.entry_len {
            return Err(Error::shape("enqueue", format!("entry length {} vs queue {}", v.len(), self.entry_len)));
        }
        let at = self.write_cursor * self.entry_len;
        self.data[at..at + self.entry_len].copy_from_slice(v);
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        self.fill_count = (self.fill_count + 1).min(self.capacity);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedFeatures {
    /// `[K, L]`; row `k` is a copy of slot `source_indices[k]`.
    pub f_q: Tensor,
    pub source_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// For each row of `f_sub`, the live queue entry of highest cosine
/// similarity. Ties go to the lowest physical slot.
pub fn retrieve(f_sub: &Tensor, q: &FeatureQueue) -> Result<RetrievedFeatures> {
    if f_sub.rank() != 2 || f_sub.shape()[1] != q.entry_len {
        return Err(Error::shape(
            "retrieve",
            format!("queries {:?} vs entry length {}", f_sub.shape(), q.entry_len),
        ));
    }
    if q.fill_count == 0 {
        return Err(Error::EmptyQueue);
    }
    let l = q.entry_len;
    let mut slots: Vec<usize> = q.live_slots().collect();
    slots.sort_unstable();
    let norms: Vec<f64> = slots.iter().map(|&s| norm(q.entry(s))).collect();
    let k = f_sub.shape()[0];
    let mut source_indices = Vec::with_capacity(k);
    let mut similarities = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k * l);
    for query in f_sub.data().chunks(l) {
        let nq = norm(query);
        let mut best = (f64::NEG_INFINITY, 0);
        for (&slot, &ne) in slots.iter().zip(&norms) {
            let sim = if nq == 0.0 || ne == 0.0 {
                0.0
            } else {
                query.iter().zip(q.entry(slot)).map(|(x, y)| x * y).sum::<f64>() / (nq * ne)
            };
            if sim > best.0 {
                best = (sim, slot);
            }
        }
        similarities.push(best.0);
        source_indices.push(best.1);
        rows.extend_from_slice(q.entry(best.1));
    }
    Ok(RetrievedFeatures { f_q: Tensor::new(vec![k, l], rows)?, source_indices, similarities })
}

/// `softmax(Q(F_sub)·K(F_q)ᵀ/√d)·V(F_q) + F_sub` on `[K, L]` tokens.
/// Returns the perturbed tokens and the `K × K` attention matrix.
pub fn cross_attend_weights(tape: &mut Tape, f_sub: Var, f_q: &Tensor, p: &Bound) -> Result<(Var, Var)> {
    let s = tape.value(f_sub).shape().to_vec();
    if s.len() != 2 || f_q.shape() != s.as_slice() {
        return Err(Error::shape("cross_attend", format!("F_sub {s:?} vs F_q {:?}", f_q.shape())));
    }
    let wq = p.get(W_Q)?;
    let d = tape.value(wq).shape()[1];
    let fq = tape.constant(f_q.clone());
    let q = tape.matmul(f_sub, wq)?;
    let kk = tape.matmul(fq, p.get(W_K)?)?;
    let v = tape.matmul(fq, p.get(W_V)?)?;
    let kt = tape.transpose(kk)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(attn, v)?;
    Ok((tape.add(mixed, f_sub)?, attn))
}

pub fn cross_attend(tape: &mut Tape, f_sub: Var, f_q: &Tensor, p: &Bound) -> Result<Var> {
    Ok(cross_attend_weights(tape, f_sub, f_q, p)?.0)
}

/// `F̃ = F̃_sub ⊙ R + F ⊙ (1 − R)`: selected channels replaced, the rest copied.
pub fn reinsert(tape: &mut Tape, f: Var, f_sub: Var, mask: &ChannelMask) -> Result<Var> {
    if mask.k == 0 {
        return Ok(f);
    }
    let sub_c = tape.value(f_sub).shape().get(1).copied();
    if sub_c != Some(mask.k) {
        return Err(Error::shape("reinsert", format!("F̃_sub has {sub_c:?} channels, mask selects {}", mask.k)));
    }
    tape.apply(Op::ScatterChannels { indices: mask.indices.clone() }, &[f, f_sub])
}

/// One stream's routed bottleneck.
#[derive(Clone, Debug)]
pub struct Selection {
    pub mask: ChannelMask,
    /// `[B, K, d, h, w]`.
    pub sub: Var,
}

/// Per-item retrievals of one stream from its own memory, `[B, K, L]`.
pub fn retrieve_batch(sub: &Tensor, q: &FeatureQueue) -> Result<Tensor> {
    let s = sub.shape();
    let (b, k) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * k * l);
    for item in sub.data().chunks(k * l) {
        let r = retrieve(&Tensor::new(vec![k, l], item.to_vec())?, q)?;
        out.extend(r.f_q.into_data());
    }
    Tensor::new(vec![b, k, l], out)
}

fn item(t: &Tensor, b: usize) -> Tensor {
    let (k, l) = (t.shape()[1], t.shape()[2]);
    Tensor::new(vec![k, l], t.data()[b * k * l..(b + 1) * k * l].to_vec()).expect("item shape")
}

/// Attends each item of `sub` to `memories[b % B_mem]` and reinserts.
fn perturb(tape: &mut Tape, f: Var, sel: &Selection, memories: &Tensor, p: &Bound) -> Result<Var> {
    let s = tape.value(sel.sub).shape().to_vec();
    let (b, k) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    let bm = memories.shape()[0];
    if memories.shape()[1..] != [k, l] {
        return Err(Error::shape("interact", format!("memories {:?} vs tokens [{k}, {l}]", memories.shape())));
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let mut ranges = vec![(i, i + 1)];
        ranges.extend(s[1..].iter().map(|&n| (0, n)));
        let tok = tape.slice(sel.sub, &ranges)?;
        let tok = tape.reshape(tok, &[k, l])?;
        let out = cross_attend(tape, tok, &item(memories, i % bm), p)?;
        let mut shape = s.clone();
        shape[0] = 1;
        items.push(tape.reshape(out, &shape)?);
    }
    let tilde = if items.len() == 1 { items[0] } else { tape.concat(&items, 0)? };
    reinsert(tape, f, tilde, &sel.mask)
}

/// Retrievals consumed by one interaction call, kept so the exact same
/// lookups can be replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrievals {
    /// Labeled queries against the labeled memory, `[B_l, K, L]`.
    pub from_labeled: Option<Tensor>,
    /// Unlabeled queries against the unlabeled memory, `[B_u, K, L]`.
    pub from_unlabeled: Option<Tensor>,
}

pub struct Interaction {
    pub f_l: Var,
    pub f_u: Var,
    pub retrievals: Retrievals,
}

/// Perturbs labeled features with unlabeled memories and unlabeled features
/// with labeled memories, per `direction`. Item `b` of one stream pairs with
/// item `b mod B_other` of the other. Passing `frozen` reuses earlier
/// retrievals instead of querying the memories.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_interact(
    tape: &mut Tape,
    (f_l, f_u): (Var, Var),
    (sel_l, sel_u): (&Selection, &Selection),
    (q_l, q_u): (&FeatureQueue, &FeatureQueue),
    p: &Bound,
    direction: Direction,
    frozen: Option<&Retrievals>,
) -> Result<Interaction> {
    let (sl, su) = (tape.value(f_l).shape(), tape.value(f_u).shape());
    if sl.len() != 5 || su.len() != 5 || sl[1..] != su[1..] {
        return Err(Error::shape("bidirectional_interact", format!("F^l {sl:?} vs F^u {su:?}")));
    }
    let lookup = |tape: &Tape, sel: &Selection, q: &FeatureQueue, f: Option<&Option<Tensor>>| -> Result<Tensor> {
        match f {
            Some(Some(t)) => Ok(t.clone()),
            Some(None) => Err(Error::InvalidArgument("frozen retrievals missing a stream".into())),
            None => retrieve_batch(tape.value(sel.sub), q),
        }
    };
    let mut retrievals = Retrievals { from_labeled: None, from_unlabeled: None };
    let mut out_l = f_l;
    let mut out_u = f_u;
    if direction.perturbs_labeled() {
        let mem = lookup(tape, sel_u, q_u, frozen.map(|r| &r.from_unlabeled))?;
        out_l = perturb(tape, f_l, sel_l, &mem, p)?;
        retrievals.from_unlabeled = Some(mem);
    }
    if direction.perturbs_unlabeled() {
        let mem = lookup(tape, sel_l, q_l, frozen.map(|r| &r.from_labeled))?;
        out_u = perturb(tape, f_u, sel_u, &mem, p)?;
        retrievals.from_labeled = Some(mem);
    }
    Ok(Interaction { f_l: out_l, f_u: out_u, retrievals })
}

/// Appends `mask ⊙ channel` for every row of `f_sub` (`[K, L]`, detached).
pub fn enqueue(q: &mut FeatureQueue, f_sub: &Tensor, target_mask: &Tensor) -> Result<()> {
    let l = q.entry_len();
    if f_sub.rank() != 2 || f_sub.shape()[1] != l || target_mask.numel() != l {
        return Err(Error::shape(
            "enqueue",
            format!("features {:?}, mask {:?}, entry length {l}", f_sub.shape(), target_mask.shape()),
        ));
    }
    let mut row = vec![0.0; l];
    for ch in f_sub.data().chunks(l) {
        for ((r, &x), &m) in row.iter_mut().zip(ch).zip(target_mask.data()) {
            *r = x * m;
        }
        q.push(&row)?;
    }
    Ok(())
}
