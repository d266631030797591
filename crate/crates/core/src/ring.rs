//! Simulated ring context parallelism for block-sparse attention.
//!
//! The sequence (in block order) is split into `N_cp` contiguous slices.
//! Each worker pools its own keys, the pooled keys travel around the ring
//! so every worker can score its query blocks against all key blocks, and
//! then K/V shards rotate around the ring while each worker folds them into
//! its streaming softmax.
//!
//! Shards are merged in ascending origin id no matter when they arrive, so
//! the visit order of key blocks per query row is the same as on a single
//! worker and outputs are bitwise identical for any worker count or
//! interleaving.

use std::collections::BTreeMap;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::bsa::attention::{BlockSizes, RowState};
use crate::bsa::mask::{dims4, pool_blocks, pooled_scores, select_topr, SelectionMask};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Contiguous, equal split of query and key blocks over workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub workers: usize,
    pub q_blocks: usize,
    pub k_blocks: usize,
}

impl Partition {
    pub fn new(workers: usize, q_blocks: usize, k_blocks: usize) -> Result<Self> {
        for blocks in [q_blocks, k_blocks] {
            if workers == 0 || blocks % workers != 0 {
                return Err(Error::IndivisibleWorkers { workers, blocks });
            }
        }
        Ok(Self {
            workers,
            q_blocks,
            k_blocks,
        })
    }

    pub fn q_blocks_per_worker(&self) -> usize {
        self.q_blocks / self.workers
    }

    pub fn k_blocks_per_worker(&self) -> usize {
        self.k_blocks / self.workers
    }
}

/// How workers are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// One thread, workers stepped in id order each round.
    Sequential,
    /// One thread, worker order reshuffled every round from the given seed.
    Interleaved(u64),
    /// One OS thread per worker, messages over channels.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShardPayload {
    PooledKeys(Tensor),
    KvShard { k: Tensor, v: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardMessage {
    pub origin: usize,
    pub payload: ShardPayload,
}

/// One worker's local slices, all `(b, heads, s / N_cp, d)` in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct Worker {
    pub id: usize,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerCounters {
    pub worker: usize,
    pub messages_sent: usize,
    pub messages_received: usize,
    pub shards_processed: usize,
    pub shards_skipped: usize,
    pub block_visits: usize,
    pub estimated_macs: u64,
}

fn slice_seq(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [b, h, s, d] = dims4(x, "tensor")?;
    let mut out = Vec::with_capacity(b * h * len * d);
    for bh in 0..b * h {
        out.extend_from_slice(&x.data()[(bh * s + start) * d..(bh * s + start + len) * d]);
    }
    Tensor::new(vec![b, h, len, d], out)
}

/// Joins per-worker `(b, h, s_i, d)` tensors along the sequence axis.
pub fn concat_workers(parts: &[Tensor]) -> Result<Tensor> {
    let mut acc = parts
        .first()
        .cloned()
        .ok_or_else(|| Error::DimensionMismatch("no worker outputs".into()))?;
    for p in &parts[1..] {
        acc = crate::bsa::causal::concat_seq(&acc, p)?;
    }
    Ok(acc)
}

/// Splits block-ordered Q, K, V into per-worker slices.
pub fn split_workers(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    blocks: BlockSizes,
    workers: usize,
) -> Result<(Partition, Vec<Worker>)> {
    let [_, _, sq, _] = dims4(q, "Q")?;
    let [_, _, sk, _] = dims4(k, "K")?;
    if sq % blocks.query != 0 {
        return Err(Error::IndivisibleLength { len: sq, block: blocks.query });
    }
    if sk % blocks.key != 0 {
        return Err(Error::IndivisibleLength { len: sk, block: blocks.key });
    }
    let part = Partition::new(workers, sq / blocks.query, sk / blocks.key)?;
    let q_len = part.q_blocks_per_worker() * blocks.query;
    let k_len = part.k_blocks_per_worker() * blocks.key;
    let ws = (0..workers)
        .map(|id| {
            Ok(Worker {
                id,
                q: slice_seq(q, id * q_len, q_len)?,
                k: slice_seq(k, id * k_len, k_len)?,
                v: slice_seq(v, id * k_len, k_len)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((part, ws))
}

/// Pooled keys of the worker's own key blocks.
pub fn local_pooled_keys(worker: &Worker, blocks: BlockSizes) -> Result<Tensor> {
    pool_blocks(&worker.k, blocks.key)
}

/// Per-worker logic shared by every schedule: receive an item, forward the
/// previously held one, absorb it.
trait RingNode {
    type Item: Clone + Send;
    fn absorb(&mut self, origin: usize, item: Self::Item) -> Result<()>;
}

/// Runs `N - 1` rounds of neighbour passing (worker `i` sends to `i + 1`).
/// Each node starts holding its own item, which it absorbs first.
fn run_ring<N: RingNode + Send>(
    nodes: &mut [N],
    own: Vec<N::Item>,
    schedule: Schedule,
    counters: &mut [WorkerCounters],
) -> Result<()> {
    let n = nodes.len();
    for (i, (node, item)) in nodes.iter_mut().zip(own.iter()).enumerate() {
        node.absorb(i, item.clone())?;
    }
    if n == 1 {
        return Ok(());
    }
    match schedule {
        Schedule::Sequential | Schedule::Interleaved(_) => {
            let mut rng = match schedule {
                Schedule::Interleaved(seed) => Some(SeededRng::new(seed)),
                _ => None,
            };
            let mut held: Vec<(usize, N::Item)> = own.into_iter().enumerate().collect();
            for _ in 0..n - 1 {
                let mut order: Vec<usize> = (0..n).collect();
                if let Some(rng) = rng.as_mut() {
                    for i in (1..n).rev() {
                        order.swap(i, rng.below(i + 1));
                    }
                }
                let outgoing = held.clone();
                for &i in &order {
                    let src = (i + n - 1) % n;
                    counters[src].messages_sent += 1;
                    counters[i].messages_received += 1;
                    let (origin, item) = outgoing[src].clone();
                    nodes[i].absorb(origin, item.clone())?;
                    held[i] = (origin, item);
                }
            }
            Ok(())
        }
        Schedule::Concurrent => {
            let (txs, rxs): (Vec<_>, Vec<_>) =
                (0..n).map(|_| mpsc::channel::<(usize, N::Item)>()).unzip();
            let results: Vec<Result<(usize, usize)>> = std::thread::scope(|scope| {
                let handles: Vec<_> = nodes
                    .iter_mut()
                    .zip(own)
                    .zip(rxs)
                    .enumerate()
                    .map(|(i, ((node, item), rx))| {
                        let tx = txs[(i + 1) % n].clone();
                        scope.spawn(move || -> Result<(usize, usize)> {
                            let mut current = (i, item);
                            let (mut sent, mut received) = (0, 0);
                            for _ in 0..n - 1 {
                                tx.send(current.clone())
                                    .map_err(|e| Error::Io(format!("ring send: {e}")))?;
                                sent += 1;
                                current = rx
                                    .recv()
                                    .map_err(|e| Error::Io(format!("ring recv: {e}")))?;
                                received += 1;
                                node.absorb(current.0, current.1.clone())?;
                            }
                            Ok((sent, received))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("ring worker panicked"))
                    .collect()
            });
            for (c, r) in counters.iter_mut().zip(results) {
                let (sent, received) = r?;
                c.messages_sent += sent;
                c.messages_received += received;
            }
            Ok(())
        }
    }
}

struct PoolGather {
    slots: Vec<Option<Tensor>>,
}

impl RingNode for PoolGather {
    type Item = Tensor;
    fn absorb(&mut self, origin: usize, item: Tensor) -> Result<()> {
        if let Some(Some(prev)) = self.slots.get(origin) {
            if prev.shape() != item.shape() {
                return Err(Error::DimensionMismatch("pooled shard shape changed".into()));
            }
        }
        self.slots[origin] = Some(item);
        Ok(())
    }
}

/// Gathers every worker's pooled keys on every worker, in global block
/// order, through `N_cp - 1` ring passes.
pub fn ring_gather_pooled(
    pooled: Vec<Tensor>,
    schedule: Schedule,
) -> Result<(Vec<Tensor>, Vec<WorkerCounters>)> {
    let n = pooled.len();
    if let Some(first) = pooled.first() {
        if pooled.iter().any(|p| p.shape() != first.shape()) {
            return Err(Error::DimensionMismatch("pooled shards differ in shape".into()));
        }
    }
    let mut counters: Vec<WorkerCounters> = (0..n)
        .map(|worker| WorkerCounters { worker, ..Default::default() })
        .collect();
    let mut nodes: Vec<PoolGather> = (0..n).map(|_| PoolGather { slots: vec![None; n] }).collect();
    run_ring(&mut nodes, pooled, schedule, &mut counters)?;
    let full = nodes
        .into_iter()
        .map(|node| {
            let parts: Vec<Tensor> = node.slots.into_iter().map(|s| s.expect("ring delivered all shards")).collect();
            concat_workers(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((full, counters))
}

/// Top-r mask of the worker's query blocks against all global key blocks.
pub fn local_mask(
    worker: &Worker,
    full_k_pool: &Tensor,
    r: usize,
    blocks: BlockSizes,
) -> Result<SelectionMask> {
    let q_pool = pool_blocks(&worker.q, blocks.query)?;
    select_topr(&pooled_scores(&q_pool, full_k_pool, worker.q.last_dim())?, r)
}

struct AttentionNode<'a> {
    worker: &'a Worker,
    mask: &'a SelectionMask,
    blocks: BlockSizes,
    k_blocks_per_worker: usize,
    states: Vec<RowState>,
    pending: BTreeMap<usize, (Tensor, Tensor)>,
    next_origin: usize,
    counters: WorkerCounters,
    scratch: Vec<f64>,
}

impl AttentionNode<'_> {
    fn process(&mut self, origin: usize, k: &Tensor, v: &Tensor) {
        let [b, h, sq, d] = <[usize; 4]>::try_from(self.worker.q.shape()).expect("rank 4");
        let dv = v.last_dim();
        let (nq, nk) = (self.blocks.query, self.blocks.key);
        let lo = origin * self.k_blocks_per_worker;
        let hi = lo + self.k_blocks_per_worker;
        let s_shard = self.k_blocks_per_worker * nk;
        let scale = 1.0 / (d as f64).sqrt();
        let mut visits = 0;
        for bh in 0..b * h {
            let qs = &self.worker.q.data()[bh * sq * d..(bh + 1) * sq * d];
            let ks = &k.data()[bh * s_shard * d..(bh + 1) * s_shard * d];
            let vs = &v.data()[bh * s_shard * dv..(bh + 1) * s_shard * dv];
            for qb in 0..self.mask.q_blocks() {
                let sel = self.mask.selected(bh, qb);
                let start = sel.partition_point(|&kb| kb < lo);
                let end = sel.partition_point(|&kb| kb < hi);
                for &kb in &sel[start..end] {
                    let local = kb - lo;
                    visits += 1;
                    for i in qb * nq..(qb + 1) * nq {
                        self.states[bh * sq + i].visit(
                            &qs[i * d..(i + 1) * d],
                            &ks[local * nk * d..(local + 1) * nk * d],
                            &vs[local * nk * dv..(local + 1) * nk * dv],
                            scale,
                            &mut self.scratch,
                        );
                    }
                }
            }
        }
        if visits == 0 {
            self.counters.shards_skipped += 1;
        } else {
            self.counters.shards_processed += 1;
        }
        self.counters.block_visits += visits;
        self.counters.estimated_macs += (visits * nq * nk * (d + dv)) as u64;
    }
}

impl RingNode for AttentionNode<'_> {
    type Item = (Tensor, Tensor);
    fn absorb(&mut self, origin: usize, (k, v): (Tensor, Tensor)) -> Result<()> {
        if k.shape() != self.worker.k.shape() || v.shape() != self.worker.v.shape() {
            return Err(Error::DimensionMismatch(format!(
                "kv shard from worker {origin} has shape {:?}",
                k.shape()
            )));
        }
        self.pending.insert(origin, (k, v));
        while let Some((k, v)) = self.pending.remove(&self.next_origin) {
            self.process(self.next_origin, &k, &v);
            self.next_origin += 1;
        }
        Ok(())
    }
}

/// Ring block-sparse attention; returns each worker's output slice.
pub fn ring_sparse_attention(
    workers: &[Worker],
    masks: &[SelectionMask],
    blocks: BlockSizes,
    schedule: Schedule,
) -> Result<(Vec<Tensor>, Vec<WorkerCounters>)> {
    let n = workers.len();
    if masks.len() != n {
        return Err(Error::DimensionMismatch(format!("{} masks for {n} workers", masks.len())));
    }
    let k_blocks = masks.first().map_or(0, |m| m.k_blocks());
    let part = Partition::new(n, masks.iter().map(|m| m.q_blocks()).sum(), k_blocks)?;
    let mut nodes = Vec::with_capacity(n);
    for (w, m) in workers.iter().zip(masks) {
        let [b, h, sq, _] = dims4(&w.q, "Q_i")?;
        let dv = w.v.last_dim();
        if m.q_blocks() * blocks.query != sq || m.batch() != b || m.heads() != h {
            return Err(Error::DimensionMismatch(format!("mask of worker {} does not fit its queries", w.id)));
        }
        for bh in 0..b * h {
            for qb in 0..m.q_blocks() {
                if m.selected(bh, qb).is_empty() {
                    return Err(Error::EmptySelection { bh, query_block: qb });
                }
            }
        }
        nodes.push(AttentionNode {
            worker: w,
            mask: m,
            blocks,
            k_blocks_per_worker: part.k_blocks_per_worker(),
            states: vec![RowState::new(dv); b * h * sq],
            pending: BTreeMap::new(),
            next_origin: 0,
            counters: WorkerCounters { worker: w.id, ..Default::default() },
            scratch: Vec::new(),
        });
    }
    let own = workers.iter().map(|w| (w.k.clone(), w.v.clone())).collect();
    let mut msg_counters: Vec<WorkerCounters> = (0..n)
        .map(|worker| WorkerCounters { worker, ..Default::default() })
        .collect();
    run_ring(&mut nodes, own, schedule, &mut msg_counters)?;

    let mut outputs = Vec::with_capacity(n);
    let mut counters = Vec::with_capacity(n);
    for (node, msgs) in nodes.into_iter().zip(msg_counters) {
        let [b, h, sq, _] = dims4(&node.worker.q, "Q_i")?;
        let dv = node.worker.v.last_dim();
        let mut out = vec![0.0; b * h * sq * dv];
        for (row, state) in node.states.iter().enumerate() {
            state.finish(&mut out[row * dv..(row + 1) * dv]);
        }
        outputs.push(Tensor::new(vec![b, h, sq, dv], out)?);
        counters.push(WorkerCounters {
            messages_sent: msgs.messages_sent,
            messages_received: msgs.messages_received,
            ..node.counters
        });
    }
    Ok((outputs, counters))
}

/// Everything a ring run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RingRun {
    pub partition: Partition,
    pub outputs: Vec<Tensor>,
    pub masks: Vec<SelectionMask>,
    pub gather_counters: Vec<WorkerCounters>,
    pub attention_counters: Vec<WorkerCounters>,
}

impl RingRun {
    pub fn output(&self) -> Result<Tensor> {
        concat_workers(&self.outputs)
    }

    pub fn mask(&self) -> Result<SelectionMask> {
        SelectionMask::concat_query_blocks(&self.masks)
    }

    pub fn messages_sent(&self) -> (usize, usize) {
        (
            self.gather_counters.iter().map(|c| c.messages_sent).sum(),
            self.attention_counters.iter().map(|c| c.messages_sent).sum(),
        )
    }
}

/// Full pipeline: split, pool, gather pooled keys, local top-r masks, ring
/// attention.
pub fn ring_topr_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    blocks: BlockSizes,
    r: usize,
    workers: usize,
    schedule: Schedule,
) -> Result<RingRun> {
    let (partition, ws) = split_workers(q, k, v, blocks, workers)?;
    if r == 0 || r > partition.k_blocks {
        return Err(Error::RankOutOfRange { r, n_blocks: partition.k_blocks });
    }
    let pooled = ws
        .iter()
        .map(|w| local_pooled_keys(w, blocks))
        .collect::<Result<Vec<_>>>()?;
    let (full, gather_counters) = ring_gather_pooled(pooled, schedule)?;
    let masks = ws
        .iter()
        .zip(&full)
        .map(|(w, kp)| local_mask(w, kp, r, blocks))
        .collect::<Result<Vec<_>>>()?;
    let (outputs, attention_counters) = ring_sparse_attention(&ws, &masks, blocks, schedule)?;
    Ok(RingRun {
        partition,
        outputs,
        masks,
        gather_counters,
        attention_counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsa::{sparse_attention_forward, topr_mask};
    use crate::rng::gaussian_sample;

    fn inputs(seed: u64, s: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        (
            gaussian_sample(&mut rng, &[1, 2, s, 4]).unwrap(),
            gaussian_sample(&mut rng, &[1, 2, s, 4]).unwrap(),
            gaussian_sample(&mut rng, &[1, 2, s, 4]).unwrap(),
        )
    }

    #[test]
    fn single_worker_pool_is_global_pool() {
        let (q, k, v) = inputs(1, 32);
        let blocks = BlockSizes::uniform(4);
        let (_, ws) = split_workers(&q, &k, &v, blocks, 1).unwrap();
        assert_eq!(local_pooled_keys(&ws[0], blocks).unwrap(), pool_blocks(&k, 4).unwrap());
    }

    #[test]
    fn constant_keys_pool_to_constant() {
        let (q, _, v) = inputs(2, 16);
        let k = Tensor::full(&[1, 2, 16, 4], -0.5).unwrap();
        let (_, ws) = split_workers(&q, &k, &v, BlockSizes::uniform(4), 2).unwrap();
        for w in &ws {
            let p = local_pooled_keys(w, BlockSizes::uniform(4)).unwrap();
            assert!(p.data().iter().all(|&x| x == -0.5));
        }
    }

    #[test]
    fn local_pools_concatenate_to_global() {
        let (q, k, v) = inputs(3, 32);
        let blocks = BlockSizes::uniform(4);
        let (_, ws) = split_workers(&q, &k, &v, blocks, 2).unwrap();
        let parts: Vec<Tensor> = ws.iter().map(|w| local_pooled_keys(w, blocks).unwrap()).collect();
        assert_eq!(concat_workers(&parts).unwrap(), pool_blocks(&k, 4).unwrap());
    }

    #[test]
    fn gather_message_counts_and_content() {
        let (q, k, v) = inputs(4, 64);
        let blocks = BlockSizes::uniform(4);
        let global = pool_blocks(&k, 4).unwrap();
        for n in [1, 2, 4] {
            for schedule in [Schedule::Sequential, Schedule::Interleaved(9), Schedule::Concurrent] {
                let (_, ws) = split_workers(&q, &k, &v, blocks, n).unwrap();
                let pooled = ws.iter().map(|w| local_pooled_keys(w, blocks).unwrap()).collect();
                let (full, counters) = ring_gather_pooled(pooled, schedule).unwrap();
                for f in &full {
                    assert_eq!(f, &global);
                }
                for c in &counters {
                    assert_eq!(c.messages_sent, n - 1);
                    assert_eq!(c.messages_received, n - 1);
                }
            }
        }
    }

    #[test]
    fn masks_union_to_single_worker_mask() {
        let (q, k, v) = inputs(5, 64);
        let blocks = BlockSizes::uniform(4);
        let reference = topr_mask(&q, &k, blocks, 5).unwrap();
        for n in [1, 2, 4] {
            let run = ring_topr_attention(&q, &k, &v, blocks, 5, n, Schedule::Sequential).unwrap();
            assert_eq!(run.mask().unwrap(), reference);
        }
        let run = ring_topr_attention(&q, &k, &v, blocks, 16, 4, Schedule::Sequential).unwrap();
        for m in &run.masks {
            assert!(m.rows().iter().all(|r| r.len() == 16));
        }
    }

    #[test]
    fn outputs_match_single_worker_bitwise() {
        let (q, k, v) = inputs(6, 64);
        let blocks = BlockSizes::uniform(4);
        let mask = topr_mask(&q, &k, blocks, 3).unwrap();
        let (reference, _) = sparse_attention_forward(&q, &k, &v, &mask, blocks).unwrap();
        for n in [1, 2, 4, 8] {
            for schedule in [Schedule::Sequential, Schedule::Interleaved(n as u64), Schedule::Concurrent] {
                let run = ring_topr_attention(&q, &k, &v, blocks, 3, n, schedule).unwrap();
                assert_eq!(run.output().unwrap(), reference, "N_cp = {n}, {schedule:?}");
                assert_eq!(run.messages_sent(), (n * (n - 1), n * (n - 1)));
            }
        }
    }

    #[test]
    fn unselected_shards_are_skipped() {
        // Keys of the second half are strongly anti-aligned with every query,
        // so top-1 never picks them and worker shards from that half are skipped.
        let s = 16;
        let q = Tensor::full(&[1, 1, s, 2], 1.0).unwrap();
        let k = Tensor::from_fn(&[1, 1, s, 2], |i| if i < s { 1.0 } else { -1.0 }).unwrap();
        let v = Tensor::from_fn(&[1, 1, s, 2], |i| i as f64).unwrap();
        let run = ring_topr_attention(&q, &k, &v, BlockSizes::uniform(4), 1, 2, Schedule::Sequential).unwrap();
        for c in &run.attention_counters {
            assert_eq!(c.shards_processed, 1);
            assert_eq!(c.shards_skipped, 1);
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let (q, k, _) = inputs(7, 32);
        let v = Tensor::zeros(&[1, 2, 32, 4]).unwrap();
        let run = ring_topr_attention(&q, &k, &v, BlockSizes::uniform(4), 2, 4, Schedule::Concurrent).unwrap();
        assert!(run.output().unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn indivisible_worker_count() {
        let (q, k, v) = inputs(8, 32);
        assert_eq!(
            split_workers(&q, &k, &v, BlockSizes::uniform(4), 3).unwrap_err(),
            Error::IndivisibleWorkers { workers: 3, blocks: 8 }
        );
    }
}
