//! Per-sequence KV storage: one shared store per hybrid block, written by
//! the block's full layer, and one ring buffer per sparse layer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HybridStack, LayerRole, ModelConfig};
use crate::tensor::Tensor;

/// Bytes of one `f64` scalar, the actual storage width.
pub const STORAGE_BYTES: usize = 8;

/// Read-only view of a shared store at the moment it was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvHandle {
    pub block: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
struct SharedStore {
    owner: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    len: usize,
}

/// Fixed-capacity FIFO of the last `capacity` key/value rows.
#[derive(Clone, Debug)]
pub struct RingBuffer {
    capacity: usize,
    row: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Slot of the oldest row.
    head: usize,
    len: usize,
    /// Rows ever appended.
    total: usize,
}

impl RingBuffer {
    pub fn new(capacity: usize, row: usize) -> Self {
        Self { capacity, row, k: vec![0.0; capacity * row], v: vec![0.0; capacity * row], head: 0, len: 0, total: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Absolute position of the oldest retained row.
    pub fn start(&self) -> usize {
        self.total - self.len
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        let slot = (self.head + self.len) % self.capacity;
        self.k[slot * self.row..(slot + 1) * self.row].copy_from_slice(k);
        self.v[slot * self.row..(slot + 1) * self.row].copy_from_slice(v);
        if self.len == self.capacity {
            self.head = (self.head + 1) % self.capacity;
        } else {
            self.len += 1;
        }
        self.total += 1;
    }

    /// Retained rows, oldest first, as flat `k` and `v` buffers.
    pub fn contents(&self) -> (Vec<f64>, Vec<f64>) {
        let mut k = Vec::with_capacity(self.len * self.row);
        let mut v = Vec::with_capacity(self.len * self.row);
        for i in 0..self.len {
            let slot = (self.head + i) % self.capacity;
            k.extend_from_slice(&self.k[slot * self.row..(slot + 1) * self.row]);
            v.extend_from_slice(&self.v[slot * self.row..(slot + 1) * self.row]);
        }
        (k, v)
    }
}

/// Gathered rows with their absolute positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Gathered {
    pub k: Tensor,
    pub v: Tensor,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct KvArena {
    roles: Vec<LayerRole>,
    kv_heads: usize,
    head_dim: usize,
    block_size: usize,
    shared: Vec<SharedStore>,
    /// Indexed by layer; `None` for full layers.
    rings: Vec<Option<RingBuffer>>,
}

impl KvArena {
    pub fn new(cfg: &ModelConfig, stack: &HybridStack) -> Self {
        let row = cfg.n_kv_heads * cfg.head_dim;
        let shared = stack
            .full_layers()
            .into_iter()
            .map(|owner| SharedStore { owner, ..Default::default() })
            .collect();
        let rings = stack
            .roles
            .iter()
            .map(|r| (!r.is_full()).then(|| RingBuffer::new(cfg.window, row)))
            .collect();
        Self {
            roles: stack.roles.clone(),
            kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
            block_size: cfg.block_size,
            shared,
            rings,
        }
    }

    fn row(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    fn check_rows(&self, op: &'static str, k: &Tensor, v: &Tensor) -> Result<usize> {
        if k.shape() != v.shape() || k.rank() != 3 || k.shape()[1..] != [self.kv_heads, self.head_dim] {
            return Err(Error::shape(
                op,
                format!("K {:?}, V {:?} for {} kv heads of {}", k.shape(), v.shape(), self.kv_heads, self.head_dim),
            ));
        }
        Ok(k.dim(0))
    }

    fn block_of(&self, layer: usize) -> Result<usize> {
        let role = self.roles.get(layer).ok_or_else(|| Error::invalid("KvArena", format!("no layer {layer}")))?;
        let owner = match *role {
            LayerRole::Full => layer,
            LayerRole::Sparse { full_layer } => full_layer,
        };
        Ok(self.shared.iter().position(|s| s.owner == owner).expect("every full layer owns a store"))
    }

    /// Appends rows to `block`'s shared store. Only that block's full layer
    /// (`writer`) may call this.
    pub fn append_full(&mut self, writer: usize, block: usize, k: &Tensor, v: &Tensor) -> Result<KvHandle> {
        let blocks = self.shared.len();
        let store = self.shared.get(block).ok_or(Error::BlockOutOfRange { block, blocks })?;
        if store.owner != writer {
            return Err(Error::NotOwner { writer, target: format!("shared store of block {block}") });
        }
        let n = self.check_rows("append_full", k, v)?;
        let store = &mut self.shared[block];
        store.k.extend_from_slice(k.data());
        store.v.extend_from_slice(v.data());
        store.len += n;
        Ok(KvHandle { block, len: store.len })
    }

    /// Appends rows to sparse layer `layer`'s ring buffer. Only that layer
    /// (`writer`) may call this.
    pub fn window_append(&mut self, writer: usize, layer: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        if writer != layer || !matches!(self.rings.get(layer), Some(Some(_))) {
            return Err(Error::NotOwner { writer, target: format!("window cache of layer {layer}") });
        }
        self.check_rows("window_append", k, v)?;
        let row = self.row();
        let ring = self.rings[layer].as_mut().expect("checked above");
        for (kr, vr) in k.data().chunks(row).zip(v.data().chunks(row)) {
            ring.push(kr, vr);
        }
        Ok(())
    }

    /// Current handle on the store that `reader`'s block shares.
    pub fn handle_for(&self, reader: usize) -> Result<KvHandle> {
        let block = self.block_of(reader)?;
        Ok(KvHandle { block, len: self.shared[block].len })
    }

    /// Checks that `handle` belongs to `reader`'s own hybrid block.
    pub fn check_reader(&self, reader: usize, handle: KvHandle) -> Result<()> {
        let own = self.block_of(reader)?;
        if own != handle.block {
            return Err(Error::NotOwner { writer: reader, target: format!("shared store of block {}", handle.block) });
        }
        if handle.len > self.shared[own].len {
            return Err(Error::invalid("KvArena", "handle newer than its store"));
        }
        Ok(())
    }

    /// All rows of a shared store visible through `handle` as `[len × kv_heads × d]`.
    pub fn shared_kv(&self, handle: KvHandle) -> Result<(Tensor, Tensor)> {
        let store = self
            .shared
            .get(handle.block)
            .ok_or(Error::BlockOutOfRange { block: handle.block, blocks: self.shared.len() })?;
        let n = handle.len * self.row();
        let shape = [handle.len, self.kv_heads, self.head_dim];
        Ok((Tensor::new(&shape, store.k[..n].to_vec())?, Tensor::new(&shape, store.v[..n].to_vec())?))
    }

    /// Concatenates the given key blocks in ascending order, truncating the
    /// last one at the handle's length.
    pub fn gather_blocks(&self, handle: KvHandle, blocks: &[usize]) -> Result<Gathered> {
        let b = self.block_size;
        let nblocks = handle.len.div_ceil(b);
        let mut sorted = blocks.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let store = &self.shared[handle.block];
        let row = self.row();
        let (mut k, mut v, mut positions) = (Vec::new(), Vec::new(), Vec::new());
        for &j in &sorted {
            if j >= nblocks {
                return Err(Error::BlockOutOfRange { block: j, blocks: nblocks });
            }
            let range = j * b..((j + 1) * b).min(handle.len);
            k.extend_from_slice(&store.k[range.start * row..range.end * row]);
            v.extend_from_slice(&store.v[range.start * row..range.end * row]);
            positions.extend(range);
        }
        let shape = [positions.len(), self.kv_heads, self.head_dim];
        Ok(Gathered { k: Tensor::new(&shape, k)?, v: Tensor::new(&shape, v)?, positions })
    }

    pub fn ring(&self, layer: usize) -> Result<&RingBuffer> {
        match self.rings.get(layer) {
            Some(Some(r)) => Ok(r),
            _ => Err(Error::invalid("KvArena", format!("layer {layer} has no window cache"))),
        }
    }

    /// Retained window rows of `layer` as tensors, plus the absolute position
    /// of the first one.
    pub fn window_kv(&self, layer: usize) -> Result<(Tensor, Tensor, usize)> {
        let ring = self.ring(layer)?;
        let (k, v) = ring.contents();
        let shape = [ring.len(), self.kv_heads, self.head_dim];
        Ok((Tensor::new(&shape, k)?, Tensor::new(&shape, v)?, ring.start()))
    }

    /// Cached rows held for `layer`: its block's store for a full layer, its
    /// ring buffer for a sparse one.
    pub fn cached_tokens(&self, layer: usize) -> Result<usize> {
        match self.roles.get(layer) {
            Some(LayerRole::Full) => Ok(self.shared[self.block_of(layer)?].len),
            Some(LayerRole::Sparse { .. }) => Ok(self.ring(layer)?.len()),
            None => Err(Error::invalid("KvArena", format!("no layer {layer}"))),
        }
    }

    /// Tokens processed so far (the length of the first shared store).
    pub fn len(&self) -> usize {
        self.shared.first().map_or(0, |s| s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes of live cache data: logical rows × 2 (K and V) × `f64` width.
    pub fn resident_bytes(&self) -> usize {
        let row_bytes = self.row() * 2 * STORAGE_BYTES;
        let shared: usize = self.shared.iter().map(|s| s.len).sum();
        let rings: usize = self.rings.iter().flatten().map(RingBuffer::len).sum();
        (shared + rings) * row_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub layer: usize,
    pub role: char,
    pub cached_tokens: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layout: String,
    pub context_len: usize,
    pub element_bytes: usize,
    pub window: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerMemory>,
    pub full_layers: usize,
    pub sparse_layers: usize,
    /// Bytes if every layer cached the whole context.
    pub baseline_bytes: usize,
    /// Bytes of the hybrid layout.
    pub hybrid_bytes: usize,
    pub reduction_ratio: f64,
}

/// Analytic KV footprint of `cfg`'s layout at `context_len` tokens.
pub fn memory_report(cfg: &ModelConfig, context_len: usize, element_bytes: usize) -> Result<MemoryReport> {
    let stack = cfg.stack()?;
    let per_token = cfg.n_kv_heads * cfg.head_dim * 2 * element_bytes;
    let layers: Vec<LayerMemory> = stack
        .roles
        .iter()
        .enumerate()
        .map(|(layer, role)| {
            let cached_tokens = if role.is_full() { context_len } else { context_len.min(cfg.window) };
            LayerMemory { layer, role: role.letter(), cached_tokens, bytes: cached_tokens * per_token }
        })
        .collect();
    let hybrid_bytes = layers.iter().map(|l| l.bytes).sum();
    let baseline_bytes = stack.len() * context_len * per_token;
    let full_layers = stack.num_blocks();
    Ok(MemoryReport {
        layout: stack.pattern(),
        context_len,
        element_bytes,
        window: cfg.window,
        kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
        full_layers,
        sparse_layers: stack.len() - full_layers,
        layers,
        baseline_bytes,
        hybrid_bytes,
        reduction_ratio: if hybrid_bytes == 0 { 1.0 } else { baseline_bytes as f64 / hybrid_bytes as f64 },
    })
}

impl MemoryReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }
}

fn human(bytes: usize) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "layout {} ({} full, {} sparse), context {}, window {}, {} kv heads x {}, {} B/elem",
            self.layout,
            self.full_layers,
            self.sparse_layers,
            self.context_len,
            self.window,
            self.kv_heads,
            self.head_dim,
            self.element_bytes
        )?;
        writeln!(f, "{:>5}  {:>4}  {:>12}  {:>16}  {:>12}", "layer", "role", "tokens", "bytes", "size")?;
        for l in &self.layers {
            writeln!(f, "{:>5}  {:>4}  {:>12}  {:>16}  {:>12}", l.layer, l.role, l.cached_tokens, l.bytes, human(l.bytes))?;
        }
        writeln!(f, "{:<24}{:>16}  {:>12}", "all-full baseline", self.baseline_bytes, human(self.baseline_bytes))?;
        writeln!(f, "{:<24}{:>16}  {:>12}", "hybrid", self.hybrid_bytes, human(self.hybrid_bytes))?;
        write!(f, "reduction ratio {:.4}x", self.reduction_ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, start: f64) -> Tensor {
        Tensor::new(&[n, 1, 2], (0..n * 2).map(|i| start + i as f64).collect()).unwrap()
    }

    #[test]
    fn ring_keeps_last_w() {
        let mut r = RingBuffer::new(4, 1);
        for t in 1..=6 {
            r.push(&[t as f64], &[-(t as f64)]);
        }
        assert_eq!(r.contents().0, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.start(), 2);
    }

    #[test]
    fn ownership_enforced() {
        let cfg = ModelConfig { n_kv_heads: 1, head_dim: 2, ..ModelConfig::tiny() };
        let stack = cfg.stack().unwrap();
        let mut arena = KvArena::new(&cfg, &stack);
        let x = rows(3, 0.0);
        assert!(arena.append_full(1, 0, &x, &x).is_err());
        assert!(arena.window_append(0, 1, &x, &x).is_err());
        assert!(arena.window_append(0, 0, &x, &x).is_err());
        let h = arena.append_full(0, 0, &x, &x).unwrap();
        assert_eq!(h.len, 3);
        arena.window_append(1, 1, &x, &x).unwrap();
        assert!(arena.check_reader(3, h).is_err());
        arena.check_reader(2, h).unwrap();
    }

    #[test]
    fn gather_truncates_ragged_block() {
        let cfg = ModelConfig { n_kv_heads: 1, head_dim: 2, block_size: 64, ..ModelConfig::tiny() };
        let stack = cfg.stack().unwrap();
        let mut arena = KvArena::new(&cfg, &stack);
        let x = rows(10, 0.0);
        let h = arena.append_full(0, 0, &x, &x).unwrap();
        let g = arena.gather_blocks(h, &[0]).unwrap();
        assert_eq!(g.positions, (0..10).collect::<Vec<_>>());
        assert!(arena.gather_blocks(h, &[1]).is_err());
    }

    #[test]
    fn geometry_80b_ratio() {
        let r = memory_report(&ModelConfig::geometry_80b(), 32768, 2).unwrap();
        assert_eq!(r.full_layers, 5);
        assert!((r.reduction_ratio - 49.0 * 32768.0 / (5.0 * 32768.0 + 44.0 * 128.0)).abs() < 1e-12);
    }
}
