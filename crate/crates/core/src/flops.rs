//! Classical flop accounting shared by the evaluators and segment trees.
//!
//! One (p x q) * (q x s) multiply counts 2pqs flops; one (p x q) addition
//! counts pq. These are the units every cost model and every measured
//! counter in the crate uses, so predicted and measured totals are directly
//! comparable integers.

/// Flops for a dense (p x q) * (q x s) matrix multiply.
pub fn matmul(p: usize, q: usize, s: usize) -> u64 {
    2 * (p as u64) * (q as u64) * (s as u64)
}

/// Flops for a dense (p x q) elementwise addition.
pub fn add(p: usize, q: usize) -> u64 {
    (p as u64) * (q as u64)
}

/// Flops for an elementwise addition over `len` entries.
pub fn add_len(len: usize) -> u64 {
    len as u64
}

/// Flops to form a Khatri-Rao column block: one multiply per entry.
pub fn khatri_rao(rows: usize, r: usize) -> u64 {
    (rows as u64) * (r as u64)
}
