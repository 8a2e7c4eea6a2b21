//! Bounded FIFO store of counterexample / candidate points.

use rand::Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    /// Warm start for the inner level-set maximization at this point.
    pub theta_hat: Vec<f64>,
    /// Decay-condition violation measured when the point was inserted.
    pub violation: f64,
    pub iteration: u64,
}

/// FIFO buffer with a hard capacity; the oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct SampleBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            entries: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, entry: BufferEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn get(&self, idx: usize) -> &BufferEntry {
        &self.entries[idx]
    }

    /// Uniform minibatch of distinct indices (all of them when the buffer
    /// is smaller than the request). Partial Fisher-Yates, deterministic
    /// for a given rng state.
    pub fn minibatch_indices<R: Rng>(&self, want: usize, rng: &mut R) -> Vec<usize> {
        let n = self.entries.len();
        if n <= want {
            return (0..n).collect();
        }
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..want {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(want);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(v: f64) -> BufferEntry {
        BufferEntry {
            x: vec![v],
            theta: vec![0.0],
            theta_hat: vec![0.0],
            violation: 1.0,
            iteration: 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = SampleBuffer::new(3);
        for i in 0..5 {
            buf.push(entry(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let xs: Vec<f64> = buf.iter().map(|e| e.x[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn minibatch_distinct_and_bounded() {
        let mut buf = SampleBuffer::new(100);
        for i in 0..50 {
            buf.push(entry(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mb = buf.minibatch_indices(20, &mut rng);
        assert_eq!(mb.len(), 20);
        let mut sorted = mb.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        let all = buf.minibatch_indices(80, &mut rng);
        assert_eq!(all.len(), 50);
    }
}
