//! Momentum (EMA) copy of the model parameters and the FIFO queue of
//! momentum representations used as contrastive negatives.

use crate::model::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Exponential moving average of every base parameter, layout-identical to
/// the base set so the two can share `ModelIds`.
#[derive(Debug, Clone)]
pub struct MomentumModel {
    pub params: ParamSet,
}

impl MomentumModel {
    /// Start as an exact copy of the base parameters.
    pub fn new(base: &ParamSet) -> Self {
        MomentumModel {
            params: base.clone(),
        }
    }

    /// `p_m <- m p_m + (1 - m) p_b`, elementwise, in parameter order.
    pub fn update(&mut self, base: &ParamSet, momentum: f64) {
        assert!(
            (0.0..=1.0).contains(&momentum),
            "momentum coefficient {momentum} outside [0, 1]"
        );
        assert_eq!(self.params.len(), base.len(), "parameter sets diverged");
        for i in 0..base.len() {
            let id = ParamId(i);
            let src = base.get(id);
            let dst = self.params.get_mut(id);
            debug_assert_eq!(dst.shape(), src.shape());
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = momentum * *d + (1.0 - momentum) * *s;
            }
        }
    }
}

/// Fixed-capacity FIFO ring of unit-normalized representation rows.
///
/// Once full, each push overwrites the oldest entry. Snapshots list rows
/// oldest-first so serialization and the contrastive loss see one canonical
/// order regardless of the internal cursor.
#[derive(Debug, Clone)]
pub struct RepresentationQueue {
    dim: usize,
    capacity: usize,
    buf: Vec<f64>,
    /// Next slot to write.
    head: usize,
    len: usize,
}

impl RepresentationQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue needs positive capacity and dim");
        RepresentationQueue {
            dim,
            capacity,
            buf: vec![0.0; capacity * dim],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Push one row, normalizing it to unit length (zero rows are stored
    /// as-is rather than divided by zero).
    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row dim {} != queue dim {}", row.len(), self.dim);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let slot = &mut self.buf[self.head * self.dim..(self.head + 1) * self.dim];
        if norm > 1e-12 {
            for (d, s) in slot.iter_mut().zip(row) {
                *d = s / norm;
            }
        } else {
            slot.copy_from_slice(row);
        }
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Push every row of a matrix, top to bottom.
    pub fn push_rows(&mut self, rows: &Tensor) {
        for r in 0..rows.rows() {
            self.push(rows.row(r));
        }
    }

    /// Snapshot as a len x dim matrix, oldest row first; `None` when empty.
    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.len == 0 {
            return None;
        }
        Some(Tensor::matrix(self.len, self.dim, self.snapshot_rows()).expect("queue shape"))
    }

    /// Flat row data oldest-first, for serialization.
    pub fn snapshot_rows(&self) -> Vec<f64> {
        let start = if self.len < self.capacity { 0 } else { self.head };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for k in 0..self.len {
            let i = (start + k) % self.capacity;
            out.extend_from_slice(&self.buf[i * self.dim..(i + 1) * self.dim]);
        }
        out
    }

    /// Rebuild from a snapshot; the oldest row lands back at the front.
    pub fn restore(capacity: usize, dim: usize, rows: &[f64]) -> Self {
        assert!(rows.len() % dim == 0, "snapshot length not a multiple of dim");
        let n = rows.len() / dim;
        assert!(n <= capacity, "snapshot holds {n} rows, capacity {capacity}");
        let mut q = RepresentationQueue::new(capacity, dim);
        q.buf[..rows.len()].copy_from_slice(rows);
        q.len = n;
        q.head = n % capacity;
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_follows_the_geometric_closed_form() {
        let mut base = ParamSet::new();
        base.push("p", Tensor::vector(vec![3.0, -1.0]).unwrap());
        let mut shadow_src = ParamSet::new();
        shadow_src.push("p", Tensor::vector(vec![1.0, 4.0]).unwrap());
        let mut ema = MomentumModel::new(&shadow_src);
        let m: f64 = 0.998;
        let steps = 1000;
        for _ in 0..steps {
            ema.update(&base, m);
        }
        // x_k = c + m^k (x_0 - c)
        let mk = m.powi(steps);
        let got = ema.params.get(ParamId(0));
        for (&x0, (&c, &x)) in [1.0, 4.0]
            .iter()
            .zip([3.0, -1.0].iter().zip(got.data()))
        {
            let expect = c + mk * (x0 - c);
            assert!((x - expect).abs() <= 1e-12, "{x} vs {expect}");
        }
    }

    #[test]
    fn ema_endpoints_freeze_or_copy() {
        let mut base = ParamSet::new();
        base.push("p", Tensor::vector(vec![2.0]).unwrap());
        let mut start = ParamSet::new();
        start.push("p", Tensor::vector(vec![7.0]).unwrap());

        let mut frozen = MomentumModel::new(&start);
        frozen.update(&base, 1.0);
        assert_eq!(frozen.params.get(ParamId(0)).data(), &[7.0]);

        let mut copy = MomentumModel::new(&start);
        copy.update(&base, 0.0);
        assert_eq!(copy.params.get(ParamId(0)).data(), &[2.0]);
    }

    #[test]
    fn ema_contracts_toward_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut base = ParamSet::new();
        base.push(
            "p",
            Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let mut start = ParamSet::new();
        start.push(
            "p",
            Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let mut ema = MomentumModel::new(&start);
        let dist = |e: &MomentumModel| -> f64 {
            e.params
                .get(ParamId(0))
                .data()
                .iter()
                .zip(base.get(ParamId(0)).data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&ema);
        for _ in 0..50 {
            ema.update(&base, 0.9);
            let d = dist(&ema);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn queue_matches_a_list_oracle() {
        // Oracle: plain Vec with explicit truncation from the front.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (capacity, dim) = (5, 3);
        let mut q = RepresentationQueue::new(capacity, dim);
        let mut oracle: Vec<Vec<f64>> = Vec::new();
        for _ in 0..200 {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit: Vec<f64> = row.iter().map(|v| v / n).collect();
            q.push(&row);
            oracle.push(unit);
            if oracle.len() > capacity {
                oracle.remove(0);
            }
            assert_eq!(q.len(), oracle.len());
            let snap = q.snapshot_rows();
            let flat: Vec<f64> = oracle.iter().flatten().copied().collect();
            assert_eq!(snap, flat);
        }
    }

    #[test]
    fn queue_entries_are_unit_rows() {
        let mut q = RepresentationQueue::new(4, 2);
        q.push(&[3.0, 4.0]);
        let t = q.as_tensor().unwrap();
        assert_eq!(t.row(0), &[0.6, 0.8]);
        // A zero row cannot be normalized and is stored untouched.
        q.push(&[0.0, 0.0]);
        assert_eq!(q.as_tensor().unwrap().row(1), &[0.0, 0.0]);
    }

    #[test]
    fn queue_is_empty_until_first_push() {
        let q = RepresentationQueue::new(4, 2);
        assert!(q.is_empty());
        assert!(q.as_tensor().is_none());
    }

    #[test]
    fn snapshot_restore_roundtrips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pushes in [0usize, 3, 5, 7, 12] {
            let mut q = RepresentationQueue::new(5, 2);
            for _ in 0..pushes {
                q.push(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
            let snap = q.snapshot_rows();
            let mut r = RepresentationQueue::restore(5, 2, &snap);
            assert_eq!(r.len(), q.len());
            assert_eq!(r.snapshot_rows(), snap);
            // Restored queue keeps evicting oldest-first.
            if q.len() == q.capacity() {
                r.push(&[1.0, 0.0]);
                q.push(&[1.0, 0.0]);
                assert_eq!(r.snapshot_rows(), q.snapshot_rows());
            }
        }
    }

    #[test]
    fn push_rows_walks_top_to_bottom() {
        let mut q = RepresentationQueue::new(3, 2);
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        q.push_rows(&m);
        assert_eq!(q.snapshot_rows(), vec![1.0, 0.0, 0.0, 1.0]);
    }
}
