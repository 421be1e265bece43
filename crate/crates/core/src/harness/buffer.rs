use std::collections::VecDeque;

use rand::Rng;

use crate::envs::Transition;
use crate::numerics::Tensor;
use crate::worldmodel::{Normalizer, TrajectorySegment, WorldModelError};

/// Ring of real transitions plus running normalization statistics.
///
/// Statistics see every transition ever pushed, including ones the ring has
/// since evicted. Nothing synthetic may be pushed here.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    normalizer: Normalizer,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            normalizer: Normalizer::new(state_dim, action_dim),
            pushed: 0,
        }
    }

    pub fn push(&mut self, tr: Transition) {
        self.normalizer.observe(&tr.state, &tr.action, tr.reward);
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
        self.pushed += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions ever pushed.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn get(&self, k: usize) -> Option<&Transition> {
        self.items.get(k)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Whether the `h` stored transitions from `k` are consecutive steps of
    /// one episode.
    pub fn is_window(&self, k: usize, h: usize) -> bool {
        if h == 0 || k + h > self.items.len() {
            return false;
        }
        let first = &self.items[k];
        (1..h).all(|j| {
            let tr = &self.items[k + j];
            tr.episode == first.episode && tr.t == first.t + j
        })
    }

    /// Start indices of every valid `h`-step window.
    pub fn window_starts(&self, h: usize) -> Vec<usize> {
        if h == 0 || self.items.len() < h {
            return Vec::new();
        }
        // run[k] = length of the consecutive run ending at k
        let mut starts = Vec::new();
        let mut run = 0usize;
        for k in 0..self.items.len() {
            let linked = k > 0 && {
                let (a, b) = (&self.items[k - 1], &self.items[k]);
                a.episode == b.episode && a.t + 1 == b.t
            };
            run = if linked { run + 1 } else { 1 };
            if run >= h {
                starts.push(k + 1 - h);
            }
        }
        starts
    }

    /// The segment made of the `h` transitions from `k`; `None` if they span
    /// an episode boundary or run past the end.
    pub fn segment_at(&self, k: usize, h: usize) -> Option<TrajectorySegment> {
        if !self.is_window(k, h) {
            return None;
        }
        let ds = self.items[k].state.len();
        let da = self.items[k].action.len();
        let mut states = Tensor::zeros((h + 1, ds));
        let mut actions = Tensor::zeros((h, da));
        let mut rewards = Vec::with_capacity(h);
        for j in 0..h {
            let tr = &self.items[k + j];
            states.row_mut(j).iter_mut().zip(&tr.state).for_each(|(o, v)| *o = *v);
            actions.row_mut(j).iter_mut().zip(&tr.action).for_each(|(o, v)| *o = *v);
            rewards.push(tr.reward);
        }
        let last = &self.items[k + h - 1];
        states.row_mut(h).iter_mut().zip(&last.next_state).for_each(|(o, v)| *o = *v);
        // continuous tasks only truncate, so the bootstrap state is never absorbing
        TrajectorySegment::new(states, actions, rewards, false).ok()
    }

    /// `count` windows drawn uniformly with replacement.
    pub fn sample_segments(
        &self,
        count: usize,
        h: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<TrajectorySegment>, WorldModelError> {
        let starts = self.window_starts(h);
        if starts.is_empty() {
            return Err(WorldModelError::Segment(format!(
                "buffer of {} transitions holds no {h}-step window",
                self.len()
            )));
        }
        Ok((0..count)
            .map(|_| {
                let k = starts[rng.gen_range(0..starts.len())];
                self.segment_at(k, h).expect("window checked")
            })
            .collect())
    }

    /// `count × d_s` start states drawn uniformly from stored transitions.
    pub fn sample_starts(&self, count: usize, rng: &mut impl Rng) -> Tensor {
        let ds = self.normalizer.state.dim();
        let mut out = Tensor::zeros((count, ds));
        if self.items.is_empty() {
            return out;
        }
        for r in 0..count {
            let tr = &self.items[rng.gen_range(0..self.items.len())];
            out.row_mut(r).iter_mut().zip(&tr.state).for_each(|(o, v)| *o = *v);
        }
        out
    }

    /// `n` transitions drawn uniformly, stacked as `(states, actions, rewards)`.
    pub fn sample_transitions(&self, n: usize, rng: &mut impl Rng) -> (Tensor, Tensor, Vec<f64>) {
        let ds = self.normalizer.state.dim();
        let da = self.normalizer.action.dim();
        let mut s = Tensor::zeros((n, ds));
        let mut a = Tensor::zeros((n, da));
        let mut r = Vec::with_capacity(n);
        for k in 0..n {
            let tr = &self.items[rng.gen_range(0..self.items.len())];
            s.row_mut(k).iter_mut().zip(&tr.state).for_each(|(o, v)| *o = *v);
            a.row_mut(k).iter_mut().zip(&tr.action).for_each(|(o, v)| *o = *v);
            r.push(tr.reward);
        }
        (s, a, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(episode: u64, t: usize, x: f64) -> Transition {
        Transition {
            state: vec![x],
            action: vec![-x],
            reward: x * 0.5,
            next_state: vec![x + 1.0],
            done: false,
            episode,
            t,
        }
    }

    #[test]
    fn windows_stop_at_episode_boundaries() {
        let mut b = ReplayBuffer::new(100, 1, 1);
        for t in 0..4 {
            b.push(tr(0, t, t as f64));
        }
        for t in 0..3 {
            b.push(tr(1, t, 10.0 + t as f64));
        }
        assert_eq!(b.window_starts(3), vec![0, 1, 4]);
        assert!(b.segment_at(2, 3).is_none());
        let seg = b.segment_at(1, 3).unwrap();
        assert_eq!(seg.states.column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(seg.actions.column(0).to_vec(), vec![-1.0, -2.0, -3.0]);
        assert_eq!(seg.rewards, vec![0.5, 1.0, 1.5]);
        assert!(!seg.terminal);
    }

    #[test]
    fn ring_evicts_oldest_but_keeps_stats() {
        let mut b = ReplayBuffer::new(3, 1, 1);
        for t in 0..5 {
            b.push(tr(0, t, t as f64));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().t, 2);
        assert_eq!(b.normalizer().state.count, 5);
        assert_eq!(b.total_pushed(), 5);
    }

    #[test]
    fn empty_buffer_has_no_segments() {
        let b = ReplayBuffer::new(10, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_segments(4, 2, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn sampled_segments_never_span_episodes(
            lengths in prop::collection::vec(1usize..7, 1..12),
            capacity in 3usize..40,
            h in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut b = ReplayBuffer::new(capacity, 1, 1);
            for (e, len) in lengths.iter().enumerate() {
                for t in 0..*len {
                    // state encodes (episode, t) so a crossing is detectable
                    b.push(tr(e as u64, t, (e * 100 + t) as f64));
                }
            }
            prop_assert!(b.len() <= capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match b.sample_segments(20, h, &mut rng) {
                Ok(segs) => {
                    for seg in segs {
                        let xs = seg.states.column(0).to_vec();
                        let ep = (xs[0] / 100.0).floor();
                        for w in xs.windows(2) {
                            prop_assert_eq!(w[1], w[0] + 1.0);
                        }
                        prop_assert!(xs[..h].iter().all(|x| (x / 100.0).floor() == ep));
                    }
                }
                Err(_) => prop_assert!(b.window_starts(h).is_empty()),
            }
            for k in b.window_starts(h) {
                prop_assert!(b.is_window(k, h));
            }
        }
    }
}
