use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// One environment step as seen by the agent. Actions are stored in the
/// normalized `[-1, 1]` box.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_reward: f64,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True termination: no bootstrapping past this step.
    pub terminal: bool,
    /// Last step of its episode.
    pub done: bool,
}

impl Transition {
    /// The step row `[a; r; o_next]` this transition adds to the sequence.
    pub fn row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.action.len() + 1 + self.next_obs.len());
        row.extend_from_slice(&self.action);
        row.push(self.reward);
        row.extend_from_slice(&self.next_obs);
        row
    }
}

/// `T` consecutive steps of one episode. Episodes that ended before reaching
/// `T` steps are padded by repeating their last step; `valid` counts the real
/// ones.
#[derive(Clone, Debug)]
pub struct Window {
    pub steps: Vec<Transition>,
    pub valid: usize,
    pub episode: u64,
    pub start: usize,
}

#[derive(Clone, Debug)]
struct Episode {
    id: u64,
    steps: Vec<Transition>,
    finished: bool,
}

/// Episode-structured replay memory sampling fixed-length windows that never
/// cross an episode boundary.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    seq_len: usize,
    episodes: VecDeque<Episode>,
    len: usize,
    next_id: u64,
}

impl ReplayMemory {
    /// `capacity` counts transitions; the oldest whole episode is evicted
    /// when it is exceeded.
    pub fn new(capacity: usize, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || capacity < seq_len {
            return Err(Error::config(format!(
                "replay capacity {capacity} must be at least the window length {seq_len} > 0"
            )));
        }
        Ok(ReplayMemory { capacity, seq_len, episodes: VecDeque::new(), len: 0, next_id: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Ids of the stored episodes, oldest first.
    pub fn episode_ids(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.id).collect()
    }

    pub fn push(&mut self, t: Transition) {
        let open = matches!(self.episodes.back(), Some(e) if !e.finished);
        if !open {
            self.episodes.push_back(Episode { id: self.next_id, steps: Vec::new(), finished: false });
            self.next_id += 1;
        }
        let ep = self.episodes.back_mut().expect("episode just ensured");
        ep.finished = t.done;
        ep.steps.push(t);
        self.len += 1;
        while self.len > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("nonempty");
            self.len -= old.steps.len();
        }
    }

    fn windows_in(&self, ep: &Episode) -> usize {
        let n = ep.steps.len();
        if n >= self.seq_len {
            n - self.seq_len + 1
        } else if ep.finished && n > 0 {
            1
        } else {
            0
        }
    }

    pub fn num_windows(&self) -> usize {
        self.episodes.iter().map(|e| self.windows_in(e)).sum()
    }

    /// The `index`-th eligible window in storage order.
    pub fn window(&self, mut index: usize) -> Option<Window> {
        for ep in &self.episodes {
            let w = self.windows_in(ep);
            if index < w {
                let end = (index + self.seq_len).min(ep.steps.len());
                let mut steps = ep.steps[index..end].to_vec();
                let valid = steps.len();
                let last = steps.last().cloned()?;
                steps.resize(self.seq_len, last);
                return Some(Window { steps, valid, episode: ep.id, start: index });
            }
            index -= w;
        }
        None
    }

    /// Binary snapshot of the whole memory.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.capacity as u64, self.seq_len as u64, self.next_id, self.episodes.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ep in &self.episodes {
            out.extend_from_slice(&ep.id.to_le_bytes());
            out.push(u8::from(ep.finished));
            out.extend_from_slice(&(ep.steps.len() as u64).to_le_bytes());
            for t in &ep.steps {
                out.extend_from_slice(&(t.obs.len() as u32).to_le_bytes());
                out.extend_from_slice(&(t.action.len() as u32).to_le_bytes());
                let values = t
                    .obs
                    .iter()
                    .chain(&t.prev_action)
                    .chain([&t.prev_reward])
                    .chain(&t.action)
                    .chain([&t.reward])
                    .chain(&t.next_obs);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(u8::from(t.terminal) | (u8::from(t.done) << 1));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let capacity = c.u64()? as usize;
        let seq_len = c.u64()? as usize;
        let next_id = c.u64()?;
        let n_eps = c.u64()?;
        let mut episodes = VecDeque::new();
        let mut len = 0;
        for _ in 0..n_eps {
            let id = c.u64()?;
            let finished = c.take(1)?[0] != 0;
            let n = c.u64()? as usize;
            let mut steps = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let o = c.u32()? as usize;
                let a = c.u32()? as usize;
                let v: Vec<f64> = c
                    .take(8 * (2 * o + 2 * a + 2))?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let flags = c.take(1)?[0];
                steps.push(Transition {
                    obs: v[..o].to_vec(),
                    prev_action: v[o..o + a].to_vec(),
                    prev_reward: v[o + a],
                    action: v[o + a + 1..o + 2 * a + 1].to_vec(),
                    reward: v[o + 2 * a + 1],
                    next_obs: v[o + 2 * a + 2..].to_vec(),
                    terminal: flags & 1 != 0,
                    done: flags & 2 != 0,
                });
            }
            len += steps.len();
            episodes.push_back(Episode { id, steps, finished });
        }
        if c.pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after replay memory".into()));
        }
        let m = ReplayMemory::new(capacity, seq_len).map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(ReplayMemory { episodes, len, next_id, ..m })
    }

    /// Draws `n` windows uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Window>> {
        let total = self.num_windows();
        if total == 0 {
            return Err(Error::Data("replay memory holds no eligible window".into()));
        }
        (0..n)
            .map(|_| self.window(rng.random_range(0..total)).ok_or_else(|| Error::Data("window index".into())))
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("truncated replay memory".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
