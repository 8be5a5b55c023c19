use std::fmt;
use std::str::FromStr;

use rand::Rng;
use vqdetect_nn::Float;

use crate::error::{Error, Result};

/// Consecutive updates without assignments after which an entry is re-seeded.
pub const DEAD_CODE_UPDATES: u32 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Bottom,
    Middle,
    Top,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Bottom, Level::Middle, Level::Top];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Bottom => "bottom",
            Level::Middle => "middle",
            Level::Top => "top",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Level::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| format!("unknown level `{s}`"))
    }
}

/// `K` code vectors of dimension `D`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub level: Level,
    pub dim: usize,
    pub entries: Vec<f32>,
    /// EMA of the number of latents assigned to each entry.
    pub usage_counts: Vec<f32>,
    /// Updates since each entry last received an assignment.
    pub idle_updates: Vec<u32>,
    /// False until the entries have been seeded from encoder outputs.
    pub initialized: bool,
}

/// Output of [`quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub indices: Vec<usize>,
    pub quantized: Vec<T>,
    /// Mean over latents of the squared distance to the chosen entry.
    pub error: f64,
}

impl Codebook {
    /// Codebook with small random entries, to be replaced by encoder outputs
    /// on the first training update.
    pub fn new(level: Level, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / dim as f64).sqrt() as f32;
        Self {
            level,
            dim,
            entries: (0..size * dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            usage_counts: vec![0.0; size],
            idle_updates: vec![0; size],
            initialized: false,
        }
    }

    pub fn from_entries(level: Level, dim: usize, entries: Vec<f32>) -> Self {
        let size = entries.len() / dim.max(1);
        Self {
            level,
            dim,
            entries,
            usage_counts: vec![0.0; size],
            idle_updates: vec![0; size],
            initialized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.usage_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usage_counts.is_empty()
    }

    pub fn entry(&self, j: usize) -> &[f32] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    /// Seeds every entry with a latent drawn uniformly from `latents`.
    pub fn init_from(&mut self, latents: &[f32], rng: &mut impl Rng) {
        let n = latents.len() / self.dim;
        if n == 0 {
            return;
        }
        for j in 0..self.len() {
            let pick = rng.gen_range(0..n);
            self.entries[j * self.dim..(j + 1) * self.dim]
                .copy_from_slice(&latents[pick * self.dim..(pick + 1) * self.dim]);
        }
        self.usage_counts.iter_mut().for_each(|c| *c = 1.0);
        self.idle_updates.iter_mut().for_each(|c| *c = 0);
        self.initialized = true;
    }

    /// EMA update from latents (rows of `dim`) and their assigned indices.
    ///
    /// With counts `n_j` and sums `s_j` of the assigned latents:
    /// `N_j ← d·N_j + (1−d)·n_j` and `e_j ← (d·N_j·e_j + (1−d)·s_j) / N_j'`.
    /// Entries without assignments keep their vector; only their count
    /// decays. Returns the number of dead entries re-seeded from `latents`.
    pub fn update_ema(&mut self, latents: &[f32], indices: &[usize], decay: f64, rng: &mut impl Rng) -> usize {
        let (k, d) = (self.len(), self.dim);
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (i, &j) in indices.iter().enumerate() {
            counts[j] += 1.0;
            for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(&latents[i * d..(i + 1) * d]) {
                *s += f64::from(v);
            }
        }
        for j in 0..k {
            let old = f64::from(self.usage_counts[j]);
            let new = decay * old + (1.0 - decay) * counts[j];
            if counts[j] > 0.0 {
                for t in 0..d {
                    let e = f64::from(self.entries[j * d + t]);
                    self.entries[j * d + t] = ((decay * old * e + (1.0 - decay) * sums[j * d + t]) / new) as f32;
                }
                self.idle_updates[j] = 0;
            } else {
                self.idle_updates[j] += 1;
            }
            self.usage_counts[j] = new as f32;
        }

        let n = indices.len();
        let mut reseeded = 0;
        if n > 0 {
            for j in 0..k {
                if self.idle_updates[j] >= DEAD_CODE_UPDATES {
                    let pick = rng.gen_range(0..n);
                    self.entries[j * d..(j + 1) * d].copy_from_slice(&latents[pick * d..(pick + 1) * d]);
                    self.usage_counts[j] = 1.0;
                    self.idle_updates[j] = 0;
                    reseeded += 1;
                }
            }
        }
        if reseeded > 0 {
            log::debug!("{} codebook: re-seeded {reseeded} dead entries", self.level);
        }
        reseeded
    }
}

/// Nearest-entry quantization of `latents`, read as rows of `codebook.dim`.
///
/// Ties go to the lowest index.
pub fn quantize<T: Float>(latents: &[T], codebook: &Codebook) -> Result<Quantized<T>> {
    if codebook.is_empty() {
        return Err(Error::InvalidParams(format!("{} codebook is empty", codebook.level)));
    }
    let d = codebook.dim;
    if d == 0 || latents.len() % d != 0 {
        return Err(Error::InvalidParams(format!(
            "{} latent values do not split into vectors of dimension {d}",
            latents.len()
        )));
    }
    let n = latents.len() / d;
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(latents.len());
    let mut total = 0.0;
    for z in latents.chunks_exact(d) {
        let (mut best, mut best_dist) = (0, f64::INFINITY);
        for j in 0..codebook.len() {
            let dist: f64 = z
                .iter()
                .zip(codebook.entry(j))
                .map(|(&a, &b)| (a.as_f64() - f64::from(b)).powi(2))
                .sum();
            if dist < best_dist {
                best = j;
                best_dist = dist;
            }
        }
        indices.push(best);
        quantized.extend(codebook.entry(best).iter().map(|&v| T::from_f64(f64::from(v))));
        total += best_dist;
    }
    Ok(Quantized {
        indices,
        quantized,
        error: if n == 0 { 0.0 } else { total / n as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(entries: &[[f32; 2]]) -> Codebook {
        Codebook::from_entries(Level::Bottom, 2, entries.iter().flatten().copied().collect())
    }

    #[test]
    fn small_cases() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let q = quantize(&[0.2f64, 0.1], &cb).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert!((q.error - 0.05).abs() < 1e-7);

        let tie = quantize(&[0.5f64, 0.5], &cb).unwrap();
        assert_eq!(tie.indices, vec![0]);

        let cb = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, -1.0]]);
        let q = quantize(&[3.0f32, -1.0], &cb).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.quantized, vec![3.0, -1.0]);
        assert_eq!(q.error, 0.0);
    }

    #[test]
    fn empty_codebook_and_bad_dims() {
        let empty = Codebook::from_entries(Level::Top, 2, vec![]);
        assert!(quantize(&[0.0f32, 0.0], &empty).is_err());
        assert!(quantize(&[0.0f32; 3], &book(&[[0.0, 0.0]])).is_err());
    }

    #[test]
    fn ema_unassigned_unchanged_and_decay_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = book(&[[0.0, 0.0], [9.0, 9.0]]);
        cb.usage_counts = vec![1.0, 1.0];
        cb.update_ema(&[2.0, 2.0, 4.0, 4.0], &[1, 1], 0.0, &mut rng);
        assert_eq!(cb.entry(0), &[0.0, 0.0]);
        assert_eq!(cb.entry(1), &[3.0, 3.0]);
        assert_eq!(cb.usage_counts, vec![0.0, 2.0]);
    }

    #[test]
    fn dead_entries_are_reseeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = book(&[[0.0, 0.0], [50.0, 50.0]]);
        let latents = [0.1, 0.1];
        let mut reseeded = 0;
        for _ in 0..DEAD_CODE_UPDATES {
            reseeded += cb.update_ema(&latents, &[0], 0.99, &mut rng);
        }
        assert_eq!(reseeded, 1);
        assert_eq!(cb.entry(1), &[0.1, 0.1]);
    }
}
