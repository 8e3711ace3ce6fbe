use super::EncodeError;

/// Seed mixed into every feature hash of the reference embedder.
pub const HASH_SEED: u64 = 0x9e6c_63d0_676a_9a99;

/// Maps text to a unit vector of fixed width.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per token feature of the normalised text.
    fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>, EncodeError>;

    /// Mean of the token embeddings, scaled to unit L2 norm.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        let tokens = self.token_embeddings(text)?;
        let d = self.dim();
        let mut acc = vec![0.0; d];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(t) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(EncodeError::Domain(format!("text {text:?} pooled to the zero vector")));
        }
        acc.iter_mut().for_each(|a| *a /= norm);
        Ok(acc)
    }
}

/// Feature-hash embedder over word unigrams and bigrams. Each feature maps to
/// a ±1 sign vector drawn from a splitmix64 stream seeded by its FNV-1a hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EncodeError> {
        Self::with_seed(dim, HASH_SEED)
    }

    pub fn with_seed(dim: usize, seed: u64) -> Result<Self, EncodeError> {
        if dim == 0 {
            return Err(EncodeError::Config("embedding width must be positive".into()));
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn feature_vector(&self, feature: &str) -> Vec<f64> {
        let mut state = fnv1a(feature.as_bytes()) ^ self.seed;
        let mut out = Vec::with_capacity(self.dim);
        let mut bits = 0u64;
        for k in 0..self.dim {
            if k % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            out.push(if bits >> (k % 64) & 1 == 1 { 1.0 } else { -1.0 });
        }
        out
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>, EncodeError> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        if words.is_empty() {
            return Err(EncodeError::Domain("text is empty after normalisation".into()));
        }
        let mut out: Vec<Vec<f64>> = words.iter().map(|w| self.feature_vector(w)).collect();
        for pair in words.windows(2) {
            // unit separator keeps "a b" distinct from a single token "a b"
            out.push(self.feature_vector(&format!("{}\u{1f}{}", pair[0], pair[1])));
        }
        Ok(out)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
