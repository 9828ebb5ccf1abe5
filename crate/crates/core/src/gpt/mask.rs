use crate::error::{bail, Result};

/// Allowed keys per query, row-major `rows x cols`; `true` means visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    /// Renders the mask with `#` for visible and `.` for hidden keys.
    pub fn render(&self) -> String {
        self.allowed
            .chunks(self.cols)
            .map(|r| r.iter().map(|&a| if a { '#' } else { '.' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Newest time index covered by each key: `patches` patches of `patch_len`
/// steps followed by the last `unpatched` single steps.
pub fn key_times(patches: usize, patch_len: usize, unpatched: usize) -> Vec<usize> {
    let l = patches * patch_len;
    (0..patches).map(|j| j * patch_len + patch_len - 1).chain((0..unpatched).map(|m| l - unpatched + m)).collect()
}

/// Input time of latent query `i`.
pub fn query_time(l: usize, latent: usize, i: usize) -> usize {
    l - latent + i
}

/// First-layer mask: latent `i` sits at time `q_i = L - latent + i` and sees
/// a key only when the key's newest time is at most `q_i - 1`.
pub fn build_mask(patches: usize, patch_len: usize, unpatched: usize, latent: usize) -> Result<AttentionMask> {
    let l = patches * patch_len;
    if patch_len == 0 || latent == 0 || latent > l || unpatched > l {
        bail!(Config, "mask needs 0 < latent <= L and unpatched <= L (L = {}, latent = {}, unpatched = {})", l, latent, unpatched);
    }
    let keys = key_times(patches, patch_len, unpatched);
    let mut allowed = Vec::with_capacity(latent * keys.len());
    for i in 0..latent {
        let q = query_time(l, latent, i);
        allowed.extend(keys.iter().map(|&k| k < q));
    }
    Ok(AttentionMask { rows: latent, cols: keys.len(), allowed })
}

/// Lower-triangular mask (diagonal included) among `n` latents.
pub fn causal_mask(n: usize) -> AttentionMask {
    let allowed = (0..n * n).map(|x| x % n <= x / n).collect();
    AttentionMask { rows: n, cols: n, allowed }
}
