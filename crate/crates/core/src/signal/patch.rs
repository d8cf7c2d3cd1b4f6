use crate::error::{LblmError, Result};

/// Overlapping patches of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `n x patch_len`, row-major.
    pub patches: Vec<f64>,
    pub start_indices: Vec<usize>,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.start_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_indices.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }
}

/// Number of patches `floor((len - patch_len) / stride) + 1`.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(LblmError::config("patch length and stride must be positive"));
    }
    if len < patch_len {
        return Err(LblmError::InputTooShort {
            len,
            required: patch_len,
        });
    }
    Ok((len - patch_len) / stride + 1)
}

/// Splits `x` into patches starting at `0, stride, 2 * stride, ...`;
/// trailing samples past the last full patch are dropped.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<PatchSequence> {
    let n = patch_count(x.len(), patch_len, stride)?;
    let mut patches = Vec::with_capacity(n * patch_len);
    let start_indices: Vec<usize> = (0..n).map(|i| i * stride).collect();
    for &s in &start_indices {
        patches.extend_from_slice(&x[s..s + patch_len]);
    }
    Ok(PatchSequence {
        patches,
        start_indices,
        patch_len,
        stride,
    })
}

/// Patchifies the last `(n - 1) * stride + patch_len` samples so the final
/// patch ends exactly at the end of `x`. Used by autoregressive rollout,
/// where the next patch must start one stride after the last one.
pub fn patchify_tail(x: &[f64], patch_len: usize, stride: usize) -> Result<PatchSequence> {
    let n = patch_count(x.len(), patch_len, stride)?;
    let offset = x.len() - ((n - 1) * stride + patch_len);
    let mut seq = patchify(&x[offset..], patch_len, stride)?;
    seq.start_indices.iter_mut().for_each(|s| *s += offset);
    Ok(seq)
}
