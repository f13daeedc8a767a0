use crate::error::{arg_err, Result};

/// Where adapters are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterLayout {
    /// `n` adapters spread evenly over the depth.
    Even,
    /// Explicit 1-based `[start, end, stride]` block range.
    Range { start: usize, end: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Side of the square embedding patch in pixels.
    pub patch: usize,
    pub view_size: usize,
    /// Adapter bottleneck width.
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    /// Number of adapter-equipped blocks.
    pub n_adapters: usize,
    pub adapter_layout: AdapterLayout,
    /// Last block (1-based) that receives learnable tokens.
    pub last_token_block: usize,
    /// Prompt rows per block.
    pub tokens_per_block: usize,
    pub dropout: f64,
    pub use_adapters: bool,
    pub use_tokens: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            dim: 64,
            heads: 4,
            patch: 8,
            view_size: 64,
            adapter_dim: 8,
            adapter_scale: 0.1,
            n_adapters: 3,
            adapter_layout: AdapterLayout::Even,
            last_token_block: 4,
            tokens_per_block: 2,
            dropout: 0.1,
            use_adapters: true,
            use_tokens: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            return arg_err("depth, dim, heads and patch must be positive");
        }
        if self.dim % self.heads != 0 {
            return arg_err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.dim {
            return arg_err(format!(
                "adapter width {} must be in 1..{}",
                self.adapter_dim, self.dim
            ));
        }
        if self.n_adapters == 0 || self.n_adapters > self.depth {
            return arg_err(format!(
                "adapter count {} must be in 1..={}",
                self.n_adapters, self.depth
            ));
        }
        if self.last_token_block < 2 || self.last_token_block > self.depth {
            return arg_err(format!(
                "last token block {} must be in 2..={}",
                self.last_token_block, self.depth
            ));
        }
        if self.tokens_per_block == 0 {
            return arg_err("tokens_per_block must be at least 1");
        }
        if self.view_size == 0 || self.view_size % self.patch != 0 {
            return arg_err(format!(
                "view size {} not divisible by patch {}",
                self.view_size, self.patch
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return arg_err("dropout must lie in [0, 1)");
        }
        self.adapter_blocks().map(|_| ())
    }

    /// Image tokens per view.
    pub fn num_patches(&self) -> usize {
        (self.view_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// 1-based indices of adapter-equipped blocks.
    pub fn adapter_blocks(&self) -> Result<Vec<usize>> {
        match self.adapter_layout {
            AdapterLayout::Even => adapter_schedule(self.depth, self.n_adapters),
            AdapterLayout::Range { start, end, stride } => {
                if start == 0 || stride == 0 || start > end || end > self.depth {
                    return arg_err(format!(
                        "adapter range [{start}, {end}, {stride}] invalid for depth {}",
                        self.depth
                    ));
                }
                Ok((start..=end).step_by(stride).collect())
            }
        }
    }
}

/// Evenly spaced adapter blocks: `round(k * depth / n)` for `k = 1..=n`.
pub fn adapter_schedule(depth: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > depth {
        return arg_err(format!("cannot place {n} adapters in {depth} blocks"));
    }
    let mut out: Vec<usize> = (1..=n)
        .map(|k| (2 * k * depth + n) / (2 * n))
        .collect();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(adapter_schedule(24, 6).unwrap(), vec![4, 8, 12, 16, 20, 24]);
        assert_eq!(adapter_schedule(6, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(adapter_schedule(8, 2).unwrap(), vec![4, 8]);
        assert_eq!(adapter_schedule(6, 3).unwrap(), vec![2, 4, 6]);
        assert!(adapter_schedule(4, 5).is_err());
    }

    #[test]
    fn range_layouts() {
        let mut cfg = EncoderConfig {
            depth: 24,
            n_adapters: 6,
            last_token_block: 9,
            ..Default::default()
        };
        for (range, want) in [
            ((1, 6, 1), vec![1, 2, 3, 4, 5, 6]),
            ((18, 24, 1), vec![18, 19, 20, 21, 22, 23, 24]),
            ((4, 24, 4), vec![4, 8, 12, 16, 20, 24]),
            ((3, 24, 3), vec![3, 6, 9, 12, 15, 18, 21, 24]),
        ] {
            cfg.adapter_layout = AdapterLayout::Range {
                start: range.0,
                end: range.1,
                stride: range.2,
            };
            assert_eq!(cfg.adapter_blocks().unwrap(), want);
        }
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = [
            EncoderConfig { heads: 5, ..Default::default() },
            EncoderConfig { adapter_dim: 64, ..Default::default() },
            EncoderConfig { last_token_block: 1, ..Default::default() },
            EncoderConfig { view_size: 60, ..Default::default() },
            EncoderConfig { tokens_per_block: 0, ..Default::default() },
            EncoderConfig { n_adapters: 7, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
