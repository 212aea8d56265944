use crate::error::{Error, Result};

/// Shape of the toy conditional denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Token embedding width.
    pub width: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    /// Side of the square pixel patch folded into one token.
    pub patch_size: usize,
    pub norm_groups: usize,
    /// Size of the condition embedding table, including the null id 0.
    pub num_conditions: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            latent_size: 32,
            width: 64,
            num_blocks: 4,
            heads: 1,
            context_tokens: 4,
            context_dim: 64,
            patch_size: 4,
            norm_groups: 8,
            num_conditions: 5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latent_channels", self.latent_channels),
            ("latent_size", self.latent_size),
            ("width", self.width),
            ("num_blocks", self.num_blocks),
            ("heads", self.heads),
            ("context_tokens", self.context_tokens),
            ("context_dim", self.context_dim),
            ("patch_size", self.patch_size),
            ("norm_groups", self.norm_groups),
            ("num_conditions", self.num_conditions),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(self.norm_groups) {
            return Err(Error::Config(format!(
                "width {} is not divisible by norm_groups {}",
                self.width, self.norm_groups
            )));
        }
        if !self.latent_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "latent_size {} is not divisible by patch_size {}",
                self.latent_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size, self.latent_size]
    }

    pub fn patches_per_side(&self) -> usize {
        self.latent_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.width
    }

    /// `(key, value)` pairs, used by checkpoint manifests and config dumps.
    pub fn entries(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("latent_channels", self.latent_channels),
            ("latent_size", self.latent_size),
            ("width", self.width),
            ("num_blocks", self.num_blocks),
            ("heads", self.heads),
            ("context_tokens", self.context_tokens),
            ("context_dim", self.context_dim),
            ("patch_size", self.patch_size),
            ("norm_groups", self.norm_groups),
            ("num_conditions", self.num_conditions),
        ]
    }

    /// Sets one field by key. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "latent_channels" => &mut self.latent_channels,
            "latent_size" => &mut self.latent_size,
            "width" => &mut self.width,
            "num_blocks" => &mut self.num_blocks,
            "heads" => &mut self.heads,
            "context_tokens" => &mut self.context_tokens,
            "context_dim" => &mut self.context_dim,
            "patch_size" => &mut self.patch_size,
            "norm_groups" => &mut self.norm_groups,
            "num_conditions" => &mut self.num_conditions,
            _ => return false,
        };
        *slot = value;
        true
    }
}
