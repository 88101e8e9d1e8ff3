"""Run configuration: a flat key=value text format with # comments.

Unknown keys are rejected; every key has a default, so an empty file is a
valid configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

_CHOICES = {
    "weighting_fn": ("paper", "linear", "log", "reciprocal", "constant"),
    "mask_polarity": ("text", "printed"),
    "precision": ("f32", "f64"),
}


@dataclass
class RunConfig:
    # run
    seed: int = 0
    data_dir: str = "data/train"
    out_dir: str = "runs/default"
    precision: str = "f32"
    # geometry
    image_size: int = 64
    downsample_stages: int = 2          # latent factor f = 2^stages
    # stage 1: codec
    codebook_size: int = 128
    codec_base_width: int = 16
    stage1_steps: int = 500
    stage1_batch: int = 4
    stage1_lr: float = 1e-3
    commitment_beta: float = 0.25
    codebook_revive_after: int = 100
    # conditioning
    superpixels: int = 16
    slic_compactness: float = 10.0
    slic_iterations: int = 10
    patch_size: int = 4
    token_dim: int = 64
    attn_heads: int = 4
    # diffusion
    timesteps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    unet_base_width: int = 32
    time_embed_dim: int = 32
    stage2_steps: int = 2000
    stage2_batch: int = 4
    stage2_lr: float = 1e-3
    # loss
    weighting_fn: str = "paper"
    alpha: float = 0.125
    fadl_lambda: float = 1.0
    mask_polarity: str = "text"
    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # persistence
    checkpoint_interval: int = 500

    def validate(self) -> "RunConfig":
        for key, choices in _CHOICES.items():
            if getattr(self, key) not in choices:
                raise ConfigError(
                    f"{key} must be one of {choices}, got {getattr(self, key)!r}"
                )
        factor = 2 ** self.downsample_stages
        if self.image_size % factor != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by latent factor {factor}"
            )
        latent = self.image_size // factor
        if latent % self.patch_size != 0:
            raise ConfigError(
                f"latent size {latent} not divisible by patch_size {self.patch_size}"
            )
        if latent % 2 != 0:
            raise ConfigError(f"latent size {latent} must be even for the U-Net levels")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.token_dim % self.attn_heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by {self.attn_heads} heads"
            )
        if self.token_dim % 4 != 0:
            raise ConfigError(f"token_dim must be divisible by 4, got {self.token_dim}")
        for key in ("stage1_steps", "stage2_steps", "stage1_batch", "stage2_batch",
                    "timesteps", "superpixels", "checkpoint_interval"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ConfigError(f"invalid beta range [{self.beta_min}, {self.beta_max}]")
        if self.alpha <= 0 and self.weighting_fn in ("paper", "linear"):
            raise ConfigError("alpha must be positive for bounded weightings")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind == "int":
                setattr(cfg, key, int(value))
            elif kind == "float":
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return cfg.validate()


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
