"""Model presets and the flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import InvalidConfigError

FRONTENDS = ("stft", "waveform", "codec_tokens")
OBJECTIVES = ("masksr", "soundstorm", "ar")


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "tiny"
    num_codebooks: int = 4
    codebook_size: int = 256
    model_dim: int = 64
    num_heads: int = 4
    enc_blocks: int = 2
    lm_blocks: int = 3
    sample_rate: int = 16000
    window: int = 1024
    hop: int = 256
    clip_seconds: float = 2.0
    conv_channels: int = 1024
    codec_latent_dim: int = 64
    frontend: str = "stft"
    objective: str = "masksr"
    cfg_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.frontend not in FRONTENDS:
            raise InvalidConfigError(f"frontend must be one of {FRONTENDS}, got {self.frontend!r}")
        if self.objective not in OBJECTIVES:
            raise InvalidConfigError(
                f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.model_dim % self.num_heads:
            raise InvalidConfigError("num_heads must divide model_dim")

    @property
    def mlp_hidden(self):
        return 4 * self.model_dim

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    def frames_for(self, seconds):
        return math.ceil(round(seconds * self.sample_rate) / self.hop)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_PRESETS = {
    "tiny": ModelConfig(),
    "masksr-s": ModelConfig(
        preset="masksr-s", num_codebooks=9, codebook_size=1024, model_dim=512, num_heads=16,
        enc_blocks=6, lm_blocks=8, sample_rate=44100, window=2048, hop=512, clip_seconds=3.0,
        conv_channels=2048, codec_latent_dim=256),
    "masksr-m": ModelConfig(
        preset="masksr-m", num_codebooks=9, codebook_size=1024, model_dim=768, num_heads=16,
        enc_blocks=6, lm_blocks=12, sample_rate=44100, window=2048, hop=512, clip_seconds=3.0,
        conv_channels=2048, codec_latent_dim=256),
}


def preset(name, frontend="stft", objective="masksr", **overrides) -> ModelConfig:
    """Look up a preset. The codec-token frontend has no encoder stack, so its
    blocks move into the LM to keep capacity (6 + 8 -> 14 for the masksr presets)."""
    if name not in _PRESETS:
        raise InvalidConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    cfg = dataclasses.replace(_PRESETS[name], frontend=frontend, objective=objective)
    if frontend == "codec_tokens":
        cfg = dataclasses.replace(cfg, lm_blocks=cfg.lm_blocks + cfg.enc_blocks, enc_blocks=0)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def preset_names():
    return sorted(_PRESETS)


@dataclass
class RunConfig:
    preset: str = "tiny"
    frontend: str = "stft"
    objective: str = "masksr"
    seed: int = 0
    # data
    data_dir: str = "data"
    num_train: int = 200
    num_dev: int = 10
    num_test: int = 20
    clip_seconds: float = 2.0
    variants: int = 4
    # signal geometry; 0 keeps the preset's value
    sample_rate: int = 0
    window: int = 0
    hop: int = 0
    # codec
    codec_path: str = "runs/codec.mskr"
    codec_iterations: int = 300
    # restorer training
    model_path: str = "runs/restorer.mskr"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    log_every: int = 100
    # decoding
    decoder: str = "parallel"
    iterations: int = 40
    guidance: float = 2.0
    noise_var_start: float = 4.0
    temperature: float = 1.0
    window_seconds: float = 2.0
    griffin_lim_iters: int = 32
    # reports
    out_dir: str = "runs/report"
    bench_lengths: str = "4,8,12,16"
    bench_repeats: int = 2
    guidance_grid: str = "0,0.5,1,2,4"
    figures: bool = True

    def model_config(self) -> ModelConfig:
        geometry = {k: getattr(self, k) for k in ("sample_rate", "window", "hop") if getattr(self, k)}
        return preset(self.preset, self.frontend, self.objective, seed=self.seed,
                      clip_seconds=self.clip_seconds, **geometry)


def _coerce(name, raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise InvalidConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = dataclasses.replace(base) if base else RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise InvalidConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value, getattr(RunConfig(), key)))
    if cfg.preset not in _PRESETS:
        raise InvalidConfigError(f"unknown preset {cfg.preset!r}")
    return cfg


def load_run_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fp:
            cfg = parse_run_config(fp.read())
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise InvalidConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))
