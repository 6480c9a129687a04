"""maskr: masked-token speech restoration on a numpy transformer."""
from .dsp import AudioClip
from .config import ModelConfig, RunConfig, preset
from .codec import Codegram, CodebookSet, CodecConfig
from .masked_lm import RestorerModel
from .sampler import DecodeConfig

__version__ = "0.1.0"
