"""Single-stage multi-human parsing with offset-guided part lookup and dynamic mask kernels."""

from .config import Config, GridSpec, ModelConfig, TrainConfig, load_config
from .decode import ParsedHuman, parse_image
from .metrics import ap_p, ap_p_vol, evaluate, pcp_50
from .network import SMPNet, load_model, save_model
from .synthdata import ParsingScene, SceneSpec, generate_dataset, generate_scene

__version__ = "0.1.0"

__all__ = [
    "Config", "GridSpec", "ModelConfig", "TrainConfig", "load_config",
    "ParsedHuman", "parse_image",
    "ap_p", "ap_p_vol", "evaluate", "pcp_50",
    "SMPNet", "load_model", "save_model",
    "ParsingScene", "SceneSpec", "generate_dataset", "generate_scene",
]
