from .config import ExperimentConfig, load_config
from .main import build_parser, main
