from .config import AwadaConfig, ConfigError, load_config
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import EvalReport, EvalRow, compute_ap, parse_report
from .stages import PrerequisiteError, Workdir
from .training import GanTrainer, TrainingError

__all__ = ["AwadaConfig", "ConfigError", "load_config", "CheckpointError", "load_checkpoint",
           "save_checkpoint", "EvalReport", "EvalRow", "compute_ap", "parse_report",
           "PrerequisiteError", "Workdir", "GanTrainer", "TrainingError"]
