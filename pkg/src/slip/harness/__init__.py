from .commands import GenDataSpec, cmd_evaluate, cmd_gen_data, cmd_gradcheck, cmd_pretrain, load_gen_spec, model_from_checkpoint
from .config import ExperimentConfig, config_from_dict, dump_config, load_config

__all__ = [
    "ExperimentConfig",
    "GenDataSpec",
    "cmd_evaluate",
    "cmd_gen_data",
    "cmd_gradcheck",
    "cmd_pretrain",
    "config_from_dict",
    "dump_config",
    "load_config",
    "load_gen_spec",
    "model_from_checkpoint",
]
