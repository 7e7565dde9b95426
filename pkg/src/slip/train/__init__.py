from .checkpoint import Checkpoint, fingerprint, read_checkpoint, write_checkpoint
from .optim import AdamW, adamw_step, excluded_from_decay, layer_depth, layerwise_lr_scale
from .schedule import DEFAULT_WEIGHT_DECAY, OptimConfig, cosine_lr
from .loop import BATCH_MODE, MetricsLog, Trainer, ZeroShotMonitor, forward_losses, load_pretrained, train_step, zeroshot_monitor
