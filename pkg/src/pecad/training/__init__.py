from .checkpoint import Checkpoint, CheckpointMismatchError, load_checkpoint, save_checkpoint, weights_digest
from .loop import LossKind, TrainConfig, stack_images, stack_labels, stack_masks, train_model
from .losses import bce, dice_loss, focal_bce, seg_loss
from .optim import Ranger, RangerConfig, RangerState, optimizer_step, radam_step_size
