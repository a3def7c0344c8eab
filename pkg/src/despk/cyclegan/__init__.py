"""Two-generator, two-discriminator feature translation model and its trainer."""
from .checkpoint import (CheckpointError, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint,
                         save_checkpoint)
from .losses import adv_losses, cycle_loss, identity_loss, identity_weight
from .model import (MFB, MFB_AP, CycleGanConfig, DiscriminatorConfig, GeneratorConfig,
                    discriminator_forward, generator_forward, init_discriminator, init_generator)
from .train import (LOG_COLUMNS, ModelPair, NormStats, TrainingHalted, feature_matrix,
                    format_loss_log, init_model_pair, read_loss_log, scheduled_lr, total_loss,
                    train, train_step, write_loss_log)
