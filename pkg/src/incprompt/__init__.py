"""Rehearsal-free continual learning with per-task key learners and prompt generators."""
from .backbone import BackboneConfig, PromptSchedule, TokenBatch, VisionTransformer, attention, pooled_feature
from .data import SplitSpec, TaskStream, split_classes, synthetic_gaussian_tasks
from .errors import ConfigError, NoNegativeAvailable, NumericError, ProtocolError
from .key_learner import (KeyLearner, KeyLossConfig, compute_key, key_loss, l1_reg, match_task,
                          mine_negative, triplet_loss)
from .prompter import TaskPrompter, divide, generate_prompt, prompted_attention
from .trainer import (ContinualReport, INCPrompt, TrainConfig, compute_metrics, evaluate, run_baseline,
                      run_incprompt, task_loss, total_loss, train_task)

__version__ = "0.1.0"
