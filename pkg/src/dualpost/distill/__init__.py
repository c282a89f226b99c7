from .policy import (
    DistillConfig,
    Kind,
    Policy,
    PolicyError,
    TokenSequence,
    ce_loss,
    forward,
    kd_loss,
    total_loss,
)
from .task import Vocab, make_synthetic_task, plan_episode, replay
from .train import ProtocolSpec, TrainedPolicy, TrainingDiverged, train, train_teachers

__all__ = [
    "DistillConfig", "Kind", "Policy", "PolicyError", "TokenSequence", "ce_loss", "forward",
    "kd_loss", "total_loss", "Vocab", "make_synthetic_task", "plan_episode", "replay",
    "ProtocolSpec", "TrainedPolicy", "TrainingDiverged", "train", "train_teachers",
]
