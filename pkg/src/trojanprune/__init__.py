"""trojanprune: implant a backdoor in a small CNN, locate the poisoned
filters with a four-heuristic suspiciousness score, prune them, and measure
clean accuracy and attack success rate before and after."""

from .autodiff import Tape, Tensor, backward, sgd_step
from .estimators import BackdoorFilterPruner, ConvNetClassifier
from .evaluation import (
    accuracy,
    attack_success_rate,
    evaluate,
    sweep_mu,
    wilcoxon_signed_rank,
)
from .network import (
    ConvBlock,
    NetworkSpec,
    default_spec,
    forward,
    fuse_conv_bn,
    init_params,
    load_model,
    save_model,
)
from .poison import (
    Dataset,
    PoisonConfig,
    TriggerSpec,
    build_asr_eval_set,
    build_defense_set,
    generate_synthetic,
    inject_trigger,
    load_cifar_binary,
    poison_dataset,
)
from .pruning import PruneConfig, layer_threshold, prune
from .scoring import ScoreTable, score_network, spectral_norm, suspiciousness
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackdoorFilterPruner",
    "ConvBlock",
    "ConvNetClassifier",
    "Dataset",
    "NetworkSpec",
    "PoisonConfig",
    "PruneConfig",
    "ScoreTable",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TriggerSpec",
    "accuracy",
    "attack_success_rate",
    "backward",
    "build_asr_eval_set",
    "build_defense_set",
    "default_spec",
    "evaluate",
    "forward",
    "fuse_conv_bn",
    "generate_synthetic",
    "init_params",
    "inject_trigger",
    "layer_threshold",
    "load_cifar_binary",
    "load_model",
    "poison_dataset",
    "prune",
    "save_model",
    "score_network",
    "sgd_step",
    "spectral_norm",
    "suspiciousness",
    "sweep_mu",
    "train",
    "wilcoxon_signed_rank",
]
