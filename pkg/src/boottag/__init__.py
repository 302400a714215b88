"""Uncertainty-aware bootstrap learning for joint entity/relation tagging.

Sub-modules:

* tagging: query-position instances, BIO decode/repair
* encoder: small position-attentive encoder with replayable dropout
* crf: exact linear-chain CRF (forward-backward, Viterbi, gradients)
* model: joint model, Adam, checkpoints
* uncertainty: winning-score / entropy / probability-variance scores
* bootstrap: dual-model training with uncertainty-driven selection
* datagen: synthetic corpus generator with noise injection
* evaluation: triplet-level P/R/F1 and selection audits
* cli: the `boottag` command
"""

__version__ = "0.1.0"

from .bootstrap import TrainConfig, run_bootstrap, train_baseline
from .datagen import Corpus, GrammarSpec, NoiseSpec, generate_corpus, inject_noise, load_corpus, save_corpus
from .evaluation import EvalReport, evaluate, split_validation
from .model import JointModel, load_checkpoint, save_checkpoint
from .tagging import Instance, Sentence, TagVocabulary, Triplet, build_instances, decode_triplets
from .uncertainty import McConfig, entropy_score, probability_variance, winning_score

__all__ = [
    "__version__",
    "TrainConfig",
    "run_bootstrap",
    "train_baseline",
    "Corpus",
    "GrammarSpec",
    "NoiseSpec",
    "generate_corpus",
    "inject_noise",
    "load_corpus",
    "save_corpus",
    "EvalReport",
    "evaluate",
    "split_validation",
    "JointModel",
    "load_checkpoint",
    "save_checkpoint",
    "Instance",
    "Sentence",
    "TagVocabulary",
    "Triplet",
    "build_instances",
    "decode_triplets",
    "McConfig",
    "entropy_score",
    "probability_variance",
    "winning_score",
]
