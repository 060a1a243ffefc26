"""Structure-aware transformer over text-attributed graphs, with twin
language-model and graph readout predictors, plus its synthetic-task bench."""

from .data import TaskText, TextAttributedGraph, Vocabulary
from .model import Model, ModelConfig, TwinOutput
from .optim import AdamW
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "Model", "ModelConfig", "TwinOutput", "AdamW",
    "Tensor", "Parameter", "backward", "no_grad",
    "TextAttributedGraph", "TaskText", "Vocabulary",
]

__version__ = "0.1.0"
