"""ontograft: extend a structure-annotated ontology with a small SMILES
transformer trained on the ontology's own annotations."""

__version__ = "0.1.0"

from .ontology import OntologyClass, OntologyGraph, parse_obo, serialize_obo
from .tokenizer import Tokenizer, train_bpe
from .model import ModelConfig, ParameterStore, forward, init_model, loss_and_grad

__all__ = [
    "OntologyClass",
    "OntologyGraph",
    "parse_obo",
    "serialize_obo",
    "Tokenizer",
    "train_bpe",
    "ModelConfig",
    "ParameterStore",
    "forward",
    "init_model",
    "loss_and_grad",
    "__version__",
]
