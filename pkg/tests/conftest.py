import numpy as np
import pytest

from ontograft.model import ModelConfig, init_model
from ontograft.ontology import OntologyClass, OntologyGraph


@pytest.fixture
def tiny_config():
    # the shape pinned by the gradient-check acceptance criterion
    return ModelConfig(
        vocab_size=20, n_labels=3, n_layers=2, n_heads=2,
        hidden_dim=8, ffn_dim=16, max_len=12, seed=7,
    )


@pytest.fixture
def tiny_store(tiny_config):
    return init_model(tiny_config)


def make_graph(spec: dict[str, dict]) -> OntologyGraph:
    """Graph from {id: {parents, smiles, name, obsolete}} dictionaries."""
    classes = {}
    for cid, fields in spec.items():
        classes[cid] = OntologyClass(
            id=cid,
            name=fields.get("name", cid),
            smiles=fields.get("smiles"),
            parents=frozenset(fields.get("parents", ())),
            obsolete=fields.get("obsolete", False),
        )
    return OntologyGraph(classes)


def random_dag(rng: np.random.Generator, n_classes: int, smiles_fraction: float = 0.5):
    """Random acyclic hierarchy: each class picks parents among earlier ones."""
    spec = {"N000": {}}
    for i in range(1, n_classes):
        n_parents = int(rng.integers(1, min(3, i) + 1))
        parents = rng.choice(i, size=n_parents, replace=False)
        entry = {"parents": [f"N{p:03d}" for p in parents]}
        if rng.random() < smiles_fraction:
            entry["smiles"] = "C" * (i + 1)
        spec[f"N{i:03d}"] = entry
    return make_graph(spec)
