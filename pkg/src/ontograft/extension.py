"""Classify unseen SMILES against the label classes and graft the accepted
predictions into the ontology as new leaf classes with is_a edges.

Molecules where nothing clears the threshold never produce edges; they are
reported with their top-scoring suggestions instead.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabelIndex
from .model import ModelConfig, ParameterStore, predict_probabilities
from .ontology import OntologyClass, OntologyGraph, UnknownClassError
from .tokenizer import Tokenizer


class ExtensionError(Exception):
    pass


@dataclass
class ClassificationResult:
    smiles: str
    probabilities: np.ndarray  # aligned with the label index
    accepted: list[str]  # label class ids with probability >= threshold
    below_threshold: bool
    top_k: list[tuple[str, float]]  # fallback suggestions, highest first
    truncated: bool = False


@dataclass
class ExtensionProposal:
    new_id: str
    name: str
    smiles: str
    superclasses: list[tuple[str, float]]  # (class id, confidence)


@dataclass
class ChangeReport:
    added: list[dict] = field(default_factory=list)
    below_threshold: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"added": self.added, "below_threshold": self.below_threshold},
            indent=2,
            sort_keys=True,
        ) + "\n"


def classify(
    store: ParameterStore,
    config: ModelConfig,
    tokenizer: Tokenizer,
    labels: LabelIndex,
    smiles: str,
    threshold: float = 0.5,
    top_k: int = 3,
) -> ClassificationResult:
    """Encode, run the model, threshold the sigmoid probabilities.

    Over-length inputs are truncated with a flag (inference degrades
    gracefully).  If nothing is accepted, the top_k highest-probability
    labels are reported as suggestions only.
    """
    if not 0.0 < threshold < 1.0:
        raise ExtensionError(f"threshold must be in (0, 1), got {threshold}")
    return classify_batch(store, config, tokenizer, labels, [smiles], threshold, top_k)[0]


def classify_batch(
    store: ParameterStore,
    config: ModelConfig,
    tokenizer: Tokenizer,
    labels: LabelIndex,
    smiles_list: list[str],
    threshold: float = 0.5,
    top_k: int = 3,
    batch_size: int = 32,
) -> list[ClassificationResult]:
    if len(labels) != config.n_labels:
        raise ExtensionError(
            f"label index has {len(labels)} classes, model expects {config.n_labels}"
        )
    seqs = [tokenizer.encode(s, truncate=True) for s in smiles_list]
    probs = predict_probabilities(store, config, seqs, batch_size)
    results = []
    for i, smiles in enumerate(smiles_list):
        p = probs[i]
        accepted = [labels.classes[j] for j in range(len(labels)) if p[j] >= threshold]
        ranked = sorted(range(len(labels)), key=lambda j: (-p[j], j))
        suggestions = [(labels.classes[j], float(p[j])) for j in ranked[:top_k]]
        results.append(
            ClassificationResult(
                smiles=smiles,
                probabilities=p,
                accepted=accepted,
                below_threshold=not accepted,
                top_k=suggestions,
                truncated=seqs[i].truncated,
            )
        )
    return results


def prune_to_most_specific(graph: OntologyGraph, accepted: list[str]) -> list[str]:
    """Drop any accepted class that is an ancestor of another accepted class."""
    keep = []
    accepted_set = set(accepted)
    for cid in accepted:
        others = accepted_set - {cid}
        if not any(cid in graph.ancestors(o) for o in others):
            keep.append(cid)
    return keep


class FreshIdAllocator:
    """Collision-free ids: configurable prefix plus a zero-padded counter
    starting past the largest numeric id already in the graph."""

    def __init__(self, graph: OntologyGraph, prefix: str = "ONTOGRAFT:", width: int = 6):
        self.prefix = prefix
        self.width = width
        highest = 0
        for cid in graph.ids():
            m = re.search(r"(\d+)$", cid)
            if m:
                highest = max(highest, int(m.group(1)))
        self._next = highest + 1

    def allocate(self) -> str:
        new_id = f"{self.prefix}{self._next:0{self.width}d}"
        self._next += 1
        return new_id


def propose_extensions(
    graph: OntologyGraph,
    labels: LabelIndex,
    results: list[ClassificationResult],
    id_prefix: str = "ONTOGRAFT:",
    id_width: int = 6,
) -> tuple[list[ExtensionProposal], list[ClassificationResult]]:
    """One proposal per confidently classified molecule.

    Redundant superclasses are pruned to the most specific accepted classes.
    New class names default to the SMILES string itself (curators rename).
    Returns (proposals, skipped below-threshold results).
    """
    for cid in labels:
        if cid not in graph:
            raise UnknownClassError(cid)
    allocator = FreshIdAllocator(graph, prefix=id_prefix, width=id_width)
    proposals = []
    skipped = []
    for result in results:
        if result.below_threshold:
            skipped.append(result)
            continue
        specific = prune_to_most_specific(graph, result.accepted)
        confidences = {
            cid: float(result.probabilities[labels.column(cid)]) for cid in specific
        }
        proposals.append(
            ExtensionProposal(
                new_id=allocator.allocate(),
                name=result.smiles,
                smiles=result.smiles,
                superclasses=[(cid, confidences[cid]) for cid in sorted(specific)],
            )
        )
    return proposals, skipped


def extend(
    graph: OntologyGraph,
    proposals: list[ExtensionProposal],
    skipped: list[ClassificationResult] | None = None,
) -> tuple[OntologyGraph, ChangeReport]:
    """Apply proposals, returning the extended graph and a change report.

    The input graph is never modified; re-running the same proposals against
    the extended graph fails on duplicate ids by design.
    """
    additions = []
    for prop in proposals:
        cls = OntologyClass(id=prop.new_id, name=prop.name, smiles=prop.smiles)
        additions.append((cls, [cid for cid, _ in prop.superclasses]))
    extended = graph.insert_subsumptions(additions)
    report = ChangeReport()
    for prop in proposals:
        report.added.append(
            {
                "new_id": prop.new_id,
                "name": prop.name,
                "smiles": prop.smiles,
                "edges": [
                    {"superclass": cid, "confidence": conf}
                    for cid, conf in prop.superclasses
                ],
            }
        )
    for result in skipped or []:
        report.below_threshold.append(
            {
                "smiles": result.smiles,
                "suggestions": [
                    {"label": cid, "probability": prob} for cid, prob in result.top_k
                ],
            }
        )
    return extended, report


def edge_comment_map(proposals: list[ExtensionProposal]) -> dict[tuple[str, str], str]:
    """Confidence annotations for the OBO serializer."""
    return {
        (prop.new_id, cid): f"confidence={conf:.4f}"
        for prop in proposals
        for cid, conf in prop.superclasses
    }
