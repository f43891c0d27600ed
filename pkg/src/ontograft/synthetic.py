"""Deterministic synthetic ontology for demos and end-to-end testing.

The hierarchy mirrors the real use case at toy scale: a structure branch
whose classes are keyed to visible string motifs, so every molecule's label
vector is recoverable from its SMILES-like annotation, plus a structure-free
"role" branch and two obsolete terms to exercise filtering.

Motifs come in two difficulties.  Six single-atom classes (Br, Cl, F, I, O,
S) are recognizable from one character.  Six ordered-pattern classes use
permutations of the characters n/o/p ("nop", "npo", ...), so telling them
apart requires reading character order, not just presence.  Every motif is
written as a doubled block like "(BrBr)" or "(nopnop)"; the repetition makes
masked characters recoverable from context, which is what lets masked-token
pretraining on this corpus converge.

Layout: root > {scaffold classes, motif families, pattern classes} >
(motif x scaffold) combination classes > molecule leaves.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np

from .ontology import OntologyClass, OntologyGraph

SCAFFOLDS = ("arene", "alkene", "alkane")

# family -> {class name: motif}; signature characters are pairwise distinct.
ATOM_FAMILIES: dict[str, dict[str, str]] = {
    "halogen compound": {
        "bromo compound": "Br",
        "chloro compound": "Cl",
        "fluoro compound": "F",
        "iodo compound": "I",
    },
    "chalcogen compound": {
        "oxo compound": "O",
        "sulfo compound": "S",
    },
}

# Ordered-pattern classes share the alphabet {n, o, p}: character counts are
# identical across all six, only the order differs.
PATTERN_MOTIFS: dict[str, str] = {
    "".join(p) + " pattern compound": "".join(p) for p in permutations("nop")
}

ROOT_ID = "TOY:000001"


def _toy_id(n: int) -> str:
    return f"TOY:{n:06d}"


def motif_block(motif: str) -> str:
    return "(" + motif * 2 + ")"


def generate_toy_ontology(seed: int = 0, n_leaves: int = 400) -> OntologyGraph:
    """Build the synthetic graph: ~60 non-molecule classes plus n_leaves
    structured molecule leaves; deterministic given the seed."""
    rng = np.random.default_rng([seed, 917])
    classes: dict[str, OntologyClass] = {}

    def add(cls: OntologyClass):
        classes[cls.id] = cls

    add(OntologyClass(id=ROOT_ID, name="molecular entity"))

    scaffold_ids = {}
    for i, scaffold in enumerate(SCAFFOLDS):
        cid = _toy_id(2 + i)
        scaffold_ids[scaffold] = cid
        add(OntologyClass(id=cid, name=scaffold, parents=frozenset([ROOT_ID])))

    motif_ids: dict[str, str] = {}
    blocks: dict[str, str] = {}
    family_counter = 5
    motif_counter = 10
    for family, members in ATOM_FAMILIES.items():
        family_id = _toy_id(family_counter)
        family_counter += 1
        add(OntologyClass(id=family_id, name=family, parents=frozenset([ROOT_ID])))
        for name, motif in members.items():
            cid = _toy_id(motif_counter)
            motif_counter += 1
            motif_ids[name] = cid
            blocks[name] = motif_block(motif)
            add(OntologyClass(id=cid, name=name, parents=frozenset([family_id])))
    for name, motif in PATTERN_MOTIFS.items():
        cid = _toy_id(motif_counter)
        motif_counter += 1
        motif_ids[name] = cid
        blocks[name] = motif_block(motif)
        add(OntologyClass(id=cid, name=name, parents=frozenset([ROOT_ID])))

    combo_ids = {}
    counter = 40
    for name in motif_ids:
        for scaffold in SCAFFOLDS:
            cid = _toy_id(counter)
            counter += 1
            combo_ids[(name, scaffold)] = cid
            add(
                OntologyClass(
                    id=cid,
                    name=f"{name.split()[0]} {scaffold}",
                    parents=frozenset([motif_ids[name], scaffold_ids[scaffold]]),
                )
            )

    # Structure-free branch: no SMILES anywhere, so none of these may appear
    # as molecules or label candidates.
    role_root = _toy_id(90)
    add(OntologyClass(id=role_root, name="application role", parents=frozenset([ROOT_ID])))
    role_mids = []
    for i in range(3):
        cid = _toy_id(91 + i)
        role_mids.append(cid)
        add(OntologyClass(id=cid, name=f"role group {i + 1}", parents=frozenset([role_root])))
    for i in range(5):
        cid = _toy_id(94 + i)
        parent = role_mids[i % len(role_mids)]
        add(OntologyClass(id=cid, name=f"role {i + 1}", parents=frozenset([parent])))

    # Obsolete terms are parsed but stay out of leaves and label candidates.
    add(
        OntologyClass(
            id=_toy_id(99),
            name="legacy compound",
            smiles="CCCC",
            parents=frozenset([ROOT_ID]),
            obsolete=True,
        )
    )
    add(
        OntologyClass(
            id=_toy_id(100),
            name="legacy role",
            parents=frozenset([role_root]),
            obsolete=True,
        )
    )

    motif_names = list(motif_ids)
    seen_smiles: set[str] = set()
    for i in range(n_leaves):
        scaffold = SCAFFOLDS[int(rng.integers(len(SCAFFOLDS)))]
        n_motifs = int(rng.integers(1, 4))
        picks = sorted(
            rng.choice(len(motif_names), size=n_motifs, replace=False).tolist()
        )
        names = [motif_names[j] for j in picks]
        smiles = _generate_molecule(rng, scaffold, [blocks[n] for n in names])
        while smiles in seen_smiles:
            smiles = smiles + "C"
        seen_smiles.add(smiles)
        add(
            OntologyClass(
                id=_toy_id(100001 + i),
                name=f"molecule {i + 1}",
                smiles=smiles,
                parents=frozenset(combo_ids[(n, scaffold)] for n in names),
            )
        )
    return OntologyGraph(classes)


def _generate_molecule(rng: np.random.Generator, scaffold: str, blocks: list[str]) -> str:
    """Carbon runs of random length interleaved with the motif blocks, plus
    the scaffold marker (aromatic ring, double bond, or neither)."""
    parts = ["C" * int(rng.integers(1, 9))]
    for block in blocks:
        parts.append(block)
        parts.append("C" * int(rng.integers(1, 9)))
    body = "".join(parts)
    if scaffold == "arene":
        return body + "c1ccccc1"
    if scaffold == "alkene":
        return body + "=C"
    return body
