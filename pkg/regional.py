"""Region-specific makeup transfer from several references.

The injected embedding set is assembled region by region from the sets of
different reference images; no mask is consulted at inference apart from
the final non-face composite.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from config import REGIONS
from errors import ConfigError, DatasetError
from inject import RegionEmbeddingSet, extract_region_embeddings, transfer_with_embeddings
from synthface import load_png

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionAssignment:
    """region -> reference id; references may repeat."""
    sources: dict

    def __post_init__(self):
        missing = [r for r in REGIONS if r not in self.sources]
        unknown = [r for r in self.sources if r not in REGIONS]
        if missing or unknown:
            raise ConfigError(f"region assignment must name each of {list(REGIONS)} once "
                              f"(missing {missing}, unknown {unknown})")

    def __getitem__(self, region):
        return self.sources[region]

    @classmethod
    def uniform(cls, reference_id):
        return cls({region: reference_id for region in REGIONS})

    @property
    def references(self):
        """Distinct reference ids, in region order."""
        return list(dict.fromkeys(self.sources[r] for r in REGIONS))

    def swapped(self, region_a, region_b):
        sources = dict(self.sources)
        sources[region_a], sources[region_b] = sources[region_b], sources[region_a]
        return RegionAssignment(sources)


def load_assignment(path):
    """
    Read ``{"skin": "ref1.png", "eyes": "ref2.png", ...}``; relative image paths resolve against the file.
    Returns:
        (RegionAssignment, {reference id: image path})
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"assignment file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"assignment file {path} must hold a JSON object")
    assignment = RegionAssignment(dict(data))
    images = {}
    for ref in assignment.references:
        image_path = Path(ref) if Path(ref).is_absolute() else path.parent / ref
        if not image_path.exists():
            raise DatasetError(f"reference image for '{ref}' not found: {image_path}")
        images[ref] = image_path
    return assignment, images


def load_references(image_paths):
    return {ref: load_png(p) for ref, p in image_paths.items()}


def mix_embeddings(assignment, per_reference_sets):
    """f_n taken from the set of assignment[n] at position n, region order preserved."""
    rows = []
    for n, region in enumerate(REGIONS):
        ref = assignment[region]
        if ref not in per_reference_sets:
            raise ConfigError(f"no region embeddings for reference '{ref}' (assigned to {region})")
        rows.append(per_reference_sets[ref].vectors[n])
    return RegionEmbeddingSet(vectors=torch.stack(rows), reference_id="+".join(assignment.references))


def reference_embeddings(model, references):
    """{reference id: RegionEmbeddingSet} for {reference id: image}."""
    return {
        ref: extract_region_embeddings(model.style_encoder, image, model.query_bank, model.projector, ref)
        for ref, image in references.items()
    }


def regional_transfer(source_image, structure, assignment, references, model, sampler, face_mask=None, seed=0):
    """
    transfer() with the mixed embedding set in place of a single reference's set.
    Parameters:
        references: {reference id: (H, W, 3) image}; every assigned id must be present
    """
    missing = [ref for ref in assignment.references if ref not in references]
    if missing:
        raise ConfigError(f"assigned references without an image: {missing}")
    sets = reference_embeddings(model, {ref: references[ref] for ref in assignment.references})
    mixed = mix_embeddings(assignment, sets)
    logger.info("Regional transfer : %s", ", ".join(f"{r}<-{assignment[r]}" for r in REGIONS))
    return transfer_with_embeddings(model, source_image, structure, mixed, sampler, face_mask, seed)
