"""Crystal documents: JSON files bundling geometry, stencil, potential, defect.

A crystal document is a plain dict (usually read from a ``.json`` file) with

    {"F": [[...]], "shifts": [[...]], "triplets": [[rho..., alpha, beta], ...],
     "potential": {"kind": "harmonic" | "morse", ...},
     "defect": {"R_def": ..., "dipoles": [{"site":, "triplet":, "g":}, ...]}}

plus optional "d", "n", "name", "description" keys.  The loader resolves a
handful of named presets shipped with the package, so the command-line tools
can be pointed at either a file path or a preset name.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import (InteractionRange, MultilatticeSpec, build_multilattice,
                      make_triplet, validate_range)
from .potential import (DefectModel, SitePotential, make_harmonic,
                        make_morse_pair)

__all__ = [
    "Crystal",
    "CrystalError",
    "available_presets",
    "crystal_from_dict",
    "load_crystal",
]


class CrystalError(ValueError):
    """Malformed crystal document or unknown preset."""


_PRESET_DIR = Path(__file__).parent / "presets"


def available_presets() -> list[str]:
    return sorted(p.stem for p in _PRESET_DIR.glob("*.json"))


@dataclass(frozen=True)
class Crystal:
    """A loaded crystal document, ready to hand to the solvers."""

    name: str
    spec: MultilatticeSpec
    rng: InteractionRange
    pot: SitePotential
    defect: DefectModel | None
    doc: dict = field(repr=False)


def _require(doc: dict, key: str):
    if key not in doc:
        raise CrystalError(f"crystal document is missing required key {key!r}")
    return doc[key]


def _build_potential(rng: InteractionRange, pdoc) -> SitePotential:
    if not isinstance(pdoc, dict):
        raise CrystalError('"potential" must be an object with a "kind"')
    kind = pdoc.get("kind")
    if kind == "harmonic":
        if "stiffness" not in pdoc:
            raise CrystalError('harmonic potential needs "stiffness"')
        return make_harmonic(rng, pdoc["stiffness"],
                             allow_indefinite=bool(pdoc.get("allow_indefinite",
                                                            False)))
    if kind == "morse":
        kw = {}
        for key in ("D", "a", "r0", "r0_scale"):
            if key in pdoc:
                kw[key] = pdoc[key]
        return make_morse_pair(rng, pdoc.get("pairs"), **kw)
    raise CrystalError(f'unknown potential kind {kind!r} '
                       '(expected "harmonic" or "morse")')


def _build_defect(rng: InteractionRange, ddoc) -> DefectModel | None:
    if ddoc is None:
        return None
    if not isinstance(ddoc, dict):
        raise CrystalError('"defect" must be an object')
    if "R_def" not in ddoc:
        raise CrystalError('defect needs "R_def"')
    entries = []
    for dip in ddoc.get("dipoles", ()):
        for key in ("site", "triplet", "g"):
            if key not in dip:
                raise CrystalError(f'defect dipole is missing {key!r}')
        entries.append((dip["site"], dip["triplet"], dip["g"]))
    return DefectModel.from_entries(rng, ddoc["R_def"], entries)


def crystal_from_dict(doc: dict, name: str | None = None) -> Crystal:
    """Validate a crystal document and construct the model objects."""
    if not isinstance(doc, dict):
        raise CrystalError("crystal document must be a JSON object")
    F = np.asarray(_require(doc, "F"), dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise CrystalError('"F" must be a square matrix')
    d = F.shape[0]
    if "d" in doc and int(doc["d"]) != d:
        raise CrystalError(f'"d" = {doc["d"]} contradicts the {d}x{d} cell')
    spec = build_multilattice(F, _require(doc, "shifts"), n=doc.get("n"))

    triplets = []
    for row in _require(doc, "triplets"):
        row = list(row)
        if len(row) != d + 2:
            raise CrystalError(
                f"triplet rows must have {d + 2} entries (rho..., alpha, "
                f"beta); got {row}")
        triplets.append(make_triplet(row[:d], row[d], row[d + 1]))
    rng = validate_range(spec, triplets)

    pot = _build_potential(rng, _require(doc, "potential"))
    defect = _build_defect(rng, doc.get("defect"))
    if name is None:
        name = str(doc.get("name", "crystal"))
    return Crystal(name=name, spec=spec, rng=rng, pot=pot, defect=defect,
                   doc=doc)


def load_crystal(source) -> Crystal:
    """Load a crystal from a dict, a JSON file path, or a preset name."""
    if isinstance(source, dict):
        return crystal_from_dict(source)
    text = str(source)
    path = Path(text)
    if not path.exists() and "/" not in text and "\\" not in text:
        preset = _PRESET_DIR / f"{path.stem}.json"
        if preset.exists():
            path = preset
        else:
            raise CrystalError(
                f"no such file or preset {text!r}; shipped presets: "
                + ", ".join(available_presets()))
    if not path.exists():
        raise CrystalError(f"crystal file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CrystalError(f"{path} is not valid JSON: {exc}") from exc
    return crystal_from_dict(doc, name=path.stem)
