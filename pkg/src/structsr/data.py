"""Dataset directory layout, PNG io, and the pair manifest.

A dataset directory holds hq/NNNN.png, lq/NNNN.png and manifest.jsonl with
one record per pair: filenames, family label, seed and the degradation
recipe. HQ images are quantized to 8-bit before degradation so that every
stored recipe replays byte-identically from the files on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import DegradationConfig, Recipe, degrade_from_seed
from .errors import ParameterError
from .textures import FAMILIES, make_texture


def save_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used by the PNG files."""
    return np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8) / 255.0


@dataclass
class PairRecord:
    index: int
    hq_file: str
    lq_file: str
    label: str
    seed: int
    recipe: Recipe

    def to_json(self) -> str:
        d = {
            "index": self.index,
            "hq": self.hq_file,
            "lq": self.lq_file,
            "label": self.label,
            "seed": self.seed,
            "recipe": json.loads(self.recipe.to_json()),
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        d = json.loads(line)
        return cls(
            index=d["index"],
            hq_file=d["hq"],
            lq_file=d["lq"],
            label=d["label"],
            seed=d["seed"],
            recipe=Recipe.from_dict(d["recipe"]),
        )


def write_split(
    root: Path,
    num_images: int,
    size: int,
    scale: int,
    config: DegradationConfig,
    families: tuple[str, ...],
    master_seed: int,
) -> list[PairRecord]:
    """Generate textures, degrade them, and write a dataset split."""
    for fam in families:
        if fam not in FAMILIES:
            raise ParameterError(f"unknown family {fam!r}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "hq").mkdir(exist_ok=True)
    (root / "lq").mkdir(exist_ok=True)
    seeds = np.random.SeedSequence(master_seed).spawn(num_images)
    records = []
    for i in range(num_images):
        rng = np.random.Generator(np.random.PCG64(seeds[i]))
        family = families[i % len(families)]
        hq = quantize(make_texture(family, rng, size))
        pair_seed = int(rng.integers(0, 2**63 - 1))
        pair = degrade_from_seed(hq, scale, config, pair_seed)
        hq_file, lq_file = f"hq/{i:05d}.png", f"lq/{i:05d}.png"
        save_png(root / hq_file, pair.hq)
        save_png(root / lq_file, pair.lq)
        records.append(
            PairRecord(
                index=i,
                hq_file=hq_file,
                lq_file=lq_file,
                label=family,
                seed=pair_seed,
                recipe=pair.recipe,
            )
        )
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return records


def read_manifest(root: Path) -> list[PairRecord]:
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as fh:
        return [PairRecord.from_json(line) for line in fh if line.strip()]


@dataclass
class DatasetSplit:
    """In-memory split: float images plus integer class labels."""

    hq: np.ndarray          # (N, S, S, 3)
    lq: np.ndarray          # (N, S/scale, S/scale, 3)
    labels: np.ndarray      # (N,) int
    label_names: tuple[str, ...]
    records: list[PairRecord]


def load_split(root: Path, label_names: tuple[str, ...]) -> DatasetSplit:
    root = Path(root)
    records = read_manifest(root)
    name_to_id = {n: i for i, n in enumerate(label_names)}
    hq, lq, labels = [], [], []
    for rec in records:
        if rec.label not in name_to_id:
            raise ParameterError(f"label {rec.label!r} not in {label_names}")
        hq.append(load_png(root / rec.hq_file))
        lq.append(load_png(root / rec.lq_file))
        labels.append(name_to_id[rec.label])
    return DatasetSplit(
        hq=np.stack(hq),
        lq=np.stack(lq),
        labels=np.asarray(labels, dtype=np.int64),
        label_names=tuple(label_names),
        records=records,
    )
