"""Lineup data for visual residual diagnostics.

The observed residuals are hidden among decoy residual sets computed from
refits of parametric-bootstrap responses.  The true panel's position is
stored in an answer file and printed as a short token that can be decoded
later with the same seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .reml import FittedModel, fit_reml
from .resamplers import ParametricGenerator, replicate_seed
from .residuals import model_residuals


def _mask(seed: int) -> int:
    digest = hashlib.sha256(f"mixedboot-lineup:{int(seed)}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def encode_position(position: int, seed: int) -> str:
    return format(int(position) ^ _mask(seed), "08x")


def reveal(token: str, seed: int) -> int:
    """Decode a lineup token back to the 1-based panel position."""
    return int(token, 16) ^ _mask(seed)


def residual_frame(model: FittedModel) -> pd.DataFrame:
    """Long residual table of a fit (one row per observation)."""
    data = model.data
    res = model_residuals(model)
    mar_fitted = model.fitted()
    cond_fitted = data.y - res.conditional
    frame = {
        "cluster_id": [data.cluster_ids[k] for k in data.cluster_index],
        "row_index": np.arange(data.n_total) - data.offsets[data.cluster_index],
        "y": data.y,
    }
    for j, name in enumerate(data.fixed_names):
        if not np.all(data.X[:, j] == 1.0):
            frame[name] = data.X[:, j]
    frame.update({
        ".resid": res.conditional,
        ".fitted": cond_fitted,
        ".mar.resid": res.marginal,
        ".mar.fitted": mar_fitted,
    })
    return pd.DataFrame(frame)


@dataclass(frozen=True)
class LineupBundle:
    table: pd.DataFrame
    answer: int
    key: str

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(out / "lineup.csv", index=False, float_format="%.17g")
        (out / "answer.json").write_text(json.dumps({"position": self.answer, "token": self.key}, indent=2))


def make_lineup(model: FittedModel, n_panels: int = 20, seed: int = 0) -> LineupBundle:
    """Shuffle the observed residuals into ``n_panels - 1`` parametric decoys."""
    if n_panels < 2:
        raise ValueError("a lineup needs at least 2 panels")
    gen = ParametricGenerator(model)
    decoys = []
    for b in range(n_panels - 1):
        rng = np.random.default_rng(replicate_seed(seed, b))
        decoys.append(residual_frame(fit_reml(gen.draw(rng))))
    pos_rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, 1)))
    position = int(pos_rng.integers(1, n_panels + 1))
    decoys.insert(position - 1, residual_frame(model))
    panels = []
    for k, frame in enumerate(decoys, start=1):
        frame = frame.copy()
        frame[".sample"] = k
        panels.append(frame)
    table = pd.concat(panels, ignore_index=True)
    return LineupBundle(table, position, encode_position(position, seed))
