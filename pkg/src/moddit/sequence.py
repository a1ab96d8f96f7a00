"""Joint-sequence layout and rotary position phases.

Every token in a joint attention sequence carries a 3-axis integer position
(image_id, row, col). Text rows use image_id -1 with the token index on the
row axis, the denoising target uses image_id 0, and reference images count
up from 1. Rotary rotation splits each head into three equal axis groups,
so the head dimension must be divisible by 6 (three axes, two dims per
rotation pair).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, ValidationError

ROLE_TEXT = 0
ROLE_TARGET = 1
ROLE_REF = 2


@dataclass
class SequencePlan:
    positions: np.ndarray   # [L, 3] int64 (image_id, row, col)
    roles: np.ndarray       # [L] int8
    text: tuple             # (start, stop) half-open row ranges
    target: tuple
    refs: list              # one (start, stop) per reference image

    @property
    def length(self):
        return int(self.positions.shape[0])


def build_plan(n_text: int, target_grid, ref_grids=()) -> SequencePlan:
    """Lay out [text, target, refs...] and assign positions and roles."""
    if n_text < 1:
        raise ValidationError(f"need at least one text token, got {n_text}")
    rows = []
    roles = []
    for i in range(n_text):
        rows.append((-1, i, 0))
        roles.append(ROLE_TEXT)
    spans = {"text": (0, n_text)}
    gh, gw = target_grid
    for r in range(gh):
        for c in range(gw):
            rows.append((0, r, c))
            roles.append(ROLE_TARGET)
    spans["target"] = (n_text, n_text + gh * gw)
    refs = []
    at = spans["target"][1]
    for img_id, (rh, rw) in enumerate(ref_grids, start=1):
        for r in range(rh):
            for c in range(rw):
                rows.append((img_id, r, c))
                roles.append(ROLE_REF)
        refs.append((at, at + rh * rw))
        at += rh * rw
    positions = np.asarray(rows, dtype=np.int64)
    if len({tuple(p) for p in rows}) != len(rows):
        raise InvariantError("duplicate (image_id, row, col) position in sequence plan")
    return SequencePlan(positions=positions, roles=np.asarray(roles, dtype=np.int8),
                        text=spans["text"], target=spans["target"], refs=refs)


def rotary_phases(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-token rotation angles, [L, head_dim // 2] float64.

    Pairs are grouped by axis: the first head_dim//6 pairs rotate with the
    image_id coordinate, the next group with the row, the last with the col.
    """
    if head_dim % 6:
        raise ValidationError(
            f"head_dim {head_dim} not divisible by 6 (3 rotary axes, 2 dims per pair)")
    npairs = head_dim // 6
    freqs = base ** (-np.arange(npairs, dtype=np.float64) / npairs)
    pos = positions.astype(np.float64)
    groups = [pos[:, axis:axis + 1] * freqs[None, :] for axis in range(3)]
    return np.concatenate(groups, axis=1)


def rope_tables(plan: SequencePlan, head_dim: int, base: float, dtype) -> tuple:
    ang = rotary_phases(plan.positions, head_dim, base)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
