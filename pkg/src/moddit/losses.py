"""Training losses: flow matching plus two preservation regularizers.

The region loss pins the velocity field outside the modulated half of a
concat sample to a frozen twin's prediction; it reads only rows whose
region mask is 0, so its value cannot depend on what happens inside the
modulated region. The attention loss pulls per-row text-to-image attention
distributions toward the frozen twin's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError


@dataclass
class LossReport:
    flow: float
    region: float
    attention: float
    total: float
    region_degenerate: bool = False


def noisy_latent(x: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Rectified-flow interpolant z_t = (1-t) x + t eps."""
    return (1.0 - t) * x + t * eps


def flow_target(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return eps - x


def flow_loss(v: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=v.dtype)
    if target.shape != v.shape:
        raise ValidationError(f"flow target shape {target.shape} != velocity {v.shape}")
    return ad.tmean(ad.square(ad.sub(v, Tensor(target))))


def region_loss(v_mod: Tensor, v_base: np.ndarray, region_mask: np.ndarray):
    """Mean squared velocity drift over rows with region_mask == 0.

    Returns (loss, degenerate); degenerate means the mask covers every row,
    leaving nothing to preserve. The loss is built from the untouched rows
    only, so edits confined to masked rows cannot move it at all.
    """
    if region_mask is None:
        raise ValidationError("region loss needs a region mask")
    region_mask = np.asarray(region_mask)
    if region_mask.shape != (v_mod.shape[0],):
        raise ValidationError(
            f"region mask shape {region_mask.shape} != token rows {v_mod.shape[0]}")
    keep = np.nonzero(region_mask < 0.5)[0]
    if keep.size == 0:
        return Tensor(np.zeros((), dtype=v_mod.dtype)), True
    v_base = np.asarray(v_base, dtype=v_mod.dtype)
    sel_mod = ad.gather_rows(v_mod, keep)
    diff = ad.sub(sel_mod, Tensor(v_base[keep]))
    return ad.tmean(ad.square(diff)), False


def attention_loss(records_mod, records_base) -> Tensor:
    """Mean squared difference of per-row renormalized text-to-image maps.

    Rows are skipped when either map gives the row nearly no image mass
    (sum < 1e-8, which covers caption padding, zeroed at record time); the
    denominator trick keeps skipped rows finite before they are masked out.
    """
    if len(records_mod) != len(records_base) or not records_mod:
        raise ValidationError(
            f"attention record count mismatch: {len(records_mod)} vs {len(records_base)}")
    terms = []
    dtype = records_mod[0].probs.dtype
    for rm, rb in zip(records_mod, records_base):
        if (rm.block, rm.head) != (rb.block, rb.head):
            raise ValidationError(
                f"attention records misaligned: ({rm.block},{rm.head}) vs ({rb.block},{rb.head})")
        t_len, n_img = rm.probs.shape
        sum_m = ad.tsum(rm.probs, axis=1, keepdims=True)
        sum_b = rb.probs.data.sum(axis=1, keepdims=True)
        valid = ((sum_m.data[:, 0] > 1e-8) & (sum_b[:, 0] > 1e-8)).astype(dtype)
        n_valid = float(valid.sum())
        if n_valid == 0.0:
            terms.append(Tensor(np.zeros((), dtype=dtype)))
            continue
        pad_fix = Tensor((1.0 - valid).reshape(t_len, 1).astype(dtype))
        norm_m = ad.div(rm.probs, ad.add(sum_m, pad_fix))
        norm_b = rb.probs.data / (sum_b + pad_fix.data)
        sq = ad.square(ad.sub(norm_m, Tensor(norm_b.astype(dtype))))
        masked = ad.mul(sq, Tensor(valid.reshape(t_len, 1)))
        terms.append(ad.mul(ad.tsum(masked), 1.0 / (n_valid * n_img)))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(terms))


def combine(flow: Tensor, region, attention, region_weight: float,
            attention_weight: float, region_degenerate: bool = False):
    """Weighted total as a graph node plus a float report.

    Report floats satisfy total == flow + w_r * region + w_a * attention in
    float64 by construction.
    """
    total = flow
    if region is not None:
        total = ad.add(total, ad.mul(region, region_weight))
    if attention is not None:
        total = ad.add(total, ad.mul(attention, attention_weight))
    f = float(flow.data)
    r = float(region.data) if region is not None else 0.0
    a = float(attention.data) if attention is not None else 0.0
    report = LossReport(flow=f, region=r, attention=a,
                        total=f + region_weight * r + attention_weight * a,
                        region_degenerate=region_degenerate)
    return total, report
