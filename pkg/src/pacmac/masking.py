"""Disjoint patch-keep masks from attention ordering, plus a random baseline.

Mask construction sorts patches by descending attention and deals them out
round-robin to the committee, so each mask keeps L = floor((1 - ratio) * N)
of the most-attended patches and the union covers exactly the k * L
top-ranked ones. All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMaskConfigError, LengthMismatchError


@dataclass
class MaskSet:
    """k disjoint binary keep-masks over N patches at a masking ratio."""

    k: int
    num_patches: int
    ratio: float
    masks: np.ndarray  # (k, N) with entries in {0, 1}; 1 keeps the patch

    @property
    def kept_per_mask(self) -> int:
        return int(self.masks[0].sum())

    def kept_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.masks[j])

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "N": self.num_patches,
            "ratio": self.ratio,
            "kept": [self.kept_indices(j).tolist() for j in range(self.k)],
        }


def _keep_count(num_patches: int, ratio: float, committee: int) -> int:
    if not 0.0 < ratio < 1.0:
        raise InvalidMaskConfigError(f"masking ratio must lie in (0, 1), got {ratio}")
    if committee < 1:
        raise InvalidMaskConfigError(f"committee size must be >= 1, got {committee}")
    kept = int(np.floor((1.0 - ratio) * num_patches))
    if kept < 1:
        raise InvalidMaskConfigError(
            f"ratio {ratio} keeps no patches out of {num_patches}")
    if committee * kept > num_patches:
        raise InvalidMaskConfigError(
            f"committee {committee} x {kept} kept patches exceeds {num_patches}")
    return kept


def _deal_round_robin(order: np.ndarray, num_patches: int, ratio: float,
                      committee: int) -> MaskSet:
    kept = _keep_count(num_patches, ratio, committee)
    masks = np.zeros((committee, num_patches), dtype=np.int8)
    pos = 0
    for _ in range(kept):
        for j in range(committee):
            masks[j, order[pos]] = 1
            pos += 1
    return MaskSet(k=committee, num_patches=num_patches, ratio=ratio, masks=masks)


def attention_conditioned_masks(attention, ratio: float, committee: int) -> MaskSet:
    """Deal the most-attended patches round-robin into k disjoint keep-masks.

    Patches are ranked by descending attention with ties broken toward the
    lower patch index; pass i of the deal hands the (k*(i-1)+j)-th ranked
    patch to mask j. Only the ordering of `attention` matters, so any
    positive rescaling yields the same masks.
    """
    scores = np.asarray(attention, dtype=np.float64).reshape(-1)
    n = scores.shape[0]
    # stable sort on negated scores keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return _deal_round_robin(order, n, ratio, committee)


def random_masks(num_patches: int, ratio: float, committee: int, seed: int) -> MaskSet:
    """Committee of disjoint masks from a seeded uniform shuffle of patches."""
    order = np.random.default_rng(seed).permutation(num_patches)
    return _deal_round_robin(order, num_patches, ratio, committee)


def apply_mask(image: np.ndarray, mask, patch_size: int) -> np.ndarray:
    """Zero the pixels of every patch the mask does not keep.

    Kept patches are copied bit-identically. The mask indexes patches in
    row-major grid order for the image geometry.
    """
    img = np.asarray(image)
    c, h, w = img.shape[-3:]
    gh, gw = h // patch_size, w // patch_size
    mask = np.asarray(mask).reshape(-1)
    if mask.shape[0] != gh * gw:
        raise LengthMismatchError(
            f"mask has {mask.shape[0]} entries but the image has {gh * gw} patches")
    grid = mask.reshape(gh, gw).astype(img.dtype)
    pixel_mask = np.repeat(np.repeat(grid, patch_size, axis=0), patch_size, axis=1)
    return img * pixel_mask


def apply_mask_batch(images: np.ndarray, masks: np.ndarray, patch_size: int) -> np.ndarray:
    """Apply one mask per image: (B, C, H, W) with (B, N) masks."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    if masks.shape != (b, gh * gw):
        raise LengthMismatchError(
            f"expected masks shaped ({b}, {gh * gw}), got {masks.shape}")
    grid = masks.reshape(b, 1, gh, 1, gw, 1).astype(images.dtype)
    return (images.reshape(b, c, gh, patch_size, gw, patch_size) * grid).reshape(images.shape)
