"""
Contextual Highlight Attention.

A feature map is tiled into l x l patches and split into highlight patches HP
(any masked pixel in the cell) and background patches BP. Scores
C(s, t) = softmax_t(cos(HP_s, BP_t)) drive two reconstructions:

    HA_s = sum_t BP_t * C(s, t)   (highlight cells filled from background)
    BA_t = sum_s HP_s * C(s, t)   (background cells re-injected with highlight content)

HA and BA are scattered onto zero canvases at their own cells, concatenated
with the input features and fused back to C channels by a 3x3 matching
convolution. `cha_oracle` evaluates the same contract with scalar loops.
"""
import logging
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from m2net.errors import DegenerateSplitError, DimensionError
from m2net.imaging import PatchGrid, assemble_patches, extract_patches, pad_reflect

logger = logging.getLogger("m2net.cha")

NORM_FLOOR = 1e-8


@dataclass
class PatchSplit:
    """Highlight / background partition of a patch grid."""
    hp: torch.Tensor       # [S, d]
    bp: torch.Tensor       # [T, d]
    hp_idx: torch.Tensor   # [S] grid indices
    bp_idx: torch.Tensor   # [T] grid indices
    grid: PatchGrid

    @property
    def S(self) -> int:
        return self.hp.shape[0]

    @property
    def T(self) -> int:
        return self.bp.shape[0]


@dataclass
class AttentionMatrix:
    """Row-stochastic scores c[s, t] between highlight and background patches."""
    c: torch.Tensor  # [S, T]


def split_patches(feat: torch.Tensor, mask: torch.Tensor, l: int) -> PatchSplit:
    """
    Split an [h, w, C] feature map into highlight and background patches.

    A patch is a highlight patch iff any pixel of its l x l cell is set in
    the [h, w] mask. Non-divisible maps are reflect-padded.
    """
    if feat.ndim != 3 or mask.ndim != 2 or tuple(feat.shape[:2]) != tuple(mask.shape):
        raise DimensionError(f"mask {tuple(mask.shape)} does not match feature map {tuple(feat.shape)}")
    grid = extract_patches(feat, l, pad=True)
    cells = extract_patches(mask.to(feat.dtype).unsqueeze(-1), l, pad=True).patches
    is_highlight = cells.amax(dim=1) > 0.5

    hp_idx = torch.nonzero(is_highlight, as_tuple=False).flatten()
    bp_idx = torch.nonzero(~is_highlight, as_tuple=False).flatten()
    return PatchSplit(
        hp=grid.patches.index_select(0, hp_idx),
        bp=grid.patches.index_select(0, bp_idx),
        hp_idx=hp_idx,
        bp_idx=bp_idx,
        grid=grid,
    )


def _floored_norm(x: torch.Tensor) -> torch.Tensor:
    # max(||x||, eps), with a finite gradient at zero
    return torch.sqrt((x * x).sum(dim=1).clamp_min(NORM_FLOOR ** 2))


def attention_scores(split: PatchSplit) -> AttentionMatrix:
    """
    Softmax over background patches of the cosine similarity to each highlight patch.

    Raises:
        DegenerateSplitError: if there are no highlight or no background patches
    """
    if split.S == 0 or split.T == 0:
        raise DegenerateSplitError(f"degenerate patch split: S={split.S}, T={split.T}")
    cos = (split.hp @ split.bp.T) / (_floored_norm(split.hp)[:, None] * _floored_norm(split.bp)[None, :])
    return AttentionMatrix(c=torch.softmax(cos, dim=1))


def _check_scores(split: PatchSplit, scores: AttentionMatrix) -> None:
    if tuple(scores.c.shape) != (split.S, split.T):
        raise DimensionError(f"scores {tuple(scores.c.shape)} do not match split S={split.S}, T={split.T}")


def highlight_fill(split: PatchSplit, scores: AttentionMatrix) -> torch.Tensor:
    """HA [S, d]: each highlight patch as a convex combination of background patches."""
    _check_scores(split, scores)
    return scores.c @ split.bp


def background_fill(split: PatchSplit, scores: AttentionMatrix) -> torch.Tensor:
    """BA [T, d]: background patches rebuilt from highlight patches with the unnormalized columns of C."""
    _check_scores(split, scores)
    return scores.c.T @ split.hp


def _match(feat: torch.Tensor, ha_map: torch.Tensor, ba_map: torch.Tensor, matching: nn.Conv2d) -> torch.Tensor:
    x = torch.cat([feat, ha_map, ba_map], dim=-1).permute(2, 0, 1).unsqueeze(0)
    pad = matching.kernel_size[0] // 2
    out = matching(pad_reflect(x, (pad, pad, pad, pad)))
    return out[0].permute(1, 2, 0)


def cha_forward(feat: torch.Tensor, mask: torch.Tensor, l: int, matching: nn.Conv2d,
                use_ha: bool = True, use_ba: bool = True) -> torch.Tensor:
    """
    Contextual highlight attention on one [h, w, C] feature map.

    Degenerate splits (no highlight or no background patches) leave both
    attention maps at zero, so the result is matching(feat + 0 + 0).
    """
    split = split_patches(feat, mask, l)
    grid = split.grid
    ha_patches = torch.zeros_like(grid.patches)
    ba_patches = torch.zeros_like(grid.patches)

    if split.S > 0 and split.T > 0:
        scores = attention_scores(split)
        if use_ha:
            ha_patches = ha_patches.index_copy(0, split.hp_idx, highlight_fill(split, scores))
        if use_ba:
            ba_patches = ba_patches.index_copy(0, split.bp_idx, background_fill(split, scores))
    else:
        logger.debug(f"degenerate split S={split.S} T={split.T}, attention maps left at zero")

    ha_map = assemble_patches(replace(grid, patches=ha_patches))
    ba_map = assemble_patches(replace(grid, patches=ba_patches))
    return _match(feat, ha_map, ba_map, matching)


def _mirror(i: int, n: int) -> int:
    """Index into a reflect-padded axis of length n (replicate when n is too short to reflect)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def cha_oracle(feat: torch.Tensor, mask: torch.Tensor, l: int, matching: nn.Conv2d,
               use_ha: bool = True, use_ba: bool = True) -> torch.Tensor:
    """Scalar-loop evaluation of cha_forward, used as a testing oracle."""
    if feat.ndim != 3 or mask.ndim != 2 or tuple(feat.shape[:2]) != tuple(mask.shape):
        raise DimensionError(f"mask {tuple(mask.shape)} does not match feature map {tuple(feat.shape)}")
    h, w, C = feat.shape
    f = feat.detach().double().tolist()
    m = mask.detach().double().tolist()
    rows, cols = -(-h // l), -(-w // l)
    d = l * l * C

    # Tile, padding past the bottom/right edge like extract_patches(pad=True)
    edge_reflect = (-h) % l < h and (-w) % l < w
    hp, bp, hp_cells, bp_cells = [], [], [], []
    for r in range(rows):
        for q in range(cols):
            vec, masked = [], False
            for i in range(l):
                for j in range(l):
                    y, x = r * l + i, q * l + j
                    if edge_reflect:
                        sy = y if y < h else _mirror(y, h)
                        sx = x if x < w else _mirror(x, w)
                    else:
                        sy, sx = min(y, h - 1), min(x, w - 1)
                    if m[sy][sx] > 0.5:
                        masked = True
                    for c in range(C):
                        vec.append(f[sy][sx][c])
            if masked:
                hp.append(vec)
                hp_cells.append((r, q))
            else:
                bp.append(vec)
                bp_cells.append((r, q))

    S, T = len(hp), len(bp)
    ha = [[0.0] * d for _ in range(S)]
    ba = [[0.0] * d for _ in range(T)]
    if S > 0 and T > 0:
        scores = []
        for s in range(S):
            ns = max(math.sqrt(sum(v * v for v in hp[s])), NORM_FLOOR)
            cos = []
            for t in range(T):
                nt = max(math.sqrt(sum(v * v for v in bp[t])), NORM_FLOOR)
                dot = 0.0
                for k in range(d):
                    dot += hp[s][k] * bp[t][k]
                cos.append(dot / (ns * nt))
            top = max(cos)
            exps = [math.exp(v - top) for v in cos]
            total = sum(exps)
            scores.append([e / total for e in exps])
        if use_ha:
            for s in range(S):
                for t in range(T):
                    for k in range(d):
                        ha[s][k] += bp[t][k] * scores[s][t]
        if use_ba:
            for t in range(T):
                for s in range(S):
                    for k in range(d):
                        ba[t][k] += hp[s][k] * scores[s][t]

    ha_map = [[[0.0] * C for _ in range(w)] for _ in range(h)]
    ba_map = [[[0.0] * C for _ in range(w)] for _ in range(h)]
    for cells, vectors, canvas in ((hp_cells, ha, ha_map), (bp_cells, ba, ba_map)):
        for (r, q), vec in zip(cells, vectors):
            k = 0
            for i in range(l):
                for j in range(l):
                    for c in range(C):
                        y, x = r * l + i, q * l + j
                        if y < h and x < w:
                            canvas[y][x][c] = vec[k]
                        k += 1

    # 3x3 matching convolution over (feat, HA-map, BA-map) with reflect padding
    weight = matching.weight.detach().double().tolist()
    bias = matching.bias.detach().double().tolist() if matching.bias is not None else [0.0] * len(weight)
    ksize = len(weight[0][0])
    pad = ksize // 2
    reflect = pad < h and pad < w
    out = [[[0.0] * len(weight) for _ in range(w)] for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for o in range(len(weight)):
                acc = bias[o]
                for ky in range(ksize):
                    yy = y + ky - pad
                    yy = _mirror(yy, h) if reflect else min(max(yy, 0), h - 1)
                    for kx in range(ksize):
                        xx = x + kx - pad
                        xx = _mirror(xx, w) if reflect else min(max(xx, 0), w - 1)
                        pixel = f[yy][xx] + ha_map[yy][xx] + ba_map[yy][xx]
                        for ci in range(3 * C):
                            acc += weight[o][ci][ky][kx] * pixel[ci]
                out[y][x][o] = acc
    return torch.tensor(out, dtype=torch.float64)


class ContextualHighlightAttention(nn.Module):
    """Batched contextual highlight attention with a learned 3x3 matching convolution."""

    def __init__(self, channels: int, patch_len: int = 2):
        super().__init__()
        self.channels = channels
        self.patch_len = patch_len
        self.matching = nn.Conv2d(3 * channels, channels, 3)

    def forward(self, feat: torch.Tensor, mask: torch.Tensor, use_ha: bool = True, use_ba: bool = True) -> torch.Tensor:
        """
        Args:
            feat: [N, C, h, w] features
            mask: [N, 1, h, w] binary highlight mask at feature resolution

        Returns:
            [N, C, h, w] attended features
        """
        if feat.ndim != 4 or feat.shape[1] != self.channels:
            raise DimensionError(f"expected [N, {self.channels}, h, w] features, got {tuple(feat.shape)}")
        if mask.shape[0] != feat.shape[0] or mask.shape[-2:] != feat.shape[-2:]:
            raise DimensionError(f"mask {tuple(mask.shape)} does not match features {tuple(feat.shape)}")
        outputs = [
            cha_forward(f.permute(1, 2, 0), m[0], self.patch_len, self.matching, use_ha, use_ba).permute(2, 0, 1)
            for f, m in zip(feat, mask)
        ]
        return torch.stack(outputs)
