"""Condition construction for the diffusion model.

From a foreground object and its mask this module builds the 4-channel
condition map: crop and pad the object, pool its latent features over
superpixels, retrieve background knowledge from the frozen codebook with
cross-attention, integrate it with the foreground tokens (mask embedding,
patch projection, cross- then self-attention with positional encoding on
queries/keys only), reconstruct the background latent, and blend.

Mask polarity follows the convention used throughout: in ``m`` a value of 0
marks the object (kept) and 1 the background (edited); ``fg`` arguments are
the complementary foreground indicators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, init_attention, multi_head_attention
from .autograd import (Tensor, add, concat, gather_rows, gelu, layer_norm,
                       masked_select, matmul, nearest_upsample, reshape,
                       transpose)
from .errors import ConfigError, DimensionError, InputError
from .imageops import bilinear_resize
from .params import ParamStore, glorot
from .rng import Rng


# -- geometry ------------------------------------------------------------------


@dataclass
class CroppedForeground:
    image: np.ndarray      # (H, W, 3) cropped object, centered, zero padding
    fg_mask: np.ndarray    # (H, W) uint8, 1 = object pixel
    bbox: tuple[int, int, int, int]  # y0, y1, x0, x1 in the source image


def crop_and_pad(source_image: np.ndarray, source_fg: np.ndarray,
                 target: int) -> CroppedForeground:
    """Crop the tight foreground bbox, downscale if larger than the target
    frame, and paste centered on a zero canvas."""
    fg = np.asarray(source_fg) > 0
    if source_image.shape[:2] != fg.shape:
        raise DimensionError(
            f"image {source_image.shape[:2]} and mask {fg.shape} dims differ"
        )
    ys, xs = np.nonzero(fg)
    if ys.size == 0:
        raise InputError("no foreground: mask selects zero pixels")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    crop_img = source_image[y0:y1, x0:x1].astype(np.float32)
    crop_fg = fg[y0:y1, x0:x1].astype(np.float32)
    bh, bw = crop_img.shape[:2]
    if bh > target or bw > target:
        s = min(target / bh, target / bw)
        nh = max(1, min(target, int(round(bh * s))))
        nw = max(1, min(target, int(round(bw * s))))
        crop_img = bilinear_resize(crop_img, nh, nw)
        crop_fg = (bilinear_resize(crop_fg, nh, nw) > 0.5).astype(np.float32)
        bh, bw = nh, nw
    canvas = np.zeros((target, target, 3), dtype=np.float32)
    mask = np.zeros((target, target), dtype=np.uint8)
    oy, ox = (target - bh) // 2, (target - bw) // 2
    canvas[oy:oy + bh, ox:ox + bw] = crop_img
    mask[oy:oy + bh, ox:ox + bw] = crop_fg.astype(np.uint8)
    return CroppedForeground(image=canvas, fg_mask=mask, bbox=(y0, y1, x0, x1))


def downsample_mask(m: np.ndarray, factor: int) -> np.ndarray:
    """Downsample the 0=object/1=background mask; a latent cell is object (0)
    iff any covered pixel is object, so small objects survive."""
    m = np.asarray(m)
    h, w = m.shape
    if h % factor or w % factor:
        raise DimensionError(f"mask dims {m.shape} not divisible by factor {factor}")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise InputError(f"mask must be binary 0/1, found values {vals}")
    fg = (m == 0).reshape(h // factor, factor, w // factor, factor)
    any_fg = fg.any(axis=(1, 3))
    return (~any_fg).astype(np.uint8)


# -- superpixels and pooling -----------------------------------------------------


@dataclass
class SuperpixelAssignment:
    n_superpixels: int
    labels: np.ndarray  # (h, w) int64, -1 outside the foreground
    counts: np.ndarray  # (n_superpixels,) pixels per label, all >= 1


def slic_superpixels(features: np.ndarray, fg_mask: np.ndarray, n_segments: int,
                     compactness: float = 10.0, iterations: int = 10,
                     seed: int = 0) -> SuperpixelAssignment:
    """Masked SLIC over a feature map.

    Cluster centers start on a regular grid snapped to foreground cells and
    alternate assignment/update in the joint space with distance
    ||df||_2 + (compactness / grid_step) * ||dxy||_2. Pixels outside the
    mask are never assigned; the segment count is clamped to the foreground
    size; empty clusters are dropped and labels compacted. The procedure uses
    no randomness, so any seed reproduces the same partition.
    """
    if n_segments < 1:
        raise ConfigError(f"superpixel count must be >= 1, got {n_segments}")
    fg = np.asarray(fg_mask) > 0
    if features.shape[:2] != fg.shape:
        raise DimensionError(
            f"features {features.shape[:2]} and mask {fg.shape} dims differ"
        )
    pos = np.argwhere(fg).astype(np.float64)  # (n, 2) in (y, x)
    n_fg = pos.shape[0]
    if n_fg == 0:
        raise InputError("no foreground: cannot form superpixels")
    feats = features[fg].astype(np.float64)  # (n, D)
    s_eff = min(n_segments, n_fg)
    step = max(np.sqrt(n_fg / s_eff), 1.0)

    centers = _init_centers(pos, s_eff, step)
    c_pos = pos[centers]
    c_feat = feats[centers]
    w_sp = compactness / step

    assign = np.zeros(n_fg, dtype=np.int64)
    for _ in range(iterations):
        d_feat = np.sqrt(
            ((feats[:, None, :] - c_feat[None, :, :]) ** 2).sum(-1))
        d_sp = np.sqrt(((pos[:, None, :] - c_pos[None, :, :]) ** 2).sum(-1))
        assign = (d_feat + w_sp * d_sp).argmin(axis=1)
        for j in range(c_pos.shape[0]):
            sel = assign == j
            if sel.any():
                c_pos[j] = pos[sel].mean(axis=0)
                c_feat[j] = feats[sel].mean(axis=0)

    # drop empty clusters, relabel contiguously
    used, assign = np.unique(assign, return_inverse=True)
    n_final = used.size
    labels = np.full(fg.shape, -1, dtype=np.int64)
    labels[fg] = assign
    counts = np.bincount(assign, minlength=n_final)
    return SuperpixelAssignment(n_superpixels=n_final, labels=labels, counts=counts)


def _init_centers(pos: np.ndarray, s: int, step: float) -> np.ndarray:
    """Deterministic center seeding: grid points snapped to the nearest
    foreground pixel, topped up by farthest-point sampling."""
    y0, x0 = pos.min(axis=0)
    y1, x1 = pos.max(axis=0)
    rows = max(1, int(round((y1 - y0 + 1) / step)))
    cols = max(1, int(round((x1 - x0 + 1) / step)))
    while rows * cols < s:
        if rows <= cols:
            rows += 1
        else:
            cols += 1
    # -0.5 lands grid points on pixel centers, so a 2x2 grid over an even
    # square splits it into exact quadrants instead of tie-biased strips
    gy = y0 + (np.arange(rows) + 0.5) * (y1 - y0 + 1) / rows - 0.5
    gx = x0 + (np.arange(cols) + 0.5) * (x1 - x0 + 1) / cols - 0.5
    chosen: list[int] = []
    taken = np.zeros(pos.shape[0], dtype=bool)
    for yy in gy:
        for xx in gx:
            d = (pos[:, 0] - yy) ** 2 + (pos[:, 1] - xx) ** 2
            d[taken] = np.inf
            if np.isinf(d.min()):
                continue
            i = int(d.argmin())
            chosen.append(i)
            taken[i] = True
    while len(chosen) < s:
        d = ((pos[:, None, :] - pos[chosen][None, :, :]) ** 2).sum(-1).min(axis=1)
        d[taken] = -1.0
        i = int(d.argmax())
        chosen.append(i)
        taken[i] = True
    return np.asarray(chosen[:s], dtype=np.int64)


def localized_masked_pooling(features: np.ndarray,
                             assignment: SuperpixelAssignment) -> np.ndarray:
    """Per-superpixel mean of the feature map: row j is sum(features over
    label j) / count(j), channel by channel."""
    if features.shape[:2] != assignment.labels.shape:
        raise DimensionError(
            f"features {features.shape[:2]} and labels {assignment.labels.shape} differ"
        )
    d = features.shape[2]
    n = assignment.n_superpixels
    sums = np.zeros((n, d), dtype=features.dtype)
    sel = assignment.labels >= 0
    np.add.at(sums, assignment.labels[sel], features[sel])
    return sums / assignment.counts[:, None].astype(features.dtype)


# -- positional encoding -----------------------------------------------------------


def sinusoidal_pe_2d(grid_h: int, grid_w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sin/cos positional table: half the channels encode the row
    index, half the column index."""
    if dim % 4 != 0:
        raise ConfigError(f"positional encoding dim must be divisible by 4, got {dim}")
    half = dim // 2

    def axis_pe(n: int) -> np.ndarray:
        p = np.arange(n, dtype=np.float64)[:, None]
        freqs = np.exp(-np.log(10000.0) * np.arange(half // 2, dtype=np.float64) / (half // 2))
        ang = p * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (n, half)

    pe_y = axis_pe(grid_h)[:, None, :].repeat(grid_w, axis=1)
    pe_x = axis_pe(grid_w)[None, :, :].repeat(grid_h, axis=0)
    return np.concatenate([pe_y, pe_x], axis=2).reshape(grid_h * grid_w, dim).astype(dtype)


# -- learned integration parameters --------------------------------------------------


@dataclass
class ConditioningParams:
    """All trainable tensors of the condition path plus the fixed PE table."""

    retrieval: AttentionParams
    mask_embed: Tensor       # (2, 3) lookup: row = foreground-indicator value
    patch_w: Tensor          # (P*P*3, C)
    patch_b: Tensor          # (C,)
    cross: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    selfattn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor           # (C, C)
    mlp_b1: Tensor
    mlp_w2: Tensor           # (C, 3)
    mlp_b2: Tensor
    pe: np.ndarray           # (N, C) fixed
    patch_size: int
    token_dim: int


def init_conditioning(store: ParamStore, rng: Rng, latent_size: int,
                      patch_size: int, token_dim: int, heads: int,
                      codebook_dim: int = 3, dtype=np.float32) -> ConditioningParams:
    if latent_size % patch_size != 0:
        raise ConfigError(
            f"latent size {latent_size} not divisible by patch size {patch_size}"
        )
    grid = latent_size // patch_size
    n_tokens = grid * grid
    c = token_dim
    pdim = patch_size * patch_size * 3

    def lin(name, nin, nout):
        w = store.add(f"cond/{name}/w", Tensor(
            glorot(rng.split(name + "w"), (nin, nout), nin, nout, dtype), requires_grad=True))
        b = store.add(f"cond/{name}/b", Tensor(np.zeros(nout, dtype=dtype), requires_grad=True))
        return w, b

    retrieval = init_attention(store, "cond/retrieve", rng.split("retrieve"),
                               dq=codebook_dim, dkv=codebook_dim, dout=c,
                               heads=heads, dtype=dtype)
    mask_embed = store.add("cond/mask_embed", Tensor(
        glorot(rng.split("me"), (2, 3), 2, 3, dtype), requires_grad=True))
    patch_w, patch_b = lin("patch", pdim, c)
    cross = init_attention(store, "cond/cross", rng.split("cross"),
                           dq=c, dkv=c, dout=c, heads=heads, dtype=dtype)
    ln1_gain = store.add("cond/ln1/g", Tensor(np.ones(c, dtype=dtype), requires_grad=True))
    ln1_bias = store.add("cond/ln1/b", Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
    selfattn = init_attention(store, "cond/selfattn", rng.split("selfattn"),
                              dq=c, dkv=c, dout=c, heads=heads, dtype=dtype)
    ln2_gain = store.add("cond/ln2/g", Tensor(np.ones(c, dtype=dtype), requires_grad=True))
    ln2_bias = store.add("cond/ln2/b", Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
    mlp_w1, mlp_b1 = lin("mlp1", c, c)
    mlp_w2, mlp_b2 = lin("mlp2", c, 3)
    return ConditioningParams(
        retrieval=retrieval, mask_embed=mask_embed, patch_w=patch_w, patch_b=patch_b,
        cross=cross, ln1_gain=ln1_gain, ln1_bias=ln1_bias,
        selfattn=selfattn, ln2_gain=ln2_gain, ln2_bias=ln2_bias,
        mlp_w1=mlp_w1, mlp_b1=mlp_b1, mlp_w2=mlp_w2, mlp_b2=mlp_b2,
        pe=sinusoidal_pe_2d(grid, grid, c, dtype), patch_size=patch_size, token_dim=c)


# -- condition path -------------------------------------------------------------------


def retrieve_background(pooled_fg: np.ndarray, codebook: np.ndarray,
                        params: ConditioningParams) -> Tensor:
    """Cross-attend pooled foreground vectors (queries) over the codebook
    entries (keys and values); returns (S, C)."""
    if pooled_fg.shape[1] != codebook.shape[1]:
        raise ConfigError(
            f"pooled dim {pooled_fg.shape[1]} != codebook dim {codebook.shape[1]}"
        )
    q = Tensor(pooled_fg)
    kv = Tensor(codebook)
    return multi_head_attention(q, kv, kv, params.retrieval)


def build_foreground_tokens(latent_fg: np.ndarray, fg_indicator_d: np.ndarray,
                            params: ConditioningParams,
                            with_pe: bool = True) -> Tensor:
    """Mask-embed the latent foreground features, patchify, project to tokens
    and add the positional table."""
    h, w, cch = latent_fg.shape
    p = params.patch_size
    if h % p or w % p:
        raise DimensionError(f"latent {latent_fg.shape} not divisible into {p}x{p} patches")
    me = gather_rows(params.mask_embed, fg_indicator_d.reshape(-1).astype(np.int64))
    x = add(Tensor(latent_fg), reshape(me, (h, w, cch)))
    gh, gw = h // p, w // p
    x = reshape(x, (gh, p, gw, p, cch))
    x = transpose(x, (0, 2, 1, 3, 4))
    patches = reshape(x, (gh * gw, p * p * cch))
    tokens = add(matmul(patches, params.patch_w), params.patch_b)
    if with_pe:
        tokens = add(tokens, Tensor(params.pe))
    return tokens


def fafim_integrate(tokens: Tensor, retrieved: Tensor,
                    params: ConditioningParams) -> Tensor:
    """Two-stage residual attention: embed retrieved background knowledge into
    the tokens, then self-attend with PE on queries/keys but not values."""
    fused = multi_head_attention(tokens, retrieved, retrieved, params.cross)
    t_fb = layer_norm(add(fused, tokens), params.ln1_gain, params.ln1_bias)
    pe = Tensor(params.pe)
    qk = add(t_fb, pe)
    mixed = multi_head_attention(qk, qk, t_fb, params.selfattn)
    return layer_norm(add(mixed, t_fb), params.ln2_gain, params.ln2_bias)


def reconstruct_background(integrated: Tensor, latent_size: int,
                           params: ConditioningParams) -> Tensor:
    """Tokens -> coarse grid -> nearest upsample -> per-position MLP -> (h, w, 3)."""
    p = params.patch_size
    c = params.token_dim
    grid = latent_size // p
    if integrated.shape != (grid * grid, c):
        raise DimensionError(
            f"expected {(grid * grid, c)} integrated tokens, got {integrated.shape}"
        )
    x = reshape(integrated, (grid, grid, c))
    x = nearest_upsample(x, p)
    flat = reshape(x, (latent_size * latent_size, c))
    hmid = gelu(add(matmul(flat, params.mlp_w1), params.mlp_b1))
    out = add(matmul(hmid, params.mlp_w2), params.mlp_b2)
    return reshape(out, (latent_size, latent_size, 3))


@dataclass
class ConditionBundle:
    latent_fg: np.ndarray   # c^f, (h, w, 3)
    z_rec: Tensor           # reconstructed background latent, (h, w, 3)
    blended: Tensor         # c~^f: foreground kept, background filled by z_rec
    mask_d: np.ndarray      # m^d, (h, w), 1 = background
    condition: Tensor       # (h, w, 4) channel concat of blended and m^d


def build_condition(latent_fg: np.ndarray, z_rec: Tensor,
                    mask_d: np.ndarray) -> ConditionBundle:
    """Pixelwise blend c^f * (1 - m^d) + z_rec * m^d, then concat m^d."""
    h, w, _ = latent_fg.shape
    if mask_d.shape != (h, w) or z_rec.shape != (h, w, 3):
        raise DimensionError(
            f"blend shapes differ: features {latent_fg.shape}, z_rec {z_rec.shape}, "
            f"mask {mask_d.shape}"
        )
    m3 = np.repeat(mask_d.astype(latent_fg.dtype)[:, :, None], 3, axis=2)
    blended = add(Tensor(latent_fg * (1.0 - m3)), masked_select(z_rec, m3))
    cond = concat([blended, Tensor(mask_d.astype(latent_fg.dtype)[:, :, None])], axis=2)
    return ConditionBundle(latent_fg=latent_fg, z_rec=z_rec, blended=blended,
                           mask_d=mask_d, condition=cond)
