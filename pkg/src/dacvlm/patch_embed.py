"""Image to token encoding: resolution policies, strided-conv patch embedding,
the ``<CLS>``/``<SPL>`` sequence layout and multimodal concatenation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import DimensionError, Tensor, conv2d, gather_rows, gelu, interleave_rows, reshape, transpose

VISION = "v"
TEXT = "t"

PATCH = 32
CONV1_STRIDE = 16
CONV2_STRIDE = 2

MODES = ("AnyRatio_maxL", "AnyRatio_LD", "AnyRatio_HD", "AnyResolution")

# per-position slot kinds
SLOT_CLS = "cls"
SLOT_PATCH = "patch"
SLOT_SPL = "spl"
SLOT_TEXT = "text"


class LengthError(ValueError):
    """A sequence exceeds the model context limit."""


@dataclass(frozen=True)
class ResolutionLimits:
    max_edge: int = 800
    ld_area: int = 800 * 800
    hd_area: int = 1600 * 1600
    max_pixels: int = 1600 * 1600
    grid: int = PATCH


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _snap(v: float, grid: int) -> int:
    return max(grid, _round_half_up(v / grid) * grid)


def _cap_area(h: int, w: int, area: int, grid: int) -> tuple:
    hs, ws = _snap(h, grid), _snap(w, grid)
    if hs * ws <= area:
        return hs, ws
    s = math.sqrt(area / (h * w))
    hs, ws = _snap(h * s, grid), _snap(w * s, grid)
    # rounding may overshoot the cap; floor the axes until it fits
    if hs * ws > area:
        hs = max(grid, int(h * s // grid) * grid)
        ws = max(grid, int(w * s // grid) * grid)
    return hs, ws


def resolve_resolution(h: int, w: int, mode: str = "AnyRatio_HD", limits: Optional[ResolutionLimits] = None) -> tuple:
    """Target ``(height, width)`` in pixels, both multiples of 32.

    ``AnyRatio_maxL`` scales the longest edge to ``max_edge``;
    ``AnyRatio_LD``/``AnyRatio_HD`` keep the aspect ratio and cap the area at
    800^2 / 1600^2; ``AnyResolution`` snaps to the grid and only downscales
    past ``max_pixels``.

    >>> resolve_resolution(512, 256, "AnyRatio_maxL")
    (800, 416)
    """
    lim = limits or ResolutionLimits()
    if h < lim.grid or w < lim.grid:
        raise DimensionError(f"image {h}x{w} is smaller than one {lim.grid}px patch")
    if mode == "AnyRatio_maxL":
        s = lim.max_edge / max(h, w)
        if h >= w:
            return lim.max_edge, _snap(w * s, lim.grid)
        return _snap(h * s, lim.grid), lim.max_edge
    if mode == "AnyRatio_LD":
        return _cap_area(h, w, lim.ld_area, lim.grid)
    if mode == "AnyRatio_HD":
        return _cap_area(h, w, lim.hd_area, lim.grid)
    if mode == "AnyResolution":
        return _cap_area(h, w, lim.max_pixels, lim.grid)
    raise ValueError(f"unknown resolution mode {mode!r}; expected one of {MODES}")


@dataclass
class ImageInput:
    """Planar RGB image, values in [0, 1], shape ``3 x H x W``."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DimensionError(f"expected 3 x H x W pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def resize(img: ImageInput, h: int, w: int) -> ImageInput:
    """Bilinear resample to exactly ``h x w``."""
    if (h, w) == (img.height, img.width):
        return img
    zoom = (1.0, h / img.height, w / img.width)
    out = ndimage.zoom(img.pixels, zoom, order=1, mode="nearest", grid_mode=True)
    if out.shape[1:] != (h, w):
        raise DimensionError(f"resize produced {out.shape[1:]}, wanted {(h, w)}")
    return ImageInput(np.clip(out, 0.0, 1.0))


def apply_policy(img: ImageInput, mode: str = "AnyRatio_HD", limits: Optional[ResolutionLimits] = None) -> ImageInput:
    h, w = resolve_resolution(img.height, img.width, mode, limits)
    return resize(img, h, w)


def fit_token_budget(img: ImageInput, max_tokens: int) -> ImageInput:
    """Downscale (aspect preserved) so the image yields at most ``max_tokens`` patches."""
    if (img.height // PATCH) * (img.width // PATCH) <= max_tokens and img.height % PATCH == 0 and img.width % PATCH == 0:
        return img
    h, w = _cap_area(img.height, img.width, max_tokens * PATCH * PATCH, PATCH)
    return resize(img, h, w)


# ---------------------------------------------------------------------------
# Parameters and sequences
# ---------------------------------------------------------------------------
@dataclass
class PatchEmbedParams:
    conv1: Tensor  # d1 x 3 x 16 x 16
    conv2: Tensor  # d x d1 x 2 x 2
    cls: Tensor  # d
    spl: Tensor  # d

    @classmethod
    def init(cls, d1: int = 64, d: int = 128, seed: int = 0) -> "PatchEmbedParams":
        rng = np.random.default_rng(seed)
        k1 = rng.normal(0.0, 1.0 / math.sqrt(3 * CONV1_STRIDE**2), (d1, 3, CONV1_STRIDE, CONV1_STRIDE))
        # zero response to flat gray patches, so a white background starts at 0
        k1 -= k1.mean(axis=(1, 2, 3), keepdims=True)
        k2 = rng.normal(0.0, 1.0 / math.sqrt(d1 * CONV2_STRIDE**2), (d, d1, CONV2_STRIDE, CONV2_STRIDE))
        return cls(
            conv1=Tensor(k1, requires_grad=True),
            conv2=Tensor(k2, requires_grad=True),
            cls=Tensor(rng.normal(0.0, 0.02, d), requires_grad=True),
            spl=Tensor(rng.normal(0.0, 0.02, d), requires_grad=True),
        )

    @property
    def dim(self) -> int:
        return self.conv2.shape[0]

    def named(self) -> dict:
        return {"conv1": self.conv1, "conv2": self.conv2, "cls": self.cls, "spl": self.spl}


def image_layout(gh: int, gw: int) -> np.ndarray:
    """Slot kinds of one image segment: CLS, then each row of patches plus SPL."""
    row = [SLOT_PATCH] * gw + [SLOT_SPL]
    return np.array([SLOT_CLS] + row * gh)


def decode_layout(slots: Sequence[str]) -> tuple:
    """Recover the patch grid ``(rows, cols)`` from an image segment's slot kinds."""
    slots = list(slots)
    if not slots or slots[0] != SLOT_CLS:
        raise DimensionError("image segment must start with CLS")
    rows, widths, run = 0, [], 0
    for s in slots[1:]:
        if s == SLOT_PATCH:
            run += 1
        elif s == SLOT_SPL:
            rows += 1
            widths.append(run)
            run = 0
        else:
            break
    if run or not widths or len(set(widths)) != 1 or widths[0] == 0:
        raise DimensionError("image segment rows are ragged or unterminated")
    return rows, widths[0]


@dataclass
class TokenSequence:
    """One interleaved multimodal sequence.

    Vision positions (CLS, patches, SPL) carry rows of ``vision_embeds`` in
    order; text positions carry ``token_ids``. ``loss_mask`` marks positions
    whose token is a supervised target.
    """

    token_ids: np.ndarray
    modality: np.ndarray
    slots: np.ndarray
    loss_mask: np.ndarray
    vision_embeds: Optional[Tensor] = None
    image_grid: Optional[tuple] = None

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.modality) == len(self.slots) == len(self.loss_mask) == n):
            raise DimensionError("TokenSequence fields differ in length")
        nv = int((self.modality == VISION).sum())
        have = 0 if self.vision_embeds is None else self.vision_embeds.shape[0]
        if nv != have:
            raise DimensionError(f"{nv} vision positions but {have} vision embeddings")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def n_image_tokens(self) -> int:
        return int((self.modality == VISION).sum())


def _patchify(pixels: Tensor, params: PatchEmbedParams) -> Tensor:
    h = conv2d(pixels, params.conv1, CONV1_STRIDE)
    return conv2d(gelu(h), params.conv2, CONV2_STRIDE)


def _check_dims(h: int, w: int) -> None:
    if h % PATCH or w % PATCH or h == 0 or w == 0:
        raise DimensionError(f"image dims {h}x{w} are not positive multiples of {PATCH}; resolve the resolution first")


def embed_images(pixels: np.ndarray, params: PatchEmbedParams) -> Tensor:
    """Embed a batch ``B x 3 x H x W`` into ``B * L`` rows in segment layout order."""
    B, C, H, W = pixels.shape
    _check_dims(H, W)
    gh, gw = H // PATCH, W // PATCH
    feat = _patchify(Tensor(pixels), params)  # B x d x gh x gw
    d = feat.shape[1]
    patches = reshape(transpose(feat, (0, 2, 3, 1)), (B * gh * gw, d))
    seg = image_layout(gh, gw)
    L = seg.size
    offs = (np.arange(B) * L)[:, None]
    cls_pos = (offs + np.flatnonzero(seg == SLOT_CLS)).reshape(-1)
    patch_pos = (offs + np.flatnonzero(seg == SLOT_PATCH)).reshape(-1)
    spl_pos = (offs + np.flatnonzero(seg == SLOT_SPL)).reshape(-1)
    cls_rows = gather_rows(reshape(params.cls, (1, d)), np.zeros(B, dtype=np.int64))
    spl_rows = gather_rows(reshape(params.spl, (1, d)), np.zeros(B * gh, dtype=np.int64))
    return interleave_rows([cls_rows, patches, spl_rows], [cls_pos, patch_pos, spl_pos], B * L)


def embed_image(img: ImageInput, params: PatchEmbedParams) -> TokenSequence:
    """Encode one policy-resolved image into its vision token segment."""
    _check_dims(img.height, img.width)
    gh, gw = img.height // PATCH, img.width // PATCH
    rows = embed_images(img.pixels[None], params)
    seg = image_layout(gh, gw)
    n = seg.size
    return TokenSequence(
        token_ids=np.full(n, -1, dtype=np.int64),
        modality=np.full(n, VISION),
        slots=seg,
        loss_mask=np.zeros(n, dtype=bool),
        vision_embeds=rows,
        image_grid=(gh, gw),
    )


def concat_multimodal(
    img_seq: Optional[TokenSequence],
    text_ids: Sequence[int],
    context_limit: int = 1024,
    loss_mask: Optional[Sequence[bool]] = None,
) -> TokenSequence:
    """Image segment followed by text; text positions are supervised unless
    ``loss_mask`` says otherwise."""
    text_ids = np.asarray(text_ids, dtype=np.int64).reshape(-1)
    nt = text_ids.size
    nv = 0 if img_seq is None else len(img_seq)
    if nv + nt > context_limit:
        raise LengthError(f"sequence of {nv + nt} tokens exceeds context limit {context_limit}")
    tmask = np.ones(nt, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    if tmask.shape != (nt,):
        raise DimensionError("loss_mask length differs from text length")
    if img_seq is None or nv == 0:
        return TokenSequence(
            token_ids=text_ids,
            modality=np.full(nt, TEXT),
            slots=np.full(nt, SLOT_TEXT),
            loss_mask=tmask,
        )
    return TokenSequence(
        token_ids=np.concatenate([img_seq.token_ids, text_ids]),
        modality=np.concatenate([img_seq.modality, np.full(nt, TEXT)]),
        slots=np.concatenate([img_seq.slots, np.full(nt, SLOT_TEXT)]),
        loss_mask=np.concatenate([img_seq.loss_mask, tmask]),
        vision_embeds=img_seq.vision_embeds,
        image_grid=img_seq.image_grid,
    )


# ---------------------------------------------------------------------------
# PPM (P6) fixtures
# ---------------------------------------------------------------------------
def to_ppm_bytes(img: ImageInput) -> bytes:
    rgb = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + rgb.transpose(1, 2, 0).tobytes()


def from_ppm_bytes(raw: bytes) -> ImageInput:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval={maxval}")
    pos += 1
    body = raw[pos : pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError("PPM payload truncated")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return ImageInput(arr.astype(np.float64) / 255.0)


def save_ppm(img: ImageInput, path) -> None:
    Path(path).write_bytes(to_ppm_bytes(img))


def load_ppm(path) -> ImageInput:
    return from_ppm_bytes(Path(path).read_bytes())
