"""Modality-aware transformer block and its architecture variants.

Each position carries a modality tag (``"v"`` or ``"t"``). Components that a
variant decouples have one parameter set per modality; every position is
projected with its own modality's weights, while the attention map itself is
computed jointly over all positions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .patch_embed import TEXT, VISION

BRANCHES = (TEXT, VISION)

ATTN_WEIGHTS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo")
LN_PARAMS = ("ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias")
FFN_WEIGHTS = ("ffn.up", "ffn.down")
BASE_NAMES = ATTN_WEIGHTS + LN_PARAMS + FFN_WEIGHTS


class ConfigError(ValueError):
    """Invalid model or block configuration."""


class VariantKind(str, enum.Enum):
    DENSE = "dense"  # one weight set for both modalities
    REP = "rep"  # dense + trainable additive delta on each FFN weight
    MOE_FFN = "moe_ffn"  # FFN per modality
    LN_ONLY = "ln_only"  # both LayerNorms per modality
    DAC = "dac"  # attention projections, both LayerNorms and FFN per modality

    @classmethod
    def parse(cls, kind) -> "VariantKind":
        try:
            return cls(kind.value if isinstance(kind, cls) else str(kind))
        except ValueError:
            raise ConfigError(f"unknown variant {kind!r}; expected one of {[k.value for k in cls]}") from None


_DECOUPLED = {
    VariantKind.DENSE: (),
    VariantKind.REP: (),
    VariantKind.MOE_FFN: FFN_WEIGHTS,
    VariantKind.LN_ONLY: LN_PARAMS,
    VariantKind.DAC: BASE_NAMES,
}


def decoupled_names(kind) -> tuple:
    """Base parameter names that get one copy per modality under ``kind``."""
    return _DECOUPLED[VariantKind.parse(kind)]


def param_names(kind) -> list:
    """Local tensor names of a block of the given variant, in canonical order."""
    kind = VariantKind.parse(kind)
    dec = set(_DECOUPLED[kind])
    names = []
    for base in BASE_NAMES:
        if base in dec:
            names += [f"{base}.{TEXT}", f"{base}.{VISION}"]
        else:
            names.append(base)
    if kind is VariantKind.REP:
        names += [f"{w}.delta" for w in FFN_WEIGHTS]
    return names


def _shape(base: str, d: int, d_ff: int) -> tuple:
    if base == "ffn.up":
        return (d, d_ff)
    if base == "ffn.down":
        return (d_ff, d)
    if base.startswith("attn."):
        return (d, d)
    return (d,)


def _init_value(base: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if base.endswith(".gain"):
        return np.ones(shape)
    if base.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, 0.02, shape)


@dataclass
class BlockParams:
    """Parameters of one block.

    ``tensors`` maps local names (``"attn.wq.v"``, ``"ffn.up"``, ...) to
    tensors. A shared component is stored once and both modality tags
    resolve to that same object.
    """

    kind: VariantKind
    d: int
    d_ff: int
    n_heads: int
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    ln_eps: float = 1e-5

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    def get(self, base: str, branch: str) -> Tensor:
        """The stored tensor used for ``base`` by positions of ``branch``."""
        key = f"{base}.{branch}"
        return self.tensors[key] if key in self.tensors else self.tensors[base]

    def resolve(self) -> Dict[str, Dict[str, Tensor]]:
        """Effective per-branch weights for one forward pass.

        For the ``rep`` variant the FFN weights become ``base + delta``; the
        sum is built once so both branches still alias one tensor.
        """
        out = {}
        for base in BASE_NAMES:
            if self.kind is VariantKind.REP and base in FFN_WEIGHTS:
                eff = ad.add(self.tensors[base], self.tensors[f"{base}.delta"])
                out[base] = {TEXT: eff, VISION: eff}
            else:
                out[base] = {b: self.get(base, b) for b in BRANCHES}
        return out

    def param_count(self) -> int:
        seen = {}
        for t in self.tensors.values():
            seen[id(t)] = t.size
        return sum(seen.values())

    def merged(self) -> "BlockParams":
        """Fold ``rep`` deltas into the base weights, giving a dense block."""
        if self.kind is not VariantKind.REP:
            raise ConfigError("only rep blocks can be merged")
        tensors = {}
        for name in param_names(VariantKind.DENSE):
            data = self.tensors[name].data
            if name in FFN_WEIGHTS:
                data = data + self.tensors[f"{name}.delta"].data
            tensors[name] = Tensor(data.copy(), requires_grad=True)
        return BlockParams(VariantKind.DENSE, self.d, self.d_ff, self.n_heads, tensors, self.ln_eps)

    def tie_branches(self, source: str = TEXT) -> None:
        """Copy ``source``-branch values into every other branch (values only)."""
        for name, t in self.tensors.items():
            for b in BRANCHES:
                if b != source and name.endswith(f".{b}"):
                    t.data = self.tensors[name[: -len(b)] + source].data.copy()


def build_variant(kind, d: int, d_ff: int, n_heads: int, seed: int = 0, ln_eps: float = 1e-5) -> BlockParams:
    """Freshly initialised block of the given variant.

    Decoupled branches are drawn independently; ``rep`` deltas start at zero.
    """
    kind = VariantKind.parse(kind)
    if min(d, d_ff, n_heads) < 1 or d % n_heads:
        raise ConfigError(f"invalid block dims d={d}, d_ff={d_ff}, n_heads={n_heads}")
    if (d // n_heads) % 2:
        raise ConfigError(f"head dim {d // n_heads} must be even for rotary embedding")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in param_names(kind):
        if name.endswith(".delta"):
            base = name[: -len(".delta")]
            tensors[name] = Tensor(np.zeros(_shape(base, d, d_ff)), requires_grad=True)
            continue
        base = name[:-2] if name.endswith((".v", ".t")) else name
        shape = _shape(base, d, d_ff)
        tensors[name] = Tensor(_init_value(base, shape, rng), requires_grad=True)
    return BlockParams(kind, d, d_ff, n_heads, tensors, ln_eps)


def param_count(kind, d: int, d_ff: int, n_heads: int = 1) -> int:
    """Closed-form parameter count of one block."""
    kind = VariantKind.parse(kind)
    attn, ln, ffn = 4 * d * d, 4 * d, 2 * d * d_ff
    dense = attn + ln + ffn
    return {
        VariantKind.DENSE: dense,
        VariantKind.REP: dense + ffn,
        VariantKind.MOE_FFN: dense + ffn,
        VariantKind.LN_ONLY: dense + ln,
        VariantKind.DAC: 2 * dense,
    }[kind]


def active_flops_per_token(kind, d: int, d_ff: int, n: int, n_heads: int = 1) -> int:
    """Multiplies executed per token by one block at context length ``n``.

    Q/K/V/O projections (4 d^2), scores and value mixing against ``n`` keys
    (2 n d) and the FFN pair (2 d d_ff). Routing picks one branch per token,
    so every variant costs the same; ``rep`` adds its delta to the weight
    once per pass, not per token.
    """
    VariantKind.parse(kind)
    return 4 * d * d + 2 * n * d + 2 * d * d_ff


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------
def as_modality_array(ids) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.dtype == bool:
        return np.where(arr, VISION, TEXT)
    arr = arr.astype(str)
    bad = ~np.isin(arr, BRANCHES)
    if bad.any():
        raise ValueError(f"modality tags must be 'v' or 't', got {np.unique(arr[bad]).tolist()}")
    return arr


def route(ids) -> Dict[str, np.ndarray]:
    """Per-modality index lists that partition ``range(len(ids))``.

    >>> {k: v.tolist() for k, v in route(["t", "v", "v", "t"]).items()}
    {'t': [0, 3], 'v': [1, 2]}
    """
    arr = as_modality_array(ids).reshape(-1)
    return {b: np.flatnonzero(arr == b) for b in BRANCHES}


class Router:
    """Dispatches row-wise computations to per-modality parameter branches.

    ``mode="gather"`` runs each branch only on its own rows and scatters the
    results back; ``mode="select"`` runs every branch on all rows and picks
    per row, which keeps the floating-point evaluation order identical to an
    unrouted computation.
    """

    def __init__(self, ids, mode: str = "gather"):
        if mode not in ("gather", "select"):
            raise ValueError(f"unknown dispatch mode {mode!r}")
        self.ids = as_modality_array(ids).reshape(-1)
        self.n = self.ids.size
        self.groups = route(self.ids)
        self.mode = mode
        self.choice = (self.ids == VISION).astype(np.int64)

    def apply(self, x: Tensor, fn: Callable[[str, Tensor], tuple], shared: bool) -> tuple:
        if shared:
            return fn(TEXT, x)
        if self.mode == "select":
            outs = [fn(b, x) for b in BRANCHES]
            return tuple(ad.select_rows(self.choice, [o[j] for o in outs]) for j in range(len(outs[0])))
        live = [b for b in BRANCHES if self.groups[b].size]
        outs = [fn(b, ad.gather_rows(x, self.groups[b])) for b in live]
        idx = [self.groups[b] for b in live]
        return tuple(ad.interleave_rows([o[j] for o in outs], idx, self.n) for j in range(len(outs[0])))


def _shared(w: Dict[str, Dict[str, Tensor]], names: Sequence[str]) -> bool:
    return all(w[n][TEXT] is w[n][VISION] for n in names)


def _flatten(x: Tensor, ids):
    """Normalise inputs to ``(B*n) x d`` rows plus ``(B, n)``."""
    ids = as_modality_array(ids)
    if x.ndim == 2:
        B, n = 1, x.shape[0]
    elif x.ndim == 3:
        B, n = x.shape[0], x.shape[1]
    else:
        raise DimensionError(f"expected n x d or B x n x d input, got {x.shape}")
    if ids.size != B * n or (ids.ndim == 2 and ids.shape != (B, n)):
        raise DimensionError(f"{ids.shape} modality tags for input of shape {x.shape}")
    return ad.reshape(x, (B * n, x.shape[-1])) if x.ndim == 3 else x, ids.reshape(-1), B, n


def _causal_mask(n_q: int, n_k: int) -> np.ndarray:
    # query i (absolute position n_k - n_q + i) sees keys <= its own position
    return np.tril(np.ones((n_q, n_k), dtype=bool), k=n_k - n_q)


def _check_causal(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise DimensionError(f"mask shape {mask.shape} does not match sequence length {n}")
    if np.triu(mask, k=1).any():
        raise ValueError("attention mask must be lower-triangular (decoder-only)")
    return mask


def _layer_norm_routed(x, w, which: str, router: Router, eps: float) -> Tensor:
    names = (f"{which}.gain", f"{which}.bias")

    def fn(b, xb):
        return (ad.layer_norm(xb, w[names[0]][b], w[names[1]][b], eps),)

    return router.apply(x, fn, _shared(w, names))[0]


def _attention_rows(
    xn: Tensor,
    w,
    router: Router,
    B: int,
    n: int,
    n_heads: int,
    positions: np.ndarray,
    mask: Optional[np.ndarray],
    cache: Optional[dict],
    rope_base: float,
) -> Tensor:
    d = xn.shape[-1]
    dk = d // n_heads
    qkv_names = ATTN_WEIGHTS[:3]

    def proj(b, xb):
        return tuple(ad.matmul(xb, w[nm][b]) for nm in qkv_names)

    q, k, v = router.apply(xn, proj, _shared(w, qkv_names))

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, n, n_heads, dk)), (0, 2, 1, 3))

    q = ad.rope(heads(q), positions, rope_base)
    k = ad.rope(heads(k), positions, rope_base)
    v = heads(v)
    if cache is not None:
        if "k" in cache:
            k = ad.concat([Tensor(cache["k"]), k], axis=2)
            v = ad.concat([Tensor(cache["v"]), v], axis=2)
        cache["k"], cache["v"] = k.data, v.data
    n_k = k.shape[2]
    if mask is None:
        mask = _causal_mask(n, n_k)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    att = ad.softmax_lastdim(scores, mask)
    ctx = ad.matmul(att, v)  # B x h x n x dk
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B * n, d))

    def out_proj(b, cb):
        return (ad.matmul(cb, w["attn.wo"][b]),)

    return router.apply(ctx, out_proj, _shared(w, ("attn.wo",)))[0]


def _ffn_routed(x: Tensor, w, router: Router) -> Tensor:
    def fn(b, xb):
        return (ad.matmul(ad.gelu(ad.matmul(xb, w["ffn.up"][b])), w["ffn.down"][b]),)

    return router.apply(x, fn, _shared(w, FFN_WEIGHTS))[0]


def attention_forward(
    x: Tensor,
    ids,
    p: BlockParams,
    causal_mask: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    dispatch: str = "gather",
    rope_base: float = 10000.0,
) -> Tensor:
    """Joint causal self-attention with per-position Q/K/V/O branches.

    ``x`` is ``n x d`` (or ``B x n x d``); ``ids`` holds one modality tag per
    position. No normalisation is applied here.
    """
    xf, flat_ids, B, n = _flatten(x, ids)
    mask = None if causal_mask is None else _check_causal(causal_mask, n)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    out = _attention_rows(xf, p.resolve(), Router(flat_ids, dispatch), B, n, p.n_heads, pos, mask, None, rope_base)
    return ad.reshape(out, x.shape)


def block_forward_rows(
    x: Tensor,
    router: Router,
    p: BlockParams,
    B: int,
    n: int,
    positions: np.ndarray,
    cache: Optional[dict] = None,
    mask: Optional[np.ndarray] = None,
    rope_base: float = 10000.0,
) -> Tensor:
    """Pre-norm residual block on flattened ``(B*n) x d`` rows."""
    w = p.resolve()
    a = _layer_norm_routed(x, w, "ln1", router, p.ln_eps)
    h = ad.add(x, _attention_rows(a, w, router, B, n, p.n_heads, positions, mask, cache, rope_base))
    f = _layer_norm_routed(h, w, "ln2", router, p.ln_eps)
    return ad.add(h, _ffn_routed(f, w, router))


def block_forward(
    x: Tensor,
    ids,
    p: BlockParams,
    causal_mask: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    dispatch: str = "gather",
    rope_base: float = 10000.0,
) -> Tensor:
    """``h = x + ATTN(LN1(x))``; ``x' = h + FFN(LN2(h))``, every sub-layer
    using the branch of each position's modality."""
    xf, flat_ids, B, n = _flatten(x, ids)
    mask = None if causal_mask is None else _check_causal(causal_mask, n)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    out = block_forward_rows(xf, Router(flat_ids, dispatch), p, B, n, pos, None, mask, rope_base)
    return ad.reshape(out, x.shape)
