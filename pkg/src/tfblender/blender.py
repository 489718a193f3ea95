"""Temporal relation, feature adjustment and feature blending.

For a current frame feature ``f_i`` and the members of its neighbourhood:

* temporal relation: ``W(f_a, f_b) = M(g(f_a, f_b))`` -- a small conv stack
  ``M`` applied to a channel-wise relation tensor ``g``;
* feature adjustment: ``F(f_i, f_j) = [sum_{m != j} W(f_j, f_m)] * f_j``,
  or plain ``f_j`` when ``j`` has no other neighbours;
* blending: ``dF = sum_j relu(W(f_i, f_j)) * softmax_c(F(f_i, f_j))``,
  where a neighbour whose normalised feature has cosine similarity above
  ``delta`` with ``f_i`` contributes nothing.

The batched implementation (:func:`blend_vars`) is written against the
autodiff ops so training and inference share one code path.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tensor import (
    ConvLayer,
    ShapeMismatchError,
    Tensor3,
    decode_tfb,
    encode_tfb,
    resolve_dtype,
)


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class RelationVariant(str, enum.Enum):
    CONCAT2 = "concat2"                    # f_i, f_j
    DIFF = "diff"                          # f_i - f_j
    SUM = "sum"                            # f_i + f_j
    CONCAT2_PLUS_SUM = "concat2_plus_sum"  # f_i, f_j, f_i + f_j
    DIFF_PLUS_SUM = "diff_plus_sum"        # f_i - f_j, f_i + f_j
    CONCAT3 = "concat3"                    # f_i, f_j, f_i - f_j
    CONCAT4 = "concat4"                    # f_i, f_j, f_i - f_j, f_j - f_i

    @property
    def multiplier(self):
        return _MULTIPLIERS[self]

    def channels(self, c):
        return self.multiplier * c

    def build(self, a, b):
        """Relation tensor for Vars/arrays ``a``, ``b`` with channels on axis -3."""
        a, b = ad.constant(a), ad.constant(b)
        parts = {
            "i": lambda: a,
            "j": lambda: b,
            "d": lambda: ad.sub(a, b),
            "r": lambda: ad.sub(b, a),
            "s": lambda: ad.add(a, b),
        }
        pieces = [parts[k]() for k in _RECIPES[self]]
        return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=-3)


_RECIPES = {
    RelationVariant.CONCAT2: "ij",
    RelationVariant.DIFF: "d",
    RelationVariant.SUM: "s",
    RelationVariant.CONCAT2_PLUS_SUM: "ijs",
    RelationVariant.DIFF_PLUS_SUM: "ds",
    RelationVariant.CONCAT3: "ijd",
    RelationVariant.CONCAT4: "ijdr",
}
_MULTIPLIERS = {v: len(r) for v, r in _RECIPES.items()}


@dataclass(frozen=True)
class FrameFeature:
    t: int
    feature: Tensor3


@dataclass(frozen=True)
class Neighborhood:
    """Current frame plus its ordered neighbours.

    With ``include_self`` the current frame is also a member of its own
    neighbourhood and goes through the same weighting as the others.
    """

    current: FrameFeature
    neighbors: tuple
    include_self: bool = True

    def __post_init__(self):
        neighbors = tuple(self.neighbors)
        object.__setattr__(self, "neighbors", neighbors)
        if not neighbors:
            raise ValueError("a neighbourhood needs at least one neighbour")
        times = [n.t for n in neighbors]
        if len(set(times)) != len(times):
            raise ValueError(f"duplicate neighbour time indices: {times}")
        if self.current.t in times:
            raise ValueError(f"current frame t={self.current.t} listed among its neighbours")
        shape = self.current.feature.shape
        for n in neighbors:
            if n.feature.shape != shape:
                raise ShapeMismatchError(
                    f"neighbour t={n.t} has shape {n.feature.shape}, current has {shape}"
                )

    @property
    def members(self):
        """Frames that make up N(F_i), current frame first when included."""
        return ((self.current,) if self.include_self else ()) + self.neighbors

    def member_stack(self, dtype=None):
        arr = np.stack([m.feature.data for m in self.members])
        return arr if dtype is None else arr.astype(dtype, copy=False)


def hidden_widths(g_channels, channels, depth):
    """Output width of each conv in M: halve from the relation width down to C."""
    widths = []
    for k in range(depth - 1):
        widths.append(max(channels, g_channels // 2 ** (k + 1)))
    widths.append(channels)
    return widths


@dataclass(frozen=True, eq=False)
class MiniNetParams:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not 1 <= len(layers) <= 4:
            raise ValueError(f"mini-network depth must be in 1..4, got {len(layers)}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ShapeMismatchError(
                    f"layer widths incompatible: {prev.out_channels} -> {nxt.in_channels}"
                )

    @classmethod
    def initialize(cls, channels, variant=RelationVariant.CONCAT4, depth=3, kernel=3,
                   seed=0, precision="double"):
        """Fan-in scaled uniform weights, zero biases."""
        variant = RelationVariant(variant)
        if not 1 <= depth <= 4:
            raise ValueError(f"depth must lie in 1..4, got {depth}")
        rng = np.random.default_rng(seed)
        dtype = resolve_dtype(precision)
        layers = []
        c_in = variant.channels(channels)
        for c_out in hidden_widths(c_in, channels, depth):
            bound = np.sqrt(1.0 / (c_in * kernel * kernel))
            w = rng.uniform(-bound, bound, size=(c_out, c_in, kernel, kernel)).astype(dtype)
            layers.append(ConvLayer(w, np.zeros(c_out, dtype=dtype)))
            c_in = c_out
        return cls(layers)

    @classmethod
    def zeros_like(cls, other):
        return cls([ConvLayer(np.zeros_like(l.weights), np.zeros_like(l.bias))
                    for l in other.layers])

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    @property
    def depth(self):
        return len(self.layers)

    @property
    def kernel(self):
        return self.layers[0].kernel

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def with_arrays(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise ShapeMismatchError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = []
        for layer, w, b in zip(self.layers, arrays[::2], arrays[1::2]):
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ShapeMismatchError("array shapes do not match the existing layers")
            layers.append(ConvLayer(np.asarray(w), np.asarray(b)))
        return MiniNetParams(layers)

    def astype(self, precision):
        dtype = resolve_dtype(precision)
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def check_compatible(self, channels, variant):
        expect = RelationVariant(variant).channels(channels)
        if self.in_channels != expect:
            raise ShapeMismatchError(
                f"mini-network takes {self.in_channels} channels, "
                f"variant {RelationVariant(variant).value} with C={channels} gives {expect}"
            )
        if self.out_channels != channels:
            raise ShapeMismatchError(
                f"mini-network emits {self.out_channels} channels, features have {channels}"
            )


AGGREGATE_MODES = ("replace", "residual")
_CONFIG_KEYS = ("delta", "variant", "layers", "kernel", "enable_tr", "enable_fa", "enable_fb",
                "include_self", "aggregate_mode", "precision", "seed")


@dataclass(frozen=True)
class BlenderConfig:
    delta: float = 0.7
    variant: RelationVariant = RelationVariant.CONCAT4
    layers: int = 3
    kernel: int = 3
    enable_tr: bool = True
    enable_fa: bool = True
    enable_fb: bool = True
    include_self: bool = True
    aggregate_mode: str = "replace"
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", RelationVariant(self.variant))
        except ValueError:
            names = ", ".join(v.value for v in RelationVariant)
            raise ConfigError("variant", f"unknown variant {self.variant!r} (one of {names})")
        if not -1.0 <= float(self.delta) <= 1.0:
            raise ConfigError("delta", f"must lie in [-1, 1], got {self.delta}")
        if self.layers not in (1, 2, 3, 4):
            raise ConfigError("layers", f"must be 1..4, got {self.layers}")
        if self.kernel not in (1, 3):
            raise ConfigError("kernel", f"must be 1 or 3, got {self.kernel}")
        if self.aggregate_mode not in AGGREGATE_MODES:
            raise ConfigError("aggregate_mode", f"must be one of {AGGREGATE_MODES}")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision", "must be 'single' or 'double'")
        for key in ("enable_tr", "enable_fa", "enable_fb", "include_self"):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(key, "must be true or false")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    def to_json(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_json(cls, data):
        unknown = sorted(set(data) - set(_CONFIG_KEYS))
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        return cls(**data)

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def with_(self, **changes):
        return replace(self, **changes)

    def init_params(self, channels, seed=None):
        return MiniNetParams.initialize(channels, self.variant, self.layers, self.kernel,
                                       self.seed if seed is None else seed, self.precision)


# -- batched core (autodiff) -----------------------------------------------------


def mini_network_vars(x, weights):
    """Apply the conv stack to ``x[..., Cg, H, W]``; ReLU between layers, none after the last."""
    lead = x.shape[:-3]
    h = ad.reshape(x, (-1,) + x.shape[-3:])
    n = len(weights) // 2
    for k in range(n):
        h = ad.conv2d(h, weights[2 * k], weights[2 * k + 1])
        if k < n - 1:
            h = ad.relu(h)
    return ad.reshape(h, lead + h.shape[1:])


@dataclass
class BlendTrace:
    """Intermediate values of one batched blend (all plain arrays, shape ``(B, P, C, H, W)``).

    ``w_hat`` already has gated members zeroed; ``cos`` is NaN where the
    similarity is undefined (all-zero current feature).
    """

    raw_weights: np.ndarray
    adjusted: np.ndarray
    w_hat: np.ndarray
    f_hat: np.ndarray
    cos: np.ndarray
    keep: np.ndarray
    terms: list = field(default_factory=list)


def _cosine_rows(x, y):
    x = x.reshape(x.shape[:2] + (-1,)).astype(np.float64)
    y = y.reshape(y.shape[:1] + (1, -1)).astype(np.float64)
    dot = (x * y).sum(-1)
    norm = np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, np.clip(dot / np.where(norm > 0, norm, 1.0), -1, 1), np.nan)


def pair_weights_vars(lhs, rhs, weights, config):
    """``W(lhs, rhs)`` for stacked pairs; a per-pair global mean when TR is off."""
    w = mini_network_vars(config.variant.build(lhs, rhs), weights)
    if not config.enable_tr:
        w = ad.mean(w, axis=(-3, -2, -1), keepdims=True)
    return w


def blend_vars(current, members, weights, config):
    """Batched blend.

    ``current`` is ``(B, C, H, W)``, ``members`` is ``(B, P, C, H, W)`` (the
    neighbourhood, current frame included if the caller wants it), and
    ``weights`` is the flat ``[w0, b0, w1, b1, ...]`` list.  Returns the
    blended Var ``(B, C, H, W)`` and a :class:`BlendTrace`.
    """
    current, members = ad.constant(current), ad.constant(members)
    B, P = members.shape[:2]
    full = members.shape

    # Relation pairs: P current-vs-member, then P*(P-1) member-vs-member (j-major).
    lhs = [ad.broadcast_to(ad.reshape(current, (B, 1) + current.shape[1:]), full)]
    rhs = [members]
    use_fa = config.enable_fa and P > 1
    if use_fa:
        j_idx = np.repeat(np.arange(P), P - 1)
        m_idx = np.array([m for j in range(P) for m in range(P) if m != j])
        lhs.append(ad.take(members, j_idx, axis=1))
        rhs.append(ad.take(members, m_idx, axis=1))
    lhs = lhs[0] if len(lhs) == 1 else ad.concat(lhs, axis=1)
    rhs = rhs[0] if len(rhs) == 1 else ad.concat(rhs, axis=1)

    w_all = pair_weights_vars(lhs, rhs, weights, config)
    w_tr = ad.take(w_all, np.arange(P), axis=1) if use_fa else w_all
    w_fa = None
    if use_fa:
        w_fa = ad.take(w_all, np.arange(P, P + P * (P - 1)), axis=1)
        w_fa = ad.reshape(w_fa, (B, P, P - 1) + w_fa.shape[2:])
    return blend_from_weights(current, members, w_tr, w_fa, config)


def blend_from_weights(current, members, w_tr, w_fa, config):
    """Adjustment and blending stages given precomputed pair weights.

    ``w_tr[b, j] = W(current, member j)``; ``w_fa[b, j, k]`` is ``W(member j, member m)``
    for the ``k``-th ``m != j`` in order, or None when adjustment is skipped.
    """
    current, members = ad.constant(current), ad.constant(members)
    w_tr = ad.constant(w_tr)
    B, P = members.shape[:2]
    full = members.shape
    if w_fa is not None:
        adjusted = ad.mul(ad.sum_(ad.constant(w_fa), axis=2), members)
    else:
        adjusted = members

    if config.enable_fb:
        w_hat = ad.relu(w_tr)
        f_hat = ad.channel_softmax(adjusted)
        cos = _cosine_rows(f_hat.value, current.value)
        # NaN (undefined similarity) counts as "not similar": the member is kept.
        keep = ~(cos > config.delta)
        gate = keep.astype(f_hat.value.dtype)
        w_gated = ad.mul(w_hat, gate.reshape((B, P) + (1,) * (w_hat.value.ndim - 2)))
        factors = (w_gated, f_hat)
    else:
        cos = np.full((B, P), np.nan)
        keep = np.ones((B, P), dtype=bool)
        factors = (w_tr, adjusted)
        w_gated = w_tr

    out = None
    terms = []
    for j in range(P):
        term = ad.mul(ad.take(factors[0], j, axis=1), ad.take(factors[1], j, axis=1))
        terms.append(term.value)
        out = term if out is None else ad.add(out, term)

    trace = BlendTrace(
        raw_weights=np.broadcast_to(w_tr.value, full),
        adjusted=adjusted.value,
        w_hat=np.broadcast_to(w_gated.value, full),
        f_hat=factors[1].value,
        cos=cos,
        keep=keep,
        terms=terms,
    )
    return out, trace


class StreamingBlender:
    """Blends the frames of one stream, reusing pair weights between frames.

    ``W(f_a, f_b)`` depends on nothing but the two features, so once computed
    for the time pair ``(a, b)`` it serves every later window holding both
    frames.  Only pairs involving a frame new to the window are evaluated;
    pairs with a frame that left the window are dropped.  Each frame then
    costs ``O(P)`` mini-network passes instead of ``O(P^2)``.
    """

    def __init__(self, params, config):
        self.config = config
        self.weights = _arrays_for(params, config.dtype)
        self._cache = {}
        self.evaluated = 0

    def blend(self, current, members):
        """Delta for ``current`` (a FrameFeature) over ``members`` (self included if wanted)."""
        ts = [m.t for m in members]
        if len(set(ts)) != len(ts):
            raise ValueError("member times must be distinct")
        feats = {m.t: m.feature.data for m in members}
        feats[current.t] = current.feature.data
        P = len(ts)
        use_fa = self.config.enable_fa and P > 1
        fa_keys = [(j, m) for j in ts for m in ts if m != j] if use_fa else []
        need = [(current.t, t) for t in ts] + fa_keys

        self._cache = {k: v for k, v in self._cache.items() if k[0] in feats and k[1] in feats}
        missing = [k for k in dict.fromkeys(need) if k not in self._cache]
        if missing:
            dtype = self.config.dtype
            lhs = np.stack([feats[a] for a, _ in missing]).astype(dtype, copy=False)
            rhs = np.stack([feats[b] for _, b in missing]).astype(dtype, copy=False)
            w = pair_weights_vars(lhs, rhs, self.weights, self.config).value
            self._cache.update(zip(missing, w))
            self.evaluated += len(missing)

        dtype = self.config.dtype
        cur = current.feature.data.astype(dtype, copy=False)[None]
        mem = np.stack([feats[t] for t in ts]).astype(dtype, copy=False)[None]
        w_tr = np.stack([self._cache[(current.t, t)] for t in ts])[None]
        w_fa = None
        if use_fa:
            w_fa = np.stack([self._cache[k] for k in fa_keys])
            w_fa = w_fa.reshape((1, P, P - 1) + w_fa.shape[1:])
        out, _ = blend_from_weights(cur, mem, w_tr, w_fa, self.config)
        return Tensor3(out.value[0])


# -- single-frame operations ------------------------------------------------------


def _arrays_for(params, dtype):
    return [a.astype(dtype, copy=False) for a in params.arrays()]


def relation_features(f_i, f_j, variant):
    if f_i.shape != f_j.shape:
        raise ShapeMismatchError(f"shape mismatch: {f_i.shape} vs {f_j.shape}")
    return Tensor3(RelationVariant(variant).build(f_i.data, f_j.data).value)


def mini_network_forward(g_out, params):
    if g_out.channels != params.in_channels:
        raise ShapeMismatchError(
            f"mini-network expects {params.in_channels} channels, got {g_out.channels}"
        )
    return Tensor3(mini_network_vars(ad.constant(g_out.data),
                                     _arrays_for(params, g_out.data.dtype)).value)


def adaptive_weights(f_a, f_b, params, variant):
    """Per-pixel, per-channel weight tensor ``M(g(f_a, f_b))``."""
    return mini_network_forward(relation_features(f_a, f_b, variant), params)


def feature_adjustment(nbhd, j, params, variant):
    """Adjusted representative of member ``j`` of ``nbhd.members``.

    Sums ``W(f_j, f_m)`` over the other members and multiplies by ``f_j``;
    with no other members ``f_j`` is returned unchanged.
    """
    members = nbhd.members
    if not 0 <= j < len(members):
        raise IndexError(f"member index {j} out of range for {len(members)} members")
    f_j = members[j].feature
    others = [m.feature for k, m in enumerate(members) if k != j]
    if not others:
        return f_j
    acc = None
    for f_m in others:
        w = adaptive_weights(f_j, f_m, params, variant).data
        acc = w if acc is None else acc + w
    return Tensor3(acc * f_j.data)


def _nbhd_for(nbhd, config):
    if nbhd.include_self != config.include_self:
        nbhd = Neighborhood(nbhd.current, nbhd.neighbors, config.include_self)
    return nbhd


def blend_trace(nbhd, params, config):
    """Run one blend and return ``(delta_f, trace)`` with batch axis of size 1."""
    nbhd = _nbhd_for(nbhd, config)
    params.check_compatible(nbhd.current.feature.channels, config.variant)
    dtype = config.dtype
    current = nbhd.current.feature.data.astype(dtype, copy=False)[None]
    members = nbhd.member_stack(dtype)[None]
    out, trace = blend_vars(current, members, _arrays_for(params, dtype), config)
    return Tensor3(out.value[0]), trace


def blend(nbhd, params, config):
    """Aggregated temporal feature for ``nbhd.current``, shape ``C x H x W``."""
    return blend_trace(nbhd, params, config)[0]


def aggregate(f_i, delta_f, mode="replace"):
    if f_i.shape != delta_f.shape:
        raise ShapeMismatchError(f"shape mismatch: {f_i.shape} vs {delta_f.shape}")
    if mode == "replace":
        return delta_f
    if mode == "residual":
        return Tensor3(f_i.data + delta_f.data)
    raise ValueError(f"unknown aggregate mode {mode!r}")


def baseline_weights(current, members, scheme):
    """Scalar weight per member: uniform, or softmax of cosine similarity to ``current``."""
    n = members.shape[0]
    if scheme == "uniform":
        return np.full(n, 1.0 / n)
    if scheme == "cosine_softmax":
        cos = _cosine_rows(members[None], current[None])[0]
        cos = np.nan_to_num(cos, nan=0.0)
        e = np.exp(cos - cos.max())
        return e / e.sum()
    raise ValueError(f"unknown baseline scheme {scheme!r}")


def baseline_aggregate(nbhd, scheme="uniform"):
    """``sum_j w_j f_j`` with one global scalar per member."""
    members = nbhd.member_stack()
    w = baseline_weights(nbhd.current.feature.data, members, scheme)
    return Tensor3(np.tensordot(w.astype(members.dtype), members, axes=(0, 0)))


# -- persistence --------------------------------------------------------------------


def save_params(directory, params):
    """Write one TFB1 file per weight/bias plus ``params.json``.

    TFB1 is rank-3, so ``[out, in, k, k]`` weights are stored as
    ``[out, in, k*k]`` and biases as ``[out, 1, 1]``; the manifest keeps the
    true shapes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, layer in enumerate(params.layers):
        w, b = layer.weights, layer.bias
        wname, bname = f"layer{k}_weight.tfb", f"layer{k}_bias.tfb"
        (directory / wname).write_bytes(encode_tfb(w.reshape(w.shape[0], w.shape[1], -1)))
        (directory / bname).write_bytes(encode_tfb(b.reshape(-1, 1, 1)))
        entries.append({"weight": wname, "weight_shape": list(w.shape),
                        "bias": bname, "bias_shape": list(b.shape)})
    manifest = {"format": "TFB1", "activation": "relu", "layers": entries}
    (directory / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text())
    layers = []
    for entry in manifest["layers"]:
        w = decode_tfb((directory / entry["weight"]).read_bytes()).reshape(entry["weight_shape"])
        b = decode_tfb((directory / entry["bias"]).read_bytes()).reshape(entry["bias_shape"])
        layers.append(ConvLayer(w, b))
    return MiniNetParams(layers)
