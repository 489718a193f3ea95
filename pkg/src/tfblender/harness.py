"""Training, evaluation, oracle comparison and the cost-ratio sweep."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .blender import (
    BlenderConfig,
    ConfigError,
    FrameFeature,
    MiniNetParams,
    StreamingBlender,
    baseline_weights,
    blend_vars,
)
from .tensor import Tensor3
from .synthetic import (
    SceneSpec,
    full_window_frames,
    generate_sequence,
    neighbor_offsets,
)

log = logging.getLogger(__name__)

_SEED_BLOCK = 2 ** 20


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclass(frozen=True)
class TrainSpec:
    steps: int = 500
    learning_rate: float = 0.5
    batch: int = 1
    eval_every: int = 100
    sequence_length: int = 7
    neighbors: int = 4
    eval_sequences: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("train.steps", "must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate", "must be >= 0")
        if self.batch < 1:
            raise ConfigError("train.batch", "must be >= 1")
        if self.neighbors < 1:
            raise ConfigError("train.neighbors", "must be >= 1")
        if self.sequence_length < self.neighbors + 1:
            raise ConfigError("train.sequence_length", "too short for a full neighbourhood")
        if self.eval_sequences < 0:
            raise ConfigError("train.eval_sequences", "must be >= 0")

    def train_seed(self, n):
        return self.seed * _SEED_BLOCK + 2 * n

    def eval_seed(self, k):
        return self.seed * _SEED_BLOCK + 2 * k + 1

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"train.{unknown[0]}", "unknown train key")
        return cls(**data)


@dataclass
class TrainResult:
    params: MiniNetParams
    losses: list
    eval_curve: list = field(default_factory=list)  # (step, eval_mse)

    def loss_rows(self):
        evals = dict(self.eval_curve)
        return [(k + 1, loss, evals.get(k + 1)) for k, loss in enumerate(self.losses)]


def window_batch(pair, count, dtype, include_self=True, frames=None):
    """Stack every full neighbourhood of ``pair`` into batched arrays.

    Returns ``(current, members, clean, times)`` with shapes ``(B, C, H, W)``,
    ``(B, P, C, H, W)``, ``(B, C, H, W)`` and ``(B,)``.
    """
    T = len(pair)
    offsets = neighbor_offsets(count)
    times = full_window_frames(T, count) if frames is None else list(frames)
    obs = np.stack([f.feature.data for f in pair.observed]).astype(dtype, copy=False)
    clean = np.stack([f.feature.data for f in pair.clean]).astype(dtype, copy=False)
    idx = np.array([([t] if include_self else []) + [t + o for o in offsets] for t in times])
    return obs[times], obs[idx], clean[times], np.array(times)


def _aggregate_var(current, delta, mode):
    return delta if mode == "replace" else ad.add(current, delta)


def _batch_loss(weights, current, members, clean, config):
    delta, trace = blend_vars(current, members, weights, config)
    pred = _aggregate_var(ad.constant(current), delta, config.aggregate_mode)
    return ad.mse(pred, clean), trace


def scene_batch(scene, spec, seeds, config):
    parts = [window_batch(generate_sequence(scene.with_seed(s), spec.sequence_length),
                          spec.neighbors, config.dtype, config.include_self) for s in seeds]
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def train(spec, scene, config, params=None, callback=None):
    """Fit the mini-network by SGD on freshly generated training sequences.

    Each step draws ``spec.batch`` new sequences and minimises the mean
    reconstruction MSE over all of their full neighbourhoods.
    """
    channels = scene.grid[0]
    if params is None:
        params = config.init_params(channels)
    params.check_compatible(channels, config.variant)
    weights = [a.astype(config.dtype) for a in params.arrays()]
    eval_batch = None
    if spec.eval_sequences:
        eval_batch = scene_batch(scene, spec, [spec.eval_seed(k) for k in range(spec.eval_sequences)],
                                 config)
    losses, eval_curve = [], []
    for step in range(spec.steps):
        seeds = [spec.train_seed(step * spec.batch + k) for k in range(spec.batch)]
        current, members, clean = scene_batch(scene, spec, seeds, config)
        with ad.Tape() as tape:
            leaves = [tape.leaf(w) for w in weights]
            loss, _ = _batch_loss(leaves, current, members, clean, config)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(step + 1, value)
        grads = tape.backward(loss, leaves)
        weights = ad.sgd_step(weights, [grads[l] for l in leaves], spec.learning_rate)
        losses.append(value)
        if eval_batch is not None and spec.eval_every and (step + 1) % spec.eval_every == 0:
            ev, _ = _batch_loss(weights, *eval_batch, config)
            eval_curve.append((step + 1, float(ev.value)))
            log.info("step %d train %.6g eval %.6g", step + 1, value, float(ev.value))
        if callback is not None:
            callback(step + 1, value)
    return TrainResult(params.with_arrays(weights), losses, eval_curve)


def evaluate(params, config, scene, seeds, sequence_length=7, neighbors=4):
    """Mean MSE per method over every full neighbourhood of the given scenes.

    With ``neighbors=0`` nothing is aggregated and every method reports the
    passthrough error.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("evaluation needs at least one scene")
    if neighbors == 0:
        err = evaluate_passthrough(scene, seeds, sequence_length)
        return {k: err for k in ("passthrough", "uniform", "cosine", "tfblender")}
    weights = [a.astype(config.dtype) for a in params.arrays()]
    sums = {"passthrough": 0.0, "uniform": 0.0, "cosine": 0.0, "tfblender": 0.0}
    count = 0
    for s in seeds:
        pair = generate_sequence(scene.with_seed(s), sequence_length)
        current, members, clean, _ = window_batch(pair, neighbors, config.dtype,
                                                  config.include_self)
        delta, _ = blend_vars(current, members, weights, config)
        pred = delta.value if config.aggregate_mode == "replace" else current + delta.value
        c64 = clean.astype(np.float64)
        for b in range(current.shape[0]):
            sums["passthrough"] += _mse(current[b], c64[b])
            for name, scheme in (("uniform", "uniform"), ("cosine", "cosine_softmax")):
                w = baseline_weights(current[b], members[b], scheme)
                sums[name] += _mse(np.tensordot(w, members[b], axes=(0, 0)), c64[b])
            sums["tfblender"] += _mse(pred[b], c64[b])
            count += 1
    return {k: v / count for k, v in sums.items()}


def evaluate_passthrough(scene, seeds, sequence_length=7):
    errs = []
    for s in seeds:
        pair = generate_sequence(scene.with_seed(s), sequence_length)
        errs.extend(_mse(o.feature.data, c.feature.data.astype(np.float64))
                    for o, c in zip(pair.observed, pair.clean))
    return float(np.mean(errs))


def _mse(a, b):
    d = np.asarray(a, dtype=np.float64) - b
    return float(np.mean(d * d))


# -- oracle ---------------------------------------------------------------------------


def oracle_check(config, seed=0, channels=2, size=2, neighbors=3):
    """Max |difference| between the vectorised blend and the loop-by-loop reference.

    Features and all parameters (biases included) are random draws from ``seed``;
    everything runs in double precision.
    """
    from .naive import naive_blend

    if channels > 2 or size > 3 or neighbors > 4:
        raise ValueError("oracle_check is for tiny shapes (C <= 2, H, W <= 3, <= 4 neighbours)")
    config = config.with_(precision="double")
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(neighbors + 1, channels, size, size))
    params = config.init_params(channels, seed=seed)
    params = params.with_arrays([a if a.ndim == 4 else rng.uniform(-0.1, 0.1, a.shape)
                                 for a in params.arrays()])
    current = feats[0]
    members = feats if config.include_self else feats[1:]
    delta, _ = blend_vars(current[None], members[None], params.arrays(), config)
    layers = [(l.weights.tolist(), l.bias.tolist()) for l in params.layers]
    ref = naive_blend(current.tolist(), [m.tolist() for m in members], layers,
                      delta=config.delta, variant=config.variant.value,
                      enable_tr=config.enable_tr, enable_fa=config.enable_fa,
                      enable_fb=config.enable_fb)
    return float(np.max(np.abs(delta.value[0] - np.asarray(ref))))


# -- suppression & ablation -------------------------------------------------------------


def suppression_stats(params, config, scene, seeds, sequence_length=7, neighbors=4):
    """Mean gated, rectified weight over the object region and over the outlier footprint.

    Averaged over members and channels at every full-neighbourhood frame of
    each scene that carries an outlier.
    """
    from .synthetic import region_masks

    weights = [a.astype(config.dtype) for a in params.arrays()]
    obj_vals, out_vals = [], []
    for s in seeds:
        pair = generate_sequence(scene.with_seed(s), sequence_length)
        if not pair.outlier_present.any():
            continue
        current, members, _, times = window_batch(pair, neighbors, config.dtype,
                                                  config.include_self)
        _, trace = blend_vars(current, members, weights, config)
        w_map = trace.w_hat.astype(np.float64).mean(axis=(1, 2))  # (B, H, W)
        for b, t in enumerate(times):
            obj, out = region_masks(pair, t)
            if obj.any() and out.any():
                obj_vals.append(w_map[b][obj].mean())
                out_vals.append(w_map[b][out].mean())
    if not obj_vals:
        raise ValueError("no evaluated frame had both an object and an outlier region")
    return {"object": float(np.mean(obj_vals)), "outlier": float(np.mean(out_vals)),
            "frames": len(obj_vals)}


ABLATIONS = {
    "full": dict(enable_tr=True, enable_fa=True, enable_fb=True),
    "tr": dict(enable_tr=True, enable_fa=False, enable_fb=False),
    "fa": dict(enable_tr=False, enable_fa=True, enable_fb=False),
    "fb": dict(enable_tr=False, enable_fa=False, enable_fb=True),
    "none": dict(enable_tr=False, enable_fa=False, enable_fb=False),
}


def run_seed(spec, scene, config, seed, eval_count=None):
    """Train and evaluate one seed; returns ``(TrainResult, eval summary)``."""
    spec_s = TrainSpec(**{**spec.to_json(), "seed": seed})
    config_s = config.with_(seed=seed)
    result = train(spec_s, scene, config_s)
    n = spec.eval_sequences if eval_count is None else eval_count
    summary = evaluate(result.params, config_s, scene, [spec_s.eval_seed(k) for k in range(n)],
                       spec.sequence_length, spec.neighbors)
    return result, summary


def ablation_study(spec, scene, config, seeds, names=tuple(ABLATIONS), eval_count=None):
    """Eval blend MSE for each module toggle set, one entry per seed."""
    out = {}
    for name in names:
        cfg = config.with_(**ABLATIONS[name])
        out[name] = [run_seed(spec, scene, cfg, s, eval_count)[1]["tfblender"] for s in seeds]
    return out


# -- cost model & trade-off sweep -----------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    cost_extraction: float
    cost_task: float
    cost_tf: float
    neighbor_count: int

    def __post_init__(self):
        if min(self.cost_extraction, self.cost_task, self.cost_tf) < 0:
            raise ValueError("costs must be non-negative")
        if self.neighbor_count < 0:
            raise ValueError("neighbor_count must be non-negative")


def cost_ratio(model):
    """Runtime ratio with vs without aggregation: ``1 + i * N_tf / (N_ex + N_tk)``."""
    base = model.cost_extraction + model.cost_task
    if base <= 0:
        raise ValueError("extraction + task cost must be positive")
    return 1.0 + model.neighbor_count * model.cost_tf / base


CSV_COLUMNS = ("config_digest", "neighbor_count", "wall_time_ms", "mse_passthrough",
               "mse_uniform", "mse_cosine", "mse_tfblender", "predicted_r", "measured_r")


@dataclass
class RunRecord:
    config_digest: str
    neighbor_count: int
    wall_time_ms: float
    mse_passthrough: float
    mse_uniform: float
    mse_cosine: float
    mse_tfblender: float
    predicted_r: float
    measured_r: float

    def row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


def config_digest(config, *extra):
    blob = json.dumps([config.to_json(), *extra], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class Backbone:
    """Fixed random conv stack standing in for the feature extractor.

    Every stage after the first halves the resolution with a 2x average pool,
    so ``widths`` of length ``n`` map a ``3 x sH x sW`` image (``s = 2**(n-1)``)
    to a ``C x H x W`` feature map.  Its cost is what the cost ratio is
    measured against.
    """

    def __init__(self, channels, widths=(32, 64, 128, 256), seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        dims = (3,) + tuple(widths)
        self.layers = []
        for cin, cout in zip(dims, dims[1:]):
            self.layers.append((rng.normal(0, np.sqrt(2 / (9 * cin)), (cout, cin, 3, 3)).astype(dtype),
                                np.zeros(cout, dtype)))
        self.head = (rng.normal(0, np.sqrt(1 / dims[-1]), (channels, dims[-1], 1, 1)).astype(dtype),
                     np.zeros(channels, dtype))
        self.stride = 2 ** (len(widths) - 1)
        self.dtype = dtype

    def __call__(self, image):
        from .tensor import conv2d_same_array

        h = image
        for k, (w, b) in enumerate(self.layers):
            h = np.maximum(conv2d_same_array(h, w, b), 0)
            if k < len(self.layers) - 1:
                c, H, W = h.shape
                h = h.reshape(c, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
        return conv2d_same_array(h, *self.head)


class TaskHead:
    """Small per-frame head standing in for the task network."""

    def __init__(self, channels, hidden=16, seed=1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0, 0.1, (hidden, channels, 3, 3)).astype(dtype)
        self.w2 = rng.normal(0, 0.1, (4, hidden, 1, 1)).astype(dtype)

    def __call__(self, feature):
        from .tensor import conv2d_same_array

        return conv2d_same_array(np.maximum(conv2d_same_array(feature, self.w1), 0), self.w2)


def _batch_size(fn, min_seconds):
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= min_seconds:
            return n
        n *= 2


def _timed(fn, n):
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n


def time_call(fn, repetitions=5, warmup=2, min_seconds=2e-2):
    """Median seconds per call over ``repetitions`` timed batches.

    Calls are batched until one batch takes at least ``min_seconds`` so each
    measurement sits well above the clock resolution.
    """
    for _ in range(warmup):
        fn()
    n = _batch_size(fn, min_seconds)
    return float(np.median([_timed(fn, n) for _ in range(repetitions)]))


def time_interleaved(fns, repetitions=5, warmup=2, min_seconds=2e-2):
    """Seconds per call of several functions, timed in round-robin batches.

    Returns a ``(repetitions, len(fns))`` array.  Row ``k`` holds batches run
    back to back, so ratios or differences taken within a row cancel slow
    drifts in machine load.
    """
    for _ in range(warmup):
        for fn in fns:
            fn()
    sizes = [_batch_size(fn, min_seconds) for fn in fns]
    return np.array([[_timed(fn, n) for fn, n in zip(fns, sizes)] for _ in range(repetitions)])


def time_pair(fn_a, fn_b, repetitions=5, warmup=2, min_seconds=2e-2):
    """Median seconds per call of two functions timed in alternating batches."""
    t = time_interleaved([fn_a, fn_b], repetitions, warmup, min_seconds)
    return float(np.median(t[:, 0])), float(np.median(t[:, 1]))


def _fit_r2(x, y, degree):
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def _adjusted_r2(r2, n, degree):
    dof = n - degree - 1
    return 1.0 - (1.0 - r2) * (n - 1) / dof if dof > 0 else float("nan")


@dataclass
class SweepResult:
    records: list
    components: dict
    fits: dict


class _Stream:
    """Per-frame inference over an endless synthetic stream.

    Each call extracts the newest frame, then aggregates and runs the task head
    on the frame ``reach`` steps behind it, whose neighbourhood is complete.
    Features of earlier frames are kept, as a video pipeline would.
    """

    def __init__(self, backbone, head, image, bank, count, aggregate):
        self.backbone, self.head, self.image, self.bank = backbone, head, image, bank
        self.offsets = neighbor_offsets(count)
        self.reach = max([0] + self.offsets)
        self.depth = -min([0] + self.offsets)
        self.aggregate = aggregate
        self.features = {}
        self.t = 0
        for _ in range(self.reach + self.depth):
            self._extract()

    def _extract(self):
        f = self.backbone(self.image) + self.bank[self.t % len(self.bank)]
        self.features[self.t] = FrameFeature(self.t, Tensor3(f))
        self.features.pop(self.t - self.reach - self.depth - 1, None)
        self.t += 1

    def __call__(self):
        self._extract()
        t = self.t - 1 - self.reach
        current = self.features[t]
        neighbors = [self.features[t + o] for o in self.offsets]
        return self.head(self.aggregate(current, neighbors).data)


def _blend_only(stream):
    C, H, W = stream.bank.shape[1:]
    zero = np.zeros((C, H, W), stream.bank.dtype)
    stream.backbone = lambda image: zero
    stream.head = lambda feature: None
    return stream


def _self_only(config, params):
    """Aggregator blending the current frame with itself alone (the per-frame fixed cost)."""
    streaming = StreamingBlender(params, config)
    return lambda current, neighbors: streaming.blend(current, [current])


def tradeoff_sweep(neighbor_counts, config, scene, params=None, repetitions=15,
                   eval_seeds=(1, 3), backbone_widths=(24, 48, 96, 192), reuse_pairs=True,
                   min_seconds=2e-2):
    """Time per-frame inference with and without the blend for each neighbour count.

    "Without" is extraction + uniform averaging + task head; "with" swaps the
    averaging for the blend.  With no neighbours nothing is aggregated and both
    pipelines reduce to extraction + task head.  ``reuse_pairs`` keeps pair
    weights across frames (:class:`StreamingBlender`); otherwise every frame
    recomputes all of them.  ``N_tf`` is what one aggregated frame adds to the
    blend: a one-neighbour blend minus a blend of the current frame with itself
    (the latter is the whole blend when ``include_self`` is off).  Pipelines
    with and without the blend, and the component costs, are timed in
    round-robin batches of at least ``min_seconds``; ``measured_r`` is the
    median over ``repetitions`` of the per-round ratio and ``N_tf`` the median
    per-round difference.  Everything runs single-threaded after warm-up.
    """
    from threadpoolctl import threadpool_limits

    counts = list(neighbor_counts)
    if not counts:
        raise ValueError("neighbor_counts must not be empty")
    if counts != sorted(counts) or counts[0] < 0:
        raise ValueError("neighbor_counts must be ascending and non-negative")
    C, H, W = scene.grid
    if params is None:
        params = config.init_params(C)
    dtype = config.dtype
    weights = [a.astype(dtype) for a in params.arrays()]
    digest = config_digest(config, scene.to_json(), [a.tolist() for a in params.arrays()],
                           list(backbone_widths), reuse_pairs)
    backbone = Backbone(C, backbone_widths, dtype=dtype)
    head = TaskHead(C, dtype=dtype)
    rng = np.random.default_rng(0)
    image = rng.normal(size=(3, backbone.stride * H, backbone.stride * W)).astype(dtype)
    bank = rng.normal(scale=0.1, size=(32, C, H, W)).astype(dtype)

    def members(current, neighbors):
        return ([current] if config.include_self else []) + list(neighbors)

    def uniform(current, neighbors):
        if not neighbors:
            return current.feature
        return Tensor3(np.mean([m.feature.data for m in members(current, neighbors)], axis=0))

    def tf_blender():
        streaming = StreamingBlender(params, config)

        def run(current, neighbors):
            if not neighbors:
                return current.feature
            group = members(current, neighbors)
            if reuse_pairs:
                return streaming.blend(current, group)
            stack = np.stack([m.feature.data for m in group])[None]
            return Tensor3(blend_vars(current.feature.data[None], stack, weights, config)[0].value[0])
        return run

    def stream(count, aggregate):
        return _Stream(backbone, head, image, bank, count, aggregate)

    with threadpool_limits(limits=1):
        blend_one = _blend_only(stream(1, tf_blender()))
        fns = [lambda: backbone(image), lambda: head(bank[0]), blend_one]
        if config.include_self:
            fns.append(_blend_only(stream(1, _self_only(config, params))))
        t = time_interleaved(fns, repetitions, min_seconds=min_seconds)
        t_ex, t_tk = float(np.median(t[:, 0])), float(np.median(t[:, 1]))
        t_tf_base = float(np.median(t[:, 3])) if config.include_self else 0.0
        tf_rows = t[:, 2] - t[:, 3] if config.include_self else t[:, 2]
        t_tf = max(float(np.median(tf_rows)), 0.0)

        records = []
        for i in counts:
            t = time_interleaved([stream(i, tf_blender()), stream(i, uniform)], repetitions,
                                 min_seconds=min_seconds)
            t_with = float(np.median(t[:, 0]))
            measured = float(np.median(t[:, 0] / t[:, 1]))
            T = max(7, 2 * len(neighbor_offsets(i)) + 3)
            mses = evaluate(params, config, scene, eval_seeds, sequence_length=T, neighbors=i)
            predicted = cost_ratio(CostModel(t_ex, t_tk, t_tf, i))
            records.append(RunRecord(digest, i, t_with * 1e3, mses["passthrough"],
                                     mses["uniform"], mses["cosine"], mses["tfblender"],
                                     predicted, measured))
            log.info("i=%d with=%.3fms r=%.3f (pred %.3f)", i, t_with * 1e3, measured, predicted)

    x = np.array([r.neighbor_count for r in records], dtype=float)
    y = np.array([r.measured_r for r in records])
    fits = {}
    if len(records) >= 3:
        fits = {"linear_r2": _fit_r2(x, y, 1), "quadratic_r2": _fit_r2(x, y, 2)}
        n = len(records)
        adj_lin = _adjusted_r2(fits["linear_r2"], n, 1)
        adj_quad = _adjusted_r2(fits["quadratic_r2"], n, 2)
        # the extra quadratic term has to earn its degree of freedom
        fits["better_fit"] = "quadratic" if adj_quad > adj_lin else "linear"
    components = {"cost_extraction_s": t_ex, "cost_task_s": t_tk, "cost_tf_s": t_tf,
                  "cost_blend_self_only_s": t_tf_base, "reuse_pairs": reuse_pairs}
    return SweepResult(records, components, fits)


# -- gradient verification -------------------------------------------------------------------


def _kink_margin(tape, config_delta=None, trace=None):
    margin = np.inf
    for node in tape.nodes:
        if node.op == "relu":
            margin = min(margin, float(np.abs(node.parents[0].value).min()))
    if trace is not None and config_delta is not None:
        cos = trace.cos[np.isfinite(trace.cos)]
        if cos.size:
            margin = min(margin, float(np.abs(cos - config_delta).min()))
    return margin


def blend_gradient_problem(config, seed=0, channels=2, size=2, neighbors=3, margin=1e-3,
                           max_tries=200):
    """Tiny blend + MSE objective whose ReLU inputs and gate sit away from their kinks.

    Returns ``(forward_fn, params)`` ready for ``finite_difference_check``.
    Draws are repeated (seed, seed + 1, ...) until every ReLU input and every
    cosine-vs-delta gap exceeds ``margin`` and the gradient is not identically zero.
    """
    config = config.with_(precision="double")
    for attempt in range(max_tries):
        rng = np.random.default_rng(seed + attempt)
        feats = rng.normal(size=(neighbors + 1, channels, size, size))
        target = rng.normal(size=(channels, size, size))
        params = config.init_params(channels, seed=seed + attempt).arrays()
        params = [a if a.ndim == 4 else rng.uniform(-0.2, 0.2, a.shape) for a in params]
        current = feats[0][None]
        members = (feats if config.include_self else feats[1:])[None]

        def forward(ws, current=current, members=members, target=target):
            delta, _ = blend_vars(current, members, ws, config)
            pred = _aggregate_var(ad.constant(current), delta, config.aggregate_mode)
            return ad.mse(pred, target[None])

        with ad.Tape() as tape:
            leaves = [tape.leaf(p) for p in params]
            delta, trace = blend_vars(current, members, leaves, config)
            pred = _aggregate_var(ad.constant(current), delta, config.aggregate_mode)
            loss = ad.mse(pred, target[None])
        grads = tape.backward(loss, leaves)
        live = max(float(np.abs(g).max()) for g in grads.values()) > margin
        if live and _kink_margin(tape, config.delta if config.enable_fb else None, trace) > margin:
            return forward, params
    raise RuntimeError("could not draw a kink-free gradient-check point")


def _op_problems(rng):
    """Small single-op objectives: name -> (forward_fn, params)."""
    x = rng.normal(size=(2, 3, 4))
    y = rng.normal(size=(2, 3, 4))
    r = rng.normal(size=(2, 3, 4))
    r = np.where(np.abs(r) < 1e-2, np.sign(r) * 1e-2 + r, r)
    t = rng.normal(size=(2, 3, 4))
    img = rng.normal(size=(3, 5, 5))
    w3 = rng.normal(size=(2, 3, 3, 3))
    w1 = rng.normal(size=(2, 3, 1, 1))
    b = rng.normal(size=2)
    t_conv = rng.normal(size=(2, 5, 5))
    return {
        "add": (lambda v: ad.mse(ad.add(v[0], v[1]), t), [x, y]),
        "sub": (lambda v: ad.mse(ad.sub(v[0], v[1]), t), [x, y]),
        "mul": (lambda v: ad.mse(ad.mul(v[0], v[1]), t), [x, y]),
        "relu": (lambda v: ad.mse(ad.relu(v[0]), t), [r]),
        "channel_softmax": (lambda v: ad.mse(ad.channel_softmax(v[0]), t), [x]),
        "conv2d_k3": (lambda v: ad.mse(ad.conv2d(v[0], v[1], v[2]), t_conv), [img, w3, b]),
        "conv2d_k1": (lambda v: ad.mse(ad.conv2d(v[0], v[1], v[2]), t_conv), [img, w1, b]),
        "concat": (lambda v: ad.mse(ad.concat([v[0], v[1]], axis=0), np.concatenate([t, t])),
                   [x, y]),
    }


def gradient_suite(config, seed=0, epsilon=1e-5):
    """Finite-difference reports for each primitive op and the blend composites."""
    from .autodiff import finite_difference_check

    rng = np.random.default_rng(seed)
    reports = []
    for name, (fn, params) in _op_problems(rng).items():
        reports.append(finite_difference_check(fn, params, epsilon, op=name))
    for name, toggles in ABLATIONS.items():
        fn, params = blend_gradient_problem(config.with_(**toggles), seed=seed)
        reports.append(finite_difference_check(fn, params, epsilon, op=f"blend_mse[{name}]"))
    return reports
