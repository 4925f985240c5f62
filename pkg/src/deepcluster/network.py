"""Recurrent embedding network: stacked bidirectional LSTM layers, a
feedforward projection to K values per frequency bin, elementwise activation,
and row-wise unit normalization.  Training is plain SGD with momentum,
optional Gaussian weight noise, and exact backpropagation through time.

Everything is float64 numpy.  Parameters live in a flat dict:

    blstm{l}.{fwd|bwd}.w_in   (4H x D_l)   gate order i, f, g, o
    blstm{l}.{fwd|bwd}.w_rec  (4H x H)
    blstm{l}.{fwd|bwd}.bias   (4H,)
    out.weight                (F*K x 2H)   row index f*K + k
    out.bias                  (F*K,)

The LSTM cell is the standard one (input/forget/output gates, tanh
candidate, no peepholes).  The backward direction consumes the frame
sequence reversed; its hidden states are flipped back before concatenation,
so both directions align per frame.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import load_container, save_container
from .data import FeatureScaler, SegmentBatch
from .exceptions import ConfigError, DataError, DivergenceError, FormatError
from .objective import EmbeddingMatrix, LossConfig, loss_gradient, loss_lowrank

CHECKPOINT_MAGIC = "DCNET1"

INIT_WEIGHT_VARIANCE = 0.1

# Degenerate pre-normalization rows (norm below this) map to e1.
NORM_EPS = 1e-12

ACTIVATIONS = ("tanh", "logistic")

DIRECTIONS = ("fwd", "bwd")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 129
    blstm_layers: int = 2
    hidden_per_direction: int = 64
    embedding_dim: int = 20
    output_activation: str = "tanh"
    segment_len: int = 100

    def __post_init__(self):
        for name in ("input_dim", "blstm_layers", "hidden_per_direction",
                     "embedding_dim", "segment_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.output_activation not in ACTIVATIONS:
            raise ConfigError(
                f"output_activation must be one of {ACTIVATIONS}"
            )

    def layer_input_dim(self, layer):
        return self.input_dim if layer == 0 else 2 * self.hidden_per_direction

    def param_shapes(self):
        h = self.hidden_per_direction
        shapes = {}
        for l in range(self.blstm_layers):
            d = self.layer_input_dim(l)
            for direction in DIRECTIONS:
                prefix = f"blstm{l}.{direction}"
                shapes[f"{prefix}.w_in"] = (4 * h, d)
                shapes[f"{prefix}.w_rec"] = (4 * h, h)
                shapes[f"{prefix}.bias"] = (4 * h,)
        fk = self.input_dim * self.embedding_dim
        shapes["out.weight"] = (fk, 2 * h)
        shapes["out.bias"] = (fk,)
        return shapes


def init_params(spec: NetworkSpec, seed) -> dict:
    """All weights and biases i.i.d. normal with variance 0.1."""
    rng = np.random.default_rng(seed)
    std = np.sqrt(INIT_WEIGHT_VARIANCE)
    return {
        name: std * rng.standard_normal(shape)
        for name, shape in spec.param_shapes().items()
    }


def check_param_shapes(params, spec):
    """Raise DataError naming the first tensor whose shape disagrees."""
    expected = spec.param_shapes()
    for name in sorted(set(expected) | set(params)):
        if name not in params:
            raise DataError(f"missing parameter tensor {name}")
        if name not in expected:
            raise DataError(f"unexpected parameter tensor {name}")
        if tuple(params[name].shape) != expected[name]:
            raise DataError(
                f"shape mismatch for {name}: checkpoint has "
                f"{tuple(params[name].shape)}, spec needs {expected[name]}"
            )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lstm_forward(x, w_in, w_rec, bias):
    """One direction over ``x`` (T x D) in processing order.

    Returns the hidden sequence and the per-frame cache arrays needed for
    BPTT.
    """
    t_len = x.shape[0]
    h_dim = w_rec.shape[1]
    proj = x @ w_in.T + bias  # all frames at once
    i = np.empty((t_len, h_dim))
    f = np.empty((t_len, h_dim))
    g = np.empty((t_len, h_dim))
    o = np.empty((t_len, h_dim))
    c = np.empty((t_len, h_dim))
    tc = np.empty((t_len, h_dim))
    h = np.empty((t_len, h_dim))
    h_prev = np.zeros(h_dim)
    c_prev = np.zeros(h_dim)
    for t in range(t_len):
        z = proj[t] + w_rec @ h_prev
        i[t] = _sigmoid(z[:h_dim])
        f[t] = _sigmoid(z[h_dim : 2 * h_dim])
        g[t] = np.tanh(z[2 * h_dim : 3 * h_dim])
        o[t] = _sigmoid(z[3 * h_dim :])
        c[t] = f[t] * c_prev + i[t] * g[t]
        tc[t] = np.tanh(c[t])
        h[t] = o[t] * tc[t]
        h_prev, c_prev = h[t], c[t]
    return h, {"x": x, "i": i, "f": f, "g": g, "o": o, "c": c, "tc": tc, "h": h}


def _lstm_backward(cache, w_in, w_rec, dh_seq):
    """Exact BPTT for one direction; dh_seq is in processing order."""
    x, i, f, g, o, c, tc, h = (
        cache["x"], cache["i"], cache["f"], cache["g"],
        cache["o"], cache["c"], cache["tc"], cache["h"],
    )
    t_len, h_dim = i.shape
    dz_all = np.empty((t_len, 4 * h_dim))
    dh_next = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    for t in range(t_len - 1, -1, -1):
        dh = dh_seq[t] + dh_next
        c_prev = c[t - 1] if t > 0 else np.zeros(h_dim)
        do = dh * tc[t]
        dc = dc_next + dh * o[t] * (1.0 - tc[t] ** 2)
        di = dc * g[t]
        df = dc * c_prev
        dg = dc * i[t]
        dz = dz_all[t]
        dz[:h_dim] = di * i[t] * (1.0 - i[t])
        dz[h_dim : 2 * h_dim] = df * f[t] * (1.0 - f[t])
        dz[2 * h_dim : 3 * h_dim] = dg * (1.0 - g[t] ** 2)
        dz[3 * h_dim :] = do * o[t] * (1.0 - o[t])
        dh_next = w_rec.T @ dz
        dc_next = dc * f[t]
    h_prev = np.vstack([np.zeros(h_dim), h[:-1]])
    grads = {
        "w_in": dz_all.T @ x,
        "w_rec": dz_all.T @ h_prev,
        "bias": dz_all.sum(axis=0),
    }
    dx = dz_all @ w_in
    return grads, dx


def forward(params, spec: NetworkSpec, features):
    """Embed one segment: features (T x F) -> unit-norm rows (T*F x K).

    Returns (EmbeddingMatrix, cache); hand the cache to backward unchanged.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise DataError(
            f"features must be T x {spec.input_dim}, got {features.shape}"
        )
    check_param_shapes(params, spec)
    t_len = features.shape[0]
    layer_caches = []
    current = features
    for l in range(spec.blstm_layers):
        h_f, cache_f = _lstm_forward(
            current,
            params[f"blstm{l}.fwd.w_in"],
            params[f"blstm{l}.fwd.w_rec"],
            params[f"blstm{l}.fwd.bias"],
        )
        h_b_rev, cache_b = _lstm_forward(
            current[::-1],
            params[f"blstm{l}.bwd.w_in"],
            params[f"blstm{l}.bwd.w_rec"],
            params[f"blstm{l}.bwd.bias"],
        )
        current = np.concatenate([h_f, h_b_rev[::-1]], axis=1)
        if not np.all(np.isfinite(current)):
            raise DivergenceError(f"non-finite activations in blstm layer {l}")
        layer_caches.append({"fwd": cache_f, "bwd": cache_b})
    logits = current @ params["out.weight"].T + params["out.bias"]
    if spec.output_activation == "tanh":
        act = np.tanh(logits)
    else:
        act = _sigmoid(logits)
    if not np.all(np.isfinite(act)):
        raise DivergenceError("non-finite activations in output layer")
    rows = act.reshape(t_len * spec.input_dim, spec.embedding_dim)
    norms = np.linalg.norm(rows, axis=1)
    degenerate = norms < NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    values = rows / safe[:, None]
    if degenerate.any():
        values[degenerate] = 0.0
        values[degenerate, 0] = 1.0
    cache = {
        "params": params,
        "spec": spec,
        "features": features,
        "layers": layer_caches,
        "top": current,
        "act": act,
        "rows": rows,
        "norms": norms,
        "degenerate": degenerate,
        "values": values,
    }
    return EmbeddingMatrix(values), cache


def backward(params, cache, dloss_dv):
    """Gradients of a scalar loss for every parameter tensor.

    ``dloss_dv`` is the upstream gradient on the unit-normalized embedding
    rows (T*F x K) from the matching forward call's cache.
    """
    if cache.get("params") is not params:
        raise DataError("cache does not belong to these parameters")
    spec = cache["spec"]
    t_len = cache["features"].shape[0]
    dv = np.asarray(dloss_dv, dtype=np.float64)
    if dv.shape != cache["rows"].shape:
        raise DataError(
            f"upstream gradient must be {cache['rows'].shape}, got {dv.shape}"
        )
    values, norms = cache["values"], cache["norms"]
    degenerate = cache["degenerate"]
    # normalization: d(z/|z|) pulls back as (dv - <dv, v> v) / |z|
    inner = np.sum(dv * values, axis=1, keepdims=True)
    safe = np.where(degenerate, 1.0, norms)
    drows = (dv - inner * values) / safe[:, None]
    drows[degenerate] = 0.0  # constant-e1 rows pass nothing back
    dact = drows.reshape(t_len, spec.input_dim * spec.embedding_dim)
    act = cache["act"]
    if spec.output_activation == "tanh":
        dlogits = dact * (1.0 - act**2)
    else:
        dlogits = dact * act * (1.0 - act)
    grads = {
        "out.weight": dlogits.T @ cache["top"],
        "out.bias": dlogits.sum(axis=0),
    }
    dcurrent = dlogits @ params["out.weight"]
    h = spec.hidden_per_direction
    for l in range(spec.blstm_layers - 1, -1, -1):
        layer = cache["layers"][l]
        g_f, dx_f = _lstm_backward(
            layer["fwd"],
            params[f"blstm{l}.fwd.w_in"],
            params[f"blstm{l}.fwd.w_rec"],
            dcurrent[:, :h],
        )
        g_b, dx_b_rev = _lstm_backward(
            layer["bwd"],
            params[f"blstm{l}.bwd.w_in"],
            params[f"blstm{l}.bwd.w_rec"],
            dcurrent[:, h:][::-1],
        )
        for key, val in g_f.items():
            grads[f"blstm{l}.fwd.{key}"] = val
        for key, val in g_b.items():
            grads[f"blstm{l}.bwd.{key}"] = val
        dcurrent = dx_f + dx_b_rev[::-1]
    return grads


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    momentum: float = 0.9
    learning_rate: float = 1e-5
    weight_noise_std: float = float(np.sqrt(0.6))
    seed: int = 0
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        # zero is allowed so a no-op update can be expressed; train() itself
        # insists on a positive rate
        if self.learning_rate < 0.0:
            raise ConfigError("learning rate cannot be negative")
        if self.weight_noise_std < 0.0:
            raise ConfigError("weight noise std cannot be negative")

    def ensure_velocity(self, params):
        for name, value in params.items():
            if name not in self.velocity:
                self.velocity[name] = np.zeros_like(value)


def _noise_rng(state):
    # stream 7 is reserved for weight noise; keyed by global step so a
    # resumed run draws the same noise an uninterrupted run would
    return np.random.default_rng([int(state.seed), 7, int(state.step_count)])


def train_step(params, state: OptimizerState, batch: SegmentBatch,
               spec: NetworkSpec, loss_config=LossConfig()):
    """One SGD-with-momentum update on a single segment.

    Gaussian noise perturbs a copy of the weights for the forward/backward
    pass only; the clean weights receive the update.  Returns
    (params, state, loss) with params and state updated in place.
    """
    state.ensure_velocity(params)
    if state.weight_noise_std > 0.0:
        rng = _noise_rng(state)
        noisy = {
            name: params[name]
            + state.weight_noise_std * rng.standard_normal(params[name].shape)
            for name in sorted(params)
        }
    else:
        noisy = params
    embedding, cache = forward(noisy, spec, batch.features)
    loss = loss_lowrank(embedding, batch.labels, loss_config, batch.weights)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")
    dv = loss_gradient(embedding, batch.labels, loss_config, batch.weights)
    grads = backward(noisy, cache, dv)
    for name in params:
        vel = state.velocity[name]
        vel *= state.momentum
        vel -= state.learning_rate * grads[name]
        params[name] += vel
    state.step_count += 1
    return params, state, loss


def evaluate_loss(params, spec, segments, loss_config=LossConfig()):
    """Mean noise-free loss over segments."""
    if not segments:
        raise ConfigError("no segments to evaluate")
    total = 0.0
    for batch in segments:
        embedding, _ = forward(params, spec, batch.features)
        total += loss_lowrank(embedding, batch.labels, loss_config, batch.weights)
    return total / len(segments)


def save_checkpoint(path, params, spec: NetworkSpec, state: OptimizerState,
                    epoch=-1, extras=None, scaler: FeatureScaler | None = None
                    ) -> None:
    fields = {
        "spec.input_dim": spec.input_dim,
        "spec.blstm_layers": spec.blstm_layers,
        "spec.hidden_per_direction": spec.hidden_per_direction,
        "spec.embedding_dim": spec.embedding_dim,
        "spec.output_activation": spec.output_activation,
        "spec.segment_len": spec.segment_len,
        "opt.momentum": float(state.momentum),
        "opt.learning_rate": float(state.learning_rate),
        "opt.weight_noise_std": float(state.weight_noise_std),
        "opt.seed": int(state.seed),
        "opt.step_count": int(state.step_count),
        "epoch": int(epoch),
    }
    for key, value in (extras or {}).items():
        fields[f"extra.{key}"] = value
    tensors = dict(params)
    for name, vel in state.velocity.items():
        tensors[f"velocity.{name}"] = vel
    if scaler is not None:
        tensors["feature.mean"] = scaler.mean
        tensors["feature.std"] = scaler.std
    save_container(path, CHECKPOINT_MAGIC, fields, tensors)


def load_checkpoint(path):
    """Returns (params, spec, optimizer state, extras dict with 'epoch').

    A checkpoint trained with standardized features also yields
    extras["feature_scaler"].
    """
    fields, tensors = load_container(path, CHECKPOINT_MAGIC)
    try:
        spec = NetworkSpec(
            input_dim=int(fields["spec.input_dim"]),
            blstm_layers=int(fields["spec.blstm_layers"]),
            hidden_per_direction=int(fields["spec.hidden_per_direction"]),
            embedding_dim=int(fields["spec.embedding_dim"]),
            output_activation=fields["spec.output_activation"],
            segment_len=int(fields["spec.segment_len"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint missing field {exc}")
    params = {}
    velocity = {}
    feature_stats = {}
    for name, tensor in tensors.items():
        if name.startswith("velocity."):
            velocity[name[len("velocity."):]] = tensor
        elif name.startswith("feature."):
            feature_stats[name[len("feature."):]] = tensor
        else:
            params[name] = tensor
    state = OptimizerState(
        velocity=velocity,
        momentum=float(fields["opt.momentum"]),
        learning_rate=float(fields["opt.learning_rate"]),
        weight_noise_std=float(fields["opt.weight_noise_std"]),
        seed=int(fields["opt.seed"]),
        step_count=int(fields["opt.step_count"]),
    )
    check_param_shapes(params, spec)
    extras = {"epoch": int(fields.get("epoch", -1))}
    for key, value in fields.items():
        if key.startswith("extra."):
            extras[key[len("extra."):]] = value
    if feature_stats:
        if set(feature_stats) != {"mean", "std"}:
            raise FormatError(f"{path}: incomplete feature scaler tensors")
        extras["feature_scaler"] = FeatureScaler(
            feature_stats["mean"], feature_stats["std"]
        )
    return params, spec, state, extras


@dataclass
class TrainResult:
    params: dict
    spec: NetworkSpec
    state: OptimizerState
    epoch_mean_losses: list
    validation_losses: list
    best_epoch: int
    checkpoint_paths: list
    best_path: str


def train(spec: NetworkSpec, segments, *, epochs, seed,
          checkpoint_dir, learning_rate=1e-5, momentum=0.9,
          weight_noise_std=float(np.sqrt(0.6)), loss_config=LossConfig(),
          validation_segments=None, log_path=None, init_from=None,
          resume_from=None, feature_scaler: FeatureScaler | None = None
          ) -> TrainResult:
    """Epoch loop over shuffled segments with per-epoch checkpoints.

    The segment order for epoch e is a pure function of (seed, e), and
    weight noise is keyed by the global step counter, so resuming from a
    checkpoint continues the exact trajectory of an uninterrupted run.

    ``feature_scaler`` standardizes every segment before the first step and
    is stored in each checkpoint; pass the scaler fit on the training
    corpus (see FeatureScaler.fit).  A resumed run takes the scaler from
    its checkpoint instead so the trajectory stays consistent.

    The loss log gains one row per step plus summary rows per epoch: step -1
    carries the epoch's mean training loss and step -2 the noise-free
    validation loss.
    """
    if not segments:
        raise ConfigError("training needs at least one segment")
    if learning_rate <= 0.0:
        raise ConfigError("training needs a positive learning rate")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    start_epoch = 0
    if resume_from is not None:
        if feature_scaler is not None:
            raise ConfigError(
                "a resumed run takes its feature scaler from the checkpoint"
            )
        params, loaded_spec, state, extras = load_checkpoint(resume_from)
        if loaded_spec != spec:
            raise ConfigError(
                "resume checkpoint was trained with a different network spec"
            )
        feature_scaler = extras.get("feature_scaler")
        start_epoch = extras["epoch"] + 1
    else:
        if init_from is not None:
            params, loaded_spec, _, init_extras = load_checkpoint(init_from)
            if loaded_spec != spec:
                check_param_shapes(params, spec)  # names the offending layer
                raise ConfigError(
                    "init checkpoint was trained with a different network spec"
                )
            if feature_scaler is None:
                feature_scaler = init_extras.get("feature_scaler")
        else:
            params = init_params(spec, seed)
        state = OptimizerState(
            momentum=momentum,
            learning_rate=learning_rate,
            weight_noise_std=weight_noise_std,
            seed=int(seed),
        )
    state.ensure_velocity(params)
    if feature_scaler is not None:
        if feature_scaler.num_bins != spec.input_dim:
            raise ConfigError(
                f"feature scaler covers {feature_scaler.num_bins} bins but "
                f"the network reads {spec.input_dim}"
            )
        segments = feature_scaler.apply_segments(segments)
        if validation_segments:
            validation_segments = feature_scaler.apply_segments(
                validation_segments
            )
    if epochs <= start_epoch:
        raise ConfigError(
            f"nothing to do: epochs={epochs}, next epoch is {start_epoch}"
        )

    log_fh = None
    log_writer = None
    if log_path is not None:
        fresh = not (resume_from is not None and Path(log_path).exists())
        log_fh = open(log_path, "a" if not fresh else "w",
                      newline="", encoding="utf-8")
        log_writer = csv.writer(log_fh, lineterminator="\n")
        if fresh:
            log_writer.writerow(["epoch", "step", "loss", "wall_ms"])

    epoch_means = []
    val_losses = []
    best_val = np.inf
    best_epoch = -1
    paths = []
    best_path = str(checkpoint_dir / "best.ckpt")
    try:
        for epoch in range(start_epoch, epochs):
            order = np.random.default_rng([int(seed), 3, epoch]).permutation(
                len(segments)
            )
            losses = []
            for step, segment_idx in enumerate(order):
                t0 = time.perf_counter()
                try:
                    _, _, loss = train_step(
                        params, state, segments[segment_idx], spec, loss_config
                    )
                except DivergenceError:
                    # preserve the last consistent state for post-mortems
                    save_checkpoint(
                        checkpoint_dir / "diverged.ckpt", params, spec, state,
                        epoch=epoch - 1, scaler=feature_scaler,
                    )
                    raise
                wall_ms = (time.perf_counter() - t0) * 1000.0
                losses.append(loss)
                if log_writer:
                    log_writer.writerow(
                        [epoch, step, f"{loss:.10g}", f"{wall_ms:.3f}"]
                    )
            mean_loss = float(np.mean(losses))
            epoch_means.append(mean_loss)
            if log_writer:
                log_writer.writerow([epoch, -1, f"{mean_loss:.10g}", "0.000"])
            path = checkpoint_dir / f"epoch{epoch:04d}.ckpt"
            save_checkpoint(path, params, spec, state, epoch=epoch,
                            scaler=feature_scaler)
            paths.append(str(path))
            if validation_segments:
                val = evaluate_loss(params, spec, validation_segments, loss_config)
            else:
                val = mean_loss
            val_losses.append(val)
            if log_writer:
                log_writer.writerow([epoch, -2, f"{val:.10g}", "0.000"])
                log_fh.flush()
            if val < best_val:
                best_val = val
                best_epoch = epoch
                save_checkpoint(best_path, params, spec, state, epoch=epoch,
                                scaler=feature_scaler)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(
        params=params,
        spec=spec,
        state=state,
        epoch_mean_losses=epoch_means,
        validation_losses=val_losses,
        best_epoch=best_epoch,
        checkpoint_paths=paths,
        best_path=best_path,
    )
