"""Noise-level-conditioned autoregressive model of subband frames.

The model factorizes the density of a (frames x channels) coefficient
matrix into per-frame conditionals: a causal convolution summarizes the
last L frames, a conditioning MLP embeds the noise level through random
Fourier features, a gated recurrent cell carries long-range context, and
a prediction MLP emits per-channel logistic (mu, s) pairs for the whole
frame at once. All densities are evaluated teacher-forced, which makes
both the log-likelihood and its input gradient (the score used during
sampling) a single graph evaluation.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .subband import SubbandFrames

NOISE_DB_MIN = -90.0
NOISE_DB_MAX = 0.0
SCALE_EPS = 1e-6

CHECKPOINT_MAGIC = b"SBSM"
CHECKPOINT_VERSION = 1


def noise_amp(sigma_db: float) -> float:
    """Amplitude of noise at the given power level in dB (full scale)."""
    check_noise_db(sigma_db)
    return 10.0 ** (sigma_db / 20.0)


def check_noise_db(sigma_db) -> None:
    arr = np.asarray(sigma_db, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("noise level must be finite")
    if np.any(arr < NOISE_DB_MIN) or np.any(arr > NOISE_DB_MAX):
        raise ValueError(
            f"noise level {sigma_db} dB outside supported range "
            f"[{NOISE_DB_MIN}, {NOISE_DB_MAX}]"
        )


def normalized_noise(sigma_db):
    """Map the conditioning range [-90, 0] dB onto [0, 1]."""
    check_noise_db(sigma_db)
    return (np.asarray(sigma_db, dtype=np.float64) - NOISE_DB_MIN) / (NOISE_DB_MAX - NOISE_DB_MIN)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes; defaults follow the full-scale recipe."""

    channels: int = 64
    context_frames: int = 10
    hidden_dim: int = 1024
    mlp_layers: int = 4
    rff_dim: int = 64
    recurrent_state_dim: int | None = None

    def __post_init__(self):
        if self.recurrent_state_dim is None:
            object.__setattr__(self, "recurrent_state_dim", self.hidden_dim)
        if self.channels < 1 or self.context_frames < 1:
            raise ValueError("channels and context_frames must be positive")
        if self.mlp_layers < 2:
            raise ValueError("prediction MLP needs at least 2 layers")
        if self.rff_dim % 2 != 0:
            raise ValueError("rff_dim must be even (paired sin/cos features)")

    @property
    def state_dim(self) -> int:
        return self.recurrent_state_dim

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "context_frames": self.context_frames,
            "hidden_dim": self.hidden_dim,
            "mlp_layers": self.mlp_layers,
            "rff_dim": self.rff_dim,
            "recurrent_state_dim": self.recurrent_state_dim,
        }


@dataclass
class LogisticFrameParams:
    """Per-channel logistic location/scale for one frame; s is positive."""

    mu: np.ndarray
    s: np.ndarray


@dataclass
class ModelParams:
    """Trainable tensors plus the frozen random Fourier frequencies."""

    config: ModelConfig
    rff_freqs: np.ndarray
    tensors: dict[str, np.ndarray]

    def trainable_names(self) -> tuple[str, ...]:
        return tuple(self.tensors.keys())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            rff_freqs=self.rff_freqs.copy(),
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            rff_freqs=self.rff_freqs.copy(),
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )


def _mlp_dims(cfg: ModelConfig, in_dim: int, out_dim: int) -> list[tuple[int, int]]:
    dims = [in_dim] + [cfg.hidden_dim] * (cfg.mlp_layers - 1) + [out_dim]
    return list(zip(dims[:-1], dims[1:]))


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Seeded parameter initialization (uniform fan-in scaling)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    c, l, h, s = config.channels, config.context_frames, config.hidden_dim, config.state_dim

    def uniform(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    tensors: dict[str, np.ndarray] = {
        "conv_kernel": uniform(l * c, l, c, h),
        "conv_bias": np.zeros(h, dtype=dtype),
        "gru_wx": uniform(h, h, 3 * s),
        "gru_wh": uniform(s, s, 3 * s),
        "gru_bias": np.zeros(3 * s, dtype=dtype),
    }
    for i, (din, dout) in enumerate(_mlp_dims(config, s, 2 * c)):
        tensors[f"pred_w{i}"] = uniform(din, din, dout)
        tensors[f"pred_b{i}"] = np.zeros(dout, dtype=dtype)
    for i, (din, dout) in enumerate(_mlp_dims(config, config.rff_dim, h)):
        tensors[f"cond_w{i}"] = uniform(din, din, dout)
        tensors[f"cond_b{i}"] = np.zeros(dout, dtype=dtype)
    rff = rng.normal(0.0, 10.0, size=config.rff_dim // 2)
    return ModelParams(config=config, rff_freqs=rff, tensors=tensors)


# --- graph construction -----------------------------------------------------

def _emit_cond(b: dg.GraphBuilder, sigma_hat: str, cfg: ModelConfig) -> str:
    phase = b.affine(sigma_hat, b.input("rff_w"), b.input("rff_b"))
    feat = b.concat([b.sin(phase), b.cos(phase)], axis=-1)
    h = feat
    n_layers = len(_mlp_dims(cfg, cfg.rff_dim, cfg.hidden_dim))
    for i in range(n_layers):
        h = b.affine(h, b.input(f"cond_w{i}"), b.input(f"cond_b{i}"))
        if i < n_layers - 1:
            h = b.relu(h)
    return h


def _emit_pred(b: dg.GraphBuilder, h: str, cfg: ModelConfig) -> str:
    n_layers = len(_mlp_dims(cfg, cfg.state_dim, 2 * cfg.channels))
    for i in range(n_layers):
        h = b.affine(h, b.input(f"pred_w{i}"), b.input(f"pred_b{i}"))
        if i < n_layers - 1:
            h = b.relu(h)
    return h


def _emit_mu_s(b: dg.GraphBuilder, raw: str, cfg: ModelConfig, axis: int):
    c = cfg.channels
    mu = b.slice(raw, axis=axis, start=0, stop=c, name="mu")
    s = b.add(b.softplus(b.slice(raw, axis=axis, start=c, stop=2 * c)),
              b.input("scale_eps"), name="s")
    return mu, s


_SEQ_GRAPHS: dict[ModelConfig, dg.Graph] = {}
_FRAME_GRAPHS: dict[ModelConfig, dg.Graph] = {}


def _sequence_graph(cfg: ModelConfig) -> dg.Graph:
    if cfg not in _SEQ_GRAPHS:
        b = dg.GraphBuilder()
        x = b.input("x")
        sigma_hat = b.input("sigma_hat")
        h0 = b.input("h0")
        ctx = b.causal_conv(x, b.input("conv_kernel"), b.input("conv_bias"))
        cond = _emit_cond(b, sigma_hat, cfg)
        cond3 = b.reshape(cond, (-1, 1, cfg.hidden_dim))
        hseq = b.gru_sequence(b.add(ctx, cond3), h0,
                              b.input("gru_wx"), b.input("gru_wh"), b.input("gru_bias"))
        raw = _emit_pred(b, hseq, cfg)
        mu, s = _emit_mu_s(b, raw, cfg, axis=2)
        ll = b.logistic_log_density(x, mu, s, name="ll")
        b.reduce_sum(ll, name="loglik")
        b.reshape(b.slice(hseq, axis=1, start=-1, stop=None), (-1, cfg.state_dim),
                  name="h_last")
        _SEQ_GRAPHS[cfg] = b.build(["loglik", "h_last", "mu", "s"])
    return _SEQ_GRAPHS[cfg]


def _frame_graph(cfg: ModelConfig) -> dg.Graph:
    if cfg not in _FRAME_GRAPHS:
        b = dg.GraphBuilder()
        ctx = b.input("ctx_flat")
        cond = b.input("cond")
        h = b.input("h")
        feat = b.affine(ctx, b.input("conv_flat_w"), b.input("conv_bias"))
        h_new = b.gru_cell(b.add(feat, cond), h,
                           b.input("gru_wx"), b.input("gru_wh"), b.input("gru_bias"),
                           name="h_new")
        raw = _emit_pred(b, h_new, cfg)
        _emit_mu_s(b, raw, cfg, axis=1)
        _FRAME_GRAPHS[cfg] = b.build(["mu", "s", "h_new"])
    return _FRAME_GRAPHS[cfg]


def _param_feeds(params: ModelParams) -> dict[str, np.ndarray]:
    dtype = params.tensors["conv_kernel"].dtype
    feeds = dict(params.tensors)
    feeds["rff_w"] = (2.0 * np.pi * params.rff_freqs[None, :]).astype(dtype)
    feeds["rff_b"] = np.zeros(params.rff_freqs.size, dtype=dtype)
    feeds["scale_eps"] = np.asarray(SCALE_EPS, dtype=dtype)
    return feeds


def _conv_flat_weight(params: ModelParams) -> np.ndarray:
    # context arrives oldest-first: lag of row i is L - i
    kernel = params.tensors["conv_kernel"]
    l, c, h = kernel.shape
    return kernel[::-1].reshape(l * c, h)


def _as_coeffs(x) -> np.ndarray:
    if isinstance(x, SubbandFrames):
        return np.asarray(x.coeffs)
    return np.asarray(x)


def _sigma_hat_column(sigma_db, batch: int, dtype) -> np.ndarray:
    arr = np.asarray(normalized_noise(sigma_db), dtype=dtype)
    if arr.ndim == 0:
        arr = np.full(batch, arr, dtype=dtype)
    elif arr.shape != (batch,):
        raise ValueError(f"expected scalar or ({batch},) noise levels, got {arr.shape}")
    return arr[:, None]


def _seq_feeds(x3: np.ndarray, sigma_db, params: ModelParams, h0=None) -> dict:
    cfg = params.config
    if x3.ndim != 3 or x3.shape[2] != cfg.channels:
        raise ValueError(f"expected (batch, frames, {cfg.channels}) input, got {x3.shape}")
    feeds = _param_feeds(params)
    feeds["x"] = x3
    feeds["sigma_hat"] = _sigma_hat_column(sigma_db, x3.shape[0], x3.dtype)
    if h0 is None:
        h0 = np.zeros((x3.shape[0], cfg.state_dim), dtype=x3.dtype)
    feeds["h0"] = h0
    return feeds


# --- public operations -------------------------------------------------------

def rff_embed(sigma_db: float, params: ModelParams) -> np.ndarray:
    """Sin/cos features of the normalized noise level at fixed frequencies."""
    shat = float(normalized_noise(sigma_db))
    phase = 2.0 * np.pi * params.rff_freqs * shat
    return np.concatenate([np.sin(phase), np.cos(phase)])


def condition(sigma_db: float, params: ModelParams) -> np.ndarray:
    """Conditioning vector: the noise-level MLP applied to the RFF embedding."""
    cfg = params.config
    h = rff_embed(sigma_db, params)
    n_layers = len(_mlp_dims(cfg, cfg.rff_dim, cfg.hidden_dim))
    for i in range(n_layers):
        h = h @ params.tensors[f"cond_w{i}"] + params.tensors[f"cond_b{i}"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def predict_frame(context: np.ndarray, rnn_state: np.ndarray, cond: np.ndarray,
                  params: ModelParams):
    """One autoregressive step: (L past frames, state, conditioning) -> frame
    distribution parameters and the updated recurrent state."""
    cfg = params.config
    context = np.asarray(context)
    if context.shape != (cfg.context_frames, cfg.channels):
        raise ValueError(
            f"context must be ({cfg.context_frames}, {cfg.channels}), got {context.shape}"
        )
    feeds = _param_feeds(params)
    feeds["conv_flat_w"] = _conv_flat_weight(params)
    feeds["ctx_flat"] = context.reshape(1, -1)
    feeds["cond"] = np.asarray(cond)[None, :]
    feeds["h"] = np.asarray(rnn_state)[None, :]
    out = dg.forward(_frame_graph(cfg), feeds)
    return LogisticFrameParams(mu=out["mu"][0], s=out["s"][0]), out["h_new"][0]


def log_prob(x, sigma_db: float, params: ModelParams) -> float:
    """Total log density of a (frames, channels) coefficient matrix."""
    out = dg.forward(_sequence_graph(params.config),
                     _seq_feeds(_as_coeffs(x)[None, :, :], sigma_db, params))
    val = float(out["loglik"])
    if not np.isfinite(val):
        raise ArithmeticError("log probability is non-finite")
    return val


def score(x, sigma_db: float, params: ModelParams) -> np.ndarray:
    """Gradient of log_prob with respect to every coefficient of x."""
    return score_batch(_as_coeffs(x)[None, :, :], sigma_db, params)[0]


def score_batch(x3: np.ndarray, sigma_db, params: ModelParams, h0=None) -> np.ndarray:
    """Batched score; accepts per-item noise levels."""
    outs, grads = dg.value_and_grad(
        _sequence_graph(params.config), "loglik", ["x"],
        _seq_feeds(np.asarray(x3), sigma_db, params, h0=h0),
    )
    if not np.isfinite(outs["loglik"]):
        raise ArithmeticError("log probability is non-finite")
    return grads["x"]


def loglik_with_grads(x3: np.ndarray, sigma_db, params: ModelParams, wrt, h0=None):
    """Log-likelihood sum, final recurrent state, and gradients wrt ``wrt``."""
    outs, grads = dg.value_and_grad(
        _sequence_graph(params.config), "loglik", wrt,
        _seq_feeds(np.asarray(x3), sigma_db, params, h0=h0),
    )
    if not np.isfinite(outs["loglik"]):
        raise ArithmeticError("log likelihood is non-finite")
    return outs, grads


def sequence_loglik(x3: np.ndarray, sigma_db, params: ModelParams, h0=None):
    """Forward-only batched log-likelihood sum plus the final recurrent state."""
    outs = dg.forward(_sequence_graph(params.config),
                      _seq_feeds(np.asarray(x3), sigma_db, params, h0=h0))
    return float(outs["loglik"]), outs["h_last"]


def frame_params(x, sigma_db, params: ModelParams):
    """Teacher-forced per-frame (mu, s) for a (frames, channels) matrix."""
    out = dg.forward(_sequence_graph(params.config),
                     _seq_feeds(_as_coeffs(x)[None, :, :], sigma_db, params))
    return out["mu"][0], out["s"][0]


def sample_logistic(mu: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw: x = mu + s * (ln u - ln(1-u))."""
    u = rng.uniform(size=np.shape(mu))
    return mu + s * (np.log(u) - np.log1p(-u))


def generate(n_frames: int, sigma_db: float, params: ModelParams, seed: int,
             sample_rate: int = 16000) -> SubbandFrames:
    """Ancestral sampling of ``n_frames`` frames at a fixed noise level."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    cfg = params.config
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    cond = condition(sigma_db, params)
    context = np.zeros((cfg.context_frames, cfg.channels))
    state = np.zeros(cfg.state_dim)
    frames = np.empty((n_frames, cfg.channels))
    for n in range(n_frames):
        dist, state = predict_frame(context, state, cond, params)
        frame = sample_logistic(dist.mu, dist.s, rng)
        frames[n] = frame
        context = np.concatenate([context[1:], frame[None, :]])
    return SubbandFrames(coeffs=frames, channels=cfg.channels, sample_rate=sample_rate)


# --- checkpoint container ----------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary container: magic, version, config header, tensors."""
    entries = [("rff_freqs", params.rff_freqs)] + list(params.tensors.items())
    manifest = [
        {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
        for name, arr in entries
    ]
    header = json.dumps({"config": params.config.to_dict(), "tensors": manifest},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for _, arr in entries:
        buf.write(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + header_len].decode())
    config = ModelConfig(**header["config"])
    offset = 12 + header_len
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    rff = arrays.pop("rff_freqs")
    return ModelParams(config=config, rff_freqs=rff, tensors=arrays)


class ModelScorer:
    """Score-provider adapter: callable (coeffs, sigma_db) -> gradient."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.channels = params.config.channels

    def __call__(self, coeffs: np.ndarray, sigma_db) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if coeffs.ndim == 2:
            return score(coeffs, sigma_db, self.params)
        return score_batch(coeffs, sigma_db, self.params)
