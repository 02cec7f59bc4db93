"""Multi-task BiLSTM: token error detection, bidirectional LM and essay scoring.

Embedding lookup feeds a forward and a backward LSTM.  Per token, the
concatenated states drive a two-way error classifier; each direction's state
also predicts its neighbouring token (next for forward, previous for
backward).  The concatenated states averaged over the whole essay go through
one linear unit and a scaled sigmoid to give a score in (score_min, score_max).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradCheckReport, ShapeError, Tape, relative_error
from .corpus import SCORE_MAX, SCORE_MIN, Essay


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 300
    hidden_dim: int = 100
    score_min: float = float(SCORE_MIN)
    score_max: float = float(SCORE_MAX)
    gamma_lm: float = 0.1
    gamma_aes: float = 0.1
    ged_threshold: float = 0.5
    lm_vocab_cap: int = 0  # 0 = full vocabulary
    lm_combine: str = "mean"  # how the two LM directions are merged: mean | sum

    def __post_init__(self):
        if not 0.0 <= self.gamma_aes <= 1.0:
            raise ValueError(f"gamma_aes={self.gamma_aes} outside [0, 1]")
        if self.gamma_lm < 0:
            raise ValueError(f"gamma_lm={self.gamma_lm} must be >= 0")
        if not self.score_min < self.score_max:
            raise ValueError("score_min must be < score_max")
        if not 0.0 < self.ged_threshold < 1.0:
            raise ValueError("ged_threshold must lie in (0, 1)")
        if self.vocab_size < 2 or self.embedding_dim < 1 or self.hidden_dim < 1:
            raise ValueError("vocab_size, embedding_dim and hidden_dim must be positive")
        if self.lm_combine not in ("mean", "sum"):
            raise ValueError(f"lm_combine must be 'mean' or 'sum', not {self.lm_combine!r}")

    @property
    def lm_vocab(self) -> int:
        if self.lm_vocab_cap:
            return min(self.lm_vocab_cap, self.vocab_size)
        return self.vocab_size


@dataclass
class ModelParams:
    embedding: np.ndarray
    fwd_w: np.ndarray
    fwd_u: np.ndarray
    fwd_b: np.ndarray
    bwd_w: np.ndarray
    bwd_u: np.ndarray
    bwd_b: np.ndarray
    ged_w: np.ndarray
    ged_b: np.ndarray
    lm_fwd_w: np.ndarray
    lm_fwd_b: np.ndarray
    lm_bwd_w: np.ndarray
    lm_bwd_b: np.ndarray
    aes_w: np.ndarray
    aes_b: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def items(self):
        return [(name, getattr(self, name)) for name in self.names()]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.items())

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.items())


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, h, k = config.embedding_dim, config.hidden_dim, config.lm_vocab
    return {
        "embedding": (config.vocab_size, e),
        "fwd_w": (e, 4 * h), "fwd_u": (h, 4 * h), "fwd_b": (1, 4 * h),
        "bwd_w": (e, 4 * h), "bwd_u": (h, 4 * h), "bwd_b": (1, 4 * h),
        "ged_w": (2 * h, 2), "ged_b": (1, 2),
        "lm_fwd_w": (h, k), "lm_fwd_b": (1, k),
        "lm_bwd_w": (h, k), "lm_bwd_b": (1, k),
        "aes_w": (2 * h, 1), "aes_b": (1, 1),
    }


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0, embedding: np.ndarray | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases; embeddings ~U(-0.05, 0.05) unless given."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    e, h = config.embedding_dim, config.hidden_dim
    values = {}
    for name, shape in shapes.items():
        if name == "embedding":
            values[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif name.endswith("_b"):
            values[name] = np.zeros(shape)
        elif name.endswith("_w") and name[:3] in ("fwd", "bwd"):
            # per-gate fan: each of the four blocks maps e -> h
            values[name] = _glorot(rng, e, h, shape)
        elif name.endswith("_u"):
            values[name] = _glorot(rng, h, h, shape)
        else:
            values[name] = _glorot(rng, shape[0], shape[1], shape)
    if embedding is not None:
        if embedding.shape != shapes["embedding"]:
            raise ShapeError(f"embedding: expected {shapes['embedding']}, got {embedding.shape}")
        values["embedding"] = np.array(embedding, dtype=np.float64)
    return ModelParams(**values)


def check_params(params: ModelParams, config: ModelConfig) -> None:
    for name, shape in param_shapes(config).items():
        got = getattr(params, name).shape
        if got != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {got}")


# --- LSTM cell from primitives ----------------------------------------------------


def lstm_cell(tape: Tape, x: int, h: int, c: int, w: int, u: int, b: int) -> tuple[int, int]:
    """One LSTM step composed from tape primitives; gate blocks are ordered i, f, o, g."""
    hd = tape.value(u).shape[0]
    if tape.value(x).shape[-1] != tape.value(w).shape[0] or tape.value(h).shape[-1] != hd:
        raise ShapeError(
            f"lstm_cell: incompatible shapes x={tape.value(x).shape} h={tape.value(h).shape} "
            f"w={tape.value(w).shape} u={tape.value(u).shape}"
        )
    z = tape.add(tape.add(tape.matmul(x, w), tape.matmul(h, u)), b)
    i = tape.sigmoid(tape.slice_cols(z, 0, hd))
    f = tape.sigmoid(tape.slice_cols(z, hd, 2 * hd))
    o = tape.sigmoid(tape.slice_cols(z, 2 * hd, 3 * hd))
    g = tape.tanh(tape.slice_cols(z, 3 * hd, 4 * hd))
    c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
    h_new = tape.mul(o, tape.tanh(c_new))
    return h_new, c_new


def _unrolled_lstm(tape, x, w, u, b, reverse):
    n = tape.value(x).shape[0]
    hd = tape.value(u).shape[0]
    h = tape.leaf(np.zeros((1, hd)))
    c = tape.leaf(np.zeros((1, hd)))
    states = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        h, c = lstm_cell(tape, tape.slice_rows(x, t, t + 1), h, c, w, u, b)
        states[t] = h
    return tape.concat(*states, axis=0) if n > 1 else states[0]


# --- forward pass and losses --------------------------------------------------------


@dataclass
class ModelOutputs:
    ged_probs: np.ndarray
    lm_fwd_logits: np.ndarray
    lm_bwd_logits: np.ndarray
    predicted_score: float
    token_ids: np.ndarray
    tape: Tape = field(repr=False)
    nodes: dict[str, int] = field(repr=False)
    leaves: dict[str, int] = field(repr=False)


@dataclass
class LossBreakdown:
    e_ged: float
    e_lm: float
    e_aes: float
    gamma_lm: float
    gamma_aes: float
    e: float
    node: int = -1


def combine_losses(e_ged, e_lm, e_aes, gamma_lm, gamma_aes):
    return (1.0 - gamma_aes) * (e_ged + gamma_lm * e_lm) + gamma_aes * e_aes


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    return p / p.sum(axis=1, keepdims=True)


def forward(params: ModelParams, config: ModelConfig, token_ids, fused: bool = True) -> ModelOutputs:
    """Run the network over one essay, recording everything on a fresh tape.

    ``fused=False`` unrolls the recurrences through :func:`lstm_cell`; it is
    slower and only exists as an independent route for cross-checking.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("forward: need a non-empty 1-D token id sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"forward: token id out of range for vocab size {config.vocab_size}")
    tape = Tape()
    p = {name: tape.leaf(value, name=name) for name, value in params.items()}
    n = ids.size

    x = tape.gather(p["embedding"], ids)
    if fused:
        h_fwd = tape.lstm_seq(x, p["fwd_w"], p["fwd_u"], p["fwd_b"])
        h_bwd = tape.lstm_seq(x, p["bwd_w"], p["bwd_u"], p["bwd_b"], reverse=True)
    else:
        h_fwd = _unrolled_lstm(tape, x, p["fwd_w"], p["fwd_u"], p["fwd_b"], reverse=False)
        h_bwd = _unrolled_lstm(tape, x, p["bwd_w"], p["bwd_u"], p["bwd_b"], reverse=True)
    both = tape.concat(h_fwd, h_bwd)

    nodes = {"h_fwd": h_fwd, "h_bwd": h_bwd, "states": both}
    nodes["ged_logits"] = tape.add(tape.matmul(both, p["ged_w"]), p["ged_b"])
    if n > 1:
        nodes["lm_fwd_logits"] = tape.add(
            tape.matmul(tape.slice_rows(h_fwd, 0, n - 1), p["lm_fwd_w"]), p["lm_fwd_b"]
        )
        nodes["lm_bwd_logits"] = tape.add(
            tape.matmul(tape.slice_rows(h_bwd, 1, n), p["lm_bwd_w"]), p["lm_bwd_b"]
        )
        lm_f = tape.value(nodes["lm_fwd_logits"])
        lm_b = tape.value(nodes["lm_bwd_logits"])
    else:
        lm_f = lm_b = np.zeros((0, config.lm_vocab))

    nodes["pooled"] = tape.mean_time(both)
    nodes["aes_pre"] = tape.add(tape.matmul(nodes["pooled"], p["aes_w"]), p["aes_b"])
    nodes["score"] = tape.scale_shift(
        tape.sigmoid(nodes["aes_pre"]), config.score_max - config.score_min, config.score_min
    )
    return ModelOutputs(
        ged_probs=_softmax_rows(tape.value(nodes["ged_logits"])),
        lm_fwd_logits=lm_f,
        lm_bwd_logits=lm_b,
        predicted_score=float(tape.value(nodes["score"])[0, 0]),
        token_ids=ids,
        tape=tape,
        nodes=nodes,
        leaves=p,
    )


def compute_loss(outputs: ModelOutputs, essay: Essay, config: ModelConfig) -> LossBreakdown:
    """Append the three task losses and their weighted combination to the tape."""
    if essay.labels is None or essay.gold_score is None:
        raise ValueError(f"essay {essay.id!r} lacks labels or a gold score")
    if len(essay.labels) != outputs.token_ids.size:
        raise ValueError(
            f"essay {essay.id!r}: {len(essay.labels)} labels for {outputs.token_ids.size} tokens"
        )
    tape, nodes = outputs.tape, outputs.nodes
    ids = outputs.token_ids
    e_ged = tape.softmax_xent(nodes["ged_logits"], essay.labels)

    e_lm = None
    if ids.size > 1:
        targets = np.where(ids < config.lm_vocab, ids, 0)
        fwd = tape.softmax_xent(nodes["lm_fwd_logits"], targets[1:])
        bwd = tape.softmax_xent(nodes["lm_bwd_logits"], targets[:-1])
        e_lm = tape.add(fwd, bwd)
        if config.lm_combine == "mean":
            e_lm = tape.scale_shift(e_lm, 0.5)

    e_aes = tape.squared_error(nodes["score"], float(essay.gold_score))

    task = e_ged if e_lm is None else tape.add(e_ged, tape.scale_shift(e_lm, config.gamma_lm))
    total = tape.add(
        tape.scale_shift(task, 1.0 - config.gamma_aes),
        tape.scale_shift(e_aes, config.gamma_aes),
    )
    scalar = lambda node: float(tape.value(node).reshape(-1)[0])  # noqa: E731
    return LossBreakdown(
        e_ged=scalar(e_ged),
        e_lm=0.0 if e_lm is None else scalar(e_lm),
        e_aes=scalar(e_aes),
        gamma_lm=config.gamma_lm,
        gamma_aes=config.gamma_aes,
        e=scalar(total),
        node=total,
    )


def loss_and_grads(params: ModelParams, config: ModelConfig, token_ids, essay: Essay):
    """Loss breakdown plus gradients of the combined loss keyed by parameter name."""
    outputs = forward(params, config, token_ids)
    loss = compute_loss(outputs, essay, config)
    grads = outputs.tape.backward(loss.node)
    return loss, outputs, {name: grads[leaf] for name, leaf in outputs.leaves.items()}


def predict_labels(ged_probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 (incorrect) wherever P(incorrect) >= threshold."""
    return (np.asarray(ged_probs)[:, 1] >= threshold).astype(np.int64)


def model_grad_check(
    params: ModelParams, config: ModelConfig, token_ids, essay: Essay,
    tolerance: float = 1e-3, h: float = 1e-5,
) -> GradCheckReport:
    """Central-difference check of the combined loss w.r.t. every parameter."""
    _, _, grads = loss_and_grads(params, config, token_ids, essay)
    probe = params.copy()
    report = GradCheckReport(name="model", tolerance=tolerance)
    for name, value in probe.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = compute_loss(forward(probe, config, token_ids), essay, config).e
            flat[j] = orig - h
            down = compute_loss(forward(probe, config, token_ids), essay, config).e
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        report.errors[name] = relative_error(grads[name], numeric)
    return report
