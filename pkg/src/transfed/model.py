"""One-patch transformer classifier for windowed sensor data.

The whole input window is a single patch; its rows act as the attention
tokens. The forward stack is

    input window (W x F)
      -> learned linear projection F -> d_model        input_proj
      -> L x [ norm1 -> multi-head attention -> add    (adds the normalized
               -> norm2 -> feed-forward dense -> add    tensor, then the
             ]                                          first sum)
      -> flatten to W*d_model (or mean-pool to d_model)
      -> dense softmax head over n_classes

Residual wiring note: the first add combines the attention output with the
*normalized* tensor that fed it, and the second add combines the dense
output with the first sum.

Parameter count closed form (the reference the tests check against), with
d = d_model, ffn = ffn width, W = window rows, F = features, C = classes:

    input_proj:   F*d + d
    per layer:    2*(2d)                       two norms (gain + bias)
                  + 4*(d*d + d)                q/k/v/output projections
                  + d*ffn + ffn                feed-forward dense
                  + [ffn*d + d  if ffn != d]   second dense back to d
    head:         (W*d)*C + C   flatten head
                  (d*C + C      when head_pooling is on)

Kernels are initialized uniform in +-sqrt(6/(fan_in+fan_out)), biases zero,
norm gains one; draws come from a seeded generator in construction order, so
equal seeds give bit-identical parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, wire
from .layers import ShapeError
from .params import ParameterSet


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    """Architecture and augmentation settings for the classifier.

    d_model defaults to 20 so the five attention heads divide it evenly.
    """

    window_rows: int = 140
    features: int = 9
    d_model: int = 20
    heads: int = 5
    ffn_dim: int | None = None
    transformer_layers: int = 2
    n_classes: int = 15
    jitter: float = 0.01
    scale_range: float = 0.1
    positional_encoding: bool = False
    head_pooling: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("window_rows", "features", "d_model", "heads",
                     "transformer_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by heads {self.heads}"
            )
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be positive")

    @property
    def ffn(self) -> int:
        return self.d_model if self.ffn_dim is None else self.ffn_dim

    @property
    def head_inputs(self) -> int:
        if self.head_pooling:
            return self.d_model
        return self.window_rows * self.d_model


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig) -> ParameterSet:
    """Build the canonical, seeded parameter set for a configuration."""
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    items: list[tuple[str, np.ndarray]] = [
        ("input_proj/kernel", _glorot(rng, config.features, d)),
        ("input_proj/bias", np.zeros(d)),
    ]
    for i in range(config.transformer_layers):
        p = f"block{i}"
        items += [
            (f"{p}/norm1/gain", np.ones(d)),
            (f"{p}/norm1/bias", np.zeros(d)),
        ]
        for proj in ("wq", "wk", "wv", "wo"):
            items += [
                (f"{p}/attn/{proj}", _glorot(rng, d, d)),
                (f"{p}/attn/b{proj[1]}", np.zeros(d)),
            ]
        items += [
            (f"{p}/norm2/gain", np.ones(d)),
            (f"{p}/norm2/bias", np.zeros(d)),
            (f"{p}/ffn/kernel", _glorot(rng, d, config.ffn)),
            (f"{p}/ffn/bias", np.zeros(config.ffn)),
        ]
        if config.ffn != d:
            items += [
                (f"{p}/ffn2/kernel", _glorot(rng, config.ffn, d)),
                (f"{p}/ffn2/bias", np.zeros(d)),
            ]
    items += [
        ("head/kernel", _glorot(rng, config.head_inputs, config.n_classes)),
        ("head/bias", np.zeros(config.n_classes)),
    ]
    return ParameterSet(items)


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form scalar parameter count for a configuration."""
    d = config.d_model
    ffn = config.ffn
    per_layer = 2 * (2 * d) + 4 * (d * d + d) + d * ffn + ffn
    if ffn != d:
        per_layer += ffn * d + d
    head = config.head_inputs * config.n_classes + config.n_classes
    return (config.features * d + d) + config.transformer_layers * per_layer + head


class Model:
    """A built classifier: configuration plus parameters plus forward caches.

    Inference (training=False) is pure and safe for concurrent readers;
    training mode stores per-layer caches on the instance, so a training
    model belongs to a single owner.
    """

    def __init__(self, config: ModelConfig, params: ParameterSet | None = None):
        self.config = config
        if params is None:
            self.params = init_params(config)
        else:
            if params.shapes() != init_params(config).shapes():
                raise ShapeError("parameter shapes do not match the configuration")
            self.params = params
        self._pe = (
            layers.sinusoidal_encoding(config.window_rows, config.d_model)
            if config.positional_encoding
            else None
        )
        self._cache = None

    def param_count(self) -> int:
        return self.params.total_count()

    def set_params(self, params: ParameterSet) -> None:
        """Install a parameter set (copied), validating names and shapes."""
        if params.names != self.params.names:
            raise ShapeError("parameter names do not match the model")
        for name, t in params:
            if t.shape != self.params[name].shape:
                raise ShapeError(f"shape mismatch for {name}")
        self.params = params.copy()

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        c = self.config
        if batch.ndim != 3 or batch.shape[1:] != (c.window_rows, c.features):
            raise ShapeError(
                f"expected batch of ({c.window_rows}, {c.features}) windows, "
                f"got {batch.shape}"
            )
        return batch

    def token_representation(self, batch, training: bool = False):
        """Pre-flatten token stack of shape (b, W, d_model).

        With positional encoding off this map is permutation-equivariant in
        the window rows. When ``training`` is true the per-layer caches are
        retained for backward().
        """
        batch = self._check_batch(batch)
        P = self.params
        h, proj_cache = layers.dense_forward(
            batch, P["input_proj/kernel"], P["input_proj/bias"]
        )
        if self._pe is not None:
            h = h + self._pe
        block_caches = []
        for i in range(self.config.transformer_layers):
            p = f"block{i}"
            n1, c_n1 = layers.layer_norm_forward(
                h, P[f"{p}/norm1/gain"], P[f"{p}/norm1/bias"]
            )
            attn_params = {k: P[f"{p}/attn/{k}"] for k in layers.MHA_PARAM_NAMES}
            a, c_attn = layers.multi_head_attention_forward(
                n1, attn_params, self.config.heads
            )
            r1 = a + n1
            n2, c_n2 = layers.layer_norm_forward(
                r1, P[f"{p}/norm2/gain"], P[f"{p}/norm2/bias"]
            )
            f, c_ffn = layers.dense_forward(
                n2, P[f"{p}/ffn/kernel"], P[f"{p}/ffn/bias"], "gelu"
            )
            c_ffn2 = None
            if self.config.ffn != self.config.d_model:
                f, c_ffn2 = layers.dense_forward(
                    f, P[f"{p}/ffn2/kernel"], P[f"{p}/ffn2/bias"]
                )
            h = f + r1
            block_caches.append((c_n1, c_attn, c_n2, c_ffn, c_ffn2))
        if training:
            self._tokens_cache = (proj_cache, block_caches)
        return h

    def forward(self, batch, training: bool = False) -> np.ndarray:
        """Class probabilities of shape (b, n_classes); rows sum to 1."""
        tokens = self.token_representation(batch, training)
        b = tokens.shape[0]
        if self.config.head_pooling:
            head_in = tokens.mean(axis=1)
        else:
            head_in = tokens.reshape(b, -1)
        probs, head_cache = layers.dense_forward(
            head_in, self.params["head/kernel"], self.params["head/bias"], "softmax"
        )
        if training:
            self._cache = (self._tokens_cache, head_cache, probs, tokens.shape)
        return probs

    def backward(self, labels) -> ParameterSet:
        """Gradients of mean cross-entropy loss for every parameter.

        Requires a preceding ``forward(..., training=True)``. Returns a
        ParameterSet shaped exactly like ``self.params``.
        """
        if self._cache is None:
            raise RuntimeError("backward() without a cached training forward")
        (proj_cache, block_caches), head_cache, probs, tok_shape = self._cache
        b, w, d = tok_shape
        grads: dict[str, np.ndarray] = {}

        dz = layers.softmax_cross_entropy_grad(probs, labels)
        dhead_in, grads["head/kernel"], grads["head/bias"] = (
            layers.dense_backward_from_preact(head_cache, dz)
        )
        if self.config.head_pooling:
            dtokens = np.repeat(dhead_in[:, None, :], w, axis=1) / w
        else:
            dtokens = dhead_in.reshape(b, w, d)

        dh = dtokens
        for i in reversed(range(self.config.transformer_layers)):
            p = f"block{i}"
            c_n1, c_attn, c_n2, c_ffn, c_ffn2 = block_caches[i]
            df = dh
            dr1 = dh.copy()
            if c_ffn2 is not None:
                df, grads[f"{p}/ffn2/kernel"], grads[f"{p}/ffn2/bias"] = (
                    layers.dense_backward_from_preact(c_ffn2, df)
                )
            dn2, grads[f"{p}/ffn/kernel"], grads[f"{p}/ffn/bias"] = (
                layers.dense_backward(c_ffn, df)
            )
            dr1_n, grads[f"{p}/norm2/gain"], grads[f"{p}/norm2/bias"] = (
                layers.layer_norm_backward(c_n2, dn2)
            )
            dr1 += dr1_n
            da = dr1
            dn1_attn, attn_grads = layers.multi_head_attention_backward(c_attn, da)
            for k, g in attn_grads.items():
                grads[f"{p}/attn/{k}"] = g
            dn1 = dr1 + dn1_attn
            dh, grads[f"{p}/norm1/gain"], grads[f"{p}/norm1/bias"] = (
                layers.layer_norm_backward(c_n1, dn1)
            )
        _, grads["input_proj/kernel"], grads["input_proj/bias"] = (
            layers.dense_backward_from_preact(proj_cache, dh)
        )
        return ParameterSet([(name, grads[name]) for name in self.params.names])

    def loss_and_gradients(self, batch, labels):
        """One training step's worth of math: (loss, probs, grads)."""
        probs = self.forward(batch, training=True)
        loss = layers.cross_entropy(probs, labels)
        return loss, probs, self.backward(labels)

    def predict(self, batch) -> np.ndarray:
        """Most probable class per window; ties break to the smallest id."""
        probs = self.forward(self._check_batch(batch))
        return probs.argmax(axis=1)

    def serialize_params(self) -> bytes:
        """Wire encoding of the parameters (float32 values)."""
        return wire.encode_params(self.params)


def build(config: ModelConfig) -> Model:
    """Construct a model with seeded, deterministic initialization."""
    return Model(config)


def param_count(model: Model) -> int:
    return model.param_count()


def deserialize_params(buf: bytes, config: ModelConfig) -> ParameterSet:
    """Decode a parameter payload and validate it against a configuration."""
    params = wire.parse_params_payload(buf)
    expected = init_params(config)
    if params.names != expected.names or params.shapes() != expected.shapes():
        raise ShapeError("decoded parameters do not match the configuration")
    return params
