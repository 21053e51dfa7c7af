"""Multi-task spatiotemporal forecaster: per-task temporal and spatial encoders,
cross-task interaction, and per-task decoders.

Every per-task weight is stored with a leading task axis (size ``n_tasks``),
so one matrix product per task runs a whole branch for the full batch while
the branches keep disjoint parameters. Activations are laid out
``[task, batch, tokens, d]``.

Parameter count (T tasks, d = d_model, m = mlp_hidden, P = patch cells,
C = cnn_channels, k = cnn_kernel, Hr = hours per day)::

    attn  = 4 (d^2 + d)                     ln  = 2 d
    ffn   = 2 d m + m + d                   emb = P d + d + (Hr + 7) d
    enc   = T (attn + 2 ln + ffn)           dec = T (2 attn + 3 ln + ffn)
    spat  = T (C L_in k^2 + C + C d + d + attn + d^2 + d)         if spatial
    inter = attn + ln  (+ attn + ln if spatial)                   if interaction
    mlp   = T (z m + m + m d + d),  z = d (2 d if spatial)
    total = 2 T emb + n_enc enc + n_dec dec + spat + inter + mlp + T (d + 1)

See :func:`analytic_param_count`.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatch
from .params import ParamVector
from .simulator import TASKS


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    cnn_channels: int = 8
    cnn_kernel: int = 3
    mlp_hidden: int = 64
    dropout_rate: float = 0.1
    L_in: int = 24
    L_token: int = 12
    L_out: int = 6
    patch_rows: int = 3
    patch_cols: int = 3
    hours_per_day: int = 24
    use_interaction: bool = True
    use_spatial: bool = True
    tasks: list = field(default_factory=lambda: [0, 1, 2])
    prob_sparse_top_u: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "cnn_channels",
                     "cnn_kernel", "mlp_hidden", "L_in", "L_token", "L_out",
                     "patch_rows", "patch_cols", "hours_per_day"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by n_heads")
        if self.cnn_kernel % 2 != 1:
            raise ConfigError("model.cnn_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must lie in [0, 1)")
        if self.L_token > self.L_in:
            raise ConfigError("model.L_token must not exceed L_in")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks) or \
                any(t not in range(len(TASKS)) for t in self.tasks):
            raise ConfigError(f"model.tasks must be distinct indices into {TASKS}")
        if self.prob_sparse_top_u < 0:
            raise ConfigError("model.prob_sparse_top_u must be >= 0")
        return self

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def patch_cells(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def interaction_active(self) -> bool:
        return self.use_interaction and self.n_tasks > 1


@dataclass
class Batch:
    """Stacked model inputs for a list of window samples (selected tasks only)."""

    x: np.ndarray      # [B, T, L_in, P]
    y: np.ndarray      # [B, T, L_out]
    hour: np.ndarray   # [B, L_in + L_out]
    dow: np.ndarray

    @classmethod
    def from_samples(cls, samples: list, tasks) -> "Batch":
        tasks = list(tasks)
        return cls(x=np.stack([s.x[tasks] for s in samples]),
                   y=np.stack([s.y[tasks] for s in samples]),
                   hour=np.stack([s.hour for s in samples]),
                   dow=np.stack([s.dow for s in samples]))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def x_tasks(self) -> np.ndarray:
        """Inputs with the task axis first: [T, B, L_in, P]."""
        return np.ascontiguousarray(self.x.transpose(1, 0, 2, 3))

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx], self.hour[idx], self.dow[idx])

    def decoder_input(self, L_token: int) -> np.ndarray:
        """Start-token window followed by zero placeholders for the horizon: [T, B, L_token + L_out, P]."""
        B, T, L_in, P = self.x.shape
        L_out = self.y.shape[-1]
        x = self.x_tasks
        return np.concatenate([x[:, :, L_in - L_token:], np.zeros((T, B, L_out, P))], axis=2)


@dataclass
class TaskBundle:
    """Intermediate representations, task axis first."""

    H_enc: Tensor       # [T, B, L_in, d]
    H_s: Tensor | None  # [T, B, 1, d]
    H_tilde: Tensor     # [T, B, 1, d]
    Y: Tensor           # [T, B, L_out]


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d // 2]
    return pe


# ---------------------------------------------------------------- parameters


def _shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    T, d, m, P = cfg.n_tasks, cfg.d_model, cfg.mlp_hidden, cfg.patch_cells
    C, k = cfg.cnn_channels, cfg.cnn_kernel
    s: OrderedDict = OrderedDict()

    def attn(prefix, lead):
        for n in ("q", "k", "v", "o"):
            s[f"{prefix}.w{n}"] = lead + (d, d)
            s[f"{prefix}.b{n}"] = lead + (1, d)

    def ln(prefix, lead):
        s[f"{prefix}.g"] = lead + (1, d)
        s[f"{prefix}.b"] = lead + (1, d)

    def ffn(prefix, lead):
        s[f"{prefix}.w1"] = lead + (d, m)
        s[f"{prefix}.b1"] = lead + (1, m)
        s[f"{prefix}.w2"] = lead + (m, d)
        s[f"{prefix}.b2"] = lead + (1, d)

    for side in ("enc", "dec"):
        s[f"{side}_embed.value_w"] = (T, P, d)
        s[f"{side}_embed.value_b"] = (T, 1, d)
        s[f"{side}_embed.hour"] = (T, cfg.hours_per_day, d)
        s[f"{side}_embed.dow"] = (T, 7, d)
    for layer in range(cfg.n_enc_layers):
        attn(f"enc{layer}.attn", (T,))
        ln(f"enc{layer}.ln1", (T,))
        ffn(f"enc{layer}.ffn", (T,))
        ln(f"enc{layer}.ln2", (T,))
    if cfg.use_spatial:
        s["spatial.conv_w"] = (T, C, cfg.L_in, k, k)
        s["spatial.conv_b"] = (T, C)
        s["spatial.proj_w"] = (T, C, d)
        s["spatial.proj_b"] = (T, 1, d)
        attn("spatial.attn", (T,))
        s["spatial.out_w"] = (T, d, d)
        s["spatial.out_b"] = (T, 1, d)
    if cfg.interaction_active:
        attn("inter.t_attn", ())
        ln("inter.t_ln", ())
        if cfg.use_spatial:
            attn("inter.s_attn", ())
            ln("inter.s_ln", ())
    z = d * (2 if cfg.use_spatial else 1)
    s["inter.mlp.w1"] = (T, z, m)
    s["inter.mlp.b1"] = (T, 1, m)
    s["inter.mlp.w2"] = (T, m, d)
    s["inter.mlp.b2"] = (T, 1, d)
    for layer in range(cfg.n_dec_layers):
        attn(f"dec{layer}.self_attn", (T,))
        ln(f"dec{layer}.ln1", (T,))
        attn(f"dec{layer}.cross_attn", (T,))
        ln(f"dec{layer}.ln2", (T,))
        ffn(f"dec{layer}.ffn", (T,))
        ln(f"dec{layer}.ln3", (T,))
    s["head.w"] = (T, d, 1)
    s["head.b"] = (T, 1, 1)
    return s


def _fan_in(name: str, shape: tuple, shapes: dict) -> int:
    if name.endswith("conv_w"):
        return int(np.prod(shape[-3:]))
    if name.endswith("conv_b"):
        w = shapes[name[:-1] + "w"]
        return int(np.prod(w[-3:]))
    base, leaf = name.rsplit(".", 1)
    if leaf.startswith("w") or leaf.endswith("_w"):
        return shape[-2]
    wname = f"{base}.w{leaf[1:]}" if leaf.startswith("b") else f"{base}.{leaf[:-2]}_w"
    return shapes[wname][-2]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamVector:
    """uniform(+-1/sqrt(fan_in)) for linear/conv maps, N(0, 0.02) for embedding tables,
    ones/zeros for layer-norm gain/bias."""
    cfg.validate()
    shapes = _shapes(cfg)
    arrays = OrderedDict()
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[1]
        if ".ln" in name or name.startswith("inter.t_ln") or name.startswith("inter.s_ln"):
            arrays[name] = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif leaf in ("hour", "dow"):
            arrays[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParamVector.from_arrays(arrays)


def analytic_param_count(cfg: ModelConfig) -> int:
    T, d, m, P = cfg.n_tasks, cfg.d_model, cfg.mlp_hidden, cfg.patch_cells
    C, k = cfg.cnn_channels, cfg.cnn_kernel
    attn, ln, ffn = 4 * (d * d + d), 2 * d, 2 * d * m + m + d
    emb = P * d + d + (cfg.hours_per_day + 7) * d
    total = 2 * T * emb
    total += cfg.n_enc_layers * T * (attn + 2 * ln + ffn)
    total += cfg.n_dec_layers * T * (2 * attn + 3 * ln + ffn)
    if cfg.use_spatial:
        total += T * (C * cfg.L_in * k * k + C + C * d + d + attn + d * d + d)
    if cfg.interaction_active:
        total += (attn + ln) * (2 if cfg.use_spatial else 1)
    z = d * (2 if cfg.use_spatial else 1)
    total += T * (z * m + m + m * d + d)
    total += T * (d + 1)
    return total


# ---------------------------------------------------------------- building blocks


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)


def _split_heads(x: Tensor, h: int) -> Tensor:
    lead, L, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    return ad.reshape(x, lead + (L, h, d // h)).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-3, -2)
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _prob_sparse_select(q: np.ndarray, k: np.ndarray, top_u: int) -> np.ndarray:
    """1.0 for the top-u queries by max-minus-mean score, else 0.0; shape [..., Lq, 1]."""
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    m = scores.max(axis=-1) - scores.mean(axis=-1)
    u = min(top_u, m.shape[-1])
    thresh = -np.sort(-m, axis=-1)[..., u - 1:u]
    return (m >= thresh).astype(np.float64)[..., None]


def multi_head_attention(p: dict, prefix: str, xq: Tensor, xkv: Tensor, n_heads: int,
                         mask=None, top_u: int = 0) -> Tensor:
    q = _split_heads(ad.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _split_heads(ad.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _split_heads(ad.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    o = ad.attention(q, k, v, mask)
    if top_u:
        # lazy queries fall back to the mean value vector
        sel = _prob_sparse_select(q.data, k.data, top_u)
        o = ad.add(ad.mul(o, sel), ad.mul(ad.mean(v, axis=-2, keepdims=True), 1.0 - sel))
    return ad.linear(_merge_heads(o), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ln(p: dict, prefix: str, x: Tensor) -> Tensor:
    g, b = p[f"{prefix}.g"], p[f"{prefix}.b"]
    if g.ndim == 3 and x.ndim == 4:  # per-task [T, 1, d] against [T, B, L, d]
        g = ad.reshape(g, (g.shape[0], 1, 1, g.shape[-1]))
        b = ad.reshape(b, (b.shape[0], 1, 1, b.shape[-1]))
    return ad.layer_norm(x, g, b)


def _ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


# ---------------------------------------------------------------- the network


class MSTNet:
    """Functional model: parameters are passed in, never stored."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()
        L_dec = cfg.L_token + cfg.L_out
        self._pe_enc = positional_encoding(cfg.L_in, cfg.d_model)
        self._pe_dec = positional_encoding(L_dec, cfg.d_model)
        self._causal = ad.causal_mask(L_dec)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return init_params(self.cfg, rng)

    def batch(self, samples: list) -> Batch:
        return Batch.from_samples(samples, self.cfg.tasks)

    # -- stages

    def embed(self, p: dict, side: str, values, hour: np.ndarray, dow: np.ndarray) -> Tensor:
        """R = V + E + P: value projection + hour/day tables + sinusoidal position."""
        cfg = self.cfg
        values = ad.as_tensor(values)
        L = values.shape[-2]
        if values.ndim != 4 or values.shape[0] != cfg.n_tasks or values.shape[-1] != cfg.patch_cells:
            raise ShapeMismatch(f"{side} window shape {values.shape}")
        if hour.shape != (values.shape[1], L) or dow.shape != hour.shape:
            raise ShapeMismatch(f"{side} markers {hour.shape} for window length {L}")
        pe = self._pe_enc if side == "enc" else self._pe_dec
        if pe.shape[0] != L:
            raise ShapeMismatch(f"{side} window length {L} != {pe.shape[0]}")
        v = ad.linear(values, p[f"{side}_embed.value_w"], p[f"{side}_embed.value_b"])
        e = ad.add(ad.getitem(p[f"{side}_embed.hour"], (slice(None), hour)),
                   ad.getitem(p[f"{side}_embed.dow"], (slice(None), dow)))  # [T, B, L, d]
        return ad.add(ad.add(v, e), pe)

    def temporal_encode(self, p: dict, R: Tensor, rng=None) -> Tensor:
        cfg = self.cfg
        x = R
        for layer in range(cfg.n_enc_layers):
            a = multi_head_attention(p, f"enc{layer}.attn", x, x, cfg.n_heads)
            x = _ln(p, f"enc{layer}.ln1", ad.add(x, _dropout(a, cfg.dropout_rate, rng)))
            f = _ffn(p, f"enc{layer}.ffn", x)
            x = _ln(p, f"enc{layer}.ln2", ad.add(x, _dropout(f, cfg.dropout_rate, rng)))
        return x

    def spatial_encode(self, p: dict, x_grid) -> Tensor:
        """Linear(MultiHeadAtt(CNN(X))): X_grid is [T, B, L_in, rows, cols]; returns [T, B, 1, d]."""
        cfg = self.cfg
        feat = ad.relu(ad.conv2d(x_grid, p["spatial.conv_w"], p["spatial.conv_b"]))  # [T,B,cells,C]
        tokens = ad.linear(feat, p["spatial.proj_w"], p["spatial.proj_b"])
        att = multi_head_attention(p, "spatial.attn", tokens, tokens, cfg.n_heads)
        pooled = ad.mean(att, axis=-2, keepdims=True)
        return ad.linear(pooled, p["spatial.out_w"], p["spatial.out_b"])

    def interact(self, p: dict, H_s: Tensor | None, H_enc: Tensor) -> Tensor:
        """Cross-task attention over one token per task, fused into per-task MLPs."""
        cfg = self.cfg
        T, B = H_enc.shape[:2]
        stacks = []
        if cfg.use_spatial:
            stacks.append(("s", ad.reshape(H_s, (T, B, cfg.d_model)).swapaxes(0, 1)))
        stacks.append(("t", ad.mean(H_enc, axis=-2).swapaxes(0, 1)))  # [B, T, d]: one token per task
        fused = []
        for tag, h_cat in stacks:
            if cfg.interaction_active:
                a = multi_head_attention(p, f"inter.{tag}_attn", h_cat, h_cat, cfg.n_heads)
                h_cat = _ln(p, f"inter.{tag}_ln", ad.add(h_cat, a))
            fused.append(h_cat)
        z = ad.concat(fused, axis=-1) if len(fused) > 1 else fused[0]
        z = ad.reshape(z.swapaxes(0, 1), (T, B, 1, z.shape[-1]))
        return _ffn(p, "inter.mlp", z)

    def decode(self, p: dict, R_dec: Tensor, memory: Tensor, rng=None) -> Tensor:
        """Causal self-attention, cross-attention into memory, MLP; returns [T, B, L_out]."""
        cfg = self.cfg
        x = R_dec
        for layer in range(cfg.n_dec_layers):
            a = multi_head_attention(p, f"dec{layer}.self_attn", x, x, cfg.n_heads, mask=self._causal)
            x = _ln(p, f"dec{layer}.ln1", ad.add(x, _dropout(a, cfg.dropout_rate, rng)))
            c = multi_head_attention(p, f"dec{layer}.cross_attn", x, memory, cfg.n_heads,
                                     top_u=cfg.prob_sparse_top_u)
            x = _ln(p, f"dec{layer}.ln2", ad.add(x, _dropout(c, cfg.dropout_rate, rng)))
            f = _ffn(p, f"dec{layer}.ffn", x)
            x = _ln(p, f"dec{layer}.ln3", ad.add(x, _dropout(f, cfg.dropout_rate, rng)))
        y = ad.linear(x, p["head.w"], p["head.b"])
        y = ad.reshape(y, y.shape[:-1])
        return ad.getitem(y, (Ellipsis, slice(cfg.L_token, None)))

    def forward(self, p: dict, batch: Batch, rng=None) -> TaskBundle:
        cfg = self.cfg
        L_in = cfg.L_in
        if batch.x.shape[1:] != (cfg.n_tasks, L_in, cfg.patch_cells):
            raise ShapeMismatch(f"batch x shape {batch.x.shape}")
        x = batch.x_tasks
        R_enc = self.embed(p, "enc", x, batch.hour[:, :L_in], batch.dow[:, :L_in])
        H_enc = self.temporal_encode(p, R_enc, rng)
        H_s = None
        if cfg.use_spatial:
            grid = x.reshape(x.shape[:3] + (cfg.patch_rows, cfg.patch_cols))
            H_s = self.spatial_encode(p, grid)
        H_tilde = self.interact(p, H_s, H_enc)
        dec_hour = batch.hour[:, L_in - cfg.L_token:]
        dec_dow = batch.dow[:, L_in - cfg.L_token:]
        R_dec = self.embed(p, "dec", batch.decoder_input(cfg.L_token), dec_hour, dec_dow)
        memory = ad.add(H_enc, H_tilde)
        Y = self.decode(p, R_dec, memory, rng)
        return TaskBundle(H_enc, H_s, H_tilde, Y)

    def predict(self, params: ParamVector, batch: Batch) -> np.ndarray:
        """Forecasts in batch layout [B, T, L_out]."""
        with ad.no_grad():
            return self.forward(params.tensors(), batch).Y.data.transpose(1, 0, 2)

    @staticmethod
    def task_losses(pred, target) -> Tensor:
        """Per-sample per-task mean squared error over the horizon.

        ``pred`` and ``target`` share a layout ([T, B, L_out] or [B, T, L_out]);
        the result drops the horizon axis.
        """
        err = ad.sub(pred, target)
        return ad.mean(ad.mul(err, err), axis=-1)

    def sample_task_losses(self, p: dict, batch: Batch, rng=None) -> Tensor:
        """[B, T] per-sample per-task losses."""
        Y = self.forward(p, batch, rng).Y
        return self.task_losses(Y, batch.y.transpose(1, 0, 2)).swapaxes(0, 1)
