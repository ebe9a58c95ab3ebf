"""Middle-looped transformer: prelude, shared recurrent unit, coda.

Tokens are embedded and run through the prelude stack to give ``e``. A state
``h`` drawn from ``N(0, sigma0^2)`` is then updated ``T`` times by the
recurrent unit, which first mixes ``h`` and ``e`` through the configured
injection and then applies the recurrent blocks. The coda reads the final
state (through ``C`` in diagonal mode) and produces logits with the tied
embedding matrix.

Injection modes, with ``u`` the input to the recurrent blocks:

* ``addition``: ``u = h + e``
* ``concatenation``: ``u = W [h; e]`` with ``W`` of shape (d, 2d)
* ``parcae-diagonal``: ``u = A_bar * h + B_bar e`` from the discretized
  diagonal system in :mod:`looplab.dynamics`

Blocks are pre-norm residual (``x + attn(norm(x))`` then ``x + mlp(norm(x))``)
with zero-initialized output projections, so a fresh model is exactly the
linear recurrence ``h' = u``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from looplab import autodiff as ad
from looplab import dynamics
from looplab.autodiff import Parameter, Tensor

VOCAB_SIZE = 259
INJECTION_MODES = dynamics.INJECTION_MODES


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 2
    n_prelude: int = 1
    n_recurrent: int = 1
    n_coda: int = 1
    seq_len: int = 64
    mlp_ratio: int = 4
    injection: str = "parcae-diagonal"
    prelude_norm: bool = True
    qk_norm: bool = False
    rope_theta: float = 50000.0
    norm_eps: float = 1e-6
    sigma0: Optional[float] = None
    init_std: Optional[float] = None

    def __post_init__(self):
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"injection must be one of {INJECTION_MODES}, got {self.injection!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embedding")
        for name in ("n_prelude", "n_recurrent", "n_coda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_recurrent < 1:
            raise ValueError("the recurrent unit needs at least one block")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def state_scale(self):
        return math.sqrt(2.0 / (5.0 * self.d_model)) if self.sigma0 is None else self.sigma0

    @property
    def weight_std(self):
        return math.sqrt(2.0 / (5.0 * self.d_model)) if self.init_std is None else self.init_std

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def block_param_shapes(cfg: ModelConfig):
    d, hidden = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    return {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "mlp_norm": (d,),
        "w_in": (d, hidden),
        "w_out": (hidden, d),
    }


def injection_param_shapes(cfg: ModelConfig):
    d = cfg.d_model
    if cfg.injection == "parcae-diagonal":
        return {"inj.log_A": (d,), "inj.delta_raw": (d,), "inj.B": (d, d), "inj.C": (d, d)}
    if cfg.injection == "concatenation":
        return {"inj.W": (d, 2 * d)}
    return {}


def param_shapes(cfg: ModelConfig):
    """Ordered mapping of every parameter name to its shape."""
    shapes = {"wte": (cfg.vocab_size, cfg.d_model)}
    for stack, count in (("prelude", cfg.n_prelude), ("recurrent", cfg.n_recurrent), ("coda", cfg.n_coda)):
        for i in range(count):
            for k, s in block_param_shapes(cfg).items():
                shapes[f"{stack}.{i}.{k}"] = s
    if cfg.prelude_norm:
        shapes["prelude_norm"] = (cfg.d_model,)
    shapes.update(injection_param_shapes(cfg))
    shapes["final_norm"] = (cfg.d_model,)
    return shapes


def init_state(n, d_h, sigma0, rng):
    """Initial recurrent state with i.i.d. ``N(0, sigma0^2)`` entries.

    ``n`` may be an int or a shape tuple for the leading axes.
    """
    if sigma0 < 0:
        raise ValueError("sigma0 must be nonnegative")
    lead = (n,) if np.isscalar(n) else tuple(n)
    if sigma0 == 0:
        return np.zeros(lead + (d_h,))
    return np.random.default_rng(rng).normal(0.0, sigma0, lead + (d_h,))


def state_norm(h):
    """Mean per-token l2 norm of a state (plain l2 norm for a single vector)."""
    return dynamics.state_norm(h.data if isinstance(h, Tensor) else h)


def recurrent_residual(h_T, h_prev):
    a = h_T.data if isinstance(h_T, Tensor) else np.asarray(h_T, dtype=np.float64)
    b = h_prev.data if isinstance(h_prev, Tensor) else np.asarray(h_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("state shapes differ")
    return dynamics.state_norm(a - b)


@dataclass
class LoopState:
    h: Tensor
    t: int = 0
    norms: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


class LoopedModel:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        std = config.weight_std
        self.params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                arr = np.ones(shape)
            elif leaf in ("wo", "w_out"):
                arr = np.zeros(shape)
            elif name.startswith("inj."):
                continue
            else:
                arr = rng.normal(0.0, std, shape)
            self.params[name] = Parameter(arr, name=name)
        if config.injection == "parcae-diagonal":
            inj = dynamics.InjectionParams.init(config.d_model, rng=rng, std=std)
            for key, arr in (("log_A", inj.log_A), ("delta_raw", inj.delta_raw), ("B", inj.B), ("C", inj.C)):
                self.params[f"inj.{key}"] = Parameter(arr, name=f"inj.{key}")
        elif config.injection == "concatenation":
            self.params["inj.W"] = Parameter(rng.normal(0.0, std, (config.d_model, 2 * config.d_model)), name="inj.W")
        # keep the canonical order
        order = list(param_shapes(config))
        self.params = {k: self.params[k] for k in order}

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays):
        expected = param_shapes(self.config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, shape in expected.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"{k}: expected shape {shape}, got {arr.shape}")
            self.params[k].data = arr.copy()

    def __getitem__(self, name):
        return self.params[name]

    # -- blocks -------------------------------------------------------------

    def _block(self, prefix, x):
        cfg = self.config
        p = self.params
        B, n, d = x.shape
        H, dh = cfg.n_heads, cfg.d_head

        hn = ad.rms_norm(x, p[f"{prefix}.attn_norm"], cfg.norm_eps)

        def heads(w):
            return ad.transpose(ad.reshape(ad.matmul(hn, w), (B, n, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(p[f"{prefix}.wq"]), heads(p[f"{prefix}.wk"]), heads(p[f"{prefix}.wv"])
        if cfg.qk_norm:
            q, k = ad.rms_norm(q, eps=cfg.norm_eps), ad.rms_norm(k, eps=cfg.norm_eps)
        a = ad.causal_attention(q, k, v, rope_theta=cfg.rope_theta)
        a = ad.reshape(ad.transpose(a, (0, 2, 1, 3)), (B, n, d))
        x = x + ad.matmul(a, p[f"{prefix}.wo"])

        m = ad.rms_norm(x, p[f"{prefix}.mlp_norm"], cfg.norm_eps)
        m = ad.relu_squared(ad.matmul(m, p[f"{prefix}.w_in"]))
        return x + ad.matmul(m, p[f"{prefix}.w_out"])

    def _stack(self, name, count, x):
        for i in range(count):
            x = self._block(f"{name}.{i}", x)
        return x

    # -- the three units ------------------------------------------------------

    def prelude_forward(self, tokens):
        """Embed ``tokens`` (batch, n) and run the prelude; returns ``e``."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must have shape (batch, seq)")
        x = ad.embedding(self.params["wte"], tokens)
        x = self._stack("prelude", self.config.n_prelude, x)
        if self.config.prelude_norm:
            x = ad.rms_norm(x, self.params["prelude_norm"], self.config.norm_eps)
        return x

    def discretized_tensors(self):
        """Differentiable ``(A_bar, B_bar)`` for the diagonal injection."""
        p = self.params
        delta = ad.softplus(p["inj.delta_raw"])
        rate = ad.clip(delta * ad.exp(p["inj.log_A"]), dynamics.DECAY_MIN, dynamics.DECAY_MAX)
        A_bar = ad.exp(rate * -1.0)
        B_bar = ad.reshape(delta, (-1, 1)) * p["inj.B"]
        return A_bar, B_bar

    def inject(self, h, e):
        mode = self.config.injection
        if mode == "addition":
            return h + e
        if mode == "concatenation":
            return ad.matmul(ad.concat([h, e], axis=-1), ad.transpose(self.params["inj.W"]))
        A_bar, B_bar = self.discretized_tensors()
        return A_bar * h + ad.matmul(e, ad.transpose(B_bar))

    def recurrent_step(self, h, e):
        """One loop: ``h' = R(inject(h, e))`` with the blocks seeing only the injected state."""
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.shape != e.shape:
            raise ValueError(f"state shape {h.shape} does not match injection input {e.shape}")
        return self._stack("recurrent", self.config.n_recurrent, self.inject(h, e))

    def coda_forward(self, h):
        """Read the state out and produce logits (batch, n, vocab)."""
        if self.config.injection == "parcae-diagonal":
            h = ad.matmul(h, ad.transpose(self.params["inj.C"]))
        x = self._stack("coda", self.config.n_coda, h)
        x = ad.rms_norm(x, self.params["final_norm"], self.config.norm_eps)
        return ad.matmul(x, ad.transpose(self.params["wte"]))

    def init_state(self, shape, rng):
        return init_state(shape, self.config.d_model, self.config.state_scale, rng)

    def parcae_forward(self, tokens, T, rng=None, h0=None):
        """Full forward at fixed depth ``T``; returns ``(logits, LoopState)``.

        Runs on whichever graph is active, so wrapping the call in a
        :class:`~looplab.autodiff.Graph` gives full backpropagation through depth.
        """
        if T < 0:
            raise ValueError("depth T must be nonnegative")
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        e = self.prelude_forward(tokens)
        if h0 is None:
            h0 = self.init_state(e.shape[:-1], rng)
        h = Tensor(np.asarray(h0, dtype=np.float64).reshape(e.shape))
        state = LoopState(h, 0, [state_norm(h)], [])
        for _ in range(T):
            h_new = self.recurrent_step(state.h, e)
            state.residuals.append(recurrent_residual(h_new, state.h))
            state.h = h_new
            state.t += 1
            state.norms.append(state_norm(h_new))
        logits = self.coda_forward(state.h)
        if squeeze:
            logits = ad.reshape(logits, logits.shape[1:])
        return logits, state

    # -- diagnostics --------------------------------------------------------

    def transition_matrix(self):
        """Dense linearized ``A_bar`` of the injection (see ``dynamics.recast_injection``)."""
        mode = self.config.injection
        if mode == "addition":
            return dynamics.recast_injection(mode, self.config.d_model)[0]
        if mode == "concatenation":
            return dynamics.recast_injection(mode, self.params["inj.W"].data)[0]
        return dynamics.recast_injection(mode, self.injection_params())[0]

    def injection_params(self):
        if self.config.injection != "parcae-diagonal":
            raise ValueError("only parcae-diagonal models carry InjectionParams")
        p = self.params
        return dynamics.InjectionParams(p["inj.log_A"].data, p["inj.delta_raw"].data, p["inj.B"].data, p["inj.C"].data)

    def spectral_radius(self):
        if self.config.injection == "parcae-diagonal":
            return dynamics.spectral_radius(dynamics.discretize(self.injection_params()).A_bar)
        return dynamics.spectral_radius(self.transition_matrix())

    def zero_block_outputs(self):
        """Zero every block's output projections, leaving only the linear recurrence."""
        for name, p in self.params.items():
            if name.endswith((".wo", ".w_out")):
                p.data = np.zeros_like(p.data)
