"""Effective parameters and training FLOPs of a looped model.

Accounting convention (frozen; every fit and isoFLOP plan uses it):

Parameter groups
    ``N_loop``: one unrolling of the recurrent unit = recurrent blocks plus the
    injection parameters applied each loop (diagonal mode: ``log_A``, ``delta_raw``,
    ``B``; concatenation: ``W``; addition: none).
    ``N_pc``: prelude and coda blocks, the prelude and final norm gains, the
    readout ``C`` (diagonal mode only) and the unembedding (the tied ``V x d``
    matrix counted once as an output layer). The input embedding lookup is
    excluded.

Depth
    Expected values are used: ``mu_rec`` loops per forward pass of which the
    last ``mu_bwd`` receive gradients.
    ``N_hat2 = N_pc + mu_bwd * N_loop`` (forward + backward, 6 FLOPs/param/token)
    ``N_hat1 = (mu_rec - mu_bwd) * N_loop`` (forward only, 2 FLOPs/param/token)

Attention
    Causal score and value products over the ``n (n + 1) / 2`` visible pairs of
    a length-``n`` sequence cost ``2 * (n + 1) * d`` FLOPs per token per layer
    application in the forward pass, and twice that in the backward pass.
    With ``L_grad = L_P + L_C + mu_bwd * L_R`` and
    ``L_free = (mu_rec - mu_bwd) * L_R`` layer applications::

        attention = D * 2 * d * (n + 1) * (3 * L_grad + L_free)

Total
    ``(2 * N_hat1 + 6 * N_hat2) * D + attention``.

Elementwise work (softmax, activations, residual adds, rotary, the diagonal
``A_bar * h`` product, loss) is not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from looplab.model import ModelConfig, block_param_shapes, injection_param_shapes


@dataclass(frozen=True)
class FlopBudget:
    N_hat1: float
    N_hat2: float
    D: float
    attention: float
    total: float

    def to_dict(self):
        return asdict(self)


def _size(shape):
    n = 1
    for s in shape:
        n *= s
    return n


def _block_params(cfg: ModelConfig):
    return sum(_size(s) for s in block_param_shapes(cfg).values())


def loop_params(cfg: ModelConfig):
    inj = injection_param_shapes(cfg)
    per_loop_inj = sum(_size(s) for k, s in inj.items() if k != "inj.C")
    return cfg.n_recurrent * _block_params(cfg) + per_loop_inj


def prelude_coda_params(cfg: ModelConfig):
    d = cfg.d_model
    n = (cfg.n_prelude + cfg.n_coda) * _block_params(cfg)
    n += d * (1 if cfg.prelude_norm else 0) + d  # norm gains
    n += cfg.vocab_size * d  # unembedding
    if cfg.injection == "parcae-diagonal":
        n += d * d  # readout C
    return n


def effective_params(cfg: ModelConfig, mu_rec):
    """``(N_loop, N_pc, N_pc + mu_rec * N_loop)``."""
    if mu_rec < 1:
        raise ValueError("mu_rec must be >= 1")
    n_loop, n_pc = loop_params(cfg), prelude_coda_params(cfg)
    return n_loop, n_pc, n_pc + mu_rec * n_loop


def attention_flops_per_token(cfg: ModelConfig, mu_rec, mu_bwd, seq_len=None):
    n = cfg.seq_len if seq_len is None else seq_len
    grad_layers = cfg.n_prelude + cfg.n_coda + mu_bwd * cfg.n_recurrent
    free_layers = (mu_rec - mu_bwd) * cfg.n_recurrent
    return 2.0 * cfg.d_model * (n + 1) * (3 * grad_layers + free_layers)


def _check_depths(mu_rec, mu_bwd):
    if mu_rec < 1 or mu_bwd < 0 or mu_bwd > mu_rec:
        raise ValueError("need mu_rec >= 1 and 0 <= mu_bwd <= mu_rec")


def flops_per_token(cfg: ModelConfig, mu_rec, mu_bwd, seq_len=None):
    _check_depths(mu_rec, mu_bwd)
    n_loop, n_pc, _ = effective_params(cfg, mu_rec)
    n_hat2 = n_pc + mu_bwd * n_loop
    n_hat1 = (mu_rec - mu_bwd) * n_loop
    return 2 * n_hat1 + 6 * n_hat2 + attention_flops_per_token(cfg, mu_rec, mu_bwd, seq_len)


def training_flops(cfg: ModelConfig, mu_rec, mu_bwd, D, seq_len=None) -> FlopBudget:
    _check_depths(mu_rec, mu_bwd)
    if D < 0:
        raise ValueError("token count must be nonnegative")
    n_loop, n_pc, _ = effective_params(cfg, mu_rec)
    n_hat2 = float(n_pc + mu_bwd * n_loop)
    n_hat1 = float((mu_rec - mu_bwd) * n_loop)
    attn = attention_flops_per_token(cfg, mu_rec, mu_bwd, seq_len) * D
    total = (2 * n_hat1 + 6 * n_hat2) * D + attn
    return FlopBudget(n_hat1, n_hat2, float(D), float(attn), float(total))


def tokens_for_budget(cfg: ModelConfig, mu_rec, mu_bwd, budget, seq_len=None):
    """Token count ``D`` at which ``training_flops`` equals ``budget`` (cost is linear in D)."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    return budget / flops_per_token(cfg, mu_rec, mu_bwd, seq_len)
