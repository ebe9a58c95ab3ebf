"""Stochastic-depth training with truncated backpropagation through depth.

Each batch gets a :class:`~looplab.sampling.DepthSchedule`. The forward pass
runs every sequence for its own depth, aligned so all finish at ``T_max``:

* while ``t < T_max - max(k)`` no row needs gradients, so steps run with no
  graph at all and idle rows simply keep their state;
* in the final window, steps are recorded. Rows in their own gradient window
  take the recorded result, other rows take a constant copy of it (or keep
  their state if still idle), so no gradient leaks through their steps.

The loss is the cross-entropy of the coda output at the final state only.
Parameters are updated with decoupled-weight-decay Adam after global-norm
gradient clipping. Learning rate is constant, then decays linearly to zero
over the last ``cooldown_frac`` of the run.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from looplab import autodiff as ad
from looplab import checkpoint as ckpt_io
from looplab.autodiff import Graph, NonFiniteError, Tensor
from looplab.model import LoopedModel, ModelConfig, recurrent_residual, state_norm
from looplab.sampling import DepthDistribution, build_schedule, mu_bwd_rule


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mu_rec: int = 4
    mu_bwd: Optional[int] = None
    depth_dist: str = "poisson-lognormal"
    depth_sigma: float = 0.5
    sampler: str = "corrected"
    sampling_mode: str = "per-sequence"
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-10
    weight_decay: float = 0.0
    steps: int = 2000
    cooldown_frac: float = 0.5
    grad_clip: float = 1.0
    eval_depths: Optional[list] = None
    eval_interval: int = 0
    eval_batches: int = 8
    log_interval: int = 10
    checkpoint_interval: int = 0
    state_norm_limit: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.mu_bwd is None:
            self.mu_bwd = mu_bwd_rule(self.mu_rec)
        if self.eval_depths is None:
            self.eval_depths = [1, self.mu_rec, 2 * self.mu_rec]
        self.eval_depths = list(dict.fromkeys(int(t) for t in self.eval_depths))
        if not 1 <= self.mu_bwd <= self.mu_rec:
            raise ValueError("need 1 <= mu_bwd <= mu_rec")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if not 0.0 <= self.cooldown_frac <= 1.0:
            raise ValueError("cooldown_frac must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    @property
    def distribution(self):
        return DepthDistribution(self.depth_dist, self.depth_sigma)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricRecord:
    step: int
    loss: float
    state_norm: float
    residual: float
    rho: float
    lr: float
    tokens: int
    grad_norm: float
    T_max: int
    eval: dict = field(default_factory=dict)

    def to_json(self):
        d = {k: _finite_or_none(v) for k, v in asdict(self).items() if k != "eval"}
        d["eval"] = {str(k): _finite_or_none(v) for k, v in self.eval.items()}
        return json.dumps(d, sort_keys=True)


def _finite_or_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


# ---------------------------------------------------------------------------
# forward / backward


def forward_with_schedule(model: LoopedModel, tokens, schedule, h0):
    """Run the batch per ``schedule``; returns ``(h_T, h_{T-1})`` as Tensors.

    Must be called inside a :class:`Graph` for the final window to be recorded.
    """
    e = model.prelude_forward(tokens)
    h = Tensor._wrap(np.asarray(h0, dtype=np.float64).reshape(e.shape))
    prev = h
    window = schedule.T_max - schedule.max_k
    for t in range(schedule.T_max):
        active = schedule.active(t)[:, None, None]
        if t < window:
            with ad.no_grad():
                new = model.recurrent_step(h, e)
            nxt = Tensor._wrap(np.where(active, new.data, h.data))
        else:
            new = model.recurrent_step(h, e)
            held = Tensor._wrap(np.where(active, new.data, h.data))
            nxt = ad.where(schedule.grad_rows(t)[:, None, None], new, held)
        prev, h = h, nxt
    return h, prev


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    state_norm: float
    residual: float
    grads: dict


def compute_gradients(model, tokens, targets, schedule, h0):
    with Graph() as g:
        h, prev = forward_with_schedule(model, tokens, schedule, h0)
        loss = ad.cross_entropy(model.coda_forward(h), targets)
    grads = ad.backward(g, loss)
    out = {name: grads.get(p) for name, p in model.params.items()}
    out = {k: (v if v is not None else np.zeros_like(model.params[k].data)) for k, v in out.items()}
    return loss.item(), out, state_norm(h), recurrent_residual(h, prev)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, max_norm):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.95, eps=1e-10, weight_decay=0.0):
    """One decoupled-weight-decay Adam step with bias correction.

    ``params`` maps names to Parameters (rebound, never mutated in place).
    Weight decay applies to matrices only.
    """
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        data = p.data
        if weight_decay and data.ndim >= 2:
            data = data * (1.0 - lr * weight_decay)
        p.data = data - lr * update


def lr_at(step, total, base, cooldown_frac=0.5):
    """Constant ``base``, then linear decay over the last ``cooldown_frac`` of steps."""
    start = total * (1.0 - cooldown_frac)
    if step < start or cooldown_frac == 0:
        return base
    return base * max(total - step, 0) / (total * cooldown_frac)


def train_step(model, opt, tokens, targets, schedule, h0, lr, cfg: TrainConfig):
    loss, grads, hn, res = compute_gradients(model, tokens, targets, schedule, h0)
    grads, norm = clip_gradients(grads, cfg.grad_clip)
    adam_update(model.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return StepResult(loss, norm, hn, res, grads)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, corpus, T, batch_size=16, max_batches=8, seed=0, split="val"):
    """Mean cross-entropy at fixed depth ``T`` over deterministic windows."""
    if T < 1:
        raise ValueError("evaluation depth must be >= 1")
    batches = corpus.eval_batches(batch_size, model.config.seq_len, max_batches, split)
    total, count = 0.0, 0
    with ad.no_grad():
        for b, (x, y) in enumerate(batches):
            h0 = model.init_state(x.shape, np.random.default_rng([seed, 3, b]))
            logits, _ = model.parcae_forward(x, T, h0=h0)
            total += ad.cross_entropy(logits, y).item() * x.size
            count += x.size
    return total / count


def eval_curve(model, corpus, depths, **kw):
    return {int(T): evaluate(model, corpus, int(T), **kw) for T in depths}


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class TrainResult:
    model: LoopedModel
    records: list
    halted: bool = False
    halt_reason: str = ""
    halt_step: int = -1


def model_checkpoint(model, meta):
    return ckpt_io.Checkpoint(model.state_dict(), {"model": model.config.to_dict()}, meta)


def load_model(path):
    c = ckpt_io.load(path)
    model = LoopedModel(ModelConfig.from_dict(c.config["model"]))
    model.load_state_dict(c.arrays)
    return model, c


def run_training(cfg: TrainConfig, corpus, run_dir=None, on_record=None):
    """Train per ``cfg``; metrics go to ``run_dir/metrics.jsonl`` when given.

    On a non-finite forward value or a state norm above ``state_norm_limit``
    the run stops and dumps ``halt.ckpt`` (the parameters that produced it).
    """
    model = LoopedModel(cfg.model, seed=cfg.seed)
    opt = AdamState()
    data_rng = np.random.default_rng([cfg.seed, 1])
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics = open(run_dir / "metrics.jsonl", "w") if run_dir else None
    records = []
    tokens_seen = 0
    seq = cfg.model.seq_len
    ev = dict(batch_size=cfg.batch_size, max_batches=cfg.eval_batches, seed=cfg.seed)

    def emit(rec):
        records.append(rec)
        if metrics:
            metrics.write(rec.to_json() + "\n")
            metrics.flush()
        if on_record:
            on_record(rec)

    def halt(step, reason, rec=None):
        meta = {"step": step, "halted": True, "reason": reason, "rho": _safe_rho(model)}
        if rec is not None:
            emit(rec)
        if run_dir:
            ckpt_io.save(run_dir / "halt.ckpt", model_checkpoint(model, meta))
        return TrainResult(model, records, True, reason, step)

    try:
        for step in range(cfg.steps):
            x, y = corpus.sample_batch(cfg.batch_size, seq, data_rng)
            schedule = build_schedule(
                cfg.batch_size, cfg.mu_rec, cfg.mu_bwd, cfg.distribution, cfg.seed, step,
                cfg.sampling_mode, cfg.sampler,
            )
            h0 = model.init_state(x.shape, np.random.default_rng([cfg.seed, 2, step]))
            lr = lr_at(step, cfg.steps, cfg.lr, cfg.cooldown_frac)
            try:
                loss, grads, hn, res = compute_gradients(model, x, y, schedule, h0)
            except NonFiniteError as exc:
                rec = MetricRecord(step, float("nan"), float("nan"), float("nan"), _safe_rho(model),
                                   lr, tokens_seen, float("nan"), schedule.T_max)
                return halt(step, f"non-finite: {exc}", rec)
            grads, norm = clip_gradients(grads, cfg.grad_clip)
            rho = _safe_rho(model)
            rec = MetricRecord(step, loss, hn, res, rho, lr, tokens_seen, norm, schedule.T_max)
            if not math.isfinite(loss) or not math.isfinite(norm):
                return halt(step, "non-finite loss", rec)
            if hn > cfg.state_norm_limit:
                return halt(step, f"state norm {hn:.3g} above {cfg.state_norm_limit:g}", rec)
            adam_update(model.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            tokens_seen += x.size
            last = step == cfg.steps - 1
            if cfg.eval_interval and ((step + 1) % cfg.eval_interval == 0 or last):
                try:
                    rec.eval = eval_curve(model, corpus, cfg.eval_depths, **ev)
                except NonFiniteError as exc:
                    return halt(step, f"non-finite eval: {exc}", rec)
            if rec.eval or step % cfg.log_interval == 0 or last:
                emit(rec)
            if run_dir and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                ckpt_io.save(run_dir / f"ckpt_{step + 1:06d}.ckpt",
                             model_checkpoint(model, {"step": step + 1, "rho": _safe_rho(model)}))
        if run_dir:
            ckpt_io.save(run_dir / "final.ckpt", model_checkpoint(model, {"step": cfg.steps, "rho": _safe_rho(model)}))
        return TrainResult(model, records)
    finally:
        if metrics:
            metrics.close()


def _safe_rho(model):
    try:
        rho = model.spectral_radius()
    except (np.linalg.LinAlgError, ValueError):
        return float("nan")
    return float(rho)
