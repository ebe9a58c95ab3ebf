"""Scaling-law fitting.

All nonlinear fits minimize the Huber loss of log-prediction residuals,
``sum huber(log pred - log loss, delta)``, with L-BFGS from many random
starts. Positive coefficients (``E``, ``X``, ``Y``, ``Z``, ``L_inf``) are
optimized through their logarithms; exponents and rates are left free.

Laws
    training      ``E + X N^-x + Y D^-y``          (N: effective parameters)
    exp-decay     ``L_inf + Z exp(-z T)``
    shifted-power ``L_inf + Z (1 + T)^-z``
    power         ``L_inf + Z T^-z``
    power-no-floor ``Z T^-z``
    unified       training law ``+ Z exp(-z T mu_rec^-gamma)``

Random-start ranges for the training and unified laws: ``E ~ U(0.5, 5)``,
exponents and rates ``~ U(0.1, 1.2)``, log-coefficients ``~ U(0, 14)`` and a
learned ``gamma ~ U(0.5, 1.5)``. Test-time curve fits draw starts relative to
the observed losses (see ``_curve_start``).

Every ``FitResult`` stores the total (``objective``) and per-point mean
(``objective_mean``) of the loss it minimized.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from looplab import kernels
from looplab.lbfgs import lbfgs_minimize

HUBER_DELTA = 1e-3
DEFAULT_RESTARTS = 500
FLAT_TOL = 1e-12  # relative spread below which a fitted decay counts as constant
TTC_FORMS = ("exp-decay", "shifted-power", "power", "power-no-floor")
GAMMA_MODES = ("fixed", "learned")


def huber(residual, delta=HUBER_DELTA):
    """Summed Huber loss of ``residual``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    total, _ = kernels.huber(np.asarray(residual, dtype=np.float64), delta)
    return float(total)


def huber_with_grad(residual, delta=HUBER_DELTA):
    r = np.asarray(residual, dtype=np.float64)
    total, grad = kernels.huber(r, delta)
    return float(total), np.asarray(grad).reshape(r.shape)


# --- data -------------------------------------------------------------------


@dataclass
class TrainingRecord:
    mu_rec: float
    D: float
    loss: float
    params: float | None = None  # effective parameter count N(mu_rec)
    flops: float | None = None

    def __post_init__(self):
        if not self.loss > 0:
            raise ValueError("loss must be positive")
        if not self.D >= 1:
            raise ValueError("token count must be >= 1")
        if self.mu_rec < 1:
            raise ValueError("mu_rec must be >= 1")


@dataclass
class TestTimeCurve:
    mu_rec: float
    T: list
    loss: list
    D: float | None = None
    params: float | None = None

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        self.T = [int(t) for t in self.T]
        self.loss = [float(v) for v in self.loss]
        if len(self.T) != len(self.loss):
            raise ValueError("T and loss must have equal length")
        if any(t < 1 for t in self.T) or any(b <= a for a, b in zip(self.T, self.T[1:])):
            raise ValueError("T must be strictly increasing integers >= 1")
        if any(not v > 0 for v in self.loss):
            raise ValueError("losses must be positive")

    def subset(self, keep):
        pairs = [(t, v) for t, v in zip(self.T, self.loss) if keep(t)]
        return TestTimeCurve(self.mu_rec, [p[0] for p in pairs], [p[1] for p in pairs], self.D, self.params)


@dataclass
class FitResult:
    law: str
    coefficients: dict
    objective: float
    objective_mean: float
    n_points: int
    restarts: int = 1
    converged: bool = True
    loss_kind: str = "huber-log"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- laws -------------------------------------------------------------------
#
# Each law maps an unconstrained vector ``theta`` and a feature dict to
# predictions and their Jacobian with respect to ``theta``.


class Law:
    name = ""
    names: tuple = ()

    def predict(self, theta, data):
        raise NotImplementedError

    def coefficients(self, theta):
        raise NotImplementedError

    def theta(self, coefs):
        raise NotImplementedError

    def objective(self, theta, data, delta=HUBER_DELTA):
        with np.errstate(over="ignore", invalid="ignore"):
            pred, jac = self.predict(np.asarray(theta, dtype=np.float64), data)
        if np.any(pred <= 0) or not np.all(np.isfinite(pred)):
            return math.inf, np.full_like(theta, np.nan)
        r = np.log(pred) - np.log(data["loss"])
        f, dr = huber_with_grad(r, delta)
        return f, jac.T @ (dr / pred)


class TrainingLaw(Law):
    name = "training"
    names = ("E", "X", "x", "Y", "y")

    def predict(self, theta, data):
        logE, logX, x, logY, y = theta
        lnN, lnD = np.log(data["N"]), np.log(data["D"])
        a = np.exp(logX - x * lnN)
        b = np.exp(logY - y * lnD)
        E = np.exp(logE)
        jac = np.stack([np.full_like(a, E), a, -a * lnN, b, -b * lnD], axis=1)
        return E + a + b, jac

    def coefficients(self, theta):
        logE, logX, x, logY, y = (float(v) for v in theta)
        return {"E": math.exp(logE), "X": math.exp(logX), "x": x, "Y": math.exp(logY), "y": y}

    def theta(self, c):
        return np.array([math.log(c["E"]), math.log(c["X"]), c["x"], math.log(c["Y"]), c["y"]])

    def start(self, rng, data):
        return np.array([
            math.log(rng.uniform(0.5, 5.0)), rng.uniform(0.0, 14.0), rng.uniform(0.1, 1.2),
            rng.uniform(0.0, 14.0), rng.uniform(0.1, 1.2),
        ])


class CurveLaw(Law):
    """One of the four test-time forms."""

    def __init__(self, form):
        if form not in TTC_FORMS:
            raise ValueError(f"form must be one of {TTC_FORMS}")
        self.name = form
        self.floor = form != "power-no-floor"
        self.names = ("L_inf", "Z", "z") if self.floor else ("Z", "z")

    def _basis(self, T, z):
        # returns (g(T; z), dg/dz)
        if self.name == "exp-decay":
            g = np.exp(-z * T)
            return g, -T * g
        base = np.log1p(T) if self.name == "shifted-power" else np.log(T)
        g = np.exp(-z * base)
        return g, -base * g

    def predict(self, theta, data):
        T = data["T"]
        if self.floor:
            logL, logZ, z = theta
        else:
            logZ, z = theta
        g, dg = self._basis(T, z)
        Z = np.exp(logZ)
        cols = [Z * g, Z * dg]
        pred = Z * g
        if self.floor:
            L = np.exp(logL)
            pred = pred + L
            cols.insert(0, np.full_like(g, L))
        return pred, np.stack(cols, axis=1)

    def coefficients(self, theta):
        vals = [float(v) for v in theta]
        if self.floor:
            return {"L_inf": math.exp(vals[0]), "Z": float(np.exp(vals[1])), "z": vals[2]}
        return {"Z": math.exp(vals[0]), "z": vals[1]}

    def theta(self, c):
        head = [math.log(c["L_inf"])] if self.floor else []
        with np.errstate(divide="ignore"):
            logZ = float(np.log(c["Z"]))  # Z = 0 (a folded decay) maps to -inf
        return np.array(head + [logZ, c["z"]])

    def canonical(self, theta, data):
        """Fold a decay term that is flat over the observed T into the floor."""
        if not self.floor:
            return theta
        logL, logZ, z = theta
        g, _ = self._basis(data["T"], z)
        decay = math.exp(logZ) * g
        L = math.exp(logL)
        if np.ptp(decay) > FLAT_TOL * L:
            return theta
        return np.array([math.log(L + float(decay.mean())), -math.inf, z])

    def start(self, rng, data):
        return _curve_start(self, rng, data["loss"])


def _curve_start(law, rng, loss):
    lo, hi = float(np.min(loss)), float(np.max(loss))
    z = rng.uniform(0.1, 1.2)
    if not law.floor:
        return np.array([math.log(hi) + rng.uniform(-0.5, 0.5), rng.uniform(0.0, 0.5)])
    L = lo * rng.uniform(0.5, 1.0)
    Z = max(hi - L, 1e-6 * hi) * math.exp(rng.uniform(-2.0, 2.0))
    return np.array([math.log(L), math.log(Z), z])


class UnifiedLaw(Law):
    def __init__(self, gamma_mode="fixed"):
        if gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
        self.learn_gamma = gamma_mode == "learned"
        self.name = "unified-gamma-learned" if self.learn_gamma else "unified"
        self.names = TrainingLaw.names + ("Z", "z") + (("gamma",) if self.learn_gamma else ())
        self._train = TrainingLaw()

    def predict(self, theta, data):
        floor, jf = self._train.predict(theta[:5], data)
        logZ, z = theta[5], theta[6]
        gamma = theta[7] if self.learn_gamma else 1.0
        lnmu = np.log(data["mu"])
        rate = data["T"] * np.exp(-gamma * lnmu)
        g = np.exp(logZ - z * rate)
        cols = [jf, g[:, None], (-rate * g)[:, None]]
        if self.learn_gamma:
            cols.append((z * rate * lnmu * g)[:, None])
        return floor + g, np.concatenate(cols, axis=1)

    def coefficients(self, theta):
        c = self._train.coefficients(theta[:5])
        c["Z"], c["z"] = math.exp(float(theta[5])), float(theta[6])
        c["gamma"] = float(theta[7]) if self.learn_gamma else 1.0
        return c

    def theta(self, c):
        tail = [math.log(c["Z"]), c["z"]] + ([c["gamma"]] if self.learn_gamma else [])
        return np.concatenate([self._train.theta(c), tail])

    def start(self, rng, data):
        head = self._train.start(rng, data)
        tail = [rng.uniform(-3.0, 1.0), rng.uniform(0.1, 1.2)]
        if self.learn_gamma:
            tail.append(rng.uniform(0.5, 1.5))
        return np.concatenate([head, tail])


# --- fitting ----------------------------------------------------------------


def restart_starts(law, data, restarts, seed):
    """Deterministic start points; the first ``k`` are shared by any ``restarts >= k``."""
    rng = np.random.default_rng(seed)
    return [law.start(rng, data) for _ in range(restarts)]


def _fit(law, data, restarts, seed, delta=HUBER_DELTA, max_iters=1000):
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    n = len(data["loss"])
    fun = lambda th: law.objective(th, data, delta)  # noqa: E731
    best = None
    for i, x0 in enumerate(restart_starts(law, data, restarts, seed)):
        if not math.isfinite(fun(x0)[0]):
            continue
        res = lbfgs_minimize(fun, x0, max_iters=max_iters, rng=np.random.default_rng([seed, i]))
        # ties keep the lower restart index
        if best is None or res.f < best[0].f:
            best = (res, i)
    if best is None:
        raise RuntimeError("no random start gave a finite objective")
    res, idx = best
    coefs = law.coefficients(law.canonical(res.x, data) if hasattr(law, "canonical") else res.x)
    # re-evaluate from the reported coefficients so the stored objective is reproducible
    obj = law.objective(law.theta(coefs), data, delta)[0]
    return FitResult(
        law=law.name, coefficients=coefs, objective=obj, objective_mean=obj / n, n_points=n,
        restarts=restarts, converged=bool(res.converged),
        extra={"best_restart": idx, "grad_norm": res.grad_norm, "line_search_restarts": res.restarts},
    )


def evaluate_objective(law, coefficients, data, delta=HUBER_DELTA):
    return law.objective(law.theta(coefficients), data, delta)[0]


def training_data(records):
    if any(r.params is None for r in records):
        raise ValueError("every training record needs its effective parameter count")
    return {
        "N": np.array([r.params for r in records], dtype=np.float64),
        "D": np.array([r.D for r in records], dtype=np.float64),
        "mu": np.array([r.mu_rec for r in records], dtype=np.float64),
        "T": np.array([r.mu_rec for r in records], dtype=np.float64),
        "loss": np.array([r.loss for r in records], dtype=np.float64),
    }


def fit_training_law(records, restarts=DEFAULT_RESTARTS, seed=0, delta=HUBER_DELTA):
    records = list(records)
    if len(records) < 6:
        raise ValueError("need at least 6 training records")
    data = training_data(records)
    if len(set(data["mu"])) < 2 or len(set(data["D"])) < 2:
        raise ValueError("records must span at least two values of mu_rec and of D")
    return _fit(TrainingLaw(), data, restarts, seed, delta)


def predict_training(coefs, N, D):
    N, D = np.asarray(N, dtype=np.float64), np.asarray(D, dtype=np.float64)
    return coefs["E"] + coefs["X"] * N ** -coefs["x"] + coefs["Y"] * D ** -coefs["y"]


def curve_data(curve):
    return {"T": np.array(curve.T, dtype=np.float64), "loss": np.array(curve.loss, dtype=np.float64)}


def fit_ttc_curve(curve, form="exp-decay", restarts=64, seed=0, delta=HUBER_DELTA):
    law = CurveLaw(form)
    need = 3 if form == "power-no-floor" else 4
    if len(curve.T) < need:
        raise ValueError(f"{form} needs at least {need} points")
    return _fit(law, curve_data(curve), restarts, seed, delta)


def predict_curve(form, coefs, T):
    law = CurveLaw(form)
    return law.predict(law.theta(coefs), {"T": np.asarray(T, dtype=np.float64)})[0]


def unified_data(curves, records=()):
    rows = []
    for c in curves:
        if c.params is None or c.D is None:
            raise ValueError("unified fits need D and params on every curve")
        rows += [(c.mu_rec, c.params, c.D, t, v) for t, v in zip(c.T, c.loss)]
    for r in records:
        if r.params is None:
            raise ValueError("every training record needs its effective parameter count")
        rows.append((r.mu_rec, r.params, r.D, r.mu_rec, r.loss))
    a = np.array(rows, dtype=np.float64)
    return {"mu": a[:, 0], "N": a[:, 1], "D": a[:, 2], "T": a[:, 3], "loss": a[:, 4]}


def fit_unified(curves, records=(), gamma_mode="fixed", restarts=DEFAULT_RESTARTS, seed=0, delta=HUBER_DELTA):
    curves, records = list(curves), list(records)
    data = unified_data(curves, records)
    if len(set(data["mu"])) < 2:
        raise ValueError("unified fit needs curves from at least two mu_rec values")
    return _fit(UnifiedLaw(gamma_mode), data, restarts, seed, delta)


def predict_unified(coefs, mu_rec, N, D, T):
    floor = predict_training(coefs, N, D)
    return floor + coefs["Z"] * np.exp(-coefs["z"] * np.asarray(T, dtype=np.float64) * np.asarray(mu_rec, dtype=np.float64) ** -coefs["gamma"])


# --- closed-form fits --------------------------------------------------------


def fit_parabola(points, log_x=True):
    """Least-squares quadratic of loss against (log10) x.

    ``extra["x_min"]`` holds the vertex in the original x units and
    ``extra["loss_min"]`` the fitted loss there. A parabola opening downward
    has no minimum and is flagged ``converged=False``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 (x, loss) points")
    x, yv = pts[:, 0], pts[:, 1]
    if log_x:
        if np.any(x <= 0):
            raise ValueError("log-x parabola needs positive x")
        x = np.log10(x)
    if np.unique(x).size < 3:
        raise ValueError("need at least 3 distinct x values")
    V = np.stack([x * x, x, np.ones_like(x)], axis=1)
    (a, b, c), *_ = np.linalg.lstsq(V, yv, rcond=None)
    resid = V @ np.array([a, b, c]) - yv
    sse = float(resid @ resid)
    extra = {"log_x": log_x}
    ok = a > 0
    if ok:
        u = -b / (2 * a)
        extra["x_min"] = float(10**u) if log_x else float(u)
        extra["loss_min"] = float(c - b * b / (4 * a))
    return FitResult("parabola", {"a": float(a), "b": float(b), "c": float(c)}, sse, sse / len(yv), len(yv),
                     converged=bool(ok), loss_kind="squared", extra=extra)


def fit_power_law(x, y, law="power-law"):
    """``y = coef * x^exponent`` by least squares in log-log space."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive values")
    V = np.stack([np.log(x), np.ones_like(x)], axis=1)
    (k, c), *_ = np.linalg.lstsq(V, np.log(y), rcond=None)
    resid = V @ np.array([k, c]) - np.log(y)
    sse = float(resid @ resid)
    return FitResult(law, {"coef": float(math.exp(c)), "exponent": float(k)}, sse, sse / x.size, x.size,
                     loss_kind="squared-log")


def extract_power_laws(budgets, mu_star, d_star):
    """Power laws of the compute-optimal depth and token count against FLOP budget."""
    return (fit_power_law(budgets, mu_star, "mu-star"), fit_power_law(budgets, d_star, "tokens-star"))


def isoflop_minima(records, log_x=True):
    """Parabola vertex in ``mu_rec`` per FLOP budget; returns ``(budget, fit)`` pairs."""
    groups = {}
    for r in records:
        if r.flops is None:
            raise ValueError("isoFLOP analysis needs flops on every record")
        groups.setdefault(r.flops, []).append(r)
    out = []
    for F in sorted(groups):
        rs = groups[F]
        if len(rs) >= 3:
            out.append((F, fit_parabola([(r.mu_rec, r.loss) for r in rs], log_x=log_x)))
    return out


# --- functional form ablation --------------------------------------------------


def functional_form_report(curves, forms=TTC_FORMS, restarts=64, seed=0, delta=HUBER_DELTA):
    """Per-form Huber averaged over curves, in-distribution and extrapolated.

    In-distribution fits every point; extrapolation fits ``T <= mu_rec`` and
    scores the held-out ``T > mu_rec``. Each entry reports the per-curve
    total and per-point mean, both averaged across curves.
    """
    curves = list(curves)
    rows = []
    for form in forms:
        law = CurveLaw(form)
        ind_sum, ind_mean, ex_sum, ex_mean = [], [], [], []
        for c in curves:
            full = fit_ttc_curve(c, form, restarts, seed, delta)
            ind_sum.append(full.objective)
            ind_mean.append(full.objective_mean)
            head, tail = c.subset(lambda t: t <= c.mu_rec), c.subset(lambda t: t > c.mu_rec)
            need = 3 if form == "power-no-floor" else 4
            if len(head.T) >= need and tail.T:
                part = fit_ttc_curve(head, form, restarts, seed, delta)
                obj = evaluate_objective(law, part.coefficients, curve_data(tail), delta)
                ex_sum.append(obj)
                ex_mean.append(obj / len(tail.T))
        rows.append({
            "form": form,
            "curves": len(curves),
            "in_dist_sum": _avg(ind_sum), "in_dist_mean": _avg(ind_mean),
            "extrap_sum": _avg(ex_sum), "extrap_mean": _avg(ex_mean), "extrap_curves": len(ex_sum),
        })
    return rows


def _avg(v):
    return float(np.mean(v)) if v else float("nan")


# --- I/O ------------------------------------------------------------------------


def read_jsonl(path, kind):
    """Load ``TrainingRecord`` (kind ``"records"``) or ``TestTimeCurve`` (``"curves"``) rows.

    Row schemas::

        {"mu_rec": 4, "D": 1e9, "loss": 3.1, "params": 1.2e8, "flops": 1e18}
        {"mu_rec": 4, "T": [1, 2, 3], "loss": [3.5, 3.2, 3.1], "D": 1e9, "params": 1.2e8}

    Blank lines are skipped; any malformed row raises ``ValueError`` naming its line.
    """
    cls = {"records": TrainingRecord, "curves": TestTimeCurve}[kind]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise TypeError("row is not an object")
                out.append(cls(**row))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed {kind[:-1]} row ({exc})") from None
    return out


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r) if hasattr(r, "__dataclass_fields__") else r, sort_keys=True) + "\n")


def params_line(records):
    """Least-squares ``N(mu) = a + b mu`` through the records' effective parameter counts."""
    mu = np.array([r.mu_rec for r in records], dtype=np.float64)
    N = np.array([r.params for r in records], dtype=np.float64)
    if np.unique(mu).size < 2:
        return float(N.mean()), 0.0
    b, a = np.polyfit(mu, N, 1)
    return float(a), float(b)


def write_contour_csv(path, coefs, params_of_mu, mu_values, d_values, flops_of=None):
    """Grid of predicted training loss over ``(mu_rec, D)`` for iso-loss contour plots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mu_rec", "D", "params", "flops", "loss"])
        for mu in mu_values:
            N = params_of_mu(mu)
            for D in d_values:
                F = flops_of(mu, D) if flops_of else ""
                w.writerow([mu, D, N, F, float(predict_training(coefs, N, D))])
