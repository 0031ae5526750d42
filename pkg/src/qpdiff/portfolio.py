"""
End-to-end predict-then-optimize on a mean-variance portfolio layer.

A linear predictor maps per-asset features to expected returns ``mu_hat``;
the layer solves

    maximize    mu_hat' w - (gamma/2) w' Sigma w
    subject to  1' w = 1,  w >= 0

and training minimizes a squared-regret decision loss plus a weighted
prediction loss. A two-stage baseline fits the same predictor by least
squares and plugs it into the same layer.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backward import GradientBundle
from .exceptions import (DegenerateActiveSetWarning, DegenerateSeries, InsufficientHistory,
                         LayerForwardFailed)
from .generators import rng_for
from .layers import LayerTape, qp_layer_backward, qp_layer_forward
from .qp import QpProblem, SolverSettings

TRADING_DAYS = 252


@dataclass(frozen=True)
class MvoSpec:
    Sigma: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-10):
            raise ValueError("Sigma must be a symmetric square matrix")
        if np.linalg.eigvalsh(S).min() < -1e-8:
            raise ValueError("Sigma must be positive semidefinite")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "Sigma", 0.5 * (S + S.T))

    @property
    def d(self):
        return self.Sigma.shape[0]

    def utility(self, w, y):
        """Realized mean-variance utility ``y'w - (gamma/2) w' Sigma w``."""
        return float(y @ w - 0.5 * self.gamma * w @ self.Sigma @ w)


def mvo_problem(mu_hat, spec: MvoSpec) -> QpProblem:
    d = spec.d
    return QpProblem(spec.gamma * spec.Sigma, -np.asarray(mu_hat, dtype=float),
                     np.ones((1, d)), np.ones(1), -np.eye(d), np.zeros(d))


def mvo_forward(mu_hat, spec: MvoSpec, settings: SolverSettings = None):
    """Long-only, fully invested mean-variance weights and the layer tape."""
    settings = settings or SolverSettings.high_accuracy()
    return qp_layer_forward(mvo_problem(mu_hat, spec), settings)


def mvo_backward(tape: LayerTape, dL_dw) -> np.ndarray:
    """``dL/dmu_hat``; the sign flips because the lowered QP has ``q = -mu_hat``."""
    bundle: GradientBundle = qp_layer_backward(tape, dL_dw)
    return -bundle.dq


def regret_prediction_loss(mu_hat, y_realized, spec: MvoSpec, beta=0.1, settings=None):
    """
    Squared regret of the induced decision plus a weighted prediction error.

    Returns
    -------
    loss : float
    grad : ndarray
        ``d loss / d mu_hat``; the regret part passes through the layer.
    parts : dict
        ``regret`` and ``prediction`` terms (``loss = regret + beta * prediction``).
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    y = np.asarray(y_realized, dtype=float)
    if mu_hat.shape != y.shape or mu_hat.size != spec.d:
        raise ValueError("mu_hat and y_realized must both have length d")
    w_hat, tape = mvo_forward(mu_hat, spec, settings)
    w_y, _ = mvo_forward(y, spec, settings)
    gap = spec.utility(w_hat, y) - spec.utility(w_y, y)
    resid = y - mu_hat
    regret, pred = gap ** 2, float(resid @ resid)
    dL_dw = 2.0 * gap * (y - spec.gamma * spec.Sigma @ w_hat)
    grad = mvo_backward(tape, dL_dw) - 2.0 * beta * resid
    return regret + beta * pred, grad, {"regret": regret, "prediction": pred}


def statistical_risk_model(returns_window, k=10) -> np.ndarray:
    """
    PCA risk model: the top ``k`` principal components of the sample
    covariance plus a diagonal of residual variances.
    """
    R = np.asarray(returns_window, dtype=float)
    if R.ndim != 2:
        raise ValueError("returns_window must be a (T, d) matrix")
    T, d = R.shape
    k = min(int(k), d)
    if T < max(k, 2):
        raise InsufficientHistory(f"{T} rows of history for a {k}-factor risk model")
    S = np.cov(R, rowvar=False).reshape(d, d)
    vals, vecs = np.linalg.eigh(S)
    vals, vecs = vals[::-1][:k], vecs[:, ::-1][:, :k]
    common = (vecs * vals) @ vecs.T
    resid = np.clip(np.diag(S - common), 0.0, None)
    Sigma = common + np.diag(resid)
    return 0.5 * (Sigma + Sigma.T)


@dataclass(frozen=True)
class ReturnsPanel:
    """Features ``(T, d, F)`` observed before the realized returns ``(T, d)``."""

    features: np.ndarray
    realized_returns: np.ndarray
    timestamps: np.ndarray = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        Y = np.asarray(self.realized_returns, dtype=float)
        if X.ndim != 3 or Y.shape != X.shape[:2]:
            raise ValueError("features must be (T, d, F) and returns (T, d)")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("panel has missing or non-finite values")
        ts = np.arange(X.shape[0]) if self.timestamps is None else np.asarray(self.timestamps)
        if ts.shape != (X.shape[0],) or np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per row")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "realized_returns", Y)
        object.__setattr__(self, "timestamps", ts)

    @property
    def T(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def n_features(self):
        return self.features.shape[2]


def synthetic_panel(d=20, T=600, snr=0.3, market_snr=0.3, n_features=4, n_factors=3,
                    seed=0) -> ReturnsPanel:
    """
    Planted linear signal plus factor and idiosyncratic noise.

    Each feature is a stock-specific part ``Z`` plus a market-wide part ``M``
    shared by all assets on a day. Returns are::

        y = sqrt(snr) Z beta + sqrt(market_snr) M gamma + noise

    in percent units, with noise of roughly unit variance per asset and
    ``beta``, ``gamma`` independent unit directions. The market term shifts
    every asset by the same amount, which a fully invested portfolio cannot
    exploit; a squared-error fit of one shared coefficient vector still has
    to trade it off against the cross-sectional signal. ``snr = 0`` leaves
    no cross-sectional signal.
    """
    if snr < 0 or market_snr < 0:
        raise ValueError("snr and market_snr must be nonnegative")
    rng = rng_for(seed, 0)
    Z = rng.standard_normal((T, d, n_features))
    M = rng.standard_normal((T, 1, n_features))
    beta = rng.standard_normal(n_features)
    beta /= np.linalg.norm(beta)
    gamma = rng.standard_normal(n_features)
    gamma /= np.linalg.norm(gamma)
    B = 0.5 * rng.standard_normal((d, n_factors))
    idio = rng.uniform(0.5, 1.0, size=d)
    noise = rng.standard_normal((T, n_factors)) @ B.T + rng.standard_normal((T, d)) * idio
    noise /= np.sqrt(np.mean(np.sum(B ** 2, axis=1) + idio ** 2))
    Y = np.sqrt(snr) * (Z @ beta) + np.sqrt(market_snr) * (M @ gamma) + noise
    return ReturnsPanel(Z + M, Y)


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    alpha_reg: float = 1e-4
    epochs: int = 30
    learning_rate: float = 0.05
    rebalance_every: int = 5
    seed: int = 0
    gamma: float = 1.0
    lookback: int = 240
    train_frac: float = 0.5
    n_components: int = 10
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.epochs < 0 or self.rebalance_every < 1 or self.alpha_reg < 0:
            raise ValueError("invalid epochs, rebalance_every or alpha_reg")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")


@dataclass
class LinearPredictor:
    """``mu_hat = X @ weights`` with one coefficient vector shared by all assets."""

    weights: np.ndarray

    def __call__(self, X):
        return np.asarray(X) @ self.weights


@dataclass
class TrainResult:
    predictor: LinearPredictor
    mode: str
    curves: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    skipped: int = 0


@dataclass
class _Day:
    t: int
    X: np.ndarray
    y: np.ndarray
    spec: MvoSpec
    u_best: float


def split_days(panel, cfg):
    """Decision days of the train and test windows, after the risk lookback."""
    start = cfg.lookback
    if panel.T < start + 2 * cfg.rebalance_every:
        raise InsufficientHistory(f"panel of {panel.T} rows is shorter than the windows")
    cut = start + int(round((panel.T - start) * cfg.train_frac))
    train = list(range(start, cut, cfg.rebalance_every))
    test = list(range(cut, panel.T, cfg.rebalance_every))
    return train, test


def prepare_days(panel, days, cfg, settings=None):
    """Risk model, realized returns and best-in-hindsight utility for each day."""
    settings = settings or SolverSettings.high_accuracy()
    out = []
    for t in days:
        Sigma = statistical_risk_model(panel.realized_returns[t - cfg.lookback:t], cfg.n_components)
        spec = MvoSpec(Sigma, cfg.gamma)
        y = panel.realized_returns[t]
        w_y, _ = mvo_forward(y, spec, settings)
        out.append(_Day(t, panel.features[t], y, spec, spec.utility(w_y, y)))
    return out


def training_objective(weights, days, cfg, settings=None, with_grad=True):
    """
    Mean total loss ``regret + beta * prediction + alpha_reg * ||weights||^2``
    over prepared ``days``, its gradient in ``weights`` and the separate terms.
    """
    settings = settings or SolverSettings.high_accuracy()
    grad = np.zeros_like(weights)
    regret = pred = 0.0
    used = 0
    for day in days:
        mu = day.X @ weights
        try:
            w, tape = mvo_forward(mu, day.spec, settings)
        except LayerForwardFailed:
            continue
        gap = day.spec.utility(w, day.y) - day.u_best
        resid = day.y - mu
        regret += gap ** 2
        pred += resid @ resid
        used += 1
        if with_grad:
            dL_dw = 2.0 * gap * (day.y - day.spec.gamma * day.spec.Sigma @ w)
            dmu = mvo_backward(tape, dL_dw) - 2.0 * cfg.beta * resid
            grad += day.X.T @ dmu
    if used == 0:
        raise LayerForwardFailed("every forward solve failed")
    reg = float(weights @ weights)
    regret, pred = regret / used, pred / used
    loss = regret + cfg.beta * pred + cfg.alpha_reg * reg
    grad = grad / used + 2.0 * cfg.alpha_reg * weights
    return loss, grad, {"regret": regret, "prediction": pred, "reg": reg,
                        "skipped": len(days) - used}


def _fit_two_stage(days, cfg):
    X = np.concatenate([day.X for day in days])
    y = np.concatenate([day.y for day in days])
    n, F = X.shape
    # ridge with the same alpha the e2e objective uses, per-sample scaling matched
    lhs = X.T @ X / len(days) + cfg.alpha_reg * np.eye(F)
    rhs = X.T @ y / len(days)
    return np.linalg.solve(lhs, rhs)


def evaluate(predictor, panel: ReturnsPanel, days, cfg: TrainConfig, settings=None, prepared=None):
    """
    Test metrics for ``predictor``. Decisions are made on each rebalance day in
    ``days`` and held until the next one; IC uses every day of the window.
    """
    settings = settings or SolverSettings.high_accuracy()
    prepared = prepared or prepare_days(panel, days, cfg, settings)
    weights, regrets = [], []
    for day in prepared:
        w, _ = mvo_forward(predictor(day.X), day.spec, settings)
        weights.append(w)
        regrets.append((day.spec.utility(w, day.y) - day.u_best) ** 2)
    end = min(prepared[-1].t + cfg.rebalance_every, panel.T)
    window = range(prepared[0].t, end)
    preds = np.array([predictor(panel.features[t]) for t in window])
    reals = panel.realized_returns[prepared[0].t:end]
    daily = []
    ends = [day.t for day in prepared[1:]] + [end]
    for day, w, stop in zip(prepared, weights, ends):
        daily.extend(panel.realized_returns[day.t:stop] @ w)
    return portfolio_metrics(preds, reals, np.array(daily), np.array(regrets))


def portfolio_metrics(predictions, realized, daily_returns, regrets=None) -> dict:
    """
    IC, ICIR, annualized return, Sharpe ratio and mean regret.

    ``predictions`` and ``realized`` are aligned ``(n_days, d)`` arrays;
    ``daily_returns`` is the realized portfolio return series. ICIR is nan
    when the daily IC never varies.

    Raises
    ------
    DegenerateSeries
        On a constant cross-section or a constant portfolio return series.
    """
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    Y = np.atleast_2d(np.asarray(realized, dtype=float))
    r = np.asarray(daily_returns, dtype=float).ravel()
    if P.shape != Y.shape:
        raise ValueError("predictions and realized returns must be aligned")
    Pc = P - P.mean(axis=1, keepdims=True)
    Yc = Y - Y.mean(axis=1, keepdims=True)
    denom = np.sqrt(np.sum(Pc ** 2, axis=1) * np.sum(Yc ** 2, axis=1))
    if np.any(denom == 0):
        raise DegenerateSeries("constant cross-section; correlation undefined")
    ic = np.sum(Pc * Yc, axis=1) / denom
    # a constant IC series (e.g. perfect foresight) leaves ICIR undefined; report nan
    ic_std = ic.std(ddof=1) if ic.size > 1 and np.ptp(ic) > 0 else 0.0
    icir = ic.mean() / ic_std if ic_std > 0 else float("nan")
    if r.size < 2 or np.ptp(r) == 0:
        raise DegenerateSeries("constant portfolio return; Sharpe undefined")
    ann_ret = r.mean() * TRADING_DAYS
    ann_vol = r.std(ddof=1) * np.sqrt(TRADING_DAYS)
    out = {"IC": float(ic.mean()), "ICIR": float(icir),
           "AnnRet": float(ann_ret), "Sharpe": float(ann_ret / ann_vol)}
    out["Regret"] = float(np.mean(regrets)) if regrets is not None else float("nan")
    return out


def train(panel: ReturnsPanel, cfg: TrainConfig = None, mode="e2e", settings=None) -> TrainResult:
    """
    Fit the linear predictor and report test metrics.

    ``mode="e2e"`` runs gradient descent (Adam by default) on the regret plus
    prediction loss from zero weights; ``mode="two-stage"`` solves the ridge
    least-squares problem on the same training days. Per-epoch curves record
    the mean decision (regret) and prediction losses on the training days.
    """
    cfg = cfg or TrainConfig()
    settings = settings or SolverSettings.high_accuracy()
    if mode not in ("e2e", "two-stage"):
        raise ValueError("mode must be 'e2e' or 'two-stage'")
    train_days, test_days = split_days(panel, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateActiveSetWarning)
        train_set = prepare_days(panel, train_days, cfg, settings)
        test_set = prepare_days(panel, test_days, cfg, settings)

        curves = {"epoch": [], "loss": [], "decision_loss": [], "prediction_loss": []}

        def record(epoch, loss, parts):
            curves["epoch"].append(epoch)
            curves["loss"].append(float(loss))
            curves["decision_loss"].append(float(parts["regret"]))
            curves["prediction_loss"].append(float(parts["prediction"]))

        F = panel.n_features
        skipped = 0
        if mode == "two-stage":
            weights = _fit_two_stage(train_set, cfg)
            loss, _, parts = training_objective(weights, train_set, cfg, settings, with_grad=False)
            record(0, loss, parts)
        else:
            weights = np.zeros(F)
            m, v = np.zeros(F), np.zeros(F)
            b1, b2 = 0.9, 0.999
            for epoch in range(cfg.epochs + 1):
                loss, grad, parts = training_objective(weights, train_set, cfg, settings)
                skipped += parts["skipped"]
                if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                    break  # divergence guard: keep the last finite weights
                record(epoch, loss, parts)
                if epoch == cfg.epochs:
                    break
                if cfg.optimizer == "gd":
                    weights = weights - cfg.learning_rate * grad
                else:
                    m = b1 * m + (1 - b1) * grad
                    v = b2 * v + (1 - b2) * grad ** 2
                    step = cfg.learning_rate * (m / (1 - b1 ** (epoch + 1))) \
                        / (np.sqrt(v / (1 - b2 ** (epoch + 1))) + 1e-8)
                    weights = weights - step

        predictor = LinearPredictor(weights)
        metrics = evaluate(predictor, panel, test_days, cfg, settings, prepared=test_set)
    return TrainResult(predictor, mode, curves, metrics, skipped)


def train_e2e(panel: ReturnsPanel, cfg: TrainConfig = None, settings=None) -> TrainResult:
    return train(panel, cfg, "e2e", settings)


def train_two_stage(panel: ReturnsPanel, cfg: TrainConfig = None, settings=None) -> TrainResult:
    return train(panel, cfg, "two-stage", settings)
