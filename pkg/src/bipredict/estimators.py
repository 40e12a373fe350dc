"""scikit-learn compatible wrappers.

``TurnMetricsTransformer`` turns one conversation into its per-turn
metric matrix; ``BaselineDeviationDetector`` learns per-column baseline
statistics from those rows and scores later rows against them. Both
follow the usual estimator conventions (constructor stores
hyperparameters only, ``fit`` returns ``self``, fitted attributes end in
an underscore) so they work with ``clone``, ``get_params`` and
``set_params``.

>>> conv = ([0, 1], [([1, 2], [0, 2])])
>>> TurnMetricsTransformer(columns=("P",)).fit_transform(conv).round(6)
array([[0.305012]])
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .idt import ConversationState, IDTConfig, phase_test
from .infometrics import CSV_COLUMNS, canonical_metric

ALL_COLUMNS = tuple(name for name, _ in CSV_COLUMNS)
_ATTR = dict(CSV_COLUMNS)


def check_tokens(tokens, name="tokens") -> list[int]:
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d sequence of token ids")
    if arr.size == 0:
        return []
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must contain integer token ids, got dtype {arr.dtype}")
    if (arr < 0).any():
        raise ValueError(f"{name} contains negative token ids")
    return arr.tolist()


def check_conversation(X):
    """Normalise a conversation to ``(prompt, [(response, next_prompt), ...])``.

    Accepts a ``(prompt, turns)`` pair, a mapping with ``prompt`` and
    ``turns`` keys, or any object with ``prompt`` and ``turns`` attributes
    (e.g. a generated synthetic conversation).
    """
    if hasattr(X, "prompt") and hasattr(X, "turns"):
        prompt, turns = X.prompt, X.turns
    elif isinstance(X, dict):
        prompt, turns = X["prompt"], X["turns"]
    elif isinstance(X, (tuple, list)) and len(X) == 2:
        prompt, turns = X
    else:
        raise ValueError("expected a conversation as (prompt, turns)")
    clean = []
    for i, turn in enumerate(turns, start=1):
        if len(turn) != 2:
            raise ValueError(f"turn {i} must be a (response, next_prompt) pair")
        clean.append((check_tokens(turn[0], f"turn {i} response"), check_tokens(turn[1], f"turn {i} next prompt")))
    return check_tokens(prompt, "prompt"), clean


def _resolve_columns(columns) -> list[str]:
    out = []
    for c in columns:
        if c in ALL_COLUMNS:
            out.append(c)
        else:
            out.append(canonical_metric(c))
    return out


class TurnMetricsTransformer(TransformerMixin, BaseEstimator):
    """Per-turn information metrics of a single conversation.

    Parameters
    ----------
    columns : sequence of str
        Metric columns to emit, from ``H_S, H_A, H_Sp, H_SA, H_SASp, MI,
        P, Hf, Hb, dH``.
    """

    def __init__(self, columns=ALL_COLUMNS):
        self.columns = columns

    def fit(self, X=None, y=None):
        self.columns_ = _resolve_columns(self.columns)
        return self

    def transform(self, X):
        check_is_fitted(self, "columns_")
        prompt, turns = check_conversation(X)
        state = ConversationState("transform", prompt, IDTConfig(streaming=False))
        rows = []
        for a, sp in turns:
            m = state.process_turn(a, sp)
            rows.append([getattr(m, _ATTR[c]) for c in self.columns_])
        return np.asarray(rows, dtype=float).reshape(len(rows), len(self.columns_))

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "columns_")
        return np.asarray(self.columns_, dtype=object)


class BaselineDeviationDetector(TransformerMixin, BaseEstimator):
    """Baseline model over metric rows, with z-score flagging and a phase test.

    ``fit`` takes the baseline rows (one row per turn, one column per
    metric). ``transform`` returns z-scores, ``predict`` returns 1 where
    any column deviates by at least ``z_threshold`` baseline SDs.
    ``metrics`` names the columns so the phase test can apply per-metric
    expected directions.
    """

    def __init__(self, metrics=("P", "Hf", "Hb", "dH"), z_threshold=3.0, band_k=2.0,
                 alpha=0.05, direction_mode="expected", equal_var=False):
        self.metrics = metrics
        self.z_threshold = z_threshold
        self.band_k = band_k
        self.alpha = alpha
        self.direction_mode = direction_mode
        self.equal_var = equal_var

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        if X.shape[1] != len(self.metrics):
            raise ValueError(f"X has {X.shape[1]} columns but {len(self.metrics)} metrics were named")
        self.metric_names_ = [canonical_metric(m) for m in self.metrics]
        self.baseline_ = X.copy()
        self.mean_ = X.mean(axis=0)
        self.std_ = X.std(axis=0, ddof=1)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._check(X)
        diff = X - self.mean_
        with np.errstate(divide="ignore", invalid="ignore"):
            z = diff / self.std_
        zero = self.std_ == 0
        if zero.any():
            z[:, zero] = np.where(diff[:, zero] == 0, 0.0, np.copysign(np.inf, diff[:, zero]))
        return z

    def decision_function(self, X):
        """Largest absolute z-score per row."""
        return np.abs(self.transform(X)).max(axis=1)

    def predict(self, X):
        return (self.decision_function(X) >= self.z_threshold).astype(int)

    def band(self):
        check_is_fitted(self, "mean_")
        return self.mean_ - self.band_k * self.std_, self.mean_ + self.band_k * self.std_

    def phase_test(self, X_injection) -> dict:
        """Phase comparison of injection rows against the fitted baseline rows.

        Returns ``{metric: MetricDetection}`` plus a ``"union"`` boolean.
        """
        X = self._check(X_injection)
        out = {}
        for j, name in enumerate(self.metric_names_):
            expected = IDTConfig().expected_directions.get(name) if self.direction_mode == "expected" else None
            out[name] = phase_test(self.baseline_[:, j].tolist(), X[:, j].tolist(), self.alpha,
                                   expected, self.equal_var, name)
        out["union"] = any(d.detected for d in out.values())
        return out
