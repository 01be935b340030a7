import numpy as np

LOGLOSS_EPS = 1e-7


def logloss(yhat, y) -> float:
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.size == 0:
        raise ValueError("logloss of an empty batch")
    if yhat.shape != y.shape:
        raise ValueError(f"length mismatch: {yhat.shape} vs {y.shape}")
    p = np.clip(yhat, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def logloss_grad(yhat, y) -> np.ndarray:
    """d logloss / d yhat, zero where the clamp is active."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    live = (yhat > LOGLOSS_EPS) & (yhat < 1.0 - LOGLOSS_EPS)
    p = np.clip(yhat, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    return np.where(live, (p - y) / (p * (1.0 - p)), 0.0) / yhat.size


def auc(y, score) -> float:
    """ROC AUC via the rank-sum statistic; tied scores share their average rank."""
    y = np.asarray(y).astype(bool)
    score = np.asarray(score, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(score, kind="mergesort")
    s = score[order]
    # average 1-based rank over each run of equal scores
    bounds = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [s.size]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
