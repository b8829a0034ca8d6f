"""Data ingestion, fold management, standardization, synthetic generators.

CSV contract: a header row, numeric columns with the target last, and an
optional ``# task=classification`` directive line before the header.
Features are standardized per fold using training-set statistics only;
regression targets likewise.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from .errors import ParseError

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclasses.dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    task: str
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def validate(self):
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.size:
            raise ValueError("X must be (N, D) with matching y")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")
        if self.task == CLASSIFICATION and not np.all(np.isin(self.y, (0.0, 1.0))):
            raise ValueError("classification labels must be in {0, 1}")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")


@dataclasses.dataclass
class Fold:
    """One shuffled train/test split plus train-fitted standardizers."""

    train_idx: np.ndarray
    test_idx: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def standardize_x(self, X):
        return (X - self.x_mean) / self.x_std

    def unstandardize_x(self, Xs):
        return Xs * self.x_std + self.x_mean

    def standardize_y(self, y):
        return (y - self.y_mean) / self.y_std

    def unstandardize_y(self, ys):
        return ys * self.y_std + self.y_mean

    def arrays(self, ds: Dataset):
        """Standardized (X_train, y_train, X_test, y_test)."""
        Xtr = self.standardize_x(ds.X[self.train_idx])
        Xte = self.standardize_x(ds.X[self.test_idx])
        ytr = ds.y[self.train_idx]
        yte = ds.y[self.test_idx]
        if self.y_std != 1.0 or self.y_mean != 0.0:
            ytr = self.standardize_y(ytr)
            yte = self.standardize_y(yte)
        return Xtr, ytr, Xte, yte


def load_csv(path, name=None) -> Dataset:
    """Load a dataset from CSV: header, numeric columns, target last.

    A ``# task=classification`` (or ``# task=regression``) comment line may
    precede the header.  Any row with a non-numeric field is rejected with
    its 1-based line number.
    """
    task = None
    header = None
    rows = []
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            first = record[0].strip()
            if first.startswith("#"):
                directive = first.lstrip("#").strip()
                if directive.startswith("task="):
                    task = directive.split("=", 1)[1].strip()
                continue
            if header is None:
                header = [cell.strip() for cell in record]
                if len(header) < 2:
                    raise ParseError(
                        f"{path}: need at least one feature and a target", line=lineno
                    )
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}: row at line {lineno} has {len(record)} fields, "
                    f"expected {len(header)}",
                    line=lineno,
                )
            try:
                rows.append([float(cell) for cell in record])
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric field in row at line {lineno}", line=lineno
                ) from None
    if header is None or not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    X, y = data[:, :-1], data[:, -1]
    if task is None:
        task = CLASSIFICATION if set(np.unique(y)) <= {0.0, 1.0} else REGRESSION
    ds = Dataset(name=name or str(path), X=X, y=y, task=task)
    ds.validate()
    return ds


def make_folds(ds: Dataset, k=8, seed=0) -> list[Fold]:
    """k independent shuffled 80/20 splits (not a k-fold partition).

    The train size is round(0.8 N); feature and (regression) target
    standardizers are fit on the training rows only.
    """
    if ds.n < 10:
        raise ValueError("need at least 10 rows to split")
    folds = []
    n_train = int(round(0.8 * ds.n))
    for i in range(k):
        rng = np.random.default_rng([seed, i])
        perm = rng.permutation(ds.n)
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        Xtr = ds.X[train_idx]
        x_mean = Xtr.mean(axis=0)
        x_std = Xtr.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_mean, y_std = 0.0, 1.0
        if ds.task == REGRESSION:
            ytr = ds.y[train_idx]
            y_mean = float(ytr.mean())
            y_std = float(ytr.std()) or 1.0
        folds.append(
            Fold(
                train_idx=train_idx,
                test_idx=test_idx,
                x_mean=x_mean,
                x_std=x_std,
                y_mean=y_mean,
                y_std=y_std,
            )
        )
    return folds


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def banana(n_per_class, seed=0) -> Dataset:
    """Two interleaving noisy crescents in 2-D, exactly n_per_class each.

    Stands in for the classic 2-D two-class banana benchmark; the generator
    parameters live in ``meta``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng([seed, 77])
    noise = 0.35
    t0 = rng.uniform(0.0, np.pi, n_per_class)
    c0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    t1 = rng.uniform(0.0, np.pi, n_per_class)
    c1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    X = np.concatenate([c0, c1]) + noise * rng.standard_normal((2 * n_per_class, 2))
    y = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)])
    order = rng.permutation(2 * n_per_class)
    X, y = X[order], y[order]
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    ds = Dataset(
        name="banana",
        X=X,
        y=y,
        task=CLASSIFICATION,
        meta={"generator": "two-crescent mixture", "noise": noise, "seed": seed},
    )
    ds.validate()
    return ds


def toy1d(n, noise_std=0.1, seed=0) -> Dataset:
    """1-D regression draws from a known RBF GP plus Gaussian noise.

    Ground-truth parameters (lengthscale, variance, noise) are recorded in
    ``meta`` so oracle runs can use them directly.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    lengthscale, variance = 0.6, 1.0
    rng = np.random.default_rng([seed, 13])
    x = np.sort(rng.uniform(-3.0, 3.0, n))[:, None]
    d = (x - x.T) / lengthscale
    K = variance * np.exp(-0.5 * d * d) + 1e-10 * np.eye(n)
    f = np.linalg.cholesky(K) @ rng.standard_normal(n)
    y = f + noise_std * rng.standard_normal(n)
    ds = Dataset(
        name="toy1d",
        X=x,
        y=y,
        task=REGRESSION,
        meta={
            "lengthscale": lengthscale,
            "variance": variance,
            "noise_std": noise_std,
            "seed": seed,
        },
    )
    ds.validate()
    return ds


def synthetic_classification(n, dim=8, seed=0) -> Dataset:
    """Large-scale smoke-test generator: logistic-separable classes in D dims."""
    rng = np.random.default_rng([seed, 5])
    X = rng.standard_normal((n, dim))
    w = rng.standard_normal(dim)
    logits = X @ w / np.sqrt(dim) + 0.25 * np.sin(3.0 * X[:, 0])
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)
    ds = Dataset(name=f"synthcls{n}", X=X, y=y, task=CLASSIFICATION,
                 meta={"seed": seed})
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Inducing-input initialization
# ---------------------------------------------------------------------------


def kmeans_centroids(X, m, seed=0, iterations=25):
    """Seeded k-means++ centroids of the rows of X (our own tiny Lloyd loop).

    With m >= N the data points are reused (plus a jittered surplus) since
    k-means cannot produce more distinct centroids than points.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    rng = np.random.default_rng([seed, 99])
    if m >= n:
        extra = X[rng.integers(0, n, m - n)] + 1e-3 * rng.standard_normal(
            (m - n, X.shape[1])
        )
        return np.concatenate([X.copy(), extra]) if m > n else X.copy()
    centers = np.empty((m, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    x_sq = np.sum(X * X, axis=1)
    for _ in range(iterations):
        d = x_sq[:, None] - 2.0 * X @ centers.T + np.sum(centers * centers, axis=1)
        assign = np.argmin(d, axis=1)
        for j in range(m):
            members = X[assign == j]
            if members.size:
                centers[j] = members.mean(axis=0)
    return centers


def random_subset(X, m, seed=0):
    """Seeded random rows of X (alternative inducing initialization)."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng([seed, 98])
    n = X.shape[0]
    if m <= n:
        return X[rng.permutation(n)[:m]].copy()
    extra = X[rng.integers(0, n, m - n)] + 1e-3 * rng.standard_normal((m - n, X.shape[1]))
    return np.concatenate([X.copy(), extra])
