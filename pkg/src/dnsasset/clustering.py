"""Unsupervised host-role classification.

Hosts are points in the four attribute fractions.  K-means seeds a
full-covariance Gaussian mixture fitted by EM; each mixture component is
then named by rules on its mean.  The same machinery splits end-hosts into
NATed / not-NATed addresses.
"""

from __future__ import annotations

import csv
import enum
import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .attributes import FEATURES, AttributeVector
from .config import host_key

DEFAULT_K = 4
CONFIDENCE_FLOOR = 0.85
EM_TOL = 1e-6
EM_MAX_ITER = 200
COV_REG = 1e-6

# Centroid naming thresholds (on qry_frac_out, actv_qry_out_time, frac_ext_srv).
NS_MAX_QRY_FRAC = 0.2
CLIENT_MIN_QRY_FRAC = 0.8
RESOLVER_MIN_ACTIVITY = 0.5
RESOLVER_MIN_SRV_SHARE = 0.01


class DegenerateInput(ValueError):
    pass


class SingularCovariance(ArithmeticError):
    pass


class LabelConflict(UserWarning):
    pass


class Role(str, enum.Enum):
    NAME_SERVER = "NameServer"
    RECURSIVE_RESOLVER = "RecursiveResolver"
    MIXED_SERVER = "MixedServer"
    END_HOST = "EndHost"
    UNKNOWN = "Unknown"


SERVER_ROLES = (Role.NAME_SERVER, Role.RECURSIVE_RESOLVER, Role.MIXED_SERVER)


class Nat(str, enum.Enum):
    NATED = "NATed"
    NOT_NATED = "NotNATed"


# -- k-means ----------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse: float


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator, start: Optional[np.ndarray] = None) -> np.ndarray:
    """D^2-weighted seeding, optionally extending an existing centroid set."""
    if start is None or len(start) == 0:
        centroids = [points[rng.integers(len(points))]]
    else:
        centroids = list(start)
    while len(centroids) < k:
        d2 = _sq_dists(points, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            raise DegenerateInput("fewer distinct points than clusters")
        idx = rng.choice(len(points), p=d2 / total)
        centroids.append(points[idx])
    return np.array(centroids, dtype=float)


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 300) -> KMeansResult:
    centroids = centroids.copy()
    labels = np.full(len(points), -1)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new_labels = d2.argmin(axis=1)
        for j in range(len(centroids)):
            if not np.any(new_labels == j):
                # Re-seed an empty cluster on the worst-served point.
                worst = d2[np.arange(len(points)), new_labels].argmax()
                centroids[j] = points[worst]
                new_labels[worst] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centroids)):
            centroids[j] = points[labels == j].mean(axis=0)
    d2 = _sq_dists(points, centroids)
    labels = d2.argmin(axis=1)
    sse = float(d2[np.arange(len(points)), labels].sum())
    return KMeansResult(centroids, labels, sse)


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts."""
    points = np.asarray(points, dtype=float)
    if k < 1 or len(points) < k:
        raise DegenerateInput(f"need at least k={k} points, got {len(points)}")
    if k > 1 and len(np.unique(points, axis=0)) < k:
        raise DegenerateInput("fewer distinct points than clusters")
    if k == 1:
        return _lloyd(points, points.mean(axis=0, keepdims=True), 1)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(points, _plusplus(points, k, rng), max_iter)
        if best is None or result.sse < best.sse:
            best = result
    return best


@dataclass
class ElbowResult:
    ks: list[int]
    sse: list[float]
    suggested_k: int


def elbow_scan(
    points,
    k_range: Sequence[int] = range(1, 10),
    seed: int = 0,
    drop_fraction: float = 0.10,
    min_drop_per_point: float = 0.01,
) -> ElbowResult:
    """SSE(k) over ``k_range`` and the k after which extra clusters stop paying.

    Each k is refit from the best (k-1)-solution plus one new seed, and also
    from fresh seeds; the better of the two is kept, so the curve cannot
    rise.  The suggestion is the smallest k whose next drop is below
    ``max(drop_fraction * SSE(1), min_drop_per_point * n)``.
    """
    points = np.asarray(points, dtype=float)
    ks = [k for k in k_range if k <= len(points)]
    rng = np.random.default_rng(seed)
    sse: list[float] = []
    prev: Optional[KMeansResult] = None
    for k in ks:
        if prev is None or k == 1:
            current = kmeans(points, k, seed)
        else:
            try:
                nested = _lloyd(points, _plusplus(points, k, rng, prev.centroids))
            except DegenerateInput:
                nested = prev
            try:
                fresh = kmeans(points, k, seed)
            except DegenerateInput:
                fresh = nested
            current = fresh if fresh.sse < nested.sse else nested
            if current.sse > prev.sse:
                current = prev
        sse.append(current.sse)
        prev = current
    floor = max(drop_fraction * sse[0], min_drop_per_point * len(points)) if sse else 0.0
    suggested = ks[-1] if ks else 1
    for i in range(len(ks) - 1):
        if sse[i] - sse[i + 1] < floor:
            suggested = ks[i]
            break
    return ElbowResult(ks, sse, suggested)


# -- Gaussian mixture -------------------------------------------------------


@dataclass
class ClusterModel:
    k: int
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    feature_order: tuple[str, ...] = FEATURES
    seed: int = 0
    iterations: int = 0
    ll_trace: list[float] = field(default_factory=list)
    converged: bool = False
    respread: bool = False

    def log_joint(self, points) -> np.ndarray:
        """log(weight_j * N(x | mean_j, cov_j)) for every point and component."""
        points = np.asarray(points, dtype=float)
        n, d = points.shape
        out = np.empty((n, self.k))
        for j in range(self.k):
            chol = np.linalg.cholesky(self.covariances[j])
            z = np.linalg.solve(chol, (points - self.means[j]).T)
            maha = np.einsum("ij,ij->j", z, z)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, j] = np.log(self.weights[j]) - 0.5 * (d * np.log(2 * np.pi) + logdet + maha)
        return out

    def responsibilities(self, points) -> np.ndarray:
        lj = self.log_joint(points)
        return np.exp(lj - _logsumexp(lj)[:, None])

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(component index, max posterior responsibility) per point."""
        resp = self.responsibilities(points)
        return resp.argmax(axis=1), resp.max(axis=1)

    def log_likelihood(self, points) -> float:
        return float(_logsumexp(self.log_joint(points)).sum())

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "feature_order": list(self.feature_order),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "seed": self.seed,
            "iterations": self.iterations,
            "converged": self.converged,
            "respread": self.respread,
            "ll_trace": list(self.ll_trace),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterModel":
        return cls(
            k=int(data["k"]),
            means=np.asarray(data["means"], dtype=float),
            covariances=np.asarray(data["covariances"], dtype=float),
            weights=np.asarray(data["weights"], dtype=float),
            feature_order=tuple(data.get("feature_order", FEATURES)),
            seed=int(data.get("seed", 0)),
            iterations=int(data.get("iterations", 0)),
            ll_trace=list(data.get("ll_trace", [])),
            converged=bool(data.get("converged", False)),
            respread=bool(data.get("respread", False)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        return cls.from_dict(json.loads(text))


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0] if a.ndim == 2 else m


class _Collapse(Exception):
    def __init__(self, component: int):
        super().__init__(component)
        self.component = component


def _m_step(points: np.ndarray, resp: np.ndarray, reg: float):
    n, d = points.shape
    nk = resp.sum(axis=0)
    owners = np.bincount(resp.argmax(axis=1), minlength=resp.shape[1])
    for j in range(len(nk)):
        if owners[j] < 2:
            raise _Collapse(j)
    weights = nk / n
    means = (resp.T @ points) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = points - means[j]
        covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
        try:
            np.linalg.cholesky(covs[j])
        except np.linalg.LinAlgError:
            raise _Collapse(j) from None
    return weights, means, covs


def _run_em(points, model: ClusterModel, tol: float, max_iter: int, reg: float) -> ClusterModel:
    trace: list[float] = []
    for it in range(max_iter):
        lj = model.log_joint(points)
        norm = _logsumexp(lj)
        ll = float(norm.sum())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            model.converged = True
            break
        trace.append(ll)
        resp = np.exp(lj - norm[:, None])
        model.weights, model.means, model.covariances = _m_step(points, resp, reg)
        model.iterations = it + 1
    model.ll_trace = trace
    return model


def _assert_monotone(trace: Sequence[float]) -> None:
    for a, b in zip(trace, trace[1:]):
        if b < a - 1e-9 * max(1.0, abs(a)):
            raise AssertionError(f"EM log-likelihood decreased: {a} -> {b}")


def fit_em(
    points,
    k: int = DEFAULT_K,
    seed: int = 0,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    reg: float = COV_REG,
) -> ClusterModel:
    """Fit a k-component full-covariance Gaussian mixture, k-means initialised.

    Stops when the log-likelihood gain drops below ``tol`` or after
    ``max_iter`` iterations.  A component that collapses (fewer than two
    points have it as their most responsible component) is re-spread once
    over the worst-fitting point and the fit restarted; a second collapse
    raises SingularCovariance.
    """
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    if n < k:
        raise DegenerateInput(f"need at least k={k} points, got {n}")
    km = kmeans(points, k, seed)
    global_cov = np.cov(points.T).reshape(d, d) + reg * np.eye(d) if n > 1 else reg * np.eye(d)
    means = km.centroids.copy()
    covs = np.empty((k, d, d))
    weights = np.empty(k)
    for j in range(k):
        members = points[km.labels == j]
        weights[j] = len(members) / n
        if len(members) >= 2:
            covs[j] = np.cov(members.T, bias=True).reshape(d, d) + reg * np.eye(d)
        else:
            covs[j] = np.diag(np.diag(global_cov))
    model = ClusterModel(k, means, covs, weights, seed=seed)
    try:
        model = _run_em(points, model, tol, max_iter, reg)
    except _Collapse as exc:
        worst = model.log_joint(points).max(axis=1).argmin()
        model.means[exc.component] = points[worst]
        model.covariances[exc.component] = global_cov
        model.weights = np.full(k, 1.0 / k)
        model.respread = True
        try:
            model = _run_em(points, model, tol, max_iter, reg)
        except _Collapse as again:
            raise SingularCovariance(f"component {again.component} collapsed after re-spread") from None
    _assert_monotone(model.ll_trace)
    return model


# -- naming -----------------------------------------------------------------


def role_of_centroid(mean: Sequence[float]) -> Role:
    q, srv, _client, active = mean[:4]
    if q <= NS_MAX_QRY_FRAC:
        return Role.NAME_SERVER
    if q >= CLIENT_MIN_QRY_FRAC:
        if active >= RESOLVER_MIN_ACTIVITY or srv >= RESOLVER_MIN_SRV_SHARE:
            return Role.RECURSIVE_RESOLVER
        return Role.END_HOST
    return Role.MIXED_SERVER


def component_roles(model: ClusterModel) -> list[Role]:
    return [role_of_centroid(m) for m in model.means]


def label_conflicts(model: ClusterModel, max_mahalanobis: float = 3.0) -> list[tuple[int, int, Role]]:
    """Pairs of same-role components whose means sit inside each other's spread."""
    roles = component_roles(model)
    out = []
    for i in range(model.k):
        for j in range(i + 1, model.k):
            if roles[i] is not roles[j]:
                continue
            diff = model.means[i] - model.means[j]
            for c in (model.covariances[i], model.covariances[j]):
                if float(diff @ np.linalg.solve(c, diff)) ** 0.5 < max_mahalanobis:
                    out.append((i, j, roles[i]))
                    break
    return out


@dataclass(frozen=True)
class RoleAssignment:
    host: str
    day: int
    role: Role
    confidence: float
    cluster: int


def label_roles(
    model: ClusterModel,
    vectors: Sequence[AttributeVector],
    confidence_floor: float = CONFIDENCE_FLOOR,
) -> list[RoleAssignment]:
    """Name every host by its most responsible component's centroid role.

    Hosts whose top responsibility is below ``confidence_floor`` are Unknown.
    Same-role overlapping components raise a LabelConflict warning; labels
    are emitted regardless.
    """
    for i, j, role in label_conflicts(model):
        warnings.warn(LabelConflict(f"components {i} and {j} both look like {role.value}"))
    if not vectors:
        return []
    roles = component_roles(model)
    points = np.array([v.features() for v in vectors])
    idx, conf = model.predict(points)
    out = []
    for vec, j, c in zip(vectors, idx, conf):
        role = roles[j] if c >= confidence_floor else Role.UNKNOWN
        out.append(RoleAssignment(vec.host, vec.day, role, float(c), int(j)))
    return out


@dataclass
class DayClassification:
    day: int
    model: ClusterModel
    roles: list[RoleAssignment]
    elbow: Optional[ElbowResult] = None


def classify_day(
    vectors: Iterable[AttributeVector],
    k: int = DEFAULT_K,
    seed: int = 0,
    confidence_floor: float = CONFIDENCE_FLOOR,
    with_elbow: bool = True,
) -> DayClassification:
    """Fit and label one day's hosts; input order does not matter."""
    vecs = sorted(vectors, key=lambda v: host_key(v.host))
    if not vecs:
        raise DegenerateInput("no hosts to classify")
    day = vecs[0].day
    points = np.array([v.features() for v in vecs])
    model = fit_em(points, k, seed)
    elbow = elbow_scan(points, range(1, min(9, len(points)) + 1), seed) if with_elbow else None
    return DayClassification(day, model, label_roles(model, vecs, confidence_floor), elbow)


# -- ranking ----------------------------------------------------------------


@dataclass(frozen=True)
class RankRow:
    rank: int
    host: str
    role: Role
    share: float
    cumulative: float


def rank_servers(
    vectors: Sequence[AttributeVector], roles: Sequence[RoleAssignment]
) -> tuple[list[RankRow], list[RankRow]]:
    """Resolver ranking by query share and name-server ranking by response
    share; mixed servers appear in both."""
    role_by_host = {r.host: r.role for r in roles}

    def ranking(wanted, share_of) -> list[RankRow]:
        chosen = [v for v in vectors if role_by_host.get(v.host) in wanted]
        chosen.sort(key=lambda v: (-share_of(v), host_key(v.host)))
        rows, cum = [], 0.0
        for i, v in enumerate(chosen, 1):
            cum += share_of(v)
            rows.append(RankRow(i, v.host, role_by_host[v.host], share_of(v), cum))
        return rows

    resolvers = ranking({Role.RECURSIVE_RESOLVER, Role.MIXED_SERVER}, lambda v: v.qry_frac_host)
    servers = ranking({Role.NAME_SERVER, Role.MIXED_SERVER}, lambda v: v.resp_frac_host)
    return resolvers, servers


def write_ranking_csv(path, rows: Iterable[RankRow], header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "host", "role", "share", "cumulative"])
        for r in rows:
            w.writerow([r.rank, r.host, r.role.value, repr(r.share), repr(r.cumulative)])


# -- NAT split --------------------------------------------------------------


@dataclass(frozen=True)
class NatAssignment:
    host: str
    day: int
    nat: Nat
    confidence: float


def cluster_nat(
    endhosts: Sequence[AttributeVector],
    ext_server_counts: Optional[dict[str, int]] = None,
    seed: int = 0,
) -> list[NatAssignment]:
    """Two-component EM over (active-hour fraction, distinct external servers).

    The server count is divided by its maximum so both axes share a [0, 1]
    scale for the k-means seeding; the component with the larger mean
    activity is the NATed one.
    """
    vecs = sorted(endhosts, key=lambda v: host_key(v.host))
    if len(vecs) < 2:
        raise DegenerateInput("need at least two end-hosts")
    counts = np.array(
        [
            (ext_server_counts or {}).get(v.host, v.ext_srv_count)
            for v in vecs
        ],
        dtype=float,
    )
    scale = counts.max() if counts.max() > 0 else 1.0
    points = np.column_stack([[v.actv_qry_out_time for v in vecs], counts / scale])
    model = fit_em(points, 2, seed)
    nated = int(np.argmax(model.means[:, 0]))
    idx, conf = model.predict(points)
    return [
        NatAssignment(v.host, v.day, Nat.NATED if j == nated else Nat.NOT_NATED, float(c))
        for v, j, c in zip(vecs, idx, conf)
    ]


# -- consistency ------------------------------------------------------------


@dataclass
class ConsistencyRow:
    host: str
    counts: dict[Role, int]
    active_days: int
    modal_role: Role
    modal_share: float
    unstable: bool


def consistency_report(
    assignments: Iterable[RoleAssignment], stable_share: float = 0.8
) -> list[ConsistencyRow]:
    """Host x role day-count matrix; hosts whose modal role covers less than
    ``stable_share`` of their active days are flagged unstable."""
    per_host: dict[str, Counter] = defaultdict(Counter)
    for a in assignments:
        per_host[a.host][a.role] += 1
    rows = []
    order = list(Role)
    for host in sorted(per_host, key=host_key):
        counts = per_host[host]
        days = sum(counts.values())
        modal = max(order, key=lambda r: (counts[r], -order.index(r)))
        share = counts[modal] / days
        rows.append(
            ConsistencyRow(host, {r: counts[r] for r in order}, days, modal, share, share < stable_share)
        )
    return rows


def modal_roles(assignments: Iterable[RoleAssignment]) -> dict[str, Role]:
    """Most frequent non-Unknown role per host (Unknown only if nothing else)."""
    per_host: dict[str, Counter] = defaultdict(Counter)
    for a in assignments:
        per_host[a.host][a.role] += 1
    order = list(Role)
    out = {}
    for host, counts in per_host.items():
        known = {r: c for r, c in counts.items() if r is not Role.UNKNOWN}
        pool = known or counts
        out[host] = max(pool, key=lambda r: (pool[r], -order.index(r)))
    return out


def write_roles_csv(path, roles: Iterable[RoleAssignment], header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["host", "day", "role", "confidence", "cluster"])
        for r in roles:
            w.writerow([r.host, r.day, r.role.value, repr(r.confidence), r.cluster])


def read_roles_csv(path) -> list[RoleAssignment]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return [
        RoleAssignment(row["host"], int(row["day"]), Role(row["role"]), float(row["confidence"]), int(row["cluster"]))
        for row in csv.DictReader(lines)
    ]
