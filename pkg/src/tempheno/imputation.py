"""Missing-value imputation by low-rank completion with per-subject time shifts.

The tensor is unfolded to an N x (P*T) matrix after shifting each subject's
slab by an integer number of hours. We alternate between

1. alternating least squares for ``U`` (N x r) and ``V`` (P*T x r) on the
   observed cells, with the shifts fixed, and
2. an exhaustive per-subject search for the shift that best matches the
   current reconstruction ``U V^T``.

The tracked objective is the masked squared error plus the ridge penalty
``ridge * (|U|^2 + |V|^2)``; every half-step minimizes it over its own block,
so the trace never increases.

Per-subject shift moves cannot leave fixed points where a whole group of
similar subjects sits one hour off together with its low-rank component. After
the main loop we therefore try group moves: subjects are grouped by the
direction of their ``U`` rows, a group is shifted by one hour either way, the
alternation is rerun, and the move is kept only if the objective drops.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tempheno.cohort import CohortTensor
from tempheno.errors import ConfigError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImputationConfig:
    rank: int = 5
    max_shift: int = 12
    tol: float = 1e-5
    max_iters: int = 50
    ridge: float = 1e-6
    als_iters: int = 100
    als_tol: float = 1e-10
    group_moves: bool = True
    max_group_rounds: int = 10
    # outer iterations per trial move; accepted trials continue in the next round
    group_trial_iters: int = 5

    def problems(self) -> list[str]:
        out = []
        if self.rank < 1:
            out.append(f"impute.rank must be >= 1, got {self.rank}")
        if self.max_shift < 0:
            out.append(f"impute.max_shift must be >= 0, got {self.max_shift}")
        if not self.tol > 0:
            out.append(f"impute.tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            out.append(f"impute.max_iters must be >= 1, got {self.max_iters}")
        if self.ridge < 0:
            out.append(f"impute.ridge must be >= 0, got {self.ridge}")
        if self.als_iters < 1:
            out.append(f"impute.als_iters must be >= 1, got {self.als_iters}")
        if self.group_trial_iters < 1:
            out.append(f"impute.group_trial_iters must be >= 1, got {self.group_trial_iters}")
        if self.max_group_rounds < 0:
            out.append(f"impute.max_group_rounds must be >= 0, got {self.max_group_rounds}")
        return out

    def validate(self) -> "ImputationConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


@dataclass
class ImputationResult:
    U: np.ndarray
    V: np.ndarray
    tau: np.ndarray
    objective_trace: list[float]
    n_iters: int
    converged: bool
    group_moves: int = 0
    empty_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    empty_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def save(self, directory: str | Path, config: ImputationConfig | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "N": int(self.U.shape[0]),
            "PT": int(self.V.shape[0]),
            "rank": int(self.U.shape[1]),
            "dtype": "<f8",
            "n_iters": self.n_iters,
            "converged": self.converged,
            "group_moves": self.group_moves,
            "tau": [int(t) for t in self.tau],
            "objective_trace": [float(v) for v in self.objective_trace],
            "empty_rows": [int(i) for i in self.empty_rows],
            "empty_cols": [int(j) for j in self.empty_cols],
        }
        if config is not None:
            meta["config"] = asdict(config)
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        self.U.astype("<f8").tofile(directory / "U.bin")
        self.V.astype("<f8").tofile(directory / "V.bin")

    @classmethod
    def load(cls, directory: str | Path) -> "ImputationResult":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        r = meta["rank"]
        return cls(
            U=np.fromfile(directory / "U.bin", dtype="<f8").reshape(meta["N"], r),
            V=np.fromfile(directory / "V.bin", dtype="<f8").reshape(meta["PT"], r),
            tau=np.asarray(meta["tau"], dtype=np.int64),
            objective_trace=list(meta["objective_trace"]),
            n_iters=meta["n_iters"],
            converged=meta["converged"],
            group_moves=meta.get("group_moves", 0),
            empty_rows=np.asarray(meta["empty_rows"], dtype=np.intp),
            empty_cols=np.asarray(meta["empty_cols"], dtype=np.intp),
        )


def shift_series(values: np.ndarray, mask: np.ndarray, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift each subject's (P, T) slab by ``tau[i]`` hours along time.

    Positive shifts delay the series: ``out[i, :, t] = values[i, :, t - tau[i]]``.
    Vacated cells are zero and unobserved.
    """
    n, _, t = values.shape
    tau = np.asarray(tau, dtype=np.int64)
    if tau.shape != (n,):
        raise ValueError(f"tau must have shape ({n},), got {tau.shape}")
    if np.any(np.abs(tau) >= t):
        raise ValueError(f"shifts must satisfy |tau| < T={t}")
    src = np.arange(t)[None, :] - tau[:, None]  # (n, t)
    valid = (src >= 0) & (src < t)
    src = np.clip(src, 0, t - 1)
    idx = np.broadcast_to(src[:, None, :], values.shape)
    out_v = np.take_along_axis(values, idx, axis=2)
    out_m = np.take_along_axis(mask, idx, axis=2) & valid[:, None, :]
    return np.where(out_m, out_v, 0.0), out_m


def unfold(tensor: CohortTensor, tau: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Shifted tensor as an N x (P*T) matrix (feature-major) and its indicator."""
    n = tensor.n_subjects
    tau = np.zeros(n, dtype=np.int64) if tau is None else np.asarray(tau)
    vals, obs = shift_series(tensor.filled(), tensor.mask, tau)
    return vals.reshape(n, -1), obs.reshape(n, -1)


def masked_sse(D: np.ndarray, A: np.ndarray, U: np.ndarray, V: np.ndarray) -> float:
    resid = np.where(A, D - U @ V.T, 0.0)
    return float(np.sum(resid**2))


def objective(D, A, U, V, ridge: float) -> float:
    return masked_sse(D, A, U, V) + ridge * float(np.sum(U**2) + np.sum(V**2))


def init_factors(D: np.ndarray, A: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncated SVD of the column-mean-filled matrix, singular values split evenly."""
    counts = A.sum(axis=0)
    col_mean = np.divide(np.where(A, D, 0.0).sum(axis=0), counts,
                         out=np.zeros(D.shape[1]), where=counts > 0)
    filled = np.where(A, D, col_mean[None, :])
    left, s, right_t = np.linalg.svd(filled, full_matrices=False)
    root = np.sqrt(s[:rank])
    return left[:, :rank] * root, right_t[:rank].T * root


def _solve_rows(D: np.ndarray, W: np.ndarray, F: np.ndarray, ridge: float) -> np.ndarray:
    """Row-wise ridge least squares: argmin_x sum_j W_ij (D_ij - x . F_j)^2 + ridge |x|^2."""
    r = F.shape[1]
    gram = np.einsum("ij,jr,js->irs", W, F, F, optimize=True)
    gram += ridge * np.eye(r)[None]
    rhs = (W * D) @ F
    # all-masked rows with ridge 0 would be singular; their solution is 0
    empty = ~W.any(axis=1)
    if empty.any():
        gram[empty] = np.eye(r)
        rhs[empty] = 0.0
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def factor_step(
    D: np.ndarray,
    A: np.ndarray,
    U: np.ndarray,
    V: np.ndarray,
    ridge: float = 1e-6,
    max_sweeps: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """ALS sweeps (U given V, then V given U) on the observed cells until the
    penalized objective stalls. Rows/columns without observations get zero factors.
    """
    W = A.astype(np.float64)
    Dz = np.where(A, D, 0.0)
    prev = objective(Dz, A, U, V, ridge)
    for _ in range(max_sweeps):
        U = _solve_rows(Dz, W, V, ridge)
        V = _solve_rows(Dz.T, W.T, U, ridge)
        cur = objective(Dz, A, U, V, ridge)
        if prev - cur <= tol * max(prev, 1e-300):
            break
        prev = cur
    return U, V


def shift_candidates(max_shift: int) -> np.ndarray:
    """Shifts ordered by tie-break preference: 0, -1, +1, -2, +2, ..."""
    out = [0]
    for s in range(1, max_shift + 1):
        out += [-s, s]
    return np.asarray(out, dtype=np.int64)


def shift_costs(tensor: CohortTensor, U: np.ndarray, V: np.ndarray, max_shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Masked squared error of every subject under every candidate shift.

    Returns ``(candidates, costs)`` with ``costs`` of shape (n_candidates, N).
    """
    n, p, t = tensor.shape
    recon = (U @ V.T).reshape(n, p, t)
    values, mask = tensor.filled(0.0), tensor.mask
    cands = shift_candidates(max_shift)
    costs = np.empty((cands.size, n))
    for c, s in enumerate(cands):
        # shifted[t'] = values[t' - s], so values[h] is compared with recon[h + s]
        lo, hi = max(0, -s), min(t, t - s)
        resid = np.where(mask[:, :, lo:hi], values[:, :, lo:hi] - recon[:, :, lo + s:hi + s], 0.0)
        costs[c] = np.einsum("ipt,ipt->i", resid, resid)
    return cands, costs


def shift_step(tensor: CohortTensor, U: np.ndarray, V: np.ndarray, max_shift: int) -> np.ndarray:
    """Per-subject argmin over shifts in [-max_shift, max_shift].

    Exact ties go to the smallest |shift|, then to the negative one.
    """
    cands, costs = shift_costs(tensor, U, V, max_shift)
    return cands[np.argmin(costs, axis=0)]


def _check_finite(it: int, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite factor values at outer iteration {it}")


def reconstruct(U: np.ndarray, V: np.ndarray, tau: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """``U V^T`` folded back to (N, P, T) in each subject's original timeline.

    Hours whose shifted position falls outside the modelled window take the
    nearest modelled hour.
    """
    n, p, t = shape
    recon = (U @ V.T).reshape(n, p, t)
    src = np.clip(np.arange(t)[None, :] + np.asarray(tau)[:, None], 0, t - 1)
    return recon[np.arange(n)[:, None], :, src].transpose(0, 2, 1)


def _row_groups(U: np.ndarray, k: int, iters: int = 20) -> np.ndarray:
    """Deterministic k-means on the unit-normalized rows of ``U`` (farthest-first seeds)."""
    norms = np.linalg.norm(U, axis=1)
    X = U / np.where(norms > 0, norms, 1.0)[:, None]
    seeds = [int(np.argmax(norms))]
    closest = np.sum((X - X[seeds[0]]) ** 2, axis=1)
    for _ in range(1, min(k, X.shape[0])):
        seeds.append(int(np.argmax(closest)))
        closest = np.minimum(closest, np.sum((X - X[seeds[-1]]) ** 2, axis=1))
    C = X[seeds]
    labels = np.zeros(X.shape[0], dtype=np.intp)
    for _ in range(iters):
        labels = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=-1), axis=1)
        C = np.array([X[labels == j].mean(axis=0) if np.any(labels == j) else C[j]
                      for j in range(C.shape[0])])
    return labels


def _alternate(tensor, U, V, tau, config, max_shift, max_iters, first_iter=1):
    """Alternate factor and shift steps from the given state.

    Returns ``(U, V, tau, trace, iterations, converged)``; ``trace`` starts with the
    objective of the incoming state and only contains accepted iterations.
    """
    D, A = unfold(tensor, tau)
    trace = [objective(D, A, U, V, config.ridge)]
    it = first_iter - 1
    for it in range(first_iter, first_iter + max_iters):
        U_new, V_new = factor_step(D, A, U, V, config.ridge, config.als_iters, config.als_tol)
        _check_finite(it, U_new, V_new)
        new_tau = shift_step(tensor, U_new, V_new, max_shift) if max_shift > 0 else tau
        D_new, A_new = unfold(tensor, new_tau)
        obj = objective(D_new, A_new, U_new, V_new, config.ridge)
        prev = trace[-1]
        if obj > prev + 1e-9 * max(1.0, prev):
            logger.warning("outer iteration %d increased the objective; stopping", it)
            return U, V, tau, trace, it, False
        U, V, tau, D, A = U_new, V_new, new_tau, D_new, A_new
        trace.append(obj)
        if prev - obj < config.tol * max(prev, 1e-300):
            return U, V, tau, trace, it - first_iter + 1, True
    return U, V, tau, trace, it - first_iter + 1, False


def impute(tensor: CohortTensor, config: ImputationConfig | None = None) -> tuple[CohortTensor, ImputationResult]:
    """Fill the unobserved cells of ``tensor``.

    Observed cells are copied through unchanged; the returned tensor's mask is all-true.
    """
    config = (config or ImputationConfig()).validate()
    n, p, t = tensor.shape
    rank = min(config.rank, n, p * t)
    if rank != config.rank:
        logger.warning("rank %d clipped to %d", config.rank, rank)
    max_shift = min(config.max_shift, t - 1)

    tau = np.zeros(n, dtype=np.int64)
    D, A = unfold(tensor, tau)
    U, V = init_factors(D, A, rank)
    _check_finite(0, U, V)
    U, V, tau, trace, n_iters, converged = _alternate(tensor, U, V, tau, config, max_shift, config.max_iters)

    moves = 0
    if config.group_moves and max_shift > 0 and rank > 1:
        for _ in range(config.max_group_rounds):
            improved = False
            groups = _row_groups(U, rank)
            for g in range(int(groups.max()) + 1):
                for step in (-1, 1):
                    trial = np.clip(tau + step * (groups == g), -max_shift, max_shift)
                    if np.array_equal(trial, tau):
                        continue
                    U2, V2, tau2, trace2, _, _ = _alternate(tensor, U, V, trial, config, max_shift,
                                                          config.group_trial_iters)
                    if trace2[-1] < trace[-1] * (1 - 1e-9):
                        U, V, tau = U2, V2, tau2
                        trace.append(trace2[-1])
                        moves += 1
                        improved = True
            if not improved:
                break
        if moves:
            logger.info("imputation kept %d group shift moves", moves)
            U, V, tau, polish, _, converged = _alternate(tensor, U, V, tau, config, max_shift,
                                                         config.max_iters)
            trace.extend(polish[1:])

    recon = reconstruct(U, V, tau, (n, p, t))
    values = np.where(tensor.mask, tensor.filled(), recon)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite imputed values after outer iteration {n_iters}")
    out = tensor.with_values(values, np.ones_like(tensor.mask))
    D, A = unfold(tensor, tau)
    result = ImputationResult(
        U=U,
        V=V,
        tau=tau,
        objective_trace=trace,
        n_iters=n_iters,
        converged=converged,
        group_moves=moves,
        empty_rows=np.flatnonzero(~A.any(axis=1)),
        empty_cols=np.flatnonzero(~A.any(axis=0)),
    )
    return out, result
