"""Model data: coefficients, initial laws, scenarios, and the stacked block matrices.

The stacked consistency-condition system over the state
``(X0bar, Xbar, xbar, K)`` and adjoint ``(Y0, Ybar, ybar, p)`` reads

    dX = (A X + Abar E[X] + B Y + E Z) dt + (C X + Cbar E[X] + D Y + F Z) o dW
    dY = -(A' Y + A0' E[Y] + C' Z + C0' E[Z] + Q X + Qbar E[X]) dt + Z o dW

with ``W = (W0, W, Wt, Wt)``.  Every block below is read off the componentwise
forward-backward system rather than transcribed from printed displays.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BreakdownError, ConfigError

SQUARE_FIELDS = (
    "A0", "A", "A_tilde", "C0", "C", "C_tilde",
    "E0_1", "E0_2", "E1", "E2", "F0_1", "F0_2", "F1", "F2",
)
SYMMETRIC_FIELDS = ("Q0", "Q", "Q_tilde", "H0w", "Hw", "H_tilde_w")
CONTROL_FIELDS = {"B0": "m1", "D0": "m1", "B": "m2", "D": "m2", "B_tilde": "m3", "D_tilde": "m3"}
WEIGHT_FIELDS = {"R0": "m1", "R": "m2", "R_tilde": "m3"}
LAMBDA_FIELDS = ("lambda0", "lambda", "lambda_tilde1", "lambda_tilde2", "lambda_tilde3")
MATRIX_FIELDS = SQUARE_FIELDS + SYMMETRIC_FIELDS + tuple(CONTROL_FIELDS) + tuple(WEIGHT_FIELDS)

RCOND_WEIGHT = 1e-12
SYMMETRY_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    arr.setflags(write=False)
    return arr


def rcond(M: np.ndarray) -> float:
    """Reciprocal 1-norm condition number; 0 for singular input."""
    M = np.atleast_2d(M)
    if not np.all(np.isfinite(M)):
        return 0.0
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return 0.0
    denom = np.linalg.norm(M, 1) * np.linalg.norm(inv, 1)
    return 0.0 if denom == 0 or not np.isfinite(denom) else 1.0 / denom


@dataclass(frozen=True)
class Dimensions:
    n: int
    m1: int
    m2: int
    m3: int


@dataclass(frozen=True)
class ModelParams:
    """Constant coefficients of the three state equations and cost functionals.

    Matrix attributes share their JSON key; the minor-leader weight
    ``lambda`` is stored as ``lambda_``.
    """

    A0: np.ndarray
    A: np.ndarray
    A_tilde: np.ndarray
    C0: np.ndarray
    C: np.ndarray
    C_tilde: np.ndarray
    E0_1: np.ndarray
    E0_2: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    F0_1: np.ndarray
    F0_2: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    B0: np.ndarray
    D0: np.ndarray
    B: np.ndarray
    D: np.ndarray
    B_tilde: np.ndarray
    D_tilde: np.ndarray
    Q0: np.ndarray
    Q: np.ndarray
    Q_tilde: np.ndarray
    H0w: np.ndarray
    Hw: np.ndarray
    H_tilde_w: np.ndarray
    R0: np.ndarray
    R: np.ndarray
    R_tilde: np.ndarray
    lambda0: float
    lambda_: float
    lambda_tilde1: float
    lambda_tilde2: float
    lambda_tilde3: float
    T: float

    def __post_init__(self):
        for name in MATRIX_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("lambda0", "lambda_", "lambda_tilde1", "lambda_tilde2", "lambda_tilde3", "T"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.A0.shape[0], self.B0.shape[1], self.B.shape[1], self.B_tilde.shape[1])

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    @classmethod
    def zeros(cls, n=1, m1=1, m2=1, m3=1, T=1.0) -> "ModelParams":
        """All coefficients zero except identity control weights."""
        kw = {name: np.zeros((n, n)) for name in SQUARE_FIELDS + SYMMETRIC_FIELDS}
        sizes = {"m1": m1, "m2": m2, "m3": m3}
        kw.update({name: np.zeros((n, sizes[m])) for name, m in CONTROL_FIELDS.items()})
        kw.update({name: np.eye(sizes[m]) for name, m in WEIGHT_FIELDS.items()})
        kw.update(lambda0=0.0, lambda_=0.0, lambda_tilde1=0.0, lambda_tilde2=0.0,
                  lambda_tilde3=0.0, T=T)
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).tolist() for name in MATRIX_FIELDS}
        out.update({
            "lambda0": self.lambda0, "lambda": self.lambda_,
            "lambda_tilde1": self.lambda_tilde1, "lambda_tilde2": self.lambda_tilde2,
            "lambda_tilde3": self.lambda_tilde3, "T": self.T,
        })
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        expected = set(MATRIX_FIELDS) | set(LAMBDA_FIELDS) | {"T"}
        missing = expected - set(d)
        unknown = set(d) - expected
        if missing or unknown:
            raise ConfigError(f"params: missing {sorted(missing)}, unknown {sorted(unknown)}")
        kw = {}
        for name in MATRIX_FIELDS:
            try:
                arr = np.array(d[name], dtype=float)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"params.{name}: not a numeric matrix ({exc})") from None
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            if arr.ndim != 2:
                raise ConfigError(f"params.{name}: expected a 2-d nested array")
            kw[name] = arr
        try:
            kw.update(lambda0=float(d["lambda0"]), lambda_=float(d["lambda"]),
                      lambda_tilde1=float(d["lambda_tilde1"]),
                      lambda_tilde2=float(d["lambda_tilde2"]),
                      lambda_tilde3=float(d["lambda_tilde3"]), T=float(d["T"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"params: scalar field not numeric ({exc})") from None
        return cls(**kw)


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian laws of xi0, xi_i and zeta_j; minor and follower means are zero."""

    mean_xi0: np.ndarray
    cov_xi0: np.ndarray
    cov_xi: np.ndarray
    cov_zeta: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean_xi0, dtype=float).reshape(-1)
        mean.setflags(write=False)
        object.__setattr__(self, "mean_xi0", mean)
        for name in ("cov_xi0", "cov_xi", "cov_zeta"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @classmethod
    def standard(cls, n, mean_xi0=None, var=1.0) -> "InitialLaw":
        mean = np.zeros(n) if mean_xi0 is None else mean_xi0
        return cls(mean, var * np.eye(n), var * np.eye(n), var * np.eye(n))

    def to_dict(self) -> dict:
        return {"mean_xi0": self.mean_xi0.tolist(), "cov_xi0": self.cov_xi0.tolist(),
                "cov_xi": self.cov_xi.tolist(), "cov_zeta": self.cov_zeta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        try:
            return cls(d["mean_xi0"], d["cov_xi0"], d["cov_xi"], d["cov_zeta"])
        except KeyError as exc:
            raise ConfigError(f"initial: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"initial: {exc}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    params: ModelParams
    initial: InitialLaw
    grid_steps: int = 200
    mc_paths: int = 1000
    populations: tuple = ((10, 10), (100, 100), (1000, 1000))
    seed: int = 0

    def __post_init__(self):
        pops = tuple((int(a), int(b)) for a, b in self.populations)
        object.__setattr__(self, "populations", pops)
        object.__setattr__(self, "grid_steps", int(self.grid_steps))
        object.__setattr__(self, "mc_paths", int(self.mc_paths))
        object.__setattr__(self, "seed", int(self.seed))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "initial": self.initial.to_dict(),
                "grid_steps": self.grid_steps, "mc_paths": self.mc_paths,
                "populations": [list(p) for p in self.populations], "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict) or "params" not in d or "initial" not in d:
            raise ConfigError("scenario must be an object with 'params' and 'initial'")
        try:
            return cls(params=ModelParams.from_dict(d["params"]),
                       initial=InitialLaw.from_dict(d["initial"]),
                       grid_steps=d.get("grid_steps", 200), mc_paths=d.get("mc_paths", 1000),
                       populations=d.get("populations", ((10, 10), (100, 100), (1000, 1000))),
                       seed=d.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenario: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def scenario_hash(self) -> str:
        """SHA-256 of the canonical JSON form, seed excluded."""
        d = self.to_dict()
        d.pop("seed")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _violation(field_name, message):
    return {"field": field_name, "message": message}


def validate_params(params: ModelParams, dims: Dimensions | None = None) -> list[dict]:
    """Every violated invariant as ``{field, message}``; empty list means ok."""
    dims = dims or params.dims
    sizes = {"n": dims.n, "m1": dims.m1, "m2": dims.m2, "m3": dims.m3}
    out = []
    for name, size in sizes.items():
        if size < 1:
            out.append(_violation(name, f"{name} must be positive"))
    n = dims.n
    for name in SQUARE_FIELDS + SYMMETRIC_FIELDS:
        if getattr(params, name).shape != (n, n):
            out.append(_violation(name, f"{name} must be {n}x{n}"))
    for name, m in CONTROL_FIELDS.items():
        if getattr(params, name).shape != (n, sizes[m]):
            out.append(_violation(name, f"{name} must be {n}x{sizes[m]}"))
    for name, m in WEIGHT_FIELDS.items():
        if getattr(params, name).shape != (sizes[m], sizes[m]):
            out.append(_violation(name, f"{name} must be {sizes[m]}x{sizes[m]}"))
    for name in MATRIX_FIELDS:
        if not np.all(np.isfinite(getattr(params, name))):
            out.append(_violation(name, f"{name} has non-finite entries"))
    for name in SYMMETRIC_FIELDS + tuple(WEIGHT_FIELDS):
        M = getattr(params, name)
        if M.shape[0] == M.shape[1] and np.all(np.isfinite(M)):
            if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(M))):
                out.append(_violation(name, f"{name} not symmetric"))
    for name in WEIGHT_FIELDS:
        M = getattr(params, name)
        if M.shape[0] == M.shape[1] and rcond(M) < RCOND_WEIGHT:
            out.append(_violation(name, f"{name} not invertible"))
    for name in LAMBDA_FIELDS:
        value = params.lambda_ if name == "lambda" else getattr(params, name)
        if not (0.0 <= value <= 1.0):
            out.append(_violation(name, f"{name} outside [0,1]"))
    if not (params.T > 0 and np.isfinite(params.T)):
        out.append(_violation("T", "T must be a positive finite horizon"))
    return out


def validate_initial(initial: InitialLaw, n: int, c0: float = 1e6) -> list[dict]:
    out = []
    if initial.mean_xi0.shape != (n,):
        out.append(_violation("mean_xi0", f"mean_xi0 must have length {n}"))
    for name in ("cov_xi0", "cov_xi", "cov_zeta"):
        S = getattr(initial, name)
        if S.shape != (n, n):
            out.append(_violation(name, f"{name} must be {n}x{n}"))
            continue
        if np.max(np.abs(S - S.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(S))):
            out.append(_violation(name, f"{name} not symmetric"))
        elif np.min(np.linalg.eigvalsh(S)) < -SYMMETRY_TOL * max(1.0, np.max(np.abs(S))):
            out.append(_violation(name, f"{name} not positive semidefinite"))
        if np.trace(S) > c0:
            out.append(_violation(name, f"{name} trace exceeds {c0:g}"))
    return out


def validate_scenario(config: ScenarioConfig) -> list[dict]:
    out = validate_params(config.params)
    out += validate_initial(config.initial, config.params.dims.n)
    if config.grid_steps < 2:
        out.append(_violation("grid_steps", "grid_steps must be at least 2"))
    if config.mc_paths < 1:
        out.append(_violation("mc_paths", "mc_paths must be at least 1"))
    if any(a < 1 or b < 1 for a, b in config.populations):
        out.append(_violation("populations", "population sizes must be at least 1"))
    return out


@dataclass(frozen=True)
class CCBlocks:
    """The 4n x 4n block matrices of the stacked consistency-condition system."""

    A_blk: np.ndarray
    Abar_blk: np.ndarray
    B_blk: np.ndarray
    C_blk: np.ndarray
    Cbar_blk: np.ndarray
    D_blk: np.ndarray
    E_blk: np.ndarray
    F_blk: np.ndarray
    A0_blk: np.ndarray
    C0_blk: np.ndarray
    Q_blk: np.ndarray
    Qbar_blk: np.ndarray
    H0_blk: np.ndarray
    X0_stack_mean: np.ndarray
    n: int = field(default=1)

    def scale(self) -> float:
        """Largest absolute entry over all coefficient blocks (at least 1)."""
        mats = (self.A_blk, self.Abar_blk, self.B_blk, self.C_blk, self.Cbar_blk, self.D_blk,
                self.E_blk, self.F_blk, self.A0_blk, self.C0_blk, self.Q_blk, self.Qbar_blk,
                self.H0_blk)
        return max(1.0, max(float(np.max(np.abs(M))) for M in mats))


def _bdiag(*mats):
    n = mats[0].shape[0]
    out = np.zeros((n * len(mats), n * len(mats)))
    for i, M in enumerate(mats):
        out[i * n:(i + 1) * n, i * n:(i + 1) * n] = M
    return out


def _grid4(entries: dict, n: int):
    """4x4 block matrix from {(row, col): block}; unspecified blocks are exactly zero."""
    out = np.zeros((4 * n, 4 * n))
    for (i, j), M in entries.items():
        out[i * n:(i + 1) * n, j * n:(j + 1) * n] = M
    return out


def assemble_cc_blocks(params: ModelParams, dims: Dimensions | None = None,
                       mean_xi0=None) -> CCBlocks:
    dims = dims or params.dims
    bad = [v for v in validate_params(params, dims) if "must be" in v["message"]]
    if bad:
        raise ConfigError("dimension mismatch: " + "; ".join(v["message"] for v in bad))
    n = dims.n
    p = params
    R0i, Ri, Rti = (np.linalg.inv(M) for M in (p.R0, p.R, p.R_tilde))

    def quad(X, Rinv, Y):
        return X @ Rinv @ Y.T

    Bt, Dt = p.B_tilde, p.D_tilde
    B_blk = _bdiag(-quad(p.B0, R0i, p.B0), -quad(p.B, Ri, p.B), -quad(Bt, Rti, Bt), quad(Bt, Rti, Bt))
    D_blk = _bdiag(-quad(p.D0, R0i, p.B0), -quad(p.D, Ri, p.B), -quad(Dt, Rti, Bt), quad(Dt, Rti, Bt))
    E_blk = _bdiag(-quad(p.B0, R0i, p.D0), -quad(p.B, Ri, p.D), -quad(Bt, Rti, Dt), quad(Bt, Rti, Dt))
    F_blk = _bdiag(-quad(p.D0, R0i, p.D0), -quad(p.D, Ri, p.D), -quad(Dt, Rti, Dt), quad(Dt, Rti, Dt))

    l0, lam = p.lambda0, p.lambda_
    l1, l2, l3 = p.lambda_tilde1, p.lambda_tilde2, p.lambda_tilde3
    Q0, Q, Qt = p.Q0, p.Q, p.Q_tilde
    Q_blk = _grid4({
        (0, 0): Q0, (0, 3): l1 * Qt,
        (1, 0): -(1 - lam) * Q, (1, 1): Q,
        (2, 0): -l1 * Qt, (2, 2): Qt,
        (3, 0): -(1 - l0) * Q0, (3, 3): -Qt,
    }, n)
    Qbar_blk = _grid4({
        (0, 1): -l0 * Q0, (0, 2): -(1 - l0) * Q0,
        (1, 1): -lam * Q,
        (2, 1): -l2 * Qt, (2, 2): -l3 * Qt,
        (3, 1): l0 * (1 - l0) * Q0, (3, 2): (1 - l0) ** 2 * Q0, (3, 3): l3 * Qt,
    }, n)

    mean = np.zeros(n) if mean_xi0 is None else np.asarray(mean_xi0, float).reshape(n)
    blocks = dict(
        A_blk=_bdiag(p.A0, p.A, p.A_tilde, p.A_tilde),
        Abar_blk=_grid4({(0, 1): p.E0_1, (0, 2): p.F0_1, (1, 1): p.E1, (2, 2): p.F1}, n),
        B_blk=B_blk,
        C_blk=_bdiag(p.C0, p.C, p.C_tilde, p.C_tilde),
        Cbar_blk=_grid4({(0, 1): p.E0_2, (0, 2): p.F0_2, (1, 1): p.E2, (2, 2): p.F2}, n),
        D_blk=D_blk, E_blk=E_blk, F_blk=F_blk,
        A0_blk=_grid4({(0, 3): p.F0_1, (3, 3): p.F1}, n),
        C0_blk=_grid4({(0, 3): p.F0_2, (3, 3): p.F2}, n),
        Q_blk=Q_blk, Qbar_blk=Qbar_blk,
        H0_blk=_bdiag(p.H0w, p.Hw, p.H_tilde_w, -p.H_tilde_w),
        X0_stack_mean=np.concatenate([mean, np.zeros(3 * n)]),
    )
    for M in blocks.values():
        M.setflags(write=False)
    return CCBlocks(n=n, **blocks)


def stacked_drifts(b: CCBlocks, X, Y, Z, EX, EY, EZ):
    """Forward drift, forward diffusion (per row, before noise) and backward drift."""
    fwd = b.A_blk @ X + b.Abar_blk @ EX + b.B_blk @ Y + b.E_blk @ Z
    diff = b.C_blk @ X + b.Cbar_blk @ EX + b.D_blk @ Y + b.F_blk @ Z
    bwd = -(b.A_blk.T @ Y + b.A0_blk.T @ EY + b.C_blk.T @ Z + b.C0_blk.T @ EZ
            + b.Q_blk @ X + b.Qbar_blk @ EX)
    return fwd, diff, bwd


# Leader (feedback-route) blocks ------------------------------------------------------

def follower_intermediates(params: ModelParams, P1: np.ndarray) -> dict:
    """The bracketed follower quantities as functions of P1 (broadcasts over leading axes)."""
    p = params
    n = p.A0.shape[0]
    Rti = np.linalg.inv(p.R_tilde)
    Bt, Dt, Ct = p.B_tilde, p.D_tilde, p.C_tilde
    I = np.eye(n)
    calR = I + P1 @ (Dt @ Rti @ Dt.T)
    calS = Ct - Dt @ Rti @ Bt.T @ P1
    RiP1 = np.linalg.solve(calR, P1)  # calR^{-1} P1
    inner = Bt.T @ P1 + Dt.T @ (RiP1 @ calS + RiP1 @ p.F2)
    tA = p.A_tilde + p.F1 - Bt @ Rti @ inner
    tB = (Bt @ Rti @ Dt.T @ RiP1 @ Dt - Bt) @ Rti @ Bt.T
    tC = Ct + p.F2 - Dt @ Rti @ inner
    tD = (Dt @ Rti @ Dt.T @ RiP1 @ Dt - Dt) @ Rti @ Bt.T
    SRP = np.swapaxes(calS, -1, -2) @ RiP1
    hA = (SRP @ Dt + P1 @ Bt) @ Rti @ Bt.T - p.A_tilde.T
    hQ = p.lambda_tilde3 * p.Q_tilde - P1 @ p.F1 - SRP @ p.F2
    return {"calR": calR, "calS": calS, "tA": tA, "tB": tB, "tC": tC, "tD": tD,
            "hA": hA, "hQ": hQ}


def _block3(rows):
    return np.block([[np.asarray(M) for M in row] for row in rows])


def leader_slice(params: ModelParams, P1: np.ndarray) -> dict:
    """L11..L33 at one time from the follower Riccati value P1 there."""
    p = params
    n = p.A0.shape[0]
    Z = np.zeros((n, n))
    calR = np.eye(n) + P1 @ p.D_tilde @ np.linalg.inv(p.R_tilde) @ p.D_tilde.T
    if rcond(calR) < 1e-10:
        raise BreakdownError("I + P1 Dt Rt^-1 Dt'", np.nan)
    it = follower_intermediates(params, P1)
    R0i = np.linalg.inv(p.R0)
    l0, l1 = p.lambda0, p.lambda_tilde1
    tA, tB, tC, tD, hA, hQ = (it[k] for k in ("tA", "tB", "tC", "tD", "hA", "hQ"))

    def first(M):
        return _block3([[M, Z, Z], [Z, Z, Z], [Z, Z, Z]])

    return {
        "L11": _block3([[p.A0, p.F0_1, Z], [Z, tA, tB], [l1 * p.Q_tilde, hQ, hA]]),
        "L12": first(-p.B0 @ R0i @ p.B0.T),
        "L13": first(-p.B0 @ R0i @ p.D0.T),
        "L21": _block3([[p.C0, p.F0_2, Z], [Z, tC, tD], [Z, Z, Z]]),
        "L22": first(-p.D0 @ R0i @ p.B0.T),
        "L23": first(-p.D0 @ R0i @ p.D0.T),
        "L31": _block3([[-p.Q0, (1 - l0) * p.Q0, Z],
                        [(1 - l0) * p.Q0, -(1 - l0) ** 2 * p.Q0, Z],
                        [Z, Z, Z]]),
        "L32": _block3([[-p.A0.T, Z, -l1 * p.Q_tilde],
                        [-p.F0_1.T, -tA.T, -hQ.T],
                        [Z, -tB.T, -hA.T]]),
        "L33": _block3([[-p.C0.T, Z, Z], [-p.F0_2.T, -tC.T, Z], [Z, -tD.T, Z]]),
    }


@dataclass(frozen=True)
class LeaderBlocks:
    """Time-indexed L-blocks on the grid of P1, with source maps f_k = S_k mX."""

    params: ModelParams
    P1: object  # MatrixPath
    L: dict
    intermediates: dict
    S_f1: np.ndarray
    S_f2: np.ndarray
    S_f3: np.ndarray

    def at(self, t: float) -> dict:
        return leader_slice(self.params, self.P1.at(t))

    def sources(self, mX) -> tuple:
        return self.S_f1 @ mX, self.S_f2 @ mX, self.S_f3 @ mX


def assemble_leader_blocks(params: ModelParams, P1) -> LeaderBlocks:
    """L-blocks along the grid of the follower Riccati path ``P1`` (a MatrixPath)."""
    times = P1.grid.points
    slices = []
    for t, P in zip(times, P1.values):
        try:
            slices.append(leader_slice(params, P))
        except BreakdownError as exc:
            raise BreakdownError("I + P1 Dt Rt^-1 Dt'", t) from exc
    L = {k: np.stack([s[k] for s in slices]) for k in slices[0]}
    inter = follower_intermediates(params, P1.values)
    p = params
    n = p.A0.shape[0]
    Z = np.zeros((n, n))
    l0 = p.lambda0
    S_f1 = np.vstack([p.E0_1, Z, p.lambda_tilde2 * p.Q_tilde])
    S_f2 = np.vstack([p.E0_2, Z, Z])
    S_f3 = np.vstack([l0 * p.Q0, -l0 * (1 - l0) * p.Q0, Z])
    return LeaderBlocks(params, P1, L, inter, S_f1, S_f2, S_f3)


# Canned scenarios -------------------------------------------------------------------

def example51_params(lam_tilde: float = 0.5, T: float = 1.0) -> ModelParams:
    """Scalar special case: everything zero except D = Dt = Q = Qt = R = Rt = 1, lambda = 1."""
    one = np.ones((1, 1))
    return ModelParams.zeros(1, 1, 1, 1, T).replace(
        D=one, D_tilde=one, Q=one, Q_tilde=one, lambda_=1.0, lambda_tilde1=0.0,
        lambda_tilde2=lam_tilde, lambda_tilde3=1.0 - lam_tilde, lambda0=0.5)


def example51_scenario(lam_tilde: float = 0.5, grid_steps: int = 1000, mc_paths: int = 10000,
                       seed: int = 42) -> ScenarioConfig:
    return ScenarioConfig(example51_params(lam_tilde), InitialLaw.standard(1),
                          grid_steps=grid_steps, mc_paths=mc_paths,
                          populations=((10, 10), (100, 100), (1000, 1000)), seed=seed)


def example51_closed_form(t, lam_tilde: float = 0.5, T: float = 1.0):
    """(P, Pi) of the scalar special case at times t, shape (len(t), 4, 4).

    P = diag(0, T-t, T-t, t-T); Pi differs only in rows two and three.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    s = T - t
    P = np.zeros((t.size, 4, 4))
    P[:, 1, 1] = s
    P[:, 2, 2] = s
    P[:, 3, 3] = -s
    Pi = np.zeros_like(P)
    Pi[:, 2, 1] = -lam_tilde * s
    Pi[:, 2, 2] = lam_tilde * s
    Pi[:, 3, 3] = -lam_tilde * s
    return P, Pi


def example51_printed_form(t, lam_tilde: float = 0.5, T: float = 1.0):
    """The published display for the same case, kept for comparison only.

    It has the opposite overall sign and its Pi does not satisfy its own
    Riccati equation unless lam_tilde = 1.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    P = np.zeros((t.size, 4, 4))
    P[:, 1, 1] = t - T
    P[:, 2, 2] = t - T
    P[:, 3, 3] = T - t
    Pi = np.zeros_like(P)
    Pi[:, 2, 1] = T - lam_tilde * t
    Pi[:, 2, 2] = lam_tilde * t - T
    Pi[:, 3, 3] = T - lam_tilde * t
    return P, Pi
