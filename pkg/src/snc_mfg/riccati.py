"""Backward RK4 integration of the matrix Riccati and affine equations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BreakdownError, NumericalError
from .model import CCBlocks, LeaderBlocks, ModelParams, rcond

BLOWUP_CAP = 1e12
RCOND_BREAKDOWN = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        if self.K < 1:
            raise ValueError("grid needs at least one step")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.K * factor)


@dataclass(frozen=True)
class MatrixPath:
    """One array per grid point; ``derivative`` (if stored) enables cubic Hermite lookup."""

    grid: TimeGrid
    values: np.ndarray
    derivative: np.ndarray | None = None

    def __getitem__(self, k):
        return self.values[k]

    def at(self, t: float) -> np.ndarray:
        g = self.grid
        s = t / g.dt
        k = min(max(int(np.floor(s)), 0), g.K - 1)
        u = s - k
        if abs(u) < 1e-12:
            return self.values[k]
        if abs(u - 1.0) < 1e-12:
            return self.values[k + 1]
        y0, y1 = self.values[k], self.values[k + 1]
        if self.derivative is None:
            return (1 - u) * y0 + u * y1
        d0, d1 = self.derivative[k] * g.dt, self.derivative[k + 1] * g.dt
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1

    def to_csv(self, path, header_meta: dict | None = None, prefix: str = "m"):
        """One row per grid point: t, then row-major entries, 17 significant digits."""
        flat = self.values.reshape(self.values.shape[0], -1)
        shape = self.values.shape[1:]
        idx = np.ndindex(*shape) if shape else [()]
        names = [prefix + "_".join(str(i) for i in ix) for ix in idx]
        with open(path, "w", newline="") as fh:
            for key, val in (header_meta or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + names)
            for t, row in zip(self.grid.points, flat):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def _check(M, t):
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"non-finite value in backward integration at t={t:.6g}")
    if np.max(np.abs(M), initial=0.0) > BLOWUP_CAP:
        raise NumericalError(f"Riccati blow-up at t={t:.6g}")


def integrate_matrix_ode_backward(rhs: Callable[[float, np.ndarray], np.ndarray],
                                  terminal, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 from t=T down to t=0; ``rhs(t, M)`` returns dM/dt."""
    terminal = np.array(terminal, dtype=float)
    K, dt = grid.K, grid.dt
    ts = grid.points
    values = np.empty((K + 1,) + terminal.shape)
    deriv = np.empty_like(values)
    values[K] = terminal
    M = terminal
    k1 = rhs(ts[K], M)
    for k in range(K, 0, -1):
        t = ts[k]
        deriv[k] = k1
        k2 = rhs(t - dt / 2, M - dt / 2 * k1)
        k3 = rhs(t - dt / 2, M - dt / 2 * k2)
        k4 = rhs(ts[k - 1], M - dt * k3)
        M = M - dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(M, ts[k - 1])
        values[k - 1] = M
        k1 = rhs(ts[k - 1], M)
    deriv[0] = k1
    return MatrixPath(grid, values, deriv)


def integrate_forward(rhs, initial, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 from t=0 up to t=T."""
    initial = np.array(initial, dtype=float)
    K, dt = grid.K, grid.dt
    ts = grid.points
    values = np.empty((K + 1,) + initial.shape)
    deriv = np.empty_like(values)
    values[0] = x = initial
    k1 = rhs(ts[0], x)
    for k in range(K):
        deriv[k] = k1
        k2 = rhs(ts[k] + dt / 2, x + dt / 2 * k1)
        k3 = rhs(ts[k] + dt / 2, x + dt / 2 * k2)
        k4 = rhs(ts[k + 1], x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(x, ts[k + 1])
        values[k + 1] = x
        k1 = rhs(ts[k + 1], x)
    deriv[K] = k1
    return MatrixPath(grid, values, deriv)


# Stacked (P, Pi) pair -------------------------------------------------------------

def ansatz_factor(P: np.ndarray, F: np.ndarray, t: float = np.nan) -> np.ndarray:
    """(I - P F)^{-1} P, the map from diffusion data to Z in the decoupling ansatz."""
    IPF = np.eye(P.shape[0]) - P @ F
    if rcond(IPF) < RCOND_BREAKDOWN:
        raise BreakdownError("I - P F", t)
    return np.linalg.solve(IPF, P)


def p_rhs(b: CCBlocks, t: float, P: np.ndarray) -> np.ndarray:
    M = ansatz_factor(P, b.F_blk, t)
    return -(P @ b.A_blk + b.A_blk.T @ P + b.Q_blk + P @ b.B_blk @ P
             + (P @ b.E_blk + b.C_blk.T) @ M @ (b.C_blk + b.D_blk @ P))


def pi_rhs(b: CCBlocks, t: float, P: np.ndarray, Pi: np.ndarray) -> np.ndarray:
    M = ansatz_factor(P, b.F_blk, t)
    return -(Pi @ (b.A_blk + b.Abar_blk) + (b.A_blk.T + b.A0_blk.T) @ Pi + Pi @ b.B_blk @ Pi
             + b.Q_blk + b.Qbar_blk
             + (Pi @ b.E_blk + b.C_blk.T + b.C0_blk.T) @ M @ (b.C_blk + b.Cbar_blk + b.D_blk @ Pi))


@dataclass(frozen=True)
class RiccatiPair:
    P: MatrixPath
    Pi: MatrixPath
    blocks: CCBlocks

    @property
    def grid(self) -> TimeGrid:
        return self.P.grid


def solve_cc_riccati(blocks: CCBlocks, grid: TimeGrid) -> RiccatiPair:
    """Integrate P and Pi jointly so Pi's equation sees P at every RK4 stage."""

    def rhs(t, S):
        return np.stack([p_rhs(blocks, t, S[0]), pi_rhs(blocks, t, S[0], S[1])])

    H = np.array(blocks.H0_blk)
    path = integrate_matrix_ode_backward(rhs, np.stack([H, H]), grid)
    P = MatrixPath(grid, path.values[:, 0], path.derivative[:, 0])
    Pi = MatrixPath(grid, path.values[:, 1], path.derivative[:, 1])
    return RiccatiPair(P, Pi, blocks)


def central_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """Derivative at interior grid points 1..K-1."""
    return (values[2:] - values[:-2]) / (2 * dt)


def cc_riccati_residual(pair: RiccatiPair) -> tuple[float, float]:
    """Sup-norm of finite-difference derivative plus equation right-hand side, P then Pi."""
    g = pair.grid
    b = pair.blocks
    ts = g.points
    dP = central_difference(pair.P.values, g.dt)
    dPi = central_difference(pair.Pi.values, g.dt)
    rP = rPi = 0.0
    for i, k in enumerate(range(1, g.K)):
        P, Pi = pair.P.values[k], pair.Pi.values[k]
        rP = max(rP, np.max(np.abs(dP[i] - p_rhs(b, ts[k], P))))
        rPi = max(rPi, np.max(np.abs(dPi[i] - pi_rhs(b, ts[k], P, Pi))))
    return float(rP), float(rPi)


# Feedback-route equations -----------------------------------------------------------

def lq_riccati_rhs(A, B, C, D, Q, R):
    """dP/dt for  P' + A'P + PA + Q - P B R^-1 B' P + S' calR^-1 P S = 0."""
    Ri = np.linalg.inv(R)
    BRB = B @ Ri @ B.T
    DRD = D @ Ri @ D.T
    DRB = D @ Ri @ B.T
    n = A.shape[0]

    def rhs(t, P):
        calR = np.eye(n) + P @ DRD
        if rcond(calR) < RCOND_BREAKDOWN:
            raise BreakdownError("I + P D R^-1 D'", t)
        S = C - DRB @ P
        return -(A.T @ P + P @ A + Q - P @ BRB @ P + S.T @ np.linalg.solve(calR, P @ S))

    return rhs


def solve_follower_P1(params: ModelParams, grid: TimeGrid) -> MatrixPath:
    p = params
    rhs = lq_riccati_rhs(p.A_tilde, p.B_tilde, p.C_tilde, p.D_tilde, p.Q_tilde, p.R_tilde)
    return integrate_matrix_ode_backward(rhs, p.H_tilde_w, grid)


def solve_minor_P3_Phi3(params: ModelParams, grid: TimeGrid, mX: MatrixPath,
                        X0bar_mean: MatrixPath) -> tuple[MatrixPath, MatrixPath]:
    """P3 and the deterministic offset Phi3 driven by mX and the mean of X0bar.

    Both are carried as one n x (n+1) matrix ``[P3 | Phi3]`` so Phi3's stages see P3.
    """
    p = params
    n = p.A.shape[0]
    riccati = lq_riccati_rhs(p.A, p.B, p.C, p.D, p.Q, p.R)
    Ri = np.linalg.inv(p.R)
    BRB, DRB, DRD = p.B @ Ri @ p.B.T, p.D @ Ri @ p.B.T, p.D @ Ri @ p.D.T
    lam = p.lambda_

    def rhs(t, S):
        P3, phi = S[:, :n], S[:, n:]
        dP = riccati(t, P3)
        m = mX.at(t).reshape(n, 1)
        x0 = X0bar_mean.at(t).reshape(n, 1)
        f = P3 @ p.E2 @ m - P3 @ DRB @ phi
        calR = np.eye(n) + P3 @ DRD
        calS = p.C - DRB @ P3
        dphi = (-p.A.T @ phi + P3 @ BRB @ phi + p.Q @ (lam * m + (1 - lam) * x0)
                - P3 @ p.E1 @ m - calS.T @ np.linalg.solve(calR, f))
        return np.hstack([dP, dphi])

    terminal = np.hstack([p.Hw, np.zeros((n, 1))])
    path = integrate_matrix_ode_backward(rhs, terminal, grid)
    return (MatrixPath(grid, path.values[:, :, :n], path.derivative[:, :, :n]),
            MatrixPath(grid, path.values[:, :, n:], path.derivative[:, :, n:]))


def solve_leader_P2_Phi2(blocks: LeaderBlocks, grid: TimeGrid,
                         mX: MatrixPath) -> tuple[MatrixPath, MatrixPath]:
    """Non-symmetric 3n x 3n Riccati P2 and its offset Phi2, carried as ``[P2 | Phi2]``.

    Terminal value diag(H0w, 0, 0): Y0(T) = H0w X0(T) and y1(T) = 0; the third
    block has no terminal condition of its own.
    """
    p = blocks.params
    n = p.A0.shape[0]
    N = 3 * n

    def rhs(t, S):
        P2, phi = S[:, :N], S[:, N:]
        L = blocks.at(t)
        IPL = np.eye(N) - P2 @ L["L23"]
        if rcond(IPL) < RCOND_BREAKDOWN:
            raise BreakdownError("I - P2 L23", t)
        G = P2 @ L["L13"] - L["L33"]
        inv_P2 = np.linalg.solve(IPL, P2)
        dP = -(P2 @ L["L11"] - L["L32"] @ P2 - L["L31"] + P2 @ L["L12"] @ P2
               + G @ inv_P2 @ (L["L21"] + L["L22"] @ P2))
        f1, f2, f3 = blocks.sources(mX.at(t).reshape(n, 1))
        dphi = -((P2 @ L["L12"] - L["L32"] + G @ inv_P2 @ L["L22"]) @ phi
                 + P2 @ f1 + G @ inv_P2 @ f2 - f3)
        return np.hstack([dP, dphi])

    terminal = np.zeros((N, N + 1))
    terminal[:n, :n] = p.H0w
    path = integrate_matrix_ode_backward(rhs, terminal, grid)
    return (MatrixPath(grid, path.values[:, :, :N], path.derivative[:, :, :N]),
            MatrixPath(grid, path.values[:, :, N:], path.derivative[:, :, N:]))


@dataclass(frozen=True)
class FeedbackRiccatis:
    P1: MatrixPath
    P3: MatrixPath
    Phi3: MatrixPath
    P2: MatrixPath
    Phi2: MatrixPath


def solve_feedback_route(params: ModelParams, grid: TimeGrid, mX: MatrixPath,
                         X0bar_mean: MatrixPath) -> FeedbackRiccatis:
    from .model import assemble_leader_blocks

    P1 = solve_follower_P1(params, grid)
    P3, Phi3 = solve_minor_P3_Phi3(params, grid, mX, X0bar_mean)
    P2, Phi2 = solve_leader_P2_Phi2(assemble_leader_blocks(params, P1), grid, mX)
    return FeedbackRiccatis(P1, P3, Phi3, P2, Phi2)
