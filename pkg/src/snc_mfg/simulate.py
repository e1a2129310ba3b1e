"""Monte Carlo: counter-based Brownian increments, Euler-Maruyama paths, costs, probes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .errors import NumericalError
from .meanfield import CLASS_BLOCK, CLASSES, FeedbackGains, MeanFieldTrajectory, class_coefficients
from .model import CCBlocks, InitialLaw, ModelParams, assemble_leader_blocks
from .riccati import MatrixPath, RiccatiPair, TimeGrid, ansatz_factor, solve_follower_P1

KINDS = {"major": 0, "minor": 1, "follower": 2}
STREAM_INCREMENTS, STREAM_INITIAL, STREAM_DEVIATION, STREAM_PROBE = 0, 1, 2, 3
STEP_STRIDE = 1 << 32  # agent slots per time step in the counter layout


@lru_cache(maxsize=65536)
def _stream_key(seed: int, key_path: tuple) -> np.ndarray:
    key = np.random.SeedSequence(seed, spawn_key=key_path).generate_state(2, np.uint64)
    key.setflags(write=False)
    return key


def _philox_normals(seed: int, key_path: tuple, position: int, count: int) -> np.ndarray:
    """Standard normals at stream positions [position, position + count).

    Every uint64 of the Philox stream keyed by (seed, key_path) maps to one
    normal through the inverse CDF, so the value at a position is a pure
    function of (seed, key_path, position).
    """
    key = _stream_key(seed, key_path)
    block, offset = divmod(position, 4)
    bitgen = np.random.Philox(key=key, counter=block)
    raw = bitgen.random_raw(offset + count)[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True)
class BrownianBundle:
    """Lazily evaluated increments for replications x sources x steps.

    A source is (kind, index) with kind in {major, minor, follower}.  The
    increment of source (kind, i) at step k in replication r sits at position
    k * STEP_STRIDE + i of the stream keyed by (r, kind), so agent i's noise does
    not depend on how many agents are simulated.
    """

    grid: TimeGrid
    replications: int
    seed: int
    scale: float = 1.0  # 0 gives the degenerate (noise-free) bundle

    def increments(self, kind: str, step: int, count: int, rep: int = 0) -> np.ndarray:
        z = _philox_normals(self.seed, (rep, KINDS[kind], STREAM_INCREMENTS),
                            step * STEP_STRIDE, count)
        return z * (self.scale * math.sqrt(self.grid.dt))

    def increment(self, source: tuple, step: int, rep: int = 0) -> float:
        kind, index = source
        z = _philox_normals(self.seed, (rep, KINDS[kind], STREAM_INCREMENTS),
                            step * STEP_STRIDE + index, 1)
        return float(z[0] * self.scale * math.sqrt(self.grid.dt))

    def step_block(self, kind: str, step: int, count: int) -> np.ndarray:
        """(replications, count) increments at one step."""
        return np.stack([self.increments(kind, step, count, r) for r in range(self.replications)])

    def path_normals(self, kind: str, dim: int) -> np.ndarray:
        """(replications, dim) initial normals laid out along the agent axis of replication 0."""
        return _philox_normals(self.seed, (0, KINDS[kind], STREAM_INITIAL), 0,
                               self.replications * dim).reshape(self.replications, dim)

    def initial_normals(self, kind: str, count: int, dim: int) -> np.ndarray:
        """(replications, count, dim) standard normals for initial states."""
        return np.stack([
            _philox_normals(self.seed, (r, KINDS[kind], STREAM_INITIAL), 0, count * dim)
            .reshape(count, dim) for r in range(self.replications)])


def sample_brownian(grid: TimeGrid, replications: int, seed: int, scale: float = 1.0) -> BrownianBundle:
    if replications < 1:
        raise ValueError("need at least one replication")
    return BrownianBundle(grid, int(replications), int(seed), float(scale))


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(np.asarray(S, float))
    return V * np.sqrt(np.clip(w, 0.0, None))


def trapezoid(values: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid rule along axis 0."""
    return dt * (values.sum(axis=0) - 0.5 * (values[0] + values[-1]))


def _quad(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", x, W, x)


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite state in simulation")


# Decoupled stacked paths -----------------------------------------------------------

@dataclass(frozen=True)
class CCPathResult:
    grid: TimeGrid
    X: np.ndarray  # (K+1, paths, 4n)
    Y: np.ndarray
    Z: np.ndarray
    controls: dict  # class -> (K+1, paths, m)
    diagnostics: dict
    n: int


def simulate_stacked_cc(blocks: CCBlocks, riccati: RiccatiPair, mf: MeanFieldTrajectory,
                        bundle: BrownianBundle, initial: InitialLaw | None = None,
                        gains: FeedbackGains | None = None, params: ModelParams | None = None
                        ) -> CCPathResult:
    """Euler-Maruyama on the stacked forward equation with Y, Z from the ansatz.

    Path r is driven by sources (major, r), (minor, r), (follower, r) of
    replication 0; rows 3 and 4 share the follower noise.  Controls come from
    ``gains`` when given, otherwise from the stationarity formulas.
    """
    b = blocks
    n = b.n
    g = riccati.grid
    K, dt, R = g.K, g.dt, bundle.replications
    X = np.tile(mf.EX.values[0], (R, 1))
    if initial is not None:
        X[:, :n] = initial.mean_xi0 + bundle.path_normals("major", n) @ psd_sqrt(initial.cov_xi0).T
        X[:, n:2 * n] = bundle.path_normals("minor", n) @ psd_sqrt(initial.cov_xi).T
        X[:, 2 * n:3 * n] = bundle.path_normals("follower", n) @ psd_sqrt(initial.cov_zeta).T
        X[:, 3 * n:] = 0.0
    Xs = np.empty((K + 1, R, 4 * n))
    Ys, Zs = np.empty_like(Xs), np.empty_like(Xs)
    bsde_res = np.zeros(R)
    for k in range(K + 1):
        P, Pi = riccati.P.values[k], riccati.Pi.values[k]
        EX = mf.EX.values[k]
        M = ansatz_factor(P, b.F_blk, g.points[k])
        Y = (X - EX) @ P.T + Pi @ EX
        Z = (X @ b.C_blk.T + b.Cbar_blk @ EX + Y @ b.D_blk.T) @ M.T
        Xs[k], Ys[k], Zs[k] = X, Y, Z
        if k == K:
            break
        dW = np.stack([bundle.increments(kind, k, R) for kind in ("major", "minor", "follower")], axis=1)
        dW = np.repeat(dW[:, [0, 1, 2, 2]], n, axis=1)
        drift = X @ b.A_blk.T + b.Abar_blk @ EX + Y @ b.B_blk.T + Z @ b.E_blk.T
        sigma = X @ b.C_blk.T + b.Cbar_blk @ EX + Y @ b.D_blk.T + Z @ b.F_blk.T
        X = X + drift * dt + sigma * dW
        _finite(X)
        bwd = -(Y @ b.A_blk + b.A0_blk.T @ mf.EY.values[k] + Z @ b.C_blk + b.C0_blk.T @ mf.EZ.values[k]
                + Xs[k] @ b.Q_blk.T + b.Qbar_blk @ EX)
        Pn, Pin = riccati.P.values[k + 1], riccati.Pi.values[k + 1]
        EXn = mf.EX.values[k + 1]
        Yn = (X - EXn) @ Pn.T + Pin @ EXn
        res = Yn - Y - bwd * dt - Z * dW
        bsde_res = np.maximum(bsde_res, np.max(np.abs(res), axis=1))

    controls = {}
    if gains is not None:
        for cls in CLASSES:
            controls[cls] = np.einsum("kmi,kri->krm", gains.gain[cls], Xs) + gains.offset[cls][:, None, :]
    elif params is not None:
        for cls in CLASSES:
            Bc, Dc, Rc = class_coefficients(params, cls)
            j = CLASS_BLOCK[cls]
            rows = slice(j * n, (j + 1) * n)
            rhs = Ys[..., rows] @ Bc + Zs[..., rows] @ Dc
            controls[cls] = -np.linalg.solve(Rc, rhs.reshape(-1, Rc.shape[0]).T).T.reshape(rhs.shape)
    terminal_gap = float(np.max(np.abs(Ys[K] - Xs[K] @ b.H0_blk.T)))
    diagnostics = {"terminal_gap": terminal_gap, "bsde_residual": float(np.mean(bsde_res)),
                   "bsde_residual_max": float(np.max(bsde_res))}
    path = CCPathResult(g, Xs, Ys, Zs, controls, diagnostics, n)
    if params is not None and controls:
        diagnostics["stationarity"] = stationarity_residuals(path, params)
    return path


def stationarity_residuals(path: CCPathResult, params: ModelParams) -> dict:
    """sup_t |B'Y_b + R u + D'Z_b| per class along the path."""
    n = path.n
    out = {}
    for cls in CLASSES:
        Bc, Dc, Rc = class_coefficients(params, cls)
        j = CLASS_BLOCK[cls]
        rows = slice(j * n, (j + 1) * n)
        r = path.Y[..., rows] @ Bc + path.controls[cls] @ Rc.T + path.Z[..., rows] @ Dc
        out[cls] = float(np.max(np.abs(r)))
    return out


def representative_costs(params: ModelParams, path: CCPathResult, mf: MeanFieldTrajectory) -> dict:
    """Per-path limiting costs J0, Jl, Jf along decoupled stacked paths."""
    p = params
    n = path.n
    dt = path.grid.dt
    X0, Xl, xf = (path.X[..., j * n:(j + 1) * n] for j in range(3))
    mX = mf.mX.values[:, None, :]
    mx = mf.mx.values[:, None, :]
    u = path.controls
    t0 = X0 - (p.lambda0 * mX + (1 - p.lambda0) * mx)
    tl = Xl - (p.lambda_ * mX + (1 - p.lambda_) * X0)
    tf = xf - (p.lambda_tilde1 * X0 + p.lambda_tilde2 * mX + p.lambda_tilde3 * mx)
    J0 = 0.5 * (trapezoid(_quad(t0, p.Q0) + _quad(u["major"], p.R0), dt) + _quad(X0[-1], p.H0w))
    Jl = 0.5 * (trapezoid(_quad(tl, p.Q) + _quad(u["minor"], p.R), dt) + _quad(Xl[-1], p.Hw))
    Jf = 0.5 * (trapezoid(_quad(tf, p.Q_tilde) + _quad(u["follower"], p.R_tilde), dt)
                + _quad(xf[-1], p.H_tilde_w))
    return {"J0": J0, "Jl": Jl, "Jf": Jf}


# Finite population -------------------------------------------------------------------

@dataclass(frozen=True)
class Deviation:
    """Additive control deviation for one agent: ``path`` has shape (K+1, m)."""

    cls: str
    index: int
    path: np.ndarray


def _fsum_mean(values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class PopulationResult:
    N_l: int
    N_f: int
    seed: int
    empirical_mX: np.ndarray  # (K+1, reps, n)
    empirical_mx: np.ndarray
    costs: dict  # finite-population costs: J0 (reps,), Jl (reps, N_l), Jf (reps, N_f)
    limit_costs: dict  # same agents' limiting costs along their decentralized limit paths
    sup_mX_err: np.ndarray  # (reps,) sup_t |X^(N_l) - mX|^2
    sup_mx_err: np.ndarray

    @property
    def replications(self) -> int:
        return self.sup_mX_err.shape[0]

    def cost_gaps(self) -> dict:
        """Per replication |finite - limiting| cost, averaged over agents of a class."""
        return {
            "J0": np.abs(self.costs["J0"] - self.limit_costs["J0"]),
            "Jl": np.mean(np.abs(self.costs["Jl"] - self.limit_costs["Jl"]), axis=1),
            "Jf": np.mean(np.abs(self.costs["Jf"] - self.limit_costs["Jf"]), axis=1),
        }

    def summary(self) -> dict:
        gaps = self.cost_gaps()
        return {
            "N_l": self.N_l, "N_f": self.N_f, "seed": self.seed,
            "costs": {"J0": _fsum_mean(self.costs["J0"]), "Jl_mean": _fsum_mean(self.costs["Jl"]),
                      "Jf_mean": _fsum_mean(self.costs["Jf"])},
            "gaps": {"sup_mX_err": _fsum_mean(self.sup_mX_err), "sup_mx_err": _fsum_mean(self.sup_mx_err),
                     "cost_gap_J0": _fsum_mean(gaps["J0"]), "cost_gap_Jl": _fsum_mean(gaps["Jl"]),
                     "cost_gap_Jf": _fsum_mean(gaps["Jf"])},
        }


def _apply(x, M):
    """x[..., n] @ M' for a coefficient matrix M."""
    return x @ M.T


def simulate_population(params: ModelParams, gains: FeedbackGains, mf: MeanFieldTrajectory,
                        N_l: int, N_f: int, bundle: BrownianBundle,
                        initial: InitialLaw | None = None, deviation: Deviation | None = None
                        ) -> PopulationResult:
    """Finite population coupled through empirical averages, plus its limit twin.

    Each agent's twin starts from the same draw and sees the same noise, but
    couples to the mean-field trajectories; the twin carries the limiting cost.
    Controls use the stacked gains with unobserved slots filled by mean-field values.
    """
    p = params
    n = mf.n
    g = mf.grid
    K, dt, R = g.K, g.dt, bundle.replications
    initial = initial or InitialLaw(mf.EX.values[0, :n], np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n)))
    X0 = initial.mean_xi0 + bundle.initial_normals("major", 1, n)[:, 0] @ psd_sqrt(initial.cov_xi0).T
    Xl = bundle.initial_normals("minor", N_l, n) @ psd_sqrt(initial.cov_xi).T
    xf = bundle.initial_normals("follower", N_f, n) @ psd_sqrt(initial.cov_zeta).T
    twin = [X0.copy(), Xl.copy(), xf.copy()]
    fin = [X0, Xl, xf]

    mX, mx, EK = mf.mX.values, mf.mx.values, mf.EK.values
    emp_mX = np.empty((K + 1, R, n))
    emp_mx = np.empty((K + 1, R, n))
    run = {key: {"J0": np.empty((K + 1, R)), "Jl": np.empty((K + 1, R, N_l)),
                 "Jf": np.empty((K + 1, R, N_f))} for key in ("fin", "lim")}
    sup_X = np.zeros(R)
    sup_x = np.zeros(R)

    def controls(k, X0, Xl, xf):
        Gm = [gains.block("major", k, j) for j in range(4)]
        Gl = [gains.block("minor", k, j) for j in range(4)]
        Gf = [gains.block("follower", k, j) for j in range(4)]
        u0 = (_apply(X0, Gm[0]) + Gm[1] @ mX[k] + Gm[2] @ mx[k] + Gm[3] @ EK[k]
              + gains.offset["major"][k])
        ul = (_apply(X0, Gl[0])[:, None, :] + _apply(Xl, Gl[1]) + Gl[2] @ mx[k] + Gl[3] @ EK[k]
              + gains.offset["minor"][k])
        vf = (_apply(X0, Gf[0])[:, None, :] + Gf[1] @ mX[k] + _apply(xf, Gf[2]) + Gf[3] @ EK[k]
              + gains.offset["follower"][k])
        return u0, ul, vf

    for k in range(K + 1):
        if k < K:
            dW0 = bundle.step_block("major", k, 1)[:, 0][:, None]
            dWl = bundle.step_block("minor", k, N_l)[:, :, None]
            dWf = bundle.step_block("follower", k, N_f)[:, :, None]
        for key, (X0, Xl, xf) in (("fin", fin), ("lim", twin)):
            u0, ul, vf = controls(k, X0, Xl, xf)
            if key == "fin" and deviation is not None:
                if deviation.cls == "major":
                    u0 = u0 + deviation.path[k]
                elif deviation.cls == "minor":
                    ul = ul.copy()
                    ul[:, deviation.index] += deviation.path[k]
                else:
                    vf = vf.copy()
                    vf[:, deviation.index] += deviation.path[k]
            if key == "fin":
                XN, xN = Xl.mean(axis=1), xf.mean(axis=1)
                emp_mX[k], emp_mx[k] = XN, xN
                sup_X = np.maximum(sup_X, np.sum((XN - mX[k]) ** 2, axis=1))
                sup_x = np.maximum(sup_x, np.sum((xN - mx[k]) ** 2, axis=1))
            else:
                XN = np.broadcast_to(mX[k], (R, n))
                xN = np.broadcast_to(mx[k], (R, n))
            c = run[key]
            c["J0"][k] = _quad(X0 - (p.lambda0 * XN + (1 - p.lambda0) * xN), p.Q0) + _quad(u0, p.R0)
            c["Jl"][k] = (_quad(Xl - (p.lambda_ * XN + (1 - p.lambda_) * X0)[:, None, :], p.Q)
                          + _quad(ul, p.R))
            c["Jf"][k] = (_quad(xf - (p.lambda_tilde1 * X0 + p.lambda_tilde2 * XN
                                      + p.lambda_tilde3 * xN)[:, None, :], p.Q_tilde)
                          + _quad(vf, p.R_tilde))
            if k == K:
                continue
            nX0 = X0 + (_apply(X0, p.A0) + _apply(u0, p.B0) + _apply(XN, p.E0_1) + _apply(xN, p.F0_1)) * dt \
                + (_apply(X0, p.C0) + _apply(u0, p.D0) + _apply(XN, p.E0_2) + _apply(xN, p.F0_2)) * dW0
            nXl = Xl + (_apply(Xl, p.A) + _apply(ul, p.B) + _apply(XN, p.E1)[:, None, :]) * dt \
                + (_apply(Xl, p.C) + _apply(ul, p.D) + _apply(XN, p.E2)[:, None, :]) * dWl
            nxf = xf + (_apply(xf, p.A_tilde) + _apply(vf, p.B_tilde) + _apply(xN, p.F1)[:, None, :]) * dt \
                + (_apply(xf, p.C_tilde) + _apply(vf, p.D_tilde) + _apply(xN, p.F2)[:, None, :]) * dWf
            _finite(nX0, nXl, nxf)
            if key == "fin":
                fin = [nX0, nXl, nxf]
            else:
                twin = [nX0, nXl, nxf]

    costs, limit = {}, {}
    for key, dest, (X0, Xl, xf) in (("fin", costs, fin), ("lim", limit, twin)):
        c = run[key]
        dest["J0"] = 0.5 * (trapezoid(c["J0"], dt) + _quad(X0, p.H0w))
        dest["Jl"] = 0.5 * (trapezoid(c["Jl"], dt) + _quad(Xl, p.Hw))
        dest["Jf"] = 0.5 * (trapezoid(c["Jf"], dt) + _quad(xf, p.H_tilde_w))
    return PopulationResult(N_l, N_f, bundle.seed, emp_mX, emp_mx, costs, limit, sup_X, sup_x)


# Convexity probes -------------------------------------------------------------------

def _moment_functional(A, B, C, D, Q, R, H, controls, dt, drift_force=None, diff_force=None,
                       target=None):
    """Exact expectation of the Euler scheme's quadratic functional from zero initial state.

    Mean and covariance are propagated separately so every state term is a
    PSD quadratic form of a PSD matrix whenever Q and H are PSD.
    """
    n = A.shape[0]
    K = controls.shape[0] - 1
    Mstep = np.eye(n) + A * dt
    mu = np.zeros(n)
    S = np.zeros((n, n))
    state_terms = np.empty(K + 1)
    for k in range(K + 1):
        v = controls[k]
        dev = mu if target is None else mu - target[k]
        state_terms[k] = np.trace(Q @ S) + dev @ Q @ dev
        if k == K:
            break
        a = B @ v + (0 if drift_force is None else drift_force[k])
        s = C @ mu + D @ v + (0 if diff_force is None else diff_force[k])
        S = Mstep @ S @ Mstep.T + dt * (C @ S @ C.T + np.outer(s, s))
        mu = Mstep @ mu + a * dt
    ctrl_terms = np.einsum("ki,ij,kj->k", controls, R, controls)
    dev = mu if target is None else mu - target[K]
    return float(trapezoid(state_terms, dt) + trapezoid(ctrl_terms, dt) + np.trace(H @ S) + dev @ H @ dev)


def follower_mean_response(params: ModelParams, grid: TimeGrid, u0: np.ndarray):
    """Mean major state and follower mean response (E[X0], E[x]) to a deterministic u0.

    Solves d/dt (X0, mx, Phi1) = L11 (X0, mx, Phi1) + (B0 u0, 0, 0) with
    X0(0) = mx(0) = 0 and Phi1(T) = 0 by superposition over Phi1(0).
    """
    return _mean_response_solver(params, grid)(u0)


def _mean_response_solver(params: ModelParams, grid: TimeGrid):
    """Precompute the homogeneous shots once; the returned map is affine in u0."""
    n = params.A0.shape[0]
    leader = assemble_leader_blocks(params, solve_follower_P1(params, grid))
    L11 = leader.L["L11"]
    K, dt = grid.K, grid.dt

    def shoot(state0, force=None):
        out = np.empty((K + 1, 3 * n))
        out[0] = x = state0
        for k in range(K):
            f = 0.0 if force is None else force[k]
            x = x + dt * (L11[k] @ x + f)  # forward Euler, matches the moment scheme
            out[k + 1] = x
        return out

    basis = [shoot(np.eye(3 * n)[2 * n + i]) for i in range(n)]
    Mend = np.stack([b_[-1, 2 * n:] for b_ in basis], axis=1)

    def respond(u0):
        force = np.zeros((K + 1, 3 * n))
        force[:, :n] = u0 @ params.B0.T
        base = shoot(np.zeros(3 * n), force)
        coef = np.linalg.lstsq(Mend, -base[-1, 2 * n:], rcond=None)[0]
        sol = base + sum(c * b_ for c, b_ in zip(coef, basis))
        return sol[:, :n], sol[:, n:2 * n]

    return respond


def random_piecewise_control(seed: int, probe: int, cls: str, m: int, grid: TimeGrid,
                             pieces: int = 10, scale: float = 1.0) -> np.ndarray:
    """(K+1, m) piecewise-constant Gaussian control."""
    z = _philox_normals(seed, (probe, KINDS[cls], STREAM_PROBE), 0, pieces * m).reshape(pieces, m)
    idx = np.minimum((np.arange(grid.K + 1) * pieces) // grid.K, pieces - 1)
    return scale * z[idx]


def convexity_probe(params: ModelParams, cls: str, mc_controls: int, seed: int,
                    grid_steps: int = 100, pieces: int = 10) -> list[float]:
    """Quadratic functional of the homogeneous zero-initial system for random controls."""
    p = params
    grid = TimeGrid(p.T, grid_steps)
    out = []
    respond = _mean_response_solver(p, grid) if cls == "major" else None
    for probe in range(mc_controls):
        if cls == "minor":
            v = random_piecewise_control(seed, probe, cls, p.B.shape[1], grid, pieces)
            out.append(_moment_functional(p.A, p.B, p.C, p.D, p.Q, p.R, p.Hw, v, grid.dt))
        elif cls == "follower":
            v = random_piecewise_control(seed, probe, cls, p.B_tilde.shape[1], grid, pieces)
            out.append(_moment_functional(p.A_tilde, p.B_tilde, p.C_tilde, p.D_tilde, p.Q_tilde,
                                          p.R_tilde, p.H_tilde_w, v, grid.dt))
        elif cls == "major":
            u = random_piecewise_control(seed, probe, cls, p.B0.shape[1], grid, pieces)
            _, a = respond(u)
            out.append(_moment_functional(
                p.A0, p.B0, p.C0, p.D0, p.Q0, p.R0, p.H0w, u, grid.dt,
                drift_force=a @ p.F0_1.T, diff_force=a @ p.F0_2.T, target=(1 - p.lambda0) * a))
        else:
            raise ValueError(f"unknown agent class {cls!r}")
    return out
