"""Deterministic mean-field layer: E[X] forward, E[Y], E[Z] by the ansatz, feedback gains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CCBlocks, InitialLaw, ModelParams
from .riccati import (MatrixPath, RiccatiPair, TimeGrid, ansatz_factor, central_difference,
                      integrate_forward, solve_cc_riccati)

CLASSES = ("major", "minor", "follower")
CLASS_BLOCK = {"major": 0, "minor": 1, "follower": 2}


def class_coefficients(params: ModelParams, cls: str):
    """(B, D, R) of an agent class."""
    return {
        "major": (params.B0, params.D0, params.R0),
        "minor": (params.B, params.D, params.R),
        "follower": (params.B_tilde, params.D_tilde, params.R_tilde),
    }[cls]


@dataclass(frozen=True)
class MeanFieldTrajectory:
    EX: MatrixPath
    EY: MatrixPath
    EZ: MatrixPath
    n: int

    @property
    def grid(self) -> TimeGrid:
        return self.EX.grid

    def block(self, j: int) -> MatrixPath:
        n = self.n
        d = None if self.EX.derivative is None else self.EX.derivative[:, j * n:(j + 1) * n]
        return MatrixPath(self.grid, self.EX.values[:, j * n:(j + 1) * n], d)

    @property
    def X0bar(self) -> MatrixPath:
        return self.block(0)

    @property
    def mX(self) -> MatrixPath:
        return self.block(1)

    @property
    def mx(self) -> MatrixPath:
        return self.block(2)

    @property
    def EK(self) -> MatrixPath:
        return self.block(3)


def _closed_loop_mean_matrix(b: CCBlocks, P, Pi, t):
    M = ansatz_factor(P, b.F_blk, t)
    return b.A_blk + b.Abar_blk + b.B_blk @ Pi + b.E_blk @ M @ (b.C_blk + b.Cbar_blk + b.D_blk @ Pi)


def solve_mean_field(blocks: CCBlocks, riccati: RiccatiPair,
                     initial: InitialLaw | None = None) -> MeanFieldTrajectory:
    """RK4 for dE[X]/dt = (A + Abar) E[X] + B E[Y] + E E[Z] with E[Y] = Pi E[X]."""
    grid = riccati.grid
    n = blocks.n
    x0 = np.array(blocks.X0_stack_mean, dtype=float)
    if initial is not None:
        x0[:n] = initial.mean_xi0

    def rhs(t, x):
        return _closed_loop_mean_matrix(blocks, riccati.P.at(t), riccati.Pi.at(t), t) @ x

    EX = integrate_forward(rhs, x0, grid)
    ts = grid.points
    EY = np.einsum("kij,kj->ki", riccati.Pi.values, EX.values)
    EZ = np.empty_like(EY)
    for k, t in enumerate(ts):
        P, Pi = riccati.P.values[k], riccati.Pi.values[k]
        M = ansatz_factor(P, blocks.F_blk, t)
        EZ[k] = M @ (blocks.C_blk + blocks.Cbar_blk + blocks.D_blk @ Pi) @ EX.values[k]
    return MeanFieldTrajectory(EX, MatrixPath(grid, EY), MatrixPath(grid, EZ), n)


def drift_consistency_residual(blocks: CCBlocks, riccati: RiccatiPair,
                               mf: MeanFieldTrajectory) -> float:
    """Sup-norm of Pi' E[X] + Pi dE[X]/dt + (A'+A0')E[Y] + (C'+C0')E[Z] + (Q+Qbar)E[X].

    Time derivatives are central differences of the stored paths (interior points).
    """
    g = riccati.grid
    dPi = central_difference(riccati.Pi.values, g.dt)
    dEX = central_difference(mf.EX.values, g.dt)
    b = blocks
    AT = b.A_blk.T + b.A0_blk.T
    CT = b.C_blk.T + b.C0_blk.T
    QQ = b.Q_blk + b.Qbar_blk
    worst = 0.0
    for i, k in enumerate(range(1, g.K)):
        EX, EY, EZ = mf.EX.values[k], mf.EY.values[k], mf.EZ.values[k]
        r = dPi[i] @ EX + riccati.Pi.values[k] @ dEX[i] + AT @ EY + CT @ EZ + QQ @ EX
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def ansatz_adjoints(blocks: CCBlocks, riccati: RiccatiPair, mf: MeanFieldTrajectory,
                    k: int, X: np.ndarray):
    """Y = P(X - E[X]) + Pi E[X] and Z from the diffusion identity, for states X[..., 4n]."""
    P, Pi = riccati.P.values[k], riccati.Pi.values[k]
    EX = mf.EX.values[k]
    M = ansatz_factor(P, blocks.F_blk, riccati.grid.points[k])
    Y = (X - EX) @ P.T + Pi @ EX
    Z = (blocks.C_blk @ (X - EX).T).T + (blocks.C_blk + blocks.Cbar_blk) @ EX + Y @ blocks.D_blk.T
    return Y, Z @ M.T


@dataclass(frozen=True)
class FeedbackGains:
    """Per class: control(t_k) = gain[k] @ X + offset[k] on the stacked state X."""

    gain: dict
    offset: dict
    n: int

    def control(self, cls: str, k: int, X: np.ndarray) -> np.ndarray:
        return X @ self.gain[cls][k].T + self.offset[cls][k]

    def block(self, cls: str, k: int, j: int) -> np.ndarray:
        n = self.n
        return self.gain[cls][k][:, j * n:(j + 1) * n]


def build_feedback_gains(blocks: CCBlocks, riccati: RiccatiPair, mf: MeanFieldTrajectory,
                         params: ModelParams) -> FeedbackGains:
    """u = -R^-1 (B' Y_b + D' Z_b) rewritten as an affine map of the stacked state."""
    b = blocks
    n = b.n
    K = riccati.grid.K
    gain, offset = {}, {}
    for cls in CLASSES:
        Bc, Dc, Rc = class_coefficients(params, cls)
        j = CLASS_BLOCK[cls]
        rows = slice(j * n, (j + 1) * n)
        Rinv = np.linalg.inv(Rc)
        G = np.empty((K + 1, Bc.shape[1], 4 * n))
        g = np.empty((K + 1, Bc.shape[1]))
        for k, t in enumerate(riccati.grid.points):
            P, Pi = riccati.P.values[k], riccati.Pi.values[k]
            EX = mf.EX.values[k]
            M = ansatz_factor(P, b.F_blk, t)
            Zx = M @ (b.C_blk + b.D_blk @ P)
            Zc = M @ (b.Cbar_blk + b.D_blk @ (Pi - P)) @ EX
            Yc = (Pi - P) @ EX
            G[k] = -Rinv @ (Bc.T @ P[rows] + Dc.T @ Zx[rows])
            g[k] = -Rinv @ (Bc.T @ Yc[rows] + Dc.T @ Zc[rows])
        gain[cls], offset[cls] = G, g
    return FeedbackGains(gain, offset, n)


@dataclass(frozen=True)
class LimitingCosts:
    J0: float
    Jl: float
    Jf: float
    J0_se: float
    Jl_se: float
    Jf_se: float

    def as_dict(self) -> dict:
        return {"J0": self.J0, "Jl": self.Jl, "Jf": self.Jf,
                "J0_se": self.J0_se, "Jl_se": self.Jl_se, "Jf_se": self.Jf_se}


def limiting_costs(params: ModelParams, riccati: RiccatiPair, mf: MeanFieldTrajectory,
                   gains: FeedbackGains, mc: int, seed: int,
                   initial: InitialLaw | None = None) -> LimitingCosts:
    """Monte Carlo of the auxiliary costs along simulated decoupled stacked paths."""
    from .simulate import representative_costs, sample_brownian, simulate_stacked_cc

    if mc < 2:
        raise ValueError("limiting_costs needs at least two paths")
    bundle = sample_brownian(riccati.grid, mc, seed)
    path = simulate_stacked_cc(riccati.blocks, riccati, mf, bundle, initial=initial, gains=gains)
    J = representative_costs(params, path, mf)
    stats = {}
    for name, vals in J.items():
        stats[name] = (float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(len(vals))))
    return LimitingCosts(stats["J0"][0], stats["Jl"][0], stats["Jf"][0],
                         stats["J0"][1], stats["Jl"][1], stats["Jf"][1])


@dataclass(frozen=True)
class Equilibrium:
    """Everything the simulation layer needs, solved once per scenario."""

    params: ModelParams
    initial: InitialLaw
    blocks: CCBlocks
    riccati: RiccatiPair
    mf: MeanFieldTrajectory
    gains: FeedbackGains


def solve_equilibrium(config) -> Equilibrium:
    from .errors import ValidationError
    from .model import assemble_cc_blocks, validate_scenario

    violations = validate_scenario(config)
    if violations:
        raise ValidationError(violations)
    p = config.params
    blocks = assemble_cc_blocks(p, mean_xi0=config.initial.mean_xi0)
    riccati = solve_cc_riccati(blocks, TimeGrid(p.T, config.grid_steps))
    mf = solve_mean_field(blocks, riccati, config.initial)
    gains = build_feedback_gains(blocks, riccati, mf, p)
    return Equilibrium(p, config.initial, blocks, riccati, mf, gains)
