"""Distributed OPF: one atom per bus, coordinated only through neighbour messages.

Scheme
------
Consensus ADMM on the branch-flow program. Every variable has exactly one
owner atom, which holds its box/cone constraints and cost. Every atom also keeps
a local copy of each variable appearing in its own linear rows (nodal balance,
voltage drop and the links to its cone coordinates): its own variables, its
parent's voltage and its children's line flows.

A round has two synchronous exchanges:

``state``
    owners send current values; each atom over-relaxes, projects its copy
    vector onto its affine rows (the multipliers of that projection are the
    atom's price estimates) and takes a dual ascent step on the copy
    multipliers.
``contrib``
    copy holders send ``copy - multiplier`` back to the owner; the owner takes
    a proximal step (closed-form clip or second-order-cone projection).

Each cone ``P^2 + Q^2 <= l * v_parent`` is carried by four owned coordinates
``y = ((l + v_p)/sqrt2, sqrt2 P, sqrt2 Q, (l - v_p)/sqrt2)`` which lie in the
standard second-order cone, so the owner's projection is exact.

Kernels operate on row blocks of atoms, so a single atom and a batch of atoms
run the same arithmetic; run_rounds partitions atoms across workers and the
result does not depend on the partition.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .opf import (LF, PF, PG, PL, QF, QG, V, DlmpVector, OpfProblem, OpfSolution,
                  Status, restore_lossless_flows, sweep_flows)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# owned slots
S_PG, S_QG, S_PL, S_V, S_P, S_Q, S_L, S_Y0, S_Y1, S_Y2, S_Y3 = range(11)
N_OWN = 11
SLOT_BLOCK = {S_PG: PG, S_QG: QG, S_PL: PL, S_V: V, S_P: PF, S_Q: QF, S_L: LF}
# local rows
R_BP, R_BQ, R_V, R_YP, R_YQ, R_Y0, R_Y3 = range(7)
N_ROWS = 7
ROW_NAMES = ("balance_p", "balance_q", "voltage", "cone_p", "cone_q", "cone_sum", "cone_diff")


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_rounds: int = 20000
    eps_primal: float = 1e-7
    eps_consistency: float = 1e-7
    eps_dual: float = 1e-7
    rho: float = 1.0
    relaxation: float = 1.6
    seed: int = 0
    init_jitter: float = 0.0
    workers: int = 1
    warm_start: bool = True

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        for name in ("eps_primal", "eps_consistency", "eps_dual", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.relaxation < 2.0:
            raise ValueError("relaxation must lie in (0, 2)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class RoundMessage:
    """One boundary message on a tree edge.

    Downward payload (parent to child): ``(v_parent, contrib_P, contrib_Q)``.
    Upward payload (child to parent): ``(P, Q, contrib_v)``. The first fields are
    the sender's owned values, the last its copy contributions for variables the
    receiver owns.
    """

    round: int
    kind: str          # "state" or "contrib"
    sender: int
    receiver: int
    payload: tuple

    def payload_hash(self) -> str:
        raw = np.asarray(self.payload, dtype=np.float64).tobytes()
        return hashlib.sha256(raw).hexdigest()[:16]

    def audit_record(self) -> dict:
        return {"round": self.round, "kind": self.kind, "from": self.sender,
                "to": self.receiver, "payload_hash": self.payload_hash()}


# -- static structure --------------------------------------------------------

@dataclass
class AtomSet:
    """Struct-of-arrays store of every atom's static data and state.

    Row ``i`` is the atom of bus ``bus_ids[i]`` (topology order, root first).
    Local copy vectors have layout ``[11 owned | parent v | child P... | child Q...]``
    padded to the widest atom.
    """

    problem: OpfProblem
    bus_ids: tuple
    parent: np.ndarray          # (N,) parent row, -1 at the root
    child_slot: np.ndarray      # (N,) position of the atom among its parent's children
    children: np.ndarray        # (N, M) child rows, -1 padded
    width: int                  # M
    lb: np.ndarray              # (N, 11)
    ub: np.ndarray
    cost: np.ndarray
    reg: np.ndarray
    ref: np.ndarray
    ncopies: np.ndarray
    no_export: np.ndarray       # (N,) bool
    has_cone: np.ndarray        # (N,) bool
    A: np.ndarray               # (N, 7, Z)
    b: np.ndarray               # (N, 7)
    proj: np.ndarray            # (N, Z, Z) affine projector
    lift: np.ndarray            # (N, Z, 7) maps b into the projector's offset
    dual_map: np.ndarray        # (N, 7, Z)
    dual_b: np.ndarray          # (N, 7, 7)
    valid: np.ndarray           # (N, Z) bool, real copy slots
    # state
    x: np.ndarray = None        # (N, 11) owned values
    z: np.ndarray = None        # (N, Z) local copies
    u: np.ndarray = None        # (N, Z) scaled copy multipliers
    eta: np.ndarray = None      # (N, 7) row multipliers (unscaled)
    round: int = 0
    rho: float = 1.0

    def __post_init__(self):
        # one stacked map for y and one constant offset (b never changes)
        z = self.proj.shape[1]
        self.ymap = np.concatenate([self.proj, self.dual_map], axis=1)
        self.offset = np.concatenate([_matvec(self.lift, self.b), -_matvec(self.dual_b, self.b)], axis=1)
        self._z = z

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def zlen(self) -> int:
        return N_OWN + 1 + 2 * self.width

    def n_consistency(self) -> int:
        """Number of owner/copy consistency constraints (copies held by non-owners)."""
        return int(self.valid[:, N_OWN:].sum())

    def neighbours(self, i: int) -> list[int]:
        out = [int(self.parent[i])] if self.parent[i] >= 0 else []
        return out + [int(k) for k in self.children[i] if k >= 0]

    def atom(self, i: int) -> "Atom":
        return Atom(
            bus=self.bus_ids[i],
            index=i,
            parent=None if self.parent[i] < 0 else self.bus_ids[self.parent[i]],
            children=tuple(self.bus_ids[k] for k in self.children[i] if k >= 0),
            blocks=self,
            x=self.x[i].copy(),
            z=self.z[i].copy(),
            u=self.u[i].copy(),
            eta=self.eta[i].copy(),
            round=self.round,
        )

    def store(self, atom: "Atom") -> None:
        i = atom.index
        self.x[i], self.z[i], self.u[i], self.eta[i] = atom.x, atom.z, atom.u, atom.eta

    def mu_p(self) -> np.ndarray:
        return -self.eta[:, R_BP].copy()

    def mu_q(self) -> np.ndarray:
        return -self.eta[:, R_BQ].copy()


@dataclass
class Atom:
    """State of a single bus agent; static data is read from its row of ``blocks``."""

    bus: int
    index: int
    parent: Optional[int]
    children: tuple
    blocks: AtomSet = field(repr=False)
    x: np.ndarray = None
    z: np.ndarray = None
    u: np.ndarray = None
    eta: np.ndarray = None
    round: int = 0

    @property
    def mu_p(self) -> float:
        return -float(self.eta[R_BP])

    @property
    def mu_q(self) -> float:
        return -float(self.eta[R_BQ])

    @property
    def neighbours(self) -> tuple:
        return ((self.parent,) if self.parent is not None else ()) + self.children


def atomize(problem: OpfProblem, warm: Optional[AtomSet] = None, rho: float = 1.0,
            seed: int = 0, init_jitter: float = 0.0) -> AtomSet:
    n = problem.n
    parent = problem.parent.copy()
    kids = [[] for _ in range(n)]
    for i in range(1, n):
        kids[parent[i]].append(i)
    width = max(1, max(len(k) for k in kids))
    children = np.full((n, width), -1, dtype=int)
    child_slot = np.full(n, -1, dtype=int)
    for i, ks in enumerate(kids):
        children[i, :len(ks)] = ks
        for s, k in enumerate(ks):
            child_slot[k] = s
    Z = N_OWN + 1 + 2 * width
    c_vp, c_pc, c_qc = N_OWN, N_OWN + 1, N_OWN + 1 + width

    lb = np.zeros((n, N_OWN))
    ub = np.zeros((n, N_OWN))
    cost = np.zeros((n, N_OWN))
    reg = np.zeros((n, N_OWN))
    ref = np.zeros((n, N_OWN))
    for slot, blk in SLOT_BLOCK.items():
        sl = slice(blk * n, (blk + 1) * n)
        lb[:, slot], ub[:, slot] = problem.lb[sl], problem.ub[sl]
        cost[:, slot] = problem.c[sl]
        reg[:, slot] = problem.reg[sl]
        ref[:, slot] = problem.reg_ref[sl]
    # a lossless line (switch) has l in no affine row: pin it and drop its cone
    lossless = (problem.r == 0.0) & (problem.x == 0.0)
    lossless[0] = True
    lb[lossless, S_L] = ub[lossless, S_L] = 0.0
    reg[lossless, S_L] = 0.0
    lb[:, S_Y0:], ub[:, S_Y0:] = -np.inf, np.inf
    lb[lossless, S_Y0:], ub[lossless, S_Y0:] = 0.0, 0.0
    has_cone = ~lossless

    ncopies = np.ones((n, N_OWN))
    ncopies[:, S_V] += (children >= 0).sum(axis=1)
    ncopies[1:, S_P] += 1
    ncopies[1:, S_Q] += 1

    valid = np.zeros((n, Z), dtype=bool)
    valid[:, :N_OWN] = True
    valid[1:, c_vp] = True
    for i, ks in enumerate(kids):
        valid[i, c_pc:c_pc + len(ks)] = True
        valid[i, c_qc:c_qc + len(ks)] = True

    A = np.zeros((n, N_ROWS, Z))
    b = np.zeros((n, N_ROWS))
    r, xr = problem.r, problem.x
    for i in range(n):
        m = len(kids[i])
        A[i, R_BP, [S_P, S_PG, S_PL, S_L]] = [1.0, 1.0, -1.0, -r[i]]
        A[i, R_BP, c_pc:c_pc + m] = -1.0
        A[i, R_BQ, [S_Q, S_QG, S_L]] = [1.0, 1.0, -xr[i]]
        A[i, R_BQ, c_qc:c_qc + m] = -1.0
        b[i, R_BP] = problem.b_eq[i]
        b[i, R_BQ] = problem.b_eq[n + i]
        if i == 0:
            continue
        A[i, R_V, [S_V, c_vp]] = [1.0, -1.0]
        if lossless[i]:
            continue
        A[i, R_V, [S_V, c_vp, S_P, S_Q, S_L]] = [1.0, -1.0, 2 * r[i], 2 * xr[i], -(r[i] ** 2 + xr[i] ** 2)]
        A[i, R_YP, [S_Y1, S_P]] = [1.0, -SQRT2]
        A[i, R_YQ, [S_Y2, S_Q]] = [1.0, -SQRT2]
        A[i, R_Y0, [S_Y0, S_L, c_vp]] = [1.0, -1 / SQRT2, -1 / SQRT2]
        A[i, R_Y3, [S_Y3, S_L, c_vp]] = [1.0, -1 / SQRT2, 1 / SQRT2]

    H = np.linalg.pinv(A @ A.transpose(0, 2, 1))
    lift = A.transpose(0, 2, 1) @ H
    proj = np.eye(Z)[None] - lift @ A
    dual_map = H @ A

    no_export = np.zeros(n, dtype=bool)
    if problem.A_in.shape[0]:
        no_export[:] = True

    atoms = AtomSet(
        problem=problem, bus_ids=problem.bus_ids, parent=parent, child_slot=child_slot,
        children=children, width=width, lb=lb, ub=ub, cost=cost, reg=reg, ref=ref,
        ncopies=ncopies, no_export=no_export, has_cone=has_cone, A=A, b=b, proj=proj,
        lift=lift, dual_map=dual_map, dual_b=H, valid=valid, rho=rho,
    )
    if warm is not None and warm.n == n and warm.width == width:
        atoms.x = warm.x.copy()
        atoms.z = warm.z.copy()
        atoms.u = warm.u * (warm.rho / rho)
        atoms.eta = warm.eta.copy()
        atoms.x = _clip_owned(atoms, atoms.x)
    else:
        _cold_start(atoms, seed, init_jitter)
    return atoms


def _clip_owned(atoms: AtomSet, x: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[:, :S_Y0] = np.clip(out[:, :S_Y0], atoms.lb[:, :S_Y0], atoms.ub[:, :S_Y0])
    return out


def _cold_start(atoms: AtomSet, seed: int, jitter: float) -> None:
    n = atoms.n
    lb, ub = atoms.lb[:, :S_Y0], atoms.ub[:, :S_Y0]
    both = np.isfinite(lb) & np.isfinite(ub)
    x = np.zeros((n, N_OWN))
    mid = 0.5 * (np.where(both, lb, 0.0) + np.where(both, ub, 0.0))
    x[:, :S_Y0] = np.where(both, mid, np.clip(0.0, lb, ub))
    if jitter > 0:
        rng = np.random.default_rng(seed)
        span = np.where(both, ub - lb, 1.0)
        x[:, :S_Y0] = np.clip(x[:, :S_Y0] + jitter * span * rng.uniform(-0.5, 0.5, size=span.shape), lb, ub)
    # cone coordinates consistent with the owner values
    vp = np.where(atoms.parent >= 0, x[np.maximum(atoms.parent, 0), S_V], 0.0)
    cone = atoms.has_cone
    x[cone, S_Y0] = (x[cone, S_L] + vp[cone]) / SQRT2
    x[cone, S_Y1] = SQRT2 * x[cone, S_P]
    x[cone, S_Y2] = SQRT2 * x[cone, S_Q]
    x[cone, S_Y3] = (x[cone, S_L] - vp[cone]) / SQRT2
    atoms.x = x
    atoms.z = owner_view(atoms, x)
    atoms.u = np.zeros_like(atoms.z)
    atoms.eta = np.zeros((n, N_ROWS))
    atoms.round = 0


def owner_view(atoms: AtomSet, x: np.ndarray, rows=None) -> np.ndarray:
    """Owner values laid out like each atom's copy vector (what the state exchange delivers)."""
    rows = np.arange(atoms.n) if rows is None else rows
    w = atoms.width
    out = np.zeros((len(rows), atoms.zlen))
    out[:, :N_OWN] = x[rows]
    par = atoms.parent[rows]
    has_par = par >= 0
    out[has_par, N_OWN] = x[par[has_par], S_V]
    kids = atoms.children[rows]
    mask = kids >= 0
    safe = np.maximum(kids, 0)
    out[:, N_OWN + 1:N_OWN + 1 + w] = np.where(mask, x[safe, S_P], 0.0)
    out[:, N_OWN + 1 + w:] = np.where(mask, x[safe, S_Q], 0.0)
    return out


def contribution_sums(atoms: AtomSet, m: np.ndarray, rows=None) -> np.ndarray:
    """Sum of ``copy - multiplier`` over every copy of each owned variable."""
    rows = np.arange(atoms.n) if rows is None else rows
    w = atoms.width
    s = m[rows, :N_OWN].copy()
    kids = atoms.children[rows]
    mask = kids >= 0
    s[:, S_V] += np.where(mask, m[np.maximum(kids, 0), N_OWN], 0.0).sum(axis=1)
    par = atoms.parent[rows]
    has_par = par >= 0
    slot = atoms.child_slot[rows][has_par]
    s[has_par, S_P] += m[par[has_par], N_OWN + 1 + slot]
    s[has_par, S_Q] += m[par[has_par], N_OWN + 1 + w + slot]
    return s


# -- kernels -----------------------------------------------------------------

def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.matmul(M, v[:, :, None])[:, :, 0]


def affine_step(atoms: AtomSet, rows, xin, z, u, rho, relax):
    """Over-relaxed affine projection and dual ascent for a block of atoms.

    Returns (z_new, u_new, eta).
    """
    xhat = relax * xin + (1.0 - relax) * z
    xhat = np.where(atoms.valid[rows], xhat, 0.0)
    y = xhat + u
    w = _matvec(atoms.ymap[rows], y) + atoms.offset[rows]
    zl = atoms._z
    z_new, eta = w[:, :zl], rho * w[:, zl:]
    u_new = y - z_new
    return z_new, u_new, eta


def prox_step(atoms: AtomSet, rows, sums, rho):
    """Closed-form owner update for a block of atoms."""
    n = atoms.ncopies[rows]
    reg = atoms.reg[rows]
    x = (rho * sums + 2.0 * reg * atoms.ref[rows] - atoms.cost[rows]) / (rho * n + 2.0 * reg)
    x[:, :S_Y0] = np.clip(x[:, :S_Y0], atoms.lb[rows, :S_Y0], atoms.ub[rows, :S_Y0])
    ne = atoms.no_export[rows]
    if ne.any():
        raw_g = (rho * sums[:, S_PG] - atoms.cost[rows, S_PG]) / (rho * n[:, S_PG] + 2 * reg[:, S_PG])
        raw_l = (rho * sums[:, S_PL] - atoms.cost[rows, S_PL]) / (rho * n[:, S_PL] + 2 * reg[:, S_PL])
        g, l = _project_no_export(raw_g, raw_l, atoms.lb[rows, S_PG], atoms.ub[rows, S_PG],
                                  atoms.lb[rows, S_PL], atoms.ub[rows, S_PL])
        x[ne, S_PG] = g[ne]
        x[ne, S_PL] = l[ne]
    cone = atoms.has_cone[rows]
    x[:, S_Y0:] = np.where(cone[:, None], project_soc(x[:, S_Y0:]), 0.0)
    return x


def _project_no_export(g, l, glo, ghi, llo, lhi):
    """Euclidean projection onto {glo<=g<=ghi, llo<=l<=lhi, g<=l}."""
    gb = np.clip(g, glo, ghi)
    lb_ = np.clip(l, llo, lhi)
    ok = gb <= lb_
    t = np.clip(0.5 * (g + l), np.maximum(glo, llo), np.minimum(ghi, lhi))
    return np.where(ok, gb, t), np.where(ok, lb_, t)


def project_soc(y: np.ndarray) -> np.ndarray:
    """Project rows ``(t, w)`` onto the cone ``||w|| <= t``."""
    t = y[:, 0]
    w = y[:, 1:]
    nw = np.sqrt((w * w).sum(axis=1))
    out = y.copy()
    below = nw <= -t
    out[below] = 0.0
    mid = ~(nw <= t) & ~below
    if mid.any():
        a = 0.5 * (t[mid] + nw[mid])
        out[mid, 0] = a
        out[mid, 1:] = (a / nw[mid])[:, None] * w[mid]
    return out


# -- per-atom protocol -------------------------------------------------------

def outbox_for(atoms: AtomSet, atom: Atom, kind: str, m: Optional[np.ndarray] = None) -> list:
    """Messages ``atom`` sends to each neighbour after a step of the given kind.

    Both fields are always present: the owned values come from ``atom.x`` and
    the contributions from ``atom.z - atom.u``.
    """
    i = atom.index
    w = atoms.width
    m = atom.z - atom.u if m is None else m
    msgs = []
    if atom.parent is not None:
        msgs.append(RoundMessage(atom.round, kind, atom.bus, atom.parent,
                                 (float(atom.x[S_P]), float(atom.x[S_Q]), float(m[N_OWN]))))
    for s, k in enumerate(atoms.children[i]):
        if k < 0:
            continue
        msgs.append(RoundMessage(atom.round, kind, atom.bus, atoms.bus_ids[k],
                                 (float(atom.x[S_V]), float(m[N_OWN + 1 + s]),
                                  float(m[N_OWN + 1 + w + s]))))
    return msgs


def _check_inbox(atom: Atom, inbox: Sequence[RoundMessage], kind: str) -> dict:
    got = {}
    for msg in inbox:
        if msg.receiver != atom.bus:
            raise ProtocolError(f"message for {msg.receiver} delivered to {atom.bus}")
        if msg.kind != kind or msg.round != atom.round:
            raise ProtocolError(f"atom {atom.bus} expected {kind} round {atom.round}, "
                                f"got {msg.kind} round {msg.round}")
        if msg.sender in got:
            raise ProtocolError(f"duplicate message from {msg.sender}")
        got[msg.sender] = msg.payload
    missing = set(atom.neighbours) - set(got)
    if missing:
        raise ProtocolError(f"atom {atom.bus} missing messages from {sorted(missing)}")
    extra = set(got) - set(atom.neighbours)
    if extra:
        raise ProtocolError(f"atom {atom.bus} got messages from non-neighbours {sorted(extra)}")
    return got


def local_update(atom: Atom, inbox: Sequence[RoundMessage], rho: float = 1.0,
                 relax: float = 1.6) -> tuple:
    """Advance one atom by one exchange, using only its own state and ``inbox``.

    A ``state`` inbox (neighbours' owned values) triggers the affine projection
    and dual ascent; a ``contrib`` inbox (neighbours' copy contributions) triggers
    the proximal owner step. Returns the updated atom and its outbox.
    """
    atoms = atom.blocks
    kinds = {m.kind for m in inbox}
    if len(kinds) > 1:
        raise ProtocolError("mixed message kinds in one inbox")
    kind = kinds.pop() if kinds else ("state" if getattr(atom, "_phase", "state") == "state" else "contrib")
    got = _check_inbox(atom, inbox, kind)
    i = atom.index
    rows = np.array([i])
    w = atoms.width
    new = replace(atom, x=atom.x.copy(), z=atom.z.copy(), u=atom.u.copy(), eta=atom.eta.copy())
    if kind == "state":
        xin = np.zeros((1, atoms.zlen))
        xin[0, :N_OWN] = atom.x
        if atom.parent is not None:
            xin[0, N_OWN] = got[atom.parent][0]
        for s, k in enumerate(atom.children):
            xin[0, N_OWN + 1 + s] = got[k][0]
            xin[0, N_OWN + 1 + w + s] = got[k][1]
        z, u, eta = affine_step(atoms, rows, xin, atom.z[None], atom.u[None], rho, relax)
        new.z, new.u, new.eta = z[0], u[0], eta[0]
        new._phase = "contrib"
        return new, outbox_for(atoms, new, "contrib")
    m = atom.z - atom.u
    sums = m[None, :N_OWN].copy()
    for s, k in enumerate(atom.children):
        sums[0, S_V] += got[k][2]
    if atom.parent is not None:
        sums[0, S_P] += got[atom.parent][1]
        sums[0, S_Q] += got[atom.parent][2]
    new.x = prox_step(atoms, rows, sums, rho)[0]
    new.round = atom.round + 1
    new._phase = "state"
    return new, outbox_for(atoms, new, "state")


# -- synchronous engine ------------------------------------------------------

@dataclass
class DistributedSolution(OpfSolution):
    rounds_used: int = 0
    residual_trace: list = field(default_factory=list)
    consistency_trace: list = field(default_factory=list)
    atoms: Optional[AtomSet] = None


def consistency_residual(atoms: AtomSet) -> float:
    """max |owner value - copy| over all consistency constraints."""
    own = owner_view(atoms, atoms.x)
    diff = np.abs(own - atoms.z)[:, N_OWN:][atoms.valid[:, N_OWN:]]
    return float(diff.max(initial=0.0))


def copy_residual(atoms: AtomSet) -> float:
    """max |owner value - copy| including each owner's own copies."""
    own = owner_view(atoms, atoms.x)
    return float(np.abs(own - atoms.z)[atoms.valid].max(initial=0.0))


def constraint_residual(atoms: AtomSet) -> float:
    own = owner_view(atoms, atoms.x)
    return float(np.abs(_matvec(atoms.A, own) - atoms.b).max(initial=0.0))


def _chunks(n: int, workers: int) -> list:
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class _Audit:
    def __init__(self, sink):
        self.sink = sink

    def record(self, atoms: AtomSet, kind: str, m: np.ndarray) -> None:
        for i in range(atoms.n):
            atom = atoms.atom(i)
            for msg in outbox_for(atoms, atom, kind, m[i]):
                self.sink(msg)


def run_rounds(atoms: AtomSet, config: SolverConfig = SolverConfig(), audit=None) -> DistributedSolution:
    """Run synchronous rounds until converged or ``config.max_rounds``.

    ``audit``, if given, is called with every RoundMessage exchanged.
    """
    rho, relax = atoms.rho, config.relaxation
    if not math.isclose(rho, config.rho):
        atoms.u *= atoms.rho / config.rho
        rho = atoms.rho = config.rho
    chunks = _chunks(atoms.n, config.workers)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    tracer = _Audit(audit) if audit is not None else None

    def run(fn):
        if pool is None:
            return [fn(rows) for rows in chunks]
        return list(pool.map(fn, chunks))

    trace, cons_trace = [], []
    y_prev = atoms.z + atoms.u
    status = Status.MAX_ITER
    rounds = 0
    try:
        for k in range(config.max_rounds):
            x = atoms.x
            z_old = atoms.z
            if tracer is not None:
                tracer.record(atoms, "state", atoms.z - atoms.u)

            def share(rows):
                xin = owner_view(atoms, x, rows)
                return affine_step(atoms, rows, xin, atoms.z[rows], atoms.u[rows], rho, relax)

            z = np.empty_like(atoms.z)
            u = np.empty_like(atoms.u)
            eta = np.empty_like(atoms.eta)
            for rows, (zr, ur, er) in zip(chunks, run(share)):
                z[rows], u[rows], eta[rows] = zr, ur, er
            atoms.z, atoms.u, atoms.eta = z, u, eta
            m = z - u
            if tracer is not None:
                tracer.record(atoms, "contrib", m)

            def gather(rows):
                return prox_step(atoms, rows, contribution_sums(atoms, m, rows), rho)

            xn = np.empty_like(atoms.x)
            for rows, xr in zip(chunks, run(gather)):
                xn[rows] = xr
            atoms.x = xn
            atoms.round += 1
            rounds = k + 1

            y = z + u
            trace.append(float(np.sqrt(((y - y_prev)[atoms.valid] ** 2).sum())))
            y_prev = y
            own = owner_view(atoms, xn)
            gap = np.abs(own - z)
            r_cons = float(gap[atoms.valid].max(initial=0.0))
            r_dual = rho * float(np.abs(z - z_old)[atoms.valid].max(initial=0.0))
            r_prim = float(np.abs(_matvec(atoms.A, own) - atoms.b).max(initial=0.0))
            cons_trace.append(float(gap[:, N_OWN:][atoms.valid[:, N_OWN:]].max(initial=0.0)))
            if r_cons <= config.eps_consistency and r_prim <= config.eps_primal and r_dual <= config.eps_dual:
                status = Status.OPTIMAL
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return assemble_solution(atoms, status, rounds, trace, cons_trace)


def assemble_solution(atoms: AtomSet, status: Status, rounds: int, trace: list,
                      cons_trace: list = ()) -> DistributedSolution:
    problem = atoms.problem
    n = atoms.n
    xvec = np.zeros(problem.n_var)
    for slot, blk in SLOT_BLOCK.items():
        xvec[blk * n:(blk + 1) * n] = atoms.x[:, slot]
    # flows follow from the agreed injections and currents; the sweep makes the
    # reported dispatch balance exactly instead of to the stopping tolerance
    xvec = restore_lossless_flows(problem, sweep_flows(problem, xvec))
    return DistributedSolution(
        problem=problem,
        status=status,
        xvec=xvec,
        objective=problem.objective(xvec),
        mu_p=atoms.mu_p(),
        mu_q=atoms.mu_q(),
        iterations=rounds,
        rounds_used=rounds,
        residual_trace=trace,
        atoms=atoms,
        consistency_trace=list(cons_trace),
        info={"consistency": cons_trace[-1] if len(cons_trace) else float("nan")},
    )


def solve_distributed(problem: OpfProblem, config: SolverConfig = SolverConfig(),
                      warm: Optional[AtomSet] = None, audit=None) -> DistributedSolution:
    atoms = atomize(problem, warm=warm if config.warm_start else None, rho=config.rho,
                    seed=config.seed, init_jitter=config.init_jitter)
    return run_rounds(atoms, config, audit=audit)


def dlmp_of(solution: DistributedSolution) -> DlmpVector:
    p = solution.problem
    return DlmpVector(t=p.interval.t, bus_ids=p.bus_ids, mu_p=solution.mu_p.copy(),
                      mu_q=solution.mu_q.copy())


# -- structural checks -------------------------------------------------------

def reassemble(atoms: AtomSet) -> dict:
    """Atom rows re-expressed over centralized variable indices.

    Cone-link rows are eliminated by substituting the cone coordinates, which
    turns each atom's cone into ``P^2 + Q^2 <= l * v_parent``. Lines with
    r = x = 0 carry no cone here (their l is pinned and recovered afterwards),
    so canonical_constraints omits those cones too. Returns
    ``{"rows": set of (frozenset((var, coef)), rhs), "cones": set of tuples}``.
    """
    problem = atoms.problem
    n, w = atoms.n, atoms.width

    def var_of(i, col):
        if col < S_Y0:
            return SLOT_BLOCK[col] * n + i
        if col == N_OWN:
            return V * n + atoms.parent[i]
        if N_OWN + 1 <= col < N_OWN + 1 + w:
            return PF * n + atoms.children[i, col - N_OWN - 1]
        if col >= N_OWN + 1 + w:
            return QF * n + atoms.children[i, col - N_OWN - 1 - w]
        return None

    rows, cones = set(), set()
    for i in range(n):
        for r in (R_BP, R_BQ, R_V):
            coefs = {}
            for col in np.flatnonzero(atoms.A[i, r]):
                var = var_of(i, col)
                coefs[int(var)] = coefs.get(int(var), 0.0) + float(atoms.A[i, r, col])
            if coefs:
                rows.add((frozenset((k, round(v, 12)) for k, v in coefs.items() if v != 0.0),
                          round(float(atoms.b[i, r]), 12)))
        if atoms.has_cone[i]:
            cones.add((PF * n + i, QF * n + i, LF * n + i, V * n + int(atoms.parent[i])))
    return {"rows": rows, "cones": cones}


def canonical_constraints(problem: OpfProblem) -> dict:
    A = problem.A_eq.tocsr()
    rows = set()
    for r in range(A.shape[0]):
        sl = slice(A.indptr[r], A.indptr[r + 1])
        rows.add((frozenset((int(k), round(float(v), 12)) for k, v in zip(A.indices[sl], A.data[sl]) if v != 0.0),
                  round(float(problem.b_eq[r]), 12)))
    lossless = (problem.r[1:] == 0.0) & (problem.x[1:] == 0.0)
    cones = {tuple(int(v) for v in c) for c in problem.cones[~lossless]}
    return {"rows": rows, "cones": cones}


def write_audit_log(messages: Sequence[RoundMessage], path) -> None:
    with open(path, "w") as fh:
        for msg in messages:
            fh.write(json.dumps(msg.audit_record()) + "\n")
