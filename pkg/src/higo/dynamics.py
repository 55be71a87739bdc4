"""Hierarchical graph ODE: adaptive message passing, attention pooling/unpooling, V-cycle.

Node states are (B, N, D) arrays in raster order of each level's grid.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import arraycore as ac
from .arraycore import Array
from .hiergraph import Hierarchy, LevelGraph
from .odeint import SolverConfig, SolverError, Trace, integrate
from .params import ModelParams, init_mlp2, mlp2

__all__ = ["init_dynamics", "admp", "downsample", "upsample", "level_derivative", "evolve",
           "SequencingError", "DIAGNOSTICS", "HierState"]

DIAGNOSTICS: Counter = Counter()


class SequencingError(RuntimeError):
    """Upsampling was requested without the matching downsampling pass."""


@dataclass
class HierState:
    states: list[Array]
    betas: list[Array] = field(default_factory=list)


def init_dynamics(p: ModelParams, D: int, L: int, time_input: bool = False):
    for l in range(L):
        init_mlp2(p, f"dyn.l{l}.edge_score", 2 * D + 1, D, 1)
        init_mlp2(p, f"dyn.l{l}.edge_msg", 2 * D + 1, D, D)
        init_mlp2(p, f"dyn.l{l}.node", 2 * D + (1 if time_input else 0), D, D)
    for l in range(L - 1):
        init_mlp2(p, f"down.l{l}", 4 * D, D, 1)
        p.add(f"up.l{l}.ln.g", (D,), fill=1.0)
        p.add(f"up.l{l}.ln.b", (D,), fill=0.0)


def _edge_mlp(p: ModelParams, prefix: str, x: Array, graph: LevelGraph, D: int) -> Array:
    """MLP on [x_i || x_j || e_ij] for every neighbour slot -> (B, N, 4, out).

    The first layer is split by input block so the node terms are projected
    once per node and then gathered, instead of once per edge.
    """
    W1, b1 = p[f"{prefix}.W1"], p[f"{prefix}.b1"]
    B, N = x.shape[0], x.shape[1]
    hid = W1.shape[1]
    self_part = ac.reshape(ac.linear(x, W1[:D]), (B, N, 1, hid))
    nbr = ac.sparse_rows(graph.gather_matrix(), ac.linear(x, W1[D:2 * D]), axis=1)
    nbr = ac.reshape(nbr, (B, N, 4, hid))
    edge = ac.Array(graph.edge_feature[:, :, None]) * ac.reshape(W1[2 * D], (1, 1, hid)) + b1
    h = ac.gelu(self_part + nbr + edge)
    return ac.linear(h, p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def admp(state: Array, graph: LevelGraph, p: ModelParams, level: int, mode: str = "adaptive",
         return_alpha: bool = False):
    """Neighbour messages m_i = sum_j alpha_ij e_hat_ij on one level.

    ``mode='adaptive'`` normalises learned edge scores with a softmax over the
    neighbourhood; ``mode='mean'`` uses alpha_ij = 1/deg(i). Isolated nodes get
    a zero message and are tallied in ``DIAGNOSTICS['isolated_nodes']``.
    """
    if state.shape[-2] != graph.num_nodes:
        raise ValueError(f"admp: state has {state.shape[-2]} nodes, graph has {graph.num_nodes}")
    squeeze = state.ndim == 2
    if squeeze:
        state = ac.reshape(state, (1,) + state.shape)
    B, N, D = state.shape
    isolated = int(np.sum(graph.degree == 0))
    if isolated:
        DIAGNOSTICS["isolated_nodes"] += isolated
    mask = graph.slot_mask
    e_hat = _edge_mlp(p, f"dyn.l{level}.edge_msg", state, graph, D)
    if mode == "adaptive":
        w = ac.reshape(_edge_mlp(p, f"dyn.l{level}.edge_score", state, graph, D), (B, N, 4))
        alpha = ac.softmax(w, axis=-1, mask=mask)
    elif mode == "mean":
        deg = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        alpha = Array(np.broadcast_to(np.where(mask, 1.0, 0.0) / deg, (B, N, 4)))
    else:
        raise ValueError(f"unknown message-passing mode {mode!r}")
    m = ac.sum(ac.reshape(alpha, (B, N, 4, 1)) * e_hat, axis=2)
    if squeeze:
        m = ac.reshape(m, (N, D))
    return (m, alpha) if return_alpha else m


def _beta_selector(hier: Hierarchy, l: int) -> sp.csr_matrix:
    ch = hier.children[l]
    n_par = ch.shape[0]
    n_child = hier.levels[l].num_nodes
    cols = np.arange(4 * n_par)
    return sp.csr_matrix((np.ones(4 * n_par), (ch.ravel(), cols)), shape=(n_child, 4 * n_par))


def downsample(child: Array, hier: Hierarchy, l: int, p: ModelParams):
    """Attention pooling from level l to l+1.

    Returns ``(parent_state, beta)`` where ``beta`` is (B, N_l): each child's
    softmax weight within its 2x2 block.
    """
    B, _, D = child.shape
    picks = [ac.sparse_rows(m, child, axis=1) for m in hier.child_matrices(l)]
    n_par = picks[0].shape[1]
    # child k's score reads the concatenation rotated to start at child k, so
    # the four weights come from one scorer and identical children tie
    rolled = [ac.reshape(ac.concat(picks[k:] + picks[:k], axis=-1), (B, n_par, 1, 4 * D))
              for k in range(4)]
    logits = ac.reshape(mlp2(p, f"down.l{l}", ac.concat(rolled, axis=2)), (B, n_par, 4))
    beta_block = ac.softmax(logits, axis=-1)                         # (B, Np, 4)
    stacked = ac.reshape(ac.concat(picks, axis=-1), (B, n_par, 4, D))
    parent = ac.sum(ac.reshape(beta_block, (B, n_par, 4, 1)) * stacked, axis=2)
    beta = ac.sparse_rows(_beta_selector(hier, l), ac.reshape(beta_block, (B, 4 * n_par)), axis=1)
    return parent, beta


def upsample(child: Array, parent: Array, beta: Array | None, hier: Hierarchy, l: int,
             p: ModelParams, normalize: bool = True) -> Array:
    """LayerNorm((1 - beta_k) x_k + beta_k x_parent(k)) using the cached pooling weights."""
    if beta is None:
        raise SequencingError(f"no cached beta for transition {l}->{l + 1}; downsample first")
    B, N, D = child.shape
    par = ac.sparse_rows(hier.parent_matrix(l), parent, axis=1)
    b = ac.reshape(beta, (B, N, 1))
    blend = (1.0 - b) * child + b * par
    if not normalize:
        return blend
    return ac.layer_norm(blend, p[f"up.l{l}.ln.g"], p[f"up.l{l}.ln.b"])


def level_derivative(level: int, t: float, state: Array, hier: Hierarchy, p: ModelParams,
                     mode: str = "adaptive", time_input: bool = False) -> Array:
    """dX/dt on one level: node MLP over [state || admp messages]."""
    m = admp(state, hier.levels[level], p, level, mode)
    parts = [state, m]
    if time_input:
        parts.append(Array(np.full(state.shape[:-1] + (1,), float(t))))
    return mlp2(p, f"dyn.l{level}.node", ac.concat(parts, axis=-1))


def evolve(x0: Array, hier: Hierarchy, p: ModelParams, t_span: tuple[float, float],
           solver: SolverConfig, t_eval=(), mode: str = "adaptive", time_input: bool = False,
           trace: list | None = None):
    """V-cycle: pool all levels at t0, integrate each level independently, unpool.

    Returns ``(fine_state_at_t1, [fine_state_at_t for t in t_eval])``. With
    ``solver.method == 'dopri5'`` the levels are integrated on plain numpy
    without recording a tape.
    """
    if x0.shape[-2] != hier.levels[0].num_nodes:
        raise ValueError(f"evolve: state has {x0.shape[-2]} nodes, level 1 has "
                         f"{hier.levels[0].num_nodes}")
    t0, t1 = t_span
    states, betas = [x0], []
    for l in range(hier.L - 1):
        parent, beta = downsample(states[-1], hier, l, p)
        states.append(parent)
        betas.append(beta)

    finals: list[Array] = []
    interiors: list[list[Array]] = []
    for l, s in enumerate(states):
        try:
            if solver.method == "dopri5":
                def f_np(x, t, l=l):
                    with ac.no_grad():
                        return level_derivative(l, t, Array(x), hier, p, mode, time_input).data
                tr = None
                if trace is not None:
                    tr = Trace()
                    trace.append((l, tr))
                end, mids = integrate(f_np, s.data, t0, t1, solver, t_eval=t_eval, trace=tr)
                finals.append(Array(end))
                interiors.append([Array(m) for m in mids])
            else:
                def f(x, t, l=l):
                    return level_derivative(l, t, x, hier, p, mode, time_input)
                end, mids = integrate(f, s, t0, t1, solver, t_eval=t_eval)
                finals.append(end)
                interiors.append(list(mids))
        except (SolverError, FloatingPointError) as exc:
            raise SolverError(f"level {l + 1}: {exc}") from exc

    def unpool(level_states):
        cur = level_states[-1]
        for l in range(hier.L - 2, -1, -1):
            cur = upsample(level_states[l], cur, betas[l], hier, l, p)
        return cur

    end_state = unpool(finals)
    mids = [unpool([interiors[l][i] for l in range(hier.L)]) for i in range(len(t_eval))]
    return end_state, mids
