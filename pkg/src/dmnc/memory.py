"""Differentiable external memory with content, allocation, and temporal-link
addressing, plus a cache-gated write path and write protection.

One instance holds N cells of width D addressed by R read heads. Two of them
back the dual-memory model: each encoder writes only to its own memory, while
reads either stay view-local ("late" fusion) or span the vertical
concatenation of both memories ("early" fusion, 2N addressable rows).

Interface vector layout (offsets grow left to right; width = R*D + 4*D + 5*R + 3):

    field           size   squash
    read_keys       R*D    none
    read_strengths  R      oneplus  (strengths live in (1, inf))
    write_key       D      none
    write_strength  1      oneplus
    erase           D      sigmoid
    write_value     D      none
    free_gates      R      sigmoid
    alloc_gate      1      sigmoid
    write_gate      1      sigmoid
    cache_gate      D      sigmoid  (per-dimension hold gate for the cache)
    read_modes      3*R    3-way softmax per head: (backward, content, forward)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Linear
from .tensor import Tensor

FUSION_MODES = ("late", "early")

_ONE = T.constant(1.0)

# Zero-diagonal masks for the link matrix, keyed by N.
_DIAG_MASKS: dict[int, Tensor] = {}


def _diag_mask(n: int) -> Tensor:
    mask = _DIAG_MASKS.get(n)
    if mask is None:
        mask = T.constant(1.0 - np.eye(n))
        _DIAG_MASKS[n] = mask
    return mask


def _scale_rows(mat: Tensor, vec: Tensor) -> Tensor:
    """Row i of the result is row i of ``mat`` times ``vec[i]``."""
    return T.transpose(T.mul(T.transpose(mat), vec))


@dataclass(frozen=True)
class MemoryConfig:
    """Shape of one external memory: N cells, D-wide words, R read heads."""

    cells: int
    word: int
    read_heads: int

    def __post_init__(self) -> None:
        if self.cells < 1 or self.word < 1 or self.read_heads < 1:
            raise DimensionError(
                f"memory config must be positive, got N={self.cells} "
                f"D={self.word} R={self.read_heads}")


# ---------------------------------------------------------------------------
# Interface vector
# ---------------------------------------------------------------------------


class InterfaceLayout:
    """Fixed field offsets inside the flat controller interface vector."""

    def __init__(self, word: int, read_heads: int):
        self.word = word
        self.read_heads = read_heads
        sizes = [
            ("read_keys", read_heads * word),
            ("read_strengths", read_heads),
            ("write_key", word),
            ("write_strength", 1),
            ("erase", word),
            ("write_value", word),
            ("free_gates", read_heads),
            ("alloc_gate", 1),
            ("write_gate", 1),
            ("cache_gate", word),
            ("read_modes", 3 * read_heads),
        ]
        self.bounds: dict[str, tuple[int, int]] = {}
        start = 0
        for name, size in sizes:
            self.bounds[name] = (start, start + size)
            start += size
        self.width = start

    def slice(self, name: str) -> slice:
        lo, hi = self.bounds[name]
        return slice(lo, hi)


def interface_width(word: int, read_heads: int) -> int:
    return InterfaceLayout(word, read_heads).width


@dataclass
class InterfaceVector:
    """Split and squashed controller interface for one memory step."""

    read_keys: list[Tensor]        # R tensors of shape (D,)
    read_strengths: list[Tensor]   # R scalars in (1, inf)
    write_key: Tensor              # (D,)
    write_strength: Tensor         # scalar in (1, inf)
    erase: Tensor                  # (D,) in [0, 1]
    write_value: Tensor            # (D,)
    free_gates: Tensor             # (R,) in [0, 1]
    alloc_gate: Tensor             # scalar in [0, 1]
    write_gate: Tensor             # scalar in [0, 1]
    cache_gate: Tensor             # (D,) in [0, 1]
    read_modes: list[Tensor]       # R simplex triples (backward, content, forward)


def split_raw(raw: Tensor, layout: InterfaceLayout) -> InterfaceVector:
    """Slice a flat pre-squash vector into the fields of the layout table."""
    if raw.shape != (layout.width,):
        raise DimensionError(
            f"interface vector has shape {raw.shape}, layout needs ({layout.width},)")
    d, r = layout.word, layout.read_heads
    keys_lo = layout.bounds["read_keys"][0]
    modes_lo = layout.bounds["read_modes"][0]
    strengths_lo = layout.bounds["read_strengths"][0]
    return InterfaceVector(
        read_keys=[raw[keys_lo + i * d:keys_lo + (i + 1) * d] for i in range(r)],
        read_strengths=[T.oneplus(raw[strengths_lo + i]) for i in range(r)],
        write_key=raw[layout.slice("write_key")],
        write_strength=T.oneplus(raw[layout.bounds["write_strength"][0]]),
        erase=T.sigmoid(raw[layout.slice("erase")]),
        write_value=raw[layout.slice("write_value")],
        free_gates=T.sigmoid(raw[layout.slice("free_gates")]),
        alloc_gate=T.sigmoid(raw[layout.bounds["alloc_gate"][0]]),
        write_gate=T.sigmoid(raw[layout.bounds["write_gate"][0]]),
        cache_gate=T.sigmoid(raw[layout.slice("cache_gate")]),
        read_modes=[T.softmax(raw[modes_lo + 3 * i:modes_lo + 3 * (i + 1)])
                    for i in range(r)],
    )


def interface_split(o: Tensor, params: Linear, layout: InterfaceLayout) -> InterfaceVector:
    """Map a controller output through ``params`` and split per the layout."""
    if params.out_dim != layout.width:
        raise DimensionError(
            f"interface map emits {params.out_dim} values, layout needs {layout.width}")
    return split_raw(params(o), layout)


# ---------------------------------------------------------------------------
# Memory state
# ---------------------------------------------------------------------------


class MemoryState:
    """Full addressing state of one memory.

    ``read_span`` is the length of the stored read weightings: N for late
    fusion, 2N for early fusion where reads range over both memories.
    """

    def __init__(self, config: MemoryConfig, read_span: int | None = None):
        self.config = config
        self.read_span = config.cells if read_span is None else read_span
        self.write_protected = False
        self.reset()

    def reset(self) -> None:
        """Zero every array; the write-protect flag is left alone."""
        n, d = self.config.cells, self.config.word
        self.mem = T.constant(np.zeros((n, d)))
        self.usage = T.constant(np.zeros(n))
        self.precedence = T.constant(np.zeros(n))
        self.link = T.constant(np.zeros((n, n)))
        self.write_weight = T.constant(np.zeros(n))
        self.read_weights = [T.constant(np.zeros(self.read_span))
                             for _ in range(self.config.read_heads)]
        self.cache = T.constant(np.zeros(d))

    def set_write_protect(self, flag: bool) -> None:
        self.write_protected = bool(flag)

    def detach(self) -> None:
        """Rebind every field to a constant copy with no tape history.

        Called at admission boundaries: the carried state keeps its values
        but stops gradients from flowing into earlier admissions.
        """
        self.mem = self.mem.detach()
        self.usage = self.usage.detach()
        self.precedence = self.precedence.detach()
        self.link = self.link.detach()
        self.write_weight = self.write_weight.detach()
        self.read_weights = [w.detach() for w in self.read_weights]
        self.cache = self.cache.detach()

    def arrays(self) -> dict[str, np.ndarray]:
        """Named copies of every float array (checkpoint serialization)."""
        out = {
            "mem": self.mem.data.copy(),
            "usage": self.usage.data.copy(),
            "precedence": self.precedence.data.copy(),
            "link": self.link.data.copy(),
            "write_weight": self.write_weight.data.copy(),
            "cache": self.cache.data.copy(),
        }
        for i, w in enumerate(self.read_weights):
            out[f"read_weight_{i}"] = w.data.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.mem = T.constant(arrays["mem"])
        self.usage = T.constant(arrays["usage"])
        self.precedence = T.constant(arrays["precedence"])
        self.link = T.constant(arrays["link"])
        self.write_weight = T.constant(arrays["write_weight"])
        self.cache = T.constant(arrays["cache"])
        self.read_weights = [T.constant(arrays[f"read_weight_{i}"])
                             for i in range(self.config.read_heads)]


# ---------------------------------------------------------------------------
# Addressing operations
# ---------------------------------------------------------------------------


def content_weighting(mem: Tensor, key: Tensor, strength: Tensor) -> Tensor:
    """Softmax over rows of strength-scaled cosine similarity to the key."""
    return T.softmax(T.mul(strength, T.cosine_rows(mem, key)))


def update_usage(usage: Tensor, prev_write: Tensor, prev_reads: list[Tensor],
                 free_gates: Tensor) -> Tensor:
    """Usage after a write and the freeing effect of the previous reads.

    Algebraically (u + w - u*w) * psi with retention
    psi = prod_i (1 - f_i * r_i); the growth term is computed in the
    complementary form 1 - (1-u)(1-w) so the unit interval stays closed
    under floating point.
    """
    grown = T.sub(_ONE, T.mul(T.sub(_ONE, usage), T.sub(_ONE, prev_write)))
    retention = None
    for i, read in enumerate(prev_reads):
        factor = T.sub(_ONE, T.mul(free_gates[i], read))
        retention = factor if retention is None else T.mul(retention, factor)
    if retention is None:
        return grown
    return T.mul(grown, retention)


def allocation_weighting(usage: Tensor) -> Tensor:
    """Weighting that favours the least-used cells.

    Cells sorted by ascending usage (ties by index) receive
    (1 - u) times the running product of the usages sorted before them.
    The sort permutation is a constant under differentiation.
    """
    order = np.argsort(usage.data, kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    sorted_usage = T.take(usage, order)
    before = T.cumprod_exclusive(sorted_usage)
    sorted_alloc = T.mul(T.sub(_ONE, sorted_usage), before)
    return T.take(sorted_alloc, inverse)


def write_weighting(content: Tensor, alloc: Tensor, alloc_gate: Tensor) -> Tensor:
    """Interpolate allocation against content addressing by the gate."""
    return T.add(T.mul(alloc_gate, alloc),
                 T.mul(T.sub(_ONE, alloc_gate), content))


def update_linkage(link: Tensor, precedence: Tensor, g_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Temporal link and precedence update for an effective write g_hat.

    L'_ij = (1 - g_i - g_j) L_ij + g_i p_j with the previous precedence,
    zero diagonal, entries clamped to [0, 1]; then p' = (1 - sum g) p + g.
    """
    n = g_hat.shape[0]
    decayed = T.sub(T.sub(link, _scale_rows(link, g_hat)), T.mul(link, g_hat))
    fresh = T.outer(g_hat, precedence)
    new_link = T.clip01(T.mul(T.add(decayed, fresh), _diag_mask(n)))
    keep = T.sub(_ONE, T.reduce_sum(g_hat))
    new_precedence = T.add(T.mul(keep, precedence), g_hat)
    return new_link, new_precedence


def read_weighting(modes: Tensor, content: Tensor, link: Tensor,
                   prev_read: Tensor) -> Tensor:
    """Mix backward, content, and forward addressing by the mode simplex."""
    forward = T.matmul(link, prev_read)
    backward = T.matmul(T.transpose(link), prev_read)
    return T.add(T.add(T.mul(modes[0], backward), T.mul(modes[1], content)),
                 T.mul(modes[2], forward))


def cache_update(cache: Tensor, gate: Tensor, value: Tensor) -> Tensor:
    """Per-dimension blend: gate holds the cache, its complement admits value."""
    return T.add(T.mul(gate, cache), T.mul(T.sub(_ONE, gate), value))


def memory_write(state: MemoryState, write_gate: Tensor, write_weight: Tensor,
                 erase: Tensor, payload: Tensor) -> Tensor:
    """Erase-then-add memory update M * (E - g w e^T) + g w payload^T."""
    if state.write_protected:
        raise ContractError("memory write attempted while write-protected")
    g_hat = T.mul(write_gate, write_weight)
    keep = T.sub(_ONE, T.outer(g_hat, erase))
    return T.add(T.mul(state.mem, keep), T.outer(g_hat, payload))


def memory_read(mem: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of rows: r = M^T w."""
    return T.matmul(T.transpose(mem), weights)


# ---------------------------------------------------------------------------
# Composite steps
# ---------------------------------------------------------------------------


def write_step(state: MemoryState, iface: InterfaceVector, mode: str,
               own_rows: slice | None = None) -> None:
    """Advance one memory through a full write: usage, allocation, content,
    the gated write itself, and the temporal link update.

    In late mode the payload is the raw write value; in early mode the write
    value first enters the cache and the (possibly held) cache is committed.
    ``own_rows`` selects this memory's rows out of the stored read weightings
    when those span both memories (early fusion).
    """
    if mode not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {mode!r}")
    if state.write_protected:
        raise ContractError("write step attempted while write-protected")
    prev_reads = state.read_weights
    if own_rows is not None:
        prev_reads = [read[own_rows] for read in prev_reads]
    usage = update_usage(state.usage, state.write_weight, prev_reads,
                         iface.free_gates)
    alloc = allocation_weighting(usage)
    content = content_weighting(state.mem, iface.write_key, iface.write_strength)
    weight = write_weighting(content, alloc, iface.alloc_gate)
    if mode == "early":
        cache = cache_update(state.cache, iface.cache_gate, iface.write_value)
        payload = cache
    else:
        cache = state.cache
        payload = iface.write_value
    mem = memory_write(state, iface.write_gate, weight, iface.erase, payload)
    g_hat = T.mul(iface.write_gate, weight)
    link, precedence = update_linkage(state.link, state.precedence, g_hat)
    state.mem = mem
    state.usage = usage
    state.precedence = precedence
    state.link = link
    state.write_weight = g_hat
    state.cache = cache


def fused_read(iface: InterfaceVector, mem1: MemoryState, mem2: MemoryState,
               mode: str, owner: int) -> list[Tensor]:
    """Read vectors for the encoder that owns memory ``owner`` (1 or 2).

    Late fusion addresses the owner's memory alone. Early fusion addresses
    the vertical concatenation [M1; M2] with 2N-long weightings whose
    temporal terms apply each memory's own link to its own rows. The new
    weightings are stored on the owner's state.
    """
    if mode not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {mode!r}")
    if owner not in (1, 2):
        raise ContractError(f"owner must be 1 or 2, got {owner!r}")
    own = mem1 if owner == 1 else mem2
    reads: list[Tensor] = []
    if mode == "late":
        for i in range(own.config.read_heads):
            content = content_weighting(own.mem, iface.read_keys[i],
                                        iface.read_strengths[i])
            weight = read_weighting(iface.read_modes[i], content, own.link,
                                    own.read_weights[i])
            own.read_weights[i] = weight
            reads.append(memory_read(own.mem, weight))
        return reads
    n = mem1.config.cells
    if own.read_span != n + mem2.config.cells:
        raise ContractError(
            f"early fusion needs read span {n + mem2.config.cells}, "
            f"state has {own.read_span}")
    stacked = T.concat([mem1.mem, mem2.mem], axis=0)
    for i in range(own.config.read_heads):
        content = content_weighting(stacked, iface.read_keys[i],
                                    iface.read_strengths[i])
        prev = own.read_weights[i]
        prev1, prev2 = prev[:n], prev[n:]
        forward = T.concat([T.matmul(mem1.link, prev1),
                            T.matmul(mem2.link, prev2)])
        backward = T.concat([T.matmul(T.transpose(mem1.link), prev1),
                             T.matmul(T.transpose(mem2.link), prev2)])
        modes = iface.read_modes[i]
        weight = T.add(T.add(T.mul(modes[0], backward),
                             T.mul(modes[1], content)),
                       T.mul(modes[2], forward))
        own.read_weights[i] = weight
        reads.append(memory_read(stacked, weight))
    return reads


def content_read(state: MemoryState, key: Tensor, strength: Tensor) -> Tensor:
    """One content-only read; never touches the stored addressing state."""
    weight = content_weighting(state.mem, key, strength)
    return memory_read(state.mem, weight)
