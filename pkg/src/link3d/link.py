"""Large-kernel aggregation through generated trigonometric kernels and block proxies.

Instead of storing a dense kernel tensor, each voxel gets a cos/sin weight
pair from a small linear map over its integer coordinates.  Voxels push their
weighted features into one proxy per block (an s^3 cube of the grid), blocks
gather the proxies of their r^3 neighborhood, and each voxel pulls its output
from its own block's gathered sums.  The cos/sin product identity

    cos(a - b) = cos(a) cos(b) + sin(a) sin(b)

makes the pulled result equal a direct pairwise aggregation with an
offset-dependent kernel, while the per-voxel work stays one push plus one
pull no matter how large the (r * s)^3 receptive cube grows.

``link_oracle`` is the quadratic-cost pairwise form of the same operator and
serves as the correctness reference for ``link_forward``.

Kernel phases are computed on per-batch *anchored* coordinates (the batch's
smallest-key voxel is subtracted).  In pure mode the realized operator is
identical to using raw coordinates, because the kernel only ever depends on
coordinate differences; anchoring additionally makes outputs bit-identical
under rigid translations by multiples of the block size.  Augmented mode is
origin-dependent by construction, and the anchor fixes its origin to a
canonical per-batch choice.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import COORD_BOUND, SparseTensor, _pack_keys_unchecked, pack_keys
from .errors import ConfigError, DimensionError

ORACLE_CHUNK_ELEMS = 1 << 22  # cap on pairwise work-array size per slice


# ---------------------------------------------------------------------------
# kernel generation
# ---------------------------------------------------------------------------

@dataclass
class KernelGenerator:
    """Linear map from voxel coordinates to per-channel cos/sin kernel weights.

    ``weight`` has one 3-vector per generated channel; ``frequency`` rescales
    the phase in augmented mode and is pinned to 1 in pure mode.  The
    ``channels / groups`` generated channels are block-repeated ``groups``
    times, so every generated weight serves several feature channels.
    """

    weight: np.ndarray          # (channels/groups, 3)
    frequency: np.ndarray       # (channels/groups,)
    mode: str                   # "pure" or "augmented"
    groups: int
    channels: int

    def __post_init__(self):
        if self.mode not in ("pure", "augmented"):
            raise ConfigError(f"unknown activation mode {self.mode!r}")
        if self.groups < 1 or self.channels < 1:
            raise ConfigError("groups and channels must be positive")
        if self.channels % self.groups != 0:
            raise ConfigError(
                f"groups={self.groups} does not divide channels={self.channels}"
            )
        gc = self.gen_channels
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.frequency = np.asarray(self.frequency, dtype=np.float64)
        if self.weight.shape != (gc, 3):
            raise ConfigError(f"weight must have shape ({gc}, 3)")
        if self.frequency.shape != (gc,):
            raise ConfigError(f"frequency must have shape ({gc},)")
        if (self.frequency <= 0).any():
            raise ConfigError("frequency entries must be positive")
        if self.mode == "pure" and not np.all(self.frequency == 1.0):
            raise ConfigError("pure mode fixes frequency at 1")

    @property
    def gen_channels(self) -> int:
        return self.channels // self.groups

    @classmethod
    def create(cls, channels, groups=1, mode="pure", kernel_extent=1, rng=None):
        """Random generator whose phase spans about one period over the extent."""
        rng = rng if rng is not None else np.random.default_rng(0)
        gc = channels // max(groups, 1)
        span = np.pi / max(kernel_extent, 1)
        weight = rng.uniform(-span, span, size=(gc, 3))
        return cls(
            weight=weight,
            frequency=np.ones(gc),
            mode=mode,
            groups=groups,
            channels=channels,
        )


def _tile_groups(gen_vals: np.ndarray, groups: int) -> np.ndarray:
    if groups == 1:
        return gen_vals
    return np.tile(gen_vals, (1, groups))


def _kernel_parts(gen: KernelGenerator, coords_xyz: np.ndarray, dtype):
    """Phase and generated-width cos/sin values, before group tiling."""
    x = np.asarray(coords_xyz, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"coords must be (N, 3), got shape {x.shape}")
    w = gen.weight.astype(dtype, copy=False)
    phase = x @ w.T                                   # (N, C/g)
    if gen.mode == "pure":
        k_cos = np.cos(phase)
        k_sin = np.sin(phase)
    else:
        freq = gen.frequency.astype(dtype, copy=False)
        scaled = freq * phase
        k_cos = np.cos(scaled) + phase
        k_sin = np.sin(scaled) + phase
    return phase, k_cos, k_sin


def generate_kernel(gen: KernelGenerator, coords_xyz, dtype=np.float64):
    """Per-voxel kernel weight pair, group-tiled to the full channel width.

    Pure mode returns (cos(Wx), sin(Wx)); augmented mode adds the learnable
    frequency and the identity term, (cos(a.Wx) + Wx, sin(a.Wx) + Wx).
    """
    _, k_cos, k_sin = _kernel_parts(gen, coords_xyz, dtype)
    return _tile_groups(k_cos, gen.groups), _tile_groups(k_sin, gen.groups)


def pairwise_kernel(gen: KernelGenerator, coords_a, coords_b, dtype=np.float64):
    """Product-form pair kernel k_cos(a).k_cos(b) + k_sin(a).k_sin(b).

    In pure mode this equals cos of the phase of (a - b); tests verify that
    identity against an independently computed cosine.
    """
    ca, sa = generate_kernel(gen, coords_a, dtype)
    cb, sb = generate_kernel(gen, coords_b, dtype)
    return ca * cb + sa * sb


def count_dense_kernel_params(kernel_size: int, c_in: int, c_out: int) -> int:
    """Parameter count of a stored dense kernel of the same spatial size."""
    if kernel_size < 1 or c_in < 1 or c_out < 1:
        raise ConfigError("arguments must be positive")
    return kernel_size ** 3 * c_in * c_out


def count_generator_params(gen: KernelGenerator) -> int:
    """Learnable scalars in the generator; independent of the kernel extent."""
    extra = gen.gen_channels if gen.mode == "augmented" else 0
    return 3 * gen.gen_channels + extra


# ---------------------------------------------------------------------------
# block partition and proxies
# ---------------------------------------------------------------------------

@dataclass
class BlockPartition:
    """Assignment of every voxel to its floor-divided block.

    Blocks are numbered in ascending packed-key order of their (batch, bx,
    by, bz) coordinates; only non-empty blocks exist.
    """

    block_size: int
    block_coords: np.ndarray       # (M, 4) int64, sorted by packed key
    block_keys: np.ndarray         # (M,) packed keys, ascending
    voxel_block: np.ndarray        # (N,) block id per voxel row
    populations: np.ndarray        # (M,) member counts
    row_order: np.ndarray          # (N,) voxel rows grouped by block id
    segment_starts: np.ndarray     # (M,) start of each block's run in row_order

    @property
    def num_blocks(self) -> int:
        return self.block_coords.shape[0]

    def block_rows(self, block_id: int) -> np.ndarray:
        """Member voxel rows of one block, ascending."""
        start = self.segment_starts[block_id]
        end = (
            self.segment_starts[block_id + 1]
            if block_id + 1 < self.num_blocks
            else self.row_order.shape[0]
        )
        return self.row_order[start:end]


def partition_blocks(t: SparseTensor, block_size: int) -> BlockPartition:
    """Group voxels into batch-local s^3 blocks via floor division."""
    if block_size < 1:
        raise ConfigError(f"block size must be >= 1, got {block_size}")
    blocks = t.coords.copy()
    blocks[:, 1:] = np.floor_divide(blocks[:, 1:], block_size)
    keys = pack_keys(blocks)
    uniq, first, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True
    )
    row_order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[row_order], np.arange(uniq.shape[0]))
    return BlockPartition(
        block_size=block_size,
        block_coords=blocks[first],
        block_keys=uniq,
        voxel_block=inverse,
        populations=counts,
        row_order=row_order,
        segment_starts=starts,
    )


def neighbor_offsets(neighbor_range: int) -> np.ndarray:
    """Block-offset cube of edge r: centered for odd r, floor-centered for even."""
    r = neighbor_range
    if r < 1:
        raise ConfigError(f"neighbor range must be >= 1, got {r}")
    lo = -(r // 2)  # floor-centered for even r, symmetric for odd r
    axis = np.arange(lo, lo + r, dtype=np.int64)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


@dataclass
class ProxySet:
    """Per-block aggregation state.

    ``proxy_cos`` / ``proxy_sin`` are the push sums of member voxels.  After
    gathering, ``gathered_cos`` / ``gathered_sin`` hold the summed proxies of
    the block's neighborhood and ``neighborhood_count`` the number of voxels
    inside it.
    """

    proxy_cos: np.ndarray                       # (M, C)
    proxy_sin: np.ndarray                       # (M, C)
    populations: np.ndarray                     # (M,)
    gathered_cos: Optional[np.ndarray] = None   # (M, C)
    gathered_sin: Optional[np.ndarray] = None   # (M, C)
    neighborhood_count: Optional[np.ndarray] = None  # (M,)


def push_proxies(
    part: BlockPartition, features: np.ndarray, k_cos: np.ndarray, k_sin: np.ndarray
) -> ProxySet:
    """Deposit every voxel's kernel-weighted feature into its block proxy."""
    n = part.voxel_block.shape[0]
    if features.shape[0] != n or k_cos.shape != features.shape or k_sin.shape != features.shape:
        raise DimensionError("features and kernel weights must share shape (N, C)")
    wc = (k_cos * features)[part.row_order]
    ws = (k_sin * features)[part.row_order]
    if n == 0:
        c = features.shape[1]
        zero = np.zeros((0, c), dtype=features.dtype)
        return ProxySet(zero, zero.copy(), part.populations)
    proxy_cos = np.add.reduceat(wc, part.segment_starts, axis=0)
    proxy_sin = np.add.reduceat(ws, part.segment_starts, axis=0)
    return ProxySet(proxy_cos, proxy_sin, part.populations)


GATHER_CHUNK_ROWS = 1 << 21  # cap on the (offset x block) probe batch


def _gather(
    part: BlockPartition,
    proxies: ProxySet,
    neighbor_range: int,
    drop_offset: Optional[Tuple[int, int, int]] = None,
):
    """Sum neighbor-block proxies; also returns the (dst, src) pair arrays.

    All r^3 offsets are probed in large batches so the index work stays a
    small constant factor over one pass regardless of the neighbor range.
    Pairs are produced in offset-major order, which fixes the summation
    order.
    """
    m = part.num_blocks
    g_cos = np.zeros_like(proxies.proxy_cos)
    g_sin = np.zeros_like(proxies.proxy_sin)
    count = np.zeros(m, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    if m == 0:
        return g_cos, g_sin, count, (empty, empty)
    offsets = neighbor_offsets(neighbor_range)
    if drop_offset is not None:
        offsets = offsets[
            ~(offsets == np.asarray(drop_offset, dtype=np.int64)).all(axis=1)
        ]
    k = offsets.shape[0]
    # when the whole scene sits safely inside the packable box, per-probe
    # bounds masks are unnecessary
    span = int(np.abs(offsets).max()) if k else 0
    xyz = part.block_coords[:, 1:]
    interior = m == 0 or (
        int(xyz.min()) - span >= -COORD_BOUND
        and int(xyz.max()) + span < COORD_BOUND
    )
    # block-major probe layout keeps dst sorted by construction
    step = max(1, GATHER_CHUNK_ROWS // max(k, 1))
    dst_parts: List[np.ndarray] = []
    src_parts: List[np.ndarray] = []
    for lo in range(0, m, step):
        blocks = part.block_coords[lo : lo + step]
        nb = np.repeat(blocks[:, None, :], k, axis=1)
        nb[:, :, 1:] += offsets[None, :, :]
        flat = nb.reshape(-1, 4)
        dst_all = np.repeat(np.arange(lo, lo + blocks.shape[0], dtype=np.int64), k)
        if interior:
            keys = _pack_keys_unchecked(flat)
        else:
            ok = (
                (flat[:, 1:] >= -COORD_BOUND) & (flat[:, 1:] < COORD_BOUND)
            ).all(axis=1)
            flat = flat[ok]
            dst_all = dst_all[ok]
            keys = _pack_keys_unchecked(flat)
        pos = np.searchsorted(part.block_keys, keys)
        pos_c = np.minimum(pos, m - 1)
        hit = part.block_keys[pos_c] == keys
        dst_parts.append(dst_all[hit])
        src_parts.append(pos_c[hit])
    dst = np.concatenate(dst_parts) if dst_parts else empty
    src = np.concatenate(src_parts) if src_parts else empty
    if dst.shape[0]:
        # contiguous runs per dst block, summed in offset order
        starts = np.r_[0, np.flatnonzero(np.diff(dst)) + 1]
        uniq_dst = dst[starts]
        g_cos[uniq_dst] = np.add.reduceat(proxies.proxy_cos[src], starts, axis=0)
        g_sin[uniq_dst] = np.add.reduceat(proxies.proxy_sin[src], starts, axis=0)
        count[uniq_dst] = np.add.reduceat(part.populations[src], starts)
    return g_cos, g_sin, count, (dst, src)


def gather_neighborhood(
    part: BlockPartition,
    proxies: ProxySet,
    neighbor_range: int,
    drop_offset: Optional[Tuple[int, int, int]] = None,
) -> ProxySet:
    """Fill the neighborhood sums and voxel counts of every block.

    ``drop_offset`` is a fault-injection hook for the verifier's negative
    control; production paths leave it None.
    """
    g_cos, g_sin, count, _ = _gather(part, proxies, neighbor_range, drop_offset)
    return ProxySet(
        proxy_cos=proxies.proxy_cos,
        proxy_sin=proxies.proxy_sin,
        populations=proxies.populations,
        gathered_cos=g_cos,
        gathered_sin=g_sin,
        neighborhood_count=count,
    )


def pull(
    t: SparseTensor,
    part: BlockPartition,
    proxies: ProxySet,
    k_cos: np.ndarray,
    k_sin: np.ndarray,
    normalize: bool = True,
) -> SparseTensor:
    """Reconstruct per-voxel aggregates from the gathered block sums."""
    if proxies.gathered_cos is None:
        raise ConfigError("pull requires gathered proxies; run gather_neighborhood")
    b = part.voxel_block
    out = proxies.gathered_cos[b] * k_cos + proxies.gathered_sin[b] * k_sin
    if normalize:
        out = out / proxies.neighborhood_count[b][:, None].astype(out.dtype)
    return t.with_features(out)


# ---------------------------------------------------------------------------
# the composed operator
# ---------------------------------------------------------------------------

@dataclass
class LinKConfig:
    """Block size s, neighbor range r, and the kernel generator to use."""

    block_size: int
    neighbor_range: int
    generator: KernelGenerator
    normalize: bool = True

    def __post_init__(self):
        if self.block_size < 1 or self.neighbor_range < 1:
            raise ConfigError("block_size and neighbor_range must be >= 1")

    @property
    def kernel_extent(self) -> int:
        """Edge length in voxels of the aggregation cube, r * s."""
        return self.block_size * self.neighbor_range


@dataclass
class OpCounters:
    """Abstract work counters (events, not wall time) for cost assertions."""

    push_macs: int = 0
    pull_macs: int = 0
    gather_proxy_reads: int = 0
    generator_evals: int = 0


@dataclass
class LinKState:
    """Forward intermediates needed by the exact backward pass."""

    partition: BlockPartition
    anchored_xyz: np.ndarray
    phase: np.ndarray
    k_cos: np.ndarray
    k_sin: np.ndarray
    proxies: ProxySet
    gather_pairs: Tuple[np.ndarray, np.ndarray]  # (dst blocks, src blocks)
    normalize: bool
    counters: OpCounters = field(default_factory=OpCounters)


def anchored_xyz(t: SparseTensor) -> np.ndarray:
    """Voxel xyz relative to the batch's smallest-key voxel.

    The anchor shifts rigidly with the scene, so these coordinates are exactly
    invariant under whole-scene translation.
    """
    xyz = t.coords[:, 1:]
    if t.num_voxels == 0:
        return xyz.copy()
    order = t._order
    sorted_batches = t.coords[order, 0]
    _, first = np.unique(sorted_batches, return_index=True)
    anchor_rows = order[first]
    # map each voxel's batch to its anchor row
    batch_ids = np.searchsorted(sorted_batches[first], t.coords[:, 0])
    anchors = t.coords[anchor_rows][:, 1:]
    return xyz - anchors[batch_ids]


def link_forward(t: SparseTensor, cfg: LinKConfig, return_state: bool = False):
    """Push -> gather -> pull composition of the block-proxy operator.

    Per-voxel cost does not depend on the kernel extent: each voxel
    contributes one push and one pull, and gathering touches at most r^3
    proxies per block.
    """
    if t.num_channels != cfg.generator.channels:
        raise DimensionError(
            f"tensor has {t.num_channels} channels, generator expects "
            f"{cfg.generator.channels}"
        )
    dtype = t.dtype
    coords = anchored_xyz(t)
    phase, kc_g, ks_g = _kernel_parts(cfg.generator, coords, dtype)
    k_cos = _tile_groups(kc_g, cfg.generator.groups)
    k_sin = _tile_groups(ks_g, cfg.generator.groups)
    part = partition_blocks(t, cfg.block_size)
    proxies = push_proxies(part, t.features, k_cos, k_sin)
    g_cos, g_sin, count, pairs = _gather(part, proxies, cfg.neighbor_range)
    gathered = ProxySet(
        proxies.proxy_cos, proxies.proxy_sin, proxies.populations,
        g_cos, g_sin, count,
    )
    out = pull(t, part, gathered, k_cos, k_sin, cfg.normalize)
    if not return_state:
        return out
    n = t.num_voxels
    counters = OpCounters(
        push_macs=2 * n,
        pull_macs=2 * n,
        gather_proxy_reads=int(pairs[0].shape[0]),
        generator_evals=n,
    )
    state = LinKState(
        partition=part,
        anchored_xyz=coords,
        phase=phase,
        k_cos=k_cos,
        k_sin=k_sin,
        proxies=gathered,
        gather_pairs=pairs,
        normalize=cfg.normalize,
        counters=counters,
    )
    return out, state


def link_backward(grad_out: np.ndarray, t: SparseTensor, cfg: LinKConfig, state: LinKState):
    """Exact adjoint of link_forward.

    Returns (grad_features, grad_weight, grad_frequency); grad_frequency is a
    zero vector in pure mode, where the frequency is not learnable.
    """
    if state is None:
        raise ConfigError("link_backward requires the state saved by link_forward")
    if grad_out.shape != t.features.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != features shape {t.features.shape}"
        )
    gen = cfg.generator
    part = state.partition
    prox = state.proxies
    b = part.voxel_block
    dtype = t.features.dtype

    g = grad_out
    if state.normalize:
        g = grad_out / prox.neighborhood_count[b][:, None].astype(dtype)

    # pull: out = gathered_cos[b] * k_cos + gathered_sin[b] * k_sin
    dk_cos = g * prox.gathered_cos[b]
    dk_sin = g * prox.gathered_sin[b]
    dg_cos = np.zeros_like(prox.gathered_cos)
    dg_sin = np.zeros_like(prox.gathered_sin)
    np.add.at(dg_cos, b, g * state.k_cos)
    np.add.at(dg_sin, b, g * state.k_sin)

    # gather: reverse the saved (dst, src) pairs; src repeats across offsets
    dproxy_cos = np.zeros_like(prox.proxy_cos)
    dproxy_sin = np.zeros_like(prox.proxy_sin)
    dst, src = state.gather_pairs
    np.add.at(dproxy_cos, src, dg_cos[dst])
    np.add.at(dproxy_sin, src, dg_sin[dst])

    # push: proxy = sum over members of k * f
    grad_features = dproxy_cos[b] * state.k_cos + dproxy_sin[b] * state.k_sin
    dk_cos += dproxy_cos[b] * t.features
    dk_sin += dproxy_sin[b] * t.features

    # undo group tiling
    n = t.num_voxels
    gc = gen.gen_channels
    dkc = dk_cos.reshape(n, gen.groups, gc).sum(axis=1)
    dks = dk_sin.reshape(n, gen.groups, gc).sum(axis=1)

    phase = state.phase
    if gen.mode == "pure":
        dphase = -np.sin(phase) * dkc + np.cos(phase) * dks
        grad_frequency = np.zeros(gc, dtype=np.float64)
    else:
        freq = gen.frequency.astype(dtype, copy=False)
        s_ = np.sin(freq * phase)
        c_ = np.cos(freq * phase)
        dphase = dkc * (1.0 - freq * s_) + dks * (1.0 + freq * c_)
        grad_frequency = (
            (dkc * (-phase * s_) + dks * (phase * c_)).sum(axis=0).astype(np.float64)
        )
    grad_weight = (dphase.T @ state.anchored_xyz.astype(dtype)).astype(np.float64)
    return grad_features, grad_weight, grad_frequency


# ---------------------------------------------------------------------------
# brute-force pairwise reference
# ---------------------------------------------------------------------------

def _oracle_block(out, rows, nb_rows, features, k_cos, k_sin, normalize):
    p0 = rows.shape[0]
    p1 = nb_rows.shape[0]
    c = features.shape[1]
    fc = k_cos[nb_rows]
    fs = k_sin[nb_rows]
    fv = features[nb_rows]
    denom = p1 if normalize else 1
    step = max(1, ORACLE_CHUNK_ELEMS // max(p1 * c, 1))
    for lo in range(0, p0, step):
        sub = rows[lo : lo + step]
        kappa = k_cos[sub][:, None, :] * fc[None, :, :] + k_sin[sub][:, None, :] * fs[None, :, :]
        out[sub] = (kappa * fv[None, :, :]).sum(axis=1) / denom


def link_oracle(
    t: SparseTensor,
    cfg: LinKConfig,
    n_workers: int = 1,
    return_stats: bool = False,
):
    """Direct pairwise aggregation over each voxel's block neighborhood.

    Quadratic in the neighborhood population, intended as a test and
    benchmark reference for :func:`link_forward`.  Neighbor blocks are
    enumerated through a plain dictionary, independent of the sorted-key
    machinery used by the factorized path.
    """
    if t.num_channels != cfg.generator.channels:
        raise DimensionError(
            f"tensor has {t.num_channels} channels, generator expects "
            f"{cfg.generator.channels}"
        )
    dtype = t.dtype
    coords = anchored_xyz(t)
    k_cos, k_sin = generate_kernel(cfg.generator, coords, dtype)
    part = partition_blocks(t, cfg.block_size)
    block_ids = {tuple(bc): i for i, bc in enumerate(part.block_coords)}
    offsets = neighbor_offsets(cfg.neighbor_range)
    out = np.zeros_like(t.features)
    pair_count = 0
    jobs = []
    for i in range(part.num_blocks):
        batch, bx, by, bz = part.block_coords[i]
        nb_rows = []
        for dx, dy, dz in offsets:
            j = block_ids.get((batch, bx + dx, by + dy, bz + dz))
            if j is not None:
                nb_rows.append(part.block_rows(j))
        nb = np.concatenate(nb_rows)
        rows = part.block_rows(i)
        pair_count += rows.shape[0] * nb.shape[0]
        jobs.append((rows, nb))
    if n_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(
                pool.map(
                    lambda job: _oracle_block(
                        out, job[0], job[1], t.features, k_cos, k_sin, cfg.normalize
                    ),
                    jobs,
                )
            )
    else:
        for rows, nb in jobs:
            _oracle_block(out, rows, nb, t.features, k_cos, k_sin, cfg.normalize)
    result = t.with_features(out)
    if return_stats:
        return result, pair_count
    return result
