"""Partitioned KV cache with spectrally compressed middle region.

Per layer and KV head, the cache splits a sequence three ways: the first
``init_len`` tokens and the trailing ``local_len`` tokens are stored exactly;
everything between keeps its selected dimensions verbatim and folds the rest
into fixed-size spectral states. During decoding, new tokens enter a local
ring buffer and the evicted oldest local token is split the same way, so the
spectral storage stays O(1) in sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fourier_kv.spectral import FourierBasis, SpectralState, compress_batch, fold_token

__all__ = [
    "CacheLayout",
    "CompressedCache",
    "HeadDims",
    "HeadSlice",
    "PartitionParams",
    "append_token",
    "memory_report",
    "prefill",
    "prefill_trace",
]


@dataclass(frozen=True)
class PartitionParams:
    """Sequence partition geometry shared by every head.

    ``period`` is the Fourier window; it must cover the longest sequence the
    cache will ever represent, since spectral phases wrap past it.
    """

    init_len: int
    local_len: int
    period: int
    orders: int

    def __post_init__(self):
        if self.init_len < 0:
            raise ValueError(f"init_len must be >= 0, got {self.init_len}")
        if self.local_len < 1:
            raise ValueError(f"local_len must be >= 1, got {self.local_len}")
        if self.orders < 1:
            raise ValueError(f"orders must be >= 1, got {self.orders}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")


def _as_dim_set(indices, head_dim: int) -> np.ndarray:
    arr = np.unique(np.asarray(indices, dtype=np.int64))
    if arr.size and (arr.min() < 0 or arr.max() >= head_dim):
        raise ValueError(f"dimension indices must lie in [0, {head_dim})")
    return arr


@dataclass(frozen=True)
class HeadDims:
    """Disjoint compressed/kept dimension index sets for one head's K and V."""

    k_compressed: np.ndarray
    k_kept: np.ndarray
    v_compressed: np.ndarray
    v_kept: np.ndarray

    @classmethod
    def from_compressed(cls, head_dim: int, k_compressed, v_compressed) -> "HeadDims":
        k_c = _as_dim_set(k_compressed, head_dim)
        v_c = _as_dim_set(v_compressed, head_dim)
        every = np.arange(head_dim, dtype=np.int64)
        return cls(
            k_compressed=k_c,
            k_kept=np.setdiff1d(every, k_c),
            v_compressed=v_c,
            v_kept=np.setdiff1d(every, v_c),
        )

    def validate(self, head_dim: int) -> None:
        every = np.arange(head_dim, dtype=np.int64)
        for comp, kept, which in (
            (self.k_compressed, self.k_kept, "K"),
            (self.v_compressed, self.v_kept, "V"),
        ):
            merged = np.concatenate([comp, kept])
            if len(np.unique(merged)) != head_dim or not np.array_equal(np.sort(merged), every):
                raise ValueError(f"{which} dimension sets must partition 0..{head_dim - 1}")


@dataclass
class CacheLayout:
    """Model geometry, partition parameters, and per-(layer, head) dim sets."""

    layers: int
    kv_heads: int
    head_dim: int
    partition: PartitionParams
    dims: list  # [layer][head] -> HeadDims

    def __post_init__(self):
        if len(self.dims) != self.layers or any(len(row) != self.kv_heads for row in self.dims):
            raise ValueError("dims must be a layers x kv_heads table")
        for row in self.dims:
            for hd in row:
                hd.validate(self.head_dim)

    @classmethod
    def all_kept(cls, layers: int, kv_heads: int, head_dim: int, partition: PartitionParams):
        """Lossless layout: nothing is compressed."""
        return cls(
            layers=layers,
            kv_heads=kv_heads,
            head_dim=head_dim,
            partition=partition,
            dims=[
                [HeadDims.from_compressed(head_dim, [], []) for _ in range(kv_heads)]
                for _ in range(layers)
            ],
        )

    @classmethod
    def uniform_prefix(
        cls,
        layers: int,
        kv_heads: int,
        head_dim: int,
        partition: PartitionParams,
        k_count: int,
        v_count: int | None = None,
    ):
        """Compress the first ``k_count``/``v_count`` dimensions everywhere."""
        v_count = k_count if v_count is None else v_count
        return cls(
            layers=layers,
            kv_heads=kv_heads,
            head_dim=head_dim,
            partition=partition,
            dims=[
                [
                    HeadDims.from_compressed(head_dim, np.arange(k_count), np.arange(v_count))
                    for _ in range(kv_heads)
                ]
                for _ in range(layers)
            ],
        )


class _GrowBuffer:
    """Append-only float32 row buffer with doubling reallocation."""

    def __init__(self, width: int):
        self._data = np.empty((0, width), dtype=np.float32)
        self._len = 0

    @classmethod
    def from_block(cls, block: np.ndarray) -> "_GrowBuffer":
        buf = cls(block.shape[1])
        buf._data = np.array(block, dtype=np.float32)
        buf._len = block.shape[0]
        return buf

    def append(self, row: np.ndarray) -> None:
        if self._len == self._data.shape[0]:
            new_cap = max(8, 2 * self._data.shape[0])
            grown = np.empty((new_cap, self._data.shape[1]), dtype=np.float32)
            grown[: self._len] = self._data[: self._len]
            self._data = grown
        self._data[self._len] = row
        self._len += 1

    def view(self) -> np.ndarray:
        return self._data[: self._len]

    def __len__(self) -> int:
        return self._len


@dataclass
class HeadSlice:
    """Compressed cache storage for one (layer, head).

    Exact blocks are float32 like the traces they come from; spectral states
    accumulate in float64. Single-writer; distinct slices are independent.
    """

    dims: HeadDims
    partition: PartitionParams
    init_k: np.ndarray
    init_v: np.ndarray
    kept_k: _GrowBuffer
    kept_v: _GrowBuffer
    spec_k: SpectralState
    spec_v: SpectralState
    ring_k: np.ndarray
    ring_v: np.ndarray
    ring_start: int
    ring_count: int
    total_len: int

    @property
    def init_len(self) -> int:
        return self.init_k.shape[0]

    @property
    def middle_count(self) -> int:
        return len(self.kept_k)

    @property
    def middle_start(self) -> int:
        return self.init_len

    def represented(self) -> int:
        """Positions held across the three tiers; equals tokens ingested."""
        return self.init_len + self.middle_count + self.ring_count

    def local_positions(self) -> np.ndarray:
        return np.arange(self.ring_start, self.ring_start + self.ring_count)

    def local_block(self) -> tuple[np.ndarray, np.ndarray]:
        """Local K and V rows in ascending position order."""
        slots = self.local_positions() % self.partition.local_len
        return self.ring_k[slots], self.ring_v[slots]


def prefill(keys, values, layout: CacheLayout, layer: int, basis: FourierBasis):
    """Build the compressed slices for one layer from its full K/V blocks.

    ``keys`` and ``values`` are ``(kv_heads, seq_len, head_dim)``. The middle
    region is folded in batch at absolute positions; sequences no longer than
    the partition's init+local extent simply have an empty middle.
    """
    keys = np.asarray(keys)
    values = np.asarray(values)
    part = layout.partition
    if not 0 <= layer < layout.layers:
        raise ValueError(f"layer {layer} out of range [0, {layout.layers})")
    expected = (layout.kv_heads, keys.shape[1], layout.head_dim)
    if keys.shape != expected or values.shape != expected:
        raise ValueError(
            f"layer block shape {keys.shape}/{values.shape} does not match layout {expected}"
        )
    if basis.orders != part.orders or basis.period != part.period:
        raise ValueError("basis geometry does not match the layout partition")
    seq_len = keys.shape[1]
    n_init = min(part.init_len, seq_len)
    local_start = max(n_init, seq_len - part.local_len)
    if local_start - n_init > part.period:
        # folded positions must cover distinct residues of the period; a
        # contiguous middle region no longer than one period guarantees that
        raise ValueError(
            f"middle region of {local_start - n_init} positions exceeds the "
            f"spectral period {part.period}"
        )
    slices = []
    for head in range(layout.kv_heads):
        hd = layout.dims[layer][head]
        k_block = keys[head].astype(np.float32)
        v_block = values[head].astype(np.float32)
        kept_k = _GrowBuffer.from_block(k_block[n_init:local_start][:, hd.k_kept])
        kept_v = _GrowBuffer.from_block(v_block[n_init:local_start][:, hd.v_kept])
        spec_k = compress_batch(basis, k_block[n_init:local_start, hd.k_compressed], n_init)
        spec_v = compress_batch(basis, v_block[n_init:local_start, hd.v_compressed], n_init)

        ring_k = np.zeros((part.local_len, layout.head_dim), dtype=np.float32)
        ring_v = np.zeros_like(ring_k)
        for pos in range(local_start, seq_len):
            ring_k[pos % part.local_len] = k_block[pos]
            ring_v[pos % part.local_len] = v_block[pos]
        slices.append(
            HeadSlice(
                dims=hd,
                partition=part,
                init_k=k_block[:n_init].copy(),
                init_v=v_block[:n_init].copy(),
                kept_k=kept_k,
                kept_v=kept_v,
                spec_k=spec_k,
                spec_v=spec_v,
                ring_k=ring_k,
                ring_v=ring_v,
                ring_start=local_start,
                ring_count=seq_len - local_start,
                total_len=seq_len,
            )
        )
    return slices


def append_token(slice_: HeadSlice, basis: FourierBasis, k_vec, v_vec) -> HeadSlice:
    """Ingest one decoded token into a head slice.

    The token enters the local ring; when the ring is full, the evicted
    oldest local token splits into kept rows and spectral folds at its
    absolute position. Mutates and returns the slice.
    """
    part = slice_.partition
    k_vec = np.asarray(k_vec, dtype=np.float32)
    v_vec = np.asarray(v_vec, dtype=np.float32)
    if k_vec.shape != (slice_.ring_k.shape[1],) or v_vec.shape != k_vec.shape:
        raise ValueError("token vectors must have shape (head_dim,)")

    if slice_.ring_count == part.local_len:
        evict_pos = slice_.ring_start
        if slice_.spec_k.token_count >= part.period:
            raise ValueError(
                f"middle region already spans the full spectral period {part.period}; "
                "folding more tokens would alias earlier positions"
            )
        slot = evict_pos % part.local_len
        old_k = slice_.ring_k[slot]
        old_v = slice_.ring_v[slot]
        slice_.kept_k.append(old_k[slice_.dims.k_kept])
        slice_.kept_v.append(old_v[slice_.dims.v_kept])
        fold_token(slice_.spec_k, basis, old_k[slice_.dims.k_compressed], evict_pos)
        fold_token(slice_.spec_v, basis, old_v[slice_.dims.v_compressed], evict_pos)
        slice_.ring_start += 1
        slice_.ring_count -= 1

    new_pos = slice_.total_len
    slot = new_pos % part.local_len
    slice_.ring_k[slot] = k_vec
    slice_.ring_v[slot] = v_vec
    slice_.ring_count += 1
    slice_.total_len += 1
    return slice_


@dataclass
class CompressedCache:
    """All layers' head slices plus the shared layout and basis."""

    layout: CacheLayout
    basis: FourierBasis
    slices: list  # [layer][head] -> HeadSlice

    def slice(self, layer: int, head: int) -> HeadSlice:
        return self.slices[layer][head]

    def append(self, layer: int, head: int, k_vec, v_vec) -> None:
        append_token(self.slices[layer][head], self.basis, k_vec, v_vec)


def prefill_trace(trace, layout: CacheLayout, basis: FourierBasis) -> CompressedCache:
    """Prefill every layer of a trace into a compressed cache."""
    if (trace.layers, trace.kv_heads, trace.head_dim) != (
        layout.layers,
        layout.kv_heads,
        layout.head_dim,
    ):
        raise ValueError(
            f"trace geometry ({trace.layers}, {trace.kv_heads}, {trace.head_dim}) does not "
            f"match layout ({layout.layers}, {layout.kv_heads}, {layout.head_dim})"
        )
    slices = [
        prefill(trace.keys[layer], trace.values[layer], layout, layer, basis)
        for layer in range(layout.layers)
    ]
    return CompressedCache(layout=layout, basis=basis, slices=slices)


def memory_report(layout: CacheLayout, seq_len: int) -> dict:
    """Float counts of the compressed layout against a dense cache.

    ``compressed_fraction`` is the share of (layer, head, dim, K/V) channels
    routed to spectral storage; as ``seq_len`` grows, ``ratio_vs_full``
    approaches ``1 - compressed_fraction``.
    """
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    part = layout.partition
    n_init = min(part.init_len, seq_len)
    local_occ = min(part.local_len, seq_len - n_init)
    middle = seq_len - n_init - local_occ

    exact = 0
    spectral = 0
    channels_total = 0
    channels_spectral = 0
    for layer in range(layout.layers):
        for head in range(layout.kv_heads):
            hd = layout.dims[layer][head]
            n_kc, n_vc = hd.k_compressed.size, hd.v_compressed.size
            exact += (n_init + local_occ) * 2 * layout.head_dim
            exact += middle * (hd.k_kept.size + hd.v_kept.size)
            spectral += 2 * part.orders * (n_kc + n_vc)
            channels_spectral += n_kc + n_vc
            channels_total += 2 * layout.head_dim

    full = layout.layers * layout.kv_heads * 2 * seq_len * layout.head_dim
    return {
        "exact_floats": exact,
        "spectral_floats": spectral,
        "full_cache_floats": full,
        "compressed_fraction": channels_spectral / channels_total,
        "ratio_vs_full": (exact + spectral) / full if full else float("nan"),
    }
