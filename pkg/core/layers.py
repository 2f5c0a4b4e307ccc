"""
Capas diferenciables 3D: convolución anisotrópica, max-pooling,
batch norm y sobremuestreo trilineal

Layout fijo (batch, canal, z, y, x) con x como eje más rápido.
Los kernels reparten el trabajo por ítem del batch; cada ítem acumula
en un orden fijo, por lo que el resultado no depende del número de hilos
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import NumericError, ShapeError
from core.tensor import Tensor, apply_op
from models import ConvSpec

logger = logging.getLogger(__name__)

_threads = 1
_pool: Optional[ThreadPoolExecutor] = None


def set_num_threads(threads: Optional[int]) -> int:
    """Configura el pool de hilos de los kernels (None = núcleos disponibles)"""
    global _threads, _pool
    threads = threads or os.cpu_count() or 1
    if threads != _threads:
        if _pool is not None:
            _pool.shutdown(wait=True)
        _pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        _threads = threads
        logger.info(f"Kernels configurados con {threads} hilo(s)")
    return _threads


def _map_items(fn: Callable[[int], object], n: int) -> List[object]:
    if _pool is None or n < 2:
        return [fn(i) for i in range(n)]
    return list(_pool.map(fn, range(n)))


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} espera un tensor (N, C, Z, Y, X), forma recibida {x.shape}")


def _window(offset: Tuple[int, int, int], stride: Tuple[int, int, int], out: Tuple[int, int, int]):
    """Vista estrided (sin copia) de la ventana desplazada por offset (dz, dy, dx)"""
    return tuple(slice(d, d + s * (o - 1) + 1, s) for d, s, o in zip(offset, stride, out))


def _offsets(kernel_zyx: Tuple[int, int, int]):
    kz, ky, kx = kernel_zyx
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                yield dz, dy, dx


# ============================================================================
# Convolución
# ============================================================================

def conv3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Correlación cruzada 3D con relleno de ceros

    Args:
        x: Entrada (N, Cin, Z, Y, X)
        spec: Geometría de la capa
        weight: Pesos (Cout, Cin, kz, ky, kx)
        bias: Sesgo opcional (Cout,)

    Returns:
        Tensor: Salida (N, Cout, Z', Y', X')

    Raises:
        ShapeError: Canales o pesos incompatibles, o extensión de salida < 1
    """
    _check_5d(x, "conv3d")
    n, cin = x.shape[:2]
    if cin != spec.in_channels:
        raise ShapeError(f"conv3d: la entrada tiene {cin} canales, la capa espera {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv3d: pesos {weight.shape}, se esperaba {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d: sesgo {bias.shape}, se esperaba ({spec.out_channels},)")
    out_zyx = spec.output_extent(x.shape[2:])

    px, py, pz = spec.padding
    sx, sy, sz = spec.stride
    stride = (sz, sy, sx)
    kernel = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    w = weight.data.astype(x.data.dtype, copy=False)
    cout = spec.out_channels

    def _forward_item(i):
        acc = np.zeros((cout,) + out_zyx, dtype=x.data.dtype)
        for off in _offsets(kernel):
            patch = xp[i][(slice(None),) + _window(off, stride, out_zyx)]
            acc += np.tensordot(w[(slice(None), slice(None)) + off], patch, axes=(1, 0))
        return acc

    out = np.stack(_map_items(_forward_item, n))
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False).reshape(1, cout, 1, 1, 1)

    in_zyx = x.shape[2:]

    def _backward(g):
        def _backward_item(i):
            gxp = np.zeros_like(xp[i])
            gw = np.zeros_like(w)
            gi = g[i]
            for off in _offsets(kernel):
                win = (slice(None),) + _window(off, stride, out_zyx)
                gw[(slice(None), slice(None)) + off] = np.tensordot(gi, xp[i][win], axes=([1, 2, 3], [1, 2, 3]))
                gxp[win] += np.tensordot(w[(slice(None), slice(None)) + off], gi, axes=(0, 0))
            return gxp, gw

        parts = _map_items(_backward_item, n)
        gx = np.stack([p[0] for p in parts])[
            :, :, pz:pz + in_zyx[0], py:py + in_zyx[1], px:px + in_zyx[2]
        ]
        gw = parts[0][1].copy()
        for p in parts[1:]:
            gw += p[1]
        grads = [gx, gw.astype(weight.data.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)).astype(bias.data.dtype, copy=False))
        return tuple(grads)

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return apply_op("conv3d", out, inputs, _backward)


# ============================================================================
# Max-pooling
# ============================================================================

def maxpool3d(
    x: Tensor,
    kernel: Tuple[int, int, int],
    stride: Tuple[int, int, int],
    padding: Tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """
    Máximo por ventana; el gradiente va a la primera posición del máximo

    Las tuplas van en orden (x, y, z). El relleno nunca gana el máximo
    """
    _check_5d(x, "maxpool3d")
    n, c = x.shape[:2]
    geometry = ConvSpec(in_channels=c, out_channels=c, kernel=kernel, stride=stride, padding=padding)
    out_zyx = geometry.output_extent(x.shape[2:])
    px, py, pz = padding
    sx, sy, sz = stride
    kx, ky, kz = kernel
    st = (sz, sy, sx)
    xp = np.pad(
        x.data, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)), constant_values=-np.inf
    )

    best = np.full((n, c) + out_zyx, -np.inf, dtype=x.data.dtype)
    arg = np.zeros((n, c) + out_zyx, dtype=np.int32)
    for k, off in enumerate(_offsets((kz, ky, kx))):
        cand = xp[(slice(None), slice(None)) + _window(off, st, out_zyx)]
        better = cand > best
        best = np.where(better, cand, best)
        arg[better] = k

    in_zyx = x.shape[2:]

    def _backward(g):
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for k, off in enumerate(_offsets((kz, ky, kx))):
            gxp[(slice(None), slice(None)) + _window(off, st, out_zyx)] += g * (arg == k)
        return (gxp[:, :, pz:pz + in_zyx[0], py:py + in_zyx[1], px:px + in_zyx[2]],)

    return apply_op("maxpool3d", best, [x], _backward)


# ============================================================================
# Batch norm
# ============================================================================

class BatchNormState:
    """Estadísticas acumuladas de una capa de batch norm"""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Normalización por canal

    En modo train usa estadísticas del batch (varianza sesgada) y actualiza
    las acumuladas con la varianza insesgada; en modo eval usa las acumuladas

    Raises:
        NumericError: Si eps <= 0
        ShapeError: Si gamma/beta no coinciden con los canales
    """
    _check_5d(x, "batchnorm3d")
    if eps <= 0:
        raise NumericError(f"batchnorm3d: eps debe ser positivo, recibido {eps}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d: gamma/beta deben tener longitud {c}")
    dtype = x.data.dtype
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    g_ = gamma.data.astype(dtype, copy=False).reshape(bshape)
    b_ = beta.data.astype(dtype, copy=False).reshape(bshape)

    if mode == "train":
        m = x.size // c
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
        x_hat = (x.data - mean.astype(dtype).reshape(bshape)) * inv_std.reshape(bshape)
        unbiased = var * m / max(m - 1, 1)
        rs = running_stats
        rs.running_mean[...] = (1.0 - momentum) * rs.running_mean + momentum * mean
        rs.running_var[...] = (1.0 - momentum) * rs.running_var + momentum * unbiased

        def _backward(g):
            dx_hat = g * g_
            s1 = dx_hat.sum(axis=axes, keepdims=True)
            s2 = (dx_hat * x_hat).sum(axis=axes, keepdims=True)
            dx = inv_std.reshape(bshape) / m * (m * dx_hat - s1 - x_hat * s2)
            return dx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(running_stats.running_var.astype(np.float64) + eps)).astype(dtype)
        x_hat = (x.data - running_stats.running_mean.astype(dtype).reshape(bshape)) * inv_std.reshape(bshape)

        def _backward(g):
            return g * g_ * inv_std.reshape(bshape), (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"Modo de batch norm desconocido: {mode}")

    return apply_op("batchnorm3d", x_hat * g_ + b_, [x, gamma, beta], _backward)


# ============================================================================
# Interpolación lineal
# ============================================================================

def interpolation_matrix(n_in: int, n_out: int, scale: float, nearest: bool = False) -> np.ndarray:
    """
    Pesos de interpolación 1D con convención de centros de vóxel

    La coordenada fuente de la salida o es (o + 0.5) * scale - 0.5, recortada
    a [0, n_in - 1]; scale = tamaño de vóxel de salida / tamaño de entrada

    Returns:
        np.ndarray: Matriz (n_out, n_in) en f64
    """
    o = np.arange(n_out, dtype=np.float64)
    src = np.clip((o + 0.5) * scale - 0.5, 0.0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if nearest:
        idx = np.minimum(np.floor(src + 0.5).astype(int), n_in - 1)
        mat[np.arange(n_out), idx] = 1.0
        return mat
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), i1), frac)
    return mat


def apply_along_axis(data: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Aplica una matriz (n_out, n_in) sobre el eje indicado"""
    moved = np.moveaxis(data, axis, 0)
    out = np.tensordot(mat.astype(data.dtype, copy=False), moved, axes=(1, 0))
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def upsample_trilinear(x: Tensor, factor: Tuple[int, int, int]) -> Tensor:
    """
    Sobremuestreo trilineal por factores enteros (fx, fy, fz)

    El backward aplica la transpuesta de los pesos de interpolación
    """
    _check_5d(x, "upsample_trilinear")
    fx, fy, fz = factor
    if any(int(f) != f or f < 1 for f in factor):
        raise ShapeError(f"upsample_trilinear: factores enteros >= 1 requeridos, recibido {factor}")
    mats = []
    for axis, f in zip((2, 3, 4), (fz, fy, fx)):
        if f > 1:
            n = x.shape[axis]
            mats.append((axis, interpolation_matrix(n, n * f, 1.0 / f)))
    out = x.data
    for axis, mat in mats:
        out = apply_along_axis(out, mat, axis)

    def _backward(g):
        for axis, mat in reversed(mats):
            g = apply_along_axis(g, mat.T, axis)
        return (g,)

    return apply_op("upsample_trilinear", np.array(out, copy=True), [x], _backward)
