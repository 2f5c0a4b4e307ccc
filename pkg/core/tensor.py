"""
Tensor con diferenciación automática en modo reverso
Cada operación diferenciable registra un nodo; la cinta (Tape) reproduce
los nodos en orden inverso de ejecución para acumular gradientes
"""
import itertools
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}

_node_ids = itertools.count()
_grad_enabled = True


def _resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"dtype no soportado: {dtype}")
        return np.dtype(DTYPES[dtype])
    return np.dtype(dtype)


class no_grad:
    """Contexto que desactiva el registro de operaciones en la cinta"""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *args):
        global _grad_enabled
        _grad_enabled = self.prev


class frozen:
    """Contexto que congela parámetros: no reciben gradiente mientras dure"""

    def __init__(self, params: Iterable["Tensor"]):
        self.params = list(params)

    def __enter__(self):
        self.prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *args):
        for p, flag in zip(self.params, self.prev):
            p.requires_grad = flag


class Node:
    """Registro de una operación ejecutada"""

    __slots__ = ("id", "op", "inputs", "needs_grad", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = tuple(inputs)
        # se fija al registrar: un parámetro congelado no recibe gradiente aunque luego se descongele
        self.needs_grad = tuple(t.requires_grad for t in self.inputs)
        # backward_fn(grad_out) -> gradiente por cada entrada (o None)
        self.backward_fn = backward_fn


class Tensor:
    """Arreglo n-dimensional (layout 5-D: batch, canal, z, y, x) con gradiente"""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    def sum(self) -> "Tensor":
        return reduce(self, "sum")

    def mean(self) -> "Tensor":
        return reduce(self, "mean")

    def __add__(self, other):
        if isinstance(other, Tensor):
            return combine(self, other, "add")
        return _affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return combine(self, _affine(other, -1.0, 0.0), "add")
        return _affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return _affine(self, -1.0, float(other))

    def __neg__(self):
        return _affine(self, -1.0, 0.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return _affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """
    Envuelve el resultado de una operación y lo registra si corresponde

    Args:
        op: Nombre de la operación
        data: Resultado ya calculado
        inputs: Tensores de entrada
        backward_fn: Función grad_out -> tupla de gradientes por entrada

    Returns:
        Tensor: Resultado, enlazado a la cinta si alguna entrada requiere gradiente
    """
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


class Tape:
    """
    Registro ordenado de las operaciones alcanzables desde una pérdida

    Los identificadores de nodo crecen con el orden de ejecución, así que
    ordenarlos da un orden topológico; se reproduce al revés
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        reachable: Dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node is None or t.node.id in reachable:
                continue
            reachable[t.node.id] = t
            stack.extend(t.node.inputs)
        self.entries: List[Tensor] = [reachable[k] for k in sorted(reachable)]

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, seed: np.ndarray) -> Dict[Tensor, np.ndarray]:
        pending: Dict[int, np.ndarray] = {self.loss.node.id: seed}
        leaves: Dict[Tensor, np.ndarray] = {}
        for t in reversed(self.entries):
            grad = pending.pop(t.node.id, None)
            if grad is None:
                continue
            input_grads = t.node.backward_fn(grad)
            for inp, needs, g in zip(t.node.inputs, t.node.needs_grad, input_grads):
                if g is None or not needs:
                    continue
                g = np.asarray(g, dtype=inp.data.dtype)
                if inp.node is not None:
                    if inp.node.id in pending:
                        pending[inp.node.id] = pending[inp.node.id] + g
                    else:
                        pending[inp.node.id] = g
                elif inp in leaves:
                    leaves[inp] = leaves[inp] + g
                else:
                    leaves[inp] = g
        return leaves


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Acumula d(loss)/d(hoja) en .grad de cada hoja que requiere gradiente

    Args:
        loss: Tensor escalar conectado a la cinta

    Returns:
        dict: Gradiente de esta llamada por cada hoja

    Raises:
        ShapeError: Si la pérdida no es escalar
    """
    if loss.size != 1:
        raise ShapeError(f"backward requiere una pérdida escalar, forma recibida {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            grad = np.ones_like(loss.data)
            loss.grad = grad if loss.grad is None else loss.grad + grad
            return {loss: grad}
        return {}
    tape = Tape(loss)
    leaves = tape.replay(np.ones_like(loss.data))
    for leaf, grad in leaves.items():
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    return leaves


def tensor_new(
    shape: Sequence[int],
    dtype: str = "f32",
    fill: str = "zeros",
    *,
    value: float = 0.0,
    seed: int = 0,
    lo: float = 0.0,
    hi: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    requires_grad: bool = False,
) -> Tensor:
    """
    Crea un tensor con el relleno indicado

    Args:
        shape: Extensiones (todas >= 1)
        dtype: "f32" o "f64"
        fill: "zeros", "constant", "uniform" o "gaussian"

    Returns:
        Tensor: Nuevo tensor, determinista para una semilla dada

    Raises:
        ShapeError: Si alguna extensión es menor que 1
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"Extensiones inválidas: {shape}")
    np_dtype = _resolve_dtype(dtype)
    if fill == "zeros":
        data = np.zeros(shape, dtype=np_dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=np_dtype)
    elif fill == "uniform":
        data = np.random.default_rng(seed).uniform(lo, hi, size=shape).astype(np_dtype)
    elif fill == "gaussian":
        data = np.random.default_rng(seed).normal(mean, std, size=shape).astype(np_dtype)
    else:
        raise ValueError(f"Relleno desconocido: {fill}")
    return Tensor(data, requires_grad=requires_grad)


def pairwise_sum(values: np.ndarray) -> np.ndarray:
    """Suma en árbol sobre el último eje; orden de acumulación fijo"""
    v = np.asarray(values)
    while v.shape[-1] > 1:
        if v.shape[-1] % 2:
            v = np.concatenate([v, np.zeros(v.shape[:-1] + (1,), dtype=v.dtype)], axis=-1)
        v = v[..., 0::2] + v[..., 1::2]
    return v[..., 0]


def reduce(x: Tensor, kind: str = "sum", axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    """
    Reducción por suma o media con suma por pares

    Args:
        x: Tensor no vacío
        kind: "sum" o "mean"
        axes: Ejes a reducir; None reduce todos y devuelve un escalar
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"Reducción desconocida: {kind}")
    axes = tuple(range(x.ndim)) if axes is None else tuple(a % x.ndim for a in axes)
    kept = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, kept + list(axes))
    kept_shape = tuple(x.shape[a] for a in kept)
    count = int(np.prod([x.shape[a] for a in axes]))
    total = pairwise_sum(moved.reshape(kept_shape + (count,)))
    scale = 1.0 / count if kind == "mean" else 1.0
    out = np.asarray(total * scale, dtype=x.data.dtype)
    in_shape = x.shape

    def _backward(g):
        g = np.asarray(g).reshape(tuple(in_shape[a] if a in kept else 1 for a in range(len(in_shape))))
        return (np.broadcast_to(g * scale, in_shape).copy(),)

    return apply_op(f"reduce_{kind}", out, [x], _backward)


def combine(a: Tensor, b: Tensor, kind: str = "add") -> Tensor:
    """
    Suma elemento a elemento o concatenación por canales

    Raises:
        ShapeError: Si las formas no son compatibles
    """
    if kind == "add":
        if a.shape != b.shape:
            raise ShapeError(f"Suma con formas distintas: {a.shape} vs {b.shape}")
        return apply_op("add", a.data + b.data, [a, b], lambda g: (g, g))
    if kind == "concat_channels":
        if a.ndim != b.ndim or a.ndim < 2 or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
            raise ShapeError(f"Concatenación con extensiones distintas: {a.shape} vs {b.shape}")
        ca = a.shape[1]
        data = np.concatenate([a.data, b.data.astype(a.data.dtype, copy=False)], axis=1)
        return apply_op("concat", data, [a, b], lambda g: (g[:, :ca], g[:, ca:]))
    raise ValueError(f"Combinación desconocida: {kind}")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Producto elemento a elemento de tensores con la misma forma"""
    if a.shape != b.shape:
        raise ShapeError(f"Producto con formas distintas: {a.shape} vs {b.shape}")
    return apply_op("mul", a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


def _affine(x: Tensor, scale: float, shift: float) -> Tensor:
    data = (x.data * scale + shift).astype(x.data.dtype, copy=False)
    return apply_op("affine", data, [x], lambda g: (g * scale,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str = "relu", slope: float = 0.2) -> Tensor:
    """
    Activación elemento a elemento: relu, leaky_relu o sigmoid

    La sigmoide se recorta al intervalo abierto (0, 1) representable en el dtype
    """
    d = x.data
    if kind == "relu":
        mask = d > 0
        return apply_op("relu", d * mask, [x], lambda g: (g * mask,))
    if kind == "leaky_relu":
        factor = np.where(d > 0, 1.0, slope).astype(d.dtype)
        return apply_op("leaky_relu", d * factor, [x], lambda g: (g * factor,))
    if kind == "sigmoid":
        info = np.finfo(d.dtype)
        s = np.clip(_stable_sigmoid(d), info.tiny, 1.0 - info.epsneg)
        return apply_op("sigmoid", s, [x], lambda g: (g * s * (1.0 - s),))
    raise ValueError(f"Activación desconocida: {kind}")


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: Optional[float] = None,
) -> float:
    """
    Compara el gradiente analítico con diferencias centrales

    Args:
        f: Función escalar de un tensor
        x: Punto de evaluación (f64)
        h: Paso de las diferencias finitas
        tol: Si se da, se registra una advertencia cuando el error la supera

    Returns:
        float: max |analítico - numérico| / max(1, |analítico|, |numérico|)

    Raises:
        NumericError: Si aparecen valores no finitos
    """
    point = Tensor(x.data.copy(), requires_grad=True)
    loss = f(point)
    backward(loss)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(point).item()
            flat[i] = orig - h
            minus = f(point).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("gradcheck encontró valores no finitos")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric) / denom))
    if tol is not None and err > tol:
        logger.warning(f"gradcheck: error relativo {err:.3e} supera la tolerancia {tol:.1e}")
    return err
