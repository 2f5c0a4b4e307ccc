"""
Servicio de checkpoints
Formato binario versionado: tensores con nombre, estados de Adam, paso,
configuración y estado del generador aleatorio
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from config import parse_config_text
from core.errors import CheckpointError
from services.loss_service import AdamState
from services.network_service import build_discriminator, build_generator

logger = logging.getLogger(__name__)

MAGIC = b"GCAN"
VERSION = 1
DTYPE_CODES = {"<f4": 0, "<f8": 1}
CODE_DTYPES = {code: np.dtype(s) for s, code in DTYPE_CODES.items()}


class Checkpoint:
    """Contenido de un checkpoint; el orden de los diccionarios es el orden en disco"""

    def __init__(self, tensors: Dict[str, np.ndarray], adam: Dict[str, Tuple[int, Dict[str, np.ndarray]]],
                 step: int, config: str, rng: Optional[dict] = None, version: int = VERSION):
        self.version = version
        self.tensors = tensors
        self.adam = adam
        self.step = step
        self.config = config
        self.rng = rng or {}

    def model_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensores de un modelo ("G" o "D") sin el prefijo"""
        head = f"{prefix}."
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def _write_tensors(buf: io.BytesIO, tensors: Dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype.str not in DTYPE_CODES:
            raise CheckpointError(f"Tensor {name}: dtype {array.dtype} no soportado")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", DTYPE_CODES[dtype.str], array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path.name}: checkpoint truncado")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, length_fmt: str = "<I") -> str:
        (length,) = self.unpack(length_fmt)
        return self.take(length).decode("utf-8")

    def tensors(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name = self.text("<H")
            code, rank = self.unpack("<BB")
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{self.path.name}: código de dtype desconocido {code} en {name}")
            shape = self.unpack(f"<{rank}I") if rank else ()
            dtype = CODE_DTYPES[code]
            size = int(np.prod(shape)) * dtype.itemsize
            out[name] = np.frombuffer(self.take(size), dtype=dtype).reshape(shape).copy()
        return out


class CheckpointService:
    """Lectura y escritura de checkpoints de entrenamiento"""

    @staticmethod
    def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
        """
        Escribe el checkpoint

        Layout: "GCAN", u32 versión, tensores; bloques de Adam (nombre, u64 paso,
        tensores); u64 paso; configuración y estado aleatorio con prefijo de longitud
        """
        path = Path(path)
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", ckpt.version))
        _write_tensors(buf, ckpt.tensors)
        buf.write(struct.pack("<I", len(ckpt.adam)))
        for name, (step, tensors) in ckpt.adam.items():
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<Q", step))
            _write_tensors(buf, tensors)
        buf.write(struct.pack("<Q", ckpt.step))
        for text in (ckpt.config, json.dumps(ckpt.rng, sort_keys=True)):
            encoded = text.encode("utf-8")
            buf.write(struct.pack("<I", len(encoded)))
            buf.write(encoded)

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(buf.getvalue())
        except OSError as e:
            logger.error(f"Error al escribir el checkpoint {path}: {str(e)}")
            raise
        logger.info(f"✓ Checkpoint guardado: {path} (paso {ckpt.step})")
        return path

    @staticmethod
    def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
        """
        Lee un checkpoint

        Raises:
            CheckpointError: Magic o versión incorrectos, o archivo truncado
        """
        path = Path(path)
        reader = _Reader(path.read_bytes(), path)
        if reader.take(4) != MAGIC:
            raise CheckpointError(f"{path.name}: no es un checkpoint (magic incorrecto)")
        (version,) = reader.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"{path.name}: versión {version} no soportada (se espera {VERSION})")
        tensors = reader.tensors()
        (n_adam,) = reader.unpack("<I")
        adam = {}
        for _ in range(n_adam):
            name = reader.text("<H")
            (step,) = reader.unpack("<Q")
            adam[name] = (step, reader.tensors())
        (step,) = reader.unpack("<Q")
        config = reader.text()
        rng = json.loads(reader.text())
        logger.debug(f"Checkpoint leído: {path} (paso {step}, {len(tensors)} tensores)")
        return Checkpoint(tensors, adam, step, config, rng, version)

    @staticmethod
    def capture(G, D, adam_g: AdamState, adam_d: AdamState, step: int, config: str,
                rng: Optional[dict] = None) -> Checkpoint:
        """Instantánea del estado de entrenamiento (copias de los arreglos)"""
        tensors = {f"G.{k}": v.copy() for k, v in G.state_tensors().items()}
        tensors.update({f"D.{k}": v.copy() for k, v in D.state_tensors().items()})
        adam = {
            "G": (adam_g.step, {k: v.copy() for k, v in adam_g.tensors().items()}),
            "D": (adam_d.step, {k: v.copy() for k, v in adam_d.tensors().items()}),
        }
        return Checkpoint(tensors, adam, step, config, rng)

    @staticmethod
    def restore(ckpt: Checkpoint, G, D=None, adam_g: Optional[AdamState] = None,
                adam_d: Optional[AdamState] = None) -> None:
        """
        Carga el estado en modelos ya construidos

        Raises:
            CheckpointError: Si falta un tensor o una forma no coincide con la configuración
        """
        G.load_state_tensors(ckpt.model_tensors("G"))
        if D is not None:
            D.load_state_tensors(ckpt.model_tensors("D"))
        for key, state, model in (("G", adam_g, G), ("D", adam_d, D)):
            if state is None or key not in ckpt.adam:
                continue
            step, tensors = ckpt.adam[key]
            state.step = step
            for name, p in model.params.items():
                m = tensors.get(f"{name}.exp_avg")
                v = tensors.get(f"{name}.exp_avg_sq")
                if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
                    raise CheckpointError(f"Estado de Adam incompatible para {key}.{name}")
                state.exp_avg[name] = m.copy()
                state.exp_avg_sq[name] = v.copy()

    @staticmethod
    def load_models(path: Union[str, Path], with_discriminator: bool = False, materialize: bool = True):
        """
        Reconstruye los modelos descritos por la configuración guardada y carga sus tensores

        Returns:
            tuple: (TrainConfig, Generator, Discriminator o None)
        """
        ckpt = CheckpointService.load_checkpoint(path)
        cfg = parse_config_text(ckpt.config)
        dtype = "f64" if any(v.dtype == np.float64 for v in ckpt.tensors.values()) else "f32"
        G = build_generator(cfg.preset, cfg.gc_kernel, seed=cfg.seed, dtype=dtype, materialize=materialize)
        D = build_discriminator(cfg.preset, seed=cfg.seed + 1, dtype=dtype, materialize=materialize) \
            if with_discriminator else None
        if materialize:
            CheckpointService.restore(ckpt, G, D)
        return cfg, G, D


# Instancia global del servicio
checkpoint_service = CheckpointService()

save_checkpoint = checkpoint_service.save_checkpoint
load_checkpoint = checkpoint_service.load_checkpoint
