"""
Servicio de volúmenes
Lectura/escritura MetaImage, remuestreo, normalización, aumento de datos,
muestreo de parches y generación de fantomas sintéticos
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from core.errors import DataError, NumericError, ShapeError
from core.layers import apply_along_axis, interpolation_matrix
from models import AugmentConfig

logger = logging.getLogger(__name__)

# Espaciado objetivo (z, y, x) en mm
TARGET_SPACING = (1.5, 1.0, 1.0)
MIN_PHANTOM_EXTENTS = (16, 48, 48)
FORCE_FG_TRIES = 50

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_FLOAT": np.dtype("<f4"),
}
LABEL_SUFFIXES = ("_label", "_segmentation")


class Volume:
    """
    Rejilla escalar 3D (Z, Y, X) con espaciado y origen en mm, ambos en (z, y, x)

    La etiqueta, si existe, es binaria {0, 1} con las mismas extensiones
    """

    def __init__(self, values: np.ndarray, spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
                 origin: Tuple[float, float, float] = (0.0, 0.0, 0.0), label: Optional[np.ndarray] = None,
                 name: str = ""):
        values = np.asarray(values)
        if values.ndim != 3:
            raise ShapeError(f"Un volumen necesita 3 dimensiones, recibido {values.shape}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"Espaciado inválido: {spacing}")
        if label is not None:
            label = np.asarray(label)
            if label.shape != values.shape:
                raise ShapeError(f"Etiqueta {label.shape} y valores {values.shape} difieren")
            if not np.all((label == 0) | (label == 1)):
                raise DataError("La etiqueta debe ser binaria {0, 1}")
            label = label.astype(np.uint8)
        self.values = values.astype(np.float32, copy=False)
        self.spacing = tuple(float(s) for s in spacing)
        self.origin = tuple(float(o) for o in origin)
        self.label = label
        self.name = name

    @property
    def extents(self) -> Tuple[int, int, int]:
        return self.values.shape

    def replace(self, values: Optional[np.ndarray] = None, label: Optional[np.ndarray] = None,
                spacing=None, origin=None) -> "Volume":
        return Volume(
            self.values if values is None else values,
            self.spacing if spacing is None else spacing,
            self.origin if origin is None else origin,
            self.label if label is None else label,
            self.name,
        )

    def __repr__(self) -> str:
        return f"Volume(name={self.name!r}, extents={self.extents}, spacing={self.spacing})"


def _parse_header(lines: List[str]) -> Dict[str, str]:
    header: Dict[str, str] = {}
    for line in lines:
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _flag(header: Dict[str, str], *keys: str) -> bool:
    return any(header.get(key, "").lower() in ("true", "1") for key in keys)


class VolumeService:
    """Ingesta, preprocesamiento y aumento de volúmenes"""

    @staticmethod
    def read_metaimage(path: Union[str, Path]) -> Volume:
        """
        Lee un volumen MetaImage (.mhd + .raw, o .mha con datos LOCAL)

        Args:
            path: Ruta al encabezado

        Returns:
            Volume: Valores convertidos a f32

        Raises:
            DataError: Tipo de elemento no soportado, datos comprimidos,
                       orden de bytes MSB o archivo raw con tamaño incorrecto
        """
        path = Path(path)
        blob = path.read_bytes()
        lines: List[str] = []
        pos = 0
        while pos < len(blob):
            end = blob.find(b"\n", pos)
            end = len(blob) if end < 0 else end + 1
            line = blob[pos:end].decode("latin-1").strip()
            pos = end
            lines.append(line)
            if line.startswith("ElementDataFile"):
                break
        header = _parse_header(lines)

        if header.get("NDims", "3") != "3":
            raise DataError(f"{path.name}: solo se soportan volúmenes 3D (NDims={header.get('NDims')})")
        if _flag(header, "CompressedData"):
            raise DataError(f"{path.name}: datos comprimidos no soportados")
        if _flag(header, "ElementByteOrderMSB", "BinaryDataByteOrderMSB"):
            raise DataError(f"{path.name}: orden de bytes MSB no soportado")
        element_type = header.get("ElementType")
        if element_type not in ELEMENT_TYPES:
            raise DataError(f"{path.name}: ElementType no soportado: {element_type}")
        for key in ("DimSize", "ElementDataFile"):
            if key not in header:
                raise DataError(f"{path.name}: falta la clave {key}")

        dims_xyz = [int(v) for v in header["DimSize"].split()]
        if len(dims_xyz) != 3:
            raise DataError(f"{path.name}: DimSize debe tener 3 valores")
        spacing_xyz = [float(v) for v in header.get("ElementSpacing", "1 1 1").split()]
        origin_xyz = [float(v) for v in header.get("Offset", header.get("Origin", "0 0 0")).split()]

        data_file = header["ElementDataFile"]
        payload = blob[pos:] if data_file == "LOCAL" else (path.parent / data_file).read_bytes()
        dtype = ELEMENT_TYPES[element_type]
        count = int(np.prod(dims_xyz))
        expected = count * dtype.itemsize
        if len(payload) != expected:
            raise DataError(
                f"{path.name}: el archivo de datos tiene {len(payload)} bytes, "
                f"DimSize {dims_xyz} con {element_type} requiere {expected}"
            )
        # x es el eje más rápido
        values = np.frombuffer(payload, dtype=dtype, count=count).reshape(dims_xyz[::-1])
        logger.debug(f"Leído {path.name}: {dims_xyz[::-1]} {element_type}")
        return Volume(values.astype(np.float32), tuple(spacing_xyz[::-1]), tuple(origin_xyz[::-1]),
                      name=path.stem)

    @staticmethod
    def write_metaimage(volume: Volume, path: Union[str, Path], element_type: str = "MET_FLOAT",
                        values: Optional[np.ndarray] = None) -> Path:
        """
        Escribe un volumen MetaImage; .mhd genera un .raw acompañante, .mha usa LOCAL

        Args:
            volume: Volumen a escribir
            path: Ruta de destino
            element_type: MET_UCHAR, MET_SHORT, MET_USHORT o MET_FLOAT
            values: Rejilla alternativa (por ejemplo, la etiqueta) con la geometría del volumen

        Returns:
            Path: Ruta del encabezado escrito
        """
        if element_type not in ELEMENT_TYPES:
            raise DataError(f"ElementType no soportado: {element_type}")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        grid = volume.values if values is None else np.asarray(values)
        dtype = ELEMENT_TYPES[element_type]
        if dtype.kind in "iu":
            info = np.iinfo(dtype)
            rounded = np.rint(grid)
            if rounded.min(initial=0) < info.min or rounded.max(initial=0) > info.max:
                logger.warning(f"{path.name}: valores fuera de rango para {element_type}, se recortan")
            grid = np.clip(rounded, info.min, info.max)
        payload = np.ascontiguousarray(grid.astype(dtype)).tobytes()

        z, y, x = grid.shape
        sz, sy, sx = volume.spacing
        oz, oy, ox = volume.origin
        local = path.suffix.lower() == ".mha"
        raw_name = "LOCAL" if local else path.with_suffix(".raw").name
        header = (
            "ObjectType = Image\n"
            "NDims = 3\n"
            "BinaryData = True\n"
            "ElementByteOrderMSB = False\n"
            "CompressedData = False\n"
            f"Offset = {ox!r} {oy!r} {oz!r}\n"
            f"ElementSpacing = {sx!r} {sy!r} {sz!r}\n"
            f"DimSize = {x} {y} {z}\n"
            f"ElementType = {element_type}\n"
            f"ElementDataFile = {raw_name}\n"
        ).encode("latin-1")
        if local:
            path.write_bytes(header + payload)
        else:
            path.write_bytes(header)
            path.with_suffix(".raw").write_bytes(payload)
        logger.debug(f"Escrito {path} ({element_type})")
        return path

    @staticmethod
    def resample(volume: Volume, target_spacing: Tuple[float, float, float] = TARGET_SPACING) -> Volume:
        """
        Remuestrea a un espaciado fijo (z, y, x)

        Interpolación trilineal para intensidades y vecino más cercano para
        la etiqueta, con alineación de centros de vóxel. Nuevas extensiones:
        round(n * espaciado / objetivo), mínimo 1

        Raises:
            DataError: Si algún espaciado objetivo no es positivo
        """
        if any(t <= 0 for t in target_spacing):
            raise DataError(f"Espaciado objetivo no positivo: {target_spacing}")
        target = tuple(float(t) for t in target_spacing)
        if target == volume.spacing:
            return volume.replace(values=volume.values.copy())

        values = volume.values.astype(np.float64)
        label = None if volume.label is None else volume.label.astype(np.float64)
        origin = list(volume.origin)
        for axis, (n, sp, t) in enumerate(zip(volume.extents, volume.spacing, target)):
            if sp == t:
                continue
            n_out = max(1, int(round(n * sp / t)))
            values = apply_along_axis(values, interpolation_matrix(n, n_out, t / sp), axis)
            if label is not None:
                label = apply_along_axis(label, interpolation_matrix(n, n_out, t / sp, nearest=True), axis)
            origin[axis] += (t - sp) / 2.0
        return Volume(values.astype(np.float32), target, tuple(origin),
                      None if label is None else label.astype(np.uint8), volume.name)

    @staticmethod
    def normalize_zscore(volume: Volume) -> Volume:
        """
        (v - media) / desviación sobre todos los vóxeles

        Raises:
            NumericError: Si el volumen es constante
        """
        values = volume.values.astype(np.float64)
        mean = values.mean()
        std = values.std()
        if std == 0 or not np.isfinite(std):
            raise NumericError(f"Volumen constante{' ' + volume.name if volume.name else ''}: no se puede normalizar")
        return volume.replace(values=((values - mean) / std).astype(np.float32))

    @staticmethod
    def flip(image: np.ndarray, label: np.ndarray, axis: str) -> Tuple[np.ndarray, np.ndarray]:
        """Volteo arriba-abajo ("y") o izquierda-derecha ("x") en los planos x-y"""
        ax = {"y": 1, "x": 2}[axis]
        return np.flip(image, axis=ax).copy(), np.flip(label, axis=ax).copy()

    @staticmethod
    def rotate_xy(image: np.ndarray, label: np.ndarray, degrees: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Rotación en los planos x-y alrededor del centro del parche

        Los ángulos rectos son permutaciones exactas; el resto remuestrea la
        imagen linealmente y la etiqueta por vecino más cercano, con relleno 0
        """
        if degrees % 90 == 0:
            k = int(degrees // 90) % 4
            return np.rot90(image, k, axes=(1, 2)).copy(), np.rot90(label, k, axes=(1, 2)).copy()
        rotated = ndimage.rotate(image, degrees, axes=(1, 2), reshape=False, order=1,
                                 mode="constant", cval=0.0)
        rotated_label = ndimage.rotate(label, degrees, axes=(1, 2), reshape=False, order=0,
                                       mode="constant", cval=0)
        return rotated.astype(image.dtype), rotated_label.astype(label.dtype)

    @staticmethod
    def augment(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        Aumento en línea: volteo, rotación y ruido, cada uno con su probabilidad

        Args:
            image: Parche de intensidades (Z, Y, X)
            label: Parche de etiqueta {0, 1} con las mismas extensiones
            cfg: Probabilidades, ángulos y rango de sigma
            rng: Generador propio del productor

        Raises:
            ShapeError: Si las extensiones difieren
        """
        if image.shape != label.shape:
            raise ShapeError(f"augment: imagen {image.shape} y etiqueta {label.shape} difieren")
        # los sorteos se hacen siempre en el mismo orden para que la secuencia sea reproducible
        do_flip, do_rotate, do_noise = rng.random(3) < (cfg.p_flip, cfg.p_rotate, cfg.p_noise)
        flip_axis = "y" if rng.random() < 0.5 else "x"
        angle = cfg.rotations[int(rng.integers(len(cfg.rotations)))]
        sigma = rng.uniform(*cfg.noise_sigma)

        if do_flip:
            image, label = VolumeService.flip(image, label, flip_axis)
        if do_rotate:
            image, label = VolumeService.rotate_xy(image, label, angle)
        if do_noise:
            image = (image + rng.normal(0.0, sigma, size=image.shape)).astype(np.float32)
        return image, label

    @staticmethod
    def pad_to(values: np.ndarray, size: Tuple[int, int, int]) -> Tuple[np.ndarray, Tuple[slice, ...]]:
        """Relleno simétrico con ceros hasta al menos size; devuelve la región original"""
        pads = []
        region = []
        for n, s in zip(values.shape, size):
            total = max(0, s - n)
            before = total // 2
            pads.append((before, total - before))
            region.append(slice(before, before + n))
        if not any(p != (0, 0) for p in pads):
            return values, tuple(region)
        return np.pad(values, pads), tuple(region)

    @staticmethod
    def sample_patch(volume: Volume, size: Tuple[int, int, int] = (32, 96, 96),
                     rng: Optional[np.random.Generator] = None,
                     force_fg_fraction: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
        """
        Extrae un parche (z, y, x) con esquina aleatoria uniforme

        Con probabilidad force_fg_fraction se reintenta (hasta 50 veces)
        hasta obtener un parche con al menos un vóxel de primer plano
        """
        rng = rng if rng is not None else np.random.default_rng()
        label = volume.label if volume.label is not None else np.zeros(volume.extents, dtype=np.uint8)
        image, _ = VolumeService.pad_to(volume.values, size)
        label, _ = VolumeService.pad_to(label, size)
        force = rng.random() < force_fg_fraction

        def draw():
            corner = [int(rng.integers(0, n - s + 1)) for n, s in zip(image.shape, size)]
            window = tuple(slice(c, c + s) for c, s in zip(corner, size))
            return image[window], label[window]

        patch = draw()
        if force:
            tries = 1
            while not patch[1].any() and tries < FORCE_FG_TRIES:
                patch = draw()
                tries += 1
            if not patch[1].any():
                logger.warning(f"Sin primer plano tras {FORCE_FG_TRIES} intentos en {volume.name or 'volumen'}; parche uniforme")
        return patch[0].copy(), patch[1].copy()

    @staticmethod
    def phantom_generate(seed: int, n: int, extents: Tuple[int, int, int] = (32, 96, 96),
                         spacing: Tuple[float, float, float] = TARGET_SPACING,
                         noise_sigma: float = 0.2) -> List[Volume]:
        """
        Fantomas sintéticos: elipsoide con contraste 0.4, campo de sesgo suave
        multiplicativo (±30%) y ruido gaussiano

        Args:
            seed: Semilla; misma semilla, mismos volúmenes
            n: Número de fantomas
            extents: (Z, Y, X), al menos (16, 48, 48)
            spacing: Espaciado (z, y, x) en mm
            noise_sigma: Desviación del ruido aditivo

        Raises:
            ShapeError: Si las extensiones son demasiado pequeñas
        """
        if any(e < m for e, m in zip(extents, MIN_PHANTOM_EXTENTS)):
            raise ShapeError(f"Extensiones {extents} menores que el mínimo {MIN_PHANTOM_EXTENTS}")
        rng = np.random.default_rng(seed)
        zz, yy, xx = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij")
        # coordenadas normalizadas a [-1, 1] para el campo de sesgo
        uz, uy, ux = [2.0 * g / max(e - 1, 1) - 1.0 for g, e in zip((zz, yy, xx), extents)]
        basis = [uz, uy, ux, uz * uy, uy * ux, uz * ux, uz ** 2, uy ** 2, ux ** 2]

        phantoms = []
        for i in range(n):
            semi = [rng.uniform(0.15, 0.35) * e for e in extents]
            center = [rng.uniform(0.25, 0.75) * (e - 1) for e in extents]
            theta = rng.uniform(0.0, np.pi)
            dy, dx = yy - center[1], xx - center[2]
            u = np.cos(theta) * dx + np.sin(theta) * dy
            v = -np.sin(theta) * dx + np.cos(theta) * dy
            mask = ((zz - center[0]) / semi[0]) ** 2 + (v / semi[1]) ** 2 + (u / semi[2]) ** 2 <= 1.0

            coeffs = rng.normal(size=len(basis))
            field = sum(c * b for c, b in zip(coeffs, basis))
            field = field / max(np.abs(field).max(), 1e-12)
            bias = 1.0 + 0.3 * field

            clean = (0.2 + 0.4 * mask) * bias
            values = clean + rng.normal(0.0, noise_sigma, size=extents)
            phantoms.append(Volume(values.astype(np.float32), spacing, label=mask.astype(np.uint8),
                                   name=f"phantom_{seed}_{i:03d}"))
        logger.info(f"Generados {n} fantomas {extents} (semilla {seed})")
        return phantoms

    @staticmethod
    def load_dataset(directory: Union[str, Path], preprocess: bool = True) -> List[Volume]:
        """
        Carga pares imagen/etiqueta de un directorio

        Las etiquetas se reconocen por los sufijos _label o _segmentation.
        Con preprocess se remuestrea al espaciado objetivo y se normaliza.

        Raises:
            DataError: Si no hay pares imagen/etiqueta
        """
        directory = Path(directory)
        headers = sorted(list(directory.glob("*.mhd")) + list(directory.glob("*.mha")))
        labels = {}
        images = []
        for header in headers:
            for suffix in LABEL_SUFFIXES:
                if header.stem.endswith(suffix):
                    labels[header.stem[: -len(suffix)]] = header
                    break
            else:
                images.append(header)

        dataset = []
        for image_path in images:
            label_path = labels.get(image_path.stem)
            if label_path is None:
                logger.warning(f"{image_path.name} no tiene etiqueta; se omite")
                continue
            volume = VolumeService.read_metaimage(image_path)
            label = VolumeService.read_metaimage(label_path)
            if label.extents != volume.extents:
                raise DataError(f"{image_path.name}: etiqueta {label.extents} y volumen {volume.extents} difieren")
            volume = volume.replace(label=(label.values > 0).astype(np.uint8))
            if preprocess:
                volume = VolumeService.normalize_zscore(VolumeService.resample(volume))
            dataset.append(volume)

        if not dataset:
            raise DataError(f"No se encontraron pares imagen/etiqueta en {directory}")
        logger.info(f"Dataset cargado: {len(dataset)} volúmenes desde {directory}")
        return dataset


# Instancia global del servicio
volume_service = VolumeService()

read_metaimage = volume_service.read_metaimage
write_metaimage = volume_service.write_metaimage
resample = volume_service.resample
normalize_zscore = volume_service.normalize_zscore
augment = volume_service.augment
sample_patch = volume_service.sample_patch
phantom_generate = volume_service.phantom_generate
load_dataset = volume_service.load_dataset
