"""
Modelos Pydantic para especificaciones, configuración y reportes de GCA-Net
"""
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from core.errors import ShapeError


def _split_tuple(value):
    """Acepta "a,b,c" o "a b c" además de secuencias (archivos key=value)"""
    if isinstance(value, str):
        return tuple(part for part in value.replace(",", " ").split())
    return value


class ConvSpec(BaseModel):
    """Geometría de una convolución 3D; las tuplas van en orden (x, y, z)"""
    in_channels: int = Field(..., ge=1, description="Canales de entrada")
    out_channels: int = Field(..., ge=1, description="Canales de salida")
    kernel: Tuple[int, int, int] = Field(..., description="(kx, ky, kz)")
    stride: Tuple[int, int, int] = Field(default=(1, 1, 1), description="(sx, sy, sz)")
    padding: Tuple[int, int, int] = Field(default=(0, 0, 0), description="(px, py, pz) relleno con ceros")
    has_bias: bool = Field(default=False, description="Si la capa lleva sesgo")

    class Config:
        frozen = True
        json_schema_extra = {
            "example": {
                "in_channels": 4,
                "out_channels": 8,
                "kernel": [3, 3, 1],
                "stride": [1, 1, 1],
                "padding": [1, 1, 0],
                "has_bias": True
            }
        }

    @model_validator(mode="after")
    def _check_geometry(self):
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError("kernel y stride deben ser positivos")
        if any(p < 0 for p in self.padding):
            raise ValueError("el relleno no puede ser negativo")
        return self

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: Tuple[int, int, int],
             stride: Tuple[int, int, int] = (1, 1, 1), has_bias: bool = False) -> "ConvSpec":
        """Convolución con relleno (k-1)//2 por eje"""
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            padding=tuple((k - 1) // 2 for k in kernel),
            has_bias=has_bias,
        )

    @property
    def weight_shape(self) -> Tuple[int, int, int, int, int]:
        kx, ky, kz = self.kernel
        return (self.out_channels, self.in_channels, kz, ky, kx)

    def parameter_count(self) -> int:
        kx, ky, kz = self.kernel
        bias = self.out_channels if self.has_bias else 0
        return kx * ky * kz * self.in_channels * self.out_channels + bias

    def output_extent(self, extent_zyx: Tuple[int, int, int]) -> Tuple[int, int, int]:
        """Extensión de salida (z, y, x) = floor((n + 2p - k)/s) + 1"""
        kx, ky, kz = self.kernel
        sx, sy, sz = self.stride
        px, py, pz = self.padding
        out = []
        for n, k, s, p in zip(extent_zyx, (kz, ky, kx), (sz, sy, sx), (pz, py, px)):
            if n + 2 * p < k:
                raise ShapeError(f"Extensión {n} con relleno {p} menor que el kernel {k}")
            out.append((n + 2 * p - k) // s + 1)
        return tuple(out)


class GCBlockSpec(BaseModel):
    """Bloque de convolución global: dos ramas de tres convoluciones 1D"""
    in_channels: int = Field(..., ge=1)
    mid_channels: int = Field(..., ge=1)
    kernel: Tuple[int, int, int] = Field(default=(7, 7, 3), description="(kx, ky, kz) del kernel grande")
    has_bias: bool = True

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, v):
        if any(k < 1 or k % 2 == 0 for k in v):
            raise ValueError(f"las extensiones del kernel GC deben ser impares: {v}")
        return v

    def branch_specs(self) -> Dict[str, ConvSpec]:
        """Rama a: x -> y -> z; rama b: z -> y -> x; proyección 1x1x1 residual"""
        kx, ky, kz = self.kernel
        c, m, b = self.in_channels, self.mid_channels, self.has_bias
        return {
            "a1": ConvSpec.same(c, m, (kx, 1, 1), has_bias=b),
            "a2": ConvSpec.same(m, m, (1, ky, 1), has_bias=b),
            "a3": ConvSpec.same(m, m, (1, 1, kz), has_bias=b),
            "b1": ConvSpec.same(c, m, (1, 1, kz), has_bias=b),
            "b2": ConvSpec.same(m, m, (1, ky, 1), has_bias=b),
            "b3": ConvSpec.same(m, m, (kx, 1, 1), has_bias=b),
            "proj": ConvSpec.same(c, m, (1, 1, 1), has_bias=b),
        }


class BottleneckSpec(BaseModel):
    """Bloque bottleneck de ResNet-50 expandido a 3D"""
    name: str
    conv1: ConvSpec
    conv2: ConvSpec
    conv3: ConvSpec
    downsample: Optional[ConvSpec] = None


class StageSpec(BaseModel):
    """Etapa del codificador (res2..res5)"""
    name: str
    blocks: List[BottleneckSpec]


class LossWeights(BaseModel):
    """Pesos de la pérdida híbrida"""
    lambda_: float = Field(default=100.0, alias="lambda", ge=0.0, description="Peso de la entropía cruzada")
    w_fg: float = Field(default=1.0, gt=0.0)
    w_bg: float = Field(default=1.0, gt=0.0)

    class Config:
        populate_by_name = True


class AugmentConfig(BaseModel):
    """Aumento de datos en línea"""
    p_flip: float = Field(default=0.5, ge=0.0, le=1.0)
    p_rotate: float = Field(default=0.5, ge=0.0, le=1.0)
    p_noise: float = Field(default=0.5, ge=0.0, le=1.0)
    rotations: Tuple[float, ...] = Field(default=(25.0, -25.0, 90.0, 180.0, 270.0))
    noise_sigma: Tuple[float, float] = Field(default=(0.3, 0.7))

    _split = field_validator("rotations", "noise_sigma", mode="before")(_split_tuple)

    @field_validator("noise_sigma")
    @classmethod
    def _positive_sigma(cls, v):
        if v[0] <= 0 or v[1] < v[0]:
            raise ValueError(f"rango de sigma inválido: {v}")
        return v


class TrainConfig(BaseModel):
    """Hiperparámetros de entrenamiento; los valores por defecto son los de referencia"""
    lr: float = Field(default=1e-3, gt=0.0)
    betas: Tuple[float, float] = Field(default=(0.9, 0.999))
    weight_decay: float = Field(default=1e-6, ge=0.0)
    lambda_: float = Field(default=100.0, alias="lambda", gt=0.0)
    batch_size: int = Field(default=2, ge=1)
    patch: Tuple[int, int, int] = Field(default=(32, 96, 96), description="(z, y, x)")
    steps: int = Field(default=1000, ge=0)
    seed: int = Field(default=0, ge=0)
    preset: Literal["paper", "tiny"] = "paper"
    gc_kernel: Tuple[int, int, int] = Field(default=(7, 7, 3), description="(kx, ky, kz)")
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    d_steps_per_g: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=100, ge=1)
    force_fg_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    adversarial: bool = True
    log_every: int = Field(default=10, ge=1)
    prefetch: int = Field(default=2, ge=1)

    class Config:
        populate_by_name = True
        json_schema_extra = {
            "example": {
                "lr": 0.001,
                "betas": [0.9, 0.999],
                "weight_decay": 1e-06,
                "lambda": 100.0,
                "batch_size": 2,
                "patch": [32, 96, 96],
                "steps": 800,
                "seed": 0,
                "preset": "tiny",
                "gc_kernel": [7, 7, 3]
            }
        }

    _split = field_validator("betas", "patch", "gc_kernel", mode="before")(_split_tuple)

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, v):
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas fuera de [0, 1): {v}")
        return v

    @field_validator("patch", "gc_kernel")
    @classmethod
    def _positive(cls, v):
        if any(n < 1 for n in v):
            raise ValueError(f"extensiones no positivas: {v}")
        return v

    @classmethod
    def from_flat(cls, values: Dict[str, str]) -> "TrainConfig":
        """Construye desde pares key=value; las claves "augment.x" van al submodelo"""
        data: Dict[str, object] = {}
        augment: Dict[str, str] = {}
        for key, value in values.items():
            if key.startswith("augment."):
                augment[key.split(".", 1)[1]] = value
            else:
                data[key] = value
        if augment:
            data["augment"] = augment
        return cls.model_validate(data)

    def snapshot_values(self) -> Dict[str, str]:
        """Pares key=value planos; las claves anidadas quedan como augment.x"""
        flat: Dict[str, str] = {}
        for key, value in self.model_dump(by_alias=True).items():
            if key == "augment":
                for sub_key, sub_value in value.items():
                    flat[f"augment.{sub_key}"] = _format_value(sub_value)
            else:
                flat[key] = _format_value(value)
        return flat

    def snapshot(self) -> str:
        """Texto key=value con claves ordenadas; mismo formato que el archivo de configuración"""
        flat = self.snapshot_values()
        return "".join(f"{k}={flat[k]}\n" for k in sorted(flat))


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RegionMetrics(BaseModel):
    """Métricas de una región (whole, base o apex)"""
    dsc: float = Field(..., ge=0.0, le=1.0, description="Coeficiente de Dice")
    abd: Optional[float] = Field(None, ge=0.0, description="Distancia media de borde (mm)")
    hd95: Optional[float] = Field(None, ge=0.0, description="Hausdorff 95% (mm)")
    distances_defined: bool = Field(default=True, description="False si alguna máscara estaba vacía")


class MetricsReport(BaseModel):
    """Reporte de evaluación con desglose whole/base/apex"""
    whole: RegionMetrics
    base: RegionMetrics
    apex: RegionMetrics
    spacing: Tuple[float, float, float] = Field(..., description="Espaciado (z, y, x) en mm")

    class Config:
        json_schema_extra = {
            "example": {
                "whole": {"dsc": 0.889, "abd": 1.901, "hd95": 4.990, "distances_defined": True},
                "base": {"dsc": 0.877, "abd": 1.969, "hd95": 4.703, "distances_defined": True},
                "apex": {"dsc": 0.861, "abd": 1.901, "hd95": 4.300, "distances_defined": True},
                "spacing": [1.5, 1.0, 1.0]
            }
        }

    def regions(self) -> List[Tuple[str, RegionMetrics]]:
        return [("whole", self.whole), ("base", self.base), ("apex", self.apex)]

    def to_csv(self) -> str:
        lines = ["region,dsc,abd_mm,hd95_mm"]
        for name, region in self.regions():
            abd = "undefined" if region.abd is None else f"{region.abd:.6f}"
            hd95 = "undefined" if region.hd95 is None else f"{region.hd95:.6f}"
            lines.append(f"{name},{region.dsc:.6f},{abd},{hd95}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        lines = [f"{'Región':<8}{'DSC':>8}{'ABD(mm)':>10}{'95%HD(mm)':>11}"]
        for name, region in self.regions():
            abd = "  n/d" if region.abd is None else f"{region.abd:.2f}"
            hd95 = "  n/d" if region.hd95 is None else f"{region.hd95:.2f}"
            lines.append(f"{name:<8}{region.dsc:>8.3f}{abd:>10}{hd95:>11}")
        return "\n".join(lines)


class ModelSummary(BaseModel):
    """Conteo de capas convolucionales y parámetros al estilo de la tabla comparativa"""
    rows: List[Tuple[str, int, int]] = Field(..., description="(método, capas conv, parámetros)")
    reference: List[Tuple[str, int, int]] = Field(
        default=[
            ("ResNet-50", 53, 23507904),
            ("3D Encoder-decoder", 141, 29601094),
            ("3D GCA-Net", 148, 33540327),
        ],
        description="Filas de referencia para comparación",
    )

    def format_table(self) -> str:
        lines = [f"{'Method':<28}|{'Conv Layers':>12} |{'Parameters':>14}"]
        lines.append("-" * 58)
        for name, layers, params in self.rows:
            lines.append(f"{name:<28}|{layers:>12} |{params:>14,}")
        lines.append("-" * 58)
        for name, layers, params in self.reference:
            lines.append(f"{'(ref) ' + name:<28}|{layers:>12} |{params:>14,}")
        return "\n".join(lines)


class FoldResult(BaseModel):
    """Resultado de un pliegue de validación cruzada"""
    fold: int
    train_indices: List[int]
    test_indices: List[int]
    reports: List[MetricsReport]

    def mean_whole(self) -> Tuple[float, Optional[float], Optional[float]]:
        dscs = [r.whole.dsc for r in self.reports]
        abds = [r.whole.abd for r in self.reports if r.whole.abd is not None]
        hds = [r.whole.hd95 for r in self.reports if r.whole.hd95 is not None]
        mean = lambda xs: sum(xs) / len(xs) if xs else None
        return mean(dscs), mean(abds), mean(hds)
