"""
Servicio de redes
Construye el generador (codificador ResNet-50 3D + decodificador GC/BR)
y el discriminador convolucional de 6 capas
"""
import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from core.errors import CheckpointError, ShapeError
from core.layers import BatchNormState, batchnorm3d, conv3d, maxpool3d, upsample_trilinear
from core.tensor import Tensor, activation, combine, reduce
from models import BottleneckSpec, ConvSpec, GCBlockSpec, ModelSummary, StageSpec

logger = logging.getLogger(__name__)

# Anchos de ResNet-50: (nombre, bloques, planos, stride (x, y, z) del primer bloque)
RESNET50_STAGES = [
    ("res2", 3, 64, (1, 1, 1)),
    ("res3", 4, 128, (2, 2, 2)),
    ("res4", 6, 256, (2, 2, 2)),
    ("res5", 3, 512, (2, 2, 2)),
]
EXPANSION = 4
PRESET_DIVISOR = {"paper": 1, "tiny": 8}
DECODER_WIDTH = {"paper": 32, "tiny": 8}
DISCRIMINATOR_WIDTHS = (64, 128, 256, 512, 512)

# Formas 2D (out, in, kh, kw) de las convoluciones de ResNet-50 sin la cabeza
# de clasificación; conv1 recibe RGB
RESNET50_2D_CONV_SHAPES: Dict[str, Tuple[int, int, int, int]] = {
    "conv1": (64, 3, 7, 7),
    "res2.0.conv1": (64, 64, 1, 1), "res2.0.conv2": (64, 64, 3, 3), "res2.0.conv3": (256, 64, 1, 1), "res2.0.downsample": (256, 64, 1, 1),
    "res2.1.conv1": (64, 256, 1, 1), "res2.1.conv2": (64, 64, 3, 3), "res2.1.conv3": (256, 64, 1, 1),
    "res2.2.conv1": (64, 256, 1, 1), "res2.2.conv2": (64, 64, 3, 3), "res2.2.conv3": (256, 64, 1, 1),
    "res3.0.conv1": (128, 256, 1, 1), "res3.0.conv2": (128, 128, 3, 3), "res3.0.conv3": (512, 128, 1, 1), "res3.0.downsample": (512, 256, 1, 1),
    "res3.1.conv1": (128, 512, 1, 1), "res3.1.conv2": (128, 128, 3, 3), "res3.1.conv3": (512, 128, 1, 1),
    "res3.2.conv1": (128, 512, 1, 1), "res3.2.conv2": (128, 128, 3, 3), "res3.2.conv3": (512, 128, 1, 1),
    "res3.3.conv1": (128, 512, 1, 1), "res3.3.conv2": (128, 128, 3, 3), "res3.3.conv3": (512, 128, 1, 1),
    "res4.0.conv1": (256, 512, 1, 1), "res4.0.conv2": (256, 256, 3, 3), "res4.0.conv3": (1024, 256, 1, 1), "res4.0.downsample": (1024, 512, 1, 1),
    "res4.1.conv1": (256, 1024, 1, 1), "res4.1.conv2": (256, 256, 3, 3), "res4.1.conv3": (1024, 256, 1, 1),
    "res4.2.conv1": (256, 1024, 1, 1), "res4.2.conv2": (256, 256, 3, 3), "res4.2.conv3": (1024, 256, 1, 1),
    "res4.3.conv1": (256, 1024, 1, 1), "res4.3.conv2": (256, 256, 3, 3), "res4.3.conv3": (1024, 256, 1, 1),
    "res4.4.conv1": (256, 1024, 1, 1), "res4.4.conv2": (256, 256, 3, 3), "res4.4.conv3": (1024, 256, 1, 1),
    "res4.5.conv1": (256, 1024, 1, 1), "res4.5.conv2": (256, 256, 3, 3), "res4.5.conv3": (1024, 256, 1, 1),
    "res5.0.conv1": (512, 1024, 1, 1), "res5.0.conv2": (512, 512, 3, 3), "res5.0.conv3": (2048, 512, 1, 1), "res5.0.downsample": (2048, 1024, 1, 1),
    "res5.1.conv1": (512, 2048, 1, 1), "res5.1.conv2": (512, 512, 3, 3), "res5.1.conv3": (2048, 512, 1, 1),
    "res5.2.conv1": (512, 2048, 1, 1), "res5.2.conv2": (512, 512, 3, 3), "res5.2.conv3": (2048, 512, 1, 1),
}


def br_specs(channels: int) -> Dict[str, ConvSpec]:
    """Convoluciones del bloque de refinamiento de borde: 3x3x1 y luego 1x1x3"""
    return {
        "conv1": ConvSpec(in_channels=channels, out_channels=channels, kernel=(3, 3, 1),
                          padding=(1, 1, 0), has_bias=True),
        "conv2": ConvSpec(in_channels=channels, out_channels=channels, kernel=(1, 1, 3),
                          padding=(0, 0, 1), has_bias=True),
    }


def init_conv(spec: ConvSpec, rng: np.random.Generator, dtype: str = "f32",
              gain: float = 1.0) -> Tuple[Tensor, Optional[Tensor]]:
    """Inicialización He-uniforme; sesgo en cero"""
    kx, ky, kz = spec.kernel
    fan_in = spec.in_channels * kx * ky * kz
    bound = gain * np.sqrt(6.0 / fan_in)
    np_dtype = np.float64 if dtype == "f64" else np.float32
    weight = Tensor(rng.uniform(-bound, bound, size=spec.weight_shape).astype(np_dtype), requires_grad=True)
    bias = Tensor(np.zeros(spec.out_channels, dtype=np_dtype), requires_grad=True) if spec.has_bias else None
    return weight, bias


def init_block_params(specs: Dict[str, ConvSpec], rng: np.random.Generator, prefix: str,
                      dtype: str = "f32") -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    for name, spec in specs.items():
        weight, bias = init_conv(spec, rng, dtype)
        params[f"{prefix}.{name}.weight"] = weight
        if bias is not None:
            params[f"{prefix}.{name}.bias"] = bias
    return params


def apply_conv(x: Tensor, spec: ConvSpec, params: Dict[str, Tensor], name: str) -> Tensor:
    return conv3d(x, spec, params[f"{name}.weight"], params.get(f"{name}.bias"))


def gc_block(x: Tensor, spec: GCBlockSpec, params: Dict[str, Tensor], prefix: str = "gc") -> Tensor:
    """
    Bloque de convolución global 3D

    Suma de la rama x->y->z, la rama z->y->x y una proyección 1x1x1 de la entrada

    Raises:
        ShapeError: Si los canales de entrada no coinciden
    """
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"gc_block: {x.shape[1]} canales, se esperaban {spec.in_channels}")
    convs = spec.branch_specs()
    a = x
    for name in ("a1", "a2", "a3"):
        a = apply_conv(a, convs[name], params, f"{prefix}.{name}")
    b = x
    for name in ("b1", "b2", "b3"):
        b = apply_conv(b, convs[name], params, f"{prefix}.{name}")
    proj = apply_conv(x, convs["proj"], params, f"{prefix}.proj")
    return combine(combine(a, b, "add"), proj, "add")


def br_block(x: Tensor, params: Dict[str, Tensor], prefix: str = "br") -> Tensor:
    """
    Bloque de refinamiento de borde: x + conv1x1x3(relu(conv3x3x1(x)))

    Raises:
        ShapeError: Si los canales no coinciden con los pesos del bloque
    """
    channels = params[f"{prefix}.conv1.weight"].shape[0]
    if x.shape[1] != channels:
        raise ShapeError(f"br_block: {x.shape[1]} canales, el bloque tiene {channels}")
    specs = br_specs(channels)
    h = activation(apply_conv(x, specs["conv1"], params, f"{prefix}.conv1"), "relu")
    h = apply_conv(h, specs["conv2"], params, f"{prefix}.conv2")
    return combine(x, h, "add")


class Model:
    """Colección de parámetros con nombre, descriptores de capas y estado de batch norm"""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.conv_specs: Dict[str, ConvSpec] = {}
        self.bn_channels: Dict[str, int] = {}
        self.bn_states: Dict[str, BatchNormState] = {}
        self.mode = "train"
        self.dtype = "f32"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _add_conv(self, name: str, spec: ConvSpec, rng: Optional[np.random.Generator], gain: float = 1.0):
        self.conv_specs[name] = spec
        if rng is None:
            return
        weight, bias = init_conv(spec, rng, self.dtype, gain)
        self.params[f"{name}.weight"] = weight
        if bias is not None:
            self.params[f"{name}.bias"] = bias

    def _add_bn(self, name: str, channels: int, materialize: bool):
        self.bn_channels[name] = channels
        if not materialize:
            return
        np_dtype = np.float64 if self.dtype == "f64" else np.float32
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=np_dtype), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=np_dtype), requires_grad=True)
        self.bn_states[name] = BatchNormState(channels, np_dtype)

    def conv(self, name: str, x: Tensor) -> Tensor:
        return apply_conv(x, self.conv_specs[name], self.params, name)

    def bn(self, name: str, x: Tensor) -> Tensor:
        return batchnorm3d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                           self.bn_states[name], self.mode)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Parámetros y estadísticas de batch norm, en orden de construcción"""
        state = {name: p.data for name, p in self.params.items()}
        for name, rs in self.bn_states.items():
            state[f"{name}.running_mean"] = rs.running_mean
            state[f"{name}.running_var"] = rs.running_var
        return state

    def load_state_tensors(self, state: Dict[str, np.ndarray]) -> None:
        current = self.state_tensors()
        missing = set(current) - set(state)
        if missing:
            raise CheckpointError(f"Faltan tensores en el checkpoint: {sorted(missing)[:3]}")
        for name, value in current.items():
            if state[name].shape != value.shape:
                raise CheckpointError(
                    f"Tensor {name}: forma {state[name].shape} en el checkpoint, {value.shape} según la configuración"
                )
            value[...] = state[name]


class Generator(Model):
    """Red de segmentación: codificador ResNet-50 3D + decodificador GC/BR"""

    def __init__(self, preset: str = "paper", gc_kernel: Tuple[int, int, int] = (7, 7, 3),
                 seed: int = 0, dtype: str = "f32", materialize: bool = True):
        super().__init__()
        if preset not in PRESET_DIVISOR:
            raise ValueError(f"Preset desconocido: {preset}")
        self.preset = preset
        self.gc_kernel = tuple(gc_kernel)
        self.dtype = dtype
        div = PRESET_DIVISOR[preset]
        rng = np.random.default_rng(seed) if materialize else None

        # Codificador
        base = 64 // div
        self._add_conv("conv1", ConvSpec(in_channels=1, out_channels=base, kernel=(7, 7, 3),
                                         stride=(2, 2, 1), padding=(3, 3, 1)), rng)
        self._add_bn("bn1", base, materialize)
        self.encoder: List[StageSpec] = []
        in_ch = base
        for stage_name, blocks, planes, stride in RESNET50_STAGES:
            planes //= div
            out_ch = planes * EXPANSION
            stage_blocks = []
            for b in range(blocks):
                name = f"{stage_name}.{b}"
                s = stride if b == 0 else (1, 1, 1)
                block = BottleneckSpec(
                    name=name,
                    conv1=ConvSpec(in_channels=in_ch, out_channels=planes, kernel=(1, 1, 1)),
                    conv2=ConvSpec(in_channels=planes, out_channels=planes, kernel=(3, 3, 1),
                                   stride=s, padding=(1, 1, 0)),
                    conv3=ConvSpec(in_channels=planes, out_channels=out_ch, kernel=(1, 1, 1)),
                    downsample=ConvSpec(in_channels=in_ch, out_channels=out_ch, kernel=(1, 1, 1), stride=s)
                    if b == 0 else None,
                )
                for part in ("conv1", "conv2", "conv3", "downsample"):
                    spec = getattr(block, part)
                    if spec is None:
                        continue
                    self._add_conv(f"{name}.{part}", spec, rng)
                    self._add_bn(f"{name}.{part}.bn", spec.out_channels, materialize)
                stage_blocks.append(block)
                in_ch = out_ch
            self.encoder.append(StageSpec(name=stage_name, blocks=stage_blocks))

        # Decodificador
        width = DECODER_WIDTH[preset]
        self.decoder_width = width
        self.decoder: Dict[str, GCBlockSpec] = {}
        for stage in self.encoder:
            stage_out = stage.blocks[-1].conv3.out_channels
            gc = GCBlockSpec(in_channels=stage_out, mid_channels=width, kernel=self.gc_kernel)
            self.decoder[stage.name] = gc
            for part, spec in gc.branch_specs().items():
                self._add_conv(f"dec.{stage.name}.gc.{part}", spec, rng)
            self._add_br(f"dec.{stage.name}.br", width, rng)
        self.fusion_steps = ["up4", "up3", "up2", "up1", "up0"]
        for name in self.fusion_steps:
            self._add_br(f"dec.{name}.br", width, rng)
        self._add_conv("final", ConvSpec(in_channels=width, out_channels=1, kernel=(1, 1, 1), has_bias=True), rng)

        if materialize:
            logger.info(
                f"Generador '{preset}' construido: {count_parameters(self):,} parámetros, "
                f"{count_conv_layers(self)} capas convolucionales"
            )

    def _add_br(self, prefix: str, channels: int, rng):
        for part, spec in br_specs(channels).items():
            self._add_conv(f"{prefix}.{part}", spec, rng)

    @property
    def stride_product(self) -> Tuple[int, int, int]:
        """Divisibilidad requerida de la entrada en (z, y, x)"""
        return (8, 32, 32)

    def encoder_conv_names(self) -> List[str]:
        return [n for n in self.conv_specs if n == "conv1" or n.startswith("res")]

    def encode(self, x: Tensor) -> Dict[str, Tensor]:
        h = activation(self.bn("bn1", self.conv("conv1", x)), "relu")
        h = maxpool3d(h, kernel=(3, 3, 1), stride=(2, 2, 1), padding=(1, 1, 0))
        features: Dict[str, Tensor] = {}
        for stage in self.encoder:
            for block in stage.blocks:
                name = block.name
                out = activation(self.bn(f"{name}.conv1.bn", self.conv(f"{name}.conv1", h)), "relu")
                out = activation(self.bn(f"{name}.conv2.bn", self.conv(f"{name}.conv2", out)), "relu")
                out = self.bn(f"{name}.conv3.bn", self.conv(f"{name}.conv3", out))
                shortcut = h
                if block.downsample is not None:
                    shortcut = self.bn(f"{name}.downsample.bn", self.conv(f"{name}.downsample", h))
                h = activation(combine(out, shortcut, "add"), "relu")
            features[stage.name] = h
        return features

    def forward(self, x: Tensor) -> Tensor:
        return generator_forward(self, x)


def generator_forward(g: Generator, x: Tensor) -> Tensor:
    """
    Predicción volumétrica: probabilidad de primer plano por vóxel

    Args:
        g: Generador
        x: Volumen (N, 1, Z, Y, X) con Z divisible por 8 e Y, X por 32

    Returns:
        Tensor: (N, 1, Z, Y, X) con valores en (0, 1)

    Raises:
        ShapeError: Si las extensiones no son divisibles
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"El generador espera (N, 1, Z, Y, X), recibido {x.shape}")
    for n, d in zip(x.shape[2:], g.stride_product):
        if n % d:
            raise ShapeError(f"Extensiones {x.shape[2:]} no divisibles por {g.stride_product}")

    features = g.encode(x)
    skips = {}
    for stage_name, spec in g.decoder.items():
        h = gc_block(features[stage_name], spec, g.params, f"dec.{stage_name}.gc")
        skips[stage_name] = br_block(h, g.params, f"dec.{stage_name}.br")

    d = skips["res5"]
    for step, skip in (("up4", "res4"), ("up3", "res3"), ("up2", "res2")):
        d = combine(upsample_trilinear(d, (2, 2, 2)), skips[skip], "add")
        d = br_block(d, g.params, f"dec.{step}.br")
    for step in ("up1", "up0"):
        d = br_block(upsample_trilinear(d, (2, 2, 1)), g.params, f"dec.{step}.br")
    return activation(g.conv("final", d), "sigmoid")


class Discriminator(Model):
    """Clasificador de 6 capas convolucionales sin capas densas"""

    def __init__(self, preset: str = "paper", seed: int = 1, dtype: str = "f32", materialize: bool = True):
        super().__init__()
        self.preset = preset
        self.dtype = dtype
        div = PRESET_DIVISOR[preset]
        rng = np.random.default_rng(seed) if materialize else None
        in_ch = 2
        self.layers: List[str] = []
        for i, width in enumerate(DISCRIMINATOR_WIDTHS):
            name = f"d{i + 1}"
            self._add_conv(name, ConvSpec(in_channels=in_ch, out_channels=width // div, kernel=(3, 3, 3),
                                          stride=(2, 2, 2), padding=(1, 1, 1), has_bias=True), rng)
            self.layers.append(name)
            in_ch = width // div
        # última capa con ganancia reducida: logits iniciales cerca de 0
        self._add_conv("d6", ConvSpec(in_channels=in_ch, out_channels=1, kernel=(1, 1, 1), has_bias=True),
                       rng, gain=0.01)
        self.layers.append("d6")
        if materialize:
            logger.info(f"Discriminador '{preset}' construido: {count_parameters(self):,} parámetros")

    def forward(self, seg_or_gt: Tensor, x: Tensor) -> Tensor:
        return discriminator_forward(self, seg_or_gt, x)


def discriminator_forward(d: Discriminator, seg_or_gt: Tensor, x: Tensor) -> Tensor:
    """
    Logit crudo por ítem del batch para el par (segmentación, imagen)

    Raises:
        ShapeError: Si las formas no coinciden
    """
    if seg_or_gt.shape != x.shape:
        raise ShapeError(f"Discriminador: segmentación {seg_or_gt.shape} e imagen {x.shape} difieren")
    h = combine(seg_or_gt, x, "concat_channels")
    for name in d.layers[:-1]:
        h = activation(d.conv(name, h), "leaky_relu", slope=0.2)
    h = d.conv(d.layers[-1], h)
    return reduce(h, "mean", axes=(1, 2, 3, 4))


def build_generator(channels_preset: str = "paper", gc_kernel: Tuple[int, int, int] = (7, 7, 3),
                    seed: int = 0, dtype: str = "f32", materialize: bool = True) -> Generator:
    """
    Construye el generador

    Args:
        channels_preset: "paper" (anchos de ResNet-50) o "tiny" (anchos / 8)
        gc_kernel: (kx, ky, kz) impares del kernel grande de los bloques GC
        materialize: Si False solo se crean los descriptores (conteos sin pesos)

    Raises:
        ValueError: Si alguna extensión del kernel es par
    """
    if any(k % 2 == 0 or k < 1 for k in gc_kernel):
        raise ValueError(f"Las extensiones del kernel GC deben ser impares: {gc_kernel}")
    return Generator(channels_preset, gc_kernel, seed=seed, dtype=dtype, materialize=materialize)


def build_discriminator(channels_preset: str = "paper", seed: int = 1, dtype: str = "f32",
                        materialize: bool = True) -> Discriminator:
    return Discriminator(channels_preset, seed=seed, dtype=dtype, materialize=materialize)


def count_parameters(model, names: Optional[Iterable[str]] = None) -> int:
    """
    Valores entrenables: pesos/sesgos de convolución y afines de batch norm

    Args:
        model: Generator, Discriminator o ConvSpec
        names: Restringe el conteo a estas capas convolucionales (y sus batch norm)
    """
    if isinstance(model, ConvSpec):
        return model.parameter_count()
    selected = set(model.conv_specs) if names is None else set(names)
    total = sum(spec.parameter_count() for name, spec in model.conv_specs.items() if name in selected)
    for bn_name, channels in model.bn_channels.items():
        owner = "conv1" if bn_name == "bn1" else bn_name.rsplit(".bn", 1)[0]
        if owner in selected:
            total += 2 * channels
    return total


def count_conv_layers(model, names: Optional[Iterable[str]] = None) -> int:
    """Capas convolucionales de codificador, decodificador y bloques"""
    if isinstance(model, ConvSpec):
        return 1
    if names is None:
        return len(model.conv_specs)
    return len(set(names) & set(model.conv_specs))


def model_summary(g: Generator, d: Optional[Discriminator] = None) -> ModelSummary:
    """Conteos de capas y parámetros junto a las filas de referencia"""
    encoder = g.encoder_conv_names()
    rows = [
        ("3D ResNet encoder", count_conv_layers(g, encoder), count_parameters(g, encoder)),
        ("3D Encoder-decoder (G)", count_conv_layers(g), count_parameters(g)),
    ]
    if d is not None:
        rows.append(("3D GCA-Net (G + D)", count_conv_layers(g) + count_conv_layers(d),
                     count_parameters(g) + count_parameters(d)))
    return ModelSummary(rows=rows)


class NetworkService:
    """Punto de entrada para construir, ejecutar y describir las redes"""

    build_generator = staticmethod(build_generator)
    build_discriminator = staticmethod(build_discriminator)
    generator_forward = staticmethod(generator_forward)
    discriminator_forward = staticmethod(discriminator_forward)
    count_parameters = staticmethod(count_parameters)
    count_conv_layers = staticmethod(count_conv_layers)
    model_summary = staticmethod(model_summary)


# Instancia global del servicio
network_service = NetworkService()
