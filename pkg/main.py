"""
GCA-Net - Segmentación 3D de próstata en RM
Punto de entrada de línea de comandos: train, infer, eval, phantom, convert, inspect
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import load_train_config, parse_train_config, settings
from core.errors import ConfigError, GCANetError
from core.layers import set_num_threads
from models import TrainConfig
from services.checkpoint_service import checkpoint_service
from services.inference_service import inference_service
from services.metrics_service import metrics_service
from services.network_service import build_discriminator, build_generator, count_parameters, network_service
from services.trainer_service import trainer_service
from services.volume_service import MIN_PHANTOM_EXTENTS, TARGET_SPACING, volume_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DTYPE_FLAGS = {"uchar": "MET_UCHAR", "short": "MET_SHORT", "ushort": "MET_USHORT", "float": "MET_FLOAT"}


class UsageError(Exception):
    """Error de uso de la línea de comandos"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse que lanza UsageError en lugar de terminar el proceso"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="gcanet", description=settings.APP_DESCRIPTION)
    parser.add_argument("--threads", type=int, default=settings.THREADS,
                        help="Hilos de los kernels (por defecto: núcleos disponibles)")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="Nivel de logging")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    p = sub.add_parser("train", help="Entrenamiento adversarial")
    p.add_argument("--config", help="Archivo key=value con TrainConfig")
    p.add_argument("--data", help="Directorio con pares imagen/etiqueta MetaImage")
    p.add_argument("--phantoms", type=int, help="Entrenar con K fantomas sintéticos en lugar de --data")
    p.add_argument("--out", required=True, help="Directorio de checkpoints y métricas")
    p.add_argument("--resume", help="Checkpoint desde el que continuar")
    p.add_argument("--cross-validate", type=int, metavar="K", help="Validación cruzada de K pliegues")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="Sobrescribe una clave de la configuración (repetible)")
    for flag, kind in (("--steps", int), ("--seed", int), ("--batch-size", int), ("--lr", float)):
        p.add_argument(flag, type=kind)
    p.add_argument("--preset", choices=["paper", "tiny"])
    p.add_argument("--no-adversarial", action="store_true", help="Solo entropía cruzada ponderada")

    p = sub.add_parser("infer", help="Segmentación de un volumen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, nargs=3, metavar=("Z", "Y", "X"))

    p = sub.add_parser("eval", help="Métricas de una predicción contra la referencia")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", help="Escribe el reporte en CSV")
    p.add_argument("--base-at", choices=["high", "low"], default="high",
                   help="Extremo z donde está la base de la glándula")

    p = sub.add_parser("phantom", help="Genera fantomas sintéticos")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--extents", type=int, nargs=3, default=[32, 96, 96], metavar=("Z", "Y", "X"))

    p = sub.add_parser("convert", help="Reescribe un volumen MetaImage")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=sorted(DTYPE_FLAGS), default="float")
    p.add_argument("--resample", action="store_true", help="Remuestrea a 1x1x1.5 mm")
    p.add_argument("--normalize", action="store_true", help="Normalización z-score")

    p = sub.add_parser("inspect", help="Conteo de capas y parámetros")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--preset", choices=["paper", "tiny"])
    return parser


def _train_config(args) -> TrainConfig:
    """Archivo de configuración sobrescrito por las banderas"""
    values = {}
    if args.config:
        values.update(load_train_config(args.config).snapshot_values())
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set espera KEY=VALUE, recibido {item}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    overrides = {"steps": args.steps, "seed": args.seed, "batch_size": args.batch_size,
                 "lr": args.lr, "preset": args.preset}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    if args.no_adversarial:
        values["adversarial"] = "false"
    return parse_train_config(values)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.phantoms:
        extents = tuple(max(p, m) for p, m in zip(cfg.patch, MIN_PHANTOM_EXTENTS))
        dataset = volume_service.phantom_generate(cfg.seed, args.phantoms, extents)
        dataset = [volume_service.normalize_zscore(v) for v in dataset]
    elif args.data:
        dataset = volume_service.load_dataset(args.data)
    else:
        raise UsageError("train: se requiere --data o --phantoms")

    if args.cross_validate:
        results = trainer_service.cross_validate(dataset, cfg, args.out, k=args.cross_validate,
                                                 dtype=settings.DEFAULT_DTYPE)
        for result in results:
            mean_dsc, mean_abd, mean_hd = result.mean_whole()
            abd = "n/d" if mean_abd is None else f"{mean_abd:.2f}"
            hd = "n/d" if mean_hd is None else f"{mean_hd:.2f}"
            print(f"fold {result.fold}: dsc {mean_dsc:.3f} abd {abd} hd95 {hd}")
        return EXIT_OK

    result = trainer_service.train(dataset, cfg, args.out, resume=args.resume, dtype=settings.DEFAULT_DTYPE)
    if result.history:
        step, loss_g, loss_d, running = result.history[-1]
        print(f"step {step}: loss_g {loss_g:.4f} loss_d {loss_d:.4f} train_dsc {running:.3f}")
    print(f"checkpoints: {len(result.checkpoints)} en {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, G, _ = checkpoint_service.load_models(args.checkpoint)
    volume = volume_service.read_metaimage(args.input)
    stride = tuple(args.stride) if args.stride else tuple(max(1, p // 2) for p in cfg.patch)
    mask = inference_service.segment_volume(G, volume, cfg.patch, stride, args.threshold, TARGET_SPACING)
    volume_service.write_metaimage(mask, args.out, "MET_UCHAR", values=mask.label)
    print(f"mask: {args.out} ({int(mask.label.sum())} voxels)")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = volume_service.read_metaimage(args.pred)
    gt = volume_service.read_metaimage(args.gt)
    report = metrics_service.evaluate(pred.values > 0, gt.values > 0, gt.spacing, base_at=args.base_at)
    print(report.format_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_phantom(args) -> int:
    out = Path(args.out)
    phantoms = volume_service.phantom_generate(args.seed, args.count, tuple(args.extents))
    for i, volume in enumerate(phantoms):
        volume_service.write_metaimage(volume, out / f"phantom_{i:03d}.mhd")
        volume_service.write_metaimage(volume, out / f"phantom_{i:03d}_label.mhd", "MET_UCHAR",
                                       values=volume.label)
    print(f"{len(phantoms)} fantomas en {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    volume = volume_service.read_metaimage(args.input)
    if args.resample:
        volume = volume_service.resample(volume)
    if args.normalize:
        volume = volume_service.normalize_zscore(volume)
    volume_service.write_metaimage(volume, args.out, DTYPE_FLAGS[args.dtype])
    print(f"{args.input} -> {args.out} ({DTYPE_FLAGS[args.dtype]}, {volume.extents})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        _, G, D = checkpoint_service.load_models(args.checkpoint, with_discriminator=True, materialize=False)
    else:
        G = build_generator(args.preset, materialize=False)
        D = build_discriminator(args.preset, materialize=False)
    summary = network_service.model_summary(G, D)
    print(summary.format_table())
    print(f"Encoder parameters: {count_parameters(G, G.encoder_conv_names()):,} (ResNet-50: 23,507,904)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "phantom": cmd_phantom,
    "convert": cmd_convert,
    "inspect": cmd_inspect,
}


def run(argv: Optional[List[str]] = None) -> int:
    """
    Ejecuta un subcomando

    Returns:
        int: 0 éxito, 1 error de uso o de configuración, 2 error de datos
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("falta el subcomando")
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"✗ {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger.info("=" * 50)
    logger.info(f"{settings.APP_NAME} v{settings.APP_VERSION}: {args.command}")
    logger.info("=" * 50)

    try:
        settings.validate()
        if args.threads < 1:
            raise ConfigError("--threads debe ser >= 1")
        set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"✗ {str(e)}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"✗ Error de configuración: {str(e)}")
        print(f"✗ {str(e)}", file=sys.stderr)
        return EXIT_USAGE
    except (GCANetError, OSError) as e:
        logger.error(f"✗ {type(e).__name__}: {str(e)}")
        print(f"✗ {str(e)}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        logger.error(f"✗ Argumento inválido: {str(e)}")
        print(f"✗ {str(e)}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(run())
