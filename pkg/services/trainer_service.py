"""
Servicio de entrenamiento
Alterna actualizaciones del discriminador y del generador, escribe
checkpoints y el registro de métricas, y ofrece la validación cruzada
"""
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import DataError, DivergenceError
from core.tensor import Tensor, backward
from models import FoldResult, LossWeights, TrainConfig
from services.checkpoint_service import checkpoint_service
from services.inference_service import inference_service
from services.loss_service import AdamState, loss_service
from services.metrics_service import metrics_service
from services.network_service import Discriminator, Generator, build_discriminator, build_generator
from services.volume_service import Volume, volume_service

logger = logging.getLogger(__name__)

METRICS_HEADER = "step,loss_g,loss_d,train_dsc"
DSC_MOMENTUM = 0.9


def checkpoint_name(step: int) -> str:
    return f"checkpoint_{step:06d}.gcan"


class TrainingState:
    """Todo el estado mutable de un entrenamiento"""

    def __init__(self, G: Generator, D: Discriminator, cfg: TrainConfig):
        self.G = G
        self.D = D
        self.cfg = cfg
        adam_kwargs = dict(lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.adam_g = AdamState.for_params(G.params, **adam_kwargs)
        self.adam_d = AdamState.for_params(D.params, **adam_kwargs)
        self.step = 0
        self.running_dsc: Optional[float] = None

    @classmethod
    def fresh(cls, cfg: TrainConfig, dtype: str = "f32") -> "TrainingState":
        G = build_generator(cfg.preset, cfg.gc_kernel, seed=cfg.seed, dtype=dtype)
        D = build_discriminator(cfg.preset, seed=cfg.seed + 1, dtype=dtype)
        return cls(G, D, cfg)

    def rng_state(self) -> dict:
        return {"seed": self.cfg.seed, "next_step": self.step, "running_dsc": self.running_dsc}

    def checkpoint(self):
        return checkpoint_service.capture(self.G, self.D, self.adam_g, self.adam_d, self.step,
                                          self.cfg.snapshot(), self.rng_state())


class TrainResult:
    """Modelos entrenados, historial por paso y checkpoints escritos"""

    def __init__(self, state: TrainingState, history: List[Tuple[int, float, float, float]],
                 checkpoints: List[Path]):
        self.state = state
        self.G = state.G
        self.D = state.D
        self.history = history
        self.checkpoints = checkpoints


def _format_row(step: int, loss_g: float, loss_d: float, dsc: float) -> str:
    return f"{step},{loss_g:.9g},{loss_d:.9g},{dsc:.6f}"


class TrainerService:
    """Orquestación del entrenamiento adversarial"""

    @staticmethod
    def make_batch(dataset: Sequence[Volume], cfg: TrainConfig, step: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Lote del paso indicado: muestreo de parches y aumento

        Cada paso usa su propio generador (semilla, paso), así que el lote no
        depende de qué productor lo arme ni de cuándo
        """
        rng = np.random.default_rng([cfg.seed, step])
        images, labels = [], []
        for _ in range(cfg.batch_size):
            volume = dataset[int(rng.integers(len(dataset)))]
            image, label = volume_service.sample_patch(volume, cfg.patch, rng, cfg.force_fg_fraction)
            image, label = volume_service.augment(image, label, cfg.augment, rng)
            images.append(image)
            labels.append(label)
        return np.stack(images).astype(np.float32), np.stack(labels).astype(np.uint8)

    @staticmethod
    def _train_step(G: Generator, D: Discriminator, cfg: TrainConfig, adam_g: AdamState, adam_d: AdamState,
                    batch: Tuple[np.ndarray, np.ndarray], step: int) -> Tuple[float, float, Tensor]:
        images, labels = batch
        x = Tensor(images[:, np.newaxis], dtype=G.dtype)
        y = Tensor(labels[:, np.newaxis], dtype=G.dtype)

        G.train()
        prediction = G.forward(x)

        loss_d_value = 0.0
        if cfg.adversarial:
            for _ in range(cfg.d_steps_per_g):
                D.zero_grad()
                loss_d = loss_service.discriminator_loss(G, D, x, y, prediction=prediction)
                loss_d_value = loss_d.item()
                if not math.isfinite(loss_d_value):
                    raise DivergenceError(step, f"loss_D no finita ({loss_d_value})")
                backward(loss_d)
                loss_service.adam_step(adam_d, D.params)

        w_fg, w_bg = loss_service.class_weights(labels)
        weights = LossWeights(lambda_=cfg.lambda_, w_fg=w_fg, w_bg=w_bg)
        G.zero_grad()
        loss_g = loss_service.generator_loss(G, D if cfg.adversarial else None, x, y, weights,
                                             prediction=prediction)
        loss_g_value = loss_g.item()
        if not math.isfinite(loss_g_value):
            raise DivergenceError(step, f"loss_G no finita ({loss_g_value})")
        backward(loss_g)
        loss_service.adam_step(adam_g, G.params)
        return loss_g_value, loss_d_value, prediction

    @staticmethod
    def train_step(G: Generator, D: Discriminator, batch: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
                   states: Tuple[AdamState, AdamState], step: int = 0) -> Tuple[float, float]:
        """
        Un paso: actualización de D (pérdida adversarial) y luego de G (pérdida híbrida)

        Args:
            G, D: Modelos
            batch: (imágenes, etiquetas) de forma (N, Z, Y, X)
            cfg: Configuración
            states: (Adam de G, Adam de D)
            step: Número de paso, para el mensaje de divergencia

        Returns:
            tuple: (loss_G, loss_D); loss_D es 0 sin discriminador

        Raises:
            DivergenceError: Si alguna pérdida no es finita
        """
        adam_g, adam_d = states
        loss_g, loss_d, _ = TrainerService._train_step(G, D, cfg, adam_g, adam_d, batch, step)
        return loss_g, loss_d

    @staticmethod
    def _batches(dataset: Sequence[Volume], cfg: TrainConfig, start: int, stop: int):
        """Productores concurrentes con cola acotada; el consumo respeta el orden de pasos"""
        with ThreadPoolExecutor(max_workers=cfg.prefetch) as pool:
            pending = deque()
            next_step = start
            while next_step < stop and len(pending) < cfg.prefetch:
                pending.append(pool.submit(TrainerService.make_batch, dataset, cfg, next_step))
                next_step += 1
            while pending:
                batch = pending.popleft().result()
                if next_step < stop:
                    pending.append(pool.submit(TrainerService.make_batch, dataset, cfg, next_step))
                    next_step += 1
                yield batch

    @staticmethod
    def _prepare_log(log_path: Path, step: int) -> None:
        """Deja el registro con la cabecera y las filas hasta el paso indicado"""
        rows = []
        if step > 0 and log_path.is_file():
            for line in log_path.read_text().splitlines()[1:]:
                if line and int(line.split(",", 1)[0]) <= step:
                    rows.append(line)
        log_path.write_text("".join(f"{line}\n" for line in [METRICS_HEADER] + rows))

    @staticmethod
    def train(dataset: Sequence[Volume], cfg: TrainConfig, out_dir: Union[str, Path],
              resume: Optional[Union[str, Path]] = None, dtype: str = "f32") -> TrainResult:
        """
        Entrenamiento completo: muestreo -> aumento -> train_step

        Escribe checkpoint_{paso}.gcan cada checkpoint_every pasos (y al
        inicio y al final) y metrics.csv con una fila por paso

        Args:
            dataset: Volúmenes con etiqueta
            cfg: Configuración
            out_dir: Directorio de salida
            resume: Checkpoint desde el que continuar

        Raises:
            DataError: Si el dataset está vacío o sin etiquetas
            DivergenceError: Si alguna pérdida deja de ser finita
        """
        if not dataset:
            raise DataError("El dataset de entrenamiento está vacío")
        if any(v.label is None for v in dataset):
            raise DataError("Todos los volúmenes de entrenamiento necesitan etiqueta")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.csv"

        state = TrainingState.fresh(cfg, dtype)
        if resume is not None:
            ckpt = checkpoint_service.load_checkpoint(resume)
            if ckpt.config != cfg.snapshot():
                logger.warning("La configuración difiere de la guardada en el checkpoint")
            checkpoint_service.restore(ckpt, state.G, state.D, state.adam_g, state.adam_d)
            state.step = ckpt.step
            state.running_dsc = ckpt.rng.get("running_dsc")
            logger.info(f"Reanudando desde el paso {state.step} ({resume})")

        logger.info("=" * 50)
        logger.info(
            f"Entrenamiento: {len(dataset)} volúmenes, pasos {state.step}->{cfg.steps}, "
            f"preset {cfg.preset}, adversarial={cfg.adversarial}"
        )
        logger.info("=" * 50)

        TrainerService._prepare_log(log_path, state.step)
        checkpoints: List[Path] = []
        if resume is None:
            checkpoints.append(checkpoint_service.save_checkpoint(out_dir / checkpoint_name(0), state.checkpoint()))

        history: List[Tuple[int, float, float, float]] = []
        with log_path.open("a") as log:
            for batch in TrainerService._batches(dataset, cfg, state.step, cfg.steps):
                try:
                    loss_g, loss_d, prediction = TrainerService._train_step(
                        state.G, state.D, cfg, state.adam_g, state.adam_d, batch, state.step
                    )
                except DivergenceError as e:
                    logger.error(f"✗ {str(e)}")
                    raise
                state.step += 1
                batch_dsc = metrics_service.dsc(prediction.data[:, 0] >= 0.5, batch[1])
                state.running_dsc = batch_dsc if state.running_dsc is None else (
                    DSC_MOMENTUM * state.running_dsc + (1.0 - DSC_MOMENTUM) * batch_dsc
                )
                history.append((state.step, loss_g, loss_d, state.running_dsc))
                log.write(_format_row(state.step, loss_g, loss_d, state.running_dsc) + "\n")
                log.flush()

                if state.step % cfg.log_every == 0:
                    logger.info(
                        f"Paso {state.step}/{cfg.steps}: loss_G={loss_g:.4f} loss_D={loss_d:.4f} "
                        f"DSC={state.running_dsc:.3f}"
                    )
                if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                    path = out_dir / checkpoint_name(state.step)
                    checkpoints.append(checkpoint_service.save_checkpoint(path, state.checkpoint()))

        logger.info(f"✓ Entrenamiento terminado en el paso {state.step}")
        return TrainResult(state, history, checkpoints)

    @staticmethod
    def kfold_split(n_items: int, k: int = 4, seed: int = 0) -> List[List[int]]:
        """
        Partición aleatoria en k grupos disjuntos de tamaños que difieren en a lo sumo 1

        Raises:
            ValueError: Si n_items < k
        """
        if k < 1 or n_items < k:
            raise ValueError(f"No se pueden formar {k} grupos con {n_items} elementos")
        perm = np.random.default_rng(seed).permutation(n_items)
        return [sorted(int(i) for i in group) for group in np.array_split(perm, k)]

    @staticmethod
    def cross_validate(dataset: Sequence[Volume], cfg: TrainConfig, out_dir: Union[str, Path], k: int = 4,
                       stride: Optional[Tuple[int, int, int]] = None, dtype: str = "f32") -> List[FoldResult]:
        """
        Validación cruzada de k pliegues: entrena con k-1 grupos y evalúa el
        grupo restante por ventana deslizante

        Returns:
            list: Un FoldResult por pliegue
        """
        groups = TrainerService.kfold_split(len(dataset), k, cfg.seed)
        stride = stride or tuple(max(1, p // 2) for p in cfg.patch)
        results = []
        for fold, test_indices in enumerate(groups):
            train_indices = [i for g in groups if g is not test_indices for i in g]
            logger.info(f"Pliegue {fold + 1}/{k}: {len(train_indices)} entrenamiento, {len(test_indices)} prueba")
            trained = TrainerService.train([dataset[i] for i in train_indices], cfg,
                                           Path(out_dir) / f"fold_{fold}", dtype=dtype)
            reports = []
            for i in test_indices:
                volume = dataset[i]
                prob = inference_service.sliding_window_predict(trained.G, volume, cfg.patch, stride)
                mask = inference_service.threshold_mask(prob.values)
                reports.append(metrics_service.evaluate(mask, volume.label, volume.spacing))
            result = FoldResult(fold=fold, train_indices=sorted(train_indices),
                                test_indices=test_indices, reports=reports)
            mean_dsc, _, mean_hd = result.mean_whole()
            logger.info(f"Pliegue {fold + 1}: DSC medio {mean_dsc:.3f}"
                        + (f", 95%HD medio {mean_hd:.2f} mm" if mean_hd is not None else ""))
            results.append(result)
        return results


# Instancia global del servicio
trainer_service = TrainerService()

train_step = trainer_service.train_step
train = trainer_service.train
kfold_split = trainer_service.kfold_split
cross_validate = trainer_service.cross_validate
