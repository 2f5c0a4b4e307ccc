"""
Servicio de inferencia
Predicción de volúmenes completos por ventana deslizante con promedio
de solapamientos, y binarización de la probabilidad
"""
import logging
from typing import Callable, List, Tuple, Union

import numpy as np

from core.layers import apply_along_axis, interpolation_matrix
from core.tensor import Tensor, no_grad
from services.network_service import Generator
from services.volume_service import TARGET_SPACING, Volume, volume_service

logger = logging.getLogger(__name__)

DEFAULT_PATCH = (32, 96, 96)
DEFAULT_STRIDE = (16, 48, 48)

Predictor = Union[Generator, Callable[[np.ndarray], Union[np.ndarray, Tensor]]]


def window_origins(n: int, patch: int, stride: int) -> List[int]:
    """Orígenes múltiplos del stride; el último se ajusta para que la ventana quepa"""
    if n <= patch:
        return [0]
    origins = list(range(0, n - patch + 1, stride))
    if origins[-1] + patch < n:
        origins.append(n - patch)
    return origins


class InferenceService:
    """Inferencia por ventana deslizante"""

    @staticmethod
    def _predict_window(model: Predictor, window: np.ndarray) -> np.ndarray:
        x = window[np.newaxis, np.newaxis]
        if isinstance(model, Generator):
            with no_grad():
                out = model.forward(Tensor(x, dtype=model.dtype))
        else:
            out = model(x)
        out = out.data if isinstance(out, Tensor) else np.asarray(out)
        return out.reshape(window.shape)

    @staticmethod
    def sliding_window_predict(model: Predictor, volume: Union[Volume, np.ndarray],
                               patch: Tuple[int, int, int] = DEFAULT_PATCH,
                               stride: Tuple[int, int, int] = DEFAULT_STRIDE) -> Volume:
        """
        Probabilidad por vóxel: suma de las predicciones de ventana / número de visitas

        Los volúmenes menores que el parche se rellenan con ceros de forma
        simétrica y se recortan tras la predicción. Las ventanas se evalúan
        en un orden fijo (z, y, x lexicográfico).

        Args:
            model: Generador (se evalúa en modo eval) o función ndarray -> probabilidades
            volume: Volumen o rejilla (Z, Y, X)
            patch: Extensiones (z, y, x) de la ventana
            stride: Paso (z, y, x)

        Returns:
            Volume: Probabilidades con la geometría de la entrada
        """
        if not isinstance(volume, Volume):
            volume = Volume(volume)
        padded, region = volume_service.pad_to(volume.values, patch)
        origins = [window_origins(n, p, s) for n, p, s in zip(padded.shape, patch, stride)]

        prob = np.zeros(padded.shape, dtype=np.float64)
        count = np.zeros(padded.shape, dtype=np.int32)
        previous_mode = getattr(model, "mode", None)
        if isinstance(model, Generator):
            model.eval()
        try:
            for oz in origins[0]:
                for oy in origins[1]:
                    for ox in origins[2]:
                        window = (slice(oz, oz + patch[0]), slice(oy, oy + patch[1]), slice(ox, ox + patch[2]))
                        prob[window] += InferenceService._predict_window(model, padded[window])
                        count[window] += 1
        finally:
            if previous_mode == "train":
                model.train()

        n_windows = len(origins[0]) * len(origins[1]) * len(origins[2])
        logger.info(f"Ventana deslizante: {n_windows} ventanas sobre {volume.extents}")
        result = (prob / count)[region]
        return Volume(np.clip(result, 0.0, 1.0).astype(np.float32), volume.spacing, volume.origin,
                      name=volume.name)

    @staticmethod
    def threshold_mask(prob: Union[Volume, np.ndarray], t: float = 0.5) -> Union[Volume, np.ndarray]:
        """
        Máscara binaria: 1 si prob >= t

        Raises:
            ValueError: Si t está fuera de [0, 1]
        """
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"Umbral fuera de [0, 1]: {t}")
        if isinstance(prob, Volume):
            mask = (prob.values >= t).astype(np.uint8)
            return Volume(mask.astype(np.float32), prob.spacing, prob.origin, label=mask, name=prob.name)
        return (np.asarray(prob) >= t).astype(np.uint8)

    @staticmethod
    def to_grid(mask: np.ndarray, source: Volume, target: Volume) -> np.ndarray:
        """Lleva una máscara de la rejilla de source a las extensiones de target (vecino más cercano)"""
        out = mask.astype(np.float64)
        for axis, (n_in, n_out, sp_in, sp_out) in enumerate(
            zip(source.extents, target.extents, source.spacing, target.spacing)
        ):
            if n_in == n_out and sp_in == sp_out:
                continue
            out = apply_along_axis(out, interpolation_matrix(n_in, n_out, sp_out / sp_in, nearest=True), axis)
        return out.astype(np.uint8)

    @staticmethod
    def segment_volume(model: Predictor, volume: Volume, patch: Tuple[int, int, int] = DEFAULT_PATCH,
                       stride: Tuple[int, int, int] = DEFAULT_STRIDE, t: float = 0.5,
                       target_spacing: Tuple[float, float, float] = TARGET_SPACING) -> Volume:
        """
        Remuestreo + z-score, predicción por ventana deslizante, umbral y
        regreso a la rejilla de entrada

        Returns:
            Volume: Máscara {0, 1} con el espaciado y origen de la entrada
        """
        prepared = volume_service.normalize_zscore(volume_service.resample(volume, target_spacing))
        prob = InferenceService.sliding_window_predict(model, prepared, patch, stride)
        mask = InferenceService.threshold_mask(prob.values, t)
        mask = InferenceService.to_grid(mask, prepared, volume)
        logger.info(f"Segmentación de {volume.name or 'volumen'}: {int(mask.sum())} vóxeles de primer plano")
        return Volume(mask.astype(np.float32), volume.spacing, volume.origin, label=mask, name=volume.name)


# Instancia global del servicio
inference_service = InferenceService()

sliding_window_predict = inference_service.sliding_window_predict
threshold_mask = inference_service.threshold_mask
segment_volume = inference_service.segment_volume
