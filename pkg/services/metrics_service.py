"""
Servicio de métricas
DSC, distancia media de borde y Hausdorff 95% en mm, con desglose
whole / base / apex
"""
import logging
from typing import Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from core.errors import DataError, ShapeError
from models import MetricsReport, RegionMetrics

logger = logging.getLogger(__name__)

# conectividad 6 para la extracción de superficie
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _binary(mask) -> np.ndarray:
    return np.asarray(mask) > 0


def _check_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Las máscaras tienen extensiones distintas: {a.shape} vs {b.shape}")


class MetricsService:
    """Métricas de evaluación de segmentaciones binarias"""

    @staticmethod
    def dsc(a, b) -> float:
        """2|a ∩ b| / (|a| + |b|); 1.0 si ambas máscaras están vacías"""
        a, b = _binary(a), _binary(b)
        _check_extents(a, b)
        total = int(a.sum()) + int(b.sum())
        if total == 0:
            return 1.0
        return 2.0 * int(np.logical_and(a, b).sum()) / total

    @staticmethod
    def surface_voxels(mask) -> np.ndarray:
        """
        Vóxeles de primer plano con al menos un vecino 6-conexo de fondo
        (o fuera de la rejilla)

        Returns:
            np.ndarray: Coordenadas (K, 3) en orden (z, y, x)
        """
        m = _binary(mask)
        eroded = ndimage.binary_erosion(m, structure=SIX_CONNECTED, border_value=0)
        return np.argwhere(m & ~eroded)

    @staticmethod
    def surface_distances(a, b, spacing: Tuple[float, float, float]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Distancias euclidianas exactas en mm entre superficies

        Args:
            a, b: Máscaras binarias no vacías
            spacing: Espaciado (z, y, x) en mm

        Returns:
            tuple: (distancias a->b, distancias b->a)

        Raises:
            DataError: Si alguna máscara está vacía
        """
        a, b = _binary(a), _binary(b)
        _check_extents(a, b)
        if not a.any() or not b.any():
            raise DataError("Distancias de superficie indefinidas: máscara vacía")
        scale = np.asarray(spacing, dtype=np.float64)
        pa = MetricsService.surface_voxels(a) * scale
        pb = MetricsService.surface_voxels(b) * scale
        d_ab, _ = cKDTree(pb).query(pa, k=1)
        d_ba, _ = cKDTree(pa).query(pb, k=1)
        return np.asarray(d_ab, dtype=np.float64), np.asarray(d_ba, dtype=np.float64)

    @staticmethod
    def abd(a, b, spacing: Tuple[float, float, float]) -> float:
        """Media de las distancias bidireccionales concatenadas (mm)"""
        d_ab, d_ba = MetricsService.surface_distances(a, b, spacing)
        return float(np.concatenate([d_ab, d_ba]).mean())

    @staticmethod
    def hd95(a, b, spacing: Tuple[float, float, float]) -> float:
        """Máximo de los dos percentiles 95 dirigidos, con interpolación lineal (mm)"""
        d_ab, d_ba = MetricsService.surface_distances(a, b, spacing)
        return float(max(np.percentile(d_ab, 95, method="linear"), np.percentile(d_ba, 95, method="linear")))

    @staticmethod
    def region_split(gt, base_at: str = "high") -> Tuple[range, range]:
        """
        Tercios de los cortes z con primer plano: base (superior) y ápex (inferior)

        Args:
            gt: Máscara de referencia no vacía
            base_at: "high" si la base está en los z mayores, "low" en caso contrario

        Returns:
            tuple: (rango de cortes de la base, rango de cortes del ápex)

        Raises:
            DataError: Si la referencia está vacía
        """
        m = _binary(gt)
        slices = np.flatnonzero(m.any(axis=(1, 2)))
        if slices.size == 0:
            raise DataError("region_split: la referencia está vacía")
        z0, z1 = int(slices[0]), int(slices[-1])
        third = max(1, (z1 - z0 + 1) // 3)
        high = range(z1 - third + 1, z1 + 1)
        low = range(z0, z0 + third)
        if base_at == "high":
            return high, low
        if base_at == "low":
            return low, high
        raise ValueError(f"base_at debe ser 'high' o 'low', recibido {base_at}")

    @staticmethod
    def region_metrics(pred, gt, spacing: Tuple[float, float, float]) -> RegionMetrics:
        p, g = _binary(pred), _binary(gt)
        score = MetricsService.dsc(p, g)
        if not p.any() or not g.any():
            return RegionMetrics(dsc=score, abd=None, hd95=None, distances_defined=False)
        d_ab, d_ba = MetricsService.surface_distances(p, g, spacing)
        return RegionMetrics(
            dsc=score,
            abd=float(np.concatenate([d_ab, d_ba]).mean()),
            hd95=float(max(np.percentile(d_ab, 95, method="linear"), np.percentile(d_ba, 95, method="linear"))),
        )

    @staticmethod
    def evaluate(pred, gt, spacing: Tuple[float, float, float], base_at: str = "high") -> MetricsReport:
        """
        Reporte completo whole / base / apex

        Una predicción vacía se reporta con dsc 0 y distancias marcadas como indefinidas.
        Con la referencia vacía no hay base ni ápex: las tres filas repiten el dsc
        global (1 si ambas están vacías, 0 si no) sin distancias.

        Raises:
            ShapeError: Si las extensiones difieren
        """
        p, g = _binary(pred), _binary(gt)
        _check_extents(p, g)
        if not g.any():
            logger.warning("Referencia vacía: sin regiones base/ápex ni distancias")
            whole = MetricsService.region_metrics(p, g, spacing)
            return MetricsReport(whole=whole, base=whole, apex=whole,
                                 spacing=tuple(float(s) for s in spacing))
        base, apex = MetricsService.region_split(g, base_at)

        def restrict(mask: np.ndarray, zs: range) -> np.ndarray:
            out = np.zeros_like(mask)
            out[zs.start:zs.stop] = mask[zs.start:zs.stop]
            return out

        report = MetricsReport(
            whole=MetricsService.region_metrics(p, g, spacing),
            base=MetricsService.region_metrics(restrict(p, base), restrict(g, base), spacing),
            apex=MetricsService.region_metrics(restrict(p, apex), restrict(g, apex), spacing),
            spacing=tuple(float(s) for s in spacing),
        )
        if not report.whole.distances_defined:
            logger.warning("Predicción vacía: distancias indefinidas")
        return report


# Instancia global del servicio
metrics_service = MetricsService()

dsc = metrics_service.dsc
surface_voxels = metrics_service.surface_voxels
surface_distances = metrics_service.surface_distances
abd = metrics_service.abd
hd95 = metrics_service.hd95
region_split = metrics_service.region_split
evaluate = metrics_service.evaluate
