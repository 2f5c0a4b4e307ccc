"""
Servicio de pérdidas y optimización
Entropía cruzada ponderada, pérdida adversarial sobre logits y Adam
"""
import logging
import math
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from core.errors import NumericError, ShapeError
from core.tensor import Tensor, _stable_sigmoid, apply_op, frozen, no_grad, pairwise_sum
from models import LossWeights

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
WEIGHT_RANGE = (0.1, 10.0)


def _labels(y: Union[Tensor, np.ndarray]) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y)


class AdamState:
    """Momentos por parámetro, contador de pasos e hiperparámetros de Adam"""

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.exp_avg: Dict[str, np.ndarray] = {}
        self.exp_avg_sq: Dict[str, np.ndarray] = {}

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        return state

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.exp_avg:
            out[f"{name}.exp_avg"] = self.exp_avg[name]
            out[f"{name}.exp_avg_sq"] = self.exp_avg_sq[name]
        return out


class LossService:
    """Pérdida híbrida (entropía cruzada ponderada + adversarial) y optimizador"""

    @staticmethod
    def class_weights(y: Union[Tensor, np.ndarray]) -> Tuple[float, float]:
        """
        Pesos por clase calculados sobre el batch

        Args:
            y: Etiquetas binarias

        Returns:
            tuple: (w_fg, w_bg) con w_c = N / (2 N_c) recortado a [0.1, 10];
                   una clase ausente recibe peso 1
        """
        data = _labels(y)
        total = data.size
        n_fg = int(np.count_nonzero(data))
        n_bg = total - n_fg

        def weight(count: int) -> float:
            if count == 0:
                return 1.0
            return float(np.clip(total / (2.0 * count), *WEIGHT_RANGE))

        if n_fg == 0:
            logger.debug("Batch sin primer plano: w_fg = 1")
        return weight(n_fg), weight(n_bg)

    @staticmethod
    def weighted_bce(p: Tensor, y: Union[Tensor, np.ndarray], weights: Tuple[float, float] = (1.0, 1.0)) -> Tensor:
        """
        Entropía cruzada binaria ponderada, media sobre vóxeles

        Args:
            p: Probabilidades en (0, 1)
            y: Etiquetas {0, 1} con la misma forma
            weights: (w_fg, w_bg)

        Returns:
            Tensor: Escalar; los argumentos del logaritmo se recortan a 1e-7

        Raises:
            ShapeError: Si las formas difieren
        """
        labels = _labels(y)
        if p.shape != labels.shape:
            raise ShapeError(f"weighted_bce: probabilidades {p.shape} y etiquetas {labels.shape} difieren")
        w_fg, w_bg = weights
        dtype = p.data.dtype
        y_ = labels.astype(dtype, copy=False)
        pc = np.clip(p.data, LOG_CLAMP, 1.0 - LOG_CLAMP)
        terms = -(w_fg * y_ * np.log(pc) + w_bg * (1.0 - y_) * np.log(1.0 - pc))
        n = terms.size
        value = np.asarray(pairwise_sum(terms.reshape(-1)) / n, dtype=dtype)
        inside = (p.data >= LOG_CLAMP) & (p.data <= 1.0 - LOG_CLAMP)

        def _backward(g):
            dp = -(w_fg * y_ / pc - w_bg * (1.0 - y_) / (1.0 - pc)) * inside
            return (dp * (g / n),)

        return apply_op("weighted_bce", value, [p], _backward)

    @staticmethod
    def gan_bce(logit: Tensor, target: bool) -> Tensor:
        """
        Entropía cruzada binaria estable sobre logits, media sobre el batch

        Raises:
            NumericError: Si algún logit no es finito
        """
        z = logit.data
        if not np.all(np.isfinite(z)):
            raise NumericError("gan_bce: logits no finitos")
        sign = -1.0 if target else 1.0
        # softplus(sign * z)
        s = sign * z
        terms = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
        n = terms.size
        value = np.asarray(pairwise_sum(terms.reshape(-1)) / n, dtype=z.dtype)

        def _backward(g):
            return ((sign * _stable_sigmoid(s) * (g / n)).astype(z.dtype),)

        return apply_op("gan_bce", value, [logit], _backward)

    @staticmethod
    def generator_loss(G, D, x: Tensor, y: Union[Tensor, np.ndarray], weights: LossWeights,
                       prediction: Optional[Tensor] = None) -> Tensor:
        """
        lambda * weighted_bce(G(x), y) + gan_bce(D(G(x), x), verdadero)

        Los parámetros de D quedan congelados: esta pérdida no les da gradiente.
        Con D = None solo queda el término de entropía cruzada.

        Args:
            prediction: G(x) ya calculado en este paso (evita un segundo forward)
        """
        p = prediction if prediction is not None else G.forward(x)
        bce = LossService.weighted_bce(p, y, (weights.w_fg, weights.w_bg))
        loss = bce * weights.lambda_
        if D is None:
            return loss
        with frozen(D.parameters()):
            adversarial = LossService.gan_bce(D.forward(p, x), True)
        return loss + adversarial

    @staticmethod
    def discriminator_loss(G, D, x: Tensor, y: Union[Tensor, np.ndarray],
                           prediction: Optional[Tensor] = None) -> Tensor:
        """
        gan_bce(D(G(x), x), falso) + gan_bce(D(y, x), verdadero)

        G(x) se trata como constante: los parámetros de G no reciben gradiente
        """
        if prediction is None:
            with no_grad():
                prediction = G.forward(x)
        fake = prediction.detach()
        real = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=fake.data.dtype))
        loss_fake = LossService.gan_bce(D.forward(fake, x), False)
        loss_real = LossService.gan_bce(D.forward(real.detach(), x), True)
        return loss_fake + loss_real

    @staticmethod
    def adam_step(state: AdamState, params: Dict[str, Tensor],
                  grads: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, Tensor]:
        """
        Un paso de Adam clásico con corrección de sesgo

        El decaimiento de pesos se suma al gradiente (wd * theta) antes de
        actualizar los momentos. Los parámetros se modifican en el lugar.

        Args:
            state: Estado del optimizador (se crea el momento si falta)
            params: Parámetros por nombre
            grads: Gradientes por nombre; por defecto .grad de cada parámetro

        Raises:
            ShapeError: Si un gradiente no tiene la forma de su parámetro
        """
        state.step += 1
        bias_correction1 = 1.0 - state.beta1 ** state.step
        bias_correction2 = 1.0 - state.beta2 ** state.step
        step_size = state.lr / bias_correction1
        sqrt_bc2 = math.sqrt(bias_correction2)

        for name, p in params.items():
            grad = grads.get(name) if grads is not None else p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            grad = np.asarray(grad, dtype=p.data.dtype)
            if grad.shape != p.shape:
                raise ShapeError(f"adam_step: gradiente {grad.shape} para el parámetro {name} {p.shape}")
            if state.weight_decay != 0:
                grad = grad + state.weight_decay * p.data
            if name not in state.exp_avg:
                state.exp_avg[name] = np.zeros_like(p.data)
                state.exp_avg_sq[name] = np.zeros_like(p.data)
            m = state.beta1 * state.exp_avg[name] + (1.0 - state.beta1) * grad
            v = state.beta2 * state.exp_avg_sq[name] + (1.0 - state.beta2) * grad * grad
            state.exp_avg[name] = m.astype(p.data.dtype, copy=False)
            state.exp_avg_sq[name] = v.astype(p.data.dtype, copy=False)
            denom = np.sqrt(v) / sqrt_bc2 + state.eps
            p.data -= (step_size * m / denom).astype(p.data.dtype, copy=False)
        return params


# Instancia global del servicio
loss_service = LossService()

class_weights = loss_service.class_weights
weighted_bce = loss_service.weighted_bce
gan_bce = loss_service.gan_bce
generator_loss = loss_service.generator_loss
discriminator_loss = loss_service.discriminator_loss
adam_step = loss_service.adam_step
