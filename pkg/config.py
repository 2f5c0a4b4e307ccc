"""
Configuración de GCA-Net
Gestiona las variables de entorno y los archivos de configuración de entrenamiento
"""
import os
from pathlib import Path
from typing import Dict, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from core.errors import ConfigError
from models import TrainConfig

# Cargar variables de entorno desde .env
load_dotenv()


class Settings:
    """Configuración centralizada de la aplicación"""

    APP_NAME: str = os.getenv("GCANET_APP_NAME", "GCA-Net")
    APP_VERSION: str = "1.0.0"
    APP_DESCRIPTION: str = "Segmentación 3D de próstata en RM con red adversarial GCA-Net (CPU)"

    LOG_LEVEL: str = os.getenv("GCANET_LOG_LEVEL", "INFO").upper()

    # Hilos de los kernels de convolución
    THREADS: int = int(os.getenv("GCANET_THREADS", str(os.cpu_count() or 1)))

    DEFAULT_DTYPE: str = os.getenv("GCANET_DEFAULT_DTYPE", "f32")
    LOG_EVERY: int = int(os.getenv("GCANET_LOG_EVERY", "10"))

    def validate(self) -> bool:
        """Valida los valores tomados del entorno"""
        if self.THREADS < 1:
            raise ConfigError("GCANET_THREADS debe ser >= 1")
        if self.DEFAULT_DTYPE not in ("f32", "f64"):
            raise ConfigError(f"GCANET_DEFAULT_DTYPE debe ser f32 o f64, no {self.DEFAULT_DTYPE}")
        if self.LOG_EVERY < 1:
            raise ConfigError("GCANET_LOG_EVERY debe ser >= 1")
        return True


def parse_train_config(values: Dict[str, str]) -> TrainConfig:
    """
    Valida pares key=value como TrainConfig

    Sin log_every se usa GCANET_LOG_EVERY

    Raises:
        ConfigError: Clave desconocida o valor inválido
    """
    known = set(TrainConfig.model_fields) | {"lambda"}
    for key in values:
        base = key.split(".", 1)[0]
        if base not in known:
            raise ConfigError(f"Clave de configuración desconocida: {key}")
    if "log_every" not in values:
        values = {**values, "log_every": str(settings.LOG_EVERY)}
    try:
        return TrainConfig.from_flat({k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"Configuración inválida en '{location}': {first['msg']}") from e


def parse_config_text(text: str) -> TrainConfig:
    """Lee el formato key=value de una instantánea de configuración"""
    values: Dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Línea de configuración sin '=': {line}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return parse_train_config(values)


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """
    Carga un archivo de configuración plano key=value

    Raises:
        ConfigError: Archivo inexistente o configuración inválida
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"No existe el archivo de configuración: {path}")
    return parse_train_config(dict(dotenv_values(path, interpolate=False)))


# Instancia global de configuración
settings = Settings()
