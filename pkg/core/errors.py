"""
Jerarquía de errores de GCA-Net
Todas las fallas de dominio heredan de GCANetError para que la CLI
pueda traducirlas a códigos de salida
"""


class GCANetError(Exception):
    """Error base de la aplicación"""


class ShapeError(GCANetError, ValueError):
    """Forma, geometría o número de canales incompatible"""


class NumericError(GCANetError, ValueError):
    """Valores no finitos, parámetros numéricos inválidos o entrada degenerada"""


class DataError(GCANetError, ValueError):
    """Volumen, archivo o conjunto de datos inválido"""


class CheckpointError(GCANetError, ValueError):
    """Checkpoint corrupto, de otra versión o incompatible con la configuración"""


class ConfigError(GCANetError, ValueError):
    """Archivo de configuración o flags inválidos"""


class DivergenceError(GCANetError, RuntimeError):
    """El entrenamiento produjo una pérdida no finita"""

    def __init__(self, step: int, message: str):
        super().__init__(f"Paso {step}: {message}")
        self.step = step
