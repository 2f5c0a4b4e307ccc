# Inicializar el paquete de servicios (red, pérdidas, volúmenes, entrenamiento, inferencia y métricas)
