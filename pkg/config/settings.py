# config/settings.py
import os
import logging
from dotenv import load_dotenv

# Carga las variables del archivo .env (si existe)
load_dotenv()

logger = logging.getLogger(__name__)

# ============================
# Paralelismo
# ============================
# Tope de hilos para render por bandas, benchmarks y evaluación
POSE_REFINE_THREADS = int(os.getenv("POSE_REFINE_THREADS", os.cpu_count() or 1))

# ============================
# Reproducibilidad
# ============================
POSE_REFINE_SEED = int(os.getenv("POSE_REFINE_SEED", 0))

# ============================
# Entradas de profundidad
# ============================
# Multiplicador por defecto para PNG de 16 bits (convención BOP: valor × escala = mm)
POSE_REFINE_DEPTH_SCALE = float(os.getenv("POSE_REFINE_DEPTH_SCALE", 1.0))

# ============================
# Logging configuration
# ============================
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_FILE = os.getenv("LOG_FILE", "")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


# ============================
# Validación final
# ============================
def validate_settings():
    """Valida que las configuraciones críticas tengan valores aceptables"""
    if POSE_REFINE_THREADS < 1:
        raise ValueError(f"❌ POSE_REFINE_THREADS debe ser >= 1 (recibido {POSE_REFINE_THREADS})")

    if POSE_REFINE_DEPTH_SCALE <= 0:
        raise ValueError(f"❌ POSE_REFINE_DEPTH_SCALE debe ser > 0 (recibido {POSE_REFINE_DEPTH_SCALE})")

    if not isinstance(logging.getLevelName(LOG_LEVEL), int):
        raise ValueError(f"❌ LOG_LEVEL desconocido: {LOG_LEVEL}")

    logger.debug("Configuración validada")


# Ejecutar validación al importar
validate_settings()
