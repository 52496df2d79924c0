# core/errors.py
"""Jerarquía de errores del motor de refinamiento.

Cada error tiene un ``code`` estable que la CLI imprime en su línea de error.
"""
from typing import Optional


class PoseRefineError(Exception):
    """Error base del paquete"""

    code = "PoseRefineError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class DegenerateInput(PoseRefineError):
    code = "DegenerateInput"


class DegenerateConfiguration(PoseRefineError):
    code = "DegenerateConfiguration"


class InvalidDepth(PoseRefineError):
    code = "InvalidDepth"


class NearPiRotation(PoseRefineError):
    code = "NearPiRotation"


class ParseError(PoseRefineError):
    """Error de lectura de malla con ruta y posición (línea u offset en bytes)"""

    code = "ParseError"

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, offset: Optional[int] = None):
        location = []
        if path:
            location.append(str(path))
        if line is not None:
            location.append(f"line {line}")
        if offset is not None:
            location.append(f"offset {offset}")
        prefix = f"{':'.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.path = path
        self.line = line
        self.offset = offset


class EmptyMesh(PoseRefineError):
    code = "EmptyMesh"


class OutOfView(PoseRefineError):
    code = "OutOfView"


class DimensionMismatch(PoseRefineError):
    code = "DimensionMismatch"


class ShapeMismatch(PoseRefineError):
    code = "ShapeMismatch"


class TooFewValidPixels(PoseRefineError):
    code = "TooFewValidPixels"


class TooFewCells(PoseRefineError):
    code = "TooFewCells"


class TooFewCorrespondences(PoseRefineError):
    code = "TooFewCorrespondences"


class NoConsensus(PoseRefineError):
    code = "NoConsensus"


class EmptyMask(PoseRefineError):
    code = "EmptyMask"


class LengthMismatch(PoseRefineError):
    code = "LengthMismatch"


class EmptyUnion(PoseRefineError):
    code = "EmptyUnion"


class EmptyDataset(PoseRefineError):
    code = "EmptyDataset"


class MissingFile(PoseRefineError):
    code = "MissingFile"

    def __init__(self, path):
        super().__init__(f"no existe el archivo {path}")
        self.path = str(path)


class MalformedJson(PoseRefineError):
    code = "MalformedJson"

    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)


class ConfigError(PoseRefineError):
    code = "ConfigError"
