"""
errors.py — Exceções compartilhadas por todos os módulos.

A CLI captura SrDivError (e OSError) e transforma em uma linha "ERRO: ..."
com código de saída 1. Qualquer outra exceção é bug e deve estourar.
"""

from __future__ import annotations


class SrDivError(Exception):
    """Base de todos os erros de domínio do projeto."""


class FieldShapeError(SrDivError, ValueError):
    """Campo com forma incompatível (canais, divisibilidade por Δ, lotes)."""


class DatasetFormatError(SrDivError):
    """Arquivo CGF1/CGM1/CGN1/CGG1 inválido.

    As mensagens começam por uma etiqueta estável — "bad magic",
    "truncated payload", "dimension overflow" — seguida do detalhe.
    """


class MomentFitError(SrDivError):
    """Sistema normal singular mesmo com ridge: dado degenerado."""


class OracleError(SrDivError):
    """GCGᵀ mal condicionado: espectro degenerado."""


class NonFiniteError(SrDivError, FloatingPointError):
    """Ativação, gradiente ou perda não finita."""


class TapeReuseError(SrDivError):
    """Tape consumida mais de uma vez no backward."""


class TrainingDivergedError(NonFiniteError):
    """Treino produziu perda não finita; carrega o diagnóstico do passo."""


class MissingMomentsError(SrDivError):
    """Dataset sem campos de momento anexados onde eles são obrigatórios."""


class MetricUndefinedError(SrDivError, ValueError):
    """Métrica sem definição (σ de referência nulo, ‖ξ̄‖ = 0, ζ constante)."""
