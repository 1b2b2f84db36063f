"""
deconv_classic.py — Baselines clássicos de deconvolução (uma saída por entrada).

  - ADM: ξ ≈ ξ̄ + Σᵢ₌₁ⁿ (I−g)ⁱ ξ̄, série de Neumann truncada (n=5 por padrão);
  - Taylor: ξ ≈ ξ̄ − (Δ²/24)·∇²ξ̄, primeiro termo da expansão.

O ADM aceita qualquer operador HR→HR. Com o box filter (embrulhado como
up∘g, idempotente) o procedimento degenera: (I−g)ξ̄ = 0 e a saída é a própria
entrada. Para comparação use o filtro gaussiano, sem coarsening.
"""

from __future__ import annotations

from functools import partial
from typing import Callable

import numpy as np

from filters import box_up, gaussian_filter, laplacian

DEFAULT_ADM_TERMS = 5

FilterOp = Callable[[np.ndarray], np.ndarray]


def adm_deconvolve(filtered: np.ndarray, filter_op: FilterOp, n: int = DEFAULT_ADM_TERMS) -> np.ndarray:
    """Inversa aproximada por série de Neumann truncada em n termos."""
    if n < 0:
        raise ValueError(f"n deve ser >= 0, recebido {n}")
    xbar = np.asarray(filtered, dtype=np.float64)
    saida = xbar.copy()
    termo = xbar
    for _ in range(n):
        termo = termo - filter_op(termo)
        saida = saida + termo
    return saida


def taylor_deconvolve(filtered: np.ndarray, delta: float) -> np.ndarray:
    """ξ̄ − (Δ²/24)·∇²ξ̄ com o laplaciano periódico de 5 pontos."""
    xbar = np.asarray(filtered, dtype=np.float64)
    return xbar - (float(delta) ** 2 / 24.0) * laplacian(xbar)


def gaussian_op(delta: float) -> FilterOp:
    return partial(gaussian_filter, delta=delta)


def box_op(delta: int) -> FilterOp:
    return partial(box_up, delta=delta)
