"""
filters.py — Operador de observação g e filtros auxiliares.

Todos os filtros aceitam arrays [..., H, W]: um campo [2, H, W] ou um lote
[n, 2, H, W]. As bordas são periódicas (os dados sintéticos são periódicos),
exceto no box filter, que não precisa de borda.
"""

from __future__ import annotations

import math

import numpy as np

from errors import FieldShapeError


def _check_delta(field: np.ndarray, delta: int) -> None:
    if delta < 1:
        raise FieldShapeError(f"delta deve ser >= 1, recebido {delta}")
    if field.ndim < 2:
        raise FieldShapeError(f"campo precisa de pelo menos 2 dimensões, forma {field.shape}")
    H, W = field.shape[-2:]
    if H % delta or W % delta:
        raise FieldShapeError(
            f"dimensões {H}×{W} não são divisíveis por delta={delta}"
        )


# ── Box filter + coarsening ───────────────────────────────────────────────────

def box_filter_coarsen(hr: np.ndarray, delta: int) -> np.ndarray:
    """Média de cada bloco Δ×Δ, por canal: [..., H, W] → [..., H/Δ, W/Δ].

    A média é ancorada no primeiro pixel do bloco: bloco constante devolve
    exatamente o seu valor, então g(up(lr)) == lr bit a bit.
    """
    hr = np.asarray(hr, dtype=np.float64)
    _check_delta(hr, delta)
    H, W = hr.shape[-2:]
    blocos = hr.reshape(*hr.shape[:-2], H // delta, delta, W // delta, delta)
    ancora = blocos[..., :, :1, :, :1]
    return ancora[..., :, 0, :, 0] + (blocos - ancora).mean(axis=(-3, -1))


def upsample_nearest(lr: np.ndarray, delta: int) -> np.ndarray:
    """Replica cada valor LR sobre o seu bloco Δ×Δ: [..., h, w] → [..., hΔ, wΔ]."""
    lr = np.asarray(lr, dtype=np.float64)
    if delta < 1:
        raise FieldShapeError(f"delta deve ser >= 1, recebido {delta}")
    if lr.ndim < 2:
        raise FieldShapeError(f"campo precisa de pelo menos 2 dimensões, forma {lr.shape}")
    return np.repeat(np.repeat(lr, delta, axis=-2), delta, axis=-1)


# ── Filtro gaussiano (baselines clássicos) ───────────────────────────────────

def gaussian_weights(delta: float) -> np.ndarray:
    """Pesos 1D do kernel G ∝ exp(−6 d²/Δ²), truncado em ⌈1.5Δ⌉ e normalizado.

    O kernel 2D é o produto externo destes pesos (G é separável), então a soma
    2D também é 1.
    """
    if delta < 1:
        raise FieldShapeError(f"delta deve ser >= 1, recebido {delta}")
    raio = math.ceil(1.5 * delta)
    d = np.arange(-raio, raio + 1, dtype=np.float64)
    w = np.exp(-6.0 * d**2 / float(delta) ** 2)
    return w / w.sum()


def gaussian_kernel(delta: float) -> np.ndarray:
    """Kernel 2D discreto (2R+1)×(2R+1), pesos não negativos somando 1."""
    w = gaussian_weights(delta)
    return np.outer(w, w)


def _periodic_transfer_1d(n: int, delta: float) -> np.ndarray:
    # Enrola os pesos no círculo de n pontos; kernel simétrico → FFT real.
    w = gaussian_weights(delta)
    raio = (len(w) - 1) // 2
    circ = np.zeros(n)
    np.add.at(circ, np.arange(-raio, raio + 1) % n, w)
    return np.fft.fft(circ).real


def gaussian_transfer(shape: tuple[int, int], delta: float) -> np.ndarray:
    """Função de transferência [H, W] do filtro gaussiano periódico discreto."""
    H, W = shape
    return np.outer(_periodic_transfer_1d(H, delta), _periodic_transfer_1d(W, delta))


def gaussian_filter(hr: np.ndarray, delta: float) -> np.ndarray:
    """Convolução periódica com o kernel gaussiano truncado. Sem coarsening."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim < 2:
        raise FieldShapeError(f"campo precisa de pelo menos 2 dimensões, forma {hr.shape}")
    t = gaussian_transfer(hr.shape[-2:], delta)
    return np.fft.ifft2(np.fft.fft2(hr) * t).real


# ── Laplaciano ────────────────────────────────────────────────────────────────

def laplacian(field: np.ndarray) -> np.ndarray:
    """Estêncil de 5 pontos, bordas periódicas, espaçamento unitário."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim < 2:
        raise FieldShapeError(f"campo precisa de pelo menos 2 dimensões, forma {f.shape}")
    return (
        np.roll(f, 1, axis=-2) + np.roll(f, -1, axis=-2)
        + np.roll(f, 1, axis=-1) + np.roll(f, -1, axis=-1)
        - 4.0 * f
    )


def box_up(field: np.ndarray, delta: int) -> np.ndarray:
    """up∘g: o box filter visto como operador HR→HR (idempotente)."""
    return upsample_nearest(box_filter_coarsen(field, delta), delta)
